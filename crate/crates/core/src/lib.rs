pub mod apex;
pub mod awg;
pub mod baselines;
pub mod certificate;
pub mod onestep;
pub mod oracle;
pub mod problems;
pub mod projection;
pub mod refsolve;
pub mod restart;
