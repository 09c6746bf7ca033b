//! Scenario files, a serial reference executor, the simulator driver and
//! the randomized differential tester behind the `lightning-sim` binary.

pub mod commands;
pub mod fuzz;
pub mod oracle;
pub mod scenario;
pub mod simulate;
