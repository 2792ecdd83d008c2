//! Command-line surface: config, CSV ingestion, result documents and the
//! `fit` / `simulate` / `version` commands.

pub mod commands;
pub mod config;
pub mod io;
pub mod result;

pub use commands::{cmd_fit, cmd_simulate, exit_code, run, Cli, Command, FitArgs, SimulateArgs};
pub use config::{DesignConfig, FitConfig};
pub use io::{parse_long_csv, read_long_csv};
pub use result::{Estimate, FitResult, ResultDocument};
