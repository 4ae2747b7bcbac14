//! Front end of the `smbforge` binary: configuration loading and run modes.

pub mod config;
pub mod run;

pub use config::{load_config, parse_config, ConfigError, Mode, RunConfig};
pub use run::{run, Manifest, RunOptions};
