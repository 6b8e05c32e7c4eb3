//! One `--flag` per run-config key, e.g. `--max-epochs 20` for `max_epochs`.

use std::path::Path;

use clap::{Arg, ArgMatches, Args, Command, FromArgMatches};
use firesense::config::{RunConfig, KEYS};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides(pub Vec<(&'static str, String)>);

impl FromArgMatches for ConfigOverrides {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let pairs = KEYS
            .iter()
            .filter_map(|&k| m.get_one::<String>(k).map(|v| (k, v.clone())))
            .collect();
        Ok(Self(pairs))
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for ConfigOverrides {
    fn augment_args(cmd: Command) -> Command {
        KEYS.iter().fold(cmd, |cmd, &k| {
            cmd.arg(
                Arg::new(k)
                    .long(k.replace('_', "-"))
                    .value_name("VALUE")
                    .help_heading("Config overrides"),
            )
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

/// Defaults, then the config file, then the flags.
pub fn load(path: Option<&Path>, overrides: &ConfigOverrides) -> CliResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::default(),
    };
    for (k, v) in &overrides.0 {
        cfg.set(k, v)?;
    }
    Ok(cfg)
}
