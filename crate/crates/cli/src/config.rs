//! Flat JSON config files and their merge with command-line flags.
//!
//! A value given on the command line wins over the config file, which wins
//! over the built-in default.

use std::path::Path;

use anyhow::Context;
use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::Deserialize;

/// Config file or flag problem; exits with the usage code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Keys accepted in a `--config` file; names mirror the library fields.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub k: Option<usize>,
    pub k_frac: Option<f64>,
    #[serde(alias = "m")]
    pub lower: Option<f64>,
    #[serde(alias = "M")]
    pub upper: Option<f64>,
    pub p: Option<f64>,
    pub tau_star: Option<f64>,
    #[serde(alias = "c")]
    pub c_ic: Option<f64>,
    pub r_max: Option<usize>,
    pub alpha: Option<f64>,
    pub r: Option<usize>,
    pub seed: Option<u64>,
    pub n_restarts: Option<usize>,
    pub max_outer_iters: Option<usize>,
    pub loss_rel_tol: Option<f64>,
    pub inner_grid: Option<usize>,
    pub threshold: Option<String>,
    pub threshold_r: Option<usize>,
    pub force_degenerate: Option<bool>,
    pub force_r: Option<usize>,
    pub dgp: Option<u8>,
    #[serde(rename = "N")]
    pub n: Option<usize>,
    #[serde(rename = "T")]
    pub t: Option<usize>,
    pub lambda: Option<f64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))
            .context("loading config")
    }
}

/// Resolves one setting: an explicit flag, else the file value, else the
/// flag's default.
pub struct Merge<'a> {
    pub matches: &'a ArgMatches,
}

impl Merge<'_> {
    fn explicit(&self, id: &str) -> bool {
        self.matches.try_get_raw(id).ok().flatten().is_some() && self.matches.value_source(id) == Some(ValueSource::CommandLine)
    }

    pub fn pick<T>(&self, id: &str, flag: T, file: Option<T>) -> T {
        if self.explicit(id) {
            flag
        } else {
            file.unwrap_or(flag)
        }
    }

    pub fn pick_opt<T>(&self, id: &str, flag: Option<T>, file: Option<T>) -> Option<T> {
        if self.explicit(id) {
            flag
        } else {
            file.or(flag)
        }
    }

    pub fn given(&self, id: &str) -> bool {
        self.explicit(id)
    }
}
