//! `key=value` configuration file with `[chgen]`, `[oracle]`, `[train]`,
//! `[pbil]` and `[serve]` sections. Command-line flags override it.

use std::path::Path;
use std::str::FromStr;

use dlsp_core::kv::{self, Entry};

use crate::CliError;

pub const SECTIONS: &[(&str, &[&str])] = &[
    (
        "chgen",
        &[
            "grid_n",
            "eps2",
            "mobility",
            "dt",
            "stabilization",
            "noise_amp",
            "blend_mean",
            "snapshot_steps",
            "crop",
            "seed",
            "augment_shifts",
        ],
    ),
    (
        "oracle",
        &["diffusion_length", "transport_length", "generation", "solver_tol", "solver_max_iters", "j_scale"],
    ),
    ("train", &["learning_rate", "batch_size", "epochs", "seed"]),
    (
        "pbil",
        &[
            "n",
            "n_b",
            "l_r",
            "mutation_prob",
            "mutation_shift",
            "p_min",
            "p_max",
            "smoothing_radius",
            "max_iters",
            "improvement_tol",
            "improvement_window",
            "seed",
            "delta",
        ],
    ),
    ("serve", &["host", "port", "ui_dir", "max_jobs"]),
];

#[derive(Debug, Default, Clone)]
pub struct Config {
    entries: Vec<Entry>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let entries = kv::parse(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        for e in &entries {
            let known = SECTIONS
                .iter()
                .find(|(s, _)| *s == e.section)
                .is_some_and(|(_, keys)| keys.contains(&e.key.as_str()));
            if !known {
                let section = if e.section.is_empty() { "<none>" } else { &e.section };
                return Err(CliError::Usage(format!(
                    "config line {}: unknown key `{}` in section [{section}]",
                    e.line, e.key
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>, CliError> {
        match kv::lookup(&self.entries, section, key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| CliError::Usage(format!("config [{section}] {key}: cannot parse {raw:?}"))),
        }
    }

    /// Flag, then config value, then `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, section: &str, key: &str, default: T) -> Result<T, CliError> {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.get(section, key)?.unwrap_or(default)),
        }
    }
}

/// Comma-separated list.
pub fn parse_list<T: FromStr>(raw: &str) -> Result<Vec<T>, String> {
    raw.split(',')
        .map(|s| s.trim().parse().map_err(|_| format!("cannot parse {s:?} in {raw:?}")))
        .collect()
}
