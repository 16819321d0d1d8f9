//! `key = value` configuration files and override resolution.

use std::path::Path;

use vcl_core::trainer::ExperimentConfig;
use vcl_core::{Error, Result};

/// Environment variable consulted for the MNIST directory when neither a
/// flag nor the config file sets `data_dir`.
pub const DATA_DIR_ENV: &str = "VCL_MNIST_DIR";

pub const DEFAULT_PRESET: &str = "split-desk";

/// A parsed configuration document. `preset` is kept apart from the
/// experiment keys, which are checked against [`ExperimentConfig::KEYS`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    pub preset: Option<String>,
    pub entries: Vec<(String, String)>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "preset" {
                out.preset = Some(value.to_string());
                continue;
            }
            if !ExperimentConfig::KEYS.contains(&key) {
                return Err(Error::Config(format!(
                    "line {}: unknown key {key:?}",
                    n + 1
                )));
            }
            if out.entries.iter().any(|(k, _)| k == key) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key:?}",
                    n + 1
                )));
            }
            out.entries.push((key.to_string(), value.to_string()));
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn has(&self, key: &str) -> bool {
        self.entries.iter().any(|(k, _)| k == key)
    }
}

/// Where the resolved values came from, recorded in the run manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolution {
    pub preset: String,
    pub config_file: Option<String>,
    pub overridden: Vec<String>,
}

/// Flags beat the config file, which beats the preset. An explicit
/// `--preset` beats the file's `preset` key.
pub fn resolve(
    preset_flag: Option<&str>,
    file: Option<(&Path, &ConfigFile)>,
    overrides: &[(String, String)],
    env_data_dir: Option<String>,
) -> Result<(ExperimentConfig, Resolution)> {
    let preset = preset_flag
        .map(str::to_string)
        .or_else(|| file.and_then(|(_, f)| f.preset.clone()))
        .unwrap_or_else(|| DEFAULT_PRESET.to_string());
    let mut cfg = ExperimentConfig::preset(&preset)?;
    let file_sets_data = file.is_some_and(|(_, f)| f.has("data_dir"));
    let flag_sets_data = overrides.iter().any(|(k, _)| k == "data_dir");
    if let (Some(dir), false, false) = (env_data_dir, file_sets_data, flag_sets_data) {
        cfg.data_dir = dir.into();
    }
    if let Some((_, f)) = file {
        for (k, v) in &f.entries {
            cfg.set(k, v)?;
        }
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok((
        cfg,
        Resolution {
            preset,
            config_file: file.map(|(p, _)| p.display().to_string()),
            overridden: overrides.iter().map(|(k, _)| k.clone()).collect(),
        },
    ))
}

/// Manifest text: comments describing the resolution, then every key of
/// the resolved config. It is itself a valid config file.
pub fn manifest_text(cfg: &ExperimentConfig, res: &Resolution) -> String {
    let mut out = String::from("# vcl run manifest\n");
    out.push_str("# resolution order: flags > config file > preset\n");
    out.push_str(&format!("# base preset: {}\n", res.preset));
    if let Some(f) = &res.config_file {
        out.push_str(&format!("# config file: {f}\n"));
    }
    if !res.overridden.is_empty() {
        out.push_str(&format!(
            "# flag overrides: {}\n",
            res.overridden.join(", ")
        ));
    }
    out.push_str(&cfg.to_text());
    out
}
