//! Flat `key = value` run configuration, snapshotted into every run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Arch, ModelSpec};
use crate::targets::KernelSpec;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub arch: Arch,
    /// Train the auxiliary heads; only valid for the concatenated network.
    pub aux: bool,
    /// Hidden widths are divided by this; 1 is the full network.
    pub width_divisor: usize,
    pub sigma: f64,
    pub kernel_half_width: usize,
    /// Dataset directory with `images/` and `annotations/`.
    pub data_dir: PathBuf,
    /// Optional held-out dataset scored every `val_every` epochs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: Arch::Cfcrn,
            aux: true,
            width_divisor: 1,
            sigma: KernelSpec::default().sigma,
            kernel_half_width: KernelSpec::default().half_width,
            data_dir: PathBuf::from("data"),
            val_dir: None,
            output_dir: PathBuf::from("run"),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.aux && self.arch != Arch::Cfcrn {
            return Err(Error::Config(format!(
                "aux = true requires arch = \"cfcrn\", got \"{}\"",
                self.arch
            )));
        }
        if self.width_divisor == 0 {
            return Err(Error::Config("width_divisor must be at least 1".into()));
        }
        self.kernel()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec::new(self.arch, self.aux).narrowed(self.width_divisor)
    }

    pub fn kernel(&self) -> KernelSpec {
        KernelSpec {
            sigma: self.sigma,
            half_width: self.kernel_half_width,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs always serialize")
    }

    /// Parses and validates a configuration; unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().trim().to_string()))?;
        let known: toml::Table = toml::from_str(&RunConfig::default().to_toml()).expect("defaults round-trip");
        let optional = ["val_dir"];
        if let Some((key, _)) = table.iter().find(|(_, v)| v.is_table()) {
            return Err(Error::Config(format!("'{key}' is a section; the config is flat key = value")));
        }
        if let Some(key) = table
            .keys()
            .find(|k| !known.contains_key(*k) && !optional.contains(&k.as_str()))
        {
            return Err(Error::Config(format!("unknown key '{key}'")));
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trip_is_flat() {
        let cfg = RunConfig {
            val_dir: Some("val".into()),
            ..Default::default()
        };
        let text = cfg.to_toml();
        assert!(!text.lines().any(|l| l.trim_start().starts_with('[')), "{text}");
        assert!(text.contains("lambda = 0.01"), "{text}");
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_files_take_defaults() {
        let cfg = RunConfig::from_toml("arch = \"fcrn\"\naux = false\nepochs = 7\n").unwrap();
        assert_eq!(cfg.arch, Arch::Fcrn);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.beta, 0.99);
    }

    #[test]
    fn aux_requires_cfcrn() {
        let err = RunConfig::from_toml("arch = \"fcrn\"\naux = true\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("aux"), "{err}");
    }

    #[test]
    fn malformed_input_is_reported() {
        for (text, needle) in [
            ("epochs = 5\nbogus = 1\n", "bogus"),
            ("epochs = \"five\"\n", "invalid type"),
            ("epochs = \n", ""),
            ("[train]\nepochs = 1\n", "flat"),
            ("beta = 1.5\n", "beta"),
        ] {
            let err = RunConfig::from_toml(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
            assert!(err.to_string().contains(needle), "{text}: {err}");
        }
    }
}
