//! TOML run configuration. Unknown keys are rejected everywhere; relative
//! data paths resolve against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::dataset::synth::toy_set;
use crate::dataset::{DataSplits, Manifest};
use crate::degrade::DegradationConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::models::GeneratorConfig;
use crate::train::TrainConfig;

pub const RESOLVED_CONFIG_NAME: &str = "config.resolved.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorSection {
    pub base_channels: usize,
    pub n_downsamples: usize,
}

impl Default for DiscriminatorSection {
    fn default() -> Self {
        Self { base_channels: 16, n_downsamples: 2 }
    }
}

/// Procedural data used when no manifests are given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticData {
    pub count: usize,
    pub heldout: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SyntheticData {
    fn default() -> Self {
        Self { count: 64, heldout: 8, size: 128, seed: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub general: Option<PathBuf>,
    pub blur: Option<PathBuf>,
    pub heldout: Option<PathBuf>,
    pub synthetic: Option<SyntheticData>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    /// Held-out L1 is recorded at every iteration up to this one, then at
    /// the last iteration.
    pub early_window: u64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self { early_window: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub fusion: FusionConfig,
    pub degradation: DegradationConfig,
    pub model: GeneratorConfig,
    pub discriminator: DiscriminatorSection,
    pub data: DataSection,
    pub probe: ProbeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig { hr_patch: 32, ..TrainConfig::default() },
            fusion: FusionConfig::default(),
            degradation: DegradationConfig::default(),
            model: GeneratorConfig::default(),
            discriminator: DiscriminatorSection::default(),
            data: DataSection::default(),
            probe: ProbeSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates `path`, resolving relative data paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.general, &mut cfg.data.blur, &mut cfg.data.heldout].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |r: Result<()>, section: &str| r.map_err(|e| Error::Config(format!("[{section}] {e}")));
        wrap(self.train.validate(), "train")?;
        wrap(self.fusion.validate(), "fusion")?;
        wrap(self.degradation.validate(), "degradation")?;
        wrap(self.model.validate(), "model")?;
        if self.discriminator.base_channels == 0 {
            return Err(Error::Config("[discriminator] base_channels must be positive".into()));
        }
        let d = &self.data;
        match (&d.general, &d.blur, &d.synthetic) {
            (Some(_), Some(_), None) | (None, None, _) => {}
            (Some(_), Some(_), Some(_)) => {
                return Err(Error::Config("[data] give either manifests or synthetic, not both".into()))
            }
            _ => return Err(Error::Config("[data] general and blur manifests go together".into())),
        }
        if let Some(s) = &d.synthetic {
            if s.count == 0 || s.size < self.train.hr_patch {
                return Err(Error::Config("[data.synthetic] needs count > 0 and size >= train.hr_patch".into()));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RESOLVED_CONFIG_NAME);
        write_atomic(&path, self.to_toml()?.as_bytes())?;
        Ok(path)
    }

    /// Loads the manifests, or generates the synthetic set (the default
    /// when the `[data]` section names nothing).
    pub fn load_data(&self) -> Result<DataSplits> {
        match (&self.data.general, &self.data.blur) {
            (Some(g), Some(b)) => {
                let heldout = self.data.heldout.as_deref().map(Manifest::load).transpose()?;
                DataSplits::from_manifests(&Manifest::load(g)?, &Manifest::load(b)?, heldout.as_ref())
            }
            _ => {
                let s = self.data.synthetic.clone().unwrap_or_default();
                toy_set(s.count, s.heldout, s.size, s.seed)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_default_and_round_trips() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in ["bogus = 1", "[train]\nlearning_rate = 1.0", "[fusion]\nk = 20\nkk = 3", "[nope]"] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn sections_parse() {
        let cfg = RunConfig::parse(
            "[train]\nseed = 7\nbatch_size = 4\n[fusion]\nk = 10\nlambda0 = 0.95\n[degradation]\nseed = 3\n[data.synthetic]\ncount = 4\nsize = 64\n",
        )
        .unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.fusion.k, 10);
        assert_eq!(cfg.data.synthetic.unwrap().count, 4);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(RunConfig::parse("[train]\nbatch_size = 3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("[data]\ngeneral = \"a.jsonl\""), Err(Error::Config(_))));
    }
}
