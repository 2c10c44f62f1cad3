use std::collections::BTreeMap;
use std::path::Path;

use cpie_core::eval::EvalConfig;
use cpie_core::fixtures::FixtureConfig;
use cpie_core::geom::FitConfig;
use cpie_core::model::{ModelConfig, Preset, TrainConfig};
use cpie_core::nms::NmsConfig;
use cpie_core::pairgen::AugmentConfig;
use cpie_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    /// Binarization threshold applied before fitting and overlays.
    pub threshold: f32,
    /// Normalize illumination of support and query before the network.
    pub illum_norm: bool,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            illum_norm: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub fixtures: FixtureConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub nms: NmsConfig,
    pub eval: EvalConfig,
    pub fit: FitConfig,
    pub extract: ExtractConfig,
    /// Resolved input and output paths of the command that wrote this file.
    /// Informational; ignored when read back.
    #[serde(default)]
    pub paths: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let fixtures = match preset {
            Preset::Paper => FixtureConfig {
                size: 320,
                ..FixtureConfig::default()
            },
            Preset::Toy => FixtureConfig::default(),
        };
        Self {
            preset,
            seed: 0,
            fixtures,
            augment: AugmentConfig::default(),
            model: ModelConfig::preset(preset),
            train: TrainConfig::preset(preset),
            nms: NmsConfig::default(),
            eval: EvalConfig::default(),
            fit: FitConfig::default(),
            extract: ExtractConfig::default(),
            paths: BTreeMap::new(),
        }
    }

    /// Preset defaults, overlaid by the file's keys, overlaid by flags. The
    /// training seed follows the global seed unless the file sets it.
    pub fn resolve(text: Option<&str>, preset: Option<Preset>, seed: Option<u64>) -> Result<Self> {
        let file: toml::Table = match text {
            Some(t) => toml::from_str(t).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?,
            None => toml::Table::new(),
        };
        let from_file = match file.get("preset") {
            Some(v) => Some(
                v.as_str()
                    .ok_or_else(|| Error::Config("`preset` must be a string".into()))?
                    .parse::<Preset>()?,
            ),
            None => None,
        };
        let preset = preset.or(from_file).unwrap_or_default();
        let mut base = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(s) = file.get("seed") {
            if let Some(train) = base.get_mut("train").and_then(toml::Value::as_table_mut) {
                train.insert("seed".into(), s.clone());
            }
        }
        merge(&mut base, file);
        base.insert("preset".into(), toml::Value::String(preset.to_string()));
        let mut cfg: Self = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string().trim_end().to_string()))?;
        if let Some(s) = seed {
            cfg.seed = s;
            cfg.train.seed = s;
        }
        cfg.paths.clear();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, preset: Option<Preset>, seed: Option<u64>) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?),
            None => None,
        };
        Self::resolve(text.as_deref(), preset, seed).map_err(|e| match (e, path) {
            (Error::Config(m), Some(p)) => Error::Config(format!("{}: {m}", p.display())),
            (e, _) => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.nms.gabor.validate()?;
        if self.fixtures.size % 16 != 0 || self.fixtures.size == 0 {
            return Err(Error::InvalidParameter(format!(
                "fixture size {} must be a positive multiple of 16",
                self.fixtures.size
            )));
        }
        if !(0.0..=1.0).contains(&self.extract.threshold) {
            return Err(Error::InvalidParameter("extract.threshold must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let cfg = RunConfig::resolve(None, None, None).unwrap();
        assert_eq!(cfg, RunConfig::preset(Preset::Toy));
        let back = RunConfig::resolve(Some(&cfg.to_toml()), None, None).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn file_overrides_preset_and_flags_override_file() {
        let text = "preset = \"paper\"\nseed = 4\n[train]\nepochs = 3\n";
        let cfg = RunConfig::resolve(Some(text), None, None).unwrap();
        assert_eq!(cfg.preset, Preset::Paper);
        assert_eq!(cfg.model, ModelConfig::preset(Preset::Paper));
        assert_eq!((cfg.train.epochs, cfg.train.seed, cfg.fixtures.size), (3, 4, 320));
        let cfg = RunConfig::resolve(Some(text), Some(Preset::Toy), Some(9)).unwrap();
        assert_eq!((cfg.preset, cfg.seed, cfg.train.seed, cfg.train.epochs), (Preset::Toy, 9, 9, 3));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["bogus = 1", "[train]\nepoch = 3", "[nms.gabor]\nsigmaa = 2.0"] {
            let err = RunConfig::resolve(Some(text), None, None).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::resolve(Some("[fixtures]\nsize = 100"), None, None).is_err());
        assert!(RunConfig::resolve(Some("[nms.gabor]\nsize = 8"), None, None).is_err());
    }
}
