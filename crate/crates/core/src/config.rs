//! Category presets and the experiment manifest.
//!
//! A manifest names a preset, the layer files and optional `[train]` / `[synth]` tables
//! whose keys override [`TrainConfig`] and [`SynthesisParams`] fields one-to-one:
//!
//! ```toml
//! schema_version = 1
//! preset = "gunshot"
//! layers = ["body.wav", "tail.wav"]
//!
//! [train]
//! seed = 7
//!
//! [synth]
//! num_variations = 5
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::SynthesisParams;
use crate::training::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Keys a `custom` run must set explicitly.
pub const CUSTOM_REQUIRED: [&str; 4] = ["iters_per_stage", "filters", "d2_dilation", "min_size"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    FootstepsConcrete,
    FootstepsMetal,
    Gunshot,
    CharacterJump,
    Custom,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::FootstepsConcrete,
        Preset::FootstepsMetal,
        Preset::Gunshot,
        Preset::CharacterJump,
        Preset::Custom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::FootstepsConcrete => "footsteps-concrete",
            Preset::FootstepsMetal => "footsteps-metal",
            Preset::Gunshot => "gunshot",
            Preset::CharacterJump => "character-jump",
            Preset::Custom => "custom",
        }
    }

    /// `(iters_per_stage, filters, d2_dilation, min_size)`; `None` for `custom`.
    pub fn values(self) -> Option<(usize, usize, usize, usize)> {
        match self {
            Preset::FootstepsConcrete | Preset::FootstepsMetal => Some((2000, 64, 3, 50)),
            Preset::Gunshot => Some((8000, 128, 2, 11)),
            Preset::CharacterJump => Some((8000, 128, 3, 25)),
            Preset::Custom => None,
        }
    }

    /// Preset configuration with `overrides` applied. Every override is logged.
    pub fn resolve(self, overrides: &toml::Table) -> Result<TrainConfig> {
        if self == Preset::Custom {
            let missing: Vec<&str> = CUSTOM_REQUIRED
                .iter()
                .copied()
                .filter(|k| !overrides.contains_key(*k))
                .collect();
            if !missing.is_empty() {
                return Err(Error::config(
                    missing.join(", "),
                    "the custom preset requires these keys to be set explicitly",
                ));
            }
        }
        let mut base = TrainConfig::default();
        if let Some((iters, filters, dil, min)) = self.values() {
            base.iters_per_stage = iters;
            base.filters = filters;
            base.d2_dilation = dil;
            base.min_size = min;
        }
        let cfg: TrainConfig = apply_overrides(&base, overrides, "train")?;
        for (k, v) in overrides {
            info!("train override: {k} = {v}");
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config("preset", format!("unknown preset `{s}`")))
    }
}

/// Serialize `base`, overlay `overrides` key by key (nested tables merge) and
/// deserialize the result, rejecting unknown keys.
pub fn apply_overrides<T>(base: &T, overrides: &toml::Table, section: &str) -> Result<T>
where
    T: Serialize + for<'de> Deserialize<'de>,
{
    let mut table = toml::Table::try_from(base).map_err(|e| Error::config(section, e.to_string()))?;
    merge(&mut table, overrides);
    table
        .try_into()
        .map_err(|e: toml::de::Error| Error::config(section, e.message().to_string()))
}

fn merge(dst: &mut toml::Table, src: &toml::Table) {
    for (k, v) in src {
        match (dst.get_mut(k), v) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge(d, s),
            _ => {
                dst.insert(k.clone(), v.clone());
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub schema_version: u32,
    pub preset: Preset,
    pub layers: Vec<PathBuf>,
    /// Defaults to a directory under the output root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub train: toml::Table,
    #[serde(default)]
    pub synth: toml::Table,
}

impl ExperimentManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: ExperimentManifest =
            toml::from_str(text).map_err(|e| Error::config("manifest", e.message().to_string()))?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!(
                    "unsupported version {} (expected {SCHEMA_VERSION})",
                    m.schema_version
                ),
            ));
        }
        if m.layers.is_empty() {
            return Err(Error::config("layers", "at least one layer file is required"));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::parse(&text)?;
        // layer paths are relative to the manifest
        if let Some(base) = path.parent() {
            for l in &mut m.layers {
                if l.is_relative() {
                    *l = base.join(&*l);
                }
            }
        }
        Ok(m)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        self.preset.resolve(&self.train)
    }

    pub fn synthesis_params(&self) -> Result<SynthesisParams> {
        let p: SynthesisParams = apply_overrides(&SynthesisParams::default(), &self.synth, "synth")?;
        p.validate()?;
        Ok(p)
    }

    /// A `custom` manifest that spells out every resolved value.
    pub fn resolved(&self) -> Result<Self> {
        let train =
            toml::Table::try_from(self.train_config()?).map_err(|e| Error::config("train", e.to_string()))?;
        let synth = toml::Table::try_from(self.synthesis_params()?)
            .map_err(|e| Error::config("synth", e.to_string()))?;
        Ok(ExperimentManifest {
            schema_version: SCHEMA_VERSION,
            preset: Preset::Custom,
            layers: self.layers.clone(),
            output_dir: self.output_dir.clone(),
            train,
            synth,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("manifest", e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_table() {
        let table = [
            ("footsteps-concrete", 2000, 64, 3, 50),
            ("footsteps-metal", 2000, 64, 3, 50),
            ("gunshot", 8000, 128, 2, 11),
            ("character-jump", 8000, 128, 3, 25),
        ];
        for (name, iters, filters, dil, min) in table {
            let cfg = name
                .parse::<Preset>()
                .unwrap()
                .resolve(&toml::Table::new())
                .unwrap();
            assert_eq!(
                (cfg.iters_per_stage, cfg.filters, cfg.d2_dilation, cfg.min_size),
                (iters, filters, dil, min),
                "{name}"
            );
            assert_eq!(cfg.num_stages, 10);
            assert_eq!(cfg.rec_weight, 10.0);
            assert_eq!(cfg.lr, 5e-4);
        }
    }

    #[test]
    fn custom_needs_explicit_values() {
        let err = Preset::Custom.resolve(&toml::Table::new()).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("min_size"));
        let t: toml::Table =
            toml::from_str("iters_per_stage = 5\nfilters = 8\nd2_dilation = 2\nmin_size = 9").unwrap();
        let cfg = Preset::Custom.resolve(&t).unwrap();
        assert_eq!(
            (cfg.iters_per_stage, cfg.filters, cfg.d2_dilation, cfg.min_size),
            (5, 8, 2, 9)
        );
    }

    #[test]
    fn overrides_merge_and_unknown_keys_fail() {
        let t: toml::Table = toml::from_str("seed = 9\n[stft]\nhop = 64").unwrap();
        let cfg = Preset::Gunshot.resolve(&t).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.stft.hop, 64);
        assert_eq!(cfg.stft.fft_size, 512);
        assert_eq!(cfg.filters, 128);
        let t: toml::Table = toml::from_str("filtres = 9").unwrap();
        assert!(Preset::Gunshot.resolve(&t).is_err());
        let t: toml::Table = toml::from_str("lr = -1.0").unwrap();
        assert!(matches!(
            Preset::Gunshot.resolve(&t),
            Err(Error::InvalidConfig { .. })
        ));
    }

    #[test]
    fn manifest_parse_and_replay() {
        let text = r#"
schema_version = 1
preset = "character-jump"
layers = ["a.wav", "b.wav"]

[train]
seed = 4

[synth]
num_variations = 3
delay_range_ms = [0.0, 10.0]
"#;
        let m = ExperimentManifest::parse(text).unwrap();
        let p = m.synthesis_params().unwrap();
        assert_eq!(p.num_variations, 3);
        assert_eq!(p.delay_range_ms, (0.0, 10.0));
        let resolved = m.resolved().unwrap();
        let again = ExperimentManifest::parse(&resolved.to_toml().unwrap()).unwrap();
        assert_eq!(again.train_config().unwrap(), m.train_config().unwrap());
        assert_eq!(again.synthesis_params().unwrap(), p);
        assert!(
            ExperimentManifest::parse(&text.replace("schema_version = 1", "schema_version = 2")).is_err()
        );
        assert!(ExperimentManifest::parse(&text.replace("character-jump", "laser")).is_err());
    }
}
