//! Experiment configuration: TOML schema, validation, and dotted-key
//! overrides.
//!
//! ```toml
//! seed = 7
//! n_devices = 3
//! rounds = 6
//! mode = "mlecs"
//! mer = 0.5                      # scalar, or per-modality [0.5, 0.7, 1.0]
//! modalities = ["video", "audio", "text"]
//!
//! [dims]
//! raw = [12, 10, 8]              # per modality
//! encoder_hidden = 16
//! encoded = 10
//! latent = 8
//! fusion_hidden = 16
//! spg_hidden = 16
//! token_width = 16
//! slm_hidden = 16
//! slm_layers = 2
//! llm_hidden = 32
//! llm_layers = 3
//! vocab = 4
//! soft_tokens_slm = 2
//! soft_tokens_llm = 3
//!
//! [train]
//! rank = 2
//! negatives = 8                  # doubles as the minibatch size
//! lr = 0.05
//! epochs_ccl = 1
//! epochs_amt = 1
//! epochs_se = 1
//! kt_bins = 4
//! # lora_slots = [0, 1, 2]       # optional; default adapts every slot
//!
//! [dataset]
//! kind = "synthetic"
//! samples = 800
//! latent_dim = 6
//! classes = 4
//! noise_std = 0.3
//! ```
//!
//! Overrides use dotted keys (`--set train.lr=0.1`, `--set mer=0.7`); the
//! last writer wins and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// The full protocol: anchors, CCL + AMT, MMA, SE-CCL.
    Mlecs,
    /// No communication; devices and server train on their own data.
    Standalone,
    /// Plain adapter averaging: no anchors, uniform weights, no SE-CCL.
    FedavgUniform,
    /// Full protocol with uniform aggregation weights.
    MlecsWoMma,
    /// Full protocol minus the server-side SE-CCL stage.
    MlecsWoSeccl,
}

impl Mode {
    pub fn all() -> [Mode; 5] {
        [
            Mode::Mlecs,
            Mode::Standalone,
            Mode::FedavgUniform,
            Mode::MlecsWoMma,
            Mode::MlecsWoSeccl,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Mlecs => "mlecs",
            Mode::Standalone => "standalone",
            Mode::FedavgUniform => "fedavg_uniform",
            Mode::MlecsWoMma => "mlecs_wo_mma",
            Mode::MlecsWoSeccl => "mlecs_wo_seccl",
        }
    }
}

/// Modality existing rate: one probability for all modalities or one per
/// modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Mer {
    Scalar(f64),
    PerModality(Vec<f64>),
}

impl Mer {
    pub fn per_modality(&self, n_modalities: usize) -> Vec<f64> {
        match self {
            Mer::Scalar(rho) => vec![*rho; n_modalities],
            Mer::PerModality(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimsConfig {
    pub raw: Vec<usize>,
    pub encoder_hidden: usize,
    pub encoded: usize,
    pub latent: usize,
    pub fusion_hidden: usize,
    pub spg_hidden: usize,
    pub token_width: usize,
    pub slm_hidden: usize,
    pub slm_layers: usize,
    pub llm_hidden: usize,
    pub llm_layers: usize,
    pub vocab: usize,
    pub soft_tokens_slm: usize,
    pub soft_tokens_llm: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub rank: usize,
    /// Candidate count `U`; also the minibatch size (in-batch negatives).
    pub negatives: usize,
    pub lr: f64,
    pub epochs_ccl: usize,
    pub epochs_amt: usize,
    pub epochs_se: usize,
    pub kt_bins: usize,
    /// Dense slots that receive adapters (last slot is the head); `None`
    /// adapts every slot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_slots: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[serde(deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        samples: usize,
        latent_dim: usize,
        classes: usize,
        noise_std: f64,
    },
    External {
        /// Path to the JSON manifest next to its feature files.
        path: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_devices: usize,
    pub rounds: usize,
    pub mode: Mode,
    pub mer: Mer,
    pub modalities: Vec<String>,
    pub dims: DimsConfig,
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_devices: 3,
            rounds: 6,
            mode: Mode::Mlecs,
            mer: Mer::Scalar(0.5),
            modalities: vec!["video".into(), "audio".into(), "text".into()],
            dims: DimsConfig {
                raw: vec![12, 10, 8],
                encoder_hidden: 16,
                encoded: 10,
                latent: 8,
                fusion_hidden: 16,
                spg_hidden: 16,
                token_width: 16,
                slm_hidden: 16,
                slm_layers: 2,
                llm_hidden: 32,
                llm_layers: 3,
                vocab: 4,
                soft_tokens_slm: 2,
                soft_tokens_llm: 3,
            },
            train: TrainConfig {
                rank: 2,
                negatives: 8,
                lr: 0.05,
                epochs_ccl: 1,
                epochs_amt: 1,
                epochs_se: 1,
                kt_bins: 4,
                lora_slots: None,
            },
            dataset: DatasetConfig::Synthetic {
                samples: 800,
                latent_dim: 6,
                classes: 4,
                noise_std: 0.3,
            },
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| Err(Error::InvalidConfig { detail });
        if self.n_devices < 1 {
            return fail("n_devices must be >= 1".into());
        }
        if self.rounds < 1 {
            return fail("rounds must be >= 1".into());
        }
        if self.modalities.len() < 2 {
            return fail("need at least 2 modalities for cross-modal alignment".into());
        }
        if self.dims.raw.len() != self.modalities.len() {
            return fail(format!(
                "dims.raw has {} entries for {} modalities",
                self.dims.raw.len(),
                self.modalities.len()
            ));
        }
        let mer = self.mer.per_modality(self.modalities.len());
        if mer.len() != self.modalities.len() {
            return fail(format!(
                "mer has {} entries for {} modalities",
                mer.len(),
                self.modalities.len()
            ));
        }
        if let Some(rho) = mer.iter().find(|&&r| !(0.0..=1.0).contains(&r)) {
            return fail(format!("mer must lie in [0,1], got {rho}"));
        }
        if self.train.rank < 1 {
            return fail("train.rank must be >= 1".into());
        }
        if self.train.negatives < 1 {
            return fail("train.negatives must be >= 1".into());
        }
        if self.train.lr <= 0.0 {
            return fail("train.lr must be > 0".into());
        }
        if self.train.kt_bins < 1 {
            return fail("train.kt_bins must be >= 1".into());
        }
        if self.train.kt_bins > self.dims.vocab {
            return fail(format!(
                "train.kt_bins {} exceeds vocab {}",
                self.train.kt_bins, self.dims.vocab
            ));
        }
        if self.dims.soft_tokens_slm < 1 || self.dims.soft_tokens_llm < 1 {
            return fail("soft token counts must be >= 1".into());
        }
        if self.dims.soft_tokens_llm < self.dims.soft_tokens_slm {
            return fail(format!(
                "soft_tokens_llm {} must be >= soft_tokens_slm {} (the server SLM consumes the unified model's leading prompt tokens)",
                self.dims.soft_tokens_llm, self.dims.soft_tokens_slm
            ));
        }
        if let DatasetConfig::Synthetic { classes, noise_std, .. } = &self.dataset {
            if *classes != self.dims.vocab {
                return fail(format!(
                    "dataset.classes {} must equal dims.vocab {}",
                    classes, self.dims.vocab
                ));
            }
            if *noise_std < 0.0 {
                return fail("dataset.noise_std must be >= 0".into());
            }
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        Self::from_value(parse_document(text, origin)?, origin, &[])
    }

    /// Re-apply dotted-key overrides to an in-memory config through the
    /// same machinery the file path uses.
    pub fn apply_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let value = parse_document(&self.to_toml_string(), "in-memory config")
            .expect("serialized config reparses");
        Self::from_value(value, "in-memory config", overrides)
    }

    fn from_value(mut value: toml::Value, origin: &str, overrides: &[(String, String)]) -> Result<Self> {
        for (key, raw) in overrides {
            apply_override(&mut value, key, raw)?;
        }
        let config: ExperimentConfig =
            value.try_into().map_err(|e| Error::ConfigParse {
                path: origin.to_string(),
                detail: format!("{e}"),
            })?;
        config.validate()?;
        Ok(config)
    }
}

/// Parse `key=value` override pairs.
pub fn parse_override_pairs(pairs: &[String]) -> Result<Vec<(String, String)>> {
    pairs
        .iter()
        .map(|pair| {
            pair.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::BadOverride {
                    key: pair.clone(),
                    detail: "expected KEY=VALUE".into(),
                })
        })
        .collect()
}

fn parse_document(text: &str, origin: &str) -> Result<toml::Value> {
    let table: toml::Table = text.parse().map_err(|e| Error::ConfigParse {
        path: origin.to_string(),
        detail: format!("{e}"),
    })?;
    Ok(toml::Value::Table(table))
}

fn parse_override_value(key: &str, raw: &str) -> Result<toml::Value> {
    if raw.is_empty() {
        return Err(Error::BadOverride {
            key: key.to_string(),
            detail: "empty value".into(),
        });
    }
    // a native toml scalar/array if it parses as one, else a bare string
    Ok(raw
        .parse::<toml::Value>()
        .unwrap_or_else(|_| toml::Value::String(raw.to_string())))
}

fn apply_override(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parsed = parse_override_value(key, raw)?;
    let mut cursor = root;
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::BadOverride {
            key: key.to_string(),
            detail: "empty path segment".into(),
        });
    }
    for segment in &segments[..segments.len() - 1] {
        let table = cursor.as_table_mut().ok_or_else(|| Error::BadOverride {
            key: key.to_string(),
            detail: format!("`{segment}` is not a table"),
        })?;
        cursor = table
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = cursor.as_table_mut().ok_or_else(|| Error::BadOverride {
        key: key.to_string(),
        detail: "parent is not a table".into(),
    })?;
    table.insert(segments[segments.len() - 1].to_string(), parsed);
    Ok(())
}

/// Read, override, and validate a config file. Unknown keys anywhere (file
/// or overrides) are rejected with the offending name.
pub fn parse_config(path: &Path, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::ConfigParse {
        path: path.display().to_string(),
        detail: format!("{e}"),
    })?;
    let value = parse_document(&text, &path.display().to_string())?;
    ExperimentConfig::from_value(value, &path.display().to_string(), overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_default(dir: &tempfile::TempDir) -> std::path::PathBuf {
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, ExperimentConfig::default().to_toml_string()).unwrap();
        path
    }

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text, "inline").unwrap();
        assert_eq!(cfg, back);
        // serialize(parse(x)) parses to an equal config
        let text2 = back.to_toml_string();
        assert_eq!(text, text2);
    }

    #[test]
    fn file_values_without_overrides_are_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_default(&dir);
        let cfg = parse_config(&path, &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn override_precedence_wins_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_default(&dir);
        let overrides =
            parse_override_pairs(&["mer=0.75".into(), "train.lr=0.2".into(), "mode=standalone".into()])
                .unwrap();
        let cfg = parse_config(&path, &overrides).unwrap();
        assert_eq!(cfg.mer, Mer::Scalar(0.75));
        assert_eq!(cfg.train.lr, 0.2);
        assert_eq!(cfg.mode, Mode::Standalone);
        // last writer wins
        let overrides =
            parse_override_pairs(&["train.lr=0.2".into(), "train.lr=0.3".into()]).unwrap();
        let cfg = parse_config(&path, &overrides).unwrap();
        assert_eq!(cfg.train.lr, 0.3);
    }

    #[test]
    fn per_modality_mer_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_default(&dir);
        let overrides = parse_override_pairs(&["mer=[0.5, 0.7, 1.0]".into()]).unwrap();
        let cfg = parse_config(&path, &overrides).unwrap();
        assert_eq!(cfg.mer.per_modality(3), vec![0.5, 0.7, 1.0]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_default(&dir);
        let overrides = parse_override_pairs(&["train.typo=3".into()]).unwrap();
        let err = parse_config(&path, &overrides).unwrap_err();
        assert!(err.to_string().contains("typo"), "got: {err}");

        let bad_file = dir.path().join("bad.toml");
        let mut text = ExperimentConfig::default().to_toml_string();
        text.push_str("\nunknown_top = 1\n");
        std::fs::write(&bad_file, text).unwrap();
        let err = parse_config(&bad_file, &[]).unwrap_err();
        assert!(err.to_string().contains("unknown_top"), "got: {err}");
    }

    #[test]
    fn invariant_violations_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_default(&dir);
        for bad in ["mer=1.5", "rounds=0", "n_devices=0", "train.rank=0", "train.negatives=0"] {
            let overrides = parse_override_pairs(&[bad.into()]).unwrap();
            assert!(parse_config(&path, &overrides).is_err(), "{bad} accepted");
        }
    }

    #[test]
    fn missing_file_reports_path() {
        let err = parse_config(Path::new("/nonexistent/cfg.toml"), &[]).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/cfg.toml"));
    }

    #[test]
    fn parse_error_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.toml");
        std::fs::write(&path, "seed = 7\nrounds = [oops\n").unwrap();
        let err = parse_config(&path, &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("broken.toml"));
        assert!(msg.contains('2') || msg.to_lowercase().contains("line"), "got: {msg}");
    }
}
