//! Dataset synthesis, partitioning, and modality assignment.
//!
//! The synthetic task is a stand-in for real multimodal corpora at desk
//! scale: a shared latent `z ~ N(0, I)` drives every modality view
//! `x(m) = W_m z + b_m + noise·ε`, and the label is the argmax of a fixed
//! class matrix applied to `z`, so any single modality carries (noisy)
//! label signal and cross-modal structure is real rather than decorative.
//!
//! Partitioning follows the protocol's data layout: one quarter of the
//! samples become the shared public set, the rest split evenly across
//! devices as private data, and every subset gets a 90/10 train/test split.
//! Device public shards reuse the public sample ids with features
//! restricted to the device's modalities, which is what lets the server's
//! fused representations join as anchors by sample id.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numeric::Matrix;
use crate::{Error, Result};

/// One labeled sample: raw feature vectors per modality index.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: u64,
    pub label: usize,
    pub features: BTreeMap<usize, Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    /// Raw feature width per modality index.
    pub modality_dims: Vec<usize>,
}

/// Generator parameters for the synthetic multimodal task, including the
/// fixed mixing matrices and the class matrix.
#[derive(Debug, Clone)]
pub struct SyntheticTaskSpec {
    pub latent_dim: usize,
    pub classes: usize,
    pub noise_std: f64,
    pub sample_count: usize,
    pub mixing: Vec<Matrix>,
    pub offsets: Vec<Vec<f64>>,
    pub class_matrix: Matrix,
}

impl SyntheticTaskSpec {
    /// Draw random mixing matrices and a class matrix for the given
    /// modality widths.
    pub fn random(
        latent_dim: usize,
        classes: usize,
        noise_std: f64,
        sample_count: usize,
        modality_dims: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidConfig {
                detail: format!("synthetic task needs >= 2 classes, got {classes}"),
            });
        }
        if noise_std < 0.0 {
            return Err(Error::InvalidConfig {
                detail: format!("noise_std must be >= 0, got {noise_std}"),
            });
        }
        let mut mixing = Vec::with_capacity(modality_dims.len());
        let mut offsets = Vec::with_capacity(modality_dims.len());
        for &dim in modality_dims {
            let data: Vec<f64> = (0..dim * latent_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal) / (latent_dim as f64).sqrt())
                .collect();
            mixing.push(Matrix::new(dim, latent_dim, data)?);
            offsets.push((0..dim).map(|_| rng.random_range(-0.2..0.2)).collect());
        }
        let class_data: Vec<f64> = (0..classes * latent_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        Ok(Self {
            latent_dim,
            classes,
            noise_std,
            sample_count,
            mixing,
            offsets,
            class_matrix: Matrix::new(classes, latent_dim, class_data)?,
        })
    }
}

/// Generate the omni-modal labeled dataset described by `spec`.
pub fn synth_dataset(spec: &SyntheticTaskSpec, rng: &mut impl Rng) -> Result<Dataset> {
    let n_modalities = spec.mixing.len();
    let mut samples = Vec::with_capacity(spec.sample_count);
    for id in 0..spec.sample_count {
        let z: Vec<f64> = (0..spec.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
        let scores = spec.class_matrix.matvec(&z)?;
        let mut label = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[label] {
                label = i;
            }
        }
        let mut features = BTreeMap::new();
        for m in 0..n_modalities {
            let mut x = spec.mixing[m].matvec(&z)?;
            for (v, b) in x.iter_mut().zip(&spec.offsets[m]) {
                *v += b + spec.noise_std * rng.sample::<f64, _>(StandardNormal);
            }
            features.insert(m, x);
        }
        samples.push(Sample {
            id: id as u64,
            label,
            features,
        });
    }
    Ok(Dataset {
        samples,
        num_classes: spec.classes,
        modality_dims: spec.mixing.iter().map(Matrix::rows).collect(),
    })
}

/// Per-device modality availability: each `(device, modality)` pair is kept
/// with probability `mer[modality]` independently; a device whose draw
/// comes up empty gets one uniformly chosen modality forced present.
///
/// Draw order is stable (per device: one Bernoulli draw per modality in
/// order, then one uniform index draw only if the set came up empty), which
/// lets tests replay the pre-force draws from an identical stream.
pub fn assign_modalities(
    n_devices: usize,
    n_modalities: usize,
    mer: &[f64],
    rng: &mut impl Rng,
) -> Result<Vec<BTreeSet<usize>>> {
    if n_modalities == 0 {
        return Err(Error::Empty {
            what: "modality universe",
        });
    }
    if mer.len() != n_modalities {
        return Err(Error::LengthMismatch {
            left: mer.len(),
            right: n_modalities,
        });
    }
    if let Some(rho) = mer.iter().find(|&&r| !(0.0..=1.0).contains(&r)) {
        return Err(Error::InvalidConfig {
            detail: format!("modality existing rate must be in [0,1], got {rho}"),
        });
    }
    let mut assignments = Vec::with_capacity(n_devices);
    for _ in 0..n_devices {
        let mut set = BTreeSet::new();
        for (m, &rho) in mer.iter().enumerate() {
            if rng.random::<f64>() < rho {
                set.insert(m);
            }
        }
        if set.is_empty() {
            set.insert(rng.random_range(0..n_modalities));
        }
        assignments.push(set);
    }
    Ok(assignments)
}

/// The full data layout for one experiment.
#[derive(Debug, Clone)]
pub struct Partition {
    pub public_train: Vec<Sample>,
    pub public_test: Vec<Sample>,
    pub private_train: Vec<Vec<Sample>>,
    pub private_test: Vec<Vec<Sample>>,
    /// Public samples restricted to each device's modalities, same ids and
    /// train/test split as the server's public set.
    pub shard_train: Vec<Vec<Sample>>,
    pub shard_test: Vec<Vec<Sample>>,
}

fn restrict(samples: &[Sample], modalities: &BTreeSet<usize>) -> Vec<Sample> {
    samples
        .iter()
        .map(|s| Sample {
            id: s.id,
            label: s.label,
            features: s
                .features
                .iter()
                .filter(|(m, _)| modalities.contains(m))
                .map(|(m, v)| (*m, v.clone()))
                .collect(),
        })
        .collect()
}

fn split_train_test(samples: Vec<Sample>) -> (Vec<Sample>, Vec<Sample>) {
    let train_len = samples.len() * 9 / 10;
    let mut train = samples;
    let test = train.split_off(train_len);
    (train, test)
}

/// Quarter the data into a public set plus even (±1) per-device private
/// sets, split everything 90/10 into train/test, and derive each device's
/// modality-restricted public shard.
pub fn partition_data(
    dataset: &Dataset,
    assignments: &[BTreeSet<usize>],
    rng: &mut impl Rng,
) -> Result<Partition> {
    let n_devices = assignments.len();
    let required = 4 * n_devices.max(1);
    if dataset.samples.len() < required {
        return Err(Error::DatasetTooSmall {
            got: dataset.samples.len(),
            required,
        });
    }
    let mut order: Vec<usize> = (0..dataset.samples.len()).collect();
    order.shuffle(rng);

    let public_len = dataset.samples.len() / 4;
    let public: Vec<Sample> = order[..public_len]
        .iter()
        .map(|&i| dataset.samples[i].clone())
        .collect();
    let rest = &order[public_len..];

    let base = rest.len() / n_devices;
    let extra = rest.len() % n_devices;
    let mut privates = Vec::with_capacity(n_devices);
    let mut cursor = 0;
    for j in 0..n_devices {
        let take = base + usize::from(j < extra);
        let chunk: Vec<Sample> = rest[cursor..cursor + take]
            .iter()
            .map(|&i| dataset.samples[i].clone())
            .collect();
        cursor += take;
        privates.push(chunk);
    }

    let (public_train, public_test) = split_train_test(public);
    let mut private_train = Vec::with_capacity(n_devices);
    let mut private_test = Vec::with_capacity(n_devices);
    let mut shard_train = Vec::with_capacity(n_devices);
    let mut shard_test = Vec::with_capacity(n_devices);
    for (j, chunk) in privates.into_iter().enumerate() {
        let restricted = restrict(&chunk, &assignments[j]);
        let (tr, te) = split_train_test(restricted);
        private_train.push(tr);
        private_test.push(te);
        shard_train.push(restrict(&public_train, &assignments[j]));
        shard_test.push(restrict(&public_test, &assignments[j]));
    }
    Ok(Partition {
        public_train,
        public_test,
        private_train,
        private_test,
        shard_train,
        shard_test,
    })
}

// ---- external dataset ingestion --------------------------------------------

/// Manifest schema for plugging in externally extracted features: flat
/// little-endian `f32` row files per modality plus per-sample labels and row
/// offsets. A sample may omit modalities.
#[derive(Debug, Serialize, Deserialize)]
pub struct ExternalManifest {
    pub num_classes: usize,
    pub modalities: Vec<ExternalModality>,
    pub samples: Vec<ExternalSample>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExternalModality {
    pub name: String,
    pub dim: usize,
    pub file: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExternalSample {
    pub id: u64,
    pub label: usize,
    /// Modality name -> row index into that modality's feature file.
    pub rows: BTreeMap<String, u64>,
}

/// Load a dataset from `manifest_path` (JSON) and its sibling feature files.
pub fn load_external(manifest_path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest: ExternalManifest =
        serde_json::from_str(&text).map_err(|e| Error::ConfigParse {
            path: manifest_path.display().to_string(),
            detail: format!("manifest: {e}"),
        })?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut feature_rows: Vec<Vec<Vec<f64>>> = Vec::new();
    for modality in &manifest.modalities {
        let mut bytes = Vec::new();
        std::fs::File::open(dir.join(&modality.file))?.read_to_end(&mut bytes)?;
        if bytes.len() % (4 * modality.dim) != 0 {
            return Err(Error::ConfigParse {
                path: modality.file.clone(),
                detail: format!(
                    "file holds {} bytes, not a multiple of {} per row",
                    bytes.len(),
                    4 * modality.dim
                ),
            });
        }
        let rows = bytes.len() / (4 * modality.dim);
        let mut parsed = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut row = Vec::with_capacity(modality.dim);
            for c in 0..modality.dim {
                let at = (r * modality.dim + c) * 4;
                let raw: [u8; 4] = bytes[at..at + 4].try_into().expect("bounds checked");
                let v = f64::from(f32::from_le_bytes(raw));
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        what: "external feature file",
                        index: r * modality.dim + c,
                    });
                }
                row.push(v);
            }
            parsed.push(row);
        }
        feature_rows.push(parsed);
    }

    let name_to_index: BTreeMap<&str, usize> = manifest
        .modalities
        .iter()
        .enumerate()
        .map(|(i, m)| (m.name.as_str(), i))
        .collect();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for s in &manifest.samples {
        if s.label >= manifest.num_classes {
            return Err(Error::LabelOutOfRange {
                label: s.label,
                vocab: manifest.num_classes,
            });
        }
        let mut features = BTreeMap::new();
        for (name, &row) in &s.rows {
            let &m = name_to_index.get(name.as_str()).ok_or_else(|| Error::UnknownModality {
                name: name.clone(),
            })?;
            let table = &feature_rows[m];
            let row = usize::try_from(row).expect("row index fits in usize");
            if row >= table.len() {
                return Err(Error::ConfigParse {
                    path: manifest_path.display().to_string(),
                    detail: format!(
                        "sample {} points at row {row} of {} ({} rows)",
                        s.id,
                        manifest.modalities[m].name,
                        table.len()
                    ),
                });
            }
            features.insert(m, table[row].clone());
        }
        if features.is_empty() {
            return Err(Error::Empty {
                what: "external sample modalities",
            });
        }
        samples.push(Sample {
            id: s.id,
            label: s.label,
            features,
        });
    }
    Ok(Dataset {
        samples,
        num_classes: manifest.num_classes,
        modality_dims: manifest.modalities.iter().map(|m| m.dim).collect(),
    })
}
