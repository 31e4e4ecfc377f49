//! Synthetic multi-modal multi-instance multi-label datasets.
//!
//! Bags are generated from a correlated Bernoulli label model (Gaussian
//! copula against a configurable PSD correlation), with each instance a
//! noisy copy of a label-conditioned prototype, so both modalities are
//! individually predictive. Files are JSONL — one header line, then one
//! record per bag pair — with a gzip variant selected by the `.gz`
//! extension.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{cholesky, LinalgError};
use crate::metric::{psd_project, MetricError, SimilarityKernel};
use crate::net::{Bag, Instance};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("schema version {found}, this reader expects {expected}")]
    SchemaVersionMismatch { found: u32, expected: u32 },
    #[error("dimension inconsistency at line {line}: {message}")]
    DimensionInconsistency { line: usize, message: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Latent label correlation: an explicit PSD matrix or a seeded random one.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationSpec {
    Matrix(Vec<Vec<f64>>),
    RandomPsd { seed: u64 },
}

fn default_label_marginal() -> f64 {
    0.3
}
fn default_labeled_fraction() -> f64 {
    0.3
}
fn default_test_fraction() -> f64 {
    0.3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub label_count: usize,
    pub bag_count: usize,
    /// Inclusive (min, max) instances per bag, both modalities.
    pub instance_count_range: (usize, usize),
    pub feature_dims: (usize, usize),
    pub latent_label_correlation: CorrelationSpec,
    pub noise_level: f64,
    /// Bernoulli mean of each label under the copula.
    #[serde(default = "default_label_marginal")]
    pub label_marginal: f64,
    #[serde(default = "default_labeled_fraction")]
    pub labeled_fraction: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub missing_modality_fraction: f64,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let err = |msg: String| Err(DataError::InvalidConfig(msg));
        if self.label_count < 2 {
            return err(format!("label_count must be >= 2, got {}", self.label_count));
        }
        let (lo, hi) = self.instance_count_range;
        if lo == 0 || hi < lo {
            return err(format!("instance_count_range ({lo}, {hi}) is empty"));
        }
        if self.feature_dims.0 == 0 || self.feature_dims.1 == 0 {
            return err("feature_dims must be positive".into());
        }
        if self.noise_level < 0.0 || !self.noise_level.is_finite() {
            return err(format!("noise_level {} must be nonnegative", self.noise_level));
        }
        for (name, value) in [
            ("label_marginal", self.label_marginal),
            ("labeled_fraction", self.labeled_fraction),
            ("test_fraction", self.test_fraction),
            ("missing_modality_fraction", self.missing_modality_fraction),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return err(format!("{name} {value} must lie in [0, 1]"));
            }
        }
        if self.label_marginal == 0.0 || self.label_marginal == 1.0 {
            return err("label_marginal must be strictly inside (0, 1)".into());
        }
        if let CorrelationSpec::Matrix(rows) = &self.latent_label_correlation {
            if rows.len() != self.label_count
                || rows.iter().any(|r| r.len() != self.label_count)
            {
                return err("latent_label_correlation must be label_count x label_count".into());
            }
        }
        Ok(())
    }
}

/// File header record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub label_count: usize,
    pub d_1: usize,
    pub d_2: usize,
    pub label_names: Vec<String>,
}

/// The two optional modality bags of one record, as raw instance rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagFields {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub m1: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub m2: Option<Vec<Vec<f64>>>,
}

/// One bag pair with optional labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagRecord {
    pub id: u64,
    pub bags: BagFields,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub labels: Option<Vec<u8>>,
}

impl BagRecord {
    /// Materialise one modality as a [`Bag`], if present.
    pub fn bag(&self, modality: u8) -> Option<Bag> {
        let rows = match modality {
            1 => self.bags.m1.as_ref(),
            2 => self.bags.m2.as_ref(),
            _ => None,
        }?;
        let instances = rows
            .iter()
            .map(|r| Instance {
                features: r.clone(),
            })
            .collect();
        Some(Bag::new(modality, self.id, instances))
    }
}

/// A full dataset: header plus records.
#[derive(Debug, Clone, PartialEq)]
pub struct M3Dataset {
    pub header: DatasetHeader,
    pub records: Vec<BagRecord>,
}

/// Disjoint, exhaustive partition of a dataset's records.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train_labeled: Vec<BagRecord>,
    pub train_unlabeled: Vec<BagRecord>,
    pub test: Vec<BagRecord>,
}

/// Inverse standard-normal CDF (Acklam's rational approximation,
/// |relative error| < 1.2e-9 on (0, 1)).
fn inverse_normal_cdf(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -inverse_normal_cdf(1.0 - p)
    }
}

/// One standard-normal draw via Box–Muller.
fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.gen();
        return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    }
}

/// Build the unit-diagonal correlation matrix from the spec.
fn correlation_matrix(cfg: &GeneratorConfig) -> Result<Array2<f64>, DataError> {
    let l = cfg.label_count;
    let raw = match &cfg.latent_label_correlation {
        CorrelationSpec::Matrix(rows) => {
            let mut m = Array2::zeros((l, l));
            for (i, row) in rows.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    m[[i, j]] = v;
                }
            }
            m
        }
        CorrelationSpec::RandomPsd { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let a = Array2::from_shape_fn((l, l), |_| standard_normal(&mut rng));
            a.dot(&a.t()) / l as f64 + Array2::<f64>::eye(l) * 0.25
        }
    };
    // Normalise to unit diagonal so the copula draws are standard normal.
    let mut corr = Array2::zeros((l, l));
    for i in 0..l {
        let di = raw[[i, i]];
        if di <= 0.0 {
            return Err(DataError::InvalidConfig(format!(
                "latent_label_correlation diagonal entry {i} is {di}, must be positive"
            )));
        }
        for j in 0..l {
            corr[[i, j]] = raw[[i, j]] / (di * raw[[j, j]]).sqrt();
        }
    }
    Ok(corr)
}

/// Orthonormal-ish label prototypes for one modality: Gram–Schmidt over
/// seeded Gaussian vectors (falls back to plain normalised vectors when
/// the feature dimension is smaller than the label count).
fn prototypes<R: Rng>(rng: &mut R, label_count: usize, dim: usize) -> Vec<Array1<f64>> {
    let mut protos: Vec<Array1<f64>> = Vec::with_capacity(label_count);
    for _ in 0..label_count {
        let mut v = Array1::from_shape_fn(dim, |_| standard_normal(rng));
        if dim >= label_count {
            for p in &protos {
                let proj = v.dot(p);
                v.scaled_add(-proj, p);
            }
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-9 {
            v /= norm;
        }
        protos.push(v);
    }
    protos
}

/// Generate a complete (all-labeled, both-modality) dataset plus the
/// ground-truth label similarity kernel.
pub fn generate(cfg: &GeneratorConfig) -> Result<(M3Dataset, SimilarityKernel), DataError> {
    cfg.validate()?;
    let l = cfg.label_count;
    let corr = correlation_matrix(cfg)?;
    let chol = cholesky(&(&corr + &(Array2::<f64>::eye(l) * 1e-9)))
        .map_err(|e| DataError::InvalidConfig(format!("latent_label_correlation: {e}")))?;
    let threshold = inverse_normal_cdf(cfg.label_marginal);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let protos_1 = prototypes(&mut rng, l, cfg.feature_dims.0);
    let protos_2 = prototypes(&mut rng, l, cfg.feature_dims.1);

    let mut records = Vec::with_capacity(cfg.bag_count);
    for id in 0..cfg.bag_count as u64 {
        // Correlated Bernoulli labels: threshold a Gaussian-copula draw.
        let g = Array1::from_shape_fn(l, |_| standard_normal(&mut rng));
        let z = chol.dot(&g);
        let labels: Vec<u8> = z.iter().map(|&v| u8::from(v < threshold)).collect();
        let active: Vec<usize> = (0..l).filter(|&j| labels[j] == 1).collect();

        let modality = |protos: &[Array1<f64>], dim: usize, rng: &mut ChaCha8Rng| {
            let (lo, hi) = cfg.instance_count_range;
            let count = rng.gen_range(lo..=hi);
            (0..count)
                .map(|j| {
                    let mut features = vec![0.0; dim];
                    if !active.is_empty() {
                        let proto = &protos[active[j % active.len()]];
                        for (f, p) in features.iter_mut().zip(proto.iter()) {
                            *f = *p;
                        }
                    }
                    for f in features.iter_mut() {
                        *f += cfg.noise_level * standard_normal(rng);
                    }
                    features
                })
                .collect::<Vec<_>>()
        };
        let m1 = modality(&protos_1, cfg.feature_dims.0, &mut rng);
        let m2 = modality(&protos_2, cfg.feature_dims.1, &mut rng);
        records.push(BagRecord {
            id,
            bags: BagFields {
                m1: Some(m1),
                m2: Some(m2),
            },
            labels: Some(labels),
        });
    }

    let header = DatasetHeader {
        version: SCHEMA_VERSION,
        label_count: l,
        d_1: cfg.feature_dims.0,
        d_2: cfg.feature_dims.1,
        label_names: (0..l).map(|i| format!("label_{i}")).collect(),
    };
    let kernel = psd_project(&corr)?;
    Ok((M3Dataset { header, records }, kernel))
}

/// Partition into test / train-labeled / train-unlabeled with seeded
/// shuffling (floor rule: `floor(test_fraction·N)` test records, then
/// `floor(labeled_fraction·N_train)` labeled, remainder unlabeled).
///
/// Modality masking applies to the train-unlabeled split only: labeled
/// training examples must retain both bags, and the test split stays
/// complete for evaluation.
pub fn split(data: &M3Dataset, cfg: &GeneratorConfig) -> Result<SplitDataset, DataError> {
    cfg.validate()?;
    let n = data.records.len();
    if n == 0 {
        return Err(DataError::InsufficientData("dataset has no records".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    order.shuffle(&mut shuffle_rng);

    let n_test = (cfg.test_fraction * n as f64).floor() as usize;
    let n_train = n - n_test;
    let n_labeled = (cfg.labeled_fraction * n_train as f64).floor() as usize;

    let test: Vec<BagRecord> = order[..n_test]
        .iter()
        .map(|&i| data.records[i].clone())
        .collect();
    let train_labeled: Vec<BagRecord> = order[n_test..n_test + n_labeled]
        .iter()
        .map(|&i| data.records[i].clone())
        .collect();
    let mut train_unlabeled: Vec<BagRecord> = order[n_test + n_labeled..]
        .iter()
        .map(|&i| data.records[i].clone())
        .collect();

    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    mask_rng.set_stream(2);
    for record in &mut train_unlabeled {
        if mask_rng.gen::<f64>() < cfg.missing_modality_fraction {
            if mask_rng.gen_bool(0.5) {
                record.bags.m1 = None;
            } else {
                record.bags.m2 = None;
            }
        }
    }
    Ok(SplitDataset {
        train_labeled,
        train_unlabeled,
        test,
    })
}

fn validate_record(
    record: &BagRecord,
    header: &DatasetHeader,
    line: usize,
) -> Result<(), DataError> {
    let check_bag = |rows: &Option<Vec<Vec<f64>>>, dim: usize, name: &str| {
        if let Some(rows) = rows {
            for (i, row) in rows.iter().enumerate() {
                if row.len() != dim {
                    return Err(DataError::DimensionInconsistency {
                        line,
                        message: format!(
                            "{name} instance {i} has {} features, header says {dim}",
                            row.len()
                        ),
                    });
                }
            }
        }
        Ok(())
    };
    check_bag(&record.bags.m1, header.d_1, "m1")?;
    check_bag(&record.bags.m2, header.d_2, "m2")?;
    if let Some(labels) = &record.labels {
        if labels.len() != header.label_count {
            return Err(DataError::DimensionInconsistency {
                line,
                message: format!(
                    "label vector has length {}, header says {}",
                    labels.len(),
                    header.label_count
                ),
            });
        }
        if let Some(bad) = labels.iter().position(|&v| v > 1) {
            return Err(DataError::ParseError {
                line,
                message: format!("label {bad} is {}, expected 0 or 1", labels[bad]),
            });
        }
    }
    Ok(())
}

/// Serialise as JSONL: the header line, then one record per line.
pub fn write_dataset(data: &M3Dataset, path: &Path) -> Result<(), DataError> {
    let mut body = serde_json::to_string(&data.header).expect("header serialises");
    body.push('\n');
    for record in &data.records {
        body.push_str(&serde_json::to_string(record).expect("record serialises"));
        body.push('\n');
    }
    let file = File::create(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(body.as_bytes())?;
        enc.finish()?;
    } else {
        let mut file = file;
        file.write_all(body.as_bytes())?;
    }
    Ok(())
}

/// Parse a JSONL dataset file, gunzipping when the extension is `.gz`.
pub fn read_dataset(path: &Path) -> Result<M3Dataset, DataError> {
    let file = File::open(path)?;
    let mut text = String::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(file).read_to_string(&mut text)?;
    } else {
        BufReader::new(file).read_to_string(&mut text)?;
    }
    let mut lines = text.lines().enumerate();
    let (_, header_line) = lines.next().ok_or(DataError::ParseError {
        line: 1,
        message: "file is empty, expected a header line".into(),
    })?;
    let header: DatasetHeader =
        serde_json::from_str(header_line).map_err(|e| DataError::ParseError {
            line: 1,
            message: e.to_string(),
        })?;
    if header.version != SCHEMA_VERSION {
        return Err(DataError::SchemaVersionMismatch {
            found: header.version,
            expected: SCHEMA_VERSION,
        });
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let record: BagRecord = serde_json::from_str(line).map_err(|e| DataError::ParseError {
            line: line_no,
            message: e.to_string(),
        })?;
        validate_record(&record, &header, line_no)?;
        records.push(record);
    }
    Ok(M3Dataset { header, records })
}
