//! Feed-forward network that predicts the process-model error.
//!
//! Two hidden ReLU layers (256 units by default) map the standardized feature
//! vector to a 6-vector correction. Training minimizes the mean squared error
//! in the original units of the correction using mini-batch Adam.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::spatial::Vec6;

use super::dynamics::{feature_names, FEATURE_DIM};

const MAGIC: &[u8; 4] = b"MENN";
const FORMAT_VERSION: u32 = 1;
const STD_FLOOR: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("sample {index} has {found} features, expected {expected}")]
    FeatureDim { index: usize, found: usize, expected: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch} (last finite loss {last_loss:e})")]
    NonFiniteLoss { epoch: usize, batch: usize, last_loss: f64 },
    #[error("network file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    weights: DMatrix<f64>,
    bias: DVector<f64>,
}

impl Dense {
    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / cols as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        Self {
            weights: DMatrix::from_fn(rows, cols, |_, _| normal.sample(rng)),
            bias: DVector::zeros(rows),
        }
    }

    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = &self.weights * x;
        for mut col in out.column_iter_mut() {
            col += &self.bias;
        }
        out
    }
}

fn relu(m: &mut DMatrix<f64>) {
    m.apply(|v| *v = v.max(0.0));
}

/// Input/output standardization stored with the weights.
#[derive(Debug, Clone, PartialEq)]
struct Scaling {
    in_mean: DVector<f64>,
    in_std: DVector<f64>,
    out_mean: DVector<f64>,
    out_std: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelErrorNet {
    layers: Vec<Dense>,
    scaling: Scaling,
    /// Set for the all-zero network so inference can be skipped.
    zero: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop once the full-dataset loss drops to this value.
    pub loss_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            batch_size: 256,
            learning_rate: 1e-3,
            max_epochs: 200,
            loss_threshold: 0.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs: usize,
    /// Full-dataset loss after each epoch.
    pub loss_curve: Vec<f64>,
    pub converged: bool,
}

/// One supervised example: features and the observed model error.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub features: Vec<f64>,
    pub target: Vec6,
}

struct Adam {
    m: Vec<(DMatrix<f64>, DVector<f64>)>,
    v: Vec<(DMatrix<f64>, DVector<f64>)>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(layers: &[Dense], lr: f64) -> Self {
        let zeros = || {
            layers
                .iter()
                .map(|l| (l.weights.map(|_| 0.0), l.bias.map(|_| 0.0)))
                .collect::<Vec<_>>()
        };
        Self { m: zeros(), v: zeros(), t: 0, lr }
    }

    fn step(&mut self, layers: &mut [Dense], grads: &[(DMatrix<f64>, DVector<f64>)]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let lr = self.lr;
        for (i, layer) in layers.iter_mut().enumerate() {
            let (gw, gb) = &grads[i];
            let (mw, mb) = &mut self.m[i];
            let (vw, vb) = &mut self.v[i];
            let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = Self::B1 * *m + (1.0 - Self::B1) * g;
                *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            };
            for k in 0..gw.len() {
                update(&mut layer.weights[k], gw[k], &mut mw[k], &mut vw[k]);
            }
            for k in 0..gb.len() {
                update(&mut layer.bias[k], gb[k], &mut mb[k], &mut vb[k]);
            }
        }
    }
}

impl ModelErrorNet {
    /// Network whose output is identically zero (plain model-based filter).
    pub fn zeroed() -> Self {
        let hidden = 256;
        let layers = vec![
            Dense { weights: DMatrix::zeros(hidden, FEATURE_DIM), bias: DVector::zeros(hidden) },
            Dense { weights: DMatrix::zeros(hidden, hidden), bias: DVector::zeros(hidden) },
            Dense { weights: DMatrix::zeros(6, hidden), bias: DVector::zeros(6) },
        ];
        let scaling = Scaling {
            in_mean: DVector::zeros(FEATURE_DIM),
            in_std: DVector::from_element(FEATURE_DIM, 1.0),
            out_mean: DVector::zeros(6),
            out_std: DVector::from_element(6, 1.0),
        };
        Self { layers, scaling, zero: true }
    }

    fn initialized(input_dim: usize, hidden: usize, scaling: Scaling, rng: &mut ChaCha8Rng) -> Self {
        let layers = vec![
            Dense::random(hidden, input_dim, rng),
            Dense::random(hidden, hidden, rng),
            // zero output layer: the untrained net predicts the target mean
            Dense { weights: DMatrix::zeros(6, hidden), bias: DVector::zeros(6) },
        ];
        Self { layers, scaling, zero: false }
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    fn standardize(&self, x: &mut DMatrix<f64>) {
        for mut col in x.column_iter_mut() {
            for r in 0..col.len() {
                // a feature that never varied in training carries no information
                let sd = self.scaling.in_std[r];
                col[r] = if sd > 0.0 { (col[r] - self.scaling.in_mean[r]) / sd } else { 0.0 };
            }
        }
    }

    /// Forward pass on standardized inputs; returns standardized outputs and
    /// the two hidden activations.
    fn forward_std(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let mut h1 = self.layers[0].forward(x);
        relu(&mut h1);
        let mut h2 = self.layers[1].forward(&h1);
        relu(&mut h2);
        let y = self.layers[2].forward(&h2);
        (y, h1, h2)
    }

    fn destandardize(&self, y: &mut DMatrix<f64>) {
        for mut col in y.column_iter_mut() {
            for r in 0..6 {
                col[r] = col[r] * self.scaling.out_std[r] + self.scaling.out_mean[r];
            }
        }
    }

    pub fn predict(&self, features: &[f64]) -> Vec6 {
        if self.zero {
            return Vec6::zeros();
        }
        let mut x = DMatrix::from_column_slice(features.len(), 1, features);
        self.standardize(&mut x);
        let (mut y, _, _) = self.forward_std(&x);
        self.destandardize(&mut y);
        Vec6::from_column_slice(y.as_slice())
    }

    /// Predictions for many samples at once (one column per sample).
    pub fn predict_batch(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        if self.zero {
            return DMatrix::zeros(6, features.ncols());
        }
        let mut x = features.clone();
        self.standardize(&mut x);
        let (mut y, _, _) = self.forward_std(&x);
        self.destandardize(&mut y);
        y
    }

    /// Mean over samples of the squared error norm, in original units.
    pub fn loss(&self, data: &[TrainingSample]) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let x = stack_features(data);
        let y = self.predict_batch(&x);
        let sse: f64 = data
            .iter()
            .enumerate()
            .map(|(j, s)| (0..6).map(|r| (y[(r, j)] - s.target[r]).powi(2)).sum::<f64>())
            .sum();
        sse / data.len() as f64
    }

    /// Trains a fresh network. Deterministic for a given seed.
    pub fn train(data: &[TrainingSample], cfg: &TrainConfig) -> Result<(Self, TrainReport), NetError> {
        if data.is_empty() {
            return Err(NetError::EmptyDataset);
        }
        for (index, s) in data.iter().enumerate() {
            if s.features.len() != FEATURE_DIM {
                return Err(NetError::FeatureDim { index, found: s.features.len(), expected: FEATURE_DIM });
            }
        }
        let n = data.len();
        let raw_x = stack_features(data);
        let targets = DMatrix::from_fn(6, n, |r, c| data[c].target[r]);
        let scaling = Scaling {
            in_mean: row_mean(&raw_x),
            in_std: input_std(&raw_x),
            out_mean: row_mean(&targets),
            out_std: row_std(&targets),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut net = Self::initialized(FEATURE_DIM, cfg.hidden, scaling, &mut rng);
        let mut x = raw_x;
        net.standardize(&mut x);
        // Outputs are trained in standardized coordinates with per-row weights
        // out_std^2, which is exactly the original-unit loss.
        let t_std = DMatrix::from_fn(6, n, |r, c| (targets[(r, c)] - net.scaling.out_mean[r]) / net.scaling.out_std[r]);
        let w2: Vec<f64> = net.scaling.out_std.iter().map(|s| s * s).collect();

        let full_loss = |net: &Self| -> f64 {
            let (y, _, _) = net.forward_std(&x);
            let mut sse = 0.0;
            for c in 0..n {
                for r in 0..6 {
                    sse += w2[r] * (y[(r, c)] - t_std[(r, c)]).powi(2);
                }
            }
            sse / n as f64
        };

        let initial_loss = full_loss(&net);
        let mut report = TrainReport {
            initial_loss,
            final_loss: initial_loss,
            epochs: 0,
            loss_curve: Vec::new(),
            converged: initial_loss <= cfg.loss_threshold,
        };
        if report.converged {
            return Ok((net, report));
        }

        let mut adam = Adam::new(&net.layers, cfg.learning_rate);
        let mut order: Vec<usize> = (0..n).collect();
        let bs = cfg.batch_size.max(1);
        for epoch in 0..cfg.max_epochs {
            order.shuffle(&mut rng);
            for (batch, chunk) in order.chunks(bs).enumerate() {
                let xb = DMatrix::from_fn(FEATURE_DIM, chunk.len(), |r, c| x[(r, chunk[c])]);
                let tb = DMatrix::from_fn(6, chunk.len(), |r, c| t_std[(r, chunk[c])]);
                let grads = net.gradients(&xb, &tb, &w2);
                if grads.iter().any(|(w, b)| w.iter().chain(b.iter()).any(|v| !v.is_finite())) {
                    return Err(NetError::NonFiniteLoss { epoch, batch, last_loss: report.final_loss });
                }
                adam.step(&mut net.layers, &grads);
            }
            let loss = full_loss(&net);
            if !loss.is_finite() {
                return Err(NetError::NonFiniteLoss { epoch, batch: 0, last_loss: report.final_loss });
            }
            report.loss_curve.push(loss);
            report.final_loss = loss;
            report.epochs = epoch + 1;
            log::debug!("epoch {} loss {:.6e}", epoch + 1, loss);
            if loss <= cfg.loss_threshold {
                report.converged = true;
                break;
            }
        }
        Ok((net, report))
    }

    fn gradients(&self, x: &DMatrix<f64>, t: &DMatrix<f64>, w2: &[f64]) -> Vec<(DMatrix<f64>, DVector<f64>)> {
        let b = x.ncols() as f64;
        let (y, h1, h2) = self.forward_std(x);
        let mut dy = y - t;
        for mut col in dy.column_iter_mut() {
            for r in 0..6 {
                col[r] *= 2.0 * w2[r] / b;
            }
        }
        let g3 = (&dy * h2.transpose(), row_sum(&dy));
        let mut dh2 = self.layers[2].weights.transpose() * &dy;
        dh2.zip_apply(&h2, |g, h| if h <= 0.0 { *g = 0.0 });
        let g2 = (&dh2 * h1.transpose(), row_sum(&dh2));
        let mut dh1 = self.layers[1].weights.transpose() * &dh2;
        dh1.zip_apply(&h1, |g, h| if h <= 0.0 { *g = 0.0 });
        let g1 = (&dh1 * x.transpose(), row_sum(&dh1));
        vec![g1, g2, g3]
    }

    fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, FORMAT_VERSION);
        put_u32(&mut buf, self.input_dim() as u32);
        put_u32(&mut buf, 6);
        put_u32(&mut buf, self.layers.len() as u32);
        for l in &self.layers {
            put_u32(&mut buf, l.weights.nrows() as u32);
            put_u32(&mut buf, l.weights.ncols() as u32);
            for r in 0..l.weights.nrows() {
                for c in 0..l.weights.ncols() {
                    put_f64(&mut buf, l.weights[(r, c)]);
                }
            }
            l.bias.iter().for_each(|&v| put_f64(&mut buf, v));
        }
        for v in [&self.scaling.in_mean, &self.scaling.in_std, &self.scaling.out_mean, &self.scaling.out_std] {
            v.iter().for_each(|&x| put_f64(&mut buf, x));
        }
        buf.push(self.zero as u8);
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    fn decode(bytes: &[u8], path: &str) -> Result<Self, NetError> {
        let bad = |reason: &str| NetError::Format { path: path.to_string(), reason: reason.to_string() };
        if bytes.len() < MAGIC.len() + 32 {
            return Err(bad("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut rd = Reader { buf: body, pos: 0 };
        if rd.take(4).ok_or_else(|| bad("truncated"))? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = rd.u32().ok_or_else(|| bad("truncated"))?;
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let input_dim = rd.u32().ok_or_else(|| bad("truncated"))? as usize;
        let output_dim = rd.u32().ok_or_else(|| bad("truncated"))? as usize;
        let n_layers = rd.u32().ok_or_else(|| bad("truncated"))? as usize;
        if output_dim != 6 || n_layers != 3 {
            return Err(bad("unexpected architecture"));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let rows = rd.u32().ok_or_else(|| bad("truncated"))? as usize;
            let cols = rd.u32().ok_or_else(|| bad("truncated"))? as usize;
            let w = rd.f64s(rows * cols).ok_or_else(|| bad("truncated"))?;
            let b = rd.f64s(rows).ok_or_else(|| bad("truncated"))?;
            layers.push(Dense {
                weights: DMatrix::from_row_slice(rows, cols, &w),
                bias: DVector::from_vec(b),
            });
        }
        let mut vecs = Vec::new();
        for len in [input_dim, input_dim, 6, 6] {
            vecs.push(DVector::from_vec(rd.f64s(len).ok_or_else(|| bad("truncated"))?));
        }
        let zero = rd.take(1).ok_or_else(|| bad("truncated"))?[0] != 0;
        if rd.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        let out_std = vecs.pop().unwrap();
        let out_mean = vecs.pop().unwrap();
        let in_std = vecs.pop().unwrap();
        let in_mean = vecs.pop().unwrap();
        Ok(Self { layers, scaling: Scaling { in_mean, in_std, out_mean, out_std }, zero })
    }

    /// Writes the binary weights file plus a `<path>.json` metadata sidecar.
    pub fn save(&self, path: &Path, report: Option<&TrainReport>) -> Result<(), NetError> {
        let bytes = self.encode();
        write_atomic(path, &bytes)?;
        let sidecar = NetMetadata {
            format: "MENN".into(),
            version: FORMAT_VERSION,
            input_dim: self.input_dim(),
            hidden_layers: vec![self.hidden(), self.layers[1].weights.nrows()],
            output_dim: 6,
            activation: "relu".into(),
            features: feature_names(),
            outputs: ["wx", "wy", "wz", "vx", "vy", "vz"].iter().map(|s| s.to_string()).collect(),
            sha256: hex_digest(&bytes[bytes.len() - 32..]),
            training: report.cloned(),
        };
        let json = serde_json::to_vec_pretty(&sidecar).expect("metadata serializes");
        write_atomic(&sidecar_path(path), &json)
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let bytes = std::fs::read(path).map_err(|source| NetError::Io { path: path.display().to_string(), source })?;
        Self::decode(&bytes, &path.display().to_string())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.encode()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetError> {
        Self::decode(bytes, "<memory>")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetMetadata {
    pub format: String,
    pub version: u32,
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub output_dim: usize,
    pub activation: String,
    pub features: Vec<String>,
    pub outputs: Vec<String>,
    pub sha256: String,
    pub training: Option<TrainReport>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), NetError> {
    let io = |source| NetError::Io { path: path.display().to_string(), source };
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

fn stack_features(data: &[TrainingSample]) -> DMatrix<f64> {
    DMatrix::from_fn(FEATURE_DIM, data.len(), |r, c| data[c].features[r])
}

fn row_mean(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.nrows(), |r, _| m.row(r).mean())
}

/// Input spread; constant features get 0 and are masked out.
fn input_std(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.nrows(), |r, _| {
        let s = m.row(r).variance().sqrt();
        if s > STD_FLOOR { s } else { 0.0 }
    })
}

fn row_std(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.nrows(), |r, _| {
        let s = m.row(r).variance().sqrt();
        if s > STD_FLOOR { s } else { 1.0 }
    })
}

fn row_sum(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.nrows(), |r, _| m.row(r).sum())
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn f64s(&mut self, n: usize) -> Option<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8)?)?;
        Some(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn dataset(n: usize, target: impl Fn(&[f64]) -> Vec6) -> Vec<TrainingSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        (0..n)
            .map(|_| {
                let features: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
                let target = target(&features);
                TrainingSample { features, target }
            })
            .collect()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig { hidden: 64, max_epochs: 60, ..Default::default() }
    }

    #[test]
    fn zero_targets_fit_to_zero() {
        let data = dataset(300, |_| Vec6::zeros());
        let (net, _) = ModelErrorNet::train(&data, &small_cfg()).unwrap();
        for s in &data {
            assert!(net.predict(&s.features).norm() <= 1e-3);
        }
    }

    #[test]
    fn constant_target_is_learned() {
        let c = Vec6::new(0.01, -0.02, 0.03, 0.1, -0.05, 0.2);
        let data = dataset(300, |_| c);
        let (net, _) = ModelErrorNet::train(&data, &small_cfg()).unwrap();
        for s in data.iter().take(20) {
            assert!((net.predict(&s.features) - c).amax() <= 1e-2);
        }
    }

    #[test]
    fn sinusoidal_bias_reduces_loss() {
        let data = dataset(2000, |f| {
            let e = 0.1 * (3.0 * f[12]).sin();
            Vec6::new(0.0, 0.0, 0.0, e, 0.5 * e, 0.0)
        });
        let cfg = TrainConfig { max_epochs: 40, ..Default::default() };
        let (net, report) = ModelErrorNet::train(&data, &cfg).unwrap();
        assert!(report.final_loss <= 0.1 * report.initial_loss, "{report:?}");
        assert!((net.loss(&data) - report.final_loss).abs() < 1e-9 * report.initial_loss.max(1.0));
    }

    #[test]
    fn training_is_reproducible_and_serializes_bit_exact() {
        let data = dataset(200, |f| Vec6::new(f[0], 0.0, 0.0, 0.0, f[1] * f[2], 0.0));
        let cfg = TrainConfig { hidden: 32, max_epochs: 5, ..Default::default() };
        let (a, ra) = ModelErrorNet::train(&data, &cfg).unwrap();
        let (b, rb) = ModelErrorNet::train(&data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        let back = ModelErrorNet::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(back, a);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        a.save(&path, Some(&ra)).unwrap();
        assert_eq!(ModelErrorNet::load(&path).unwrap(), a);
        let meta: NetMetadata = serde_json::from_slice(&std::fs::read(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(meta.features.len(), FEATURE_DIM);
        assert_eq!(meta.hidden_layers, vec![32, 32]);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = ModelErrorNet::zeroed().to_bytes();
        assert!(ModelErrorNet::from_bytes(&bytes[..bytes.len() - 10]).is_err());
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(ModelErrorNet::from_bytes(&flipped), Err(NetError::Format { .. })));
        assert!(ModelErrorNet::from_bytes(&bytes).unwrap().is_zero());
    }

    #[test]
    fn rejects_bad_datasets() {
        assert!(matches!(ModelErrorNet::train(&[], &small_cfg()), Err(NetError::EmptyDataset)));
        let bad = vec![TrainingSample { features: vec![0.0; 3], target: Vec6::zeros() }];
        assert!(matches!(ModelErrorNet::train(&bad, &small_cfg()), Err(NetError::FeatureDim { .. })));
        let mut data = dataset(10, |_| Vec6::zeros());
        data[3].target[0] = f64::NAN;
        assert!(matches!(ModelErrorNet::train(&data, &small_cfg()), Err(NetError::NonFiniteLoss { .. })));
    }

    #[test]
    fn zeroed_net_outputs_zero() {
        let net = ModelErrorNet::zeroed();
        assert_eq!(net.predict(&[1.0; FEATURE_DIM]), Vec6::zeros());
        assert_eq!(net.hidden(), 256);
    }
}
