//! Synthetic multimodal data and the AMRDATA feature-file format.
//!
//! Synthetic samples follow a class-prototype model: for class `c` and
//! modality `m` a unit-norm prototype `μ_c^m` is drawn once, and a sample is
//! `s_m · μ_y^m + N(0, σ_m²)` per coordinate. The per-modality SNR `s_m / σ_m`
//! sets how informative (and therefore how dominant) each modality is.
//!
//! AMRDATA layout (little-endian): magic `AMRDATA1`; `M: u32`, `C: u32`,
//! `N: u64`, `dims[M]: u32`; per modality a row-major `N × dim` block of
//! `f32`; then `N` labels as `u32`.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATA_MAGIC: &[u8; 8] = b"AMRDATA1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub modality_dims: Vec<usize>,
    pub signal_scales: Vec<f64>,
    pub noise_stds: Vec<f64>,
    #[serde(default)]
    pub label_noise: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let m = self.modality_dims.len();
        if m == 0 {
            return Err(Error::Config("synthetic data needs at least one modality".into()));
        }
        if self.signal_scales.len() != m || self.noise_stds.len() != m {
            return Err(Error::Config(
                "signal_scales and noise_stds need one entry per modality".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.train_samples == 0 || self.val_samples == 0 {
            return Err(Error::Config("sample counts must be >= 1".into()));
        }
        if self.modality_dims.contains(&0) {
            return Err(Error::Config("modality dims must be >= 1".into()));
        }
        if self.signal_scales.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return Err(Error::Config("signal scales must be >= 0".into()));
        }
        if self.noise_stds.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config("noise stds must be > 0".into()));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::Config("label_noise must be in [0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Row-aligned per-modality features plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<Tensor>,
    labels: Vec<usize>,
    num_classes: usize,
    pub split: Split,
}

/// One minibatch; every input has the same number of rows as `labels`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalBatch {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Vec<Tensor>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Data("dataset needs at least one modality".into()));
        }
        for (m, f) in features.iter().enumerate() {
            if f.rank() != 2 || f.rows() != labels.len() {
                return Err(Error::Data(format!(
                    "modality {m} has shape {:?}, expected {} rows",
                    f.shape(),
                    labels.len()
                )));
            }
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            split: Split::Train,
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_modalities(&self) -> usize {
        self.features.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn modality_dims(&self) -> Vec<usize> {
        self.features.iter().map(Tensor::cols).collect()
    }

    pub fn features(&self) -> &[Tensor] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// The whole dataset as one batch.
    pub fn as_batch(&self) -> MultimodalBatch {
        MultimodalBatch {
            inputs: self.features.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Single-modality copy.
    pub fn modality(&self, m: usize) -> Result<Dataset> {
        let f = self
            .features
            .get(m)
            .ok_or_else(|| Error::Input(format!("modality {m} out of range")))?;
        Ok(Dataset {
            features: vec![f.clone()],
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            split: self.split,
        })
    }

    fn gather(&self, rows: &[usize]) -> MultimodalBatch {
        let inputs = self
            .features
            .iter()
            .map(|f| {
                let c = f.cols();
                let mut data = Vec::with_capacity(rows.len() * c);
                for &r in rows {
                    data.extend_from_slice(f.row(r));
                }
                Tensor::new(vec![rows.len(), c], data).expect("gather shape")
            })
            .collect();
        MultimodalBatch {
            inputs,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    /// Splits into minibatches in an order shuffled by `shuffle_seed`
    /// (`None` keeps file order). The final short batch is kept.
    pub fn batches(&self, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<MultimodalBatch>> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = shuffle_seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        Ok(order.chunks(batch_size).map(|rows| self.gather(rows)).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATA_MAGIC);
        out.extend_from_slice(&(self.num_modalities() as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for d in self.modality_dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for f in &self.features {
            for &v in f.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        take(&mut r, &mut magic)?;
        if &magic != DATA_MAGIC {
            return Err(Error::Format("bad magic, expected AMRDATA1".into()));
        }
        let m = take_u32(&mut r)? as usize;
        let c = take_u32(&mut r)? as usize;
        let n = take_u64(&mut r)? as usize;
        if m == 0 || n == 0 || c < 2 {
            return Err(Error::Format(format!("invalid header M={m} C={c} N={n}")));
        }
        let dims = (0..m)
            .map(|_| take_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let expected: usize = dims.iter().map(|d| d * n * 4).sum::<usize>() + n * 4;
        if r.len() != expected {
            return Err(Error::Format(format!(
                "payload is {} bytes, header implies {expected}",
                r.len()
            )));
        }
        let mut features = Vec::with_capacity(m);
        for &d in &dims {
            let mut data = Vec::with_capacity(n * d);
            for _ in 0..n * d {
                let mut b = [0u8; 4];
                take(&mut r, &mut b)?;
                data.push(f32::from_le_bytes(b) as f64);
            }
            features.push(
                Tensor::new(vec![n, d], data).map_err(|e| Error::Format(e.to_string()))?,
            );
        }
        let labels = (0..n)
            .map(|_| take_u32(&mut r).map(|l| l as usize))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(features, labels, c)
    }

    pub fn write_feature_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Reads an AMRDATA file, failing without a partial dataset on any defect.
pub fn load_feature_file(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_bytes(&bytes)
}

/// Reads a CSV with header `label,m0_0,m0_1,…,m1_0,…`.
///
/// The class count is `num_classes` when given, otherwise the largest label
/// plus one.
pub fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(e.to_string()))?
        .clone();
    if headers.get(0) != Some("label") {
        return Err(Error::Format("first CSV column must be `label`".into()));
    }
    // (modality, index) for every feature column.
    let mut columns = Vec::new();
    for h in headers.iter().skip(1) {
        let parsed = h
            .strip_prefix('m')
            .and_then(|rest| rest.split_once('_'))
            .and_then(|(m, j)| Some((m.parse::<usize>().ok()?, j.parse::<usize>().ok()?)));
        columns.push(parsed.ok_or_else(|| Error::Format(format!("bad column name `{h}`")))?);
    }
    let m = columns.iter().map(|c| c.0 + 1).max().unwrap_or(0);
    let mut dims = vec![0; m];
    for &(mi, j) in &columns {
        dims[mi] = dims[mi].max(j + 1);
    }
    if dims.contains(&0) || columns.len() != dims.iter().sum::<usize>() {
        return Err(Error::Format("feature columns must be dense per modality".into()));
    }
    let mut data: Vec<Vec<f64>> = vec![Vec::new(); m];
    let mut labels = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let label: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("row {}: bad label", line + 2)))?;
        labels.push(label);
        let mut row: Vec<Vec<f64>> = dims.iter().map(|&d| vec![0.0; d]).collect();
        for (k, &(mi, j)) in columns.iter().enumerate() {
            row[mi][j] = rec[k + 1]
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("row {}: bad value", line + 2)))?;
        }
        for (dst, src) in data.iter_mut().zip(row) {
            dst.extend(src);
        }
    }
    if labels.is_empty() {
        return Err(Error::Format("CSV has no rows".into()));
    }
    let c = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |l| l + 1).max(2));
    let n = labels.len();
    let features = data
        .into_iter()
        .zip(&dims)
        .map(|(d, &w)| Tensor::new(vec![n, w], d))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(features, labels, c)
}

/// Draws a train and a validation split. Feature values are rounded to `f32`
/// so they survive an AMRDATA round trip unchanged.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prototypes: Vec<Vec<Vec<f64>>> = cfg
        .modality_dims
        .iter()
        .map(|&d| (0..cfg.num_classes).map(|_| unit_vector(d, &mut rng)).collect())
        .collect();
    let train = draw_split(cfg, &prototypes, cfg.train_samples, &mut rng)?.with_split(Split::Train);
    let val = draw_split(cfg, &prototypes, cfg.val_samples, &mut rng)?.with_split(Split::Val);
    Ok((train, val))
}

fn unit_vector(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn draw_split(
    cfg: &SyntheticConfig,
    prototypes: &[Vec<Vec<f64>>],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let m = cfg.modality_dims.len();
    let mut data: Vec<Vec<f64>> = cfg.modality_dims.iter().map(|&d| Vec::with_capacity(n * d)).collect();
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.random_range(0..cfg.num_classes);
        for k in 0..m {
            let (s, sigma) = (cfg.signal_scales[k], cfg.noise_stds[k]);
            for &mu in &prototypes[k][y] {
                let z: f64 = StandardNormal.sample(rng);
                data[k].push((s * mu + sigma * z) as f32 as f64);
            }
        }
        let label = if cfg.label_noise > 0.0 && rng.random::<f64>() < cfg.label_noise {
            rng.random_range(0..cfg.num_classes)
        } else {
            y
        };
        labels.push(label);
    }
    let features = data
        .into_iter()
        .zip(&cfg.modality_dims)
        .map(|(d, &w)| Tensor::new(vec![n, w], d))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(features, labels, cfg.num_classes)
}

fn take(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("truncated AMRDATA file".into()))
}

fn take_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    take(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn take_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    take(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
