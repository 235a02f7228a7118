//! The multimodal network: per-modality MLP encoders, concat+linear fusion,
//! and an MLP classifier head.
//!
//! Weights are stored `[fan_in × fan_out]` and applied as `x · W + b` on row
//! batches. Parameters are kept as plain tensors; each training step binds
//! them into a fresh [`Graph`].

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Magic bytes opening a model checkpoint.
pub const CHECKPOINT_MAGIC: &[u8; 7] = b"AMRLAB1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionKind {
    #[default]
    ConcatLinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub modality_dims: Vec<usize>,
    pub encoding_dim: usize,
    #[serde(default)]
    pub encoder_hidden: Vec<usize>,
    #[serde(default)]
    pub fusion: FusionKind,
    /// Output width of the fusion map; defaults to `M · encoding_dim`.
    #[serde(default)]
    pub fusion_dim: Option<usize>,
    #[serde(default)]
    pub classifier_hidden: Vec<usize>,
    pub num_classes: usize,
    pub init_seed: u64,
    /// Per-modality auxiliary linear heads on the encodings (used by UMT).
    #[serde(default)]
    pub aux_heads: bool,
}

impl ModelConfig {
    pub fn num_modalities(&self) -> usize {
        self.modality_dims.len()
    }

    pub fn fused_width(&self) -> usize {
        self.fusion_dim
            .unwrap_or(self.modality_dims.len() * self.encoding_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modality_dims.is_empty() {
            return Err(Error::Config("model needs at least one modality".into()));
        }
        let widths = self
            .modality_dims
            .iter()
            .chain(&self.encoder_hidden)
            .chain(&self.classifier_hidden)
            .chain(std::iter::once(&self.encoding_dim))
            .chain(self.fusion_dim.as_ref());
        if widths.into_iter().any(|&w| w == 0) {
            return Err(Error::Config("all layer widths must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        Ok(())
    }
}

/// Which optimizer may touch a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    FusionClassifier,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub group: ParamGroup,
    /// Owning modality for encoder-side tensors.
    pub modality: Option<usize>,
}

/// Index lists into [`MultimodalModel::params`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroups {
    pub encoder: Vec<usize>,
    pub fusion_classifier: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Linear {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("init shape"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

/// Multiplicative masks applied during a training forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMasks {
    /// Per modality, one `[batch × width]` mask per encoder hidden layer.
    pub encoder_hidden: Vec<Vec<Tensor>>,
    /// `[batch × fused_width]`.
    pub fused: Tensor,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    pub dropout: Option<&'a DropoutMasks>,
    /// `false` entries replace that modality's encoding with zeros.
    pub modality_keep: Option<&'a [bool]>,
}

#[derive(Clone, Debug)]
pub struct ForwardResult {
    pub encodings: Vec<Var>,
    pub logits: Var,
    pub probabilities: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalModel {
    config: ModelConfig,
    encoders: Vec<Vec<Linear>>,
    fusion: Linear,
    classifier: Vec<Linear>,
    aux: Vec<Linear>,
}

impl MultimodalModel {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let encoders = config
            .modality_dims
            .iter()
            .map(|&d| {
                layer_widths(d, &config.encoder_hidden, config.encoding_dim)
                    .windows(2)
                    .map(|w| Linear::init(w[0], w[1], &mut rng))
                    .collect()
            })
            .collect();
        let concat = config.num_modalities() * config.encoding_dim;
        let fused = config.fused_width();
        let fusion = Linear::init(concat, fused, &mut rng);
        let classifier = layer_widths(fused, &config.classifier_hidden, config.num_classes)
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], &mut rng))
            .collect();
        let aux = if config.aux_heads {
            (0..config.num_modalities())
                .map(|_| Linear::init(config.encoding_dim, config.num_classes, &mut rng))
                .collect()
        } else {
            Vec::new()
        };
        Ok(MultimodalModel {
            config,
            encoders,
            fusion,
            classifier,
            aux,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_modalities(&self) -> usize {
        self.config.num_modalities()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn encoders(&self) -> &[Vec<Linear>] {
        &self.encoders
    }

    pub fn fusion(&self) -> &Linear {
        &self.fusion
    }

    pub fn fusion_mut(&mut self) -> &mut Linear {
        &mut self.fusion
    }

    pub fn classifier(&self) -> &[Linear] {
        &self.classifier
    }

    pub fn classifier_mut(&mut self) -> &mut [Linear] {
        &mut self.classifier
    }

    pub fn has_aux_heads(&self) -> bool {
        !self.aux.is_empty()
    }

    /// All trainable tensors in declaration order: encoders (per modality,
    /// per layer, weight then bias), fusion, classifier layers, aux heads.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoders
            .iter_mut()
            .flatten()
            .chain(std::iter::once(&mut self.fusion))
            .chain(self.classifier.iter_mut())
            .chain(self.aux.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.encoders
            .iter()
            .flatten()
            .chain(std::iter::once(&self.fusion))
            .chain(self.classifier.iter())
            .chain(self.aux.iter())
    }

    pub fn param_info(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        let mut push = |name: String, group, modality| {
            for part in ["weight", "bias"] {
                out.push(ParamInfo {
                    name: format!("{name}.{part}"),
                    group,
                    modality,
                });
            }
        };
        for (m, enc) in self.encoders.iter().enumerate() {
            for l in 0..enc.len() {
                push(format!("encoder{m}.layer{l}"), ParamGroup::Encoder, Some(m));
            }
        }
        push("fusion".into(), ParamGroup::FusionClassifier, None);
        for l in 0..self.classifier.len() {
            push(format!("classifier.layer{l}"), ParamGroup::FusionClassifier, None);
        }
        for m in 0..self.aux.len() {
            push(format!("aux{m}"), ParamGroup::Encoder, Some(m));
        }
        out
    }

    /// Index of the fusion weight within [`Self::params`].
    pub fn fusion_weight_index(&self) -> usize {
        2 * self.encoders.iter().map(Vec::len).sum::<usize>()
    }

    pub fn param_groups(&self) -> ParamGroups {
        let mut groups = ParamGroups {
            encoder: Vec::new(),
            fusion_classifier: Vec::new(),
        };
        for (i, info) in self.param_info().into_iter().enumerate() {
            match info.group {
                ParamGroup::Encoder => groups.encoder.push(i),
                ParamGroup::FusionClassifier => groups.fusion_classifier.push(i),
            }
        }
        groups
    }

    /// Registers parameters in `g`; groups for which `trainable` is false are
    /// bound as constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(ParamGroup) -> bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .zip(self.param_info())
            .map(|(t, info)| {
                if trainable(info.group) {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    fn check_inputs(&self, g: &Graph, inputs: &[Var]) -> Result<usize> {
        if inputs.len() != self.num_modalities() {
            return Err(Error::Input(format!(
                "expected {} modalities, got {}",
                self.num_modalities(),
                inputs.len()
            )));
        }
        let mut batch = None;
        for (m, (&x, &d)) in inputs.iter().zip(&self.config.modality_dims).enumerate() {
            let s = g.shape(x);
            if s.len() != 2 || s[1] != d {
                return Err(Error::Input(format!(
                    "modality {m}: expected [batch × {d}], got {s:?}"
                )));
            }
            if *batch.get_or_insert(s[0]) != s[0] {
                return Err(Error::Input("modalities disagree on batch size".into()));
            }
        }
        Ok(batch.unwrap_or(0))
    }

    /// Per-modality encodings `e^m`.
    pub fn encode(
        &self,
        g: &mut Graph,
        params: &[Var],
        inputs: &[Var],
        opts: &ForwardOptions,
    ) -> Result<Vec<Var>> {
        self.check_inputs(g, inputs)?;
        let mut p = 0;
        let mut out = Vec::with_capacity(inputs.len());
        for (m, (&x, layers)) in inputs.iter().zip(&self.encoders).enumerate() {
            let mut h = x;
            for (l, _) in layers.iter().enumerate() {
                h = linear(g, h, params[p], params[p + 1])?;
                h = g.relu(h)?;
                p += 2;
                if l + 1 < layers.len() {
                    if let Some(masks) = opts.dropout {
                        let mask = g.constant(masks.encoder_hidden[m][l].clone());
                        h = g.mul(h, mask)?;
                    }
                }
            }
            if let Some(keep) = opts.modality_keep {
                if !keep[m] {
                    let zeros = Tensor::zeros(g.shape(h));
                    h = g.constant(zeros);
                }
            }
            out.push(h);
        }
        Ok(out)
    }

    /// Fusion plus classifier applied to given encodings.
    pub fn head(
        &self,
        g: &mut Graph,
        params: &[Var],
        encodings: &[Var],
        opts: &ForwardOptions,
    ) -> Result<Var> {
        if encodings.len() != self.num_modalities() {
            return Err(Error::Input("encoding count mismatch".into()));
        }
        for &e in encodings {
            let s = g.shape(e);
            if s.len() != 2 || s[1] != self.config.encoding_dim {
                return Err(Error::Input(format!(
                    "encoding must be [batch × {}], got {s:?}",
                    self.config.encoding_dim
                )));
            }
        }
        let mut p = self.fusion_weight_index();
        let cat = if encodings.len() == 1 {
            encodings[0]
        } else {
            g.concat(encodings, 1)?
        };
        let mut h = linear(g, cat, params[p], params[p + 1])?;
        p += 2;
        if let Some(masks) = opts.dropout {
            let mask = g.constant(masks.fused.clone());
            h = g.mul(h, mask)?;
        }
        for l in 0..self.classifier.len() {
            h = linear(g, h, params[p], params[p + 1])?;
            p += 2;
            if l + 1 < self.classifier.len() {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &[Var],
        inputs: &[Var],
        opts: &ForwardOptions,
    ) -> Result<ForwardResult> {
        let encodings = self.encode(g, params, inputs, opts)?;
        let logits = self.head(g, params, &encodings, opts)?;
        let probabilities = g.softmax(logits)?;
        Ok(ForwardResult {
            encodings,
            logits,
            probabilities,
        })
    }

    /// Logits of the auxiliary head for modality `m`.
    pub fn aux_logits(&self, g: &mut Graph, params: &[Var], m: usize, encoding: Var) -> Result<Var> {
        if self.aux.is_empty() {
            return Err(Error::Config("model has no auxiliary heads".into()));
        }
        let base = self.params().len() - 2 * self.aux.len() + 2 * m;
        linear(g, encoding, params[base], params[base + 1])
    }

    /// Inference-only logits for plain input tensors.
    pub fn predict_logits(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, |_| false);
        let xs: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let enc = self.encode(&mut g, &params, &xs, &ForwardOptions::default())?;
        let logits = self.head(&mut g, &params, &enc, &ForwardOptions::default())?;
        Ok(g.value(logits).clone())
    }

    /// A single-modality model with modality `m`'s encoder architecture and a
    /// freshly initialized fusion/classifier sized for one encoding. A model
    /// that already has one modality is returned as is.
    pub fn unimodal_view(&self, m: usize) -> Result<MultimodalModel> {
        if m >= self.num_modalities() {
            return Err(Error::Input(format!(
                "modality {m} out of range for {} modalities",
                self.num_modalities()
            )));
        }
        if self.num_modalities() == 1 && !self.config.aux_heads {
            return Ok(self.clone());
        }
        let mut cfg = self.config.clone();
        cfg.modality_dims = vec![self.config.modality_dims[m]];
        cfg.fusion_dim = self.config.fusion_dim.map(|_| self.config.encoding_dim);
        cfg.aux_heads = false;
        cfg.init_seed = self
            .config
            .init_seed
            .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(m as u64 + 1));
        MultimodalModel::init(cfg)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = serde_json::to_vec(&self.config)
            .map_err(|e| Error::Internal(format!("serialize config: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        let params = self.params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for t in params {
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 7];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not an AMRLAB1 checkpoint".into()));
        }
        let cfg_len = read_u32(&mut r)? as usize;
        if cfg_len > r.len() {
            return Err(Error::Format("truncated checkpoint config".into()));
        }
        let (cfg_bytes, rest) = r.split_at(cfg_len);
        r = rest;
        let config: ModelConfig = serde_json::from_slice(cfg_bytes)
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let mut model = MultimodalModel::init(config)?;
        let count = read_u32(&mut r)? as usize;
        let mut params = model.params_mut();
        if count != params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {count} tensors, architecture needs {}",
                params.len()
            )));
        }
        for p in params.iter_mut() {
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            if shape != p.shape() {
                return Err(Error::Format(format!(
                    "tensor shape {shape:?} does not match {:?}",
                    p.shape()
                )));
            }
            for v in p.data_mut() {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                *v = f64::from_le_bytes(b);
            }
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn layer_widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = Vec::with_capacity(hidden.len() + 2);
    w.push(input);
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    g.add_row_bias(xw, b)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("truncated checkpoint".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
