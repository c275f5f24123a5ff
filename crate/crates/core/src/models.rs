//! The six detector variants: a packet mapping block, a CNN, RNN or LSTM
//! backbone, an optional residual self-attention block and a 7-way head.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sissa_nn::layers::{BatchNorm2d, Conv2d, Linear, Lstm, ResidualAttention, Rnn};
use sissa_nn::{checkpoint, grad_check, Conv2dSpec, Forward, GradCheckOptions, GradCheckReport, NnError, ParamStore, Scalar, Tensor, Var};
use thiserror::Error;

use crate::dataset::NUM_CLASSES;
use crate::encode::BASE_WIDTH;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("dataset does not match the model: {0}")]
    SpecMismatch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "C")]
    C,
    #[serde(rename = "C-A")]
    CA,
    #[serde(rename = "R")]
    R,
    #[serde(rename = "R-A")]
    RA,
    #[serde(rename = "L")]
    L,
    #[serde(rename = "L-A")]
    LA,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backbone {
    Cnn,
    Rnn,
    Lstm,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Self::C, Self::CA, Self::R, Self::RA, Self::L, Self::LA];

    pub fn name(self) -> &'static str {
        match self {
            Self::C => "C",
            Self::CA => "C-A",
            Self::R => "R",
            Self::RA => "R-A",
            Self::L => "L",
            Self::LA => "L-A",
        }
    }

    pub fn attention(self) -> bool {
        matches!(self, Self::CA | Self::RA | Self::LA)
    }

    pub fn backbone(self) -> Backbone {
        match self {
            Self::C | Self::CA => Backbone::Cnn,
            Self::R | Self::RA => Backbone::Rnn,
            Self::L | Self::LA => Backbone::Lstm,
        }
    }

    /// The same backbone without attention.
    pub fn base(self) -> Self {
        match self {
            Self::CA => Self::C,
            Self::RA => Self::R,
            Self::LA => Self::L,
            v => v,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_uppercase();
        let t = t.strip_prefix("SISSA-").unwrap_or(&t);
        Self::ALL
            .into_iter()
            .find(|v| v.name() == t)
            .ok_or_else(|| ModelError::Config(format!("unknown variant {s:?}, expected one of C, C-A, R, R-A, L, L-A")))
    }
}

pub const SUPPORTED_WINDOWS: [usize; 7] = [32, 48, 64, 80, 96, 112, 128];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Packets per window.
    pub window: usize,
    /// Input feature width.
    pub features: usize,
    /// Packet mapping output width.
    pub mapped: usize,
    /// Recurrent hidden width.
    pub hidden: usize,
    /// Output channels of each conv, pool, batch-norm block.
    pub conv_channels: Vec<usize>,
    pub classes: usize,
    /// Start the attention value projection at zero so the block is an identity.
    pub zero_init_value: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::LA,
            window: 32,
            features: BASE_WIDTH,
            mapped: 64,
            hidden: 128,
            conv_channels: vec![16, 32],
            classes: NUM_CLASSES,
            zero_init_value: true,
        }
    }
}

impl ModelConfig {
    pub fn attention(&self) -> bool {
        self.variant.attention()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.classes != NUM_CLASSES {
            return bad(format!("classes must be {NUM_CLASSES}"));
        }
        if self.features == 0 || self.window == 0 {
            return bad("window and features must be positive".into());
        }
        if self.mapped < self.features {
            return bad(format!("mapped width {} is below the feature width {}", self.mapped, self.features));
        }
        match self.variant.backbone() {
            Backbone::Cnn => {
                if self.window < 8 {
                    return bad(format!("CNN variants need window >= 8, got {}", self.window));
                }
                if self.conv_channels.len() < 2 || self.conv_channels.contains(&0) {
                    return bad("conv_channels needs at least two positive entries".into());
                }
                if self.window >> self.conv_channels.len() == 0 {
                    return bad(format!("window {} is too small for {} pooling stages", self.window, self.conv_channels.len()));
                }
            }
            Backbone::Rnn | Backbone::Lstm => {
                if self.hidden == 0 {
                    return bad("hidden width must be positive".into());
                }
            }
        }
        Ok(())
    }
}

/// Two affine + tanh maps applied to every packet row: d -> max(d, d'/2) -> d'.
#[derive(Debug, Clone)]
pub struct PacketMapping {
    pub first: Linear,
    pub second: Linear,
}

impl PacketMapping {
    pub fn new(store: &mut ParamStore, d: usize, mapped: usize, rng: &mut ChaCha8Rng) -> Self {
        let mid = d.max(mapped / 2);
        Self { first: Linear::new(store, "pmb.0", d, mid, rng), second: Linear::new(store, "pmb.1", mid, mapped, rng) }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> sissa_nn::Result<Var> {
        let h = self.first.forward(f, x)?;
        let h = f.tape.tanh(h);
        let y = self.second.forward(f, h)?;
        Ok(f.tape.tanh(y))
    }
}

/// Linear interpolation matrix `[from, to]` mapping `from` evenly spaced
/// samples onto `to` samples, end points aligned. `from == to` gives the
/// identity.
pub fn bilinear_matrix(from: usize, to: usize) -> Tensor {
    let mut m = vec![0.0 as Scalar; from * to];
    for j in 0..to {
        if to == 1 || from == 1 {
            m[j] = 1.0;
            continue;
        }
        // position j * (from - 1) / (to - 1), kept rational so grid points are exact
        let num = j * (from - 1);
        let (lo, rem) = (num / (to - 1), num % (to - 1));
        let frac = rem as Scalar / (to - 1) as Scalar;
        m[lo * to + j] += 1.0 - frac;
        if rem > 0 {
            m[(lo + 1) * to + j] += frac;
        }
    }
    Tensor::new(&[from, to], m).expect("sized above")
}

#[derive(Debug, Clone)]
enum Body {
    Cnn { resample: Tensor, blocks: Vec<(Conv2d, BatchNorm2d)>, mix: Conv2d },
    Rnn([Rnn; 2]),
    Lstm([Lstm; 2]),
}

/// A detector: configuration, parameters and layer wiring.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pmb: PacketMapping,
    body: Body,
    rsab: Option<ResidualAttention>,
    head: Linear,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let pmb = PacketMapping::new(&mut store, c.features, c.mapped, &mut rng);
        let same = Conv2dSpec { stride: 1, padding: 1 };
        let (body, width) = match c.variant.backbone() {
            Backbone::Cnn => {
                let mut blocks = Vec::new();
                let mut in_ch = 1;
                for (i, &out) in c.conv_channels.iter().enumerate() {
                    let conv = Conv2d::new(&mut store, &format!("conv.{i}"), in_ch, out, 3, same, &mut rng);
                    let bn = BatchNorm2d::new(&mut store, &format!("bn.{i}"), out, &mut rng);
                    blocks.push((conv, bn));
                    in_ch = out;
                }
                let point = Conv2dSpec { stride: 1, padding: 0 };
                let mix = Conv2d::new(&mut store, "mix", in_ch, in_ch, 1, point, &mut rng);
                (Body::Cnn { resample: bilinear_matrix(c.mapped, c.window), blocks, mix }, in_ch)
            }
            Backbone::Rnn => {
                let l1 = Rnn::new(&mut store, "rnn.0", c.mapped, c.hidden, &mut rng);
                let l2 = Rnn::new(&mut store, "rnn.1", c.hidden, c.hidden, &mut rng);
                (Body::Rnn([l1, l2]), c.hidden)
            }
            Backbone::Lstm => {
                let l1 = Lstm::new(&mut store, "lstm.0", c.mapped, c.hidden, &mut rng);
                let l2 = Lstm::new(&mut store, "lstm.1", c.hidden, c.hidden, &mut rng);
                (Body::Lstm([l1, l2]), c.hidden)
            }
        };
        let rsab = c.attention().then(|| ResidualAttention::new(&mut store, "rsab", width, c.zero_init_value, &mut rng));
        let head = Linear::new(&mut store, "head", width, c.classes, &mut rng);
        Ok(Self { config, store, pmb, body, rsab, head })
    }

    /// Total number of trainable scalars.
    pub fn count_params(&self) -> usize {
        self.store.count()
    }

    /// Packet mapping output `[B, n, d']`.
    pub fn packet_mapping(&self, f: &mut Forward<'_>, x: Var) -> Result<Var, ModelError> {
        let s = f.tape.shape(x);
        if s.len() != 3 || s[1] != self.config.window || s[2] != self.config.features {
            return Err(ModelError::SpecMismatch(format!(
                "input {s:?}, expected [B, {}, {}]",
                self.config.window, self.config.features
            )));
        }
        Ok(self.pmb.forward(f, x)?)
    }

    /// Logits `[B, 7]` for an input window batch `[B, n, d]`.
    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var, ModelError> {
        let batch = f.tape.shape(x).first().copied().unwrap_or(0);
        let m = self.packet_mapping(f, x)?;
        let n = self.config.window;
        let pooled = match &self.body {
            Body::Cnn { resample, blocks, mix } => {
                let r = f.tape.input(resample.clone());
                let img = f.tape.matmul(m, r)?;
                let mut h = f.tape.reshape(img, &[batch, 1, n, n])?;
                for (conv, bn) in blocks {
                    h = conv.forward(f, h)?;
                    h = f.tape.maxpool2d(h, 2)?;
                    h = bn.forward(f, h)?;
                }
                h = mix.forward(f, h)?;
                h = f.tape.tanh(h);
                let s = f.tape.shape(h).to_vec();
                let tokens = f.tape.reshape(h, &[s[0], s[1], s[2] * s[3]])?;
                match &self.rsab {
                    Some(a) => {
                        let t = f.tape.transpose_last2(tokens)?;
                        let t = a.forward(f, t)?;
                        f.tape.mean_axis(t, 1)?
                    }
                    None => f.tape.mean_axis(tokens, 2)?,
                }
            }
            Body::Rnn([l1, l2]) => {
                let h = l1.forward(f, m)?;
                let mut h = l2.forward(f, h)?;
                if let Some(a) = &self.rsab {
                    h = a.forward(f, h)?;
                }
                let last = f.tape.narrow(h, 1, n - 1, 1)?;
                f.tape.reshape(last, &[batch, self.config.hidden])?
            }
            Body::Lstm([l1, l2]) => {
                let h = l1.forward(f, m)?;
                let mut h = l2.forward(f, h)?;
                if let Some(a) = &self.rsab {
                    h = a.forward(f, h)?;
                }
                f.tape.mean_axis(h, 1)?
            }
        };
        Ok(self.head.forward(f, pooled)?)
    }

    /// Inference-mode logits for `[B, n, d]` row-major features.
    pub fn logits(&self, features: &[f32], batch: usize) -> Result<Vec<Scalar>, ModelError> {
        let shape = [batch, self.config.window, self.config.features];
        let x = Tensor::from_f32(&shape, features)
            .map_err(|_| ModelError::SpecMismatch(format!("{} values for shape {shape:?}", features.len())))?;
        let mut f = Forward::new(&self.store, false);
        let xv = f.tape.input(x);
        let out = self.forward(&mut f, xv)?;
        Ok(f.tape.value(out).data().to_vec())
    }

    /// Argmax labels and softmax probabilities, evaluated in chunks of
    /// `chunk` windows.
    pub fn predict(&self, features: &[f32], chunk: usize) -> Result<(Vec<usize>, Vec<Vec<f64>>), ModelError> {
        let row = self.config.window * self.config.features;
        if row == 0 || features.len() % row != 0 {
            return Err(ModelError::SpecMismatch(format!("{} values is not a multiple of {row}", features.len())));
        }
        let mut labels = Vec::new();
        let mut probs = Vec::new();
        for part in features.chunks(row * chunk.max(1)) {
            let logits = self.logits(part, part.len() / row)?;
            for l in logits.chunks_exact(self.config.classes) {
                let p = softmax(l);
                labels.push(argmax(&p));
                probs.push(p);
            }
        }
        Ok((labels, probs))
    }

    pub fn save(&self, path: &Path, meta: CheckpointMeta) -> Result<(), ModelError> {
        let meta = serde_json::to_value(CheckpointRecord { config: self.config.clone(), meta })
            .map_err(NnError::from)?;
        Ok(checkpoint::save(path, &self.store, meta)?)
    }

    /// Rebuilds the model from the configuration stored in the checkpoint.
    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta), ModelError> {
        let bytes = std::fs::read(path).map_err(NnError::from)?;
        let header = checkpoint::read_header(&bytes)?;
        let record: CheckpointRecord = serde_json::from_value(header.meta).map_err(NnError::from)?;
        let mut model = Self::new(record.config, 0)?;
        checkpoint::load_into(&bytes, &mut model.store)?;
        Ok((model, record.meta))
    }
}

/// Feature width of the tiny gradient-check configuration; packet mapping
/// needs `features <= mapped`.
pub const TINY_FEATURES: usize = 12;

/// The tiny configuration gradient checks run on: n = 8, d' = 16, h = 16,
/// attention value projection randomly initialized.
pub fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        window: 8,
        features: TINY_FEATURES,
        mapped: 16,
        hidden: 16,
        conv_channels: vec![4, 4],
        zero_init_value: false,
        ..Default::default()
    }
}

/// Finite-difference check of the training loss of a tiny `variant` model
/// on a random batch of three windows.
pub fn tiny_gradcheck(variant: Variant, seed: u64) -> Result<GradCheckReport, ModelError> {
    let cfg = tiny_config(variant);
    let model = Model::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let data: Vec<f32> = (0..3 * cfg.window * cfg.features).map(|_| rng.gen()).collect();
    let x = Tensor::from_f32(&[3, cfg.window, cfg.features], &data)?;
    let labels = [0usize, 3, 6];
    let opts = GradCheckOptions { richardson: true, max_per_param: Some(24), seed, ..Default::default() };
    let report = grad_check(&model.store, &opts, |f| {
        let xv = f.tape.input(x.clone());
        let logits = model.forward(f, xv).map_err(|e| match e {
            ModelError::Nn(e) => e,
            other => NnError::ShapeMismatch { op: "model forward", detail: other.to_string() },
        })?;
        f.tape.cross_entropy(logits, &labels)
    })?;
    Ok(report)
}

/// Training provenance stored alongside the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub best_val_acc: f64,
    pub seed: u64,
    #[serde(default)]
    pub dataset_hash: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointRecord {
    config: ModelConfig,
    meta: CheckpointMeta,
}

/// Numerically stable softmax in f64.
pub fn softmax(logits: &[Scalar]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let e: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
