//! The scoring network: a convolutional feature encoder whose output is summed
//! with an embedding of the conditioning partial alignment, then passed
//! through pre-norm bidirectional self-attention layers to a per-slot softmax
//! over V⁺.
//!
//! ```text
//! x ─ conv ─ relu ─┐
//!                  (+) ─ [LN ─ MHA ─ (+) ─ LN ─ FFN ─ (+)] × L ─ LN ─ linear ─ log-softmax
//! ã ─ embed ───────┤
//! position ────────┘
//! ```
//!
//! Forward and backward passes are written out by hand. All arithmetic is
//! `f64`; parameters are kept representable in `f32` so checkpoints
//! round-trip exactly.

mod checkpoint;
mod layers;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub use tensor::Mat;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::dp::LogProbLattice;
use crate::error::{Error, Result};
use crate::types::{PartialAlignment, Vocab};
use layers::{
    attention, attention_backward, layer_norm, layer_norm_backward, relu, relu_backward,
    AttentionCache, LayerNormCache,
};

/// Input frames, `frames × dim`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSeq {
    frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureSeq {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::InvalidInput("feature sequence must be non-empty".into()));
        }
        if data.len() != frames * dim {
            return Err(Error::InvalidInput(format!(
                "expected {} feature values, got {}",
                frames * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("features must be finite".into()));
        }
        Ok(FeatureSeq { frames, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidInput("ragged feature rows".into()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }
}

fn default_ffn() -> usize {
    128
}

fn default_stride() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    #[serde(default = "default_ffn")]
    pub ffn_dim: usize,
    pub kernel_width: usize,
    /// 1 keeps the frame count; 2 halves it before the alignment embedding.
    #[serde(default = "default_stride")]
    pub conv_stride: usize,
    /// Number of vocabulary tokens, excluding blank and mask.
    pub num_tokens: u32,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 16,
            hidden: 64,
            heads: 2,
            layers: 2,
            ffn_dim: default_ffn(),
            kernel_width: 3,
            conv_stride: 1,
            num_tokens: 4,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("kernel_width", self.kernel_width),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model.hidden {} is not divisible by model.heads {}",
                self.hidden, self.heads
            )));
        }
        if self.kernel_width.is_multiple_of(2) {
            return Err(Error::Config("model.kernel_width must be odd".into()));
        }
        if !matches!(self.conv_stride, 1 | 2) {
            return Err(Error::Config("model.conv_stride must be 1 or 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("model.dropout must be in [0, 1)".into()));
        }
        Vocab::new(self.num_tokens).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.num_tokens).expect("validated vocabulary")
    }

    /// Number of alignment slots produced for `frames` input frames.
    pub fn slots_for(&self, frames: usize) -> usize {
        frames.div_ceil(self.conv_stride)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Mat,
    pub ln1_bias: Mat,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub bo: Mat,
    pub ln2_gain: Mat,
    pub ln2_bias: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

const LAYER_TENSORS: [&str; 13] = [
    "ln1.gain", "ln1.bias", "attn.q", "attn.k", "attn.v", "attn.out", "attn.out_bias",
    "ln2.gain", "ln2.bias", "ffn.in", "ffn.in_bias", "ffn.out", "ffn.out_bias",
];

impl LayerParams {
    fn refs(&self) -> [&Mat; 13] {
        [
            &self.ln1_gain, &self.ln1_bias, &self.wq, &self.wk, &self.wv, &self.wo, &self.bo,
            &self.ln2_gain, &self.ln2_bias, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn muts(&mut self) -> [&mut Mat; 13] {
        [
            &mut self.ln1_gain, &mut self.ln1_bias, &mut self.wq, &mut self.wk, &mut self.wv,
            &mut self.wo, &mut self.bo, &mut self.ln2_gain, &mut self.ln2_bias, &mut self.w1,
            &mut self.b1, &mut self.w2, &mut self.b2,
        ]
    }
}

/// Network weights. The same structure doubles as a gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    pub conv_weight: Mat,
    pub conv_bias: Mat,
    pub embed: Mat,
    pub layers: Vec<LayerParams>,
    pub final_gain: Mat,
    pub final_bias: Mat,
    pub out_weight: Mat,
    pub out_bias: Mat,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bounds");
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

impl ModelParams {
    /// Seeded initialization.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden;
        let f = config.ffn_dim;
        let vocab = config.vocab();
        let conv_in = config.kernel_width * config.feature_dim;
        let conv_weight = xavier(&mut rng, conv_in, h);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let embed = Mat::from_vec(
            vocab.num_inputs(),
            h,
            (0..vocab.num_inputs() * h)
                .map(|_| normal.sample(&mut rng))
                .collect(),
        );
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                ln1_gain: Mat::filled(1, h, 1.0),
                ln1_bias: Mat::zeros(1, h),
                wq: xavier(&mut rng, h, h),
                wk: xavier(&mut rng, h, h),
                wv: xavier(&mut rng, h, h),
                wo: xavier(&mut rng, h, h),
                bo: Mat::zeros(1, h),
                ln2_gain: Mat::filled(1, h, 1.0),
                ln2_bias: Mat::zeros(1, h),
                w1: xavier(&mut rng, h, f),
                b1: Mat::zeros(1, f),
                w2: xavier(&mut rng, f, h),
                b2: Mat::zeros(1, h),
            })
            .collect();
        let out_weight = xavier(&mut rng, h, vocab.num_symbols());
        let mut params = ModelParams {
            config: config.clone(),
            conv_weight,
            conv_bias: Mat::zeros(1, h),
            embed,
            layers,
            final_gain: Mat::filled(1, h, 1.0),
            final_bias: Mat::zeros(1, h),
            out_weight,
            out_bias: Mat::zeros(1, vocab.num_symbols()),
        };
        params.round_to_f32();
        Ok(params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> Vocab {
        self.config.vocab()
    }

    /// A zero tensor of every parameter's shape.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.tensors_mut()
            .into_iter()
            .for_each(|m| m.data_mut().fill(0.0));
        out
    }

    /// Tensor names in declaration order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["conv.weight".to_string(), "conv.bias".into(), "embed".into()];
        for i in 0..self.layers.len() {
            names.extend(LAYER_TENSORS.iter().map(|n| format!("layers.{i}.{n}")));
        }
        names.extend(
            ["final_ln.gain", "final_ln.bias", "output.weight", "output.bias"]
                .map(String::from),
        );
        names
    }

    pub fn tensors(&self) -> Vec<&Mat> {
        let mut v = vec![&self.conv_weight, &self.conv_bias, &self.embed];
        for l in &self.layers {
            v.extend(l.refs());
        }
        v.extend([
            &self.final_gain,
            &self.final_bias,
            &self.out_weight,
            &self.out_bias,
        ]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut v = vec![&mut self.conv_weight, &mut self.conv_bias, &mut self.embed];
        for l in &mut self.layers {
            v.extend(l.muts());
        }
        v.extend([
            &mut self.final_gain,
            &mut self.final_bias,
            &mut self.out_weight,
            &mut self.out_bias,
        ]);
        v
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|m| m.data().len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, scale: f64, other: &ModelParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_scaled(scale, b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors_mut().into_iter().for_each(|m| m.scale(s));
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|m| m.data())
            .map(|v| v * v)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.is_finite())
    }

    /// Round every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for m in self.tensors_mut() {
            m.data_mut()
                .iter_mut()
                .for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Same configuration and tensor shapes.
    pub fn same_layout(&self, other: &ModelParams) -> bool {
        self.config == other.config
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|(a, b)| a.shape() == b.shape())
    }

    fn check_inputs(&self, x: &FeatureSeq, partial: &PartialAlignment) -> Result<Vec<usize>> {
        if x.dim() != self.config.feature_dim {
            return Err(Error::InvalidInput(format!(
                "features have dimension {}, model expects {}",
                x.dim(),
                self.config.feature_dim
            )));
        }
        let slots = self.config.slots_for(x.frames());
        if partial.len() != slots {
            return Err(Error::InvalidInput(format!(
                "partial alignment has {} slots, encoder produces {slots}",
                partial.len()
            )));
        }
        let vocab = self.vocab();
        partial
            .slots()
            .iter()
            .map(|s| match s {
                None => Ok(vocab.mask() as usize),
                Some(s) if vocab.is_symbol(*s) => Ok(*s as usize),
                Some(s) => Err(Error::InvalidInput(format!("symbol {s} outside vocabulary"))),
            })
            .collect()
    }

    /// Evaluation-mode forward pass.
    pub fn forward(&self, x: &FeatureSeq, partial: &PartialAlignment) -> Result<LogProbLattice> {
        self.run(x, partial, None::<&mut ChaCha8Rng>)
            .map(|(lattice, _)| lattice)
    }

    /// Forward pass keeping activations for [`ModelParams::backward`]. With
    /// an RNG, dropout is active.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        x: &FeatureSeq,
        partial: &PartialAlignment,
        dropout_rng: Option<&mut R>,
    ) -> Result<(LogProbLattice, ForwardCache)> {
        self.run(x, partial, dropout_rng)
    }

    fn unfold(&self, x: &FeatureSeq, slots: usize) -> Mat {
        let k = self.config.kernel_width;
        let d = x.dim();
        let half = (k / 2) as isize;
        let mut u = Mat::zeros(slots, k * d);
        for t in 0..slots {
            let centre = (t * self.config.conv_stride) as isize;
            let row = u.row_mut(t);
            for j in 0..k {
                let src = centre + j as isize - half;
                if src >= 0 && (src as usize) < x.frames() {
                    row[j * d..(j + 1) * d].copy_from_slice(x.row(src as usize));
                }
            }
        }
        u
    }

    fn run<R: Rng + ?Sized>(
        &self,
        x: &FeatureSeq,
        partial: &PartialAlignment,
        mut rng: Option<&mut R>,
    ) -> Result<(LogProbLattice, ForwardCache)> {
        let inputs = self.check_inputs(x, partial)?;
        let slots = inputs.len();
        let h = self.config.hidden;
        let p_drop = self.config.dropout;

        let unfolded = self.unfold(x, slots);
        let mut conv_pre = unfolded.matmul(&self.conv_weight);
        conv_pre.add_row_bias(&self.conv_bias);
        let mut hidden = relu(&conv_pre);
        let pe = positions(slots, h);
        for (t, &sym) in inputs.iter().enumerate() {
            let row = hidden.row_mut(t);
            for c in 0..h {
                row[c] += self.embed.get(sym, c) + pe.get(t, c);
            }
        }

        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (n1, ln1) = layer_norm(&hidden, &layer.ln1_gain, &layer.ln1_bias);
            let attn = attention(
                n1.matmul(&layer.wq),
                n1.matmul(&layer.wk),
                n1.matmul(&layer.wv),
                self.config.heads,
            );
            let mut branch = attn.context.matmul(&layer.wo);
            branch.add_row_bias(&layer.bo);
            let drop1 = rng.as_deref_mut().and_then(|r| dropout_mask(r, slots, h, p_drop));
            if let Some(m) = &drop1 {
                branch.hadamard_assign(m);
            }
            hidden.add_assign(&branch);

            let (n2, ln2) = layer_norm(&hidden, &layer.ln2_gain, &layer.ln2_bias);
            let mut ffn_pre = n2.matmul(&layer.w1);
            ffn_pre.add_row_bias(&layer.b1);
            let ffn_act = relu(&ffn_pre);
            let mut branch = ffn_act.matmul(&layer.w2);
            branch.add_row_bias(&layer.b2);
            let drop2 = rng.as_deref_mut().and_then(|r| dropout_mask(r, slots, h, p_drop));
            if let Some(m) = &drop2 {
                branch.hadamard_assign(m);
            }
            hidden.add_assign(&branch);

            layer_caches.push(LayerCache {
                ln1,
                n1,
                attn,
                drop1,
                ln2,
                n2,
                ffn_pre,
                ffn_act,
                drop2,
            });
        }

        let (features, final_ln) = layer_norm(&hidden, &self.final_gain, &self.final_bias);
        let mut logits = features.matmul(&self.out_weight);
        logits.add_row_bias(&self.out_bias);
        let symbols = logits.cols();
        let lattice = LogProbLattice::from_logits(slots, symbols, logits.data())?;
        let cache = ForwardCache {
            slots,
            symbols,
            inputs,
            unfolded,
            conv_pre,
            layers: layer_caches,
            final_ln,
            features,
        };
        Ok((lattice, cache))
    }

    /// Reverse-mode gradients of a scalar loss, given its gradient with
    /// respect to the pre-normalization output scores (`slots × |V⁺|`).
    pub fn backward(&self, cache: &ForwardCache, dscores: &[f64]) -> Result<ModelParams> {
        if cache.layers.len() != self.layers.len()
            || cache.features.cols() != self.config.hidden
            || cache.symbols != self.vocab().num_symbols()
        {
            return Err(Error::Usage(
                "activation cache was not produced by this model".into(),
            ));
        }
        if dscores.len() != cache.slots * cache.symbols {
            return Err(Error::Usage(format!(
                "expected {} score gradients, got {}",
                cache.slots * cache.symbols,
                dscores.len()
            )));
        }
        let mut grads = self.zeros_like();
        let dlogits = Mat::from_vec(cache.slots, cache.symbols, dscores.to_vec());

        grads.out_weight = cache.features.matmul_tn(&dlogits);
        grads.out_bias = dlogits.col_sums();
        let dfeatures = dlogits.matmul_nt(&self.out_weight);
        let (mut dhidden, dg, db) =
            layer_norm_backward(&dfeatures, &self.final_gain, &cache.final_ln);
        grads.final_gain = dg;
        grads.final_bias = db;

        for ((layer, lc), lg) in self
            .layers
            .iter()
            .zip(&cache.layers)
            .zip(grads.layers.iter_mut())
            .rev()
        {
            // feed-forward branch
            let mut dbranch = dhidden.clone();
            if let Some(m) = &lc.drop2 {
                dbranch.hadamard_assign(m);
            }
            lg.w2 = lc.ffn_act.matmul_tn(&dbranch);
            lg.b2 = dbranch.col_sums();
            let mut dpre = dbranch.matmul_nt(&layer.w2);
            relu_backward(&mut dpre, &lc.ffn_pre);
            lg.w1 = lc.n2.matmul_tn(&dpre);
            lg.b1 = dpre.col_sums();
            let dn2 = dpre.matmul_nt(&layer.w1);
            let (dx, dg, db) = layer_norm_backward(&dn2, &layer.ln2_gain, &lc.ln2);
            lg.ln2_gain = dg;
            lg.ln2_bias = db;
            dhidden.add_assign(&dx);

            // attention branch
            let mut dbranch = dhidden.clone();
            if let Some(m) = &lc.drop1 {
                dbranch.hadamard_assign(m);
            }
            lg.wo = lc.attn.context.matmul_tn(&dbranch);
            lg.bo = dbranch.col_sums();
            let dcontext = dbranch.matmul_nt(&layer.wo);
            let (dq, dk, dv) = attention_backward(&dcontext, &lc.attn);
            lg.wq = lc.n1.matmul_tn(&dq);
            lg.wk = lc.n1.matmul_tn(&dk);
            lg.wv = lc.n1.matmul_tn(&dv);
            let mut dn1 = dq.matmul_nt(&layer.wq);
            dn1.add_assign(&dk.matmul_nt(&layer.wk));
            dn1.add_assign(&dv.matmul_nt(&layer.wv));
            let (dx, dg, db) = layer_norm_backward(&dn1, &layer.ln1_gain, &lc.ln1);
            lg.ln1_gain = dg;
            lg.ln1_bias = db;
            dhidden.add_assign(&dx);
        }

        for (t, &sym) in cache.inputs.iter().enumerate() {
            let src = dhidden.row(t).to_vec();
            tensor::axpy(grads.embed.row_mut(sym), 1.0, &src);
        }
        relu_backward(&mut dhidden, &cache.conv_pre);
        grads.conv_weight = cache.unfolded.matmul_tn(&dhidden);
        grads.conv_bias = dhidden.col_sums();
        Ok(grads)
    }
}

/// Inverted dropout mask, or `None` when dropout is disabled.
fn dropout_mask<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, p: f64) -> Option<Mat> {
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(Mat::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| if rng.random_bool(p) { 0.0 } else { keep })
            .collect(),
    ))
}

/// Sinusoidal position encoding, `slots × width`.
pub fn positions(slots: usize, width: usize) -> Mat {
    let mut pe = Mat::zeros(slots, width);
    for t in 0..slots {
        for i in (0..width).step_by(2) {
            let freq = 1.0 / 10000f64.powf(i as f64 / width as f64);
            let angle = t as f64 * freq;
            pe.set(t, i, angle.sin());
            if i + 1 < width {
                pe.set(t, i + 1, angle.cos());
            }
        }
    }
    pe
}

#[derive(Clone, Debug)]
struct LayerCache {
    ln1: LayerNormCache,
    n1: Mat,
    attn: AttentionCache,
    drop1: Option<Mat>,
    ln2: LayerNormCache,
    n2: Mat,
    ffn_pre: Mat,
    ffn_act: Mat,
    drop2: Option<Mat>,
}

/// Activations saved by [`ModelParams::forward_train`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    slots: usize,
    symbols: usize,
    inputs: Vec<usize>,
    unfolded: Mat,
    conv_pre: Mat,
    layers: Vec<LayerCache>,
    final_ln: LayerNormCache,
    features: Mat,
}

impl ForwardCache {
    pub fn slots(&self) -> usize {
        self.slots
    }

    /// Final normalized hidden states, the input of the output projection.
    pub fn features(&self) -> &Mat {
        &self.features
    }
}
