//! Attention-augmented GRU autoencoder with an outcome head.
//!
//! ```text
//! x (T×d) ─► GRU encoder ─► H (T×d_h) ─► M-head attention ─► mean over T ─► affine ─► e (p)
//!                                                                                   │
//!                       ┌───────────────────────────────────────────────────────────┤
//!                       ▼                                                           ▼
//!   s_0 = affine(e), input e at every step ─► GRU decoder ─► affine ─► X̂     tanh MLP ─► σ ─► ŷ
//! ```
//!
//! With attention disabled the encoder states are mean-pooled directly.
//! Dropout (inverted scaling) is applied to `e` and to the MLP hidden layer
//! in train mode only.

mod attention;
mod checkpoint;
mod gru;

pub use attention::{attend, AttentionHead, AttentionTrace, HeadTrace};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use gru::{gru_cell_forward, GruParams, GruStep};

use crate::error::{Error, Result};
use crate::math::{sigmoid, Matrix};
use crate::rng::Rng;
use gru::{add_into, gru_step, gru_step_backward};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub seq_len: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Width of the outcome MLP's hidden layer.
    pub head_hidden: usize,
    pub attention_enabled: bool,
    pub outcome_head_enabled: bool,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 6,
            seq_len: 28,
            hidden_dim: 32,
            embed_dim: 32,
            heads: 2,
            head_dim: 16,
            head_hidden: 16,
            attention_enabled: true,
            outcome_head_enabled: true,
            dropout_rate: 0.3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("seq_len", self.seq_len),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("head_hidden", self.head_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if self.attention_enabled && (self.heads == 0 || self.head_dim == 0) {
            return Err(Error::InvalidArgument(
                "attention needs at least one head of width >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Width of the pooled vector fed to the embedding projection.
    pub fn pooled_dim(&self) -> usize {
        if self.attention_enabled {
            self.heads * self.head_dim
        } else {
            self.hidden_dim
        }
    }
}

/// Coarse grouping of parameters, used to freeze parts of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Attention,
    Pooling,
    Decoder,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

/// All learnable weights. Also used as the container for gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: GruParams,
    /// Empty when attention is disabled.
    pub attention: Vec<AttentionHead>,
    pub w_pool: Matrix,
    pub b_pool: Matrix,
    pub w_dec_init: Matrix,
    pub b_dec_init: Matrix,
    pub decoder: GruParams,
    pub w_out: Matrix,
    pub b_out: Matrix,
    /// Absent when the outcome head is disabled.
    pub head: Option<HeadParams>,
}

fn uniform_fill(m: &mut Matrix, bound: f64, rng: &mut Rng) {
    m.as_mut_slice()
        .iter_mut()
        .for_each(|x| *x = rng.uniform_range(-bound, bound));
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, h, p) = (cfg.input_dim, cfg.hidden_dim, cfg.embed_dim);
        let attention = if cfg.attention_enabled {
            (0..cfg.heads)
                .map(|_| AttentionHead::zeros(h, cfg.head_dim))
                .collect()
        } else {
            Vec::new()
        };
        let head = cfg.outcome_head_enabled.then(|| HeadParams {
            w1: Matrix::zeros(cfg.head_hidden, p),
            b1: Matrix::zeros(cfg.head_hidden, 1),
            w2: Matrix::zeros(1, cfg.head_hidden),
            b2: Matrix::zeros(1, 1),
        });
        Self {
            encoder: GruParams::zeros(h, d),
            attention,
            w_pool: Matrix::zeros(p, cfg.pooled_dim()),
            b_pool: Matrix::zeros(p, 1),
            w_dec_init: Matrix::zeros(h, p),
            b_dec_init: Matrix::zeros(h, 1),
            decoder: GruParams::zeros(h, p),
            w_out: Matrix::zeros(d, h),
            b_out: Matrix::zeros(d, 1),
            head,
        }
    }

    /// Uniform `[−1/√fan_in, 1/√fan_in]` initialization; biases share the
    /// bound of their weight matrix.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, h, p) = (cfg.input_dim, cfg.hidden_dim, cfg.embed_dim);
        let mut params = Self::zeros(cfg);
        params.encoder = GruParams::init(h, d, rng);
        for head in params.attention.iter_mut() {
            *head = AttentionHead::init(h, cfg.head_dim, rng);
        }
        let b = 1.0 / (cfg.pooled_dim() as f64).sqrt();
        uniform_fill(&mut params.w_pool, b, rng);
        uniform_fill(&mut params.b_pool, b, rng);
        let b = 1.0 / (p as f64).sqrt();
        uniform_fill(&mut params.w_dec_init, b, rng);
        uniform_fill(&mut params.b_dec_init, b, rng);
        params.decoder = GruParams::init(h, p, rng);
        let b = 1.0 / (h as f64).sqrt();
        uniform_fill(&mut params.w_out, b, rng);
        uniform_fill(&mut params.b_out, b, rng);
        if let Some(head) = params.head.as_mut() {
            let b = 1.0 / (p as f64).sqrt();
            uniform_fill(&mut head.w1, b, rng);
            uniform_fill(&mut head.b1, b, rng);
            let b = 1.0 / (cfg.head_hidden as f64).sqrt();
            uniform_fill(&mut head.w2, b, rng);
            uniform_fill(&mut head.b2, b, rng);
        }
        Ok(params)
    }

    /// Named tensors in a fixed canonical order.
    pub fn tensors(&self) -> Vec<(String, ParamGroup, &Matrix)> {
        let mut out = Vec::new();
        for (n, m) in self.encoder.tensors() {
            out.push((format!("encoder.{n}"), ParamGroup::Encoder, m));
        }
        for (i, head) in self.attention.iter().enumerate() {
            out.push((format!("attention.{i}.w_q"), ParamGroup::Attention, &head.w_q));
            out.push((format!("attention.{i}.w_k"), ParamGroup::Attention, &head.w_k));
            out.push((format!("attention.{i}.w_v"), ParamGroup::Attention, &head.w_v));
        }
        out.push(("pool.w".into(), ParamGroup::Pooling, &self.w_pool));
        out.push(("pool.b".into(), ParamGroup::Pooling, &self.b_pool));
        out.push(("decoder.init_w".into(), ParamGroup::Decoder, &self.w_dec_init));
        out.push(("decoder.init_b".into(), ParamGroup::Decoder, &self.b_dec_init));
        for (n, m) in self.decoder.tensors() {
            out.push((format!("decoder.{n}"), ParamGroup::Decoder, m));
        }
        out.push(("decoder.out_w".into(), ParamGroup::Decoder, &self.w_out));
        out.push(("decoder.out_b".into(), ParamGroup::Decoder, &self.b_out));
        if let Some(h) = &self.head {
            out.push(("head.w1".into(), ParamGroup::Head, &h.w1));
            out.push(("head.b1".into(), ParamGroup::Head, &h.b1));
            out.push(("head.w2".into(), ParamGroup::Head, &h.w2));
            out.push(("head.b2".into(), ParamGroup::Head, &h.b2));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ParamGroup, &mut Matrix)> {
        let mut out = Vec::new();
        for (n, m) in self.encoder.tensors_mut() {
            out.push((format!("encoder.{n}"), ParamGroup::Encoder, m));
        }
        for (i, head) in self.attention.iter_mut().enumerate() {
            out.push((format!("attention.{i}.w_q"), ParamGroup::Attention, &mut head.w_q));
            out.push((format!("attention.{i}.w_k"), ParamGroup::Attention, &mut head.w_k));
            out.push((format!("attention.{i}.w_v"), ParamGroup::Attention, &mut head.w_v));
        }
        out.push(("pool.w".into(), ParamGroup::Pooling, &mut self.w_pool));
        out.push(("pool.b".into(), ParamGroup::Pooling, &mut self.b_pool));
        out.push(("decoder.init_w".into(), ParamGroup::Decoder, &mut self.w_dec_init));
        out.push(("decoder.init_b".into(), ParamGroup::Decoder, &mut self.b_dec_init));
        for (n, m) in self.decoder.tensors_mut() {
            out.push((format!("decoder.{n}"), ParamGroup::Decoder, m));
        }
        out.push(("decoder.out_w".into(), ParamGroup::Decoder, &mut self.w_out));
        out.push(("decoder.out_b".into(), ParamGroup::Decoder, &mut self.b_out));
        if let Some(h) = &mut self.head {
            out.push(("head.w1".into(), ParamGroup::Head, &mut h.w1));
            out.push(("head.b1".into(), ParamGroup::Head, &mut h.b1));
            out.push(("head.w2".into(), ParamGroup::Head, &mut h.w2));
            out.push(("head.b2".into(), ParamGroup::Head, &mut h.b2));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, m)| m.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, _, m) in z.tensors_mut() {
            m.fill(0.0);
        }
        z
    }

    /// All parameters concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, _, m) in self.tensors() {
            out.extend_from_slice(m.as_slice());
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "flat vector has {} values, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for (_, _, m) in self.tensors_mut() {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Mask aligned with [`Self::flatten`]: `true` where the coordinate
    /// belongs to one of `groups`.
    pub fn group_mask(&self, groups: &[ParamGroup]) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, g, m) in self.tensors() {
            out.extend(std::iter::repeat_n(groups.contains(&g), m.len()));
        }
        out
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &ModelParams) {
        for ((_, _, dst), (_, _, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            crate::math::axpy(a, src.as_slice(), dst.as_mut_slice());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, m)| m.all_finite())
    }

    /// Checks that every tensor has the shape implied by `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let template = ModelParams::zeros(cfg);
        let mine = self.tensors();
        let expect = template.tensors();
        let relevant: Vec<_> = if cfg.attention_enabled {
            mine
        } else {
            mine.into_iter()
                .filter(|(_, g, _)| *g != ParamGroup::Attention)
                .collect()
        };
        if relevant.len() != expect.len() {
            return Err(Error::Shape(format!(
                "parameter set has {} tensors, config implies {}",
                relevant.len(),
                expect.len()
            )));
        }
        for ((n, _, m), (en, _, em)) in relevant.iter().zip(&expect) {
            if n != en || m.shape() != em.shape() {
                return Err(Error::Shape(format!(
                    "tensor {n} {:?} does not match expected {en} {:?}",
                    m.shape(),
                    em.shape()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted-dropout multipliers (`0` or `1/(1−rate)`) for the two sites.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMasks {
    pub embedding: Vec<f64>,
    pub head_hidden: Vec<f64>,
}

impl DropoutMasks {
    pub fn ones(cfg: &ModelConfig) -> Self {
        Self {
            embedding: vec![1.0; cfg.embed_dim],
            head_hidden: vec![1.0; cfg.head_hidden],
        }
    }

    pub fn sample(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let rate = cfg.dropout_rate;
        if rate == 0.0 {
            return Self::ones(cfg);
        }
        let keep = 1.0 / (1.0 - rate);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
                .collect()
        };
        Self {
            embedding: draw(cfg.embed_dim),
            head_hidden: draw(cfg.head_hidden),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadTraceMlp {
    pub hidden: Vec<f64>,
    pub logit: f64,
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub encoder_steps: Vec<GruStep>,
    /// `H`, `T × d_h`.
    pub encoder_states: Matrix,
    pub attention: Option<AttentionTrace>,
    /// Input of the embedding projection.
    pub pooled: Vec<f64>,
    /// Participant embedding before dropout.
    pub embedding: Vec<f64>,
    pub masks: DropoutMasks,
    /// Embedding after dropout, shared by decoder and head.
    pub shared: Vec<f64>,
    pub decoder_init: Vec<f64>,
    pub decoder_steps: Vec<GruStep>,
    pub reconstruction: Matrix,
    pub head: Option<HeadTraceMlp>,
    /// `ŷ`; 0.5 when no head is present.
    pub prob: f64,
}

impl ForwardTrace {
    pub fn logit(&self) -> Option<f64> {
        self.head.as_ref().map(|h| h.logit)
    }

    /// Per-head `T × T` attention weight matrices.
    pub fn attention_weights(&self) -> Vec<&Matrix> {
        self.attention
            .as_ref()
            .map(|a| a.heads.iter().map(|h| &h.weights).collect())
            .unwrap_or_default()
    }

    /// Attention mass received by each day: column sums of every head's
    /// weight matrix, averaged over query rows and heads. Sums to 1.
    pub fn attention_profile(&self) -> Option<Vec<f64>> {
        let att = self.attention.as_ref()?;
        let t_len = self.encoder_states.rows();
        let mut prof = vec![0.0; t_len];
        for h in &att.heads {
            for i in 0..t_len {
                add_into(&mut prof, h.weights.row(i));
            }
        }
        let denom = (att.heads.len() * t_len) as f64;
        prof.iter_mut().for_each(|x| *x /= denom);
        Some(prof)
    }
}

/// Mean-pooled attention context projected to the embedding, plus the
/// per-head weight matrices.
pub fn attention_forward(
    states: &Matrix,
    params: &ModelParams,
) -> Result<(Vec<f64>, Vec<Matrix>)> {
    let trace = attend(states, &params.attention)?;
    if params.w_pool.cols() != trace.pooled.len() {
        return Err(Error::Shape(format!(
            "pooling projection expects {} inputs, attention produced {}",
            params.w_pool.cols(),
            trace.pooled.len()
        )));
    }
    let mut ctx = params.b_pool.as_slice().to_vec();
    params.w_pool.matvec_acc(&trace.pooled, &mut ctx);
    Ok((ctx, trace.heads.into_iter().map(|h| h.weights).collect()))
}

/// Forward pass. Dropout masks are drawn from `rng` in train mode; eval mode
/// never touches `rng`.
pub fn forward(
    x: &Matrix,
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: Mode,
    rng: &mut Rng,
) -> Result<ForwardTrace> {
    let masks = match mode {
        Mode::Train => DropoutMasks::sample(cfg, rng),
        Mode::Eval => DropoutMasks::ones(cfg),
    };
    forward_with_masks(x, params, cfg, masks)
}

/// Forward pass with explicit dropout multipliers.
pub fn forward_with_masks(
    x: &Matrix,
    params: &ModelParams,
    cfg: &ModelConfig,
    masks: DropoutMasks,
) -> Result<ForwardTrace> {
    let (t_len, d) = (cfg.seq_len, cfg.input_dim);
    if x.shape() != (t_len, d) {
        return Err(Error::Shape(format!(
            "input window is {:?}, model expects ({t_len}, {d})",
            x.shape()
        )));
    }
    if masks.embedding.len() != cfg.embed_dim || masks.head_hidden.len() != cfg.head_hidden {
        return Err(Error::Shape("dropout masks do not match config".into()));
    }
    let hd = cfg.hidden_dim;
    if params.encoder.hidden() != hd || params.encoder.input() != d {
        return Err(Error::Shape("encoder weights do not match config".into()));
    }

    let mut encoder_steps = Vec::with_capacity(t_len);
    let mut encoder_states = Matrix::zeros(t_len, hd);
    let mut h = vec![0.0; hd];
    for t in 0..t_len {
        let step = gru_step(x.row(t), &h, &params.encoder);
        if step.h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("encoder state at step {t}")));
        }
        h.clone_from(&step.h);
        encoder_states.row_mut(t).copy_from_slice(&h);
        encoder_steps.push(step);
    }

    let (attention, pooled) = if cfg.attention_enabled {
        if params.attention.len() != cfg.heads {
            return Err(Error::Shape(format!(
                "config has {} heads, parameters have {}",
                cfg.heads,
                params.attention.len()
            )));
        }
        let tr = attend(&encoder_states, &params.attention)?;
        let pooled = tr.pooled.clone();
        (Some(tr), pooled)
    } else {
        let mut pooled = vec![0.0; hd];
        for t in 0..t_len {
            add_into(&mut pooled, encoder_states.row(t));
        }
        pooled.iter_mut().for_each(|v| *v /= t_len as f64);
        (None, pooled)
    };
    if params.w_pool.shape() != (cfg.embed_dim, pooled.len()) {
        return Err(Error::Shape("pooling projection does not match config".into()));
    }

    let mut embedding = params.b_pool.as_slice().to_vec();
    params.w_pool.matvec_acc(&pooled, &mut embedding);
    if embedding.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("embedding after step {}", t_len - 1)));
    }
    let shared: Vec<f64> = embedding
        .iter()
        .zip(&masks.embedding)
        .map(|(e, m)| e * m)
        .collect();

    let mut s = params.b_dec_init.as_slice().to_vec();
    params.w_dec_init.matvec_acc(&shared, &mut s);
    let decoder_init = s.clone();
    let mut decoder_steps = Vec::with_capacity(t_len);
    let mut reconstruction = Matrix::zeros(t_len, d);
    for t in 0..t_len {
        let step = gru_step(&shared, &s, &params.decoder);
        if step.h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("decoder state at step {t}")));
        }
        s.clone_from(&step.h);
        let row = reconstruction.row_mut(t);
        row.copy_from_slice(params.b_out.as_slice());
        params.w_out.matvec_acc(&s, row);
        decoder_steps.push(step);
    }

    let (head, prob) = match (&params.head, cfg.outcome_head_enabled) {
        (Some(hp), true) => {
            let mut hidden = hp.b1.as_slice().to_vec();
            hp.w1.matvec_acc(&shared, &mut hidden);
            hidden.iter_mut().for_each(|v| *v = v.tanh());
            let logit = hp.b2.get(0, 0)
                + hidden
                    .iter()
                    .zip(&masks.head_hidden)
                    .zip(hp.w2.row(0))
                    .map(|((a, m), w)| a * m * w)
                    .sum::<f64>();
            if !logit.is_finite() {
                return Err(Error::NonFinite(format!("outcome logit after step {}", t_len - 1)));
            }
            (Some(HeadTraceMlp { hidden, logit }), sigmoid(logit))
        }
        (None, true) => {
            return Err(Error::Shape("config enables the outcome head but parameters lack it".into()))
        }
        _ => (None, 0.5),
    };

    Ok(ForwardTrace {
        encoder_steps,
        encoder_states,
        attention,
        pooled,
        embedding,
        masks,
        shared,
        decoder_init,
        decoder_steps,
        reconstruction,
        head,
        prob,
    })
}

/// Backpropagate upstream gradients on the reconstruction (`d_recon`) and
/// on the outcome logit (`d_logit`) into a fresh gradient set.
pub fn backward_seeded(
    trace: &ForwardTrace,
    x: &Matrix,
    params: &ModelParams,
    cfg: &ModelConfig,
    d_recon: Option<&Matrix>,
    d_logit: Option<f64>,
) -> Result<ModelParams> {
    let (t_len, hd) = (cfg.seq_len, cfg.hidden_dim);
    if trace.encoder_steps.len() != t_len
        || trace.decoder_steps.len() != t_len
        || trace.embedding.len() != cfg.embed_dim
        || x.shape() != (t_len, cfg.input_dim)
    {
        return Err(Error::Shape("trace does not match parameters/config".into()));
    }
    let mut grads = params.zeros_like();
    let mut d_shared = vec![0.0; cfg.embed_dim];

    if let Some(dr) = d_recon {
        if dr.shape() != (t_len, cfg.input_dim) {
            return Err(Error::Shape("reconstruction gradient shape".into()));
        }
        let mut ds = vec![0.0; hd];
        for t in (0..t_len).rev() {
            let dy = dr.row(t);
            let step = &trace.decoder_steps[t];
            grads.w_out.add_outer(dy, &step.h);
            add_into(grads.b_out.as_mut_slice(), dy);
            params.w_out.t_matvec_acc(dy, &mut ds);
            let (dprev, dx) = gru_step_backward(&params.decoder, step, &ds, &mut grads.decoder);
            add_into(&mut d_shared, &dx);
            ds = dprev;
        }
        grads.w_dec_init.add_outer(&ds, &trace.shared);
        add_into(grads.b_dec_init.as_mut_slice(), &ds);
        params.w_dec_init.t_matvec_acc(&ds, &mut d_shared);
    }

    if let (Some(dl), Some(hp), Some(ht), Some(gh)) =
        (d_logit, &params.head, &trace.head, grads.head.as_mut())
    {
        let dropped: Vec<f64> = ht
            .hidden
            .iter()
            .zip(&trace.masks.head_hidden)
            .map(|(a, m)| a * m)
            .collect();
        gh.w2.add_outer(&[dl], &dropped);
        gh.b2.as_mut_slice()[0] += dl;
        let dq: Vec<f64> = (0..ht.hidden.len())
            .map(|i| {
                let a = ht.hidden[i];
                dl * hp.w2.get(0, i) * trace.masks.head_hidden[i] * (1.0 - a * a)
            })
            .collect();
        gh.w1.add_outer(&dq, &trace.shared);
        add_into(gh.b1.as_mut_slice(), &dq);
        hp.w1.t_matvec_acc(&dq, &mut d_shared);
    }

    let d_emb: Vec<f64> = d_shared
        .iter()
        .zip(&trace.masks.embedding)
        .map(|(g, m)| g * m)
        .collect();
    if d_emb.iter().all(|&g| g == 0.0) {
        return Ok(grads);
    }

    grads.w_pool.add_outer(&d_emb, &trace.pooled);
    add_into(grads.b_pool.as_mut_slice(), &d_emb);
    let mut d_pooled = vec![0.0; trace.pooled.len()];
    params.w_pool.t_matvec_acc(&d_emb, &mut d_pooled);

    let d_states = match &trace.attention {
        Some(att) => attention::attend_backward(
            &trace.encoder_states,
            &params.attention,
            att,
            &d_pooled,
            &mut grads.attention,
        ),
        None => {
            let mut m = Matrix::zeros(t_len, hd);
            let share: Vec<f64> = d_pooled.iter().map(|g| g / t_len as f64).collect();
            for t in 0..t_len {
                m.row_mut(t).copy_from_slice(&share);
            }
            m
        }
    };

    let mut dh = vec![0.0; hd];
    for t in (0..t_len).rev() {
        add_into(&mut dh, d_states.row(t));
        let (dprev, _) = gru_step_backward(
            &params.encoder,
            &trace.encoder_steps[t],
            &dh,
            &mut grads.encoder,
        );
        dh = dprev;
    }
    Ok(grads)
}

/// Per-sample task gradients `(∂L_AE/∂θ, ∂L_BCE/∂θ)` with
/// `L_AE = ‖X − X̂‖² / (T·d)` and `L_BCE` the logistic loss of the head.
/// Without an outcome head `g_BCE` is all zeros.
pub fn backward(
    trace: &ForwardTrace,
    x: &Matrix,
    y: f64,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(ModelParams, ModelParams)> {
    let scale = 2.0 / (cfg.seq_len * cfg.input_dim) as f64;
    let mut d_recon = trace.reconstruction.clone();
    for (g, xv) in d_recon.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *g = (*g - xv) * scale;
    }
    let g_ae = backward_seeded(trace, x, params, cfg, Some(&d_recon), None)?;
    let g_bce = match trace.logit() {
        Some(_) => backward_seeded(trace, x, params, cfg, None, Some(trace.prob - y))?,
        None => params.zeros_like(),
    };
    Ok((g_ae, g_bce))
}
