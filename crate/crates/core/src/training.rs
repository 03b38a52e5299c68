//! Losses, gradient surgery, clipping, Adam, plateau scheduling and the
//! training loop (full model and ablations).

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::{dot, norm, Matrix};
use crate::metrics::roc_auc;
use crate::model::{backward, forward, Mode, ModelConfig, ModelParams, ParamGroup};
use crate::rng::{derive_seed, Rng};

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

/// `Σ‖X − X̂‖² / (N·T·d)` over a batch of `n` windows whose squared errors
/// are summed here.
pub fn loss_reconstruction(x: &[Matrix], x_hat: &[Matrix]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::Shape(format!(
            "{} windows vs {} reconstructions",
            x.len(),
            x_hat.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::Empty("reconstruction batch"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (a, b) in x.iter().zip(x_hat) {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "window {:?} vs reconstruction {:?}",
                a.shape(),
                b.shape()
            )));
        }
        total += a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>();
        count += a.len();
    }
    Ok(total / count as f64)
}

/// Logistic loss from a logit, `max(l,0) − l·y + ln(1 + e^{−|l|})`.
pub fn loss_bce(y: f64, logit: f64) -> f64 {
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

pub fn joint_loss(l_ae: f64, l_bce: f64, cfg: &TrainConfig) -> f64 {
    cfg.alpha * l_ae + cfg.beta * l_bce
}

/// Combine two task gradients. When they conflict, the component of `g_ae`
/// along `g_bce` is removed first. Returns the sum and whether projection
/// happened.
pub fn gradient_surgery(g_ae: &[f64], g_bce: &[f64]) -> Result<(Vec<f64>, bool)> {
    if g_ae.len() != g_bce.len() {
        return Err(Error::Shape(format!(
            "task gradients have lengths {} and {}",
            g_ae.len(),
            g_bce.len()
        )));
    }
    let d = dot(g_ae, g_bce);
    let nb2 = dot(g_bce, g_bce);
    let fired = d < 0.0 && nb2.sqrt() >= 1e-12;
    let coef = if fired { d / nb2 } else { 0.0 };
    let out = g_ae
        .iter()
        .zip(g_bce)
        .map(|(a, b)| a - coef * b + b)
        .collect();
    Ok((out, fired))
}

/// Rescale `g` in place so that its Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_by_global_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let n = norm(g);
    if n > max_norm {
        let s = max_norm / n;
        g.iter_mut().for_each(|v| *v *= s);
    }
    n
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Per-coordinate step counts, so frozen coordinates get their own bias
    /// correction when they start training.
    pub t: Vec<u64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: vec![0; n],
        }
    }
}

/// One Adam update with L2 penalty `λθ` added to the gradient. Coordinates
/// with `frozen[i] == true` are left untouched, moments included.
pub fn adam_step(
    theta: &mut [f64],
    g: &[f64],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    frozen: Option<&[bool]>,
) -> Result<()> {
    let n = theta.len();
    if g.len() != n || state.m.len() != n || state.v.len() != n || state.t.len() != n {
        return Err(Error::Shape("Adam state does not match parameters".into()));
    }
    if frozen.is_some_and(|f| f.len() != n) {
        return Err(Error::Shape("freeze mask does not match parameters".into()));
    }
    for i in 0..n {
        if frozen.is_some_and(|f| f[i]) {
            continue;
        }
        let gi = g[i] + weight_decay * theta[i];
        state.t[i] += 1;
        let t = state.t[i] as i32;
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * gi;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * gi * gi;
        let m_hat = state.m[i] / (1.0 - ADAM_BETA1.powi(t));
        let v_hat = state.v[i] / (1.0 - ADAM_BETA2.powi(t));
        theta[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Whether larger or smaller values of the monitored quantity are better.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Maximize,
    Minimize,
}

/// Tracks the best monitored value and how many epochs have passed without
/// improving on it by at least `threshold`.
#[derive(Clone, Debug)]
pub struct PlateauTracker {
    pub direction: Direction,
    pub threshold: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl PlateauTracker {
    pub fn new(direction: Direction, threshold: f64) -> Self {
        Self {
            direction,
            threshold,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Record a new value; returns true when it is an improvement.
    pub fn observe(&mut self, value: f64) -> bool {
        let improved = match self.best {
            None => true,
            Some(b) => match self.direction {
                Direction::Maximize => value >= b + self.threshold,
                Direction::Minimize => value <= b - self.threshold,
            },
        };
        if improved {
            self.best = Some(value);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        improved
    }
}

#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    pub tracker: PlateauTracker,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl PlateauScheduler {
    pub fn new(direction: Direction, cfg: &TrainConfig) -> Self {
        Self {
            tracker: PlateauTracker::new(direction, cfg.improvement_threshold),
            factor: cfg.scheduler_factor,
            patience: cfg.scheduler_patience,
            min_lr: cfg.min_lr,
        }
    }

    /// Feed one epoch's monitored value and return the learning rate to use
    /// next.
    pub fn step(&mut self, value: f64, lr: f64) -> f64 {
        self.tracker.observe(value);
        if self.tracker.bad_epochs >= self.patience {
            self.tracker.bad_epochs = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}

/// Replay a plateau scheduler over a validation AUC history, starting from
/// `lr`, and return the resulting learning rate.
pub fn lr_on_plateau(history: &[f64], lr: f64, factor: f64, patience: usize) -> f64 {
    let cfg = TrainConfig {
        scheduler_factor: factor,
        scheduler_patience: patience,
        ..TrainConfig::default()
    };
    let mut sched = PlateauScheduler::new(Direction::Maximize, &cfg);
    history.iter().fold(lr.max(cfg.min_lr), |lr, &v| sched.step(v, lr))
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lr_init: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub scheduler_factor: f64,
    pub scheduler_patience: usize,
    pub min_lr: f64,
    pub improvement_threshold: f64,
    pub early_stop_patience: usize,
    pub val_fraction: f64,
    pub gradient_surgery: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            beta: 1.0,
            lr_init: 1e-5,
            batch_size: 64,
            max_epochs: 50,
            clip_norm: 1.0,
            weight_decay: 1e-4,
            scheduler_factor: 0.5,
            scheduler_patience: 3,
            min_lr: 1e-8,
            improvement_threshold: 1e-4,
            early_stop_patience: 10,
            val_fraction: 0.2,
            gradient_surgery: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad(format!("alpha and beta must be >= 0, got {} and {}", self.alpha, self.beta));
        }
        if !(self.lr_init > 0.0) || !self.lr_init.is_finite() {
            return bad(format!("lr_init must be positive, got {}", self.lr_init));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.scheduler_factor > 0.0 && self.scheduler_factor < 1.0) {
            return bad(format!("scheduler_factor must be in (0, 1), got {}", self.scheduler_factor));
        }
        if self.scheduler_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be at least 1".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must be in (0, 1), got {}", self.val_fraction));
        }
        Ok(())
    }
}

/// The full (α, β) grid used by the sweep command.
pub fn sweep_grid() -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for a in [0.3, 0.5, 0.7, 1.0] {
        for b in [0.5, 0.7, 1.0] {
            out.push((a, b));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoAttention,
    AeOnly,
    Sequential,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoAttention,
        Ablation::AeOnly,
        Ablation::Sequential,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoAttention => "no_attention",
            Ablation::AeOnly => "ae_only",
            Ablation::Sequential => "sequential",
        }
    }

    /// Model configuration with this variant's switches applied.
    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        match self {
            Ablation::Full | Ablation::Sequential => {}
            Ablation::NoAttention => cfg.attention_enabled = false,
            Ablation::AeOnly => cfg.outcome_head_enabled = false,
        }
        cfg
    }

    pub fn has_head(self) -> bool {
        self != Ablation::AeOnly
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s.replace('-', "_"))
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown ablation '{s}' (expected full, no_attention, ae_only or sequential)"
                ))
            })
    }
}

/// Borrowed windows with binary labels.
#[derive(Clone, Copy, Debug)]
pub struct Dataset<'a> {
    pub x: &'a [Matrix],
    pub y: &'a [u8],
}

impl<'a> Dataset<'a> {
    pub fn new(x: &'a [Matrix], y: &'a [u8]) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Shape(format!("{} windows but {} labels", x.len(), y.len())));
        }
        if let Some(bad) = y.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!("label {bad} is not 0 or 1")));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// 1 for ordinary runs; 1 or 2 for the two-phase sequential variant.
    pub phase: u8,
    pub l_ae: f64,
    pub l_bce: Option<f64>,
    pub joint: f64,
    pub val_auc: Option<f64>,
    pub val_mse: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub surgery_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Index into `records` of the epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub has_auc: bool,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.records[self.best_epoch]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(if self.has_auc {
            "epoch,phase,l_ae,l_bce,joint,val_auc,val_mse,lr,surgery_count\n"
        } else {
            "epoch,phase,l_ae,joint,val_mse,lr,surgery_count\n"
        });
        for r in &self.records {
            let line = if self.has_auc {
                format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    r.epoch,
                    r.phase,
                    r.l_ae,
                    r.l_bce.map(|v| v.to_string()).unwrap_or_default(),
                    r.joint,
                    r.val_auc.map(|v| v.to_string()).unwrap_or_default(),
                    r.val_mse,
                    r.lr,
                    r.surgery_count
                )
            } else {
                format!(
                    "{},{},{},{},{},{},{}\n",
                    r.epoch, r.phase, r.l_ae, r.joint, r.val_mse, r.lr, r.surgery_count
                )
            };
            s.push_str(&line);
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model_config: ModelConfig,
    pub params: ModelParams,
    pub history: TrainHistory,
}

/// Eval-mode outputs for one window.
#[derive(Clone, Debug)]
pub struct Inference {
    pub embedding: Vec<f64>,
    pub reconstruction: Matrix,
    pub prob: Option<f64>,
    pub attention_profile: Option<Vec<f64>>,
    pub l_ae: f64,
}

/// Run the model in eval mode over every window (in parallel, results in
/// input order).
pub fn infer(params: &ModelParams, cfg: &ModelConfig, xs: &[Matrix]) -> Result<Vec<Inference>> {
    xs.par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut unused = Rng::new(0);
            let tr = forward(x, params, cfg, Mode::Eval, &mut unused)
                .map_err(|e| Error::Numerical(format!("window {i}: {e}")))?;
            let l_ae = loss_reconstruction(std::slice::from_ref(x), std::slice::from_ref(&tr.reconstruction))?;
            Ok(Inference {
                attention_profile: tr.attention_profile(),
                prob: tr.logit().map(|_| tr.prob),
                embedding: tr.embedding,
                reconstruction: tr.reconstruction,
                l_ae,
            })
        })
        .collect()
}

struct ValStats {
    auc: Option<f64>,
    mse: f64,
}

fn validate_epoch(params: &ModelParams, cfg: &ModelConfig, val: &Dataset) -> Result<ValStats> {
    let out = infer(params, cfg, val.x)?;
    let mse = out.iter().map(|o| o.l_ae).sum::<f64>() / out.len() as f64;
    let auc = if cfg.outcome_head_enabled {
        let probs: Vec<f64> = out.iter().map(|o| o.prob.unwrap_or(0.5)).collect();
        Some(roc_auc(val.y, &probs)?)
    } else {
        None
    };
    Ok(ValStats { auc, mse })
}

/// Which losses drive a training phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Objective {
    Joint,
    ReconstructionOnly,
    OutcomeOnly,
}

struct Phase {
    index: u8,
    epochs: usize,
    objective: Objective,
    frozen: Vec<ParamGroup>,
    monitor: Direction,
}

struct BatchResult {
    g_ae: ModelParams,
    g_bce: ModelParams,
    l_ae: f64,
    l_bce: f64,
}

fn batch_gradients(
    params: &ModelParams,
    cfg: &ModelConfig,
    data: &Dataset,
    idx: &[usize],
    seed: u64,
) -> Result<BatchResult> {
    let per: Vec<Result<(ModelParams, ModelParams, f64, f64)>> = idx
        .par_iter()
        .enumerate()
        .map(|(pos, &i)| {
            let mut rng = Rng::new(derive_seed(seed, pos as u64));
            let x = &data.x[i];
            let y = data.y[i] as f64;
            let tr = forward(x, params, cfg, Mode::Train, &mut rng)?;
            let l_ae = loss_reconstruction(std::slice::from_ref(x), std::slice::from_ref(&tr.reconstruction))?;
            let l_bce = tr.logit().map_or(0.0, |l| loss_bce(y, l));
            let (g_ae, g_bce) = backward(&tr, x, y, params, cfg)?;
            Ok((g_ae, g_bce, l_ae, l_bce))
        })
        .collect();
    let mut g_ae = params.zeros_like();
    let mut g_bce = params.zeros_like();
    let (mut l_ae, mut l_bce) = (0.0, 0.0);
    let inv = 1.0 / idx.len() as f64;
    for r in per {
        let (ga, gb, la, lb) = r?;
        g_ae.axpy(inv, &ga);
        g_bce.axpy(inv, &gb);
        l_ae += la * inv;
        l_bce += lb * inv;
    }
    Ok(BatchResult {
        g_ae,
        g_bce,
        l_ae,
        l_bce,
    })
}

/// Train a model variant. Parameters from the best monitored epoch are
/// returned (validation AUC, or validation MSE when there is no head).
pub fn train(
    train_set: Dataset,
    val_set: Dataset,
    base_model: &ModelConfig,
    cfg: &TrainConfig,
    ablation: Ablation,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mcfg = ablation.model_config(base_model);
    mcfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    if ablation.has_head() {
        let pos = val_set.y.iter().filter(|&&v| v == 1).count();
        if pos == 0 || pos == val_set.len() {
            return Err(Error::Degenerate(format!(
                "validation set has a single outcome class ({pos} of {} positive)",
                val_set.len()
            )));
        }
    }

    let mut params = ModelParams::init(&mcfg, &mut Rng::new(derive_seed(cfg.seed, INIT_STREAM)))?;
    let phases = match ablation {
        Ablation::Full | Ablation::NoAttention => vec![Phase {
            index: 1,
            epochs: cfg.max_epochs,
            objective: Objective::Joint,
            frozen: vec![],
            monitor: Direction::Maximize,
        }],
        Ablation::AeOnly => vec![Phase {
            index: 1,
            epochs: cfg.max_epochs,
            objective: Objective::ReconstructionOnly,
            frozen: vec![],
            monitor: Direction::Minimize,
        }],
        Ablation::Sequential => {
            let first = cfg.max_epochs / 2;
            vec![
                Phase {
                    index: 1,
                    epochs: first,
                    objective: Objective::ReconstructionOnly,
                    frozen: vec![ParamGroup::Head],
                    monitor: Direction::Minimize,
                },
                Phase {
                    index: 2,
                    epochs: cfg.max_epochs - first,
                    objective: Objective::OutcomeOnly,
                    frozen: vec![
                        ParamGroup::Encoder,
                        ParamGroup::Attention,
                        ParamGroup::Pooling,
                        ParamGroup::Decoder,
                    ],
                    monitor: Direction::Maximize,
                },
            ]
        }
    };

    let n_params = params.num_params();
    let mut adam = AdamState::new(n_params);
    let mut lr = cfg.lr_init;
    let mut shuffle_rng = Rng::new(derive_seed(cfg.seed, SHUFFLE_STREAM));
    let dropout_seed = derive_seed(cfg.seed, DROPOUT_STREAM);
    let mut records: Vec<EpochRecord> = Vec::new();
    let mut best_epoch = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for phase in &phases {
        let frozen = params.group_mask(&phase.frozen);
        let frozen_ref = if phase.frozen.is_empty() { None } else { Some(&frozen[..]) };
        let mut sched = PlateauScheduler::new(phase.monitor, cfg);
        let mut stopper = PlateauTracker::new(phase.monitor, cfg.improvement_threshold);
        let mut best_params = params.clone();
        let mut phase_best = records.len();

        for _ in 0..phase.epochs {
            let epoch = records.len();
            shuffle_rng.shuffle(&mut order);
            let epoch_seed = derive_seed(dropout_seed, epoch as u64);
            let (mut sum_ae, mut sum_bce, mut seen) = (0.0, 0.0, 0usize);
            let mut surgery_count = 0;
            for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let res = batch_gradients(&params, &mcfg, &train_set, chunk, derive_seed(epoch_seed, b as u64))?;
                if !res.l_ae.is_finite() || !res.l_bce.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss at epoch {epoch}, batch {b} (l_ae = {}, l_bce = {})",
                        res.l_ae, res.l_bce
                    )));
                }
                sum_ae += res.l_ae * chunk.len() as f64;
                sum_bce += res.l_bce * chunk.len() as f64;
                seen += chunk.len();

                let mut a = res.g_ae.flatten();
                let mut g = res.g_bce.flatten();
                a.iter_mut().for_each(|v| *v *= cfg.alpha);
                g.iter_mut().for_each(|v| *v *= cfg.beta);
                let mut combined = match phase.objective {
                    Objective::ReconstructionOnly => a,
                    Objective::OutcomeOnly => g,
                    Objective::Joint if cfg.gradient_surgery => {
                        let (c, fired) = gradient_surgery(&a, &g)?;
                        surgery_count += fired as usize;
                        c
                    }
                    Objective::Joint => a.iter().zip(&g).map(|(x, y)| x + y).collect(),
                };
                for (c, &f) in combined.iter_mut().zip(&frozen) {
                    if f {
                        *c = 0.0;
                    }
                }
                clip_by_global_norm(&mut combined, cfg.clip_norm);
                let mut theta = params.flatten();
                adam_step(&mut theta, &combined, &mut adam, lr, cfg.weight_decay, frozen_ref)?;
                params.assign_flat(&theta)?;
                if !params.all_finite() {
                    return Err(Error::NonFinite(format!(
                        "parameters after epoch {epoch}, batch {b}"
                    )));
                }
            }

            let l_ae = sum_ae / seen as f64;
            let l_bce = mcfg.outcome_head_enabled.then_some(sum_bce / seen as f64);
            let joint = match phase.objective {
                Objective::Joint => joint_loss(l_ae, l_bce.unwrap_or(0.0), cfg),
                Objective::ReconstructionOnly => cfg.alpha * l_ae,
                Objective::OutcomeOnly => cfg.beta * l_bce.unwrap_or(0.0),
            };
            let val = validate_epoch(&params, &mcfg, &val_set)?;
            let monitored = match phase.monitor {
                Direction::Maximize => val.auc.ok_or(Error::Degenerate("no AUC to monitor".into()))?,
                Direction::Minimize => val.mse,
            };
            log::debug!(
                "epoch {epoch} phase {} l_ae {l_ae:.5} l_bce {:?} val_auc {:?} val_mse {:.5} lr {lr:e}",
                phase.index,
                l_bce,
                val.auc,
                val.mse
            );
            records.push(EpochRecord {
                epoch,
                phase: phase.index,
                l_ae,
                l_bce,
                joint,
                val_auc: val.auc,
                val_mse: val.mse,
                lr,
                surgery_count,
            });
            if stopper.observe(monitored) {
                best_params = params.clone();
                phase_best = epoch;
            }
            lr = sched.step(monitored, lr);
            if stopper.bad_epochs >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
        params = best_params;
        best_epoch = phase_best;
    }
    if records.is_empty() {
        return Err(Error::InvalidArgument("max_epochs must allow at least one epoch".into()));
    }
    Ok(TrainOutcome {
        model_config: mcfg,
        params,
        history: TrainHistory {
            records,
            best_epoch,
            stopped_early,
            has_auc: ablation.has_head(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn reconstruction_loss_examples() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(loss_reconstruction(&[x.clone()], &[x.clone()]).unwrap(), 0.0);
        assert_eq!(loss_reconstruction(&[x.clone()], &[Matrix::zeros(2, 2)]).unwrap(), 7.5);
        let a = Matrix::from_vec(3, 5, vec![2.0; 15]).unwrap();
        let b = Matrix::from_vec(3, 5, vec![1.0; 15]).unwrap();
        assert_eq!(loss_reconstruction(&[a.clone(), a], &[b.clone(), b]).unwrap(), 1.0);
        assert!(loss_reconstruction(&[x], &[Matrix::zeros(2, 3)]).is_err());
    }

    #[test]
    fn bce_examples() {
        assert!((loss_bce(1.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        let v = loss_bce(0.0, -1000.0);
        assert!(v.is_finite() && v.abs() < 1e-300);
        let l = (0.8f64 / 0.2).ln();
        assert!((loss_bce(1.0, l) - 0.223_143_551_314_209_7).abs() < 1e-12);
        for &lg in &[-8.0, -3.2, -0.1, 0.0, 0.7, 5.0, 8.0] {
            let p = 1.0 / (1.0 + (-lg as f64).exp());
            for y in [0.0, 1.0] {
                let textbook = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
                assert!((loss_bce(y, lg) - textbook).abs() < 1e-12, "{lg} {y}");
            }
        }
    }

    #[test]
    fn joint_loss_examples() {
        let cfg = TrainConfig::default();
        assert!((joint_loss(1.0, 1.0, &cfg) - 1.7).abs() < 1e-15);
        let c0 = TrainConfig { alpha: 0.0, ..cfg.clone() };
        assert_eq!(joint_loss(123.0, 0.4, &c0), 0.4);
        let c = TrainConfig { alpha: 0.5, beta: 0.7, ..cfg };
        assert!((joint_loss(0.47, 0.693, &c) - 0.7201).abs() < 1e-12);
    }

    #[test]
    fn surgery_examples() {
        assert_eq!(gradient_surgery(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), (vec![1.0, 1.0], false));
        assert_eq!(gradient_surgery(&[-2.0, 0.0], &[2.0, 0.0]).unwrap(), (vec![2.0, 0.0], true));
        assert_eq!(gradient_surgery(&[1.0, -1.0], &[1.0, 1.0]).unwrap(), (vec![2.0, 0.0], false));
        // degenerate: conflicting but negligible g_bce
        let (out, fired) = gradient_surgery(&[1.0, 0.0], &[-1e-13, 0.0]).unwrap();
        assert!(!fired);
        assert_eq!(out, vec![1.0 - 1e-13, 0.0]);
        assert!(gradient_surgery(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![0.3, 0.4];
        clip_by_global_norm(&mut g, 1.0);
        assert_eq!(g, vec![0.3, 0.4]);
        let mut g = vec![3.0, 4.0];
        clip_by_global_norm(&mut g, 1.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut rng = Rng::new(4);
        let mut g: Vec<f64> = (0..100).map(|_| rng.normal()).collect();
        let s = 7.3 / norm(&g);
        g.iter_mut().for_each(|v| *v *= s);
        clip_by_global_norm(&mut g, 1.0);
        assert!((norm(&g) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_examples() {
        let mut theta = vec![0.5, -0.25];
        let mut st = AdamState::new(2);
        adam_step(&mut theta, &[0.0, 0.0], &mut st, 1e-3, 0.0, None).unwrap();
        assert_eq!(theta, vec![0.5, -0.25]);
        assert_eq!(st.m, vec![0.0, 0.0]);

        let mut theta = vec![0.0];
        let mut st = AdamState::new(1);
        adam_step(&mut theta, &[1.0], &mut st, 1e-5, 0.0, None).unwrap();
        assert!(((-theta[0]) - 1e-5).abs() < 1e-7);

        // hand unroll of two steps with constant g = 0.3, λ = 0.01
        let (lr, lam, g) = (0.01, 0.01, 0.3);
        let mut theta = vec![1.0];
        let mut st = AdamState::new(1);
        adam_step(&mut theta, &[g], &mut st, lr, lam, None).unwrap();
        adam_step(&mut theta, &[g], &mut st, lr, lam, None).unwrap();
        let mut th = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            let gi = g + lam * th;
            m = 0.9 * m + 0.1 * gi;
            v = 0.999 * v + 0.001 * gi * gi;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            th -= lr * mh / (vh.sqrt() + 1e-8);
        }
        assert!((theta[0] - th).abs() < 1e-12);

        let mut theta = vec![1.0, 1.0];
        let mut st = AdamState::new(2);
        adam_step(&mut theta, &[1.0, 1.0], &mut st, 0.1, 0.5, Some(&[true, false])).unwrap();
        assert_eq!(theta[0], 1.0);
        assert_eq!(st.t, vec![0, 1]);
        assert!(theta[1] < 1.0);
    }

    #[test]
    fn plateau_examples() {
        let up: Vec<f64> = (0..20).map(|i| 0.5 + 0.01 * i as f64).collect();
        assert_eq!(lr_on_plateau(&up, 1e-3, 0.5, 3), 1e-3);
        assert_eq!(lr_on_plateau(&[0.7; 4], 1e-3, 0.5, 3), 5e-4);
        assert_eq!(lr_on_plateau(&[0.7; 3], 1e-3, 0.5, 3), 1e-3);
        assert_eq!(lr_on_plateau(&[0.7; 40], 1e-8, 0.5, 3), 1e-8);
        assert_eq!(lr_on_plateau(&[0.7; 100], 1e-3, 0.5, 3), 1e-8);
        // gains below the threshold do not count as improvement
        let creeping: Vec<f64> = (0..4).map(|i| 0.7 + 1e-5 * i as f64).collect();
        assert_eq!(lr_on_plateau(&creeping, 1e-3, 0.5, 3), 5e-4);
    }

    #[test]
    fn grid_and_ablation_names() {
        let g = sweep_grid();
        assert_eq!(g.len(), 12);
        assert!(g.contains(&(0.7, 1.0)));
        for a in Ablation::ALL {
            assert_eq!(a.as_str().parse::<Ablation>().unwrap(), a);
        }
        assert!("nope".parse::<Ablation>().is_err());
        assert!(TrainConfig { lr_init: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { alpha: -1.0, ..TrainConfig::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn surgery_properties(
            a in proptest::collection::vec(-10.0f64..10.0, 1..20),
            seed in any::<u64>(),
        ) {
            let mut rng = Rng::new(seed);
            let b: Vec<f64> = a.iter().map(|_| rng.normal() * 3.0).collect();
            let (out, fired) = gradient_surgery(&a, &b).unwrap();
            let d = dot(&a, &b);
            prop_assert_eq!(fired, d < 0.0 && norm(&b) >= 1e-12);
            let proj: Vec<f64> = out.iter().zip(&b).map(|(o, bb)| o - bb).collect();
            if fired {
                prop_assert!(dot(&proj, &b).abs() <= 1e-10 * norm(&a) * norm(&b) + 1e-300);
            } else {
                for (p, x) in proj.iter().zip(&a) {
                    prop_assert!((p - x).abs() <= 1e-12 * (1.0 + x.abs()));
                }
            }
        }

        #[test]
        fn clip_properties(g in proptest::collection::vec(-100.0f64..100.0, 1..50), m in 0.01f64..10.0) {
            let mut c = g.clone();
            clip_by_global_norm(&mut c, m);
            prop_assert!(norm(&c) <= m + 1e-12);
            let (ng, nc) = (norm(&g), norm(&c));
            if ng > 0.0 {
                prop_assert!((dot(&g, &c) / (ng * nc) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn joint_linearity(a in 0.0f64..2.0, b in 0.0f64..2.0, l1 in 0.0f64..10.0, l2 in 0.0f64..10.0) {
            let cfg = TrainConfig { alpha: a, beta: b, ..TrainConfig::default() };
            let diff = joint_loss(l1, l2, &cfg) - joint_loss(0.0, l2, &cfg);
            prop_assert!((diff - a * l1).abs() < 1e-12);
        }
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            input_dim: 2,
            seq_len: 6,
            hidden_dim: 6,
            embed_dim: 4,
            head_dim: 3,
            head_hidden: 4,
            dropout_rate: 0.0,
            ..ModelConfig::default()
        }
    }

    /// Labels are a threshold on the mean of feature 0.
    fn threshold_data(n: usize, seed: u64) -> (Vec<Matrix>, Vec<u8>) {
        let mut rng = Rng::new(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..n {
            let level = rng.uniform_range(-1.5, 1.5);
            let rows: Vec<Vec<f64>> = (0..6)
                .map(|_| vec![level + 0.1 * rng.normal(), rng.normal()])
                .collect();
            xs.push(Matrix::from_rows(&rows).unwrap());
            ys.push((level > 0.0) as u8);
        }
        (xs, ys)
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            lr_init: 1e-2,
            batch_size: 16,
            max_epochs: 40,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn separable_threshold_is_learned() {
        let (xs, ys) = threshold_data(200, 1);
        let (vx, vy) = threshold_data(60, 2);
        let out = train(
            Dataset::new(&xs, &ys).unwrap(),
            Dataset::new(&vx, &vy).unwrap(),
            &tiny_model(),
            &quick_cfg(),
            Ablation::Full,
        )
        .unwrap();
        let auc = out.history.best().val_auc.unwrap();
        assert!(auc >= 0.95, "val AUC {auc}");
        let lrs: Vec<f64> = out.history.records.iter().map(|r| r.lr).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.history.records.len() <= 40);
    }

    #[test]
    fn training_is_reproducible_and_ablations_behave() {
        let (xs, ys) = threshold_data(64, 3);
        let (vx, vy) = threshold_data(24, 4);
        let tr = Dataset::new(&xs, &ys).unwrap();
        let va = Dataset::new(&vx, &vy).unwrap();
        let mut model = tiny_model();
        model.dropout_rate = 0.3;
        let cfg = TrainConfig { max_epochs: 6, ..quick_cfg() };
        let a = train(tr, va, &model, &cfg, Ablation::Full).unwrap();
        let b = train(tr, va, &model, &cfg, Ablation::Full).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);

        let ae = train(tr, va, &model, &cfg, Ablation::AeOnly).unwrap();
        assert!(ae.params.head.is_none());
        assert!(ae.history.records.iter().all(|r| r.val_auc.is_none() && r.surgery_count == 0));
        assert!(!ae.history.to_csv().contains("val_auc"));

        let na = train(tr, va, &model, &cfg, Ablation::NoAttention).unwrap();
        assert!(na.params.attention.is_empty());

        let seq = train(tr, va, &model, &cfg, Ablation::Sequential).unwrap();
        let phases: Vec<u8> = seq.history.records.iter().map(|r| r.phase).collect();
        assert!(phases.contains(&1) && phases.contains(&2));
        assert!(seq.history.records.len() <= 6);

        // α = 0 trains the head alone; reconstruction never fires surgery
        let c0 = TrainConfig { alpha: 0.0, ..cfg.clone() };
        let z = train(tr, va, &model, &c0, Ablation::Full).unwrap();
        assert!(z.history.records.iter().all(|r| r.surgery_count == 0));
    }

    #[test]
    fn sequential_phase_two_freezes_autoencoder() {
        let (xs, ys) = threshold_data(32, 5);
        let (vx, vy) = threshold_data(16, 6);
        let tr = Dataset::new(&xs, &ys).unwrap();
        let va = Dataset::new(&vx, &vy).unwrap();
        // with a single epoch, phase 1 is empty and phase 2 must leave the
        // autoencoder at its initial values
        let cfg = TrainConfig { max_epochs: 1, ..quick_cfg() };
        let out = train(tr, va, &tiny_model(), &cfg, Ablation::Sequential).unwrap();
        let init = ModelParams::init(&tiny_model(), &mut Rng::new(derive_seed(cfg.seed, INIT_STREAM))).unwrap();
        assert_eq!(out.params.encoder, init.encoder);
        assert_eq!(out.params.decoder, init.decoder);
        assert_eq!(out.params.w_pool, init.w_pool);
        assert_ne!(out.params.head, init.head);
    }

    #[test]
    fn setup_errors() {
        let (xs, ys) = threshold_data(10, 7);
        let tr = Dataset::new(&xs, &ys).unwrap();
        let ones = vec![1u8; 10];
        let va = Dataset::new(&xs, &ones).unwrap();
        let err = train(tr, va, &tiny_model(), &quick_cfg(), Ablation::Full).unwrap_err();
        assert!(err.to_string().contains("single outcome class"));
        // AE-only has nothing to rank, so a single-class split is fine
        let cfg = TrainConfig { max_epochs: 1, ..quick_cfg() };
        assert!(train(tr, va, &tiny_model(), &cfg, Ablation::AeOnly).is_ok());
        assert!(Dataset::new(&xs, &ys[..3]).is_err());
        assert!(train(tr, Dataset::new(&[], &[]).unwrap(), &tiny_model(), &cfg, Ablation::Full).is_err());
    }
}
