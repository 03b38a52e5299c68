//! Glue between the stages: split, standardize, train, embed, cluster and
//! score a cohort.

use crate::clustering::{gmm_fit, select_k, BicEntry, GmmFitConfig, GmmModel, Responsibilities};
use crate::data::{stratified_split, ParticipantWindow, Schema, Standardizer};
use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::metrics::{adjusted_rand_index, davies_bouldin, roc_auc, silhouette, EvalReport};
use crate::model::{ModelConfig, ModelParams};
use crate::rng::derive_seed;
use crate::training::{infer, train, Ablation, Dataset, Inference, TrainConfig, TrainHistory};

const SPLIT_STREAM: u64 = 101;
const GMM_STREAM: u64 = 102;

/// Fixed K, or the BIC minimizer over a range.
#[derive(Clone, Debug, PartialEq)]
pub enum KChoice {
    Fixed(usize),
    Auto(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub ablation: Ablation,
    pub model_config: ModelConfig,
    pub params: ModelParams,
    pub standardizer: Standardizer,
    pub history: TrainHistory,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
}

pub fn labels_of(windows: &[ParticipantWindow]) -> Vec<u8> {
    windows.iter().map(|w| w.label).collect()
}

pub fn standardize_all(std: &Standardizer, windows: &[ParticipantWindow]) -> Result<Vec<Matrix>> {
    windows.iter().map(|w| std.apply(&w.x)).collect()
}

/// Split the cohort, fit the standardizer on the training part and train.
pub fn fit_model(
    windows: &[ParticipantWindow],
    schema: &Schema,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    ablation: Ablation,
) -> Result<TrainedModel> {
    if windows.is_empty() {
        return Err(Error::Empty("cohort windows"));
    }
    if model_cfg.input_dim != schema.dim() || model_cfg.seq_len != windows[0].x.rows() {
        return Err(Error::Shape(format!(
            "model expects {} x {} windows, data are {} x {}",
            model_cfg.seq_len,
            model_cfg.input_dim,
            windows[0].x.rows(),
            schema.dim()
        )));
    }
    let labels = labels_of(windows);
    let (train_idx, val_idx) = stratified_split(
        &labels,
        train_cfg.val_fraction,
        derive_seed(train_cfg.seed, SPLIT_STREAM),
    )?;
    let train_raw: Vec<&Matrix> = train_idx.iter().map(|&i| &windows[i].x).collect();
    let standardizer = Standardizer::fit(&train_raw, schema)?;
    let z = standardize_all(&standardizer, windows)?;
    let pick = |idx: &[usize]| -> (Vec<Matrix>, Vec<u8>) {
        (idx.iter().map(|&i| z[i].clone()).collect(), idx.iter().map(|&i| labels[i]).collect())
    };
    let (tx, ty) = pick(&train_idx);
    let (vx, vy) = pick(&val_idx);
    let out = train(
        Dataset::new(&tx, &ty)?,
        Dataset::new(&vx, &vy)?,
        model_cfg,
        train_cfg,
        ablation,
    )?;
    Ok(TrainedModel {
        ablation,
        model_config: out.model_config,
        params: out.params,
        standardizer,
        history: out.history,
        train_idx,
        val_idx,
    })
}

/// Eval-mode outputs for every window of a cohort, standardized with the
/// model's training statistics.
pub fn embed_cohort(
    params: &ModelParams,
    cfg: &ModelConfig,
    std: &Standardizer,
    windows: &[ParticipantWindow],
) -> Result<Vec<Inference>> {
    infer(params, cfg, &standardize_all(std, windows)?)
}

pub fn embedding_matrix(inf: &[Inference]) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = inf.iter().map(|i| i.embedding.clone()).collect();
    if rows.is_empty() {
        return Err(Error::Empty("embeddings"));
    }
    Matrix::from_rows(&rows)
}

#[derive(Clone, Debug)]
pub struct Clustering {
    pub model: GmmModel,
    pub bic_table: Vec<BicEntry>,
    pub selected_k: usize,
}

/// Fit the mixture. The BIC table over `bic_range` is always produced;
/// with `KChoice::Auto` its minimizer is used.
pub fn cluster_embeddings(
    emb: &Matrix,
    k: &KChoice,
    bic_range: &[usize],
    gmm_cfg: &GmmFitConfig,
    seed: u64,
) -> Result<Clustering> {
    let cfg = GmmFitConfig {
        seed: derive_seed(seed, GMM_STREAM),
        ..gmm_cfg.clone()
    };
    let feasible: Vec<usize> = bic_range.iter().copied().filter(|&k| k <= emb.rows()).collect();
    match k {
        KChoice::Fixed(k) => {
            let model = gmm_fit(emb, *k, &cfg)?;
            let bic_table = if feasible.is_empty() {
                Vec::new()
            } else {
                select_k(emb, &feasible, &cfg)?.table
            };
            Ok(Clustering {
                model,
                bic_table,
                selected_k: *k,
            })
        }
        KChoice::Auto(range) => {
            let sel = select_k(emb, range, &cfg)?;
            Ok(Clustering {
                selected_k: sel.best_k,
                bic_table: sel.table,
                model: sel.best_model,
            })
        }
    }
}

/// Cluster-quality and outcome metrics for one cohort (or a subset of it).
pub struct CohortScore<'a> {
    pub method: &'a str,
    pub split: &'a str,
    pub embeddings: &'a Matrix,
    pub responsibilities: &'a Responsibilities,
    pub inference: &'a [Inference],
    pub labels: &'a [u8],
    pub truth: Option<&'a [usize]>,
    pub k: usize,
    pub seed: u64,
    pub config_hash: &'a str,
}

/// Score the rows in `subset` (all rows when `None`). MSE is the mean
/// per-window reconstruction error in standardized units; AUC uses the
/// head's probabilities and is absent without a head or when the subset
/// has one outcome class.
pub fn score_cohort(s: &CohortScore, subset: Option<&[usize]>) -> Result<EvalReport> {
    let all: Vec<usize> = (0..s.inference.len()).collect();
    let idx = subset.unwrap_or(&all);
    if idx.is_empty() {
        return Err(Error::Empty("cohort subset"));
    }
    let hard_all = s.responsibilities.hard_labels();
    let hard: Vec<usize> = idx.iter().map(|&i| hard_all[i]).collect();
    let mut points = Matrix::zeros(idx.len(), s.embeddings.cols());
    for (r, &i) in idx.iter().enumerate() {
        points.row_mut(r).copy_from_slice(s.embeddings.row(i));
    }
    let mse = idx.iter().map(|&i| s.inference[i].l_ae).sum::<f64>() / idx.len() as f64;
    let y: Vec<u8> = idx.iter().map(|&i| s.labels[i]).collect();
    let both = y.contains(&0) && y.contains(&1);
    let auc = match (both, s.inference[idx[0]].prob) {
        (true, Some(_)) => {
            let p: Vec<f64> = idx.iter().map(|&i| s.inference[i].prob.unwrap_or(0.5)).collect();
            Some(roc_auc(&y, &p)?)
        }
        _ => None,
    };
    let ari_truth = match s.truth {
        Some(t) => {
            let tt: Vec<usize> = idx.iter().map(|&i| t[i]).collect();
            Some(adjusted_rand_index(&tt, &hard)?)
        }
        None => None,
    };
    let report = EvalReport {
        method: s.method.into(),
        split: s.split.into(),
        n: idx.len(),
        k: s.k,
        mse: Some(mse),
        auc,
        silhouette: silhouette(&points, &hard)?,
        dbi: davies_bouldin(&points, &hard)?,
        ari_truth,
        seed: s.seed,
        config_hash: s.config_hash.into(),
    };
    report.validate()?;
    Ok(report)
}

/// Mean attention profile per cluster (rows: clusters, columns: days).
pub fn cluster_attention(inf: &[Inference], hard: &[usize], k: usize) -> Option<Matrix> {
    let t_len = inf.first()?.attention_profile.as_ref()?.len();
    let mut m = Matrix::zeros(k, t_len);
    let mut counts = vec![0usize; k];
    for (i, l) in inf.iter().zip(hard) {
        let prof = i.attention_profile.as_ref()?;
        counts[*l] += 1;
        for (t, v) in prof.iter().enumerate() {
            let cur = m.get(*l, t);
            m.set(*l, t, cur + v);
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            for v in m.row_mut(c) {
                *v /= n as f64;
            }
        }
    }
    Some(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_windows, synth_generate, Cohort, SynthSpec};

    #[test]
    fn small_end_to_end_run() {
        let spec = SynthSpec {
            n_participants: 60,
            seq_len: 10,
            ..SynthSpec::default()
        };
        let out = synth_generate(&spec).unwrap();
        let set = build_windows(&out.records, &out.labels, &out.schema, 10, 7, Cohort::Discovery).unwrap();
        let model = ModelConfig {
            seq_len: 10,
            hidden_dim: 8,
            embed_dim: 4,
            head_dim: 4,
            head_hidden: 4,
            ..ModelConfig::default()
        };
        let tc = TrainConfig {
            lr_init: 3e-3,
            max_epochs: 5,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let tm = fit_model(&set.windows, &out.schema, &model, &tc, Ablation::Full).unwrap();
        assert_eq!(tm.train_idx.len() + tm.val_idx.len(), set.windows.len());
        let inf = embed_cohort(&tm.params, &tm.model_config, &tm.standardizer, &set.windows).unwrap();
        let emb = embedding_matrix(&inf).unwrap();
        let cl = cluster_embeddings(&emb, &KChoice::Fixed(2), &[1, 2, 3], &GmmFitConfig::default(), 0).unwrap();
        assert_eq!(cl.bic_table.len(), 3);
        let resp = cl.model.soft_assign(&emb).unwrap();
        let labels = labels_of(&set.windows);
        let truth: Vec<usize> = set.windows.iter().map(|w| out.truth[&w.participant_id]).collect();
        let sc = CohortScore {
            method: "full",
            split: "discovery",
            embeddings: &emb,
            responsibilities: &resp,
            inference: &inf,
            labels: &labels,
            truth: Some(&truth),
            k: 2,
            seed: 0,
            config_hash: "x",
        };
        let all = score_cohort(&sc, None).unwrap();
        let val = score_cohort(&sc, Some(&tm.val_idx)).unwrap();
        assert_eq!(all.n, set.windows.len());
        assert_eq!(val.n, tm.val_idx.len());
        // validation MSE here equals the training history's value at the kept epoch
        let best = tm.history.best();
        assert!((val.mse.unwrap() - best.val_mse).abs() < 1e-8);
        assert!((val.auc.unwrap() - best.val_auc.unwrap()).abs() < 1e-12);
        let att = cluster_attention(&inf, &resp.hard_labels(), 2).unwrap();
        for c in 0..2 {
            let s: f64 = att.row(c).iter().sum();
            assert!(s == 0.0 || (s - 1.0).abs() < 1e-10);
        }
    }
}
