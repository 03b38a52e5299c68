//! One function per subcommand. Each reads what earlier stages left in the
//! run directory and writes into its own subdirectory of it.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use gruae_core::baselines::{pca_fit, run_baselines, BaselineInput};
use gruae_core::clustering::{load_gmm, save_gmm, transfer_assign, GmmModel};
use gruae_core::data::{
    summary_features, synth_generate, write_daily_csv, write_labels_csv, write_truth_csv, Cohort,
    Standardizer,
};
use gruae_core::metrics::{EvalReport, StabilityResult};
use gruae_core::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use gruae_core::pipeline::{
    cluster_attention, cluster_embeddings, embed_cohort, embedding_matrix, fit_model, labels_of,
    score_cohort, standardize_all, CohortScore, KChoice,
};
use gruae_core::stats::{subtype_table, subtype_table_csv, SUBTYPE_CSV_HEADER};
use gruae_core::training::{sweep_grid, Ablation, TrainConfig};
use gruae_core::Matrix;

use crate::artifacts::*;
use crate::config::RunConfig;

pub const TRAIN: &str = "train";
pub const EVALUATE: &str = "evaluate";
pub const VALIDATE: &str = "validate";
pub const STABILITY: &str = "stability";
pub const ANALYZE: &str = "analyze";
pub const REPORT: &str = "report";
pub const SWEEP: &str = "sweep";

const ATTENTION_HEADER: &str = "cluster,day,weight";
const PCA_HEADER: &str = "participant_id,cluster,pc1,pc2";
const BIC_HEADER: &str = "k,bic,log_likelihood,n_params";
const SWEEP_HEADER: &str = "alpha,beta,epochs,best_epoch,val_auc,val_mse,silhouette,dbi,ari_truth";

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn synth(cfg: &RunConfig) -> anyhow::Result<()> {
    let out = synth_generate(&cfg.synth)?;
    if out.schema != cfg.schema() {
        bail!("the generator emits the default feature set; [data] features must match it");
    }
    let dir = &cfg.run.out_dir;
    prepare_dir(dir, cfg)?;
    write(&dir.join(FEATURES_CSV), &write_daily_csv(&out.records, &out.schema))?;
    write(&dir.join(LABELS_CSV), &write_labels_csv(&out.labels))?;
    write(&dir.join(TRUTH_CSV), &write_truth_csv(&out.truth))?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub ablation: Ablation,
    pub epochs: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub best_val_auc: Option<f64>,
    pub best_val_mse: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub config_hash: String,
}

pub fn train(cfg: &RunConfig) -> anyhow::Result<()> {
    let cohort = load_cohort(cfg, &cfg.run.data_dir, Cohort::Discovery)?;
    let schema = cfg.schema();
    let tm = fit_model(&cohort.windows, &schema, &cfg.model, &cfg.train, cfg.run.ablation)?;
    let inf = embed_cohort(&tm.params, &tm.model_config, &tm.standardizer, &cohort.windows)?;
    let emb = embedding_matrix(&inf)?;

    let dir = stage_dir(cfg, TRAIN);
    prepare_dir(&dir, cfg)?;
    save_checkpoint(&dir.join("model.ckpt"), &tm.model_config, &tm.params)?;
    write(&dir.join("standardizer.csv"), &tm.standardizer.to_csv())?;
    write(&dir.join("history.csv"), &tm.history.to_csv())?;
    let ids = cohort.ids();
    write(&dir.join("split.csv"), &split_csv(&ids, &tm.val_idx))?;
    write(&dir.join("embeddings.csv"), &embeddings_csv(&ids, &emb))?;
    let best = tm.history.best();
    let summary = TrainSummary {
        ablation: tm.ablation,
        epochs: tm.history.records.len(),
        best_epoch: tm.history.best_epoch,
        stopped_early: tm.history.stopped_early,
        best_val_auc: best.val_auc,
        best_val_mse: best.val_mse,
        n_train: tm.train_idx.len(),
        n_val: tm.val_idx.len(),
        config_hash: cfg.hash(),
    };
    write(&dir.join("train.json"), &json(&summary))?;
    Ok(())
}

struct Trained {
    summary: TrainSummary,
    model_config: ModelConfig,
    params: ModelParams,
    standardizer: Standardizer,
}

fn load_trained(cfg: &RunConfig) -> anyhow::Result<Trained> {
    let dir = stage_dir(cfg, TRAIN);
    let ckpt = dir.join("model.ckpt");
    if !ckpt.exists() {
        bail!("no checkpoint at {}; run `gruae train` first", ckpt.display());
    }
    let (model_config, params) = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let standardizer = Standardizer::from_csv(&read(&dir.join("standardizer.csv"))?)?;
    let summary: TrainSummary = serde_json::from_str(&read(&dir.join("train.json"))?)?;
    Ok(Trained {
        summary,
        model_config,
        params,
        standardizer,
    })
}

fn load_mixture(cfg: &RunConfig) -> anyhow::Result<GmmModel> {
    let path = stage_dir(cfg, EVALUATE).join("gmm.txt");
    if !path.exists() {
        bail!("no fitted mixture at {}; run `gruae evaluate` first", path.display());
    }
    load_gmm(&path).with_context(|| format!("loading {}", path.display()))
}

/// Mean attention per cluster and day, in long form.
fn attention_csv(att: &Matrix) -> String {
    let mut s = format!("{ATTENTION_HEADER}\n");
    for c in 0..att.rows() {
        for (t, w) in att.row(c).iter().enumerate() {
            let _ = writeln!(s, "{c},{t},{w}");
        }
    }
    s
}

fn pca_csv(ids: &[&str], emb: &Matrix, hard: &[usize]) -> anyhow::Result<String> {
    let k = emb.cols().min(2);
    let proj = pca_fit(emb, k)?.transform(emb)?;
    let mut s = format!("{PCA_HEADER}\n");
    for (i, id) in ids.iter().enumerate() {
        let pc2 = if k > 1 { proj.get(i, 1) } else { 0.0 };
        let _ = writeln!(s, "{id},{},{},{pc2}", hard[i], proj.get(i, 0));
    }
    Ok(s)
}

fn reports_csv(rows: &[EvalReport]) -> String {
    let mut s = format!("{}\n", EvalReport::CSV_HEADER);
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

fn bic_csv(table: &[gruae_core::clustering::BicEntry]) -> String {
    let mut s = format!("{BIC_HEADER}\n");
    for e in table {
        let _ = writeln!(s, "{},{},{},{}", e.k, e.bic, e.log_likelihood, e.n_params);
    }
    s
}

fn k_choice(cfg: &RunConfig) -> KChoice {
    if cfg.cluster.auto_k {
        KChoice::Auto(cfg.cluster.k_range.clone())
    } else {
        KChoice::Fixed(cfg.cluster.k)
    }
}

pub fn evaluate(cfg: &RunConfig) -> anyhow::Result<()> {
    let t = load_trained(cfg)?;
    let cohort = load_cohort(cfg, &cfg.run.data_dir, Cohort::Discovery)?;
    let split = parse_split_csv(&read(&stage_dir(cfg, TRAIN).join("split.csv"))?)?;
    let ids = cohort.ids();
    if split.len() != ids.len() || ids.iter().any(|id| !split.contains_key(*id)) {
        bail!("participants in {} differ from those the model was trained on", cfg.run.data_dir.display());
    }
    let val_idx: Vec<usize> = (0..ids.len()).filter(|&i| split[ids[i]]).collect();
    let train_idx: Vec<usize> = (0..ids.len()).filter(|&i| !split[ids[i]]).collect();

    let inf = embed_cohort(&t.params, &t.model_config, &t.standardizer, &cohort.windows)?;
    let emb = embedding_matrix(&inf)?;
    let cl = cluster_embeddings(&emb, &k_choice(cfg), &cfg.cluster.k_range, &cfg.gmm, cfg.gmm.seed)?;
    let resp = cl.model.soft_assign(&emb)?;
    let hard = resp.hard_labels();
    let labels = labels_of(&cohort.windows);
    let hash = cfg.hash();
    let method = t.summary.ablation.as_str();
    let score = CohortScore {
        method,
        split: "discovery",
        embeddings: &emb,
        responsibilities: &resp,
        inference: &inf,
        labels: &labels,
        truth: cohort.truth.as_deref(),
        k: cl.selected_k,
        seed: cfg.gmm.seed,
        config_hash: &hash,
    };
    let mut rows = vec![score_cohort(&score, None)?];
    let mut val = score_cohort(&score, Some(&val_idx))?;
    val.split = "discovery-val".into();
    rows.push(val);

    let z = standardize_all(&t.standardizer, &cohort.windows)?;
    let baselines = run_baselines(&BaselineInput {
        windows: &z,
        labels: &labels,
        train_idx: &train_idx,
        val_idx: &val_idx,
        truth: cohort.truth.as_deref(),
        k: cl.selected_k,
        seed: cfg.gmm.seed,
        config_hash: hash.clone(),
    })?;
    rows.extend(baselines.into_iter().map(|b| b.report));

    let dir = stage_dir(cfg, EVALUATE);
    prepare_dir(&dir, cfg)?;
    save_gmm(&dir.join("gmm.txt"), &cl.model)?;
    write(&dir.join("bic.csv"), &bic_csv(&cl.bic_table))?;
    write(&dir.join("eval.csv"), &reports_csv(&rows))?;
    write(&dir.join("eval.json"), &json(&rows))?;
    write(&dir.join("assignments.csv"), &assignments_csv(&ids, resp.matrix(), &hard, &labels))?;
    write(&dir.join("pca.csv"), &pca_csv(&ids, &emb, &hard)?)?;
    if let Some(att) = cluster_attention(&inf, &hard, cl.selected_k) {
        write(&dir.join("attention.csv"), &attention_csv(&att))?;
    }
    Ok(())
}

pub fn validate(cfg: &RunConfig) -> anyhow::Result<()> {
    let t = load_trained(cfg)?;
    let gmm = load_mixture(cfg)?;
    let cohort = load_cohort(cfg, &cfg.run.data_dir, Cohort::Validation)?;
    let inf = embed_cohort(&t.params, &t.model_config, &t.standardizer, &cohort.windows)?;
    let emb = embedding_matrix(&inf)?;
    let resp = transfer_assign(&gmm, &emb)?;
    let hard = resp.hard_labels();
    let labels = labels_of(&cohort.windows);
    let hash = cfg.hash();
    let score = CohortScore {
        method: t.summary.ablation.as_str(),
        split: &cfg.run.cohort_tag,
        embeddings: &emb,
        responsibilities: &resp,
        inference: &inf,
        labels: &labels,
        truth: cohort.truth.as_deref(),
        k: gmm.k(),
        seed: cfg.gmm.seed,
        config_hash: &hash,
    };
    let rows = vec![score_cohort(&score, None)?];
    let ids = cohort.ids();
    let dir = stage_dir(cfg, VALIDATE);
    prepare_dir(&dir, cfg)?;
    write(&dir.join("eval.csv"), &reports_csv(&rows))?;
    write(&dir.join("eval.json"), &json(&rows))?;
    write(&dir.join("assignments.csv"), &assignments_csv(&ids, resp.matrix(), &hard, &labels))?;
    write(&dir.join("embeddings.csv"), &embeddings_csv(&ids, &emb))?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StabilitySummary {
    pub k: usize,
    pub trials: usize,
    pub min_leave_out: usize,
    pub max_leave_out: usize,
    pub mean_ari: f64,
    pub seed: u64,
    pub config_hash: String,
}

pub fn stability(cfg: &RunConfig) -> anyhow::Result<()> {
    let t = load_trained(cfg)?;
    let gmm = load_mixture(cfg)?;
    let cohort = load_cohort(cfg, &cfg.run.data_dir, Cohort::Validation)?;
    let inf = embed_cohort(&t.params, &t.model_config, &t.standardizer, &cohort.windows)?;
    let emb = embedding_matrix(&inf)?;
    let res: StabilityResult = gruae_core::metrics::stability_resample(&emb, &gmm, &cfg.stability.to_core())?;
    let dir = stage_dir(cfg, STABILITY);
    prepare_dir(&dir, cfg)?;
    write(&dir.join("stability.csv"), &res.to_csv())?;
    let summary = StabilitySummary {
        k: res.k,
        trials: res.trials.len(),
        min_leave_out: cfg.stability.min_leave_out,
        max_leave_out: cfg.stability.max_leave_out,
        mean_ari: res.mean_ari,
        seed: res.seed,
        config_hash: cfg.hash(),
    };
    write(&dir.join("stability.json"), &json(&summary))?;
    Ok(())
}

pub fn analyze(cfg: &RunConfig) -> anyhow::Result<()> {
    let t = load_trained(cfg)?;
    let gmm = load_mixture(cfg)?;
    if gmm.k() < 2 {
        bail!("subtype comparison needs at least two clusters, the mixture has {}", gmm.k());
    }
    let cohort = load_cohort(cfg, &cfg.run.data_dir, Cohort::Discovery)?;
    let inf = embed_cohort(&t.params, &t.model_config, &t.standardizer, &cohort.windows)?;
    let emb = embedding_matrix(&inf)?;
    let hard = gmm.soft_assign(&emb)?.hard_labels();
    let table = summary_features(&cohort.windows, &cfg.schema());
    let rows = subtype_table(&table, &hard)?;
    let dir = stage_dir(cfg, ANALYZE);
    prepare_dir(&dir, cfg)?;
    write(&dir.join("subtypes.csv"), &subtype_table_csv(&rows))?;
    Ok(())
}

/// Equal-width ARI histogram over [-1, 1].
pub fn ari_histogram(aris: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let width = 2.0 / bins as f64;
    let mut counts = vec![0usize; bins];
    for &a in aris {
        let b = (((a + 1.0) / width).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (-1.0 + i as f64 * width, -1.0 + (i + 1) as f64 * width, c))
        .collect()
}

struct Section {
    name: &'static str,
    header: String,
    rows: Vec<Vec<String>>,
}

fn optional(path: &Path) -> anyhow::Result<Option<String>> {
    if path.exists() {
        Ok(Some(read(path)?))
    } else {
        Ok(None)
    }
}

fn eval_rows(text: &str, what: &str) -> anyhow::Result<Vec<Vec<String>>> {
    let rows = parse_table(text, EvalReport::CSV_HEADER, what)?;
    for line in text.lines().skip(1) {
        EvalReport::parse_csv_row(line).with_context(|| format!("{what}: bad row '{line}'"))?;
    }
    Ok(rows)
}

pub fn report(cfg: &RunConfig) -> anyhow::Result<()> {
    let eval_dir = stage_dir(cfg, EVALUATE);
    let Some(eval) = optional(&eval_dir.join("eval.csv"))? else {
        bail!("no evaluation in {}; run `gruae evaluate` first", eval_dir.display());
    };
    let mut sections = vec![Section {
        name: "table1",
        header: EvalReport::CSV_HEADER.into(),
        rows: eval_rows(&eval, "evaluate/eval.csv")?,
    }];
    if let Some(v) = optional(&stage_dir(cfg, VALIDATE).join("eval.csv"))? {
        sections.push(Section {
            name: "table2",
            header: EvalReport::CSV_HEADER.into(),
            rows: eval_rows(&v, "validate/eval.csv")?,
        });
    }
    let bic = read(&eval_dir.join("bic.csv"))?;
    sections.push(Section {
        name: "bic_curve",
        header: BIC_HEADER.into(),
        rows: parse_table(&bic, BIC_HEADER, "evaluate/bic.csv")?,
    });
    if let Some(s) = optional(&stage_dir(cfg, STABILITY).join("stability.csv"))? {
        let trials = StabilityResult::parse_trials_csv(&s).context("stability/stability.csv")?;
        let aris: Vec<f64> = trials.iter().map(|t| t.ari).collect();
        let rows = ari_histogram(&aris, 40)
            .into_iter()
            .map(|(lo, hi, c)| vec![lo.to_string(), hi.to_string(), c.to_string()])
            .collect();
        sections.push(Section {
            name: "ari_histogram",
            header: "bin_lo,bin_hi,count".into(),
            rows,
        });
    }
    if let Some(a) = optional(&eval_dir.join("attention.csv"))? {
        sections.push(Section {
            name: "attention_traces",
            header: ATTENTION_HEADER.into(),
            rows: parse_table(&a, ATTENTION_HEADER, "evaluate/attention.csv")?,
        });
    }
    let pca = read(&eval_dir.join("pca.csv"))?;
    sections.push(Section {
        name: "pca_2d",
        header: PCA_HEADER.into(),
        rows: parse_table(&pca, PCA_HEADER, "evaluate/pca.csv")?,
    });
    if let Some(s) = optional(&stage_dir(cfg, ANALYZE).join("subtypes.csv"))? {
        sections.push(Section {
            name: "subtypes",
            header: SUBTYPE_CSV_HEADER.into(),
            rows: parse_table(&s, SUBTYPE_CSV_HEADER, "analyze/subtypes.csv")?,
        });
    }

    let dir = stage_dir(cfg, REPORT);
    prepare_dir(&dir, cfg)?;
    let mut bundle = String::from("section,row,column,value\n");
    for sec in &sections {
        let mut text = format!("{}\n", sec.header);
        let cols: Vec<&str> = sec.header.split(',').collect();
        for (i, row) in sec.rows.iter().enumerate() {
            text.push_str(&row.join(","));
            text.push('\n');
            for (c, v) in cols.iter().zip(row) {
                let _ = writeln!(bundle, "{},{i},{c},{v}", sec.name);
            }
        }
        write(&dir.join(format!("{}.csv", sec.name)), &text)?;
    }
    write(&dir.join("bundle.csv"), &bundle)?;
    Ok(())
}

pub fn sweep(cfg: &RunConfig) -> anyhow::Result<()> {
    let cohort = load_cohort(cfg, &cfg.run.data_dir, Cohort::Discovery)?;
    let schema = cfg.schema();
    let labels = labels_of(&cohort.windows);
    let hash = cfg.hash();
    let mut csv = format!("{SWEEP_HEADER}\n");
    for (alpha, beta) in sweep_grid() {
        let tc = TrainConfig {
            alpha,
            beta,
            ..cfg.train.clone()
        };
        let tm = fit_model(&cohort.windows, &schema, &cfg.model, &tc, cfg.run.ablation)
            .with_context(|| format!("training cell alpha={alpha} beta={beta}"))?;
        let inf = embed_cohort(&tm.params, &tm.model_config, &tm.standardizer, &cohort.windows)?;
        let emb = embedding_matrix(&inf)?;
        let cl = cluster_embeddings(&emb, &k_choice(cfg), &cfg.cluster.k_range, &cfg.gmm, cfg.gmm.seed)?;
        let resp = cl.model.soft_assign(&emb)?;
        let score = CohortScore {
            method: tm.ablation.as_str(),
            split: "discovery-val",
            embeddings: &emb,
            responsibilities: &resp,
            inference: &inf,
            labels: &labels,
            truth: cohort.truth.as_deref(),
            k: cl.selected_k,
            seed: cfg.gmm.seed,
            config_hash: &hash,
        };
        let all = score_cohort(&score, None)?;
        let val = score_cohort(&score, Some(&tm.val_idx))?;
        let _ = writeln!(
            csv,
            "{alpha},{beta},{},{},{},{},{},{},{}",
            tm.history.records.len(),
            tm.history.best_epoch,
            opt(val.auc),
            opt(val.mse),
            all.silhouette,
            all.dbi,
            opt(all.ari_truth)
        );
    }
    let dir = stage_dir(cfg, SWEEP);
    prepare_dir(&dir, cfg)?;
    write(&dir.join("sweep.csv"), &csv)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_bins_cover_the_range() {
        let h = ari_histogram(&[-1.0, 0.0, 0.99, 1.0], 4);
        assert_eq!(h.len(), 4);
        assert_eq!(h.iter().map(|b| b.2).sum::<usize>(), 4);
        assert_eq!(h[0].2, 1);
        assert_eq!(h[2].2, 1);
        assert_eq!(h[3].2, 2);
        assert_eq!((h[0].0, h[3].1), (-1.0, 1.0));
    }
}
