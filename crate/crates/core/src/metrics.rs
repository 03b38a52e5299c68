//! Evaluation measures: ROC-AUC, silhouette, Davies–Bouldin, adjusted Rand
//! index, and the leave-out cluster-stability protocol.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{gmm_fit, GmmFitConfig, GmmModel};
use crate::error::{Error, Result};
use crate::math::{euclidean, Matrix};
use crate::rng::{derive_seed, Rng};

/// Probability that a random positive outscores a random negative, ties
/// counted one half. Computed from midranks in `O(n log n)`.
pub fn roc_auc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Shape(format!(
            "{} labels vs {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score {i} is NaN")));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Degenerate("AUC needs both outcome classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

fn cluster_ids(labels: &[usize]) -> Vec<usize> {
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids
}

fn check_points(points: &Matrix, labels: &[usize]) -> Result<Vec<usize>> {
    if points.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} points vs {} labels",
            points.rows(),
            labels.len()
        )));
    }
    let ids = cluster_ids(labels);
    if ids.len() < 2 {
        return Err(Error::Degenerate(
            "cluster quality needs at least two clusters".into(),
        ));
    }
    Ok(ids)
}

/// Mean silhouette coefficient with Euclidean distance. Points in singleton
/// clusters contribute 0.
pub fn silhouette(points: &Matrix, labels: &[usize]) -> Result<f64> {
    let ids = check_points(points, labels)?;
    let n = points.rows();
    if n < 3 {
        return Err(Error::Degenerate("silhouette needs at least 3 points".into()));
    }
    let slot: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let k = ids.len();
    let mut sizes = vec![0usize; k];
    for l in labels {
        sizes[slot[l]] += 1;
    }
    let per_point: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = slot[&labels[i]];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            let pi = points.row(i);
            for j in 0..n {
                if j != i {
                    sums[slot[&labels[j]]] += euclidean(pi, points.row(j));
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 {
                (b - a) / denom
            } else {
                0.0
            }
        })
        .collect();
    Ok(per_point.iter().sum::<f64>() / n as f64)
}

fn centroids(points: &Matrix, labels: &[usize], ids: &[usize]) -> Vec<Vec<f64>> {
    let p = points.cols();
    ids.iter()
        .map(|&c| {
            let mut sum = vec![0.0; p];
            let mut cnt = 0usize;
            for (i, &l) in labels.iter().enumerate() {
                if l == c {
                    cnt += 1;
                    for (s, v) in sum.iter_mut().zip(points.row(i)) {
                        *s += v;
                    }
                }
            }
            sum.iter_mut().for_each(|s| *s /= cnt as f64);
            sum
        })
        .collect()
}

/// Davies–Bouldin index (lower is better).
pub fn davies_bouldin(points: &Matrix, labels: &[usize]) -> Result<f64> {
    let ids = check_points(points, labels)?;
    let cents = centroids(points, labels, &ids);
    let scatter: Vec<f64> = ids
        .iter()
        .zip(&cents)
        .map(|(&c, cent)| {
            let (sum, cnt) = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == c)
                .fold((0.0, 0usize), |(s, n), (i, _)| (s + euclidean(points.row(i), cent), n + 1));
            sum / cnt as f64
        })
        .collect();
    let k = ids.len();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = f64::NEG_INFINITY;
        for j in 0..k {
            if i == j {
                continue;
            }
            let d = euclidean(&cents[i], &cents[j]);
            if d == 0.0 {
                return Err(Error::Degenerate(format!(
                    "clusters {} and {} have coincident centroids",
                    ids[i], ids[j]
                )));
            }
            worst = worst.max((scatter[i] + scatter[j]) / d);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

fn choose2(n: u64) -> f64 {
    (n as f64) * (n.saturating_sub(1) as f64) / 2.0
}

/// Adjusted Rand index from the contingency table.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("partitions of length {} and {}", a.len(), b.len())));
    }
    let n = a.len() as u64;
    if n < 2 {
        return Err(Error::Degenerate("ARI needs at least two items".into()));
    }
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let expected = sum_a * sum_b / choose2(n);
    let max_index = 0.5 * (sum_a + sum_b);
    let denom = max_index - expected;
    if denom == 0.0 {
        // both partitions trivial (all-in-one or all singletons) and identical
        return Ok(if index == max_index { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / denom)
}

/// Mean squared error over all cells of paired matrices.
pub fn mse(truth: &[Matrix], recon: &[Matrix]) -> Result<f64> {
    if truth.len() != recon.len() || truth.is_empty() {
        return Err(Error::Shape("mse needs equally many nonempty windows".into()));
    }
    let mut total = 0.0;
    let mut cells = 0usize;
    for (x, y) in truth.iter().zip(recon) {
        if x.shape() != y.shape() {
            return Err(Error::Shape("mse window shapes differ".into()));
        }
        total += x
            .as_slice()
            .iter()
            .zip(y.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        cells += x.len();
    }
    Ok(total / cells as f64)
}

/// One row of a Table-1/2-style evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub split: String,
    pub n: usize,
    pub k: usize,
    pub mse: Option<f64>,
    pub auc: Option<f64>,
    pub silhouette: f64,
    pub dbi: f64,
    /// Agreement with planted clusters, when ground truth is available.
    pub ari_truth: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "method,split,n,k,mse,auc,silhouette,dbi,ari_truth,seed,config_hash";

    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.silhouette) {
            return Err(Error::InvalidArgument(format!("silhouette {} outside [-1,1]", self.silhouette)));
        }
        if !(self.dbi >= 0.0) {
            return Err(Error::InvalidArgument(format!("dbi {} negative", self.dbi)));
        }
        if let Some(a) = self.auc {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::InvalidArgument(format!("auc {a} outside [0,1]")));
            }
        }
        if let Some(m) = self.mse {
            if !(m >= 0.0) {
                return Err(Error::InvalidArgument(format!("mse {m} negative")));
            }
        }
        if self.method.is_empty() || self.split.is_empty() {
            return Err(Error::InvalidArgument("report needs method and split".into()));
        }
        Ok(())
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.method,
            self.split,
            self.n,
            self.k,
            opt(self.mse),
            opt(self.auc),
            self.silhouette,
            self.dbi,
            opt(self.ari_truth),
            self.seed,
            self.config_hash
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 11 {
            return Err(Error::Format(format!("report row has {} fields, expected 11", f.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Format(format!("bad number '{s}' in report")))
        };
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() { Ok(None) } else { num(s).map(Some) }
        };
        let int = |s: &str| -> Result<u64> {
            s.parse().map_err(|_| Error::Format(format!("bad integer '{s}' in report")))
        };
        let r = Self {
            method: f[0].to_string(),
            split: f[1].to_string(),
            n: int(f[2])? as usize,
            k: int(f[3])? as usize,
            mse: opt(f[4])?,
            auc: opt(f[5])?,
            silhouette: num(f[6])?,
            dbi: num(f[7])?,
            ari_truth: opt(f[8])?,
            seed: int(f[9])?,
            config_hash: f[10].to_string(),
        };
        r.validate()?;
        Ok(r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityTrial {
    pub trial: usize,
    pub left_out: usize,
    pub ari: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityResult {
    pub trials: Vec<StabilityTrial>,
    pub mean_ari: f64,
    pub k: usize,
    pub seed: u64,
}

impl StabilityResult {
    pub const CSV_HEADER: &'static str = "trial,left_out,ari";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for t in &self.trials {
            s.push_str(&format!("{},{},{}\n", t.trial, t.left_out, t.ari));
        }
        s
    }

    /// Parses and validates a per-trial ARI table.
    pub fn parse_trials_csv(text: &str) -> Result<Vec<StabilityTrial>> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::CSV_HEADER) {
            return Err(Error::Format(format!("stability table must start with '{}'", Self::CSV_HEADER)));
        }
        let mut out = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Parse { line: i + 2, msg: format!("bad stability row '{line}'") };
            if f.len() != 3 {
                return Err(bad());
            }
            let trial: usize = f[0].parse().map_err(|_| bad())?;
            let left_out: usize = f[1].parse().map_err(|_| bad())?;
            let ari: f64 = f[2].parse().map_err(|_| bad())?;
            if trial != i || !(-1.0..=1.0).contains(&ari) {
                return Err(bad());
            }
            out.push(StabilityTrial { trial, left_out, ari });
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct StabilityConfig {
    pub trials: usize,
    /// Leave-out sizes are drawn uniformly from `min_leave_out..=max_leave_out`.
    pub min_leave_out: usize,
    pub max_leave_out: usize,
    pub seed: u64,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            trials: 200,
            min_leave_out: 1,
            max_leave_out: 50,
            seed: 0,
        }
    }
}

/// Leave-out resampling: each trial drops `n` random participants, refits a
/// mixture with the same K (and the original fit seed) on the rest, and
/// scores agreement with the original hard labels on the retained points.
pub fn stability_resample(
    embeddings: &Matrix,
    model: &GmmModel,
    cfg: &StabilityConfig,
) -> Result<StabilityResult> {
    let n = embeddings.rows();
    if n <= cfg.max_leave_out {
        return Err(Error::InvalidArgument(format!(
            "{n} participants cannot support leaving out up to {}",
            cfg.max_leave_out
        )));
    }
    if cfg.min_leave_out > cfg.max_leave_out {
        return Err(Error::InvalidArgument("min_leave_out exceeds max_leave_out".into()));
    }
    let original = model.soft_assign(embeddings)?.hard_labels();
    let fit_cfg = GmmFitConfig {
        seed: model.seed,
        ..model.fit_config.clone()
    };
    let trials: Vec<Result<StabilityTrial>> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = Rng::new(derive_seed(cfg.seed, trial as u64));
            let left_out = rng.int_inclusive(cfg.min_leave_out, cfg.max_leave_out);
            let mut drop = vec![false; n];
            for i in rng.sample_indices(n, left_out) {
                drop[i] = true;
            }
            let keep: Vec<usize> = (0..n).filter(|&i| !drop[i]).collect();
            let mut sub = Matrix::zeros(keep.len(), embeddings.cols());
            for (r, &i) in keep.iter().enumerate() {
                sub.row_mut(r).copy_from_slice(embeddings.row(i));
            }
            let refit = gmm_fit(&sub, model.k(), &fit_cfg)?;
            let new_labels = refit.soft_assign(&sub)?.hard_labels();
            let old: Vec<usize> = keep.iter().map(|&i| original[i]).collect();
            let ari = adjusted_rand_index(&old, &new_labels)?;
            Ok(StabilityTrial { trial, left_out, ari })
        })
        .collect();
    let trials: Vec<StabilityTrial> = trials.into_iter().collect::<Result<_>>()?;
    let mean_ari = if trials.is_empty() {
        f64::NAN
    } else {
        trials.iter().map(|t| t.ari).sum::<f64>() / trials.len() as f64
    };
    Ok(StabilityResult {
        trials,
        mean_ari,
        k: model.k(),
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    // Brute-force O(N²) references, independent of the production code paths.

    fn auc_pairs(labels: &[u8], scores: &[f64]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..labels.len() {
            for j in 0..labels.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    fn ari_pairs(a: &[usize], b: &[usize]) -> f64 {
        // pair counting: n11 same/same, n10, n01, n00
        let (mut n11, mut n10, mut n01, mut n00) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                match (a[i] == a[j], b[i] == b[j]) {
                    (true, true) => n11 += 1.0,
                    (true, false) => n10 += 1.0,
                    (false, true) => n01 += 1.0,
                    (false, false) => n00 += 1.0,
                }
            }
        }
        let num = 2.0 * (n00 * n11 - n01 * n10);
        let den = (n00 + n01) * (n01 + n11) + (n00 + n10) * (n10 + n11);
        if den == 0.0 { 1.0 } else { num / den }
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0, 0, 1, 1], &[0.1, 0.2, 0.3, 0.4]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0, 1, 0, 1], &[0.5; 4]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[1, 0, 1, 0], &[0.9, 0.8, 0.7, 0.1]).unwrap(), 0.75);
        assert_eq!(auc_pairs(&[1, 0, 1, 0], &[0.9, 0.8, 0.7, 0.1]), 0.75);
        assert!(roc_auc(&[1, 1], &[0.1, 0.2]).is_err());
        assert!(roc_auc(&[1, 0], &[0.1]).is_err());
    }

    #[test]
    fn auc_matches_pairs_and_complements() {
        let mut rng = Rng::new(4);
        for _ in 0..50 {
            let n = rng.int_inclusive(2, 40);
            let mut labels: Vec<u8> = (0..n).map(|_| rng.bernoulli(0.5) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            let scores: Vec<f64> = (0..n).map(|_| (rng.normal() * 3.0).round() / 2.0).collect();
            let a = roc_auc(&labels, &scores).unwrap();
            assert!((a - auc_pairs(&labels, &scores)).abs() < 1e-12);
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            assert!((a + roc_auc(&labels, &neg).unwrap() - 1.0).abs() < 1e-12);
            let mono: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            assert!((a - roc_auc(&labels, &mono).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn silhouette_hand_computed() {
        // clusters {0,1} at x=0,1 and {2,3} at x=4,6 on a line
        let pts = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![4.0], vec![6.0]]).unwrap();
        let labels = [0, 0, 1, 1];
        let s = [
            (5.0 - 1.0) / 5.0,      // a=1, b=(4+6)/2
            (4.0 - 1.0) / 4.0,      // a=1, b=(3+5)/2
            (3.5 - 2.0) / 3.5,      // a=2, b=(4+3)/2
            (5.5 - 2.0) / 5.5,      // a=2, b=(6+5)/2
        ];
        let expect = s.iter().sum::<f64>() / 4.0;
        assert!((silhouette(&pts, &labels).unwrap() - expect).abs() < 1e-12);
        assert!(silhouette(&pts, &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn davies_bouldin_hand_computed() {
        let pts = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![4.0], vec![6.0]]).unwrap();
        // centroids 0.5 and 5; scatters 0.5 and 1; distance 4.5
        let expect = (0.5 + 1.0) / 4.5;
        assert!((davies_bouldin(&pts, &[0, 0, 1, 1]).unwrap() - expect).abs() < 1e-12);
        let coincident = Matrix::from_rows(&[vec![0.0], vec![2.0], vec![1.0], vec![1.0]]).unwrap();
        assert!(matches!(davies_bouldin(&coincident, &[0, 0, 1, 1]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn davies_bouldin_limit_and_scale() {
        let mut pts = Matrix::from_rows(&[vec![0.0, 0.1], vec![0.1, 0.0], vec![5.0, 5.1], vec![5.1, 5.0]]).unwrap();
        let l = [0, 0, 1, 1];
        let base = davies_bouldin(&pts, &l).unwrap();
        let mut scaled = pts.clone();
        scaled.scale(3.7);
        assert!((davies_bouldin(&scaled, &l).unwrap() - base).abs() < 1e-10);
        // shrink each blob toward its centroid
        for r in 0..4 {
            let c = if r < 2 { [0.05, 0.05] } else { [5.05, 5.05] };
            for j in 0..2 {
                let v = pts.get(r, j);
                pts.set(r, j, c[j] + (v - c[j]) * 1e-9);
            }
        }
        assert!(davies_bouldin(&pts, &l).unwrap() < 1e-8);
    }

    #[test]
    fn ari_examples() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 2, 2]).unwrap(), 1.0);
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert!((v + 0.5).abs() < 1e-12);
        assert!((ari_pairs(&[0, 0, 1, 1], &[0, 1, 0, 1]) + 0.5).abs() < 1e-12);
        assert!(adjusted_rand_index(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn ari_matches_pair_counting() {
        let mut rng = Rng::new(77);
        for _ in 0..50 {
            let n = rng.int_inclusive(2, 40);
            let ka = rng.int_inclusive(1, 4);
            let kb = rng.int_inclusive(1, 4);
            let a: Vec<usize> = (0..n).map(|_| rng.below(ka)).collect();
            let b: Vec<usize> = (0..n).map(|_| rng.below(kb)).collect();
            let x = adjusted_rand_index(&a, &b).unwrap();
            let y = ari_pairs(&a, &b);
            if ka > 1 || kb > 1 {
                assert!((x - y).abs() < 1e-10, "{x} vs {y}");
            }
            assert!((x - adjusted_rand_index(&b, &a).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn silhouette_and_dbi_rigid_motion_invariant() {
        let mut rng = Rng::new(5);
        let n = 30;
        let pts = Matrix::from_vec(n, 2, (0..2 * n).map(|_| rng.normal()).collect()).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let mut moved = Matrix::zeros(n, 2);
        for i in 0..n {
            let (x, y) = (pts.get(i, 0), pts.get(i, 1));
            moved.set(i, 0, c * x - s * y + 10.0);
            moved.set(i, 1, s * x + c * y - 4.0);
        }
        assert!((silhouette(&pts, &labels).unwrap() - silhouette(&moved, &labels).unwrap()).abs() < 1e-10);
        assert!((davies_bouldin(&pts, &labels).unwrap() - davies_bouldin(&moved, &labels).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn silhouette_separated_and_null() {
        let mut rng = Rng::new(6);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let c = if i < 30 { -10.0 } else { 10.0 };
            rows.push(vec![c + rng.normal() * 0.5, rng.normal() * 0.5]);
            labels.push(usize::from(i >= 30));
        }
        let pts = Matrix::from_rows(&rows).unwrap();
        assert!(silhouette(&pts, &labels).unwrap() >= 0.9);

        for seed in 0..20 {
            let mut rng = Rng::new(100 + seed);
            let n = 200;
            let pts = Matrix::from_vec(n, 2, (0..2 * n).map(|_| rng.normal()).collect()).unwrap();
            let labels: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
            assert!(silhouette(&pts, &labels).unwrap().abs() <= 0.1);
        }
    }

    #[test]
    fn report_round_trip_and_validation() {
        let r = EvalReport {
            method: "full".into(),
            split: "discovery".into(),
            n: 10,
            k: 2,
            mse: Some(0.25),
            auc: None,
            silhouette: 0.5,
            dbi: 0.7,
            ari_truth: Some(1.0),
            seed: 3,
            config_hash: "abc".into(),
        };
        assert_eq!(EvalReport::parse_csv_row(&r.csv_row()).unwrap(), r);
        let bad = EvalReport { silhouette: 1.5, ..r };
        assert!(bad.validate().is_err());
    }
}
