//! Classical comparison pipelines: PCA followed by a Gaussian mixture,
//! k-means on flattened windows, and time-series k-means.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::clustering::{gmm_fit, kmeans_pp, GmmFitConfig};
use crate::error::{Error, Result};
use crate::math::{squared_distance, Matrix};
use crate::metrics::{adjusted_rand_index, davies_bouldin, roc_auc, silhouette, EvalReport};
use crate::rng::{derive_seed, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k × D`, one unit-length component per row.
    pub components: Matrix,
    /// Covariance eigenvalues of the retained components.
    pub explained_variance: Vec<f64>,
    /// Sum of all covariance eigenvalues.
    pub total_variance: f64,
}

impl Pca {
    /// Centered projection onto the retained components (`N × k`).
    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(Error::Shape(format!(
                "PCA was fitted on {} columns, got {}",
                self.mean.len(),
                x.cols()
            )));
        }
        let k = self.components.rows();
        let mut out = Matrix::zeros(x.rows(), k);
        let mut centered = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            for (c, (v, m)) in centered.iter_mut().zip(x.row(i).iter().zip(&self.mean)) {
                *c = v - m;
            }
            out.row_mut(i).copy_from_slice(&self.components.matvec(&centered));
        }
        Ok(out)
    }
}

/// Fit a `k`-component PCA via the eigendecomposition of the sample
/// covariance. Each component's largest-magnitude loading is made positive.
pub fn pca_fit(x: &Matrix, k: usize) -> Result<Pca> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::InvalidArgument("PCA needs at least 2 rows".into()));
    }
    if k == 0 || k > n.min(d) {
        return Err(Error::InvalidArgument(format!(
            "cannot keep {k} components from a {n} x {d} matrix"
        )));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("PCA input".into()));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64)
        .collect();
    let centered = DMatrix::from_fn(n, d, |i, j| x.get(i, j) - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total_variance: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut components = Matrix::zeros(k, d);
    let mut explained_variance = Vec::with_capacity(k);
    for (r, &c) in order.iter().take(k).enumerate() {
        let col = eig.eigenvectors.column(c);
        let lead = (0..d)
            .max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs()).then(b.cmp(&a)))
            .unwrap_or(0);
        let sign = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components.set(r, j, sign * col[j]);
        }
        explained_variance.push(eig.eigenvalues[c].max(0.0));
    }
    Ok(Pca {
        mean,
        components,
        explained_variance,
        total_variance,
    })
}

/// Scores of `x` on its top `k` principal components.
pub fn pca_project(x: &Matrix, k: usize) -> Result<Matrix> {
    pca_fit(x, k)?.transform(x)
}

/// Smallest number of components explaining at least `target` of the
/// variance, capped at `cap`.
pub fn pca_components_for(x: &Matrix, target: f64, cap: usize) -> Result<usize> {
    let max_k = x.rows().min(x.cols());
    let full = pca_fit(x, max_k)?;
    let mut acc = 0.0;
    for (i, v) in full.explained_variance.iter().enumerate() {
        acc += v;
        if acc >= target * full.total_variance || i + 1 >= cap {
            return Ok(i + 1);
        }
    }
    Ok(max_k.min(cap).max(1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after every Lloyd iteration of the retained restart.
    pub inertia_history: Vec<f64>,
}

const KMEANS_MAX_ITER: usize = 300;

fn assign(x: &Matrix, centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    (0..x.rows())
        .map(|i| {
            let mut best = (0, f64::INFINITY);
            for (c, ctr) in centroids.iter().enumerate() {
                let d = squared_distance(x.row(i), ctr);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .unzip()
}

fn lloyd(x: &Matrix, k: usize, rng: &mut Rng) -> KMeansResult {
    let (n, d) = x.shape();
    let mut centroids = kmeans_pp(x, k, rng);
    let (mut labels, mut dist) = assign(x, &centroids);
    let mut history = Vec::new();
    for _ in 0..KMEANS_MAX_ITER {
        // update step, with empty clusters taking the point farthest from
        // its current centroid
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i]].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)));
                if let Some(i) = far {
                    let old = labels[i];
                    counts[old] -= 1;
                    for (s, v) in sums[old].iter_mut().zip(x.row(i)) {
                        *s -= v;
                    }
                    labels[i] = c;
                    dist[i] = 0.0;
                    counts[c] = 1;
                    sums[c] = x.row(i).to_vec();
                }
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let (new_labels, new_dist) = assign(x, &centroids);
        history.push(new_dist.iter().sum());
        let changed = new_labels != labels;
        labels = new_labels;
        dist = new_dist;
        if !changed {
            break;
        }
    }
    KMeansResult {
        inertia: dist.iter().sum(),
        labels,
        centroids,
        inertia_history: history,
    }
}

/// Lloyd's algorithm from k-means++ seeds; the restart with the lowest
/// inertia is kept.
pub fn kmeans(x: &Matrix, k: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    let n = x.rows();
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!("k-means with K = {k} needs at least K points, got {n}")));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("k-means input".into()));
    }
    let mut best: Option<KMeansResult> = None;
    for r in 0..restarts.max(1) {
        let mut rng = Rng::new(derive_seed(seed, r as u64));
        let res = lloyd(x, k, &mut rng);
        if best.as_ref().is_none_or(|b| res.inertia < b.inertia) {
            best = Some(res);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Row `i` is window `i` flattened day by day.
pub fn flatten_windows(windows: &[Matrix]) -> Result<Matrix> {
    let first = windows.first().ok_or(Error::Empty("windows"))?;
    let shape = first.shape();
    let mut data = Vec::with_capacity(windows.len() * first.len());
    for (i, w) in windows.iter().enumerate() {
        if w.shape() != shape {
            return Err(Error::Shape(format!(
                "window {i} is {:?}, expected {shape:?}",
                w.shape()
            )));
        }
        data.extend_from_slice(w.as_slice());
    }
    Matrix::from_vec(windows.len(), first.len(), data)
}

/// k-means on whole sequences under the Euclidean distance between `T × d`
/// windows, which coincides with k-means on the flattened windows.
pub fn ts_kmeans(windows: &[Matrix], k: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    kmeans(&flatten_windows(windows)?, k, seed, restarts)
}

/// Per-participant score for clustering methods without a predictor: the
/// membership (soft or one-hot) in whichever cluster has the highest outcome
/// prevalence among `train_idx`.
pub fn prevalence_scores(membership: &Matrix, labels: &[u8], train_idx: &[usize]) -> Result<Vec<f64>> {
    if membership.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} membership rows but {} labels",
            membership.rows(),
            labels.len()
        )));
    }
    if train_idx.is_empty() {
        return Err(Error::Empty("prevalence reference set"));
    }
    let k = membership.cols();
    let mut mass = vec![0.0; k];
    let mut pos = vec![0.0; k];
    for &i in train_idx {
        for c in 0..k {
            let r = membership.get(i, c);
            mass[c] += r;
            pos[c] += r * labels[i] as f64;
        }
    }
    let prevalence: Vec<f64> = (0..k)
        .map(|c| if mass[c] > 0.0 { pos[c] / mass[c] } else { f64::NEG_INFINITY })
        .collect();
    let best = (0..k)
        .max_by(|&a, &b| prevalence[a].total_cmp(&prevalence[b]).then(b.cmp(&a)))
        .ok_or(Error::Empty("clusters"))?;
    Ok((0..membership.rows()).map(|i| membership.get(i, best)).collect())
}

/// AUC on `eval_idx` of [`prevalence_scores`] fitted on `train_idx`.
pub fn baseline_auc(membership: &Matrix, labels: &[u8], train_idx: &[usize], eval_idx: &[usize]) -> Result<f64> {
    let scores = prevalence_scores(membership, labels, train_idx)?;
    let y: Vec<u8> = eval_idx.iter().map(|&i| labels[i]).collect();
    let s: Vec<f64> = eval_idx.iter().map(|&i| scores[i]).collect();
    roc_auc(&y, &s)
}

pub fn one_hot(labels: &[usize], k: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), k);
    for (i, &l) in labels.iter().enumerate() {
        m.set(i, l, 1.0);
    }
    m
}

#[derive(Clone, Debug)]
pub struct BaselineResult {
    pub method: String,
    pub labels: Vec<usize>,
    pub scores: Option<Vec<f64>>,
    pub report: EvalReport,
}

/// Inputs shared by all baselines.
pub struct BaselineInput<'a> {
    /// Standardized windows.
    pub windows: &'a [Matrix],
    pub labels: &'a [u8],
    pub train_idx: &'a [usize],
    pub val_idx: &'a [usize],
    pub truth: Option<&'a [usize]>,
    pub k: usize,
    pub seed: u64,
    pub config_hash: String,
}

fn report(
    method: &str,
    input: &BaselineInput,
    space: &Matrix,
    labels: &[usize],
    membership: &Matrix,
) -> Result<BaselineResult> {
    let auc = baseline_auc(membership, input.labels, input.train_idx, input.val_idx)?;
    let scores = prevalence_scores(membership, input.labels, input.train_idx)?;
    let ari_truth = match input.truth {
        Some(t) => Some(adjusted_rand_index(t, labels)?),
        None => None,
    };
    let report = EvalReport {
        method: method.into(),
        split: "discovery".into(),
        n: labels.len(),
        k: input.k,
        mse: None,
        auc: Some(auc),
        silhouette: silhouette(space, labels)?,
        dbi: davies_bouldin(space, labels)?,
        ari_truth,
        seed: input.seed,
        config_hash: input.config_hash.clone(),
    };
    report.validate()?;
    Ok(BaselineResult {
        method: method.into(),
        labels: labels.to_vec(),
        scores: Some(scores),
        report,
    })
}

/// Run PCA + GMM, k-means and time-series k-means on the same windows.
pub fn run_baselines(input: &BaselineInput) -> Result<Vec<BaselineResult>> {
    let flat = flatten_windows(input.windows)?;
    let n_comp = pca_components_for(&flat, 0.9, 10)?;
    let scores = pca_project(&flat, n_comp)?;
    let gmm = gmm_fit(
        &scores,
        input.k,
        &GmmFitConfig {
            seed: derive_seed(input.seed, 11),
            ..GmmFitConfig::default()
        },
    )?;
    let resp = gmm.soft_assign(&scores)?;
    let pca_labels = resp.hard_labels();
    let mut out = vec![report("pca_gmm", input, &scores, &pca_labels, resp.matrix())?];

    let km = kmeans(&flat, input.k, derive_seed(input.seed, 12), 10)?;
    out.push(report("kmeans", input, &flat, &km.labels, &one_hot(&km.labels, input.k))?);

    let ts = ts_kmeans(input.windows, input.k, derive_seed(input.seed, 13), 10)?;
    out.push(report("ts_kmeans", input, &flat, &ts.labels, &one_hot(&ts.labels, input.k))?);
    Ok(out)
}
