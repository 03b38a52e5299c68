//! Gaussian mixture models fitted by EM, BIC-based choice of K, and soft
//! assignment of embeddings (including frozen transfer to external cohorts).

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::{log_sum_exp, squared_distance, Matrix};
use crate::rng::{derive_seed, Rng};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    Full,
    Diagonal,
}

impl CovarianceKind {
    fn as_str(self) -> &'static str {
        match self {
            CovarianceKind::Full => "full",
            CovarianceKind::Diagonal => "diagonal",
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmFitConfig {
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    pub ridge: f64,
    /// Independent k-means++ initializations; the best final likelihood wins.
    pub n_init: usize,
    /// Extra attempts with fresh seeds when a component collapses.
    pub max_restarts: usize,
    pub covariance: CovarianceKind,
}

impl Default for GmmFitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_iter: 500,
            tol: 1e-6,
            ridge: 1e-6,
            n_init: 3,
            max_restarts: 5,
            covariance: CovarianceKind::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Matrix>,
    /// Log-likelihood of the fitting data at the final parameters.
    pub log_likelihood: f64,
    pub iterations: usize,
    /// Log-likelihood after every EM iteration of the retained run.
    pub ll_trace: Vec<f64>,
    /// EM ended because an iteration lowered the likelihood.
    pub stopped_on_decrease: bool,
    /// Seed of the run that was retained.
    pub seed: u64,
    pub fit_config: GmmFitConfig,
}

/// `N × K` posterior component probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Responsibilities(pub Matrix);

impl Responsibilities {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    /// Argmax per row, ties broken toward the lower component index.
    pub fn hard_labels(&self) -> Vec<usize> {
        (0..self.0.rows())
            .map(|i| {
                let row = self.0.row(i);
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
fn cholesky(a: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l.set(i, i, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Some(l)
}

/// Precomputed per-component density terms.
struct Component {
    log_weight: f64,
    mean: Vec<f64>,
    chol: Matrix,
    log_norm: f64,
}

impl Component {
    fn new(weight: f64, mean: &[f64], cov: &Matrix) -> Option<Self> {
        let chol = cholesky(cov)?;
        let p = mean.len();
        let log_det: f64 = (0..p).map(|i| chol.get(i, i).ln()).sum::<f64>() * 2.0;
        Some(Self {
            log_weight: weight.ln(),
            mean: mean.to_vec(),
            chol,
            log_norm: -0.5 * (p as f64 * LN_2PI + log_det),
        })
    }

    /// `log π_k + log N(x | μ_k, Σ_k)`
    fn log_joint(&self, x: &[f64], work: &mut [f64]) -> f64 {
        let p = x.len();
        // solve L y = x − μ
        for i in 0..p {
            let mut s = x[i] - self.mean[i];
            for k in 0..i {
                s -= self.chol.get(i, k) * work[k];
            }
            work[i] = s / self.chol.get(i, i);
        }
        let maha: f64 = work[..p].iter().map(|v| v * v).sum();
        self.log_weight + self.log_norm - 0.5 * maha
    }
}

fn components(weights: &[f64], means: &[Vec<f64>], covs: &[Matrix]) -> Result<Vec<Component>> {
    weights
        .iter()
        .zip(means)
        .zip(covs)
        .enumerate()
        .map(|(k, ((&w, m), c))| {
            Component::new(w, m, c).ok_or_else(|| {
                Error::Numerical(format!("component {k} covariance is not positive definite"))
            })
        })
        .collect()
}

/// E-step: responsibilities and total log-likelihood.
fn e_step(points: &Matrix, comps: &[Component]) -> (Matrix, f64) {
    let n = points.rows();
    let k = comps.len();
    let mut resp = Matrix::zeros(n, k);
    let mut work = vec![0.0; points.cols()];
    let mut lj = vec![0.0; k];
    let mut total = 0.0;
    for i in 0..n {
        let x = points.row(i);
        for (c, comp) in comps.iter().enumerate() {
            lj[c] = comp.log_joint(x, &mut work);
        }
        let lse = log_sum_exp(&lj);
        total += lse;
        for (r, l) in resp.row_mut(i).iter_mut().zip(&lj) {
            *r = (l - lse).exp();
        }
    }
    (resp, total)
}

type Params = (Vec<f64>, Vec<Vec<f64>>, Vec<Matrix>);

/// M-step: weighted maximum-likelihood estimates plus ridge on the diagonal.
fn m_step(points: &Matrix, resp: &Matrix, cfg: &GmmFitConfig) -> Result<Params> {
    let (n, p) = points.shape();
    let k = resp.cols();
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for c in 0..k {
        let nk: f64 = (0..n).map(|i| resp.get(i, c)).sum();
        if !(nk > 1e-10) {
            return Err(Error::Numerical(format!("component {c} lost all mass")));
        }
        let mut mean = vec![0.0; p];
        for i in 0..n {
            let r = resp.get(i, c);
            for (m, x) in mean.iter_mut().zip(points.row(i)) {
                *m += r * x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nk);
        let mut cov = Matrix::zeros(p, p);
        let mut diff = vec![0.0; p];
        for i in 0..n {
            let r = resp.get(i, c);
            for (d, (x, m)) in diff.iter_mut().zip(points.row(i).iter().zip(&mean)) {
                *d = x - m;
            }
            match cfg.covariance {
                CovarianceKind::Full => {
                    for a in 0..p {
                        let ra = r * diff[a];
                        for b in 0..=a {
                            let v = cov.get(a, b) + ra * diff[b];
                            cov.set(a, b, v);
                        }
                    }
                }
                CovarianceKind::Diagonal => {
                    for a in 0..p {
                        let v = cov.get(a, a) + r * diff[a] * diff[a];
                        cov.set(a, a, v);
                    }
                }
            }
        }
        for a in 0..p {
            for b in 0..=a {
                let v = cov.get(a, b) / nk;
                cov.set(a, b, v);
                cov.set(b, a, v);
            }
            let v = cov.get(a, a) + cfg.ridge;
            cov.set(a, a, v);
        }
        weights.push(nk / n as f64);
        means.push(mean);
        covs.push(cov);
    }
    Ok((weights, means, covs))
}

/// k-means++ seeding: first center uniform, the rest proportional to
/// squared distance from the nearest chosen center.
pub(crate) fn kmeans_pp(points: &Matrix, k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = points.rows();
    let mut centers = vec![points.row(rng.below(n)).to_vec()];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), &centers[0]))
        .collect();
    while centers.len() < k {
        let idx = rng.weighted_index(&d2);
        let c = points.row(idx).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(points.row(i), &c));
        }
        centers.push(c);
    }
    centers
}

fn sample_covariance(points: &Matrix, cfg: &GmmFitConfig) -> Matrix {
    let (n, p) = points.shape();
    let resp = Matrix::from_vec(n, 1, vec![1.0; n]).expect("n x 1");
    let (_, _, mut covs) = m_step(points, &resp, cfg).expect("single component has full mass");
    covs.pop().unwrap_or_else(|| Matrix::zeros(p, p))
}

fn run_em(points: &Matrix, k: usize, seed: u64, cfg: &GmmFitConfig) -> Result<GmmModel> {
    let mut rng = Rng::new(seed);
    let global = sample_covariance(points, cfg);
    let mut means = kmeans_pp(points, k, &mut rng);
    let mut weights = vec![1.0 / k as f64; k];
    let mut covs = vec![global; k];

    // initial hard partition around the seeds gives the first M-step
    let n = points.rows();
    let mut resp = Matrix::zeros(n, k);
    for i in 0..n {
        let best = (0..k)
            .min_by(|&a, &b| {
                squared_distance(points.row(i), &means[a])
                    .total_cmp(&squared_distance(points.row(i), &means[b]))
            })
            .unwrap_or(0);
        resp.set(i, best, 1.0);
    }
    if let Ok((w, m, c)) = m_step(points, &resp, cfg) {
        weights = w;
        means = m;
        covs = c;
    }

    let mut comps = components(&weights, &means, &covs)?;
    let (mut resp, mut ll) = e_step(points, &comps);
    let mut trace = vec![ll];
    let mut iterations = 0;
    let mut stopped_on_decrease = false;
    while iterations < cfg.max_iter {
        let (w, m, c) = m_step(points, &resp, cfg)?;
        comps = components(&w, &m, &c)?;
        let (r, new_ll) = e_step(points, &comps);
        iterations += 1;
        if !new_ll.is_finite() {
            return Err(Error::Numerical(format!("log-likelihood became {new_ll}")));
        }
        // The ridge makes the M-step inexact, so on nearly singular data the
        // likelihood can dip; keep the last iterate that did not.
        if new_ll < ll - 1e-8 - 1e-12 * ll.abs() {
            log::debug!("EM log-likelihood decreased at iteration {iterations} ({ll} -> {new_ll}); stopping");
            stopped_on_decrease = true;
            break;
        }
        weights = w;
        means = m;
        covs = c;
        resp = r;
        trace.push(new_ll);
        let gain = new_ll - ll;
        ll = new_ll;
        if gain < cfg.tol {
            break;
        }
    }
    let mut model = GmmModel {
        weights,
        means,
        covariances: covs,
        log_likelihood: ll,
        iterations,
        ll_trace: trace,
        stopped_on_decrease,
        seed,
        fit_config: cfg.clone(),
    };
    model.canonicalize();
    Ok(model)
}

/// Fit a K-component mixture by EM.
pub fn gmm_fit(points: &Matrix, k: usize, cfg: &GmmFitConfig) -> Result<GmmModel> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!("{n} points cannot support K = {k}")));
    }
    if !points.all_finite() {
        return Err(Error::NonFinite("mixture input points".into()));
    }
    let mut best: Option<GmmModel> = None;
    let mut failures = 0usize;
    let mut attempt = 0u64;
    let mut successes = 0usize;
    let mut last_err = None;
    while successes < cfg.n_init.max(1) {
        let seed = if attempt == 0 { cfg.seed } else { derive_seed(cfg.seed, attempt) };
        attempt += 1;
        match run_em(points, k, seed, cfg) {
            Ok(m) => {
                successes += 1;
                if best.as_ref().is_none_or(|b| m.log_likelihood > b.log_likelihood) {
                    best = Some(m);
                }
            }
            Err(e) => {
                failures += 1;
                last_err = Some(e);
                if failures > cfg.max_restarts {
                    break;
                }
            }
        }
    }
    best.ok_or_else(|| {
        Error::Numerical(format!(
            "mixture fit with K = {k} failed after {failures} attempts: {}",
            last_err.map(|e| e.to_string()).unwrap_or_default()
        ))
    })
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// Free parameter count used by BIC.
    pub fn n_params(&self) -> usize {
        n_params(self.k(), self.dim(), self.fit_config.covariance)
    }

    /// Components sorted by first mean coordinate, then weight.
    fn canonicalize(&mut self) {
        let mut order: Vec<usize> = (0..self.k()).collect();
        order.sort_by(|&a, &b| {
            self.means[a][0]
                .total_cmp(&self.means[b][0])
                .then(self.weights[a].total_cmp(&self.weights[b]))
        });
        self.weights = order.iter().map(|&i| self.weights[i]).collect();
        self.means = order.iter().map(|&i| self.means[i].clone()).collect();
        self.covariances = order.iter().map(|&i| self.covariances[i].clone()).collect();
    }

    fn check_dim(&self, points: &Matrix) -> Result<()> {
        if points.rows() > 0 && points.cols() != self.dim() {
            return Err(Error::Shape(format!(
                "points have dimension {}, mixture has {}",
                points.cols(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn log_likelihood_of(&self, points: &Matrix) -> Result<f64> {
        self.check_dim(points)?;
        let comps = components(&self.weights, &self.means, &self.covariances)?;
        Ok(e_step(points, &comps).1)
    }

    /// Posterior component probabilities, normalized in log space.
    pub fn soft_assign(&self, points: &Matrix) -> Result<Responsibilities> {
        self.check_dim(points)?;
        let comps = components(&self.weights, &self.means, &self.covariances)?;
        Ok(Responsibilities(e_step(points, &comps).0))
    }
}

pub fn n_params(k: usize, p: usize, kind: CovarianceKind) -> usize {
    let cov = match kind {
        CovarianceKind::Full => p * (p + 1) / 2,
        CovarianceKind::Diagonal => p,
    };
    (k - 1) + k * p + k * cov
}

/// `−2 log L + m ln N`.
pub fn bic(model: &GmmModel, points: &Matrix) -> Result<f64> {
    let ll = model.log_likelihood_of(points)?;
    Ok(-2.0 * ll + model.n_params() as f64 * (points.rows() as f64).ln())
}

pub fn soft_assign(model: &GmmModel, points: &Matrix) -> Result<Responsibilities> {
    model.soft_assign(points)
}

/// Assign an external cohort with a mixture fitted elsewhere; no refitting.
pub fn transfer_assign(model: &GmmModel, external: &Matrix) -> Result<Responsibilities> {
    if external.rows() == 0 {
        return Ok(Responsibilities(Matrix::zeros(0, model.k())));
    }
    if external.cols() != model.dim() {
        return Err(Error::Shape(format!(
            "external embeddings have dimension {}, mixture was fitted on {}",
            external.cols(),
            model.dim()
        )));
    }
    model.soft_assign(external)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BicEntry {
    pub k: usize,
    pub bic: f64,
    pub log_likelihood: f64,
    pub n_params: usize,
}

#[derive(Clone, Debug)]
pub struct KSelection {
    pub best_k: usize,
    pub table: Vec<BicEntry>,
    pub best_model: GmmModel,
}

impl KSelection {
    pub fn table_csv(&self) -> String {
        let mut s = String::from("k,bic,log_likelihood,n_params\n");
        for e in &self.table {
            let _ = writeln!(s, "{},{},{},{}", e.k, e.bic, e.log_likelihood, e.n_params);
        }
        s
    }
}

/// Fit each K in `k_range` (seed derived per K) and return the BIC argmin,
/// ties toward the smaller K.
pub fn select_k(points: &Matrix, k_range: &[usize], cfg: &GmmFitConfig) -> Result<KSelection> {
    if k_range.is_empty() {
        return Err(Error::Empty("k_range"));
    }
    let max_k = *k_range.iter().max().expect("nonempty");
    if points.rows() < max_k {
        return Err(Error::InvalidArgument(format!(
            "{} points cannot support K up to {max_k}",
            points.rows()
        )));
    }
    let mut ks = k_range.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let fits: Vec<Result<(GmmModel, BicEntry)>> = ks
        .par_iter()
        .map(|&k| {
            let fit_cfg = GmmFitConfig {
                seed: derive_seed(cfg.seed, k as u64),
                ..cfg.clone()
            };
            let model = gmm_fit(points, k, &fit_cfg)?;
            let b = bic(&model, points)?;
            let entry = BicEntry {
                k,
                bic: b,
                log_likelihood: model.log_likelihood,
                n_params: model.n_params(),
            };
            Ok((model, entry))
        })
        .collect();
    let fits: Vec<(GmmModel, BicEntry)> = fits.into_iter().collect::<Result<_>>()?;
    let mut best = 0;
    for (i, (_, e)) in fits.iter().enumerate() {
        if e.bic < fits[best].1.bic {
            best = i;
        }
    }
    let best_k = fits[best].1.k;
    let table = fits.iter().map(|(_, e)| e.clone()).collect();
    let best_model = fits.into_iter().nth(best).expect("index in range").0;
    Ok(KSelection {
        best_k,
        table,
        best_model,
    })
}

const MAGIC: &str = "gruae-gmm";
const VERSION: u32 = 1;

pub fn write_gmm<W: Write>(mut w: W, model: &GmmModel) -> Result<()> {
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    let c = &model.fit_config;
    let mut s = String::new();
    let _ = writeln!(s, "{MAGIC} {VERSION}");
    let _ = writeln!(s, "k {}", model.k());
    let _ = writeln!(s, "dim {}", model.dim());
    let _ = writeln!(s, "covariance {}", c.covariance.as_str());
    let _ = writeln!(s, "ridge {}", c.ridge);
    let _ = writeln!(s, "tol {}", c.tol);
    let _ = writeln!(s, "max_iter {}", c.max_iter);
    let _ = writeln!(s, "n_init {}", c.n_init);
    let _ = writeln!(s, "max_restarts {}", c.max_restarts);
    let _ = writeln!(s, "config_seed {}", c.seed);
    let _ = writeln!(s, "seed {}", model.seed);
    let _ = writeln!(s, "iterations {}", model.iterations);
    let _ = writeln!(s, "log_likelihood {}", model.log_likelihood);
    let _ = writeln!(s, "weights {}", join(&model.weights));
    for (k, (m, cov)) in model.means.iter().zip(&model.covariances).enumerate() {
        let _ = writeln!(s, "mean {k} {}", join(m));
        for r in 0..cov.rows() {
            let _ = writeln!(s, "cov {k} {}", join(cov.row(r)));
        }
    }
    s.push_str("end\n");
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_gmm<R: Read>(r: R) -> Result<GmmModel> {
    let mut k = None;
    let mut dim = None;
    let mut cfg = GmmFitConfig::default();
    let mut seed = 0;
    let mut iterations = 0;
    let mut ll = f64::NAN;
    let mut weights = Vec::new();
    let mut means: Vec<Vec<f64>> = Vec::new();
    let mut cov_rows: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut ended = false;
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let ln = i + 1;
        let err = |msg: String| Error::Parse { line: ln, msg };
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or("");
        let rest: Vec<&str> = parts.collect();
        let first = || rest.first().copied().ok_or_else(|| err(format!("missing value for {key}")));
        let floats = |v: &[&str]| -> Result<Vec<f64>> {
            v.iter()
                .map(|s| s.parse::<f64>().map_err(|_| err(format!("bad number '{s}'"))))
                .collect()
        };
        let uint = |s: &str| s.parse::<u64>().map_err(|_| err(format!("bad integer '{s}'")));
        if ln == 1 {
            if key != MAGIC || rest.first().and_then(|v| v.parse::<u32>().ok()) != Some(VERSION) {
                return Err(err(format!("expected '{MAGIC} {VERSION}'")));
            }
            continue;
        }
        match key {
            "k" => k = Some(uint(first()?)? as usize),
            "dim" => dim = Some(uint(first()?)? as usize),
            "covariance" => {
                cfg.covariance = match first()? {
                    "full" => CovarianceKind::Full,
                    "diagonal" => CovarianceKind::Diagonal,
                    other => return Err(err(format!("unknown covariance kind {other}"))),
                }
            }
            "ridge" => cfg.ridge = floats(&rest)?[0],
            "tol" => cfg.tol = floats(&rest)?[0],
            "max_iter" => cfg.max_iter = uint(first()?)? as usize,
            "n_init" => cfg.n_init = uint(first()?)? as usize,
            "max_restarts" => cfg.max_restarts = uint(first()?)? as usize,
            "config_seed" => cfg.seed = uint(first()?)?,
            "seed" => seed = uint(first()?)?,
            "iterations" => iterations = uint(first()?)? as usize,
            "log_likelihood" => ll = floats(&rest)?[0],
            "weights" => weights = floats(&rest)?,
            "mean" | "cov" => {
                let idx = uint(first()?)? as usize;
                let vals = floats(&rest[1..])?;
                if key == "mean" {
                    if idx != means.len() {
                        return Err(err(format!("mean {idx} out of order")));
                    }
                    means.push(vals);
                    cov_rows.push(Vec::new());
                } else {
                    let rows = cov_rows
                        .get_mut(idx)
                        .ok_or_else(|| err(format!("cov for unknown component {idx}")))?;
                    rows.push(vals);
                }
            }
            "end" => {
                ended = true;
                break;
            }
            other => return Err(err(format!("unknown key {other}"))),
        }
    }
    if !ended {
        return Err(Error::Format("mixture file ends without 'end'".into()));
    }
    let k = k.ok_or_else(|| Error::Format("mixture file lacks k".into()))?;
    let dim = dim.ok_or_else(|| Error::Format("mixture file lacks dim".into()))?;
    if weights.len() != k || means.len() != k || means.iter().any(|m| m.len() != dim) {
        return Err(Error::Format("mixture file has inconsistent component counts".into()));
    }
    let covariances = cov_rows
        .iter()
        .map(|rows| {
            if rows.len() != dim {
                return Err(Error::Format("covariance has wrong row count".into()));
            }
            Matrix::from_rows(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-10 {
        return Err(Error::Format(format!("mixture weights sum to {total}")));
    }
    let model = GmmModel {
        weights,
        means,
        covariances,
        log_likelihood: ll,
        iterations,
        ll_trace: Vec::new(),
        stopped_on_decrease: false,
        seed,
        fit_config: cfg,
    };
    components(&model.weights, &model.means, &model.covariances)?;
    Ok(model)
}

pub fn save_gmm(path: &Path, model: &GmmModel) -> Result<()> {
    write_gmm(std::io::BufWriter::new(std::fs::File::create(path)?), model)
}

pub fn load_gmm(path: &Path) -> Result<GmmModel> {
    read_gmm(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn blobs(n_per: usize, centers: &[Vec<f64>], sd: f64, seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = Rng::new(seed);
        let p = centers[0].len();
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..n_per {
                rows.push((0..p).map(|j| center[j] + sd * rng.normal()).collect());
                truth.push(c);
            }
        }
        (Matrix::from_rows(&rows).unwrap(), truth)
    }

    #[test]
    fn single_component_is_closed_form() {
        let (pts, _) = blobs(50, &[vec![1.0, -2.0]], 1.5, 3);
        let cfg = GmmFitConfig::default();
        let m = gmm_fit(&pts, 1, &cfg).unwrap();
        assert_eq!(m.weights, vec![1.0]);
        let n = pts.rows() as f64;
        let mean: Vec<f64> = (0..2).map(|j| (0..pts.rows()).map(|i| pts.get(i, j)).sum::<f64>() / n).collect();
        for j in 0..2 {
            assert!((m.means[0][j] - mean[j]).abs() < 1e-12);
        }
        for a in 0..2 {
            for b in 0..2 {
                let s: f64 = (0..pts.rows())
                    .map(|i| (pts.get(i, a) - mean[a]) * (pts.get(i, b) - mean[b]))
                    .sum::<f64>()
                    / n;
                let ridge = if a == b { 1e-6 } else { 0.0 };
                assert!((m.covariances[0].get(a, b) - s - ridge).abs() < 1e-12);
            }
        }
        let r = m.soft_assign(&pts).unwrap();
        assert!(r.matrix().as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn recovers_separated_blobs() {
        let (pts, truth) = blobs(150, &[vec![-5.0, -5.0], vec![5.0, 5.0]], 1.0, 8);
        let m = gmm_fit(&pts, 2, &GmmFitConfig::default()).unwrap();
        assert!((m.means[0][0] + 5.0).abs() < 0.2 && (m.means[0][1] + 5.0).abs() < 0.2);
        assert!((m.means[1][0] - 5.0).abs() < 0.2 && (m.means[1][1] - 5.0).abs() < 0.2);
        let labels = m.soft_assign(&pts).unwrap().hard_labels();
        assert_eq!(labels, truth);
        for w in m.ll_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8);
        }
    }

    #[test]
    fn duplicated_data_gives_same_fit() {
        let (pts, _) = blobs(60, &[vec![-4.0], vec![4.0]], 1.0, 2);
        let mut rows: Vec<Vec<f64>> = (0..pts.rows()).map(|i| pts.row(i).to_vec()).collect();
        rows.extend(rows.clone());
        let dup = Matrix::from_rows(&rows).unwrap();
        let cfg = GmmFitConfig::default();
        let a = gmm_fit(&pts, 2, &cfg).unwrap();
        let b = gmm_fit(&dup, 2, &cfg).unwrap();
        for k in 0..2 {
            assert!((a.weights[k] - b.weights[k]).abs() < 1e-6);
            assert!((a.means[k][0] - b.means[k][0]).abs() < 1e-6);
            assert!((a.covariances[k].get(0, 0) - b.covariances[k].get(0, 0)).abs() < 1e-6);
        }
        // log-likelihood doubles, BIC penalty grows by m ln 2
        let ll_a = a.log_likelihood_of(&pts).unwrap();
        let ll_dup = a.log_likelihood_of(&dup).unwrap();
        assert!((ll_dup - 2.0 * ll_a).abs() < 1e-9 * ll_a.abs());
        let bic_a = bic(&a, &pts).unwrap();
        let bic_dup = bic(&a, &dup).unwrap();
        let m = a.n_params() as f64;
        let expect = 2.0 * bic_a - m * (pts.rows() as f64).ln() + m * 2.0f64.ln();
        assert!((bic_dup - expect).abs() < 1e-8 * bic_dup.abs());
    }

    #[test]
    fn bic_parameter_counts() {
        for k in 1..=4 {
            for p in 1..=3 {
                // weights (k-1), means k*p, symmetric covariances k*p(p+1)/2
                let mut by_hand = k - 1;
                by_hand += k * p;
                let mut cov = 0;
                for a in 0..p {
                    cov += a + 1;
                }
                by_hand += k * cov;
                assert_eq!(n_params(k, p, CovarianceKind::Full), by_hand);
            }
        }
        // K=1, p=1, N=4 points at 0,0,2,2: mean 1, var 1 (+ridge)
        let pts = Matrix::from_rows(&[vec![0.0], vec![0.0], vec![2.0], vec![2.0]]).unwrap();
        let m = gmm_fit(&pts, 1, &GmmFitConfig::default()).unwrap();
        assert_eq!(m.n_params(), 2);
        let var: f64 = 1.0 + 1e-6;
        let ll = -0.5 * 4.0 * ((2.0 * std::f64::consts::PI).ln() + var.ln()) - 0.5 * 4.0 / var;
        let expect = -2.0 * ll + 2.0 * 4f64.ln();
        assert!((bic(&m, &pts).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn select_k_cases() {
        let (one, _) = blobs(200, &[vec![0.0, 0.0]], 1.0, 11);
        let sel = select_k(&one, &(1..=5).collect::<Vec<_>>(), &GmmFitConfig::default()).unwrap();
        assert_eq!(sel.best_k, 1);
        let (two, _) = blobs(200, &[vec![-2.5, 0.0], vec![2.5, 0.0]], 1.0, 12);
        let sel = select_k(&two, &(1..=9).collect::<Vec<_>>(), &GmmFitConfig::default()).unwrap();
        assert_eq!(sel.best_k, 2);
        assert_eq!(sel.table.len(), 9);
        let sel = select_k(&two, &[3], &GmmFitConfig::default()).unwrap();
        assert_eq!(sel.best_k, 3);
        assert!(select_k(&two, &[], &GmmFitConfig::default()).is_err());
    }

    #[test]
    fn soft_assignment_cases() {
        let (pts, _) = blobs(100, &[vec![-10.0, 0.0], vec![10.0, 0.0]], 1.0, 4);
        let m = gmm_fit(&pts, 2, &GmmFitConfig::default()).unwrap();
        let at_mean = Matrix::from_rows(&[m.means[0].clone()]).unwrap();
        assert!(m.soft_assign(&at_mean).unwrap().matrix().get(0, 0) >= 0.999);

        let sym = GmmModel {
            weights: vec![0.5, 0.5],
            means: vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            covariances: vec![Matrix::from_rows(&[vec![1.0, 0.2], vec![0.2, 1.0]]).unwrap(); 2],
            log_likelihood: 0.0,
            iterations: 0,
            ll_trace: vec![],
            stopped_on_decrease: false,
            seed: 0,
            fit_config: GmmFitConfig::default(),
        };
        let mid = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let r = sym.soft_assign(&mid).unwrap();
        assert!((r.matrix().get(0, 0) - 0.5).abs() < 1e-10);
        assert_eq!(r.hard_labels(), vec![0]);
    }

    #[test]
    fn transfer_cases() {
        let (pts, _) = blobs(100, &[vec![-6.0, 0.0], vec![6.0, 0.0]], 1.0, 5);
        let m = gmm_fit(&pts, 2, &GmmFitConfig::default()).unwrap();
        assert_eq!(transfer_assign(&m, &pts).unwrap(), m.soft_assign(&pts).unwrap());
        let mut shifted = pts.clone();
        shifted.as_mut_slice().iter_mut().for_each(|v| *v += 0.1);
        let a = m.soft_assign(&pts).unwrap().hard_labels();
        let b = transfer_assign(&m, &shifted).unwrap().hard_labels();
        let same = a.iter().zip(&b).filter(|(x, y)| x == y).count();
        assert!(same as f64 >= 0.99 * a.len() as f64);
        let empty = transfer_assign(&m, &Matrix::zeros(0, 2)).unwrap();
        assert_eq!(empty.matrix().rows(), 0);
        assert!(transfer_assign(&m, &Matrix::zeros(3, 5)).is_err());
    }

    #[test]
    fn errors_and_round_trip() {
        let (pts, _) = blobs(5, &[vec![0.0, 0.0]], 1.0, 1);
        assert!(gmm_fit(&pts, 6, &GmmFitConfig::default()).is_err());
        assert!(gmm_fit(&pts, 0, &GmmFitConfig::default()).is_err());
        let (pts, _) = blobs(40, &[vec![-3.0, 1.0], vec![3.0, 0.0]], 1.0, 1);
        let m = gmm_fit(&pts, 2, &GmmFitConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_gmm(&mut buf, &m).unwrap();
        let back = read_gmm(&buf[..]).unwrap();
        assert_eq!(back.weights, m.weights);
        assert_eq!(back.means, m.means);
        assert_eq!(back.covariances, m.covariances);
        assert_eq!(back.seed, m.seed);
        assert_eq!(back.fit_config, m.fit_config);
        let text = String::from_utf8(buf).unwrap();
        assert!(read_gmm(text.replace("end\n", "").as_bytes()).is_err());
    }

    #[test]
    fn permutation_of_points_keeps_partition() {
        let (pts, _) = blobs(80, &[vec![-4.0, 0.0], vec![4.0, 1.0]], 1.0, 9);
        let n = pts.rows();
        let mut perm: Vec<usize> = (0..n).collect();
        Rng::new(3).shuffle(&mut perm);
        let mut shuffled = Matrix::zeros(n, 2);
        for (r, &i) in perm.iter().enumerate() {
            shuffled.row_mut(r).copy_from_slice(pts.row(i));
        }
        let cfg = GmmFitConfig::default();
        let a = gmm_fit(&pts, 2, &cfg).unwrap().soft_assign(&pts).unwrap().hard_labels();
        let b_model = gmm_fit(&shuffled, 2, &cfg).unwrap();
        let b_shuf = b_model.soft_assign(&shuffled).unwrap().hard_labels();
        let mut b = vec![0; n];
        for (r, &i) in perm.iter().enumerate() {
            b[i] = b_shuf[r];
        }
        assert_eq!(crate::metrics::adjusted_rand_index(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn near_singular_data_still_fits() {
        // two clusters on a plane inside 8 dimensions, far below the ridge elsewhere
        let mut rng = Rng::new(21);
        let rows: Vec<Vec<f64>> = (0..300)
            .map(|i| {
                let c = if i % 2 == 0 { -1.0 } else { 1.0 };
                let (u, v) = (c + 0.3 * rng.normal(), 0.3 * rng.normal());
                (0..8).map(|j| u * (j as f64 * 0.1) + v * (1.0 - j as f64 * 0.1) + 1e-7 * rng.normal()).collect()
            })
            .collect();
        let pts = Matrix::from_rows(&rows).unwrap();
        let m = gmm_fit(&pts, 2, &GmmFitConfig::default()).unwrap();
        assert!(m.ll_trace.windows(2).all(|w| w[1] >= w[0] - 1e-8 - 1e-12 * w[0].abs()));
        let hard = m.soft_assign(&pts).unwrap().hard_labels();
        let truth: Vec<usize> = (0..300).map(|i| i % 2).collect();
        assert!(crate::metrics::adjusted_rand_index(&truth, &hard).unwrap() > 0.9);
    }
}
