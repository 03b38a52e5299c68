//! Daily feature ingestion, trailing-window construction, imputation,
//! standardization, stratified splitting and a synthetic cohort generator.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use chrono::{Duration, NaiveDate};

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::rng::{derive_seed, Rng};
use crate::stats::FeatureTable;

pub const DEFAULT_FEATURES: [&str; 6] = [
    "sum_duration_asleep",
    "avg_duration_asleep",
    "avg_efficiency",
    "avg_duration_to_fall_asleep",
    "first_waketime",
    "first_bedtime",
];

const DATE_FMT: &str = "%Y-%m-%d";

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Schema {
    pub features: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            features: DEFAULT_FEATURES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl Schema {
    pub fn dim(&self) -> usize {
        self.features.len()
    }

    pub fn header(&self) -> String {
        format!("participant_id,date,{}", self.features.join(","))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DailyRecord {
    pub participant_id: String,
    pub date: NaiveDate,
    /// `None` marks a missing cell.
    pub values: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRecord {
    pub participant_id: String,
    pub label_date: NaiveDate,
    pub label: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cohort {
    Discovery,
    Validation,
}

impl Cohort {
    pub fn as_str(self) -> &'static str {
        match self {
            Cohort::Discovery => "discovery",
            Cohort::Validation => "validation",
        }
    }
}

fn parse_date(s: &str, line: usize) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), DATE_FMT).map_err(|e| Error::Parse {
        line,
        msg: format!("bad date '{s}': {e}"),
    })
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(r)
}

fn line_of(rec: &csv::StringRecord) -> usize {
    rec.position().map_or(0, |p| p.line() as usize)
}

/// Read daily records. Columns after `participant_id,date` may come in any
/// order but must be exactly the schema's features.
pub fn read_daily_csv<R: Read>(r: R, schema: &Schema) -> Result<Vec<DailyRecord>> {
    let mut rdr = csv_reader(r);
    let header = rdr.headers()?.clone();
    if header.get(0) != Some("participant_id") || header.get(1) != Some("date") {
        return Err(Error::Parse {
            line: 1,
            msg: "header must start with participant_id,date".into(),
        });
    }
    let mut column_of = vec![usize::MAX; schema.dim()];
    for (c, name) in header.iter().enumerate().skip(2) {
        let j = schema.features.iter().position(|f| f == name).ok_or_else(|| Error::Parse {
            line: 1,
            msg: format!("unknown column '{name}'"),
        })?;
        if column_of[j] != usize::MAX {
            return Err(Error::Parse {
                line: 1,
                msg: format!("column '{name}' appears twice"),
            });
        }
        column_of[j] = c;
    }
    if let Some(j) = column_of.iter().position(|&c| c == usize::MAX) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("missing column '{}'", schema.features[j]),
        });
    }

    let mut seen: HashMap<(String, NaiveDate), usize> = HashMap::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::Parse {
                line,
                msg: format!("malformed row: {e}"),
            }
        })?;
        let line = line_of(&rec);
        let id = rec.get(0).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty participant_id".into(),
            });
        }
        let date = parse_date(rec.get(1).unwrap_or(""), line)?;
        let mut values = Vec::with_capacity(schema.dim());
        for (j, &c) in column_of.iter().enumerate() {
            let cell = rec.get(c).unwrap_or("");
            if cell.is_empty() {
                values.push(None);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad value '{cell}' in column '{}'", schema.features[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("non-finite value in column '{}'", schema.features[j]),
                });
            }
            values.push(Some(v));
        }
        if let Some(first) = seen.insert((id.clone(), date), line) {
            return Err(Error::Parse {
                line,
                msg: format!("duplicate row for participant {id} on {date} (first seen on line {first})"),
            });
        }
        out.push(DailyRecord {
            participant_id: id,
            date,
            values,
        });
    }
    Ok(out)
}

pub fn load_daily_csv(path: &Path, schema: &Schema) -> Result<Vec<DailyRecord>> {
    read_daily_csv(std::fs::File::open(path)?, schema)
}

pub fn write_daily_csv(records: &[DailyRecord], schema: &Schema) -> String {
    let mut s = schema.header();
    s.push('\n');
    for r in records {
        let _ = write!(s, "{},{}", r.participant_id, r.date.format(DATE_FMT));
        for v in &r.values {
            s.push(',');
            if let Some(v) = v {
                let _ = write!(s, "{v}");
            }
        }
        s.push('\n');
    }
    s
}

pub fn read_labels_csv<R: Read>(r: R) -> Result<Vec<LabelRecord>> {
    let mut rdr = csv_reader(r);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["participant_id", "label_date", "label"] {
        return Err(Error::Parse {
            line: 1,
            msg: "labels header must be participant_id,label_date,label".into(),
        });
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: format!("malformed row: {e}"),
        })?;
        let line = line_of(&rec);
        let id = rec[0].to_string();
        let label_date = parse_date(&rec[1], line)?;
        let label = match &rec[2] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Parse {
                    line,
                    msg: format!("label must be 0 or 1, got '{other}'"),
                })
            }
        };
        if !seen.insert(id.clone()) {
            return Err(Error::Parse {
                line,
                msg: format!("participant {id} has more than one label"),
            });
        }
        out.push(LabelRecord {
            participant_id: id,
            label_date,
            label,
        });
    }
    Ok(out)
}

pub fn load_labels_csv(path: &Path) -> Result<Vec<LabelRecord>> {
    read_labels_csv(std::fs::File::open(path)?)
}

pub fn write_labels_csv(labels: &[LabelRecord]) -> String {
    let mut s = String::from("participant_id,label_date,label\n");
    for l in labels {
        let _ = writeln!(s, "{},{},{}", l.participant_id, l.label_date.format(DATE_FMT), l.label);
    }
    s
}

/// Planted cluster per participant.
pub fn read_truth_csv<R: Read>(r: R) -> Result<BTreeMap<String, usize>> {
    let mut rdr = csv_reader(r);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["participant_id", "cluster"] {
        return Err(Error::Parse {
            line: 1,
            msg: "truth header must be participant_id,cluster".into(),
        });
    }
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let c = rec[1].parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad cluster id '{}'", &rec[1]),
        })?;
        out.insert(rec[0].to_string(), c);
    }
    Ok(out)
}

pub fn write_truth_csv(truth: &BTreeMap<String, usize>) -> String {
    let mut s = String::from("participant_id,cluster\n");
    for (id, c) in truth {
        let _ = writeln!(s, "{id},{c}");
    }
    s
}

/// Forward fill down each column, then backward fill any leading gap.
/// Missing cells are NaN.
pub fn impute_ffill_bfill(x: &Matrix) -> Result<Matrix> {
    let (t_len, d) = x.shape();
    let mut out = x.clone();
    for j in 0..d {
        let first = (0..t_len).find(|&t| !x.get(t, j).is_nan()).ok_or_else(|| {
            Error::Degenerate(format!("feature column {j} has no observed value"))
        })?;
        for t in 0..first {
            out.set(t, j, x.get(first, j));
        }
        let mut last = x.get(first, j);
        for t in first..t_len {
            let v = x.get(t, j);
            if v.is_nan() {
                out.set(t, j, last);
            } else {
                last = v;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticipantWindow {
    pub participant_id: String,
    pub label_date: NaiveDate,
    /// `T × d`, imputed, in natural units.
    pub x: Matrix,
    /// Cells that were missing before imputation.
    pub missing: Vec<bool>,
    pub observed_days: usize,
    pub label: u8,
    pub cohort: Cohort,
}

#[derive(Clone, Debug, Default)]
pub struct WindowSet {
    pub windows: Vec<ParticipantWindow>,
    pub warnings: Vec<String>,
}

/// One trailing window of `window` calendar days per labeled participant,
/// ending on the label date. Participants with fewer than `min_days` days
/// that carry any observation are dropped with a warning, as are those
/// absent from `records` or with a feature never observed in the window.
/// Output is sorted by participant id.
pub fn build_windows(
    records: &[DailyRecord],
    labels: &[LabelRecord],
    schema: &Schema,
    window: usize,
    min_days: usize,
    cohort: Cohort,
) -> Result<WindowSet> {
    if window == 0 {
        return Err(Error::InvalidArgument("window length must be positive".into()));
    }
    let d = schema.dim();
    let mut by_id: HashMap<&str, Vec<&DailyRecord>> = HashMap::new();
    for r in records {
        if r.values.len() != d {
            return Err(Error::Shape(format!(
                "record for {} on {} has {} values, schema has {d}",
                r.participant_id,
                r.date,
                r.values.len()
            )));
        }
        by_id.entry(&r.participant_id).or_default().push(r);
    }
    let mut sorted: Vec<&LabelRecord> = labels.iter().collect();
    sorted.sort_by(|a, b| a.participant_id.cmp(&b.participant_id));

    let mut out = WindowSet::default();
    for lab in sorted {
        let id = lab.participant_id.as_str();
        let Some(recs) = by_id.get(id) else {
            let w = format!("participant {id} has a label but no daily records; excluded");
            log::warn!("{w}");
            out.warnings.push(w);
            continue;
        };
        let start = lab.label_date - Duration::days(window as i64 - 1);
        let mut x = Matrix::from_vec(window, d, vec![f64::NAN; window * d])?;
        let mut observed = 0;
        for r in recs {
            if r.date < start || r.date > lab.label_date {
                continue;
            }
            let t = (r.date - start).num_days() as usize;
            let mut any = false;
            for (j, v) in r.values.iter().enumerate() {
                if let Some(v) = v {
                    x.set(t, j, *v);
                    any = true;
                }
            }
            observed += any as usize;
        }
        if observed < min_days {
            let w = format!(
                "participant {id} has {observed} observed days in the window (need {min_days}); excluded"
            );
            log::warn!("{w}");
            out.warnings.push(w);
            continue;
        }
        let missing: Vec<bool> = x.as_slice().iter().map(|v| v.is_nan()).collect();
        let x = match impute_ffill_bfill(&x) {
            Ok(m) => m,
            Err(_) => {
                let w = format!("participant {id} has a feature never observed in the window; excluded");
                log::warn!("{w}");
                out.warnings.push(w);
                continue;
            }
        };
        out.windows.push(ParticipantWindow {
            participant_id: id.to_string(),
            label_date: lab.label_date,
            x,
            missing,
            observed_days: observed,
            label: lab.label,
            cohort,
        });
    }
    Ok(out)
}

/// Per-feature z-scoring with statistics pooled over every (participant,
/// day) cell of the fitting windows.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub features: Vec<String>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn fit(windows: &[&Matrix], schema: &Schema) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::Empty("standardizer training windows"));
        }
        let d = schema.dim();
        let mut mean = vec![0.0; d];
        let mut sd = vec![0.0; d];
        for j in 0..d {
            let vals = windows.iter().flat_map(|w| (0..w.rows()).map(move |t| w.get(t, j)));
            let (m, v, _) = crate::math::mean_var(vals);
            mean[j] = m;
            sd[j] = v.sqrt();
            if !(sd[j] > 0.0) || !sd[j].is_finite() {
                return Err(Error::Degenerate(format!(
                    "feature '{}' is constant in the training split",
                    schema.features[j]
                )));
            }
        }
        Ok(Self {
            features: schema.features.clone(),
            mean,
            sd,
        })
    }

    fn check(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.mean.len() {
            return Err(Error::Shape(format!(
                "window has {} features, standardizer has {}",
                x.cols(),
                self.mean.len()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        self.check(x)?;
        let mut out = x.clone();
        for t in 0..x.rows() {
            for (j, v) in out.row_mut(t).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.sd[j];
            }
        }
        Ok(out)
    }

    pub fn inverse(&self, z: &Matrix) -> Result<Matrix> {
        self.check(z)?;
        let mut out = z.clone();
        for t in 0..z.rows() {
            for (j, v) in out.row_mut(t).iter_mut().enumerate() {
                *v = *v * self.sd[j] + self.mean[j];
            }
        }
        Ok(out)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("feature,mean,sd\n");
        for ((f, m), sd) in self.features.iter().zip(&self.mean).zip(&self.sd) {
            let _ = writeln!(s, "{f},{m},{sd}");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv_reader(text.as_bytes());
        let header = rdr.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["feature", "mean", "sd"] {
            return Err(Error::Parse {
                line: 1,
                msg: "standardizer header must be feature,mean,sd".into(),
            });
        }
        let mut s = Self {
            features: vec![],
            mean: vec![],
            sd: vec![],
        };
        for rec in rdr.records() {
            let rec = rec?;
            let line = line_of(&rec);
            let num = |i: usize| -> Result<f64> {
                rec[i].parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("bad number '{}'", &rec[i]),
                })
            };
            s.features.push(rec[0].to_string());
            s.mean.push(num(1)?);
            s.sd.push(num(2)?);
        }
        Ok(s)
    }
}

/// Stratified train/validation split of indices `0..labels.len()`. Each
/// class contributes `round(frac · n_class)` members to validation (at
/// least one when the class has two or more members). Both index lists are
/// sorted.
pub fn stratified_split(labels: &[u8], val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    let mut rng = Rng::new(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        rng.shuffle(&mut idx);
        let mut n_val = (val_fraction * idx.len() as f64).round() as usize;
        if idx.len() >= 2 {
            n_val = n_val.clamp(1, idx.len() - 1);
        }
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Participant-level summary features from an imputed natural-unit window:
/// mean, SD and least-squares slope per day of every feature.
pub fn summary_features(windows: &[ParticipantWindow], schema: &Schema) -> FeatureTable {
    let mut names = Vec::new();
    for f in &schema.features {
        names.push(format!("mean_{f}"));
        names.push(format!("sd_{f}"));
        names.push(format!("slope_{f}"));
    }
    let rows = windows
        .iter()
        .map(|w| {
            let t_len = w.x.rows();
            let t_mean = (t_len as f64 - 1.0) / 2.0;
            let sxx: f64 = (0..t_len).map(|t| (t as f64 - t_mean).powi(2)).sum();
            let mut row = Vec::with_capacity(names.len());
            for j in 0..w.x.cols() {
                let (m, v, _) = crate::math::mean_var((0..t_len).map(|t| w.x.get(t, j)));
                let sxy: f64 = (0..t_len).map(|t| (t as f64 - t_mean) * (w.x.get(t, j) - m)).sum();
                row.push(m);
                row.push(v.sqrt());
                row.push(if sxx > 0.0 { sxy / sxx } else { 0.0 });
            }
            row
        })
        .collect();
    FeatureTable { names, rows }
}

/// Parameters of the synthetic cohort generator.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_participants: usize,
    pub n_clusters: usize,
    pub seq_len: usize,
    /// Fraction of labels replaced by a fair coin flip.
    pub label_noise: f64,
    /// Probability that a whole day is absent.
    pub missingness: f64,
    /// Global scale of everything that varies between participants of the
    /// same cluster. Zero gives exact cluster trajectories.
    pub noise: f64,
    /// AR(1) coefficient of the day-to-day noise.
    pub ar_coef: f64,
    /// Distance of each cluster level from the center, in feature SDs.
    pub separation: f64,
    /// Depth of the mid-window sleep dip in even-numbered clusters, in SDs.
    pub dip_depth: f64,
    /// Shift per unit latent severity, in SDs.
    pub severity_effect: f64,
    /// Cluster offset on the latent severity scale that sets prevalence.
    pub label_shift: f64,
    /// Uniform shift added to every feature, in SDs (for shifted cohorts).
    pub cohort_shift: f64,
    pub start_date: NaiveDate,
    pub id_prefix: String,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_participants: 400,
            n_clusters: 2,
            seq_len: 28,
            label_noise: 0.1,
            missingness: 0.15,
            noise: 1.0,
            ar_coef: 0.6,
            separation: 0.8,
            dip_depth: 1.5,
            severity_effect: 0.5,
            label_shift: 2.5,
            cohort_shift: 0.0,
            start_date: NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date"),
            id_prefix: "P".into(),
            seed: 0,
        }
    }
}

/// Natural-unit center and spread of the six default features, plus the
/// direction in which a healthier cluster and a more severe participant
/// move each one.
const FEATURE_PROFILE: [(f64, f64, f64, f64); 6] = [
    // (mean, sd, healthier-cluster sign, severity sign)
    (420.0, 40.0, 1.0, -1.0),
    (380.0, 35.0, 1.0, -1.0),
    (88.0, 3.0, 1.0, -1.0),
    (18.0, 6.0, -1.0, 1.0),
    (450.0, 30.0, 0.5, 1.0),
    (-30.0, 30.0, -1.0, 1.0),
];

/// Which features take part in the mid-window dip.
const DIP_FEATURES: [bool; 6] = [true, true, true, false, false, false];

pub struct SynthOutput {
    pub schema: Schema,
    pub records: Vec<DailyRecord>,
    pub labels: Vec<LabelRecord>,
    pub truth: BTreeMap<String, usize>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_clusters == 0 {
            return bad("synthetic cohort needs at least one cluster".into());
        }
        if self.n_participants < 2 * self.n_clusters {
            return bad(format!(
                "{} participants cannot give 2 per cluster for {} clusters",
                self.n_participants, self.n_clusters
            ));
        }
        if self.seq_len == 0 {
            return bad("seq_len must be positive".into());
        }
        for (name, v) in [("label_noise", self.label_noise), ("missingness", self.missingness)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if !(self.noise >= 0.0) || !(-1.0 < self.ar_coef && self.ar_coef < 1.0) {
            return bad("noise must be >= 0 and ar_coef in (-1, 1)".into());
        }
        if self.id_prefix.contains(',') {
            return bad("id_prefix must not contain commas".into());
        }
        Ok(())
    }

    /// Cluster level in SD units, evenly spaced in `[-separation, +separation]`.
    fn level(&self, c: usize) -> f64 {
        if self.n_clusters == 1 {
            0.0
        } else {
            self.separation * (2.0 * c as f64 / (self.n_clusters - 1) as f64 - 1.0)
        }
    }

    /// Mean trajectory of cluster `c` in natural units (`seq_len × 6`).
    /// Even clusters hold their level with a dip in sleep around day 7;
    /// odd clusters settle exponentially onto their level by about day 9.
    pub fn cluster_trajectory(&self, c: usize) -> Matrix {
        let level = self.level(c);
        let mut m = Matrix::zeros(self.seq_len, FEATURE_PROFILE.len());
        for t in 0..self.seq_len {
            let tf = t as f64;
            let (lvl, dip) = if c % 2 == 0 {
                (level, self.dip_depth * (-(tf - 7.0).powi(2) / 8.0).exp())
            } else {
                (level * (1.0 - (-(tf + 1.0) / 3.0).exp()), 0.0)
            };
            for (j, &(mean, sd, dir, _)) in FEATURE_PROFILE.iter().enumerate() {
                let dip_j = if DIP_FEATURES[j] { dip } else { 0.0 };
                m.set(t, j, mean + sd * (dir * lvl - dip_j + self.cohort_shift));
            }
        }
        m
    }

    /// Prevalence offset of cluster `c` on the severity scale; the first
    /// cluster carries the highest risk.
    fn label_offset(&self, c: usize) -> f64 {
        if self.n_clusters == 1 {
            0.0
        } else {
            self.label_shift * (1.0 - 2.0 * c as f64 / (self.n_clusters - 1) as f64)
        }
    }
}

/// Generate a synthetic cohort. Participants are assigned to clusters in
/// rotation, so every cluster gets at least two members.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let schema = Schema::default();
    let d = schema.dim();
    let width = spec.n_participants.to_string().len().max(4);
    let trajectories: Vec<Matrix> = (0..spec.n_clusters).map(|c| spec.cluster_trajectory(c)).collect();
    let mut records = Vec::new();
    let mut labels = Vec::new();
    let mut truth = BTreeMap::new();
    let innov = (1.0 - spec.ar_coef * spec.ar_coef).sqrt();

    for i in 0..spec.n_participants {
        let mut rng = Rng::new(derive_seed(spec.seed, i as u64));
        let id = format!("{}{:0width$}", spec.id_prefix, i + 1);
        let c = i % spec.n_clusters;
        let severity = rng.normal();
        let intercepts: Vec<f64> = (0..d).map(|_| 0.3 * rng.normal()).collect();
        let start = spec.start_date + Duration::days(rng.below(365) as i64);
        let mut ar = vec![0.0; d];
        for a in ar.iter_mut() {
            *a = rng.normal();
        }
        for t in 0..spec.seq_len {
            if t > 0 {
                for a in ar.iter_mut() {
                    *a = spec.ar_coef * *a + innov * rng.normal();
                }
            }
            let absent = rng.bernoulli(spec.missingness);
            if absent {
                continue;
            }
            let values = (0..d)
                .map(|j| {
                    let (_, sd, _, sev_dir) = FEATURE_PROFILE[j];
                    let person = spec.severity_effect * sev_dir * severity + intercepts[j] + ar[j];
                    Some(trajectories[c].get(t, j) + spec.noise * sd * person)
                })
                .collect();
            records.push(DailyRecord {
                participant_id: id.clone(),
                date: start + Duration::days(t as i64),
                values,
            });
        }
        let clean = (severity + spec.label_offset(c) > 0.0) as u8;
        let label = if rng.bernoulli(spec.label_noise) {
            rng.bernoulli(0.5) as u8
        } else {
            clean
        };
        labels.push(LabelRecord {
            participant_id: id.clone(),
            label_date: start + Duration::days(spec.seq_len as i64 - 1),
            label,
        });
        truth.insert(id, c);
    }
    Ok(SynthOutput {
        schema,
        records,
        labels,
        truth,
    })
}
