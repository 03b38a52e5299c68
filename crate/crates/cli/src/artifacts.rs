//! File layout of a run and the small delimited formats exchanged between
//! subcommands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

use gruae_core::data::{
    build_windows, load_daily_csv, load_labels_csv, read_truth_csv, Cohort, ParticipantWindow,
};
use gruae_core::Matrix;

use crate::config::{RunConfig, VERSION};

pub const FEATURES_CSV: &str = "features.csv";
pub const LABELS_CSV: &str = "labels.csv";
pub const TRUTH_CSV: &str = "truth.csv";

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const VERSION_FILE: &str = "VERSION";

/// Create `dir` and drop the resolved config and version string into it.
pub fn prepare_dir(dir: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write(&dir.join(CONFIG_SNAPSHOT), &cfg.to_toml())?;
    write(&dir.join(VERSION_FILE), &format!("{VERSION}\n"))?;
    Ok(())
}

pub fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn stage_dir(cfg: &RunConfig, stage: &str) -> PathBuf {
    cfg.run.out_dir.join(stage)
}

pub struct LoadedCohort {
    pub windows: Vec<ParticipantWindow>,
    /// Planted cluster per window, when the cohort ships a truth file that
    /// covers every participant.
    pub truth: Option<Vec<usize>>,
}

impl LoadedCohort {
    pub fn ids(&self) -> Vec<&str> {
        self.windows.iter().map(|w| w.participant_id.as_str()).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.windows.iter().map(|w| w.label).collect()
    }
}

pub fn load_cohort(cfg: &RunConfig, dir: &Path, cohort: Cohort) -> anyhow::Result<LoadedCohort> {
    let schema = cfg.schema();
    let records = load_daily_csv(&dir.join(FEATURES_CSV), &schema)
        .with_context(|| format!("loading {}", dir.join(FEATURES_CSV).display()))?;
    let labels = load_labels_csv(&dir.join(LABELS_CSV))
        .with_context(|| format!("loading {}", dir.join(LABELS_CSV).display()))?;
    let set = build_windows(&records, &labels, &schema, cfg.data.window_days, cfg.data.min_days, cohort)?;
    for w in &set.warnings {
        log::warn!("{w}");
    }
    if set.windows.is_empty() {
        bail!("no usable participant windows in {}", dir.display());
    }
    let truth_path = dir.join(TRUTH_CSV);
    let truth = if truth_path.exists() {
        let map = read_truth_csv(std::fs::File::open(&truth_path)?)
            .with_context(|| format!("loading {}", truth_path.display()))?;
        set.windows.iter().map(|w| map.get(&w.participant_id).copied()).collect()
    } else {
        None
    };
    Ok(LoadedCohort {
        windows: set.windows,
        truth,
    })
}

pub fn embeddings_csv(ids: &[&str], emb: &Matrix) -> String {
    let mut s = String::from("participant_id");
    for j in 0..emb.cols() {
        let _ = write!(s, ",e{j}");
    }
    s.push('\n');
    for (i, id) in ids.iter().enumerate() {
        s.push_str(id);
        for v in emb.row(i) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn split_csv(ids: &[&str], val_idx: &[usize]) -> String {
    let mut is_val = vec![false; ids.len()];
    for &i in val_idx {
        is_val[i] = true;
    }
    let mut s = String::from("participant_id,split\n");
    for (id, v) in ids.iter().zip(is_val) {
        let _ = writeln!(s, "{id},{}", if v { "val" } else { "train" });
    }
    s
}

/// Participant id -> true when held out for validation.
pub fn parse_split_csv(text: &str) -> anyhow::Result<BTreeMap<String, bool>> {
    let mut lines = text.lines();
    if lines.next() != Some("participant_id,split") {
        bail!("split table has an unexpected header");
    }
    let mut out = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let Some((id, split)) = line.split_once(',') else {
            bail!("split table line {}: expected two fields", i + 2);
        };
        let v = match split {
            "train" => false,
            "val" => true,
            other => bail!("split table line {}: unknown split '{other}'", i + 2),
        };
        out.insert(id.to_string(), v);
    }
    Ok(out)
}

pub fn assignments_csv(ids: &[&str], resp: &Matrix, hard: &[usize], labels: &[u8]) -> String {
    let mut s = String::from("participant_id,cluster,label");
    for j in 0..resp.cols() {
        let _ = write!(s, ",p{j}");
    }
    s.push('\n');
    for (i, id) in ids.iter().enumerate() {
        let _ = write!(s, "{id},{},{}", hard[i], labels[i]);
        for v in resp.row(i) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// Check a delimited table's header and row widths; returns the data rows.
pub fn parse_table(text: &str, header: &str, what: &str) -> anyhow::Result<Vec<Vec<String>>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == header => {}
        Some(h) => bail!("{what}: header '{h}' does not match '{header}'"),
        None => bail!("{what}: empty file"),
    }
    let width = header.split(',').count();
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<String> = l.split(',').map(str::to_string).collect();
            if f.len() != width {
                bail!("{what}: line {} has {} fields, expected {width}", i + 2, f.len());
            }
            Ok(f)
        })
        .collect()
}
