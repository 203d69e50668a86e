//! File formats used by the command-line tools.
//!
//! Samples are headerless CSV with one point per row. Factors are headerless
//! CSV with the packed lower triangle of each `L_i` per row. A task directory
//! holds `tasks.toml` plus one `task_NNNNNN.csv` per task whose rows are
//! `role, x_1..x_d, log f, s_1..s_d` with role `s` (sample) or `q` (query);
//! label fields are empty on sample rows.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kde::SampleMatrix;
use crate::kernel::{packed_len, BandwidthFactor};
use crate::recommender::{extract_neighborhoods, PretrainTask, TaskSource, TrainConfig};
use crate::targets::ScenarioSpec;

fn headerless_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))
}

fn parse_rows(path: &Path) -> Result<(usize, Vec<f64>, usize)> {
    let mut rdr = headerless_reader(path)?;
    let mut width = None;
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(Error::Config(format!("{}: row {} has {} columns, expected {w}", path.display(), i + 1, rec.len())));
        }
        for field in &rec {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Config(format!("{}: row {}: {field:?} is not a number", path.display(), i + 1)))?;
            data.push(v);
        }
        rows += 1;
    }
    Ok((rows, data, width.unwrap_or(0)))
}

pub fn read_sample_csv(path: &Path) -> Result<SampleMatrix> {
    let (n, data, d) = parse_rows(path)?;
    SampleMatrix::from_flat(n, d, data)
}

fn write_rows<'a>(path: &Path, rows: impl Iterator<Item = &'a [f64]>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(|e| Error::csv(path, e))?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_sample_csv(sample: &SampleMatrix, path: &Path) -> Result<()> {
    write_rows(path, sample.rows())
}

pub fn write_factors_csv(factors: &[BandwidthFactor], path: &Path) -> Result<()> {
    write_rows(path, factors.iter().map(|f| f.entries()))
}

pub fn read_factors_csv(path: &Path, d: usize) -> Result<Vec<BandwidthFactor>> {
    let (n, data, width) = parse_rows(path)?;
    if n > 0 && width != packed_len(d) {
        return Err(Error::Config(format!(
            "{}: {width} columns, a d = {d} factor needs {}",
            path.display(),
            packed_len(d)
        )));
    }
    data.chunks_exact(packed_len(d).max(1)).map(|c| BandwidthFactor::new(d, c.to_vec())).collect()
}

pub const TASK_MANIFEST: &str = "tasks.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskManifest {
    pub spec: ScenarioSpec,
    pub k_nn: usize,
    pub n_tasks: usize,
    pub n_t: usize,
    pub m_t: usize,
}

fn task_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("task_{t:06}.csv"))
}

pub fn write_task_csv(task: &PretrainTask, path: &Path) -> Result<()> {
    let d = task.sample.d();
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(|e| Error::csv(path, e))?;
    for x in task.sample.rows() {
        let mut rec = vec!["s".to_string()];
        rec.extend(x.iter().map(|v| v.to_string()));
        rec.extend(std::iter::repeat_n(String::new(), d + 1));
        w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
    }
    for j in 0..task.queries.n() {
        let mut rec = vec!["q".to_string()];
        rec.extend(task.queries.row(j).iter().map(|v| v.to_string()));
        rec.push(task.query_logf[j].to_string());
        rec.extend(task.query_scores.row(j).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_task_csv(path: &Path, d: usize, k_nn: usize) -> Result<PretrainTask> {
    let mut rdr = headerless_reader(path)?;
    let (mut xs, mut qs, mut logf, mut scores) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let bad = |row: usize, what: &str| Error::Config(format!("{}: row {row}: {what}", path.display()));
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        if rec.len() != 2 * d + 2 {
            return Err(bad(i + 1, "wrong number of columns"));
        }
        let num = |k: usize| rec[k].parse::<f64>().map_err(|_| bad(i + 1, "not a number"));
        let coords = (1..=d).map(num).collect::<Result<Vec<_>>>()?;
        match &rec[0] {
            "s" => xs.extend(coords),
            "q" => {
                qs.extend(coords);
                logf.push(num(d + 1)?);
                for k in d + 2..2 * d + 2 {
                    scores.push(num(k)?);
                }
            }
            other => return Err(bad(i + 1, &format!("unknown role {other:?}"))),
        }
    }
    let sample = SampleMatrix::from_flat(xs.len() / d, d, xs)?;
    let m = logf.len();
    let task = PretrainTask {
        neighborhoods: extract_neighborhoods(&sample, k_nn)?,
        sample,
        queries: SampleMatrix::from_flat(m, d, qs)?,
        query_logf: logf,
        query_scores: SampleMatrix::from_flat(m, d, scores)?,
    };
    task.validate()?;
    Ok(task)
}

/// Writes the first `cfg.n_tasks` tasks of `source` and a manifest into `dir`.
pub fn write_task_dir(dir: &Path, source: &dyn TaskSource, spec: &ScenarioSpec, cfg: &TrainConfig, k_nn: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = TaskManifest { spec: *spec, k_nn, n_tasks: source.len(), n_t: cfg.n_t, m_t: cfg.m_t };
    for t in 0..source.len() {
        write_task_csv(&source.task(t)?, &task_path(dir, t))?;
    }
    let path = dir.join(TASK_MANIFEST);
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Tasks read lazily from a directory written by [`write_task_dir`].
#[derive(Debug, Clone)]
pub struct TaskDir {
    dir: PathBuf,
    manifest: TaskManifest,
}

impl TaskDir {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(TASK_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: TaskManifest =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(Self { dir: dir.to_path_buf(), manifest })
    }

    pub fn manifest(&self) -> &TaskManifest {
        &self.manifest
    }
}

impl TaskSource for TaskDir {
    fn len(&self) -> usize {
        self.manifest.n_tasks
    }

    fn task(&self, t: usize) -> Result<PretrainTask> {
        if t >= self.len() {
            return Err(Error::InvalidArgument(format!("task {t} out of range")));
        }
        read_task_csv(&task_path(&self.dir, t), self.manifest.spec.d, self.manifest.k_nn)
    }
}
