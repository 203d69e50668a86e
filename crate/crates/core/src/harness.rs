//! Benchmark orchestration: scenario grids, instance/replicate runs, the
//! normalized NLL metric and report emission.
//!
//! Every random draw is keyed by its position in the grid, so results do not
//! depend on execution order, thread count or which other methods run.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::finetune::{calibrate, FinetuneConfig};
use crate::kde::{DensityModel, SampleMatrix, SamplePointKde};
use crate::recommender::{load_checkpoint, recommend_factors, ArchConfig, RecommenderParams};
use crate::rng::{derived_seed, stream, Key};
use crate::selectors::{abramson_from_global, knn_select, lcv_select, silverman, LcvSelection, SelectorConfig};
use crate::targets::{sample_prior, ScenarioFamily, ScenarioSpec, TargetModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Silverman,
    #[serde(rename = "LCV")]
    Lcv,
    Abramson,
    #[serde(rename = "kNN")]
    Knn,
    #[serde(rename = "NNKDE_scratch")]
    NnkdeScratch,
    #[serde(rename = "NNKDE_pre")]
    NnkdePre,
    #[serde(rename = "NNKDE_fine")]
    NnkdeFine,
    Oracle,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Silverman,
        Method::Lcv,
        Method::Abramson,
        Method::Knn,
        Method::NnkdeScratch,
        Method::NnkdePre,
        Method::NnkdeFine,
        Method::Oracle,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Silverman => "Silverman",
            Method::Lcv => "LCV",
            Method::Abramson => "Abramson",
            Method::Knn => "kNN",
            Method::NnkdeScratch => "NNKDE_scratch",
            Method::NnkdePre => "NNKDE_pre",
            Method::NnkdeFine => "NNKDE_fine",
            Method::Oracle => "Oracle",
        }
    }

    pub fn needs_checkpoint(self) -> bool {
        matches!(self, Method::NnkdePre | Method::NnkdeFine)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

fn default_instances() -> usize {
    10
}
fn default_replicates() -> usize {
    5
}
fn default_eval() -> usize {
    3000
}
fn default_true() -> bool {
    true
}

/// Experiment description, read from a flat TOML file.
///
/// `checkpoint` may contain `{d}`, replaced by each dimension in `dims`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioFamily,
    pub dims: Vec<usize>,
    pub sample_sizes: Vec<usize>,
    #[serde(default = "default_instances")]
    pub n_instances: usize,
    #[serde(default = "default_replicates")]
    pub n_replicates: usize,
    #[serde(default = "default_eval")]
    pub n_eval: usize,
    pub methods: Vec<Method>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(default)]
    pub master_seed: u64,
    /// One test set per instance (`true`) or one per replicate.
    #[serde(default = "default_true")]
    pub shared_test_set: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lcv_grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knn_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knn_scale_grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abramson_alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune_gamma_lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune_gamma_hi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune_grid_points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune_tolerance: Option<f64>,
}

impl ExperimentConfig {
    pub fn new(scenario: ScenarioFamily, dims: Vec<usize>, sample_sizes: Vec<usize>, methods: Vec<Method>) -> Self {
        Self {
            scenario,
            dims,
            sample_sizes,
            n_instances: default_instances(),
            n_replicates: default_replicates(),
            n_eval: default_eval(),
            methods,
            checkpoint: None,
            master_seed: 0,
            shared_test_set: true,
            lcv_grid: None,
            knn_k: None,
            knn_scale_grid: None,
            abramson_alpha: None,
            finetune_gamma_lo: None,
            finetune_gamma_hi: None,
            finetune_grid_points: None,
            finetune_tolerance: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn selector_config(&self) -> SelectorConfig {
        let base = SelectorConfig::default();
        SelectorConfig {
            lcv_grid: self.lcv_grid.clone().unwrap_or(base.lcv_grid),
            knn_k: self.knn_k.or(base.knn_k),
            knn_scale_grid: self.knn_scale_grid.clone().unwrap_or(base.knn_scale_grid),
            abramson_alpha: self.abramson_alpha.unwrap_or(base.abramson_alpha),
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        let base = FinetuneConfig::default();
        FinetuneConfig {
            gamma_lo: self.finetune_gamma_lo.unwrap_or(base.gamma_lo),
            gamma_hi: self.finetune_gamma_hi.unwrap_or(base.gamma_hi),
            grid_points: self.finetune_grid_points.unwrap_or(base.grid_points),
            tolerance: self.finetune_tolerance.unwrap_or(base.tolerance),
        }
    }

    pub fn checkpoint_for(&self, d: usize) -> Option<PathBuf> {
        self.checkpoint.as_ref().map(|c| PathBuf::from(c.replace("{d}", &d.to_string())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_instances == 0 || self.n_replicates == 0 || self.n_eval == 0 {
            return Err(Error::Config("n_instances, n_replicates and n_eval must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        if self.dims.is_empty() || self.sample_sizes.is_empty() {
            return Err(Error::Config("dims and sample_sizes must not be empty".into()));
        }
        for &d in &self.dims {
            ScenarioSpec::new(self.scenario, d, self.master_seed).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.sample_sizes.iter().any(|&n| n < 2) {
            return Err(Error::Config("sample sizes must be >= 2".into()));
        }
        if self.checkpoint.is_none() {
            if let Some(m) = self.methods.iter().find(|m| m.needs_checkpoint()) {
                return Err(Error::Config(format!("method {m} requires a recommender checkpoint")));
            }
        }
        self.selector_config().validate()?;
        self.finetune_config().validate()
    }
}

/// `−mean_j log f̂(Z_j) / d`.
pub fn normalized_nll(model: &dyn DensityModel, test: &SampleMatrix) -> Result<f64> {
    if test.n() == 0 {
        return Err(Error::Empty("test set"));
    }
    check_dim(model.dim(), test.d())?;
    let logs = model.log_density_batch(test)?;
    let mut total = 0.0;
    for (index, v) in logs.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteLogDensity { index });
        }
        total += v;
    }
    Ok(-total / test.n() as f64 / test.d() as f64)
}

/// Scale calibration diagnostics of one NNKDE_fine run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub gamma_star: f64,
    pub objective_at_gamma_star: f64,
    pub objective_at_one: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scenario: ScenarioFamily,
    pub d: usize,
    pub n: usize,
    pub method: Method,
    pub instance: usize,
    pub replicate: usize,
    /// `None` when the method failed on this run.
    pub nll: Option<f64>,
    pub seed: u64,
    pub error: Option<String>,
    pub seconds: f64,
    pub finetune: Option<FinetuneSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub scenario: ScenarioFamily,
    pub d: usize,
    pub n: usize,
    pub method: Method,
    /// Mean over instances of the per-instance replicate mean.
    pub mean: Option<f64>,
    /// Sample standard deviation (ddof = 1) of the per-instance means.
    pub std: Option<f64>,
    pub instances: usize,
    pub failed_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub runs: Vec<RunRecord>,
    pub cells: Vec<CellSummary>,
    /// Unknown when the report was rebuilt from a runs CSV.
    pub shared_test_set: Option<bool>,
    pub master_seed: Option<u64>,
}

impl EvalReport {
    pub fn from_runs(runs: Vec<RunRecord>, shared_test_set: Option<bool>, master_seed: Option<u64>) -> Self {
        let cells = aggregate(&runs);
        Self { runs, cells, shared_test_set, master_seed }
    }

    pub fn cell(&self, scenario: ScenarioFamily, d: usize, n: usize, method: Method) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.scenario == scenario && c.d == d && c.n == n && c.method == method)
    }

    pub fn failed_runs(&self) -> usize {
        self.runs.iter().filter(|r| r.nll.is_none()).count()
    }
}

pub fn aggregate(runs: &[RunRecord]) -> Vec<CellSummary> {
    type CellKey = (ScenarioFamily, usize, usize, Method);
    let mut groups: BTreeMap<CellKey, BTreeMap<usize, Vec<Option<f64>>>> = BTreeMap::new();
    for r in runs {
        groups
            .entry((r.scenario, r.d, r.n, r.method))
            .or_default()
            .entry(r.instance)
            .or_default()
            .push(r.nll);
    }
    groups
        .into_iter()
        .map(|((scenario, d, n, method), instances)| {
            let mut failed_runs = 0;
            let means: Vec<f64> = instances
                .values()
                .filter_map(|vals| {
                    let ok: Vec<f64> = vals.iter().flatten().copied().collect();
                    failed_runs += vals.len() - ok.len();
                    (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64)
                })
                .collect();
            let k = means.len();
            let mean = (k > 0).then(|| means.iter().sum::<f64>() / k as f64);
            let std = mean.filter(|_| k > 1).map(|m| {
                (means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt()
            });
            CellSummary { scenario, d, n, method, mean, std, instances: k, failed_runs }
        })
        .collect()
}

fn scenario_key(cfg: &ExperimentConfig, d: usize, n: usize, instance: usize) -> Vec<Key<'static>> {
    vec![Key::Str(cfg.scenario.tag()), d.into(), n.into(), instance.into()]
}

/// The target model of instance `instance` of cell `(d, n)`.
pub fn instance_model(cfg: &ExperimentConfig, d: usize, n: usize, instance: usize) -> Result<TargetModel> {
    let mut keys = scenario_key(cfg, d, n, instance);
    keys.push("model".into());
    let spec = ScenarioSpec::new(cfg.scenario, d, cfg.master_seed)?;
    sample_prior(&spec, &mut stream(cfg.master_seed, &keys))
}

/// Everything a method needs for one (instance, replicate) run.
struct RunContext<'a> {
    cfg: &'a ExperimentConfig,
    model: &'a TargetModel,
    sample: SampleMatrix,
    test: &'a SampleMatrix,
    selector: SelectorConfig,
    checkpoint: Option<&'a RecommenderParams>,
    job_keys: Vec<Key<'static>>,
    lcv: Option<std::result::Result<LcvSelection, String>>,
    pre: Option<std::result::Result<Vec<crate::kernel::BandwidthFactor>, String>>,
}

impl RunContext<'_> {
    fn lcv(&mut self) -> Result<LcvSelection> {
        if self.lcv.is_none() {
            self.lcv = Some(lcv_select(&self.sample, &self.selector).map_err(|e| e.to_string()));
        }
        self.lcv.clone().expect("set above").map_err(Error::InvalidArgument)
    }

    fn pre_factors(&mut self) -> Result<Vec<crate::kernel::BandwidthFactor>> {
        if self.pre.is_none() {
            let params = self.checkpoint.ok_or_else(|| Error::Config("no recommender checkpoint loaded".into()));
            self.pre = Some(
                params
                    .and_then(|p| recommend_factors(p, &self.sample))
                    .map_err(|e| e.to_string()),
            );
        }
        self.pre.clone().expect("set above").map_err(Error::InvalidArgument)
    }

    fn run(&mut self, method: Method) -> Result<(f64, Option<FinetuneSummary>)> {
        let sample = self.sample.clone();
        let kde = match method {
            Method::Oracle => return Ok((normalized_nll(self.model, self.test)?, None)),
            Method::Silverman => SamplePointKde::global(sample, silverman(&self.sample)?)?,
            Method::Lcv => SamplePointKde::global(sample, self.lcv()?.factor)?,
            Method::Abramson => {
                let lcv = self.lcv()?;
                let sel = abramson_from_global(&self.sample, &lcv.factor, self.selector.abramson_alpha)?;
                SamplePointKde::new(sample, sel.factors)?
            }
            Method::Knn => SamplePointKde::new(sample, knn_select(&self.sample, &self.selector)?.factors)?,
            Method::NnkdeScratch => {
                let arch = match self.checkpoint {
                    Some(p) => p.arch().clone(),
                    None => ArchConfig::desk(self.sample.d()),
                };
                let mut keys = self.job_keys.clone();
                keys.push("scratch-init".into());
                let params = RecommenderParams::init(arch, &mut stream(self.cfg.master_seed, &keys))?;
                SamplePointKde::new(sample, recommend_factors(&params, &self.sample)?)?
            }
            Method::NnkdePre => SamplePointKde::new(sample, self.pre_factors()?)?,
            Method::NnkdeFine => {
                let pre = self.pre_factors()?;
                let result = calibrate(&self.sample, &pre, &self.cfg.finetune_config())?;
                let summary = FinetuneSummary {
                    gamma_star: result.gamma_star,
                    objective_at_gamma_star: result.objective_at_gamma_star,
                    objective_at_one: result.objective_at_one,
                };
                let kde = SamplePointKde::new(sample, result.factors(&pre)?)?;
                return Ok((normalized_nll(&kde, self.test)?, Some(summary)));
            }
        };
        Ok((normalized_nll(&kde, self.test)?, None))
    }
}

/// Runs every (d, n, instance, replicate, method) combination of `cfg`.
///
/// Method failures are recorded per run; only configuration problems (bad
/// config, unreadable checkpoint) abort the whole experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let selector = cfg.selector_config();
    let mut runs = Vec::new();
    for &d in &cfg.dims {
        let checkpoint = match cfg.checkpoint_for(d) {
            Some(path) if cfg.methods.iter().any(|m| m.needs_checkpoint()) => {
                let params = load_checkpoint(&path)?;
                if params.arch().d != d {
                    return Err(Error::Config(format!(
                        "checkpoint {} is for d = {}, experiment needs d = {d}",
                        path.display(),
                        params.arch().d
                    )));
                }
                Some(params)
            }
            _ => None,
        };
        for &n in &cfg.sample_sizes {
            let jobs: Vec<(usize, usize)> = (0..cfg.n_instances)
                .flat_map(|i| (0..cfg.n_replicates).map(move |r| (i, r)))
                .collect();
            let models = (0..cfg.n_instances)
                .map(|i| instance_model(cfg, d, n, i))
                .collect::<Result<Vec<_>>>()?;
            let shared_tests = if cfg.shared_test_set {
                (0..cfg.n_instances)
                    .map(|i| {
                        let mut keys = scenario_key(cfg, d, n, i);
                        keys.push("test".into());
                        models[i].sample(&mut stream(cfg.master_seed, &keys), cfg.n_eval)
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            let cell_runs: Vec<Vec<RunRecord>> = jobs
                .par_iter()
                .map(|&(instance, replicate)| {
                    let mut job_keys = scenario_key(cfg, d, n, instance);
                    job_keys.push(replicate.into());
                    let seed = derived_seed(cfg.master_seed, &job_keys);
                    let model = &models[instance];
                    let mut fit_keys = job_keys.clone();
                    fit_keys.push("fit".into());
                    let own_test;
                    let test = if cfg.shared_test_set {
                        &shared_tests[instance]
                    } else {
                        let mut keys = job_keys.clone();
                        keys.push("test".into());
                        own_test = model.sample(&mut stream(cfg.master_seed, &keys), cfg.n_eval);
                        match &own_test {
                            Ok(t) => t,
                            Err(e) => return failed_all(cfg, d, n, instance, replicate, seed, e),
                        }
                    };
                    let sample = match model.sample(&mut stream(cfg.master_seed, &fit_keys), n) {
                        Ok(s) => s,
                        Err(e) => return failed_all(cfg, d, n, instance, replicate, seed, &e),
                    };
                    let mut ctx = RunContext {
                        cfg,
                        model,
                        sample,
                        test,
                        selector: selector.clone(),
                        checkpoint: checkpoint.as_ref(),
                        job_keys,
                        lcv: None,
                        pre: None,
                    };
                    cfg.methods
                        .iter()
                        .map(|&method| {
                            let start = Instant::now();
                            let outcome = ctx.run(method);
                            let seconds = start.elapsed().as_secs_f64();
                            let (nll, error, finetune) = match outcome {
                                Ok((v, f)) => (Some(v), None, f),
                                Err(e) => (None, Some(e.to_string()), None),
                            };
                            RunRecord {
                                scenario: cfg.scenario,
                                d,
                                n,
                                method,
                                instance,
                                replicate,
                                nll,
                                seed,
                                error,
                                seconds,
                                finetune,
                            }
                        })
                        .collect()
                })
                .collect();
            runs.extend(cell_runs.into_iter().flatten());
        }
    }
    Ok(EvalReport::from_runs(runs, Some(cfg.shared_test_set), Some(cfg.master_seed)))
}

fn failed_all(
    cfg: &ExperimentConfig,
    d: usize,
    n: usize,
    instance: usize,
    replicate: usize,
    seed: u64,
    err: &Error,
) -> Vec<RunRecord> {
    cfg.methods
        .iter()
        .map(|&method| RunRecord {
            scenario: cfg.scenario,
            d,
            n,
            method,
            instance,
            replicate,
            nll: None,
            seed,
            error: Some(err.to_string()),
            seconds: 0.0,
            finetune: None,
        })
        .collect()
}

pub const RUNS_CSV: &str = "runs.csv";
pub const SUMMARY_MD: &str = "summary.md";
pub const PLOT_CSV: &str = "plot_data.csv";
pub const METADATA_JSON: &str = "metadata.json";

const RUN_HEADER: [&str; 8] = ["scenario", "d", "n", "method", "instance", "replicate", "nll", "seed"];

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub fn write_runs_csv(runs: &[RunRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(RUN_HEADER).map_err(|e| Error::csv(path, e))?;
    for r in runs {
        w.write_record([
            r.scenario.tag().to_string(),
            r.d.to_string(),
            r.n.to_string(),
            r.method.tag().to_string(),
            r.instance.to_string(),
            r.replicate.to_string(),
            fmt_opt(r.nll),
            r.seed.to_string(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_runs_csv(path: &Path) -> Result<Vec<RunRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    if headers.iter().ne(RUN_HEADER) {
        return Err(Error::Config(format!("{}: unexpected columns {:?}", path.display(), headers)));
    }
    let bad = |line: usize, what: &str| Error::Config(format!("{}: line {line}: bad {what}", path.display()));
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let line = i + 2;
        let int = |k: usize, what: &str| rec[k].parse::<usize>().map_err(|_| bad(line, what));
        let nll = match &rec[6] {
            "NA" => None,
            v => Some(v.parse::<f64>().map_err(|_| bad(line, "nll"))?),
        };
        out.push(RunRecord {
            scenario: rec[0].parse()?,
            d: int(1, "d")?,
            n: int(2, "n")?,
            method: rec[3].parse()?,
            instance: int(4, "instance")?,
            replicate: int(5, "replicate")?,
            nll,
            seed: rec[7].parse().map_err(|_| bad(line, "seed"))?,
            error: nll.is_none().then(|| "failed".to_string()),
            seconds: 0.0,
            finetune: None,
        });
    }
    Ok(out)
}

fn fmt_cell(c: Option<&CellSummary>) -> String {
    match c {
        Some(CellSummary { mean: Some(m), std, .. }) => match std {
            Some(s) => format!("{m:.3} ({s:.3})"),
            None => format!("{m:.3} (NA)"),
        },
        Some(_) => "failed".into(),
        None => "".into(),
    }
}

/// Markdown tables, one per (scenario, n): methods as rows, dimensions as columns.
pub fn render_markdown(report: &EvalReport) -> String {
    let mut out = String::new();
    let mut sections: BTreeMap<(ScenarioFamily, usize), (Vec<usize>, Vec<Method>)> = BTreeMap::new();
    for c in &report.cells {
        let (dims, methods) = sections.entry((c.scenario, c.n)).or_default();
        if !dims.contains(&c.d) {
            dims.push(c.d);
        }
        if !methods.contains(&c.method) {
            methods.push(c.method);
        }
    }
    for ((scenario, n), (mut dims, mut methods)) in sections {
        dims.sort_unstable();
        methods.sort_unstable();
        out.push_str(&format!("## {scenario}, n = {n}\n\n| Method |"));
        for d in &dims {
            out.push_str(&format!(" d = {d} |"));
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(dims.len()));
        out.push('\n');
        for m in methods {
            out.push_str(&format!("| {m} |"));
            for &d in &dims {
                out.push_str(&format!(" {} |", fmt_cell(report.cell(scenario, d, n, m))));
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Long-format plot data: one row per cell, with both `d` and `n` so either can be the x axis.
pub fn write_plot_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["scenario", "method", "d", "n", "mean_nll", "std_nll", "instances"])
        .map_err(|e| Error::csv(path, e))?;
    for c in &report.cells {
        w.write_record([
            c.scenario.tag().to_string(),
            c.method.tag().to_string(),
            c.d.to_string(),
            c.n.to_string(),
            fmt_opt(c.mean),
            fmt_opt(c.std),
            c.instances.to_string(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Metadata<'a> {
    master_seed: Option<u64>,
    shared_test_set: Option<bool>,
    failed_runs: usize,
    total_seconds: f64,
    failures: Vec<&'a RunRecord>,
    finetune: Vec<&'a RunRecord>,
}

/// Writes `runs.csv`, `summary.md`, `plot_data.csv` and `metadata.json` into `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_runs_csv(&report.runs, &dir.join(RUNS_CSV))?;
    let md = dir.join(SUMMARY_MD);
    fs::write(&md, render_markdown(report)).map_err(|e| Error::io(&md, e))?;
    write_plot_csv(report, &dir.join(PLOT_CSV))?;
    let meta = Metadata {
        master_seed: report.master_seed,
        shared_test_set: report.shared_test_set,
        failed_runs: report.failed_runs(),
        total_seconds: report.runs.iter().map(|r| r.seconds).sum(),
        failures: report.runs.iter().filter(|r| r.nll.is_none()).collect(),
        finetune: report.runs.iter().filter(|r| r.finetune.is_some()).collect(),
    };
    let path = dir.join(METADATA_JSON);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
