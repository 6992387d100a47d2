//! End-to-end runs: datasets, ground-truth fit, pool, scores, metrics and
//! the files describing them.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::criteria::{score_all, write_score_table, CriteriaError, CriterionId, ScoreRow};
use crate::datagen::{make_datasets, Benchmark, DataConfig, DataError, Dataset};
use crate::errin::{covariance_penalty, err_in, BootstrapConfig, ErrInDiagnostics, ErrInError, ForestConfig, NoiseModel};
use crate::evalharness::{rank, summarize, test_mse_all, EvalError, MetricCurves, Ranking, Summary};
use crate::optfit::{fit_parameters, FitConfig, FitError};
use crate::poolgen::{generate_pool, write_pool_jsonl, FittedCandidate, PoolConfig, PoolError};
use crate::rng::{derive_seed, substream};

/// Everything that determines a run. Defaults follow the published protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub benchmarks: Vec<Benchmark>,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_scale: f64,
    pub pool_target: usize,
    pub restarts: usize,
    pub bootstrap_b: usize,
    pub criteria: Vec<CriterionId>,
    pub enable_err_in: bool,
    pub out: PathBuf,
    /// Record wall-clock columns. Off by default so that output files are a
    /// function of config and seed alone.
    pub timings: bool,
    pub max_attempts: usize,
    /// Concurrent pool attempts, 0 for one per core. Does not affect results.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            benchmarks: Benchmark::ALL.to_vec(),
            seed: 0,
            n_train: 100,
            n_test: 10_000,
            noise_scale: 0.1,
            pool_target: 100,
            restarts: 100,
            bootstrap_b: 200,
            criteria: CriterionId::ALL.to_vec(),
            enable_err_in: false,
            out: PathBuf::from("srsel-out"),
            timings: false,
            max_attempts: 100_000,
            workers: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl RunError {
    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
        move |source| RunError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("ground-truth fit: {0}")]
    Fit(#[from] FitError),
    #[error("pool: {0}")]
    Pool(#[from] PoolError),
    #[error("criteria: {0}")]
    Criteria(#[from] CriteriaError),
    #[error("err_in: {0}")]
    ErrIn(#[from] ErrInError),
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
    #[error("{path}: {msg}")]
    Output { path: PathBuf, msg: String },
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: &str| Err(RunError::Config(m.to_string()));
        if self.benchmarks.is_empty() {
            return bad("no benchmarks selected");
        }
        let mut seen = self.benchmarks.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.benchmarks.len() {
            return bad("duplicate benchmark");
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be positive and finite");
        }
        if self.n_train < 10 {
            return bad("n_train must be at least 10");
        }
        if self.n_test < 2 {
            return bad("n_test must be at least 2");
        }
        if self.pool_target == 0 {
            return bad("pool_target must be at least 1");
        }
        if self.restarts == 0 {
            return bad("restarts must be at least 1");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be at least 1");
        }
        if self.enable_err_in && self.bootstrap_b < 2 {
            return bad("bootstrap_b must be at least 2");
        }
        if self.active_criteria().is_empty() {
            return bad("no criteria selected (err_in needs enable_err_in)");
        }
        Ok(())
    }

    /// Selected criteria that will be computed, in name order.
    pub fn active_criteria(&self) -> Vec<CriterionId> {
        let mut c: Vec<CriterionId> = self
            .criteria
            .iter()
            .copied()
            .filter(|c| *c != CriterionId::ErrIn || self.enable_err_in)
            .collect();
        c.sort_by_key(|c| c.name());
        c.dedup();
        c
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig { n_train: self.n_train, n_test: self.n_test, noise_scale: self.noise_scale }
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig { restarts: self.restarts, ..FitConfig::default() }
    }

    pub fn pool_config(&self) -> PoolConfig {
        PoolConfig {
            target: self.pool_target,
            max_attempts: self.max_attempts,
            fit: self.fit_config(),
            workers: self.workers,
            ..PoolConfig::default()
        }
    }

    pub fn bootstrap_config(&self) -> BootstrapConfig {
        BootstrapConfig { b: self.bootstrap_b, refit: self.fit_config() }
    }
}

/// Named substreams of the master seed used for one benchmark.
fn stream_label(stage: &str, b: Benchmark) -> String {
    format!("{stage}/{}", b.id())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub attempts: usize,
    pub fit_failures: usize,
    pub acceptance_rate: f64,
}

/// In-memory result of one benchmark.
#[derive(Debug, Clone)]
pub struct BenchmarkResult {
    pub benchmark: Benchmark,
    pub train: Dataset,
    pub test: Dataset,
    pub sigma_hat: f64,
    pub pool: Vec<FittedCandidate>,
    pub pool_stats: Option<PoolStats>,
    pub rows: Vec<ScoreRow>,
    pub mse_test: Vec<f64>,
    pub rankings: BTreeMap<CriterionId, Ranking>,
    pub curves: BTreeMap<CriterionId, MetricCurves>,
    pub errin: Vec<ErrInDiagnostics>,
    pub noise_sigma2: Option<f64>,
    pub elapsed_ms: BTreeMap<String, u64>,
}

impl BenchmarkResult {
    pub fn ground_truth_hit(&self, c: CriterionId) -> Option<usize> {
        self.curves.get(&c).map(|m| m.gt_first_hit)
    }

    /// Criteria in the order used by every output file.
    pub fn criteria(&self) -> Vec<CriterionId> {
        let mut c: Vec<CriterionId> = self.curves.keys().copied().collect();
        c.sort_by_key(|c| c.name());
        c
    }
}

fn ms_since(t: Instant) -> u64 {
    u64::try_from(t.elapsed().as_millis()).unwrap_or(u64::MAX)
}

/// Datasets, ground-truth fit and pool for one benchmark, then scoring.
pub fn run_benchmark(config: &RunConfig, b: Benchmark) -> Result<BenchmarkResult, BenchmarkError> {
    let spec = b.spec();
    let (train, test) = make_datasets(&spec, config.seed, &config.data_config())?;

    let t = Instant::now();
    let gt_fit = fit_parameters(
        &spec.ground_truth,
        &train,
        &config.fit_config(),
        &mut substream(config.seed, &stream_label("gt-fit", b), 0),
    )?;
    let gt = FittedCandidate::new(0, true, &spec.ground_truth, gt_fit);
    let t_gt = ms_since(t);

    let t = Instant::now();
    let pool = generate_pool(&gt, &train, &config.pool_config(), &mut substream(config.seed, &stream_label("pool", b), 0))?;
    let t_pool = ms_since(t);
    let stats = PoolStats {
        attempts: pool.attempts,
        fit_failures: pool.fit_failures,
        acceptance_rate: (pool.members.len() - 1) as f64 / pool.attempts.max(1) as f64,
    };

    let mut result = score_pool(config, b, train, test, pool.members)?;
    result.pool_stats = Some(stats);
    result.elapsed_ms.insert("ground_truth_fit".into(), t_gt);
    result.elapsed_ms.insert("pool".into(), t_pool);
    Ok(result)
}

/// Scoring, test error and metrics for an already generated pool. Running
/// it on a reloaded pool reproduces the original score table.
pub fn score_pool(
    config: &RunConfig,
    b: Benchmark,
    train: Dataset,
    test: Dataset,
    pool: Vec<FittedCandidate>,
) -> Result<BenchmarkResult, BenchmarkError> {
    let sigma_hat = config.noise_scale * train.sigma_y;
    let mut elapsed_ms = BTreeMap::new();

    let t = Instant::now();
    let mut rows = pool.iter().map(|c| score_all(c, &train, sigma_hat)).collect::<Result<Vec<_>, _>>()?;
    elapsed_ms.insert("criteria".into(), ms_since(t));

    let t = Instant::now();
    let mse_test = test_mse_all(&pool, &test)?;
    for (row, m) in rows.iter_mut().zip(&mse_test) {
        row.mse_test = Some(*m);
    }
    elapsed_ms.insert("test_mse".into(), ms_since(t));

    let active = config.active_criteria();
    let mut errin = Vec::new();
    let mut noise_sigma2 = None;
    if active.contains(&CriterionId::ErrIn) {
        let t = Instant::now();
        let noise = NoiseModel::fit(&train, &ForestConfig::default(), &mut substream(config.seed, &stream_label("forest", b), 0))?;
        noise_sigma2 = Some(noise.sigma2);
        // One seed for all candidates: every candidate sees the same
        // replicate targets.
        let boot_seed = derive_seed(config.seed, &stream_label("bootstrap", b), 0);
        let boot = config.bootstrap_config();
        for (row, c) in rows.iter_mut().zip(&pool) {
            let start = Instant::now();
            let pen = covariance_penalty(&c.tree, &c.fit.theta_hat, &train, &noise, &boot, &mut substream(boot_seed, "bootstrap", 0))?;
            let value = err_in(c.fit.mse_train, &pen.cov, train.n())?;
            let t_errin = u64::try_from(start.elapsed().as_nanos()).unwrap_or(u64::MAX);
            row.err_in = Some(value);
            row.t_errin_ns = Some(t_errin);
            let clock = |v: u64| if config.timings { v } else { 0 };
            errin.push(ErrInDiagnostics {
                candidate_id: c.candidate_id,
                sigma2: noise.sigma2,
                b: boot.b,
                failed_replicates: pen.failed_replicates,
                cov_sum: pen.sum(),
                err_in: value,
                t_aic_ns: clock(row.t_aic_ns),
                t_bic_ns: clock(row.t_bic_ns),
                t_mdl_ns: clock(row.t_mdl_ns),
                t_errin_ns: clock(t_errin),
            });
        }
        elapsed_ms.insert("err_in".into(), ms_since(t));
    }

    let sizes: Vec<usize> = pool.iter().map(|c| c.tree.size()).collect();
    let mut rankings = BTreeMap::new();
    let mut curves = BTreeMap::new();
    for c in active {
        let scores: Vec<f64> = rows.iter().map(|r| r.value(c).expect("active criterion was computed")).collect();
        let ranking = rank(&scores, &sizes)?;
        curves.insert(c, MetricCurves::compute(&ranking, &mse_test, &pool)?);
        rankings.insert(c, ranking);
    }

    Ok(BenchmarkResult {
        benchmark: b,
        train,
        test,
        sigma_hat,
        pool,
        pool_stats: None,
        rows,
        mse_test,
        rankings,
        curves,
        errin,
        noise_sigma2,
        elapsed_ms,
    })
}

pub const METRICS_COLUMNS: [&str; 5] = ["criterion", "k", "avg_mse_test", "precision", "avg_size"];
pub const PLOT_COLUMNS: [&str; 4] = ["benchmark", "criterion", "k", "value"];
/// Plot-data files and the curve each one holds.
pub const PLOT_FILES: [&str; 3] = ["plot_avg_mse_test.csv", "plot_avg_size.csv", "plot_precision.csv"];

fn curve<'a>(m: &'a MetricCurves, file: &str) -> &'a [f64] {
    match file {
        "plot_avg_mse_test.csv" => &m.avg_mse_test,
        "plot_avg_size.csv" => &m.avg_size,
        _ => &m.precision,
    }
}

pub fn write_metrics<W: Write>(result: &BenchmarkResult, w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METRICS_COLUMNS)?;
    for c in result.criteria() {
        let m = &result.curves[&c];
        for k in 0..m.precision.len() {
            out.write_record([
                c.name().to_string(),
                (k + 1).to_string(),
                m.avg_mse_test[k].to_string(),
                m.precision[k].to_string(),
                m.avg_size[k].to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>, BenchmarkError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| BenchmarkError::Output { path: path.to_path_buf(), msg: e.to_string() })
}

fn output_err(path: &Path) -> impl Fn(&dyn std::fmt::Display) -> BenchmarkError + '_ {
    move |e| BenchmarkError::Output { path: path.to_path_buf(), msg: e.to_string() }
}

/// Per-benchmark files: score table, metrics, pool and optional Err_in
/// diagnostics.
pub fn write_benchmark_outputs(config: &RunConfig, result: &BenchmarkResult) -> Result<(), BenchmarkError> {
    let id = result.benchmark.id();
    let dir = &config.out;

    let path = dir.join(format!("scoretable_{id}.csv"));
    write_score_table(&result.rows, create(&path)?, config.timings).map_err(|e| output_err(&path)(&e))?;

    let path = dir.join(format!("metrics_{id}.csv"));
    write_metrics(result, create(&path)?).map_err(|e| output_err(&path)(&e))?;

    let path = dir.join(format!("pool_{id}.jsonl"));
    let mut w = create(&path)?;
    write_pool_jsonl(&result.pool, &mut w).map_err(|e| output_err(&path)(&e))?;
    w.flush().map_err(|e| output_err(&path)(&e))?;

    if !result.errin.is_empty() {
        let path = dir.join(format!("errin_{id}.json"));
        let mut w = create(&path)?;
        serde_json::to_writer_pretty(&mut w, &result.errin).map_err(|e| output_err(&path)(&e))?;
        w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| output_err(&path)(&e))?;
    }
    Ok(())
}

/// One row of the cross-benchmark table of ground-truth hits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub criterion: CriterionId,
    /// Per configured benchmark; `None` where the benchmark failed.
    pub hits: Vec<Option<usize>>,
    pub stats: Option<Summary>,
}

pub fn summary_rows(config: &RunConfig, results: &[(Benchmark, Option<&BenchmarkResult>)]) -> Vec<SummaryRow> {
    config
        .active_criteria()
        .into_iter()
        .map(|c| {
            let hits: Vec<Option<usize>> = results.iter().map(|(_, r)| r.and_then(|r| r.ground_truth_hit(c))).collect();
            let present: Vec<usize> = hits.iter().flatten().copied().collect();
            SummaryRow { criterion: c, stats: summarize(&present).ok(), hits }
        })
        .collect()
}

pub fn write_summary<W: Write>(benchmarks: &[Benchmark], rows: &[SummaryRow], w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["criterion".to_string()];
    header.extend(benchmarks.iter().map(|b| b.id().to_string()));
    header.extend(["mean", "median", "std", "min_k", "max_k"].map(String::from));
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.criterion.name().to_string()];
        rec.extend(r.hits.iter().map(|h| h.map(|h| h.to_string()).unwrap_or_default()));
        match r.stats {
            Some(s) => rec.extend([
                s.mean.to_string(),
                s.median.to_string(),
                s.std.to_string(),
                s.min.to_string(),
                s.max.to_string(),
            ]),
            None => rec.extend(std::iter::repeat_n(String::new(), 5)),
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Long-format curve data, rows sorted by (benchmark, criterion, k).
pub fn write_plot_data<W: Write>(results: &[&BenchmarkResult], file: &str, w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(PLOT_COLUMNS)?;
    for r in results {
        for c in r.criteria() {
            for (k, v) in curve(&r.curves[&c], file).iter().enumerate() {
                out.write_record([r.benchmark.id().to_string(), c.name().to_string(), (k + 1).to_string(), v.to_string()])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub id: String,
    pub status: String,
    pub error: Option<String>,
    /// Substream labels under the master seed; rerunning with only this
    /// benchmark selected reproduces its files.
    pub streams: Vec<String>,
    pub pool: Option<PoolStats>,
    pub ground_truth_mse_train: Option<f64>,
    pub sigma_hat: Option<f64>,
    pub noise_sigma2: Option<f64>,
    pub errin_failed_replicates: Option<usize>,
    pub elapsed_ms: Option<BTreeMap<String, u64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
    pub active_criteria: Vec<CriterionId>,
    pub std_convention: String,
    pub rank_tie_break: String,
    pub benchmarks: Vec<BenchmarkManifest>,
    pub elapsed_ms: Option<u64>,
}

/// Outcome of a whole run; files are already written.
#[derive(Debug)]
pub struct RunReport {
    pub results: Vec<(Benchmark, Result<BenchmarkResult, BenchmarkError>)>,
    pub summary: Vec<SummaryRow>,
}

impl RunReport {
    pub fn failures(&self) -> usize {
        self.results.iter().filter(|(_, r)| r.is_err()).count()
    }

    /// 0 when every benchmark succeeded, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.failures() == 0 {
            0
        } else {
            1
        }
    }
}

/// Runs every configured benchmark, writing per-benchmark files as they
/// finish and the summary, plot data and manifest at the end. A failing
/// benchmark is recorded and the others continue.
pub fn run(config: &RunConfig, progress: &mut dyn FnMut(&str)) -> Result<RunReport, RunError> {
    config.validate()?;
    fs::create_dir_all(&config.out).map_err(RunError::io(&config.out))?;
    let start = Instant::now();

    let mut results = Vec::new();
    for &b in &config.benchmarks {
        progress(&format!("{b}: start"));
        let outcome = run_benchmark(config, b).and_then(|r| write_benchmark_outputs(config, &r).map(|_| r));
        match &outcome {
            Ok(r) => progress(&format!(
                "{b}: pool of {} after {} attempts, MDL hit {}",
                r.pool.len(),
                r.pool_stats.as_ref().map_or(0, |s| s.attempts),
                r.ground_truth_hit(CriterionId::Mdl).map_or("-".into(), |h| h.to_string())
            )),
            Err(e) => progress(&format!("{b}: failed: {e}")),
        }
        results.push((b, outcome));
    }

    let view: Vec<(Benchmark, Option<&BenchmarkResult>)> = results.iter().map(|(b, r)| (*b, r.as_ref().ok())).collect();
    let summary = summary_rows(config, &view);
    let path = config.out.join("summary.csv");
    let file = File::create(&path).map_err(RunError::io(&path))?;
    write_summary(&config.benchmarks, &summary, BufWriter::new(file)).map_err(|e| RunError::Io { path, source: e.into() })?;

    let ok: Vec<&BenchmarkResult> = view.iter().filter_map(|(_, r)| *r).collect();
    for name in PLOT_FILES {
        let path = config.out.join(name);
        let file = File::create(&path).map_err(RunError::io(&path))?;
        write_plot_data(&ok, name, BufWriter::new(file)).map_err(|e| RunError::Io { path, source: e.into() })?;
    }

    let manifest = Manifest {
        tool: "srsel".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: config.clone(),
        active_criteria: config.active_criteria(),
        std_convention: "sample standard deviation (n - 1 denominator); 0 for one benchmark".into(),
        rank_tie_break: "ascending score, then smaller size, then smaller candidate_id; +inf last".into(),
        benchmarks: results.iter().map(|(b, r)| benchmark_manifest(config, *b, r.as_ref())).collect(),
        elapsed_ms: config.timings.then(|| ms_since(start)),
    };
    let path = config.out.join("manifest.json");
    let mut w = BufWriter::new(File::create(&path).map_err(RunError::io(&path))?);
    serde_json::to_writer_pretty(&mut w, &manifest).map_err(|e| RunError::Io { path: path.clone(), source: e.into() })?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(RunError::io(&path))?;

    Ok(RunReport { results, summary })
}

fn benchmark_manifest(config: &RunConfig, b: Benchmark, r: Result<&BenchmarkResult, &BenchmarkError>) -> BenchmarkManifest {
    let id = b.id();
    let mut streams = vec![
        format!("dataset-train/{id}"),
        format!("noise/{id}"),
        format!("dataset-test/{id}"),
        stream_label("gt-fit", b),
        stream_label("pool", b),
    ];
    if config.active_criteria().contains(&CriterionId::ErrIn) {
        streams.push(stream_label("forest", b));
        streams.push(stream_label("bootstrap", b));
    }
    match r {
        Ok(r) => BenchmarkManifest {
            id: id.into(),
            status: "ok".into(),
            error: None,
            streams,
            pool: r.pool_stats.clone(),
            ground_truth_mse_train: r.pool.first().map(|g| g.fit.mse_train),
            sigma_hat: Some(r.sigma_hat),
            noise_sigma2: r.noise_sigma2,
            errin_failed_replicates: (!r.errin.is_empty()).then(|| r.errin.iter().map(|d| d.failed_replicates).sum()),
            elapsed_ms: config.timings.then(|| r.elapsed_ms.clone()),
        },
        Err(e) => BenchmarkManifest {
            id: id.into(),
            status: "error".into(),
            error: Some(e.to_string()),
            streams,
            pool: None,
            ground_truth_mse_train: None,
            sigma_hat: None,
            noise_sigma2: None,
            errin_failed_replicates: None,
            elapsed_ms: None,
        },
    }
}
