//! Batch experiments: instance generation, algorithm runs scored against the
//! exact oracle, summaries and convergence traces.
//!
//! Results are CSV rows keyed by `(seed, algorithm)`. Rows are appended and
//! flushed one at a time, so an interrupted run can be resumed; when a run
//! finishes the file is rewritten in canonical order, which makes the output
//! independent of scheduling.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exact::{exact_marginals_with, ExactError};
use crate::exec::{for_each, map_range, ExecMode};
use crate::format::{load_model, FormatError, ModelFile};
use crate::inference::{run_to_convergence, Algorithm, InferenceError, RunConfig, WsklTarget};
use crate::model::{random_ising_instance, InstanceConfig, ModelError, PairwiseModel};
use crate::sampling::{gibbs_estimate_with, ChainConfig, SamplingError};

pub const MANIFEST_FILE: &str = "manifest.json";
/// Algorithm label used for Gibbs rows.
pub const GIBBS: &str = "gibbs";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error("invalid regime: {0}")]
    InvalidRegime(String),
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("no result rows to summarize")]
    EmptySummary,
}

pub type Result<T> = std::result::Result<T, BenchError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> BenchError + '_ {
    move |source| BenchError::Csv {
        path: path.display().to_string(),
        source,
    }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> BenchError + '_ {
    move |source| BenchError::Json {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegimeName {
    Easy,
    Hard,
    Custom,
}

/// A family of random torus instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub name: RegimeName,
    pub rows: usize,
    pub cols: usize,
    pub var_theta: f64,
    pub var_phi: f64,
    pub instances: usize,
    pub base_seed: u64,
}

impl Regime {
    pub const DEFAULT_INSTANCES: usize = 200;

    /// 4×4 torus, coupling and field variance 0.1.
    pub fn easy(instances: usize, base_seed: u64) -> Self {
        Self {
            name: RegimeName::Easy,
            rows: 4,
            cols: 4,
            var_theta: 0.1,
            var_phi: 0.1,
            instances,
            base_seed,
        }
    }

    /// 4×4 torus, coupling variance 4, field variance 0.1.
    pub fn hard(instances: usize, base_seed: u64) -> Self {
        Self {
            name: RegimeName::Hard,
            var_theta: 4.0,
            ..Self::easy(instances, base_seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BenchError::InvalidRegime(m));
        if self.instances == 0 {
            return bad("instance count must be at least 1".into());
        }
        if self.base_seed.checked_add(self.instances as u64 - 1).is_none() {
            return bad("seed range overflows u64".into());
        }
        let expected = match self.name {
            RegimeName::Easy => Some(Self::easy(self.instances, self.base_seed)),
            RegimeName::Hard => Some(Self::hard(self.instances, self.base_seed)),
            RegimeName::Custom => None,
        };
        if let Some(e) = expected {
            if e != *self {
                return bad(format!("{:?} regime parameters were altered", self.name));
            }
        }
        self.instance(0).validate()?;
        Ok(())
    }

    pub fn instance(&self, index: usize) -> InstanceConfig {
        InstanceConfig {
            rows: self.rows,
            cols: self.cols,
            var_theta: self.var_theta,
            var_phi: self.var_phi,
            seed: self.base_seed + index as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub seed: u64,
    /// Path relative to the manifest's directory.
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub regime: Regime,
    pub instances: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(json_err(path))
    }
}

/// Writes one model file per instance plus [`MANIFEST_FILE`] into `dir`.
pub fn generate_batch(regime: &Regime, dir: &Path) -> Result<Manifest> {
    regime.validate()?;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let entries = map_range(ExecMode::default(), regime.instances, |k| -> Result<ManifestEntry> {
        let cfg = regime.instance(k);
        let params = random_ising_instance(&cfg)?;
        let file = format!("instance-{}.json", cfg.seed);
        ModelFile::from_ising(&params, Some(cfg)).write(&dir.join(&file))?;
        Ok(ManifestEntry { seed: cfg.seed, file })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        regime: regime.clone(),
        instances: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(json_err(&path))?;
    std::fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

/// One `(instance, algorithm)` outcome. `l1_error` is the error of the last
/// iterate whenever the exact oracle ran, converged or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub seed: u64,
    pub algorithm: String,
    pub converged: bool,
    pub iterations: usize,
    pub final_residual: f64,
    pub oscillation_amplitude: f64,
    pub l1_error: Option<f64>,
    /// Fraction of nodes inside three standard errors (Gibbs rows only).
    pub gibbs_coverage: Option<f64>,
    pub wall_ms: Option<f64>,
    pub error: Option<String>,
}

impl ResultRow {
    fn failed(seed: u64, algorithm: &str, error: String) -> Self {
        Self {
            seed,
            algorithm: algorithm.to_string(),
            converged: false,
            iterations: 0,
            final_residual: f64::NAN,
            oscillation_amplitude: 0.0,
            l1_error: None,
            gibbs_coverage: None,
            wall_ms: None,
            error: Some(error),
        }
    }

    fn sort_key(&self) -> (u64, usize, String) {
        let rank = Algorithm::ALL
            .iter()
            .position(|a| a.name() == self.algorithm)
            .unwrap_or(Algorithm::ALL.len());
        (self.seed, rank, self.algorithm.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub algorithms: Vec<Algorithm>,
    pub run: RunConfig,
    pub with_exact: bool,
    /// Gibbs estimate per instance; its seed is replaced by the instance seed.
    pub gibbs: Option<ChainConfig>,
    /// Timing makes rows non-reproducible, so it is opt-in.
    pub record_wall_time: bool,
    pub mode: ExecMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            algorithms: vec![
                Algorithm::Fn,
                Algorithm::Fn2,
                Algorithm::Cp,
                Algorithm::Mf,
                Algorithm::Mf2,
                Algorithm::Bp,
            ],
            run: RunConfig::default(),
            with_exact: true,
            gibbs: None,
            record_wall_time: false,
            mode: ExecMode::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExperimentOutcome {
    pub computed: usize,
    pub skipped: usize,
    pub failed: usize,
}

impl ExperimentOutcome {
    /// 0 when every computed row succeeded, 2 when some rows carry errors.
    pub fn exit_code(&self) -> i32 {
        if self.failed > 0 {
            2
        } else {
            0
        }
    }
}

/// Rows of a result CSV. A truncated trailing record from an interrupted run
/// is dropped.
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut rows = Vec::new();
    let mut records = reader.deserialize::<ResultRow>().peekable();
    while let Some(r) = records.next() {
        match r {
            Ok(row) => rows.push(row),
            Err(_) if records.peek().is_none() => break,
            Err(e) => return Err(csv_err(path)(e)),
        }
    }
    Ok(rows)
}

/// Rewrites `rows` to `path` sorted by seed then algorithm.
pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut sorted: Vec<&ResultRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.sort_key());
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w = csv::Writer::from_path(&tmp).map_err(csv_err(&tmp))?;
        for row in sorted {
            w.serialize(row).map_err(csv_err(&tmp))?;
        }
        w.flush().map_err(io_err(&tmp))?;
    }
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

struct Appender {
    writer: csv::Writer<File>,
    rows: Vec<ResultRow>,
}

fn instance_rows(
    model: std::result::Result<PairwiseModel, FormatError>,
    seed: u64,
    missing: &[String],
    cfg: &ExperimentConfig,
) -> Vec<ResultRow> {
    let fail_all = |msg: String| missing.iter().map(|a| ResultRow::failed(seed, a, msg.clone())).collect();
    let model = match model {
        Ok(m) => m,
        Err(e) => return fail_all(e.to_string()),
    };
    let exact = if cfg.with_exact {
        match exact_marginals_with(&model, ExecMode::Sequential) {
            Ok(s) => Some(s.singleton_marginals),
            Err(e) => return fail_all(ExactError::to_string(&e)),
        }
    } else {
        None
    };
    let mut rows = Vec::with_capacity(missing.len());
    for name in missing {
        let start = Instant::now();
        let row = if name == GIBBS {
            let chain = ChainConfig {
                seed,
                ..cfg.gibbs.clone().expect("gibbs requested")
            };
            match gibbs_estimate_with(&model, &chain, cfg.mode) {
                Ok(est) => ResultRow {
                    seed,
                    algorithm: GIBBS.into(),
                    converged: true,
                    iterations: chain.sweeps,
                    final_residual: 0.0,
                    oscillation_amplitude: 0.0,
                    l1_error: exact.as_ref().map(|p| est.beliefs.l1_error(p)),
                    gibbs_coverage: exact.as_ref().map(|p| est.coverage(p, 3.0)),
                    wall_ms: None,
                    error: None,
                },
                Err(e) => ResultRow::failed(seed, name, SamplingError::to_string(&e)),
            }
        } else {
            let algorithm: Algorithm = name.parse().expect("validated algorithm name");
            match run_to_convergence(algorithm, &model, &cfg.run) {
                Ok((beliefs, report)) => ResultRow {
                    seed,
                    algorithm: name.clone(),
                    converged: report.converged,
                    iterations: report.iterations,
                    final_residual: report.final_residual,
                    oscillation_amplitude: report.oscillation_amplitude,
                    l1_error: exact.as_ref().map(|p| beliefs.l1_error(p)),
                    gibbs_coverage: None,
                    wall_ms: None,
                    error: None,
                },
                Err(e) => ResultRow::failed(seed, name, e.to_string()),
            }
        };
        rows.push(ResultRow {
            wall_ms: cfg.record_wall_time.then(|| start.elapsed().as_secs_f64() * 1e3),
            ..row
        });
    }
    rows
}

/// Runs every configured algorithm on every manifest instance, appending to
/// `out` and skipping `(seed, algorithm)` pairs already present there.
/// Failures become rows with an `error` entry; only I/O problems abort.
pub fn run_experiment(manifest_path: &Path, cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    if cfg.algorithms.is_empty() && cfg.gibbs.is_none() {
        return Err(BenchError::InvalidConfig("no algorithms selected".into()));
    }
    cfg.run.validate()?;
    if let Some(chain) = &cfg.gibbs {
        chain
            .validate()
            .map_err(|e| BenchError::InvalidConfig(e.to_string()))?;
    }
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let existing = if out.exists() { read_results(out)? } else { Vec::new() };
    let done: HashSet<(u64, String)> = existing.iter().map(|r| (r.seed, r.algorithm.clone())).collect();
    let mut labels: Vec<String> = Vec::new();
    for a in &cfg.algorithms {
        if !labels.iter().any(|l| l == a.name()) {
            labels.push(a.name().to_string());
        }
    }
    if cfg.gibbs.is_some() {
        labels.push(GIBBS.to_string());
    }
    let work: Vec<(&ManifestEntry, Vec<String>)> = manifest
        .instances
        .iter()
        .map(|e| {
            let missing = labels
                .iter()
                .filter(|l| !done.contains(&(e.seed, (*l).clone())))
                .cloned()
                .collect();
            (e, missing)
        })
        .filter(|(_, m): &(_, Vec<String>)| !m.is_empty())
        .collect();
    let total = manifest.instances.len() * labels.len();
    let pending: usize = work.iter().map(|(_, m)| m.len()).sum();

    // rewrite what survived (dropping any torn record), then append
    write_results(out, &existing)?;
    let file = OpenOptions::new().append(true).open(out).map_err(io_err(out))?;
    let header_needed = existing.is_empty();
    let writer = csv::WriterBuilder::new().has_headers(header_needed).from_writer(file);
    let appender = Mutex::new(Appender {
        writer,
        rows: existing,
    });

    let io_failure: Mutex<Option<BenchError>> = Mutex::new(None);
    for_each(cfg.mode, &work, |(entry, missing)| {
        let model = load_model(&base.join(&entry.file));
        let rows = instance_rows(model, entry.seed, missing, cfg);
        let mut app = appender.lock().expect("appender lock");
        for row in rows {
            if let Err(e) = app.writer.serialize(&row) {
                io_failure.lock().expect("lock").get_or_insert(csv_err(out)(e));
            }
            app.rows.push(row);
        }
        if let Err(e) = app.writer.flush() {
            io_failure.lock().expect("lock").get_or_insert(io_err(out)(e));
        }
    });
    if let Some(e) = io_failure.into_inner().expect("lock") {
        return Err(e);
    }
    let app = appender.into_inner().expect("appender lock");
    drop(app.writer);
    let new_failures = app
        .rows
        .iter()
        .rev()
        .take(pending)
        .filter(|r| r.error.is_some())
        .count();
    write_results(out, &app.rows)?;
    Ok(ExperimentOutcome {
        computed: pending,
        skipped: total - pending,
        failed: new_failures,
    })
}

/// Per-algorithm statistics. Error means cover converged runs only;
/// non-converged runs' last-iterate errors are averaged separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSummary {
    pub algorithm: String,
    pub runs: usize,
    pub converged: usize,
    pub non_converged: usize,
    pub failed: usize,
    pub mean_l1: Option<f64>,
    /// Population standard deviation (0 for a single run).
    pub std_l1: Option<f64>,
    pub non_converged_mean_l1: Option<f64>,
    pub mean_iterations: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub instances: usize,
    pub algorithms: Vec<AlgorithmSummary>,
}

impl Summary {
    pub fn get(&self, algorithm: &str) -> Option<&AlgorithmSummary> {
        self.algorithms.iter().find(|a| a.algorithm == algorithm)
    }
}

/// Per-instance `(bp_error, algo_error)` for instances where both converged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub seed: u64,
    pub bp_error: f64,
    pub algo_error: f64,
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

pub fn summarize(rows: &[ResultRow]) -> Result<(Summary, BTreeMap<String, Vec<ScatterPoint>>)> {
    if rows.is_empty() {
        return Err(BenchError::EmptySummary);
    }
    let mut groups: BTreeMap<(usize, String), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let (_, rank, name) = r.sort_key();
        groups.entry((rank, name)).or_default().push(r);
    }
    let algorithms = groups
        .iter()
        .map(|((_, name), rs)| {
            let ok: Vec<&&ResultRow> = rs.iter().filter(|r| r.error.is_none()).collect();
            let conv: Vec<f64> = ok.iter().filter(|r| r.converged).filter_map(|r| r.l1_error).collect();
            let non: Vec<f64> = ok.iter().filter(|r| !r.converged).filter_map(|r| r.l1_error).collect();
            let iters: Vec<f64> = ok.iter().filter(|r| r.converged).map(|r| r.iterations as f64).collect();
            let (mean_l1, std_l1) = mean_std(&conv);
            AlgorithmSummary {
                algorithm: name.clone(),
                runs: rs.len(),
                converged: ok.iter().filter(|r| r.converged).count(),
                non_converged: ok.iter().filter(|r| !r.converged).count(),
                failed: rs.len() - ok.len(),
                mean_l1,
                std_l1,
                non_converged_mean_l1: mean_std(&non).0,
                mean_iterations: mean_std(&iters).0,
            }
        })
        .collect();
    let instances = rows.iter().map(|r| r.seed).collect::<HashSet<_>>().len();

    let usable = |r: &&ResultRow| r.error.is_none() && r.converged && r.l1_error.is_some();
    let bp: BTreeMap<u64, f64> = rows
        .iter()
        .filter(|r| r.algorithm == Algorithm::Bp.name())
        .filter(usable)
        .map(|r| (r.seed, r.l1_error.unwrap()))
        .collect();
    let mut scatter: BTreeMap<String, Vec<ScatterPoint>> = BTreeMap::new();
    if !bp.is_empty() {
        let mut sorted: Vec<&ResultRow> = rows.iter().filter(usable).collect();
        sorted.sort_by_key(|r| r.sort_key());
        for r in sorted {
            if r.algorithm == Algorithm::Bp.name() {
                continue;
            }
            if let Some(&bp_error) = bp.get(&r.seed) {
                scatter.entry(r.algorithm.clone()).or_default().push(ScatterPoint {
                    seed: r.seed,
                    bp_error,
                    algo_error: r.l1_error.unwrap(),
                });
            }
        }
    }
    Ok((Summary { instances, algorithms }, scatter))
}

/// Summarizes a result CSV into `out` (JSON) and writes one
/// `<stem>.scatter-<alg>.txt` file per algorithm next to it, each holding
/// `bp_error algo_error` lines.
pub fn summarize_file(input: &Path, out: &Path) -> Result<(Summary, Vec<PathBuf>)> {
    let rows = read_results(input)?;
    let (summary, scatter) = summarize(&rows)?;
    let text = serde_json::to_string_pretty(&summary).map_err(json_err(out))?;
    std::fs::write(out, text + "\n").map_err(io_err(out))?;
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("summary");
    let dir = out.parent().unwrap_or(Path::new("."));
    let mut written = Vec::new();
    for (alg, points) in &scatter {
        let path = dir.join(format!("{stem}.scatter-{alg}.txt"));
        let mut body = format!("# bp_error {alg}_error\n");
        for p in points {
            body.push_str(&format!("{:e} {:e}\n", p.bp_error, p.algo_error));
        }
        std::fs::write(&path, body).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok((summary, written))
}

/// Outcome of [`trace_run`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub algorithm: Algorithm,
    pub converged: bool,
    pub iterations: usize,
    pub final_wskl: f64,
    /// Min and max WSKL over the last 100 iterations.
    pub tail_band: (f64, f64),
}

/// Runs `algorithm` recording singleton-weighted WSKL and the residual per
/// iteration, and writes them as TSV (`iteration  wskl  residual`) after a
/// `#`-prefixed verdict line.
pub fn trace_run(instance: &Path, algorithm: Algorithm, run: &RunConfig, out: &Path) -> Result<TraceSummary> {
    let model = load_model(instance)?;
    let cfg = RunConfig {
        record_wskl: true,
        wskl_weights: WsklTarget::Singletons,
        ..run.clone()
    };
    let (_, report) = run_to_convergence(algorithm, &model, &cfg)?;
    let wskl = report.wskl_trace.clone().unwrap_or_default();
    let tail = &wskl[wskl.len().saturating_sub(100)..];
    let summary = TraceSummary {
        algorithm,
        converged: report.converged,
        iterations: report.iterations,
        final_wskl: wskl.last().copied().unwrap_or(0.0),
        tail_band: (
            tail.iter().copied().fold(f64::INFINITY, f64::min),
            tail.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ),
    };
    let mut file = std::io::BufWriter::new(File::create(out).map_err(io_err(out))?);
    let mut body = format!(
        "# algorithm={} converged={} iterations={} final_wskl={:e}\niteration\twskl\tresidual\n",
        algorithm, report.converged, report.iterations, summary.final_wskl
    );
    for (k, (w, r)) in wskl.iter().zip(&report.residual_trace).enumerate() {
        body.push_str(&format!("{}\t{:e}\t{:e}\n", k + 1, w, r));
    }
    file.write_all(body.as_bytes()).map_err(io_err(out))?;
    file.flush().map_err(io_err(out))?;
    Ok(summary)
}
