//! Finding good `(w, σ_lo, σ_hi)`.
//!
//! Everything here works on schedule indices: an interval is the pair
//! `(hi, lo)` with guided steps `hi..lo`, so `lo = N` means `σ_lo = 0` and
//! `hi = 0` means the interval reaches `σ_0`. All metrics are losses to be
//! minimized. Every evaluation uses the same base seed for its initial noise
//! and for its reference batch (common random numbers), so two cells differ
//! only through their guidance.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::batch::SampleBatch;
use crate::error::{Error, Result};
use crate::metrics::{MetricOptions, MetricsReport, DEFAULT_BINS, DEFAULT_K};
use crate::mixture::ConditionedFamily;
use crate::problem::Problem;
use crate::rng::Domain;
use crate::sampler::{GuidanceSpec, GuidedOde, Nfe, Solver};
use crate::schedule::{NoiseSchedule, SnappedInterval};

/// Version of the serialized sweep, screening and ablation documents.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Allowed precision loss below the unguided baseline when optimizing recall.
pub const PRECISION_SLACK: f64 = 0.02;

/// Default share of cells re-evaluated by [`screen_then_confirm`].
pub const DEFAULT_SHORTLIST: f64 = 0.1;

const JOURNAL_TAG: &str = "gilab-sweep";
const JOURNAL_VERSION: u32 = 1;

/// The quantity a search minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Frechet,
    Wasserstein1,
    KlHist,
    /// Recall, subject to precision staying within [`PRECISION_SLACK`] of
    /// the unguided baseline.
    Recall,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Frechet, Metric::Wasserstein1, Metric::KlHist, Metric::Recall];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Frechet => "frechet",
            Metric::Wasserstein1 => "wasserstein1",
            Metric::KlHist => "kl_hist",
            Metric::Recall => "recall",
        }
    }

    /// Whether the metric exists for data of dimension `dim`.
    pub fn applies_to(self, dim: usize) -> bool {
        match self {
            Metric::Wasserstein1 => dim == 1,
            Metric::KlHist => dim <= 2,
            Metric::Frechet | Metric::Recall => true,
        }
    }

    /// Loss of a report. `floor` is the precision floor, used by `Recall` only.
    ///
    /// Below the floor the loss is `1 + shortfall − recall`, which is worse
    /// than any feasible loss.
    pub fn loss(self, m: &MetricsReport, floor: f64) -> Result<f64> {
        let missing = || Error::input(format!("metric {} is not available for this report", self.name()));
        match self {
            Metric::Frechet => Ok(m.frechet),
            Metric::Wasserstein1 => m.wasserstein1.ok_or_else(missing),
            Metric::KlHist => m.kl_hist.ok_or_else(missing),
            Metric::Recall => {
                let (p, r) = m.precision.zip(m.recall).ok_or_else(missing)?;
                let penalty = if p < floor { 1.0 + (floor - p) } else { 0.0 };
                Ok(penalty - r)
            }
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::input(format!("unknown metric {s:?}; expected frechet, wasserstein1, kl_hist or recall")))
    }
}

/// Metrics and cost of one evaluated guidance table.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    pub loss: f64,
    pub nfe: Nfe,
}

/// Samples a problem under a guidance table and scores the result against
/// an exact reference batch.
///
/// Reference batches and unguided baselines are cached per `(n, seed)`.
#[derive(Debug)]
pub struct Evaluator {
    problem: Problem,
    model: ConditionedFamily,
    schedule: NoiseSchedule,
    solver: Solver,
    k: usize,
    bins: usize,
    references: Mutex<HashMap<(usize, u64), Arc<SampleBatch>>>,
    baselines: Mutex<HashMap<(usize, u64), f64>>,
}

impl Evaluator {
    pub fn new(problem: Problem, schedule: NoiseSchedule, solver: Solver) -> Result<Self> {
        problem.validate()?;
        let model = problem.model()?;
        Ok(Evaluator {
            problem,
            model,
            schedule,
            solver,
            k: DEFAULT_K,
            bins: DEFAULT_BINS,
            references: Mutex::new(HashMap::new()),
            baselines: Mutex::new(HashMap::new()),
        })
    }

    /// Neighbourhood size for precision/recall.
    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    /// Histogram bins per axis for the KL metric.
    pub fn with_bins(mut self, bins: usize) -> Self {
        self.bins = bins;
        self
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn solver(&self) -> Solver {
        self.solver
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// `n` exact draws from the target class.
    pub fn reference(&self, n: usize, seed: u64) -> Result<Arc<SampleBatch>> {
        if let Some(b) = self.references.lock().expect("cache lock").get(&(n, seed)) {
            return Ok(b.clone());
        }
        let batch = Arc::new(self.problem.reference()?.sample_stream(n, seed, Domain::Reference)?);
        self.references.lock().expect("cache lock").insert((n, seed), batch.clone());
        Ok(batch)
    }

    /// `n` guided samples from the model.
    pub fn sample(&self, guidance: &GuidanceSpec, n: usize, seed: u64) -> Result<SampleBatch> {
        GuidedOde::new(&self.model, &self.problem.class, &self.schedule, self.solver)?.sample_batch(
            guidance,
            n,
            seed,
            &self.problem.class,
        )
    }

    /// Metrics of `n` guided samples and the denoiser calls they took.
    pub fn measure(&self, guidance: &GuidanceSpec, n: usize, seed: u64) -> Result<(MetricsReport, Nfe)> {
        let gen = self.sample(guidance, n, seed)?;
        let nfe = gen.provenance().map(|p| p.nfe).unwrap_or_default();
        let reference = self.reference(n, seed)?;
        let opts = MetricOptions {
            k: Some(self.k),
            bins: self.bins,
            mixture: Some(self.problem.reference()?),
        };
        Ok((MetricsReport::compute(&reference, &gen, opts)?, nfe))
    }

    /// Precision floor for the recall metric at `(n, seed)`.
    pub fn precision_floor(&self, n: usize, seed: u64) -> Result<f64> {
        if let Some(&p) = self.baselines.lock().expect("cache lock").get(&(n, seed)) {
            return Ok(p - PRECISION_SLACK);
        }
        let (m, _) = self.measure(&GuidanceSpec::unguided(&self.schedule), n, seed)?;
        let p = m.precision.expect("precision is always measured");
        self.baselines.lock().expect("cache lock").insert((n, seed), p);
        Ok(p - PRECISION_SLACK)
    }

    pub fn evaluate(&self, guidance: &GuidanceSpec, n: usize, seed: u64, metric: Metric) -> Result<Evaluation> {
        self.check_metric(metric)?;
        let (metrics, nfe) = self.measure(guidance, n, seed)?;
        let floor = match metric {
            Metric::Recall => self.precision_floor(n, seed)?,
            _ => f64::NEG_INFINITY,
        };
        let loss = metric.loss(&metrics, floor)?;
        Ok(Evaluation { metrics, loss, nfe })
    }

    fn check_metric(&self, metric: Metric) -> Result<()> {
        if metric.applies_to(self.problem.dim()) {
            Ok(())
        } else {
            Err(Error::input(format!(
                "metric {metric} is not defined for {}-dimensional data",
                self.problem.dim()
            )))
        }
    }

    fn identity(&self) -> serde_json::Value {
        serde_json::json!({
            "problem": self.problem,
            "schedule": { "rule": self.schedule.rule(), "sigmas": self.schedule.sigmas() },
            "solver": self.solver,
            "k": self.k,
            "bins": self.bins,
        })
    }
}

/// One point of a sweep: a weight and a snapped interval. The unguided
/// baseline is `w = 1` with an empty interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub w: f64,
    pub interval: SnappedInterval,
}

impl Cell {
    pub fn baseline() -> Self {
        Cell {
            w: 1.0,
            interval: SnappedInterval::Empty,
        }
    }

    pub fn new(w: f64, hi: usize, lo: usize) -> Self {
        Cell {
            w,
            interval: SnappedInterval::from_indices(hi, lo),
        }
    }

    pub fn guidance(&self, schedule: &NoiseSchedule) -> Result<GuidanceSpec> {
        GuidanceSpec::from_interval(schedule, self.w, self.interval)
    }

    pub fn indices(&self) -> Option<(usize, usize)> {
        match self.interval {
            SnappedInterval::Empty => None,
            SnappedInterval::Steps { hi, lo } => Some((hi, lo)),
        }
    }

    fn key(&self) -> String {
        serde_json::to_string(self).expect("cell serializes")
    }
}

/// The cells of an exhaustive sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub w: Vec<f64>,
    /// Candidate `hi` indices, each in `0..N`.
    pub hi: Vec<usize>,
    /// Candidate `lo` indices, each in `1..=N`.
    pub lo: Vec<usize>,
    pub metric: Metric,
    /// Samples per evaluation.
    pub n: usize,
    /// Base seed shared by every cell.
    pub seed: u64,
}

impl SweepGrid {
    /// `w` from 1 to 6 in steps of 0.25 and every schedule index.
    pub fn default_for(schedule: &NoiseSchedule, metric: Metric, n: usize, seed: u64) -> Self {
        let steps = schedule.steps();
        SweepGrid {
            w: (0..=20).map(|i| 1.0 + 0.25 * i as f64).collect(),
            hi: (0..steps).collect(),
            lo: (1..=steps).collect(),
            metric,
            n,
            seed,
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        let steps = schedule.steps();
        if self.w.is_empty() || self.hi.is_empty() || self.lo.is_empty() {
            return Err(Error::input("sweep grid lists must be non-empty"));
        }
        if let Some(w) = self.w.iter().find(|w| !w.is_finite()) {
            return Err(Error::input(format!("guidance weight must be finite, got {w}")));
        }
        if let Some(i) = self.hi.iter().find(|&&i| i >= steps) {
            return Err(Error::input(format!("hi index {i} is outside 0..{steps}")));
        }
        if let Some(i) = self.lo.iter().find(|&&i| i == 0 || i > steps) {
            return Err(Error::input(format!("lo index {i} is outside 1..={steps}")));
        }
        if has_duplicates(&self.hi) || has_duplicates(&self.lo) || has_duplicates(&self.w) {
            return Err(Error::input("sweep grid lists must not repeat values"));
        }
        if self.n < 100 {
            return Err(Error::input(format!("samples per evaluation must be >= 100, got {}", self.n)));
        }
        Ok(())
    }

    /// The baseline followed by every non-empty `(w, hi, lo)` in list order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = vec![Cell::baseline()];
        for &w in &self.w {
            for &hi in &self.hi {
                for &lo in &self.lo {
                    if lo > hi {
                        cells.push(Cell::new(w, hi, lo));
                    }
                }
            }
        }
        cells
    }
}

fn has_duplicates<T: PartialEq>(v: &[T]) -> bool {
    v.iter().enumerate().any(|(i, a)| v[..i].contains(a))
}

/// Outcome of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub w: f64,
    pub interval: SnappedInterval,
    pub sigma_hi: Option<f64>,
    pub sigma_lo: Option<f64>,
    pub guided_steps: usize,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nfe: Option<Nfe>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub metrics: Option<MetricsReport>,
    /// Why the cell failed, if it did.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

impl SweepRow {
    pub fn cell(&self) -> Cell {
        Cell {
            w: self.w,
            interval: self.interval,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Results of a sweep, rows in grid order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub metric: Metric,
    pub seed: u64,
    pub n: usize,
    pub solver: Solver,
    pub sigmas: Vec<f64>,
    pub rows: Vec<SweepRow>,
    /// Row with the smallest loss.
    pub best: Option<usize>,
    /// Best row under each metric available for every successful row.
    pub best_by_metric: BTreeMap<String, usize>,
    /// Denoiser calls over all successful rows.
    pub nfe_total: Nfe,
}

impl SweepReport {
    fn assemble(ev: &Evaluator, metric: Metric, n: usize, seed: u64, rows: Vec<SweepRow>) -> Self {
        let argmin = |loss: &dyn Fn(&SweepRow) -> Option<f64>| -> Option<usize> {
            let mut best: Option<(usize, f64)> = None;
            for (i, r) in rows.iter().enumerate() {
                if let Some(l) = loss(r) {
                    if best.is_none_or(|(_, b)| l < b) {
                        best = Some((i, l));
                    }
                }
            }
            best.map(|(i, _)| i)
        };
        let best = argmin(&|r: &SweepRow| r.loss);
        let baseline_precision = rows
            .iter()
            .find(|r| r.cell() == Cell::baseline())
            .and_then(|r| r.metrics.as_ref())
            .and_then(|m| m.precision);
        let mut best_by_metric = BTreeMap::new();
        for m in Metric::ALL {
            let floor = match (m, baseline_precision) {
                (Metric::Recall, Some(p)) => p - PRECISION_SLACK,
                (Metric::Recall, None) => continue,
                _ => f64::NEG_INFINITY,
            };
            if let Some(i) = argmin(&|r: &SweepRow| r.metrics.as_ref().and_then(|x| m.loss(x, floor).ok())) {
                best_by_metric.insert(m.name().to_string(), i);
            }
        }
        let nfe_total = rows.iter().filter_map(|r| r.nfe).fold(Nfe::default(), |a, b| a + b);
        SweepReport {
            schema_version: REPORT_SCHEMA_VERSION,
            metric,
            seed,
            n,
            solver: ev.solver,
            sigmas: ev.schedule.sigmas().to_vec(),
            rows,
            best,
            best_by_metric,
            nfe_total,
        }
    }

    pub fn best_row(&self) -> Option<&SweepRow> {
        self.best.map(|i| &self.rows[i])
    }

    /// Row of `cell`, if it was evaluated.
    pub fn row(&self, cell: &Cell) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.cell() == *cell)
    }

    /// Best successful row among those with weight `w`, baseline excluded.
    pub fn best_at_w(&self, w: f64) -> Option<&SweepRow> {
        self.rows
            .iter()
            .filter(|r| r.w == w && !r.interval.is_empty())
            .filter_map(|r| r.loss.map(|l| (r, l)))
            .fold(None, |acc: Option<(&SweepRow, f64)>, (r, l)| match acc {
                Some((_, b)) if b <= l => acc,
                _ => Some((r, l)),
            })
            .map(|(r, _)| r)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One line per row, preceded by `#` comment lines.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = format!(
            "# gilab sweep report v{}\n# metric={} seed={} n={} solver={}\n",
            self.schema_version,
            self.metric,
            self.seed,
            self.n,
            serde_json::to_value(self.solver)?.as_str().unwrap_or_default()
        );
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "w",
            "hi_index",
            "lo_index",
            "sigma_hi",
            "sigma_lo",
            "guided_steps",
            "n",
            "status",
            "loss",
            "frechet",
            "wasserstein1",
            "kl_hist",
            "precision",
            "recall",
            "mode_masses",
            "nfe_cond",
            "nfe_uncond",
            "nfe_total",
            "error",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let (hi, lo) = r.cell().indices().map(|(h, l)| (h.to_string(), l.to_string())).unwrap_or_default();
            let m = r.metrics.as_ref();
            let masses = m
                .and_then(|m| m.mode_masses.as_ref())
                .map(|v| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";"))
                .unwrap_or_default();
            let nfe = r.nfe;
            w.write_record([
                r.w.to_string(),
                hi,
                lo,
                opt(r.sigma_hi),
                opt(r.sigma_lo),
                r.guided_steps.to_string(),
                r.n.to_string(),
                if r.is_ok() { "ok".into() } else { "failed".into() },
                opt(r.loss),
                opt(m.map(|m| m.frechet)),
                opt(m.and_then(|m| m.wasserstein1)),
                opt(m.and_then(|m| m.kl_hist)),
                opt(m.and_then(|m| m.precision)),
                opt(m.and_then(|m| m.recall)),
                masses,
                nfe.map(|x| x.cond.to_string()).unwrap_or_default(),
                nfe.map(|x| x.uncond.to_string()).unwrap_or_default(),
                nfe.map(|x| x.total().to_string()).unwrap_or_default(),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        let body = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
        out.push_str(&String::from_utf8(body).map_err(|e| Error::Internal(e.to_string()))?);
        Ok(out)
    }
}

/// How a sweep runs, as opposed to what it computes.
#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
    /// Progress journal, one line per finished cell.
    pub journal: Option<PathBuf>,
    /// Continue from an existing journal instead of refusing to touch it.
    pub resume: bool,
    /// Evaluate at most this many new cells, then stop.
    pub max_cells: Option<usize>,
}

/// Wall time of one cell evaluated in this run.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTiming {
    pub cell: Cell,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    /// Finished rows only, in grid order.
    pub report: SweepReport,
    /// Every cell of the grid has a row.
    pub complete: bool,
    /// Rows taken from the journal rather than evaluated now.
    pub resumed: usize,
    /// Timings are kept out of the report so that reports are reproducible.
    pub timings: Vec<CellTiming>,
}

/// Evaluate every cell of `grid`.
///
/// A cell whose solver diverges is recorded as failed and the sweep goes
/// on. With a journal, finished cells are appended as they complete; a later
/// run with `resume` skips them and produces the same report as an
/// uninterrupted run.
pub fn grid_sweep(ev: &Evaluator, grid: &SweepGrid, opts: &SweepOptions) -> Result<SweepOutcome> {
    grid.validate(&ev.schedule)?;
    ev.check_metric(grid.metric)?;
    run_cells(ev, &grid.cells(), grid.metric, grid.n, grid.seed, opts)
}

fn run_cells(ev: &Evaluator, cells: &[Cell], metric: Metric, n: usize, seed: u64, opts: &SweepOptions) -> Result<SweepOutcome> {
    let fingerprint = fingerprint(ev, cells, metric, n, seed);
    let mut done: HashMap<String, SweepRow> = HashMap::new();
    let journal = match &opts.journal {
        Some(path) => {
            let (rows, file) = open_journal(path, &fingerprint, opts.resume)?;
            for r in rows {
                done.insert(r.cell().key(), r);
            }
            Some(Mutex::new(file))
        }
        None => None,
    };
    let resumed = done.len();
    let pending: Vec<Cell> = cells
        .iter()
        .filter(|c| !done.contains_key(&c.key()))
        .take(opts.max_cells.unwrap_or(usize::MAX))
        .copied()
        .collect();

    let work = || -> Result<Vec<(SweepRow, CellTiming)>> {
        pending
            .par_iter()
            .map(|cell| {
                let start = Instant::now();
                let row = evaluate_cell(ev, cell, metric, n, seed)?;
                if let Some(j) = &journal {
                    let mut line = serde_json::to_string(&row)?;
                    line.push('\n');
                    let mut f = j.lock().expect("journal lock");
                    f.write_all(line.as_bytes())?;
                    f.flush()?;
                }
                let timing = CellTiming {
                    cell: *cell,
                    seconds: start.elapsed().as_secs_f64(),
                };
                Ok((row, timing))
            })
            .collect()
    };
    let finished = match opts.workers {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k.max(1))
            .build()
            .map_err(|e| Error::Internal(e.to_string()))?
            .install(work)?,
        None => work()?,
    };
    let mut timings = Vec::with_capacity(finished.len());
    for (row, t) in finished {
        done.insert(row.cell().key(), row);
        timings.push(t);
    }
    let rows: Vec<SweepRow> = cells.iter().filter_map(|c| done.remove(&c.key())).collect();
    let complete = rows.len() == cells.len();
    Ok(SweepOutcome {
        report: SweepReport::assemble(ev, metric, n, seed, rows),
        complete,
        resumed,
        timings,
    })
}

fn evaluate_cell(ev: &Evaluator, cell: &Cell, metric: Metric, n: usize, seed: u64) -> Result<SweepRow> {
    let guidance = cell.guidance(&ev.schedule)?;
    let (sigma_hi, sigma_lo) = match cell.indices() {
        Some((hi, lo)) => (Some(ev.schedule.sigma(hi)), Some(ev.schedule.sigma(lo))),
        None => (None, None),
    };
    let mut row = SweepRow {
        w: cell.w,
        interval: cell.interval,
        sigma_hi,
        sigma_lo,
        guided_steps: guidance.guided_steps(),
        n,
        nfe: None,
        loss: None,
        metrics: None,
        error: None,
    };
    match ev.evaluate(&guidance, n, seed, metric) {
        Ok(e) => {
            row.nfe = Some(e.nfe);
            row.loss = Some(e.loss);
            row.metrics = Some(e.metrics);
        }
        Err(e @ Error::SolverDivergence { .. }) => row.error = Some(e.to_string()),
        Err(e) => return Err(e),
    }
    Ok(row)
}

fn fingerprint(ev: &Evaluator, cells: &[Cell], metric: Metric, n: usize, seed: u64) -> String {
    let doc = serde_json::json!({
        "evaluator": ev.identity(),
        "metric": metric,
        "n": n,
        "seed": seed,
        "cells": cells,
    });
    let digest = Sha256::digest(doc.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct JournalHeader {
    journal: String,
    version: u32,
    fingerprint: String,
}

/// Read the finished rows of a journal and open it for appending.
///
/// A final line without a newline is a write cut short by a kill; it is
/// dropped and its cell evaluated again. Anything else unreadable is a
/// conflict.
fn open_journal(path: &Path, fingerprint: &str, resume: bool) -> Result<(Vec<SweepRow>, File)> {
    let conflict = |reason: &str| Error::ResumeConflict {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let header = JournalHeader {
        journal: JOURNAL_TAG.into(),
        version: JOURNAL_VERSION,
        fingerprint: fingerprint.into(),
    };
    if !path.exists() {
        let mut f = OpenOptions::new().create_new(true).write(true).open(path)?;
        writeln!(f, "{}", serde_json::to_string(&header)?)?;
        f.flush()?;
        return Ok((Vec::new(), f));
    }
    if !resume {
        return Err(conflict("a journal already exists; resume it or remove it"));
    }
    let mut reader = BufReader::new(File::open(path)?);
    let mut lines = Vec::new();
    let mut good_len = 0u64;
    loop {
        let mut line = String::new();
        let read = reader.read_line(&mut line)?;
        if read == 0 || !line.ends_with('\n') {
            break;
        }
        good_len += read as u64;
        lines.push(line);
    }
    let first = lines.first().ok_or_else(|| conflict("journal has no header"))?;
    let found: JournalHeader =
        serde_json::from_str(first).map_err(|_| conflict("journal header is corrupt"))?;
    if found.journal != JOURNAL_TAG || found.version != JOURNAL_VERSION {
        return Err(conflict("not a sweep journal of this version"));
    }
    if found.fingerprint != fingerprint {
        return Err(conflict("journal was written for a different configuration"));
    }
    let mut rows = Vec::with_capacity(lines.len() - 1);
    for (i, line) in lines.iter().enumerate().skip(1) {
        let row: SweepRow = serde_json::from_str(line)
            .map_err(|e| conflict(&format!("journal line {} is corrupt: {e}", i + 1)))?;
        rows.push(row);
    }
    let f = OpenOptions::new().write(true).open(path)?;
    f.set_len(good_len)?;
    let mut f = OpenOptions::new().append(true).open(path)?;
    f.flush()?;
    Ok((rows, f))
}

/// A search trail entry; `loss` is `None` when the evaluation failed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrailPoint {
    pub index: usize,
    pub loss: Option<f64>,
}

/// How each phase of [`two_phase_search`] explores its candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "strategy", rename_all = "lowercase")]
pub enum PhaseStrategy {
    /// Evaluate every candidate.
    #[default]
    Scan,
    /// Evaluate every `stride`-th candidate, then refine around the best
    /// with [`bisection_refine`].
    Bisection { stride: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPhaseOptions {
    /// Candidate `hi` indices; defaults to every index.
    pub hi: Option<Vec<usize>>,
    /// Candidate `lo` indices; defaults to every index.
    pub lo: Option<Vec<usize>>,
    pub metric: Metric,
    pub n: usize,
    pub seed: u64,
    pub strategy: PhaseStrategy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPhaseResult {
    pub schema_version: u32,
    pub w: f64,
    pub hi: usize,
    pub lo: usize,
    pub sigma_hi: f64,
    pub sigma_lo: f64,
    pub loss: f64,
    pub metrics: MetricsReport,
    /// `hi` candidates with `lo = N`.
    pub phase1: Vec<TrailPoint>,
    /// `lo` candidates with the phase-1 `hi`.
    pub phase2: Vec<TrailPoint>,
    pub evaluations: usize,
    /// Loss gap to a grid optimum, filled in by [`TwoPhaseResult::compare_to`].
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gap_to_grid: Option<f64>,
}

impl TwoPhaseResult {
    /// Record the loss gap to the best row of `report` with the same `w`.
    pub fn compare_to(&mut self, report: &SweepReport) -> Option<f64> {
        let best = report.best_at_w(self.w)?.loss?;
        self.gap_to_grid = Some(self.loss - best);
        self.gap_to_grid
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }
}

/// Tune `σ_hi` with `σ_lo = 0`, then `σ_lo` with that `σ_hi`.
pub fn two_phase_search(ev: &Evaluator, w: f64, opts: &TwoPhaseOptions) -> Result<TwoPhaseResult> {
    if !(w > 1.0 && w.is_finite()) {
        return Err(Error::input(format!("two-phase search needs w > 1, got {w}")));
    }
    ev.check_metric(opts.metric)?;
    let steps = ev.schedule.steps();
    let mut his = opts.hi.clone().unwrap_or_else(|| (0..steps).collect());
    let mut los = opts.lo.clone().unwrap_or_else(|| (1..=steps).collect());
    his.sort_unstable();
    his.dedup();
    los.sort_unstable();
    los.dedup();
    if his.is_empty() || los.is_empty() {
        return Err(Error::input("candidate lists must be non-empty"));
    }
    if his.iter().any(|&i| i >= steps) || los.iter().any(|&i| i == 0 || i > steps) {
        return Err(Error::input("candidate index outside the schedule"));
    }
    if opts.n < 100 {
        return Err(Error::input("samples per evaluation must be >= 100"));
    }

    let cache: Mutex<HashMap<(usize, usize), Option<Evaluation>>> = Mutex::new(HashMap::new());
    let eval = |hi: usize, lo: usize| -> Result<Option<f64>> {
        if let Some(e) = cache.lock().expect("cache lock").get(&(hi, lo)) {
            return Ok(e.as_ref().map(|e| e.loss));
        }
        let g = GuidanceSpec::from_interval(&ev.schedule, w, SnappedInterval::from_indices(hi, lo))?;
        let e = match ev.evaluate(&g, opts.n, opts.seed, opts.metric) {
            Ok(e) => Some(e),
            Err(Error::SolverDivergence { .. }) => None,
            Err(e) => return Err(e),
        };
        let loss = e.as_ref().map(|e| e.loss);
        cache.lock().expect("cache lock").insert((hi, lo), e);
        Ok(loss)
    };

    let phase1 = run_phase(&his, opts.strategy, |hi| eval(hi, steps))?;
    let hi = best_of(&phase1).ok_or_else(|| Error::Search("every sigma_hi candidate failed".into()))?;

    let mut phase2_candidates: Vec<usize> = los.iter().copied().filter(|&lo| lo > hi).collect();
    if !phase2_candidates.contains(&steps) {
        phase2_candidates.push(steps);
    }
    let phase2 = run_phase(&phase2_candidates, opts.strategy, |lo| eval(hi, lo))?;
    let lo = best_of(&phase2).ok_or_else(|| Error::Search("every sigma_lo candidate failed".into()))?;

    let cache = cache.into_inner().expect("cache lock");
    let evaluations = cache.len();
    let best = cache[&(hi, lo)].clone().expect("winner evaluated successfully");
    Ok(TwoPhaseResult {
        schema_version: REPORT_SCHEMA_VERSION,
        w,
        hi,
        lo,
        sigma_hi: ev.schedule.sigma(hi),
        sigma_lo: ev.schedule.sigma(lo),
        loss: best.loss,
        metrics: best.metrics,
        phase1,
        phase2,
        evaluations,
        gap_to_grid: None,
    })
}

fn run_phase(candidates: &[usize], strategy: PhaseStrategy, mut f: impl FnMut(usize) -> Result<Option<f64>>) -> Result<Vec<TrailPoint>> {
    let mut trail = Vec::new();
    match strategy {
        PhaseStrategy::Scan => {
            for &i in candidates {
                trail.push(TrailPoint { index: i, loss: f(i)? });
            }
        }
        PhaseStrategy::Bisection { stride } => {
            let stride = stride.max(1);
            let mut coarse: Vec<usize> = candidates.iter().copied().step_by(stride).collect();
            let last = *candidates.last().expect("non-empty candidates");
            if coarse.last() != Some(&last) {
                coarse.push(last);
            }
            for &i in &coarse {
                trail.push(TrailPoint { index: i, loss: f(i)? });
            }
            // Refinement only visits candidates, so map positions to indices.
            let pos_trail: Vec<(usize, f64)> = trail
                .iter()
                .map(|p| {
                    let pos = candidates.iter().position(|&c| c == p.index).expect("coarse point is a candidate");
                    (pos, p.loss.unwrap_or(f64::INFINITY))
                })
                .collect();
            let mut extra = Vec::new();
            bisection_refine(&pos_trail, |pos| {
                let i = candidates[pos];
                let loss = f(i)?;
                extra.push(TrailPoint { index: i, loss });
                Ok(loss.unwrap_or(f64::INFINITY))
            })?;
            trail.extend(extra);
        }
    }
    Ok(trail)
}

fn best_of(trail: &[TrailPoint]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for p in trail {
        if let Some(l) = p.loss {
            if best.is_none_or(|(i, b)| l < b || (l == b && p.index < i)) {
                best = Some((p.index, l));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Result of [`bisection_refine`] or [`golden_section_argmin`].
#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub index: usize,
    pub loss: f64,
    /// Calls made to the evaluator.
    pub evaluations: usize,
    /// `false` when the trail held no `left > middle < right` triple and the
    /// best trail point was returned as is.
    pub bracketed: bool,
}

/// Refine the best point of `trail` on the integer index axis.
///
/// The best trail point and its trail neighbours form the bracket; the
/// indices strictly between the neighbours are searched by Fibonacci
/// (discrete golden-section) search, reusing every value already known.
pub fn bisection_refine(trail: &[(usize, f64)], mut f: impl FnMut(usize) -> Result<f64>) -> Result<Refined> {
    let mut sorted: Vec<(usize, f64)> = trail.to_vec();
    sorted.sort_by_key(|p| p.0);
    sorted.dedup_by_key(|p| p.0);
    let (bi, &(best, best_loss)) = sorted
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.1.is_nan())
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .ok_or_else(|| Error::Search("empty trail".into()))?;
    let unbracketed = Refined {
        index: best,
        loss: best_loss,
        evaluations: 0,
        bracketed: false,
    };
    if bi == 0 || bi + 1 == sorted.len() {
        return Ok(unbracketed);
    }
    let (left, l_loss) = sorted[bi - 1];
    let (right, r_loss) = sorted[bi + 1];
    if !(l_loss > best_loss && r_loss > best_loss) {
        return Ok(unbracketed);
    }
    let mut known: HashMap<usize, f64> = sorted.iter().copied().collect();
    let mut evaluations = 0;
    let mut val = |i: usize| -> Result<f64> {
        if let Some(&v) = known.get(&i) {
            return Ok(v);
        }
        evaluations += 1;
        let v = f(i)?;
        known.insert(i, v);
        Ok(v)
    };
    let (index, loss) = fibonacci_search(left as i64, right as i64, &mut val)?;
    let (index, loss) = if loss <= best_loss { (index, loss) } else { (best, best_loss) };
    Ok(Refined {
        index,
        loss,
        evaluations,
        bracketed: true,
    })
}

/// Minimize a unimodal `f` over `range` with Fibonacci search.
pub fn golden_section_argmin(range: std::ops::Range<usize>, mut f: impl FnMut(usize) -> Result<f64>) -> Result<Refined> {
    if range.is_empty() {
        return Err(Error::input("empty search range"));
    }
    let mut known: HashMap<usize, f64> = HashMap::new();
    let mut evaluations = 0;
    let mut val = |i: usize| -> Result<f64> {
        if let Some(&v) = known.get(&i) {
            return Ok(v);
        }
        evaluations += 1;
        let v = f(i)?;
        known.insert(i, v);
        Ok(v)
    };
    let (index, loss) = fibonacci_search(range.start as i64 - 1, range.end as i64, &mut val)?;
    Ok(Refined {
        index,
        loss,
        evaluations,
        bracketed: true,
    })
}

/// Fibonacci search over the open integer interval `(a, b)`, which must
/// contain at least one point. Points at or beyond `b` count as `+∞`.
fn fibonacci_search(a: i64, b: i64, val: &mut impl FnMut(usize) -> Result<f64>) -> Result<(usize, f64)> {
    debug_assert!(b - a >= 2);
    let mut fib: Vec<i64> = vec![1, 1];
    while *fib.last().expect("non-empty") < b - a {
        let n = fib.len();
        fib.push(fib[n - 1] + fib[n - 2]);
    }
    let mut at = |x: i64| -> Result<f64> { if x >= b { Ok(f64::INFINITY) } else { val(x as usize) } };
    let mut lo = a;
    let mut k = fib.len() - 1;
    while fib[k] > 2 {
        let x1 = lo + fib[k - 2];
        let x2 = lo + fib[k - 1];
        if at(x1)? > at(x2)? {
            lo = x1;
        }
        k -= 1;
    }
    let x = lo + 1;
    Ok((x as usize, at(x)?))
}

/// Full sweep on few samples, then the best share on many.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenReport {
    pub schema_version: u32,
    pub n_small: usize,
    pub n_large: usize,
    pub shortlist_fraction: f64,
    pub screen: SweepReport,
    /// Shortlisted cells, ranked by their small-sample loss.
    pub shortlist: Vec<Cell>,
    /// Shortlisted cells evaluated with `n_large`; its best row is the winner.
    pub confirm: SweepReport,
}

impl ScreenReport {
    pub fn winner(&self) -> Option<&SweepRow> {
        self.confirm.best_row()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Screen `grid` with `n_small` samples per cell and re-evaluate the best
/// `fraction` of cells with `n_large`.
pub fn screen_then_confirm(
    ev: &Evaluator,
    grid: &SweepGrid,
    n_small: usize,
    n_large: usize,
    fraction: f64,
    opts: &SweepOptions,
) -> Result<ScreenReport> {
    if n_small > n_large {
        return Err(Error::input(format!("n_small ({n_small}) must not exceed n_large ({n_large})")));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::input(format!("shortlist fraction must be in (0, 1], got {fraction}")));
    }
    let small = SweepGrid { n: n_small, ..grid.clone() };
    let large = SweepGrid { n: n_large, ..grid.clone() };
    small.validate(&ev.schedule)?;
    large.validate(&ev.schedule)?;
    let plain = SweepOptions {
        workers: opts.workers,
        ..SweepOptions::default()
    };
    let screen = grid_sweep(ev, &small, &plain)?.report;
    let mut ranked: Vec<&SweepRow> = screen.rows.iter().filter(|r| r.loss.is_some()).collect();
    ranked.sort_by(|a, b| a.loss.unwrap().total_cmp(&b.loss.unwrap()));
    let keep = ((fraction * ranked.len() as f64).ceil() as usize).clamp(1.min(ranked.len()), ranked.len());
    let shortlist: Vec<Cell> = ranked[..keep].iter().map(|r| r.cell()).collect();
    let ordered: Vec<Cell> = large.cells().into_iter().filter(|c| shortlist.contains(c)).collect();
    let confirm = run_cells(ev, &ordered, grid.metric, n_large, grid.seed, &plain)?.report;
    Ok(ScreenReport {
        schema_version: REPORT_SCHEMA_VERSION,
        n_small,
        n_large,
        shortlist_fraction: fraction,
        screen,
        shortlist,
        confirm,
    })
}

/// Effect of guidance at a single step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepImportance {
    pub step: usize,
    pub sigma: f64,
    /// Loss with guidance at this step only.
    pub enable_loss: Option<f64>,
    /// `enable_loss − baseline_loss`.
    pub enable_delta: Option<f64>,
    /// Loss with guidance everywhere except this step.
    pub disable_loss: Option<f64>,
    /// `disable_loss − full_loss`.
    pub disable_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub w: f64,
    pub metric: Metric,
    pub n: usize,
    pub seed: u64,
    pub baseline_loss: f64,
    pub full_loss: f64,
    pub steps: Vec<StepImportance>,
}

impl AblationReport {
    /// `full_loss − baseline_loss`: the effect of guiding every step.
    pub fn full_delta(&self) -> f64 {
        self.full_loss - self.baseline_loss
    }

    /// Sum of the single-step enable deltas; `None` if any step failed.
    pub fn enable_delta_sum(&self) -> Option<f64> {
        self.steps.iter().map(|s| s.enable_delta).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Guidance switched on one step at a time, and off one step at a time.
pub fn step_importance_ablation(ev: &Evaluator, w: f64, metric: Metric, n: usize, seed: u64) -> Result<AblationReport> {
    if !w.is_finite() {
        return Err(Error::input(format!("guidance weight must be finite, got {w}")));
    }
    ev.check_metric(metric)?;
    let schedule = &ev.schedule;
    let steps = schedule.steps();
    let baseline = ev.evaluate(&GuidanceSpec::unguided(schedule), n, seed, metric)?.loss;
    let full = ev.evaluate(&GuidanceSpec::constant(schedule, w)?, n, seed, metric)?.loss;
    let profile = |a: usize, on: bool| -> Vec<f64> {
        (0..steps).map(|b| if (b == a) == on { w } else { 1.0 }).collect()
    };
    let run = |p: Vec<f64>| -> Result<Option<f64>> {
        let g = GuidanceSpec::custom_profile(schedule, p)?;
        match ev.evaluate(&g, n, seed, metric) {
            Ok(e) => Ok(Some(e.loss)),
            Err(Error::SolverDivergence { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let rows: Vec<StepImportance> = (0..steps)
        .into_par_iter()
        .map(|a| {
            let enable = run(profile(a, true))?;
            let disable = run(profile(a, false))?;
            Ok(StepImportance {
                step: a,
                sigma: schedule.sigma(a),
                enable_loss: enable,
                enable_delta: enable.map(|l| l - baseline),
                disable_loss: disable,
                disable_delta: disable.map(|l| l - full),
            })
        })
        .collect::<Result<_>>()?;
    Ok(AblationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        w,
        metric,
        n,
        seed,
        baseline_loss: baseline,
        full_loss: full,
        steps: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{rho_schedule, RhoScheduleParams};

    fn evaluator(steps: usize) -> Evaluator {
        let sched = rho_schedule(&RhoScheduleParams::edm(steps)).unwrap();
        Evaluator::new(Problem::one_d(), sched, Solver::Heun).unwrap()
    }

    #[test]
    fn metric_names_round_trip() {
        for m in Metric::ALL {
            assert_eq!(m.name().parse::<Metric>().unwrap(), m);
        }
        assert!("fid".parse::<Metric>().is_err());
    }

    #[test]
    fn recall_loss_prefers_any_feasible_point() {
        let mut m = MetricsReport {
            schema_version: 1,
            dim: 1,
            n_real: 1,
            n_gen: 1,
            frechet: 0.0,
            frechet_clipped: false,
            wasserstein1: None,
            k: Some(3),
            precision: Some(0.5),
            recall: Some(1.0),
            mode_masses: None,
            kl_hist: None,
            bins: 64,
        };
        let infeasible = Metric::Recall.loss(&m, 0.6).unwrap();
        m.precision = Some(0.7);
        m.recall = Some(0.01);
        let feasible = Metric::Recall.loss(&m, 0.6).unwrap();
        assert!(feasible < infeasible);
    }

    #[test]
    fn grid_validation() {
        let ev = evaluator(8);
        let mut g = SweepGrid::default_for(ev.schedule(), Metric::Frechet, 100, 0);
        assert!(g.validate(ev.schedule()).is_ok());
        g.lo.push(0);
        assert!(g.validate(ev.schedule()).is_err());
        let mut g = SweepGrid::default_for(ev.schedule(), Metric::Frechet, 99, 0);
        assert!(g.validate(ev.schedule()).is_err());
        g.n = 100;
        g.hi = vec![8];
        assert!(g.validate(ev.schedule()).is_err());
    }

    #[test]
    fn cells_are_baseline_then_non_empty_intervals() {
        let ev = evaluator(4);
        let g = SweepGrid {
            w: vec![2.0],
            hi: vec![0, 1, 2, 3],
            lo: vec![1, 2, 3, 4],
            metric: Metric::Frechet,
            n: 100,
            seed: 0,
        };
        let cells = g.cells();
        assert_eq!(cells[0], Cell::baseline());
        // Pairs hi < lo out of 4 × 4.
        assert_eq!(cells.len(), 1 + 10);
        assert!(cells[1..].iter().all(|c| !c.interval.is_empty()));
        assert!(g.validate(ev.schedule()).is_ok());
    }

    #[test]
    fn fibonacci_finds_every_argmin_of_a_v() {
        for target in 0..32usize {
            let r = golden_section_argmin(0..32, |i| Ok((i as f64 - target as f64).abs())).unwrap();
            assert_eq!(r.index, target);
            assert!(r.evaluations <= 9, "{} evaluations", r.evaluations);
        }
    }

    #[test]
    fn refine_without_interior_returns_at_once() {
        let r = bisection_refine(&[(3, 2.0), (4, 1.0), (5, 2.0)], |_| panic!("no evaluation expected")).unwrap();
        assert_eq!((r.index, r.evaluations, r.bracketed), (4, 0, true));
    }

    #[test]
    fn refine_flags_flat_trail() {
        let r = bisection_refine(&[(0, 1.0), (8, 1.0), (16, 1.0)], |_| Ok(1.0)).unwrap();
        assert!(!r.bracketed);
        assert!([0, 8, 16].contains(&r.index));
    }

    #[test]
    fn refine_respects_its_evaluation_bound() {
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        let bound = (41f64.ln() / phi.ln()).ceil() as usize + 2;
        for target in 11..=30usize {
            let f = |i: usize| (i as f64 - target as f64).abs() + 0.01 * i as f64;
            let trail = [(0, f(0)), (20, f(20)), (41, f(41))];
            let r = bisection_refine(&trail, |i| Ok(f(i))).unwrap();
            assert!(r.bracketed);
            assert_eq!(r.index, target);
            assert!(r.evaluations <= bound, "{} > {bound}", r.evaluations);
        }
    }
}
