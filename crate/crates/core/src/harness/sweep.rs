//! Width × learning-rate × seed grids with resumable cell storage.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{train, RunConfig, RunRecord};
use crate::data::ShardSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub base: RunConfig,
    pub widths: Vec<usize>,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.alphas.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidRun("sweep grid is empty".into()));
        }
        if self.alphas.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidRun("alphas must be strictly increasing".into()));
        }
        if self.widths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidRun("widths must be strictly increasing".into()));
        }
        self.base.validate()
    }

    /// Every cell configuration, width-major, then α, then seed.
    pub fn runs(&self) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for &w in &self.widths {
            for &a in &self.alphas {
                for &s in &self.seeds {
                    out.push(self.base.cell(w, a, s));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRun {
    pub seed: u64,
    pub config_hash: String,
    pub best_val_loss: Option<f64>,
    pub diverged: bool,
    /// Set when the run failed for a reason other than divergence.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub width: usize,
    pub alpha: f64,
    pub runs: Vec<CellRun>,
    /// Mean best validation loss; `None` when the cell is excluded.
    pub mean: Option<f64>,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub std: Option<f64>,
    pub diverged: usize,
    pub failed: usize,
}

impl SweepCell {
    /// Aggregates seeds. A cell with any diverged or failed seed is excluded.
    pub fn from_runs(width: usize, alpha: f64, runs: Vec<CellRun>) -> Self {
        let diverged = runs.iter().filter(|r| r.diverged).count();
        let failed = runs.iter().filter(|r| r.error.is_some()).count();
        let losses: Vec<f64> = runs.iter().filter_map(|r| r.best_val_loss).collect();
        let usable = diverged == 0 && failed == 0 && !runs.is_empty() && losses.len() == runs.len();
        let (mean, std) = if usable {
            let (m, s) = mean_std(&losses);
            (Some(m), Some(s))
        } else {
            (None, None)
        };
        SweepCell {
            width,
            alpha,
            runs,
            mean,
            std,
            diverged,
            failed,
        }
    }

    /// A cell known only by its summary, as in a published table.
    pub fn summary(width: usize, alpha: f64, mean: Option<f64>, std: Option<f64>) -> Self {
        SweepCell {
            width,
            alpha,
            runs: Vec::new(),
            mean,
            std,
            diverged: usize::from(mean.is_none()),
            failed: 0,
        }
    }
}

/// Mean and sample standard deviation (`n − 1` denominator, 0 when `n = 1`).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub widths: Vec<usize>,
    /// Ascending.
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Width-major, α ascending within a width.
    pub cells: Vec<SweepCell>,
}

impl SweepRecord {
    pub fn cell(&self, width_index: usize, alpha_index: usize) -> &SweepCell {
        &self.cells[width_index * self.alphas.len() + alpha_index]
    }

    pub fn row(&self, width_index: usize) -> &[SweepCell] {
        let n = self.alphas.len();
        &self.cells[width_index * n..(width_index + 1) * n]
    }

    /// Builds a record from mean losses, one row per width; `None` marks a
    /// diverged cell.
    pub fn from_means(widths: &[usize], alphas: &[f64], means: &[Vec<Option<f64>>]) -> Result<Self> {
        if means.len() != widths.len() || means.iter().any(|r| r.len() != alphas.len()) {
            return Err(Error::InvalidRun("mean table does not match the grid".into()));
        }
        let cells = widths
            .iter()
            .zip(means)
            .flat_map(|(&w, row)| {
                alphas
                    .iter()
                    .zip(row)
                    .map(move |(&a, &m)| SweepCell::summary(w, a, m, m.map(|_| 0.0)))
            })
            .collect();
        Ok(SweepRecord {
            widths: widths.to_vec(),
            alphas: alphas.to_vec(),
            seeds: Vec::new(),
            cells,
        })
    }

    /// Index of the α with the lowest mean loss at each width, ties going to
    /// the smaller α. `None` when every cell of the row is excluded.
    pub fn argmins(&self) -> Vec<Option<usize>> {
        (0..self.widths.len())
            .map(|wi| {
                let mut best: Option<(usize, f64)> = None;
                for (ai, cell) in self.row(wi).iter().enumerate() {
                    if let Some(m) = cell.mean {
                        if best.map_or(true, |(_, b)| m < b) {
                            best = Some((ai, m));
                        }
                    }
                }
                best.map(|(ai, _)| ai)
            })
            .collect()
    }
}

/// Where finished cells are kept: one `RunRecord` JSON per config hash.
#[derive(Clone, Debug)]
pub struct CellStore {
    dir: PathBuf,
}

impl CellStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        CellStore { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("{hash}.json"))
    }

    /// A stored record for `hash`, if one exists and is readable.
    pub fn load(&self, hash: &str) -> Option<RunRecord> {
        let text = fs::read_to_string(self.path(hash)).ok()?;
        let record: RunRecord = serde_json::from_str(&text).ok()?;
        (record.config_hash == hash).then_some(record)
    }

    pub fn store(&self, record: &RunRecord) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.path(&record.config_hash);
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(record)
            .map_err(|e| Error::format(&path, e.to_string()))?;
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SweepOptions {
    pub workers: usize,
    /// Print one line per finished cell to stderr.
    pub progress: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            workers: 1,
            progress: false,
        }
    }
}

/// Runs every missing cell of `cfg` and aggregates all of them.
///
/// Cells already in `store` are reused without retraining. Independent
/// runs execute on up to `options.workers` threads; each run itself is
/// single-threaded, so results do not depend on the worker count.
pub fn lr_sweep(
    cfg: &SweepConfig,
    shards: &ShardSet,
    store: &CellStore,
    options: SweepOptions,
) -> Result<SweepRecord> {
    cfg.validate()?;
    let runs = cfg.runs();
    let hashes: Vec<String> = runs.iter().map(|r| r.hash()).collect();
    let pending: Vec<usize> = (0..runs.len())
        .filter(|&i| store.load(&hashes[i]).is_none())
        .collect();

    let failures: Mutex<Vec<(usize, String)>> = Mutex::new(Vec::new());
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let k = next.fetch_add(1, Ordering::SeqCst);
        let Some(&i) = pending.get(k) else { break };
        let run = &runs[i];
        let result = train(run, shards, None).and_then(|rec| {
            store.store(&rec)?;
            Ok(rec)
        });
        match result {
            Ok(rec) => {
                if options.progress {
                    eprintln!(
                        "[{}/{}] width={} alpha={} seed={} best={:?} diverged={} ({:.1}s)",
                        k + 1,
                        pending.len(),
                        run.model.width,
                        run.plan.alpha,
                        run.seed,
                        rec.best_val_loss,
                        rec.diverged,
                        rec.wall_clock_secs
                    );
                }
            }
            Err(e) => failures.lock().unwrap().push((i, e.to_string())),
        }
    };
    let workers = options.workers.clamp(1, pending.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(worker);
        }
    });
    let failures = failures.into_inner().unwrap();

    let mut cells = Vec::new();
    let per_cell = cfg.seeds.len();
    for (c, chunk) in runs.chunks(per_cell).enumerate() {
        let mut cell_runs = Vec::with_capacity(per_cell);
        for (j, run) in chunk.iter().enumerate() {
            let i = c * per_cell + j;
            let hash = &hashes[i];
            let failure = failures.iter().find(|(k, _)| *k == i).map(|(_, e)| e.clone());
            let cell_run = match (failure, store.load(hash)) {
                (None, Some(rec)) => CellRun {
                    seed: run.seed,
                    config_hash: hash.clone(),
                    best_val_loss: rec.best_val_loss,
                    diverged: rec.diverged,
                    error: None,
                },
                (err, _) => CellRun {
                    seed: run.seed,
                    config_hash: hash.clone(),
                    best_val_loss: None,
                    diverged: false,
                    error: Some(err.unwrap_or_else(|| "record missing after run".into())),
                },
            };
            cell_runs.push(cell_run);
        }
        cells.push(SweepCell::from_runs(
            chunk[0].model.width,
            chunk[0].plan.alpha,
            cell_runs,
        ));
    }
    Ok(SweepRecord {
        widths: cfg.widths.clone(),
        alphas: cfg.alphas.clone(),
        seeds: cfg.seeds.clone(),
        cells,
    })
}
