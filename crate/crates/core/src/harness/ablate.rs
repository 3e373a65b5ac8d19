use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::thread_count;
use super::train::{load_checkpoint, train};
use super::variant::{Mechanism, PoseVariant};
use crate::dit::DenoiserModel;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalReport, Metrics, TrackerConfig};
use crate::world::Dataset;

/// One row of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cell {
    pub name: String,
    pub variant: PoseVariant,
    #[serde(default)]
    pub mechanism: Option<Mechanism>,
    /// Evaluate the freshly initialized network without training.
    #[serde(default)]
    pub untrained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub base: RunConfig,
    pub seeds: Vec<u64>,
    #[serde(rename = "cell")]
    pub cells: Vec<Cell>,
}

impl GridConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let g: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut g: Self = toml::from_str(&text).map_err(|e| Error::format(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if g.base.dataset.is_relative() {
            g.base.dataset = base.join(&g.base.dataset);
        }
        if g.base.out_dir.is_relative() {
            g.base.out_dir = base.join(&g.base.out_dir);
        }
        g.validate().map_err(|e| Error::format(path, e))?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.seeds.is_empty() || self.cells.is_empty() {
            return Err(Error::Config("grid needs at least one seed and one cell".into()));
        }
        for (i, c) in self.cells.iter().enumerate() {
            if c.name.is_empty() || c.name.contains(['/', '\\', ',', '"']) {
                return Err(Error::Config(format!(
                    "cell name `{}` is not usable as a directory",
                    c.name
                )));
            }
            if self.cells[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::Config(format!("duplicate cell name `{}`", c.name)));
            }
        }
        Ok(())
    }

    /// Run config of one cell and seed.
    pub fn run_config(&self, cell: &Cell, seed: u64) -> RunConfig {
        let mut cfg = self.base.clone();
        cfg.variant = cell.variant;
        if let Some(m) = cell.mechanism {
            cfg.mechanism = m;
        }
        cfg.seed = seed;
        cfg.out_dir = self.base.out_dir.join(&cell.name).join(format!("seed_{seed}"));
        cfg
    }
}

pub fn eval_options(cfg: &RunConfig, checkpoint: &str) -> EvalOptions {
    EvalOptions {
        schedule: cfg.schedule,
        guidance: cfg.guidance,
        tracker: TrackerConfig::default(),
        seed: cfg.seed,
        split: cfg.eval.split,
        max_clips: cfg.eval.max_clips,
        checkpoint: checkpoint.to_string(),
    }
}

/// Trains (unless `untrained`) and evaluates one run, writing `eval.json`
/// next to its checkpoint.
pub fn run_cell(cfg: &RunConfig, untrained: bool) -> Result<EvalReport> {
    let dataset = Dataset::open(&cfg.dataset)?;
    let (model, name) = if untrained {
        (
            DenoiserModel::new(cfg.dit_config(dataset.config())?)?,
            "untrained".to_string(),
        )
    } else {
        let ckpt = train(cfg)?;
        (load_checkpoint(&ckpt)?.0, ckpt.display().to_string())
    };
    let report = evaluate(&model, cfg.variant, &dataset, &eval_options(cfg, &name))?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    report.write(&cfg.out_dir.join("eval.json"))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub cell: Cell,
    pub mechanism: Mechanism,
    pub per_seed: Vec<Metrics>,
    pub mean: Metrics,
    /// Sample standard deviation across seeds (zero for a single seed).
    pub sd: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn fields(m: &Metrics) -> [f64; 5] {
    [m.ssim, m.trans_error, m.rot_error, m.miou, m.presence_accuracy]
}

fn from_fields(v: [f64; 5]) -> Metrics {
    Metrics {
        ssim: v[0],
        trans_error: v[1],
        rot_error: v[2],
        miou: v[3],
        presence_accuracy: v[4],
    }
}

fn mean_sd(runs: &[Metrics]) -> (Metrics, Metrics) {
    let n = runs.len() as f64;
    let mut mean = [0.0; 5];
    for r in runs {
        for (m, v) in mean.iter_mut().zip(fields(r)) {
            *m += v / n;
        }
    }
    let mut sd = [0.0; 5];
    if runs.len() > 1 {
        for r in runs {
            for ((s, v), m) in sd.iter_mut().zip(fields(r)).zip(mean) {
                *s += (v - m) * (v - m) / (n - 1.0);
            }
        }
        sd.iter_mut().for_each(|s| *s = s.sqrt());
    }
    (from_fields(mean), from_fields(sd))
}

pub const CSV_HEADER: [&str; 14] = [
    "name",
    "variant",
    "mechanism",
    "seeds",
    "SSIM",
    "TransError",
    "RotError",
    "mIoU",
    "Acc%",
    "SSIM_sd",
    "TransError_sd",
    "RotError_sd",
    "mIoU_sd",
    "Acc%_sd",
];

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.cell.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![
                r.cell.name.clone(),
                r.cell.variant.to_string(),
                r.mechanism.to_string(),
                r.per_seed.len().to_string(),
            ];
            rec.extend(fields(&r.mean).iter().chain(&fields(&r.sd)).map(|v| format!("{v:.6}")));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }
}

/// Trains and evaluates every cell under every seed, in parallel across
/// runs when the thread-count variable allows it.
pub fn ablate(grid: &GridConfig) -> Result<AblationTable> {
    grid.validate()?;
    let jobs: Vec<(usize, u64)> = (0..grid.cells.len())
        .flat_map(|c| grid.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results: Mutex<Vec<Option<Result<Metrics>>>> = Mutex::new(jobs.iter().map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = thread_count().min(jobs.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(c, seed)) = jobs.get(k) else { break };
                let cell = &grid.cells[c];
                let cfg = grid.run_config(cell, seed);
                log::info!("ablation cell {} seed {seed}", cell.name);
                let r = run_cell(&cfg, cell.untrained).map(|rep| rep.aggregate);
                results.lock().expect("no worker panicked")[k] = Some(r);
            });
        }
    });
    let results = results.into_inner().expect("no worker panicked");
    let mut rows = Vec::with_capacity(grid.cells.len());
    let mut it = results.into_iter();
    for cell in &grid.cells {
        let mut per_seed = Vec::with_capacity(grid.seeds.len());
        for _ in &grid.seeds {
            per_seed.push(it.next().flatten().expect("every job ran")?);
        }
        let (mean, sd) = mean_sd(&per_seed);
        rows.push(AblationRow {
            cell: cell.clone(),
            mechanism: cell.mechanism.unwrap_or(grid.base.mechanism),
            per_seed,
            mean,
            sd,
        });
    }
    Ok(AblationTable { rows })
}
