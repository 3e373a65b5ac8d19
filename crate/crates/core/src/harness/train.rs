use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::dit::{DenoiserModel, DiTConfig, LatentVideo};
use crate::edm::{context_dropout, training_loss, TrainingExample};
use crate::error::{Error, Result};
use crate::numeric::{checkpoint, derive_seed, rng_from, Graph};
use crate::se3::ControlTensor;
use crate::world::{Dataset, Split};

const STREAM_BATCH: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const STREAM_NOISE: u64 = 3;

const EMA_DECAY: f64 = 0.98;

/// Everything beyond the parameters that a resumed run needs. Randomness is
/// counter-based (seed and step), so the step count is the RNG state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub step: usize,
    pub seed: u64,
    pub loss_ema: f64,
    pub loss_sum: f64,
    pub last_loss: f64,
    /// Seconds spent in earlier sessions of this run.
    pub wall_time: f64,
}

impl TrainState {
    fn fresh(seed: u64) -> Self {
        Self {
            step: 0,
            seed,
            loss_ema: 0.0,
            loss_sum: 0.0,
            last_loss: 0.0,
            wall_time: 0.0,
        }
    }

    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.step.max(1) as f64
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub loss_ema: f64,
    pub wall_time: f64,
}

/// Training clips held in memory as latents plus their control tensors.
pub struct TrainData {
    pub clips: Vec<(usize, LatentVideo, ControlTensor)>,
}

impl TrainData {
    pub fn load(config: &RunConfig, dataset: &Dataset, model: &DiTConfig) -> Result<Self> {
        let tok = dataset.tokenizer();
        let mut clips = Vec::new();
        for id in dataset.ids(Split::Train) {
            let clip = dataset.load_clip(id)?;
            let latent = tok.tokenize(&clip.frames, clip.context_frames)?;
            if latent.geometry() != model.geometry() {
                return Err(Error::Geometry(format!(
                    "clip {id} tokenizes to {:?}, model expects {:?}",
                    latent.geometry(),
                    model.geometry()
                )));
            }
            let control = config.variant.control(&clip.control_window()?);
            clips.push((id, latent, control));
        }
        if clips.is_empty() {
            return Err(Error::Data(format!(
                "no training clips in {}",
                dataset.root().display()
            )));
        }
        Ok(Self { clips })
    }
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: DenoiserModel,
    pub state: TrainState,
    data: TrainData,
    started: Instant,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

/// Writes the model, optimizer state and run metadata into `dir`, replacing
/// any earlier checkpoint only once the new one is complete.
pub fn save_checkpoint(dir: &Path, model: &DenoiserModel, state: &TrainState, config: &RunConfig) -> Result<()> {
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    checkpoint::save(&model.store, &tmp, true)?;
    model.config.save(&tmp.join("model.json"))?;
    write_json(&tmp.join("state.json"), state)?;
    let run = tmp.join("run.toml");
    fs::write(&run, config.to_toml()).map_err(|e| Error::io(&run, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

/// Loads a checkpoint's model; the train state is absent for bare weights.
pub fn load_checkpoint(dir: &Path) -> Result<(DenoiserModel, Option<TrainState>)> {
    let cfg = DiTConfig::load(&dir.join("model.json"))?;
    let mut model = DenoiserModel::new(cfg)?;
    checkpoint::load_into(&mut model.store, dir)?;
    let state_path = dir.join("state.json");
    let state = if state_path.exists() {
        Some(read_json(&state_path)?)
    } else {
        None
    };
    Ok((model, state))
}

impl Trainer {
    /// Resumes from the run's checkpoint when one exists, else starts fresh.
    pub fn open(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let dataset = Dataset::open(&config.dataset)?;
        let dit = config.dit_config(dataset.config())?;
        let data = TrainData::load(&config, &dataset, &dit)?;
        fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
        let ckpt = config.checkpoint_dir();
        let (model, state) = if ckpt.join("state.json").exists() {
            let (model, state) = load_checkpoint(&ckpt)?;
            if model.config != dit {
                return Err(Error::format(
                    &ckpt,
                    "checkpoint model does not match the run config; use a fresh out_dir",
                ));
            }
            let state = state.expect("state.json checked above");
            if state.seed != config.seed {
                return Err(Error::format(
                    &ckpt,
                    format!("checkpoint seed {} != run seed {}", state.seed, config.seed),
                ));
            }
            truncate_log(&config.log_path(), state.step)?;
            log::info!("resuming {} at step {}", config.out_dir.display(), state.step);
            (model, state)
        } else {
            let log_path = config.log_path();
            if log_path.exists() {
                fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
            }
            (DenoiserModel::new(dit)?, TrainState::fresh(config.seed))
        };
        Ok(Self {
            config,
            model,
            state,
            data,
            started: Instant::now(),
        })
    }

    pub fn data(&self) -> &TrainData {
        &self.data
    }

    /// Clip indices, context-dropout flags and noise seed for `step`.
    pub fn batch_plan(&self, step: usize) -> (Vec<usize>, Vec<bool>, u64) {
        let b = self.config.optimizer.batch_size;
        let mut rng = rng_from(self.config.seed, &[STREAM_BATCH, step as u64]);
        let idx = (0..b).map(|_| rng.gen_range(0..self.data.clips.len())).collect();
        let p = self.config.guidance.context_dropout_prob;
        let nulls = context_dropout(b, p, derive_seed(self.config.seed, &[STREAM_DROPOUT, step as u64]));
        (idx, nulls, derive_seed(self.config.seed, &[STREAM_NOISE, step as u64]))
    }

    /// Loss graph for `step` with gradients accumulated into the store but
    /// no optimizer update.
    pub fn forward_backward(&mut self, step: usize) -> Result<f64> {
        let (idx, nulls, seed) = self.batch_plan(step);
        let batch: Vec<TrainingExample> = idx
            .iter()
            .zip(&nulls)
            .map(|(&i, &null_context)| TrainingExample {
                clean: &self.data.clips[i].1,
                control: &self.data.clips[i].2,
                null_context,
            })
            .collect();
        let mut g = Graph::new();
        let flags = self.model.flags();
        let loss = training_loss(&mut g, &self.model, &batch, &self.config.schedule, seed, flags)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            let ids: Vec<usize> = idx.iter().map(|&i| self.data.clips[i].0).collect();
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("loss {value}, clips {ids:?}, noise seed {seed}"),
            });
        }
        g.backward(loss, &mut self.model.store)?;
        Ok(value)
    }

    /// One optimizer step, logged and checkpointed on the configured
    /// interval; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let step = self.state.step;
        let loss = self.forward_backward(step)?;
        self.model.store.adam_step(&self.config.optimizer.adam())?;
        let s = &mut self.state;
        s.step += 1;
        s.last_loss = loss;
        s.loss_sum += loss;
        s.loss_ema = if s.step == 1 {
            loss
        } else {
            EMA_DECAY * s.loss_ema + (1.0 - EMA_DECAY) * loss
        };
        let rec = LogRecord {
            step: s.step,
            loss,
            loss_ema: s.loss_ema,
            wall_time: s.wall_time + self.started.elapsed().as_secs_f64(),
        };
        let path = self.config.log_path();
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let line = serde_json::to_string(&rec).map_err(|e| Error::format(&path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        let every = self.config.checkpoint_every;
        if every > 0 && self.state.step.is_multiple_of(every) {
            self.save()?;
        }
        Ok(loss)
    }

    pub fn save(&mut self) -> Result<()> {
        let mut state = self.state.clone();
        state.wall_time += self.started.elapsed().as_secs_f64();
        save_checkpoint(&self.config.checkpoint_dir(), &self.model, &state, &self.config)
    }

    /// Trains up to `until` steps (capped by the configured iterations) and
    /// checkpoints at the end.
    pub fn run_until(&mut self, until: usize) -> Result<()> {
        let until = until.min(self.config.optimizer.iterations);
        if self.state.step >= until {
            return Ok(());
        }
        while self.state.step < until {
            let loss = self.step()?;
            let step = self.state.step;
            if step.is_multiple_of(50) || step == 1 {
                log::info!("step {step}: loss {loss:.5} (ema {:.5})", self.state.loss_ema);
            }
        }
        let every = self.config.checkpoint_every;
        if every == 0 || !until.is_multiple_of(every) {
            self.save()?;
        }
        Ok(())
    }
}

/// Keeps the log lines at or before `step`, dropping those of steps lost to
/// an interruption.
fn truncate_log(path: &Path, step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in text.lines() {
        let rec: LogRecord = serde_json::from_str(line).map_err(|e| Error::format(path, e))?;
        if rec.step <= step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Trains the configured run to completion and returns its checkpoint.
pub fn train(config: &RunConfig) -> Result<PathBuf> {
    let mut t = Trainer::open(config.clone())?;
    t.run_until(config.optimizer.iterations)?;
    Ok(config.checkpoint_dir())
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e)))
        .collect()
}
