//! The training loop around [`TrainState`]: batches, checkpoints and the
//! loss history file.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use semi_llie_core::data::{make_batch, SampleSource, TrainBatch};
use semi_llie_core::encoder::{build_test_encoder, ConvPyramid};
use semi_llie_core::train::{LossRecord, TrainConfig, TrainState};

use crate::archive::{load_external_encoder, state_from_archive, state_to_archive, Archive};
use crate::error::{io_err, Result};

pub const DETERMINISTIC_ENV: &str = "SEMI_LLIE_DETERMINISTIC";
pub const HISTORY_FILE: &str = "loss_history.tsv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Batches built ahead of the step consuming them.
const PREFETCH_DEPTH: usize = 2;

/// `SEMI_LLIE_DETERMINISTIC=1` in the environment.
pub fn deterministic_from_env() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v.trim() == "1")
}

#[derive(Clone, Debug)]
pub struct FitOptions {
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    /// Build every batch on the training thread, with no prefetch worker.
    pub deterministic: bool,
}

#[derive(Clone, Debug, Default)]
pub struct FitSummary {
    pub start_step: u64,
    pub final_step: u64,
    pub last: Option<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_name(epoch: u64) -> String {
    format!("checkpoint_epoch{epoch:04}.ckpt")
}

/// The configured perceptual encoder: the seeded built-in one when no
/// weights file is set.
pub fn build_encoder(cfg: &TrainConfig) -> Result<ConvPyramid<f32>> {
    if cfg.encoder_weights.is_empty() {
        Ok(build_test_encoder(cfg.encoder_seed))
    } else {
        load_external_encoder(Path::new(&cfg.encoder_weights))
    }
}

/// Keep only history lines of steps before `step`.
fn truncate_history(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut kept = String::new();
    for line in reader.lines() {
        let line = line.map_err(io_err(path))?;
        let s = line.split('\t').next().and_then(|s| s.parse::<u64>().ok());
        if s.is_some_and(|s| s < step) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(io_err(path))
}

fn write_record(out: &mut impl Write, r: &LossRecord) -> std::io::Result<()> {
    for (name, v) in r.entries() {
        writeln!(out, "{}\t{}\t{name}\t{v:e}", r.step, r.epoch)?;
    }
    Ok(())
}

fn save_state(state: &TrainState<f32>, path: PathBuf, saved: &mut Vec<PathBuf>) -> Result<()> {
    state_to_archive(state).save(&path)?;
    log::info!("saved {}", path.display());
    saved.push(path);
    Ok(())
}

/// Train on `source` until the configured step count, starting fresh or
/// from `opts.resume`. Writes checkpoints and the loss history into
/// `opts.out_dir`.
pub fn fit<S>(cfg: &TrainConfig, source: &S, opts: &FitOptions) -> Result<FitSummary>
where
    S: SampleSource<f32> + Sync,
{
    cfg.validate()?;
    std::fs::create_dir_all(&opts.out_dir).map_err(io_err(&opts.out_dir))?;
    let encoder = build_encoder(cfg)?;
    let mut state = match &opts.resume {
        Some(p) => {
            let s = state_from_archive(&Archive::load(p)?, Some(cfg))?;
            log::info!("resuming from {} at step {}", p.display(), s.step());
            s
        }
        None => TrainState::new(cfg.clone())?,
    };
    let history = opts.out_dir.join(HISTORY_FILE);
    truncate_history(&history, state.step())?;
    let mut hist = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&history)
            .map_err(io_err(&history))?,
    );

    let plan = cfg.batch_plan(source.paired_len(), source.unpaired_len());
    plan.validate()?;
    let per_epoch = plan.steps_per_epoch() as u64;
    let total = cfg.total_steps(source.paired_len());
    let policy = cfg.augmentation();
    let batch_at = |step: u64| make_batch(source, &plan, cfg.crop, &policy, step);
    let mut summary = FitSummary {
        start_step: state.step(),
        ..Default::default()
    };

    let mut consume = |state: &mut TrainState<f32>, batch: TrainBatch<f32>| -> Result<()> {
        for w in &batch.warnings {
            log::warn!("{w}");
        }
        let epoch = plan.epoch_of(batch.step);
        let rec = state.train_step(&encoder, &batch, u32::try_from(epoch).unwrap_or(u32::MAX))?;
        write_record(&mut hist, &rec).map_err(io_err(&history))?;
        log::debug!("step {} total {:.5}", rec.step, rec.total);
        let done = state.step();
        if done.is_multiple_of(per_epoch) {
            let finished = done / per_epoch;
            log::info!("epoch {finished} done, total loss {:.5}", rec.total);
            if cfg.checkpoint_every > 0 && finished.is_multiple_of(u64::from(cfg.checkpoint_every))
            {
                hist.flush().map_err(io_err(&history))?;
                save_state(
                    state,
                    opts.out_dir.join(checkpoint_name(finished)),
                    &mut summary.checkpoints,
                )?;
            }
        }
        summary.last = Some(rec);
        Ok(())
    };

    let start = state.step();
    if opts.deterministic {
        for step in start..total {
            consume(&mut state, batch_at(step)?)?;
        }
    } else {
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = mpsc::sync_channel(PREFETCH_DEPTH);
            scope.spawn(move || {
                for step in start..total {
                    // a closed channel means the trainer stopped early
                    if tx.send(batch_at(step)).is_err() {
                        break;
                    }
                }
            });
            for batch in rx {
                consume(&mut state, batch?)?;
            }
            Ok(())
        })?;
    }

    hist.flush().map_err(io_err(&history))?;
    save_state(
        &state,
        opts.out_dir.join(LAST_CHECKPOINT),
        &mut summary.checkpoints,
    )?;
    summary.final_step = state.step();
    Ok(summary)
}
