//! Shared fixtures for the end-to-end checks: the 32x32 synthetic dataset,
//! the pretrained embedders and the trained models, all cached on disk so a
//! second run only evaluates.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use styleswap_core::checkpoint::Archive;
use styleswap_core::embedders::{pretrain_all, EmbedderSet};
use styleswap_core::networks::{GeneratorConfig, Model, ModelConfig};
use styleswap_core::synth::{stream_rng, Dataset, DatasetSpec};
use styleswap_core::training::{train, LossReport, RunDir, TrainConfig, TrainState};
use styleswap_core::Result;

pub const RESOLUTION: usize = 32;
pub const IDENTITIES: usize = 20;
pub const FRAMES: usize = 50;
pub const STYLE_DIM: usize = 64;
pub const CHANNELS: [usize; 4] = [32, 32, 16, 16];
pub const STEPS: u64 = 20_000;
pub const BATCH: usize = 16;
pub const SEEDS: [u64; 3] = [0, 1, 2];
const EMBEDDER_SEED: u64 = 0;
pub const CHECKPOINT_INTERVAL: u64 = 1000;

/// Root of the cache; `STYLESWAP_ACCEPTANCE_CACHE` overrides the default
/// under the workspace target directory.
pub fn cache_dir() -> PathBuf {
    match std::env::var_os("STYLESWAP_ACCEPTANCE_CACHE") {
        Some(p) => PathBuf::from(p),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance-cache"),
    }
}

pub fn dataset_spec() -> DatasetSpec {
    DatasetSpec {
        num_identities: IDENTITIES,
        frames_per_identity: FRAMES,
        resolution: RESOLUTION,
        seed: 0,
    }
}

pub fn dataset() -> Result<Dataset> {
    Dataset::generate(dataset_spec())
}

pub fn model_config() -> ModelConfig {
    ModelConfig::from_generator(GeneratorConfig::with_channels(CHANNELS.to_vec(), STYLE_DIM))
}

/// Full model: mask stage over the second half of training.
pub fn full_config(seed: u64) -> TrainConfig {
    TrainConfig {
        steps: STEPS,
        batch_size: BATCH,
        seed,
        checkpoint_interval: CHECKPOINT_INTERVAL,
        ..TrainConfig::default()
    }
}

/// Same schedule with the mask stage never reached.
pub fn ablation_config(seed: u64) -> TrainConfig {
    TrainConfig {
        mask_stage_start: Some(STEPS),
        ..full_config(seed)
    }
}

/// Loads the cached embedders or pretrains and caches them.
pub fn embedders() -> Result<EmbedderSet<f32>> {
    let path = cache_dir().join("embedders.bin");
    if path.exists() {
        return EmbedderSet::from_archive(&Archive::load(&path)?);
    }
    fs::create_dir_all(cache_dir()).map_err(|e| io(&path, e))?;
    let set = pretrain_all::<f32>(RESOLUTION, EMBEDDER_SEED, |name, step, loss| {
        if step % 500 == 0 {
            progress(&format!("pretrain {name} step {step} loss {loss:.4}"));
        }
    })?;
    set.to_archive()?.save(&path)?;
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoMask,
}

impl Variant {
    fn dir_name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMask => "no-mask",
        }
    }

    pub fn config(self, seed: u64) -> TrainConfig {
        match self {
            Variant::Full => full_config(seed),
            Variant::NoMask => ablation_config(seed),
        }
    }
}

pub fn run_dir(seed: u64, variant: Variant) -> PathBuf {
    cache_dir().join(format!("seed-{seed}")).join(variant.dir_name())
}

/// Wall-clock seconds spent on each segment of a run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timing {
    pub segments: Vec<(u64, u64, f64)>,
}

impl Timing {
    fn path(dir: &Path) -> PathBuf {
        dir.join("timing.json")
    }

    pub fn load(dir: &Path) -> Self {
        fs::read(Self::path(dir))
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default()
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let path = Self::path(dir);
        fs::write(&path, serde_json::to_vec(self)?).map_err(|e| io(&path, e))
    }

    /// Seconds per training step across all segments.
    pub fn seconds_per_step(&self) -> Option<f64> {
        let steps: u64 = self.segments.iter().map(|(a, b, _)| b - a).sum();
        let secs: f64 = self.segments.iter().map(|s| s.2).sum();
        (steps > 0).then(|| secs / steps as f64)
    }
}

/// A finished run on disk.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub seed: u64,
    pub variant: Variant,
    pub dir: PathBuf,
}

impl TrainedRun {
    pub fn final_path(&self) -> PathBuf {
        self.dir.join("final.bin")
    }

    /// All log records, in step order.
    pub fn log(&self) -> Result<Vec<serde_json::Value>> {
        read_log(&self.dir.join("log.jsonl"))
    }

    pub fn timing(&self) -> Timing {
        Timing::load(&self.dir)
    }
}

/// Trains (or finishes training) the given run and returns it.
///
/// Interrupted runs resume from their newest checkpoint. The ablation starts
/// from the full run's checkpoint at the mask stage boundary, since both
/// runs are identical up to that step.
pub fn ensure_run(seed: u64, variant: Variant) -> Result<TrainedRun> {
    let dir = run_dir(seed, variant);
    let out = TrainedRun {
        seed,
        variant,
        dir: dir.clone(),
    };
    if out.final_path().exists() {
        return Ok(out);
    }
    let config = variant.config(seed);
    let run = RunDir::new(&dir)?;
    let state = match latest_checkpoint(&dir)? {
        Some((step, path)) => {
            truncate_log(&run.log_path(), step)?;
            TrainState::<f32>::load(&path)?.0
        }
        None if variant == Variant::NoMask => {
            let full = ensure_branch_point(seed)?;
            let boundary = full_config(seed).mask_stage_start();
            fs::copy(full.join("log.jsonl"), run.log_path()).map_err(|e| io(&run.log_path(), e))?;
            truncate_log(&run.log_path(), boundary)?;
            TrainState::<f32>::load(&full.join(format!("ckpt-{boundary}.bin")))?.0
        }
        None => fresh_state(&config)?,
    };
    let dataset = dataset()?;
    let start = state.step;
    let t0 = Instant::now();
    let mut timing = Timing::load(&dir);
    let mut last_flush = Instant::now();
    train(state, &config, &dataset, Some(&run), |report: &LossReport, _| {
        if report.step % 250 == 0 || last_flush.elapsed().as_secs() > 600 {
            last_flush = Instant::now();
            progress(&format!(
                "seed {seed} {:?} step {} total {:.4} rec {:.4} id {:.4} d {:.4}",
                variant, report.step, report.total, report.rec, report.id, report.d_loss
            ));
        }
    })?;
    timing.segments.push((start, config.steps, t0.elapsed().as_secs_f64()));
    timing.save(&dir)?;
    Ok(out)
}

/// Untrained state for `config` with the cached identity embedder.
pub fn fresh_state(config: &TrainConfig) -> Result<TrainState<f32>> {
    let emb = embedders()?;
    let cfg = model_config();
    let blank = Model::<f32>::new(cfg.clone(), &mut stream_rng(0, 0, 0))?;
    let identity = emb.identity_store(&blank.params.identity)?;
    TrainState::new(cfg, identity, config)
}

/// The run if its training has finished; never trains.
pub fn finished_run(seed: u64, variant: Variant) -> Option<TrainedRun> {
    let run = TrainedRun {
        seed,
        variant,
        dir: run_dir(seed, variant),
    };
    run.final_path().exists().then_some(run)
}

/// Full-run directory once it holds the mask-stage boundary checkpoint.
fn ensure_branch_point(seed: u64) -> Result<PathBuf> {
    let dir = run_dir(seed, Variant::Full);
    let boundary = full_config(seed).mask_stage_start();
    if !dir.join(format!("ckpt-{boundary}.bin")).exists() {
        ensure_run(seed, Variant::Full)?;
    }
    Ok(dir)
}

/// Builds every cached artifact: embedders, then per seed the full run and
/// its ablation.
pub fn ensure_all() -> Result<Vec<(TrainedRun, TrainedRun)>> {
    embedders()?;
    SEEDS
        .iter()
        .map(|&s| Ok((ensure_run(s, Variant::Full)?, ensure_run(s, Variant::NoMask)?)))
        .collect()
}

pub fn latest_checkpoint(dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(None);
    };
    let mut best: Option<(u64, PathBuf)> = None;
    for e in entries.flatten() {
        let name = e.file_name().to_string_lossy().into_owned();
        let step = name
            .strip_prefix("ckpt-")
            .and_then(|s| s.strip_suffix(".bin"))
            .and_then(|s| s.parse::<u64>().ok());
        if let Some(step) = step {
            if best.as_ref().map_or(true, |(b, _)| step > *b) {
                best = Some((step, e.path()));
            }
        }
    }
    Ok(best)
}

fn read_log(path: &Path) -> Result<Vec<serde_json::Value>> {
    let f = fs::File::open(path).map_err(|e| io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| Ok(serde_json::from_str(&l.map_err(|e| io(path, e))?)?))
        .collect()
}

/// Drops records of steps at or after `step`.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<String> = read_log(path)?
        .into_iter()
        .filter(|v| v["step"].as_u64().is_some_and(|s| s < step))
        .map(|v| v.to_string())
        .collect();
    let mut f = fs::File::create(path).map_err(|e| io(path, e))?;
    for line in kept {
        writeln!(f, "{line}").map_err(|e| io(path, e))?;
    }
    Ok(())
}

fn progress(msg: &str) {
    eprintln!("[acceptance] {msg}");
}

fn io(path: &Path, e: std::io::Error) -> styleswap_core::Error {
    styleswap_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}
