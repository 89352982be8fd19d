use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Arg, ArgMatches, Command};
use serde_json::json;
use sha2::{Digest, Sha256};

use styleswap_cli::config::{
    self, ConfigError, EvalSettings, InversionMode, InvertSettings, PretrainSettings, Settings, SwapSettings,
    SynthSettings, TrainSettings,
};
use styleswap_core::autograd::Tensor;
use styleswap_core::checkpoint::Archive;
use styleswap_core::embedders::{pretrain_identity, pretrain_pose, EmbedderSet, PretrainConfig};
use styleswap_core::evaluation::{evaluate, EvalOptions};
use styleswap_core::image::{Image, Mask};
use styleswap_core::inversion::{invert_one_to_many, invert_one_to_one, InversionConfig};
use styleswap_core::losses::LossWeights;
use styleswap_core::networks::{GeneratorConfig, ModelConfig};
use styleswap_core::swap::{StyleInput, Swapper};
use styleswap_core::synth::{Dataset, DatasetSpec};
use styleswap_core::training::{train, RunDir, TrainConfig, TrainState};

const SEED_ENV: &str = "STYLESWAP_SEED";

fn subcommand<S: Settings>(name: &'static str, about: &'static str) -> Command {
    let mut cmd = Command::new(name).about(about).arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key = value file; flags override it"),
    );
    for (key, help) in S::KEYS {
        cmd = cmd.arg(
            Arg::new(*key)
                .long(key.replace('_', "-"))
                .visible_alias(*key)
                .value_name("VALUE")
                .help(*help),
        );
    }
    cmd
}

fn cli() -> Command {
    Command::new("styleswap")
        .about("Face swapping on synthetic faces: data, embedders, training, swapping, inversion, evaluation")
        .subcommand_required(true)
        .subcommand(subcommand::<SynthSettings>("synth-data", "Render a synthetic face dataset"))
        .subcommand(subcommand::<PretrainSettings>(
            "pretrain-embedder",
            "Pre-train the identity, evaluation and pose networks",
        ))
        .subcommand(subcommand::<TrainSettings>("train", "Train a swapping model"))
        .subcommand(subcommand::<SwapSettings>("swap", "Swap a source identity onto target frames"))
        .subcommand(subcommand::<InvertSettings>("invert", "Refine a source's styles by identity inversion"))
        .subcommand(subcommand::<EvalSettings>("eval", "Score a trained model on its dataset"))
}

fn settings<S: Settings>(m: &ArgMatches) -> Result<S> {
    let file = match m.get_one::<String>("config") {
        Some(p) => config::read_file(Path::new(p))?,
        None => Vec::new(),
    };
    let flags: Vec<(String, String)> = S::KEYS
        .iter()
        .filter_map(|(k, _)| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect();
    let env = std::env::var(SEED_ENV).ok();
    Ok(config::resolve(env.as_deref(), &file, &flags)?)
}

fn required(p: &Option<PathBuf>) -> &Path {
    p.as_deref().expect("checked by settings")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `<file>.<suffix>` next to a file output.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    let spec = Dataset::load_spec(dir).with_context(|| format!("loading dataset from {}", dir.display()))?;
    Ok(Dataset::generate(spec)?)
}

fn load_embedders(path: &Path) -> Result<EmbedderSet<f32>> {
    let a = Archive::load(path).with_context(|| format!("loading embedders from {}", path.display()))?;
    Ok(EmbedderSet::from_archive(&a)?)
}

fn load_swapper(path: &Path) -> Result<Swapper<f32>> {
    Swapper::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn synth_data(s: SynthSettings) -> Result<()> {
    let out = required(&s.out);
    let dataset = Dataset::generate(DatasetSpec {
        num_identities: s.identities,
        frames_per_identity: s.frames,
        resolution: s.resolution,
        seed: s.seed,
    })?;
    dataset.write_to(out)?;
    write_text(&out.join("config.txt"), &s.to_config_text())?;
    println!("wrote {} frames to {}", s.identities * s.frames, out.display());
    Ok(())
}

fn pretrain_embedder(s: PretrainSettings) -> Result<()> {
    let out = required(&s.out);
    write_text(&sibling(out, "config.txt"), &s.to_config_text())?;
    let adjust = |c: PretrainConfig, steps: u64| PretrainConfig {
        steps,
        pool_identities: s.pool_identities,
        batch_size: s.batch_size,
        learning_rate: s.learning_rate,
        ..c
    };
    let log_path = sibling(out, "log.jsonl");
    let mut log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut record = |net: &str, step: u64, loss: f64| {
        let _ = writeln!(log, "{}", json!({"net": net, "step": step, "loss": loss}));
        if step % 500 == 0 {
            eprintln!("{net} step {step} loss {loss:.4}");
        }
    };
    let identity = pretrain_identity(&adjust(PretrainConfig::identity(s.resolution, s.seed), s.identity_steps), |t, v| {
        record("identity", t, v)
    })?;
    let evaluation = pretrain_identity(&adjust(PretrainConfig::evaluation(s.resolution, s.seed), s.identity_steps), |t, v| {
        record("evaluation", t, v)
    })?;
    let pose = pretrain_pose(&adjust(PretrainConfig::pose(s.resolution, s.seed), s.pose_steps), |t, v| record("pose", t, v))?;
    EmbedderSet::<f32> {
        identity,
        evaluation,
        pose,
    }
    .to_archive()?
    .save(out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn train_command(s: TrainSettings) -> Result<()> {
    let out = required(&s.out);
    let dataset = load_dataset(required(&s.data))?;
    let embedders = load_embedders(required(&s.embedders))?;
    let config = TrainConfig {
        steps: s.steps,
        batch_size: s.batch_size,
        learning_rate: s.learning_rate,
        weights: LossWeights {
            lambda_id: s.lambda_id,
            lambda_fm: s.lambda_fm,
            lambda_rec: s.lambda_rec,
            lambda_mask: s.lambda_mask,
        },
        r1_interval: s.r1_interval,
        r1_gamma: s.r1_gamma,
        seed: s.seed,
        mask_stage_start: s.mask_stage_start,
        checkpoint_interval: s.checkpoint_interval,
        sample_interval: s.sample_interval,
        n_d: s.n_d,
        ..TrainConfig::default()
    };
    config.validate()?;
    let run = RunDir::new(out)?;
    write_text(&out.join("config.txt"), &s.to_config_text())?;
    let state = match &s.resume {
        Some(path) => {
            let (state, _) = TrainState::<f32>::load(path).with_context(|| format!("resuming from {}", path.display()))?;
            state
        }
        None => {
            let mut mc = ModelConfig::from_generator(GeneratorConfig::with_channels(s.channels.clone(), s.style_dim));
            mc.identity = embedders.identity.config.clone();
            mc.validate()?;
            let blank = styleswap_core::networks::Model::<f32>::new(mc.clone(), &mut styleswap_core::synth::stream_rng(0, 0, 0))?;
            let identity = embedders.identity_store(&blank.params.identity)?;
            TrainState::new(mc, identity, &config)?
        }
    };
    let every = (s.steps / 100).max(1);
    let state = train(state, &config, &dataset, Some(&run), |r, _| {
        if r.step % every == 0 {
            eprintln!("step {} total {:.4} d {:.4}", r.step, r.total, r.d_loss);
        }
    })?;
    println!("trained {} steps; final state in {}", state.step, run.final_path().display());
    Ok(())
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(dir)
        .into_iter()
        .collect::<std::result::Result<Vec<_>, _>>()
        .with_context(|| format!("listing {}", dir.display()))?
        .into_iter()
        .filter(|e| e.file_type().is_file() && e.path().extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .map(|e| e.into_path())
        .collect();
    files.sort();
    Ok(files)
}

fn load_styles(path: &Path, swapper: &Swapper<f32>) -> Result<StyleInput<f32>> {
    let a = Archive::load(path).with_context(|| format!("loading styles {}", path.display()))?;
    let w: Tensor<f32> = a.require("w_plus")?;
    let want = [swapper.style_slots(), swapper.model.config().generator.style_dim];
    if w.shape() != want {
        bail!("styles file holds {:?}, the model needs {:?}", w.shape(), want);
    }
    Ok(StyleInput::Stack(w))
}

fn swap_command(s: SwapSettings) -> Result<()> {
    let out = required(&s.out);
    let swapper = load_swapper(required(&s.ckpt))?;
    let res = swapper.resolution();
    let source = Image::load_png(required(&s.source), res)?.to_tensor::<f32>();
    let styles = match &s.styles {
        Some(p) => load_styles(p, &swapper)?,
        None => StyleInput::Vector(swapper.source_styles(&source)?),
    };
    let target = required(&s.target);
    let frames: Vec<(PathBuf, PathBuf, PathBuf)> = if target.is_dir() {
        png_files(target)?
            .into_iter()
            .map(|p| {
                let name = p.file_name().expect("file").to_owned();
                (p, out.join("swap").join(&name), out.join("mask").join(&name))
            })
            .collect()
    } else {
        vec![(target.to_path_buf(), out.join("swap.png"), out.join("mask.png"))]
    };
    if frames.is_empty() {
        bail!("no PNG frames in {}", target.display());
    }
    for (frame, swap_path, mask_path) in &frames {
        let t = Image::load_png(frame, res)?.to_tensor::<f32>();
        let result = swapper.swap_with_styles(&styles, &t)?;
        for p in [swap_path, mask_path] {
            fs::create_dir_all(p.parent().expect("inside out")).with_context(|| format!("creating {}", p.display()))?;
        }
        Image::from_batch(&result.image)?[0].save_png(swap_path)?;
        if let Some(m) = &result.mask {
            Mask::from_batch(m)?[0].save_png(mask_path)?;
        }
    }
    write_text(&out.join("config.txt"), &s.to_config_text())?;
    println!("swapped {} frame(s) into {}", frames.len(), out.display());
    Ok(())
}

fn invert_command(s: InvertSettings) -> Result<()> {
    let out = required(&s.out);
    let swapper = load_swapper(required(&s.ckpt))?;
    let res = swapper.resolution();
    let source = Image::load_png(required(&s.source), res)?.to_tensor::<f32>();
    let pool: Vec<Tensor<f32>> = png_files(required(&s.pool))?
        .iter()
        .map(|p| Ok(Image::load_png(p, res)?.to_tensor()))
        .collect::<Result<_>>()?;
    let config = InversionConfig {
        iterations: s.resolved_iterations(),
        step_size: s.step_size,
        space: s.space,
        rec_weight: s.lambda_rec,
        id_weight: s.lambda_id,
        seed: s.seed,
    };
    let result = match s.mode {
        InversionMode::OneToOne => {
            let target = Image::load_png(s.target.as_deref().expect("checked by settings"), res)?.to_tensor::<f32>();
            invert_one_to_one(&swapper, &source, &target, &pool, &config)?
        }
        InversionMode::OneToMany => invert_one_to_many(&swapper, &source, &pool, &config)?,
    };
    let mut archive = Archive::new(&json!({
        "kind": "styles",
        "space": config::Value::render(&s.space),
        "best_iteration": result.best_iteration,
    }))?;
    archive.push("w_plus", &result.styles);
    archive.save(out)?;
    let trace: String = result
        .trace
        .iter()
        .map(|t| Ok(serde_json::to_string(t)? + "\n"))
        .collect::<Result<_>>()?;
    write_text(&sibling(out, "trace.jsonl"), &trace)?;
    write_text(&sibling(out, "config.txt"), &s.to_config_text())?;
    match result.best_iteration {
        Some(b) => println!("wrote {} (best iteration {b})", out.display()),
        None => println!("wrote {}", out.display()),
    }
    Ok(())
}

fn eval_command(s: EvalSettings) -> Result<()> {
    let out = required(&s.out);
    let ckpt = required(&s.ckpt);
    let swapper = load_swapper(ckpt)?;
    let embedders = load_embedders(required(&s.embedders))?;
    let dataset = load_dataset(required(&s.data))?;
    let options = EvalOptions {
        swaps: s.swaps,
        recon_frames: s.recon_frames,
        seed: s.seed,
        batch_size: s.batch_size,
    };
    let report = evaluate(&swapper, &embedders, &dataset, &options)?;
    let config_text = s.to_config_text();
    let doc = json!({
        "report": report,
        "provenance": {
            "checkpoint_sha256": sha256_file(ckpt)?,
            "embedders_sha256": sha256_file(required(&s.embedders))?,
            "dataset_spec": dataset.spec,
            "config_sha256": format!("{:x}", Sha256::digest(config_text.as_bytes())),
        }
    });
    write_text(out, &serde_json::to_string_pretty(&doc)?)?;
    write_text(&sibling(out, "config.txt"), &config_text)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run(m: &ArgMatches) -> Result<()> {
    match m.subcommand() {
        Some(("synth-data", m)) => synth_data(settings(m)?),
        Some(("pretrain-embedder", m)) => pretrain_embedder(settings(m)?),
        Some(("train", m)) => train_command(settings(m)?),
        Some(("swap", m)) => swap_command(settings(m)?),
        Some(("invert", m)) => invert_command(settings(m)?),
        Some(("eval", m)) => eval_command(settings(m)?),
        _ => unreachable!("subcommand_required"),
    }
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
