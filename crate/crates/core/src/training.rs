//! Three-branch adversarial training with a late-activated mask branch.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use styleswap_autograd::{Adam, AdamConfig, Bound, Graph, ParamStore, Scalar, Tensor, Var};

use crate::augment::{color_jitter, JitterConfig, JitterParams};
use crate::checkpoint::{load_store, model_archive, model_from_archive, Archive, ModelHeader};
use crate::error::{io_err, Error, Result};
use crate::image::{grid, Image, Mask};
use crate::losses::{
    d_adv_loss, default_n_d, fm_loss, g_adv_loss, id_loss, mask_loss, r1_penalty, rec_loss, total_loss,
    weighted_total, LossParts, LossWeights,
};
use crate::networks::{Discriminator, IdentityFeatures, Model, ModelConfig, Session, Styles, SwapOutput, Trainable};
use crate::synth::{make_pair_batch, stream_rng, Dataset, PairBatch};

const STEP_DOMAIN: u64 = 10;
const INIT_DOMAIN: u64 = 11;

/// Number of generator branches evaluated per step.
pub const BRANCHES: usize = 3;
pub const BRANCH_NAMES: [&str; BRANCHES] = ["swap", "self", "cross"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub r1_interval: u64,
    pub r1_gamma: f64,
    pub seed: u64,
    /// First step (0-based) run with the mask branch; defaults to half of `steps`.
    pub mask_stage_start: Option<u64>,
    /// Zero disables periodic checkpoints.
    pub checkpoint_interval: u64,
    /// Zero disables sample grids.
    pub sample_interval: u64,
    pub jitter: JitterConfig,
    /// First matched discriminator layer (1-based); defaults to the deeper half.
    pub n_d: Option<usize>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 16,
            learning_rate: 1e-4,
            weights: LossWeights::default(),
            r1_interval: 16,
            r1_gamma: 1.0,
            seed: 0,
            mask_stage_start: None,
            checkpoint_interval: 5_000,
            sample_interval: 1_000,
            jitter: JitterConfig::default(),
            n_d: None,
            adam_beta1: 0.0,
            adam_beta2: 0.99,
        }
    }
}

impl TrainConfig {
    pub fn mask_stage_start(&self) -> u64 {
        self.mask_stage_start.unwrap_or(self.steps / 2)
    }

    pub fn mask_active(&self, step: u64) -> bool {
        step >= self.mask_stage_start()
    }

    /// Whether a model trained to completion uses its mask branch.
    pub fn trains_mask(&self) -> bool {
        self.steps > self.mask_stage_start()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.mask_stage_start() > self.steps {
            return Err(Error::Config(format!(
                "mask_stage_start {} exceeds steps {}",
                self.mask_stage_start(),
                self.steps
            )));
        }
        if self.batch_size == 0 || self.r1_interval == 0 {
            return Err(Error::Config("batch_size and r1_interval must be positive".into()));
        }
        self.weights.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: 1e-8,
        }
    }
}

/// Per-step loss record, one line of `log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub mask_enabled: bool,
    /// Swap, self-reconstruction and cross-frame branches.
    pub branches: Vec<LossParts<f64>>,
    pub adv: f64,
    pub id: f64,
    pub fm: f64,
    pub rec: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mask: Option<f64>,
    pub d_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub r1: Option<f64>,
    pub total: f64,
}

impl LossReport {
    fn from_branches(step: u64, branches: Vec<LossParts<f64>>, weights: &LossWeights, d_loss: f64, r1: Option<f64>) -> Self {
        let sum = |f: &dyn Fn(&LossParts<f64>) -> f64| branches.iter().map(f).sum::<f64>();
        let mask_enabled = branches.iter().any(|b| b.mask.is_some());
        Self {
            step,
            mask_enabled,
            adv: sum(&|b| b.adv),
            id: sum(&|b| b.id),
            fm: sum(&|b| b.fm),
            rec: sum(&|b| b.rec.unwrap_or(0.0)),
            mask: mask_enabled.then(|| sum(&|b| b.mask.unwrap_or(0.0))),
            total: sum(&|b| total_loss(b, weights)),
            branches,
            d_loss,
            r1,
        }
    }

    pub fn is_finite(&self) -> bool {
        let parts = self.branches.iter().all(|b| {
            [Some(b.adv), Some(b.id), Some(b.fm), b.rec, b.mask]
                .iter()
                .flatten()
                .all(|v| v.is_finite())
        });
        parts && self.d_loss.is_finite() && self.r1.is_none_or(f64::is_finite) && self.total.is_finite()
    }
}

/// Batch images as tensors: images `[N, 3, R, R]`, masks `[N, 1, R, R]`.
#[derive(Debug, Clone)]
pub struct StepBatch<T: Scalar> {
    pub source: Tensor<T>,
    pub target_a: Tensor<T>,
    pub target_b: Tensor<T>,
    pub mask_source: Tensor<T>,
    pub mask_target: Tensor<T>,
}

impl<T: Scalar> StepBatch<T> {
    pub fn from_pairs(b: &PairBatch) -> Result<Self> {
        let (n, r) = (b.batch_size, b.resolution);
        let img = |v: &[f32]| Tensor::new(&[n, 3, r, r], v.iter().map(|&x| T::from_f64(x as f64)).collect());
        let msk = |v: &[f32]| Tensor::new(&[n, 1, r, r], v.iter().map(|&x| T::from_f64(x as f64)).collect());
        Ok(Self {
            source: img(&b.source)?,
            target_a: img(&b.target_a)?,
            target_b: img(&b.target_b)?,
            mask_source: msk(&b.mask_source)?,
            mask_target: msk(&b.mask_target)?,
        })
    }

    pub fn len(&self) -> usize {
        self.source.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Jitter draws for every identity-encoder input of one step.
#[derive(Debug, Clone)]
pub struct StepJitter {
    pub source: Vec<JitterParams>,
    pub target_a: Vec<JitterParams>,
    /// One per generated image, branch-major.
    pub generated: Vec<JitterParams>,
}

impl StepJitter {
    pub fn sample(config: &JitterConfig, n: usize, rng: &mut impl Rng) -> Self {
        let mut draw = |k: usize| (0..k).map(|_| config.sample(rng)).collect();
        Self {
            source: draw(n),
            target_a: draw(n),
            generated: draw(BRANCHES * n),
        }
    }

    pub fn none(n: usize) -> Self {
        Self {
            source: vec![JitterParams::IDENTITY; n],
            target_a: vec![JitterParams::IDENTITY; n],
            generated: vec![JitterParams::IDENTITY; BRANCHES * n],
        }
    }
}

/// Generator-side values of one step, branch-major along the batch axis.
pub struct ForwardPass<'g, T: Scalar> {
    pub output: SwapOutput<'g, T>,
    /// Images fed to every loss: blended when masks are on, raw otherwise.
    pub fakes: Var<'g, T>,
    /// Identity embeddings each branch should reproduce.
    pub f_src: Var<'g, T>,
    /// Real images, `[target_b; source]`.
    pub reals: Var<'g, T>,
    pub n: usize,
}

/// Index into `[target_b; source]` of branch `b`'s real counterpart.
fn real_index(branch: usize) -> usize {
    usize::from(branch == 1)
}

/// Runs the three branches in one batched generator pass.
pub fn generator_forward<'g, T: Scalar>(
    sess: &Session<'g, T>,
    batch: &StepBatch<T>,
    jitter: &StepJitter,
    mask_enabled: bool,
) -> Result<ForwardPass<'g, T>> {
    let g = sess.graph;
    let n = batch.len();
    let xs = g.constant(batch.source.clone());
    let xta = g.constant(batch.target_a.clone());
    let xtb = g.constant(batch.target_b.clone());
    let f_s = sess.embed_identity(color_jitter(xs, &jitter.source)?)?.embedding;
    let f_ta = sess.embed_identity(color_jitter(xta, &jitter.target_a)?)?.embedding;
    let maps = sess.encode_attributes(Var::concat(&[xtb, xs], 0)?)?;
    let attrs = maps
        .iter()
        .map(|m| {
            let (tb, s) = (m.slice_rows(0, n)?, m.slice_rows(n, n)?);
            Var::concat(&[tb, s, tb], 0)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let f_src = Var::concat(&[f_s, f_s, f_ta], 0)?;
    let styles = sess.map_identity(f_src)?;
    let targets = Var::concat(&[xtb, xs, xtb], 0)?;
    let output = sess.generate(&attrs, &Styles::Vector(styles), targets, mask_enabled)?;
    Ok(ForwardPass {
        fakes: output.result(),
        output,
        f_src,
        reals: Var::concat(&[xtb, xs], 0)?,
        n,
    })
}

fn slice_features<'g, T: Scalar>(f: &IdentityFeatures<'g, T>, start: usize, len: usize) -> Result<IdentityFeatures<'g, T>> {
    Ok(IdentityFeatures {
        embedding: f.embedding.slice_rows(start, len)?,
        penultimate: f.penultimate.slice_rows(start, len)?,
        features: f
            .features
            .iter()
            .map(|v| v.slice_rows(start, len))
            .collect::<std::result::Result<_, _>>()?,
    })
}

/// Generator objective of every branch and their weighted sum.
pub fn generator_losses<'g, T: Scalar>(
    sess: &Session<'g, T>,
    fwd: &ForwardPass<'g, T>,
    batch: &StepBatch<T>,
    jitter: &StepJitter,
    weights: &LossWeights,
    n_d: usize,
) -> Result<(Vec<LossParts<Var<'g, T>>>, Var<'g, T>)> {
    let (g, n) = (sess.graph, fwd.n);
    let d_fake = sess.discriminate(fwd.fakes)?;
    let d_real = sess.discriminate(fwd.reals)?;
    let emb_gen = sess.embed_identity(color_jitter(fwd.fakes, &jitter.generated)?)?.embedding;
    let feat_fake = sess.embed_identity(fwd.fakes.slice_rows(n, 2 * n)?)?;
    let xs = g.constant(batch.source.clone());
    let xtb = g.constant(batch.target_b.clone());
    let feat_real = sess.embed_identity(Var::concat(&[xs, xtb], 0)?)?;
    let mask_refs = {
        let (ms, mt) = (g.constant(batch.mask_source.clone()), g.constant(batch.mask_target.clone()));
        Var::concat(&[mt, ms, mt], 0)?
    };
    let final_mask = fwd.output.final_mask();
    let mut parts = Vec::with_capacity(BRANCHES);
    let mut total: Option<Var<'g, T>> = None;
    for b in 0..BRANCHES {
        let rows = |v: &Var<'g, T>| v.slice_rows(b * n, n);
        let ri = real_index(b) * n;
        let fake_feats = d_fake.features.iter().map(rows).collect::<std::result::Result<Vec<_>, _>>()?;
        let real_feats = d_real
            .features
            .iter()
            .map(|v| v.slice_rows(ri, n))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let rec = if b == 0 {
            None
        } else {
            let off = (b - 1) * n;
            Some(rec_loss(
                rows(&fwd.fakes)?,
                fwd.reals.slice_rows(ri, n)?,
                &slice_features(&feat_fake, off, n)?,
                &slice_features(&feat_real, off, n)?,
            )?)
        };
        let mask = match final_mask {
            Some(m) => Some(mask_loss(rows(&m)?, rows(&mask_refs)?)?),
            None => None,
        };
        let p = LossParts {
            adv: g_adv_loss(rows(&d_fake.logits)?),
            id: id_loss(rows(&fwd.f_src)?, rows(&emb_gen)?)?,
            fm: fm_loss(&fake_feats, &real_feats, n_d)?,
            rec,
            mask,
        };
        let t = weighted_total(&p, weights)?;
        total = Some(match total {
            Some(acc) => acc.add(&t)?,
            None => t,
        });
        parts.push(p);
    }
    Ok((parts, total.expect("three branches")))
}

/// Logistic discriminator loss summed over branches.
pub fn discriminator_loss<'g, T: Scalar>(
    disc: &Discriminator,
    p: &Bound<'g, T>,
    fakes: Var<'g, T>,
    reals: Var<'g, T>,
    n: usize,
) -> Result<Var<'g, T>> {
    let lf = disc.discriminate(p, fakes)?.logits;
    let lr = disc.discriminate(p, reals)?.logits;
    let mut total: Option<Var<'g, T>> = None;
    for b in 0..BRANCHES {
        let term = d_adv_loss(lr.slice_rows(real_index(b) * n, n)?, lf.slice_rows(b * n, n)?)?;
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("three branches"))
}

/// Model, optimizer moments and step counter.
#[derive(Debug, Clone)]
pub struct TrainState<T: Scalar> {
    pub model: Model<T>,
    pub opt_generator: Adam<T>,
    pub opt_encoder: Adam<T>,
    pub opt_mapper: Adam<T>,
    pub opt_discriminator: Adam<T>,
    /// Completed steps.
    pub step: u64,
}

/// Gradient bookkeeping of the last step, used by invariant checks.
#[derive(Debug, Clone, Default)]
pub struct StepDiagnostics {
    /// Whether any mask-head parameter received a gradient.
    pub mask_gradient: bool,
    pub generator_updated: bool,
    pub discriminator_updated: bool,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh model seeded from `config.seed` with the given frozen identity embedder.
    pub fn new(model_config: ModelConfig, identity: ParamStore<T>, config: &TrainConfig) -> Result<Self> {
        let mut rng = stream_rng(config.seed, INIT_DOMAIN, 0);
        let mut model = Model::new(model_config, &mut rng)?;
        model.set_identity(identity)?;
        Ok(Self::from_model(model, config))
    }

    pub fn from_model(model: Model<T>, config: &TrainConfig) -> Self {
        let adam = config.adam();
        Self {
            model,
            opt_generator: Adam::new(adam),
            opt_encoder: Adam::new(adam),
            opt_mapper: Adam::new(adam),
            opt_discriminator: Adam::new(adam),
            step: 0,
        }
    }

    fn optimizers(&self) -> [(&'static str, &Adam<T>); 4] {
        [
            ("generator", &self.opt_generator),
            ("encoder", &self.opt_encoder),
            ("mapper", &self.opt_mapper),
            ("discriminator", &self.opt_discriminator),
        ]
    }

    /// Serializes the full state, including optimizer moments.
    pub fn to_archive(&self, config: &TrainConfig) -> Result<Archive> {
        let adam_steps: Vec<(String, u64)> = self
            .optimizers()
            .iter()
            .map(|(n, o)| (n.to_string(), o.steps_taken()))
            .collect();
        let extra = serde_json::json!({
            "train_config": config,
            "step": self.step,
            "adam_steps": adam_steps,
        });
        let mut a = model_archive(&self.model, "train_state", config.trains_mask() && self.step > config.mask_stage_start(), extra)?;
        for (name, opt) in self.optimizers() {
            let (m, v) = opt.moments();
            for (i, (mt, vt)) in m.iter().zip(v).enumerate() {
                a.push(format!("adam/{name}/m/{i}"), mt);
                a.push(format!("adam/{name}/v/{i}"), vt);
            }
        }
        Ok(a)
    }

    pub fn from_archive(archive: &Archive) -> Result<(Self, TrainConfig)> {
        let (model, header): (Model<T>, ModelHeader) = model_from_archive(archive)?;
        let extra = &header.extra;
        let config: TrainConfig = serde_json::from_value(extra["train_config"].clone())?;
        let step = extra["step"]
            .as_u64()
            .ok_or_else(|| Error::Config("train state without step".into()))?;
        let adam_steps: Vec<(String, u64)> = serde_json::from_value(extra["adam_steps"].clone())?;
        let mut state = Self::from_model(model, &config);
        state.step = step;
        let stores = [
            ("generator", state.model.params.generator.len()),
            ("encoder", state.model.params.encoder.len()),
            ("mapper", state.model.params.mapper.len()),
            ("discriminator", state.model.params.discriminator.len()),
        ];
        let mut opts = Vec::new();
        for ((name, count), (_, steps)) in stores.iter().zip(&adam_steps) {
            let (mut m, mut v) = (Vec::new(), Vec::new());
            if *steps > 0 {
                for i in 0..*count {
                    m.push(archive.require::<T>(&format!("adam/{name}/m/{i}"))?);
                    v.push(archive.require::<T>(&format!("adam/{name}/v/{i}"))?);
                }
            }
            opts.push(Adam::from_state(config.adam(), *steps, m, v)?);
        }
        let mut it = opts.into_iter();
        state.opt_generator = it.next().expect("four optimizers");
        state.opt_encoder = it.next().expect("four optimizers");
        state.opt_mapper = it.next().expect("four optimizers");
        state.opt_discriminator = it.next().expect("four optimizers");
        Ok((state, config))
    }

    pub fn save(&self, path: &Path, config: &TrainConfig) -> Result<()> {
        self.to_archive(config)?.save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, TrainConfig)> {
        Self::from_archive(&Archive::load(path)?)
    }

    /// Replaces only the identity embedder from an archive of embedders.
    pub fn load_identity(&mut self, archive: &Archive, prefix: &str) -> Result<()> {
        let mut store = self.model.params.identity.clone();
        load_store(archive, prefix, &mut store)?;
        self.model.set_identity(store)
    }
}

/// Output of [`train_step`] besides the updated state.
pub struct StepOutcome<T: Scalar> {
    pub report: LossReport,
    pub diagnostics: StepDiagnostics,
    /// Branch-1 sample rows: source, target, I_g, hat-I, M_g.
    pub samples: Option<SampleRows<T>>,
}

pub struct SampleRows<T: Scalar> {
    pub source: Tensor<T>,
    pub target: Tensor<T>,
    pub generated: Tensor<T>,
    pub blended: Option<Tensor<T>>,
    pub mask: Option<Tensor<T>>,
}

/// One discriminator update followed by one generator/encoder/mapper update.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &StepBatch<T>,
    jitter: &StepJitter,
    config: &TrainConfig,
    keep_samples: bool,
) -> Result<StepOutcome<T>> {
    let step = state.step;
    let mask_enabled = config.mask_active(step);
    let n = batch.len();
    let nets = &state.model.nets;
    let n_d = config.n_d.unwrap_or_else(|| default_n_d(nets.num_disc_features()));

    let graph = Graph::new();
    let mut sess = nets.bind(&state.model.params, &graph, Trainable::SWAPPER);
    let fwd = generator_forward(&sess, batch, jitter, mask_enabled)?;

    // Discriminator update on detached fakes.
    let fakes = fwd.fakes.value();
    let reals = fwd.reals.value();
    let (d_loss, r1) = {
        let dg = Graph::new();
        let p = state.model.params.discriminator.bind(&dg, true);
        let loss = discriminator_loss(&nets.discriminator, &p, dg.constant((*fakes).clone()), dg.constant((*reals).clone()), n)?;
        let grads = loss.backward()?;
        let mut d_grads = p.gradients(&grads);
        let r1 = if step % config.r1_interval == 0 && config.r1_gamma > 0.0 {
            let (value, r1_grads) = r1_penalty(&nets.discriminator, &state.model.params.discriminator, &reals, config.r1_gamma)?;
            let k = T::from_f64(config.r1_interval as f64);
            for (g, r) in d_grads.iter_mut().zip(&r1_grads) {
                for (a, &b) in g.data_mut().iter_mut().zip(r.data()) {
                    *a += k * b;
                }
            }
            Some(value)
        } else {
            None
        };
        state.opt_discriminator.step(&mut state.model.params.discriminator, &d_grads)?;
        (loss.item().as_f64(), r1)
    };

    // Generator-side update against the refreshed discriminator.
    sess.discriminator = state.model.params.discriminator.bind(&graph, false);
    let (parts, total) = generator_losses(&sess, &fwd, batch, jitter, &config.weights, n_d)?;
    let branch_values: Vec<LossParts<f64>> = parts.iter().map(LossParts::values).collect();
    let report = LossReport::from_branches(step, branch_values, &config.weights, d_loss, r1);
    if !report.is_finite() {
        return Err(Error::NonFinite {
            step,
            record: serde_json::to_string(&report).unwrap_or_default(),
        });
    }
    let grads = total.backward()?;
    let mask_gradient = nets
        .generator
        .mask_params()
        .iter()
        .any(|&id| grads.get(sess.generator.var(id)).is_some());
    let g_grads = sess.generator.gradients(&grads);
    let e_grads = sess.encoder.gradients(&grads);
    let m_grads = sess.mapper.gradients(&grads);
    let samples = keep_samples.then(|| {
        let take = |t: &Tensor<T>| rows(t, 0, n.min(4));
        SampleRows {
            source: take(&batch.source),
            target: take(&batch.target_b),
            generated: take(&fwd.output.image.value()),
            blended: fwd.output.blended.map(|b| take(&b.value())),
            mask: fwd.output.final_mask().map(|m| take(&m.value())),
        }
    });
    drop(sess);
    drop(fwd);
    let params = &mut state.model.params;
    state.opt_generator.step(&mut params.generator, &g_grads)?;
    state.opt_encoder.step(&mut params.encoder, &e_grads)?;
    state.opt_mapper.step(&mut params.mapper, &m_grads)?;
    state.step += 1;
    Ok(StepOutcome {
        report,
        diagnostics: StepDiagnostics {
            mask_gradient,
            generator_updated: true,
            discriminator_updated: true,
        },
        samples,
    })
}

fn rows<T: Scalar>(t: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    let per = t.numel() / t.dim(0);
    let mut shape = t.shape().to_vec();
    shape[0] = len;
    Tensor::new(&shape, t.data()[start * per..(start + len) * per].to_vec()).expect("row slice")
}

/// Batch and jitter draws for `step`, a pure function of `(seed, step)`.
pub fn step_inputs<T: Scalar>(dataset: &Dataset, config: &TrainConfig, step: u64) -> Result<(StepBatch<T>, StepJitter)> {
    let mut rng = stream_rng(config.seed, STEP_DOMAIN, step);
    let pairs = make_pair_batch(dataset, config.batch_size, &mut rng)?;
    let batch = StepBatch::from_pairs(&pairs)?;
    let jitter = StepJitter::sample(&config.jitter, config.batch_size, &mut rng);
    Ok((batch, jitter))
}

/// Where [`train`] writes its outputs.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn new(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        fs::create_dir_all(&path).map_err(io_err(&path))?;
        Ok(Self { path })
    }

    pub fn log_path(&self) -> PathBuf {
        self.path.join("log.jsonl")
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.path.join(format!("ckpt-{step}.bin"))
    }

    pub fn final_path(&self) -> PathBuf {
        self.path.join("final.bin")
    }

    fn append_log(&self, line: &str) -> Result<()> {
        let path = self.log_path();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        writeln!(f, "{line}").map_err(io_err(&path))
    }
}

/// Runs steps `state.step..config.steps`, writing logs, checkpoints and
/// sample grids to `run` when given. `on_step` sees every report.
pub fn train<T: Scalar>(
    mut state: TrainState<T>,
    config: &TrainConfig,
    dataset: &Dataset,
    run: Option<&RunDir>,
    mut on_step: impl FnMut(&LossReport, &StepDiagnostics),
) -> Result<TrainState<T>> {
    config.validate()?;
    if dataset.resolution() != state.model.config().resolution() {
        return Err(Error::Resolution {
            expected: state.model.config().resolution(),
            got: dataset.resolution(),
        });
    }
    while state.step < config.steps {
        let step = state.step;
        let (batch, jitter) = step_inputs::<T>(dataset, config, step)?;
        let keep = run.is_some() && config.sample_interval > 0 && (step + 1) % config.sample_interval == 0;
        let outcome = match train_step(&mut state, &batch, &jitter, config, keep) {
            Ok(o) => o,
            Err(e) => {
                if let (Some(run), Error::NonFinite { record, .. }) = (run, &e) {
                    run.append_log(&format!(r#"{{"step":{step},"error":"non-finite loss","report":{record}}}"#))?;
                }
                return Err(e);
            }
        };
        on_step(&outcome.report, &outcome.diagnostics);
        if let Some(run) = run {
            run.append_log(&serde_json::to_string(&outcome.report)?)?;
            if let Some(s) = &outcome.samples {
                write_sample_grid(&run.path.join(format!("samples-{}.png", step + 1)), s)?;
            }
            if config.checkpoint_interval > 0 && state.step % config.checkpoint_interval == 0 {
                state.save(&run.checkpoint_path(state.step), config)?;
            }
        }
    }
    if let Some(run) = run {
        state.save(&run.final_path(), config)?;
    }
    Ok(state)
}

/// Writes a grid with columns source | target | I_g | hat-I | M_g.
pub fn write_sample_grid<T: Scalar>(path: &Path, s: &SampleRows<T>) -> Result<()> {
    let src = Image::from_batch(&s.source)?;
    let tgt = Image::from_batch(&s.target)?;
    let gen = Image::from_batch(&s.generated)?;
    let blend = match &s.blended {
        Some(b) => Image::from_batch(b)?,
        None => gen.clone(),
    };
    let masks: Vec<Image> = match &s.mask {
        Some(m) => Mask::from_batch(m)?.iter().map(Mask::to_image).collect(),
        None => gen.iter().map(|g| Image::filled(g.height(), g.width(), -1.0)).collect(),
    };
    let rows: Vec<Vec<Image>> = (0..src.len())
        .map(|i| vec![src[i].clone(), tgt[i].clone(), gen[i].clone(), blend[i].clone(), masks[i].clone()])
        .collect();
    grid(&rows)?.save_png(path)
}
