//! Identity inversion: refines a source's style code against random
//! distractor identities while the model stays frozen.

use rand::Rng;
use serde::{Deserialize, Serialize};
use styleswap_autograd::{Adam, AdamConfig, Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::losses::{id_loss, rec_loss, LossWeights};
use crate::networks::{Session, Styles, Trainable};
use crate::swap::{StyleInput, Swapper};
use crate::synth::stream_rng;

const POOL_DOMAIN: u64 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleSpace {
    /// One vector shared by all slots.
    W,
    /// One vector per slot.
    WPlus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub space: StyleSpace,
    pub rec_weight: f64,
    pub id_weight: f64,
    pub seed: u64,
}

impl InversionConfig {
    /// 200 Adam steps in W+ with the training loss weights.
    pub fn one_to_one() -> Self {
        Self {
            iterations: 200,
            step_size: 0.01,
            space: StyleSpace::WPlus,
            rec_weight: LossWeights::default().lambda_rec,
            id_weight: LossWeights::default().lambda_id,
            seed: 0,
        }
    }

    pub fn one_to_many() -> Self {
        Self {
            iterations: 50,
            ..Self::one_to_one()
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.step_size,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Losses recorded after one optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// 1-based step index.
    pub iteration: usize,
    /// Index into the distractor pool used by this step.
    pub distractor: usize,
    pub rec: f64,
    pub id: f64,
    pub objective: f64,
    /// Identity loss of the swap onto the target, after the step.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target_id: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct InversionResult<T: Scalar> {
    /// `[2L, D]` style stack; all rows equal in W space.
    pub styles: Tensor<T>,
    pub trace: Vec<TraceEntry>,
    /// Iteration whose styles were returned, 0 meaning the initialization.
    pub best_iteration: Option<usize>,
    /// Target identity loss of the initialization.
    pub initial_target_id: Option<f64>,
}

/// The optimized variable: `[1, D]` in W space or `[2L, D]` in W+.
#[derive(Debug, Clone)]
pub struct StyleState<T: Scalar> {
    pub space: StyleSpace,
    pub value: Tensor<T>,
    slots: usize,
}

impl<T: Scalar> StyleState<T> {
    /// Initializes from a `[1, D]` source style.
    pub fn new(space: StyleSpace, w: &Tensor<T>, slots: usize) -> Result<Self> {
        if w.shape().len() != 2 || w.dim(0) != 1 {
            return Err(Error::Shape {
                op: "StyleState::new",
                detail: format!("expected a [1, D] style, got {:?}", w.shape()),
            });
        }
        let value = match space {
            StyleSpace::W => w.clone(),
            StyleSpace::WPlus => Tensor::new(&[slots, w.dim(1)], w.data().repeat(slots))?,
        };
        Ok(Self { space, value, slots })
    }

    /// Graph-side styles for a variable holding `self.value`.
    pub fn styles<'g>(&self, v: Var<'g, T>) -> Result<Styles<'g, T>> {
        match self.space {
            StyleSpace::W => Ok(Styles::Vector(v)),
            StyleSpace::WPlus => Styles::from_rows(v),
        }
    }

    /// `[2L, D]` stack.
    pub fn stack(&self) -> Tensor<T> {
        match self.space {
            StyleSpace::W => {
                let d = self.value.dim(1);
                Tensor::new(&[self.slots, d], self.value.data().repeat(self.slots)).expect("style stack")
            }
            StyleSpace::WPlus => self.value.clone(),
        }
    }

    pub fn input(&self) -> StyleInput<T> {
        StyleInput::Stack(self.stack())
    }
}

/// `λ_rec · L_rec(cycle, I_s) + λ_id · L_id(cycle, I_s)` for the cycle image
/// generated from the intermediate swap's attributes.
pub fn inversion_objective<'g, T: Scalar>(
    sess: &Session<'g, T>,
    styles: &Styles<'g, T>,
    source: Var<'g, T>,
    intermediate: Var<'g, T>,
    mask_enabled: bool,
    config: &InversionConfig,
) -> Result<(Var<'g, T>, Var<'g, T>, Var<'g, T>)> {
    let attrs = sess.encode_attributes(intermediate)?;
    let cycle = sess.generate(&attrs, styles, intermediate, mask_enabled)?.result();
    let f_cycle = sess.embed_identity(cycle)?;
    let f_src = sess.embed_identity(source)?;
    let rec = rec_loss(cycle, source, &f_cycle, &f_src)?;
    let id = id_loss(f_src.embedding, f_cycle.embedding)?;
    let total = rec.mul_scalar(config.rec_weight).add(&id.mul_scalar(config.id_weight))?;
    Ok((total, rec, id))
}

/// One Adam step on the styles with distractor `distractor` (`[1, 3, R, R]`).
pub fn inversion_step<T: Scalar>(
    swapper: &Swapper<T>,
    state: &mut StyleState<T>,
    opt: &mut Adam<T>,
    source: &Tensor<T>,
    distractor: &Tensor<T>,
    config: &InversionConfig,
) -> Result<(f64, f64, f64)> {
    let intermediate = swapper.swap(distractor, source)?.image;
    let g = Graph::new();
    let sess = swapper.model.bind(&g, Trainable::NONE);
    let v = g.variable(state.value.clone());
    let styles = state.styles(v)?;
    let (total, rec, id) = inversion_objective(
        &sess,
        &styles,
        g.constant(source.clone()),
        g.constant(intermediate),
        swapper.mask_enabled,
        config,
    )?;
    let grads = total.backward()?;
    let grad = grads.get_or_zeros(v);
    opt.step_tensors(std::slice::from_mut(&mut state.value), &[grad])?;
    Ok((total.item().as_f64(), rec.item().as_f64(), id.item().as_f64()))
}

/// Identity loss between the source and its swap onto `target` with `state`.
pub fn target_id_loss<T: Scalar>(swapper: &Swapper<T>, state: &StyleState<T>, source: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let out = swapper.swap_with_styles(&state.input(), target)?.image;
    let (a, b) = (swapper.embed(source)?, swapper.embed(&out)?);
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
    Ok(1.0 - dot)
}

/// Keeps the iterate with the lowest value; ties keep the earlier one.
#[derive(Debug, Clone)]
pub struct BestTracker<S> {
    pub iteration: usize,
    pub value: f64,
    pub item: S,
}

impl<S> BestTracker<S> {
    pub fn new(iteration: usize, value: f64, item: S) -> Self {
        Self { iteration, value, item }
    }

    pub fn observe(&mut self, iteration: usize, value: f64, item: impl FnOnce() -> S) {
        if value < self.value {
            *self = Self::new(iteration, value, item());
        }
    }
}

fn check_inputs<T: Scalar>(swapper: &Swapper<T>, images: &[&Tensor<T>], pool: &[Tensor<T>], config: &InversionConfig) -> Result<()> {
    if config.iterations > 0 && pool.is_empty() {
        return Err(Error::Empty("distractor pool"));
    }
    let r = swapper.resolution();
    for t in images.iter().copied().chain(pool) {
        if t.shape() != [1, 3, r, r] {
            return Err(Error::Resolution {
                expected: r,
                got: t.shape().last().copied().unwrap_or(0),
            });
        }
    }
    Ok(())
}

fn init<T: Scalar>(swapper: &Swapper<T>, source: &Tensor<T>, config: &InversionConfig) -> Result<(StyleState<T>, Adam<T>)> {
    let w = swapper.source_styles(source)?;
    Ok((StyleState::new(config.space, &w, swapper.style_slots())?, Adam::new(config.adam())))
}

fn run<T: Scalar>(
    swapper: &Swapper<T>,
    source: &Tensor<T>,
    target: Option<&Tensor<T>>,
    pool: &[Tensor<T>],
    config: &InversionConfig,
) -> Result<InversionResult<T>> {
    let mut inputs = vec![source];
    inputs.extend(target);
    check_inputs(swapper, &inputs, pool, config)?;
    let (mut state, mut opt) = init(swapper, source, config)?;
    let mut rng = stream_rng(config.seed, POOL_DOMAIN, 0);
    let mut best = match target {
        Some(t) => Some(BestTracker::new(0, target_id_loss(swapper, &state, source, t)?, state.stack())),
        None => None,
    };
    let initial_target_id = best.as_ref().map(|b| b.value);
    let mut trace = Vec::with_capacity(config.iterations);
    for iteration in 1..=config.iterations {
        let k = rng.gen_range(0..pool.len());
        let (objective, rec, id) = inversion_step(swapper, &mut state, &mut opt, source, &pool[k], config)?;
        let target_id = match (target, best.as_mut()) {
            (Some(t), Some(b)) => {
                let v = target_id_loss(swapper, &state, source, t)?;
                b.observe(iteration, v, || state.stack());
                Some(v)
            }
            _ => None,
        };
        trace.push(TraceEntry {
            iteration,
            distractor: k,
            rec,
            id,
            objective,
            target_id,
        });
    }
    Ok(match best {
        Some(b) => InversionResult {
            styles: b.item,
            trace,
            best_iteration: Some(b.iteration),
            initial_target_id,
        },
        None => InversionResult {
            styles: state.stack(),
            trace,
            best_iteration: None,
            initial_target_id,
        },
    })
}

/// Optimizes for one target and returns the iterate with the lowest target
/// identity loss, the initialization included.
pub fn invert_one_to_one<T: Scalar>(
    swapper: &Swapper<T>,
    source: &Tensor<T>,
    target: &Tensor<T>,
    pool: &[Tensor<T>],
    config: &InversionConfig,
) -> Result<InversionResult<T>> {
    run(swapper, source, Some(target), pool, config)
}

/// Optimizes without a target and returns the final iterate.
pub fn invert_one_to_many<T: Scalar>(
    swapper: &Swapper<T>,
    source: &Tensor<T>,
    pool: &[Tensor<T>],
    config: &InversionConfig,
) -> Result<InversionResult<T>> {
    run(swapper, source, None, pool, config)
}
