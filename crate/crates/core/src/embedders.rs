//! Pre-training of the frozen networks: the identity embedder used in the
//! losses, an independent evaluation embedder, and a yaw regressor.

use rand::Rng;
use serde::{Deserialize, Serialize};
use styleswap_autograd::{Adam, AdamConfig, Graph, ParamStore, Scalar, Tensor};

use crate::augment::{color_jitter, JitterConfig};
use crate::checkpoint::{load_store, push_store, Archive};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::networks::layers::randn;
use crate::networks::{ConvNet, ConvNetConfig, IdentityEncoder};
use crate::synth::{identity_for, render, sample_attributes, stream_rng, RenderedSample};

const POOL_DOMAIN: u64 = 20;
const BATCH_DOMAIN: u64 = 21;
const INIT_DOMAIN: u64 = 22;

/// Settings for one supervised pre-training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub net: ConvNetConfig,
    /// Identities in the training pool, disjoint from any dataset seed.
    pub pool_identities: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Additive cosine margin and logit scale of the classifier.
    pub margin: f64,
    pub scale: f64,
    pub jitter: JitterConfig,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn identity(resolution: usize, seed: u64) -> Self {
        Self {
            net: ConvNetConfig::identity(resolution),
            pool_identities: 1000,
            steps: 3000,
            batch_size: 32,
            learning_rate: 1e-3,
            margin: 0.2,
            scale: 16.0,
            jitter: JitterConfig::default(),
            seed,
        }
    }

    /// Narrower network on a different seed, for metrics only.
    pub fn evaluation(resolution: usize, seed: u64) -> Self {
        Self {
            net: ConvNetConfig {
                resolution,
                widths: [24, 48, 80],
                out_dim: 64,
            },
            seed: seed.wrapping_add(0x5EED),
            ..Self::identity(resolution, seed)
        }
    }

    pub fn pose(resolution: usize, seed: u64) -> Self {
        Self {
            net: ConvNetConfig {
                resolution,
                widths: [16, 32, 48],
                out_dim: 1,
            },
            steps: 2000,
            seed: seed.wrapping_add(0x905E),
            ..Self::identity(resolution, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.pool_identities < 2 || self.batch_size == 0 {
            return Err(Error::Config("pretraining needs ≥ 2 identities and a positive batch".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("bad learning rate {}", self.learning_rate)));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// A trained network and the configuration that built it.
#[derive(Debug, Clone)]
pub struct Trained<T: Scalar> {
    pub config: ConvNetConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Trained<T> {
    pub fn net(&self) -> Result<ConvNet> {
        let mut scratch = ParamStore::<T>::new();
        let net = ConvNet::new(self.config.clone(), "net", &mut scratch, &mut stream_rng(0, INIT_DOMAIN, 0))?;
        if scratch.len() != self.params.len() {
            return Err(Error::Config("parameter layout does not match network".into()));
        }
        Ok(net)
    }

    pub fn encoder(&self) -> Result<IdentityEncoder> {
        Ok(IdentityEncoder { net: self.net()? })
    }

    /// Unit-norm embeddings of `[N, 3, R, R]` images.
    pub fn embed(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let enc = self.encoder()?;
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        Ok((*enc.embed(&p, g.constant(images.clone()))?.embedding.value()).clone())
    }

    /// Pre-normalization head outputs, the featurizer used for FID.
    pub fn features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let net = self.net()?;
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        Ok((*net.forward(&p, g.constant(images.clone()))?.head.value()).clone())
    }

    /// Scalar head outputs, one per image.
    pub fn regress(&self, images: &Tensor<T>) -> Result<Vec<f64>> {
        Ok(self.features(images)?.data().iter().map(|v| v.as_f64()).collect())
    }
}

/// Renders a batch of random-identity, random-attribute faces from the pool.
fn pool_batch(config: &PretrainConfig, step: u64) -> Result<(Vec<RenderedSample>, Vec<usize>)> {
    let mut rng = stream_rng(config.seed, BATCH_DOMAIN, step);
    let pool_seed = config.seed ^ 0xA11C_E5EE_D000_0000;
    let mut samples = Vec::with_capacity(config.batch_size);
    let mut labels = Vec::with_capacity(config.batch_size);
    for _ in 0..config.batch_size {
        let id = rng.gen_range(0..config.pool_identities);
        let factors = identity_for(pool_seed, id as u32);
        samples.push(render(&factors, &sample_attributes(&mut rng), config.net.resolution)?);
        labels.push(id);
    }
    Ok((samples, labels))
}

fn stack<T: Scalar>(samples: &[RenderedSample]) -> Result<Tensor<T>> {
    Image::stack(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())
}

/// Cosine-margin classification over the identity pool; the classifier
/// weights are discarded afterwards.
pub fn pretrain_identity<T: Scalar>(config: &PretrainConfig, mut on_step: impl FnMut(u64, f64)) -> Result<Trained<T>> {
    config.validate()?;
    let mut init = stream_rng(config.seed, INIT_DOMAIN, 0);
    let mut params = ParamStore::<T>::new();
    let enc = IdentityEncoder::new(config.net.clone(), "net", &mut params, &mut init)?;
    let mut classes = ParamStore::<T>::new();
    let centers = classes.add("centers", randn(&[config.pool_identities, config.net.out_dim], &mut init));
    let (mut opt, mut opt_c) = (Adam::new(config.adam()), Adam::new(config.adam()));
    let mut jit_rng = stream_rng(config.seed, POOL_DOMAIN, 0);
    for step in 0..config.steps {
        let (samples, labels) = pool_batch(config, step)?;
        let jitter: Vec<_> = samples.iter().map(|_| config.jitter.sample(&mut jit_rng)).collect();
        let g = Graph::new();
        let p = params.bind(&g, true);
        let c = classes.bind(&g, true);
        let x = color_jitter(g.constant(stack(&samples)?), &jitter)?;
        let emb = enc.embed(&p, x)?.embedding;
        let w = c.var(centers).row_normalize(1e-12)?;
        let loss = emb.linear(&w)?.cross_entropy(&labels, config.margin, config.scale)?;
        let value = loss.item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                record: format!("{{\"embedder_loss\":{value}}}"),
            });
        }
        let grads = loss.backward()?;
        opt.step(&mut params, &p.gradients(&grads))?;
        opt_c.step(&mut classes, &c.gradients(&grads))?;
        on_step(step, value);
    }
    Ok(Trained {
        config: config.net.clone(),
        params,
    })
}

/// Mean-squared yaw regression on random renders.
pub fn pretrain_pose<T: Scalar>(config: &PretrainConfig, mut on_step: impl FnMut(u64, f64)) -> Result<Trained<T>> {
    config.validate()?;
    if config.net.out_dim != 1 {
        return Err(Error::Config("pose regressor needs out_dim = 1".into()));
    }
    let mut params = ParamStore::<T>::new();
    let net = ConvNet::new(config.net.clone(), "net", &mut params, &mut stream_rng(config.seed, INIT_DOMAIN, 0))?;
    let mut opt = Adam::new(config.adam());
    for step in 0..config.steps {
        let (samples, _) = pool_batch(config, step)?;
        let yaw: Vec<f64> = samples.iter().map(|s| s.attributes.yaw).collect();
        let g = Graph::new();
        let p = params.bind(&g, true);
        let pred = net.forward(&p, g.constant(stack(&samples)?))?.head;
        let target = g.constant(Tensor::from_f64(&[samples.len(), 1], &yaw)?);
        let loss = pred.sub(&target)?.square().mean_all();
        let value = loss.item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                record: format!("{{\"pose_loss\":{value}}}"),
            });
        }
        let grads = loss.backward()?;
        opt.step(&mut params, &p.gradients(&grads))?;
        on_step(step, value);
    }
    Ok(Trained {
        config: config.net.clone(),
        params,
    })
}

/// Mean intra-identity and inter-identity cosine over a labelled set.
pub fn cosine_separation<T: Scalar>(embedder: &Trained<T>, samples: &[RenderedSample]) -> Result<(f64, f64)> {
    let emb = embedder.embed(&stack::<T>(samples)?)?;
    let d = emb.dim(1);
    let row = |i: usize| &emb.data()[i * d..(i + 1) * d];
    let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let c: f64 = row(i).iter().zip(row(j)).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
            let slot = if samples[i].identity.identity_id == samples[j].identity.identity_id {
                &mut intra
            } else {
                &mut inter
            };
            slot.0 += c;
            slot.1 += 1;
        }
    }
    if intra.1 == 0 || inter.1 == 0 {
        return Err(Error::Empty("cosine separation needs repeated and distinct identities"));
    }
    Ok((intra.0 / intra.1 as f64, inter.0 / inter.1 as f64))
}

/// The three frozen networks, stored together.
#[derive(Debug, Clone)]
pub struct EmbedderSet<T: Scalar> {
    pub identity: Trained<T>,
    pub evaluation: Trained<T>,
    pub pose: Trained<T>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmbedderHeader {
    kind: String,
    identity: ConvNetConfig,
    evaluation: ConvNetConfig,
    pose: ConvNetConfig,
}

const SLOTS: [&str; 3] = ["identity", "evaluation", "pose"];

impl<T: Scalar> EmbedderSet<T> {
    fn slots(&self) -> [&Trained<T>; 3] {
        [&self.identity, &self.evaluation, &self.pose]
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new(&EmbedderHeader {
            kind: "embedders".into(),
            identity: self.identity.config.clone(),
            evaluation: self.evaluation.config.clone(),
            pose: self.pose.config.clone(),
        })?;
        for (name, t) in SLOTS.iter().zip(self.slots()) {
            push_store(&mut a, name, &t.params);
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let h: EmbedderHeader = a.header_as()?;
        if h.kind != "embedders" {
            return Err(Error::Config(format!("expected an embedder archive, found `{}`", h.kind)));
        }
        let load = |name: &str, config: ConvNetConfig| -> Result<Trained<T>> {
            let mut params = ParamStore::new();
            ConvNet::new(config.clone(), "net", &mut params, &mut stream_rng(0, INIT_DOMAIN, 0))?;
            load_store(a, name, &mut params)?;
            Ok(Trained { config, params })
        };
        Ok(Self {
            identity: load(SLOTS[0], h.identity)?,
            evaluation: load(SLOTS[1], h.evaluation)?,
            pose: load(SLOTS[2], h.pose)?,
        })
    }

    /// Identity parameters renamed into the model's `identity` store layout.
    pub fn identity_store(&self, model_store: &ParamStore<T>) -> Result<ParamStore<T>> {
        if model_store.len() != self.identity.params.len() {
            return Err(Error::Config("identity embedder layout differs from the model's".into()));
        }
        let mut out = model_store.clone();
        for (id, p) in out.ids().collect::<Vec<_>>().into_iter().zip(self.identity.params.params()) {
            if out.get(id).shape() != p.value.shape() {
                return Err(Error::Config(format!("identity parameter `{}` has a different shape", p.name)));
            }
            *out.get_mut(id) = p.value.clone();
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> EmbedderSet<U> {
        let c = |t: &Trained<T>| Trained {
            config: t.config.clone(),
            params: t.params.cast(),
        };
        EmbedderSet {
            identity: c(&self.identity),
            evaluation: c(&self.evaluation),
            pose: c(&self.pose),
        }
    }
}

/// Trains all three networks.
pub fn pretrain_all<T: Scalar>(resolution: usize, seed: u64, mut log: impl FnMut(&str, u64, f64)) -> Result<EmbedderSet<T>> {
    let identity = pretrain_identity(&PretrainConfig::identity(resolution, seed), |s, v| log("identity", s, v))?;
    let evaluation = pretrain_identity(&PretrainConfig::evaluation(resolution, seed), |s, v| log("evaluation", s, v))?;
    let pose = pretrain_pose(&PretrainConfig::pose(resolution, seed), |s, v| log("pose", s, v))?;
    Ok(EmbedderSet {
        identity,
        evaluation,
        pose,
    })
}
