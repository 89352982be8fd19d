use rand::Rng;
use serde::{Deserialize, Serialize};
use styleswap_autograd::{Bound, ParamStore, Scalar, Var};

use super::encoders::check_resolution;
use super::layers::{lrelu, EqualConv2d, EqualLinear};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvNetConfig {
    pub resolution: usize,
    /// Widths of the three downsampling stages.
    pub widths: [usize; 3],
    pub out_dim: usize,
}

impl ConvNetConfig {
    pub fn identity(resolution: usize) -> Self {
        Self {
            resolution,
            widths: [32, 64, 96],
            out_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 || !self.resolution.is_power_of_two() {
            return Err(Error::Config(format!("bad embedder resolution {}", self.resolution)));
        }
        if self.widths.contains(&0) || self.out_dim == 0 {
            return Err(Error::Config("embedder widths must be positive".into()));
        }
        Ok(())
    }
}

/// Stem conv, three stride-2 stages and a dense head.
#[derive(Debug, Clone)]
pub struct ConvNet {
    pub config: ConvNetConfig,
    stem: EqualConv2d,
    stages: Vec<EqualConv2d>,
    head: EqualLinear,
}

/// Intermediate outputs of [`ConvNet`].
#[derive(Debug, Clone)]
pub struct ConvNetOutput<'g, T: Scalar> {
    /// Stage outputs at 1/2, 1/4 and 1/8 resolution.
    pub features: Vec<Var<'g, T>>,
    /// Dense head output before any normalization.
    pub head: Var<'g, T>,
}

impl ConvNet {
    pub fn new<T: Scalar>(config: ConvNetConfig, prefix: &str, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let [w0, w1, w2] = config.widths;
        let stem = EqualConv2d::new(store, &format!("{prefix}.stem"), 3, w0, 3, 1, true, rng);
        let stages = [(w0, w0), (w0, w1), (w1, w2)]
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| EqualConv2d::new(store, &format!("{prefix}.stage{i}"), a, b, 3, 2, true, rng))
            .collect();
        let side = config.resolution / 8;
        let head = EqualLinear::new(store, &format!("{prefix}.head"), w2 * side * side, config.out_dim, 0.0, rng);
        Ok(Self {
            config,
            stem,
            stages,
            head,
        })
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, image: Var<'g, T>) -> Result<ConvNetOutput<'g, T>> {
        check_resolution(&image, self.config.resolution)?;
        let n = image.shape()[0];
        let mut x = lrelu(self.stem.forward(p, image)?);
        let mut features = Vec::with_capacity(3);
        for stage in &self.stages {
            x = lrelu(stage.forward(p, x)?);
            features.push(x);
        }
        let flat = x.reshape(&[n, x.value().numel() / n])?;
        let head = self.head.forward(p, flat)?;
        Ok(ConvNetOutput { features, head })
    }
}

/// Unit-norm identity embedding plus the features used for perceptual terms.
#[derive(Debug, Clone)]
pub struct IdentityFeatures<'g, T: Scalar> {
    pub embedding: Var<'g, T>,
    pub penultimate: Var<'g, T>,
    pub features: Vec<Var<'g, T>>,
}

/// Identity embedder: a [`ConvNet`] whose head is L2-normalized.
#[derive(Debug, Clone)]
pub struct IdentityEncoder {
    pub net: ConvNet,
}

pub const EMBED_EPS: f64 = 1e-12;

impl IdentityEncoder {
    pub fn new<T: Scalar>(config: ConvNetConfig, prefix: &str, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            net: ConvNet::new(config, prefix, store, rng)?,
        })
    }

    pub fn embed<'g, T: Scalar>(&self, p: &Bound<'g, T>, image: Var<'g, T>) -> Result<IdentityFeatures<'g, T>> {
        let out = self.net.forward(p, image)?;
        Ok(IdentityFeatures {
            embedding: out.head.row_normalize(EMBED_EPS)?,
            penultimate: out.head,
            features: out.features,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.net.config.out_dim
    }
}
