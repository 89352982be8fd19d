//! Generator, encoders, identity embedder and discriminator.

pub mod discriminator;
pub mod encoders;
pub mod generator;
pub mod identity;
pub mod layers;

use rand::Rng;
use serde::{Deserialize, Serialize};
use styleswap_autograd::{Bound, Graph, ParamStore, Scalar, Var};

pub use discriminator::{Discriminator, DiscriminatorOutput};
pub use encoders::{AttributeEncoder, StyleMapper};
pub use generator::{Generator, GeneratorConfig, Styles, SwapOutput};
pub use identity::{ConvNet, ConvNetConfig, ConvNetOutput, IdentityEncoder, IdentityFeatures};
pub use layers::modulated_conv;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    /// Attribute encoder width per block resolution, 4x4 first.
    pub encoder_channels: Vec<usize>,
    pub mapper_hidden: usize,
    /// Discriminator width per resolution, 4x4 first.
    pub discriminator_channels: Vec<usize>,
    pub identity: ConvNetConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::from_generator(GeneratorConfig::default())
    }
}

impl ModelConfig {
    /// Encoder and discriminator widths follow the generator's.
    pub fn from_generator(generator: GeneratorConfig) -> Self {
        let res = generator.resolution();
        Self {
            encoder_channels: generator.channels.clone(),
            discriminator_channels: generator.channels.clone(),
            mapper_hidden: 2 * generator.style_dim,
            identity: ConvNetConfig::identity(res),
            generator,
        }
    }

    pub fn resolution(&self) -> usize {
        self.generator.resolution()
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.identity.validate()?;
        let l = self.generator.num_blocks;
        if self.discriminator_channels.len() != l {
            return Err(Error::Config(format!(
                "discriminator needs {l} channel entries, got {}",
                self.discriminator_channels.len()
            )));
        }
        if self.identity.resolution != self.resolution() {
            return Err(Error::Config(format!(
                "identity embedder resolution {} differs from generator resolution {}",
                self.identity.resolution,
                self.resolution()
            )));
        }
        if self.mapper_hidden == 0 {
            return Err(Error::Config("mapper_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Network structure. Holds parameter handles only, so one instance serves
/// stores of any scalar type with the same layout.
#[derive(Debug, Clone)]
pub struct Networks {
    pub config: ModelConfig,
    pub generator: Generator,
    pub encoder: AttributeEncoder,
    pub mapper: StyleMapper,
    pub discriminator: Discriminator,
    pub identity: IdentityEncoder,
}

#[derive(Debug, Clone)]
pub struct ModelParams<T: Scalar> {
    pub generator: ParamStore<T>,
    pub encoder: ParamStore<T>,
    pub mapper: ParamStore<T>,
    pub discriminator: ParamStore<T>,
    pub identity: ParamStore<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            generator: self.generator.cast(),
            encoder: self.encoder.cast(),
            mapper: self.mapper.cast(),
            discriminator: self.discriminator.cast(),
            identity: self.identity.cast(),
        }
    }

    pub fn stores(&self) -> [(&'static str, &ParamStore<T>); 5] {
        [
            ("generator", &self.generator),
            ("encoder", &self.encoder),
            ("mapper", &self.mapper),
            ("discriminator", &self.discriminator),
            ("identity", &self.identity),
        ]
    }

    pub fn stores_mut(&mut self) -> [(&'static str, &mut ParamStore<T>); 5] {
        [
            ("generator", &mut self.generator),
            ("encoder", &mut self.encoder),
            ("mapper", &mut self.mapper),
            ("discriminator", &mut self.discriminator),
            ("identity", &mut self.identity),
        ]
    }

    /// Checksum over every store except the discriminator.
    pub fn swap_checksum(&self) -> u64 {
        [&self.generator, &self.encoder, &self.mapper, &self.identity]
            .iter()
            .fold(0u64, |acc, s| acc.rotate_left(13) ^ s.checksum())
    }
}

/// Which stores receive gradients in a pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct Trainable {
    pub generator: bool,
    pub encoder: bool,
    pub mapper: bool,
    pub discriminator: bool,
}

impl Trainable {
    pub const NONE: Self = Self {
        generator: false,
        encoder: false,
        mapper: false,
        discriminator: false,
    };
    pub const SWAPPER: Self = Self {
        generator: true,
        encoder: true,
        mapper: true,
        discriminator: false,
    };
    pub const DISCRIMINATOR: Self = Self {
        generator: false,
        encoder: false,
        mapper: false,
        discriminator: true,
    };
}

impl Networks {
    /// Builds the networks and freshly initialized parameters.
    pub fn new<T: Scalar>(config: ModelConfig, rng: &mut impl Rng) -> Result<(Self, ModelParams<T>)> {
        config.validate()?;
        let mut params = ModelParams {
            generator: ParamStore::new(),
            encoder: ParamStore::new(),
            mapper: ParamStore::new(),
            discriminator: ParamStore::new(),
            identity: ParamStore::new(),
        };
        let generator = Generator::new(config.generator.clone(), &mut params.generator, rng)?;
        let encoder = AttributeEncoder::new(&config.generator, &config.encoder_channels, &mut params.encoder, rng)?;
        let identity = IdentityEncoder::new(config.identity.clone(), "id", &mut params.identity, rng)?;
        let mapper = StyleMapper::new(
            identity.embed_dim(),
            config.mapper_hidden,
            config.generator.style_dim,
            &mut params.mapper,
            rng,
        );
        let discriminator = Discriminator::new(&config.discriminator_channels, &mut params.discriminator, rng)?;
        params.identity.freeze();
        Ok((
            Self {
                config,
                generator,
                encoder,
                mapper,
                discriminator,
                identity,
            },
            params,
        ))
    }

    pub fn bind<'g, T: Scalar>(&'g self, params: &ModelParams<T>, graph: &'g Graph<T>, trainable: Trainable) -> Session<'g, T> {
        Session {
            nets: self,
            graph,
            generator: params.generator.bind(graph, trainable.generator),
            encoder: params.encoder.bind(graph, trainable.encoder),
            mapper: params.mapper.bind(graph, trainable.mapper),
            discriminator: params.discriminator.bind(graph, trainable.discriminator),
            identity: params.identity.bind(graph, false),
        }
    }

    /// Number of discriminator feature layers.
    pub fn num_disc_features(&self) -> usize {
        self.discriminator.num_features()
    }
}

/// All parameter stores registered on one graph.
pub struct Session<'g, T: Scalar> {
    pub nets: &'g Networks,
    pub graph: &'g Graph<T>,
    pub generator: Bound<'g, T>,
    pub encoder: Bound<'g, T>,
    pub mapper: Bound<'g, T>,
    pub discriminator: Bound<'g, T>,
    pub identity: Bound<'g, T>,
}

impl<'g, T: Scalar> Session<'g, T> {
    pub fn embed_identity(&self, image: Var<'g, T>) -> Result<IdentityFeatures<'g, T>> {
        self.nets.identity.embed(&self.identity, image)
    }

    pub fn map_identity(&self, f_id: Var<'g, T>) -> Result<Var<'g, T>> {
        self.nets.mapper.map(&self.mapper, f_id)
    }

    pub fn encode_attributes(&self, image: Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        self.nets.encoder.encode(&self.encoder, image)
    }

    pub fn generate(
        &self,
        attributes: &[Var<'g, T>],
        styles: &Styles<'g, T>,
        target: Var<'g, T>,
        mask_enabled: bool,
    ) -> Result<SwapOutput<'g, T>> {
        self.nets
            .generator
            .generate(&self.generator, attributes, styles, target, mask_enabled)
    }

    pub fn discriminate(&self, image: Var<'g, T>) -> Result<DiscriminatorOutput<'g, T>> {
        self.nets.discriminator.discriminate(&self.discriminator, image)
    }

    /// Style vector of a source image: `FC_w(E_id(source))`.
    pub fn source_style(&self, source: Var<'g, T>) -> Result<Var<'g, T>> {
        let f = self.embed_identity(source)?;
        self.map_identity(f.embedding)
    }

    /// Swaps the identity of `source` onto `target` in W space.
    pub fn swap(&self, source: Var<'g, T>, target: Var<'g, T>, mask_enabled: bool) -> Result<SwapOutput<'g, T>> {
        let w = self.source_style(source)?;
        let attrs = self.encode_attributes(target)?;
        self.generate(&attrs, &Styles::Vector(w), target, mask_enabled)
    }
}

/// A complete model: structure plus parameters.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub nets: Networks,
    pub params: ModelParams<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let (nets, params) = Networks::new(config, rng)?;
        Ok(Self { nets, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.nets.config
    }

    pub fn bind<'g>(&'g self, graph: &'g Graph<T>, trainable: Trainable) -> Session<'g, T> {
        self.nets.bind(&self.params, graph, trainable)
    }

    /// Replaces the identity embedder weights (kept frozen).
    pub fn set_identity(&mut self, mut store: ParamStore<T>) -> Result<()> {
        let cur = &self.params.identity;
        let same_layout = cur.len() == store.len()
            && cur
                .params()
                .iter()
                .zip(store.params())
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
        if !same_layout {
            return Err(Error::Config("identity embedder layout does not match the model".into()));
        }
        store.freeze();
        self.params.identity = store;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut params = self.params.cast::<U>();
        params.identity.freeze();
        Model {
            nets: self.nets.clone(),
            params,
        }
    }
}
