use rand::Rng;
use serde::{Deserialize, Serialize};
use styleswap_autograd::{Bound, ParamId, ParamStore, Scalar, Tensor, Var};

use super::layers::{lrelu, randn, ModulatedConv};
use crate::error::{Error, Result};
use crate::mask::{self, MaskPyramid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub num_blocks: usize,
    pub style_dim: usize,
    /// Feature channels per block, 4x4 first.
    pub channels: Vec<usize>,
    /// Channels of the attribute map infused into each block.
    pub attribute_channels: Vec<usize>,
    pub demod_epsilon: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::with_channels(vec![128, 128, 64, 64], 64)
    }
}

impl GeneratorConfig {
    /// Config whose attribute maps carry half the block channels.
    pub fn with_channels(channels: Vec<usize>, style_dim: usize) -> Self {
        Self {
            num_blocks: channels.len(),
            style_dim,
            attribute_channels: channels.iter().map(|c| (c / 2).max(1)).collect(),
            channels,
            demod_epsilon: 1e-8,
        }
    }

    pub fn resolution(&self) -> usize {
        4 << (self.num_blocks - 1)
    }

    pub fn style_slots(&self) -> usize {
        2 * self.num_blocks
    }

    /// Spatial size of block `l` (0-based).
    pub fn block_resolution(&self, l: usize) -> usize {
        4 << l
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.num_blocks;
        if l == 0 || l > 10 {
            return Err(Error::Config(format!("num_blocks must be in 1..=10, got {l}")));
        }
        if self.channels.len() != l || self.attribute_channels.len() != l {
            return Err(Error::Config(format!(
                "expected {l} channel entries, got {} and {} attribute entries",
                self.channels.len(),
                self.attribute_channels.len()
            )));
        }
        if self.channels.contains(&0) || self.attribute_channels.contains(&0) || self.style_dim == 0 {
            return Err(Error::Config("channel counts and style_dim must be positive".into()));
        }
        if self.demod_epsilon <= 0.0 {
            return Err(Error::Config("demod_epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Style input: one vector shared by every slot, or one vector per slot.
/// Each entry is `[N, style_dim]` or `[1, style_dim]` (broadcast over the batch).
#[derive(Debug, Clone)]
pub enum Styles<'g, T: Scalar> {
    Vector(Var<'g, T>),
    Stack(Vec<Var<'g, T>>),
}

impl<'g, T: Scalar> Styles<'g, T> {
    /// Splits a `[slots, D]` tensor into per-slot `[1, D]` rows.
    pub fn from_rows(stack: Var<'g, T>) -> Result<Self> {
        let s = stack.shape();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "Styles::from_rows",
                detail: format!("expected [slots, D], got {s:?}"),
            });
        }
        Ok(Self::Stack(
            (0..s[0])
                .map(|i| stack.slice_rows(i, 1))
                .collect::<std::result::Result<_, _>>()?,
        ))
    }

    /// Every slot set to `w`.
    pub fn broadcast(w: Var<'g, T>, slots: usize) -> Self {
        Self::Stack(vec![w; slots])
    }

    fn row(&self, i: usize, n: usize, dim: usize) -> Result<Var<'g, T>> {
        let v = match self {
            Self::Vector(w) => *w,
            Self::Stack(rows) => rows[i],
        };
        match v.shape()[..] {
            [rows, d] if d == dim && rows == n => Ok(v),
            [1, d] if d == dim => Ok(v.broadcast_rows(n)?),
            _ => Err(Error::Shape {
                op: "generate",
                detail: format!("style row {i} has shape {:?}, batch {n}, dim {dim}", v.shape()),
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorBlock {
    pub conv1: ModulatedConv,
    pub bias1: ParamId,
    pub conv2: ModulatedConv,
    pub bias2: ParamId,
    pub to_rgb: ModulatedConv,
    pub rgb_bias: ParamId,
    pub to_mask: ModulatedConv,
    pub mask_bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub constant: ParamId,
    pub blocks: Vec<GeneratorBlock>,
}

/// Output of one generator pass.
#[derive(Debug, Clone)]
pub struct SwapOutput<'g, T: Scalar> {
    /// Raw generated image `I_g` in `[-1, 1]`.
    pub image: Var<'g, T>,
    pub masks: Option<MaskPyramid<'g, T>>,
    /// Mask-blended composite with the target, when masks are on.
    pub blended: Option<Var<'g, T>>,
}

impl<'g, T: Scalar> SwapOutput<'g, T> {
    /// The image that counts as the swap: the blend if present, else `I_g`.
    pub fn result(&self) -> Var<'g, T> {
        self.blended.unwrap_or(self.image)
    }

    pub fn final_mask(&self) -> Option<Var<'g, T>> {
        self.masks.as_ref().and_then(MaskPyramid::last)
    }
}

impl Generator {
    pub fn new<T: Scalar>(config: GeneratorConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (d, eps) = (config.style_dim, config.demod_epsilon);
        let constant = store.add("gen.const", randn(&[1, config.channels[0], 4, 4], rng));
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for l in 0..config.num_blocks {
            let c = config.channels[l];
            let prev = if l == 0 { c } else { config.channels[l - 1] };
            let cin = prev + config.attribute_channels[l];
            let name = |s: &str| format!("gen.b{l}.{s}");
            blocks.push(GeneratorBlock {
                conv1: ModulatedConv::new(store, &name("conv1"), cin, c, 3, d, true, eps, rng),
                bias1: store.add(name("conv1.bias"), Tensor::zeros(&[c])),
                conv2: ModulatedConv::new(store, &name("conv2"), c, c, 3, d, true, eps, rng),
                bias2: store.add(name("conv2.bias"), Tensor::zeros(&[c])),
                to_rgb: ModulatedConv::new(store, &name("to_rgb"), c, 3, 1, d, false, eps, rng),
                rgb_bias: store.add(name("to_rgb.bias"), Tensor::zeros(&[3])),
                to_mask: ModulatedConv::zeroed(store, &name("to_mask"), c, 1, 1, d, false, eps, rng),
                mask_bias: store.add(name("to_mask.bias"), Tensor::zeros(&[1])),
            });
        }
        Ok(Self {
            config,
            constant,
            blocks,
        })
    }

    /// Parameters that belong to the mask heads.
    pub fn mask_params(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| [b.to_mask.weight, b.to_mask.affine.weight, b.to_mask.affine.bias, b.mask_bias])
            .collect()
    }

    /// Synthesizes an image from an attribute pyramid (4x4 first) and styles.
    ///
    /// `target` is the image the attributes came from; it is used only for
    /// blending when `mask_enabled` is set.
    pub fn generate<'g, T: Scalar>(
        &self,
        p: &Bound<'g, T>,
        attributes: &[Var<'g, T>],
        styles: &Styles<'g, T>,
        target: Var<'g, T>,
        mask_enabled: bool,
    ) -> Result<SwapOutput<'g, T>> {
        let cfg = &self.config;
        if attributes.len() != cfg.num_blocks {
            return Err(Error::Shape {
                op: "generate",
                detail: format!("{} attribute maps for {} blocks", attributes.len(), cfg.num_blocks),
            });
        }
        if let Styles::Stack(rows) = styles {
            if rows.len() != cfg.style_slots() {
                return Err(Error::Shape {
                    op: "generate",
                    detail: format!("{} style rows, expected {}", rows.len(), cfg.style_slots()),
                });
            }
        }
        let n = attributes[0].shape()[0];
        for (l, f) in attributes.iter().enumerate() {
            let r = cfg.block_resolution(l);
            let want = [n, cfg.attribute_channels[l], r, r];
            if f.shape() != want {
                return Err(Error::Shape {
                    op: "generate",
                    detail: format!("attribute map {l} is {:?}, expected {want:?}", f.shape()),
                });
            }
        }
        let mut x = p.var(self.constant).broadcast_rows(n)?;
        let mut rgb: Option<Var<'g, T>> = None;
        let mut masks = mask_enabled.then(MaskPyramid::new);
        for (l, block) in self.blocks.iter().enumerate() {
            let s1 = styles.row(2 * l, n, cfg.style_dim)?;
            let s2 = styles.row(2 * l + 1, n, cfg.style_dim)?;
            if l > 0 {
                x = x.upsample2x()?;
            }
            let mut f = attributes[l];
            if let (Some(m), true) = (&masks, l > 0) {
                f = mask::mask_attributes(f, m.gate_for_next(l - 1)?)?;
            }
            x = Var::concat(&[x, f], 1)?;
            x = lrelu(block.conv1.forward(p, x, s1)?.add_bias(&p.var(block.bias1))?);
            x = lrelu(block.conv2.forward(p, x, s2)?.add_bias(&p.var(block.bias2))?);
            let y = block.to_rgb.forward(p, x, s2)?.add_bias(&p.var(block.rgb_bias))?;
            rgb = Some(match rgb {
                Some(prev) => prev.upsample2x()?.add(&y)?,
                None => y,
            });
            if let Some(m) = masks.as_mut() {
                m.push(mask::to_mask(p, &block.to_mask, block.mask_bias, x, s2)?)?;
            }
        }
        let image = rgb.expect("at least one block").tanh();
        let blended = match &masks {
            Some(m) => Some(mask::blend(m.last().expect("non-empty"), image, target)?),
            None => None,
        };
        Ok(SwapOutput {
            image,
            masks,
            blended,
        })
    }
}
