use rand::Rng;
use styleswap_autograd::{Bound, ParamStore, Scalar, Var};

use super::encoders::check_resolution;
use super::layers::{lrelu, EqualConv2d, EqualLinear};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct ResBlock {
    conv: EqualConv2d,
    down: EqualConv2d,
    skip: EqualConv2d,
}

/// Residual discriminator with one block per resolution down to 4x4.
#[derive(Debug, Clone)]
pub struct Discriminator {
    from_rgb: EqualConv2d,
    blocks: Vec<ResBlock>,
    final_conv: EqualConv2d,
    fc: EqualLinear,
    out: EqualLinear,
    resolution: usize,
}

/// Logits `[N, 1]` and the intermediate features, top resolution first.
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput<'g, T: Scalar> {
    pub logits: Var<'g, T>,
    pub features: Vec<Var<'g, T>>,
}

impl Discriminator {
    /// `channels[l]` is the width at resolution `4 * 2^l`.
    pub fn new<T: Scalar>(channels: &[usize], store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        let l = channels.len();
        if l == 0 || channels.contains(&0) {
            return Err(Error::Config(format!("bad discriminator channels {channels:?}")));
        }
        let top = l - 1;
        let from_rgb = EqualConv2d::new(store, "disc.from_rgb", 3, channels[top], 1, 1, true, rng);
        let blocks = (1..l)
            .rev()
            .map(|level| {
                let (a, b) = (channels[level], channels[level - 1]);
                let name = |s: &str| format!("disc.l{level}.{s}");
                ResBlock {
                    conv: EqualConv2d::new(store, &name("conv"), a, a, 3, 1, true, rng),
                    down: EqualConv2d::new(store, &name("down"), a, b, 3, 2, true, rng),
                    skip: EqualConv2d::new(store, &name("skip"), a, b, 1, 1, false, rng),
                }
            })
            .collect();
        let c0 = channels[0];
        Ok(Self {
            from_rgb,
            blocks,
            final_conv: EqualConv2d::new(store, "disc.final_conv", c0, c0, 3, 1, true, rng),
            fc: EqualLinear::new(store, "disc.fc", c0 * 16, c0, 0.0, rng),
            out: EqualLinear::new(store, "disc.out", c0, 1, 0.0, rng),
            resolution: 4 << top,
        })
    }

    /// Number of feature layers returned by [`Discriminator::discriminate`].
    pub fn num_features(&self) -> usize {
        self.blocks.len() + 2
    }

    pub fn discriminate<'g, T: Scalar>(&self, p: &Bound<'g, T>, image: Var<'g, T>) -> Result<DiscriminatorOutput<'g, T>> {
        check_resolution(&image, self.resolution)?;
        let n = image.shape()[0];
        let mut features = Vec::with_capacity(self.num_features());
        let mut x = lrelu(self.from_rgb.forward(p, image)?);
        features.push(x);
        for b in &self.blocks {
            let main = lrelu(b.down.forward(p, lrelu(b.conv.forward(p, x)?))?);
            let skip = b.skip.forward(p, x.avg_pool2x()?)?;
            x = main.add(&skip)?.mul_scalar(std::f64::consts::FRAC_1_SQRT_2);
            features.push(x);
        }
        let y = lrelu(self.final_conv.forward(p, x)?);
        let flat = y.reshape(&[n, y.value().numel() / n])?;
        let h = lrelu(self.fc.forward(p, flat)?);
        features.push(h);
        Ok(DiscriminatorOutput {
            logits: self.out.forward(p, h)?,
            features,
        })
    }
}
