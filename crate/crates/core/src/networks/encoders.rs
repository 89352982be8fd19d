use rand::Rng;
use styleswap_autograd::{Bound, ParamStore, Scalar, Var};

use super::generator::GeneratorConfig;
use super::layers::{lrelu, EqualConv2d, EqualLinear};
use crate::error::{Error, Result};

/// Strided convolutional pyramid producing one attribute map per
/// generator block.
#[derive(Debug, Clone)]
pub struct AttributeEncoder {
    stem: EqualConv2d,
    /// Per level, top resolution first: downsampling convs (empty at the top).
    down: Vec<Vec<EqualConv2d>>,
    /// Per level, top resolution first.
    heads: Vec<EqualConv2d>,
    resolution: usize,
}

impl AttributeEncoder {
    /// `channels[l]` is the width at block `l`'s resolution, 4x4 first.
    pub fn new<T: Scalar>(
        gen: &GeneratorConfig,
        channels: &[usize],
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let l = gen.num_blocks;
        if channels.len() != l || channels.contains(&0) {
            return Err(Error::Config(format!(
                "encoder needs {l} positive channel entries, got {channels:?}"
            )));
        }
        let top = l - 1;
        let stem = EqualConv2d::new(store, "enc.stem", 3, channels[top], 3, 1, true, rng);
        let mut down = Vec::with_capacity(l);
        let mut heads = Vec::with_capacity(l);
        for level in (0..l).rev() {
            let c = channels[level];
            let convs = if level == top {
                Vec::new()
            } else {
                vec![
                    EqualConv2d::new(store, &format!("enc.l{level}.down"), channels[level + 1], c, 3, 2, true, rng),
                    EqualConv2d::new(store, &format!("enc.l{level}.conv"), c, c, 3, 1, true, rng),
                ]
            };
            down.push(convs);
            heads.push(EqualConv2d::new(
                store,
                &format!("enc.l{level}.head"),
                c,
                gen.attribute_channels[level],
                1,
                1,
                true,
                rng,
            ));
        }
        Ok(Self {
            stem,
            down,
            heads,
            resolution: gen.resolution(),
        })
    }

    /// Attribute pyramid, 4x4 first.
    pub fn encode<'g, T: Scalar>(&self, p: &Bound<'g, T>, image: Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        check_resolution(&image, self.resolution)?;
        let mut x = lrelu(self.stem.forward(p, image)?);
        let mut maps = Vec::with_capacity(self.heads.len());
        for (convs, head) in self.down.iter().zip(&self.heads) {
            for conv in convs {
                x = lrelu(conv.forward(p, x)?);
            }
            maps.push(head.forward(p, x)?);
        }
        maps.reverse();
        Ok(maps)
    }
}

pub(crate) fn check_resolution<T: Scalar>(image: &Var<'_, T>, resolution: usize) -> Result<()> {
    let s = image.shape();
    if s.len() != 4 || s[1] != 3 || s[2] != resolution || s[3] != resolution {
        return Err(Error::Resolution {
            expected: resolution,
            got: s.get(2).copied().unwrap_or(0),
        });
    }
    Ok(())
}

/// Two fully connected layers from identity embedding to style vector.
#[derive(Debug, Clone)]
pub struct StyleMapper {
    pub hidden: EqualLinear,
    pub out: EqualLinear,
}

impl StyleMapper {
    pub fn new<T: Scalar>(
        embed_dim: usize,
        hidden: usize,
        style_dim: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            hidden: EqualLinear::new(store, "map.fc1", embed_dim, hidden, 0.0, rng),
            out: EqualLinear::new(store, "map.fc2", hidden, style_dim, 0.0, rng),
        }
    }

    pub fn map<'g, T: Scalar>(&self, p: &Bound<'g, T>, f_id: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = lrelu(self.hidden.forward(p, f_id)?);
        self.out.forward(p, h)
    }
}
