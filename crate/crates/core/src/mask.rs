//! Mask branch: per-resolution mask logits accumulated across scales,
//! soft-mask blending and attribute gating.

use styleswap_autograd::{Bound, Scalar, Var};

use crate::error::{Error, Result};
use crate::networks::layers::ModulatedConv;

/// Masks produced alongside one generator pass, ordered from 4x4 upwards.
#[derive(Debug, Clone)]
pub struct MaskPyramid<'g, T: Scalar> {
    /// Head outputs per level.
    pub raw: Vec<Var<'g, T>>,
    /// Pre-sigmoid running sums.
    pub accum: Vec<Var<'g, T>>,
    /// `sigmoid(accum)` per level.
    pub norm: Vec<Var<'g, T>>,
}

impl<'g, T: Scalar> MaskPyramid<'g, T> {
    pub fn new() -> Self {
        Self {
            raw: Vec::new(),
            accum: Vec::new(),
            norm: Vec::new(),
        }
    }

    /// Appends the next level and returns its soft mask.
    pub fn push(&mut self, raw: Var<'g, T>) -> Result<Var<'g, T>> {
        let accum = accumulate(self.accum.last().copied(), raw)?;
        let norm = normalize(accum);
        self.raw.push(raw);
        self.accum.push(accum);
        self.norm.push(norm);
        Ok(norm)
    }

    /// The top-resolution soft mask.
    pub fn last(&self) -> Option<Var<'g, T>> {
        self.norm.last().copied()
    }

    /// Soft mask of level `l` resampled to the next level's resolution,
    /// taken in pre-sigmoid space.
    pub fn gate_for_next(&self, l: usize) -> Result<Var<'g, T>> {
        let acc = self.accum.get(l).ok_or(Error::Empty("mask level"))?;
        Ok(normalize(acc.upsample2x()?))
    }
}

impl<T: Scalar> Default for MaskPyramid<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// One-channel mask logits from block features, structured like ToRGB.
pub fn to_mask<'g, T: Scalar>(
    p: &Bound<'g, T>,
    head: &ModulatedConv,
    bias: styleswap_autograd::ParamId,
    features: Var<'g, T>,
    style: Var<'g, T>,
) -> Result<Var<'g, T>> {
    Ok(head.forward(p, features, style)?.add_bias(&p.var(bias))?)
}

/// `upsample(prev) + raw`, or `raw` alone at the first level.
pub fn accumulate<'g, T: Scalar>(prev: Option<Var<'g, T>>, raw: Var<'g, T>) -> Result<Var<'g, T>> {
    let Some(prev) = prev else {
        return Ok(raw);
    };
    let (ps, rs) = (prev.shape(), raw.shape());
    if ps.len() != 4 || rs.len() != 4 || rs[2] != 2 * ps[2] || rs[3] != 2 * ps[3] {
        return Err(Error::Shape {
            op: "accumulate",
            detail: format!("previous {ps:?} is not half of {rs:?}"),
        });
    }
    Ok(prev.upsample2x()?.add(&raw)?)
}

pub fn normalize<'g, T: Scalar>(accum: Var<'g, T>) -> Var<'g, T> {
    accum.sigmoid()
}

/// `m * generated + (1 - m) * target`, `m` broadcast over RGB.
pub fn blend<'g, T: Scalar>(m: Var<'g, T>, generated: Var<'g, T>, target: Var<'g, T>) -> Result<Var<'g, T>> {
    if generated.shape() != target.shape() {
        return Err(Error::Shape {
            op: "blend",
            detail: format!("{:?} vs {:?}", generated.shape(), target.shape()),
        });
    }
    let fg = generated.scale_spatial(&m)?;
    let bg = target.scale_spatial(&m.one_minus())?;
    Ok(fg.add(&bg)?)
}

/// Blocks attributes where the mask is on: `f * (1 - m)`.
pub fn mask_attributes<'g, T: Scalar>(features: Var<'g, T>, m: Var<'g, T>) -> Result<Var<'g, T>> {
    let (fs, ms) = (features.shape(), m.shape());
    if fs.len() != 4 || ms.len() != 4 || fs[2..] != ms[2..] {
        return Err(Error::Resolution {
            expected: fs.get(2).copied().unwrap_or(0),
            got: ms.get(2).copied().unwrap_or(0),
        });
    }
    Ok(features.scale_spatial(&m.one_minus())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use styleswap_autograd::{Graph, Tensor};

    fn c<'g>(g: &'g Graph<f64>, shape: &[usize], v: f64) -> Var<'g, f64> {
        g.constant(Tensor::full(shape, v))
    }

    #[test]
    fn accumulate_constant_cancels() {
        let g = Graph::new();
        let a = accumulate(Some(c(&g, &[1, 1, 2, 2], 1.0)), c(&g, &[1, 1, 4, 4], -1.0)).unwrap();
        assert!(a.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn accumulate_base_case_and_ratio_check() {
        let g = Graph::new();
        let r = c(&g, &[1, 1, 4, 4], 0.3);
        assert_eq!(accumulate(None, r).unwrap().id(), r.id());
        assert!(accumulate(Some(c(&g, &[1, 1, 4, 4], 0.0)), r).is_err());
    }

    #[test]
    fn normalize_values() {
        let g = Graph::new();
        assert_eq!(normalize(c(&g, &[1], 0.0)).item(), 0.5);
        assert!((normalize(c(&g, &[1], 100.0)).item() - 1.0).abs() < 1e-6);
        assert!((normalize(c(&g, &[1], 1.0)).item() - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let g = Graph::new();
        let ig = g.constant(Tensor::from_f64(&[1, 3, 1, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
        let it = c(&g, &[1, 3, 1, 2], -0.7);
        let one = blend(c(&g, &[1, 1, 1, 2], 1.0), ig, it).unwrap();
        assert_eq!(one.value().data(), ig.value().data());
        let zero = blend(c(&g, &[1, 1, 1, 2], 0.0), ig, it).unwrap();
        assert_eq!(zero.value().data(), it.value().data());
        let q = blend(c(&g, &[1, 1, 1, 1], 0.25), c(&g, &[1, 3, 1, 1], 0.8), c(&g, &[1, 3, 1, 1], 0.0)).unwrap();
        assert!(q.value().data().iter().all(|v| (v - 0.2).abs() < 1e-7));
    }

    #[test]
    fn mask_attributes_values() {
        let g = Graph::new();
        let f = c(&g, &[1, 2, 4, 4], 2.0);
        let z = mask_attributes(f, c(&g, &[1, 1, 4, 4], 1.0)).unwrap();
        assert!(z.value().data().iter().all(|&v| v == 0.0));
        let same = mask_attributes(f, c(&g, &[1, 1, 4, 4], 0.0)).unwrap();
        assert_eq!(same.value().data(), f.value().data());
        let half = mask_attributes(f, c(&g, &[1, 1, 4, 4], 0.5)).unwrap();
        assert!(half.value().data().iter().all(|&v| v == 1.0));
        assert!(mask_attributes(f, c(&g, &[1, 1, 2, 2], 0.5)).is_err());
    }

    #[test]
    fn gradients_reach_both_blend_inputs() {
        let g = Graph::new();
        let m = g.variable(Tensor::full(&[1, 1, 2, 2], 0.3));
        let ig = g.variable(Tensor::full(&[1, 3, 2, 2], 0.5));
        let it = g.constant(Tensor::full(&[1, 3, 2, 2], -0.5));
        let grads = blend(m, ig, it).unwrap().sum_all().backward().unwrap();
        assert!(grads.get(m).unwrap().max_abs() > 0.0);
        assert!(grads.get(ig).unwrap().max_abs() > 0.0);
    }
}
