//! Training objectives.

use serde::{Deserialize, Serialize};
use styleswap_autograd::{Graph, ParamStore, Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::networks::{Discriminator, IdentityFeatures};

/// Clamping margin applied to soft masks before taking logs.
pub const BCE_MARGIN: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_id: f64,
    pub lambda_fm: f64,
    pub lambda_rec: f64,
    pub lambda_mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_id: 10.0,
            lambda_fm: 100.0,
            lambda_rec: 100.0,
            lambda_mask: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_id, self.lambda_fm, self.lambda_rec, self.lambda_mask];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// Loss terms of one branch. `rec` and `mask` are absent where they do not apply.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts<V> {
    pub adv: V,
    pub id: V,
    pub fm: V,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rec: Option<V>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mask: Option<V>,
}

/// `adv + l_id id + l_fm fm + l_rec rec + l_mask mask`.
pub fn total_loss(parts: &LossParts<f64>, w: &LossWeights) -> f64 {
    parts.adv
        + w.lambda_id * parts.id
        + w.lambda_fm * parts.fm
        + w.lambda_rec * parts.rec.unwrap_or(0.0)
        + w.lambda_mask * parts.mask.unwrap_or(0.0)
}

/// Graph version of [`total_loss`].
pub fn weighted_total<'g, T: Scalar>(parts: &LossParts<Var<'g, T>>, w: &LossWeights) -> Result<Var<'g, T>> {
    let mut total = parts
        .adv
        .add(&parts.id.mul_scalar(w.lambda_id))?
        .add(&parts.fm.mul_scalar(w.lambda_fm))?;
    if let Some(rec) = parts.rec {
        total = total.add(&rec.mul_scalar(w.lambda_rec))?;
    }
    if let Some(mask) = parts.mask {
        total = total.add(&mask.mul_scalar(w.lambda_mask))?;
    }
    Ok(total)
}

impl<'g, T: Scalar> LossParts<Var<'g, T>> {
    pub fn values(&self) -> LossParts<f64> {
        LossParts {
            adv: self.adv.item().as_f64(),
            id: self.id.item().as_f64(),
            fm: self.fm.item().as_f64(),
            rec: self.rec.map(|v| v.item().as_f64()),
            mask: self.mask.map(|v| v.item().as_f64()),
        }
    }
}

/// Per-sample cosine distance `1 - <a, b>` of unit embeddings, `[N]`.
pub fn identity_distance<'g, T: Scalar>(a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(a.row_dot(&b)?.one_minus())
}

/// Mean cosine distance between source embeddings and embeddings of the
/// generated images.
pub fn id_loss<'g, T: Scalar>(f_src: Var<'g, T>, f_gen: Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(identity_distance(f_src, f_gen)?.mean_all())
}

/// Non-saturating generator loss `mean softplus(-fake)`.
pub fn g_adv_loss<'g, T: Scalar>(logit_fake: Var<'g, T>) -> Var<'g, T> {
    logit_fake.neg().softplus().mean_all()
}

/// Logistic discriminator loss `mean softplus(fake) + mean softplus(-real)`.
pub fn d_adv_loss<'g, T: Scalar>(logit_real: Var<'g, T>, logit_fake: Var<'g, T>) -> Result<Var<'g, T>> {
    let fake = logit_fake.softplus().mean_all();
    let real = logit_real.neg().softplus().mean_all();
    Ok(fake.add(&real)?)
}

/// Sum over discriminator layers `n_d..=N_D` (1-based) of the mean absolute
/// feature difference.
pub fn fm_loss<'g, T: Scalar>(gen: &[Var<'g, T>], real: &[Var<'g, T>], n_d: usize) -> Result<Var<'g, T>> {
    if gen.len() != real.len() {
        return Err(Error::Shape {
            op: "fm_loss",
            detail: format!("{} vs {} feature layers", gen.len(), real.len()),
        });
    }
    if n_d == 0 || n_d > gen.len() {
        return Err(Error::Config(format!("n_D = {n_d} outside 1..={}", gen.len())));
    }
    let mut total: Option<Var<'g, T>> = None;
    for (a, b) in gen[n_d - 1..].iter().zip(&real[n_d - 1..]) {
        let term = a.sub(b)?.abs().mean_all();
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// First matched discriminator layer (1-based) for `N_D` layers.
pub fn default_n_d(num_layers: usize) -> usize {
    (num_layers.div_ceil(2) + 1).min(num_layers)
}

/// Mean absolute pixel difference plus mean absolute differences of the
/// frozen embedder's feature maps.
pub fn rec_loss<'g, T: Scalar>(
    gen: Var<'g, T>,
    reference: Var<'g, T>,
    gen_features: &IdentityFeatures<'g, T>,
    ref_features: &IdentityFeatures<'g, T>,
) -> Result<Var<'g, T>> {
    if gen.shape() != reference.shape() {
        return Err(Error::Resolution {
            expected: reference.shape().get(2).copied().unwrap_or(0),
            got: gen.shape().get(2).copied().unwrap_or(0),
        });
    }
    let mut total = gen.sub(&reference)?.abs().mean_all();
    for (a, b) in gen_features.features.iter().zip(&ref_features.features) {
        total = total.add(&a.sub(b)?.abs().mean_all())?;
    }
    Ok(total)
}

/// Mean binary cross-entropy of a soft mask against a binary reference.
pub fn mask_loss<'g, T: Scalar>(m: Var<'g, T>, reference: Var<'g, T>) -> Result<Var<'g, T>> {
    if m.shape() != reference.shape() {
        return Err(Error::Shape {
            op: "mask_loss",
            detail: format!("{:?} vs {:?}", m.shape(), reference.shape()),
        });
    }
    let mc = m.clamp(BCE_MARGIN, 1.0 - BCE_MARGIN);
    let pos = reference.mul(&mc.log())?;
    let neg = reference.one_minus().mul(&mc.one_minus().log())?;
    Ok(pos.add(&neg)?.mean_all().neg())
}

/// R1 penalty `gamma / 2 * mean_n |grad_x D(x_n)|^2` on real images and its
/// gradient with respect to the discriminator parameters.
///
/// The parameter gradient is a Hessian-vector product, evaluated as a
/// central difference of parameter gradients along the input gradient:
/// `(gamma / N) [grad_theta sum D(x + e g) - grad_theta sum D(x - e g)] / (2 e)`
/// with `e = R1_RELATIVE_STEP / rms(g)`.
pub fn r1_penalty<T: Scalar>(
    disc: &Discriminator,
    params: &ParamStore<T>,
    reals: &Tensor<T>,
    gamma: f64,
) -> Result<(f64, Vec<Tensor<T>>)> {
    r1_penalty_with_step(disc, params, reals, gamma, R1_RELATIVE_STEP)
}

/// Input-space step of the R1 Hessian-vector product, relative to the RMS
/// input gradient. Large enough to stay above f32 rounding.
pub const R1_RELATIVE_STEP: f64 = 1e-2;

/// [`r1_penalty`] with an explicit relative step.
pub fn r1_penalty_with_step<T: Scalar>(
    disc: &Discriminator,
    params: &ParamStore<T>,
    reals: &Tensor<T>,
    gamma: f64,
    relative_step: f64,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let n = reals.dim(0) as f64;
    let g = {
        let graph = Graph::new();
        let p = params.bind(&graph, false);
        let x = graph.variable(reals.clone());
        let out = disc.discriminate(&p, x)?;
        let grads = out.logits.sum_all().backward()?;
        grads.get_or_zeros(x)
    };
    let sq: f64 = g.data().iter().map(|v| v.as_f64().powi(2)).sum();
    let value = gamma / 2.0 * sq / n;
    let zero = || params.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    if sq == 0.0 || gamma == 0.0 {
        return Ok((value, zero()));
    }
    let rms = (sq / g.numel() as f64).sqrt();
    let eps = relative_step / rms;
    let param_grad = |sign: f64| -> Result<Vec<Tensor<T>>> {
        let graph = Graph::new();
        let p = params.bind(&graph, true);
        let shifted = reals.zip_map(&g, |a, b| a + T::from_f64(sign * eps) * b)?;
        let out = disc.discriminate(&p, graph.constant(shifted))?;
        let grads = out.logits.sum_all().backward()?;
        Ok(p.gradients(&grads))
    };
    let plus = param_grad(1.0)?;
    let minus = param_grad(-1.0)?;
    let k = gamma / (n * 2.0 * eps);
    let grads = plus
        .iter()
        .zip(&minus)
        .map(|(a, b)| a.zip_map(b, |u, v| T::from_f64((u - v).as_f64() * k)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(g: &Graph<f64>, v: f64) -> Var<'_, f64> {
        g.constant(Tensor::scalar(v))
    }

    #[test]
    fn id_loss_examples() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[1, 2], &[0.6, 0.8]).unwrap());
        let b = g.constant(Tensor::from_f64(&[1, 2], &[0.8, 0.6]).unwrap());
        let o = g.constant(Tensor::from_f64(&[1, 2], &[-0.8, 0.6]).unwrap());
        assert!((id_loss(a, b).unwrap().item() - 0.04).abs() < 1e-12);
        assert!(id_loss(a, a).unwrap().item().abs() < 1e-12);
        assert!((id_loss(a, o).unwrap().item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adversarial_examples() {
        let g = Graph::<f64>::new();
        assert!((g_adv_loss(s(&g, 0.0)).item() - std::f64::consts::LN_2).abs() < 1e-4);
        assert!(d_adv_loss(s(&g, 50.0), s(&g, -50.0)).unwrap().item() < 1e-6);
    }

    #[test]
    fn fm_examples() {
        let g = Graph::<f64>::new();
        let a = [s(&g, 2.0)];
        let b = [s(&g, 5.0)];
        assert_eq!(fm_loss(&a, &b, 1).unwrap().item(), 3.0);
        let x = [g.constant(Tensor::full(&[2, 2], 1.0)), g.constant(Tensor::full(&[3], 0.5))];
        let y = [g.constant(Tensor::zeros(&[2, 2])), g.constant(Tensor::zeros(&[3]))];
        assert_eq!(fm_loss(&x, &y, 1).unwrap().item(), 1.5);
        assert_eq!(fm_loss(&x, &x, 1).unwrap().item(), 0.0);
        assert!(fm_loss(&x, &y, 3).is_err());
        assert!(fm_loss(&x, &y, 0).is_err());
    }

    #[test]
    fn n_d_covers_deepest_half() {
        assert_eq!(default_n_d(5), 4);
        assert_eq!(default_n_d(3), 3);
        assert_eq!(default_n_d(1), 1);
    }

    #[test]
    fn mask_loss_examples() {
        let g = Graph::<f64>::new();
        let one = g.constant(Tensor::ones(&[1, 1, 1, 1]));
        let half = g.constant(Tensor::full(&[1, 1, 1, 1], 0.5));
        assert!(mask_loss(one, one).unwrap().item() < 1e-6);
        assert!((mask_loss(half, one).unwrap().item() - std::f64::consts::LN_2).abs() < 1e-4);
        let r = g.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let h = g.constant(Tensor::full(&[1, 1, 2, 2], 0.5));
        assert!((mask_loss(h, r).unwrap().item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn total_examples() {
        let ones = LossParts {
            adv: 1.0,
            id: 1.0,
            fm: 1.0,
            rec: Some(1.0),
            mask: Some(1.0),
        };
        assert_eq!(total_loss(&ones, &LossWeights::default()), 212.0);
        let zeros = LossParts {
            adv: 0.0,
            id: 0.0,
            fm: 0.0,
            rec: Some(0.0),
            mask: Some(0.0),
        };
        assert_eq!(total_loss(&zeros, &LossWeights::default()), 0.0);
        let nulled = LossWeights {
            lambda_id: 0.0,
            lambda_fm: 0.0,
            lambda_rec: 0.0,
            lambda_mask: 0.0,
        };
        let parts = LossParts {
            adv: 0.7,
            id: 3.0,
            fm: 2.0,
            rec: None,
            mask: Some(5.0),
        };
        assert_eq!(total_loss(&parts, &nulled), 0.7);
    }
}
