//! Differentiable color jitter for identity-encoder inputs.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use styleswap_autograd::{CustomOp, Scalar, Tensor, Var};

use crate::error::{Error, Result};

const GRAY: [f64; 3] = [0.299, 0.587, 0.114];

/// Maximum jitter magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterConfig {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
        }
    }
}

impl JitterConfig {
    pub const NONE: Self = Self {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
        hue: 0.0,
    };

    pub fn sample(&self, rng: &mut impl Rng) -> JitterParams {
        let mut u = |m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        JitterParams {
            brightness: u(self.brightness),
            contrast: 1.0 + u(self.contrast),
            saturation: 1.0 + u(self.saturation),
            hue: u(self.hue),
        }
    }
}

/// One draw: additive brightness, contrast and saturation factors, and a
/// hue rotation in turns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl JitterParams {
    pub const IDENTITY: Self = Self {
        brightness: 0.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
    };

    /// RGB-space hue rotation, or `None` for a zero shift.
    fn hue_matrix(&self) -> Option<Matrix3<f64>> {
        if self.hue == 0.0 {
            return None;
        }
        let to_yiq = Matrix3::new(0.299, 0.587, 0.114, 0.596, -0.274, -0.322, 0.211, -0.523, 0.312);
        let from_yiq = to_yiq.try_inverse().expect("YIQ transform is invertible");
        let (s, c) = (2.0 * std::f64::consts::PI * self.hue).sin_cos();
        let rot = Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c);
        Some(from_yiq * rot * to_yiq)
    }
}

struct JitterOp<T: Scalar> {
    params: Vec<JitterParams>,
    pre_clamp: Tensor<T>,
}

/// Applies brightness, contrast, saturation and hue jitter per sample to an
/// `[N, 3, H, W]` batch in `[-1, 1]`, then clamps to `[-1, 1]`.
pub fn color_jitter<'g, T: Scalar>(x: Var<'g, T>, params: &[JitterParams]) -> Result<Var<'g, T>> {
    let v = x.value();
    let (n, c, h, w) = v.dims4()?;
    if c != 3 || params.len() != n {
        return Err(Error::Shape {
            op: "color_jitter",
            detail: format!("{:?} with {} parameter sets", v.shape(), params.len()),
        });
    }
    let plane = h * w;
    let mut pre = vec![T::zero(); v.numel()];
    for (b, jp) in params.iter().enumerate() {
        let src = &v.data()[b * 3 * plane..(b + 1) * 3 * plane];
        let dst = &mut pre[b * 3 * plane..(b + 1) * 3 * plane];
        let bright = jp.brightness;
        let mut mean = 0.0;
        for p in 0..plane {
            for k in 0..3 {
                mean += GRAY[k] * (src[k * plane + p].as_f64() + bright);
            }
        }
        mean /= plane as f64;
        let (ct, sat) = (jp.contrast, jp.saturation);
        let hue = jp.hue_matrix();
        for p in 0..plane {
            let x2: [f64; 3] = [0, 1, 2].map(|k| ct * (src[k * plane + p].as_f64() + bright) + (1.0 - ct) * mean);
            let gray: f64 = (0..3).map(|k| GRAY[k] * x2[k]).sum();
            let x3 = Vector3::from_fn(|k, _| sat * x2[k] + (1.0 - sat) * gray);
            let x4 = match hue {
                Some(m) => m * x3,
                None => x3,
            };
            for k in 0..3 {
                dst[k * plane + p] = T::from_f64(x4[k]);
            }
        }
    }
    let pre_clamp = Tensor::new(v.shape(), pre)?;
    let out = pre_clamp.map(|t| t.max(-T::one()).min(T::one()));
    Ok(x.graph().custom(
        &[x],
        out,
        Box::new(JitterOp {
            params: params.to_vec(),
            pre_clamp,
        }),
    ))
}

impl<T: Scalar> CustomOp<T> for JitterOp<T> {
    fn name(&self) -> &'static str {
        "color_jitter"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let s = grad.shape();
        let plane = s[2] * s[3];
        let mut dx = vec![T::zero(); grad.numel()];
        for (b, jp) in self.params.iter().enumerate() {
            let off = b * 3 * plane;
            let hue_t = jp.hue_matrix().map(|m| m.transpose());
            let (ct, sat) = (jp.contrast, jp.saturation);
            let mut dx2 = vec![[0.0f64; 3]; plane];
            let mut dm = 0.0;
            for p in 0..plane {
                let dx4 = Vector3::from_fn(|k, _| {
                    let x4 = self.pre_clamp.data()[off + k * plane + p];
                    if x4 > -T::one() && x4 < T::one() {
                        grad.data()[off + k * plane + p].as_f64()
                    } else {
                        0.0
                    }
                });
                let dx3 = match hue_t {
                    Some(m) => m * dx4,
                    None => dx4,
                };
                let sum3 = dx3.sum();
                for k in 0..3 {
                    let d = sat * dx3[k] + (1.0 - sat) * GRAY[k] * sum3;
                    dx2[p][k] = d;
                    dm += d;
                }
            }
            dm *= 1.0 - ct;
            for (p, d2) in dx2.iter().enumerate() {
                for k in 0..3 {
                    dx[off + k * plane + p] = T::from_f64(ct * d2[k] + GRAY[k] * dm / plane as f64);
                }
            }
        }
        vec![Some(Tensor::new(grad.shape(), dx).expect("same shape as grad"))]
    }
}
