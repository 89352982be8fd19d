//! Equalized-learning-rate layers and the modulated convolution.

use rand::Rng;
use rand_distr::StandardNormal;
use styleswap_autograd::{Bound, ParamId, ParamStore, Scalar, Tensor, Var};

use crate::error::{Error, Result};

/// Slope and gain of the leaky ReLU used throughout the networks.
pub const LRELU_SLOPE: f64 = 0.2;
pub const LRELU_GAIN: f64 = std::f64::consts::SQRT_2;

pub fn lrelu<'g, T: Scalar>(x: Var<'g, T>) -> Var<'g, T> {
    x.leaky_relu(LRELU_SLOPE, LRELU_GAIN)
}

pub(crate) fn randn<T: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Convolution whose weights are stored at unit variance and scaled by
/// `1 / sqrt(fan_in)` at run time.
#[derive(Debug, Clone)]
pub struct EqualConv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    scale: f64,
}

impl EqualConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), randn(&[cout, cin, kernel, kernel], rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
            scale: 1.0 / ((cin * kernel * kernel) as f64).sqrt(),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let w = p.var(self.weight).mul_scalar(self.scale);
        let y = x.conv2d(&w, self.stride, self.pad)?;
        Ok(match self.bias {
            Some(b) => y.add_bias(&p.var(b))?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct EqualLinear {
    pub weight: ParamId,
    pub bias: ParamId,
    scale: f64,
}

impl EqualLinear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        bias_init: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), randn(&[output, input], rng));
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::full(&[output], T::from_f64(bias_init)),
        );
        Self {
            weight,
            bias,
            scale: 1.0 / (input as f64).sqrt(),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let w = p.var(self.weight).mul_scalar(self.scale);
        Ok(x.linear(&w)?.add_bias(&p.var(self.bias))?)
    }
}

/// Convolution with per-sample input-channel scales `s[N, Ci]` folded into
/// the kernel, optionally followed by per-output-channel demodulation.
///
/// Evaluated as `conv(x * s, w) * d` with
/// `d[n, o] = (sum_i s[n, i]^2 sum_k w[o, i, k]^2 + eps)^(-1/2)`, which is
/// algebraically the same as convolving with the modulated kernel.
pub fn modulated_conv<'g, T: Scalar>(
    x: Var<'g, T>,
    weight: Var<'g, T>,
    scales: Var<'g, T>,
    demodulate: bool,
    eps: f64,
) -> Result<Var<'g, T>> {
    let ws = weight.shape();
    let xs = x.shape();
    if ws.len() != 4 || xs.len() != 4 || ws[1] != xs[1] || scales.shape() != [xs[0], xs[1]] {
        return Err(Error::Shape {
            op: "modulated_conv",
            detail: format!("x {xs:?}, weight {ws:?}, scales {:?}", scales.shape()),
        });
    }
    let (co, ci, k) = (ws[0], ws[1], ws[2]);
    let y = x.scale_channels(&scales)?.conv2d(&weight, 1, k / 2)?;
    if !demodulate {
        return Ok(y);
    }
    let wsq = weight
        .square()
        .reshape(&[co * ci, k * ws[3]])?
        .sum_last_axis()?
        .reshape(&[co, ci])?;
    let d = scales.square().linear(&wsq)?.add_scalar(eps).powf(-0.5);
    Ok(y.scale_channels(&d)?)
}

/// A modulated convolution together with its style affine.
#[derive(Debug, Clone)]
pub struct ModulatedConv {
    pub weight: ParamId,
    pub affine: EqualLinear,
    pub demodulate: bool,
    pub eps: f64,
    scale: f64,
}

impl ModulatedConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        style_dim: usize,
        demodulate: bool,
        eps: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let affine = EqualLinear::new(store, &format!("{name}.affine"), style_dim, cin, 1.0, rng);
        let weight = store.add(format!("{name}.weight"), randn(&[cout, cin, kernel, kernel], rng));
        Self {
            weight,
            affine,
            demodulate,
            eps,
            scale: 1.0 / ((cin * kernel * kernel) as f64).sqrt(),
        }
    }

    /// Same as [`ModulatedConv::new`] but with an all-zero kernel.
    #[allow(clippy::too_many_arguments)]
    pub fn zeroed<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        style_dim: usize,
        demodulate: bool,
        eps: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let layer = Self::new(store, name, cin, cout, kernel, style_dim, demodulate, eps, rng);
        *store.get_mut(layer.weight) = Tensor::zeros(&[cout, cin, kernel, kernel]);
        layer
    }

    /// Per-input-channel scales produced by the affine for `style[N, D]`.
    pub fn style_scales<'g, T: Scalar>(&self, p: &Bound<'g, T>, style: Var<'g, T>) -> Result<Var<'g, T>> {
        self.affine.forward(p, style)
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        p: &Bound<'g, T>,
        x: Var<'g, T>,
        style: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let s = self.style_scales(p, style)?;
        let w = p.var(self.weight).mul_scalar(self.scale);
        modulated_conv(x, w, s, self.demodulate, self.eps)
    }
}
