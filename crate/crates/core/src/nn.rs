//! Differentiable layers with hand-written backward passes.
//!
//! Every layer caches what its backward pass needs during `forward`; calling
//! `backward` without a preceding forward is an error. Parameter gradients
//! accumulate into the parameter tensor's gradient buffer until an optimizer
//! step consumes them.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{self, sigmoid, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named trainable tensor.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether weight decay applies to this parameter.
    pub decay: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param {
            name: name.into(),
            value,
            decay: true,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Non-trainable state that still belongs in a checkpoint (running statistics).
#[derive(Debug, Clone)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

pub trait Layer<T: Scalar>: Send {
    fn kind(&self) -> &'static str;

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>>;

    fn params(&self) -> Vec<&Param<T>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Vec::new()
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        Vec::new()
    }
}

fn expect_shape<T: Scalar>(op: &'static str, t: &Tensor<T>, want: &[usize]) -> Result<()> {
    if t.shape() != want {
        return Err(Error::ShapeMismatch {
            op,
            lhs: want.to_vec(),
            rhs: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn expect_rank<T: Scalar>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![rank],
            rhs: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// Bias-free 2-D convolution with `pad = k/2`.
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub stride: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal initialisation: std `sqrt(2 / (k·k·c_in))`.
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        let std = (2.0 / (kernel * kernel * c_in) as f64).sqrt();
        let w = rng.normal(&[c_out, c_in, kernel, kernel], 0.0, std);
        Conv2d {
            weight: Param::new(format!("{name}.weight"), w),
            stride,
            cache: None,
        }
    }

    pub fn from_weight(name: &str, weight: Tensor<T>, stride: usize) -> Self {
        Conv2d {
            weight: Param::new(format!("{name}.weight"), weight),
            stride,
            cache: None,
        }
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn kind(&self) -> &'static str {
        "conv"
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = tensor::conv2d(x, &self.weight.value, self.stride)?;
        self.cache = (mode == Mode::Train).then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::NoCachedForward(self.weight.name.clone()))?;
        let (dx, dk) = tensor::conv2d_backward(&x, &self.weight.value, self.stride, dy)?;
        self.weight.value.accumulate_grad(dk.data());
        Ok(dx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight]
    }
}

struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
    mode: Mode,
}

/// Per-channel batch normalisation over `N×C×H×W`.
pub struct BatchNorm2d<T> {
    pub name: String,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    running: Option<(Buffer<T>, Buffer<T>)>,
    pub eps: f64,
    /// Weight given to the batch statistic in the running-average update.
    pub momentum: f64,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    /// γ = 1, β = 0, running mean 0 and running variance 1.
    pub fn new(name: &str, channels: usize) -> Self {
        let mut bn = Self::batch_stats_only(name, channels);
        bn.running = Some((
            Buffer {
                name: format!("{name}.running_mean"),
                value: Tensor::zeros(&[channels]),
            },
            Buffer {
                name: format!("{name}.running_var"),
                value: Tensor::full(&[channels], T::one()),
            },
        ));
        bn
    }

    /// A layer without running statistics; inference mode is rejected until
    /// statistics are installed with [`BatchNorm2d::set_running_stats`].
    pub fn batch_stats_only(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            name: name.to_string(),
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running: None,
            eps: 1e-5,
            momentum: 0.1,
            cache: None,
        }
    }

    pub fn set_running_stats(&mut self, mean: Tensor<T>, var: Tensor<T>) {
        let name = &self.name;
        self.running = Some((
            Buffer {
                name: format!("{name}.running_mean"),
                value: mean,
            },
            Buffer {
                name: format!("{name}.running_var"),
                value: var,
            },
        ));
    }

    pub fn running_stats(&self) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.running.as_ref().map(|(m, v)| (&m.value, &v.value))
    }

    fn channels(&self) -> usize {
        self.gamma.value.len()
    }
}

impl<T: Scalar> Layer<T> for BatchNorm2d<T> {
    fn kind(&self) -> &'static str {
        "batchnorm"
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        expect_rank("batchnorm", x, 4)?;
        let c = self.channels();
        if x.shape()[1] != c {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                lhs: vec![c],
                rhs: x.shape().to_vec(),
            });
        }
        let (n, hw) = (x.shape()[0], x.shape()[2] * x.shape()[3]);
        let count = n * hw;
        let eps = T::from_f64(self.eps);
        let xd = x.data();
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s += xd[(b * c + ch) * hw..][..hw].iter().copied().sum::<T>();
                    }
                    let m = s / T::from_usize(count);
                    let mut v = T::zero();
                    for b in 0..n {
                        for &val in &xd[(b * c + ch) * hw..][..hw] {
                            v += (val - m) * (val - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = v / T::from_usize(count);
                }
                if let Some((rm, rv)) = &mut self.running {
                    let mom = T::from_f64(self.momentum);
                    let unbias = if count > 1 {
                        T::from_usize(count) / T::from_usize(count - 1)
                    } else {
                        T::one()
                    };
                    for ch in 0..c {
                        let m = &mut rm.value.data_mut()[ch];
                        *m = (T::one() - mom) * *m + mom * mean[ch];
                        let v = &mut rv.value.data_mut()[ch];
                        *v = (T::one() - mom) * *v + mom * var[ch] * unbias;
                    }
                }
                (mean, var)
            }
            Mode::Eval => {
                let (rm, rv) = self
                    .running
                    .as_ref()
                    .ok_or_else(|| Error::UninitializedStats(self.name.clone()))?;
                (rm.value.data().to_vec(), rv.value.data().to_vec())
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gamma[ch] * h + beta[ch];
                }
            }
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            shape: x.shape().to_vec(),
            mode,
        });
        Tensor::new(x.shape(), out)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::NoCachedForward(self.name.clone()))?;
        expect_shape("batchnorm_backward", dy, &cache.shape)?;
        let c = self.channels();
        let (n, hw) = (cache.shape[0], cache.shape[2] * cache.shape[3]);
        let count = T::from_usize(n * hw);
        let dyd = dy.data();
        let gamma = self.gamma.value.data().to_vec();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for (&g, &xh) in dyd[base..base + hw]
                    .iter()
                    .zip(&cache.xhat[base..base + hw])
                {
                    dgamma[ch] += g * xh;
                    dbeta[ch] += g;
                }
            }
        }
        let mut dx = vec![T::zero(); dy.len()];
        for ch in 0..c {
            let g = gamma[ch] * cache.inv_std[ch];
            match cache.mode {
                Mode::Train => {
                    // dx = γ/σ · (dy − mean(dy) − x̂·mean(dy·x̂))
                    let mean_dy = dbeta[ch] / count;
                    let mean_dyx = dgamma[ch] / count;
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dx[i] = g * (dyd[i] - mean_dy - cache.xhat[i] * mean_dyx);
                        }
                    }
                }
                Mode::Eval => {
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dx[i] = g * dyd[i];
                        }
                    }
                }
            }
        }
        self.gamma.value.accumulate_grad(&dgamma);
        self.beta.value.accumulate_grad(&dbeta);
        Tensor::new(&cache.shape, dx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        match &self.running {
            Some((m, v)) => vec![m, v],
            None => Vec::new(),
        }
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        match &mut self.running {
            Some((m, v)) => vec![m, v],
            None => Vec::new(),
        }
    }
}

#[derive(Default)]
pub struct Relu<T> {
    mask: Option<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Relu { mask: None }
    }
}

impl<T: Scalar> Layer<T> for Relu<T> {
    fn kind(&self) -> &'static str {
        "relu"
    }

    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.mask = Some(x.map(|v| if v > T::zero() { T::one() } else { T::zero() }));
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self
            .mask
            .take()
            .ok_or_else(|| Error::NoCachedForward("relu".into()))?;
        expect_shape("relu_backward", dy, mask.shape())?;
        let data = dy
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&d, &m)| d * m)
            .collect();
        Tensor::new(dy.shape(), data)
    }
}

/// Elementwise logistic function.
#[derive(Default)]
pub struct Sigmoid<T> {
    out: Option<Tensor<T>>,
    /// Test fixture: when set, backward drops the `(1 − σ)` factor.
    #[doc(hidden)]
    pub corrupt_backward: bool,
}

impl<T: Scalar> Sigmoid<T> {
    pub fn new() -> Self {
        Sigmoid {
            out: None,
            corrupt_backward: false,
        }
    }
}

impl<T: Scalar> Layer<T> for Sigmoid<T> {
    fn kind(&self) -> &'static str {
        "sigmoid"
    }

    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let y = x.map(sigmoid);
        self.out = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self
            .out
            .take()
            .ok_or_else(|| Error::NoCachedForward("sigmoid".into()))?;
        expect_shape("sigmoid_backward", dy, s.shape())?;
        let corrupt = self.corrupt_backward;
        let data = dy
            .data()
            .iter()
            .zip(s.data())
            .map(|(&d, &s)| {
                if corrupt {
                    d * s
                } else {
                    d * s * (T::one() - s)
                }
            })
            .collect();
        Tensor::new(dy.shape(), data)
    }
}

/// Fully connected layer on `N×in` inputs: `y = x·Wᵀ + b`.
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    /// Weights `N(0, 1/in)`, bias zero.
    pub fn new(name: &str, inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let std = (1.0 / inputs as f64).sqrt();
        Self::from_parts(
            name,
            rng.normal(&[outputs, inputs], 0.0, std),
            Tensor::zeros(&[outputs]),
        )
    }

    pub fn from_parts(name: &str, weight: Tensor<T>, bias: Tensor<T>) -> Self {
        Linear {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), bias),
            cache: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }
}

impl<T: Scalar> Layer<T> for Linear<T> {
    fn kind(&self) -> &'static str {
        "linear"
    }

    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let (fan_in, fan_out) = (self.inputs(), self.outputs());
        if x.rank() != 2 || x.shape()[1] != fan_in {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: self.weight.value.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        let n = x.shape()[0];
        let w = self.weight.value.data();
        let b = self.bias.value.data();
        let mut out = vec![T::zero(); n * fan_out];
        out.par_chunks_mut(fan_out)
            .zip(x.data().par_chunks(fan_in))
            .for_each(|(o, xr)| {
                for (j, oj) in o.iter_mut().enumerate() {
                    *oj = tensor::dot(&w[j * fan_in..(j + 1) * fan_in], xr) + b[j];
                }
            });
        self.cache = Some(x.clone());
        Tensor::new(&[n, fan_out], out)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::NoCachedForward(self.weight.name.clone()))?;
        let (fan_in, fan_out) = (self.inputs(), self.outputs());
        let n = x.shape()[0];
        expect_shape("linear_backward", dy, &[n, fan_out])?;
        let (xd, dyd) = (x.data(), dy.data());
        let mut dw = vec![T::zero(); fan_out * fan_in];
        let mut db = vec![T::zero(); fan_out];
        for s in 0..n {
            let xr = &xd[s * fan_in..(s + 1) * fan_in];
            for j in 0..fan_out {
                let g = dyd[s * fan_out + j];
                db[j] += g;
                tensor::axpy(g, xr, &mut dw[j * fan_in..(j + 1) * fan_in]);
            }
        }
        let w = self.weight.value.data();
        let mut dx = vec![T::zero(); n * fan_in];
        for s in 0..n {
            let dxr = &mut dx[s * fan_in..(s + 1) * fan_in];
            for j in 0..fan_out {
                tensor::axpy(dyd[s * fan_out + j], &w[j * fan_in..(j + 1) * fan_in], dxr);
            }
        }
        self.weight.value.accumulate_grad(&dw);
        self.bias.value.accumulate_grad(&db);
        Tensor::new(&[n, fan_in], dx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Spatial mean of every channel: `N×C×H×W → N×C`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("global_avg_pool", x, 4)?;
    let s = x.shape();
    let hw = s[2] * s[3];
    let inv = T::one() / T::from_usize(hw);
    let data = x
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(&[s[0], s[1]], data)
}

/// Backward of [`global_avg_pool`]: spreads `dz / HW` over each plane.
pub fn global_avg_pool_backward<T: Scalar>(
    dz: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    expect_shape("global_avg_pool_backward", dz, &input_shape[..2])?;
    let hw = input_shape[2] * input_shape[3];
    let inv = T::one() / T::from_usize(hw);
    let mut out = Vec::with_capacity(dz.len() * hw);
    for &g in dz.data() {
        out.extend(std::iter::repeat_n(g * inv, hw));
    }
    Tensor::new(input_shape, out)
}

#[derive(Default)]
pub struct GlobalAvgPool {
    input_shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool { input_shape: None }
    }
}

impl<T: Scalar> Layer<T> for GlobalAvgPool {
    fn kind(&self) -> &'static str {
        "global_avg_pool"
    }

    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let y = global_avg_pool(x)?;
        self.input_shape = Some(x.shape().to_vec());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self
            .input_shape
            .take()
            .ok_or_else(|| Error::NoCachedForward("global_avg_pool".into()))?;
        global_avg_pool_backward(dy, &shape)
    }
}

/// 2×2 average pooling with stride 2 (odd trailing rows/columns are dropped).
#[derive(Default)]
pub struct AvgPool2 {
    input_shape: Option<Vec<usize>>,
}

impl AvgPool2 {
    pub fn new() -> Self {
        AvgPool2 { input_shape: None }
    }
}

impl<T: Scalar> Layer<T> for AvgPool2 {
    fn kind(&self) -> &'static str {
        "avg_pool"
    }

    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        expect_rank("avg_pool", x, 4)?;
        let s = x.shape().to_vec();
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::InvalidGeometry {
                op: "avg_pool",
                detail: format!("input {h}x{w} too small"),
            });
        }
        let quarter = T::from_f64(0.25);
        let xd = x.data();
        let mut out = Vec::with_capacity(s[0] * s[1] * oh * ow);
        for plane in xd.chunks_exact(h * w) {
            for y in 0..oh {
                for xx in 0..ow {
                    let (r0, r1) = (2 * y * w, (2 * y + 1) * w);
                    let v = plane[r0 + 2 * xx]
                        + plane[r0 + 2 * xx + 1]
                        + plane[r1 + 2 * xx]
                        + plane[r1 + 2 * xx + 1];
                    out.push(v * quarter);
                }
            }
        }
        self.input_shape = Some(s.clone());
        Tensor::new(&[s[0], s[1], oh, ow], out)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self
            .input_shape
            .take()
            .ok_or_else(|| Error::NoCachedForward("avg_pool".into()))?;
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        expect_shape("avg_pool_backward", dy, &[s[0], s[1], oh, ow])?;
        let quarter = T::from_f64(0.25);
        let mut dx = vec![T::zero(); s.iter().product()];
        for (plane, dplane) in dx
            .chunks_exact_mut(h * w)
            .zip(dy.data().chunks_exact(oh * ow))
        {
            for y in 0..oh {
                for xx in 0..ow {
                    let g = dplane[y * ow + xx] * quarter;
                    for (dy_, dx_) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        plane[(2 * y + dy_) * w + 2 * xx + dx_] += g;
                    }
                }
            }
        }
        Tensor::new(&s, dx)
    }
}

/// Layers applied in order.
pub struct Sequential<T> {
    pub layers: Vec<Box<dyn Layer<T>>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Box<dyn Layer<T>>>) -> Self {
        Sequential { layers }
    }
}

impl<T: Scalar> Layer<T> for Sequential<T> {
    fn kind(&self) -> &'static str {
        "sequential"
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h, mode)?;
        }
        Ok(h)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = dy.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        self.layers.iter().flat_map(|l| l.buffers()).collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.buffers_mut())
            .collect()
    }
}

/// Weight-decay eligibility applied when a network is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecayPolicy {
    /// Every parameter decays.
    #[default]
    All,
    /// Only conv/FC weights decay; normalisation and attention affine
    /// parameters and all biases are exempt.
    WeightsOnly,
}

impl DecayPolicy {
    pub fn applies_to(self, name: &str) -> bool {
        match self {
            DecayPolicy::All => true,
            DecayPolicy::WeightsOnly => name.ends_with(".weight"),
        }
    }
}

/// Verifies that parameter names are unique, in registry order.
pub fn check_unique_names<'a>(names: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for name in names {
        if !seen.insert(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
    }
    Ok(())
}

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v + (g + λ·p)`, `p ← p − η·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<(String, Vec<T>)>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Momentum buffers by parameter name, in registry order.
    pub fn velocity(&self) -> &[(String, Vec<T>)] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<(String, Vec<T>)>) {
        self.velocity = velocity;
    }

    /// One update over every parameter. Consumes the gradients, so a second
    /// step without an intervening backward pass is a missing-gradient error.
    pub fn step(&mut self, params: Vec<&mut Param<T>>, lr: f64) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.value.grad().is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        if self.velocity.len() != params.len()
            || self
                .velocity
                .iter()
                .zip(&params)
                .any(|((n, _), p)| *n != p.name)
        {
            self.velocity = params
                .iter()
                .map(|p| (p.name.clone(), vec![T::zero(); p.numel()]))
                .collect();
        }
        let (lr, mu) = (T::from_f64(lr), T::from_f64(self.momentum));
        for (p, (_, v)) in params.into_iter().zip(&mut self.velocity) {
            let wd = if p.decay {
                T::from_f64(self.weight_decay)
            } else {
                T::zero()
            };
            let g = p.value.take_grad().expect("checked above");
            for ((w, vel), gi) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vel = mu * *vel + (gi + wd * *w);
                *w -= lr * *vel;
            }
        }
        Ok(())
    }
}

/// Mean softmax cross-entropy over a batch of `N×K` logits. Returns the loss
/// and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    expect_rank("softmax_cross_entropy", logits, 2)?;
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let inv_n = T::one() / T::from_usize(n);
    let mut grad = vec![T::zero(); n * k];
    let mut loss = 0.0f64;
    for ((row, g), &label) in logits
        .data()
        .chunks_exact(k)
        .zip(grad.chunks_exact_mut(k))
        .zip(labels)
    {
        if label >= k {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy label",
                lhs: vec![k],
                rhs: vec![label],
            });
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - max).exp();
            denom += *gi;
        }
        loss += (denom.ln() - (row[label] - max)).as_f64();
        for gi in g.iter_mut() {
            *gi = *gi / denom * inv_n;
        }
        g[label] -= inv_n;
    }
    Ok((loss / n as f64, Tensor::new(logits.shape(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, v).unwrap()
    }

    #[test]
    fn relu_forward_backward() {
        let mut r = Relu::new();
        let y = r.forward(&t(&[3], &[-1.0, 0.0, 2.0]), Mode::Train).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let mut r = Relu::new();
        r.forward(&t(&[2], &[-1.0, 2.0]), Mode::Train).unwrap();
        assert_eq!(
            r.backward(&t(&[2], &[5.0, 5.0])).unwrap().data(),
            &[0.0, 5.0]
        );
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut s = Sigmoid::new();
        assert_eq!(
            s.forward(&t(&[1], &[0.0]), Mode::Train).unwrap().data(),
            &[0.5]
        );
        assert_eq!(s.backward(&t(&[1], &[1.0])).unwrap().data(), &[0.25]);
    }

    #[test]
    fn backward_without_forward_fails() {
        let mut r = Relu::<f64>::new();
        assert!(matches!(
            r.backward(&t(&[1], &[1.0])),
            Err(Error::NoCachedForward(_))
        ));
        let mut rng = Rng::new(0);
        let mut c = Conv2d::<f64>::new("c", 1, 1, 3, 1, &mut rng);
        assert!(matches!(
            c.backward(&Tensor::zeros(&[1, 1, 2, 2])),
            Err(Error::NoCachedForward(_))
        ));
    }

    #[test]
    fn batchnorm_normalizes_batch() {
        // channel 0 built to have mean 3 and variance 4 exactly
        let vals = [1.0, 5.0, 1.0, 5.0, 3.0 - 2.0, 3.0 + 2.0, 1.0, 5.0];
        let mut data = vec![];
        for b in 0..2 {
            data.extend_from_slice(&vals[b * 4..b * 4 + 4]);
            data.extend_from_slice(&[7.0, 7.0, 9.0, 9.0]);
        }
        let x = t(&[2, 2, 2, 2], &data);
        let mut bn = BatchNorm2d::new("bn", 2);
        let y = bn.forward(&x, Mode::Train).unwrap();
        let ch0: Vec<f64> = (0..2)
            .flat_map(|b| y.data()[b * 8..b * 8 + 4].to_vec())
            .collect();
        let mean = ch0.iter().sum::<f64>() / 8.0;
        let std = (ch0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0).sqrt();
        let expected_std = (4.0f64 / (4.0 + 1e-5)).sqrt();
        assert!(mean.abs() < 1e-6);
        assert!((std - expected_std).abs() < 1e-6, "{std}");
        // running stats moved 10% toward the (unbiased) batch statistics
        let (rm, rv) = bn.running_stats().unwrap();
        assert!((rm.data()[0] - 0.3).abs() < 1e-12);
        assert!((rv.data()[0] - (0.9 + 0.1 * 4.0 * 8.0 / 7.0)).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_inference_is_affine() {
        let mut bn = BatchNorm2d::<f64>::new("bn", 1);
        bn.set_running_stats(t(&[1], &[2.0]), t(&[1], &[9.0]));
        bn.gamma.value.data_mut()[0] = 3.0;
        bn.beta.value.data_mut()[0] = -1.0;
        let x = t(&[1, 1, 1, 3], &[2.0, 5.0, -1.0]);
        let y = bn.forward(&x, Mode::Eval).unwrap();
        let s = 3.0 / (9.0f64 + 1e-5).sqrt();
        for (xi, yi) in x.data().iter().zip(y.data()) {
            assert!((yi - (s * (xi - 2.0) - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_without_stats_rejects_eval() {
        let mut bn = BatchNorm2d::<f64>::batch_stats_only("bn", 1);
        assert!(matches!(
            bn.forward(&Tensor::zeros(&[1, 1, 2, 2]), Mode::Eval),
            Err(Error::UninitializedStats(_))
        ));
    }

    fn scalar_param(p: f64, g: Option<f64>) -> Param<f64> {
        let mut param = Param::new("p", t(&[1], &[p]));
        if let Some(g) = g {
            param.value.accumulate_grad(&[g]);
        }
        param
    }

    #[test]
    fn sgd_plain_step() {
        let mut p = scalar_param(1.0, Some(1.0));
        Sgd::new(0.0, 0.0).step(vec![&mut p], 0.1).unwrap();
        assert!((p.value.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let mut p = scalar_param(1.0, None);
        let mut opt = Sgd::new(0.9, 0.0);
        let mut trace = vec![];
        for _ in 0..2 {
            p.value.accumulate_grad(&[1.0]);
            opt.step(vec![&mut p], 0.1).unwrap();
            trace.push((p.value.data()[0], opt.velocity()[0].1[0]));
        }
        assert!((trace[0].0 - 0.9).abs() < 1e-12 && (trace[0].1 - 1.0).abs() < 1e-12);
        assert!((trace[1].0 - 0.71).abs() < 1e-12 && (trace[1].1 - 1.9).abs() < 1e-12);
    }

    #[test]
    fn sgd_weight_decay_only() {
        let mut p = scalar_param(1.0, Some(0.0));
        Sgd::new(0.0, 1e-4).step(vec![&mut p], 0.1).unwrap();
        assert!((p.value.data()[0] - 0.99999).abs() < 1e-15);
    }

    #[test]
    fn sgd_requires_grad_and_zero_lr_is_identity() {
        let mut p = scalar_param(1.0, None);
        let mut opt = Sgd::new(0.9, 1e-4);
        assert!(matches!(
            opt.step(vec![&mut p], 0.1),
            Err(Error::MissingGrad(_))
        ));
        p.value.accumulate_grad(&[3.0]);
        opt.step(vec![&mut p], 0.0).unwrap();
        assert_eq!(p.value.data()[0], 1.0);
        assert!(p.value.grad().is_none());
    }

    #[test]
    fn duplicate_names_rejected() {
        assert!(check_unique_names(["a", "b"]).is_ok());
        assert!(matches!(
            check_unique_names(["a", "a"]),
            Err(Error::DuplicateParam(_))
        ));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::<f64>::zeros(&[2, 4]);
        let (loss, g) = softmax_cross_entropy(&logits, &[1, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((g.get(&[0, 1]) - (0.25 - 1.0) / 2.0).abs() < 1e-15);
        assert!((g.get(&[0, 0]) - 0.125).abs() < 1e-15);
        assert!(softmax_cross_entropy(&logits, &[1, 4]).is_err());
    }

    #[test]
    fn avg_pool_halves_geometry() {
        let mut p = AvgPool2::new();
        let x = t(&[1, 1, 2, 4], &[1.0, 3.0, 5.0, 7.0, 1.0, 3.0, 5.0, 7.0]);
        let y = Layer::<f64>::forward(&mut p, &x, Mode::Train).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.data(), &[2.0, 6.0]);
    }
}
