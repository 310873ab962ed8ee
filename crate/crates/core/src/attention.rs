//! Channel attention blocks: SE, LCT and SE+.
//!
//! All three share the same skeleton: a per-channel descriptor `z` is pooled
//! from the input (`aggregate`), turned into scores `a`, and the input is
//! rescaled by `σ(a)` (`fuse`). They differ only in how `z` becomes `a`:
//!
//! * SE: two fully connected layers with a ReLU bottleneck of ratio `r`.
//! * LCT: per-group standardisation of `z` (`normalize`) followed by an
//!   independent affine map per channel (`transform`).
//! * SE+: the SE excitation applied to the normalised descriptor.
//!
//! The operators are exposed as free functions with matching backward
//! functions so they can be checked in isolation.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{self, Layer, Linear, Mode, Param, Relu};
use crate::rng::Rng;
use crate::tensor::{sigmoid, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    None,
    Se,
    Lct,
    SePlus,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 4] = [
        AttentionKind::None,
        AttentionKind::Se,
        AttentionKind::Lct,
        AttentionKind::SePlus,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::None => "none",
            AttentionKind::Se => "se",
            AttentionKind::Lct => "lct",
            AttentionKind::SePlus => "se+",
        }
    }

    /// Filename-safe tag.
    pub fn tag(self) -> &'static str {
        match self {
            AttentionKind::SePlus => "se_plus",
            other => other.as_str(),
        }
    }

    fn uses_groups(self) -> bool {
        matches!(self, AttentionKind::Lct | AttentionKind::SePlus)
    }

    fn uses_reduction(self) -> bool {
        matches!(self, AttentionKind::Se | AttentionKind::SePlus)
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(AttentionKind::None),
            "se" => Ok(AttentionKind::Se),
            "lct" => Ok(AttentionKind::Lct),
            "se+" | "se_plus" | "seplus" => Ok(AttentionKind::SePlus),
            other => Err(format!(
                "unknown attention kind `{other}` (expected none, se, lct, se+)"
            )),
        }
    }
}

/// Initial values of the LCT affine parameters `w` and `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitMode {
    #[default]
    W0B1,
    W0B0,
    W1B0,
}

impl InitMode {
    pub fn values(self) -> (f64, f64) {
        match self {
            InitMode::W0B1 => (0.0, 1.0),
            InitMode::W0B0 => (0.0, 0.0),
            InitMode::W1B0 => (1.0, 0.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InitMode::W0B1 => "w0_b1",
            InitMode::W0B0 => "w0_b0",
            InitMode::W1B0 => "w1_b0",
        }
    }
}

impl FromStr for InitMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "w0_b1" => Ok(InitMode::W0B1),
            "w0_b0" => Ok(InitMode::W0B0),
            "w1_b0" => Ok(InitMode::W1B0),
            other => Err(format!(
                "unknown init mode `{other}` (expected w0_b1, w0_b0, w1_b0)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    pub channels: usize,
    pub reduction: usize,
    pub groups: usize,
    pub epsilon: f64,
    pub init: InitMode,
    pub skip_normalize: bool,
    pub skip_transform: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            kind: AttentionKind::None,
            channels: 0,
            reduction: 16,
            groups: 64,
            epsilon: 1e-5,
            init: InitMode::W0B1,
            skip_normalize: false,
            skip_transform: false,
        }
    }
}

impl AttentionConfig {
    pub fn new(kind: AttentionKind, channels: usize) -> Self {
        AttentionConfig {
            kind,
            channels,
            ..Default::default()
        }
    }

    pub fn with_channels(&self, channels: usize) -> Self {
        AttentionConfig {
            channels,
            ..self.clone()
        }
    }

    /// `min(G, C)`; errors if that does not divide `C`.
    pub fn effective_groups(&self) -> Result<usize> {
        let g = self.groups.min(self.channels);
        if g == 0 || !self.channels.is_multiple_of(g) {
            return Err(Error::InvalidGroups {
                channels: self.channels,
                groups: g,
            });
        }
        Ok(g)
    }

    /// Set when the configured group count exceeds the channel count.
    pub fn clamp_warning(&self) -> Option<String> {
        (self.kind.uses_groups() && self.groups > self.channels).then(|| {
            format!(
                "{} block with {} channels: group count {} clamped to {}",
                self.kind, self.channels, self.groups, self.channels
            )
        })
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == AttentionKind::None {
            return Ok(());
        }
        if self.channels == 0 {
            return Err(Error::config("attention.channels", "must be positive"));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::config(
                "attention.epsilon",
                format!("must be positive, got {}", self.epsilon),
            ));
        }
        if self.kind.uses_groups() {
            if self.groups == 0 {
                return Err(Error::config("attention.groups", "must be positive"));
            }
            self.effective_groups()?;
        }
        if self.kind.uses_reduction()
            && (self.reduction == 0 || !self.channels.is_multiple_of(self.reduction))
        {
            return Err(Error::config(
                "attention.reduction",
                format!(
                    "{} channels not divisible by reduction {}",
                    self.channels, self.reduction
                ),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// operators

/// Global average pooling: `z[n,k]` is the spatial mean of channel `k`.
pub fn aggregate<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    nn::global_avg_pool(x)
}

pub fn aggregate_backward<T: Scalar>(dz: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    nn::global_avg_pool_backward(dz, input_shape)
}

/// Per-sample statistics saved by [`normalize`] for the backward pass.
#[derive(Debug, Clone)]
pub struct NormalizeCache<T> {
    pub zhat: Tensor<T>,
    /// `1/σ` per (sample, group), row-major.
    pub inv_std: Vec<T>,
    pub groups: usize,
}

/// Standardises each contiguous group of `C/G` channels of every sample:
/// `ẑ = (z − μ) / sqrt(var + ε)` with the biased variance.
pub fn normalize<T: Scalar>(z: &Tensor<T>, groups: usize, eps: f64) -> Result<NormalizeCache<T>> {
    if z.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "normalize",
            lhs: vec![2],
            rhs: z.shape().to_vec(),
        });
    }
    let (n, c) = (z.shape()[0], z.shape()[1]);
    if groups == 0 || c % groups != 0 {
        return Err(Error::InvalidGroups {
            channels: c,
            groups,
        });
    }
    let m = c / groups;
    let inv_m = T::one() / T::from_usize(m);
    let eps = T::from_f64(eps);
    let mut out = vec![T::zero(); n * c];
    let mut inv_std = Vec::with_capacity(n * groups);
    for (zs, os) in z.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        for (grp, o) in zs.chunks_exact(m).zip(os.chunks_exact_mut(m)) {
            let mu = grp.iter().copied().sum::<T>() * inv_m;
            let var = grp.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_m;
            let is = T::one() / (var + eps).sqrt();
            for (oi, &v) in o.iter_mut().zip(grp) {
                *oi = (v - mu) * is;
            }
            inv_std.push(is);
        }
    }
    Ok(NormalizeCache {
        zhat: Tensor::new(z.shape(), out)?,
        inv_std,
        groups,
    })
}

/// `dz = (1/σ)·(dẑ − mean(dẑ) − ẑ·mean(dẑ·ẑ))` within each group.
pub fn normalize_backward<T: Scalar>(
    dzhat: &Tensor<T>,
    cache: &NormalizeCache<T>,
) -> Result<Tensor<T>> {
    if dzhat.shape() != cache.zhat.shape() {
        return Err(Error::ShapeMismatch {
            op: "normalize_backward",
            lhs: cache.zhat.shape().to_vec(),
            rhs: dzhat.shape().to_vec(),
        });
    }
    let c = dzhat.shape()[1];
    let m = c / cache.groups;
    let inv_m = T::one() / T::from_usize(m);
    let mut dz = vec![T::zero(); dzhat.len()];
    let chunks = dzhat
        .data()
        .chunks_exact(m)
        .zip(cache.zhat.data().chunks_exact(m))
        .zip(dz.chunks_exact_mut(m))
        .zip(&cache.inv_std);
    for (((dg, zg), out), &is) in chunks {
        let mean_d = dg.iter().copied().sum::<T>() * inv_m;
        let mean_dz = dg.iter().zip(zg).map(|(&d, &z)| d * z).sum::<T>() * inv_m;
        for ((o, &d), &zh) in out.iter_mut().zip(dg).zip(zg) {
            *o = is * (d - mean_d - zh * mean_dz);
        }
    }
    Tensor::new(dzhat.shape(), dz)
}

/// Channel-wise affine map `a = w ⊙ ẑ + b`.
pub fn transform<T: Scalar>(zhat: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let c = zhat.shape()[zhat.rank() - 1];
    if w.shape() != [c] || b.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "transform",
            lhs: zhat.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let (wd, bd) = (w.data(), b.data());
    let data = zhat
        .data()
        .chunks_exact(c)
        .flat_map(|row| row.iter().enumerate().map(|(k, &v)| wd[k] * v + bd[k]))
        .collect();
    Tensor::new(zhat.shape(), data)
}

/// Returns `(dẑ, dw, db)`.
pub fn transform_backward<T: Scalar>(
    da: &Tensor<T>,
    zhat: &Tensor<T>,
    w: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c = w.len();
    let mut dzhat = vec![T::zero(); da.len()];
    let mut dw = vec![T::zero(); c];
    let mut db = vec![T::zero(); c];
    for ((drow, zrow), dzrow) in da
        .data()
        .chunks_exact(c)
        .zip(zhat.data().chunks_exact(c))
        .zip(dzhat.chunks_exact_mut(c))
    {
        for k in 0..c {
            dzrow[k] = w.data()[k] * drow[k];
            dw[k] += drow[k] * zrow[k];
            db[k] += drow[k];
        }
    }
    Ok((
        Tensor::new(da.shape(), dzhat)?,
        Tensor::new(&[c], dw)?,
        Tensor::new(&[c], db)?,
    ))
}

/// Gate activations `σ(a)`.
pub fn gate<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    a.map(sigmoid)
}

/// Rescales every channel plane of `x` by its gate: `Y = X · s`, where `s` is
/// already `σ(a)`. Returns `Y`.
pub fn fuse_gated<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    if x.rank() != 4 || s.shape() != &xs[..2] {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            lhs: xs.to_vec(),
            rhs: s.shape().to_vec(),
        });
    }
    let hw = xs[2] * xs[3];
    let mut out = Vec::with_capacity(x.len());
    for (plane, &g) in x.data().chunks_exact(hw).zip(s.data()) {
        out.extend(plane.iter().map(|&v| v * g));
    }
    Tensor::new(xs, out)
}

/// `Y = X · σ(a)` with `a` broadcast over the spatial axes.
pub fn fuse<T: Scalar>(x: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    fuse_gated(x, &gate(a))
}

/// Backward of [`fuse`] given the saved gate `s = σ(a)`; returns `(dX, da)`.
pub fn fuse_backward<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    s: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if dy.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "fuse_backward",
            lhs: x.shape().to_vec(),
            rhs: dy.shape().to_vec(),
        });
    }
    let hw = x.shape()[2] * x.shape()[3];
    let mut dx = Vec::with_capacity(x.len());
    let mut da = Vec::with_capacity(s.len());
    for ((dplane, xplane), &g) in dy
        .data()
        .chunks_exact(hw)
        .zip(x.data().chunks_exact(hw))
        .zip(s.data())
    {
        dx.extend(dplane.iter().map(|&d| d * g));
        let ds = crate::tensor::dot(dplane, xplane);
        da.push(ds * g * (T::one() - g));
    }
    Ok((Tensor::new(x.shape(), dx)?, Tensor::new(s.shape(), da)?))
}

// ---------------------------------------------------------------------------
// blocks

/// Per-sample quantities recorded on the last forward pass when probing is on.
#[derive(Debug, Clone)]
pub struct Probe<T> {
    /// `aggregate(X)`, `N×C`.
    pub ctx_before: Tensor<T>,
    /// `σ(a)`, `N×C`; all ones for a block without attention.
    pub attention: Tensor<T>,
    /// `aggregate(Y)`, `N×C`.
    pub ctx_after: Tensor<T>,
}

struct FuseCache<T> {
    x: Tensor<T>,
    gate: Tensor<T>,
}

/// SE excitation: `a = W₂·ReLU(W₁·z + b₁) + b₂`.
pub struct Excitation<T> {
    pub fc1: Linear<T>,
    relu: Relu<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> Excitation<T> {
    pub fn new(name: &str, channels: usize, hidden: usize, rng: &mut Rng) -> Self {
        Excitation {
            fc1: Linear::new(&format!("{name}.fc1"), channels, hidden, rng),
            relu: Relu::new(),
            fc2: Linear::new(&format!("{name}.fc2"), hidden, channels, rng),
        }
    }

    pub fn forward(&mut self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.fc1.forward(z, Mode::Train)?;
        let h = self.relu.forward(&h, Mode::Train)?;
        self.fc2.forward(&h, Mode::Train)
    }

    pub fn backward(&mut self, da: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.fc2.backward(da)?;
        let g = self.relu.backward(&g)?;
        self.fc1.backward(&g)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![
            &self.fc1.weight,
            &self.fc1.bias,
            &self.fc2.weight,
            &self.fc2.bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
        ]
    }
}

enum Transform<T> {
    /// Attention-free: the gate is identically one.
    Identity,
    Se(Box<Excitation<T>>),
    Lct {
        w: Param<T>,
        b: Param<T>,
    },
    /// LCT with the transform operator removed: `a = ẑ`.
    Passthrough,
}

/// One attention block of any kind, usable as a [`Layer`].
pub struct AttentionBlock<T> {
    config: AttentionConfig,
    groups: usize,
    normalize: bool,
    transform: Transform<T>,
    /// Record [`Probe`] data on every forward pass.
    pub probe_enabled: bool,
    probe: Option<Probe<T>>,
    /// Test hook: replace the gate by exactly one in the fuse stage.
    #[doc(hidden)]
    pub force_unit_gate: bool,
    fuse_cache: Option<FuseCache<T>>,
    norm_cache: Option<NormalizeCache<T>>,
    z_cache: Option<Tensor<T>>,
}

impl<T: Scalar> AttentionBlock<T> {
    pub fn new(name: &str, config: &AttentionConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let (groups, normalize, transform) = match config.kind {
            AttentionKind::None => (1, false, Transform::Identity),
            AttentionKind::Se => (
                1,
                false,
                Transform::Se(Box::new(Excitation::new(name, c, config.hidden(), rng))),
            ),
            AttentionKind::SePlus => (
                config.effective_groups()?,
                true,
                Transform::Se(Box::new(Excitation::new(name, c, config.hidden(), rng))),
            ),
            AttentionKind::Lct => {
                let transform = if config.skip_transform {
                    Transform::Passthrough
                } else {
                    let (w0, b0) = config.init.values();
                    Transform::Lct {
                        w: Param::new(format!("{name}.w"), Tensor::full(&[c], T::from_f64(w0))),
                        b: Param::new(format!("{name}.b"), Tensor::full(&[c], T::from_f64(b0))),
                    }
                };
                (
                    config.effective_groups()?,
                    !config.skip_normalize,
                    transform,
                )
            }
        };
        Ok(AttentionBlock {
            config: config.clone(),
            groups,
            normalize,
            transform,
            probe_enabled: false,
            probe: None,
            force_unit_gate: false,
            fuse_cache: None,
            norm_cache: None,
            z_cache: None,
        })
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.config
    }

    pub fn kind(&self) -> AttentionKind {
        self.config.kind
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    pub fn effective_groups(&self) -> usize {
        self.groups
    }

    pub fn last_probe(&self) -> Option<&Probe<T>> {
        self.probe.as_ref()
    }

    pub fn take_probe(&mut self) -> Option<Probe<T>> {
        self.probe.take()
    }

    /// LCT affine parameters `(w, b)`, if this block has them.
    pub fn affine(&self) -> Option<(&Tensor<T>, &Tensor<T>)> {
        match &self.transform {
            Transform::Lct { w, b } => Some((&w.value, &b.value)),
            _ => None,
        }
    }

    pub fn affine_mut(&mut self) -> Option<(&mut Tensor<T>, &mut Tensor<T>)> {
        match &mut self.transform {
            Transform::Lct { w, b } => Some((&mut w.value, &mut b.value)),
            _ => None,
        }
    }

    pub fn excitation_mut(&mut self) -> Option<&mut Excitation<T>> {
        match &mut self.transform {
            Transform::Se(e) => Some(e),
            _ => None,
        }
    }

    /// Scores `a` for input `x`, caching what backward needs.
    fn scores(&mut self, z: &Tensor<T>) -> Result<Option<Tensor<T>>> {
        let zhat = if self.normalize {
            let cache = normalize(z, self.groups, self.config.epsilon)?;
            let zhat = cache.zhat.clone();
            self.norm_cache = Some(cache);
            zhat
        } else {
            z.clone()
        };
        let a = match &mut self.transform {
            Transform::Identity => return Ok(None),
            Transform::Se(e) => e.forward(&zhat)?,
            Transform::Lct { w, b } => {
                let a = transform(&zhat, &w.value, &b.value)?;
                self.z_cache = Some(zhat);
                a
            }
            Transform::Passthrough => zhat,
        };
        Ok(Some(a))
    }
}

impl<T: Scalar> Layer<T> for AttentionBlock<T> {
    fn kind(&self) -> &'static str {
        self.config.kind.tag()
    }

    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        if x.rank() != 4 || x.shape()[1] != self.config.channels {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: vec![self.config.channels],
                rhs: x.shape().to_vec(),
            });
        }
        let z = aggregate(x)?;
        let gate = match self.scores(&z)? {
            Some(a) => gate(&a),
            None => Tensor::full(z.shape(), T::one()),
        };
        let y = if self.force_unit_gate || self.config.kind == AttentionKind::None {
            x.clone()
        } else {
            fuse_gated(x, &gate)?
        };
        if self.probe_enabled {
            self.probe = Some(Probe {
                ctx_before: z,
                attention: gate.clone(),
                ctx_after: aggregate(&y)?,
            });
        }
        self.fuse_cache = Some(FuseCache { x: x.clone(), gate });
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let FuseCache { x, gate } = self
            .fuse_cache
            .take()
            .ok_or_else(|| Error::NoCachedForward(format!("{} attention", self.config.kind)))?;
        if self.config.kind == AttentionKind::None || self.force_unit_gate {
            return Ok(dy.clone());
        }
        let (mut dx, da) = fuse_backward(dy, &x, &gate)?;
        let dzhat = match &mut self.transform {
            Transform::Identity => unreachable!("handled above"),
            Transform::Se(e) => e.backward(&da)?,
            Transform::Lct { w, b } => {
                let zhat = self
                    .z_cache
                    .take()
                    .ok_or_else(|| Error::NoCachedForward("lct transform".into()))?;
                let (dzhat, dw, db) = transform_backward(&da, &zhat, &w.value)?;
                w.value.accumulate_grad(dw.data());
                b.value.accumulate_grad(db.data());
                dzhat
            }
            Transform::Passthrough => da,
        };
        let dz = if self.normalize {
            let cache = self
                .norm_cache
                .take()
                .ok_or_else(|| Error::NoCachedForward("normalize".into()))?;
            normalize_backward(&dzhat, &cache)?
        } else {
            dzhat
        };
        let dagg = aggregate_backward(&dz, x.shape())?;
        for (d, &g) in dx.data_mut().iter_mut().zip(dagg.data()) {
            *d += g;
        }
        Ok(dx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        match &self.transform {
            Transform::Se(e) => e.params(),
            Transform::Lct { w, b } => vec![w, b],
            Transform::Identity | Transform::Passthrough => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match &mut self.transform {
            Transform::Se(e) => e.params_mut(),
            Transform::Lct { w, b } => vec![w, b],
            Transform::Identity | Transform::Passthrough => Vec::new(),
        }
    }
}
