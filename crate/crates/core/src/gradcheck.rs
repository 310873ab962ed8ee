//! Central finite-difference checks of every hand-written backward pass.
//!
//! Each unit builds a small random instance in `f64`, contracts its output
//! with a fixed random tensor `r` to get a scalar loss `L = Σ r ⊙ y`, and
//! compares the analytic gradients of `L` against `(L(θ+h) − L(θ−h)) / 2h`.

use std::fmt;

use crate::attention::{self, AttentionBlock, AttentionConfig, AttentionKind, InitMode};
use crate::backbone::{BlockKind, Network, NetworkSpec, StageSpec, StemSpec};
use crate::error::Result;
use crate::nn::{
    self, AvgPool2, BatchNorm2d, Conv2d, GlobalAvgPool, Layer, Linear, Mode, Relu, Sigmoid,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`.
pub const FLOOR: f64 = 1e-6;
/// Coordinates probed per checked tensor; tensors at most this large are
/// checked exhaustively.
const MAX_COORDS: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Layers,
    Blocks,
    EndToEnd,
}

impl std::str::FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "layers" => Ok(Scope::Layers),
            "blocks" => Ok(Scope::Blocks),
            "end2end" => Ok(Scope::EndToEnd),
            other => Err(format!(
                "unknown scope `{other}` (expected layers, blocks, end2end)"
            )),
        }
    }
}

/// Deliberate defects for exercising the failure path.
#[derive(Debug, Clone, Copy, Default)]
pub struct Faults {
    pub corrupt_sigmoid_backward: bool,
}

#[derive(Debug, Clone)]
pub struct UnitReport {
    pub unit: String,
    pub max_rel_error: f64,
    /// Tensor and coordinate with the largest relative error.
    pub worst: String,
    pub checked: usize,
}

impl UnitReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

impl fmt::Display for UnitReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} {:>10.3e}  {}  ({} coords, worst {})",
            self.unit,
            self.max_rel_error,
            if self.passed() { "pass" } else { "FAIL" },
            self.checked,
            self.worst
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn coords(len: usize, rng: &mut Rng) -> Vec<usize> {
    if len <= MAX_COORDS {
        (0..len).collect()
    } else {
        let mut picked: Vec<usize> = rng.permutation(len).into_iter().take(MAX_COORDS).collect();
        picked.sort_unstable();
        picked
    }
}

fn contract(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

struct Tracker {
    unit: String,
    max: f64,
    worst: String,
    checked: usize,
}

impl Tracker {
    fn new(unit: &str) -> Self {
        Tracker {
            unit: unit.to_string(),
            max: 0.0,
            worst: "-".into(),
            checked: 0,
        }
    }

    fn record(&mut self, tensor: &str, index: usize, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max || e.is_nan() {
            self.max = if e.is_nan() { f64::INFINITY } else { e };
            self.worst = format!("{tensor}[{index}] analytic {analytic:.6e} numeric {numeric:.6e}");
        }
    }

    fn finish(self) -> UnitReport {
        UnitReport {
            unit: self.unit,
            max_rel_error: self.max,
            worst: self.worst,
            checked: self.checked,
        }
    }
}

/// Checks a layer with respect to its input and every parameter.
pub fn check_layer(
    unit: &str,
    layer: &mut dyn Layer<f64>,
    x: &Tensor<f64>,
    mode: Mode,
    rng: &mut Rng,
) -> Result<UnitReport> {
    let y = layer.forward(x, mode)?;
    let r: Tensor<f64> = rng.normal(y.shape(), 0.0, 1.0);
    for p in layer.params_mut() {
        p.value.clear_grad();
    }
    let dx = layer.backward(&r)?;
    let param_grads: Vec<(String, Vec<f64>)> = layer
        .params()
        .iter()
        .map(|p| {
            (
                p.name.clone(),
                p.value
                    .grad()
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.numel()]),
            )
        })
        .collect();
    let mut t = Tracker::new(unit);
    let loss_at = |layer: &mut dyn Layer<f64>, x: &Tensor<f64>| -> Result<f64> {
        Ok(contract(&layer.forward(x, mode)?, &r))
    };

    let mut xp = x.clone();
    for i in coords(x.len(), rng) {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + STEP;
        let up = loss_at(layer, &xp)?;
        xp.data_mut()[i] = orig - STEP;
        let down = loss_at(layer, &xp)?;
        xp.data_mut()[i] = orig;
        t.record("input", i, dx.data()[i], (up - down) / (2.0 * STEP));
    }
    for (pi, (name, grad)) in param_grads.iter().enumerate() {
        for i in coords(grad.len(), rng) {
            let orig = layer.params()[pi].value.data()[i];
            layer.params_mut()[pi].value.data_mut()[i] = orig + STEP;
            let up = loss_at(layer, x)?;
            layer.params_mut()[pi].value.data_mut()[i] = orig - STEP;
            let down = loss_at(layer, x)?;
            layer.params_mut()[pi].value.data_mut()[i] = orig;
            t.record(name, i, grad[i], (up - down) / (2.0 * STEP));
        }
    }
    Ok(t.finish())
}

type Forward<'a> = dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>> + 'a;
type Backward<'a> = dyn Fn(&[Tensor<f64>], &Tensor<f64>) -> Result<Vec<Tensor<f64>>> + 'a;

/// Checks a pure operator `y = f(inputs)` given its analytic vector-Jacobian
/// product.
pub fn check_op(
    unit: &str,
    names: &[&str],
    inputs: Vec<Tensor<f64>>,
    forward: &Forward<'_>,
    backward: &Backward<'_>,
    rng: &mut Rng,
) -> Result<UnitReport> {
    let y = forward(&inputs)?;
    let r: Tensor<f64> = rng.normal(y.shape(), 0.0, 1.0);
    let grads = backward(&inputs, &r)?;
    let mut t = Tracker::new(unit);
    let mut probe = inputs.clone();
    for (k, grad) in grads.iter().enumerate() {
        for i in coords(grad.len(), rng) {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + STEP;
            let up = contract(&forward(&probe)?, &r);
            probe[k].data_mut()[i] = orig - STEP;
            let down = contract(&forward(&probe)?, &r);
            probe[k].data_mut()[i] = orig;
            t.record(names[k], i, grad.data()[i], (up - down) / (2.0 * STEP));
        }
    }
    Ok(t.finish())
}

fn randomize_params(layer: &mut dyn Layer<f64>, rng: &mut Rng, scale: f64) {
    for p in layer.params_mut() {
        p.value = rng.normal(p.value.shape(), 0.0, scale);
    }
}

pub fn layer_units(faults: Faults) -> Result<Vec<UnitReport>> {
    let mut rng = Rng::new(0x6c61_7965);
    let mut out = Vec::new();

    let x: Tensor<f64> = rng.normal(&[2, 3, 5, 5], 0.0, 1.0);
    let mut conv = Conv2d::new("conv3x3", 3, 4, 3, 1, &mut rng);
    out.push(check_layer(
        "conv3x3",
        &mut conv,
        &x,
        Mode::Train,
        &mut rng,
    )?);
    let mut conv = Conv2d::new("conv3x3_s2", 3, 4, 3, 2, &mut rng);
    out.push(check_layer(
        "conv3x3_stride2",
        &mut conv,
        &x,
        Mode::Train,
        &mut rng,
    )?);
    let mut conv = Conv2d::new("conv1x1_s2", 3, 2, 1, 2, &mut rng);
    out.push(check_layer(
        "conv1x1_stride2",
        &mut conv,
        &x,
        Mode::Train,
        &mut rng,
    )?);

    let mut bn = BatchNorm2d::new("bn", 3);
    randomize_params(&mut bn, &mut rng, 1.0);
    out.push(check_layer(
        "batchnorm_train",
        &mut bn,
        &x,
        Mode::Train,
        &mut rng,
    )?);
    let mut bn = BatchNorm2d::new("bn", 3);
    randomize_params(&mut bn, &mut rng, 1.0);
    bn.set_running_stats(rng.normal(&[3], 0.0, 1.0), rng.uniform(&[3], 0.5, 2.0));
    out.push(check_layer(
        "batchnorm_eval",
        &mut bn,
        &x,
        Mode::Eval,
        &mut rng,
    )?);

    out.push(check_layer(
        "relu",
        &mut Relu::new(),
        &x,
        Mode::Train,
        &mut rng,
    )?);
    let mut sig = Sigmoid::new();
    sig.corrupt_backward = faults.corrupt_sigmoid_backward;
    out.push(check_layer("sigmoid", &mut sig, &x, Mode::Train, &mut rng)?);

    let xf: Tensor<f64> = rng.normal(&[3, 6], 0.0, 1.0);
    let mut fc = Linear::new("fc", 6, 4, &mut rng);
    randomize_params(&mut fc, &mut rng, 0.5);
    out.push(check_layer("linear", &mut fc, &xf, Mode::Train, &mut rng)?);

    out.push(check_layer(
        "global_avg_pool",
        &mut GlobalAvgPool::new(),
        &x,
        Mode::Train,
        &mut rng,
    )?);
    let x4: Tensor<f64> = rng.normal(&[2, 2, 4, 6], 0.0, 1.0);
    out.push(check_layer(
        "avg_pool",
        &mut AvgPool2::new(),
        &x4,
        Mode::Train,
        &mut rng,
    )?);
    Ok(out)
}

fn block(kind: AttentionKind, channels: usize, groups: usize, reduction: usize) -> AttentionConfig {
    AttentionConfig {
        groups,
        reduction,
        ..AttentionConfig::new(kind, channels)
    }
}

pub fn block_units() -> Result<Vec<UnitReport>> {
    let mut rng = Rng::new(0x626c_6f63);
    let mut out = Vec::new();
    let (n, c) = (2, 8);
    let x: Tensor<f64> = rng.normal(&[n, c, 3, 4], 0.5, 1.0);

    out.push(check_op(
        "aggregate",
        &["x"],
        vec![x.clone()],
        &|i| attention::aggregate(&i[0]),
        &|i, r| Ok(vec![attention::aggregate_backward(r, i[0].shape())?]),
        &mut rng,
    )?);
    let z: Tensor<f64> = rng.normal(&[n, c], 0.0, 1.0);
    for groups in [1, 2, 4] {
        out.push(check_op(
            &format!("normalize_g{groups}"),
            &["z"],
            vec![z.clone()],
            &|i| Ok(attention::normalize(&i[0], groups, 1e-5)?.zhat),
            &|i, r| {
                Ok(vec![attention::normalize_backward(
                    r,
                    &attention::normalize(&i[0], groups, 1e-5)?,
                )?])
            },
            &mut rng,
        )?);
    }
    out.push(check_op(
        "transform",
        &["zhat", "w", "b"],
        vec![
            z.clone(),
            rng.normal(&[c], 0.0, 1.0),
            rng.normal(&[c], 0.0, 1.0),
        ],
        &|i| attention::transform(&i[0], &i[1], &i[2]),
        &|i, r| {
            let (dz, dw, db) = attention::transform_backward(r, &i[0], &i[1])?;
            Ok(vec![dz, dw, db])
        },
        &mut rng,
    )?);
    out.push(check_op(
        "fuse",
        &["x", "a"],
        vec![x.clone(), rng.normal(&[n, c], 0.0, 1.5)],
        &|i| attention::fuse(&i[0], &i[1]),
        &|i, r| {
            let (dx, da) = attention::fuse_backward(r, &i[0], &attention::gate(&i[1]))?;
            Ok(vec![dx, da])
        },
        &mut rng,
    )?);

    out.push(check_op(
        "se_excitation",
        &["z"],
        vec![z.clone()],
        &|i| {
            let mut e = attention::Excitation::<f64>::new("e", c, c / 2, &mut Rng::new(17));
            e.forward(&i[0])
        },
        &|i, r| {
            let mut e = attention::Excitation::<f64>::new("e", c, c / 2, &mut Rng::new(17));
            e.forward(&i[0])?;
            Ok(vec![e.backward(r)?])
        },
        &mut rng,
    )?);

    let variants: Vec<(&str, AttentionConfig)> = vec![
        ("se_block", block(AttentionKind::Se, c, 1, 2)),
        ("lct_block", block(AttentionKind::Lct, c, 2, 1)),
        ("lct_block_g1", block(AttentionKind::Lct, c, 1, 1)),
        (
            "lct_skip_normalize",
            AttentionConfig {
                skip_normalize: true,
                ..block(AttentionKind::Lct, c, 2, 1)
            },
        ),
        (
            "lct_skip_transform",
            AttentionConfig {
                skip_transform: true,
                ..block(AttentionKind::Lct, c, 2, 1)
            },
        ),
        (
            "lct_skip_both",
            AttentionConfig {
                skip_normalize: true,
                skip_transform: true,
                ..block(AttentionKind::Lct, c, 2, 1)
            },
        ),
        (
            "lct_block_w1_b0",
            AttentionConfig {
                init: InitMode::W1B0,
                ..block(AttentionKind::Lct, c, 4, 1)
            },
        ),
        ("se_plus_block", block(AttentionKind::SePlus, c, 2, 2)),
    ];
    for (unit, cfg) in variants {
        let mut blk = AttentionBlock::<f64>::new(unit, &cfg, &mut rng)?;
        randomize_params(&mut blk, &mut rng, 0.8);
        out.push(check_layer(unit, &mut blk, &x, Mode::Train, &mut rng)?);
    }
    Ok(out)
}

/// Small two-stage network (under 5k parameters) for end-to-end checks.
pub fn micro_spec(kind: AttentionKind) -> NetworkSpec {
    NetworkSpec {
        name: "micro".into(),
        stem: StemSpec {
            channels: 4,
            kernel: 3,
            stride: 1,
            pool: false,
        },
        stages: vec![
            StageSpec {
                blocks: 1,
                out_channels: 4,
                kind: BlockKind::Basic,
                stride: 1,
            },
            StageSpec {
                blocks: 1,
                out_channels: 8,
                kind: BlockKind::Basic,
                stride: 2,
            },
        ],
        attention: AttentionConfig {
            kind,
            groups: 2,
            reduction: 2,
            ..AttentionConfig::default()
        },
        classes: 3,
        input: [3, 6, 6],
    }
}

/// Cross-entropy loss of a micro network checked against 20 random
/// parameter coordinates and 10 input coordinates.
pub fn end_to_end_unit(kind: AttentionKind) -> Result<UnitReport> {
    let mut rng = Rng::new(0x6532_6500 + kind as u64);
    let spec = micro_spec(kind);
    let mut net = Network::<f64>::build(&spec, &mut rng)?;
    for (_, a) in net.attention_blocks_mut() {
        if let Some((w, b)) = a.affine_mut() {
            *w = rng.normal(w.shape(), 0.0, 1.0);
            *b = rng.normal(b.shape(), 0.0, 1.0);
        }
    }
    let x: Tensor<f64> = rng.normal(&[3, 3, 6, 6], 0.0, 1.0);
    let labels = [0usize, 2, 1];
    let loss = |net: &mut Network<f64>, x: &Tensor<f64>| -> Result<f64> {
        let logits = net.forward(x, Mode::Train)?;
        Ok(nn::softmax_cross_entropy(&logits, &labels)?.0)
    };
    net.zero_grads();
    let logits = net.forward(&x, Mode::Train)?;
    let (_, dlogits) = nn::softmax_cross_entropy(&logits, &labels)?;
    let dx = net.backward(&dlogits)?;

    // flatten (param index, coordinate) pairs and sample 20
    let sizes: Vec<usize> = net.params().iter().map(|p| p.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut flat: Vec<usize> = rng.permutation(total).into_iter().take(20).collect();
    flat.sort_unstable();
    let mut t = Tracker::new(&format!("end2end_{}", kind.tag()));
    for f in flat {
        let (mut pi, mut off) = (0, f);
        while off >= sizes[pi] {
            off -= sizes[pi];
            pi += 1;
        }
        let name = net.params()[pi].name.clone();
        let analytic = net.params()[pi].value.grad().map_or(0.0, |g| g[off]);
        let orig = net.params()[pi].value.data()[off];
        net.params_mut()[pi].value.data_mut()[off] = orig + STEP;
        let up = loss(&mut net, &x)?;
        net.params_mut()[pi].value.data_mut()[off] = orig - STEP;
        let down = loss(&mut net, &x)?;
        net.params_mut()[pi].value.data_mut()[off] = orig;
        t.record(&name, off, analytic, (up - down) / (2.0 * STEP));
    }
    let mut xp = x.clone();
    for i in rng.permutation(x.len()).into_iter().take(10) {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + STEP;
        let up = loss(&mut net, &xp)?;
        xp.data_mut()[i] = orig - STEP;
        let down = loss(&mut net, &xp)?;
        xp.data_mut()[i] = orig;
        t.record("input", i, dx.data()[i], (up - down) / (2.0 * STEP));
    }
    Ok(t.finish())
}

pub fn end_to_end_units() -> Result<Vec<UnitReport>> {
    AttentionKind::ALL
        .iter()
        .map(|&k| end_to_end_unit(k))
        .collect()
}

pub fn run(scope: Scope, faults: Faults) -> Result<Vec<UnitReport>> {
    match scope {
        Scope::Layers => layer_units(faults),
        Scope::Blocks => block_units(),
        Scope::EndToEnd => end_to_end_units(),
    }
}

/// First failing unit, if any.
pub fn first_failure(reports: &[UnitReport]) -> Option<&UnitReport> {
    reports.iter().find(|r| !r.passed())
}
