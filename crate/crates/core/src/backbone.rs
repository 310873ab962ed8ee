//! Residual backbones built from a declarative [`NetworkSpec`], with an
//! attention block on the residual branch of every block.

use std::fmt;
use std::str::FromStr;

use crate::attention::{AttentionBlock, AttentionConfig, AttentionKind};
use crate::error::{Error, Result};
use crate::nn::{
    self, AvgPool2, BatchNorm2d, Buffer, Conv2d, DecayPolicy, GlobalAvgPool, Layer, Linear, Mode,
    Param, Relu, Sequential,
};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Two 3×3 convolutions.
    Basic,
    /// 1×1 reduce, 3×3, 1×1 expand; inner width is a quarter of the output.
    Bottleneck,
}

pub const BOTTLENECK_EXPANSION: usize = 4;

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Basic => "basic",
            BlockKind::Bottleneck => "bottleneck",
        }
    }
}

impl FromStr for BlockKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "basic" => Ok(BlockKind::Basic),
            "bottleneck" => Ok(BlockKind::Bottleneck),
            other => Err(format!("unknown block kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StemSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Follow the stem with a stride-2 pooling layer.
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageSpec {
    pub blocks: usize,
    pub out_channels: usize,
    pub kind: BlockKind,
    /// Stride of the first block; later blocks use stride 1.
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    /// Template applied to every residual block; `channels` is filled in per
    /// block from its output width.
    pub attention: AttentionConfig,
    pub classes: usize,
    /// `(channels, height, width)` of one input image.
    pub input: [usize; 3],
}

/// Position of a residual block, both indices 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId {
    pub stage: usize,
    pub index: usize,
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage{}.block{}", self.stage, self.index)
    }
}

/// Shape bookkeeping for one residual block, shared by the builder and the
/// cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockPlan {
    pub id: BlockId,
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Input spatial size.
    pub in_hw: (usize, usize),
    /// Output spatial size.
    pub out_hw: (usize, usize),
}

impl BlockPlan {
    pub fn has_projection(&self) -> bool {
        self.stride != 1 || self.in_channels != self.out_channels
    }
}

pub(crate) fn conv_out(extent: usize, kernel: usize, stride: usize) -> usize {
    (extent + 2 * (kernel / 2) - kernel) / stride + 1
}

impl NetworkSpec {
    /// Desk-scale network: 3×3/16 stem, three stages of three basic blocks at
    /// widths 16/32/64, 10 classes, 32×32 inputs.
    pub fn resnet_mini() -> Self {
        NetworkSpec {
            name: "resnet-mini".into(),
            stem: StemSpec {
                channels: 16,
                kernel: 3,
                stride: 1,
                pool: false,
            },
            stages: vec![
                StageSpec {
                    blocks: 3,
                    out_channels: 16,
                    kind: BlockKind::Basic,
                    stride: 1,
                },
                StageSpec {
                    blocks: 3,
                    out_channels: 32,
                    kind: BlockKind::Basic,
                    stride: 2,
                },
                StageSpec {
                    blocks: 3,
                    out_channels: 64,
                    kind: BlockKind::Basic,
                    stride: 2,
                },
            ],
            attention: AttentionConfig::default(),
            classes: 10,
            input: [3, 32, 32],
        }
    }

    fn imagenet_bottleneck(name: &str, counts: [usize; 4]) -> Self {
        let widths = [256, 512, 1024, 2048];
        let stages = counts
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (&blocks, out_channels))| StageSpec {
                blocks,
                out_channels,
                kind: BlockKind::Bottleneck,
                stride: if i == 0 { 1 } else { 2 },
            })
            .collect();
        NetworkSpec {
            name: name.into(),
            stem: StemSpec {
                channels: 64,
                kernel: 7,
                stride: 2,
                pool: true,
            },
            stages,
            attention: AttentionConfig {
                reduction: 16,
                groups: 64,
                ..AttentionConfig::default()
            },
            classes: 1000,
            input: [3, 224, 224],
        }
    }

    /// Bottleneck stages `[3, 4, 6, 3]`, 224×224 input, 1000 classes.
    pub fn resnet50() -> Self {
        Self::imagenet_bottleneck("resnet50", [3, 4, 6, 3])
    }

    /// Bottleneck stages `[3, 4, 23, 3]`, 224×224 input, 1000 classes.
    pub fn resnet101() -> Self {
        Self::imagenet_bottleneck("resnet101", [3, 4, 23, 3])
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "resnet-mini" | "resnet_mini" => Some(Self::resnet_mini()),
            "resnet50" => Some(Self::resnet50()),
            "resnet101" => Some(Self::resnet101()),
            _ => None,
        }
    }

    pub const PRESETS: [&'static str; 3] = ["resnet-mini", "resnet50", "resnet101"];

    pub fn with_attention(mut self, kind: AttentionKind) -> Self {
        self.attention.kind = kind;
        self
    }

    pub fn with_attention_config(mut self, attention: AttentionConfig) -> Self {
        self.attention = attention;
        self
    }

    /// Attention config for a block of the given width.
    pub fn block_attention(&self, channels: usize) -> AttentionConfig {
        self.attention.with_channels(channels)
    }

    /// Validates the spec, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let positive = |path: &str, v: usize| -> Result<()> {
            if v == 0 {
                Err(Error::config(path, "must be positive"))
            } else {
                Ok(())
            }
        };
        positive("input.channels", self.input[0])?;
        positive("input.height", self.input[1])?;
        positive("input.width", self.input[2])?;
        positive("stem.channels", self.stem.channels)?;
        positive("stem.stride", self.stem.stride)?;
        positive("classes", self.classes)?;
        if self.stem.kernel.is_multiple_of(2) {
            return Err(Error::config("stem.kernel", "must be odd"));
        }
        if self.stages.is_empty() {
            return Err(Error::config("stages", "at least one stage is required"));
        }
        for (i, st) in self.stages.iter().enumerate() {
            positive(&format!("stages[{i}].blocks"), st.blocks)?;
            positive(&format!("stages[{i}].out_channels"), st.out_channels)?;
            positive(&format!("stages[{i}].stride"), st.stride)?;
            if st.kind == BlockKind::Bottleneck && st.out_channels % BOTTLENECK_EXPANSION != 0 {
                return Err(Error::config(
                    format!("stages[{i}].out_channels"),
                    format!("bottleneck width must be a multiple of {BOTTLENECK_EXPANSION}"),
                ));
            }
            if self.attention.kind != AttentionKind::None {
                self.block_attention(st.out_channels)
                    .validate()
                    .map_err(|e| match e {
                        Error::InvalidConfig { path, reason } => {
                            Error::config(format!("stages[{i}].{path}"), reason)
                        }
                        Error::InvalidGroups { channels, groups } => Error::config(
                            format!("stages[{i}].attention.groups"),
                            format!("{channels} channels cannot be split into {groups} groups"),
                        ),
                        other => other,
                    })?;
            }
        }
        let (_, h, w) = self.stem_output()?;
        if h == 0 || w == 0 {
            return Err(Error::config("input", "input too small for the stem"));
        }
        for plan in self.block_plans()? {
            if plan.out_hw.0 == 0 || plan.out_hw.1 == 0 {
                return Err(Error::config(
                    format!("{}", plan.id),
                    "spatial size collapsed to zero",
                ));
            }
        }
        Ok(())
    }

    /// `(channels, height, width)` after the stem (and its pooling).
    pub fn stem_output(&self) -> Result<(usize, usize, usize)> {
        let [_, h, w] = self.input;
        let (k, s) = (self.stem.kernel, self.stem.stride);
        if h + 2 * (k / 2) < k || w + 2 * (k / 2) < k {
            return Err(Error::config("input", "smaller than the stem kernel"));
        }
        let (mut h, mut w) = (conv_out(h, k, s), conv_out(w, k, s));
        if self.stem.pool {
            h /= 2;
            w /= 2;
        }
        Ok((self.stem.channels, h, w))
    }

    pub fn block_plans(&self) -> Result<Vec<BlockPlan>> {
        let (mut c, mut h, mut w) = self.stem_output()?;
        let mut plans = Vec::new();
        for (si, st) in self.stages.iter().enumerate() {
            for bi in 0..st.blocks {
                let stride = if bi == 0 { st.stride } else { 1 };
                let out_hw = (conv_out(h, 3, stride), conv_out(w, 3, stride));
                plans.push(BlockPlan {
                    id: BlockId {
                        stage: si + 1,
                        index: bi + 1,
                    },
                    kind: st.kind,
                    in_channels: c,
                    out_channels: st.out_channels,
                    stride,
                    in_hw: (h, w),
                    out_hw,
                });
                c = st.out_channels;
                (h, w) = out_hw;
            }
        }
        Ok(plans)
    }

    pub fn final_channels(&self) -> usize {
        self.stages
            .last()
            .map_or(self.stem.channels, |s| s.out_channels)
    }
}

/// One residual block: `out = ReLU(attn(F(x)) + shortcut(x))`.
pub struct ResidualBlock<T> {
    pub plan: BlockPlan,
    pub branch: Sequential<T>,
    pub attention: AttentionBlock<T>,
    pub shortcut: Option<Sequential<T>>,
    relu: Relu<T>,
}

impl<T: Scalar> ResidualBlock<T> {
    fn build(plan: BlockPlan, attention: &AttentionConfig, rng: &mut Rng) -> Result<Self> {
        let p = format!("{}", plan.id);
        let (cin, cout, s) = (plan.in_channels, plan.out_channels, plan.stride);
        let layers: Vec<Box<dyn Layer<T>>> = match plan.kind {
            BlockKind::Basic => vec![
                Box::new(Conv2d::new(&format!("{p}.conv1"), cin, cout, 3, s, rng)),
                Box::new(BatchNorm2d::new(&format!("{p}.bn1"), cout)),
                Box::new(Relu::new()),
                Box::new(Conv2d::new(&format!("{p}.conv2"), cout, cout, 3, 1, rng)),
                Box::new(BatchNorm2d::new(&format!("{p}.bn2"), cout)),
            ],
            BlockKind::Bottleneck => {
                let mid = cout / BOTTLENECK_EXPANSION;
                vec![
                    Box::new(Conv2d::new(&format!("{p}.conv1"), cin, mid, 1, 1, rng)),
                    Box::new(BatchNorm2d::new(&format!("{p}.bn1"), mid)),
                    Box::new(Relu::new()),
                    Box::new(Conv2d::new(&format!("{p}.conv2"), mid, mid, 3, s, rng)),
                    Box::new(BatchNorm2d::new(&format!("{p}.bn2"), mid)),
                    Box::new(Relu::new()),
                    Box::new(Conv2d::new(&format!("{p}.conv3"), mid, cout, 1, 1, rng)),
                    Box::new(BatchNorm2d::new(&format!("{p}.bn3"), cout)),
                ]
            }
        };
        let shortcut = plan.has_projection().then(|| {
            Sequential::new(vec![
                Box::new(Conv2d::new(
                    &format!("{p}.shortcut.conv"),
                    cin,
                    cout,
                    1,
                    s,
                    rng,
                )) as Box<dyn Layer<T>>,
                Box::new(BatchNorm2d::new(&format!("{p}.shortcut.bn"), cout)),
            ])
        });
        let attention =
            AttentionBlock::new(&format!("{p}.attn"), &attention.with_channels(cout), rng)?;
        Ok(ResidualBlock {
            plan,
            branch: Sequential::new(layers),
            attention,
            shortcut,
            relu: Relu::new(),
        })
    }
}

impl<T: Scalar> Layer<T> for ResidualBlock<T> {
    fn kind(&self) -> &'static str {
        "residual"
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let f = self.branch.forward(x, mode)?;
        let mut out = self.attention.forward(&f, mode)?;
        let sc = match &mut self.shortcut {
            Some(s) => s.forward(x, mode)?,
            None => x.clone(),
        };
        if sc.shape() != out.shape() {
            return Err(Error::ShapeMismatch {
                op: "residual",
                lhs: out.shape().to_vec(),
                rhs: sc.shape().to_vec(),
            });
        }
        for (o, &s) in out.data_mut().iter_mut().zip(sc.data()) {
            *o += s;
        }
        self.relu.forward(&out, mode)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.relu.backward(dy)?;
        let ga = self.attention.backward(&g)?;
        let mut dx = self.branch.backward(&ga)?;
        let ds = match &mut self.shortcut {
            Some(s) => s.backward(&g)?,
            None => g,
        };
        for (d, &s) in dx.data_mut().iter_mut().zip(ds.data()) {
            *d += s;
        }
        Ok(dx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut out = self.branch.params();
        out.extend(self.attention.params());
        if let Some(s) = &self.shortcut {
            out.extend(s.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = self.branch.params_mut();
        out.extend(self.attention.params_mut());
        if let Some(s) = &mut self.shortcut {
            out.extend(s.params_mut());
        }
        out
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        let mut out = self.branch.buffers();
        if let Some(s) = &self.shortcut {
            out.extend(s.buffers());
        }
        out
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        let mut out = self.branch.buffers_mut();
        if let Some(s) = &mut self.shortcut {
            out.extend(s.buffers_mut());
        }
        out
    }
}

pub struct Network<T> {
    pub spec: NetworkSpec,
    pub stem: Sequential<T>,
    pub blocks: Vec<ResidualBlock<T>>,
    head_pool: GlobalAvgPool,
    pub fc: Linear<T>,
    warnings: Vec<String>,
}

impl<T: Scalar> Network<T> {
    /// Instantiates `spec`. He-normal conv weights and FC weights are drawn
    /// from `rng` in layer order.
    pub fn build(spec: &NetworkSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut stem_layers: Vec<Box<dyn Layer<T>>> = vec![
            Box::new(Conv2d::new(
                "stem.conv",
                spec.input[0],
                spec.stem.channels,
                spec.stem.kernel,
                spec.stem.stride,
                rng,
            )),
            Box::new(BatchNorm2d::new("stem.bn", spec.stem.channels)),
            Box::new(Relu::new()),
        ];
        if spec.stem.pool {
            stem_layers.push(Box::new(AvgPool2::new()));
        }
        let mut warnings = Vec::new();
        let mut blocks = Vec::new();
        for plan in spec.block_plans()? {
            let cfg = spec.block_attention(plan.out_channels);
            if let Some(w) = cfg.clamp_warning() {
                if !warnings.contains(&w) {
                    log::warn!("{w}");
                    warnings.push(w);
                }
            }
            blocks.push(ResidualBlock::build(plan, &spec.attention, rng)?);
        }
        let fc = Linear::new("fc", spec.final_channels(), spec.classes, rng);
        let net = Network {
            spec: spec.clone(),
            stem: Sequential::new(stem_layers),
            blocks,
            head_pool: GlobalAvgPool::new(),
            fc,
            warnings,
        };
        nn::check_unique_names(net.params().iter().map(|p| p.name.as_str()))?;
        Ok(net)
    }

    /// Messages logged while building (group-count clamping).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let want = [self.spec.input[0], self.spec.input[1], self.spec.input[2]];
        if x.rank() != 4 || x.shape()[1..] != want {
            return Err(Error::ShapeMismatch {
                op: "network input",
                lhs: want.to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        let mut h = self.stem.forward(x, mode)?;
        for block in &mut self.blocks {
            h = block.forward(&h, mode)?;
        }
        let pooled = self.head_pool.forward(&h, mode)?;
        let logits = self.fc.forward(&pooled, mode)?;
        logits.ensure_finite("network logits")?;
        Ok(logits)
    }

    /// Backpropagates `dlogits`; returns the gradient with respect to the input.
    pub fn backward(&mut self, dlogits: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.fc.backward(dlogits)?;
        let mut g = Layer::<T>::backward(&mut self.head_pool, &g)?;
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(&g)?;
        }
        self.stem.backward(&g)
    }

    /// Registry order: stem, blocks in order (branch, attention, shortcut),
    /// classifier.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = self.stem.params();
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend(self.fc.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = self.stem.params_mut();
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend(self.fc.params_mut());
        out
    }

    pub fn buffers(&self) -> Vec<&Buffer<T>> {
        let mut out = self.stem.buffers();
        for b in &self.blocks {
            out.extend(b.buffers());
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        let mut out = self.stem.buffers_mut();
        for b in &mut self.blocks {
            out.extend(b.buffers_mut());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn apply_decay_policy(&mut self, policy: DecayPolicy) {
        for p in self.params_mut() {
            p.decay = policy.applies_to(&p.name);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.value.clear_grad();
        }
    }

    /// Every residual block's attention, in network order. Blocks built with
    /// attention kind `none` are included (their gate is identically one).
    pub fn attention_blocks(&self) -> impl Iterator<Item = (BlockId, &AttentionBlock<T>)> {
        self.blocks.iter().map(|b| (b.plan.id, &b.attention))
    }

    pub fn attention_blocks_mut(
        &mut self,
    ) -> impl Iterator<Item = (BlockId, &mut AttentionBlock<T>)> {
        self.blocks
            .iter_mut()
            .map(|b| (b.plan.id, &mut b.attention))
    }

    pub fn set_probes(&mut self, enabled: bool) {
        for (_, a) in self.attention_blocks_mut() {
            a.probe_enabled = enabled;
        }
    }

    /// Converts to another numeric width, keeping every parameter and running
    /// statistic.
    pub fn cast<U: Scalar>(&self) -> Result<Network<U>> {
        let mut rng = Rng::new(0);
        let mut out = Network::<U>::build(&self.spec, &mut rng)?;
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            dst.value = src.value.cast();
            dst.decay = src.decay;
        }
        for (dst, src) in out.buffers_mut().into_iter().zip(self.buffers()) {
            dst.value = src.value.cast();
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> NetworkSpec {
        NetworkSpec {
            name: "toy".into(),
            stem: StemSpec {
                channels: 8,
                kernel: 3,
                stride: 1,
                pool: false,
            },
            stages: vec![StageSpec {
                blocks: 1,
                out_channels: 8,
                kind: BlockKind::Basic,
                stride: 1,
            }],
            attention: AttentionConfig::default(),
            classes: 4,
            input: [3, 8, 8],
        }
    }

    #[test]
    fn toy_output_shape() {
        let mut rng = Rng::new(0);
        let mut net = Network::<f32>::build(&toy(), &mut rng).unwrap();
        let x = rng.normal(&[1, 3, 8, 8], 0.0, 1.0);
        assert_eq!(net.forward(&x, Mode::Eval).unwrap().shape(), &[1, 4]);
    }

    #[test]
    fn lct_adds_two_parameters_per_channel() {
        let mut rng = Rng::new(0);
        let plain = Network::<f32>::build(&toy(), &mut rng).unwrap();
        let lct =
            Network::<f32>::build(&toy().with_attention(AttentionKind::Lct), &mut rng).unwrap();
        assert_eq!(lct.param_count() - plain.param_count(), 16);
    }

    #[test]
    fn invalid_spec_names_field() {
        let mut spec = toy();
        spec.stages[0].out_channels = 0;
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("stages[0].out_channels"), "{err}");
        let mut spec = toy().with_attention(AttentionKind::Lct);
        spec.attention.groups = 3;
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("stages[0].attention.groups"), "{err}");
    }

    #[test]
    fn wrong_input_geometry() {
        let mut rng = Rng::new(0);
        let mut net = Network::<f64>::build(&toy(), &mut rng).unwrap();
        assert!(net
            .forward(&Tensor::zeros(&[1, 3, 9, 8]), Mode::Eval)
            .is_err());
    }

    #[test]
    fn resnet50_stage_three_width() {
        let spec = NetworkSpec::resnet50().with_attention(AttentionKind::Lct);
        let plans = spec.block_plans().unwrap();
        let stage3: Vec<_> = plans.iter().filter(|p| p.id.stage == 3).collect();
        assert_eq!(stage3.len(), 6);
        assert!(stage3
            .iter()
            .all(|p| spec.block_attention(p.out_channels).channels == 1024));
        assert_eq!(plans.last().unwrap().out_hw, (7, 7));
    }

    #[test]
    fn clamp_warning_recorded() {
        let mut rng = Rng::new(0);
        let spec = NetworkSpec::resnet_mini().with_attention(AttentionKind::Lct);
        let net = Network::<f32>::build(&spec, &mut rng).unwrap();
        assert_eq!(net.warnings().len(), 2);
        assert!(net.warnings()[0].contains("16 channels"));
    }
}
