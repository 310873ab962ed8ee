//! Parameter and multiply-add counts computed from a [`NetworkSpec`] alone,
//! without instantiating any tensors.
//!
//! Parameters are counted exactly. Multiply-adds follow the convention in
//! [`MAC_CONVENTION`], which is printed with every report:
//!
//! | unit          | MACs per sample                  |
//! |---------------|----------------------------------|
//! | convolution   | `k²·C_in·C_out·H'·W'`            |
//! | linear        | `in·out`                         |
//! | pooling (GAP) | `C·H·W / 2` (adds only)          |
//! | fuse          | `C·H·W / 2` (multiplies only)    |
//! | normalize     | `4·C`                            |
//! | transform     | `C`                              |
//! | sigmoid       | `C`                              |
//!
//! A lone add or a lone multiply is half a multiply-add. Batch norm, ReLU,
//! residual additions and spatial pooling in the stem count zero (they fold
//! into neighbouring layers at inference time).

use std::fmt::Write as _;

use crate::attention::{AttentionConfig, AttentionKind};
use crate::backbone::{BlockKind, BlockPlan, NetworkSpec, BOTTLENECK_EXPANSION};
use crate::error::Result;

pub const MAC_CONVENTION: &str =
    "mac-v1: conv k*k*cin*cout*h*w; linear in*out; gap c*h*w/2; fuse c*h*w/2; \
normalize 4c; transform c; sigmoid c; batchnorm/relu/add/stem-pool 0";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub spec_name: String,
    pub attention: AttentionKind,
    pub total_params: u64,
    pub total_macs: u64,
    pub layers: Vec<LayerCost>,
    /// `(params, macs)` of this spec minus the same spec without attention.
    pub attention_delta: (u64, u64),
    pub convention: &'static str,
}

fn conv(name: String, k: usize, cin: usize, cout: usize, out_hw: (usize, usize)) -> LayerCost {
    let params = (k * k * cin * cout) as u64;
    LayerCost {
        name,
        params,
        macs: params * (out_hw.0 * out_hw.1) as u64,
    }
}

fn bn(name: String, c: usize) -> LayerCost {
    LayerCost {
        name,
        params: 2 * c as u64,
        macs: 0,
    }
}

fn half(v: usize) -> u64 {
    (v as u64).div_ceil(2)
}

/// Cost of one attention block acting on a `C×H×W` map.
pub fn attention_cost(cfg: &AttentionConfig, hw: (usize, usize)) -> (u64, u64) {
    let c = cfg.channels;
    let plane = c * hw.0 * hw.1;
    let shared = half(plane) + half(plane) + c as u64; // aggregate + fuse + sigmoid
    match cfg.kind {
        AttentionKind::None => (0, 0),
        AttentionKind::Se | AttentionKind::SePlus => {
            let hidden = cfg.hidden();
            let params = (2 * c * hidden + hidden + c) as u64;
            let mut macs = shared + (2 * c * hidden) as u64;
            if cfg.kind == AttentionKind::SePlus {
                macs += 4 * c as u64;
            }
            (params, macs)
        }
        AttentionKind::Lct => {
            let mut macs = shared;
            if !cfg.skip_normalize {
                macs += 4 * c as u64;
            }
            let params = if cfg.skip_transform {
                0
            } else {
                macs += c as u64;
                2 * c as u64
            };
            (params, macs)
        }
    }
}

fn block_layers(plan: &BlockPlan, spec: &NetworkSpec, out: &mut Vec<LayerCost>) {
    let p = plan.id.to_string();
    let (cin, cout) = (plan.in_channels, plan.out_channels);
    match plan.kind {
        BlockKind::Basic => {
            out.push(conv(format!("{p}.conv1"), 3, cin, cout, plan.out_hw));
            out.push(bn(format!("{p}.bn1"), cout));
            out.push(conv(format!("{p}.conv2"), 3, cout, cout, plan.out_hw));
            out.push(bn(format!("{p}.bn2"), cout));
        }
        BlockKind::Bottleneck => {
            let mid = cout / BOTTLENECK_EXPANSION;
            out.push(conv(format!("{p}.conv1"), 1, cin, mid, plan.in_hw));
            out.push(bn(format!("{p}.bn1"), mid));
            out.push(conv(format!("{p}.conv2"), 3, mid, mid, plan.out_hw));
            out.push(bn(format!("{p}.bn2"), mid));
            out.push(conv(format!("{p}.conv3"), 1, mid, cout, plan.out_hw));
            out.push(bn(format!("{p}.bn3"), cout));
        }
    }
    let attn = spec.block_attention(cout);
    if attn.kind != AttentionKind::None {
        let (params, macs) = attention_cost(&attn, plan.out_hw);
        out.push(LayerCost {
            name: format!("{p}.attn"),
            params,
            macs,
        });
    }
    if plan.has_projection() {
        out.push(conv(
            format!("{p}.shortcut.conv"),
            1,
            cin,
            cout,
            plan.out_hw,
        ));
        out.push(bn(format!("{p}.shortcut.bn"), cout));
    }
}

fn layer_costs(spec: &NetworkSpec) -> Result<Vec<LayerCost>> {
    spec.validate()?;
    let mut layers = Vec::new();
    let [cin, h, w] = spec.input;
    let k = spec.stem.kernel;
    let s = spec.stem.stride;
    let stem_hw = (
        crate::backbone::conv_out(h, k, s),
        crate::backbone::conv_out(w, k, s),
    );
    layers.push(conv(
        "stem.conv".into(),
        k,
        cin,
        spec.stem.channels,
        stem_hw,
    ));
    layers.push(bn("stem.bn".into(), spec.stem.channels));
    let plans = spec.block_plans()?;
    for plan in &plans {
        block_layers(plan, spec, &mut layers);
    }
    let c = spec.final_channels();
    let last_hw = plans.last().map_or_else(
        || spec.stem_output().map(|(_, h, w)| (h, w)),
        |p| Ok(p.out_hw),
    )?;
    layers.push(LayerCost {
        name: "head.pool".into(),
        params: 0,
        macs: half(c * last_hw.0 * last_hw.1),
    });
    layers.push(LayerCost {
        name: "fc".into(),
        params: (c * spec.classes + spec.classes) as u64,
        macs: (c * spec.classes) as u64,
    });
    Ok(layers)
}

fn totals(layers: &[LayerCost]) -> (u64, u64) {
    layers
        .iter()
        .fold((0, 0), |(p, m), l| (p + l.params, m + l.macs))
}

/// Full report for `spec`, including the delta against the attention-free
/// variant.
pub fn cost_report(spec: &NetworkSpec) -> Result<CostReport> {
    let layers = layer_costs(spec)?;
    let (total_params, total_macs) = totals(&layers);
    let base = spec.clone().with_attention(AttentionKind::None);
    let (base_params, base_macs) = totals(&layer_costs(&base)?);
    Ok(CostReport {
        spec_name: spec.name.clone(),
        attention: spec.attention.kind,
        total_params,
        total_macs,
        layers,
        attention_delta: (total_params - base_params, total_macs - base_macs),
        convention: MAC_CONVENTION,
    })
}

pub fn count_params(spec: &NetworkSpec) -> Result<u64> {
    Ok(cost_report(spec)?.total_params)
}

pub fn count_macs(spec: &NetworkSpec) -> Result<u64> {
    Ok(cost_report(spec)?.total_macs)
}

fn millions(v: u64) -> String {
    format!("{:.3}M", v as f64 / 1e6)
}

fn giga(v: u64) -> String {
    format!("{:.3}G", v as f64 / 1e9)
}

impl CostReport {
    /// Per-block attention costs, in network order.
    pub fn attention_layers(&self) -> impl Iterator<Item = &LayerCost> {
        self.layers.iter().filter(|l| l.name.ends_with(".attn"))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,params,macs\n");
        for l in &self.layers {
            let _ = writeln!(out, "{},{},{}", l.name, l.params, l.macs);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self
            .layers
            .iter()
            .map(|l| l.name.len())
            .max()
            .unwrap_or(4)
            .max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "network: {} (attention: {})",
            self.spec_name, self.attention
        );
        let _ = writeln!(out, "convention: {}", self.convention);
        let _ = writeln!(out, "{:<width$} {:>12} {:>14}", "layer", "params", "macs");
        for l in &self.layers {
            let _ = writeln!(out, "{:<width$} {:>12} {:>14}", l.name, l.params, l.macs);
        }
        let _ = writeln!(
            out,
            "total params: {} ({})\ntotal macs:   {} ({})",
            self.total_params,
            millions(self.total_params),
            self.total_macs,
            giga(self.total_macs)
        );
        let _ = writeln!(
            out,
            "attention delta: +{} params ({}), +{} macs ({})",
            self.attention_delta.0,
            millions(self.attention_delta.0),
            self.attention_delta.1,
            giga(self.attention_delta.1)
        );
        out
    }
}
