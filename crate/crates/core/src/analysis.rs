//! Context-versus-attention statistics of attention blocks.
//!
//! For each selected block the evaluation set is streamed through the network
//! in inference mode and three per-channel averages are kept: the global
//! context entering the block, the gate `σ(a)`, and the global context of the
//! block's output. Channels are then ordered by the incoming context, and the
//! rank correlation between `|ctx_before|` and the gate summarises whether
//! large contexts receive small attention.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::AttentionKind;
use crate::backbone::{BlockId, Network};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::Scalar;

pub const CSV_HEADER: &str = "channel,ctx_before,ctx_after,attention,delta";
const RHO_PREFIX: &str = "# spearman_rho=";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockSelector {
    All,
    FirstOfEachStage,
    Ids(Vec<BlockId>),
}

impl BlockSelector {
    pub fn matches(&self, id: BlockId) -> bool {
        match self {
            BlockSelector::All => true,
            BlockSelector::FirstOfEachStage => id.index == 1,
            BlockSelector::Ids(ids) => ids.contains(&id),
        }
    }
}

fn parse_block_id(s: &str) -> Option<BlockId> {
    let (stage, block) = s.trim().split_once('.')?;
    Some(BlockId {
        stage: stage.strip_prefix("stage")?.parse().ok()?,
        index: block.strip_prefix("block")?.parse().ok()?,
    })
}

impl FromStr for BlockSelector {
    type Err = Error;

    /// `all`, `first-of-each-stage`, or a comma-separated list such as
    /// `stage1.block1,stage3.block2`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => Ok(BlockSelector::All),
            "first-of-each-stage" => Ok(BlockSelector::FirstOfEachStage),
            list => list
                .split(',')
                .map(|p| {
                    parse_block_id(p).ok_or_else(|| {
                        Error::config("analyze.blocks", format!("bad block id `{p}`"))
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map(BlockSelector::Ids),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockStats {
    pub id: BlockId,
    pub kind: AttentionKind,
    pub ctx_before: Vec<f64>,
    pub ctx_after: Vec<f64>,
    pub attention: Vec<f64>,
    /// Channel indices by ascending `ctx_before` (stable for ties).
    pub sort_order: Vec<usize>,
    /// `|ctx_after − ctx_before|`.
    pub delta: Vec<f64>,
    /// Rank correlation of `|ctx_before|` with `attention`; `None` when one
    /// of them is constant.
    pub spearman_rho: Option<f64>,
}

impl BlockStats {
    pub fn new(
        id: BlockId,
        kind: AttentionKind,
        ctx_before: Vec<f64>,
        ctx_after: Vec<f64>,
        attention: Vec<f64>,
    ) -> Self {
        let mut sort_order: Vec<usize> = (0..ctx_before.len()).collect();
        sort_order.sort_by(|&a, &b| ctx_before[a].total_cmp(&ctx_before[b]));
        let delta = ctx_after
            .iter()
            .zip(&ctx_before)
            .map(|(a, b)| (a - b).abs())
            .collect();
        let magnitude: Vec<f64> = ctx_before.iter().map(|v| v.abs()).collect();
        let spearman_rho = spearman(&magnitude, &attention).ok();
        BlockStats {
            id,
            kind,
            ctx_before,
            ctx_after,
            attention,
            sort_order,
            delta,
            spearman_rho,
        }
    }

    pub fn channels(&self) -> usize {
        self.ctx_before.len()
    }

    pub fn file_name(&self) -> String {
        format!(
            "stage{}_block{}_{}.csv",
            self.id.stage,
            self.id.index,
            self.kind.tag()
        )
    }

    /// Header, one row per channel in sort order, then the correlation footer.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for &k in &self.sort_order {
            let _ = writeln!(
                out,
                "{k},{},{},{},{}",
                fmt_sig9(self.ctx_before[k]),
                fmt_sig9(self.ctx_after[k]),
                fmt_sig9(self.attention[k]),
                fmt_sig9(self.delta[k])
            );
        }
        let rho = self
            .spearman_rho
            .map_or_else(|| "undefined".to_string(), fmt_sig9);
        let _ = writeln!(out, "{RHO_PREFIX}{rho}");
        out
    }

    /// Parses a file written by [`BlockStats::to_csv`]; `file_name` supplies
    /// the block id and kind.
    pub fn from_csv(file_name: &str, text: &str) -> Result<Self> {
        let bad = |why: String| Error::config(file_name, why);
        let (id, kind) =
            parse_file_name(file_name).ok_or_else(|| bad("unrecognised file name".into()))?;
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(bad("missing header".into()));
        }
        let mut rows = Vec::new();
        let mut rho = None;
        for line in lines {
            if let Some(r) = line.strip_prefix(RHO_PREFIX) {
                rho = Some(if r == "undefined" {
                    None
                } else {
                    Some(r.parse::<f64>().map_err(|e| bad(format!("rho: {e}")))?)
                });
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(format!("malformed row `{line}`")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
            let channel: usize = f[0].parse().map_err(|e| bad(format!("channel: {e}")))?;
            rows.push((channel, num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?));
        }
        let c = rows.len();
        let mut stats = BlockStats {
            id,
            kind,
            ctx_before: vec![0.0; c],
            ctx_after: vec![0.0; c],
            attention: vec![0.0; c],
            sort_order: Vec::with_capacity(c),
            delta: vec![0.0; c],
            spearman_rho: rho.ok_or_else(|| bad("missing footer".into()))?,
        };
        for (k, before, after, att, delta) in rows {
            if k >= c {
                return Err(bad(format!("channel {k} out of range")));
            }
            stats.ctx_before[k] = before;
            stats.ctx_after[k] = after;
            stats.attention[k] = att;
            stats.delta[k] = delta;
            stats.sort_order.push(k);
        }
        Ok(stats)
    }
}

fn parse_file_name(name: &str) -> Option<(BlockId, AttentionKind)> {
    let stem = Path::new(name).file_stem()?.to_str()?;
    let (stage, rest) = stem.split_once('_')?;
    let (block, kind) = rest.split_once('_')?;
    let id = parse_block_id(&format!("{stage}.{block}"))?;
    let kind = AttentionKind::ALL.into_iter().find(|k| k.tag() == kind)?;
    Some((id, kind))
}

/// `%.9g`: nine significant digits, trailing zeros removed, exponent form
/// outside `1e-5 ≤ |v| < 1e9`.
pub fn fmt_sig9(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-5..9).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    } else {
        trim(&format!("{v:.*}", (8 - exp) as usize))
    }
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average-rank ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "spearman",
            lhs: vec![x.len()],
            rhs: vec![y.len()],
        });
    }
    if x.len() < 3 {
        return Err(Error::UndefinedCorrelation("fewer than three points"));
    }
    pearson(&ranks(x), &ranks(y))
}

/// Numerically stable running mean of fixed-length vectors.
#[derive(Debug, Clone)]
pub struct RunningMean {
    mean: Vec<f64>,
    count: usize,
}

impl RunningMean {
    pub fn new(len: usize) -> Self {
        RunningMean {
            mean: vec![0.0; len],
            count: 0,
        }
    }

    pub fn push(&mut self, row: impl IntoIterator<Item = f64>) {
        self.count += 1;
        let k = self.count as f64;
        for (m, x) in self.mean.iter_mut().zip(row) {
            *m += (x - *m) / k;
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn into_mean(self) -> Vec<f64> {
        self.mean
    }
}

struct Accumulator {
    id: BlockId,
    kind: AttentionKind,
    before: RunningMean,
    after: RunningMean,
    attention: RunningMean,
}

/// Streams `data` through `net` in inference mode and averages the probes of
/// the blocks picked by `selector`, in network order.
pub fn collect<T: Scalar>(
    net: &mut Network<T>,
    data: &Dataset,
    selector: &BlockSelector,
    batch_size: usize,
) -> Result<Vec<BlockStats>> {
    let mut acc: Vec<Accumulator> = net
        .attention_blocks()
        .filter(|(id, _)| selector.matches(*id))
        .map(|(id, b)| Accumulator {
            id,
            kind: b.kind(),
            before: RunningMean::new(b.channels()),
            after: RunningMean::new(b.channels()),
            attention: RunningMean::new(b.channels()),
        })
        .collect();
    if acc.is_empty() {
        return Err(Error::EmptySelection);
    }
    for (id, b) in net.attention_blocks_mut() {
        b.probe_enabled = selector.matches(id);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let result = (|| -> Result<()> {
        for chunk in idx.chunks(batch_size.max(1)) {
            let (x, _) = data.batch(chunk)?;
            net.forward(&x.cast(), Mode::Eval)?;
            let mut slots = acc.iter_mut();
            for (id, b) in net.attention_blocks_mut() {
                if !selector.matches(id) {
                    continue;
                }
                let a = slots.next().expect("one accumulator per selected block");
                let p = b
                    .take_probe()
                    .ok_or_else(|| Error::NoCachedForward(format!("{id} probe")))?;
                let c = a.before.mean.len();
                for n in 0..chunk.len() {
                    let row = |t: &crate::tensor::Tensor<T>| {
                        t.data()[n * c..(n + 1) * c]
                            .iter()
                            .map(|v| v.as_f64())
                            .collect::<Vec<_>>()
                    };
                    a.before.push(row(&p.ctx_before));
                    a.after.push(row(&p.ctx_after));
                    a.attention.push(row(&p.attention));
                }
            }
        }
        Ok(())
    })();
    net.set_probes(false);
    result?;
    Ok(acc
        .into_iter()
        .map(|a| {
            BlockStats::new(
                a.id,
                a.kind,
                a.before.into_mean(),
                a.after.into_mean(),
                a.attention.into_mean(),
            )
        })
        .collect())
}

/// Writes one CSV per block into `dir`; returns the paths in input order.
pub fn export_stats(stats: &[BlockStats], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    stats
        .iter()
        .map(|s| {
            let path = dir.join(s.file_name());
            std::fs::write(&path, s.to_csv()).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

pub fn read_stats(path: &Path) -> Result<BlockStats> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default();
    BlockStats::from_csv(name, &text)
}

/// One line per block: id, kind, channel count and correlation.
pub fn summary(stats: &[BlockStats]) -> String {
    let mut out = String::from("block,kind,channels,spearman_rho\n");
    for s in stats {
        let rho = s
            .spearman_rho
            .map_or_else(|| "undefined".to_string(), fmt_sig9);
        let _ = writeln!(out, "{},{},{},{rho}", s.id, s.kind.tag(), s.channels());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(stage: usize, index: usize) -> BlockId {
        BlockId { stage, index }
    }

    #[test]
    fn spearman_extremes_and_ties() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!(matches!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(fmt_sig9(0.7310585786300049), "0.731058579");
        assert_eq!(fmt_sig9(1.0), "1");
        assert_eq!(fmt_sig9(-2.5), "-2.5");
        assert_eq!(fmt_sig9(1.23456789e-7), "1.23456789e-07");
        assert_eq!(fmt_sig9(123456789012.0), "1.23456789e+11");
        assert_eq!(fmt_sig9(0.0), "0");
    }

    #[test]
    fn selector_parsing() {
        assert_eq!("all".parse::<BlockSelector>().unwrap(), BlockSelector::All);
        assert_eq!(
            "stage1.block2, stage3.block1"
                .parse::<BlockSelector>()
                .unwrap(),
            BlockSelector::Ids(vec![id(1, 2), id(3, 1)])
        );
        assert!("stage1".parse::<BlockSelector>().is_err());
        assert!(BlockSelector::FirstOfEachStage.matches(id(2, 1)));
        assert!(!BlockSelector::FirstOfEachStage.matches(id(2, 2)));
    }

    #[test]
    fn csv_round_trip_and_contracts() {
        let s = BlockStats::new(
            id(2, 1),
            AttentionKind::Lct,
            vec![0.3, -1.2, 2.0, 0.1],
            vec![0.2, -0.9, 1.1, 0.05],
            vec![0.7, 0.2, 0.4, 0.9],
        );
        assert_eq!(s.file_name(), "stage2_block1_lct.csv");
        let csv = s.to_csv();
        assert_eq!(csv.lines().count(), 4 + 2);
        let before: Vec<f64> = csv
            .lines()
            .skip(1)
            .take(4)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        assert!(before.windows(2).all(|w| w[0] <= w[1]));
        let back = BlockStats::from_csv(&s.file_name(), &csv).unwrap();
        assert_eq!(back.id, s.id);
        assert_eq!(back.sort_order, s.sort_order);
        for (a, b) in back.delta.iter().zip(&s.delta) {
            assert!((a - b).abs() <= 5e-9 * b.abs().max(1e-300));
        }
    }

    #[test]
    fn running_mean_single_sample() {
        let mut m = RunningMean::new(2);
        m.push([3.5, -1.0]);
        assert_eq!(m.into_mean(), vec![3.5, -1.0]);
    }
}
