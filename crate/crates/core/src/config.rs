//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments start with '#'
//! preset = resnet-mini
//! attention.kind = lct
//! attention.groups = 64
//! train.epochs = 10
//! train.schedule = 6:0.1, 9:0.1
//! data.source = synth
//! ```
//!
//! Keys are dotted lowercase paths; each may appear once and unknown keys are
//! rejected. A network can be spelled out instead of (or on top of) a preset
//! with `network.*` keys, see [`spec_to_config`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::analysis::BlockSelector;
use crate::attention::{AttentionConfig, AttentionKind, InitMode};
use crate::backbone::{BlockKind, NetworkSpec, StageSpec, StemSpec};
use crate::data::Augment;
use crate::error::{Error, Result};
use crate::nn::DecayPolicy;
use crate::train::{step_schedule, TrainConfig};

/// Parsed `key = value` pairs, each remembering its source line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigMap {
    entries: BTreeMap<String, (String, usize)>,
}

fn valid_key(k: &str) -> bool {
    !k.is_empty()
        && k.split('.').all(|part| {
            !part.is_empty()
                && part
                    .chars()
                    .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-')
        })
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {line_no}"), "expected `key = value`")
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !valid_key(k) {
                return Err(Error::config(
                    format!("line {line_no}"),
                    format!("invalid key `{k}`"),
                ));
            }
            if let Some((_, first)) = entries.insert(k.to_string(), (v.to_string(), line_no)) {
                return Err(Error::config(
                    k,
                    format!("duplicate key on lines {first} and {line_no}"),
                ));
            }
        }
        Ok(ConfigMap { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), (value.into(), 0));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(v, _)| v)
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.take_str(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::config(key, format!("cannot parse `{v}`: {e}"))),
        }
    }

    fn take_list<T: FromStr>(&mut self, key: &str, len: usize) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(v) = self.take_str(key) else {
            return Ok(None);
        };
        let items: Vec<&str> = v.split(',').map(str::trim).collect();
        if items.len() != len {
            return Err(Error::config(
                key,
                format!("expected {len} comma-separated values, got `{v}`"),
            ));
        }
        items
            .iter()
            .map(|s| {
                s.parse()
                    .map_err(|e| Error::config(key, format!("cannot parse `{s}`: {e}")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Fails on the first key that no reader consumed.
    fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (_, line))) => {
                let at = if line > 0 {
                    format!(" (line {line})")
                } else {
                    String::new()
                };
                Err(Error::config(k, format!("unknown key{at}")))
            }
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(
            key,
            format!("expected true/false, got `{v}`"),
        )),
    }
}

fn take_bool(map: &mut ConfigMap, key: &str) -> Result<Option<bool>> {
    map.take_str(key).map(|v| parse_bool(key, &v)).transpose()
}

/// Serialises `spec` as `network.*` and `attention.*` keys.
pub fn spec_to_config(spec: &NetworkSpec) -> String {
    let mut out = String::new();
    let s = &spec.stem;
    let _ = writeln!(out, "network.name = {}", spec.name);
    let _ = writeln!(
        out,
        "network.stem = {}, {}, {}, {}",
        s.channels, s.kernel, s.stride, s.pool
    );
    for (i, st) in spec.stages.iter().enumerate() {
        let _ = writeln!(
            out,
            "network.stage.{} = {}, {}, {}, {}",
            i + 1,
            st.blocks,
            st.out_channels,
            st.kind.as_str(),
            st.stride
        );
    }
    let _ = writeln!(out, "network.classes = {}", spec.classes);
    let [c, h, w] = spec.input;
    let _ = writeln!(out, "network.input = {c}, {h}, {w}");
    let a = &spec.attention;
    let _ = writeln!(out, "attention.kind = {}", a.kind);
    let _ = writeln!(out, "attention.reduction = {}", a.reduction);
    let _ = writeln!(out, "attention.groups = {}", a.groups);
    let _ = writeln!(out, "attention.epsilon = {:e}", a.epsilon);
    let _ = writeln!(out, "attention.init = {}", a.init.as_str());
    let _ = writeln!(out, "attention.skip_normalize = {}", a.skip_normalize);
    let _ = writeln!(out, "attention.skip_transform = {}", a.skip_transform);
    out
}

/// Applies `network.*` and `attention.*` keys of `map` on top of `base`.
fn take_spec(map: &mut ConfigMap, base: NetworkSpec) -> Result<NetworkSpec> {
    let mut spec = base;
    if let Some(n) = map.take_str("network.name") {
        spec.name = n;
    }
    if let Some(v) = map.take_str("network.stem") {
        let f: Vec<&str> = v.split(',').map(str::trim).collect();
        let bad = || {
            Error::config(
                "network.stem",
                format!("expected `channels, kernel, stride, pool`, got `{v}`"),
            )
        };
        if f.len() != 4 {
            return Err(bad());
        }
        spec.stem = StemSpec {
            channels: f[0].parse().map_err(|_| bad())?,
            kernel: f[1].parse().map_err(|_| bad())?,
            stride: f[2].parse().map_err(|_| bad())?,
            pool: parse_bool("network.stem", f[3])?,
        };
    }
    let stage_keys: Vec<String> = map
        .entries
        .keys()
        .filter(|k| k.starts_with("network.stage."))
        .cloned()
        .collect();
    if !stage_keys.is_empty() {
        let mut stages: Vec<(usize, StageSpec)> = Vec::new();
        for key in stage_keys {
            let idx: usize = key["network.stage.".len()..]
                .parse()
                .map_err(|_| Error::config(&key, "stage index must be a positive integer"))?;
            let v = map.take_str(&key).expect("listed above");
            let f: Vec<&str> = v.split(',').map(str::trim).collect();
            let bad = || {
                Error::config(
                    &key,
                    format!("expected `blocks, channels, basic|bottleneck, stride`, got `{v}`"),
                )
            };
            if f.len() != 4 {
                return Err(bad());
            }
            stages.push((
                idx,
                StageSpec {
                    blocks: f[0].parse().map_err(|_| bad())?,
                    out_channels: f[1].parse().map_err(|_| bad())?,
                    kind: f[2].parse::<BlockKind>().map_err(|_| bad())?,
                    stride: f[3].parse().map_err(|_| bad())?,
                },
            ));
        }
        stages.sort_by_key(|(i, _)| *i);
        if stages.iter().enumerate().any(|(pos, (i, _))| *i != pos + 1) {
            return Err(Error::config(
                "network.stage",
                "stages must be numbered 1, 2, 3, ... without gaps",
            ));
        }
        spec.stages = stages.into_iter().map(|(_, s)| s).collect();
    }
    if let Some(c) = map.take("network.classes")? {
        spec.classes = c;
    }
    if let Some(v) = map.take_list::<usize>("network.input", 3)? {
        spec.input = [v[0], v[1], v[2]];
    }
    let a = &mut spec.attention;
    if let Some(k) = map.take::<AttentionKind>("attention.kind")? {
        a.kind = k;
    }
    if let Some(r) = map.take("attention.reduction")? {
        a.reduction = r;
    }
    if let Some(g) = map.take("attention.groups")? {
        a.groups = g;
    }
    if let Some(e) = map.take("attention.epsilon")? {
        a.epsilon = e;
    }
    if let Some(i) = map.take::<InitMode>("attention.init")? {
        a.init = i;
    }
    if let Some(b) = take_bool(map, "attention.skip_normalize")? {
        a.skip_normalize = b;
    }
    if let Some(b) = take_bool(map, "attention.skip_transform")? {
        a.skip_transform = b;
    }
    Ok(spec)
}

/// Parses a network spec from text holding only `network.*`/`attention.*`
/// keys (plus an optional `preset` to start from).
pub fn spec_from_config(text: &str) -> Result<NetworkSpec> {
    let mut map = ConfigMap::parse(text)?;
    let base = match map.take_str("preset") {
        Some(p) => preset(&p)?,
        None => NetworkSpec::resnet_mini(),
    };
    let spec = take_spec(&mut map, base)?;
    map.finish()?;
    spec.validate()?;
    Ok(spec)
}

fn preset(name: &str) -> Result<NetworkSpec> {
    NetworkSpec::preset(name).ok_or_else(|| {
        Error::config(
            "preset",
            format!(
                "unknown preset `{name}` (expected one of {})",
                NetworkSpec::PRESETS.join(", ")
            ),
        )
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Procedural training set plus a held-out split from a derived seed.
    Synth {
        seed: u64,
        n: usize,
        classes: usize,
        val_n: usize,
    },
    /// A CIFAR-10 binary file, or a directory of the standard batch files.
    Cifar10 { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth {
            seed: 1,
            n: 2000,
            classes: 10,
            val_n: 200,
        }
    }
}

/// Everything a subcommand needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub spec: NetworkSpec,
    pub train: TrainConfig,
    pub data: DataSource,
    pub seed: u64,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub analyze_blocks: BlockSelector,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            spec: NetworkSpec::resnet_mini(),
            train: TrainConfig::default(),
            data: DataSource::default(),
            seed: 1,
            out: PathBuf::from("runs/latest"),
            checkpoint: None,
            analyze_blocks: BlockSelector::All,
        }
    }
}

fn parse_schedule(v: &str) -> Result<Vec<(usize, f64)>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|item| {
            let bad = || {
                Error::config(
                    "train.schedule",
                    format!("expected `epoch:factor`, got `{item}`"),
                )
            };
            let (e, f) = item.trim().split_once(':').ok_or_else(bad)?;
            Ok((
                e.trim().parse().map_err(|_| bad())?,
                f.trim().parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

impl RunConfig {
    /// Builds a configuration from `map`, rejecting keys it does not know.
    pub fn from_map(mut map: ConfigMap) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let base = match map.take_str("preset") {
            Some(p) => preset(&p)?,
            None => cfg.spec.clone(),
        };
        cfg.spec = take_spec(&mut map, base)?;
        if let Some(s) = map.take("seed")? {
            cfg.seed = s;
        }
        if let Some(o) = map.take_str("out") {
            cfg.out = PathBuf::from(o);
        }
        cfg.checkpoint = map.take_str("checkpoint").map(PathBuf::from);
        if let Some(b) = map.take::<BlockSelector>("analyze.blocks")? {
            cfg.analyze_blocks = b;
        }

        let t = &mut cfg.train;
        t.seed = cfg.seed;
        if let Some(v) = map.take("train.lr0")? {
            t.lr0 = v;
        }
        if let Some(v) = map.take("train.momentum")? {
            t.momentum = v;
        }
        if let Some(v) = map.take("train.weight_decay")? {
            t.weight_decay = v;
        }
        if let Some(v) = map.take("train.epochs")? {
            t.epochs = v;
        }
        if let Some(v) = map.take("train.batch_size")? {
            t.batch_size = v;
        }
        t.schedule = match map.take_str("train.schedule") {
            Some(s) => parse_schedule(&s)?,
            None => step_schedule(t.epochs, &[0.6, 0.9], 0.1),
        };
        let hflip = take_bool(&mut map, "train.hflip")?;
        let pad_crop = take_bool(&mut map, "train.pad_crop")?;
        if let Some(p) = map.take_str("train.decay_policy") {
            t.decay_policy = match p.as_str() {
                "all" => DecayPolicy::All,
                "weights-only" => DecayPolicy::WeightsOnly,
                other => {
                    return Err(Error::config(
                        "train.decay_policy",
                        format!("expected all|weights-only, got `{other}`"),
                    ))
                }
            };
        }

        let source = map.take_str("data.source");
        let path = map.take_str("data.path");
        let synth_seed = map.take::<u64>("data.seed")?;
        let n = map.take::<usize>("data.synth_n")?;
        let classes = map.take::<usize>("data.synth_classes")?;
        let val_n = map.take::<usize>("data.val_n")?;
        cfg.data = match (source.as_deref(), path) {
            (Some("cifar10"), Some(p)) | (None, Some(p)) => DataSource::Cifar10 {
                path: PathBuf::from(p),
            },
            (Some("cifar10"), None) => {
                return Err(Error::config(
                    "data.path",
                    "required for data.source = cifar10",
                ))
            }
            (Some("synth") | None, None) => {
                let DataSource::Synth {
                    seed: s0,
                    n: n0,
                    classes: _,
                    val_n: v0,
                } = DataSource::default()
                else {
                    unreachable!("default is synthetic")
                };
                DataSource::Synth {
                    seed: synth_seed.unwrap_or(s0),
                    n: n.unwrap_or(n0),
                    classes: classes.unwrap_or(cfg.spec.classes),
                    val_n: val_n.unwrap_or(v0),
                }
            }
            (Some("synth"), Some(_)) => {
                return Err(Error::config(
                    "data.path",
                    "not used by data.source = synth",
                ))
            }
            (Some(other), _) => {
                return Err(Error::config(
                    "data.source",
                    format!("expected synth|cifar10, got `{other}`"),
                ))
            }
        };
        // Photographs get crop and flip by default. Synthetic classes are
        // defined by pattern orientation, which a mirror image would change.
        let photos = matches!(cfg.data, DataSource::Cifar10 { .. });
        cfg.train.augment = Augment {
            hflip: hflip.unwrap_or(photos),
            pad_crop: pad_crop.unwrap_or(photos),
        };
        map.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_map(ConfigMap::parse(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.train.validate()?;
        if let DataSource::Synth { classes, .. } = self.data {
            if classes != self.spec.classes {
                return Err(Error::config(
                    "data.synth_classes",
                    format!(
                        "{classes} classes but the network has {}",
                        self.spec.classes
                    ),
                ));
            }
        }
        Ok(())
    }

    /// The attention template, for convenience.
    pub fn attention(&self) -> &AttentionConfig {
        &self.spec.attention
    }
}
