//! Model configuration: named variants, ladder toggles, and the text
//! config-file format shared with the CLI.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::layout::InputExtents;

/// Activation recorded as metadata: gelu, tanh approximation.
pub const ACTIVATION: &str = "gelu-tanh";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMode {
    /// Local attention inside mask units in the first two stages.
    MaskUnit,
    /// Global attention with pooled K/V in the first two stages.
    KvPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKernel {
    /// Kernel equal to stride (non-overlapping windows).
    EqualStride,
    /// 3x3 kernel, stride 2, pad 1, applied separately per unit.
    Overlap3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LadderConfig {
    pub attn_mode: AttnMode,
    pub pool_kernel: PoolKernel,
    /// Extra 3x3 stride-1 maxpools on q, k, v in every attention.
    pub stride1_pools: bool,
    /// Add the (pooled) query to the attention output.
    pub q_attn_residual: bool,
}

impl Default for LadderConfig {
    fn default() -> Self {
        LadderConfig {
            attn_mode: AttnMode::MaskUnit,
            pool_kernel: PoolKernel::EqualStride,
            stride1_pools: false,
            q_attn_residual: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HieraConfig {
    pub channels: [usize; 4],
    pub blocks: [usize; 4],
    pub heads: [usize; 4],
    pub mlp_ratio: f64,
    pub drop_path_max: f64,
    pub ladder: LadderConfig,
    /// Drops the final stage-transition pool so the last stage keeps the
    /// previous resolution; required when masking.
    pub pretrain_mode: bool,
    pub num_classes: usize,
    pub norm_eps: f64,
    pub input: InputExtents,
}

impl Default for HieraConfig {
    fn default() -> Self {
        Variant::B.config()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    T,
    S,
    B,
    BPlus,
    L,
    H,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::T,
        Variant::S,
        Variant::B,
        Variant::BPlus,
        Variant::L,
        Variant::H,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::T => "T",
            Variant::S => "S",
            Variant::B => "B",
            Variant::BPlus => "B+",
            Variant::L => "L",
            Variant::H => "H",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "T" | "t" => Ok(Variant::T),
            "S" | "s" => Ok(Variant::S),
            "B" | "b" => Ok(Variant::B),
            "B+" | "b+" => Ok(Variant::BPlus),
            "L" | "l" => Ok(Variant::L),
            "H" | "h" => Ok(Variant::H),
            _ => Err(Error::Config(format!(
                "unknown variant {s:?}; valid: T, S, B, B+, L, H"
            ))),
        }
    }

    pub fn config(self) -> HieraConfig {
        let (channels, blocks, heads) = match self {
            Variant::T => ([96, 192, 384, 768], [1, 2, 7, 2], [1, 2, 4, 8]),
            Variant::S => ([96, 192, 384, 768], [1, 2, 11, 2], [1, 2, 4, 8]),
            Variant::B => ([96, 192, 384, 768], [2, 3, 16, 3], [1, 2, 4, 8]),
            Variant::BPlus => ([112, 224, 448, 896], [2, 3, 16, 3], [2, 4, 8, 16]),
            Variant::L => ([144, 288, 576, 1152], [2, 6, 36, 4], [2, 4, 8, 16]),
            Variant::H => ([256, 512, 1024, 2048], [2, 6, 36, 4], [4, 8, 16, 32]),
        };
        HieraConfig {
            channels,
            blocks,
            heads,
            mlp_ratio: 4.0,
            drop_path_max: 0.0,
            ladder: LadderConfig::default(),
            pretrain_mode: false,
            num_classes: 1000,
            norm_eps: 1e-6,
            input: InputExtents::image(224, 224),
        }
    }
}

impl HieraConfig {
    /// Small config for tests and smoke runs: one block per stage, narrow.
    pub fn tiny(input: InputExtents) -> HieraConfig {
        HieraConfig {
            channels: [8, 16, 32, 64],
            blocks: [1, 1, 1, 1],
            heads: [1, 2, 2, 4],
            mlp_ratio: 4.0,
            drop_path_max: 0.0,
            ladder: LadderConfig::default(),
            pretrain_mode: false,
            num_classes: 4,
            norm_eps: 1e-6,
            input,
        }
    }

    pub fn total_blocks(&self) -> usize {
        self.blocks.iter().sum()
    }

    /// Q-pool stride at the transition into 0-based stage `s` (1, 2 or 3).
    pub fn transition_stride(&self, s: usize) -> usize {
        if self.pretrain_mode && s == 3 {
            1
        } else {
            2
        }
    }

    /// Per-unit spatial extent (tokens per axis) at the input of stage `s`,
    /// starting from 8 at stage 0.
    pub fn unit_extent_at(&self, s: usize) -> usize {
        let mut e = 8;
        for t in 1..=s {
            e /= self.transition_stride(t);
        }
        e
    }

    pub fn validate(&self) -> Result<()> {
        for s in 0..4 {
            if self.blocks[s] == 0 {
                return Err(Error::Config(format!("stage {} has zero blocks", s + 1)));
            }
            if self.heads[s] == 0 || self.channels[s] % self.heads[s] != 0 {
                return Err(Error::Config(format!(
                    "stage {}: channels {} not divisible by heads {}",
                    s + 1,
                    self.channels[s],
                    self.heads[s]
                )));
            }
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config(format!("mlp_ratio {} must be > 0", self.mlp_ratio)));
        }
        if !(0.0..=1.0).contains(&self.drop_path_max) {
            return Err(Error::Config(format!(
                "drop_path_max {} not in [0, 1]",
                self.drop_path_max
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        Ok(())
    }

    /// Checks the named-variant structure: widths and heads double at every
    /// stage transition.
    pub fn validate_doubling(&self) -> Result<()> {
        for s in 1..4 {
            if self.channels[s] != 2 * self.channels[s - 1] {
                return Err(Error::Config(format!(
                    "channels do not double at stage {}: {} -> {}",
                    s + 1,
                    self.channels[s - 1],
                    self.channels[s]
                )));
            }
            if self.heads[s] != 2 * self.heads[s - 1] {
                return Err(Error::Config(format!(
                    "heads do not double at stage {}: {} -> {}",
                    s + 1,
                    self.heads[s - 1],
                    self.heads[s]
                )));
            }
        }
        Ok(())
    }
}

/// Parses the line-oriented config format: `key value...` per line, `#`
/// comments. Returns keys in a map; consumers pull what they recognize.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, Vec<String>>> {
    let mut map = BTreeMap::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap().to_string();
        let vals: Vec<String> = parts.map(|p| p.to_string()).collect();
        if vals.is_empty() {
            return Err(Error::Config(format!(
                "line {}: key {key:?} has no value",
                ln + 1
            )));
        }
        map.insert(key, vals);
    }
    Ok(map)
}

fn parse_one<T: std::str::FromStr>(key: &str, vals: &[String]) -> Result<T> {
    if vals.len() != 1 {
        return Err(Error::Config(format!("{key}: expected one value")));
    }
    vals[0]
        .parse()
        .map_err(|_| Error::Config(format!("{key}: bad value {:?}", vals[0])))
}

fn parse_four(key: &str, vals: &[String]) -> Result<[usize; 4]> {
    if vals.len() != 4 {
        return Err(Error::Config(format!("{key}: expected four values")));
    }
    let mut out = [0usize; 4];
    for (o, v) in out.iter_mut().zip(vals) {
        *o = v
            .parse()
            .map_err(|_| Error::Config(format!("{key}: bad value {v:?}")))?;
    }
    Ok(out)
}

fn parse_bool(key: &str, vals: &[String]) -> Result<bool> {
    match vals {
        [v] if v == "true" || v == "1" || v == "on" => Ok(true),
        [v] if v == "false" || v == "0" || v == "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false"))),
    }
}

impl HieraConfig {
    /// Builds a config from parsed key/value lines. A `variant` key seeds the
    /// named preset; explicit keys override it.
    pub fn from_map(map: &BTreeMap<String, Vec<String>>) -> Result<HieraConfig> {
        let mut cfg = match map.get("variant") {
            Some(v) => Variant::parse(&v.join(""))?.config(),
            None => Variant::B.config(),
        };
        for (key, vals) in map {
            match key.as_str() {
                "variant" => {}
                "channels" => cfg.channels = parse_four(key, vals)?,
                "blocks" => cfg.blocks = parse_four(key, vals)?,
                "heads" => cfg.heads = parse_four(key, vals)?,
                "mlp_ratio" => cfg.mlp_ratio = parse_one(key, vals)?,
                "drop_path_max" => cfg.drop_path_max = parse_one(key, vals)?,
                "attn_mode" => cfg.ladder.attn_mode = parse_attn_mode(&vals[0])?,
                "pool_kernel" => cfg.ladder.pool_kernel = parse_pool_kernel(&vals[0])?,
                "stride1_pools" => cfg.ladder.stride1_pools = parse_bool(key, vals)?,
                "q_attn_residual" => cfg.ladder.q_attn_residual = parse_bool(key, vals)?,
                "pretrain_mode" => cfg.pretrain_mode = parse_bool(key, vals)?,
                "num_classes" => cfg.num_classes = parse_one(key, vals)?,
                "norm_eps" => cfg.norm_eps = parse_one(key, vals)?,
                "input" => cfg.input = parse_input(vals)?,
                _ => {} // other sections' keys
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=val` ladder overrides, comma- or space-separated.
    pub fn apply_ladder(&mut self, spec: &str) -> Result<()> {
        for item in spec.split([',', ' ']).filter(|s| !s.is_empty()) {
            let (key, val) = item.split_once('=').ok_or_else(|| {
                Error::Config(format!("ladder item {item:?} is not KEY=VAL"))
            })?;
            let vals = vec![val.to_string()];
            match key {
                "attn_mode" => self.ladder.attn_mode = parse_attn_mode(val)?,
                "pool_kernel" => self.ladder.pool_kernel = parse_pool_kernel(val)?,
                "stride1_pools" => self.ladder.stride1_pools = parse_bool(key, &vals)?,
                "q_attn_residual" => self.ladder.q_attn_residual = parse_bool(key, &vals)?,
                _ => {
                    return Err(Error::Config(format!(
                        "unknown ladder key {key:?}; valid: attn_mode, pool_kernel, \
                         stride1_pools, q_attn_residual"
                    )))
                }
            }
        }
        Ok(())
    }
}

fn parse_attn_mode(v: &str) -> Result<AttnMode> {
    match v {
        "mu_attn" => Ok(AttnMode::MaskUnit),
        "kv_pool" => Ok(AttnMode::KvPool),
        _ => Err(Error::Config(format!(
            "attn_mode {v:?}; valid: mu_attn, kv_pool"
        ))),
    }
}

fn parse_pool_kernel(v: &str) -> Result<PoolKernel> {
    match v {
        "equal_stride" => Ok(PoolKernel::EqualStride),
        "overlap3" => Ok(PoolKernel::Overlap3),
        _ => Err(Error::Config(format!(
            "pool_kernel {v:?}; valid: equal_stride, overlap3"
        ))),
    }
}

fn parse_input(vals: &[String]) -> Result<InputExtents> {
    match vals {
        [kind, h, w] if kind == "image" => Ok(InputExtents::image(
            parse_one("input height", &[h.clone()])?,
            parse_one("input width", &[w.clone()])?,
        )),
        [kind, f, h, w] if kind == "video" => Ok(InputExtents::video(
            parse_one("input frames", &[f.clone()])?,
            parse_one("input height", &[h.clone()])?,
            parse_one("input width", &[w.clone()])?,
        )),
        _ => Err(Error::Config(
            "input: expected `image H W` or `video F H W`".into(),
        )),
    }
}
