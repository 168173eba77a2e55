//! Model scale presets, validation and the flat `key = value` config format.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PRESETS: &str = include_str!("presets.toml");

pub const PRESET_NAMES: [&str; 11] = [
    "swinv2-tiny",
    "swinv2-small",
    "swinv2-base",
    "swin-tiny",
    "swin-small",
    "swin-base",
    "pvt-tiny",
    "pvt-small",
    "pvt-medium",
    "pvt-large",
    "nano",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockType {
    Swin,
    Swinv2,
    Pvt,
}

impl BlockType {
    pub fn is_windowed(self) -> bool {
        matches!(self, BlockType::Swin | BlockType::Swinv2)
    }
}

impl fmt::Display for BlockType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BlockType::Swin => "swin",
            BlockType::Swinv2 => "swinv2",
            BlockType::Pvt => "pvt",
        };
        f.write_str(s)
    }
}

/// Architecture hyperparameters.
///
/// Encoder stage `i` (0-based here) has stride `2^(i+2)`. Decoder stages 1-4
/// mirror the encoder and are derived from it; only the last decoder stage is
/// stored explicitly. `sra_reduction` and `ffn_expansion` belong to the last
/// decoder stage, the per-stage encoder values live in the `enc_*` lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub block_type: BlockType,
    pub enc_depths: Vec<usize>,
    pub enc_channels: Vec<usize>,
    pub enc_heads: Vec<usize>,
    pub enc_ffn_expansions: Vec<f64>,
    pub enc_sra_reductions: Vec<usize>,
    pub dec_last_depth: usize,
    pub dec_last_in_channels: usize,
    pub dec_last_out_channels: usize,
    pub dec_last_heads: usize,
    pub window_size: usize,
    pub sra_reduction: usize,
    pub ffn_expansion: f64,
    pub input_size: usize,
}

/// Per-stage block settings used to build one stage of blocks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageSpec {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_expansion: f64,
    pub sra_reduction: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn mentions(&self, field: &str) -> bool {
        self.violations.iter().any(|v| v.field == field)
    }

    fn push(&mut self, field: &'static str, rule: impl Into<String>) {
        self.violations.push(Violation { field, rule: rule.into() })
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            return Ok(());
        }
        let msg = self.violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
        Err(Error::Config(msg))
    }
}

pub fn preset(name: &str) -> Result<ModelConfig> {
    let table: BTreeMap<String, ModelConfig> =
        toml::from_str(PRESETS).map_err(|e| Error::Config(format!("preset table: {e}")))?;
    table.get(name).cloned().ok_or_else(|| Error::UnknownPreset(name.to_string()))
}

impl ModelConfig {
    pub fn validate(&self) -> ValidationReport {
        validate(self)
    }

    /// Encoder stage spec, `stage` in 0..4.
    pub fn encoder_stage(&self, stage: usize) -> StageSpec {
        StageSpec {
            depth: self.enc_depths[stage],
            dim: self.enc_channels[stage],
            heads: self.enc_heads[stage],
            ffn_expansion: self.enc_ffn_expansions[stage],
            sra_reduction: self.enc_sra_reductions[stage],
        }
    }

    /// Decoder stage spec, `stage` in 0..5. Stages 0..4 mirror encoder stage
    /// `3 - stage`; the block dimension is the stage's input width.
    pub fn decoder_stage(&self, stage: usize) -> StageSpec {
        if stage < 4 {
            let mirror = self.encoder_stage(3 - stage);
            StageSpec { dim: self.decoder_input_channels(stage), ..mirror }
        } else {
            StageSpec {
                depth: self.dec_last_depth,
                dim: self.dec_last_in_channels,
                heads: self.dec_last_heads,
                ffn_expansion: self.ffn_expansion,
                sra_reduction: self.sra_reduction,
            }
        }
    }

    /// Output channels C_1..C_5 of the five decoder patch-splitting layers.
    pub fn decoder_channels(&self) -> [usize; 5] {
        let c = &self.enc_channels;
        [c[2], c[1], c[0], self.dec_last_in_channels, self.dec_last_out_channels]
    }

    /// Width of the features entering decoder stage `stage`.
    pub fn decoder_input_channels(&self, stage: usize) -> usize {
        if stage == 0 {
            self.enc_channels[3]
        } else {
            self.decoder_channels()[stage - 1]
        }
    }

    /// Flat `key = value` rendering, one field per line, in declaration order.
    pub fn to_flat_string(&self) -> String {
        let value = toml::Value::try_from(self).expect("config is always representable");
        let mut out = String::new();
        write_flat(&mut out, "", &value);
        out
    }

    pub fn from_flat_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Writes nested tables as dotted keys.
pub(crate) fn write_flat(out: &mut String, prefix: &str, value: &toml::Value) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                write_flat(out, &key, v);
            }
        }
        v => {
            out.push_str(prefix);
            out.push_str(" = ");
            out.push_str(&v.to_string());
            out.push('\n');
        }
    }
}

pub fn validate(cfg: &ModelConfig) -> ValidationReport {
    let mut r = ValidationReport::default();

    let lists: [(&'static str, &[usize]); 4] = [
        ("enc_depths", &cfg.enc_depths),
        ("enc_channels", &cfg.enc_channels),
        ("enc_heads", &cfg.enc_heads),
        ("enc_sra_reductions", &cfg.enc_sra_reductions),
    ];
    let mut lists_ok = cfg.enc_ffn_expansions.len() == 4;
    if !lists_ok {
        r.push("enc_ffn_expansions", "must list 4 stages");
    } else if cfg.enc_ffn_expansions.iter().any(|&e| !(e > 0.0)) {
        r.push("enc_ffn_expansions", "must be positive");
    }
    for (field, list) in lists {
        if list.len() != 4 {
            r.push(field, "must list 4 stages");
            lists_ok = false;
        } else if list.iter().any(|&v| v == 0) {
            r.push(field, "must be positive");
        }
    }
    for (field, v) in [
        ("dec_last_depth", cfg.dec_last_depth),
        ("dec_last_in_channels", cfg.dec_last_in_channels),
        ("dec_last_out_channels", cfg.dec_last_out_channels),
        ("dec_last_heads", cfg.dec_last_heads),
        ("window_size", cfg.window_size),
        ("sra_reduction", cfg.sra_reduction),
    ] {
        if v == 0 {
            r.push(field, "must be positive");
        }
    }
    if !(cfg.ffn_expansion > 0.0) {
        r.push("ffn_expansion", "must be positive");
    }

    if cfg.input_size == 0 || cfg.input_size % 32 != 0 {
        r.push("input_size", "input_size mod 32 must be 0");
    } else if cfg.block_type.is_windowed() && cfg.input_size / 4 < cfg.window_size {
        // deeper stages smaller than a window fall back to one window per map
        r.push("window_size", "window_size must not exceed the stride-4 map (input_size / 4)");
    }

    if !lists_ok {
        return r;
    }

    for i in 0..4 {
        if cfg.enc_heads[i] > 0 && cfg.enc_channels[i] % cfg.enc_heads[i] != 0 {
            r.push("enc_heads", format!("stage {} channels not divisible by heads", i + 1));
        }
    }
    if cfg.dec_last_heads > 0 && cfg.dec_last_in_channels % cfg.dec_last_heads != 0 {
        r.push("dec_last_heads", "dec_last_in_channels not divisible by heads");
    }

    // every patch-splitting layer consumes 4 sub-tokens per token
    let dec = cfg.decoder_channels();
    let split_inputs = [cfg.enc_channels[3], dec[0], dec[1], dec[2], dec[3]];
    for (stage, c) in split_inputs.iter().enumerate() {
        if c % 4 != 0 {
            let field = if stage == 4 { "dec_last_in_channels" } else { "enc_channels" };
            r.push(field, format!("decoder stage {} splits {} channels, not divisible by 4", stage + 1, c));
        }
    }

    if cfg.block_type.is_windowed() {
        let c3 = dec[2];
        if c3 % 2 != 0 || cfg.dec_last_in_channels != c3 / 2 {
            r.push("dec_last_in_channels", format!("must equal C3dec/2 ({c3}/2)"));
        }
        if c3 % 4 != 0 || cfg.dec_last_out_channels != c3 / 4 {
            r.push("dec_last_out_channels", format!("must equal C3dec/4 ({c3}/4)"));
        }
    }
    r
}
