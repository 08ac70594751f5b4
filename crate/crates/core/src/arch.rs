//! Architecture specifications and the `key = value` config format.

use std::fmt::{self, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::graphdepth::{KernelOffsets, PaddingMode, SpatialGrid};
use crate::nncore::activation::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Mlp,
    Cnn1d,
    Cnn2d,
    ResNet,
    Transformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    Pre,
    Post,
    None,
}

/// Residual branch template.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Dense,
    Conv,
}

macro_rules! str_enum {
    ($t:ty { $($s:literal => $v:expr),* $(,)? }) => {
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($s => Ok($v),)*
                    _ => Err(format!("unknown {} `{s}`", stringify!($t))),
                }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $v { return f.write_str($s); })*
                unreachable!()
            }
        }
    };
}

str_enum!(Family { "mlp" => Family::Mlp, "cnn1d" => Family::Cnn1d, "cnn2d" => Family::Cnn2d,
    "resnet" => Family::ResNet, "transformer" => Family::Transformer });
str_enum!(NormPlacement { "pre" => NormPlacement::Pre, "post" => NormPlacement::Post, "none" => NormPlacement::None });
str_enum!(Branch { "dense" => Branch::Dense, "conv" => Branch::Conv });

/// Network template. Which fields matter depends on `family`:
///
/// * mlp: `depth` units of width `width`.
/// * cnn1d / cnn2d: `depth` conv units with `channels` channels on `grid`.
/// * resnet: `plain_units` plain units (the first is the stem) then `blocks`
///   residual blocks; `branch` selects dense (`width`) or conv (`channels`).
/// * transformer: `plain_units` in {0, 1} counts the embedding stem, then
///   `blocks` blocks of two residual units each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub family: Family,
    pub depth: usize,
    pub blocks: usize,
    pub plain_units: usize,
    pub width: usize,
    pub channels: usize,
    pub grid: Vec<usize>,
    pub kernel: Vec<usize>,
    pub activation: Activation,
    pub padding: PaddingMode,
    pub norm_placement: NormPlacement,
    pub heads: usize,
    pub tokens: usize,
    pub input_dim: usize,
    pub outputs: usize,
    pub branch: Branch,
    pub ffn_mult: usize,
    pub ln_eps: f64,
    pub residual_c: f64,
    pub seed: u64,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            family: Family::Mlp,
            depth: 4,
            blocks: 2,
            plain_units: 1,
            width: 64,
            channels: 32,
            grid: vec![8],
            kernel: vec![3],
            activation: Activation::Relu,
            padding: PaddingMode::Circular,
            norm_placement: NormPlacement::Pre,
            heads: 1,
            tokens: 8,
            input_dim: 32,
            outputs: 10,
            branch: Branch::Dense,
            ffn_mult: 4,
            ln_eps: 1e-5,
            residual_c: 1.0,
            seed: 0,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "family",
    "depth",
    "blocks",
    "plain_units",
    "width",
    "channels",
    "grid",
    "kernel",
    "activation",
    "padding",
    "norm_placement",
    "heads",
    "tokens",
    "seed",
    "input_dim",
    "outputs",
    "branch",
    "ffn_mult",
    "ln_eps",
    "residual_c",
];

fn parse_dims(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(['x', ','])
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad dimension list `{v}`"))
        })
        .collect()
}

fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("bad value `{v}` for `{key}`"))
}

/// Splits `key = value` lines, skipping blanks and `#` comments.
pub fn config_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl ArchSpec {
    pub fn mlp(depth: usize, width: usize) -> Self {
        ArchSpec {
            family: Family::Mlp,
            depth,
            width,
            ..Default::default()
        }
    }

    pub fn cnn1d(depth: usize, channels: usize, grid: usize) -> Self {
        ArchSpec {
            family: Family::Cnn1d,
            depth,
            channels,
            grid: vec![grid],
            kernel: vec![3],
            ..Default::default()
        }
    }

    pub fn resnet(plain_units: usize, blocks: usize, width: usize) -> Self {
        ArchSpec {
            family: Family::ResNet,
            depth: plain_units + blocks,
            plain_units,
            blocks,
            width,
            ..Default::default()
        }
    }

    pub fn transformer(blocks: usize, stem_units: usize, width: usize) -> Self {
        ArchSpec {
            family: Family::Transformer,
            depth: stem_units + 2 * blocks,
            blocks,
            plain_units: stem_units,
            width,
            activation: Activation::Gelu,
            ..Default::default()
        }
    }

    /// Applies one config entry. Unknown keys are errors.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "family" => self.family = v.parse()?,
            "depth" => self.depth = num(key, v)?,
            "blocks" => self.blocks = num(key, v)?,
            "plain_units" => self.plain_units = num(key, v)?,
            "width" => self.width = num(key, v)?,
            "channels" => self.channels = num(key, v)?,
            "grid" => self.grid = parse_dims(v)?,
            "kernel" => self.kernel = parse_dims(v)?,
            "activation" => self.activation = v.parse()?,
            "padding" => self.padding = v.parse()?,
            "norm_placement" => self.norm_placement = v.parse()?,
            "heads" => self.heads = num(key, v)?,
            "tokens" => self.tokens = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "input_dim" => self.input_dim = num(key, v)?,
            "outputs" => self.outputs = num(key, v)?,
            "branch" => self.branch = v.parse()?,
            "ffn_mult" => self.ffn_mult = num(key, v)?,
            "ln_eps" => self.ln_eps = num(key, v)?,
            "residual_c" => self.residual_c = num(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Applies entries in order; for resnet and transformer a `depth` entry is
    /// resolved into `blocks` after all keys are read.
    pub fn apply(&mut self, pairs: &[(usize, String, String)]) -> Result<()> {
        let mut depth = None;
        for (line, k, v) in pairs {
            self.set(k, v)
                .map_err(|msg| Error::Parse { line: *line, msg })?;
            if k == "depth" {
                depth = Some(self.depth);
            }
        }
        if matches!(self.family, Family::ResNet | Family::Transformer) {
            match depth {
                Some(d) => *self = self.with_depth(d)?,
                None => self.depth = self.effective_depth(),
            }
        }
        Ok(())
    }

    pub fn parse_config(text: &str) -> Result<Self> {
        let mut s = ArchSpec::default();
        s.apply(&config_pairs(text)?)?;
        s.fix_kernel_dims();
        s.validate()?;
        Ok(s)
    }

    /// A single kernel or grid size on a 2D family is replicated per axis.
    pub fn fix_kernel_dims(&mut self) {
        let nd = self.spatial_ndim();
        if nd == 2 {
            if self.kernel.len() == 1 {
                self.kernel = vec![self.kernel[0]; 2];
            }
            if self.grid.len() == 1 {
                self.grid = vec![self.grid[0]; 2];
            }
        }
    }

    pub fn to_config(&self) -> String {
        let dims = |d: &[usize]| {
            d.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join("x")
        };
        let mut s = String::new();
        let _ = writeln!(s, "family = {}", self.family);
        let _ = writeln!(s, "depth = {}", self.effective_depth());
        let _ = writeln!(s, "blocks = {}", self.blocks);
        let _ = writeln!(s, "plain_units = {}", self.plain_units);
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "grid = {}", dims(&self.grid));
        let _ = writeln!(s, "kernel = {}", dims(&self.kernel));
        let _ = writeln!(s, "activation = {}", self.activation);
        let _ = writeln!(s, "padding = {}", self.padding);
        let _ = writeln!(s, "norm_placement = {}", self.norm_placement);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "tokens = {}", self.tokens);
        let _ = writeln!(s, "input_dim = {}", self.input_dim);
        let _ = writeln!(s, "outputs = {}", self.outputs);
        let _ = writeln!(s, "branch = {}", self.branch);
        let _ = writeln!(s, "ffn_mult = {}", self.ffn_mult);
        let _ = writeln!(s, "ln_eps = {:?}", self.ln_eps);
        let _ = writeln!(s, "residual_c = {:?}", self.residual_c);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.family, Family::Cnn1d | Family::Cnn2d)
            || (self.family == Family::ResNet && self.branch == Branch::Conv)
    }

    fn spatial_ndim(&self) -> usize {
        match self.family {
            Family::Cnn2d => 2,
            Family::Cnn1d => 1,
            _ => self.grid.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: usize| {
            if v == 0 {
                config(format!("`{name}` must be >= 1"))
            } else {
                Ok(())
            }
        };
        pos("outputs", self.outputs)?;
        pos("input_dim", self.input_dim)?;
        match self.family {
            Family::Mlp => {
                pos("depth", self.depth)?;
                pos("width", self.width)?;
            }
            Family::Cnn1d | Family::Cnn2d => pos("depth", self.depth)?,
            Family::ResNet => {
                pos("blocks", self.blocks)?;
                pos("plain_units", self.plain_units)?;
                if self.branch == Branch::Dense {
                    pos("width", self.width)?;
                }
                if !(self.residual_c > 0.0) {
                    return config("`residual_c` must be positive");
                }
            }
            Family::Transformer => {
                pos("blocks", self.blocks)?;
                pos("width", self.width)?;
                pos("tokens", self.tokens)?;
                pos("heads", self.heads)?;
                pos("ffn_mult", self.ffn_mult)?;
                if self.plain_units > 1 {
                    return config("transformer `plain_units` (stem) must be 0 or 1");
                }
                if self.width % self.heads != 0 {
                    return config("`width` must be divisible by `heads`");
                }
                if !(self.ln_eps > 0.0) {
                    return config("`ln_eps` must be positive");
                }
            }
        }
        if self.is_conv() {
            pos("channels", self.channels)?;
            let nd = self.spatial_ndim();
            if self.grid.len() != nd || self.kernel.len() != nd {
                return config(format!(
                    "grid {:?} and kernel {:?} must have {nd} axes",
                    self.grid, self.kernel
                ));
            }
            SpatialGrid::new(&self.grid)?;
            KernelOffsets::centered(&self.kernel)?;
        }
        Ok(())
    }

    /// Number of depth units on the minimal path.
    pub fn effective_depth(&self) -> usize {
        match self.family {
            Family::Mlp | Family::Cnn1d | Family::Cnn2d => self.depth,
            Family::ResNet => self.plain_units + self.blocks,
            Family::Transformer => self.plain_units + 2 * self.blocks,
        }
    }

    /// Same template at effective depth `l` (resnet: blocks = l - plain units;
    /// transformer: blocks = (l - stem) / 2).
    pub fn with_depth(&self, l: usize) -> Result<Self> {
        let mut s = self.clone();
        match s.family {
            Family::Mlp | Family::Cnn1d | Family::Cnn2d => s.depth = l,
            Family::ResNet => {
                if l <= s.plain_units {
                    return config(format!(
                        "depth {l} leaves no residual blocks after {} plain units",
                        s.plain_units
                    ));
                }
                s.blocks = l - s.plain_units;
                s.depth = l;
            }
            Family::Transformer => {
                if l <= s.plain_units || (l - s.plain_units) % 2 != 0 {
                    return config(format!("transformer depth {l} is not stem + 2 * blocks"));
                }
                s.blocks = (l - s.plain_units) / 2;
                s.depth = l;
            }
        }
        Ok(s)
    }

    pub fn spatial_size(&self) -> usize {
        if self.is_conv() {
            self.grid.iter().product()
        } else {
            1
        }
    }

    /// Per-sample input shape (channels last for spatial inputs).
    pub fn input_shape(&self) -> Vec<usize> {
        match self.family {
            Family::Transformer => vec![self.tokens, self.input_dim],
            _ if self.is_conv() => vec![self.spatial_size(), self.input_dim],
            _ => vec![self.input_dim],
        }
    }

    /// Per-sample shape of every depth unit's pre-activation.
    pub fn unit_shape(&self) -> Vec<usize> {
        match self.family {
            Family::Transformer => vec![self.tokens, self.width],
            _ if self.is_conv() => vec![self.spatial_size(), self.channels],
            _ => vec![self.width],
        }
    }

    pub fn tag(&self) -> String {
        match (self.family, self.branch) {
            (Family::ResNet, Branch::Conv) => "resnet_conv".into(),
            (f, _) => f.to_string(),
        }
    }

    /// Hidden width reported in sweep records.
    pub fn width_param(&self) -> usize {
        if self.is_conv() {
            self.channels
        } else {
            self.width
        }
    }
}
