//! Small convolutional classifiers with declarative perturbation insertion points.
//!
//! A model is a list of blocks. Plain blocks are `conv3×3 → BN → ReLU`
//! (optionally followed by 2×2 max pooling); residual blocks are the usual
//! two-conv basic block with a 1×1 strided projection when the shape
//! changes. Every block owns exactly one insertion point, located right
//! before its final activation.

mod checkpoint;
mod forward;
mod theta;

use std::fmt;
use std::str::FromStr;

pub use checkpoint::{read_theta, read_theta_file, write_theta, write_theta_file, THETA_MAGIC, THETA_VERSION};
pub use forward::{forward, Forward, PerturbCtx};
pub use theta::{build_model, Param, ThetaParams, ThetaVars};

use crate::error::{Error, Result};
use crate::tensor::conv_output_size;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Block {
    /// `conv3×3 → BN → ReLU`, then 2×2 max pooling when `pool` is set.
    Conv { out_channels: usize, pool: bool },
    /// Basic residual block; `stride` applies to the first conv and the projection.
    Residual { channels: usize, stride: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InsertionPolicy {
    All,
    BeforePoolingOnly,
    /// Deeper half of the blocks.
    TopHalfOnly,
    /// Earlier half of the blocks (the first `ceil(n/2)`).
    BottomHalfOnly,
    None,
}

impl InsertionPolicy {
    pub const ALL: [InsertionPolicy; 5] = [
        InsertionPolicy::All,
        InsertionPolicy::BeforePoolingOnly,
        InsertionPolicy::TopHalfOnly,
        InsertionPolicy::BottomHalfOnly,
        InsertionPolicy::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InsertionPolicy::All => "all",
            InsertionPolicy::BeforePoolingOnly => "before_pooling_only",
            InsertionPolicy::TopHalfOnly => "top_half_only",
            InsertionPolicy::BottomHalfOnly => "bottom_half_only",
            InsertionPolicy::None => "none",
        }
    }
}

impl FromStr for InsertionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown insertion policy '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    pub blocks: Vec<Block>,
    /// C×H×W of one input image.
    pub input: [usize; 3],
    pub num_classes: usize,
    pub insertion: InsertionPolicy,
}

impl ModelSpec {
    /// Two plain blocks of 8 channels, each pooled.
    pub fn conv2_lite(input: [usize; 3], num_classes: usize) -> Self {
        Self::plain(2, 8, input, num_classes)
    }

    /// Four plain blocks of 16 channels, each pooled.
    pub fn conv4_lite(input: [usize; 3], num_classes: usize) -> Self {
        Self::plain(4, 16, input, num_classes)
    }

    /// An 8-channel stem followed by residual blocks of 8, 16 and 32 channels.
    pub fn resnet8_lite(input: [usize; 3], num_classes: usize) -> Self {
        Self {
            blocks: vec![
                Block::Conv { out_channels: 8, pool: false },
                Block::Residual { channels: 8, stride: 1 },
                Block::Residual { channels: 16, stride: 2 },
                Block::Residual { channels: 32, stride: 2 },
            ],
            input,
            num_classes,
            insertion: InsertionPolicy::All,
        }
    }

    fn plain(n: usize, channels: usize, input: [usize; 3], num_classes: usize) -> Self {
        Self {
            blocks: vec![Block::Conv { out_channels: channels, pool: true }; n],
            input,
            num_classes,
            insertion: InsertionPolicy::All,
        }
    }

    /// Zoo names (`conv2`, `conv4`, `resnet8`) or a block string such as
    /// `C8M-C8M` / `C8-R16s2` (`Ck` conv block, `M` pooling, `Rk` residual,
    /// `sN` stride).
    pub fn from_name(name: &str, input: [usize; 3], num_classes: usize) -> Result<Self> {
        match name {
            "conv2" | "conv2-lite" => Ok(Self::conv2_lite(input, num_classes)),
            "conv4" | "conv4-lite" => Ok(Self::conv4_lite(input, num_classes)),
            "resnet8" | "resnet8-lite" => Ok(Self::resnet8_lite(input, num_classes)),
            other => Ok(Self {
                blocks: parse_blocks(other)?,
                input,
                num_classes,
                insertion: InsertionPolicy::All,
            }),
        }
    }

    pub fn with_insertion(mut self, insertion: InsertionPolicy) -> Self {
        self.insertion = insertion;
        self
    }

    pub fn has_residual(&self) -> bool {
        self.blocks.iter().any(|b| matches!(b, Block::Residual { .. }))
    }

    /// Canonical text form; also the input of [`ModelSpec::spec_hash`].
    pub fn canonical(&self) -> String {
        let blocks: Vec<String> = self.blocks.iter().map(block_string).collect();
        format!(
            "{}|in={}x{}x{}|classes={}|insertion={}",
            blocks.join("-"),
            self.input[0],
            self.input[1],
            self.input[2],
            self.num_classes,
            self.insertion.name()
        )
    }

    pub fn spec_hash(&self) -> u64 {
        crate::stable_hash64(self.canonical().as_bytes())
    }

    /// Which blocks carry a perturbation under the spec's insertion policy.
    pub fn insertion_points(&self) -> Vec<bool> {
        let n = self.blocks.len();
        let split = n.div_ceil(2);
        (0..n)
            .map(|i| match self.insertion {
                InsertionPolicy::All => true,
                InsertionPolicy::None => false,
                InsertionPolicy::BottomHalfOnly => i < split,
                InsertionPolicy::TopHalfOnly => i >= split,
                InsertionPolicy::BeforePoolingOnly => match self.blocks[i] {
                    Block::Conv { pool, .. } => {
                        pool || matches!(self.blocks.get(i + 1), Some(Block::Residual { stride, .. }) if *stride > 1)
                    }
                    Block::Residual { .. } => {
                        matches!(self.blocks.get(i + 1), Some(Block::Residual { stride, .. }) if *stride > 1)
                    }
                },
            })
            .collect()
    }

    /// Checks the spec and returns the C×H×W shape after every block.
    pub fn trace_shapes(&self) -> Result<Vec<[usize; 3]>> {
        if self.blocks.is_empty() {
            return Err(Error::Config("a model needs at least one block".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("a model needs at least one class".into()));
        }
        let [c0, h0, w0] = self.input;
        if c0 == 0 || h0 == 0 || w0 == 0 {
            return Err(Error::Config(format!("invalid input shape {:?}", self.input)));
        }
        if self.insertion != InsertionPolicy::None && !self.insertion_points().contains(&true) {
            return Err(Error::Config(format!(
                "insertion policy '{}' selects no block of this model",
                self.insertion.name()
            )));
        }
        let (mut h, mut w) = (h0, w0);
        let mut shapes = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            match *block {
                Block::Conv { out_channels, pool } => {
                    if out_channels == 0 {
                        return Err(Error::Config(format!("block {i} has zero channels")));
                    }
                    if pool {
                        if h < 2 || w < 2 {
                            return Err(Error::Config(format!("block {i} pools a {h}×{w} map")));
                        }
                        h /= 2;
                        w /= 2;
                    }
                }
                Block::Residual { channels, stride } => {
                    if channels == 0 || stride == 0 {
                        return Err(Error::Config(format!("block {i} has zero channels or stride")));
                    }
                    h = conv_output_size(h, 3, stride, 1)?;
                    w = conv_output_size(w, 3, stride, 1)?;
                }
            }
            if h == 0 || w == 0 {
                return Err(Error::Config(format!("spatial size reaches zero at block {i}")));
            }
            let c = match *block {
                Block::Conv { out_channels, .. } => out_channels,
                Block::Residual { channels, .. } => channels,
            };
            shapes.push([c, h, w]);
        }
        Ok(shapes)
    }

    /// Width of the classifier input.
    pub fn feature_dim(&self) -> Result<usize> {
        let [c, h, w] = *self.trace_shapes()?.last().expect("non-empty");
        Ok(if self.has_residual() { c } else { c * h * w })
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

fn block_string(block: &Block) -> String {
    match *block {
        Block::Conv { out_channels, pool } => format!("C{out_channels}{}", if pool { "M" } else { "" }),
        Block::Residual { channels, stride } => format!("R{channels}s{stride}"),
    }
}

fn parse_blocks(text: &str) -> Result<Vec<Block>> {
    let bad = || Error::Config(format!("cannot parse model blocks '{text}'"));
    text.split('-')
        .map(|tok| {
            let (kind, rest) = tok.split_at_checked(1).ok_or_else(bad)?;
            match kind {
                "C" => {
                    let (digits, pool) = match rest.strip_suffix('M') {
                        Some(d) => (d, true),
                        None => (rest, false),
                    };
                    Ok(Block::Conv { out_channels: digits.parse().map_err(|_| bad())?, pool })
                }
                "R" => {
                    let (ch, stride) = match rest.split_once('s') {
                        Some((c, s)) => (c, s.parse().map_err(|_| bad())?),
                        None => (rest, 1),
                    };
                    Ok(Block::Residual { channels: ch.parse().map_err(|_| bad())?, stride })
                }
                _ => Err(bad()),
            }
        })
        .collect()
}
