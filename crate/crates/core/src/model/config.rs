use serde::{Deserialize, Serialize};

use crate::data::CHANNELS;
use crate::model::ModelError;

/// Hidden expansion of every trunk MLP.
pub const MLP_RATIO: usize = 4;
/// Attention head width used when a config does not pick one.
pub const DEFAULT_HEAD_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// A single linear projection.
    None,
    /// Residual per-patch MLP blocks, then a projection.
    Mlp,
    /// Full transformer blocks sharing the trunk's attention plan.
    Transformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Pixels,
    NormPixels,
    Tokens { vocab: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Trunk width `d`.
    pub width: usize,
    /// Number of trunk blocks `L`.
    pub depth: usize,
    pub heads: usize,
    pub head_kind: HeadKind,
    /// Blocks in the prediction head.
    pub head_blocks: usize,
    /// Hidden width of each MLP head block.
    pub head_width: usize,
    pub patch_size: usize,
    /// Patch grid `(rows, cols)`.
    pub grid: (usize, usize),
    pub target: TargetKind,
    /// Adds a learnable embedding used by the masked-modeling objective.
    #[serde(default)]
    pub mask_token: bool,
}

/// Kind of a parameter tensor, which fixes its initialization and whether it
/// takes weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Linear weight, truncated normal init, decayed.
    Weight,
    /// Normalization scale, ones init, not decayed.
    NormScale,
    /// Learnable embedding vector, truncated normal init, decayed.
    Embedding,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: &[usize], kind: ParamKind) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            kind,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Parameter totals split by component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub trunk: usize,
    pub head: usize,
    pub mask_token: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.trunk + self.head + self.mask_token
    }
}

pub(crate) fn block_specs(prefix: &str, d: usize, out: &mut Vec<ParamSpec>) {
    use ParamKind::*;
    out.push(ParamSpec::new(format!("{prefix}.norm1.scale"), &[d], NormScale));
    for m in ["q", "k", "v", "o"] {
        out.push(ParamSpec::new(format!("{prefix}.attn.{m}"), &[d, d], Weight));
    }
    out.push(ParamSpec::new(format!("{prefix}.norm2.scale"), &[d], NormScale));
    out.push(ParamSpec::new(format!("{prefix}.mlp.fc1"), &[d, MLP_RATIO * d], Weight));
    out.push(ParamSpec::new(format!("{prefix}.mlp.fc2"), &[MLP_RATIO * d, d], Weight));
}

impl ModelConfig {
    /// Small configuration with `d_h = 64` heads when the width allows it.
    pub fn new(width: usize, depth: usize, patch_size: usize, grid: (usize, usize)) -> Self {
        Self {
            width,
            depth,
            heads: (width / DEFAULT_HEAD_DIM).max(1),
            head_kind: HeadKind::Mlp,
            head_blocks: 12,
            head_width: 2048,
            patch_size,
            grid,
            target: TargetKind::NormPixels,
            mask_token: false,
        }
    }

    /// Named presets at 224px with 14px patches.
    pub fn preset(name: &str) -> Option<Self> {
        let (width, depth) = match name {
            "aim-0.6b" => (1536, 24),
            "aim-1b" => (2048, 24),
            "aim-3b" => (3072, 24),
            "aim-7b" => (4096, 32),
            _ => return None,
        };
        Some(Self::new(width, depth, 14, (16, 16)))
    }

    pub fn seq_len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Width of each prediction: pixels per patch or vocabulary size.
    pub fn output_dim(&self) -> usize {
        match self.target {
            TargetKind::Tokens { vocab } => vocab,
            _ => self.patch_dim(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} is not divisible by {} heads", self.width, self.heads));
        }
        if !self.width.is_multiple_of(4) {
            return bad(format!(
                "width {} must be divisible by 4 for 2D sinusoidal embeddings",
                self.width
            ));
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.patch_size == 0 || self.grid.0 == 0 || self.grid.1 == 0 {
            return bad("patch size and grid must be positive".into());
        }
        if self.head_kind != HeadKind::None && self.head_blocks == 0 {
            return bad("mlp/transformer heads need at least one block".into());
        }
        if self.head_kind == HeadKind::Mlp && self.head_width == 0 {
            return bad("head width must be positive".into());
        }
        if let TargetKind::Tokens { vocab } = self.target {
            if vocab < 2 {
                return bad("token vocabulary must have at least 2 entries".into());
            }
        }
        Ok(())
    }

    /// Every parameter the model owns, in initialization order.
    pub fn layout(&self) -> Vec<ParamSpec> {
        use ParamKind::*;
        let d = self.width;
        let mut out = vec![ParamSpec::new("patch_embed", &[self.patch_dim(), d], Weight)];
        for l in 0..self.depth {
            block_specs(&format!("blocks.{l}"), d, &mut out);
        }
        out.push(ParamSpec::new("norm.scale", &[d], NormScale));
        match self.head_kind {
            HeadKind::None => {}
            HeadKind::Mlp => {
                for n in 0..self.head_blocks {
                    out.push(ParamSpec::new(format!("head.blocks.{n}.norm.scale"), &[d], NormScale));
                    out.push(ParamSpec::new(
                        format!("head.blocks.{n}.fc1"),
                        &[d, self.head_width],
                        Weight,
                    ));
                    out.push(ParamSpec::new(
                        format!("head.blocks.{n}.fc2"),
                        &[self.head_width, d],
                        Weight,
                    ));
                }
                out.push(ParamSpec::new("head.norm.scale", &[d], NormScale));
            }
            HeadKind::Transformer => {
                for n in 0..self.head_blocks {
                    block_specs(&format!("head.blocks.{n}"), d, &mut out);
                }
                out.push(ParamSpec::new("head.norm.scale", &[d], NormScale));
            }
        }
        out.push(ParamSpec::new("head.proj", &[d, self.output_dim()], Weight));
        if self.mask_token {
            out.push(ParamSpec::new("mask_token", &[1, d], Embedding));
        }
        out
    }

    pub fn param_counts(&self) -> ParamCounts {
        let mut counts = ParamCounts {
            trunk: 0,
            head: 0,
            mask_token: 0,
        };
        for spec in self.layout() {
            let n = spec.numel();
            if spec.name.starts_with("head.") {
                counts.head += n;
            } else if spec.name == "mask_token" {
                counts.mask_token += n;
            } else {
                counts.trunk += n;
            }
        }
        counts
    }
}
