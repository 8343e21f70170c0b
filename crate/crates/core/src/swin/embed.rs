//! Cube embedding of the history window and stride-2 patch embedding /
//! unembedding.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::conv::Conv2dCfg;
use crate::tensor::graph::NodeId;
use crate::tensor::params::{xavier, zeros, Ctx, ParamStore};

/// 3-D convolution over the stacked history window, realized as a 2x2
/// stride-2 convolution whose input channels are the full temporal depth
/// (the kernel consumes every history frame at once).
#[derive(Debug, Clone, Copy)]
pub struct CubeEmbed {
    pub history: usize,
    pub in_channels: usize,
    pub out_dim: usize,
}

impl CubeEmbed {
    pub fn param_count(&self) -> u64 {
        let fan_in = (self.history * self.in_channels * 4) as u64;
        self.out_dim as u64 * fan_in + self.out_dim as u64
    }

    pub fn init(&self, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) {
        let cin = self.history * self.in_channels;
        store.insert(
            format!("{prefix}.w"),
            xavier(rng, &[self.out_dim, cin, 2, 2], cin * 4, self.out_dim),
        );
        store.insert(format!("{prefix}.b"), zeros(&[self.out_dim]));
    }

    /// `frames` are history nodes, oldest first, each [C, H, W] with even
    /// H and W; output is [out_dim, H/2, W/2].
    pub fn forward(&self, ctx: &mut Ctx, prefix: &str, frames: &[NodeId]) -> Result<NodeId> {
        if frames.len() != self.history {
            return Err(Error::shape(format!(
                "cube embedding expects {} history frames, got {}",
                self.history,
                frames.len()
            )));
        }
        let first = ctx.g.value(frames[0]).shape().to_vec();
        if first.len() != 3 || first[0] != self.in_channels {
            return Err(Error::shape(format!(
                "history frames must be [{}, H, W], got {:?}",
                self.in_channels, first
            )));
        }
        if first[1] % 2 != 0 || first[2] % 2 != 0 {
            return Err(Error::shape("cube embedding requires even spatial dims"));
        }
        for f in frames {
            if ctx.g.value(*f).shape() != first.as_slice() {
                return Err(Error::shape("history frames differ in shape"));
            }
        }
        let stacked = ctx.g.concat(frames, 0);
        let w = ctx.p(&format!("{prefix}.w"));
        let b = ctx.p(&format!("{prefix}.b"));
        Ok(ctx.g.conv2d(stacked, w, Some(b), Conv2dCfg::halving()))
    }
}

/// Stride-2 patch embedding of a single frame.
#[derive(Debug, Clone, Copy)]
pub struct PatchEmbed {
    pub in_channels: usize,
    pub dim: usize,
}

impl PatchEmbed {
    pub fn param_count(&self) -> u64 {
        (self.dim * self.in_channels * 4 + self.dim) as u64
    }

    pub fn init(&self, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) {
        let fan_in = self.in_channels * 4;
        store.insert(
            format!("{prefix}.w"),
            xavier(rng, &[self.dim, self.in_channels, 2, 2], fan_in, self.dim),
        );
        store.insert(format!("{prefix}.b"), zeros(&[self.dim]));
    }

    pub fn forward(&self, ctx: &mut Ctx, prefix: &str, x: NodeId) -> Result<NodeId> {
        let shape = ctx.g.value(x).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.in_channels {
            return Err(Error::shape(format!(
                "patch embed expects [{}, H, W], got {:?}",
                self.in_channels, shape
            )));
        }
        if shape[1] % 2 != 0 || shape[2] % 2 != 0 {
            return Err(Error::shape("patch embed requires even spatial dims"));
        }
        let w = ctx.p(&format!("{prefix}.w"));
        let b = ctx.p(&format!("{prefix}.b"));
        Ok(ctx.g.conv2d(x, w, Some(b), Conv2dCfg::halving()))
    }
}

/// Transposed-convolution head doubling the spatial dims back to frame size.
#[derive(Debug, Clone, Copy)]
pub struct PatchUnembed {
    pub dim: usize,
    pub out_channels: usize,
}

impl PatchUnembed {
    pub fn param_count(&self) -> u64 {
        (self.dim * self.out_channels * 4 + self.out_channels) as u64
    }

    pub fn init(&self, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) {
        store.insert(
            format!("{prefix}.w"),
            xavier(rng, &[self.dim, self.out_channels, 2, 2], self.dim, self.out_channels * 4),
        );
        store.insert(format!("{prefix}.b"), zeros(&[self.out_channels]));
    }

    pub fn forward(&self, ctx: &mut Ctx, prefix: &str, f: NodeId) -> Result<NodeId> {
        let shape = ctx.g.value(f).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.dim {
            return Err(Error::shape(format!(
                "patch unembed expects [{}, H', W'], got {:?}",
                self.dim, shape
            )));
        }
        let w = ctx.p(&format!("{prefix}.w"));
        let b = ctx.p(&format!("{prefix}.b"));
        Ok(ctx.g.conv_transpose2d(f, w, Some(b), 2))
    }
}
