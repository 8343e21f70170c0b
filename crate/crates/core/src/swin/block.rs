//! Pre-norm shifted-window attention block.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::graph::NodeId;
use crate::tensor::params::{ones, randn, xavier, Ctx, ParamStore};

use super::window::{check_window, lat_pad_mask, padded_rows, relative_position_index};

/// Geometry and sizing of one attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    /// Longitude shift: 0 or window/2.
    pub shift: usize,
    pub mlp_ratio: usize,
}

impl BlockConfig {
    pub fn new(dim: usize, window: usize, shift: usize) -> Self {
        let heads = (dim / 32).max(1);
        assert_eq!(dim % heads, 0, "dim must be divisible by head count");
        BlockConfig { dim, heads, window, shift, mlp_ratio: 4 }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Exact trainable scalar count of one block.
    pub fn param_count(&self) -> u64 {
        let c = self.dim as u64;
        let hidden = c * self.mlp_ratio as u64;
        let span = (2 * self.window as u64 - 1).pow(2);
        let ln = 2 * c;
        let qkv = c * 3 * c + 3 * c;
        let proj = c * c + c;
        let bias_table = span * self.heads as u64;
        let mlp = c * hidden + hidden + hidden * c + c;
        ln + qkv + proj + bias_table + ln + mlp
    }

    /// Insert this block's parameters under `prefix`.
    pub fn init(&self, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) {
        let c = self.dim;
        let hidden = c * self.mlp_ratio;
        let span = (2 * self.window - 1) * (2 * self.window - 1);
        store.insert(format!("{prefix}.ln1.g"), ones(&[c]));
        store.insert(format!("{prefix}.ln1.b"), crate::tensor::params::zeros(&[c]));
        store.insert(format!("{prefix}.attn.qkv.w"), xavier(rng, &[c, 3 * c], c, 3 * c));
        store.insert(format!("{prefix}.attn.qkv.b"), crate::tensor::params::zeros(&[3 * c]));
        store.insert(format!("{prefix}.attn.proj.w"), xavier(rng, &[c, c], c, c));
        store.insert(format!("{prefix}.attn.proj.b"), crate::tensor::params::zeros(&[c]));
        store.insert(format!("{prefix}.attn.bias"), randn(rng, &[span, self.heads], 0.02));
        store.insert(format!("{prefix}.ln2.g"), ones(&[c]));
        store.insert(format!("{prefix}.ln2.b"), crate::tensor::params::zeros(&[c]));
        store.insert(format!("{prefix}.mlp.fc1.w"), xavier(rng, &[c, hidden], c, hidden));
        store.insert(format!("{prefix}.mlp.fc1.b"), crate::tensor::params::zeros(&[hidden]));
        store.insert(format!("{prefix}.mlp.fc2.w"), xavier(rng, &[hidden, c], hidden, c));
        store.insert(format!("{prefix}.mlp.fc2.b"), crate::tensor::params::zeros(&[c]));
    }

    /// Block forward on a [dim, H, W] feature map node.
    pub fn forward(&self, ctx: &mut Ctx, prefix: &str, x: NodeId) -> Result<NodeId> {
        Ok(self.forward_inner(ctx, prefix, x)?.0)
    }

    /// Forward that also returns the attention probabilities
    /// [n_windows, heads, N, N] (for diagnostics and tests).
    pub fn forward_with_probs(
        &self,
        ctx: &mut Ctx,
        prefix: &str,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        self.forward_inner(ctx, prefix, x)
    }

    fn forward_inner(&self, ctx: &mut Ctx, prefix: &str, x: NodeId) -> Result<(NodeId, NodeId)> {
        let shape = ctx.g.value(x).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.dim {
            return Err(Error::shape(format!(
                "block expects [{}, H, W], got {:?}",
                self.dim, shape
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        check_window(h, w, self.window, self.shift)?;
        let hp = padded_rows(h, self.window);
        let n = self.window * self.window;

        // to token layout, pad latitude, shift longitude, cut windows
        let hwc = ctx.g.permute(x, &[1, 2, 0]);
        let padded = if hp > h { ctx.g.pad_zero(hwc, 0, 0, hp - h) } else { hwc };
        let rolled = if self.shift > 0 {
            ctx.g.roll(padded, 1, -(self.shift as isize))
        } else {
            padded
        };
        let xw = ctx.g.window_partition(rolled, self.window);

        // attention with pre-norm residual
        let ln1g = ctx.p(&format!("{prefix}.ln1.g"));
        let ln1b = ctx.p(&format!("{prefix}.ln1.b"));
        let a = ctx.g.layer_norm_last(xw, ln1g, ln1b, 1e-5);
        let (attn, probs) = self.attention(ctx, prefix, a, h, w, n)?;
        let x1 = ctx.g.add(xw, attn);

        // feed-forward with pre-norm residual
        let ln2g = ctx.p(&format!("{prefix}.ln2.g"));
        let ln2b = ctx.p(&format!("{prefix}.ln2.b"));
        let m = ctx.g.layer_norm_last(x1, ln2g, ln2b, 1e-5);
        let fc1w = ctx.p(&format!("{prefix}.mlp.fc1.w"));
        let fc1b = ctx.p(&format!("{prefix}.mlp.fc1.b"));
        let h1 = ctx.g.matmul_last(m, fc1w);
        let h1 = ctx.g.add(h1, fc1b);
        let h1 = ctx.g.gelu(h1);
        let fc2w = ctx.p(&format!("{prefix}.mlp.fc2.w"));
        let fc2b = ctx.p(&format!("{prefix}.mlp.fc2.b"));
        let h2 = ctx.g.matmul_last(h1, fc2w);
        let h2 = ctx.g.add(h2, fc2b);
        let x2 = ctx.g.add(x1, h2);

        // merge, unshift, crop, back to [dim, H, W]
        let merged = ctx.g.window_merge(x2, hp, w, self.window);
        let unrolled = if self.shift > 0 {
            ctx.g.roll(merged, 1, self.shift as isize)
        } else {
            merged
        };
        let cropped = if hp > h { ctx.g.slice(unrolled, 0, 0, h) } else { unrolled };
        let out = ctx.g.permute(cropped, &[2, 0, 1]);
        Ok((out, probs))
    }

    fn attention(
        &self,
        ctx: &mut Ctx,
        prefix: &str,
        a: NodeId,
        h: usize,
        w: usize,
        n: usize,
    ) -> Result<(NodeId, NodeId)> {
        let nw = ctx.g.value(a).shape()[0];
        let (c, heads, dh) = (self.dim, self.heads, self.head_dim());

        let qkv_w = ctx.p(&format!("{prefix}.attn.qkv.w"));
        let qkv_b = ctx.p(&format!("{prefix}.attn.qkv.b"));
        let qkv = ctx.g.matmul_last(a, qkv_w);
        let qkv = ctx.g.add(qkv, qkv_b);
        let r = ctx.g.reshape(qkv, &[nw, n, 3, heads, dh]);
        let p = ctx.g.permute(r, &[2, 0, 3, 1, 4]); // [3, nW, heads, N, dh]
        let q = ctx.g.slice(p, 0, 0, 1);
        let q = ctx.g.reshape(q, &[nw, heads, n, dh]);
        let k = ctx.g.slice(p, 0, 1, 1);
        let k = ctx.g.reshape(k, &[nw, heads, n, dh]);
        let v = ctx.g.slice(p, 0, 2, 1);
        let v = ctx.g.reshape(v, &[nw, heads, n, dh]);

        let q = ctx.g.scale(q, 1.0 / (dh as f64).sqrt());
        let kt = ctx.g.permute(k, &[0, 1, 3, 2]);
        let mut scores = ctx.g.batch_matmul(q, kt); // [nW, heads, N, N]

        let table = ctx.p(&format!("{prefix}.attn.bias"));
        let gathered = ctx.g.gather_rows(table, relative_position_index(self.window));
        let bias = ctx.g.reshape(gathered, &[n, n, heads]);
        let bias = ctx.g.permute(bias, &[2, 0, 1]);
        let bias = ctx.g.reshape(bias, &[1, heads, n, n]);
        scores = ctx.g.add(scores, bias);

        if let Some(mask) = lat_pad_mask(h, w, self.window) {
            let m = ctx.g.constant(mask.into_dyn());
            scores = ctx.g.add(scores, m);
        }

        let probs = ctx.g.softmax_last(scores);
        let o = ctx.g.batch_matmul(probs, v); // [nW, heads, N, dh]
        let o = ctx.g.permute(o, &[0, 2, 1, 3]);
        let o = ctx.g.reshape(o, &[nw, n, c]);
        let proj_w = ctx.p(&format!("{prefix}.attn.proj.w"));
        let proj_b = ctx.p(&format!("{prefix}.attn.proj.b"));
        let out = ctx.g.matmul_last(o, proj_w);
        let out = ctx.g.add(out, proj_b);
        Ok((out, probs))
    }
}

/// Zero a block's residual-branch outputs (attention projection and second
/// MLP layer) so the block becomes the identity map. Test/diagnostic helper.
pub fn zero_residual_branches(store: &mut ParamStore, prefix: &str) {
    for name in [
        format!("{prefix}.attn.proj.w"),
        format!("{prefix}.attn.proj.b"),
        format!("{prefix}.mlp.fc2.w"),
        format!("{prefix}.mlp.fc2.b"),
    ] {
        store.get_mut(&name).fill(0.0);
    }
}
