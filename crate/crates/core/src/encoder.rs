//! Heterogeneous-space adapter encoder.
//!
//! Each block is multi-head self-attention whose query and value projections
//! are updated by N gated low-rank down/up projection pairs with pairwise
//! distinct inner widths, plus a feed-forward network carrying a third gated
//! adapter branch. The frozen projections stand in for a pretrained backbone;
//! only the adapter tensors train.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Fixed patch side; the prompt conv stack downsamples by the same factor,
/// so token grids always align.
pub const PATCH: usize = 16;

/// One adapter space: down-projection `[d, d_i]` and up-projection `[d_i, d]`.
#[derive(Clone)]
pub struct SpacePair {
    pub down: Tensor,
    pub up: Tensor,
}

/// Trainable adapter tensors of one encoder block.
#[derive(Clone)]
pub struct AdapterParams {
    /// Gate for the attention branches: `[d, N]`, softmaxed per token.
    pub gate_attn: Tensor,
    /// Gate for the FFN branch: `[d, N]`.
    pub gate_ffn: Tensor,
    pub que: Vec<SpacePair>,
    pub val: Vec<SpacePair>,
    pub ffn: Vec<SpacePair>,
}

impl AdapterParams {
    /// All-zero adapter with the given space widths; with these weights every
    /// block output equals the frozen baseline.
    pub fn zeros(dim: usize, space_dims: &[usize]) -> Self {
        let n = space_dims.len();
        let pair = |d_i: usize| SpacePair {
            down: Tensor::zeros(&[dim, d_i]),
            up: Tensor::zeros(&[d_i, dim]),
        };
        AdapterParams {
            gate_attn: Tensor::zeros(&[dim, n]),
            gate_ffn: Tensor::zeros(&[dim, n]),
            que: space_dims.iter().map(|&d| pair(d)).collect(),
            val: space_dims.iter().map(|&d| pair(d)).collect(),
            ffn: space_dims.iter().map(|&d| pair(d)).collect(),
        }
    }

    /// Trainable scalar count: 2·d·d_i per pair, three branches, plus the two
    /// gate matrices.
    pub fn parameter_count(dim: usize, space_dims: &[usize], n_spaces: usize) -> usize {
        let per_branch: usize = space_dims.iter().map(|&d_i| 2 * dim * d_i).sum();
        per_branch * 3 + 2 * dim * n_spaces
    }
}

/// One encoder block: frozen attention/FFN weights plus the optional adapter.
#[derive(Clone)]
pub struct BlockParams {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub heads: usize,
    pub adapter: Option<AdapterParams>,
}

/// Graph handles for one bound block.
pub struct BlockNodes {
    pub q: NodeId,
    pub k: NodeId,
    pub v: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub heads: usize,
    pub adapter: Option<AdapterNodes>,
}

pub struct AdapterNodes {
    pub gate_attn: NodeId,
    pub gate_ffn: NodeId,
    pub que: Vec<(NodeId, NodeId)>,
    pub val: Vec<(NodeId, NodeId)>,
    pub ffn: Vec<(NodeId, NodeId)>,
}

impl BlockParams {
    pub fn bind(&self, g: &mut Graph) -> BlockNodes {
        let bind_pairs = |g: &mut Graph, pairs: &[SpacePair]| {
            pairs
                .iter()
                .map(|p| (g.input(p.down.clone()), g.input(p.up.clone())))
                .collect()
        };
        BlockNodes {
            q: g.input(self.q.clone()),
            k: g.input(self.k.clone()),
            v: g.input(self.v.clone()),
            w1: g.input(self.w1.clone()),
            b1: g.input(self.b1.clone()),
            w2: g.input(self.w2.clone()),
            b2: g.input(self.b2.clone()),
            heads: self.heads,
            adapter: self.adapter.as_ref().map(|a| AdapterNodes {
                gate_attn: g.input(a.gate_attn.clone()),
                gate_ffn: g.input(a.gate_ffn.clone()),
                que: bind_pairs(g, &a.que),
                val: bind_pairs(g, &a.val),
                ffn: bind_pairs(g, &a.ffn),
            }),
        }
    }
}

/// Per-token softmax over the N space weights: rows of the result sum to 1.
pub fn space_gate(g: &mut Graph, x: NodeId, gate: NodeId) -> Result<NodeId> {
    let logits = g.matmul(x, gate)?;
    g.softmax(logits, 1)
}

/// Gate-weighted sum of the down/up projections. `inner_gelu` applies the
/// nonlinearity between down- and up-projection (the FFN branch does, the
/// attention branches do not).
fn adapted_branch(
    g: &mut Graph,
    x: NodeId,
    gate_probs: NodeId,
    pairs: &[(NodeId, NodeId)],
    inner_gelu: bool,
) -> Result<NodeId> {
    let (tokens, _) = g.value(x).dims2()?;
    let mut total: Option<NodeId> = None;
    for (i, &(down, up)) in pairs.iter().enumerate() {
        let mut low = g.matmul(x, down)?;
        if inner_gelu {
            low = g.gelu(low);
        }
        let high = g.matmul(low, up)?;
        let col = g.slice_cols(gate_probs, i, i + 1)?;
        let col = g.reshape(col, &[tokens])?;
        let weighted = g.row_scale(high, col)?;
        total = Some(match total {
            Some(t) => g.add(t, weighted)?,
            None => weighted,
        });
    }
    total.ok_or_else(|| Error::Config("adapter has no spaces".into()))
}

/// Query projection updated by the gated heterogeneous-space branches.
/// With a zero (or absent) adapter this is exactly the frozen projection.
pub fn adapted_query(g: &mut Graph, x: NodeId, block: &BlockNodes) -> Result<NodeId> {
    let base = g.matmul(x, block.q)?;
    match &block.adapter {
        None => Ok(base),
        Some(a) => {
            let probs = space_gate(g, x, a.gate_attn)?;
            let branch = adapted_branch(g, x, probs, &a.que, false)?;
            g.add(base, branch)
        }
    }
}

/// Value projection updated by the gated heterogeneous-space branches.
pub fn adapted_value(g: &mut Graph, x: NodeId, block: &BlockNodes) -> Result<NodeId> {
    let base = g.matmul(x, block.v)?;
    match &block.adapter {
        None => Ok(base),
        Some(a) => {
            let probs = space_gate(g, x, a.gate_attn)?;
            let branch = adapted_branch(g, x, probs, &a.val, false)?;
            g.add(base, branch)
        }
    }
}

/// Multi-head self-attention with the adapted query/value projections:
/// per head, softmax(h_que · kᵀ / sqrt(d_head)) · h_val, heads re-merged.
pub fn hs_attention(g: &mut Graph, x: NodeId, block: &BlockNodes) -> Result<NodeId> {
    let (_, d) = g.value(x).dims2()?;
    if d % block.heads != 0 {
        return Err(Error::Shape(format!(
            "attention: token width {d} not divisible by {} heads",
            block.heads
        )));
    }
    let d_head = d / block.heads;
    let h_que = adapted_query(g, x, block)?;
    let h_val = adapted_value(g, x, block)?;
    let keys = g.matmul(x, block.k)?;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut outs = Vec::with_capacity(block.heads);
    for h in 0..block.heads {
        let lo = h * d_head;
        let hi = lo + d_head;
        let qh = g.slice_cols(h_que, lo, hi)?;
        let kh = g.slice_cols(keys, lo, hi)?;
        let vh = g.slice_cols(h_val, lo, hi)?;
        let kt = g.transpose2(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.mul_scalar(scores, scale);
        let probs = g.softmax(scores, 1)?;
        outs.push(g.matmul(probs, vh)?);
    }
    g.concat_cols(&outs)
}

/// Residual FFN with the gated adapter branch (GELU applied inside the
/// down-projection): out = a + ffn(a) + adapted(a).
pub fn hs_ffn(g: &mut Graph, a: NodeId, block: &BlockNodes) -> Result<NodeId> {
    let hidden = g.matmul(a, block.w1)?;
    let hidden = g.add_row_vector(hidden, block.b1)?;
    let hidden = g.gelu(hidden);
    let ffn = g.matmul(hidden, block.w2)?;
    let ffn = g.add_row_vector(ffn, block.b2)?;
    let out = g.add(a, ffn)?;
    match &block.adapter {
        None => Ok(out),
        Some(ad) => {
            let probs = space_gate(g, a, ad.gate_ffn)?;
            let branch = adapted_branch(g, a, probs, &ad.ffn, true)?;
            g.add(out, branch)
        }
    }
}

/// One encoder block: attention followed by the residual FFN stage.
pub fn encoder_block(g: &mut Graph, x: NodeId, block: &BlockNodes) -> Result<NodeId> {
    let attn = hs_attention(g, x, block)?;
    hs_ffn(g, attn, block)
}

/// Cut `image: [C,H,W]` into 16x16 patches and flatten each one row-major
/// (channel-major within a patch) into a row of `[T, C*256]`.
pub fn patchify(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if h % PATCH != 0 || w % PATCH != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} not divisible by the {PATCH}-pixel patch side"
        )));
    }
    let (gh, gw) = (h / PATCH, w / PATCH);
    let tokens = gh * gw;
    let width = c * PATCH * PATCH;
    let mut data = vec![0.0; tokens * width];
    for gy in 0..gh {
        for gx in 0..gw {
            let t = gy * gw + gx;
            for ch in 0..c {
                for py in 0..PATCH {
                    for px in 0..PATCH {
                        data[t * width + (ch * PATCH + py) * PATCH + px] =
                            image.at3(ch, gy * PATCH + py, gx * PATCH + px);
                    }
                }
            }
        }
    }
    Tensor::new(vec![tokens, width], data)
}

/// Full encoder: patch projection + positional embedding, the block stack,
/// and the final reshape of the token matrix to a `[d, H/16, W/16]` grid.
pub fn encode_image(
    g: &mut Graph,
    image: &Tensor,
    patch_proj: NodeId,
    pos_embed: NodeId,
    blocks: &[BlockNodes],
) -> Result<NodeId> {
    let (_, h, w) = image.dims3()?;
    let patches = patchify(image)?;
    let patches = g.input(patches);
    let proj = g.matmul(patches, patch_proj)?;
    let mut tokens = g.add(proj, pos_embed)?;
    for block in blocks {
        tokens = encoder_block(g, tokens, block)?;
    }
    let (_, d) = g.value(tokens).dims2()?;
    let grid_t = g.transpose2(tokens)?;
    g.reshape(grid_t, &[d, h / PATCH, w / PATCH])
}
