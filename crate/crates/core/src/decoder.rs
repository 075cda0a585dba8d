//! Two-stage mask decoder: self-attention over the learned query embeddings
//! concatenated with position prompts, twice-iterated projection-free
//! cross-attention from prompt-fused image tokens to the updated queries,
//! then an upsampling mask head and the dice+focal training loss.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Per-pixel class probability raster with its binarization threshold.
#[derive(Clone, Debug)]
pub struct SemanticMask {
    /// `[C,H,W]`, values in (0,1).
    pub probs: Tensor,
    pub threshold: f64,
}

impl SemanticMask {
    /// `[H,W]` binary union over categories: 1.0 where any channel clears
    /// the threshold.
    pub fn binary_union(&self) -> Result<Tensor> {
        let (c, h, w) = self.probs.dims3()?;
        let mut out = vec![0.0; h * w];
        for ch in 0..c {
            for i in 0..h * w {
                if self.probs.data()[ch * h * w + i] >= self.threshold {
                    out[i] = 1.0;
                }
            }
        }
        Tensor::new(vec![h, w], out)
    }
}

/// Loss weighting: `alpha` scales the dice term, `beta` the focal term.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub dice_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.8,
            beta: 0.2,
            gamma: 2.0,
            dice_eps: 1.0,
        }
    }
}

/// Self-attention projections for the prompt/query tokens.
pub struct SelfAttnNodes {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
}

/// Optional learned projections for cross-attention (the plain equation is
/// projection-free).
pub struct CrossAttnNodes {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
}

/// Mask head: two stride-2 4x4 transpose convolutions and the query MLP.
pub struct MaskHeadNodes {
    pub up1: NodeId,
    pub up1_bias: NodeId,
    pub up2: NodeId,
    pub up2_bias: NodeId,
    pub mlp_w1: NodeId,
    pub mlp_b1: NodeId,
    pub mlp_w2: NodeId,
    pub mlp_b2: NodeId,
}

/// Full self-attention over `[queries ⌢ position prompts]` along the token
/// axis; output has C+L rows. The learned query rows come first so the mask
/// head can slice them off the top.
pub fn decoder_self_attention(
    g: &mut Graph,
    queries: NodeId,
    p_pos: NodeId,
    params: &SelfAttnNodes,
) -> Result<NodeId> {
    let (_, cq) = g.value(queries).dims2()?;
    let (lp, cp) = g.value(p_pos).dims2()?;
    if cq != cp {
        return Err(Error::Shape(format!(
            "decoder_self_attention: channel dims differ ({cq} vs {cp})"
        )));
    }
    let tokens = if lp == 0 {
        queries
    } else {
        g.concat_rows(queries, p_pos)?
    };
    let q = g.matmul(tokens, params.wq)?;
    let k = g.matmul(tokens, params.wk)?;
    let v = g.matmul(tokens, params.wv)?;
    let kt = g.transpose2(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.mul_scalar(scores, 1.0 / (cq as f64).sqrt());
    let probs = g.softmax(scores, 1)?;
    g.matmul(probs, v)
}

/// Flatten the `[c_p,h,w]` embedding grid row-major to `[T,c_p]` tokens and
/// add the semantic prompt elementwise (absent prompt passes through).
pub fn fuse_embeddings(g: &mut Graph, grid: NodeId, p_sem: Option<NodeId>) -> Result<NodeId> {
    let (c, h, w) = g.value(grid).dims3()?;
    let flat = g.reshape(grid, &[c, h * w])?;
    let tokens = g.transpose2(flat)?;
    match p_sem {
        None => Ok(tokens),
        Some(p) => {
            let (tp, cp) = g.value(p).dims2()?;
            if tp != h * w || cp != c {
                return Err(Error::Shape(format!(
                    "fuse_embeddings: prompt [{tp},{cp}] does not match grid [{},{c}]",
                    h * w
                )));
            }
            g.add(tokens, p)
        }
    }
}

/// Cross-attention from image tokens to the updated queries,
/// `softmax((H'+Ψ)·q'ᵀ/√c_p)·q' + H'`, iterated `iterations` times with the
/// same positional term. Projections apply only when `proj` is given.
pub fn decoder_cross_attention(
    g: &mut Graph,
    h_tokens: NodeId,
    q_updated: NodeId,
    psi: NodeId,
    proj: &[Option<&CrossAttnNodes>],
    iterations: usize,
) -> Result<NodeId> {
    let (_, c) = g.value(h_tokens).dims2()?;
    if g.value(psi).shape() != g.value(h_tokens).shape() {
        return Err(Error::Shape(format!(
            "cross_attention: positional term {:?} must match tokens {:?}",
            g.value(psi).shape(),
            g.value(h_tokens).shape()
        )));
    }
    let scale = 1.0 / (c as f64).sqrt();
    let mut h = h_tokens;
    for it in 0..iterations {
        let p = proj.get(it).copied().flatten();
        let hp = g.add(h, psi)?;
        let (att_q, att_k, att_v) = match p {
            None => (hp, q_updated, q_updated),
            Some(pr) => (
                g.matmul(hp, pr.wq)?,
                g.matmul(q_updated, pr.wk)?,
                g.matmul(q_updated, pr.wv)?,
            ),
        };
        let kt = g.transpose2(att_k)?;
        let scores = g.matmul(att_q, kt)?;
        let scores = g.mul_scalar(scores, scale);
        let probs = g.softmax(scores, 1)?;
        let att = g.matmul(probs, att_v)?;
        h = g.add(att, h)?;
    }
    Ok(h)
}

/// Mask prediction: reshape decoding tokens to the grid, upsample with two
/// stride-2 4x4 transpose convolutions, take per-pixel dot products against
/// the first C rows of the query MLP, bilinear-resize to full resolution and
/// apply the sigmoid.
#[allow(clippy::too_many_arguments)]
pub fn predict_mask(
    g: &mut Graph,
    decoded: NodeId,
    q_updated: NodeId,
    categories: usize,
    grid_hw: (usize, usize),
    out_hw: (usize, usize),
    head: &MaskHeadNodes,
) -> Result<NodeId> {
    let (t, c) = g.value(decoded).dims2()?;
    let (gh, gw) = grid_hw;
    if t != gh * gw {
        return Err(Error::Shape(format!(
            "predict_mask: {t} tokens do not fill a {gh}x{gw} grid"
        )));
    }
    let (rows, _) = g.value(q_updated).dims2()?;
    if rows < categories {
        return Err(Error::Shape(format!(
            "predict_mask: {rows} query rows < {categories} categories"
        )));
    }
    let grid_t = g.transpose2(decoded)?;
    let grid = g.reshape(grid_t, &[c, gh, gw])?;
    // each 4x4 stride-2 transpose conv is cropped by one border pixel so the
    // upsampling is an exact, uniform 2x (otherwise the extra border skews
    // the geometry once the bilinear stage stretches it to full resolution)
    let t1 = g.transpose_conv2d(grid, head.up1, 2)?;
    let t1 = g.crop2d(t1, 1)?;
    let t1 = g.add_channel_bias(t1, head.up1_bias)?;
    let t1 = g.gelu(t1);
    let t2 = g.transpose_conv2d(t1, head.up2, 2)?;
    let t2 = g.crop2d(t2, 1)?;
    let t2 = g.add_channel_bias(t2, head.up2_bias)?;
    let t2 = g.gelu(t2);

    let hidden = g.matmul(q_updated, head.mlp_w1)?;
    let hidden = g.add_row_vector(hidden, head.mlp_b1)?;
    let hidden = g.gelu(hidden);
    let mlp_q = g.matmul(hidden, head.mlp_w2)?;
    let mlp_q = g.add_row_vector(mlp_q, head.mlp_b2)?;
    let q_cat = g.slice_rows(mlp_q, 0, categories)?;

    let (ch2, h2, w2) = g.value(t2).dims3()?;
    let flat = g.reshape(t2, &[ch2, h2 * w2])?;
    let logits = g.matmul(q_cat, flat)?;
    let logits = g.reshape(logits, &[categories, h2, w2])?;
    let full = g.bilinear_resize(logits, out_hw.0, out_hw.1)?;
    Ok(g.sigmoid(full))
}

/// Weighted dice + focal segmentation loss on probabilities in (0,1).
/// Probabilities are clamped to `[1e-7, 1-1e-7]` before the logarithm.
pub fn loss_sem(
    g: &mut Graph,
    probs: NodeId,
    target: NodeId,
    w: &LossWeights,
) -> Result<NodeId> {
    if g.value(probs).shape() != g.value(target).shape() {
        return Err(Error::Shape(format!(
            "loss_sem: prediction {:?} and target {:?} differ",
            g.value(probs).shape(),
            g.value(target).shape()
        )));
    }
    if g.value(target).data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Shape("loss_sem: target must be binary".into()));
    }
    let p = g.clamp(probs, 1e-7, 1.0 - 1e-7);

    // dice = 1 - (2 Σ p·t + eps) / (Σ p + Σ t + eps)
    let pt = g.mul(p, target)?;
    let inter = g.sum(pt);
    let num = g.mul_scalar(inter, 2.0);
    let num = g.add_scalar(num, w.dice_eps);
    let sp = g.sum(p);
    let st = g.sum(target);
    let den = g.add(sp, st)?;
    let den = g.add_scalar(den, w.dice_eps);
    let frac = g.div(num, den)?;
    let dice = g.sub_from_scalar(frac, 1.0);

    // focal = mean( -(1 - p_t)^gamma * ln p_t ), p_t = p·t + (1-p)·(1-t)
    let one_m_p = g.sub_from_scalar(p, 1.0);
    let one_m_t = g.sub_from_scalar(target, 1.0);
    let neg = g.mul(one_m_p, one_m_t)?;
    let p_t = g.add(pt, neg)?;
    let focus = g.sub_from_scalar(p_t, 1.0);
    let focus = g.pow_scalar(focus, w.gamma)?;
    let lp = g.ln(p_t)?;
    let prod = g.mul(focus, lp)?;
    let mean = g.mean(prod);
    let focal = g.mul_scalar(mean, -1.0);

    let a = g.mul_scalar(dice, w.alpha);
    let b = g.mul_scalar(focal, w.beta);
    g.add(a, b)
}
