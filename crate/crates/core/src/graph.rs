//! Reverse-mode gradient accumulation over a recorded operation tape.
//!
//! A [`Graph`] is rebuilt per forward pass: leaves enter via [`Graph::input`],
//! every operation validates shapes eagerly and stores its output, and
//! [`Graph::backward`] walks the tape once in reverse accumulating
//! vector-Jacobian products. [`grad_check`] verifies any supplied gradient
//! against central finite differences.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Input,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    /// c - x
    SubFromScalar(NodeId),
    PowScalar(NodeId, f64),
    Ln(NodeId),
    Clamp(NodeId, f64, f64),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Matmul(NodeId, NodeId),
    Transpose2(NodeId),
    Reshape(NodeId),
    ConcatRows(NodeId, NodeId),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    /// x[r,c] + v[c] broadcast over rows
    AddRowVector(NodeId, NodeId),
    /// x[r,c] * w[r] broadcast over columns
    RowScale(NodeId, NodeId),
    Softmax(NodeId, usize),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Conv2d {
        x: NodeId,
        kernel: NodeId,
        stride: usize,
    },
    TransposeConv2d {
        x: NodeId,
        kernel: NodeId,
        stride: usize,
    },
    /// x[C,H,W] + b[C] broadcast over the spatial plane
    AddChannelBias(NodeId, NodeId),
    /// drop `border` pixels from every spatial edge
    Crop2d(NodeId, usize),
    BilinearResize(NodeId, usize, usize),
    Sum(NodeId),
    Mean(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation over tensors; owns every intermediate value.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::sub(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape("div: shape mismatch".into()));
        }
        let v = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x / y)
                .collect(),
        )?;
        v.check_finite("div output")?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::MulScalar(a, c))
    }

    pub fn sub_from_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| c - x);
        self.push(v, Op::SubFromScalar(a))
    }

    pub fn pow_scalar(&mut self, a: NodeId, p: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.powf(p));
        v.check_finite("pow_scalar output")?;
        Ok(self.push(v, Op::PowScalar(a, p)))
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::ln);
        v.check_finite("ln output")?;
        Ok(self.push(v, Op::Ln(a)))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = tensor::gelu(self.value(a));
        self.push(v, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = tensor::sigmoid(self.value(a));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    pub fn transpose2(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose2()?;
        Ok(self.push(v, Op::Transpose2(a)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        if ca != cb {
            return Err(Error::Shape(format!(
                "concat_rows: column counts differ ({ca} vs {cb})"
            )));
        }
        let mut data = Vec::with_capacity((ra + rb) * ca);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let v = Tensor::new(vec![ra + rb, ca], data)?;
        Ok(self.push(v, Op::ConcatRows(a, b)))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2()?;
        if start > end || end > r {
            return Err(Error::Shape(format!(
                "slice_rows: range {start}..{end} out of bounds for {r} rows"
            )));
        }
        let v = Tensor::new(
            vec![end - start, c],
            self.value(a).data()[start * c..end * c].to_vec(),
        )?;
        Ok(self.push(v, Op::SliceRows(a, start, end)))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2()?;
        if start > end || end > c {
            return Err(Error::Shape(format!(
                "slice_cols: range {start}..{end} out of bounds for {c} cols"
            )));
        }
        let width = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let v = Tensor::new(vec![r, width], data)?;
        Ok(self.push(v, Op::SliceCols(a, start, end)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols: no parts".into()));
        }
        let (r, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (rp, cp) = self.value(p).dims2()?;
            if rp != r {
                return Err(Error::Shape("concat_cols: row counts differ".into()));
            }
            widths.push(cp);
            total += cp;
        }
        let mut data = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &wp) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..r {
                data[i * total + offset..i * total + offset + wp]
                    .copy_from_slice(&src[i * wp..(i + 1) * wp]);
            }
            offset += wp;
        }
        let v = Tensor::new(vec![r, total], data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn add_row_vector(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(v).shape() != [c] {
            return Err(Error::Shape(format!(
                "add_row_vector: vector {:?} must be [{c}]",
                self.value(v).shape()
            )));
        }
        let mut data = self.value(x).data().to_vec();
        let vv = self.value(v).data();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += vv[j];
            }
        }
        let t = Tensor::new(vec![r, c], data)?;
        Ok(self.push(t, Op::AddRowVector(x, v)))
    }

    pub fn row_scale(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(w).shape() != [r] {
            return Err(Error::Shape(format!(
                "row_scale: weights {:?} must be [{r}]",
                self.value(w).shape()
            )));
        }
        let mut data = self.value(x).data().to_vec();
        let wv = self.value(w).data();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] *= wv[i];
            }
        }
        let t = Tensor::new(vec![r, c], data)?;
        Ok(self.push(t, Op::RowScale(x, w)))
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = tensor::softmax(self.value(x), axis)?;
        Ok(self.push(v, Op::Softmax(x, axis)))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let v = tensor::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(v, Op::LayerNorm { x, gain, bias, eps }))
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, stride: usize) -> Result<NodeId> {
        let v = tensor::conv2d(self.value(x), self.value(kernel), stride)?;
        Ok(self.push(v, Op::Conv2d { x, kernel, stride }))
    }

    pub fn transpose_conv2d(&mut self, x: NodeId, kernel: NodeId, stride: usize) -> Result<NodeId> {
        let v = tensor::transpose_conv2d(self.value(x), self.value(kernel), stride)?;
        Ok(self.push(v, Op::TransposeConv2d { x, kernel, stride }))
    }

    pub fn add_channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(x).dims3()?;
        if self.value(b).shape() != [c] {
            return Err(Error::Shape(format!(
                "add_channel_bias: bias {:?} must be [{c}]",
                self.value(b).shape()
            )));
        }
        let mut data = self.value(x).data().to_vec();
        let bv = self.value(b).data();
        for ch in 0..c {
            for i in 0..h * w {
                data[ch * h * w + i] += bv[ch];
            }
        }
        let t = Tensor::new(vec![c, h, w], data)?;
        Ok(self.push(t, Op::AddChannelBias(x, b)))
    }

    /// Symmetric spatial crop, the transpose-conv "padding" adjustment that
    /// restores an exact 2x geometry from a 4x4 stride-2 kernel.
    pub fn crop2d(&mut self, x: NodeId, border: usize) -> Result<NodeId> {
        let (c, h, w) = self.value(x).dims3()?;
        if h <= 2 * border || w <= 2 * border {
            return Err(Error::Shape(format!(
                "crop2d: border {border} leaves nothing of {h}x{w}"
            )));
        }
        let (oh, ow) = (h - 2 * border, w - 2 * border);
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x_ in 0..ow {
                    data[(ch * oh + y) * ow + x_] =
                        self.value(x).at3(ch, y + border, x_ + border);
                }
            }
        }
        let t = Tensor::new(vec![c, oh, ow], data)?;
        Ok(self.push(t, Op::Crop2d(x, border)))
    }

    pub fn bilinear_resize(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let v = tensor::bilinear_resize(self.value(x), out_h, out_w)?;
        Ok(self.push(v, Op::BilinearResize(x, out_h, out_w)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel() as f64;
        let v = Tensor::scalar(self.value(a).data().iter().sum::<f64>() / n);
        self.push(v, Op::Mean(a))
    }

    /// Backpropagate from a scalar (shape `[1]`) output node and return the
    /// gradient of every node reachable from it.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        if self.nodes[output.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward: output must be a scalar, shape is {:?}",
                self.nodes[output.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let up = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_parents(idx, &up, &mut grads)?;
            grads[idx] = Some(up);
        }
        Ok(Gradients { grads })
    }

    fn accumulate_parents(
        &self,
        idx: usize,
        up: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let acc = |grads: &mut [Option<Tensor>], id: NodeId, contrib: Tensor| -> Result<()> {
            match &mut grads[id.0] {
                Some(g) => {
                    *g = tensor::add(g, &contrib)?;
                }
                slot @ None => *slot = Some(contrib),
            }
            Ok(())
        };
        match &self.nodes[idx].op {
            Op::Input => {}
            Op::Add(a, b) => {
                acc(grads, *a, up.clone())?;
                acc(grads, *b, up.clone())?;
            }
            Op::Sub(a, b) => {
                acc(grads, *a, up.clone())?;
                acc(grads, *b, up.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                let da = tensor::mul(up, self.value(*b))?;
                let db = tensor::mul(up, self.value(*a))?;
                acc(grads, *a, da)?;
                acc(grads, *b, db)?;
            }
            Op::Div(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let da = Tensor::new(
                    up.shape().to_vec(),
                    up.data().iter().zip(vb.data()).map(|(u, y)| u / y).collect(),
                )?;
                let db = Tensor::new(
                    up.shape().to_vec(),
                    up.data()
                        .iter()
                        .zip(va.data().iter().zip(vb.data()))
                        .map(|(u, (x, y))| -u * x / (y * y))
                        .collect(),
                )?;
                acc(grads, *a, da)?;
                acc(grads, *b, db)?;
            }
            Op::AddScalar(a) => acc(grads, *a, up.clone())?,
            Op::MulScalar(a, c) => acc(grads, *a, up.map(|v| v * c))?,
            Op::SubFromScalar(a) => acc(grads, *a, up.map(|v| -v))?,
            Op::PowScalar(a, p) => {
                let va = self.value(*a);
                let da = Tensor::new(
                    up.shape().to_vec(),
                    up.data()
                        .iter()
                        .zip(va.data())
                        .map(|(u, x)| u * p * x.powf(p - 1.0))
                        .collect(),
                )?;
                acc(grads, *a, da)?;
            }
            Op::Ln(a) => {
                let va = self.value(*a);
                let da = Tensor::new(
                    up.shape().to_vec(),
                    up.data().iter().zip(va.data()).map(|(u, x)| u / x).collect(),
                )?;
                acc(grads, *a, da)?;
            }
            Op::Clamp(a, lo, hi) => {
                let va = self.value(*a);
                let da = Tensor::new(
                    up.shape().to_vec(),
                    up.data()
                        .iter()
                        .zip(va.data())
                        .map(|(u, x)| if *x > *lo && *x < *hi { *u } else { 0.0 })
                        .collect(),
                )?;
                acc(grads, *a, da)?;
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let da = Tensor::new(
                    up.shape().to_vec(),
                    up.data()
                        .iter()
                        .zip(va.data())
                        .map(|(u, x)| u * tensor::gelu_derivative(*x))
                        .collect(),
                )?;
                acc(grads, *a, da)?;
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let da = Tensor::new(
                    up.shape().to_vec(),
                    up.data()
                        .iter()
                        .zip(y.data())
                        .map(|(u, s)| u * s * (1.0 - s))
                        .collect(),
                )?;
                acc(grads, *a, da)?;
            }
            Op::Matmul(a, b) => {
                let bt = self.value(*b).transpose2()?;
                let at = self.value(*a).transpose2()?;
                let da = tensor::matmul(up, &bt)?;
                let db = tensor::matmul(&at, up)?;
                acc(grads, *a, da)?;
                acc(grads, *b, db)?;
            }
            Op::Transpose2(a) => acc(grads, *a, up.transpose2()?)?,
            Op::Reshape(a) => acc(grads, *a, up.reshape(self.value(*a).shape())?)?,
            Op::ConcatRows(a, b) => {
                let (ra, ca) = self.value(*a).dims2()?;
                let (rb, _) = self.value(*b).dims2()?;
                let da = Tensor::new(vec![ra, ca], up.data()[..ra * ca].to_vec())?;
                let db = Tensor::new(vec![rb, ca], up.data()[ra * ca..].to_vec())?;
                acc(grads, *a, da)?;
                acc(grads, *b, db)?;
            }
            Op::SliceRows(a, start, end) => {
                let (r, c) = self.value(*a).dims2()?;
                let mut da = Tensor::zeros(&[r, c]);
                da.data_mut()[start * c..end * c].copy_from_slice(up.data());
                acc(grads, *a, da)?;
            }
            Op::SliceCols(a, start, end) => {
                let (r, c) = self.value(*a).dims2()?;
                let width = end - start;
                let mut da = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    da.data_mut()[i * c + start..i * c + end]
                        .copy_from_slice(&up.data()[i * width..(i + 1) * width]);
                }
                acc(grads, *a, da)?;
            }
            Op::ConcatCols(parts) => {
                let (r, total) = self.nodes[idx].value.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let (_, wp) = self.value(p).dims2()?;
                    let mut dp = Tensor::zeros(&[r, wp]);
                    for i in 0..r {
                        dp.data_mut()[i * wp..(i + 1) * wp]
                            .copy_from_slice(&up.data()[i * total + offset..i * total + offset + wp]);
                    }
                    acc(grads, p, dp)?;
                    offset += wp;
                }
            }
            Op::AddRowVector(x, v) => {
                let (r, c) = self.value(*x).dims2()?;
                acc(grads, *x, up.clone())?;
                let mut dv = Tensor::zeros(&[c]);
                for i in 0..r {
                    for j in 0..c {
                        dv.data_mut()[j] += up.data()[i * c + j];
                    }
                }
                acc(grads, *v, dv)?;
            }
            Op::RowScale(x, w) => {
                let (r, c) = self.value(*x).dims2()?;
                let wv = self.value(*w).data();
                let xv = self.value(*x).data();
                let mut dx = Tensor::zeros(&[r, c]);
                let mut dw = Tensor::zeros(&[r]);
                for i in 0..r {
                    for j in 0..c {
                        dx.data_mut()[i * c + j] = up.data()[i * c + j] * wv[i];
                        dw.data_mut()[i] += up.data()[i * c + j] * xv[i * c + j];
                    }
                }
                acc(grads, *x, dx)?;
                acc(grads, *w, dw)?;
            }
            Op::Softmax(x, axis) => {
                let y = &self.nodes[idx].value;
                let (r, c) = y.dims2()?;
                let mut dx = Tensor::zeros(&[r, c]);
                let (slices, len, stride_slice, stride_elem) = if *axis == 1 {
                    (r, c, c, 1)
                } else {
                    (c, r, 1, c)
                };
                for s in 0..slices {
                    let base = s * stride_slice;
                    let mut dot = 0.0;
                    for e in 0..len {
                        let k = base + e * stride_elem;
                        dot += up.data()[k] * y.data()[k];
                    }
                    for e in 0..len {
                        let k = base + e * stride_elem;
                        dx.data_mut()[k] = y.data()[k] * (up.data()[k] - dot);
                    }
                }
                acc(grads, *x, dx)?;
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let vx = self.value(*x);
                let vg = self.value(*gain);
                let (r, c) = vx.dims2()?;
                let mut dx = Tensor::zeros(&[r, c]);
                let mut dg = Tensor::zeros(&[c]);
                let mut db = Tensor::zeros(&[c]);
                let n = c as f64;
                for i in 0..r {
                    let row = &vx.data()[i * c..(i + 1) * c];
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let urow = &up.data()[i * c..(i + 1) * c];
                    let mut m_dxhat = 0.0;
                    let mut m_dxhat_xhat = 0.0;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = urow[j] * vg.data()[j];
                        dg.data_mut()[j] += urow[j] * xhat;
                        db.data_mut()[j] += urow[j];
                        m_dxhat += dxhat;
                        m_dxhat_xhat += dxhat * xhat;
                    }
                    m_dxhat /= n;
                    m_dxhat_xhat /= n;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = urow[j] * vg.data()[j];
                        dx.data_mut()[i * c + j] = (dxhat - m_dxhat - xhat * m_dxhat_xhat) * inv;
                    }
                }
                acc(grads, *x, dx)?;
                acc(grads, *gain, dg)?;
                acc(grads, *bias, db)?;
            }
            Op::Conv2d { x, kernel, stride } => {
                let vx = self.value(*x);
                let vk = self.value(*kernel);
                let (c_in, h, w) = vx.dims3()?;
                let ks = vk.shape();
                let (c_out, kh, kw) = (ks[0], ks[2], ks[3]);
                let (_, oh, ow) = self.nodes[idx].value.dims3()?;
                let s = *stride;
                let mut dx = Tensor::zeros(&[c_in, h, w]);
                let mut dk = Tensor::zeros(ks);
                for co in 0..c_out {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let u = up.data()[(co * oh + oy) * ow + ox];
                            if u == 0.0 {
                                continue;
                            }
                            for ci in 0..c_in {
                                for ky in 0..kh {
                                    let iy = oy * s + ky;
                                    let xrow = (ci * h + iy) * w + ox * s;
                                    let krow = ((co * c_in + ci) * kh + ky) * kw;
                                    for kx in 0..kw {
                                        dx.data_mut()[xrow + kx] += u * vk.data()[krow + kx];
                                        dk.data_mut()[krow + kx] += u * vx.data()[xrow + kx];
                                    }
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, dx)?;
                acc(grads, *kernel, dk)?;
            }
            Op::TransposeConv2d { x, kernel, stride } => {
                // d/dx of the scatter is the forward conv of the upstream grad
                let vx = self.value(*x);
                let vk = self.value(*kernel);
                let dx = tensor::conv2d(up, vk, *stride)?;
                let (c_in, h, w) = vx.dims3()?;
                let ks = vk.shape();
                let (c_out, kh, kw) = (ks[1], ks[2], ks[3]);
                let s = *stride;
                let (_, uoh, uow) = up.dims3()?;
                let mut dk = Tensor::zeros(ks);
                for ci in 0..c_in {
                    for iy in 0..h {
                        for ix in 0..w {
                            let v = vx.data()[(ci * h + iy) * w + ix];
                            if v == 0.0 {
                                continue;
                            }
                            for co in 0..c_out {
                                for ky in 0..kh {
                                    let oy = iy * s + ky;
                                    let urow = (co * uoh + oy) * uow + ix * s;
                                    let krow = ((ci * c_out + co) * kh + ky) * kw;
                                    for kx in 0..kw {
                                        dk.data_mut()[krow + kx] += v * up.data()[urow + kx];
                                    }
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, dx)?;
                acc(grads, *kernel, dk)?;
            }
            Op::AddChannelBias(x, b) => {
                let (c, h, w) = self.value(*x).dims3()?;
                acc(grads, *x, up.clone())?;
                let mut db = Tensor::zeros(&[c]);
                for ch in 0..c {
                    db.data_mut()[ch] = up.data()[ch * h * w..(ch + 1) * h * w].iter().sum();
                }
                acc(grads, *b, db)?;
            }
            Op::Crop2d(x, border) => {
                let (c, h, w) = self.value(*x).dims3()?;
                let (oh, ow) = (h - 2 * border, w - 2 * border);
                let mut dx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for y in 0..oh {
                        for x_ in 0..ow {
                            dx.data_mut()[(ch * h + y + border) * w + x_ + border] =
                                up.data()[(ch * oh + y) * ow + x_];
                        }
                    }
                }
                acc(grads, *x, dx)?;
            }
            Op::BilinearResize(x, out_h, out_w) => {
                let (c, h, w) = self.value(*x).dims3()?;
                let mut dx = Tensor::zeros(&[c, h, w]);
                for oy in 0..*out_h {
                    let (y0, y1, fy) = tensor::bilinear_taps(*out_h, h, oy);
                    for ox in 0..*out_w {
                        let (x0, x1, fx) = tensor::bilinear_taps(*out_w, w, ox);
                        for ch in 0..c {
                            let u = up.data()[(ch * out_h + oy) * out_w + ox];
                            dx.data_mut()[(ch * h + y0) * w + x0] += u * (1.0 - fx) * (1.0 - fy);
                            dx.data_mut()[(ch * h + y0) * w + x1] += u * fx * (1.0 - fy);
                            dx.data_mut()[(ch * h + y1) * w + x0] += u * (1.0 - fx) * fy;
                            dx.data_mut()[(ch * h + y1) * w + x1] += u * fx * fy;
                        }
                    }
                }
                acc(grads, *x, dx)?;
            }
            Op::Sum(a) => {
                let u = up.data()[0];
                acc(grads, *a, Tensor::full(self.value(*a).shape(), u))?;
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                let u = up.data()[0] / n;
                acc(grads, *a, Tensor::full(self.value(*a).shape(), u))?;
            }
        }
        Ok(())
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

/// Compare `analytic` against central finite differences of `f` at `params`.
///
/// The relative error denominator is `max(|g|, |g_fd|, 1e-8)` per coordinate,
/// so exactly-zero gradients compare clean.
pub fn grad_check<F>(
    mut f: F,
    params: &Tensor,
    analytic: &Tensor,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("grad_check: h must be > 0, got {h}")));
    }
    if analytic.shape() != params.shape() {
        return Err(Error::Shape(format!(
            "grad_check: analytic gradient {:?} must match params {:?}",
            analytic.shape(),
            params.shape()
        )));
    }
    let f0 = f(params)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite(format!("grad_check: f(params) = {f0}")));
    }
    let mut max_rel = 0.0;
    let mut worst = 0;
    let mut probe = params.clone();
    for i in 0..params.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "grad_check: perturbed evaluation at index {i} gave {fp} / {fm}"
            )));
        }
        let g_fd = (fp - fm) / (2.0 * h);
        let g = analytic.data()[i];
        let denom = g.abs().max(g_fd.abs()).max(1e-8);
        let rel = (g - g_fd).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    Ok(GradCheckReport {
        max_relative_error: max_rel,
        worst_index: worst,
        passed: max_rel <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha12Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Gradient-check a single op: loss = sum(weights ⊙ build(x)).
    fn check_unary(
        shape: &[usize],
        seed: u64,
        build: impl Fn(&mut Graph, NodeId) -> Result<NodeId>,
    ) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let x0 = rand_tensor(shape, &mut rng);
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let y = build(&mut g, x).unwrap();
        let weights = rand_tensor(g.value(y).shape(), &mut rng);
        let w = g.input(weights.clone());
        let prod = g.mul(y, w).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get(x).unwrap().clone();
        let report = grad_check(
            |p| {
                let mut g = Graph::new();
                let x = g.input(p.clone());
                let y = build(&mut g, x)?;
                let w = g.input(weights.clone());
                let prod = g.mul(y, w)?;
                let loss = g.sum(prod);
                g.value(loss).item()
            },
            &x0,
            &analytic,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(
            report.passed,
            "max rel err {} at {}",
            report.max_relative_error, report.worst_index
        );
    }

    #[test]
    fn gradients_elementwise_ops() {
        check_unary(&[2, 3], 10, |g, x| Ok(g.gelu(x)));
        check_unary(&[2, 3], 11, |g, x| Ok(g.sigmoid(x)));
        check_unary(&[2, 3], 12, |g, x| {
            let s = g.sigmoid(x);
            let c = g.clamp(s, 1e-7, 1.0 - 1e-7);
            g.ln(c)
        });
        check_unary(&[2, 3], 13, |g, x| {
            let s = g.sigmoid(x); // keep base positive for powf
            g.pow_scalar(s, 2.0)
        });
        check_unary(&[2, 3], 14, |g, x| Ok(g.sub_from_scalar(x, 1.5)));
        check_unary(&[2, 3], 15, |g, x| Ok(g.mul_scalar(x, -2.5)));
        check_unary(&[2, 3], 16, |g, x| Ok(g.add_scalar(x, 0.7)));
    }

    #[test]
    fn gradients_binary_ops() {
        let mut rng = ChaCha12Rng::seed_from_u64(20);
        let other = rand_tensor(&[2, 3], &mut rng);
        let o2 = other.clone();
        check_unary(&[2, 3], 21, move |g, x| {
            let b = g.input(other.clone());
            g.mul(x, b)
        });
        check_unary(&[2, 3], 22, move |g, x| {
            let b = g.input(o2.map(|v| v + 2.5)); // keep denominator away from 0
            g.div(x, b)
        });
    }

    #[test]
    fn gradients_matmul_and_structure() {
        let mut rng = ChaCha12Rng::seed_from_u64(30);
        let b = rand_tensor(&[3, 4], &mut rng);
        check_unary(&[2, 3], 31, move |g, x| {
            let bn = g.input(b.clone());
            g.matmul(x, bn)
        });
        check_unary(&[3, 4], 32, |g, x| g.transpose2(x));
        check_unary(&[2, 6], 33, |g, x| g.reshape(x, &[3, 4]));
        check_unary(&[4, 3], 34, |g, x| {
            let top = g.slice_rows(x, 0, 2)?;
            let bot = g.slice_rows(x, 2, 4)?;
            g.concat_rows(bot, top)
        });
        check_unary(&[3, 6], 35, |g, x| {
            let l = g.slice_cols(x, 0, 2)?;
            let r = g.slice_cols(x, 2, 6)?;
            g.concat_cols(&[r, l])
        });
    }

    #[test]
    fn gradients_broadcast_ops() {
        let mut rng = ChaCha12Rng::seed_from_u64(40);
        let v = rand_tensor(&[4], &mut rng);
        check_unary(&[3, 4], 41, move |g, x| {
            let vn = g.input(v.clone());
            g.add_row_vector(x, vn)
        });
        let w = rand_tensor(&[3], &mut rng);
        check_unary(&[3, 4], 42, move |g, x| {
            let wn = g.input(w.clone());
            g.row_scale(x, wn)
        });
        // and gradients w.r.t. the broadcast operand itself
        let base = rand_tensor(&[3, 4], &mut rng);
        check_unary(&[4], 43, move |g, v| {
            let xn = g.input(base.clone());
            g.add_row_vector(xn, v)
        });
        let base2 = rand_tensor(&[3, 4], &mut rng);
        check_unary(&[3], 44, move |g, w| {
            let xn = g.input(base2.clone());
            g.row_scale(xn, w)
        });
    }

    #[test]
    fn gradients_softmax_layernorm() {
        check_unary(&[3, 5], 50, |g, x| g.softmax(x, 1));
        check_unary(&[5, 3], 51, |g, x| g.softmax(x, 0));
        let mut rng = ChaCha12Rng::seed_from_u64(52);
        let gain = rand_tensor(&[5], &mut rng);
        let bias = rand_tensor(&[5], &mut rng);
        let (g2, b2) = (gain.clone(), bias.clone());
        check_unary(&[3, 5], 53, move |g, x| {
            let gn = g.input(gain.clone());
            let bn = g.input(bias.clone());
            g.layer_norm(x, gn, bn, 1e-5)
        });
        // w.r.t. gain
        let x0 = rand_tensor(&[3, 5], &mut rng);
        let xc = x0.clone();
        check_unary(&[5], 54, move |g, gn| {
            let xn = g.input(xc.clone());
            let bn = g.input(b2.clone());
            g.layer_norm(xn, gn, bn, 1e-5)
        });
        let _ = g2;
    }

    #[test]
    fn gradients_spatial_ops() {
        let mut rng = ChaCha12Rng::seed_from_u64(60);
        let k = rand_tensor(&[2, 1, 2, 2], &mut rng);
        let kc = k.clone();
        check_unary(&[1, 6, 6], 61, move |g, x| {
            let kn = g.input(k.clone());
            g.conv2d(x, kn, 2)
        });
        let x0 = rand_tensor(&[1, 6, 6], &mut rng);
        check_unary(&[2, 1, 2, 2], 62, move |g, kn| {
            let xn = g.input(x0.clone());
            g.conv2d(xn, kn, 2)
        });
        let kt = rand_tensor(&[2, 1, 4, 4], &mut rng);
        let ktc = kt.clone();
        check_unary(&[2, 3, 3], 63, move |g, x| {
            let kn = g.input(kt.clone());
            g.transpose_conv2d(x, kn, 2)
        });
        let xt = rand_tensor(&[2, 3, 3], &mut rng);
        check_unary(&[2, 1, 4, 4], 64, move |g, kn| {
            let xn = g.input(xt.clone());
            g.transpose_conv2d(xn, kn, 2)
        });
        check_unary(&[2, 4, 4], 65, |g, x| g.bilinear_resize(x, 7, 9));
        check_unary(&[2, 5, 5], 66, |g, x| g.bilinear_resize(x, 3, 2));
        check_unary(&[2, 5, 6], 68, |g, x| g.crop2d(x, 1));
        let b = rand_tensor(&[2], &mut rng);
        check_unary(&[2, 3, 3], 67, move |g, x| {
            let bn = g.input(b.clone());
            g.add_channel_bias(x, bn)
        });
        let _ = (kc, ktc);
    }

    #[test]
    fn gradients_reductions() {
        check_unary(&[3, 4], 70, |g, x| {
            let m = g.mean(x);
            Ok(g.mul_scalar(m, 3.0))
        });
        check_unary(&[3, 4], 71, |g, x| {
            let s = g.sum(x);
            Ok(g.mul_scalar(s, 0.5))
        });
    }

    #[test]
    fn grad_check_quadratic() {
        let p = Tensor::scalar(3.0);
        let analytic = Tensor::scalar(6.0);
        let report = grad_check(|t| Ok(t.data()[0] * t.data()[0]), &p, &analytic, 1e-5, 1e-6).unwrap();
        assert!(report.passed, "rel err {}", report.max_relative_error);
    }

    #[test]
    fn grad_check_detects_corrupted_gradient() {
        let p = Tensor::scalar(3.0);
        let corrupted = Tensor::scalar(6.0 * 1.01);
        let report =
            grad_check(|t| Ok(t.data()[0] * t.data()[0]), &p, &corrupted, 1e-5, 1e-3).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn grad_check_rejects_non_finite() {
        let p = Tensor::scalar(0.0);
        let analytic = Tensor::scalar(0.0);
        let err = grad_check(|_| Ok(f64::NAN), &p, &analytic, 1e-5, 1e-4);
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn grad_check_dice_loss_toy_model() {
        // two-parameter model: p_i = sigmoid(w0 * x_i + w1), dice loss vs a
        // fixed binary target
        let xs = [0.5, -1.0, 2.0, 0.1];
        let ts = [1.0, 0.0, 1.0, 0.0];
        let eval = |w: &Tensor| -> Result<f64> {
            let mut g = Graph::new();
            let x = g.input(Tensor::new(vec![4, 1], xs.to_vec())?);
            let wv = g.input(Tensor::new(vec![1, 1], vec![w.data()[0]])?);
            let b = g.input(Tensor::new(vec![1], vec![w.data()[1]])?);
            let lin = g.matmul(x, wv)?;
            let lin = g.add_row_vector(lin, b)?;
            let p = g.sigmoid(lin);
            let t = g.input(Tensor::new(vec![4, 1], ts.to_vec())?);
            let pt = g.mul(p, t)?;
            let num = g.sum(pt);
            let num = g.mul_scalar(num, 2.0);
            let num = g.add_scalar(num, 1.0);
            let sp = g.sum(p);
            let st = g.sum(t);
            let den = g.add(sp, st)?;
            let den = g.add_scalar(den, 1.0);
            let frac = g.div(num, den)?;
            let loss = g.sub_from_scalar(frac, 1.0);
            g.value(loss).item()
        };
        let w0 = Tensor::new(vec![2], vec![0.3, -0.2]).unwrap();
        // analytic gradient via the tape
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![4, 1], xs.to_vec()).unwrap());
        let wv = g.input(Tensor::new(vec![1, 1], vec![w0.data()[0]]).unwrap());
        let b = g.input(Tensor::new(vec![1], vec![w0.data()[1]]).unwrap());
        let lin = g.matmul(x, wv).unwrap();
        let lin = g.add_row_vector(lin, b).unwrap();
        let p = g.sigmoid(lin);
        let t = g.input(Tensor::new(vec![4, 1], ts.to_vec()).unwrap());
        let pt = g.mul(p, t).unwrap();
        let num = g.sum(pt);
        let num = g.mul_scalar(num, 2.0);
        let num = g.add_scalar(num, 1.0);
        let sp = g.sum(p);
        let st = g.sum(t);
        let den = g.add(sp, st).unwrap();
        let den = g.add_scalar(den, 1.0);
        let frac = g.div(num, den).unwrap();
        let loss = g.sub_from_scalar(frac, 1.0);
        let grads = g.backward(loss).unwrap();
        let analytic = Tensor::new(
            vec![2],
            vec![
                grads.get(wv).unwrap().data()[0],
                grads.get(b).unwrap().data()[0],
            ],
        )
        .unwrap();
        let report = grad_check(eval, &w0, &analytic, 1e-5, 1e-4).unwrap();
        assert!(report.passed, "rel err {}", report.max_relative_error);
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn values_are_deterministic() {
        let run = || {
            let mut rng = ChaCha12Rng::seed_from_u64(99);
            let a = rand_tensor(&[4, 4], &mut rng);
            let b = rand_tensor(&[4, 4], &mut rng);
            let mut g = Graph::new();
            let an = g.input(a);
            let bn = g.input(b);
            let mm = g.matmul(an, bn).unwrap();
            let sm = g.softmax(mm, 1).unwrap();
            g.value(sm).clone()
        };
        assert!(run().bits_eq(&run()));
    }
}
