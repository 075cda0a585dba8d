//! Minimal dense-tensor numerical core.
//!
//! Row-major `f64` storage. Every public operation validates shapes and
//! checks its output for NaN/Inf so numerical faults surface as errors at
//! the operation that produced them instead of propagating silently.

use crate::error::{Error, Result};

/// Dense N-dimensional real array, the carrier for all embeddings, maps and
/// parameters in this crate.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(Error::Shape(format!(
                "zero-sized shape {shape:?} with {} data values",
                data.len()
            )));
        }
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Single-element tensor of shape `[1]`, used for scalar losses.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a shape-`[1]` tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!(
                "item() needs a single-element tensor, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::Shape(format!("expected rank-2 tensor, got {other:?}"))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(Error::Shape(format!("expected rank-3 tensor, got {other:?}"))),
        }
    }

    /// Row-major element access for rank-2 tensors (no bounds besides debug).
    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} values) to {shape:?} ({numel} values)",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{context}: value {v} at flat index {i} (shape {:?})",
                    self.shape
                )));
            }
        }
        Ok(())
    }

    /// Bitwise equality, distinguishing -0.0 from 0.0 (PartialEq does not).
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape, b.shape
        )));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "sub")?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect(),
    })
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mul")?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    })
}

/// Standard matrix product of `a: [m,k]` and `b: [k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul: inner dimensions disagree ([{m},{ka}] x [{kb},{n}])"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * ka..(i + 1) * ka];
        let orow = &mut out[i * n..(i + 1) * n];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[k * n..(k + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    let t = Tensor::new(vec![m, n], out)?;
    t.check_finite("matmul output")?;
    Ok(t)
}

/// Shift-stable softmax along `axis` of a rank-2 tensor.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    if axis > 1 {
        return Err(Error::Shape(format!("softmax: axis {axis} out of range for rank 2")));
    }
    let mut out = vec![0.0; r * c];
    let (slices, len, stride_slice, stride_elem) = if axis == 1 {
        (r, c, c, 1)
    } else {
        (c, r, 1, c)
    };
    for s in 0..slices {
        let base = s * stride_slice;
        let mut max = f64::NEG_INFINITY;
        for e in 0..len {
            max = max.max(x.data[base + e * stride_elem]);
        }
        let mut sum = 0.0;
        for e in 0..len {
            let v = (x.data[base + e * stride_elem] - max).exp();
            out[base + e * stride_elem] = v;
            sum += v;
        }
        for e in 0..len {
            out[base + e * stride_elem] /= sum;
        }
    }
    let t = Tensor::new(vec![r, c], out)?;
    t.check_finite("softmax output")?;
    Ok(t)
}

/// Per-row layer normalization of `x: [r,c]` with affine `gain`/`bias: [c]`.
///
/// Uses population variance; `eps` keeps constant rows at zero instead of
/// dividing by zero.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    if gain.shape() != [c] || bias.shape() != [c] {
        return Err(Error::Shape(format!(
            "layer_norm: gain {:?} / bias {:?} must be [{c}]",
            gain.shape(),
            bias.shape()
        )));
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x.data[i * c..(i + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..c {
            out[i * c + j] = (row[j] - mean) * inv * gain.data[j] + bias.data[j];
        }
    }
    let t = Tensor::new(vec![r, c], out)?;
    t.check_finite("layer_norm output")?;
    Ok(t)
}

/// GELU activation (tanh approximation), elementwise.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    const A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const B: f64 = 0.044_715;
    0.5 * x * (1.0 + (A * (x + B * x * x * x)).tanh())
}

#[inline]
pub fn gelu_derivative(x: f64) -> f64 {
    const A: f64 = 0.797_884_560_802_865_4;
    const B: f64 = 0.044_715;
    let u = A * (x + B * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * A * (1.0 + 3.0 * B * x * x)
}

/// Logistic sigmoid, elementwise; output in (0,1).
pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Valid (no padding) cross-correlation of `x: [C,H,W]` with
/// `kernel: [C',C,kh,kw]` at the given stride.
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    let (c_in, h, w) = x.dims3()?;
    let kshape = kernel.shape();
    if kshape.len() != 4 {
        return Err(Error::Shape(format!(
            "conv2d: kernel must be rank 4, got {kshape:?}"
        )));
    }
    let (c_out, kc, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
    if kc != c_in {
        return Err(Error::Shape(format!(
            "conv2d: kernel input channels {kc} != input channels {c_in}"
        )));
    }
    if stride == 0 {
        return Err(Error::Shape("conv2d: stride must be >= 1".into()));
    }
    if kh > h || kw > w {
        return Err(Error::Shape(format!(
            "conv2d: kernel {kh}x{kw} larger than input {h}x{w}"
        )));
    }
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for ky in 0..kh {
                        let iy = oy * stride + ky;
                        let xrow = (ci * h + iy) * w + ox * stride;
                        let krow = ((co * c_in + ci) * kh + ky) * kw;
                        for kx in 0..kw {
                            acc += x.data[xrow + kx] * kernel.data[krow + kx];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    let t = Tensor::new(vec![c_out, oh, ow], out)?;
    t.check_finite("conv2d output")?;
    Ok(t)
}

/// Adjoint of [`conv2d`] with the same kernel and stride: maps
/// `x: [C',H',W']` back to `[C, (H'-1)*stride+kh, (W'-1)*stride+kw]`.
pub fn transpose_conv2d(x: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    let (c_in, h, w) = x.dims3()?;
    let kshape = kernel.shape();
    if kshape.len() != 4 {
        return Err(Error::Shape(format!(
            "transpose_conv2d: kernel must be rank 4, got {kshape:?}"
        )));
    }
    let (kc_out, c_out, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
    if kc_out != c_in {
        return Err(Error::Shape(format!(
            "transpose_conv2d: kernel leading channels {kc_out} != input channels {c_in}"
        )));
    }
    if stride == 0 {
        return Err(Error::Shape("transpose_conv2d: stride must be >= 1".into()));
    }
    let oh = (h - 1) * stride + kh;
    let ow = (w - 1) * stride + kw;
    let mut out = vec![0.0; c_out * oh * ow];
    for ci in 0..c_in {
        for iy in 0..h {
            for ix in 0..w {
                let v = x.data[(ci * h + iy) * w + ix];
                if v == 0.0 {
                    continue;
                }
                for co in 0..c_out {
                    for ky in 0..kh {
                        let oy = iy * stride + ky;
                        let orow = (co * oh + oy) * ow + ix * stride;
                        let krow = ((ci * c_out + co) * kh + ky) * kw;
                        for kx in 0..kw {
                            out[orow + kx] += v * kernel.data[krow + kx];
                        }
                    }
                }
            }
        }
    }
    let t = Tensor::new(vec![c_out, oh, ow], out)?;
    t.check_finite("transpose_conv2d output")?;
    Ok(t)
}

/// Bilinear interpolation of `x: [C,h,w]` to `[C,out_h,out_w]` under the
/// align-corners-false convention (half-pixel centers, edge clamped).
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("bilinear_resize: output dims must be >= 1".into()));
    }
    let mut out = vec![0.0; c * out_h * out_w];
    for oy in 0..out_h {
        let sy = (oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5;
        let y0 = sy.floor();
        let fy = sy - y0;
        let y0c = (y0 as isize).clamp(0, h as isize - 1) as usize;
        let y1c = (y0 as isize + 1).clamp(0, h as isize - 1) as usize;
        for ox in 0..out_w {
            let sx = (ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5;
            let x0 = sx.floor();
            let fx = sx - x0;
            let x0c = (x0 as isize).clamp(0, w as isize - 1) as usize;
            let x1c = (x0 as isize + 1).clamp(0, w as isize - 1) as usize;
            for ch in 0..c {
                let p00 = x.data[(ch * h + y0c) * w + x0c];
                let p01 = x.data[(ch * h + y0c) * w + x1c];
                let p10 = x.data[(ch * h + y1c) * w + x0c];
                let p11 = x.data[(ch * h + y1c) * w + x1c];
                let top = p00 * (1.0 - fx) + p01 * fx;
                let bot = p10 * (1.0 - fx) + p11 * fx;
                out[(ch * out_h + oy) * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    let t = Tensor::new(vec![c, out_h, out_w], out)?;
    t.check_finite("bilinear_resize output")?;
    Ok(t)
}

/// Bilinear source weights for one output coordinate, shared by the forward
/// pass and the gradient scatter.
pub(crate) fn bilinear_taps(out_len: usize, in_len: usize, o: usize) -> (usize, usize, f64) {
    let s = (o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
    let i0 = s.floor();
    let f = s - i0;
    let i0c = (i0 as isize).clamp(0, in_len as isize - 1) as usize;
    let i1c = (i0 as isize + 1).clamp(0, in_len as isize - 1) as usize;
    (i0c, i1c, f)
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

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let x = rand_tensor(&[3, 4], &mut rng);
        let y = matmul(&eye, &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matmul_hand_2x2() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let y = matmul(&a, &b).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let a = rand_tensor(&[5, 7], &mut rng);
        let b = rand_tensor(&[7, 3], &mut rng);
        let y = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..7 {
                    acc += a.at2(i, k) * b.at2(k, j);
                }
                assert!((y.at2(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let x = Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        let y = softmax(&x, 1).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap();
        let y = softmax(&big, 1).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-9);
        assert!(y.data()[1] < 1e-9);
    }

    #[test]
    fn softmax_direct_evaluation() {
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = softmax(&x, 1).unwrap();
        let expect = [0.09003, 0.24473, 0.66524];
        for (v, e) in y.data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_axis0() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 5.0, 3.0, 5.0]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert!((y.at2(0, 0) + y.at2(1, 0) - 1.0).abs() < 1e-12);
        assert!((y.at2(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::full(&[1, 4], 7.0);
        let g = Tensor::full(&[4], 1.0);
        let b = Tensor::zeros(&[4]);
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        for v in y.data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_point_standardization() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let g = Tensor::full(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        let y = layer_norm(&x, &g, &b, 0.0).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12);
        assert!((y.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = rand_tensor(&[1, 64], &mut rng);
        let g = Tensor::full(&[64], 1.0);
        let b = Tensor::zeros(&[64]);
        let y = layer_norm(&x, &g, &b, 0.0).unwrap();
        let mean = y.data().iter().sum::<f64>() / 64.0;
        let var = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn activations_fixed_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((sigmoid_scalar(30.0) - 1.0).abs() < 1e-9);
        assert!(sigmoid_scalar(-30.0) < 1e-9);
    }

    #[test]
    fn conv2d_one_by_one_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let x = rand_tensor(&[1, 3, 3], &mut rng);
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d(&x, &k, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv2d_window_sum() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &k, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data()[0], 10.0);
    }

    #[test]
    fn conv2d_matches_sliding_window_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = rand_tensor(&[2, 7, 6], &mut rng);
        let k = rand_tensor(&[3, 2, 3, 2], &mut rng);
        for stride in [1, 2] {
            let y = conv2d(&x, &k, stride).unwrap();
            let (c_out, oh, ow) = y.dims3().unwrap();
            assert_eq!((oh, ow), ((7 - 3) / stride + 1, (6 - 2) / stride + 1));
            for co in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..2 {
                                    acc += x.at3(ci, oy * stride + ky, ox * stride + kx)
                                        * k.data()[((co * 2 + ci) * 3 + ky) * 2 + kx];
                                }
                            }
                        }
                        assert!((y.at3(co, oy, ox) - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv2d_kernel_too_large_errors() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(matches!(conv2d(&x, &k, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn transpose_conv2d_adjoint_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let k = rand_tensor(&[1, 1, 4, 4], &mut rng);
        let a = rand_tensor(&[1, 6, 6], &mut rng);
        let ca = conv2d(&a, &k, 2).unwrap();
        let b = rand_tensor(ca.shape(), &mut rng);
        let tb = transpose_conv2d(&b, &k, 2).unwrap();
        assert_eq!(tb.shape(), a.shape());
        let lhs: f64 = ca.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn transpose_conv2d_stamps_kernel_at_delta() {
        let mut x = Tensor::zeros(&[1, 3, 3]);
        x.data_mut()[4] = 1.0; // (1,1)
        let k = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let y = transpose_conv2d(&x, &k, 2).unwrap();
        assert_eq!(y.shape(), &[1, 8, 8]);
        for ky in 0..4 {
            for kx in 0..4 {
                assert_eq!(y.at3(0, 2 + ky, 2 + kx), (ky * 4 + kx) as f64);
            }
        }
        let zero = transpose_conv2d(&Tensor::zeros(&[1, 3, 3]), &k, 2).unwrap();
        assert!(zero.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bilinear_constant_and_monotone() {
        let x = Tensor::full(&[1, 3, 3], 5.0);
        let y = bilinear_resize(&x, 12, 12).unwrap();
        for v in y.data() {
            assert!((v - 5.0).abs() < 1e-12);
        }
        let ramp = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let y = bilinear_resize(&ramp, 2, 4).unwrap();
        let row: Vec<f64> = (0..4).map(|j| y.at3(0, 0, j)).collect();
        for w in row.windows(2) {
            assert!(w[1] >= w[0]);
        }
        assert_eq!(row[0], 0.0);
        assert_eq!(row[3], 1.0);
    }

    #[test]
    fn bilinear_down_up_ramp_error_small() {
        // smooth ramp f(x,y) = (x+y)/30 on a 16x16 grid
        let orig = Tensor::from_fn(&[1, 16, 16], |i| {
            let y = i / 16;
            let x = i % 16;
            (x + y) as f64 / 30.0
        });
        let down = bilinear_resize(&orig, 8, 8).unwrap();
        let up = bilinear_resize(&down, 16, 16).unwrap();
        let max_err = orig
            .data()
            .iter()
            .zip(up.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 0.1, "max err {max_err}");
    }
}
