//! Gaussian-kernel point prompts: turn single-point annotations into a
//! normalized density raster, semantic prompt embeddings (via a small
//! trainable conv stack aligned to the encoder token grid) and position
//! prompt embeddings (fixed Fourier features plus one learned vector).

use crate::encoder::PATCH;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::instance::InstanceMap;
use crate::params::{gaussian, seed_stream};
use crate::tensor::Tensor;

/// Single-point annotations (x = column, y = row), all inside the image.
/// Duplicates are allowed: two nuclei may share a centroid pixel at low
/// resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PointPromptSet {
    pub points: Vec<(usize, usize)>,
    pub width: usize,
    pub height: usize,
}

impl PointPromptSet {
    pub fn new(points: Vec<(usize, usize)>, width: usize, height: usize) -> Result<Self> {
        for &(x, y) in &points {
            if x >= width || y >= height {
                return Err(Error::Shape(format!(
                    "point ({x},{y}) outside {width}x{height} image"
                )));
            }
        }
        Ok(PointPromptSet {
            points,
            width,
            height,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Non-negative density raster; each interior point deposits unit mass over
/// its (2r+1)^2 window.
#[derive(Clone, Debug)]
pub struct DensityMap {
    pub raster: Tensor,
    pub radius: usize,
    pub sigma: f64,
}

/// Isotropic Gaussian on the integer grid `[-r, r]^2`, scaled so the window
/// sums to exactly one. Symmetric under rotation and reflection, maximal at
/// the center.
pub fn gaussian_kernel(r: usize, sigma: f64) -> Result<Tensor> {
    if sigma <= 0.0 {
        return Err(Error::Config(format!("gaussian_kernel: sigma must be > 0, got {sigma}")));
    }
    let side = 2 * r + 1;
    let mut data = vec![0.0; side * side];
    let mut total = 0.0;
    for (i, v) in data.iter_mut().enumerate() {
        let dy = (i / side) as f64 - r as f64;
        let dx = (i % side) as f64 - r as f64;
        *v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        total += *v;
    }
    for v in &mut data {
        *v /= total;
    }
    Tensor::new(vec![side, side], data)
}

/// Sum of truncated kernels stamped at each point. Kernels are clipped at
/// the image border without re-normalization, so border points contribute
/// less than unit mass; interior points contribute exactly one.
pub fn render_density(pts: &PointPromptSet, r: usize, sigma: f64) -> Result<DensityMap> {
    let kernel = gaussian_kernel(r, sigma)?;
    let side = 2 * r + 1;
    let (h, w) = (pts.height, pts.width);
    let mut raster = vec![0.0; h * w];
    for &(px, py) in &pts.points {
        for ky in 0..side {
            let y = py as isize + ky as isize - r as isize;
            if y < 0 || y >= h as isize {
                continue;
            }
            for kx in 0..side {
                let x = px as isize + kx as isize - r as isize;
                if x < 0 || x >= w as isize {
                    continue;
                }
                raster[y as usize * w + x as usize] += kernel.data()[ky * side + kx];
            }
        }
    }
    Ok(DensityMap {
        raster: Tensor::new(vec![h, w], raster)?,
        radius: r,
        sigma,
    })
}

/// Trainable conv stack turning the density raster into semantic prompt
/// tokens. Two stride-2 2x2 convolutions (LayerNorm over channels after the
/// first, GELU activations) downsample by 4; a third stride-4 4x4
/// convolution carries the remaining 4x and projects to the prompt
/// channels, so the output token grid always matches the encoder's and each
/// token reads its full 16x16 cell (a 2x2 kernel at stride 4 would see only
/// the top-left quarter).
#[derive(Clone)]
pub struct PromptConvParams {
    pub conv1: Tensor,
    pub bias1: Tensor,
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
    pub conv2: Tensor,
    pub bias2: Tensor,
    pub conv3: Tensor,
    pub bias3: Tensor,
}

impl PromptConvParams {
    /// Channel plan: 1 -> c1 -> c2 -> c_p with c1 = max(c_p/16, 2),
    /// c2 = max(c_p/4, 4).
    pub fn channels(prompt_dim: usize) -> (usize, usize) {
        ((prompt_dim / 16).max(2), (prompt_dim / 4).max(4))
    }

    pub fn zeros(prompt_dim: usize) -> Self {
        let (c1, c2) = Self::channels(prompt_dim);
        PromptConvParams {
            conv1: Tensor::zeros(&[c1, 1, 2, 2]),
            bias1: Tensor::zeros(&[c1]),
            norm_gain: Tensor::full(&[c1], 1.0),
            norm_bias: Tensor::zeros(&[c1]),
            conv2: Tensor::zeros(&[c2, c1, 2, 2]),
            bias2: Tensor::zeros(&[c2]),
            conv3: Tensor::zeros(&[prompt_dim, c2, 4, 4]),
            bias3: Tensor::zeros(&[prompt_dim]),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> PromptConvNodes {
        PromptConvNodes {
            conv1: g.input(self.conv1.clone()),
            bias1: g.input(self.bias1.clone()),
            norm_gain: g.input(self.norm_gain.clone()),
            norm_bias: g.input(self.norm_bias.clone()),
            conv2: g.input(self.conv2.clone()),
            bias2: g.input(self.bias2.clone()),
            conv3: g.input(self.conv3.clone()),
            bias3: g.input(self.bias3.clone()),
        }
    }
}

pub struct PromptConvNodes {
    pub conv1: NodeId,
    pub bias1: NodeId,
    pub norm_gain: NodeId,
    pub norm_bias: NodeId,
    pub conv2: NodeId,
    pub bias2: NodeId,
    pub conv3: NodeId,
    pub bias3: NodeId,
}

/// LayerNorm over the channel axis at every spatial position of a
/// `[C,H,W]` node.
fn channel_norm(g: &mut Graph, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
    let (c, h, w) = g.value(x).dims3()?;
    let flat = g.reshape(x, &[c, h * w])?;
    let cols = g.transpose2(flat)?;
    let normed = g.layer_norm(cols, gain, bias, 1e-6)?;
    let back = g.transpose2(normed)?;
    g.reshape(back, &[c, h, w])
}

/// Semantic prompt embeddings from a density map, flattened row-major to
/// `[T, c_p]` tokens.
pub fn encode_semantic_prompt(
    g: &mut Graph,
    density: &DensityMap,
    params: &PromptConvNodes,
) -> Result<NodeId> {
    let (h, w) = density.raster.dims2()?;
    if h % PATCH != 0 || w % PATCH != 0 {
        return Err(Error::Shape(format!(
            "density map {h}x{w} not divisible by the {PATCH}-pixel token grid"
        )));
    }
    let img = density.raster.reshape(&[1, h, w])?;
    let x = g.input(img);
    let x = g.conv2d(x, params.conv1, 2)?;
    let x = g.add_channel_bias(x, params.bias1)?;
    let x = channel_norm(g, x, params.norm_gain, params.norm_bias)?;
    let x = g.gelu(x);
    let x = g.conv2d(x, params.conv2, 2)?;
    let x = g.add_channel_bias(x, params.bias2)?;
    let x = g.gelu(x);
    let x = g.conv2d(x, params.conv3, 4)?;
    let x = g.add_channel_bias(x, params.bias3)?;
    let (cp, gh, gw) = g.value(x).dims3()?;
    let flat = g.reshape(x, &[cp, gh * gw])?;
    g.transpose2(flat)
}

/// Fixed random-Fourier positional features over normalized coordinates,
/// shared by position prompts and the decoder's image-token positions.
#[derive(Clone)]
pub struct PositionEncoder {
    /// `[2, c_p/2]` frequency matrix, fixed at construction.
    freqs: Tensor,
    dim: usize,
}

impl PositionEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(Error::Config(format!(
                "position encoding dim must be even, got {dim}"
            )));
        }
        let mut rng = seed_stream(seed, "fourier");
        Ok(PositionEncoder {
            freqs: gaussian(&[2, dim / 2], 0.0, 1.0, &mut rng),
            dim,
        })
    }

    /// Encode normalized coordinates in [0,1]^2 to `[sin(2π p B), cos(2π p B)]`.
    fn encode(&self, nx: f64, ny: f64) -> Vec<f64> {
        let half = self.dim / 2;
        let mut out = vec![0.0; self.dim];
        for j in 0..half {
            let phase = 2.0
                * std::f64::consts::PI
                * (nx * self.freqs.at2(0, j) + ny * self.freqs.at2(1, j));
            out[j] = phase.sin();
            out[half + j] = phase.cos();
        }
        out
    }

    /// One row per point: `[L, c_p]` (an empty set yields a 0-row tensor).
    pub fn encode_points(&self, pts: &PointPromptSet) -> Tensor {
        let mut data = Vec::with_capacity(pts.len() * self.dim);
        for &(x, y) in &pts.points {
            let nx = (x as f64 + 0.5) / pts.width as f64;
            let ny = (y as f64 + 0.5) / pts.height as f64;
            data.extend(self.encode(nx, ny));
        }
        Tensor::new(vec![pts.len(), self.dim], data).expect("by construction")
    }

    /// Token-center encodings for a `gh x gw` grid: `[gh*gw, c_p]`.
    pub fn encode_grid(&self, gh: usize, gw: usize) -> Tensor {
        let mut data = Vec::with_capacity(gh * gw * self.dim);
        for gy in 0..gh {
            for gx in 0..gw {
                let nx = (gx as f64 + 0.5) / gw as f64;
                let ny = (gy as f64 + 0.5) / gh as f64;
                data.extend(self.encode(nx, ny));
            }
        }
        Tensor::new(vec![gh * gw, self.dim], data).expect("by construction")
    }
}

/// Position prompt embeddings: the fixed Fourier encoding of each point plus
/// one shared learned point embedding (a graph input so it trains).
pub fn encode_position_prompt(
    g: &mut Graph,
    pts: &PointPromptSet,
    encoder: &PositionEncoder,
    point_embed: NodeId,
) -> Result<NodeId> {
    let fixed = encoder.encode_points(pts);
    let base = g.input(fixed);
    if pts.is_empty() {
        return Ok(base); // nothing to offset; decoder accepts 0 rows
    }
    g.add_row_vector(base, point_embed)
}

/// One point per nonzero label: the integer-rounded centroid of its pixel
/// set, snapped to the nearest label pixel when the centroid falls outside
/// the label (concave shapes).
pub fn centroids_from_instances(inst: &InstanceMap) -> Result<PointPromptSet> {
    let (h, w) = (inst.height(), inst.width());
    let max = inst.labels().iter().copied().max().unwrap_or(0) as usize;
    let mut sum_x = vec![0.0f64; max + 1];
    let mut sum_y = vec![0.0f64; max + 1];
    let mut count = vec![0usize; max + 1];
    for (i, &l) in inst.labels().iter().enumerate() {
        if l == 0 {
            continue;
        }
        sum_x[l as usize] += (i % w) as f64;
        sum_y[l as usize] += (i / w) as f64;
        count[l as usize] += 1;
    }
    let mut points = Vec::new();
    for l in 1..=max {
        if count[l] == 0 {
            continue;
        }
        let cx = (sum_x[l] / count[l] as f64).round() as isize;
        let cy = (sum_y[l] / count[l] as f64).round() as isize;
        let (cx, cy) = (
            cx.clamp(0, w as isize - 1) as usize,
            cy.clamp(0, h as isize - 1) as usize,
        );
        if inst.at(cy, cx) == l as u32 {
            points.push((cx, cy));
            continue;
        }
        // snap to the label pixel nearest the true centroid
        let (fx, fy) = (sum_x[l] / count[l] as f64, sum_y[l] / count[l] as f64);
        let mut best = (usize::MAX, 0usize, 0usize);
        for (i, &lab) in inst.labels().iter().enumerate() {
            if lab != l as u32 {
                continue;
            }
            let (x, y) = (i % w, i / w);
            let d = ((x as f64 - fx).powi(2) + (y as f64 - fy).powi(2)) * 1e6;
            let d = d as usize;
            if d < best.0 {
                best = (d, x, y);
            }
        }
        points.push((best.1, best.2));
    }
    PointPromptSet::new(points, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn kernel_r0_is_unit() {
        let k = gaussian_kernel(0, 1.0).unwrap();
        assert_eq!(k.shape(), &[1, 1]);
        assert_eq!(k.data()[0], 1.0);
    }

    #[test]
    fn kernel_window_sums_to_one_across_grid() {
        for r in 0..=20usize {
            let sigmas = if r == 0 {
                vec![1.0]
            } else {
                vec![r as f64 / 3.0, r as f64 / 2.0, r as f64]
            };
            for sigma in sigmas {
                let k = gaussian_kernel(r, sigma).unwrap();
                let s: f64 = k.data().iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "r={r} sigma={sigma}: sum {s}");
            }
        }
    }

    #[test]
    fn kernel_center_value_hand_computed() {
        // r=1, sigma=1: center = 1 / (1 + 4 e^{-1/2} + 4 e^{-1})
        let k = gaussian_kernel(1, 1.0).unwrap();
        let center = k.at2(1, 1);
        assert!((center - 0.2042).abs() < 1e-4, "center {center}");
        let expect = 1.0 / (1.0 + 4.0 * (-0.5f64).exp() + 4.0 * (-1.0f64).exp());
        assert!((center - expect).abs() < 1e-12);
    }

    #[test]
    fn kernel_symmetry_and_peak() {
        let k = gaussian_kernel(3, 1.5).unwrap();
        let side = 7;
        for y in 0..side {
            for x in 0..side {
                let v = k.at2(y, x);
                assert!((v - k.at2(x, y)).abs() < 1e-15); // transpose
                assert!((v - k.at2(side - 1 - y, x)).abs() < 1e-15); // reflection
                assert!(v <= k.at2(3, 3));
            }
        }
    }

    #[test]
    fn density_single_interior_point_has_unit_mass() {
        let pts = PointPromptSet::new(vec![(32, 30)], 64, 64).unwrap();
        let d = render_density(&pts, 10, 10.0 / 3.0).unwrap();
        let mass: f64 = d.raster.data().iter().sum();
        assert!((mass - 1.0).abs() < 1e-10);
        assert!(d.raster.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn density_superposition_of_far_points() {
        let pts = PointPromptSet::new(vec![(15, 15), (48, 48)], 64, 64).unwrap();
        let d = render_density(&pts, 10, 10.0 / 3.0).unwrap();
        let mass: f64 = d.raster.data().iter().sum();
        assert!((mass - 2.0).abs() < 1e-10);
        // maxima at the two point locations
        let v1 = d.raster.at2(15, 15);
        let v2 = d.raster.at2(48, 48);
        let max = d.raster.data().iter().cloned().fold(0.0f64, f64::max);
        assert!((v1 - max).abs() < 1e-15 || (v2 - max).abs() < 1e-15);
    }

    #[test]
    fn density_border_mass_matches_subwindow_oracle() {
        let r = 10;
        let sigma = 10.0 / 3.0;
        let pts = PointPromptSet::new(vec![(0, 0)], 64, 64).unwrap();
        let d = render_density(&pts, r, sigma).unwrap();
        let mass: f64 = d.raster.data().iter().sum();
        let k = gaussian_kernel(r, sigma).unwrap();
        let side = 2 * r + 1;
        let mut expect = 0.0;
        for ky in r..side {
            for kx in r..side {
                expect += k.data()[ky * side + kx];
            }
        }
        assert!((mass - expect).abs() < 1e-12);
        assert!(mass < 1.0);
    }

    #[test]
    fn density_is_additive_and_permutation_invariant() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        for _ in 0..10 {
            let mut points: Vec<(usize, usize)> = (0..6)
                .map(|_| (rng.gen_range(0..48), rng.gen_range(0..48)))
                .collect();
            let a: Vec<_> = points[..3].to_vec();
            let b: Vec<_> = points[3..].to_vec();
            let d_all = render_density(
                &PointPromptSet::new(points.clone(), 48, 48).unwrap(),
                5,
                2.0,
            )
            .unwrap();
            let d_a = render_density(&PointPromptSet::new(a, 48, 48).unwrap(), 5, 2.0).unwrap();
            let d_b = render_density(&PointPromptSet::new(b, 48, 48).unwrap(), 5, 2.0).unwrap();
            for i in 0..48 * 48 {
                let sum = d_a.raster.data()[i] + d_b.raster.data()[i];
                assert!((d_all.raster.data()[i] - sum).abs() < 1e-12);
            }
            points.reverse();
            let d_rev =
                render_density(&PointPromptSet::new(points, 48, 48).unwrap(), 5, 2.0).unwrap();
            for i in 0..48 * 48 {
                assert!((d_all.raster.data()[i] - d_rev.raster.data()[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn density_peaks_at_well_separated_points() {
        let pts = PointPromptSet::new(vec![(10, 10), (40, 45)], 64, 64).unwrap();
        let r = 6;
        let d = render_density(&pts, r, 2.0).unwrap();
        for &(px, py) in &pts.points {
            let v = d.raster.at2(py, px);
            for y in 0..64 {
                for x in 0..64 {
                    assert!(d.raster.at2(y, x) <= v + 1e-15);
                }
            }
        }
    }

    #[test]
    fn points_outside_image_rejected() {
        assert!(PointPromptSet::new(vec![(64, 0)], 64, 64).is_err());
        assert!(PointPromptSet::new(vec![(0, 70)], 64, 64).is_err());
    }

    #[test]
    fn semantic_prompt_zero_everything_is_zero() {
        let pts = PointPromptSet::new(vec![(20, 20)], 32, 32).unwrap();
        let d = render_density(&pts, 5, 2.0).unwrap();
        let params = PromptConvParams::zeros(16);
        let mut g = Graph::new();
        let nodes = params.bind(&mut g);
        let out = encode_semantic_prompt(&mut g, &d, &nodes).unwrap();
        assert_eq!(g.value(out).shape(), &[4, 16]);
        for v in g.value(out).data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn semantic_prompt_token_count_matches_encoder() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let pts = PointPromptSet::new(vec![(30, 30), (10, 50)], 64, 64).unwrap();
        let d = render_density(&pts, 10, 10.0 / 3.0).unwrap();
        let mut params = PromptConvParams::zeros(64);
        for t in [
            &mut params.conv1,
            &mut params.conv2,
            &mut params.conv3,
        ] {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let run = || {
            let mut g = Graph::new();
            let nodes = params.bind(&mut g);
            let out = encode_semantic_prompt(&mut g, &d, &nodes).unwrap();
            g.value(out).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[16, 64]); // 64x64 image, 16x downsampling
        assert!(a.bits_eq(&run()));
    }

    #[test]
    fn semantic_prompt_gradients_pass() {
        use crate::graph::grad_check;
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let pts = PointPromptSet::new(vec![(15, 17)], 32, 32).unwrap();
        let d = render_density(&pts, 4, 1.5).unwrap();
        let mut params = PromptConvParams::zeros(8);
        for t in [&mut params.conv1, &mut params.conv2, &mut params.conv3] {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let weights = Tensor::from_fn(&[4, 8], |_| rng.gen_range(-1.0..1.0));
        let eval = |p: &Tensor| -> Result<f64> {
            let mut pp = params.clone();
            pp.conv1 = p.clone();
            let mut g = Graph::new();
            let nodes = pp.bind(&mut g);
            let out = encode_semantic_prompt(&mut g, &d, &nodes)?;
            let w = g.input(weights.clone());
            let prod = g.mul(out, w)?;
            let loss = g.sum(prod);
            g.value(loss).item()
        };
        let mut g = Graph::new();
        let nodes = params.bind(&mut g);
        let out = encode_semantic_prompt(&mut g, &d, &nodes).unwrap();
        let w = g.input(weights.clone());
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get(nodes.conv1).unwrap().clone();
        let report = grad_check(eval, &params.conv1, &analytic, 1e-5, 1e-4).unwrap();
        assert!(report.passed, "rel err {}", report.max_relative_error);
    }

    #[test]
    fn position_prompt_empty_and_duplicates() {
        let enc = PositionEncoder::new(16, 0).unwrap();
        let mut g = Graph::new();
        let emb = g.input(Tensor::zeros(&[16]));
        let empty = PointPromptSet::new(vec![], 32, 32).unwrap();
        let out = encode_position_prompt(&mut g, &empty, &enc, emb).unwrap();
        assert_eq!(g.value(out).shape(), &[0, 16]);

        let dup = PointPromptSet::new(vec![(7, 9), (7, 9)], 32, 32).unwrap();
        let out = encode_position_prompt(&mut g, &dup, &enc, emb).unwrap();
        let v = g.value(out);
        for c in 0..16 {
            assert_eq!(v.at2(0, c), v.at2(1, c));
        }
    }

    #[test]
    fn position_encoding_is_nondegenerate() {
        let enc = PositionEncoder::new(16, 0).unwrap();
        let a = enc.encode(0.25, 0.25);
        let b = enc.encode(0.75, 0.75);
        let dist: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 1e-3, "encodings collapse: {dist}");
    }

    #[test]
    fn position_encoder_is_seed_deterministic() {
        let a = PositionEncoder::new(8, 3).unwrap();
        let b = PositionEncoder::new(8, 3).unwrap();
        assert_eq!(a.encode(0.3, 0.7), b.encode(0.3, 0.7));
    }

    #[test]
    fn centroid_of_square_is_center() {
        let mut inst = InstanceMap::new(8, 8);
        for y in 2..5 {
            for x in 3..6 {
                inst.labels_mut()[y * 8 + x] = 1;
            }
        }
        let pts = centroids_from_instances(&inst).unwrap();
        assert_eq!(pts.points, vec![(4, 3)]);
    }

    #[test]
    fn centroids_of_empty_map() {
        let inst = InstanceMap::new(8, 8);
        let pts = centroids_from_instances(&inst).unwrap();
        assert!(pts.is_empty());
    }

    #[test]
    fn concave_centroid_snaps_to_label() {
        // C shape: ring around (5,5) open on the right; centroid lands in
        // the hole
        let mut inst = InstanceMap::new(11, 11);
        for y in 2..9 {
            for x in 2..9 {
                let on_ring = !(3..8).contains(&y) || !(3..=8).contains(&x);
                let inside = (2..9).contains(&y) && (2..9).contains(&x);
                if inside && on_ring {
                    inst.labels_mut()[y * 11 + x] = 1;
                }
            }
        }
        let pts = centroids_from_instances(&inst).unwrap();
        assert_eq!(pts.len(), 1);
        let (x, y) = pts.points[0];
        assert_eq!(inst.at(y, x), 1, "snapped point must lie on the label");
    }
}
