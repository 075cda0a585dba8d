//! Semantic-to-instance conversion without per-domain parameter tuning:
//! 8-connected component labeling, an exact Euclidean distance transform,
//! and a marker-based split of touching instances driven by distance-peak
//! markers. The splitter has one scale parameter (minimum marker
//! separation, tied to the prompt kernel radius) and is never tuned per
//! domain; [`InstanceSeparator`] lets a learned stage replace it.

use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel integer label raster; 0 is background, instance ids are
/// contiguous 1..=K.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMap {
    labels: Vec<u32>,
    h: usize,
    w: usize,
}

impl InstanceMap {
    pub fn new(h: usize, w: usize) -> Self {
        InstanceMap {
            labels: vec![0; h * w],
            h,
            w,
        }
    }

    pub fn from_labels(h: usize, w: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::Shape(format!(
                "instance map {h}x{w} needs {} labels, got {}",
                h * w,
                labels.len()
            )));
        }
        Ok(InstanceMap { labels, h, w })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u32] {
        &mut self.labels
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.w + x]
    }

    /// Number of distinct nonzero labels.
    pub fn label_count(&self) -> usize {
        let max = self.labels.iter().copied().max().unwrap_or(0) as usize;
        let mut seen = vec![false; max + 1];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        seen.iter().skip(1).filter(|&&s| s).count()
    }

    pub fn foreground(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != 0).collect()
    }

    /// Pixel areas indexed by label id (index 0 = background).
    pub fn areas(&self) -> Vec<usize> {
        let max = self.labels.iter().copied().max().unwrap_or(0) as usize;
        let mut areas = vec![0usize; max + 1];
        for &l in &self.labels {
            areas[l as usize] += 1;
        }
        areas
    }
}

const NEIGHBORS8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new() -> Self {
        UnionFind { parent: vec![0] }
    }

    fn make(&mut self) -> usize {
        let id = self.parent.len();
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// 8-connectivity component labeling of a binary raster. Labels are assigned
/// in raster-scan order of each component's first pixel, so the output is
/// canonical and deterministic.
pub fn connected_components(binary: &Tensor) -> Result<InstanceMap> {
    let (h, w) = binary.dims2()?;
    let fg: Vec<bool> = binary.data().iter().map(|&v| v > 0.5).collect();
    Ok(connected_components_bool(&fg, h, w))
}

pub fn connected_components_bool(fg: &[bool], h: usize, w: usize) -> InstanceMap {
    let mut provisional = vec![0usize; h * w];
    let mut uf = UnionFind::new();
    for y in 0..h {
        for x in 0..w {
            if !fg[y * w + x] {
                continue;
            }
            // previously-scanned 8-neighbors: W, NW, N, NE
            let mut best = 0usize;
            let mut hits: [usize; 4] = [0; 4];
            let mut n_hits = 0;
            let prev: [(isize, isize); 4] = [(0, -1), (-1, -1), (-1, 0), (-1, 1)];
            for (dy, dx) in prev {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || nx >= w as isize {
                    continue;
                }
                let l = provisional[ny as usize * w + nx as usize];
                if l != 0 {
                    hits[n_hits] = l;
                    n_hits += 1;
                    if best == 0 || l < best {
                        best = l;
                    }
                }
            }
            if best == 0 {
                provisional[y * w + x] = uf.make();
            } else {
                provisional[y * w + x] = best;
                for &l in &hits[..n_hits] {
                    uf.union(best, l);
                }
            }
        }
    }
    // canonical relabel: roots numbered by first raster occurrence
    let mut root_to_label = vec![0u32; uf.parent.len()];
    let mut next = 0u32;
    let mut labels = vec![0u32; h * w];
    for i in 0..h * w {
        if provisional[i] == 0 {
            continue;
        }
        let root = uf.find(provisional[i]);
        if root_to_label[root] == 0 {
            next += 1;
            root_to_label[root] = next;
        }
        labels[i] = root_to_label[root];
    }
    InstanceMap { labels, h, w }
}

/// Exact Euclidean distance transform of the foreground: per-pixel distance
/// to the nearest background pixel (two-pass parabola lower envelope on
/// squared distances).
pub fn distance_transform(fg: &[bool], h: usize, w: usize) -> Vec<f64> {
    const INF: f64 = 1e20;
    let mut sq = vec![0.0f64; h * w];
    // pass 1: 1D transform along columns
    let mut col_f = vec![0.0f64; h];
    let mut col_d = vec![0.0f64; h];
    for x in 0..w {
        for y in 0..h {
            col_f[y] = if fg[y * w + x] { INF } else { 0.0 };
        }
        edt_1d(&col_f, &mut col_d);
        for y in 0..h {
            sq[y * w + x] = col_d[y];
        }
    }
    // pass 2: along rows
    let mut row_f = vec![0.0f64; w];
    let mut row_d = vec![0.0f64; w];
    for y in 0..h {
        row_f.copy_from_slice(&sq[y * w..(y + 1) * w]);
        edt_1d(&row_f, &mut row_d);
        for x in 0..w {
            sq[y * w + x] = row_d[x];
        }
    }
    sq.iter().map(|v| v.sqrt()).collect()
}

/// 1D squared-distance transform: d[p] = min_q ((p-q)^2 + f[q]).
fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n]; // parabola apexes
    let mut z = vec![0.0f64; n + 1]; // envelope boundaries
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0usize;
    for p in 0..n {
        while z[k + 1] < p as f64 {
            k += 1;
        }
        let q = v[k];
        let diff = p as f64 - q as f64;
        d[p] = diff * diff + f[q];
    }
}

/// Distance-peak markers of one component: non-strict local maxima of the
/// distance transform, greedily thinned so kept markers are at least
/// `min_sep` apart (strongest first, raster order on ties).
fn component_markers(
    dt: &[f64],
    comp: &[usize],
    in_comp: &[bool],
    h: usize,
    w: usize,
    min_sep: f64,
) -> Vec<usize> {
    let mut candidates: Vec<usize> = comp
        .iter()
        .copied()
        .filter(|&idx| {
            let (y, x) = (idx / w, idx % w);
            NEIGHBORS8.iter().all(|&(dy, dx)| {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    return true;
                }
                dt[ny as usize * w + nx as usize] <= dt[idx]
            })
        })
        .collect();
    candidates.sort_by(|&a, &b| dt[b].total_cmp(&dt[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    let sep_sq = min_sep * min_sep;
    for idx in candidates {
        let (y, x) = ((idx / w) as f64, (idx % w) as f64);
        let far = kept.iter().all(|&k| {
            let (ky, kx) = ((k / w) as f64, (k % w) as f64);
            (y - ky) * (y - ky) + (x - kx) * (x - kx) >= sep_sq
        });
        if far {
            kept.push(idx);
        }
    }
    let _ = in_comp;
    kept
}

/// Split touching instances: components whose distance transform has two or
/// more admissible peaks are partitioned by marker-based watershed growth on
/// the negated distance transform; single-peak components pass through.
/// The split never crosses background, never merges labels, and preserves
/// the foreground pixel set exactly.
pub fn split_touching(
    inst: &InstanceMap,
    probs: &crate::decoder::SemanticMask,
    min_sep: usize,
) -> Result<InstanceMap> {
    let (h, w) = (inst.height(), inst.width());
    let (pc, ph, pw) = probs.probs.dims3()?;
    if ph != h || pw != w || pc == 0 {
        return Err(Error::Shape(format!(
            "split_touching: mask {pc}x{ph}x{pw} does not match instance map {h}x{w}"
        )));
    }
    let fg = inst.foreground();
    let dt = distance_transform(&fg, h, w);

    // bucket component pixels by label
    let max_label = inst.labels().iter().copied().max().unwrap_or(0) as usize;
    let mut comp_pixels: Vec<Vec<usize>> = vec![Vec::new(); max_label + 1];
    for (i, &l) in inst.labels().iter().enumerate() {
        if l != 0 {
            comp_pixels[l as usize].push(i);
        }
    }

    let mut out = vec![0u32; h * w];
    let mut next_label = 0u32;
    let mut in_comp = vec![false; h * w];
    for comp in comp_pixels.iter().skip(1) {
        if comp.is_empty() {
            continue;
        }
        let markers = component_markers(&dt, comp, &in_comp, h, w, min_sep as f64);
        if markers.len() < 2 {
            next_label += 1;
            for &idx in comp {
                out[idx] = next_label;
            }
            continue;
        }
        for &idx in comp {
            in_comp[idx] = true;
        }
        let base = next_label;
        next_label += markers.len() as u32;
        let mut assigned: Vec<u32> = vec![0; h * w];
        // max-heap keyed on (distance, lower raster index wins ties);
        // non-negative f64 bit patterns preserve order
        let mut heap: BinaryHeap<(u64, std::cmp::Reverse<usize>)> = BinaryHeap::new();
        for (m, &idx) in markers.iter().enumerate() {
            assigned[idx] = base + m as u32 + 1;
            heap.push((dt[idx].to_bits(), std::cmp::Reverse(idx)));
        }
        while let Some((_, std::cmp::Reverse(idx))) = heap.pop() {
            let label = assigned[idx];
            let (y, x) = (idx / w, idx % w);
            for (dy, dx) in NEIGHBORS8 {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let nidx = ny as usize * w + nx as usize;
                if !in_comp[nidx] || assigned[nidx] != 0 {
                    continue;
                }
                assigned[nidx] = label;
                heap.push((dt[nidx].to_bits(), std::cmp::Reverse(nidx)));
            }
        }
        for &idx in comp {
            out[idx] = assigned[idx];
            in_comp[idx] = false;
        }
    }
    relabel_contiguous(&InstanceMap { labels: out, h, w })
}

/// Bijective remap of labels to 1..=K in raster-scan first-occurrence order;
/// idempotent.
pub fn relabel_contiguous(inst: &InstanceMap) -> Result<InstanceMap> {
    let max = inst.labels().iter().copied().max().unwrap_or(0) as usize;
    let mut remap = vec![0u32; max + 1];
    let mut next = 0u32;
    let mut labels = vec![0u32; inst.labels().len()];
    for (i, &l) in inst.labels().iter().enumerate() {
        if l == 0 {
            continue;
        }
        if remap[l as usize] == 0 {
            next += 1;
            remap[l as usize] = next;
        }
        labels[i] = remap[l as usize];
    }
    InstanceMap::from_labels(inst.height(), inst.width(), labels)
}

/// Contract for the stage turning semantic masks into instance maps, so a
/// learned separator can replace the deterministic one.
pub trait InstanceSeparator {
    fn separate(&self, mask: &crate::decoder::SemanticMask) -> Result<InstanceMap>;
}

/// Default separator: threshold, label components, split touching instances
/// by distance-peak markers.
pub struct DistanceMarkerSeparator {
    pub min_separation: usize,
}

impl InstanceSeparator for DistanceMarkerSeparator {
    fn separate(&self, mask: &crate::decoder::SemanticMask) -> Result<InstanceMap> {
        let binary = mask.binary_union()?;
        let cc = connected_components(&binary)?;
        split_touching(&cc, mask, self.min_separation)
    }
}
