//! Semantic and instance segmentation metrics: Dice, mIoU, F1, Hausdorff
//! distance, Aggregated Jaccard Index and panoptic DQ/SQ/PQ.
//!
//! Conventions (all documented and tested): empty-vs-empty gives Dice =
//! mIoU = F1 = AJI = 100, HD = 0 and DQ = SQ = PQ = 100; empty-vs-nonempty
//! HD is the image diagonal. Ratio metrics are reported on the percent
//! scale.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::instance::InstanceMap;
use crate::tensor::Tensor;

/// Named scalar results for one (prediction, reference) pair.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub dice: f64,
    pub miou: f64,
    pub f1: f64,
    pub hd: f64,
    pub aji: f64,
    pub dq: f64,
    pub sq: f64,
    pub pq: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "dataset,domain,image_id,dice,miou,f1,hd,aji,dq,sq,pq";

    pub fn csv_row(&self, dataset: &str, domain: &str, image_id: &str) -> String {
        format!(
            "{dataset},{domain},{image_id},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            self.dice, self.miou, self.f1, self.hd, self.aji, self.dq, self.sq, self.pq
        )
    }

    /// Elementwise mean of several reports (counts summed).
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricsReport {
            dice: avg(|r| r.dice),
            miou: avg(|r| r.miou),
            f1: avg(|r| r.f1),
            hd: avg(|r| r.hd),
            aji: avg(|r| r.aji),
            dq: avg(|r| r.dq),
            sq: avg(|r| r.sq),
            pq: avg(|r| r.pq),
            tp: reports.iter().map(|r| r.tp).sum(),
            fp: reports.iter().map(|r| r.fp).sum(),
            fn_: reports.iter().map(|r| r.fn_).sum(),
        })
    }
}

fn binary_counts(pred: &Tensor, gt: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "metric shapes differ: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (p, g) in pred.data().iter().zip(gt.data()) {
        match (*p > 0.5, *g > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok((tp, fp, fn_, tn))
}

/// Dice coefficient 2|P∩G|/(|P|+|G|) on the percent scale; both masks empty
/// counts as perfect agreement.
pub fn dice(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (tp, fp, fn_, _) = binary_counts(pred, gt)?;
    if tp + fp + fn_ == 0 {
        return Ok(100.0);
    }
    Ok(200.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Mean IoU over the background and foreground classes; a class empty in
/// both masks scores 100.
pub fn miou(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (tp, fp, fn_, tn) = binary_counts(pred, gt)?;
    let fg = if tp + fp + fn_ == 0 {
        100.0
    } else {
        100.0 * tp as f64 / (tp + fp + fn_) as f64
    };
    let bg = if tn + fp + fn_ == 0 {
        100.0
    } else {
        100.0 * tn as f64 / (tn + fp + fn_) as f64
    };
    Ok((fg + bg) / 2.0)
}

/// Pixel-level F1 (equals Dice for binary masks); kept as its own entry
/// because reports list both.
pub fn f1(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    dice(pred, gt)
}

/// Foreground pixels 4-adjacent to background or to the image edge.
fn boundary_pixels(mask: &Tensor) -> Result<Vec<(usize, usize)>> {
    let (h, w) = mask.dims2()?;
    let fg = |y: usize, x: usize| mask.data()[y * w + x] > 0.5;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !fg(y, x) {
                continue;
            }
            let edge = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            let open = edge
                || !fg(y - 1, x)
                || !fg(y + 1, x)
                || !fg(y, x - 1)
                || !fg(y, x + 1);
            if open {
                out.push((y, x));
            }
        }
    }
    Ok(out)
}

fn directed_distances(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    from.iter()
        .map(|&(ay, ax)| {
            to.iter()
                .map(|&(by, bx)| {
                    let dy = ay as f64 - by as f64;
                    let dx = ax as f64 - bx as f64;
                    (dy * dy + dx * dx).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn hausdorff_impl(pred: &Tensor, gt: &Tensor, percentile95: bool) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "hausdorff shapes differ: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let (h, w) = pred.dims2()?;
    let a = boundary_pixels(pred)?;
    let b = boundary_pixels(gt)?;
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => {
            let diag = (((h - 1) * (h - 1) + (w - 1) * (w - 1)) as f64).sqrt();
            return Ok(diag);
        }
        _ => {}
    }
    let dir = |from: &[(usize, usize)], to: &[(usize, usize)]| -> f64 {
        let mut d = directed_distances(from, to);
        if percentile95 {
            d.sort_by(f64::total_cmp);
            let idx = ((d.len() as f64 - 1.0) * 0.95).ceil() as usize;
            d[idx.min(d.len() - 1)]
        } else {
            d.iter().cloned().fold(0.0, f64::max)
        }
    };
    Ok(dir(&a, &b).max(dir(&b, &a)))
}

/// Max of the two directed Hausdorff distances between boundary pixel sets
/// (Euclidean, in pixels). Empty-vs-nonempty scores the image diagonal.
pub fn hausdorff(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    hausdorff_impl(pred, gt, false)
}

/// 95th-percentile variant of [`hausdorff`].
pub fn hausdorff95(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    hausdorff_impl(pred, gt, true)
}

/// Pairwise intersections and per-map areas of two instance maps.
struct Overlap {
    inter: HashMap<(u32, u32), usize>, // (gt, pred) -> pixels
    gt_area: HashMap<u32, usize>,
    pred_area: HashMap<u32, usize>,
}

fn overlaps(pred: &InstanceMap, gt: &InstanceMap) -> Result<Overlap> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Shape(format!(
            "instance maps differ: {}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut o = Overlap {
        inter: HashMap::new(),
        gt_area: HashMap::new(),
        pred_area: HashMap::new(),
    };
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        if p != 0 {
            *o.pred_area.entry(p).or_insert(0) += 1;
        }
        if g != 0 {
            *o.gt_area.entry(g).or_insert(0) += 1;
        }
        if p != 0 && g != 0 {
            *o.inter.entry((g, p)).or_insert(0) += 1;
        }
    }
    Ok(o)
}

/// Aggregated Jaccard Index (original greedy formulation): each ground-truth
/// instance grabs the unused prediction of maximal IoU; matched
/// intersections over matched unions plus all unmatched areas, on the
/// percent scale.
pub fn aji(pred: &InstanceMap, gt: &InstanceMap) -> Result<f64> {
    let o = overlaps(pred, gt)?;
    if o.gt_area.is_empty() && o.pred_area.is_empty() {
        return Ok(100.0);
    }
    let mut gt_labels: Vec<u32> = o.gt_area.keys().copied().collect();
    gt_labels.sort_unstable();
    let mut used: Vec<u32> = Vec::new();
    let mut num = 0.0;
    let mut den = 0.0;
    for &g in &gt_labels {
        let ga = o.gt_area[&g];
        let mut best: Option<(f64, u32, usize)> = None; // (iou, pred, inter)
        for (&(gg, p), &inter) in &o.inter {
            if gg != g || used.contains(&p) {
                continue;
            }
            let union = ga + o.pred_area[&p] - inter;
            let iou = inter as f64 / union as f64;
            let better = match best {
                None => true,
                Some((bi, bp, _)) => iou > bi || (iou == bi && p < bp),
            };
            if better {
                best = Some((iou, p, inter));
            }
        }
        match best {
            Some((_, p, inter)) => {
                num += inter as f64;
                den += (ga + o.pred_area[&p] - inter) as f64;
                used.push(p);
            }
            None => den += ga as f64,
        }
    }
    for (&p, &pa) in &o.pred_area {
        if !used.contains(&p) {
            den += pa as f64;
        }
    }
    if den == 0.0 {
        return Ok(100.0);
    }
    Ok(100.0 * num / den)
}

/// Panoptic matching at IoU > `iou_thresh` (unique above 0.5): returns
/// (DQ, SQ, PQ) on the percent scale plus the TP/FP/FN counts.
pub fn panoptic(
    pred: &InstanceMap,
    gt: &InstanceMap,
    iou_thresh: f64,
) -> Result<(f64, f64, f64, usize, usize, usize)> {
    let o = overlaps(pred, gt)?;
    let n_gt = o.gt_area.len();
    let n_pred = o.pred_area.len();
    if n_gt == 0 && n_pred == 0 {
        return Ok((100.0, 100.0, 100.0, 0, 0, 0));
    }
    let mut matched_gt: Vec<u32> = Vec::new();
    let mut matched_pred: Vec<u32> = Vec::new();
    let mut iou_sum = 0.0;
    let mut pairs: Vec<(u32, u32, f64)> = o
        .inter
        .iter()
        .map(|(&(g, p), &inter)| {
            let union = o.gt_area[&g] + o.pred_area[&p] - inter;
            (g, p, inter as f64 / union as f64)
        })
        .filter(|&(_, _, iou)| iou > iou_thresh)
        .collect();
    pairs.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    for (g, p, iou) in pairs {
        // with iou_thresh >= 0.5 matches are provably unique; the guards
        // make lower thresholds behave greedily rather than double-count
        if matched_gt.contains(&g) || matched_pred.contains(&p) {
            continue;
        }
        matched_gt.push(g);
        matched_pred.push(p);
        iou_sum += iou;
    }
    let tp = matched_gt.len();
    let fp = n_pred - tp;
    let fn_ = n_gt - tp;
    if tp == 0 {
        return Ok((0.0, 0.0, 0.0, 0, fp, fn_));
    }
    let dq = tp as f64 / (tp as f64 + fp as f64 / 2.0 + fn_ as f64 / 2.0);
    let sq = iou_sum / tp as f64;
    Ok((100.0 * dq, 100.0 * sq, 100.0 * dq * sq, tp, fp, fn_))
}

/// All eight metrics for one image: semantic metrics on the binary masks,
/// instance metrics on the label maps.
pub fn report(
    pred_sem: &Tensor,
    gt_sem: &Tensor,
    pred_inst: &InstanceMap,
    gt_inst: &InstanceMap,
    hd95: bool,
) -> Result<MetricsReport> {
    let hd = if hd95 {
        hausdorff95(pred_sem, gt_sem)?
    } else {
        hausdorff(pred_sem, gt_sem)?
    };
    let (dq, sq, pq, tp, fp, fn_) = panoptic(pred_inst, gt_inst, 0.5)?;
    Ok(MetricsReport {
        dice: dice(pred_sem, gt_sem)?,
        miou: miou(pred_sem, gt_sem)?,
        f1: f1(pred_sem, gt_sem)?,
        hd,
        aji: aji(pred_inst, gt_inst)?,
        dq,
        sq,
        pq,
        tp,
        fp,
        fn_,
    })
}
