//! Evaluation protocols: per-domain scoring, leave-one-domain-out rotation,
//! the 8:1:1 adaptability split and the 8-row module-toggle ablation grid.
//! All report tables serialize deterministically, so two runs of the same
//! config produce byte-identical CSVs.

use rand::seq::SliceRandom;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::model::Model;
use crate::params::seed_stream;
use crate::synth::{DomainDataset, Sample};
use crate::tensor::Tensor;
use crate::train::{train, TrainReport};

#[derive(Clone, Debug)]
pub struct ImageResult {
    pub image_id: String,
    pub report: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct DomainEval {
    pub domain_id: String,
    pub per_image: Vec<ImageResult>,
    pub mean: MetricsReport,
}

fn eval_samples<'a>(
    model: &Model,
    domain_id: &str,
    samples: impl Iterator<Item = (usize, &'a Sample)>,
    hd95: bool,
) -> Result<DomainEval> {
    let mut per_image = Vec::new();
    for (idx, s) in samples {
        let mask = model.predict(&s.image, &s.points)?;
        let pred_sem = mask.binary_union()?;
        let (h, w) = (s.instances.height(), s.instances.width());
        let gt_sem = Tensor::from_fn(&[h, w], |i| f64::from(s.instances.labels()[i] != 0));
        let pred_inst = model.to_instances(&mask)?;
        let report = metrics::report(&pred_sem, &gt_sem, &pred_inst, &s.instances, hd95)?;
        per_image.push(ImageResult {
            image_id: format!("img{idx}"),
            report,
        });
    }
    let mean = MetricsReport::mean(
        &per_image
            .iter()
            .map(|r| r.report.clone())
            .collect::<Vec<_>>(),
    )
    .ok_or_else(|| Error::Config("evaluate: empty domain".into()))?;
    Ok(DomainEval {
        domain_id: domain_id.to_string(),
        per_image,
        mean,
    })
}

/// Full pipeline per image (encode, prompt from ground-truth centroids,
/// decode, threshold, instance conversion, all eight metrics) plus the
/// domain mean.
pub fn evaluate(model: &Model, domain: &DomainDataset, hd95: bool) -> Result<DomainEval> {
    eval_samples(
        model,
        &domain.domain_id,
        domain.samples.iter().enumerate(),
        hd95,
    )
}

/// Harness self-test shortcut: score the ground truth against itself. Every
/// ratio metric must come out at 100 and HD at 0.
pub fn evaluate_ground_truth(domain: &DomainDataset, hd95: bool) -> Result<DomainEval> {
    let mut per_image = Vec::new();
    for (idx, s) in domain.samples.iter().enumerate() {
        let (h, w) = (s.instances.height(), s.instances.width());
        let sem = Tensor::from_fn(&[h, w], |i| f64::from(s.instances.labels()[i] != 0));
        let report = metrics::report(&sem, &sem, &s.instances, &s.instances, hd95)?;
        per_image.push(ImageResult {
            image_id: format!("img{idx}"),
            report,
        });
    }
    let mean = MetricsReport::mean(
        &per_image
            .iter()
            .map(|r| r.report.clone())
            .collect::<Vec<_>>(),
    )
    .ok_or_else(|| Error::Config("evaluate: empty domain".into()))?;
    Ok(DomainEval {
        domain_id: domain.domain_id.clone(),
        per_image,
        mean,
    })
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub target_domain: String,
    pub eval: DomainEval,
    pub train: TrainReport,
}

#[derive(Clone, Debug)]
pub struct LodoReport {
    pub folds: Vec<FoldResult>,
}

impl LodoReport {
    pub const CSV_HEADER: &'static str =
        "target_domain,dice,miou,f1,hd,aji,dq,sq,pq,trainable_params";

    /// One summary row per held-out fold.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for f in &self.folds {
            let m = &f.eval.mean;
            out.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{}\n",
                f.target_domain,
                m.dice,
                m.miou,
                m.f1,
                m.hd,
                m.aji,
                m.dq,
                m.sq,
                m.pq,
                f.train.trainable_params
            ));
        }
        out
    }

    pub fn per_image_csv(&self, dataset: &str) -> String {
        let mut out = String::from(MetricsReport::CSV_HEADER);
        out.push('\n');
        for f in &self.folds {
            for r in &f.eval.per_image {
                out.push_str(&r.report.csv_row(dataset, &f.target_domain, &r.image_id));
                out.push('\n');
            }
        }
        out
    }
}

/// Leave-one-domain-out: K runs, each training on the other K-1 domains with
/// seed `cfg.seed + fold` and evaluating on the held-out one. The trainer is
/// handed the held-out domain id so a leaked sample aborts the fold.
pub fn run_lodo(cfg: &RunConfig, domains: &[DomainDataset]) -> Result<LodoReport> {
    if domains.len() < 2 {
        return Err(Error::Config(format!(
            "leave-one-domain-out needs >= 2 domains, got {}",
            domains.len()
        )));
    }
    let mut folds = Vec::with_capacity(domains.len());
    for (k, target) in domains.iter().enumerate() {
        let mut fold_cfg = cfg.clone();
        fold_cfg.seed = cfg.seed + k as u64;
        let train_samples: Vec<Sample> = domains
            .iter()
            .filter(|d| d.domain_id != target.domain_id)
            .flat_map(|d| d.samples.iter().cloned())
            .collect();
        let mut model = Model::init(&fold_cfg)?;
        let train_report = train(
            &mut model,
            &train_samples,
            &fold_cfg,
            Some(&target.domain_id),
            None,
        )?;
        let eval = evaluate(&model, target, cfg.hd95)?;
        folds.push(FoldResult {
            target_domain: target.domain_id.clone(),
            eval,
            train: train_report,
        });
    }
    Ok(LodoReport { folds })
}

/// Seeded 8:1:1 index split (floor sizes for train and validation, the
/// remainder tests).
pub fn split_801010(n: usize, seed: u64, tag: &str) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seed_stream(seed, &format!("split:{tag}"));
    idx.shuffle(&mut rng);
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let train = idx[..n_train].to_vec();
    let val = idx[n_train..n_train + n_val].to_vec();
    let test = idx[n_train + n_val..].to_vec();
    (train, val, test)
}

#[derive(Clone, Debug)]
pub struct AdaptabilityReport {
    pub per_domain: Vec<DomainEval>,
    pub train: TrainReport,
    /// (domain, train idx, val idx, test idx) per domain, for audit.
    pub splits: Vec<(String, Vec<usize>, Vec<usize>, Vec<usize>)>,
}

impl AdaptabilityReport {
    pub const CSV_HEADER: &'static str = "domain,dice,miou,f1,hd,aji,dq,sq,pq,trainable_params";

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for e in &self.per_domain {
            let m = &e.mean;
            out.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{}\n",
                e.domain_id,
                m.dice,
                m.miou,
                m.f1,
                m.hd,
                m.aji,
                m.dq,
                m.sq,
                m.pq,
                self.train.trainable_params
            ));
        }
        out
    }
}

/// Fully-supervised adaptability protocol: every domain is split 8:1:1 by a
/// seeded shuffle, one model trains on the union of the training splits and
/// is scored on each domain's test split.
pub fn run_adaptability(cfg: &RunConfig, domains: &[DomainDataset]) -> Result<AdaptabilityReport> {
    if domains.is_empty() {
        return Err(Error::Config("adaptability: no domains".into()));
    }
    let mut train_samples = Vec::new();
    let mut splits = Vec::new();
    for d in domains {
        let (tr, va, te) = split_801010(d.samples.len(), cfg.seed, &d.domain_id);
        if te.is_empty() {
            return Err(Error::Config(format!(
                "domain '{}' has too few images ({}) for an 8:1:1 split",
                d.domain_id,
                d.samples.len()
            )));
        }
        for &i in &tr {
            train_samples.push(d.samples[i].clone());
        }
        splits.push((d.domain_id.clone(), tr, va, te));
    }
    let mut model = Model::init(cfg)?;
    let train_report = train(&mut model, &train_samples, cfg, None, None)?;
    let mut per_domain = Vec::new();
    for (d, (_, _, _, test)) in domains.iter().zip(&splits) {
        let eval = eval_samples(
            &model,
            &d.domain_id,
            test.iter().map(|&i| (i, &d.samples[i])),
            cfg.hd95,
        )?;
        per_domain.push(eval);
    }
    Ok(AdaptabilityReport {
        per_domain,
        train: train_report,
        splits,
    })
}

/// The 8-row module-toggle grid in ablation-table order:
/// (adapter, prompt encoder, two-stage decoder).
pub const ABLATION_GRID: [(bool, bool, bool); 8] = [
    (false, false, false),
    (true, false, false),
    (false, true, false),
    (false, false, true),
    (true, true, false),
    (true, false, true),
    (false, true, true),
    (true, true, true),
];

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub row: usize,
    pub hs_adapter: bool,
    pub gkp_encoder: bool,
    pub tsm_decoder: bool,
    pub aji: f64,
    pub dq: f64,
    pub sq: f64,
    pub pq: f64,
    pub trainable_params: usize,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub const CSV_HEADER: &'static str =
        "row,hs_adapter,gkp_encoder,tsm_decoder,aji,dq,sq,pq,trainable_params";

    pub fn csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.4},{:.4},{:.4},{:.4},{}\n",
                r.row,
                u8::from(r.hs_adapter),
                u8::from(r.gkp_encoder),
                u8::from(r.tsm_decoder),
                r.aji,
                r.dq,
                r.sq,
                r.pq,
                r.trainable_params
            ));
        }
        out
    }
}

/// Run the toggle grid: each row executes the full leave-one-domain-out
/// rotation under its module configuration and reports instance metrics
/// averaged over the held-out folds.
pub fn run_ablation(cfg: &RunConfig, domains: &[DomainDataset]) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(8);
    for (i, &(m1, m2, m3)) in ABLATION_GRID.iter().enumerate() {
        let mut row_cfg = cfg.clone();
        row_cfg.hs_adapter = m1;
        row_cfg.gkp_encoder = m2;
        row_cfg.tsm_decoder = m3;
        let lodo = run_lodo(&row_cfg, domains)?;
        let k = lodo.folds.len() as f64;
        let avg = |f: &dyn Fn(&MetricsReport) -> f64| {
            lodo.folds.iter().map(|x| f(&x.eval.mean)).sum::<f64>() / k
        };
        rows.push(AblationRow {
            row: i + 1,
            hs_adapter: m1,
            gkp_encoder: m2,
            tsm_decoder: m3,
            aji: avg(&|m| m.aji),
            dq: avg(&|m| m.dq),
            sq: avg(&|m| m.sq),
            pq: avg(&|m| m.pq),
            trainable_params: lodo.folds[0].train.trainable_params,
        });
    }
    Ok(AblationReport { rows })
}
