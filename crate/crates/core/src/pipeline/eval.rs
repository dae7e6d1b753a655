use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::{AdapterConfig, Streams};
use crate::error::{Error, Result};
use crate::metrics::{
    auc_mann_whitney, lesion_nawm_scores, masked_mse, masked_psnr, masked_ssim, mean_sd, paired_ttest, roc_curve,
    NawmRegion, RocResult,
};
use crate::phantom::Labels;
use crate::volumes::Volume;

use super::config::RunConfig;
use super::data::{Dataset, Subject};
use super::synth::synthesize_volume;
use super::train::{
    encode_subjects, train_stage2, validation_noise_loss, Backbone, ConditionalModel, FreezeAudit, LatentSet, Stage1,
    Stage2Log,
};

pub const METHOD_FULL: &str = "demist";
pub const METHOD_SEMANTIC: &str = "semantic_only";
pub const METHOD_UNCOND: &str = "unconditional";
pub const METHOD_ORACLE: &str = "ground_truth";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub auc_pnawm: f64,
    pub auc_dnawm: f64,
    pub auc_combined: f64,
}

/// Brain-masked image metrics and lesion-vs-NAWM AUCs of `pred` against `gt`.
/// An AUC is NaN when the volume has no voxels in that region.
pub fn evaluate_volume(pred: &Volume, gt: &Volume, labels: &Labels, cfg: &RunConfig) -> Result<VolumeMetrics> {
    let mask = labels.brain_mask();
    let auc = |r| -> Result<f64> {
        let (pos, neg) = lesion_nawm_scores(pred, labels, r)?;
        if pos.is_empty() || neg.is_empty() {
            return Ok(f64::NAN);
        }
        auc_mann_whitney(&pos, &neg)
    };
    Ok(VolumeMetrics {
        psnr: masked_psnr(pred, gt, &mask, cfg.eval.data_range)?,
        ssim: masked_ssim(pred, gt, &mask, &cfg.eval.ssim)?,
        mse: masked_mse(pred, gt, &mask)?,
        auc_pnawm: auc(NawmRegion::Proximal)?,
        auc_dnawm: auc(NawmRegion::Distal)?,
        auc_combined: auc(NawmRegion::Combined)?,
    })
}

/// Combined-region ROC over several volumes pooled together.
pub fn pooled_roc(preds: &[&Volume], labels: &[&Labels]) -> Result<RocResult> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (p, l) in preds.iter().zip(labels) {
        let (a, b) = lesion_nawm_scores(p, l, NawmRegion::Combined)?;
        pos.extend(a);
        neg.extend(b);
    }
    roc_curve(&pos, &neg)
}

fn fold_key(seed: u64) -> [u8; 32] {
    Sha256::digest(seed.to_le_bytes()).into()
}

/// Fold of each seed: seeds sorted by SHA-256 of their LE bytes, dealt round robin.
pub fn assign_folds(seeds: &[u64], k: usize) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    let mut order: Vec<usize> = (0..seeds.len()).collect();
    order.sort_by_key(|&i| (fold_key(seeds[i]), seeds[i]));
    if order.windows(2).any(|w| seeds[w[0]] == seeds[w[1]]) {
        return Err(Error::InvalidArgument("duplicate seeds".into()));
    }
    if seeds.len() < k {
        return Err(Error::InvalidArgument(format!("{} seeds for {k} folds", seeds.len())));
    }
    let mut fold = vec![0; seeds.len()];
    for (rank, &i) in order.iter().enumerate() {
        fold[i] = rank % k;
    }
    Ok(fold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub fold: usize,
    pub seed: u64,
    pub method: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub auc_pnawm: f64,
    pub auc_dnawm: f64,
    pub auc_combined: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub values: Vec<f64>,
}

impl MeanSd {
    pub fn of(values: Vec<f64>) -> Self {
        let (mean, sd) = mean_sd(&values);
        Self { mean, sd, values }
    }
}

/// Fold-level mean ± SD of each metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub psnr: MeanSd,
    pub ssim: MeanSd,
    pub mse: MeanSd,
    pub auc_pnawm: MeanSd,
    pub auc_dnawm: MeanSd,
    pub auc_combined: MeanSd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub metric: String,
    pub a: String,
    pub b: String,
    pub n: usize,
    pub t: f64,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub folds: usize,
    pub fold_sizes: Vec<usize>,
    pub methods: BTreeMap<String, MethodSummary>,
    pub val_noise_loss: BTreeMap<String, MeanSd>,
    pub trainable_params: BTreeMap<String, usize>,
    pub freeze_audits_passed: bool,
    /// Subject-paired tests of the full model against each baseline.
    pub ttests: Vec<TTest>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvResult {
    pub summary: CvSummary,
    pub rows: Vec<MetricRow>,
    pub audits: Vec<FreezeAudit>,
    pub stage2_logs: BTreeMap<(usize, String), Vec<Stage2Log>>,
    pub roc: BTreeMap<(usize, String), RocResult>,
}

type Metric = (&'static str, fn(&MetricRow) -> f64);

const METRICS: [Metric; 6] = [
    ("psnr", |r| r.psnr),
    ("ssim", |r| r.ssim),
    ("mse", |r| r.mse),
    ("auc_pnawm", |r| r.auc_pnawm),
    ("auc_dnawm", |r| r.auc_dnawm),
    ("auc_combined", |r| r.auc_combined),
];

fn fold_means(rows: &[MetricRow], method: &str, folds: usize, f: fn(&MetricRow) -> f64) -> Vec<f64> {
    (0..folds)
        .filter_map(|k| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.fold == k && r.method == method)
                .map(f)
                .filter(|v| v.is_finite())
                .collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect()
}

pub fn summarize_methods(rows: &[MetricRow], folds: usize) -> BTreeMap<String, MethodSummary> {
    let methods: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    methods
        .into_iter()
        .map(|m| {
            let s = |i: usize| MeanSd::of(fold_means(rows, m, folds, METRICS[i].1));
            (
                m.to_string(),
                MethodSummary {
                    psnr: s(0),
                    ssim: s(1),
                    mse: s(2),
                    auc_pnawm: s(3),
                    auc_dnawm: s(4),
                    auc_combined: s(5),
                },
            )
        })
        .collect()
}

fn paired_tests(rows: &[MetricRow], a: &str, baselines: &[&str]) -> Vec<TTest> {
    let pick = |m: &str| -> BTreeMap<u64, &MetricRow> {
        rows.iter().filter(|r| r.method == m).map(|r| (r.seed, r)).collect()
    };
    let ra = pick(a);
    let mut out = Vec::new();
    for b in baselines {
        let rb = pick(b);
        for (name, f) in METRICS {
            let (x, y): (Vec<f64>, Vec<f64>) = ra
                .iter()
                .filter_map(|(s, r)| rb.get(s).map(|q| (f(r), f(q))))
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .unzip();
            let (t, p) = paired_ttest(&x, &y).unwrap_or((f64::NAN, f64::NAN));
            out.push(TTest {
                metric: name.into(),
                a: a.into(),
                b: b.to_string(),
                n: x.len(),
                t,
                p,
            });
        }
    }
    out
}

fn synth_seed(cfg: &RunConfig, subject: u64) -> u64 {
    cfg.sample.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(subject)
}

/// Synthesize every subject with `model` and score it, fanned out over subjects.
pub fn evaluate_model(
    cfg: &RunConfig,
    model: &ConditionalModel,
    subjects: &[&Subject],
) -> Result<Vec<(Volume, VolumeMetrics)>> {
    subjects
        .par_iter()
        .map(|s| {
            let v = synthesize_volume(model, &s.t1, &s.flair, &cfg.normalize, &cfg.sample, synth_seed(cfg, s.seed))?;
            let m = evaluate_volume(&v, &s.psr, &s.labels, cfg)?;
            Ok((v, m))
        })
        .collect()
}

fn row(fold: usize, seed: u64, method: &str, m: &VolumeMetrics) -> MetricRow {
    MetricRow {
        fold,
        seed,
        method: method.into(),
        psnr: m.psnr,
        ssim: m.ssim,
        mse: m.mse,
        auc_pnawm: m.auc_pnawm,
        auc_dnawm: m.auc_dnawm,
        auc_combined: m.auc_combined,
    }
}

fn with_streams(a: &AdapterConfig, streams: Streams) -> AdapterConfig {
    AdapterConfig { streams, ..a.clone() }
}

pub fn semantic_only(a: &AdapterConfig) -> AdapterConfig {
    with_streams(
        a,
        Streams {
            semantic: true,
            control: false,
            lora: false,
        },
    )
}

/// K-fold cross-validation of the full model against the semantic-only and
/// unconditional baselines, with the ground-truth PSR as AUC oracle.
pub fn run_folds(cfg: &RunConfig, ds: &Dataset, stage1: &Stage1, backbone: &Backbone) -> Result<CvResult> {
    let seeds = ds.cohort_seeds();
    let fold_of = assign_folds(&seeds, cfg.folds)?;
    let latents = encode_subjects(stage1, backbone.latent_scale, &ds.cohort, &cfg.normalize, &cfg.sample)?;
    let uncond = ConditionalModel::unconditional(backbone, stage1);
    let variants = [
        (METHOD_FULL, cfg.adapters.clone()),
        (METHOD_SEMANTIC, semantic_only(&cfg.adapters)),
    ];
    let mut rows = Vec::new();
    let mut audits = Vec::new();
    let mut stage2_logs = BTreeMap::new();
    let mut roc = BTreeMap::new();
    let mut val_noise: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut trainable = BTreeMap::new();
    let mut fold_sizes = Vec::new();
    for k in 0..cfg.folds {
        let train: Vec<u64> = seeds.iter().zip(&fold_of).filter(|(_, &f)| f != k).map(|(s, _)| *s).collect();
        let val: Vec<&Subject> = ds.cohort.iter().zip(&fold_of).filter(|(_, &f)| f == k).map(|(s, _)| s).collect();
        fold_sizes.push(val.len());
        let train_lat = latents.select(&train)?;
        let val_lat: LatentSet = latents.select(&val.iter().map(|s| s.seed).collect::<Vec<_>>())?;
        let labels: Vec<&Labels> = val.iter().map(|s| &s.labels).collect();

        let mut models = Vec::new();
        for (name, acfg) in &variants {
            let run = train_stage2(&cfg.stage2, acfg, backbone, stage1, &train_lat)?;
            trainable.insert(name.to_string(), run.audit.trainable_params);
            audits.push(run.audit);
            stage2_logs.insert((k, name.to_string()), run.logs);
            models.push((*name, run.model));
        }
        models.push((METHOD_UNCOND, uncond.clone()));
        for (name, model) in &models {
            val_noise
                .entry(name.to_string())
                .or_default()
                .push(validation_noise_loss(model, &val_lat, cfg.eval.noise_draws, cfg.eval.seed)?);
            let out = evaluate_model(cfg, model, &val)?;
            for (s, (_, m)) in val.iter().zip(&out) {
                rows.push(row(k, s.seed, name, m));
            }
            let preds: Vec<&Volume> = out.iter().map(|(v, _)| v).collect();
            roc.insert((k, name.to_string()), pooled_roc(&preds, &labels)?);
        }
        for s in &val {
            rows.push(row(k, s.seed, METHOD_ORACLE, &evaluate_volume(&s.psr, &s.psr, &s.labels, cfg)?));
        }
        let gt: Vec<&Volume> = val.iter().map(|s| &s.psr).collect();
        roc.insert((k, METHOD_ORACLE.to_string()), pooled_roc(&gt, &labels)?);
    }
    trainable.insert(METHOD_UNCOND.to_string(), 0);
    let summary = CvSummary {
        folds: cfg.folds,
        fold_sizes,
        methods: summarize_methods(&rows, cfg.folds),
        val_noise_loss: val_noise.into_iter().map(|(k, v)| (k, MeanSd::of(v))).collect(),
        trainable_params: trainable,
        freeze_audits_passed: audits.iter().all(FreezeAudit::passed),
        ttests: paired_tests(&rows, METHOD_FULL, &[METHOD_SEMANTIC, METHOD_UNCOND]),
    };
    Ok(CvResult {
        summary,
        rows,
        audits,
        stage2_logs,
        roc,
    })
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(v)?).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct RocPoint {
    threshold: f64,
    tpr: f64,
    fpr: f64,
}

pub fn write_roc(path: &Path, r: &RocResult) -> Result<()> {
    let pts: Vec<RocPoint> = (0..r.tpr.len())
        .map(|i| RocPoint {
            threshold: r.thresholds[i],
            tpr: r.tpr[i],
            fpr: r.fpr[i],
        })
        .collect();
    write_rows(path, &pts)
}

/// `metrics.csv`, `summary.json`, `audits.json`, `roc/` and `stage2/` under `dir`.
pub fn write_cv(dir: &Path, r: &CvResult) -> Result<()> {
    write_rows(&dir.join("metrics.csv"), &r.rows)?;
    write_json(&dir.join("summary.json"), &r.summary)?;
    write_json(&dir.join("audits.json"), &r.audits)?;
    for ((k, m), roc) in &r.roc {
        write_roc(&dir.join("roc").join(format!("fold{k}_{m}.csv")), roc)?;
    }
    for ((k, m), logs) in &r.stage2_logs {
        write_rows(&dir.join("stage2").join(format!("fold{k}_{m}.csv")), logs)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub streams: String,
    pub trainable_params: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub auc_combined: f64,
    pub val_noise_loss: f64,
}

/// Stream subsets of the ablation block. Semantic conditioning is always on;
/// "none" means no spatial or low-rank adapter on top of it.
pub fn ablation_variants(a: &AdapterConfig) -> Vec<(&'static str, AdapterConfig)> {
    let s = |control, lora| {
        with_streams(
            a,
            Streams {
                semantic: true,
                control,
                lora,
            },
        )
    };
    vec![
        ("none", s(false, false)),
        ("+controlnet", s(true, false)),
        ("+lora", s(false, true)),
        ("both", s(true, true)),
    ]
}

/// Train and score each ablation variant on fold `fold`.
pub fn ablate(cfg: &RunConfig, ds: &Dataset, stage1: &Stage1, backbone: &Backbone, fold: usize) -> Result<Vec<AblationRow>> {
    let seeds = ds.cohort_seeds();
    let fold_of = assign_folds(&seeds, cfg.folds)?;
    if fold >= cfg.folds {
        return Err(Error::InvalidArgument(format!("fold {fold} of {}", cfg.folds)));
    }
    let latents = encode_subjects(stage1, backbone.latent_scale, &ds.cohort, &cfg.normalize, &cfg.sample)?;
    let train: Vec<u64> = seeds.iter().zip(&fold_of).filter(|(_, &f)| f != fold).map(|(s, _)| *s).collect();
    let val: Vec<&Subject> = ds.cohort.iter().zip(&fold_of).filter(|(_, &f)| f == fold).map(|(s, _)| s).collect();
    let train_lat = latents.select(&train)?;
    let val_lat = latents.select(&val.iter().map(|s| s.seed).collect::<Vec<_>>())?;
    let mut rows = Vec::new();
    for (label, acfg) in ablation_variants(&cfg.adapters) {
        let run = train_stage2(&cfg.stage2, &acfg, backbone, stage1, &train_lat)?;
        let out = evaluate_model(cfg, &run.model, &val)?;
        let mean = |f: fn(&VolumeMetrics) -> f64| out.iter().map(|(_, m)| f(m)).sum::<f64>() / out.len() as f64;
        rows.push(AblationRow {
            label: label.into(),
            streams: acfg.streams.label(),
            trainable_params: run.audit.trainable_params,
            psnr: mean(|m| m.psnr),
            ssim: mean(|m| m.ssim),
            mse: mean(|m| m.mse),
            auc_combined: mean(|m| m.auc_combined),
            val_noise_loss: validation_noise_loss(&run.model, &val_lat, cfg.eval.noise_draws, cfg.eval.seed)?,
        });
    }
    Ok(rows)
}
