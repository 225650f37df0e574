//! Segmentation metrics (Dice overlap, boundary Hausdorff distance),
//! model evaluation over test sets, and the stage-1 ablation harness.

use crate::error::{Error, Result};
use crate::netcore::{decoder_forward, encoder_forward, ModelState, NetConfig};
use crate::synthdata::{GenParams, Sample, SegMask};
use crate::trainer::{finetune, pretrain, AblationSwitches, TrainConfig};
use serde::{Deserialize, Serialize};

/// Dice similarity: 2|P and G| / (|P| + |G|); two empty masks count as a
/// perfect 1.0 by convention.
pub fn dsc(pred: &SegMask, gt: &SegMask) -> Result<f64> {
    if !pred.same_shape(gt) {
        return Err(Error::dimension("mask shapes differ"));
    }
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut g = 0usize;
    for (a, b) in pred.labels().iter().zip(gt.labels()) {
        p += (*a == 1) as usize;
        g += (*b == 1) as usize;
        inter += (*a == 1 && *b == 1) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Foreground pixels 4-adjacent to background or touching the image edge.
pub fn boundary_pixels(mask: &SegMask) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) != 1 {
                continue;
            }
            let at_edge = y == 0 || y == h - 1 || x == 0 || x == w - 1;
            let bg_neighbor = (y > 0 && mask.get(y - 1, x) == 0)
                || (y + 1 < h && mask.get(y + 1, x) == 0)
                || (x > 0 && mask.get(y, x - 1) == 0)
                || (x + 1 < w && mask.get(y, x + 1) == 0);
            if at_edge || bg_neighbor {
                out.push((y, x));
            }
        }
    }
    out
}

/// Exact squared Euclidean distance transform (two-pass 1-D parabola
/// method). `sites` marks cells at distance zero.
fn squared_edt(h: usize, w: usize, sites: &[(usize, usize)]) -> Vec<f64> {
    const INF: f64 = 1e18;
    let mut field = vec![INF; h * w];
    for &(y, x) in sites {
        field[y * w + x] = 0.0;
    }
    let mut scratch = vec![0.0; h.max(w)];
    // columns
    for x in 0..w {
        for y in 0..h {
            scratch[y] = field[y * w + x];
        }
        let d = edt_1d(&scratch[..h]);
        for y in 0..h {
            field[y * w + x] = d[y];
        }
    }
    // rows
    for y in 0..h {
        scratch[..w].copy_from_slice(&field[y * w..(y + 1) * w]);
        let d = edt_1d(&scratch[..w]);
        field[y * w..(y + 1) * w].copy_from_slice(&d);
    }
    field
}

/// Felzenszwalb-Huttenlocher lower envelope of parabolas.
fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                break;
            }
        }
        if s <= z[k] && k == 0 {
            v[0] = q;
            z[1] = f64::INFINITY;
            continue;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0usize;
    let mut out = vec![0.0; n];
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        out[q] = d * d + f[p];
    }
    out
}

/// Directed boundary distances from every boundary pixel of `from` to the
/// nearest boundary pixel of `to`, in pixels.
fn directed_boundary_distances(from: &SegMask, to: &SegMask) -> Vec<f64> {
    let sources = boundary_pixels(from);
    let sites = boundary_pixels(to);
    let field = squared_edt(from.height(), from.width(), &sites);
    sources
        .iter()
        .map(|&(y, x)| field[y * from.width() + x].sqrt())
        .collect()
}

/// Symmetric boundary Hausdorff distance in pixels (100th percentile).
pub fn hausdorff(pred: &SegMask, gt: &SegMask) -> Result<f64> {
    hausdorff_percentile(pred, gt, 100.0)
}

/// Percentile variant: the plain distance at 100, HD95-style readings
/// below. Both masks must have nonempty foregrounds.
pub fn hausdorff_percentile(pred: &SegMask, gt: &SegMask, percentile: f64) -> Result<f64> {
    if !pred.same_shape(gt) {
        return Err(Error::dimension("mask shapes differ"));
    }
    if !(0.0 < percentile && percentile <= 100.0) {
        return Err(Error::domain("percentile must be in (0, 100]"));
    }
    if pred.foreground_count() == 0 || gt.foreground_count() == 0 {
        return Err(Error::domain("hausdorff needs nonempty masks"));
    }
    let d_pg = directed_boundary_distances(pred, gt);
    let d_gp = directed_boundary_distances(gt, pred);
    Ok(percentile_max(&d_pg, percentile).max(percentile_max(&d_gp, percentile)))
}

fn percentile_max(values: &[f64], percentile: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if percentile >= 100.0 {
        return *sorted.last().unwrap();
    }
    // nearest-rank
    let rank = ((percentile / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: u64,
    pub dsc: f64,
    /// `None` when the prediction had no foreground to measure.
    pub hd: Option<f64>,
}

/// Aggregated metrics over one test set. Standard deviations are
/// population-style; samples with missing Hausdorff values are excluded
/// from the HD mean and counted instead.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_sample: Vec<SampleMetrics>,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub hd_mean: Option<f64>,
    pub hd_std: Option<f64>,
    pub hd_missing: usize,
    pub n: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Segment every sample with the student network and aggregate metrics.
pub fn evaluate(student: &ModelState, cfg: &NetConfig, samples: &[Sample]) -> Result<MetricReport> {
    let mut preds = Vec::with_capacity(samples.len());
    for s in samples {
        let (feat, _) = encoder_forward(student, cfg, &s.image, None)?;
        let logits = decoder_forward(student, cfg, &feat)?;
        preds.push(logits.argmax_mask());
    }
    evaluate_predictions(&preds, samples)
}

/// Aggregate metrics for externally produced predictions, one per sample.
pub fn evaluate_predictions(preds: &[SegMask], samples: &[Sample]) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::config("cannot evaluate an empty test set"));
    }
    if preds.len() != samples.len() {
        return Err(Error::dimension("one prediction per sample required"));
    }
    let mut per_sample = Vec::with_capacity(samples.len());
    for (pred, s) in preds.iter().zip(samples) {
        let gt = s.eval_mask();
        let d = dsc(pred, gt)?;
        let hd = match hausdorff(pred, gt) {
            Ok(v) => Some(v),
            Err(Error::Domain(_)) => None,
            Err(e) => return Err(e),
        };
        per_sample.push(SampleMetrics { id: s.id, dsc: d, hd });
    }
    let dscs: Vec<f64> = per_sample.iter().map(|m| m.dsc).collect();
    let hds: Vec<f64> = per_sample.iter().filter_map(|m| m.hd).collect();
    let (dsc_mean, dsc_std) = mean_std(&dscs);
    let (hd_mean, hd_std) = if hds.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&hds);
        (Some(m), Some(s))
    };
    Ok(MetricReport {
        hd_missing: per_sample.len() - hds.len(),
        n: per_sample.len(),
        per_sample,
        dsc_mean,
        dsc_std,
        hd_mean,
        hd_std,
    })
}

/// Stage-1 ablation rows. Every row runs the same stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationRow {
    /// Traditional contrastive learning only: augmentation-positive
    /// instance discrimination, single head, no transfer views.
    A,
    /// Style contrastive loss only.
    B,
    /// Content contrastive loss only.
    C,
    /// Style + content.
    D,
    /// Style + content + dense feature propagation (the full method).
    E,
}

impl AblationRow {
    pub fn all() -> [AblationRow; 5] {
        [
            AblationRow::A,
            AblationRow::B,
            AblationRow::C,
            AblationRow::D,
            AblationRow::E,
        ]
    }

    pub fn label(&self) -> &'static str {
        match self {
            AblationRow::A => "a_tcl",
            AblationRow::B => "b_scl",
            AblationRow::C => "c_ccl",
            AblationRow::D => "d_scl_ccl",
            AblationRow::E => "e_full",
        }
    }

    pub fn switches(&self) -> AblationSwitches {
        match self {
            AblationRow::A => AblationSwitches {
                tcl: true,
                scl: false,
                ccl: false,
                dfpm: false,
            },
            AblationRow::B => AblationSwitches {
                tcl: false,
                scl: true,
                ccl: false,
                dfpm: false,
            },
            AblationRow::C => AblationSwitches {
                tcl: false,
                scl: false,
                ccl: true,
                dfpm: false,
            },
            AblationRow::D => AblationSwitches {
                tcl: false,
                scl: true,
                ccl: true,
                dfpm: false,
            },
            AblationRow::E => AblationSwitches {
                tcl: false,
                scl: true,
                ccl: true,
                dfpm: true,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub seeds: Vec<u64>,
    /// Full config echo per seed so harness contracts are checkable.
    pub configs: Vec<TrainConfig>,
    pub per_seed_dsc: Vec<f64>,
    pub per_seed_hd: Vec<Option<f64>>,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub hd_mean: Option<f64>,
    pub hd_std: Option<f64>,
}

/// Run pretraining + fine-tuning for each requested row over the common
/// seeds, evaluating on the target test set.
pub fn ablation(
    base: &TrainConfig,
    gen: &GenParams,
    rows: &[AblationRow],
    seeds: &[u64],
) -> Result<Vec<AblationResult>> {
    if rows.is_empty() || seeds.is_empty() {
        return Err(Error::config("ablation needs at least one row and seed"));
    }
    let mut results = Vec::with_capacity(rows.len());
    for row in rows {
        let mut per_seed_dsc = Vec::new();
        let mut per_seed_hd = Vec::new();
        let mut configs = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.switches = row.switches();
            let mut gp = gen.clone();
            gp.seed = seed;
            let dataset = crate::synthdata::generate(&gp)?;
            let split = dataset.with_labeled(cfg.labeled, seed)?;
            let pre = pretrain(&cfg, &dataset)?;
            let fine = finetune(&cfg, &pre.state, &split)?;
            let report = evaluate(&fine.student, &cfg.net, &split.test_target)?;
            per_seed_dsc.push(report.dsc_mean);
            per_seed_hd.push(report.hd_mean);
            configs.push(cfg);
        }
        let (dsc_mean, dsc_std) = mean_std(&per_seed_dsc);
        let hds: Vec<f64> = per_seed_hd.iter().filter_map(|h| *h).collect();
        let (hd_mean, hd_std) = if hds.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&hds);
            (Some(m), Some(s))
        };
        results.push(AblationResult {
            row: *row,
            seeds: seeds.to_vec(),
            configs,
            per_seed_dsc,
            per_seed_hd,
            dsc_mean,
            dsc_std,
            hd_mean,
            hd_std,
        });
    }
    Ok(results)
}

/// CSV rendering of ablation rows: experiment, dsc stats, hd stats, seeds.
pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut out = String::from("experiment,dsc_mean,dsc_std,hd_mean,hd_std,seeds\n");
    for r in results {
        let hd_mean = r.hd_mean.map(|v| v.to_string()).unwrap_or_default();
        let hd_std = r.hd_std.map(|v| v.to_string()).unwrap_or_default();
        let seeds = r
            .seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.row.label(),
            r.dsc_mean,
            r.dsc_std,
            hd_mean,
            hd_std,
            seeds
        ));
    }
    out
}
