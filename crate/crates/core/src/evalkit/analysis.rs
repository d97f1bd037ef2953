//! Per-sample records, paired method comparison and IoU-binned improvement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::stats::{self, Alternative};
use crate::error::{Error, Result};

/// Metrics for one generated target view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub target_id: String,
    /// Bounding-box IoU of the (possibly degraded) conditioning skeleton against the clean one.
    pub bbox_iou: f64,
    pub degradation: f64,
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    L1,
    Psnr,
    Ssim,
    Lpips,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::L1, Metric::Psnr, Metric::Ssim, Metric::Lpips];

    pub fn name(self) -> &'static str {
        match self {
            Metric::L1 => "l1",
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
            Metric::Lpips => "lpips",
        }
    }

    pub fn value(self, m: &SampleMetrics) -> f64 {
        match self {
            Metric::L1 => m.l1,
            Metric::Psnr => m.psnr,
            Metric::Ssim => m.ssim,
            Metric::Lpips => m.lpips,
        }
    }

    pub fn lower_is_better(self) -> bool {
        matches!(self, Metric::L1 | Metric::Lpips)
    }

    /// Improvement of `ours` over `reference`, oriented so that positive is
    /// better and roughly comparable across metrics (PSNR in units of 100 dB).
    pub fn improvement(self, ours: f64, reference: f64) -> f64 {
        match self {
            Metric::L1 | Metric::Lpips => -(ours - reference),
            Metric::Psnr => 0.01 * (ours - reference),
            Metric::Ssim => ours - reference,
        }
    }
}

/// Aggregate of a set of sample records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub means: BTreeMap<String, f64>,
    pub stds: BTreeMap<String, f64>,
}

pub fn summarize(samples: &[SampleMetrics]) -> Summary {
    let mut means = BTreeMap::new();
    let mut stds = BTreeMap::new();
    for m in Metric::ALL {
        let v: Vec<f64> = samples.iter().map(|s| m.value(s)).collect();
        means.insert(m.name().into(), if v.is_empty() { f64::NAN } else { stats::mean(&v) });
        stds.insert(m.name().into(), stats::std_dev(&v));
    }
    Summary { count: samples.len(), means, stds }
}

/// Pairs records of two methods by `target_id`; both must cover the same targets.
pub fn pair<'a>(
    ours: &'a [SampleMetrics],
    reference: &'a [SampleMetrics],
) -> Result<Vec<(&'a SampleMetrics, &'a SampleMetrics)>> {
    let by_id: BTreeMap<&str, &SampleMetrics> = reference.iter().map(|s| (s.target_id.as_str(), s)).collect();
    if by_id.len() != reference.len() || ours.len() != reference.len() {
        return Err(Error::Input(format!("cannot pair {} records with {}", ours.len(), reference.len())));
    }
    ours.iter()
        .map(|o| {
            by_id
                .get(o.target_id.as_str())
                .map(|r| (o, *r))
                .ok_or_else(|| Error::Input(format!("target {} missing from reference", o.target_id)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub metric: Metric,
    pub mean_ours: f64,
    pub mean_reference: f64,
    pub alternative: Alternative,
    pub u: f64,
    pub p_value: f64,
    pub significant_05: bool,
    pub significant_01: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub ours: String,
    pub reference: String,
    pub count: usize,
    pub metrics: Vec<MetricComparison>,
}

/// One-sided Mann-Whitney test per metric: "ours is better than reference".
pub fn compare(ours_name: &str, ours: &[SampleMetrics], reference_name: &str, reference: &[SampleMetrics]) -> Result<Comparison> {
    let pairs = pair(ours, reference)?;
    let mut metrics = Vec::new();
    for m in Metric::ALL {
        let x: Vec<f64> = pairs.iter().map(|(o, _)| m.value(o)).collect();
        let y: Vec<f64> = pairs.iter().map(|(_, r)| m.value(r)).collect();
        let alternative = if m.lower_is_better() { Alternative::Less } else { Alternative::Greater };
        let t = stats::mann_whitney_u(&x, &y, alternative)?;
        metrics.push(MetricComparison {
            metric: m,
            mean_ours: stats::mean(&x),
            mean_reference: stats::mean(&y),
            alternative,
            u: t.u,
            p_value: t.p,
            significant_05: t.p < 0.05,
            significant_01: t.p < 0.01,
        });
    }
    Ok(Comparison { ours: ours_name.into(), reference: reference_name.into(), count: pairs.len(), metrics })
}

impl Comparison {
    pub fn get(&self, metric: Metric) -> &MetricComparison {
        self.metrics.iter().find(|c| c.metric == metric).expect("every metric compared")
    }
}

pub const DEFAULT_BINS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_iou: f64,
    pub mean_improvement: f64,
    pub bootstrap_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouTrend {
    pub metric: Metric,
    pub bins: Vec<IouBin>,
    /// Spearman correlation between bin mean IoU and bin mean improvement.
    pub spearman: Option<f64>,
    /// Highest-IoU bin improvement minus lowest-IoU bin improvement.
    pub top_minus_bottom: f64,
    /// Bootstrap SE of that difference: `sqrt(se_top² + se_bottom²)`.
    pub difference_se: f64,
}

/// Bins paired improvements by conditioning IoU into `bins` equal-width bins
/// over `[0, 1]`; empty bins are dropped.
pub fn iou_trend(
    metric: Metric,
    ours: &[SampleMetrics],
    reference: &[SampleMetrics],
    bins: usize,
    resamples: usize,
    seed: u64,
) -> Result<IouTrend> {
    if bins == 0 {
        return Err(Error::Input("need at least one bin".into()));
    }
    let pairs = pair(ours, reference)?;
    let mut buckets: Vec<Vec<(f64, f64)>> = vec![Vec::new(); bins];
    for (o, r) in &pairs {
        let iou = o.bbox_iou.clamp(0.0, 1.0);
        let b = ((iou * bins as f64) as usize).min(bins - 1);
        buckets[b].push((iou, metric.improvement(metric.value(o), metric.value(r))));
    }
    let mut out = Vec::new();
    for (i, bucket) in buckets.iter().enumerate() {
        if bucket.is_empty() {
            continue;
        }
        let ious: Vec<f64> = bucket.iter().map(|b| b.0).collect();
        let imps: Vec<f64> = bucket.iter().map(|b| b.1).collect();
        let se =
            if imps.len() >= 2 { stats::bootstrap_se(&imps, resamples, crate::seed::derive(seed, &[i as u64]))? } else { 0.0 };
        out.push(IouBin {
            lo: i as f64 / bins as f64,
            hi: (i + 1) as f64 / bins as f64,
            count: bucket.len(),
            mean_iou: stats::mean(&ious),
            mean_improvement: stats::mean(&imps),
            bootstrap_se: se,
        });
    }
    let x: Vec<f64> = out.iter().map(|b| b.mean_iou).collect();
    let y: Vec<f64> = out.iter().map(|b| b.mean_improvement).collect();
    let (first, last) = (out.first().expect("pairs non-empty"), out.last().expect("pairs non-empty"));
    Ok(IouTrend {
        metric,
        spearman: stats::spearman(&x, &y),
        top_minus_bottom: last.mean_improvement - first.mean_improvement,
        difference_se: (last.bootstrap_se.powi(2) + first.bootstrap_se.powi(2)).sqrt(),
        bins: out,
    })
}
