//! Distance-estimation metrics, near/far binning, and cost accounting.

use std::fmt::Write as _;

use crate::correction::{CorrectorStack, InferenceMode};
use crate::error::{Error, Result};
use crate::geometry::{triangulate, StereoRig};
use crate::simdata::DatasetRecord;

/// Default near/far split in meters; the far bin includes the boundary.
pub const DEFAULT_BIN_BOUNDARY_M: f64 = 20.0;

fn check(preds: &[f64], gts: &[f64]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::LengthMismatch(preds.len(), gts.len()));
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

/// Mean of `|d - d_gt| / d_gt`.
pub fn abs_rel(preds: &[f64], gts: &[f64]) -> Result<f64> {
    check(preds, gts)?;
    let sum: f64 = preds.iter().zip(gts).map(|(p, g)| (p - g).abs() / g).sum();
    Ok(sum / preds.len() as f64)
}

/// Mean of `(d - d_gt)^2 / d_gt`.
pub fn sq_rel(preds: &[f64], gts: &[f64]) -> Result<f64> {
    check(preds, gts)?;
    let sum: f64 = preds.iter().zip(gts).map(|(p, g)| (p - g) * (p - g) / g).sum();
    Ok(sum / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinStats {
    pub label: String,
    pub count: usize,
    pub abs_rel: f64,
}

/// Near (`gt < boundary`) and far (`gt >= boundary`) bins; an empty bin is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedReport {
    pub boundary_m: f64,
    pub near: Option<BinStats>,
    pub far: Option<BinStats>,
}

impl BinnedReport {
    pub fn bins(&self) -> impl Iterator<Item = &BinStats> {
        self.near.iter().chain(self.far.iter())
    }
}

pub fn binned_report(preds: &[f64], gts: &[f64], boundary_m: f64) -> Result<BinnedReport> {
    if preds.len() != gts.len() {
        return Err(Error::LengthMismatch(preds.len(), gts.len()));
    }
    let bin = |far: bool, label: String| -> Result<Option<BinStats>> {
        let (p, g): (Vec<f64>, Vec<f64>) = preds
            .iter()
            .zip(gts)
            .filter(|(_, g)| (**g >= boundary_m) == far)
            .map(|(p, g)| (*p, *g))
            .unzip();
        if p.is_empty() {
            return Ok(None);
        }
        Ok(Some(BinStats {
            label,
            count: p.len(),
            abs_rel: abs_rel(&p, &g)?,
        }))
    };
    Ok(BinnedReport {
        boundary_m,
        near: bin(false, format!("<{boundary_m}m"))?,
        far: bin(true, format!(">={boundary_m}m"))?,
    })
}

/// Average correction cost when easy samples pay for a correction and a
/// gate, and hard samples for a correction:
/// `((c_pcm + c_gate) * n_easy + c_pcm * n_hard) / (n_easy + n_hard)`.
pub fn mean_cost(c_pcm: f64, c_gate: f64, n_easy: usize, n_hard: usize) -> Result<f64> {
    if n_easy + n_hard == 0 {
        return Err(Error::EmptyInput);
    }
    let easy = n_easy as f64;
    let hard = n_hard as f64;
    Ok(((c_pcm + c_gate) * easy + c_pcm * hard) / (easy + hard))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostSummary {
    /// Per-module forward cost in GFLOPs.
    pub c_pcm: f64,
    pub c_gate: f64,
    pub n_easy: usize,
    pub n_hard: usize,
    /// The closed-form average above.
    pub mean_cost: f64,
    /// Sum of modules actually executed, divided by the sample count.
    pub trace_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub n_samples: usize,
    /// Samples whose corrected disparity was not positive; excluded from metrics.
    pub n_failed: usize,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub bins: BinnedReport,
    /// `stage_histogram[k]` = samples that executed exactly `k` stages.
    pub stage_histogram: Vec<usize>,
    pub cost: Option<CostSummary>,
    /// `(ground truth, prediction)` for every evaluated sample.
    pub pairs: Vec<(f64, f64)>,
}

fn report_from_pairs(
    label: String,
    n_samples: usize,
    pairs: Vec<(f64, f64)>,
    stage_histogram: Vec<usize>,
    cost: Option<CostSummary>,
    boundary_m: f64,
) -> Result<EvalReport> {
    let (gts, preds): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    Ok(EvalReport {
        label,
        n_samples,
        n_failed: n_samples - pairs.len(),
        abs_rel: abs_rel(&preds, &gts)?,
        sq_rel: sq_rel(&preds, &gts)?,
        bins: binned_report(&preds, &gts, boundary_m)?,
        stage_histogram,
        cost,
        pairs,
    })
}

/// Uncorrected triangulation on the observed box centers.
pub fn evaluate_baseline(
    rig: &StereoRig,
    records: &[DatasetRecord],
    boundary_m: f64,
) -> Result<EvalReport> {
    let pairs: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| {
            triangulate(rig, r.left.x, r.right.x)
                .ok()
                .map(|d| (r.distance_m, d))
        })
        .collect();
    report_from_pairs(
        "baseline".into(),
        records.len(),
        pairs,
        vec![records.len()],
        None,
        boundary_m,
    )
}

pub fn evaluate(
    stack: &CorrectorStack,
    records: &[DatasetRecord],
    mode: InferenceMode,
    boundary_m: f64,
) -> Result<EvalReport> {
    let mut pairs = Vec::with_capacity(records.len());
    let mut histogram = vec![0usize; stack.num_stages() + 1];
    let mut n_easy = 0;
    let mut n_hard = 0;
    let mut executed_flops = 0u64;
    let pcm_flops = stack.stages[0].mixer.config().forward_flops();
    let gate_flops = stack
        .gates
        .first()
        .map_or(0, |g| g.mixer.config().forward_flops());

    for rec in records {
        let (d, trace) = stack.estimate_with(&rec.left, &rec.right, mode);
        histogram[trace.stages_executed] += 1;
        // a sample is "hard" when the first gate sent it on to another stage
        if trace.stages_executed > 1 {
            n_hard += 1;
        } else {
            n_easy += 1;
        }
        executed_flops += trace.stages_executed as u64 * pcm_flops
            + trace.gates_evaluated() as u64 * gate_flops;
        if let Ok(d) = d {
            pairs.push((rec.distance_m, d));
        }
    }

    let cost = if records.is_empty() {
        None
    } else {
        let c_pcm = pcm_flops as f64 * 1e-9;
        let c_gate = gate_flops as f64 * 1e-9;
        Some(CostSummary {
            c_pcm,
            c_gate,
            n_easy,
            n_hard,
            mean_cost: mean_cost(c_pcm, c_gate, n_easy, n_hard)?,
            trace_cost: executed_flops as f64 * 1e-9 / records.len() as f64,
        })
    };
    let label = match mode {
        InferenceMode::Gated => "gated".to_string(),
        InferenceMode::Forced => "forced".to_string(),
        InferenceMode::Truncated(k) => format!("stages<={k}"),
    };
    report_from_pairs(label, records.len(), pairs, histogram, cost, boundary_m)
}

impl EvalReport {
    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let mut row = |k: &str, v: String| {
            let _ = writeln!(s, "{k},{v}");
        };
        row("label", self.label.clone());
        row("n_samples", self.n_samples.to_string());
        row("n_failed", self.n_failed.to_string());
        row("abs_rel", format!("{:.9}", self.abs_rel));
        row("sq_rel", format!("{:.9}", self.sq_rel));
        for (name, bin) in [("near", &self.bins.near), ("far", &self.bins.far)] {
            if let Some(b) = bin {
                row(&format!("{name}.label"), b.label.clone());
                row(&format!("{name}.count"), b.count.to_string());
                row(&format!("{name}.abs_rel"), format!("{:.9}", b.abs_rel));
            }
        }
        for (k, n) in self.stage_histogram.iter().enumerate() {
            row(&format!("stages.{k}"), n.to_string());
        }
        if let Some(c) = &self.cost {
            row("cost.c_pcm_gflops", format!("{:e}", c.c_pcm));
            row("cost.c_gate_gflops", format!("{:e}", c.c_gate));
            row("cost.n_easy", c.n_easy.to_string());
            row("cost.n_hard", c.n_hard.to_string());
            row("cost.mean_gflops", format!("{:e}", c.mean_cost));
            row("cost.trace_gflops", format!("{:e}", c.trace_cost));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<22} {:>12}", "report", self.label);
        let _ = writeln!(s, "{:<22} {:>12}", "samples", self.n_samples);
        if self.n_failed > 0 {
            let _ = writeln!(s, "{:<22} {:>12}", "failed (disparity<=0)", self.n_failed);
        }
        let _ = writeln!(s, "{:<22} {:>12.4}", "Abs Rel", self.abs_rel);
        let _ = writeln!(s, "{:<22} {:>12.4}", "Sq Rel", self.sq_rel);
        for b in self.bins.bins() {
            let _ = writeln!(
                s,
                "{:<22} {:>12.4}",
                format!("Abs Rel {} (n={})", b.label, b.count),
                b.abs_rel
            );
        }
        let hist: Vec<String> = self.stage_histogram.iter().map(|n| n.to_string()).collect();
        let _ = writeln!(s, "{:<22} {:>12}", "stages 0/1/..", hist.join("/"));
        if let Some(c) = &self.cost {
            let _ = writeln!(s, "{:<22} {:>12.4e}", "C_mean (GFLOPs)", c.mean_cost);
            let _ = writeln!(s, "{:<22} {:>12.4e}", "executed (GFLOPs)", c.trace_cost);
        }
        s
    }

    /// `distance_m,prediction_m` rows, sorted by ground truth.
    pub fn plot_csv(&self) -> String {
        let mut pairs = self.pairs.clone();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut s = String::from("distance_m,prediction_m\n");
        for (g, p) in pairs {
            let _ = writeln!(s, "{g},{p}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn abs_rel_examples() {
        assert_eq!(abs_rel(&[10.0, 20.0], &[10.0, 20.0]).unwrap(), 0.0);
        assert!((abs_rel(&[11.0], &[10.0]).unwrap() - 0.1).abs() < 1e-15);
        assert!((abs_rel(&[11.0, 9.0], &[10.0, 10.0]).unwrap() - 0.1).abs() < 1e-15);
        assert!(matches!(abs_rel(&[], &[]), Err(Error::EmptyInput)));
        assert!(matches!(abs_rel(&[1.0], &[]), Err(Error::LengthMismatch(1, 0))));
    }

    #[test]
    fn sq_rel_examples() {
        assert_eq!(sq_rel(&[3.0], &[3.0]).unwrap(), 0.0);
        assert!((sq_rel(&[11.0], &[10.0]).unwrap() - 0.1).abs() < 1e-15);
        assert!((sq_rel(&[12.0], &[10.0]).unwrap() - 0.4).abs() < 1e-15);
        assert!(matches!(sq_rel(&[], &[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn binned_examples() {
        let r = binned_report(&[10.0, 12.0], &[10.0, 12.0], 20.0).unwrap();
        assert!(r.far.is_none());
        assert_eq!(r.near.as_ref().unwrap().count, 2);

        let r = binned_report(&[10.0, 30.0], &[10.0, 30.0], 20.0).unwrap();
        assert_eq!(r.near.unwrap().abs_rel, 0.0);
        assert_eq!(r.far.unwrap().abs_rel, 0.0);

        let r = binned_report(&[11.0, 36.0], &[10.0, 30.0], 20.0).unwrap();
        assert!((r.near.unwrap().abs_rel - 0.1).abs() < 1e-15);
        assert!((r.far.unwrap().abs_rel - 0.2).abs() < 1e-15);

        // the boundary belongs to the far bin
        let r = binned_report(&[20.0], &[20.0], 20.0).unwrap();
        assert!(r.near.is_none() && r.far.is_some());
    }

    #[test]
    fn mean_cost_examples() {
        let c = 3.144e-6;
        assert!((mean_cost(c, c, 2, 2).unwrap() - 4.716e-6).abs() < 1e-20);
        assert_eq!(mean_cost(1.5, 0.5, 7, 0).unwrap(), 2.0);
        assert_eq!(mean_cost(1.5, 0.0, 3, 9).unwrap(), 1.5);
        assert!(matches!(mean_cost(1.0, 1.0, 0, 0), Err(Error::EmptyInput)));
    }

    proptest! {
        #[test]
        fn metrics_permutation_and_scale(
            v in proptest::collection::vec((1.0..50.0f64, 1.0..50.0f64), 1..40),
            k in 0.1..10.0f64,
            rot in 0usize..40,
        ) {
            let (p, g): (Vec<f64>, Vec<f64>) = v.iter().copied().unzip();
            let a = abs_rel(&p, &g).unwrap();
            let s = sq_rel(&p, &g).unwrap();
            let mut pr = p.clone();
            let mut gr = g.clone();
            let r = rot % p.len();
            pr.rotate_left(r);
            gr.rotate_left(r);
            prop_assert!((abs_rel(&pr, &gr).unwrap() - a).abs() <= 1e-12 * (1.0 + a));
            let pk: Vec<f64> = p.iter().map(|x| x * k).collect();
            let gk: Vec<f64> = g.iter().map(|x| x * k).collect();
            prop_assert!((abs_rel(&pk, &gk).unwrap() - a).abs() <= 1e-12 * (1.0 + a));
            prop_assert!((sq_rel(&pk, &gk).unwrap() - k * s).abs() <= 1e-10 * (1.0 + k * s));
        }

        #[test]
        fn bins_partition(gts in proptest::collection::vec(1.0..40.0f64, 1..60)) {
            let preds: Vec<f64> = gts.iter().map(|g| g * 1.1).collect();
            let r = binned_report(&preds, &gts, 20.0).unwrap();
            let total: usize = r.bins().map(|b| b.count).sum();
            prop_assert_eq!(total, gts.len());
        }

        #[test]
        fn mean_cost_between_bounds(c_pcm in 0.0..1.0f64, c_gate in 0.0..1.0f64, e in 0usize..100, h in 0usize..100) {
            prop_assume!(e + h > 0);
            let m = mean_cost(c_pcm, c_gate, e, h).unwrap();
            prop_assert!(m >= c_pcm - 1e-15 && m <= c_pcm + c_gate + 1e-15);
        }
    }
}
