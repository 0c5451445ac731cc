//! Estimator quality metrics and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::render_table;
use crate::error::{Error, Result};
use crate::scalar::{pairwise_sum, Scalar};
use crate::training::mse_loss;
use crate::wer::{weighted_estimate_by_duration, weighted_wer_by_words, werr, ScoredPair};

/// Bin width of WER histograms (two percentage points).
pub const HISTOGRAM_BIN_WIDTH: f64 = 0.02;

pub fn rmse<T: Scalar>(targets: &[T], estimates: &[T]) -> Result<T> {
    Ok(mse_loss(estimates, targets)?.sqrt())
}

/// Pearson correlation between targets and estimates.
pub fn pcc<T: Scalar>(targets: &[T], estimates: &[T]) -> Result<T> {
    if targets.len() != estimates.len() {
        return Err(Error::shape(format!(
            "{} targets vs {} estimates",
            targets.len(),
            estimates.len()
        )));
    }
    if targets.len() < 2 {
        return Err(Error::Data("correlation needs at least two pairs".into()));
    }
    let n = T::from_usize(targets.len()).unwrap();
    let mt = pairwise_sum(targets) / n;
    let me = pairwise_sum(estimates) / n;
    let dt: Vec<T> = targets.iter().map(|&t| t - mt).collect();
    let de: Vec<T> = estimates.iter().map(|&e| e - me).collect();
    let cov: Vec<T> = dt.iter().zip(&de).map(|(&a, &b)| a * b).collect();
    let vt: Vec<T> = dt.iter().map(|&a| a * a).collect();
    let ve: Vec<T> = de.iter().map(|&b| b * b).collect();
    let (vt, ve) = (pairwise_sum(&vt), pairwise_sum(&ve));
    if vt == T::zero() || ve == T::zero() {
        return Err(Error::Degenerate("correlation undefined for a constant sequence".into()));
    }
    let r = pairwise_sum(&cov) / (vt * ve).sqrt();
    Ok(r.max(-T::one()).min(T::one()))
}

/// Counts over `[k·w, (k+1)·w)` bins covering `[0, 1]`, last bin closed.
pub fn histogram<T: Scalar>(values: &[T], bin_width: f64) -> Result<Vec<usize>> {
    if !(bin_width > 0.0 && bin_width <= 1.0) {
        return Err(Error::Param(format!("bin width {bin_width} outside (0, 1]")));
    }
    let bins = (1.0 / bin_width).round() as usize;
    let mut counts = vec![0usize; bins];
    for v in values {
        let v = v.widen();
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Data(format!("histogram value {v} outside [0, 1]")));
        }
        // Small epsilon so that values on an edge, e.g. 0.02 / 0.02, land in
        // the upper bin despite binary rounding.
        let k = ((v / bin_width) + 1e-9).floor() as usize;
        counts[k.min(bins - 1)] += 1;
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerRow {
    pub speaker: String,
    pub mean_target: f64,
    pub mean_estimate: f64,
    pub count: usize,
}

/// Unweighted per-speaker means, sorted by speaker id.
pub fn per_speaker_means<S: AsRef<str>>(rows: &[(S, f64, f64)]) -> Result<Vec<SpeakerRow>> {
    if rows.is_empty() {
        return Err(Error::Data("no utterances for per-speaker means".into()));
    }
    let mut acc: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for (s, t, e) in rows {
        let slot = acc.entry(s.as_ref()).or_default();
        slot.0 += t;
        slot.1 += e;
        slot.2 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(speaker, (t, e, n))| SpeakerRow {
            speaker: speaker.to_owned(),
            mean_target: t / n as f64,
            mean_estimate: e / n as f64,
            count: n,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: usize,
    pub rmse: f64,
    pub pcc: f64,
    pub wer_wrd: f64,
    pub est_dur: f64,
    pub werr: f64,
    pub histogram_target: Vec<usize>,
    /// `None` when some estimate lies outside `[0, 1]` (unclamped
    /// confidence-score baselines).
    pub histogram_estimate: Option<Vec<usize>>,
    pub per_speaker: Vec<SpeakerRow>,
}

/// All metrics for estimates aligned with `scored`.
pub fn full_report(scored: &[ScoredPair], estimates: &[f64]) -> Result<EvalReport> {
    if estimates.is_empty() {
        return Err(Error::Data("no estimates to evaluate".into()));
    }
    if scored.len() != estimates.len() {
        return Err(Error::shape(format!(
            "{} scored pairs vs {} estimates",
            scored.len(),
            estimates.len()
        )));
    }
    let targets: Vec<f64> = scored.iter().map(|p| p.wer).collect();
    let wer_wrd = weighted_wer_by_words(scored.iter().map(|p| &p.counts))?;
    let weighted: Vec<(f64, f64)> = scored
        .iter()
        .zip(estimates)
        .map(|(p, &e)| (e, p.record.duration))
        .collect();
    let est_dur = weighted_estimate_by_duration(&weighted)?;
    let speakers: Vec<(&str, f64, f64)> = scored
        .iter()
        .zip(estimates)
        .map(|(p, &e)| (p.record.speaker.as_str(), p.wer, e))
        .collect();
    Ok(EvalReport {
        utterances: scored.len(),
        rmse: rmse(&targets, estimates)?,
        pcc: pcc(&targets, estimates)?,
        wer_wrd,
        est_dur,
        werr: werr(wer_wrd, est_dur)?,
        histogram_target: histogram(&targets, HISTOGRAM_BIN_WIDTH)?,
        histogram_estimate: histogram(estimates, HISTOGRAM_BIN_WIDTH).ok(),
        per_speaker: per_speaker_means(&speakers)?,
    })
}

/// Aligned table with RMSE, PCC, WER_wrd, est. WER_dur and WERR columns.
pub fn render_report_table(rows: &[(&str, &EvalReport)]) -> String {
    let header = ["System", "RMSE", "PCC", "WER_wrd", "WER^_dur", "WERR"];
    let body: Vec<[String; 6]> = rows
        .iter()
        .map(|(name, r)| {
            [
                name.to_string(),
                format!("{:.4}", r.rmse),
                format!("{:.4}", r.pcc),
                format!("{:.2}%", 100.0 * r.wer_wrd),
                format!("{:.2}%", 100.0 * r.est_dur),
                format!("{:.2}%", 100.0 * r.werr),
            ]
        })
        .collect();
    render_table(&header, &body)
}

/// `bin_start,bin_end,target,estimate` rows.
pub fn histogram_csv(report: &EvalReport) -> String {
    let mut out = String::from("bin_start,bin_end,target,estimate\n");
    for (k, &t) in report.histogram_target.iter().enumerate() {
        let lo = k as f64 * HISTOGRAM_BIN_WIDTH;
        let e = report
            .histogram_estimate
            .as_ref()
            .map_or(String::new(), |h| h[k].to_string());
        let _ = writeln!(out, "{lo:.2},{:.2},{t},{e}", lo + HISTOGRAM_BIN_WIDTH);
    }
    out
}

pub fn per_speaker_csv(rows: &[SpeakerRow]) -> String {
    let mut out = String::from("speaker,mean_target,mean_estimate,count\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{}",
            r.speaker, r.mean_target, r.mean_estimate, r.count
        );
    }
    out
}

/// Static SVG bar chart of one or two series over shared categories.
pub fn bar_chart_svg(title: &str, labels: &[String], series: &[(&str, Vec<f64>)]) -> String {
    const W: f64 = 900.0;
    const H: f64 = 360.0;
    const PAD: f64 = 40.0;
    let colors = ["#4c72b0", "#dd8452"];
    let max = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let n = labels.len().max(1) as f64;
    let slot = (W - 2.0 * PAD) / n;
    let bar = slot / (series.len().max(1) as f64 + 0.5);
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="10">"#
    );
    let _ = write!(svg, r#"<text x="{}" y="16" text-anchor="middle" font-size="13">{title}</text>"#, W / 2.0);
    let _ = write!(
        svg,
        r#"<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        H - PAD,
        W - PAD,
        H - PAD
    );
    for (s, (name, values)) in series.iter().enumerate() {
        let color = colors[s % colors.len()];
        for (i, &v) in values.iter().enumerate() {
            let h = (H - 2.0 * PAD) * v / max;
            let x = PAD + i as f64 * slot + s as f64 * bar;
            let _ = write!(
                svg,
                r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{color}"/>"#,
                H - PAD - h,
                bar * 0.9
            );
        }
        let _ = write!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#,
            W - PAD - 120.0,
            30.0 + 14.0 * s as f64
        );
    }
    let step = (labels.len() / 10).max(1);
    for (i, l) in labels.iter().enumerate().step_by(step) {
        let _ = write!(
            svg,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{l}</text>"#,
            PAD + (i as f64 + 0.5) * slot,
            H - PAD + 14.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rmse_cases() {
        assert_eq!(rmse(&[0.1, 0.2], &[0.1, 0.2]).unwrap(), 0.0);
        assert_eq!(rmse(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert!((rmse(&[0.2f64], &[0.5]).unwrap() - 0.3).abs() < 1e-15);
        assert!(rmse(&[0.2], &[0.5, 0.1]).is_err());
    }

    #[test]
    fn pcc_cases() {
        let t = [0.1f64, 0.5, 0.2, 0.9];
        assert!((pcc(&t, &t).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = t.iter().map(|v| 0.7 - v).collect();
        assert!((pcc(&t, &neg).unwrap() + 1.0).abs() < 1e-15);
        // Hand evaluation: cov = 3, var_t = 2, var_e = 42/9.
        let r = pcc(&[0.0, 1.0, 2.0], &[0.0, 2.0, 3.0]).unwrap();
        assert!((r - 3.0 / (2.0f64 * 42.0 / 9.0).sqrt()).abs() < 1e-15);
        assert!((r - 0.9820).abs() < 1e-4);
        assert!(matches!(pcc(&[1.0, 1.0], &[0.0, 1.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn histogram_edges() {
        let h = histogram(&[0.0, 0.0, 0.0], 0.02).unwrap();
        assert_eq!(h.len(), 50);
        assert_eq!(h[0], 3);
        assert_eq!(histogram(&[0.02], 0.02).unwrap()[1], 1);
        assert_eq!(histogram(&[1.0], 0.02).unwrap()[49], 1);
        assert!(histogram(&[1.2], 0.02).is_err());
    }

    #[test]
    fn speaker_means() {
        let rows = [("a", 0.1, 0.2), ("a", 0.3, 0.2), ("b", 0.5, 0.4)];
        let t = per_speaker_means(&rows).unwrap();
        assert_eq!(t.len(), 2);
        assert!((t[0].mean_target - 0.2).abs() < 1e-15);
        assert_eq!(t[1].mean_target, 0.5);
        assert_eq!(t[1].mean_estimate, 0.4);
        assert_eq!(t.iter().map(|r| r.count).sum::<usize>(), 3);
        assert!(per_speaker_means::<&str>(&[]).is_err());
    }

    proptest! {
        #[test]
        fn pcc_affine_invariant(
            v in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 3..40),
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
        ) {
            let t: Vec<f64> = v.iter().map(|p| p.0).collect();
            let e: Vec<f64> = v.iter().map(|p| p.1).collect();
            prop_assume!(pcc(&t, &e).is_ok());
            let e2: Vec<f64> = e.iter().map(|x| a * x + b).collect();
            let t2: Vec<f64> = t.iter().map(|x| a * x + b).collect();
            let r = pcc(&t, &e).unwrap();
            prop_assert!((pcc(&t, &e2).unwrap() - r).abs() <= 1e-12);
            prop_assert!((pcc(&t2, &e).unwrap() - r).abs() <= 1e-12);
        }

        #[test]
        fn rmse_is_root_of_mse(v in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..40)) {
            let t: Vec<f64> = v.iter().map(|p| p.0).collect();
            let e: Vec<f64> = v.iter().map(|p| p.1).collect();
            prop_assert_eq!(rmse(&t, &e).unwrap(), mse_loss(&e, &t).unwrap().sqrt());
        }

        #[test]
        fn histogram_permutation_invariant(mut v in prop::collection::vec(0.0f64..=1.0, 1..60)) {
            let h = histogram(&v, 0.02).unwrap();
            prop_assert_eq!(h.iter().sum::<usize>(), v.len());
            v.reverse();
            prop_assert_eq!(histogram(&v, 0.02).unwrap(), h);
        }
    }
}
