//! Plain-text rendering of a [`QcReport`] as a comparison table.

use std::fmt::Write;

use super::{PopulationCheck, ProportionEstimate, QcCounts, QcReport};

/// `0.91494` → `"91.5%"`; with `signed`, `0.9312` → `"+93.1%"`.
pub fn format_percent(v: f64, signed: bool) -> String {
    if signed {
        format!("{:+.1}%", v * 100.0)
    } else {
        format!("{:.1}%", v * 100.0)
    }
}

fn estimate(e: Option<&ProportionEstimate>) -> String {
    match e {
        Some(e) => format!(
            "{} [{:.1}, {:.1}]",
            format_percent(e.value, false),
            e.ci_low * 100.0,
            e.ci_high * 100.0
        ),
        None => "n/a".into(),
    }
}

fn row(out: &mut String, label: &str, c: &QcCounts, p: &ProportionEstimate, r: Option<&ProportionEstimate>) {
    let fn_ = c.fn_.map(|f| f.to_string()).unwrap_or_else(|| "-".into());
    let _ = writeln!(
        out,
        "{:<4} {:<20} {:>7} {:>7} {:>7}  {:<22} {}",
        label,
        c.detector_id,
        c.tp,
        c.fp,
        fn_,
        estimate(Some(p)),
        estimate(r)
    );
}

pub fn render_text(r: &QcReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "QC report ({:.0}% confidence, Wald intervals)", r.confidence * 100.0);
    let _ = writeln!(
        out,
        "{:<4} {:<20} {:>7} {:>7} {:>7}  {:<22} {}",
        "", "detector", "TP", "FP", "FN", "Precision", "Recall"
    );
    row(&mut out, "WC", &r.wc, &r.precision_wc, r.recall_wc.as_ref());
    row(&mut out, "SC", &r.sc, &r.precision_sc, r.recall_sc.as_ref());
    let reference = |v: Option<f64>| v.map(|v| format!("  (reference {})", format_percent(v, true))).unwrap_or_default();
    let (ref_r, ref_p) = r
        .reference
        .as_ref()
        .map(|x| (x.rc_recall, x.rc_precision))
        .unwrap_or((None, None));
    let _ = writeln!(out, "rc(recall)    {}{}", format_percent(r.rc_recall, true), reference(ref_r));
    let _ = writeln!(out, "rc(precision) {}{}", format_percent(r.rc_precision, true), reference(ref_p));
    let _ = match &r.population {
        PopulationCheck::Equal { population } => {
            writeln!(out, "population    TP+FN {population} = {population} (ok)")
        }
        PopulationCheck::Unequal { wc, sc } => writeln!(
            out,
            "population    TP+FN {wc} != {sc} (WARNING: rc(recall) assumes equal populations)"
        ),
        PopulationCheck::Unverified => writeln!(out, "population    unverified (FN not counted for both detectors)"),
    };
    out
}
