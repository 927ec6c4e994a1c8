//! Markdown summaries of evaluation output and SVG reward curves.

use std::fmt::Write as _;
use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::eval::{Aggregate, EvalReport};
use crate::grpo::CurvePoint;

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn metrics(a: &Aggregate) -> [(&'static str, Option<f64>); 6] {
    [
        ("wer", a.wer),
        ("r_con", a.r_con),
        ("r_mel", a.r_mel),
        ("total_reward", a.total_reward),
        ("fpc", a.fpc),
        ("sim (stub)", a.sim),
    ]
}

/// Aggregates are recomputed from the per-clip rows rather than read from the file.
pub fn render_markdown(report: &EvalReport, baseline: Option<&EvalReport>) -> String {
    let agg = Aggregate::from_clips(&report.clips);
    let mut out = String::new();
    let _ = writeln!(out, "# Evaluation report\n");
    let _ = writeln!(
        out,
        "{} clips, {} sampler steps, cfg scale {}, seed {}.\n",
        agg.clips, report.sampler.steps, report.sampler.cfg_scale, report.seed
    );
    let _ = writeln!(out, "## Aggregates\n");
    match baseline {
        Some(base) => {
            let b = Aggregate::from_clips(&base.clips);
            let _ = writeln!(out, "| metric | value | baseline | delta |");
            let _ = writeln!(out, "|---|---|---|---|");
            for ((name, v), (_, bv)) in metrics(&agg).into_iter().zip(metrics(&b)) {
                let delta = v.zip(bv).map(|(x, y)| x - y);
                let _ = writeln!(out, "| {name} | {} | {} | {} |", cell(v), cell(bv), cell(delta));
            }
        }
        None => {
            let _ = writeln!(out, "| metric | value |");
            let _ = writeln!(out, "|---|---|");
            for (name, v) in metrics(&agg) {
                let _ = writeln!(out, "| {name} | {} |", cell(v));
            }
        }
    }
    let _ = writeln!(out, "\nfpc defined on {} of {} clips.\n", agg.fpc_defined, agg.clips);
    let _ = writeln!(out, "## Per clip\n");
    let _ = writeln!(out, "| clip | wer | S | D | I | r_con | r_mel | fpc | sim |");
    let _ = writeln!(out, "|---|---|---|---|---|---|---|---|---|");
    for c in &report.clips {
        let _ = writeln!(
            out,
            "| {} | {:.4} | {} | {} | {} | {:.4} | {:.4} | {} | {:.4} |",
            c.clip_id,
            c.wer,
            c.substitutions,
            c.deletions,
            c.insertions,
            c.r_con,
            c.r_mel,
            cell(c.fpc),
            c.sim
        );
    }
    let _ = writeln!(out, "\n_{}_", report.sim_note);
    out
}

pub fn parse_curve_log(text: &str) -> Result<Vec<CurvePoint>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("curve line {}: {e}", i + 1))))
        .collect()
}

/// Mean reward, content and melody reward against step.
pub fn plot_curves(points: &[CurvePoint], path: &Path) -> Result<()> {
    let plot_err = |e: String| Error::Format(format!("plotting failed: {e}"));
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
    let max_step = points.iter().map(|p| p.step).max().unwrap_or(1).max(1) as f64;
    let values = points.iter().flat_map(|p| [p.mean_reward, p.mean_r_con, p.mean_r_mel]);
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo - 0.05, hi + 0.05) } else { (0.0, 1.0) };
    let mut chart = ChartBuilder::on(&root)
        .caption("post-training rewards", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(48)
        .build_cartesian_2d(0.0..max_step, lo..hi)
        .map_err(|e| plot_err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("step")
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    let series: [(&str, RGBColor, fn(&CurvePoint) -> f64); 3] = [
        ("mean_reward", BLACK, |p| p.mean_reward),
        ("mean_r_con", BLUE, |p| p.mean_r_con),
        ("mean_r_mel", RED, |p| p.mean_r_mel),
    ];
    for (label, color, get) in series {
        chart
            .draw_series(LineSeries::new(points.iter().map(|p| (p.step as f64, get(p))), color))
            .map_err(|e| plot_err(e.to_string()))?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE)
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    root.present().map_err(|e| plot_err(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::eval::{ClipEval, SIM_NOTE};
    use crate::sampler::SamplerConfig;

    fn report(rows: Vec<ClipEval>) -> EvalReport {
        EvalReport {
            sampler: SamplerConfig::default(),
            seed: 0,
            sim_note: SIM_NOTE.into(),
            aggregate: Aggregate::from_clips(&rows),
            clips: rows,
        }
    }

    fn row(id: &str, wer: f64) -> ClipEval {
        ClipEval {
            clip_id: id.into(),
            wer,
            substitutions: 1,
            deletions: 0,
            insertions: 0,
            r_con: 1.0 - wer,
            r_mel: 0.5,
            fpc: Some(0.5),
            sim: 0.9,
        }
    }

    #[test]
    fn empty_report_has_header_only_table() {
        let md = render_markdown(&report(vec![]), None);
        assert!(md.contains("| clip | wer |"));
        assert!(md.contains("| wer | n/a |"));
    }

    #[test]
    fn delta_column_is_a_difference() {
        let after = report(vec![row("a", 0.25), row("b", 0.75)]);
        let before = report(vec![row("a", 0.5), row("b", 1.0)]);
        let md = render_markdown(&after, Some(&before));
        assert!(md.contains("| wer | 0.5000 | 0.7500 | -0.2500 |"), "{md}");
    }

    #[test]
    fn curves_parse_and_plot() {
        let pts = parse_curve_log(
            "{\"step\":0,\"mean_reward\":1.0,\"mean_r_con\":0.5,\"mean_r_mel\":0.5,\"mean_kl\":0.0}\n\
             {\"step\":1,\"mean_reward\":1.2,\"mean_r_con\":0.6,\"mean_r_mel\":0.6,\"mean_kl\":0.1}\n",
        )
        .unwrap();
        assert_eq!(pts.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.svg");
        plot_curves(&pts, &path).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().contains("<svg"));
        assert!(parse_curve_log("{").is_err());
    }

    proptest! {
        #[test]
        fn curve_parser_never_panics(text in "\\PC{0,80}") {
            let _ = parse_curve_log(&text);
        }
    }
}
