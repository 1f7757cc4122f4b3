//! Text renderings of evaluation results: markdown tables, PR-curve CSV and
//! a dependency-free SVG plot.

use std::fmt::Write as _;

use crate::eval::{Breakdown, BreakdownGroup, EvalReport};

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_owned(), |x| format!("{x:.digits$}"))
}

/// One row per metric with AUROC and AUPRC.
pub fn metrics_table(reports: &[EvalReport]) -> String {
    let mut s = String::from("| Metric | AUROC | AUPRC | n_pos | n_neg |\n|---|---|---|---|---|\n");
    for r in reports {
        let _ = writeln!(s, "| {} | {:.3} | {:.3} | {} | {} |", r.metric_name, r.auroc, r.auprc, r.n_pos, r.n_neg);
    }
    s
}

fn group_name(g: BreakdownGroup) -> &'static str {
    match g {
        BreakdownGroup::Factual => "Factual",
        BreakdownGroup::NonFactual => "NonFactual",
        BreakdownGroup::Consistent => "Consistent",
        BreakdownGroup::NonConsistent => "NonConsistent",
    }
}

pub fn breakdown_tables(b: &Breakdown) -> String {
    let mut s = String::from(
        "| Expression | Group | n | Accuracy (%) | Consistency (%) | log p ratio | Entropy |\n|---|---|---|---|---|---|---|\n",
    );
    for r in &b.rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} |",
            r.expression_id,
            group_name(r.group),
            r.n,
            opt(r.accuracy_pct, 1),
            opt(r.consistency_pct, 1),
            opt(r.mean_logprob_ratio, 3),
            opt(r.mean_entropy, 3),
        );
    }
    s.push_str("\n| Expression | Abstentions | mean log p (reference) | mean log p ratio |\n|---|---|---|---|\n");
    for a in &b.abstention {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} |",
            a.expression_id,
            a.n,
            opt(a.mean_reference_logp, 3),
            opt(a.mean_logprob_ratio, 3)
        );
    }
    s.push_str("\n| Expression | Consistent n | AUROC (log p ratio) | AUROC (entropy) |\n|---|---|---|---|\n");
    for c in &b.consistent_group_auroc {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} |",
            c.expression_id,
            c.n,
            opt(c.logprob_ratio_auroc, 3),
            opt(c.entropy_auroc, 3)
        );
    }
    s
}

pub fn pr_curve_csv(r: &EvalReport) -> String {
    let mut s = String::from("recall,precision,threshold\n");
    for p in &r.pr_points {
        let _ = writeln!(s, "{},{},{}", p.recall, p.precision, p.threshold);
    }
    s
}

const PALETTE: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

/// Step-wise PR curves for all metrics on shared axes.
pub fn pr_curve_svg(reports: &[EvalReport]) -> String {
    let (w, h, m) = (480.0, 360.0, 40.0);
    let x = |r: f64| m + r * (w - 2.0 * m);
    let y = |p: f64| h - m - p * (h - 2.0 * m);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <path d=\"M{x0} {y1} L{x0} {y0} L{x1} {y0}\" stroke=\"black\" fill=\"none\"/>\n\
         <text x=\"{cx}\" y=\"{ty}\" text-anchor=\"middle\">Recall</text>\n\
         <text x=\"12\" y=\"{cy}\" text-anchor=\"middle\" transform=\"rotate(-90 12 {cy})\">Precision</text>\n",
        x0 = x(0.0),
        x1 = x(1.0),
        y0 = y(0.0),
        y1 = y(1.0),
        cx = w / 2.0,
        ty = h - 8.0,
        cy = h / 2.0,
    );
    for (i, r) in reports.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut d = String::new();
        let mut prev_recall = 0.0;
        for (j, p) in r.pr_points.iter().enumerate() {
            if j == 0 {
                let _ = write!(d, "M{:.2} {:.2}", x(prev_recall), y(p.precision));
            }
            let _ = write!(d, " L{:.2} {:.2} L{:.2} {:.2}", x(prev_recall), y(p.precision), x(p.recall), y(p.precision));
            prev_recall = p.recall;
        }
        let _ = writeln!(s, "<path d=\"{d}\" stroke=\"{color}\" fill=\"none\" stroke-width=\"1.5\"/>");
        let _ = writeln!(
            s,
            "<text x=\"{:.0}\" y=\"{:.0}\" fill=\"{color}\">{} (AP {:.3})</text>",
            x(0.55),
            y(0.35) + 14.0 * i as f64,
            r.metric_name,
            r.auprc
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::auprc;
    use crate::model::MetricName;

    fn report() -> EvalReport {
        let (ap, pts) = auprc(&[(0.9, true), (0.5, false), (0.4, true)]).unwrap();
        EvalReport {
            metric_name: MetricName::FCertain,
            auroc: 0.5,
            auprc: ap,
            pr_points: pts,
            n_pos: 2,
            n_neg: 1,
            breakdowns: None,
        }
    }

    #[test]
    fn table_and_csv() {
        let t = metrics_table(&[report()]);
        assert!(t.contains("| f_certain | 0.500 | 0.833 | 2 | 1 |"));
        let csv = pr_curve_csv(&report());
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(csv.lines().nth(1).unwrap(), "0.5,1,0.9");
    }

    #[test]
    fn svg_has_one_path_per_metric() {
        let mut b = report();
        b.metric_name = MetricName::LogP;
        let svg = pr_curve_svg(&[report(), b]);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("stroke-width=\"1.5\"").count(), 2);
    }
}
