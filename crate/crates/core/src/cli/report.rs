//! CSV tables, plots and the markdown summary derived from a run record.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::plot::{violin_svg, Group, Series};
use super::study::{fmt_lambda, Arm, RunRecord, TrialStatus};
use super::CliError;

pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const MCC_CSV: &str = "mcc.csv";
pub const LAMBDA_CSV: &str = "lambda_selection.csv";
pub const VIOLIN_SVG: &str = "mcc_violin.svg";
pub const GRID_SVG: &str = "lambda_grid.svg";
pub const SUMMARY_MD: &str = "summary.md";

fn concept_counts(rec: &RunRecord) -> Vec<usize> {
    let s: BTreeSet<usize> = rec.trials.iter().map(|t| t.result.plan.n_a).collect();
    s.into_iter().collect()
}

fn lambdas_for(rec: &RunRecord, arm: Arm, n_a: usize) -> Vec<f64> {
    let mut l: Vec<f64> = rec
        .trials
        .iter()
        .filter(|t| t.result.plan.arm == arm && t.result.plan.n_a == n_a)
        .map(|t| t.result.plan.lambda)
        .collect();
    l.sort_by(f64::total_cmp);
    l.dedup();
    l
}

pub fn aggregate_csv(rec: &RunRecord) -> String {
    let mut s = String::from("arm,n_a,lambda,metric,n,mean,sd\n");
    for a in &rec.aggregates {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.10},{:.10}",
            a.arm.label(),
            a.n_a,
            fmt_lambda(a.lambda),
            a.metric,
            a.n,
            a.mean,
            a.sd
        );
    }
    s
}

/// Per-trial MCC distributions (one row per trial, failed trials included
/// with an empty value).
pub fn mcc_csv(rec: &RunRecord, n_a: Option<usize>) -> String {
    let mut s = String::from("arm,n_a,lambda,seed,status,mcc,mcc_pearson_fit,mcc_excluding_violated\n");
    for t in &rec.trials {
        let p = &t.result.plan;
        if n_a.is_some_and(|n| n != p.n_a) {
            continue;
        }
        let get = |k: &str| t.metrics.get(k).map(|v| format!("{v:.10}")).unwrap_or_default();
        let status = match t.result.status {
            TrialStatus::Ok => "ok",
            TrialStatus::Failed { .. } => "failed",
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{status},{},{},{}",
            p.arm.label(),
            p.n_a,
            fmt_lambda(p.lambda),
            p.seed,
            get("mcc"),
            get("mcc_pearson_fit"),
            get("mcc_excluding_violated")
        );
    }
    s
}

pub fn lambda_csv(rec: &RunRecord) -> String {
    let mut s = String::from("n_a,seed,lambda,mcc,selected\n");
    for sel in &rec.lambda_selection {
        let seed = sel.seed.map_or_else(|| "mean".to_string(), |v| v.to_string());
        for (l, m) in sel.lambdas.iter().zip(&sel.mcc) {
            let _ = writeln!(
                s,
                "{},{seed},{},{m:.10},{}",
                sel.n_a,
                fmt_lambda(*l),
                u8::from(l.to_bits() == sel.selected.to_bits())
            );
        }
    }
    s
}

pub fn violin(rec: &RunRecord) -> String {
    let groups: Vec<Group> = concept_counts(rec)
        .into_iter()
        .map(|n_a| Group {
            label: format!("n_A = {n_a}"),
            series: rec
                .study
                .arms()
                .iter()
                .map(|&arm| Series {
                    label: arm.label().to_string(),
                    values: rec.values(arm, n_a, rec.headline_lambda(arm), "mcc"),
                })
                .collect(),
        })
        .collect();
    violin_svg(&format!("{}: MCC", rec.study.name()), "MCC", &groups, (0.0, 1.0))
}

/// Ours across the λ grid, when more than one λ ran.
pub fn grid_violin(rec: &RunRecord) -> Option<String> {
    let groups: Vec<Group> = concept_counts(rec)
        .into_iter()
        .filter_map(|n_a| {
            let ls = lambdas_for(rec, Arm::Ours, n_a);
            (ls.len() > 1).then(|| Group {
                label: format!("n_A = {n_a}"),
                series: ls
                    .iter()
                    .map(|&l| Series {
                        label: format!("λ = {}", fmt_lambda(l)),
                        values: rec.values(Arm::Ours, n_a, l, "mcc"),
                    })
                    .collect(),
            })
        })
        .collect();
    (!groups.is_empty()).then(|| violin_svg(&format!("{}: Ours over λ", rec.study.name()), "MCC", &groups, (0.0, 1.0)))
}

pub fn summary_markdown(rec: &RunRecord) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {}\n", rec.study.name());
    let _ = writeln!(s, "- config hash: `{}`", rec.config_hash);
    let _ = writeln!(s, "- seeds: {:?}", rec.config.trials);
    let _ = writeln!(s, "- N = {}", rec.config.generation.n_samples);
    let _ = writeln!(
        s,
        "- coverage: {}/{} trials succeeded",
        rec.coverage.succeeded, rec.coverage.planned
    );
    if !rec.coverage.failed.is_empty() {
        let _ = writeln!(s, "\nFailed trials (excluded from aggregates):\n");
        for f in &rec.coverage.failed {
            let _ = writeln!(s, "- {f}");
        }
    }

    let _ = writeln!(s, "\n## MCC by arm\n");
    let arms = rec.study.arms();
    let mut header = String::from("| n_A |");
    let mut rule = String::from("|---|");
    for a in arms {
        let _ = write!(header, " {} mean (SD) |", a.label());
        rule.push_str("---|");
    }
    for a in &arms[1..] {
        let _ = write!(header, " Ours − {} |", a.label());
        rule.push_str("---|");
    }
    let _ = writeln!(s, "{header}\n{rule}");
    for n_a in concept_counts(rec) {
        let mut row = format!("| {n_a} |");
        let stat = |a: Arm| rec.aggregate(a, n_a, rec.headline_lambda(a), "mcc");
        for &a in arms {
            match stat(a) {
                Some(g) => {
                    let _ = write!(row, " {:.4} ({:.4}), n={} |", g.mean, g.sd, g.n);
                }
                None => row.push_str(" – |"),
            }
        }
        for &a in &arms[1..] {
            match (stat(Arm::Ours), stat(a)) {
                (Some(o), Some(b)) => {
                    let _ = write!(row, " {:+.4} |", o.mean - b.mean);
                }
                _ => row.push_str(" – |"),
            }
        }
        let _ = writeln!(s, "{row}");
    }
    let _ = writeln!(s, "\nHeadline λ for Ours: {}. Base trains with λ = 0 and no gating.", fmt_lambda(rec.config.study.primary_lambda));

    if rec.aggregates.iter().any(|a| a.metric == "mcc_excluding_violated") {
        let _ = writeln!(s, "\n## Partial violation\n");
        let _ = writeln!(s, "| n_A | arm | MCC (all concepts) | MCC (violated concepts excluded) |\n|---|---|---|---|");
        for n_a in concept_counts(rec) {
            for &a in arms {
                let l = rec.headline_lambda(a);
                if let (Some(all), Some(ex)) = (
                    rec.aggregate(a, n_a, l, "mcc"),
                    rec.aggregate(a, n_a, l, "mcc_excluding_violated"),
                ) {
                    let _ = writeln!(
                        s,
                        "| {n_a} | {} | {:.4} ({:.4}) | {:.4} ({:.4}) |",
                        a.label(),
                        all.mean,
                        all.sd,
                        ex.mean,
                        ex.sd
                    );
                }
            }
        }
    }

    if !rec.lambda_selection.is_empty() {
        let _ = writeln!(s, "\n## λ selection (by MCC)\n");
        let _ = writeln!(s, "| n_A | replication | selected λ | MCC per λ |\n|---|---|---|---|");
        for sel in &rec.lambda_selection {
            let per: Vec<String> = sel
                .lambdas
                .iter()
                .zip(&sel.mcc)
                .map(|(l, m)| format!("{}: {m:.4}", fmt_lambda(*l)))
                .collect();
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} |",
                sel.n_a,
                sel.seed.map_or_else(|| "mean over seeds".to_string(), |v| format!("seed {v}")),
                fmt_lambda(sel.selected),
                per.join(", ")
            );
        }
    }

    let _ = writeln!(s, "\n## All metrics\n");
    let _ = writeln!(s, "| n_A | arm | λ | metric | n | mean | SD |\n|---|---|---|---|---|---|---|");
    for a in &rec.aggregates {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {:.6} | {:.6} |",
            a.n_a,
            a.arm.label(),
            fmt_lambda(a.lambda),
            a.metric,
            a.n,
            a.mean,
            a.sd
        );
    }
    let _ = writeln!(s, "\nPlots: `{VIOLIN_SVG}`{}.", if grid_violin(rec).is_some() { format!(", `{GRID_SVG}`") } else { String::new() });
    s
}

/// Writes every derived artifact. All outputs depend only on the record.
pub fn write_outputs(run_dir: &Path, rec: &RunRecord) -> Result<(), CliError> {
    let put = |name: &str, text: &str| {
        let p = run_dir.join(name);
        fs::write(&p, text).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))
    };
    put(AGGREGATE_CSV, &aggregate_csv(rec))?;
    put(MCC_CSV, &mcc_csv(rec, None))?;
    for n_a in concept_counts(rec) {
        put(&format!("mcc_nA{n_a}.csv"), &mcc_csv(rec, Some(n_a)))?;
    }
    if !rec.lambda_selection.is_empty() {
        put(LAMBDA_CSV, &lambda_csv(rec))?;
    }
    put(VIOLIN_SVG, &violin(rec))?;
    if let Some(g) = grid_violin(rec) {
        put(GRID_SVG, &g)?;
    }
    put(SUMMARY_MD, &summary_markdown(rec))?;
    Ok(())
}
