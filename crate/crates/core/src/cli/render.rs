//! Plain-text and CSV renderings of artifacts.

use crate::cimetest::{SkippedCell, TestReport};
use crate::error::Result;
use crate::latent::{FitKind, Target};

use super::artifacts::{FitArtifact, ModelsArtifact};

pub const STAR_FOOTER: &str = "* p<0.10, ** p<0.05, *** p<0.01";

/// Two-sided normal thresholds for coefficient stars.
fn coefficient_stars(estimate: f64, se: f64) -> &'static str {
    if !(se > 0.0) {
        return "";
    }
    let t = (estimate / se).abs();
    if t > 2.5758 {
        "***"
    } else if t > 1.9600 {
        "**"
    } else if t > 1.6449 {
        "*"
    } else {
        ""
    }
}

fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn group_label(r: &TestReport) -> String {
    r.w_label.clone().unwrap_or_else(|| "pooled".into())
}

fn rule(width: usize) -> String {
    "=".repeat(width)
}

pub fn test_table(reports: &[TestReport], skipped: &[SkippedCell]) -> String {
    let gw = reports.iter().map(|r| group_label(r).len()).max().unwrap_or(5).max(5);
    let header = format!("{:<gw$}  {:>9}  {:>7}  {:>7}  {:>7}  {:>9}", "Group", "TS", "90%", "95%", "99%", "N");
    let width = header.len();
    let mut out = String::new();
    out.push_str(&rule(width));
    out.push('\n');
    out.push_str(&format!("{:<gw$}  {:>9}  {:^25}  {:>9}\n", "", "", "Critical values", ""));
    out.push_str(&header);
    out.push('\n');
    out.push_str(&"-".repeat(width));
    out.push('\n');
    for r in reports {
        let cv = &r.critical_values;
        let ts = format!("{:.3}{:<3}", r.statistic, r.stars());
        out.push_str(&format!(
            "{:<gw$}  {:>9}  {:>7.3}  {:>7.3}  {:>7.3}  {:>9}\n",
            group_label(r),
            ts,
            cv.p90,
            cv.p95,
            cv.p99,
            thousands(r.n)
        ));
    }
    out.push_str(&rule(width));
    out.push('\n');
    out.push_str(STAR_FOOTER);
    out.push('\n');
    for s in skipped {
        out.push_str(&format!("skipped {} ({} records): {}\n", s.w_label, thousands(s.n as u64), s.reason));
    }
    out
}

pub fn test_csv(reports: &[TestReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["group", "n", "statistic", "cv90", "cv95", "cv99", "p_value", "stars"])?;
    for r in reports {
        let cv = &r.critical_values;
        w.write_record([
            group_label(r),
            r.n.to_string(),
            r.statistic.to_string(),
            cv.p90.to_string(),
            cv.p95.to_string(),
            cv.p99.to_string(),
            r.p_value.to_string(),
            r.stars().to_string(),
        ])?;
    }
    finish(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| crate::error::Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn fit_heading(f: &FitArtifact) -> String {
    let kind = match f.model {
        FitKind::Linear => "Linear",
        FitKind::OrderedProbitHomoskedastic => "Homosk. probit",
        FitKind::OrderedProbitHeteroskedastic => "Hetero. probit",
    };
    let target = match f.target {
        Target::Latent => "latent",
        Target::Reported => "reported",
    };
    format!("{kind} ({target})")
}

fn row_names(fits: &[&FitArtifact]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for f in fits {
        for n in &f.estimate_names {
            if !names.contains(n) {
                names.push(n.clone());
            }
        }
    }
    names
}

fn lookup(f: &FitArtifact, name: &str) -> Option<(f64, Option<f64>)> {
    let i = f.estimate_names.iter().position(|n| n == name)?;
    let est = f.fit.estimates();
    Some((est[i], f.fit.std_errors.as_ref().map(|s| s[i])))
}

/// Coefficient table with one column per fit and standard errors in
/// parentheses below each estimate.
pub fn fit_table(fits: &[&FitArtifact]) -> String {
    let names = row_names(fits);
    let nw = names.iter().map(|n| n.len()).max().unwrap_or(4).max(4);
    let headings: Vec<String> = fits.iter().map(|f| fit_heading(f)).collect();
    let cw = headings.iter().map(|h| h.len()).max().unwrap_or(0).max(13);
    let mut lines = Vec::new();
    let mut header = format!("{:<nw$}", "");
    for h in &headings {
        header.push_str(&format!("  {h:>cw$}"));
    }
    let width = header.len();
    lines.push(rule(width));
    lines.push(header);
    lines.push("-".repeat(width));
    for name in &names {
        let mut est_line = format!("{name:<nw$}");
        let mut se_line = format!("{:<nw$}", "");
        for f in fits {
            let (e, s) = match lookup(f, name) {
                Some((e, Some(se))) => (format!("{e:.4}{:<3}", coefficient_stars(e, se)), format!("({se:.4})   ")),
                Some((e, None)) => (format!("{e:.4}   "), String::new()),
                None => (String::new(), String::new()),
            };
            est_line.push_str(&format!("  {e:>cw$}"));
            se_line.push_str(&format!("  {s:>cw$}"));
        }
        lines.push(est_line.trim_end().to_string());
        if !se_line.trim().is_empty() {
            lines.push(se_line.trim_end().to_string());
        }
    }
    let mut obs = format!("{:<nw$}", "N");
    for f in fits {
        obs.push_str(&format!("  {:>cw$}", format!("{}   ", thousands(f.n as u64))));
    }
    lines.push(obs.trim_end().to_string());
    lines.push(rule(width));
    lines.push(STAR_FOOTER.to_string());
    for (f, h) in fits.iter().zip(&headings) {
        if !f.fit.sigma_by_cell.is_empty() {
            let sig: Vec<String> =
                f.fit.sigma_by_cell.iter().map(|c| format!("{}={:.4}", c.label, c.sigma)).collect();
            lines.push(format!("{h} sigma by cell: {}", sig.join(", ")));
        }
        if f.fit.clamp_events > 0 {
            lines.push(format!("{h}: {} probabilities clamped to [{:e}, 1 - {:e}]", f.fit.clamp_events, f.clamp, f.clamp));
        }
    }
    let mut out = lines.join("\n");
    out.push('\n');
    out
}

pub fn fit_csv(fits: &[&FitArtifact]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["column", "parameter", "estimate", "std_error"])?;
    for f in fits {
        let heading = fit_heading(f);
        let est = f.fit.estimates();
        for (i, name) in f.estimate_names.iter().enumerate() {
            let se = f.fit.std_errors.as_ref().map(|s| s[i].to_string()).unwrap_or_default();
            w.write_record([heading.clone(), name.clone(), est[i].to_string(), se])?;
        }
    }
    finish(w)
}

fn matrix_block(
    out: &mut String,
    title: &str,
    values: &[f64],
    se: Option<&[f64]>,
    rows: usize,
    cols: usize,
) {
    out.push_str(title);
    out.push('\n');
    for r in 0..rows {
        let est: Vec<String> = (0..cols).map(|c| format!("{:>9.4}", values[r * cols + c])).collect();
        out.push_str(&format!("  {}\n", est.join(" ")));
        if let Some(se) = se {
            let s: Vec<String> = (0..cols).map(|c| format!("{:>9}", format!("({:.4})", se[r * cols + c]))).collect();
            out.push_str(&format!("  {}\n", s.join(" ")));
        }
    }
}

/// Identified distributions per cell, with bootstrap standard errors when
/// available.
pub fn models_table(art: &ModelsArtifact) -> String {
    let mut out = String::new();
    for cell in &art.cells {
        let m = &cell.model;
        let (s, sz) = (m.s_x(), m.s_z());
        let values = m.flatten();
        let se = cell.std_errors.as_deref();
        out.push_str(&format!("Cell {} (n = {})\n", cell.w_label, thousands(cell.n)));
        let mut at = 0;
        for (title, rows, cols) in [
            ("M_X|X* (rows x, columns x*)", s, s),
            ("f_Y|X* (P[Y = 1 | x*])", 1, s),
            ("M_Z|X* (rows z, columns x*)", sz, s),
            ("f_X*", 1, s),
        ] {
            let len = rows * cols;
            matrix_block(&mut out, title, &values[at..at + len], se.map(|v| &v[at..at + len]), rows, cols);
            at += len;
        }
        if let Some(info) = &cell.cmle {
            out.push_str(&format!(
                "loglik {:.4}; {}/{} starts converged, {} agree with the best\n",
                info.loglik, info.n_starts_converged, info.n_starts, info.n_starts_agreeing
            ));
            if !info.boundary_flags.is_empty() {
                out.push_str(&format!("near the boundary: {}\n", info.boundary_flags.join(", ")));
            }
        }
        if let Some(d) = &cell.diagnostics {
            out.push_str(&format!(
                "eigenvalue gap {:.4}; condition number {:.1}; ORD {}\n",
                d.eigenvalue_gap,
                d.condition_number,
                if d.ord_satisfied { "holds" } else { "fails" }
            ));
        }
        out.push('\n');
    }
    if let Some(b) = &art.boot {
        out.push_str(&format!(
            "bootstrap: {} replicates used, {} dropped, {} at the boundary\n",
            b.summary.replicates_used, b.summary.replicates_dropped, b.summary.boundary_hits
        ));
    }
    out
}

pub fn models_csv(art: &ModelsArtifact) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["cell", "parameter", "estimate", "std_error"])?;
    for cell in &art.cells {
        for (i, (name, v)) in cell.parameter_names.iter().zip(cell.model.flatten()).enumerate() {
            let se = cell.std_errors.as_ref().map(|s| s[i].to_string()).unwrap_or_default();
            w.write_record([cell.w_label.clone(), name.clone(), v.to_string(), se])?;
        }
    }
    finish(w)
}
