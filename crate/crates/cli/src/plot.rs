//! Plot-data emission: per-figure CSV files mirroring the trace panels
//! (weight-feature correlations and learning curves), optional mean curves
//! across seeds, and self-rendered SVG line charts.

use anyhow::{bail, Context};
use patchlab::training::TrainingTrace;
use std::fs;
use std::path::{Path, PathBuf};

pub struct PanelData {
    pub name: String,
    /// Column headers, the first being `epoch`.
    pub columns: Vec<String>,
    /// One row per epoch: epoch plus one value per non-epoch column.
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl PanelData {
    fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for (epoch, vals) in &self.rows {
            out.push_str(&epoch.to_string());
            for v in vals {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

fn correlations_panel(name: &str, trace: &TrainingTrace, k: usize) -> PanelData {
    let mut columns = vec!["epoch".to_string()];
    for i in 0..k {
        columns.push(format!("corr_u_{}", i + 1));
        columns.push(format!("corr_v_{}", i + 1));
    }
    let rows = trace
        .rows
        .iter()
        .map(|r| {
            let mut vals = Vec::with_capacity(2 * k);
            for i in 0..k {
                vals.push(r.corr_u[i]);
                vals.push(r.corr_v[i]);
            }
            (r.epoch, vals)
        })
        .collect();
    PanelData {
        name: name.to_string(),
        columns,
        rows,
    }
}

fn learning_panel(name: &str, trace: &TrainingTrace) -> PanelData {
    PanelData {
        name: name.to_string(),
        columns: vec![
            "epoch".into(),
            "std_acc".into(),
            "rob_acc".into(),
            "fl_acc_R".into(),
            "fl_acc_NR".into(),
        ],
        rows: trace
            .rows
            .iter()
            .map(|r| {
                (
                    r.epoch,
                    vec![r.std_acc, r.rob_acc, r.fl_acc_robust, r.fl_acc_nonrobust],
                )
            })
            .collect(),
    }
}

fn mean_panel(name: &str, panels: &[PanelData]) -> anyhow::Result<PanelData> {
    let first = &panels[0];
    for p in panels {
        if p.columns != first.columns {
            bail!("panels disagree on columns");
        }
        let epochs: Vec<usize> = p.rows.iter().map(|r| r.0).collect();
        let first_epochs: Vec<usize> = first.rows.iter().map(|r| r.0).collect();
        if epochs != first_epochs {
            bail!("traces have different epoch grids; cannot average");
        }
    }
    let rows = first
        .rows
        .iter()
        .enumerate()
        .map(|(idx, (epoch, _))| {
            let vals = (0..first.columns.len() - 1)
                .map(|c| {
                    panels.iter().map(|p| p.rows[idx].1[c]).sum::<f64>() / panels.len() as f64
                })
                .collect();
            (*epoch, vals)
        })
        .collect();
    Ok(PanelData {
        name: name.to_string(),
        columns: first.columns.clone(),
        rows,
    })
}

// -- SVG rendering ----------------------------------------------------------

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f",
];

fn svg_chart(panel: &PanelData) -> String {
    let (w, h) = (640.0, 420.0);
    let (ml, mr, mt, mb) = (58.0, 16.0, 28.0, 44.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let xs: Vec<f64> = panel.rows.iter().map(|(e, _)| *e as f64).collect();
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for (_, vals) in &panel.rows {
        for &v in vals {
            ymin = ymin.min(v);
            ymax = ymax.max(v);
        }
    }
    if !ymin.is_finite() || ymin == ymax {
        ymin -= 0.5;
        ymax += 0.5;
    }
    let pad = 0.05 * (ymax - ymin);
    let (ymin, ymax) = (ymin - pad, ymax + pad);
    let xmin = xs.first().copied().unwrap_or(0.0);
    let xmax = xs.last().copied().unwrap_or(1.0).max(xmin + 1.0);
    let sx = |x: f64| ml + (x - xmin) / (xmax - xmin) * pw;
    let sy = |y: f64| mt + (1.0 - (y - ymin) / (ymax - ymin)) * ph;

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"18\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        ml + pw / 2.0,
        panel.name
    );
    // axes
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + ph,
        ml + pw,
        mt + ph,
        mt + ph
    ));
    for t in 0..=4 {
        let fx = xmin + (xmax - xmin) * t as f64 / 4.0;
        let fy = ymin + (ymax - ymin) * t as f64 / 4.0;
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{:.0}</text>\n",
            sx(fx),
            mt + ph + 16.0,
            fx
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{:.3}</text>\n",
            ml - 6.0,
            sy(fy) + 4.0,
            fy
        ));
        svg.push_str(&format!(
            "<line x1=\"{ml}\" y1=\"{0:.1}\" x2=\"{1}\" y2=\"{0:.1}\" stroke=\"#dddddd\"/>\n",
            sy(fy),
            ml + pw
        ));
    }
    // series
    for c in 0..panel.columns.len() - 1 {
        let color = PALETTE[c % PALETTE.len()];
        let pts: Vec<String> = panel
            .rows
            .iter()
            .map(|(e, vals)| format!("{:.2},{:.2}", sx(*e as f64), sy(vals[c])))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{}</text>\n",
            ml + 8.0 + 110.0 * (c / 3) as f64,
            mt + 14.0 + 14.0 * (c % 3) as f64,
            panel.columns[c + 1]
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn stem_of(path: &Path) -> String {
    // seed directories share the file name "trace.csv"; prefer the parent
    // directory name in that case
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
    if stem == "trace" {
        if let Some(parent) = path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()) {
            return parent.to_string();
        }
    }
    stem.to_string()
}

/// Emit correlations and learning-curve files for each input trace, plus
/// mean curves when several traces are given. Returns the written paths.
pub fn emit_plot_data(
    traces: &[PathBuf],
    mode_name: &str,
    out_dir: &Path,
    svg: bool,
) -> anyhow::Result<Vec<PathBuf>> {
    if traces.is_empty() {
        bail!("no trace files given");
    }
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut corr_panels = Vec::new();
    let mut learn_panels = Vec::new();
    for path in traces {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading trace {}", path.display()))?;
        let (trace, k) = TrainingTrace::from_csv(&text)?;
        if trace.rows.is_empty() {
            bail!("trace {} has no rows", path.display());
        }
        let stem = stem_of(path);
        corr_panels.push(correlations_panel(
            &format!("correlations_{mode_name}_{stem}"),
            &trace,
            k,
        ));
        learn_panels.push(learning_panel(&format!("learning_{mode_name}_{stem}"), &trace));
    }
    if traces.len() > 1 {
        corr_panels.push(mean_panel(
            &format!("correlations_{mode_name}_mean"),
            &corr_panels,
        )?);
        learn_panels.push(mean_panel(
            &format!("learning_{mode_name}_mean"),
            &learn_panels,
        )?);
    }
    for panel in corr_panels.iter().chain(&learn_panels) {
        let csv_path = out_dir.join(format!("{}.csv", panel.name));
        fs::write(&csv_path, panel.to_csv())?;
        written.push(csv_path);
        if svg {
            let svg_path = out_dir.join(format!("{}.svg", panel.name));
            fs::write(&svg_path, svg_chart(panel))?;
            written.push(svg_path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use patchlab::training::TraceRow;

    fn tiny_trace() -> TrainingTrace {
        TrainingTrace {
            rows: (0..3)
                .map(|t| TraceRow {
                    epoch: t * 10,
                    train_ce: 0.5 / (t + 1) as f64,
                    std_acc: 0.5 + 0.1 * t as f64,
                    rob_acc: 0.1 * t as f64,
                    corr_u: vec![0.01 * t as f64, 0.02],
                    corr_v: vec![0.1 * t as f64, 0.2],
                    fl_acc_robust: 0.5,
                    fl_acc_nonrobust: 0.9,
                })
                .collect(),
        }
    }

    #[test]
    fn emits_per_seed_and_mean_files() {
        let dir = tempfile::tempdir().unwrap();
        let t1 = dir.path().join("a.csv");
        let t2 = dir.path().join("b.csv");
        fs::write(&t1, tiny_trace().to_csv(2)).unwrap();
        fs::write(&t2, tiny_trace().to_csv(2)).unwrap();
        let written =
            emit_plot_data(&[t1, t2], "std", &dir.path().join("plots"), true).unwrap();
        let names: Vec<String> = written
            .iter()
            .map(|p| p.file_name().unwrap().to_str().unwrap().to_string())
            .collect();
        assert!(names.contains(&"correlations_std_a.csv".to_string()));
        assert!(names.contains(&"correlations_std_mean.csv".to_string()));
        assert!(names.contains(&"learning_std_mean.csv".to_string()));
        assert!(names.iter().any(|n| n.ends_with(".svg")));
        let mean = fs::read_to_string(
            written
                .iter()
                .find(|p| p.ends_with("correlations_std_mean.csv"))
                .unwrap(),
        )
        .unwrap();
        assert!(mean.starts_with("epoch,corr_u_1,corr_v_1,corr_u_2,corr_v_2"));
    }

    #[test]
    fn empty_trace_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("empty.csv");
        fs::write(&t, TrainingTrace::csv_header(2) + "\n").unwrap();
        assert!(emit_plot_data(&[t], "std", dir.path(), false).is_err());
    }
}
