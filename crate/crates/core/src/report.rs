//! Result tables and rendering: transfer-rate bookkeeping, fixed-column CSV
//! io, and deterministic SVG line plots.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{mean, sample_variance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub epoch: usize,
    pub target: usize,
    pub seed: u64,
    pub success_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub rows: Vec<TransferRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub epoch: usize,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl TransferReport {
    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            if !(0.0..=1.0).contains(&r.success_rate) {
                return Err(Error::InvalidSpec(format!(
                    "success rate {} outside [0,1]",
                    r.success_rate
                )));
            }
        }
        Ok(())
    }

    pub fn epochs(&self) -> Vec<usize> {
        let mut e: Vec<usize> = self.rows.iter().map(|r| r.epoch).collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    /// Mean success rate at an epoch with a ±2 sample-standard-deviation
    /// band over all (target, seed) rows.
    pub fn mean_band(&self, epoch: usize) -> Option<AggregateRow> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(|r| r.success_rate)
            .collect();
        if vals.is_empty() {
            return None;
        }
        let m = mean(&vals);
        let sd = if vals.len() > 1 { sample_variance(&vals).sqrt() } else { 0.0 };
        Some(AggregateRow { epoch, mean: m, lo: m - 2.0 * sd, hi: m + 2.0 * sd, n: vals.len() })
    }

    pub fn aggregate(&self) -> Vec<AggregateRow> {
        self.epochs().into_iter().filter_map(|e| self.mean_band(e)).collect()
    }

    /// Per-target epoch of highest seed-averaged success; ties go to the
    /// earliest epoch.
    pub fn argmax_epoch_per_target(&self) -> Vec<(usize, usize)> {
        let mut by_target: BTreeMap<usize, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
        for r in &self.rows {
            by_target
                .entry(r.target)
                .or_default()
                .entry(r.epoch)
                .or_default()
                .push(r.success_rate);
        }
        by_target
            .into_iter()
            .map(|(target, per_epoch)| {
                let mut best_epoch = 0usize;
                let mut best = f64::NEG_INFINITY;
                for (epoch, vals) in per_epoch {
                    let m = mean(&vals);
                    if m > best {
                        best = m;
                        best_epoch = epoch;
                    }
                }
                (target, best_epoch)
            })
            .collect()
    }

    /// Mean over targets per epoch for one surrogate seed.
    pub fn seed_curve(&self, seed: u64) -> Vec<(usize, f64)> {
        let mut per_epoch: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.seed == seed) {
            per_epoch.entry(r.epoch).or_default().push(r.success_rate);
        }
        per_epoch.into_iter().map(|(e, v)| (e, mean(&v))).collect()
    }
}

// ---- fixed-column CSV tables ----

pub const TRANSFER_HEADER: &str = "epoch,target,seed,success_rate";
pub const SHARPNESS_SUMMARY_HEADER: &str = "epoch,lambda_max,trace,trace_se";
pub const SHARPNESS_TRACE_HEADER: &str = "epoch,lambda_max,trace,trace_se,worst_gap";
pub const TECHNIQUE_HEADER: &str = "technique,base,epsilon,success_rate";

fn parse_table(text: &str, header: &str) -> Result<Vec<Vec<String>>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == header => {}
        Some(h) => {
            return Err(Error::Format(format!(
                "table header {h:?} does not match required columns {header:?}"
            )))
        }
        None => return Err(Error::Format("empty table".into())),
    }
    let cols = header.split(',').count();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
        if fields.len() != cols {
            return Err(Error::Format(format!(
                "row {} has {} fields where {cols} expected",
                i + 2,
                fields.len()
            )));
        }
        rows.push(fields);
    }
    Ok(rows)
}

fn num(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::Format(format!("bad numeric field {s:?}")))
}

pub fn transfer_csv(report: &TransferReport) -> String {
    let mut out = String::from(TRANSFER_HEADER);
    out.push('\n');
    for r in &report.rows {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.target, r.seed, r.success_rate));
    }
    out
}

pub fn parse_transfer_csv(text: &str) -> Result<TransferReport> {
    let mut rows = Vec::new();
    for f in parse_table(text, TRANSFER_HEADER)? {
        rows.push(TransferRow {
            epoch: num(&f[0])? as usize,
            target: num(&f[1])? as usize,
            seed: num(&f[2])? as u64,
            success_rate: num(&f[3])?,
        });
    }
    let report = TransferReport { rows };
    report.validate()?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SharpnessRow {
    pub epoch: usize,
    pub lambda_max: f64,
    pub trace: f64,
    pub trace_se: f64,
    pub worst_gap: f64,
}

pub fn parse_sharpness_trace_csv(text: &str) -> Result<Vec<SharpnessRow>> {
    parse_table(text, SHARPNESS_TRACE_HEADER)?
        .into_iter()
        .map(|f| {
            Ok(SharpnessRow {
                epoch: num(&f[0])? as usize,
                lambda_max: num(&f[1])?,
                trace: num(&f[2])?,
                trace_se: num(&f[3])?,
                worst_gap: num(&f[4])?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TechniqueRow {
    pub technique: String,
    pub base: String,
    pub epsilon: f64,
    pub success_rate: f64,
}

pub fn technique_csv(rows: &[TechniqueRow]) -> String {
    let mut out = String::from(TECHNIQUE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.technique, r.base, r.epsilon, r.success_rate
        ));
    }
    out
}

pub fn parse_technique_csv(text: &str) -> Result<Vec<TechniqueRow>> {
    parse_table(text, TECHNIQUE_HEADER)?
        .into_iter()
        .map(|f| {
            Ok(TechniqueRow {
                technique: f[0].clone(),
                base: f[1].clone(),
                epsilon: num(&f[2])?,
                success_rate: num(&f[3])?,
            })
        })
        .collect()
}

// ---- SVG line plots ----

const CANVAS_W: f64 = 800.0;
const CANVAS_H: f64 = 480.0;
const PLOT_X0: f64 = 70.0;
const PLOT_Y0: f64 = 40.0;
const PLOT_X1: f64 = 770.0;
const PLOT_Y1: f64 = 420.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    let s = if a >= 1000.0 || a < 0.001 {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.').to_string();
        s
    };
    s
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Fixed-canvas deterministic line chart. Series are drawn in name order;
/// each name keeps the same palette slot across renders.
pub fn line_plot_svg(
    title: &str,
    xlabel: &str,
    ylabel: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{CANVAS_W}\" height=\"{CANVAS_H}\" \
         viewBox=\"0 0 {CANVAS_W} {CANVAS_H}\">\n"
    ));
    svg.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{CANVAS_W}\" height=\"{CANVAS_H}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" \
         text-anchor=\"middle\">{}</text>\n",
        CANVAS_W / 2.0,
        esc(title)
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{PLOT_X0}\" y1=\"{PLOT_Y1}\" x2=\"{PLOT_X1}\" y2=\"{PLOT_Y1}\" \
         stroke=\"black\"/>\n<line x1=\"{PLOT_X0}\" y1=\"{PLOT_Y0}\" x2=\"{PLOT_X0}\" \
         y2=\"{PLOT_Y1}\" stroke=\"black\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" \
         text-anchor=\"middle\">{}</text>\n",
        (PLOT_X0 + PLOT_X1) / 2.0,
        CANVAS_H - 8.0,
        esc(xlabel)
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" \
         text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        (PLOT_Y0 + PLOT_Y1) / 2.0,
        (PLOT_Y0 + PLOT_Y1) / 2.0,
        esc(ylabel)
    ));

    let mut ordered: Vec<&(String, Vec<(f64, f64)>)> = series.iter().collect();
    ordered.sort_by(|a, b| a.0.cmp(&b.0));
    let points: Vec<(f64, f64)> = ordered
        .iter()
        .flat_map(|(_, pts)| pts.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if points.is_empty() {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"14\" \
             text-anchor=\"middle\" fill=\"#888\">no data</text>\n",
            (PLOT_X0 + PLOT_X1) / 2.0,
            (PLOT_Y0 + PLOT_Y1) / 2.0
        ));
        svg.push_str("</svg>\n");
        return svg;
    }

    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in &points {
        xmin = xmin.min(*x);
        xmax = xmax.max(*x);
        ymin = ymin.min(*y);
        ymax = ymax.max(*y);
    }
    if xmax == xmin {
        xmax += 1.0;
        xmin -= 1.0;
    }
    if ymax == ymin {
        ymax += 1.0;
        ymin -= 1.0;
    }
    let sx = |x: f64| PLOT_X0 + (x - xmin) / (xmax - xmin) * (PLOT_X1 - PLOT_X0);
    let sy = |y: f64| PLOT_Y1 - (y - ymin) / (ymax - ymin) * (PLOT_Y1 - PLOT_Y0);

    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = xmin + t * (xmax - xmin);
        let yv = ymin + t * (ymax - ymin);
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{PLOT_Y1}\" x2=\"{:.2}\" y2=\"{}\" stroke=\"black\"/>\n",
            sx(xv),
            sx(xv),
            PLOT_Y1 + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" \
             text-anchor=\"middle\">{}</text>\n",
            sx(xv),
            PLOT_Y1 + 18.0,
            fmt_tick(xv)
        ));
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{:.2}\" x2=\"{PLOT_X0}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
            PLOT_X0 - 5.0,
            sy(yv),
            sy(yv)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\" \
             text-anchor=\"end\">{}</text>\n",
            PLOT_X0 - 8.0,
            sy(yv) + 3.0,
            fmt_tick(yv)
        ));
    }

    for (i, (name, pts)) in ordered.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut sorted: Vec<(f64, f64)> = pts
            .iter()
            .copied()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .collect();
        sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite"));
        if !sorted.is_empty() {
            let path: Vec<String> = sorted
                .iter()
                .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
                .collect();
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" \
                 points=\"{}\"/>\n",
                path.join(" ")
            ));
        }
        let ly = PLOT_Y0 + 14.0 * i as f64;
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{:.2}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n",
            PLOT_X1 - 150.0,
            ly
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            PLOT_X1 - 136.0,
            ly + 9.0,
            esc(name)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

// ---- artifact-directory report ----

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().ok_or_else(|| Error::Io(std::io::Error::other("no parent dir")))?;
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact")
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn sorted_files(dir: &Path, suffix: &str) -> Vec<PathBuf> {
    let mut out = Vec::new();
    if let Ok(rd) = std::fs::read_dir(dir) {
        for entry in rd.flatten() {
            let p = entry.path();
            if p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.ends_with(suffix))
                .unwrap_or(false)
            {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

/// Renders everything present in an artifact directory into report/ tables
/// and plots. Partial directories are fine; whatever exists is rendered.
pub fn emit_report(dir: &Path) -> Result<Vec<PathBuf>> {
    let report_dir = dir.join("report");
    std::fs::create_dir_all(&report_dir)?;
    let mut written = Vec::new();
    let mut summary = serde_json::Map::new();

    // transfer
    let transfer_path = dir.join("transfer").join("raw.csv");
    let report = if transfer_path.exists() {
        parse_transfer_csv(&std::fs::read_to_string(&transfer_path)?)?
    } else {
        TransferReport::default()
    };
    let out = report_dir.join("transfer.csv");
    write_atomic(&out, transfer_csv(&report).as_bytes())?;
    written.push(out);

    let agg = report.aggregate();
    let mut agg_csv = String::from("epoch,mean,lo,hi,n\n");
    for a in &agg {
        agg_csv.push_str(&format!("{},{},{},{},{}\n", a.epoch, a.mean, a.lo, a.hi, a.n));
    }
    let out = report_dir.join("transfer_aggregate.csv");
    write_atomic(&out, agg_csv.as_bytes())?;
    written.push(out);

    let band_series = vec![
        ("mean".to_string(), agg.iter().map(|a| (a.epoch as f64, a.mean)).collect::<Vec<_>>()),
        ("mean-2sd".to_string(), agg.iter().map(|a| (a.epoch as f64, a.lo)).collect()),
        ("mean+2sd".to_string(), agg.iter().map(|a| (a.epoch as f64, a.hi)).collect()),
    ];
    let out = report_dir.join("transfer.svg");
    write_atomic(
        &out,
        line_plot_svg("transfer success", "epoch", "success rate", &band_series).as_bytes(),
    )?;
    written.push(out);

    if !report.rows.is_empty() {
        let argmax: Vec<serde_json::Value> = report
            .argmax_epoch_per_target()
            .into_iter()
            .map(|(t, e)| serde_json::json!({"target": t, "epoch": e}))
            .collect();
        summary.insert("argmax_epoch_per_target".into(), argmax.into());
        if let Some(last) = agg.last() {
            summary.insert(
                "final_epoch".into(),
                serde_json::json!({
                    "epoch": last.epoch, "mean": last.mean, "lo": last.lo, "hi": last.hi
                }),
            );
        }
    }

    // sharpness: average the per-seed traces into the fixed summary columns
    let seed_files = sorted_files(&dir.join("sharpness"), ".csv");
    if !seed_files.is_empty() {
        let mut per_epoch: BTreeMap<usize, Vec<SharpnessRow>> = BTreeMap::new();
        for f in &seed_files {
            for row in parse_sharpness_trace_csv(&std::fs::read_to_string(f)?)? {
                per_epoch.entry(row.epoch).or_default().push(row);
            }
        }
        let mut csv = String::from(SHARPNESS_SUMMARY_HEADER);
        csv.push('\n');
        let mut lam_series = Vec::new();
        let mut trace_series = Vec::new();
        for (epoch, rows) in &per_epoch {
            let lam = mean(&rows.iter().map(|r| r.lambda_max).collect::<Vec<_>>());
            let tr = mean(&rows.iter().map(|r| r.trace).collect::<Vec<_>>());
            let se = mean(&rows.iter().map(|r| r.trace_se).collect::<Vec<_>>());
            csv.push_str(&format!("{epoch},{lam},{tr},{se}\n"));
            lam_series.push((*epoch as f64, lam));
            trace_series.push((*epoch as f64, tr));
        }
        let out = report_dir.join("sharpness.csv");
        write_atomic(&out, csv.as_bytes())?;
        written.push(out);
        let out = report_dir.join("sharpness.svg");
        write_atomic(
            &out,
            line_plot_svg(
                "curvature along training",
                "epoch",
                "value",
                &[("lambda_max".to_string(), lam_series), ("trace".to_string(), trace_series)],
            )
            .as_bytes(),
        )?;
        written.push(out);
    }

    // step-quality trace
    let alpha_files = sorted_files(&dir.join("alpha"), ".csv");
    if !alpha_files.is_empty() {
        let mut per_epoch: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for f in &alpha_files {
            let text = std::fs::read_to_string(f)?;
            for fields in parse_table(&text, "epoch,iteration,f0,s0,f1,s1,alpha")? {
                per_epoch
                    .entry(num(&fields[0])? as usize)
                    .or_default()
                    .push(num(&fields[6])?);
            }
        }
        let series: Vec<(f64, f64)> =
            per_epoch.iter().map(|(e, v)| (*e as f64, mean(v))).collect();
        let out = report_dir.join("alpha.svg");
        write_atomic(
            &out,
            line_plot_svg(
                "step quality",
                "epoch",
                "alpha",
                &[("alpha".to_string(), series)],
            )
            .as_bytes(),
        )?;
        written.push(out);
    }

    // technique comparison
    let tech_path = dir.join("technique").join("rows.csv");
    if tech_path.exists() {
        let rows = parse_technique_csv(&std::fs::read_to_string(&tech_path)?)?;
        let out = report_dir.join("technique.csv");
        write_atomic(&out, technique_csv(&rows).as_bytes())?;
        written.push(out);
        let mut by_name: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for r in &rows {
            by_name
                .entry(r.technique.clone())
                .or_default()
                .push((r.epsilon, r.success_rate));
        }
        let series: Vec<(String, Vec<(f64, f64)>)> = by_name.into_iter().collect();
        let out = report_dir.join("technique.svg");
        write_atomic(
            &out,
            line_plot_svg("technique comparison", "epsilon", "success rate", &series).as_bytes(),
        )?;
        written.push(out);
    }

    let out = report_dir.join("summary.json");
    let json = serde_json::to_string_pretty(&serde_json::Value::Object(summary))
        .expect("plain json");
    write_atomic(&out, json.as_bytes())?;
    written.push(out);
    Ok(written)
}
