//! Nomogram exports: each subnetwork's logit contribution over the training range, in
//! original units, as CSV plus a small static SVG.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anova::{linspace, BIVARIATE_GRID, UNIVARIATE_GRID};
use crate::data::{Dataset, NormalizationSpec};
use crate::error::{Error, Result};
use crate::prn::{PrnModel, SubNetwork};

pub const HISTOGRAM_BINS: usize = 20;

/// Evenly spaced grid over `[lo, hi]` with the point nearest `anchor` moved onto it, so
/// every curve shows its zero at the anchor.
pub fn anchored_grid(lo: f64, hi: f64, n: usize, anchor: f64) -> Vec<f64> {
    let mut g = linspace(lo, hi, n);
    if anchor >= lo && anchor <= hi {
        if let Some(k) = (0..g.len()).min_by(|&a, &b| (g[a] - anchor).abs().total_cmp(&(g[b] - anchor).abs())) {
            g[k] = anchor;
        }
    }
    g
}

/// Counts of `values` in `bins` equal-width bins over `[lo, hi]`; the last bin is closed.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<(f64, f64, usize)> {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        if v < lo || v > hi {
            continue;
        }
        let k = if width > 0.0 { (((v - lo) / width) as usize).min(bins - 1) } else { 0 };
        counts[k] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(k, c)| (lo + k as f64 * width, if k + 1 == bins { hi } else { lo + (k + 1) as f64 * width }, c))
        .collect()
}

fn column_range(data: &Dataset, i: usize) -> (f64, f64) {
    data.rows()
        .map(|r| r[i])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
}

pub fn subnetwork_label(sub: &SubNetwork, names: &[String]) -> String {
    sub.term().label(names)
}

/// Grid of contributions for a univariate subnetwork: `(original value, contribution)`.
pub fn univariate_curve(sub: &SubNetwork, spec: &NormalizationSpec, raw_range: (f64, f64)) -> Vec<(f64, f64)> {
    let i = sub.inputs[0];
    anchored_grid(raw_range.0, raw_range.1, UNIVARIATE_GRID, spec.center[i])
        .into_iter()
        .map(|v| (v, sub.eval_local(&[spec.normalize_value(i, v)])))
        .collect()
}

/// Row-major `41 x 41` grid for a bivariate subnetwork: `(x_i, x_j, contribution)`.
pub fn bivariate_surface(
    sub: &SubNetwork,
    spec: &NormalizationSpec,
    ranges: [(f64, f64); 2],
) -> Vec<(f64, f64, f64)> {
    let (i, j) = (sub.inputs[0], sub.inputs[1]);
    let gi = anchored_grid(ranges[0].0, ranges[0].1, BIVARIATE_GRID, spec.center[i]);
    let gj = anchored_grid(ranges[1].0, ranges[1].1, BIVARIATE_GRID, spec.center[j]);
    let mut out = Vec::with_capacity(gi.len() * gj.len());
    for &a in &gi {
        for &b in &gj {
            out.push((a, b, sub.eval_local(&[spec.normalize_value(i, a), spec.normalize_value(j, b)])));
        }
    }
    out
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;

fn svg_header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        xml_escape(title)
    )
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn scale(v: f64, lo: f64, hi: f64, a: f64, b: f64) -> f64 {
    if hi > lo {
        a + (v - lo) / (hi - lo) * (b - a)
    } else {
        (a + b) / 2.0
    }
}

pub fn univariate_svg(title: &str, curve: &[(f64, f64)], hist: &[(f64, f64, usize)]) -> String {
    let (x0, x1) = (curve[0].0, curve[curve.len() - 1].0);
    let (mut y0, mut y1) = curve
        .iter()
        .fold((0.0f64, 0.0f64), |(a, b), &(_, y)| (a.min(y), b.max(y)));
    if y1 - y0 < 1e-9 {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let (left, right, top, bottom) = (PAD, W - PAD / 2.0, PAD, H - PAD);
    let mut s = svg_header(title);
    let max_count = hist.iter().map(|h| h.2).max().unwrap_or(0).max(1) as f64;
    for &(a, b, c) in hist {
        let xa = scale(a, x0, x1, left, right);
        let xb = scale(b, x0, x1, left, right);
        let hgt = (bottom - top) * 0.3 * c as f64 / max_count;
        let _ = writeln!(
            s,
            "<rect x=\"{xa:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{hgt:.2}\" fill=\"#d0d8e8\"/>",
            bottom - hgt,
            (xb - xa).max(0.0)
        );
    }
    let zero = scale(0.0, y0, y1, bottom, top);
    let _ = writeln!(
        s,
        "<line x1=\"{left}\" y1=\"{zero:.2}\" x2=\"{right}\" y2=\"{zero:.2}\" stroke=\"#888\" stroke-dasharray=\"4 3\"/>"
    );
    let _ = writeln!(s, "<line x1=\"{left}\" y1=\"{bottom}\" x2=\"{right}\" y2=\"{bottom}\" stroke=\"black\"/>");
    let _ = writeln!(s, "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{bottom}\" stroke=\"black\"/>");
    let pts: Vec<String> = curve
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", scale(x, x0, x1, left, right), scale(y, y0, y1, bottom, top)))
        .collect();
    let _ = writeln!(
        s,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f4e9c\" stroke-width=\"2\"/>",
        pts.join(" ")
    );
    for (v, x, anchor) in [(x0, left, "start"), (x1, right, "end")] {
        let _ = writeln!(
            s,
            "<text x=\"{x}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"{anchor}\">{v:.3}</text>",
            bottom + 16.0
        );
    }
    for (v, y) in [(y0, bottom), (y1, top)] {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{y:.2}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{v:.2}</text>",
            left - 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn bivariate_svg(title: &str, surface: &[(f64, f64, f64)], n: usize) -> String {
    let (left, right, top, bottom) = (PAD, W - PAD, PAD, H - PAD);
    let m = surface.iter().map(|p| p.2.abs()).fold(0.0, f64::max).max(1e-12);
    let cw = (right - left) / n as f64;
    let ch = (bottom - top) / n as f64;
    let mut s = svg_header(title);
    for (k, &(_, _, v)) in surface.iter().enumerate() {
        let (a, b) = (k / n, k % n);
        let t = v / m;
        // red for positive, blue for negative, white at zero
        let (r, g, bl) = if t >= 0.0 {
            (255.0, 255.0 * (1.0 - t), 255.0 * (1.0 - t))
        } else {
            (255.0 * (1.0 + t), 255.0 * (1.0 + t), 255.0)
        };
        let _ = writeln!(
            s,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"rgb({},{},{})\"/>",
            left + a as f64 * cw,
            bottom - (b + 1) as f64 * ch,
            cw + 0.2,
            ch + 0.2,
            r.round(),
            g.round(),
            bl.round()
        );
    }
    let _ = writeln!(
        s,
        "<rect x=\"{left}\" y=\"{top}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>",
        right - left,
        bottom - top
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">max |contribution| {m:.3}</text>",
        W / 2.0,
        H - 12.0
    );
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NomogramEntry {
    label: String,
    inputs: Vec<usize>,
    csv: String,
    histogram: Option<String>,
    svg: String,
}

fn write(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Writes CSV and SVG files per subnetwork plus `nomogram.json` listing them.
///
/// `raw_train` supplies the plotting range and histogram in original units.
pub fn export_nomogram(prn: &PrnModel, spec: &NormalizationSpec, raw_train: &Dataset, dir: &Path) -> Result<()> {
    if spec.n_features() != prn.n_inputs || raw_train.n_features() != prn.n_inputs {
        return Err(Error::Dimension {
            expected: prn.n_inputs,
            got: spec.n_features(),
        });
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names = &spec.feature_names;
    let mut entries = Vec::new();
    for (k, sub) in prn.subnetworks.iter().enumerate() {
        let label = subnetwork_label(sub, names);
        let stem = format!("term_{k:03}");
        let csv_name = format!("{stem}.csv");
        let svg_name = format!("{stem}.svg");
        let mut hist_name = None;
        match sub.inputs[..] {
            [i] => {
                let range = column_range(raw_train, i);
                let curve = univariate_curve(sub, spec, range);
                let mut csv = format!("{},contribution\n", names[i]);
                for (v, c) in &curve {
                    let _ = writeln!(csv, "{v:e},{c:e}");
                }
                write(&dir.join(&csv_name), &csv)?;
                let hist = histogram(&raw_train.column(i), range.0, range.1, HISTOGRAM_BINS);
                let mut hcsv = String::from("bin_lo,bin_hi,count\n");
                for (a, b, c) in &hist {
                    let _ = writeln!(hcsv, "{a:e},{b:e},{c}");
                }
                let name = format!("{stem}_hist.csv");
                write(&dir.join(&name), &hcsv)?;
                hist_name = Some(name);
                write(&dir.join(&svg_name), &univariate_svg(&label, &curve, &hist))?;
            }
            [i, j] => {
                let ranges = [column_range(raw_train, i), column_range(raw_train, j)];
                let surface = bivariate_surface(sub, spec, ranges);
                let mut csv = format!("{},{},contribution\n", names[i], names[j]);
                for (a, b, c) in &surface {
                    let _ = writeln!(csv, "{a:e},{b:e},{c:e}");
                }
                write(&dir.join(&csv_name), &csv)?;
                write(&dir.join(&svg_name), &bivariate_svg(&label, &surface, BIVARIATE_GRID))?;
            }
            _ => unreachable!("subnetworks have one or two inputs"),
        }
        entries.push(NomogramEntry {
            label,
            inputs: sub.inputs.clone(),
            csv: csv_name,
            histogram: hist_name,
            svg: svg_name,
        });
    }
    #[derive(Serialize)]
    struct Index {
        global_bias: f64,
        terms: Vec<NomogramEntry>,
    }
    let json = serde_json::to_string_pretty(&Index {
        global_bias: prn.global_bias,
        terms: entries,
    })
    .map_err(|e| Error::Format(e.to_string()))?;
    write(&dir.join("nomogram.json"), &json)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermContribution {
    pub term: String,
    pub inputs: Vec<usize>,
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub probability: f64,
    pub logit: f64,
    pub global_bias: f64,
    /// Sorted by decreasing absolute contribution.
    pub contributions: Vec<TermContribution>,
}

/// Scores one record given in original units and itemizes the logit by subnetwork.
pub fn explain_record(prn: &PrnModel, spec: &NormalizationSpec, record: &[f64]) -> Result<Explanation> {
    if record.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            iteration: 0,
            what: "record".into(),
        });
    }
    let z = spec.normalize_row(record)?;
    let out = prn.forward(&z)?;
    let mut contributions: Vec<TermContribution> = prn
        .subnetworks
        .iter()
        .zip(&out.contributions)
        .map(|(s, &c)| TermContribution {
            term: subnetwork_label(s, &spec.feature_names),
            inputs: s.inputs.clone(),
            contribution: c,
        })
        .collect();
    contributions.sort_by(|a, b| b.contribution.abs().total_cmp(&a.contribution.abs()));
    Ok(Explanation {
        probability: out.probability,
        logit: out.logit,
        global_bias: prn.global_bias,
        contributions,
    })
}
