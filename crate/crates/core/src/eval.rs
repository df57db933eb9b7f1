//! Per-gene correlation metrics, ablation tables and SVG spatial maps.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{pearson, Matrix};

/// Marker genes scored separately by default.
pub const DEFAULT_MARKERS: [&str; 4] = ["ATP2B4", "RASGRF2", "LAMP5", "B3GALT2"];

/// Size of the highly variable and highly expressed gene subsets.
pub const TOP_GENES: usize = 50;

/// Pearson correlation of every column of `pred` with the same column of `truth`.
pub fn gene_correlations(pred: &Matrix, truth: &Matrix) -> Result<Vec<f64>> {
    if pred.shape() != truth.shape() {
        return Err(Error::Input(format!(
            "prediction is {:?}, truth is {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if pred.rows() < 2 {
        return Err(Error::Input("correlations need at least 2 spots".into()));
    }
    (0..pred.cols())
        .map(|j| pearson(&pred.column(j), &truth.column(j)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub gene_names: Vec<String>,
    pub per_gene_corr: Vec<f64>,
    /// Mean over the marker genes present; `None` if none is.
    pub mg_mean: Option<f64>,
    pub mg_genes: Vec<String>,
    pub hvg50_mean: f64,
    pub heg50_mean: f64,
    pub count_above_0_3: usize,
    pub ag: f64,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Column indices sorted by decreasing `key`, ties by name.
fn top_by(key: &[f64], names: &[String], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..key.len()).collect();
    order.sort_by(|&a, &b| key[b].total_cmp(&key[a]).then_with(|| names[a].cmp(&names[b])));
    order.truncate(k);
    order
}

fn mean_of(values: &[f64], idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64
}

/// Highly variable genes of `truth`: the top 50 by population variance.
pub fn hvg_indices(truth: &Matrix, names: &[String]) -> Vec<usize> {
    let means = truth.column_means();
    let n = truth.rows() as f64;
    let var: Vec<f64> = (0..truth.cols())
        .map(|j| truth.row_iter().map(|r| (r[j] - means[j]).powi(2)).sum::<f64>() / n)
        .collect();
    top_by(&var, names, TOP_GENES)
}

/// Highly expressed genes of `truth`: the top 50 by mean.
pub fn heg_indices(truth: &Matrix, names: &[String]) -> Vec<usize> {
    top_by(&truth.column_means(), names, TOP_GENES)
}

/// Summary metrics of per-gene correlations against the held-out truth.
pub fn summarize<S: AsRef<str>>(
    per_gene_corr: &[f64],
    truth: &Matrix,
    gene_names: &[String],
    markers: &[S],
) -> Result<EvalReport> {
    let g = per_gene_corr.len();
    if truth.cols() != g || gene_names.len() != g {
        return Err(Error::Input(format!(
            "{g} correlations, {} truth columns, {} gene names",
            truth.cols(),
            gene_names.len()
        )));
    }
    let mut warnings = Vec::new();
    let mut mg_idx = Vec::new();
    let mut mg_genes = Vec::new();
    let mut absent = Vec::new();
    for m in markers {
        match gene_names.iter().position(|n| n == m.as_ref()) {
            Some(i) => {
                mg_idx.push(i);
                mg_genes.push(m.as_ref().to_string());
            }
            None => absent.push(m.as_ref().to_string()),
        }
    }
    if !absent.is_empty() {
        warnings.push(format!("marker genes not found: {}", absent.join(", ")));
    }
    if g < TOP_GENES {
        warnings.push(format!("only {g} genes; HVG and HEG subsets use all of them"));
    }
    let all: Vec<usize> = (0..g).collect();
    Ok(EvalReport {
        gene_names: gene_names.to_vec(),
        per_gene_corr: per_gene_corr.to_vec(),
        mg_mean: (!mg_idx.is_empty()).then(|| mean_of(per_gene_corr, &mg_idx)),
        mg_genes,
        hvg50_mean: mean_of(per_gene_corr, &hvg_indices(truth, gene_names)),
        heg50_mean: mean_of(per_gene_corr, &heg_indices(truth, gene_names)),
        count_above_0_3: per_gene_corr.iter().filter(|&&c| c > 0.3).count(),
        ag: mean_of(per_gene_corr, &all),
        warnings,
    })
}

/// Blue (low) to red (high), linear in RGB.
pub fn colormap(t: f64) -> (u8, u8, u8) {
    let t = t.clamp(0.0, 1.0);
    ((255.0 * t).round() as u8, 0, (255.0 * (1.0 - t)).round() as u8)
}

/// Scatter of spots colored by `values` over their range, with a legend.
pub fn spatial_map_svg(coords: &[[f64; 2]], values: &[f64], title: &str) -> Result<String> {
    if coords.len() != values.len() {
        return Err(Error::Input(format!(
            "{} coordinates for {} values",
            coords.len(),
            values.len()
        )));
    }
    if values.iter().chain(coords.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(Error::Input("spatial map needs finite values and coordinates".into()));
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let fold = |k: usize| {
        coords
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), c| (a.min(c[k]), b.max(c[k])))
    };
    let ((x0, x1), (y0, y1)) = (fold(0), fold(1));
    let span = (x1 - x0).max(y1 - y0).max(1e-12);
    let (plot, margin, legend) = (400.0, 20.0, 60.0);
    let scale = plot / span;
    let radius = if coords.len() > 1 {
        (plot / (coords.len() as f64).sqrt() * 0.45).clamp(1.5, 12.0)
    } else {
        8.0
    };
    let width = plot + 2.0 * margin + legend;
    let height = plot + 2.0 * margin + 20.0;

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{margin:.0}" y="14" font-family="sans-serif" font-size="12">{}</text>"#,
        escape(title)
    );
    for (c, &v) in coords.iter().zip(values) {
        let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        let (r, g, b) = colormap(t);
        let cx = margin + (c[0] - x0) * scale + if coords.len() == 1 { plot / 2.0 } else { 0.0 };
        let cy = margin + 20.0 + (c[1] - y0) * scale + if coords.len() == 1 { plot / 2.0 } else { 0.0 };
        let _ = writeln!(
            s,
            r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="{radius:.2}" fill="rgb({r},{g},{b})"/>"#
        );
    }
    let lx = margin + plot + 20.0;
    let _ = writeln!(
        s,
        r#"<defs><linearGradient id="cmap" x1="0" y1="1" x2="0" y2="0"><stop offset="0" stop-color="rgb(0,0,255)"/><stop offset="1" stop-color="rgb(255,0,0)"/></linearGradient></defs>"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="{lx:.0}" y="{:.0}" width="14" height="{plot:.0}" fill="url(#cmap)"/>"#,
        margin + 20.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.0}" y="{:.0}" font-family="sans-serif" font-size="10">{hi:.4}</text>"#,
        lx + 18.0,
        margin + 28.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.0}" y="{:.0}" font-family="sans-serif" font-size="10">{lo:.4}</text>"#,
        lx + 18.0,
        margin + 20.0 + plot
    );
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn emit_spatial_map(coords: &[[f64; 2]], values: &[f64], title: &str, path: &Path) -> Result<()> {
    let svg = spatial_map_svg(coords, values, title)?;
    std::fs::write(path, svg).map_err(|e| Error::file(path, e))
}

/// One parsed row of an ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub mg: Option<f64>,
    pub hvg: f64,
    pub heg: f64,
    pub count_above_0_3: usize,
    pub ag: f64,
}

const TABLE_HEADER: [&str; 6] = ["Variant", "MG", "HVG", "HEG", "Cor>0.3", "AG"];

/// Aligned `Variant | MG | HVG | HEG | Cor>0.3 | AG` table in input order.
pub fn ablation_table<S: AsRef<str>>(reports: &[(S, EvalReport)]) -> String {
    let rows: Vec<[String; 6]> = reports
        .iter()
        .map(|(name, r)| {
            [
                name.as_ref().to_string(),
                r.mg_mean.map_or("n/a".into(), |v| format!("{v:.4}")),
                format!("{:.4}", r.hvg50_mean),
                format!("{:.4}", r.heg50_mean),
                r.count_above_0_3.to_string(),
                format!("{:.4}", r.ag),
            ]
        })
        .collect();
    let mut widths = TABLE_HEADER.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(k, (c, &w))| if k == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join(" | ")
    };
    let mut out = line(&TABLE_HEADER.map(String::from));
    out.push('\n');
    out.push_str(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("-|-"));
    out.push('\n');
    for row in &rows {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

/// Reads back a table written by [`ablation_table`].
pub fn parse_ablation_table(text: &str) -> Result<Vec<AblationRow>> {
    let bad = |line: &str| Error::Data(format!("malformed ablation row `{line}`"));
    let num = |s: &str, line: &str| s.parse::<f64>().map_err(|_| bad(line));
    text.lines()
        .skip(2)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let cells: Vec<&str> = line.split(" | ").map(str::trim).collect();
            if cells.len() != 6 {
                return Err(bad(line));
            }
            Ok(AblationRow {
                name: cells[0].to_string(),
                mg: if cells[1] == "n/a" { None } else { Some(num(cells[1], line)?) },
                hvg: num(cells[2], line)?,
                heg: num(cells[3], line)?,
                count_above_0_3: cells[4].parse().map_err(|_| bad(line))?,
                ag: num(cells[5], line)?,
            })
        })
        .collect()
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(g: usize) -> Vec<String> {
        (0..g).map(|j| format!("g{j:02}")).collect()
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(0.0..5.0))
    }

    #[test]
    fn identical_and_negated_predictions() {
        let mut truth = random(10, 4, 1);
        for i in 0..10 {
            truth[(i, 3)] = 2.0;
        }
        let c = gene_correlations(&truth, &truth).unwrap();
        assert!(c[..3].iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert_eq!(c[3], 0.0);
        let neg = gene_correlations(&truth.scale(-1.0), &truth).unwrap();
        assert!(neg[..3].iter().all(|&v| (v + 1.0).abs() < 1e-12));
        assert!(gene_correlations(&truth, &random(10, 3, 2)).is_err());
    }

    #[test]
    fn three_gene_formula_oracle() {
        let pred = Matrix::from_rows(&[[1.0, 2.0, 0.0], [2.0, 1.0, 1.0], [4.0, 0.0, 5.0], [3.0, 3.0, 2.0]]).unwrap();
        let truth = Matrix::from_rows(&[[2.0, 1.0, 1.0], [1.0, 1.5, 0.0], [5.0, 0.5, 3.0], [3.0, 2.0, 4.0]]).unwrap();
        let got = gene_correlations(&pred, &truth).unwrap();
        for j in 0..3 {
            let (x, y) = (pred.column(j), truth.column(j));
            let mx = x.iter().sum::<f64>() / 4.0;
            let my = y.iter().sum::<f64>() / 4.0;
            let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
            let sx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
            let sy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
            assert_abs_diff_eq!(got[j], cov / (sx * sy).sqrt(), epsilon = 1e-12);
        }
    }

    #[test]
    fn perfect_predictions_summary() {
        let mut truth = random(12, 5, 3);
        for i in 0..12 {
            truth[(i, 4)] = 1.0;
        }
        let mut genes = names(5);
        genes[1] = "LAMP5".into();
        let c = gene_correlations(&truth, &truth).unwrap();
        let r = summarize(&c, &truth, &genes, &DEFAULT_MARKERS).unwrap();
        assert_abs_diff_eq!(r.mg_mean.unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(r.mg_genes, ["LAMP5"]);
        assert_eq!(r.count_above_0_3, 4);
        assert_abs_diff_eq!(r.ag, 0.8, epsilon = 1e-12);
        assert!(r.warnings[0].contains("ATP2B4, RASGRF2, B3GALT2"));
    }

    #[test]
    fn absent_markers_are_reported() {
        let truth = random(6, 3, 4);
        let c = gene_correlations(&truth, &truth).unwrap();
        let r = summarize(&c, &truth, &names(3), &DEFAULT_MARKERS).unwrap();
        assert_eq!(r.mg_mean, None);
        assert!(DEFAULT_MARKERS.iter().all(|m| r.warnings[0].contains(m)));
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        for key in ["per_gene_corr", "mg_mean", "hvg50_mean", "heg50_mean", "count_above_0_3", "ag", "warnings"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn subsets_match_sort_oracle() {
        let truth = random(15, 60, 5);
        let genes = names(60);
        let means = truth.column_means();
        let vars: Vec<f64> = (0..60)
            .map(|j| {
                let c = truth.column(j);
                c.iter().map(|v| (v - means[j]).powi(2)).sum::<f64>() / 15.0
            })
            .collect();
        let oracle = |key: &[f64]| {
            let mut pairs: Vec<(f64, &String)> = key.iter().copied().zip(&genes).collect();
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
            let mut top: Vec<String> = pairs[..50].iter().map(|p| p.1.clone()).collect();
            top.sort();
            top
        };
        let as_names = |idx: Vec<usize>| {
            let mut v: Vec<String> = idx.into_iter().map(|i| genes[i].clone()).collect();
            v.sort();
            v
        };
        assert_eq!(as_names(hvg_indices(&truth, &genes)), oracle(&vars));
        assert_eq!(as_names(heg_indices(&truth, &genes)), oracle(&means));
    }

    #[test]
    fn summary_invariant_to_column_order() {
        let truth = random(20, 60, 6);
        let pred = random(20, 60, 7);
        let genes = names(60);
        let c = gene_correlations(&pred, &truth).unwrap();
        let r = summarize(&c, &truth, &genes, &["g03", "g40"]).unwrap();
        let perm: Vec<usize> = (0..60).rev().collect();
        let c2: Vec<f64> = perm.iter().map(|&j| c[j]).collect();
        let g2: Vec<String> = perm.iter().map(|&j| genes[j].clone()).collect();
        let r2 = summarize(&c2, &truth.select_cols(&perm), &g2, &["g03", "g40"]).unwrap();
        assert_abs_diff_eq!(r.hvg50_mean, r2.hvg50_mean, epsilon = 1e-12);
        assert_abs_diff_eq!(r.heg50_mean, r2.heg50_mean, epsilon = 1e-12);
        assert_abs_diff_eq!(r.ag, r2.ag, epsilon = 1e-12);
        assert_eq!(r.mg_mean, r2.mg_mean);
        assert_eq!(r.count_above_0_3, r2.count_above_0_3);
        assert_eq!(r.ag, c.iter().sum::<f64>() / 60.0);
    }

    #[test]
    fn svg_maps() {
        let one = spatial_map_svg(&[[1.0, 1.0]], &[3.0], "g").unwrap();
        assert_eq!(one.matches("<circle").count(), 1);
        assert!(one.starts_with("<?xml") && one.trim_end().ends_with("</svg>"));

        let coords: Vec<[f64; 2]> = (0..9).map(|i| [(i % 3) as f64, (i / 3) as f64]).collect();
        let flat = spatial_map_svg(&coords, &[2.0; 9], "flat").unwrap();
        assert_eq!(flat.matches("fill=\"rgb(128,0,128)\"").count(), 9);

        let values: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let a = spatial_map_svg(&coords, &values, "ramp").unwrap();
        assert_eq!(a, spatial_map_svg(&coords, &values, "ramp").unwrap());
        assert!(a.contains("rgb(0,0,255)") && a.contains("rgb(255,0,0)"));
        assert!(spatial_map_svg(&coords, &[f64::NAN; 9], "x").is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.svg");
        emit_spatial_map(&coords, &values, "ramp", &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), a);
    }

    #[test]
    fn ablation_table_round_trip() {
        let truth = random(10, 6, 8);
        let mut reports = Vec::new();
        for (k, name) in ["Baseline", "Model A"].iter().enumerate() {
            let c = gene_correlations(&random(10, 6, 9 + k as u64), &truth).unwrap();
            reports.push((name.to_string(), summarize(&c, &truth, &names(6), &["g01"]).unwrap()));
        }
        let text = ablation_table(&reports[..1]);
        assert_eq!(parse_ablation_table(&text).unwrap().len(), 1);
        let text = ablation_table(&reports);
        let rows = parse_ablation_table(&text).unwrap();
        assert_eq!(rows[0].name, "Baseline");
        assert_eq!(rows[1].name, "Model A");
        for (row, (_, r)) in rows.iter().zip(&reports) {
            assert!((row.ag - r.ag).abs() <= 5e-5);
            assert!((row.mg.unwrap() - r.mg_mean.unwrap()).abs() <= 5e-5);
            assert_eq!(row.count_above_0_3, r.count_above_0_3);
        }
        let lens: Vec<usize> = text.lines().map(|l| l.chars().count()).collect();
        assert!(lens.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-15);
    }
}
