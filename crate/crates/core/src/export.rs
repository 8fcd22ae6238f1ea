//! Label-embedding export: CSV dump and a 2-D PCA scatter as SVG.
//!
//! The projection is a plain top-2 PCA computed by power iteration with
//! deflation (200 iterations, tolerance 1e-9, f64 throughout), which keeps
//! the export deterministic and dependency-free. Non-bottom labels are drawn
//! as triangles, bottom labels (connectives) as circles.

use crate::error::{Error, Result};
use crate::hlr::LabelHierarchy;
use crate::model::PemiModel;
use std::fmt::Write as _;

pub const PCA_ITERATIONS: usize = 200;
pub const PCA_TOLERANCE: f64 = 1e-9;

/// One exported row: (1-based level, label, embedding).
#[derive(Debug, Clone)]
pub struct EmbeddingRow {
    pub level: usize,
    pub label: String,
    pub vector: Vec<f32>,
}

/// Collects refined embeddings for the inclusive level range.
pub fn embedding_rows(model: &PemiModel, from: usize, to: usize) -> Result<Vec<EmbeddingRow>> {
    let z_levels = model.hierarchy.num_levels();
    if from == 0 || from > to || to > z_levels {
        return Err(Error::Config(format!(
            "level range {from}..{to} out of range for {z_levels} levels"
        )));
    }
    let matrices = model.verbalizer.refine(&model.hierarchy)?;
    let mut rows = Vec::new();
    for z in from..=to {
        let m = &matrices[z - 1];
        let d = m.cols();
        for (i, label) in model.hierarchy.level_labels(z).iter().enumerate() {
            rows.push(EmbeddingRow {
                level: z,
                label: label.clone(),
                vector: m.data()[i * d..(i + 1) * d].to_vec(),
            });
        }
    }
    Ok(rows)
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// CSV with header `level,label,e0,...`.
pub fn rows_to_csv(rows: &[EmbeddingRow]) -> String {
    let d = rows.first().map_or(0, |r| r.vector.len());
    let mut out = String::from("level,label");
    for i in 0..d {
        let _ = write!(out, ",e{i}");
    }
    out.push('\n');
    for row in rows {
        let _ = write!(out, "{},{}", row.level, csv_field(&row.label));
        for v in &row.vector {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Top-2 PCA projection of the rows (centered), via power iteration.
pub fn pca_2d(vectors: &[Vec<f32>]) -> Vec<[f64; 2]> {
    let n = vectors.len();
    if n == 0 {
        return Vec::new();
    }
    let d = vectors[0].len();
    let mut mean = vec![0.0f64; d];
    for v in vectors {
        for (m, &x) in mean.iter_mut().zip(v) {
            *m += x as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(&x, m)| x as f64 - m).collect())
        .collect();

    // scatter matrix C = X^T X
    let mut c = vec![0.0f64; d * d];
    for row in &centered {
        for i in 0..d {
            let xi = row[i];
            if xi == 0.0 {
                continue;
            }
            for j in 0..d {
                c[i * d + j] += xi * row[j];
            }
        }
    }

    let v1 = power_iteration(&c, d, 1);
    let lambda1 = rayleigh(&c, &v1, d);
    for i in 0..d {
        for j in 0..d {
            c[i * d + j] -= lambda1 * v1[i] * v1[j];
        }
    }
    let v2 = power_iteration(&c, d, 2);

    centered
        .iter()
        .map(|row| {
            let p1: f64 = row.iter().zip(&v1).map(|(x, v)| x * v).sum();
            let p2: f64 = row.iter().zip(&v2).map(|(x, v)| x * v).sum();
            [p1, p2]
        })
        .collect()
}

fn power_iteration(c: &[f64], d: usize, salt: u64) -> Vec<f64> {
    // deterministic start vector from a tiny splitmix stream
    let mut state = 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(salt + 1);
    let mut next = || {
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        (z as f64 / u64::MAX as f64) - 0.5
    };
    let mut v: Vec<f64> = (0..d).map(|_| next()).collect();
    normalize(&mut v);
    for _ in 0..PCA_ITERATIONS {
        let mut w = vec![0.0f64; d];
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..d {
                s += c[i * d + j] * v[j];
            }
            w[i] = s;
        }
        if normalize(&mut w) == 0.0 {
            return v; // zero matrix: any direction is an eigenvector
        }
        // align sign so convergence is measured on the same ray
        let dot: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        if dot < 0.0 {
            for x in &mut w {
                *x = -*x;
            }
        }
        let diff: f64 = w
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        v = w;
        if diff < PCA_TOLERANCE {
            break;
        }
    }
    v
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

fn rayleigh(c: &[f64], v: &[f64], d: usize) -> f64 {
    let mut cv = vec![0.0f64; d];
    for i in 0..d {
        for j in 0..d {
            cv[i] += c[i * d + j] * v[j];
        }
    }
    cv.iter().zip(v).map(|(a, b)| a * b).sum()
}

const SVG_COLORS: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Scatter of the projected rows. Bottom-level labels render as circles,
/// upper levels as larger triangles; colors cycle per level.
pub fn rows_to_svg(rows: &[EmbeddingRow], hierarchy: &LabelHierarchy) -> String {
    let projections = pca_2d(&rows.iter().map(|r| r.vector.clone()).collect::<Vec<_>>());
    let (width, height, margin) = (640.0f64, 480.0f64, 50.0f64);
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &projections {
        min_x = min_x.min(p[0]);
        max_x = max_x.max(p[0]);
        min_y = min_y.min(p[1]);
        max_y = max_y.max(p[1]);
    }
    let span_x = (max_x - min_x).max(1e-9);
    let span_y = (max_y - min_y).max(1e-9);
    let sx = |x: f64| margin + (x - min_x) / span_x * (width - 2.0 * margin);
    let sy = |y: f64| height - margin - (y - min_y) / span_y * (height - 2.0 * margin);

    let bottom = hierarchy.num_levels();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    );
    let _ = writeln!(out, "  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    for (row, p) in rows.iter().zip(&projections) {
        let color = SVG_COLORS[(row.level - 1) % SVG_COLORS.len()];
        let (x, y) = (sx(p[0]), sy(p[1]));
        if row.level == bottom {
            let _ = writeln!(
                out,
                "  <circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3.5\" fill=\"{color}\" fill-opacity=\"0.8\"/>"
            );
        } else {
            let _ = writeln!(
                out,
                "  <polygon points=\"{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}\" fill=\"{color}\"/>",
                x,
                y - 6.0,
                x - 5.5,
                y + 4.5,
                x + 5.5,
                y + 4.5
            );
        }
        let _ = writeln!(
            out,
            "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"8\" fill=\"#333\">{}</text>",
            x + 6.0,
            y + 3.0,
            xml_escape(&row.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
