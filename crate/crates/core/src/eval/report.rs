//! Metrics-report serialization and 2-D projection export.

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::runs::MetricsReport;

/// Writes a metrics report as pretty-printed JSON (trailing newline, LF).
pub fn export_report(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut body = serde_json::to_vec_pretty(report)?;
    body.push(b'\n');
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&body).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a metrics report written by [`export_report`]. Unknown fields are
/// tolerated so newer writers stay readable.
pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let body = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&body)?)
}

/// Writes a projection as CSV with header `id,x,y,label`. A missing label
/// becomes an empty field. Coordinates use shortest round-trip formatting.
pub fn export_projection(
    ids: &[String],
    points: &[[f64; 2]],
    labels: &[Option<String>],
    path: &Path,
) -> Result<()> {
    if ids.len() != points.len() || labels.len() != points.len() {
        return Err(Error::InvalidParameter(format!(
            "projection export got {} ids, {} points, {} labels",
            ids.len(),
            points.len(),
            labels.len()
        )));
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    w.write_record(["id", "x", "y", "label"])
        .map_err(|e| Error::csv(path, e))?;
    for i in 0..ids.len() {
        w.write_record([
            ids[i].as_str(),
            &format!("{}", points[i][0]),
            &format!("{}", points[i][1]),
            labels[i].as_deref().unwrap_or(""),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// One parsed row of a projection CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionRow {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub label: Option<String>,
}

/// Reads a CSV written by [`export_projection`].
pub fn read_projection(path: &Path) -> Result<Vec<ProjectionRow>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let head = r.headers().map_err(|e| Error::csv(path, e))?.clone();
    if head.iter().collect::<Vec<_>>() != ["id", "x", "y", "label"] {
        return Err(Error::Metrics(format!(
            "unexpected projection header {head:?}"
        )));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let field = |i: usize| rec.get(i).unwrap_or("").to_string();
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|e| Error::Metrics(format!("bad coordinate in projection CSV: {e}")))
        };
        let label = field(3);
        rows.push(ProjectionRow {
            id: field(0),
            x: num(1)?,
            y: num(2)?,
            label: (!label.is_empty()).then_some(label),
        });
    }
    Ok(rows)
}

/// Fixed scatter palette (8 colors), assigned to labels in sorted order and
/// reused cyclically past eight classes. Unlabeled points render gray.
pub const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

const UNLABELED: [u8; 3] = [180, 180, 180];

/// Renders a square scatter plot of the projection to `path` as PNG.
pub fn render_projection_png(
    points: &[[f64; 2]],
    labels: &[Option<String>],
    size: u32,
    path: &Path,
) -> Result<()> {
    if points.is_empty() {
        return Err(Error::InvalidParameter(
            "cannot render an empty projection".into(),
        ));
    }
    if labels.len() != points.len() {
        return Err(Error::InvalidParameter(format!(
            "projection render got {} points, {} labels",
            points.len(),
            labels.len()
        )));
    }
    if size < 16 {
        return Err(Error::InvalidParameter(format!(
            "scatter size {size} too small (minimum 16)"
        )));
    }
    let mut classes: Vec<&str> = labels.iter().flatten().map(String::as_str).collect();
    classes.sort_unstable();
    classes.dedup();
    let color_of = |label: &Option<String>| -> [u8; 3] {
        match label {
            Some(l) => {
                let idx = classes.iter().position(|c| c == l).unwrap_or(0);
                PALETTE[idx % PALETTE.len()]
            }
            None => UNLABELED,
        }
    };

    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        min_x = min_x.min(p[0]);
        max_x = max_x.max(p[0]);
        min_y = min_y.min(p[1]);
        max_y = max_y.max(p[1]);
    }
    let span_x = (max_x - min_x).max(1e-12);
    let span_y = (max_y - min_y).max(1e-12);

    let margin = (size / 16).max(2);
    let inner = (size - 2 * margin) as f64;
    let mut img = image::RgbImage::from_pixel(size, size, image::Rgb([255, 255, 255]));
    let radius: i64 = (size as i64 / 200).max(2);
    for (p, label) in points.iter().zip(labels) {
        let px = margin as f64 + (p[0] - min_x) / span_x * inner;
        // Flip y so larger values render toward the top.
        let py = margin as f64 + (1.0 - (p[1] - min_y) / span_y) * inner;
        let (cx, cy) = (px.round() as i64, py.round() as i64);
        let color = image::Rgb(color_of(label));
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                if dx * dx + dy * dy > radius * radius {
                    continue;
                }
                let (x, y) = (cx + dx, cy + dy);
                if x >= 0 && y >= 0 && (x as u32) < size && (y as u32) < size {
                    img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    }
    img.save(path).map_err(|e| Error::image(path, e))?;
    Ok(())
}
