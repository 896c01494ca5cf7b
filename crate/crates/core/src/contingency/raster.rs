use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{ContingencyError, RiskAssessment};
use crate::grid::GridSpec;

/// Guard added to squared distances so cells on top of a bus stay finite.
const IDW_EPSILON: f64 = 1e-9;

/// Square raster of normalized risk over the bus bounding box.
///
/// Row 0 is the northern (max y) edge; column 0 the western edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskRaster {
    pub res: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub values: Vec<f64>,
}

impl RiskRaster {
    pub fn cell_size(&self) -> (f64, f64) {
        let n = self.res as f64;
        ((self.x_max - self.x_min) / n, (self.y_max - self.y_min) / n)
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let (dx, dy) = self.cell_size();
        (
            self.x_min + (col as f64 + 0.5) * dx,
            self.y_max - (row as f64 + 0.5) * dy,
        )
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.res + col]
    }

    /// Cell that contains point (x, y), clamped to the raster.
    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let (dx, dy) = self.cell_size();
        let clamp = |v: f64| (v.max(0.0) as usize).min(self.res - 1);
        (
            clamp(((self.y_max - y) / dy).floor()),
            clamp(((x - self.x_min) / dx).floor()),
        )
    }

    /// Mean value of the cells whose centers satisfy `pred`.
    pub fn region_mean(&self, pred: impl Fn(f64, f64) -> bool) -> Option<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for row in 0..self.res {
            for col in 0..self.res {
                let (x, y) = self.cell_center(row, col);
                if pred(x, y) {
                    sum += self.value(row, col);
                    count += 1;
                }
            }
        }
        (count > 0).then(|| sum / count as f64)
    }

    pub fn midpoint(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    /// `row,col,x,y,value` with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,x,y,value\n");
        for row in 0..self.res {
            for col in 0..self.res {
                let (x, y) = self.cell_center(row, col);
                let _ = writeln!(out, "{row},{col},{x},{y},{}", self.value(row, col));
            }
        }
        out
    }

    /// Standalone SVG heatmap with branches and bus markers drawn on top.
    pub fn to_svg(&self, spec: &GridSpec) -> String {
        const SIZE: f64 = 480.0;
        const PAD: f64 = 24.0;
        let cell = SIZE / self.res as f64;
        let (w, h) = (self.x_max - self.x_min, self.y_max - self.y_min);
        let to_px = |x: f64, y: f64| {
            (
                PAD + (x - self.x_min) / w * SIZE,
                PAD + (self.y_max - y) / h * SIZE,
            )
        };

        let total = SIZE + 2.0 * PAD;
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}">"#
        );
        let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(svg, r#"<g shape-rendering="crispEdges">"#);
        for row in 0..self.res {
            for col in 0..self.res {
                let (r, g, b) = heat_color(self.value(row, col));
                let _ = writeln!(
                    svg,
                    r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="rgb({r},{g},{b})"/>"#,
                    PAD + col as f64 * cell,
                    PAD + row as f64 * cell,
                    cell + 0.05,
                    cell + 0.05,
                );
            }
        }
        let _ = writeln!(svg, "</g>");

        for br in &spec.branches {
            let (Some(f), Some(t)) = (spec.bus(br.from_bus), spec.bus(br.to_bus)) else {
                continue;
            };
            let (x1, y1) = to_px(f.coord.0, f.coord.1);
            let (x2, y2) = to_px(t.coord.0, t.coord.1);
            let dash = if br.in_service {
                ""
            } else {
                r#" stroke-dasharray="4 3""#
            };
            let _ = writeln!(
                svg,
                r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="black" stroke-width="1.5"{dash}/>"#
            );
        }
        for bus in &spec.buses {
            let (x, y) = to_px(bus.coord.0, bus.coord.1);
            let label = bus
                .name
                .clone()
                .unwrap_or_else(|| format!("bus {}", bus.id));
            let _ = writeln!(
                svg,
                r#"<circle cx="{x:.2}" cy="{y:.2}" r="5" fill="white" stroke="black" stroke-width="1.5"/>"#
            );
            let _ = writeln!(
                svg,
                r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11">{}</text>"#,
                x + 7.0,
                y - 7.0,
                xml_escape(&label)
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Blue through yellow to red for values in [0, 1].
fn heat_color(v: f64) -> (u8, u8, u8) {
    let v = v.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64, t: f64| (a + (b - a) * t).round() as u8;
    if v < 0.5 {
        let t = v / 0.5;
        (
            lerp(49.0, 255.0, t),
            lerp(104.0, 220.0, t),
            lerp(178.0, 90.0, t),
        )
    } else {
        let t = (v - 0.5) / 0.5;
        (
            lerp(255.0, 200.0, t),
            lerp(220.0, 30.0, t),
            lerp(90.0, 40.0, t),
        )
    }
}

/// Inverse-distance-squared interpolation of per-bus risk, normalized so
/// the largest cell is 1 (an all-zero surface stays zero).
///
/// Cells that contain buses take the mean risk of those buses, which is the
/// value the interpolant attains at the bus locations themselves.
pub fn risk_surface(
    assessment: &RiskAssessment,
    spec: &GridSpec,
    grid_res: usize,
) -> Result<RiskRaster, ContingencyError> {
    if grid_res < 2 {
        return Err(ContingencyError::Raster(format!(
            "resolution must be >= 2, got {grid_res}"
        )));
    }
    if spec.buses.is_empty() {
        return Err(ContingencyError::Raster("grid has no buses".into()));
    }

    let points: Vec<(f64, f64, f64)> = spec
        .buses
        .iter()
        .map(|b| {
            let r = assessment.bus_risk.get(&b.id).copied().unwrap_or(0.0);
            (b.coord.0, b.coord.1, r)
        })
        .collect();

    let (mut x_min, mut x_max, mut y_min, mut y_max) = points.iter().fold(
        (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        ),
        |(a, b, c, d), &(x, y, _)| (a.min(x), b.max(x), c.min(y), d.max(y)),
    );
    let (w, h) = (x_max - x_min, y_max - y_min);
    if w == 0.0 && h == 0.0 {
        return Err(ContingencyError::Raster("all buses are coincident".into()));
    }
    // collinear buses: give the flat axis the extent of the other
    if w == 0.0 {
        x_min -= h / 2.0;
        x_max += h / 2.0;
    }
    if h == 0.0 {
        y_min -= w / 2.0;
        y_max += w / 2.0;
    }

    let mut raster = RiskRaster {
        res: grid_res,
        x_min,
        x_max,
        y_min,
        y_max,
        values: vec![0.0; grid_res * grid_res],
    };
    let mut pinned: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for &(x, y, r) in &points {
        let e = pinned.entry(raster.cell_of(x, y)).or_insert((0.0, 0));
        e.0 += r;
        e.1 += 1;
    }
    for row in 0..grid_res {
        for col in 0..grid_res {
            if let Some(&(sum, n)) = pinned.get(&(row, col)) {
                raster.values[row * grid_res + col] = sum / n as f64;
                continue;
            }
            let (cx, cy) = raster.cell_center(row, col);
            let (mut num, mut den) = (0.0, 0.0);
            for &(x, y, r) in &points {
                let d2 = (cx - x).powi(2) + (cy - y).powi(2);
                let w = 1.0 / (d2 + IDW_EPSILON);
                num += w * r;
                den += w;
            }
            raster.values[row * grid_res + col] = num / den;
        }
    }

    let max = raster.values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        for v in &mut raster.values {
            *v /= max;
        }
    }
    Ok(raster)
}
