//! Contour-and-scatter SVG export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::RngCore;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::targets::Target;

/// Grid points per axis for contour evaluation.
pub const GRID_POINTS: usize = 200;
/// Offsets below the grid maximum at which contours are drawn.
const LEVEL_OFFSETS: [f64; 5] = [1.0, 3.0, 6.0, 10.0, 16.0];
const PANEL_PX: f64 = 320.0;
const MARGIN_PX: f64 = 24.0;

pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Bounds {
    fn around(points: impl Iterator<Item = Point>) -> Option<Self> {
        let mut b = Bounds {
            x0: f64::INFINITY,
            x1: f64::NEG_INFINITY,
            y0: f64::INFINITY,
            y1: f64::NEG_INFINITY,
        };
        for [x, y] in points.filter(|p| p[0].is_finite() && p[1].is_finite()) {
            b.x0 = b.x0.min(x);
            b.x1 = b.x1.max(x);
            b.y0 = b.y0.min(y);
            b.y1 = b.y1.max(y);
        }
        b.x0.is_finite().then_some(b)
    }

    fn padded(self, frac: f64, min_pad: f64) -> Self {
        let px = ((self.x1 - self.x0) * frac).max(min_pad);
        let py = ((self.y1 - self.y0) * frac).max(min_pad);
        Bounds {
            x0: self.x0 - px,
            x1: self.x1 + px,
            y0: self.y0 - py,
            y1: self.y1 + py,
        }
    }
}

/// Function values on a regular `n × n` lattice spanning `bounds`.
#[derive(Clone, Debug)]
pub struct Grid {
    pub bounds: Bounds,
    pub n: usize,
    /// Row-major over `y`, then `x`.
    pub values: Vec<f64>,
}

impl Grid {
    pub fn evaluate(bounds: Bounds, n: usize, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                let (x, y) = Self::node(&bounds, n, i as f64, j as f64);
                values.push(f(x, y));
            }
        }
        Grid { bounds, n, values }
    }

    fn node(b: &Bounds, n: usize, i: f64, j: f64) -> (f64, f64) {
        let s = (n - 1) as f64;
        (b.x0 + (b.x1 - b.x0) * i / s, b.y0 + (b.y1 - b.y0) * j / s)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Closed iso-lines of `grid` at `level`.
///
/// The lattice is padded with a ring of values below every level, so every
/// line closes on itself; lines leaving the box close just outside it.
pub fn marching_squares(grid: &Grid, level: f64) -> Vec<Vec<Point>> {
    let n = grid.n;
    let w = n + 2;
    let floor = grid.values.iter().copied().filter(|v| v.is_finite()).fold(level, f64::min) - 1.0;
    let value = |i: usize, j: usize| -> f64 {
        if i == 0 || j == 0 || i > n || j > n {
            return floor;
        }
        let v = grid.values[(j - 1) * n + (i - 1)];
        if v.is_finite() {
            v
        } else {
            floor
        }
    };
    let inside = |i: usize, j: usize| value(i, j) >= level;
    // horizontal edge (i,j)-(i+1,j) and vertical edge (i,j)-(i,j+1)
    let h = |i: usize, j: usize| 2 * (j * w + i);
    let v = |i: usize, j: usize| 2 * (j * w + i) + 1;
    let mut links = vec![[usize::MAX; 2]; 2 * w * w];
    let mut link = |a: usize, b: usize| {
        for (x, y) in [(a, b), (b, a)] {
            let slot = if links[x][0] == usize::MAX { 0 } else { 1 };
            links[x][slot] = y;
        }
    };
    for j in 0..w - 1 {
        for i in 0..w - 1 {
            let c = [inside(i, j), inside(i + 1, j), inside(i + 1, j + 1), inside(i, j + 1)];
            let (bottom, right, top, left) = (h(i, j), v(i + 1, j), h(i, j + 1), v(i, j));
            let crossed: Vec<usize> = [(c[0] != c[1], bottom), (c[1] != c[2], right), (c[2] != c[3], top), (c[3] != c[0], left)]
                .into_iter()
                .filter_map(|(x, e)| x.then_some(e))
                .collect();
            match crossed.len() {
                2 => link(crossed[0], crossed[1]),
                4 => {
                    let centre = (value(i, j) + value(i + 1, j) + value(i + 1, j + 1) + value(i, j + 1)) / 4.0 >= level;
                    if c[0] == centre {
                        link(bottom, right);
                        link(top, left);
                    } else {
                        link(left, bottom);
                        link(right, top);
                    }
                }
                _ => {}
            }
        }
    }
    let b = &grid.bounds;
    let at = |e: usize| -> Point {
        let (i, j) = ((e / 2) % w, (e / 2) / w);
        let (i2, j2) = if e % 2 == 0 { (i + 1, j) } else { (i, j + 1) };
        let (va, vb) = (value(i, j), value(i2, j2));
        let t = ((level - va) / (vb - va)).clamp(0.0, 1.0);
        let gi = i as f64 - 1.0 + t * (i2 as f64 - i as f64);
        let gj = j as f64 - 1.0 + t * (j2 as f64 - j as f64);
        let (x, y) = Grid::node(b, n, gi, gj);
        [x, y]
    };
    let mut seen = vec![false; links.len()];
    let mut lines = Vec::new();
    for start in 0..links.len() {
        if seen[start] || links[start][0] == usize::MAX {
            continue;
        }
        let mut line = Vec::new();
        let (mut prev, mut cur) = (usize::MAX, start);
        loop {
            seen[cur] = true;
            line.push(at(cur));
            let next = if links[cur][0] != prev { links[cur][0] } else { links[cur][1] };
            prev = cur;
            cur = next;
            if cur == start || cur == usize::MAX || seen[cur] {
                break;
            }
        }
        lines.push(line);
    }
    lines
}

/// Even-odd point-in-polygon test for a closed polyline.
pub fn point_in_polygon(poly: &[Point], p: Point) -> bool {
    let mut inside = false;
    let mut j = poly.len().wrapping_sub(1);
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// One pair-of-coordinates view.
#[derive(Clone, Debug)]
pub struct Panel {
    pub dims: (usize, usize),
    pub bounds: Bounds,
    /// `(level, closed lines)`, outermost level last.
    pub contours: Vec<(f64, Vec<Vec<Point>>)>,
    pub samples: Vec<Point>,
}

fn pairs(dim: usize) -> Vec<(usize, usize)> {
    let k = dim.min(4);
    (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect()
}

/// Panels for every pair among the first four coordinates.
pub fn build_panels(target: &dyn Target, samples: &Tensor, grid_points: usize) -> Result<Vec<Panel>> {
    if target.dim() < 2 {
        return Err(Error::InvalidArgument("plotting needs dim >= 2".into()));
    }
    if samples.cols() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: target.dim(),
            got: samples.cols(),
        });
    }
    let modes = target.modes();
    let mut panels = Vec::new();
    for (i, j) in pairs(target.dim()) {
        let pts: Vec<Point> = samples.iter_rows().map(|r| [r[i], r[j]]).filter(|p| p[0].is_finite() && p[1].is_finite()).collect();
        let mode_pts = modes.iter().map(|m| [m[i], m[j]]);
        let bounds = Bounds::around(pts.iter().copied().chain(mode_pts))
            .unwrap_or(Bounds { x0: -1.0, x1: 1.0, y0: -1.0, y1: 1.0 })
            .padded(0.1, 3.0);
        let mut contours = Vec::new();
        if target.pair_log_marginal(i, j, 0.0, 0.0).is_some() {
            let grid = Grid::evaluate(bounds, grid_points, |x, y| target.pair_log_marginal(i, j, x, y).unwrap_or(f64::NEG_INFINITY));
            let top = grid.max();
            for off in LEVEL_OFFSETS {
                contours.push((top - off, marching_squares(&grid, top - off)));
            }
        }
        panels.push(Panel {
            dims: (i, j),
            bounds,
            contours,
            samples: pts,
        });
    }
    Ok(panels)
}

pub fn render_svg(panels: &[Panel]) -> String {
    let cols = panels.len().clamp(1, 3);
    let rows = panels.len().div_ceil(cols).max(1);
    let cell = PANEL_PX + 2.0 * MARGIN_PX;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = cols as f64 * cell,
        h = rows as f64 * cell
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (k, p) in panels.iter().enumerate() {
        let (ox, oy) = ((k % cols) as f64 * cell + MARGIN_PX, (k / cols) as f64 * cell + MARGIN_PX);
        let b = p.bounds;
        let map = |q: Point| {
            (
                ox + (q[0] - b.x0) / (b.x1 - b.x0) * PANEL_PX,
                oy + (b.y1 - q[1]) / (b.y1 - b.y0) * PANEL_PX,
            )
        };
        let _ = writeln!(s, r#"<g id="panel-{}-{}">"#, p.dims.0, p.dims.1);
        let _ = writeln!(
            s,
            r##"<rect x="{ox:.2}" y="{oy:.2}" width="{PANEL_PX}" height="{PANEL_PX}" fill="none" stroke="#444"/>"##
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" font-family="sans-serif">x{} vs x{}</text>"#,
            ox,
            oy - 6.0,
            p.dims.0 + 1,
            p.dims.1 + 1
        );
        let _ = writeln!(s, r#"<clipPath id="clip-{k}"><rect x="{ox:.2}" y="{oy:.2}" width="{PANEL_PX}" height="{PANEL_PX}"/></clipPath>"#);
        let _ = writeln!(s, r#"<g clip-path="url(#clip-{k})">"#);
        for (_, lines) in &p.contours {
            for line in lines {
                let pts: Vec<String> = line
                    .iter()
                    .chain(line.first())
                    .map(|&q| {
                        let (x, y) = map(q);
                        format!("{x:.2},{y:.2}")
                    })
                    .collect();
                let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#3060c0" stroke-width="0.8"/>"##, pts.join(" "));
            }
        }
        for &q in &p.samples {
            let (x, y) = map(q);
            let _ = writeln!(s, r##"<circle cx="{x:.2}" cy="{y:.2}" r="1.2" fill="#d04020" fill-opacity="0.5"/>"##);
        }
        let _ = writeln!(s, "</g>\n</g>");
    }
    s.push_str("</svg>\n");
    s
}

/// Draws `n` flow samples over target contours and writes the SVG to `out`.
pub fn export_scatter(flow: &FlowModel, target: &dyn Target, n: usize, rng: &mut dyn RngCore, out: &Path) -> Result<Vec<Panel>> {
    if n == 0 {
        return Err(Error::InvalidArgument("plot needs at least one sample".into()));
    }
    if flow.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: target.dim(),
            got: flow.dim(),
        });
    }
    let (x, _) = flow.sample_with_log_prob(n, rng)?;
    let panels = build_panels(target, &x, GRID_POINTS)?;
    fs::write(out, render_svg(&panels)).map_err(|e| Error::io(out, e))?;
    Ok(panels)
}
