//! Brute-force epipolar checks over random grid cells.
//!
//! For every sampled cell and every camera that sees it:
//! - `ray`: points on the cell's vertical ray with positive depth project
//!   onto the computed line (residual in pixels);
//! - `distance`: for a pixel off the line, `|x·l̂|` equals the minimum
//!   distance to 10⁵ projected ray points, refined by golden-section search;
//! - `width`: the Gaussian widths of the cell and a second random cell have
//!   the ratio of their camera distances (relative error).

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use eaf_core::field::{lambda_qi, sigma_pixels};
use eaf_core::geometry::{cheirality, epipolar_line, point_line_distance, BevGrid, CameraView, EpipolarLine};

use crate::rig::Rig;

pub const RAY_TOLERANCE: f64 = 1e-6;
pub const DISTANCE_TOLERANCE: f64 = 1e-3;
pub const WIDTH_TOLERANCE: f64 = 1e-9;

const RAY_SAMPLES: usize = 16;
const LINE_SAMPLES: usize = 100_000;
/// Half-length in meters of the ray segment scanned by the distance check.
const SCAN_HALF_LENGTH: f64 = 50.0;
const MIN_DEPTH: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    Ray,
    Distance,
    Width,
}

impl Check {
    pub fn name(self) -> &'static str {
        match self {
            Check::Ray => "ray",
            Check::Distance => "distance",
            Check::Width => "width",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Check::Ray => RAY_TOLERANCE,
            Check::Distance => DISTANCE_TOLERANCE,
            Check::Width => WIDTH_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub cell: (usize, usize),
    pub view: String,
    pub check: Check,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub cells: usize,
    /// (cell, view) pairs with a visible cell and a proper line.
    pub pairs: usize,
    pub max_ray: f64,
    pub max_distance: f64,
    pub max_width: f64,
    pub first_failure: Option<Failure>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.first_failure.is_none()
    }

    fn record(&mut self, check: Check, err: f64, cell: (usize, usize), view: &str) {
        let slot = match check {
            Check::Ray => &mut self.max_ray,
            Check::Distance => &mut self.max_distance,
            Check::Width => &mut self.max_width,
        };
        // NaN counts as a failure and sticks as the maximum.
        if err > *slot || err.is_nan() {
            *slot = err;
        }
        if !(err <= check.tolerance()) && self.first_failure.is_none() {
            self.first_failure = Some(Failure { cell, view: view.into(), check, error: err });
        }
    }

    /// Deterministic text summary; no timings.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "cells {} visible pairs {}", self.cells, self.pairs);
        for (check, v) in [(Check::Ray, self.max_ray), (Check::Distance, self.max_distance), (Check::Width, self.max_width)]
        {
            let _ = writeln!(s, "{:<8} max error {:.3e} (tolerance {:.0e})", check.name(), v, check.tolerance());
        }
        match &self.first_failure {
            None => s.push_str("ok\n"),
            Some(f) => {
                let _ = writeln!(
                    s,
                    "FAILED check {} cell ({}, {}) view {} error {:.3e}",
                    f.check.name(),
                    f.cell.0,
                    f.cell.1,
                    f.view,
                    f.error
                );
            }
        }
        s
    }
}

/// Ego-frame point on the vertical ray of `xy` at height `z`, and its pixel
/// and depth; `None` when behind the camera.
fn project_ray_point(view: &CameraView, xy: [f64; 2], z: f64) -> Option<([f64; 2], f64)> {
    let p = view.to_camera(&[xy[0], xy[1], z]);
    if p[2] <= MIN_DEPTH {
        return None;
    }
    let k = view.intrinsics();
    Some(([k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy], p[2]))
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Heights on the ray whose points have depth above `MIN_DEPTH`, within
/// `[lo, hi]`. Depth is affine in height.
fn positive_depth_interval(view: &CameraView, xy: [f64; 2], lo: f64, hi: f64) -> Option<(f64, f64)> {
    let d0 = view.to_camera(&[xy[0], xy[1], 0.0])[2];
    let slope = view.to_camera(&[xy[0], xy[1], 1.0])[2] - d0;
    let (mut a, mut b) = (lo, hi);
    if slope.abs() < 1e-15 {
        return (d0 > MIN_DEPTH).then_some((a, b));
    }
    // Small margin keeps the endpoints strictly inside the valid range.
    let root = (MIN_DEPTH - d0) / slope;
    if slope > 0.0 {
        a = a.max(root + 1e-9);
    } else {
        b = b.min(root - 1e-9);
    }
    (a < b).then_some((a, b))
}

/// Minimum pixel distance from `x` to the projected ray over heights in
/// `[lo, hi]`: dense scan, then golden-section refinement around the best sample.
fn brute_force_distance(view: &CameraView, xy: [f64; 2], x: [f64; 2], lo: f64, hi: f64) -> f64 {
    let f = |z: f64| project_ray_point(view, xy, z).map(|(p, _)| dist2(p, x)).unwrap_or(f64::INFINITY);
    let step = (hi - lo) / (LINE_SAMPLES - 1) as f64;
    let (mut best_k, mut best) = (0, f64::INFINITY);
    for k in 0..LINE_SAMPLES {
        let v = f(lo + step * k as f64);
        if v < best {
            best = v;
            best_k = k;
        }
    }
    let mut a = (lo + step * (best_k as f64 - 1.0)).max(lo);
    let mut b = (lo + step * (best_k as f64 + 1.0)).min(hi);
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    best.min(fc).min(fd).sqrt()
}

fn horizontal_distance(view: &CameraView, xy: [f64; 2]) -> f64 {
    let c = view.center();
    (xy[0] - c[0]).hypot(xy[1] - c[1])
}

fn check_pair(
    report: &mut Report,
    rng: &mut ChaCha8Rng,
    grid: &BevGrid,
    view: &CameraView,
    name: &str,
    cell: (usize, usize),
    line: &EpipolarLine,
) {
    let xy = grid.cell_center(cell.0, cell.1);
    let g = grid.ground_height;
    let (lo, hi) = match positive_depth_interval(view, xy, g - SCAN_HALF_LENGTH, g + SCAN_HALF_LENGTH) {
        Some(r) => r,
        None => return,
    };

    let mut ray = 0.0f64;
    for _ in 0..RAY_SAMPLES {
        let z = rng.gen_range(lo..hi);
        if let Some((p, _)) = project_ray_point(view, xy, z) {
            let d = point_line_distance(&[p[0], p[1], 1.0], line).unwrap_or(f64::NAN);
            ray = if d.is_nan() { d } else { ray.max(d.abs()) };
        }
    }
    report.record(Check::Ray, ray, cell, name);

    // Pixel at a random offset from a random ray point, so the nearest line
    // point lies on the positive-depth part of the image line.
    let z0 = rng.gen_range(lo.max(g - 5.0).min(hi)..hi.min(g + 5.0).max(lo));
    if let Some((p, _)) = project_ray_point(view, xy, z0) {
        let off = rng.gen_range(-20.0..20.0);
        let n = [line.a, line.b];
        let x = [p[0] + off * n[0], p[1] + off * n[1]];
        let analytic = point_line_distance(&[x[0], x[1], 1.0], line).unwrap_or(f64::NAN).abs();
        let brute = brute_force_distance(view, xy, x, (z0 - SCAN_HALF_LENGTH).max(lo), (z0 + SCAN_HALF_LENGTH).min(hi));
        report.record(Check::Distance, (analytic - brute).abs(), cell, name);
    }
}

fn check_width(
    report: &mut Report,
    grid: &BevGrid,
    view: &CameraView,
    name: &str,
    a: (usize, usize),
    b: (usize, usize),
) {
    let clamp = grid.cell_size;
    let (da, db) = (horizontal_distance(view, grid.cell_center(a.0, a.1)), horizontal_distance(view, grid.cell_center(b.0, b.1)));
    if da <= clamp || db <= clamp || !cheirality(view, grid, b) {
        return;
    }
    let (Ok(la), Ok(lb)) = (lambda_qi(grid, a, view, clamp), lambda_qi(grid, b, view, clamp)) else {
        return;
    };
    let ratio = sigma_pixels(1.0, la) / sigma_pixels(1.0, lb);
    report.record(Check::Width, (ratio * da / db - 1.0).abs(), a, name);
}

/// Runs the checks over `samples` cells drawn uniformly from `grid`.
pub fn run(rig: &Rig, grid: &BevGrid, samples: usize, seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Report { cells: samples, ..Report::default() };
    for _ in 0..samples {
        let cell = (rng.gen_range(0..grid.cells_x), rng.gen_range(0..grid.cells_y));
        let other = (rng.gen_range(0..grid.cells_x), rng.gen_range(0..grid.cells_y));
        for cam in &rig.cameras {
            let view = &cam.view;
            if !cheirality(view, grid, cell) {
                continue;
            }
            let line = epipolar_line(view, grid, cell);
            if line.degenerate {
                continue;
            }
            report.pairs += 1;
            check_pair(&mut report, &mut rng, grid, view, &cam.name, cell, &line);
            check_width(&mut report, grid, view, &cam.name, cell, other);
        }
    }
    report
}
