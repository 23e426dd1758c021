//! Deterministic synthetic scenes: axis-aligned vehicle boxes on a flat
//! ground with a drivable band, rendered by point splatting into each camera
//! and rasterized orthographically into BEV ground-truth masks.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{BevGrid, CameraView, Intrinsics};
use crate::math;
use crate::{Error, Result};

/// Row-major `height × width × channels` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, color: &[f64]) -> Self {
        let mut data = Vec::with_capacity(width * height * color.len());
        for _ in 0..width * height {
            data.extend_from_slice(color);
        }
        Self { width, height, channels: color.len(), data }
    }

    pub fn pixel(&self, u: usize, v: usize) -> &[f64] {
        let o = (v * self.width + u) * self.channels;
        &self.data[o..o + self.channels]
    }

    fn set_pixel(&mut self, u: usize, v: usize, color: &[f64]) {
        let o = (v * self.width + u) * self.channels;
        self.data[o..o + self.channels].copy_from_slice(color);
    }
}

pub const SKY: [f64; 3] = [0.55, 0.75, 1.0];
pub const GROUND: [f64; 3] = [0.3, 0.3, 0.3];
pub const DRIVABLE: [f64; 3] = [0.6, 0.6, 0.6];
pub const VEHICLE: [f64; 3] = [1.0, 0.5, 0.0];

/// Ground hits beyond this camera depth render as sky.
pub const MAX_GROUND_DEPTH: f64 = 200.0;
/// Spacing of surface samples on box faces, meters.
pub const SPLAT_SPACING: f64 = 0.025;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Class {
    Vehicle,
}

/// Axis-aligned box standing on the ground.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneBox {
    pub center: [f64; 2],
    pub size: [f64; 2],
    pub height: f64,
    pub class: Class,
}

impl SceneBox {
    /// Footprint `[x_min, x_max, y_min, y_max]`.
    pub fn footprint(&self) -> [f64; 4] {
        let (hx, hy) = (0.5 * self.size[0], 0.5 * self.size[1]);
        [self.center[0] - hx, self.center[0] + hx, self.center[1] - hy, self.center[1] + hy]
    }

    /// Closed-rectangle containment of a ground point.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let f = self.footprint();
        p[0] >= f[0] && p[0] <= f[1] && p[1] >= f[2] && p[1] <= f[3]
    }

    /// Whether the footprints share positive area.
    pub fn overlaps(&self, other: &SceneBox) -> bool {
        let (a, b) = (self.footprint(), other.footprint());
        a[0] < b[1] && b[0] < a[1] && a[2] < b[3] && b[2] < a[3]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub boxes: Vec<SceneBox>,
    /// Drivable region as a simple polygon on the ground plane.
    pub drivable: Vec<[f64; 2]>,
    pub rig: Vec<CameraView>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenParams {
    /// Inclusive range of box counts.
    pub box_count: (usize, usize),
    /// Range of footprint side lengths, meters.
    pub size_range: (f64, f64),
    pub height_range: (f64, f64),
    /// Placement area `[x_min, x_max, y_min, y_max]`; boxes lie inside it.
    pub region: [f64; 4],
    /// Range for each side of the drivable band measured from `y = 0`.
    pub drivable_half_width: (f64, f64),
    /// Half length of the drivable band along x.
    pub drivable_half_length: f64,
}

impl GenParams {
    /// Defaults for a grid: one to three car-sized boxes over the grid area.
    pub fn for_grid(grid: &BevGrid) -> Self {
        Self {
            box_count: (1, 3),
            size_range: (2.0, 3.5),
            height_range: (1.0, 1.8),
            region: grid.bounds(),
            drivable_half_width: (1.0, 3.5),
            drivable_half_length: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.box_count.0 <= self.box_count.1
            && self.size_range.0 >= 0.0
            && self.size_range.0 <= self.size_range.1
            && self.height_range.0 >= 0.0
            && self.height_range.0 <= self.height_range.1
            && self.region[0] < self.region[1]
            && self.region[2] < self.region[3]
            && self.size_range.1 <= (self.region[1] - self.region[0]).min(self.region[3] - self.region[2])
            && self.drivable_half_width.0 > 0.0
            && self.drivable_half_width.0 <= self.drivable_half_width.1
            && self.drivable_half_length > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid scene generation parameters {self:?}")))
        }
    }
}

pub const MAX_PLACEMENT_TRIES: usize = 1000;

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}

/// Samples a scene. Boxes are placed by rejection so that no two footprints
/// overlap; the drivable region is an axis-aligned band containing the ego.
pub fn generate(seed: u64, params: &GenParams, rig: &[CameraView]) -> Result<SyntheticScene> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(params.box_count.0..=params.box_count.1);
    let mut boxes: Vec<SceneBox> = Vec::with_capacity(count);
    let r = params.region;
    for index in 0..count {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let size = [uniform(&mut rng, params.size_range), uniform(&mut rng, params.size_range)];
            let height = uniform(&mut rng, params.height_range);
            let cx = uniform(&mut rng, (r[0] + 0.5 * size[0], r[1] - 0.5 * size[0]));
            let cy = uniform(&mut rng, (r[2] + 0.5 * size[1], r[3] - 0.5 * size[1]));
            let candidate = SceneBox { center: [cx, cy], size, height, class: Class::Vehicle };
            if boxes.iter().all(|b| !b.overlaps(&candidate)) {
                placed = Some(candidate);
                break;
            }
        }
        boxes.push(placed.ok_or(Error::Placement { index, tries: MAX_PLACEMENT_TRIES })?);
    }
    let left = uniform(&mut rng, params.drivable_half_width);
    let right = uniform(&mut rng, params.drivable_half_width);
    let l = params.drivable_half_length;
    let drivable = vec![[-l, -right], [l, -right], [l, left], [-l, left]];
    Ok(SyntheticScene { boxes, drivable, rig: rig.to_vec(), seed })
}

/// Even-odd point-in-polygon test.
pub fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + n - 1) % n]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0];
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Renders `scene` into `view`, returning the image and its depth buffer
/// (`f64::INFINITY` where nothing was hit).
pub fn render_with_depth(scene: &SyntheticScene, view: &CameraView) -> (Image, Vec<f64>) {
    let (w, h) = view.image_size();
    let mut img = Image::filled(w, h, &SKY);
    let mut depth = vec![f64::INFINITY; w * h];
    let k = *view.intrinsics();
    let cam_to_ego = view.cam_to_ego();
    let c = view.center();

    for v in 0..h {
        for u in 0..w {
            let d_cam = [(u as f64 + 0.5 - k.cx) / k.fx, (v as f64 + 0.5 - k.cy) / k.fy, 1.0];
            let d = math::mat_vec(&cam_to_ego, &d_cam);
            if d[2] >= -1e-12 {
                continue;
            }
            let t = -c[2] / d[2];
            if t > MAX_GROUND_DEPTH {
                continue;
            }
            let hit = [c[0] + t * d[0], c[1] + t * d[1]];
            let color = if point_in_polygon(hit, &scene.drivable) { &DRIVABLE } else { &GROUND };
            img.set_pixel(u, v, color);
            depth[v * w + u] = t;
        }
    }

    for b in &scene.boxes {
        for p in box_surface_samples(b) {
            let pc = view.to_camera(&p);
            if pc[2] <= 1e-9 {
                continue;
            }
            let (pu, pv) = (k.fx * pc[0] / pc[2] + k.cx, k.fy * pc[1] / pc[2] + k.cy);
            if !(pu >= 0.0 && pv >= 0.0 && pu < w as f64 && pv < h as f64) {
                continue;
            }
            let (iu, iv) = (pu as usize, pv as usize);
            let slot = &mut depth[iv * w + iu];
            if pc[2] < *slot {
                *slot = pc[2];
                img.set_pixel(iu, iv, &VEHICLE);
            }
        }
    }
    (img, depth)
}

pub fn render(scene: &SyntheticScene, view: &CameraView) -> Image {
    render_with_depth(scene, view).0
}

fn steps(len: f64) -> usize {
    ((len / SPLAT_SPACING) as usize).max(1)
}

/// Samples on the four sides and the top of a box.
fn box_surface_samples(b: &SceneBox) -> impl Iterator<Item = [f64; 3]> + '_ {
    let f = b.footprint();
    let (nx, ny, nz) = (steps(b.size[0]), steps(b.size[1]), steps(b.height));
    let lerp = |lo: f64, hi: f64, i: usize, n: usize| lo + (hi - lo) * i as f64 / n as f64;
    let sides_x = (0..=nx).flat_map(move |i| {
        (0..=nz).flat_map(move |kz| {
            let x = lerp(f[0], f[1], i, nx);
            let z = lerp(0.0, b.height, kz, nz);
            [[x, f[2], z], [x, f[3], z]]
        })
    });
    let sides_y = (0..=ny).flat_map(move |j| {
        (0..=nz).flat_map(move |kz| {
            let y = lerp(f[2], f[3], j, ny);
            let z = lerp(0.0, b.height, kz, nz);
            [[f[0], y, z], [f[1], y, z]]
        })
    });
    let top = (0..=nx).flat_map(move |i| {
        (0..=ny).map(move |j| [lerp(f[0], f[1], i, nx), lerp(f[2], f[3], j, ny), b.height])
    });
    sides_x.chain(sides_y).chain(top)
}

/// Per-class BEV masks in query order (row-major, `j` as the row).
#[derive(Debug, Clone, PartialEq)]
pub struct BevMasks {
    pub vehicle: Vec<bool>,
    pub drivable: Vec<bool>,
}

impl BevMasks {
    pub const CLASSES: usize = 2;

    /// Interleaved `[n_q × 2]` 0/1 targets: column 0 vehicle, 1 drivable.
    pub fn targets(&self) -> Vec<f64> {
        self.vehicle
            .iter()
            .zip(&self.drivable)
            .flat_map(|(v, d)| [*v as u8 as f64, *d as u8 as f64])
            .collect()
    }
}

/// Orthographic ground truth: a cell is set when its center lies inside a
/// box footprint (vehicle) or the drivable polygon (drivable).
pub fn ground_truth(scene: &SyntheticScene, grid: &BevGrid) -> BevMasks {
    let n = grid.num_cells();
    let mut vehicle = vec![false; n];
    let mut drivable = vec![false; n];
    for q in 0..n {
        let (i, j) = grid.cell_of_query(q);
        let p = grid.cell_center(i, j);
        vehicle[q] = scene.boxes.iter().any(|b| b.contains(p));
        drivable[q] = point_in_polygon(p, &scene.drivable);
    }
    BevMasks { vehicle, drivable }
}

/// Default desk-scale grid: 16 × 16 cells of 0.5 m in front of the ego.
pub fn toy_grid() -> BevGrid {
    BevGrid::new(16, 16, 0.5, [2.25, -3.75]).expect("toy grid is valid")
}

/// Two forward cameras 2 m apart, 64 × 32 pixels.
pub fn toy_rig() -> Vec<CameraView> {
    let k = Intrinsics { fx: 20.0, fy: 20.0, cx: 32.0, cy: 16.0 };
    [1.0, -1.0]
        .iter()
        .enumerate()
        .map(|(i, y)| CameraView::looking_along(k, [0.0, *y, 1.5], 0.0, (64, 32), i + 1).expect("toy camera is valid"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{canonical_view, epipolar_line, point_line_distance};

    fn scene_with(boxes: Vec<SceneBox>, rig: Vec<CameraView>) -> SyntheticScene {
        SyntheticScene { boxes, drivable: vec![[-50.0, -2.0], [50.0, -2.0], [50.0, 2.0], [-50.0, 2.0]], rig, seed: 0 }
    }

    fn car(x: f64, y: f64, s: f64, h: f64) -> SceneBox {
        SceneBox { center: [x, y], size: [s, s], height: h, class: Class::Vehicle }
    }

    #[test]
    fn empty_scene_has_empty_vehicle_mask_and_no_vehicle_pixels() {
        let grid = toy_grid();
        let params = GenParams { box_count: (0, 0), ..GenParams::for_grid(&grid) };
        let scene = generate(5, &params, &toy_rig()).unwrap();
        assert!(scene.boxes.is_empty());
        assert!(ground_truth(&scene, &grid).vehicle.iter().all(|v| !v));
        let img = render(&scene, &scene.rig[0]);
        for v in 0..img.height {
            for u in 0..img.width {
                let p = img.pixel(u, v);
                assert!(p == SKY || p == GROUND || p == DRIVABLE);
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_non_overlapping() {
        let grid = toy_grid();
        let params = GenParams { box_count: (3, 6), size_range: (0.5, 1.5), ..GenParams::for_grid(&grid) };
        for seed in 0..50 {
            let a = generate(seed, &params, &toy_rig()).unwrap();
            assert_eq!(a, generate(seed, &params, &toy_rig()).unwrap());
            let r = params.region;
            for (i, b) in a.boxes.iter().enumerate() {
                let f = b.footprint();
                assert!(f[0] >= r[0] && f[1] <= r[1] && f[2] >= r[2] && f[3] <= r[3]);
                for c in &a.boxes[i + 1..] {
                    // Brute-force: sample a lattice over the first footprint and
                    // look for interior points shared with the second.
                    let g = c.footprint();
                    let mut shared = false;
                    for sx in 1..40 {
                        for sy in 1..40 {
                            let p = [f[0] + (f[1] - f[0]) * sx as f64 / 40.0, f[2] + (f[3] - f[2]) * sy as f64 / 40.0];
                            if p[0] > g[0] && p[0] < g[1] && p[1] > g[2] && p[1] < g[3] {
                                shared = true;
                            }
                        }
                    }
                    assert!(!shared, "seed {seed}: boxes overlap");
                }
            }
        }
    }

    #[test]
    fn placement_failure_is_reported() {
        let grid = toy_grid();
        let params = GenParams { box_count: (20, 20), size_range: (3.5, 3.5), ..GenParams::for_grid(&grid) };
        assert!(matches!(generate(1, &params, &toy_rig()), Err(Error::Placement { .. })));
    }

    #[test]
    fn box_on_axis_renders_centered() {
        let v = canonical_view();
        let scene = scene_with(vec![car(10.0, 0.0, 2.0, 1.2)], vec![v.clone()]);
        let img = render(&scene, &v);
        let mut sum = 0.0;
        let mut n = 0.0;
        for vv in 0..img.height {
            for u in 0..img.width {
                if img.pixel(u, vv) == VEHICLE {
                    sum += u as f64 + 0.5;
                    n += 1.0;
                }
            }
        }
        assert!(n > 0.0);
        assert!((sum / n - v.intrinsics().cx).abs() < 0.5, "mean column {}", sum / n);
    }

    #[test]
    fn nearer_box_occludes_farther() {
        let v = canonical_view();
        let scene = scene_with(vec![car(6.0, 0.0, 1.0, 1.4), car(12.0, 0.0, 1.0, 1.4)], vec![v.clone()]);
        let (img, depth) = render_with_depth(&scene, &v);
        // Principal pixel row just below the horizon sees the near front face.
        let (u, vv) = (120, 62);
        assert_eq!(img.pixel(u, vv), VEHICLE);
        assert!((depth[vv * 240 + u] - 5.5).abs() < 0.05, "{}", depth[vv * 240 + u]);
        let only_far = scene_with(vec![car(12.0, 0.0, 1.0, 1.4)], vec![v.clone()]);
        let (_, far_depth) = render_with_depth(&only_far, &v);
        assert!((far_depth[vv * 240 + u] - 11.5).abs() < 0.05);
    }

    #[test]
    fn ground_truth_matches_point_in_rectangle() {
        let grid = BevGrid::centered(8, 8, 0.5).unwrap();
        let center = grid.cell_center(3, 4);
        let scene = scene_with(vec![car(center[0], center[1], 1.0, 1.0)], vec![]);
        let masks = ground_truth(&scene, &grid);
        for q in 0..grid.num_cells() {
            let (i, j) = grid.cell_of_query(q);
            let p = grid.cell_center(i, j);
            let inside = (p[0] - center[0]).abs() <= 0.5 + 1e-12 && (p[1] - center[1]).abs() <= 0.5 + 1e-12;
            assert_eq!(masks.vehicle[q], inside, "cell {i},{j}");
        }
        assert_eq!(masks.vehicle.iter().filter(|v| **v).count(), 9);
        // Camera independence.
        let moved = SyntheticScene { rig: toy_rig(), ..scene.clone() };
        assert_eq!(ground_truth(&moved, &grid), masks);
    }

    #[test]
    fn vehicle_cells_have_vehicle_pixels_near_their_epipolar_line() {
        let grid = toy_grid();
        let rig = toy_rig();
        let params = GenParams { box_count: (1, 1), ..GenParams::for_grid(&grid) };
        for seed in 0..20 {
            let scene = generate(seed, &params, &rig).unwrap();
            let masks = ground_truth(&scene, &grid);
            for view in &rig {
                let img = render(&scene, view);
                for q in 0..grid.num_cells() {
                    if !masks.vehicle[q] {
                        continue;
                    }
                    let cell = grid.cell_of_query(q);
                    let xy = grid.cell_center(cell.0, cell.1);
                    let foot = view.project(&[xy[0], xy[1], 0.0]).unwrap();
                    if foot.depth <= 0.0 || !view.in_frame(&foot.pixel) {
                        continue;
                    }
                    let line = epipolar_line(view, &grid, cell);
                    let mut best = f64::INFINITY;
                    for vv in 0..img.height {
                        for u in 0..img.width {
                            if img.pixel(u, vv) == VEHICLE {
                                let d = point_line_distance(&[u as f64 + 0.5, vv as f64 + 0.5, 1.0], &line)
                                    .unwrap()
                                    .abs();
                                best = best.min(d);
                            }
                        }
                    }
                    assert!(best <= 1.5, "seed {seed} cell {cell:?}: {best}");
                }
            }
        }
    }

    #[test]
    fn polygon_containment() {
        let sq = [[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]];
        assert!(point_in_polygon([1.0, 1.0], &sq));
        assert!(!point_in_polygon([3.0, 1.0], &sq));
    }
}
