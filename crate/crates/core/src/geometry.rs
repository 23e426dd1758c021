//! Pinhole cameras, the BEV grid treated as an orthographic view, and the
//! epipolar lines that vertical BEV rays trace in each camera image.
//!
//! Conventions: ego frame is x-forward, y-left, z-up. Camera frame is
//! z-forward, x-right, y-down. `rotation`/`translation` map ego points into
//! the camera frame: `p_cam = R·p + t`.

use alloc::format;

use crate::math::{self, Mat3, Vec3};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn matrix(&self) -> Mat3 {
        [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
    }

    pub fn mean_focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }
}

/// One calibrated camera.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    intrinsics: Intrinsics,
    rotation: Mat3,
    translation: Vec3,
    image_size: (usize, usize),
    view_id: usize,
}

/// Image-plane location of a projected point together with its camera depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: [f64; 2],
    pub depth: f64,
}

impl CameraView {
    pub fn new(
        intrinsics: Intrinsics,
        rotation: Mat3,
        translation: Vec3,
        image_size: (usize, usize),
        view_id: usize,
    ) -> Result<Self> {
        if !(intrinsics.fx > 0.0 && intrinsics.fy > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                intrinsics.fx, intrinsics.fy
            )));
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(Error::InvalidCamera("image size must be positive".into()));
        }
        let rrt = math::mat_mul(&rotation, &math::transpose(&rotation));
        for (r, row) in rrt.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                let expect = if r == c { 1.0 } else { 0.0 };
                if (v - expect).abs() > 1e-9 {
                    return Err(Error::InvalidCamera("rotation is not orthonormal".into()));
                }
            }
        }
        if (math::det(&rotation) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidCamera("rotation has determinant != 1".into()));
        }
        let finite = [intrinsics.cx, intrinsics.cy].iter().chain(translation.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidCamera("non-finite parameters".into()));
        }
        Ok(Self { intrinsics, rotation, translation, image_size, view_id })
    }

    /// Camera at ego position `center` whose optical axis points along the
    /// ego heading `yaw` (radians, counter-clockwise from +x), level with the
    /// ground.
    pub fn looking_along(
        intrinsics: Intrinsics,
        center: Vec3,
        yaw: f64,
        image_size: (usize, usize),
        view_id: usize,
    ) -> Result<Self> {
        let cam_in_ego = math::mat_mul(&math::rot_z(yaw), &OPTICAL_IN_EGO);
        Self::from_pose_in_ego(intrinsics, &cam_in_ego, center, image_size, view_id)
    }

    /// Builds a view from the camera-to-ego rotation and the camera center in
    /// ego coordinates.
    pub fn from_pose_in_ego(
        intrinsics: Intrinsics,
        cam_to_ego: &Mat3,
        center: Vec3,
        image_size: (usize, usize),
        view_id: usize,
    ) -> Result<Self> {
        let rotation = math::transpose(cam_to_ego);
        let rc = math::mat_vec(&rotation, &center);
        Self::new(intrinsics, rotation, [-rc[0], -rc[1], -rc[2]], image_size, view_id)
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    pub fn view_id(&self) -> usize {
        self.view_id
    }

    pub fn with_view_id(mut self, view_id: usize) -> Self {
        self.view_id = view_id;
        self
    }

    /// Camera origin in ego coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vec3 {
        let rt = math::transpose(&self.rotation);
        let c = math::mat_vec(&rt, &self.translation);
        [-c[0], -c[1], -c[2]]
    }

    /// Camera-to-ego rotation, `Rᵀ`.
    pub fn cam_to_ego(&self) -> Mat3 {
        math::transpose(&self.rotation)
    }

    pub fn to_camera(&self, point: &Vec3) -> Vec3 {
        let p = math::mat_vec(&self.rotation, point);
        [p[0] + self.translation[0], p[1] + self.translation[1], p[2] + self.translation[2]]
    }

    /// Unnormalized homogeneous pixel `K·(R·p + t)`.
    pub fn project_homogeneous(&self, point: &Vec3) -> Vec3 {
        math::mat_vec(&self.intrinsics.matrix(), &self.to_camera(point))
    }

    /// Perspective projection. Points behind the camera still get a pixel;
    /// their negative depth is the cheirality signal.
    pub fn project(&self, point: &Vec3) -> Result<Projection> {
        let p = self.to_camera(point);
        if p[2].abs() < 1e-9 {
            return Err(Error::ProjectionAtInfinity);
        }
        let k = &self.intrinsics;
        Ok(Projection {
            pixel: [k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy],
            depth: p[2],
        })
    }

    /// Rescales the intrinsics to a feature map of `feature_size` (w, h).
    pub fn scale_intrinsics(&self, feature_size: (usize, usize)) -> Result<Self> {
        let (w, h) = feature_size;
        if w == 0 || h == 0 {
            return Err(Error::InvalidCamera("feature map must be non-empty".into()));
        }
        let sx = w as f64 / self.image_size.0 as f64;
        let sy = h as f64 / self.image_size.1 as f64;
        let k = &self.intrinsics;
        let mut out = self.clone();
        out.intrinsics = Intrinsics { fx: k.fx * sx, fy: k.fy * sy, cx: k.cx * sx, cy: k.cy * sy };
        out.image_size = feature_size;
        Ok(out)
    }

    /// The same camera yawed by `yaw` radians about the ego z axis through
    /// its own center and then moved by `shift` (ego meters).
    pub fn perturbed(&self, yaw: f64, shift: Vec3) -> Result<Self> {
        let cam_to_ego = math::mat_mul(&math::rot_z(yaw), &self.cam_to_ego());
        let c = self.center();
        let center = [c[0] + shift[0], c[1] + shift[1], c[2] + shift[2]];
        Self::from_pose_in_ego(self.intrinsics, &cam_to_ego, center, self.image_size, self.view_id)
    }

    /// Whether `pixel` falls inside the image.
    pub fn in_frame(&self, pixel: &[f64; 2]) -> bool {
        pixel[0] >= 0.0
            && pixel[1] >= 0.0
            && pixel[0] < self.image_size.0 as f64
            && pixel[1] < self.image_size.1 as f64
    }
}

/// Camera optical axes expressed in the ego frame for a forward-looking
/// camera: columns are the camera x (right), y (down), z (forward) axes.
pub const OPTICAL_IN_EGO: Mat3 = [[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]];

/// Regular lattice of ground-plane cells; the orthographic reference view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevGrid {
    pub cells_x: usize,
    pub cells_y: usize,
    pub cell_size: f64,
    /// Ego-frame (x, y) of the center of cell (0, 0).
    pub origin: [f64; 2],
    pub ground_height: f64,
}

impl BevGrid {
    pub fn new(cells_x: usize, cells_y: usize, cell_size: f64, origin: [f64; 2]) -> Result<Self> {
        if cells_x == 0 || cells_y == 0 {
            return Err(Error::InvalidGrid("cell counts must be positive".into()));
        }
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::InvalidGrid(format!("cell size {cell_size} must be positive")));
        }
        if !(origin[0].is_finite() && origin[1].is_finite()) {
            return Err(Error::InvalidGrid("origin must be finite".into()));
        }
        Ok(Self { cells_x, cells_y, cell_size, origin, ground_height: 0.0 })
    }

    /// Grid centered on the ego origin.
    pub fn centered(cells_x: usize, cells_y: usize, cell_size: f64) -> Result<Self> {
        let ox = -0.5 * (cells_x as f64 - 1.0) * cell_size;
        let oy = -0.5 * (cells_y as f64 - 1.0) * cell_size;
        Self::new(cells_x, cells_y, cell_size, [ox, oy])
    }

    pub fn with_ground_height(mut self, h: f64) -> Self {
        self.ground_height = h;
        self
    }

    pub fn num_cells(&self) -> usize {
        self.cells_x * self.cells_y
    }

    pub fn extent(&self) -> (f64, f64) {
        (self.cells_x as f64 * self.cell_size, self.cells_y as f64 * self.cell_size)
    }

    pub fn cell_center(&self, i: usize, j: usize) -> [f64; 2] {
        [self.origin[0] + i as f64 * self.cell_size, self.origin[1] + j as f64 * self.cell_size]
    }

    /// Query index of cell `(i, j)`: row-major with `j` as the row.
    pub fn query_index(&self, i: usize, j: usize) -> usize {
        j * self.cells_x + i
    }

    pub fn cell_of_query(&self, q: usize) -> (usize, usize) {
        (q % self.cells_x, q / self.cells_x)
    }

    /// Ego-frame bounds `[x_min, x_max, y_min, y_max]` of the covered area.
    pub fn bounds(&self) -> [f64; 4] {
        let h = 0.5 * self.cell_size;
        let (ex, ey) = self.extent();
        [self.origin[0] - h, self.origin[0] - h + ex, self.origin[1] - h, self.origin[1] - h + ey]
    }
}

/// Homogeneous image line `a·u + b·v + c = 0`, normalized so `a² + b² = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarLine {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub degenerate: bool,
}

impl EpipolarLine {
    pub const DEGENERATE: Self = Self { a: 0.0, b: 0.0, c: 0.0, degenerate: true };

    /// Scales `l` so that its normal has unit length. The sign is fixed so
    /// that `a > 0`, or `b > 0` when `a == 0`.
    pub fn normalized(l: Vec3) -> Self {
        let n = math::sqrt(l[0] * l[0] + l[1] * l[1]);
        if !(n > 0.0) || !n.is_finite() {
            return Self::DEGENERATE;
        }
        let s = if l[0] < 0.0 || (l[0] == 0.0 && l[1] < 0.0) { -1.0 / n } else { 1.0 / n };
        Self { a: l[0] * s, b: l[1] * s, c: l[2] * s, degenerate: false }
    }

    pub fn coefficients(&self) -> Vec3 {
        [self.a, self.b, self.c]
    }
}

/// Image of the vertical ray through ground point `xy`, built by joining the
/// projections of the ray points at heights `z1` and `z2`.
pub fn vertical_ray_line(view: &CameraView, xy: [f64; 2], z1: f64, z2: f64) -> EpipolarLine {
    let p1 = [xy[0], xy[1], z1];
    let p2 = [xy[0], xy[1], z2];
    let h1 = view.project_homogeneous(&p1);
    let h2 = view.project_homogeneous(&p2);
    if h1[2] <= 0.0 && h2[2] <= 0.0 {
        return EpipolarLine::DEGENERATE;
    }
    if h1[2] > 1e-9 && h2[2] > 1e-9 {
        let du = h1[0] / h1[2] - h2[0] / h2[2];
        let dv = h1[1] / h1[2] - h2[1] / h2[2];
        if du.abs() < 1e-9 && dv.abs() < 1e-9 {
            return EpipolarLine::DEGENERATE;
        }
    }
    let l = math::cross(&h1, &h2);
    if math::sqrt(l[0] * l[0] + l[1] * l[1]) <= 1e-12 * math::norm(&h1) * math::norm(&h2) {
        return EpipolarLine::DEGENERATE;
    }
    EpipolarLine::normalized(l)
}

/// Epipolar line of BEV cell `(i, j)` in `view`.
pub fn epipolar_line(view: &CameraView, grid: &BevGrid, cell: (usize, usize)) -> EpipolarLine {
    let xy = grid.cell_center(cell.0, cell.1);
    vertical_ray_line(view, xy, grid.ground_height, grid.ground_height + 1.0)
}

/// Signed distance `x·l̂ᵀ` of homogeneous pixel `x` (with `x[2] == 1`).
pub fn point_line_distance(x: &Vec3, line: &EpipolarLine) -> Result<f64> {
    if line.degenerate {
        return Err(Error::DegenerateLine);
    }
    Ok(math::dot(x, &line.coefficients()))
}

/// Whether the ground point of cell `(i, j)` lies in front of the camera.
pub fn cheirality(view: &CameraView, grid: &BevGrid, cell: (usize, usize)) -> bool {
    let xy = grid.cell_center(cell.0, cell.1);
    view.to_camera(&[xy[0], xy[1], grid.ground_height])[2] > 0.0
}

/// Horizontal distance from the camera origin to the center of cell `(i, j)`.
pub fn ground_distance(view: &CameraView, grid: &BevGrid, cell: (usize, usize)) -> f64 {
    let xy = grid.cell_center(cell.0, cell.1);
    let c = view.center();
    let (dx, dy) = (xy[0] - c[0], xy[1] - c[1]);
    math::sqrt(dx * dx + dy * dy)
}

/// Camera at ego (0, 0, 1.5) facing +x, fx = fy = 100, principal point
/// (120, 60), 240×120 image. Used throughout the tests and fixtures.
pub fn canonical_view() -> CameraView {
    let k = Intrinsics { fx: 100.0, fy: 100.0, cx: 120.0, cy: 60.0 };
    CameraView::looking_along(k, [0.0, 0.0, 1.5], 0.0, (240, 120), 1).expect("canonical camera is valid")
}
