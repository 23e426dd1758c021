//! JSON camera rigs.
//!
//! ```json
//! { "cameras": [ {
//!     "name": "front",
//!     "intrinsics": { "fx": 100, "fy": 100, "cx": 120, "cy": 60 },
//!     "image_size": { "w": 240, "h": 120 },
//!     "rotation": { "w": 1, "x": 0, "y": 0, "z": 0 },
//!     "translation": [0, 0, 1.5],
//!     "axes": "flu"
//! } ] }
//! ```
//!
//! `rotation` and `translation` give the camera pose in the ego frame
//! (x forward, y left, z up). With `"axes": "optical"` the quaternion rotates
//! the optical frame (x right, y down, z forward) into the ego frame; with
//! `"axes": "flu"` it rotates a camera body frame with x forward, y left,
//! z up, so the identity looks along ego +x.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use eaf_core::geometry::{CameraView, Intrinsics, OPTICAL_IN_EGO};
use eaf_core::math;

use crate::specs::PerturbSpec;
use crate::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axes {
    Optical,
    Flu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntrinsicsRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SizeRecord {
    w: usize,
    h: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuatRecord {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    name: String,
    intrinsics: IntrinsicsRecord,
    image_size: SizeRecord,
    rotation: QuatRecord,
    translation: [f64; 3],
    axes: Axes,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigDocument<T> {
    cameras: Vec<T>,
}

pub const QUATERNION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedView {
    pub name: String,
    pub view: CameraView,
}

/// Cameras sorted by name; view ids are positions in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct Rig {
    pub cameras: Vec<NamedView>,
}

fn to_view(rec: &CameraRecord, index: usize) -> Result<NamedView> {
    let name = &rec.name;
    let q = &rec.rotation;
    let n = (q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
    if !((n - 1.0).abs() <= QUATERNION_TOLERANCE) {
        return Err(CliError::Rig(format!(
            "camera '{name}' (cameras[{index}]): rotation quaternion has norm {n}, expected 1 within {QUATERNION_TOLERANCE}"
        )));
    }
    let body = math::quat_to_mat([q.w / n, q.x / n, q.y / n, q.z / n]);
    let cam_to_ego = match rec.axes {
        Axes::Optical => body,
        Axes::Flu => math::mat_mul(&body, &OPTICAL_IN_EGO),
    };
    let k = &rec.intrinsics;
    let intrinsics = Intrinsics { fx: k.fx, fy: k.fy, cx: k.cx, cy: k.cy };
    let size = (rec.image_size.w, rec.image_size.h);
    let view = CameraView::from_pose_in_ego(intrinsics, &cam_to_ego, rec.translation, size, index)
        .map_err(|e| CliError::Rig(format!("camera '{name}' (cameras[{index}]): {e}")))?;
    Ok(NamedView { name: name.clone(), view })
}

impl Rig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let doc: RigDocument<serde_json::Value> =
            serde_json::from_str(text).map_err(|e| CliError::Rig(format!("invalid rig document: {e}")))?;
        if doc.cameras.is_empty() {
            return Err(CliError::Rig("rig has no cameras".into()));
        }
        let mut records = Vec::with_capacity(doc.cameras.len());
        for (i, value) in doc.cameras.into_iter().enumerate() {
            let rec: CameraRecord =
                serde_json::from_value(value).map_err(|e| CliError::Rig(format!("cameras[{i}]: {e}")))?;
            records.push((i, rec));
        }
        records.sort_by(|a, b| a.1.name.cmp(&b.1.name));
        if let Some(w) = records.windows(2).find(|w| w[0].1.name == w[1].1.name) {
            return Err(CliError::Rig(format!("duplicate camera name '{}'", w[0].1.name)));
        }
        let mut cameras = Vec::with_capacity(records.len());
        for (sorted, (declared, rec)) in records.iter().enumerate() {
            let mut cam = to_view(rec, *declared)?;
            cam.view = cam.view.with_view_id(sorted);
            cameras.push(cam);
        }
        Ok(Rig { cameras })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse_str(&text).map_err(|e| match e {
            CliError::Rig(m) => CliError::Rig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Named rig from plain views (names `cam0`, `cam1`, ...).
    pub fn from_views(views: &[CameraView]) -> Self {
        let cameras = views
            .iter()
            .enumerate()
            .map(|(i, v)| NamedView { name: format!("cam{i}"), view: v.clone().with_view_id(i) })
            .collect();
        Rig { cameras }
    }

    pub fn views(&self) -> Vec<CameraView> {
        self.cameras.iter().map(|c| c.view.clone()).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.cameras.iter().map(|c| c.name.as_str()).collect()
    }

    /// Serializes with optical axes and `w ≥ 0` quaternions.
    pub fn to_json(&self) -> String {
        let cameras: Vec<CameraRecord> = self
            .cameras
            .iter()
            .map(|c| {
                let k = c.view.intrinsics();
                let q = math::mat_to_quat(&c.view.cam_to_ego());
                let (w, h) = c.view.image_size();
                CameraRecord {
                    name: c.name.clone(),
                    intrinsics: IntrinsicsRecord { fx: k.fx, fy: k.fy, cx: k.cx, cy: k.cy },
                    image_size: SizeRecord { w, h },
                    rotation: QuatRecord { w: q[0], x: q[1], y: q[2], z: q[3] },
                    translation: c.view.center(),
                    axes: Axes::Optical,
                }
            })
            .collect();
        let mut s = serde_json::to_string_pretty(&RigDocument { cameras }).expect("rig serializes");
        s.push('\n');
        s
    }

    /// Applies a [`PerturbSpec`]: alternating yaw per camera and a seeded
    /// horizontal shift of length at most `shift`.
    pub fn perturbed(&self, spec: &PerturbSpec) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut cameras = Vec::with_capacity(self.cameras.len());
        for (k, cam) in self.cameras.iter().enumerate() {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            let yaw = sign * spec.yaw_deg.to_radians();
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let radius = if spec.shift > 0.0 { rng.gen_range(0.0..=spec.shift) } else { 0.0 };
            let shift = [radius * angle.cos(), radius * angle.sin(), 0.0];
            cameras.push(NamedView { name: cam.name.clone(), view: cam.view.perturbed(yaw, shift)? });
        }
        Ok(Rig { cameras })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use eaf_core::geometry::canonical_view;

    fn camera(name: &str, q: [f64; 4], t: [f64; 3], axes: &str) -> String {
        format!(
            r#"{{"name": "{name}", "intrinsics": {{"fx": 100, "fy": 100, "cx": 120, "cy": 60}},
                "image_size": {{"w": 240, "h": 120}},
                "rotation": {{"w": {}, "x": {}, "y": {}, "z": {}}},
                "translation": [{}, {}, {}], "axes": "{axes}"}}"#,
            q[0], q[1], q[2], q[3], t[0], t[1], t[2]
        )
    }

    fn doc(cams: &[String]) -> String {
        format!(r#"{{"cameras": [{}]}}"#, cams.join(","))
    }

    #[test]
    fn identity_flu_camera_is_canonical() {
        let rig = Rig::parse_str(&doc(&[camera("front", [1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.5], "flu")])).unwrap();
        let v = &rig.cameras[0].view;
        let c = canonical_view();
        for p in [[10.0, 0.0, 1.5], [5.0, 2.0, 0.0], [20.0, -3.0, 1.0]] {
            let a = v.project(&p).unwrap();
            let b = c.project(&p).unwrap();
            assert!((a.pixel[0] - b.pixel[0]).abs() < 1e-9 && (a.pixel[1] - b.pixel[1]).abs() < 1e-9);
        }
        let p = v.project(&[10.0, 0.0, 1.5]).unwrap();
        assert!((p.pixel[0] - 120.0).abs() < 1e-9 && (p.pixel[1] - 60.0).abs() < 1e-9);
    }

    #[test]
    fn zero_translation_identity_flu_looks_forward() {
        let rig = Rig::parse_str(&doc(&[camera("a", [1.0, 0.0, 0.0, 0.0], [0.0; 3], "flu")])).unwrap();
        let p = rig.cameras[0].view.project(&[7.0, 0.0, 0.0]).unwrap();
        assert!((p.pixel[0] - 120.0).abs() < 1e-12 && (p.pixel[1] - 60.0).abs() < 1e-12);
        assert!((p.depth - 7.0).abs() < 1e-12);
    }

    #[test]
    fn optical_and_flu_tags_agree() {
        let flu = Rig::parse_str(&doc(&[camera("a", [1.0, 0.0, 0.0, 0.0], [1.0, 2.0, 1.5], "flu")])).unwrap();
        let q = math::mat_to_quat(&OPTICAL_IN_EGO);
        let opt = Rig::parse_str(&doc(&[camera("a", q, [1.0, 2.0, 1.5], "optical")])).unwrap();
        let (a, b) = (flu.cameras[0].view.rotation(), opt.cameras[0].view.rotation());
        for r in 0..3 {
            for c in 0..3 {
                assert!((a[r][c] - b[r][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_unit_quaternion_names_the_camera() {
        let err = Rig::parse_str(&doc(&[camera("left_rear", [0.9, 0.0, 0.0, 0.0], [0.0; 3], "flu")])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("left_rear") && msg.contains("norm"), "{msg}");
    }

    #[test]
    fn schema_errors_name_field_and_index() {
        let good = camera("a", [1.0, 0.0, 0.0, 0.0], [0.0; 3], "flu");
        let broken = good.replace("\"fy\": 100, ", "");
        let msg = Rig::parse_str(&doc(&[good.clone(), broken])).unwrap_err().to_string();
        assert!(msg.contains("cameras[1]") && msg.contains("fy"), "{msg}");
        let extra = good.replace("\"axes\"", "\"skew\": 0, \"axes\"");
        assert!(Rig::parse_str(&doc(&[extra])).unwrap_err().to_string().contains("skew"));
        let neg = good.replace("\"fx\": 100", "\"fx\": -1");
        assert!(Rig::parse_str(&doc(&[neg])).unwrap_err().to_string().contains("focal"));
        let dup = doc(&[good.clone(), good]);
        assert!(Rig::parse_str(&dup).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn cameras_sort_by_name() {
        let q = [1.0, 0.0, 0.0, 0.0];
        let rig = Rig::parse_str(&doc(&[
            camera("c", q, [0.0; 3], "flu"),
            camera("a", q, [0.0; 3], "flu"),
            camera("b", q, [0.0; 3], "flu"),
        ]))
        .unwrap();
        assert_eq!(rig.names(), vec!["a", "b", "c"]);
        assert_eq!(rig.cameras.iter().map(|c| c.view.view_id()).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn perturbation_respects_bounds() {
        let q = [1.0, 0.0, 0.0, 0.0];
        let rig = Rig::parse_str(&doc(&[camera("a", q, [0.0, 1.0, 1.5], "flu"), camera("b", q, [0.0, -1.0, 1.5], "flu")]))
            .unwrap();
        let spec = PerturbSpec { yaw_deg: 10.0, shift: 0.5, seed: 4 };
        let p = rig.perturbed(&spec).unwrap();
        assert_eq!(p, rig.perturbed(&spec).unwrap());
        for (k, (a, b)) in rig.cameras.iter().zip(&p.cameras).enumerate() {
            let (ca, cb) = (a.view.center(), b.view.center());
            let d = ((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2)).sqrt();
            assert!(d <= 0.5 + 1e-12 && (ca[2] - cb[2]).abs() < 1e-12);
            let fa = a.view.cam_to_ego()[1][2];
            let fb = b.view.cam_to_ego()[1][2];
            let yaw = fb.atan2(b.view.cam_to_ego()[0][2]) - fa.atan2(a.view.cam_to_ego()[0][2]);
            let expect = if k % 2 == 0 { 10f64.to_radians() } else { -10f64.to_radians() };
            assert!((yaw - expect).abs() < 1e-12);
        }
    }
}
