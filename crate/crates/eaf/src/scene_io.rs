//! Scene JSON: boxes, drivable polygon, a reference to the rig and the seed.

use serde::{Deserialize, Serialize};

use eaf_core::geometry::CameraView;
use eaf_core::synth::{Class, SceneBox, SyntheticScene};

use crate::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRecord {
    pub center: [f64; 2],
    pub size: [f64; 2],
    pub height: f64,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub seed: u64,
    /// Rig file path, or `toy` for the built-in two-camera rig.
    pub rig: String,
    pub boxes: Vec<BoxRecord>,
    pub drivable: Vec<[f64; 2]>,
}

impl SceneFile {
    pub fn from_scene(scene: &SyntheticScene, rig: &str) -> Self {
        let boxes = scene
            .boxes
            .iter()
            .map(|b| BoxRecord {
                center: b.center,
                size: b.size,
                height: b.height,
                class: match b.class {
                    Class::Vehicle => "vehicle".into(),
                },
            })
            .collect();
        SceneFile { seed: scene.seed, rig: rig.into(), boxes, drivable: scene.drivable.clone() }
    }

    pub fn to_scene(&self, views: &[CameraView]) -> Result<SyntheticScene> {
        let mut boxes = Vec::with_capacity(self.boxes.len());
        for (i, b) in self.boxes.iter().enumerate() {
            if b.class != "vehicle" {
                return Err(CliError::Config(format!("boxes[{i}]: unknown class '{}'", b.class)));
            }
            if b.size.iter().chain([&b.height]).any(|v| !(*v >= 0.0)) {
                return Err(CliError::Config(format!("boxes[{i}]: sizes must be non-negative")));
            }
            boxes.push(SceneBox { center: b.center, size: b.size, height: b.height, class: Class::Vehicle });
        }
        Ok(SyntheticScene { boxes, drivable: self.drivable.clone(), rig: views.to_vec(), seed: self.seed })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scene serializes");
        s.push('\n');
        s
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid scene: {e}")))
    }
}
