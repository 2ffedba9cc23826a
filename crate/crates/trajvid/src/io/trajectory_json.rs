//! Wire format for click trajectories:
//! `{"frames": T, "tracks": [[{"x": .., "y": ..}, ...], ...]}` in input-frame pixels.

use serde::{Deserialize, Serialize};
use trajvid_core::trajectory::{Point, TrajectoryError, TrajectorySet};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XY {
    pub x: f32,
    pub y: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryJson {
    pub frames: usize,
    pub tracks: Vec<Vec<XY>>,
}

/// A validation failure attached to a JSON path such as `tracks[1][0].x`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl TrajectoryJson {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::TrajectorySchema(e.to_string()))
    }

    pub fn from_set(set: &TrajectorySet) -> Self {
        Self {
            frames: set.num_frames(),
            tracks: set
                .tracks()
                .iter()
                .map(|t| t.iter().map(|p| XY { x: p.x, y: p.y }).collect())
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trajectory json is always serializable")
    }

    fn points(&self) -> Vec<Vec<Point>> {
        self.tracks
            .iter()
            .map(|t| t.iter().map(|p| Point::new(p.x, p.y)).collect())
            .collect()
    }

    /// Every problem with this payload for a `width x height` image.
    pub fn field_errors(&self, width: usize, height: usize) -> Vec<FieldError> {
        let mut out = Vec::new();
        if self.tracks.is_empty() {
            out.push(FieldError {
                field: "tracks".into(),
                message: "at least one track is required".into(),
            });
        }
        for e in TrajectorySet::check(width, height, self.frames, &self.points()) {
            let field = match &e {
                TrajectoryError::TooFewFrames(_) => "frames".to_string(),
                TrajectoryError::EmptyTrack { track } => format!("tracks[{track}]"),
                TrajectoryError::OutOfBounds { track, point, x, y, max_x, max_y } => {
                    let axis = if *x < 0.0 || x > max_x {
                        "x"
                    } else if *y < 0.0 || y > max_y {
                        "y"
                    } else {
                        "x"
                    };
                    format!("tracks[{track}][{point}].{axis}")
                }
                TrajectoryError::NonFinite { track, point } => format!("tracks[{track}][{point}]"),
                TrajectoryError::EmptyImage { .. } => "image".to_string(),
            };
            out.push(FieldError {
                field,
                message: e.to_string(),
            });
        }
        out
    }

    pub fn to_set(&self, width: usize, height: usize) -> std::result::Result<TrajectorySet, Vec<FieldError>> {
        let errors = self.field_errors(width, height);
        if !errors.is_empty() {
            return Err(errors);
        }
        TrajectorySet::new(width, height, self.frames, self.points()).map_err(|e| {
            vec![FieldError {
                field: "tracks".into(),
                message: e.to_string(),
            }]
        })
    }
}
