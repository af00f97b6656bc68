//! User scribbles and ground-truth annotations.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::ValidationIssue;

/// One scribble: a labelled set of pixel coordinates `(row, col)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Marker {
    pub marker_id: u32,
    pub pixels: Vec<(u32, u32)>,
}

/// All scribbles drawn on one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerSet {
    pub image_id: String,
    pub markers: Vec<Marker>,
}

/// Identifies a marker across the training set.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MarkerRef {
    pub image_id: String,
    pub marker_id: u32,
}

impl MarkerSet {
    pub fn new(image_id: impl Into<String>) -> Self {
        MarkerSet {
            image_id: image_id.into(),
            markers: Vec::new(),
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.markers.iter().map(|m| m.pixels.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.pixel_count() == 0
    }

    /// Checks bounds, id uniqueness, non-emptiness and pixel distinctness.
    pub fn validate(&self, height: u32, width: u32) -> Vec<ValidationIssue> {
        let mut issues = Vec::new();
        let mut ids = HashSet::new();
        for m in &self.markers {
            if !ids.insert(m.marker_id) {
                issues.push(ValidationIssue::DuplicateMarkerId {
                    image_id: self.image_id.clone(),
                    marker_id: m.marker_id,
                });
            }
            if m.pixels.is_empty() {
                issues.push(ValidationIssue::EmptyMarker {
                    image_id: self.image_id.clone(),
                    marker_id: m.marker_id,
                });
            }
            let mut seen = HashSet::new();
            for &(row, col) in &m.pixels {
                if row >= height || col >= width {
                    issues.push(ValidationIssue::PixelOutOfBounds {
                        image_id: self.image_id.clone(),
                        marker_id: m.marker_id,
                        row,
                        col,
                        height,
                        width,
                    });
                } else if !seen.insert((row, col)) {
                    issues.push(ValidationIssue::DuplicatePixel {
                        image_id: self.image_id.clone(),
                        marker_id: m.marker_id,
                        row,
                        col,
                    });
                }
            }
        }
        issues
    }

    /// Canonical form: markers ordered by id, pixels in raster order.
    pub fn canonicalize(&mut self) {
        self.markers.sort_by_key(|m| m.marker_id);
        for m in &mut self.markers {
            m.pixels.sort_unstable();
        }
    }
}

/// Axis-aligned box over the half-open pixel range `[x1, x2) x [y1, y2)`.
/// `x` runs along columns, `y` along rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
    #[serde(default)]
    pub score: f64,
}

impl BoundingBox {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Self {
        BoundingBox {
            x1,
            y1,
            x2,
            y2,
            score: 0.0,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn width(&self) -> u32 {
        self.x2.saturating_sub(self.x1)
    }

    pub fn height(&self) -> u32 {
        self.y2.saturating_sub(self.y1)
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn is_valid(&self) -> bool {
        self.x2 > self.x1 && self.y2 > self.y1
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }
}

/// Ground-truth boxes for one image. Serialized boxes carry no score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    #[serde(with = "gt_boxes")]
    pub boxes: Vec<BoundingBox>,
}

impl GroundTruth {
    pub fn validate(&self, height: u32, width: u32) -> Vec<ValidationIssue> {
        self.boxes
            .iter()
            .enumerate()
            .filter_map(|(index, b)| {
                let message = if !b.is_valid() {
                    "requires x2 > x1 and y2 > y1"
                } else if b.x2 > width || b.y2 > height {
                    "extends beyond the image"
                } else {
                    return None;
                };
                Some(ValidationIssue::InvalidBox {
                    image_id: self.image_id.clone(),
                    index,
                    message: message.into(),
                })
            })
            .collect()
    }
}

mod gt_boxes {
    use super::BoundingBox;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Coords {
        x1: u32,
        y1: u32,
        x2: u32,
        y2: u32,
    }

    pub fn serialize<S: Serializer>(boxes: &[BoundingBox], s: S) -> Result<S::Ok, S::Error> {
        boxes
            .iter()
            .map(|b| Coords {
                x1: b.x1,
                y1: b.y1,
                x2: b.x2,
                y2: b.y2,
            })
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<BoundingBox>, D::Error> {
        Ok(Vec::<Coords>::deserialize(d)?
            .into_iter()
            .map(|c| BoundingBox::new(c.x1, c.y1, c.x2, c.y2))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_of_bounds_pixel_names_image_and_marker() {
        let set = MarkerSet {
            image_id: "img".into(),
            markers: vec![Marker {
                marker_id: 7,
                pixels: vec![(999, 0)],
            }],
        };
        let issues = set.validate(100, 100);
        assert_eq!(issues.len(), 1);
        let msg = issues[0].to_string();
        assert!(msg.contains("img") && msg.contains("marker 7"), "{msg}");
    }

    #[test]
    fn duplicate_ids_and_pixels_and_empty_markers() {
        let set = MarkerSet {
            image_id: "a".into(),
            markers: vec![
                Marker {
                    marker_id: 1,
                    pixels: vec![(0, 0), (0, 0)],
                },
                Marker {
                    marker_id: 1,
                    pixels: vec![],
                },
            ],
        };
        let issues = set.validate(4, 4);
        assert!(issues.contains(&ValidationIssue::DuplicateMarkerId {
            image_id: "a".into(),
            marker_id: 1
        }));
        assert!(issues.contains(&ValidationIssue::EmptyMarker {
            image_id: "a".into(),
            marker_id: 1
        }));
        assert!(issues.contains(&ValidationIssue::DuplicatePixel {
            image_id: "a".into(),
            marker_id: 1,
            row: 0,
            col: 0
        }));
    }

    #[test]
    fn gt_json_has_no_score() {
        let gt = GroundTruth {
            image_id: "x".into(),
            boxes: vec![BoundingBox::new(1, 2, 3, 4)],
        };
        let s = serde_json::to_string(&gt).unwrap();
        assert_eq!(s, r#"{"image_id":"x","boxes":[{"x1":1,"y1":2,"x2":3,"y2":4}]}"#);
        let back: GroundTruth = serde_json::from_str(&s).unwrap();
        assert_eq!(back, gt);
    }

    #[test]
    fn gt_box_validation() {
        let gt = GroundTruth {
            image_id: "x".into(),
            boxes: vec![BoundingBox::new(3, 0, 3, 4), BoundingBox::new(0, 0, 11, 4)],
        };
        assert_eq!(gt.validate(10, 10).len(), 2);
    }
}
