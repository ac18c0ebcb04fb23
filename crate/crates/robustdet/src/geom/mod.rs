//! Detection geometry: boxes, IoU, NMS, anchor machinery, and mAP.
//!
//! Everything in this module is a pure function over plain data and is safe
//! to call from multiple threads.

mod anchors;
mod ap;
mod nms;

pub use anchors::{
    build_anchors, decode_deltas, encode_deltas, match_anchors, AnchorConfig, AnchorGrid,
    Assignment, MatchResult,
};
pub use ap::{average_precision, map_range, mean_ap, MAP_RANGE_THRESHOLDS};
pub use nms::nms;

use crate::{Error, Result};

/// Axis-aligned box in pixel coordinates, `x_min < x_max`, `y_min < y_max`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::Geometry(format!("non-finite box {self:?}")));
        }
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::Geometry(format!("empty or inverted box {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Intersects the box with `[0,w] x [0,h]`. `None` when nothing is left.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let b = BBox {
            x_min: self.x_min.max(0.0),
            y_min: self.y_min.max(0.0),
            x_max: self.x_max.min(width),
            y_max: self.y_max.min(height),
        };
        (b.x_min < b.x_max && b.y_min < b.y_max).then_some(b)
    }
}

/// A scored, classified box produced by a detector.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: usize, score: f64) -> Result<Self> {
        bbox.validate()?;
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Geometry(format!("score {score} outside [0,1]")));
        }
        Ok(Detection {
            bbox,
            class_id,
            score,
        })
    }
}

/// An annotated object.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

impl GroundTruth {
    pub fn new(bbox: BBox, class_id: usize) -> Result<Self> {
        bbox.validate()?;
        Ok(GroundTruth { bbox, class_id })
    }
}

/// Intersection over union of two boxes. Symmetric, in `[0,1]`, and 0 for
/// disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter / union
}
