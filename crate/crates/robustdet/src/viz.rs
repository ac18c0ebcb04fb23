//! Static renderings: amplified perturbations, detection overlays, and
//! model-comparison strips.

use serde::{Deserialize, Serialize};

use crate::data::ImageTensor;
use crate::geom::Detection;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VizMode {
    /// Render the perturbation alone, amplified to full range.
    Perturbation,
    /// Draw predicted boxes over the image.
    Overlay,
    /// Clean and attacked overlays for two models, side by side.
    SideBySide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VizSpec {
    pub mode: VizMode,
    /// Perturbation range mapped onto [0,1]: pixel = delta/(2*range) + 0.5.
    /// Defaults to the attack budget so the full ball spans the full range.
    pub amplification_range: f64,
    pub score_thr: f64,
}

impl Default for VizSpec {
    fn default() -> Self {
        VizSpec {
            mode: VizMode::Overlay,
            amplification_range: 8.0 / 255.0,
            score_thr: 0.3,
        }
    }
}

impl VizSpec {
    pub fn validate(&self) -> Result<()> {
        if self.amplification_range <= 0.0 {
            return Err(Error::Config(
                "amplification_range must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Maps a perturbation to mid-gray plus amplified signal: zero delta renders
/// as uniform 0.5.
pub fn render_perturbation(delta: &ImageTensor, range: f64) -> ImageTensor {
    let range = range.max(f64::MIN_POSITIVE);
    delta.mapv(|d| (d / (2.0 * range) + 0.5).clamp(0.0, 1.0))
}

/// Distinguishable class colors (circle red, square green, triangle blue,
/// extras cycle).
pub fn class_color(class_id: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 6] = [
        [1.0, 0.15, 0.15],
        [0.15, 1.0, 0.15],
        [0.2, 0.4, 1.0],
        [1.0, 1.0, 0.2],
        [1.0, 0.3, 1.0],
        [0.3, 1.0, 1.0],
    ];
    PALETTE[class_id % PALETTE.len()]
}

/// Draws detection boxes over a copy of the image. The one-pixel rim covers
/// exactly the pixels `[round(x0), round(x1))` x `[round(y0), round(y1))` of
/// each box, and a score tag of proportional height sits in the top-left
/// corner.
pub fn render_overlay(image: &ImageTensor, detections: &[Detection]) -> ImageTensor {
    let mut out = image.clone();
    let (_, h, w) = out.dim();
    for det in detections {
        let color = class_color(det.class_id);
        let x0 = (det.bbox.x_min.round().max(0.0) as usize).min(w.saturating_sub(1));
        let y0 = (det.bbox.y_min.round().max(0.0) as usize).min(h.saturating_sub(1));
        let x1 = (det.bbox.x_max.round().max(1.0) as usize).clamp(x0 + 1, w);
        let y1 = (det.bbox.y_max.round().max(1.0) as usize).clamp(y0 + 1, h);
        for x in x0..x1 {
            for c in 0..3 {
                out[[c, y0, x]] = color[c];
                out[[c, y1 - 1, x]] = color[c];
            }
        }
        for y in y0..y1 {
            for c in 0..3 {
                out[[c, y, x0]] = color[c];
                out[[c, y, x1 - 1]] = color[c];
            }
        }
        // Score tag: a filled bar whose height scales with the score.
        let tag = ((det.score * 6.0).ceil() as usize).clamp(1, 6);
        for dy in 0..tag.min(y1 - y0) {
            for dx in 0..3.min(x1 - x0) {
                for c in 0..3 {
                    out[[c, y0 + dy, x0 + dx]] = color[c];
                }
            }
        }
    }
    out
}

/// Horizontal strip of panels separated by white gutters.
pub fn render_strip(panels: &[ImageTensor]) -> Result<ImageTensor> {
    if panels.is_empty() {
        return Err(Error::Config("empty panel list".into()));
    }
    let (c, h, w) = panels[0].dim();
    for (i, p) in panels.iter().enumerate() {
        if p.dim() != (c, h, w) {
            return Err(Error::ShapeMismatch {
                context: format!("strip panel {i}"),
                expected: format!("{:?}", (c, h, w)),
                got: format!("{:?}", p.dim()),
            });
        }
    }
    let gutter = 2usize;
    let total_w = panels.len() * w + (panels.len() - 1) * gutter;
    let mut out = ImageTensor::from_elem((c, h, total_w), 1.0);
    for (i, p) in panels.iter().enumerate() {
        let x_off = i * (w + gutter);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[[ch, y, x_off + x]] = p[[ch, y, x]];
                }
            }
        }
    }
    Ok(out)
}

/// Detections above the threshold, the quantity compared across models on
/// attacked inputs.
pub fn count_confident(detections: &[Detection], score_thr: f64) -> usize {
    detections.iter().filter(|d| d.score >= score_thr).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::BBox;

    #[test]
    fn zero_delta_renders_mid_gray() {
        let delta = ImageTensor::zeros((3, 8, 8));
        let img = render_perturbation(&delta, 8.0 / 255.0);
        assert!(img.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn full_budget_delta_saturates() {
        let eps = 8.0 / 255.0;
        let delta = ImageTensor::from_elem((3, 4, 4), eps);
        let img = render_perturbation(&delta, eps);
        assert!(img.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let img = render_perturbation(&delta.mapv(|d| -d), eps);
        assert!(img.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn overlay_rim_coincides_with_box_pixels() {
        let image = ImageTensor::zeros((3, 128, 128));
        let det = Detection {
            bbox: BBox::new(44.0, 44.0, 84.0, 84.0).unwrap(),
            class_id: 0,
            score: 1.0,
        };
        let out = render_overlay(&image, &[det]);
        let color = class_color(0);
        // Corners and edges of the rim.
        for &(y, x) in &[(44usize, 44usize), (44, 83), (83, 44), (83, 83), (44, 60), (60, 83)] {
            for c in 0..3 {
                assert_eq!(out[[c, y, x]], color[c], "rim missing at ({y},{x})");
            }
        }
        // Just outside and inside stay untouched.
        for &(y, x) in &[(43usize, 43usize), (84, 84), (60, 60)] {
            for c in 0..3 {
                assert_eq!(out[[c, y, x]], 0.0, "pixel ({y},{x}) should be clean");
            }
        }
    }

    #[test]
    fn strip_concatenates_with_gutters() {
        let a = ImageTensor::zeros((3, 4, 4));
        let b = ImageTensor::from_elem((3, 4, 4), 0.25);
        let strip = render_strip(&[a, b]).unwrap();
        assert_eq!(strip.dim(), (3, 4, 10));
        assert_eq!(strip[[0, 0, 0]], 0.0);
        assert_eq!(strip[[0, 0, 4]], 1.0); // gutter
        assert_eq!(strip[[0, 0, 6]], 0.25);
        // Mismatched panels rejected.
        let c = ImageTensor::zeros((3, 5, 4));
        assert!(render_strip(&[ImageTensor::zeros((3, 4, 4)), c]).is_err());
    }

    #[test]
    fn confident_count_thresholds() {
        let mk = |score: f64| Detection {
            bbox: BBox::new(0.0, 0.0, 4.0, 4.0).unwrap(),
            class_id: 0,
            score,
        };
        let dets = [mk(0.9), mk(0.3), mk(0.29)];
        assert_eq!(count_confident(&dets, 0.3), 2);
    }
}
