//! Shape rasterization and background synthesis.

use rand::Rng;

use super::ImageTensor;
use crate::geom::BBox;

/// Geometric description of one placeable object. Coordinates are
/// continuous pixels; a pixel `(x, y)` is covered when its center
/// `(x + 0.5, y + 0.5)` lies inside the shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeSpec {
    Circle { cx: f64, cy: f64, radius: f64 },
    Square { cx: f64, cy: f64, side: f64 },
    /// Isoceles triangle pointing up.
    Triangle { cx: f64, cy: f64, width: f64, height: f64 },
}

impl ShapeSpec {
    pub fn class_id(&self) -> usize {
        match self {
            ShapeSpec::Circle { .. } => 0,
            ShapeSpec::Square { .. } => 1,
            ShapeSpec::Triangle { .. } => 2,
        }
    }

    /// Geometric bounding box (before rasterization).
    pub fn bounds(&self) -> BBox {
        let (cx, cy, ex, ey) = match *self {
            ShapeSpec::Circle { cx, cy, radius } => (cx, cy, radius, radius),
            ShapeSpec::Square { cx, cy, side } => (cx, cy, side / 2.0, side / 2.0),
            ShapeSpec::Triangle {
                cx,
                cy,
                width,
                height,
            } => (cx, cy, width / 2.0, height / 2.0),
        };
        BBox {
            x_min: cx - ex,
            y_min: cy - ey,
            x_max: cx + ex,
            y_max: cy + ey,
        }
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            ShapeSpec::Circle { cx, cy, radius } => {
                (px - cx).powi(2) + (py - cy).powi(2) <= radius * radius
            }
            ShapeSpec::Square { cx, cy, side } => {
                (px - cx).abs() <= side / 2.0 && (py - cy).abs() <= side / 2.0
            }
            ShapeSpec::Triangle {
                cx,
                cy,
                width,
                height,
            } => {
                let top = cy - height / 2.0;
                if py < top || py > cy + height / 2.0 {
                    return false;
                }
                let half_width_here = (width / 2.0) * (py - top) / height;
                (px - cx).abs() <= half_width_here
            }
        }
    }

    /// Samples a shape of uniformly-random class, fully inside a
    /// `canvas`-sized image with a 2px margin.
    pub fn sample(rng: &mut impl Rng, canvas: f64, min_size: f64, max_size: f64) -> ShapeSpec {
        let class = rng.random_range(0..3);
        Self::sample_class(rng, class, canvas, min_size, max_size)
    }

    pub fn sample_class(
        rng: &mut impl Rng,
        class: usize,
        canvas: f64,
        min_size: f64,
        max_size: f64,
    ) -> ShapeSpec {
        let center = |rng: &mut dyn rand::RngCore, extent: f64| -> f64 {
            let lo = extent + 2.0;
            let hi = canvas - extent - 2.0;
            if hi <= lo {
                canvas / 2.0
            } else {
                rng.random_range(lo..hi)
            }
        };
        match class {
            0 => {
                let radius = rng.random_range(min_size / 2.0..=max_size / 2.0);
                let cx = center(rng, radius);
                let cy = center(rng, radius);
                ShapeSpec::Circle { cx, cy, radius }
            }
            1 => {
                let side = rng.random_range(min_size..=max_size);
                let cx = center(rng, side / 2.0);
                let cy = center(rng, side / 2.0);
                ShapeSpec::Square { cx, cy, side }
            }
            2 => {
                let width = rng.random_range(min_size..=max_size);
                let height = rng.random_range(min_size..=max_size);
                let cx = center(rng, width / 2.0);
                let cy = center(rng, height / 2.0);
                ShapeSpec::Triangle {
                    cx,
                    cy,
                    width,
                    height,
                }
            }
            _ => unreachable!("three shape classes"),
        }
    }
}

/// Muted two-corner gradient. Object colors stay brighter than this so
/// shapes remain visible, though low-contrast pairs do occur.
pub fn draw_background(size: usize, _noise: f64, rng: &mut impl Rng) -> ImageTensor {
    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.45));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.45));
    let denom = (2 * (size - 1).max(1)) as f64;
    ImageTensor::from_shape_fn((3, size, size), |(c, y, x)| {
        let t = (x + y) as f64 / denom;
        c0[c] + t * (c1[c] - c0[c])
    })
}

/// Object color with one channel forced above `hot_floor`; hue is free, so
/// color never identifies class. Lower floors yield lower-contrast objects.
pub fn sample_object_color(rng: &mut impl Rng, hot_floor: f64) -> [f64; 3] {
    let mut color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..1.0));
    let hot = rng.random_range(0..3);
    color[hot] = rng.random_range(hot_floor..1.0);
    color
}

/// Rasterizes `shape` over the image and returns the tight bounding box of
/// the covered pixels, or `None` when no pixel center fell inside.
pub fn draw_shape(image: &mut ImageTensor, shape: &ShapeSpec, color: [f64; 3]) -> Option<BBox> {
    let (_, h, w) = image.dim();
    let b = shape.bounds();
    let x_lo = (b.x_min.floor().max(0.0)) as usize;
    let y_lo = (b.y_min.floor().max(0.0)) as usize;
    let x_hi = (b.x_max.ceil() as usize).min(w);
    let y_hi = (b.y_max.ceil() as usize).min(h);

    let mut tight: Option<(usize, usize, usize, usize)> = None;
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                for (c, &v) in color.iter().enumerate() {
                    image[[c, y, x]] = v;
                }
                tight = Some(match tight {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
    }
    tight.map(|(x0, y0, x1, y1)| BBox {
        x_min: x0 as f64,
        y_min: y0 as f64,
        x_max: (x1 + 1) as f64,
        y_max: (y1 + 1) as f64,
    })
}

/// Final pass: uniform noise, clamp to `[0,1]`, snap to the 1/255 grid so a
/// PNG round-trip is lossless.
pub fn add_noise_and_quantize(image: &mut ImageTensor, amplitude: f64, rng: &mut impl Rng) {
    for v in image.iter_mut() {
        let noisy = *v + rng.random_range(-amplitude..=amplitude);
        *v = (noisy.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
}
