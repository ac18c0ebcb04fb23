//! Deterministic synthetic-shapes data: detection scenes and classification
//! crops.
//!
//! Scenes are 128x128 RGB images of colored circles, squares, and triangles
//! on a noisy gradient background; shape identity is carried by geometry
//! only, never by color, so models must read structure rather than hue.
//! Crops are 32x32 single-shape images for backbone pretraining. Every
//! sample is a pure function of `(seed, index)` and pixel values are snapped
//! to the 1/255 grid, so datasets round-trip losslessly through PNG.

mod io;
mod render;

pub use io::{
    dir_checksum, generate_classification_split, generate_detection_split,
    load_classification_dataset, load_detection_dataset, load_png, save_png, SplitSummary,
    SCHEMA_VERSION,
};
pub use render::{draw_background, draw_shape, ShapeSpec};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{iou, BBox, GroundTruth};
use crate::{Error, Result};

/// RGB image in `(3, H, W)` layout, values in `[0, 1]`.
pub type ImageTensor = Array3<f64>;

pub const NUM_CLASSES: usize = 3;
pub const DETECTION_IMAGE_SIZE: usize = 128;
pub const CLS_CROP_SIZE: usize = 32;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["circle", "square", "triangle"];

/// Scene generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Side length / diameter range of placed shapes, pixels.
    pub min_object_size: f64,
    pub max_object_size: f64,
    /// Maximum IoU allowed between the boxes of placed objects.
    pub max_overlap_iou: f64,
    /// Uniform pixel noise amplitude added to the finished scene.
    pub noise_amplitude: f64,
    /// Floor for each object's brightest color channel.
    pub object_brightness_floor: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: DETECTION_IMAGE_SIZE,
            min_objects: 1,
            max_objects: 5,
            min_object_size: 24.0,
            max_object_size: 64.0,
            max_overlap_iou: 0.3,
            noise_amplitude: 0.04,
            object_brightness_floor: 0.65,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects > self.max_objects || self.max_objects == 0 {
            return Err(Error::Config(format!(
                "object count range [{}, {}] is empty",
                self.min_objects, self.max_objects
            )));
        }
        if self.min_object_size <= 0.0
            || self.min_object_size > self.max_object_size
            || self.max_object_size + 4.0 > self.image_size as f64
        {
            return Err(Error::Config(format!(
                "object size range [{}, {}] does not fit a {}px image",
                self.min_object_size, self.max_object_size, self.image_size
            )));
        }
        Ok(())
    }
}

/// Crop generator parameters for classification pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropConfig {
    pub crop_size: usize,
    pub min_object_size: f64,
    pub max_object_size: f64,
    pub noise_amplitude: f64,
    /// Floor for the crop object's brightest color channel. The default sits
    /// lower than the scene floor: the crop task needs genuinely hard,
    /// low-contrast examples for attacks to bite on.
    pub object_brightness_floor: f64,
    pub seed: u64,
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig {
            crop_size: CLS_CROP_SIZE,
            min_object_size: 10.0,
            max_object_size: 22.0,
            noise_amplitude: 0.06,
            object_brightness_floor: 0.55,
            seed: 0,
        }
    }
}

/// A detection training example.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image: ImageTensor,
    pub annotations: Vec<GroundTruth>,
}

/// A classification training example.
#[derive(Debug, Clone, PartialEq)]
pub struct ClsSample {
    pub crop: ImageTensor,
    pub label: usize,
}

/// Stream-splitting mix so each (seed, salt, index) triple gets an
/// independent generator. splitmix64 finalizer.
fn mix(seed: u64, salt: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add(salt.wrapping_mul(0xBF58476D1CE4E5B9))
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x94D049BB133111EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

pub(crate) fn sample_rng(seed: u64, salt: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, salt, index))
}

/// Renders scene `index`. Deterministic in `(config.seed, index)`; placement
/// that keeps failing the overlap constraint after bounded retries is
/// dropped, so the sample is always valid even if it carries fewer objects.
pub fn generate_scene(config: &SceneConfig, index: u64) -> Result<SceneSample> {
    config.validate()?;
    let mut rng = sample_rng(config.seed, 0x5ce9e5, index);
    let size = config.image_size;
    let mut image = draw_background(size, config.noise_amplitude, &mut rng);

    let target_count = rng.random_range(config.min_objects..=config.max_objects);
    let mut annotations: Vec<GroundTruth> = Vec::new();
    let mut placed: Vec<BBox> = Vec::new();
    for _ in 0..target_count {
        let mut accepted = None;
        for _try in 0..20 {
            let spec = ShapeSpec::sample(
                &mut rng,
                size as f64,
                config.min_object_size,
                config.max_object_size,
            );
            let bbox = spec.bounds();
            if placed.iter().all(|p| iou(p, &bbox) <= config.max_overlap_iou) {
                accepted = Some(spec);
                break;
            }
        }
        if let Some(spec) = accepted {
            let color = render::sample_object_color(&mut rng, config.object_brightness_floor);
            let tight = draw_shape(&mut image, &spec, color)
                .expect("sampled shapes always cover at least one pixel");
            placed.push(spec.bounds());
            annotations.push(GroundTruth::new(tight, spec.class_id())?);
        }
    }

    render::add_noise_and_quantize(&mut image, config.noise_amplitude, &mut rng);
    Ok(SceneSample { image, annotations })
}

/// Renders classification crop `index`: one shape on a scene-like
/// background, label drawn uniformly over the classes.
pub fn generate_cls_sample(config: &CropConfig, index: u64) -> Result<ClsSample> {
    if config.min_object_size <= 0.0
        || config.min_object_size > config.max_object_size
        || config.max_object_size + 2.0 > config.crop_size as f64
    {
        return Err(Error::Config(format!(
            "crop object size range [{}, {}] does not fit a {}px crop",
            config.min_object_size, config.max_object_size, config.crop_size
        )));
    }
    let mut rng = sample_rng(config.seed, 0xc1a55, index);
    let size = config.crop_size;
    let mut crop = draw_background(size, config.noise_amplitude, &mut rng);

    let label = rng.random_range(0..NUM_CLASSES);
    let spec = ShapeSpec::sample_class(
        &mut rng,
        label,
        size as f64,
        config.min_object_size,
        config.max_object_size,
    );
    let color = render::sample_object_color(&mut rng, config.object_brightness_floor);
    draw_shape(&mut crop, &spec, color).expect("crop shapes always cover at least one pixel");

    render::add_noise_and_quantize(&mut crop, config.noise_amplitude, &mut rng);
    Ok(ClsSample { crop, label })
}
