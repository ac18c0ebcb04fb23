//! Dataset persistence.
//!
//! Layout for a detection split:
//!
//! ```text
//! <root>/images/000000.png ...
//! <root>/annotations.json   # [{image, boxes: [[x0,y0,x1,y1]..], labels: [..]}]
//! <root>/meta.json          # {schema_version, kind, config, count, total_annotations}
//! ```
//!
//! Classification splits store `labels.json` (`[{image, label}]`) instead of
//! `annotations.json`. Images are 8-bit PNG; generated pixels live on the
//! 1/255 grid, so save→load reproduces tensors exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    generate_cls_sample, generate_scene, ClsSample, CropConfig, ImageTensor, SceneConfig,
    SceneSample, NUM_CLASSES,
};
use crate::geom::{BBox, GroundTruth};
use crate::{par, Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub count: usize,
    pub total_annotations: usize,
}

#[derive(Serialize, Deserialize)]
struct DetectionEntry {
    image: String,
    boxes: Vec<[f64; 4]>,
    labels: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ClsEntry {
    image: String,
    label: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta<C> {
    schema_version: u32,
    kind: String,
    config: C,
    count: usize,
    total_annotations: usize,
}

fn prepare_dir(root: &Path, overwrite: bool) -> Result<()> {
    if root.exists() && root.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
        if !overwrite {
            return Err(Error::dataset(
                root,
                "output directory exists and is not empty (pass overwrite to replace)",
            ));
        }
        fs::remove_dir_all(root).map_err(|e| Error::io(root, e))?;
    }
    fs::create_dir_all(root.join("images")).map_err(|e| Error::io(root, e))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'a> Deserialize<'a>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Encodes a `[0,1]` tensor as 8-bit RGB PNG.
pub fn save_png(image: &ImageTensor, path: &Path) -> Result<()> {
    let (c, h, w) = image.dim();
    assert_eq!(c, 3, "rgb image expected");
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px: [u8; 3] = std::array::from_fn(|ch| {
                (image[[ch, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8
            });
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)
        .map_err(|e| Error::dataset(path, format!("png encode failed: {e}")))
}

pub fn load_png(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|e| Error::dataset(path, format!("png decode failed: {e}")))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    let mut out = ImageTensor::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[[ch, y as usize, x as usize]] = px.0[ch] as f64 / 255.0;
        }
    }
    Ok(out)
}

fn image_name(index: usize) -> String {
    format!("images/{index:06}.png")
}

/// Generates `n` scenes under `root`. Images render in parallel; the index
/// files are written once at the end.
pub fn generate_detection_split(
    config: &SceneConfig,
    n: usize,
    root: &Path,
    overwrite: bool,
) -> Result<SplitSummary> {
    config.validate()?;
    prepare_dir(root, overwrite)?;

    let results: Vec<Result<DetectionEntry>> = par::map_indexed(n, |i| {
        let sample = generate_scene(config, i as u64)?;
        save_png(&sample.image, &root.join(image_name(i)))?;
        Ok(DetectionEntry {
            image: image_name(i),
            boxes: sample
                .annotations
                .iter()
                .map(|a| [a.bbox.x_min, a.bbox.y_min, a.bbox.x_max, a.bbox.y_max])
                .collect(),
            labels: sample.annotations.iter().map(|a| a.class_id).collect(),
        })
    });
    let entries: Vec<DetectionEntry> = results.into_iter().collect::<Result<_>>()?;
    let total_annotations = entries.iter().map(|e| e.labels.len()).sum();

    write_json(&root.join("annotations.json"), &entries)?;
    write_json(
        &root.join("meta.json"),
        &Meta {
            schema_version: SCHEMA_VERSION,
            kind: "detection".to_string(),
            config: config.clone(),
            count: n,
            total_annotations,
        },
    )?;
    Ok(SplitSummary {
        count: n,
        total_annotations,
    })
}

/// Generates `n` classification crops under `root`.
pub fn generate_classification_split(
    config: &CropConfig,
    n: usize,
    root: &Path,
    overwrite: bool,
) -> Result<SplitSummary> {
    prepare_dir(root, overwrite)?;
    let results: Vec<Result<ClsEntry>> = par::map_indexed(n, |i| {
        let sample = generate_cls_sample(config, i as u64)?;
        save_png(&sample.crop, &root.join(image_name(i)))?;
        Ok(ClsEntry {
            image: image_name(i),
            label: sample.label,
        })
    });
    let entries: Vec<ClsEntry> = results.into_iter().collect::<Result<_>>()?;

    write_json(&root.join("labels.json"), &entries)?;
    write_json(
        &root.join("meta.json"),
        &Meta {
            schema_version: SCHEMA_VERSION,
            kind: "classification".to_string(),
            config: config.clone(),
            count: n,
            total_annotations: n,
        },
    )?;
    Ok(SplitSummary {
        count: n,
        total_annotations: n,
    })
}

fn check_meta(root: &Path, expected_kind: &str) -> Result<serde_json::Value> {
    let meta_path = root.join("meta.json");
    let meta: serde_json::Value = read_json(&meta_path)?;
    let version = meta
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::dataset(&meta_path, "meta.json missing schema_version"))?;
    if version != SCHEMA_VERSION as u64 {
        return Err(Error::dataset(
            &meta_path,
            format!("schema_version {version} unsupported (expected {SCHEMA_VERSION})"),
        ));
    }
    let kind = meta.get("kind").and_then(|v| v.as_str()).unwrap_or("");
    if kind != expected_kind {
        return Err(Error::dataset(
            &meta_path,
            format!("dataset kind {kind:?} is not {expected_kind:?}"),
        ));
    }
    Ok(meta)
}

/// Loads a detection split, validating every record. Errors name the
/// offending entry.
pub fn load_detection_dataset(root: &Path) -> Result<Vec<SceneSample>> {
    check_meta(root, "detection")?;
    let entries: Vec<DetectionEntry> = read_json(&root.join("annotations.json"))?;

    let loaded: Vec<Result<SceneSample>> = par::map_indexed(entries.len(), |i| {
        let entry = &entries[i];
        let context = |reason: String| {
            Error::dataset(root, format!("entry {i} ({}): {reason}", entry.image))
        };
        if entry.boxes.len() != entry.labels.len() {
            return Err(context(format!(
                "{} boxes but {} labels",
                entry.boxes.len(),
                entry.labels.len()
            )));
        }
        let image = load_png(&root.join(&entry.image))
            .map_err(|e| context(format!("unreadable image: {e}")))?;
        let (_, h, w) = image.dim();
        let mut annotations = Vec::with_capacity(entry.boxes.len());
        for (bi, (&[x0, y0, x1, y1], &label)) in
            entry.boxes.iter().zip(entry.labels.iter()).enumerate()
        {
            let bbox = BBox::new(x0, y0, x1, y1)
                .map_err(|e| context(format!("box {bi} invalid: {e}")))?;
            if bbox.x_max > w as f64 || bbox.y_max > h as f64 || bbox.x_min < 0.0 || bbox.y_min < 0.0
            {
                return Err(context(format!("box {bi} outside image bounds")));
            }
            if label >= NUM_CLASSES {
                return Err(context(format!("label {label} out of range (box {bi})")));
            }
            annotations.push(GroundTruth::new(bbox, label).expect("validated above"));
        }
        Ok(SceneSample { image, annotations })
    });
    loaded.into_iter().collect()
}

/// Loads a classification split, validating every record.
pub fn load_classification_dataset(root: &Path) -> Result<Vec<ClsSample>> {
    check_meta(root, "classification")?;
    let entries: Vec<ClsEntry> = read_json(&root.join("labels.json"))?;
    let loaded: Vec<Result<ClsSample>> = par::map_indexed(entries.len(), |i| {
        let entry = &entries[i];
        if entry.label >= NUM_CLASSES {
            return Err(Error::dataset(
                root,
                format!("entry {i} ({}): label {} out of range", entry.image, entry.label),
            ));
        }
        let crop = load_png(&root.join(&entry.image)).map_err(|e| {
            Error::dataset(root, format!("entry {i} ({}): unreadable image: {e}", entry.image))
        })?;
        Ok(ClsSample {
            crop,
            label: entry.label,
        })
    });
    loaded.into_iter().collect()
}

/// Directory checksum used by determinism tests: fnv-1a over sorted file
/// names and bytes.
pub fn dir_checksum(root: &Path) -> Result<u64> {
    let mut files: Vec<PathBuf> = Vec::new();
    fn walk(dir: &Path, files: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(&path, files)?;
            } else {
                files.push(path);
            }
        }
        Ok(())
    }
    walk(root, &mut files).map_err(|e| Error::io(root, e))?;
    files.sort();
    let mut hash: u64 = 0xcbf29ce484222325;
    let mut absorb = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    };
    for f in &files {
        absorb(f.strip_prefix(root).unwrap_or(f).to_string_lossy().as_bytes());
        absorb(&fs::read(f).map_err(|e| Error::io(f, e))?);
    }
    Ok(hash)
}
