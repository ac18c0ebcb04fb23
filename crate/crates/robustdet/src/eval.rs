//! Clean, robust, and transfer evaluation with report emission.
//!
//! Robust metrics follow the attacked-mAP convention: craft a perturbation
//! per image batch against the ground truth with the configured loss, then
//! score the detector on the attacked images. Attacks built from the
//! classification loss populate `A_cls` rows, regression-loss attacks
//! `A_reg`. Evaluation never mutates the model.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{pgd, transfer_attack, AttackConfig, LossMode};
use crate::data::SceneSample;
use crate::geom::{map_range, mean_ap, Detection, GroundTruth};
use crate::model::{batch_images, DetectorModel};
use crate::{Error, Result};

/// Detection-decoding settings for evaluation. The score threshold and NMS
/// IoU are lab defaults, not values taken from any reference protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub score_thr: f64,
    pub nms_thr: f64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            score_thr: 0.05,
            nms_thr: 0.5,
            batch_size: 16,
        }
    }
}

/// One attacked-evaluation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackEntry {
    pub attack: String,
    pub loss_mode: LossMode,
    pub eps: f64,
    pub steps: usize,
    pub random_start: bool,
    pub seed: u64,
    pub map_50: f64,
    pub map_50_95: f64,
}

/// Full evaluation of one model on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub dataset: String,
    pub clean_map_50: f64,
    pub clean_map_50_95: f64,
    pub attacks: Vec<AttackEntry>,
}

/// mAP@0.5 and mAP@0.5:0.95 for prepared per-image detections.
pub fn eval_prepared(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    num_classes: usize,
) -> Result<(f64, f64)> {
    Ok((
        mean_ap(dets, gts, 0.5, num_classes)?,
        map_range(dets, gts, num_classes)?,
    ))
}

fn dataset_gts(dataset: &[SceneSample]) -> Vec<Vec<GroundTruth>> {
    dataset.iter().map(|s| s.annotations.clone()).collect()
}

/// Runs the detector over the dataset in batches and collects detections in
/// dataset order.
pub fn collect_detections(
    model: &mut DetectorModel,
    dataset: &[SceneSample],
    cfg: &EvalConfig,
) -> Result<Vec<Vec<Detection>>> {
    let mut all = Vec::with_capacity(dataset.len());
    for chunk in dataset.chunks(cfg.batch_size.max(1)) {
        let images: Vec<&crate::data::ImageTensor> = chunk.iter().map(|s| &s.image).collect();
        let batch = batch_images(&images)?;
        all.extend(model.detect(&batch, cfg.score_thr, cfg.nms_thr)?);
    }
    Ok(all)
}

/// Clean mAP of the model on a held-out split.
pub fn eval_clean(
    model: &mut DetectorModel,
    dataset: &[SceneSample],
    cfg: &EvalConfig,
) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::Eval("empty evaluation dataset".into()));
    }
    let dets = collect_detections(model, dataset, cfg)?;
    eval_prepared(&dets, &dataset_gts(dataset), model.config.num_classes)
}

/// mAP under a per-batch attack crafted against the ground truth. Batch `i`
/// derives its attack seed from `(attack.seed, i)`, so reports reproduce
/// bit-exactly.
pub fn eval_robust(
    model: &mut DetectorModel,
    dataset: &[SceneSample],
    attack: &AttackConfig,
    cfg: &EvalConfig,
) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::Eval("empty evaluation dataset".into()));
    }
    attack.validate()?;
    let mut all = Vec::with_capacity(dataset.len());
    for (bi, chunk) in dataset.chunks(cfg.batch_size.max(1)).enumerate() {
        let images: Vec<&crate::data::ImageTensor> = chunk.iter().map(|s| &s.image).collect();
        let batch = batch_images(&images)?;
        let gts: Vec<Vec<GroundTruth>> = chunk.iter().map(|s| s.annotations.clone()).collect();
        let batch_attack = AttackConfig {
            seed: attack.seed.wrapping_add(bi as u64),
            ..attack.clone()
        };
        let adv = pgd(model, &batch, &gts, &batch_attack)?;
        all.extend(model.detect(&adv.adv_images, cfg.score_thr, cfg.nms_thr)?);
    }
    eval_prepared(&all, &dataset_gts(dataset), model.config.num_classes)
}

/// mAP of `target` under attacks crafted on `source`.
pub fn eval_transfer(
    source: &mut DetectorModel,
    target: &mut DetectorModel,
    dataset: &[SceneSample],
    attack: &AttackConfig,
    cfg: &EvalConfig,
) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::Eval("empty evaluation dataset".into()));
    }
    attack.validate()?;
    let mut all = Vec::with_capacity(dataset.len());
    for (bi, chunk) in dataset.chunks(cfg.batch_size.max(1)).enumerate() {
        let images: Vec<&crate::data::ImageTensor> = chunk.iter().map(|s| &s.image).collect();
        let batch = batch_images(&images)?;
        let gts: Vec<Vec<GroundTruth>> = chunk.iter().map(|s| s.annotations.clone()).collect();
        let batch_attack = AttackConfig {
            seed: attack.seed.wrapping_add(bi as u64),
            ..attack.clone()
        };
        let adv = transfer_attack(source, target, &batch, &gts, &batch_attack)?;
        all.extend(target.detect(&adv.adv_images, cfg.score_thr, cfg.nms_thr)?);
    }
    eval_prepared(&all, &dataset_gts(dataset), target.config.num_classes)
}

/// Builds a standard report: clean plus the requested attack entries.
pub fn build_report(
    model: &mut DetectorModel,
    model_name: &str,
    dataset: &[SceneSample],
    dataset_name: &str,
    attacks: &[AttackConfig],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let (clean_map_50, clean_map_50_95) = eval_clean(model, dataset, cfg)?;
    let mut entries = Vec::with_capacity(attacks.len());
    for attack in attacks {
        let (map_50, map_50_95) = eval_robust(model, dataset, attack, cfg)?;
        entries.push(AttackEntry {
            attack: if attack.steps == 1 { "fgsm" } else { "pgd" }.to_string(),
            loss_mode: attack.loss_mode,
            eps: attack.eps,
            steps: attack.steps,
            random_start: attack.random_start,
            seed: attack.seed,
            map_50,
            map_50_95,
        });
    }
    Ok(EvalReport {
        model: model_name.to_string(),
        dataset: dataset_name.to_string(),
        clean_map_50,
        clean_map_50_95,
        attacks: entries,
    })
}

/// The default evaluation protocol: FGSM and PGD-10 at `eps`, each under the
/// classification and the regression attack loss.
pub fn standard_attack_suite(eps: f64, steps: usize, seed: u64) -> Vec<AttackConfig> {
    let mut out = Vec::new();
    for mode in [LossMode::Cls, LossMode::Reg] {
        out.push(AttackConfig::fgsm(eps, mode));
        out.push(AttackConfig {
            eps,
            step_size: eps / 4.0,
            steps,
            loss_mode: mode,
            random_start: false,
            seed,
        });
    }
    out
}

/// Aligned text rendering, three decimals per value.
pub fn format_report_text(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let name_w = reports
        .iter()
        .map(|r| r.model.len())
        .max()
        .unwrap_or(5)
        .max(5);
    let _ = writeln!(
        out,
        "{:name_w$}  {:>9} {:>9}  attacked (attack/loss: mAP@0.5 mAP@0.5:0.95)",
        "model", "clean@0.5", "@0.5:0.95"
    );
    for r in reports {
        let _ = write!(
            out,
            "{:name_w$}  {:>9.3} {:>9.3} ",
            r.model, r.clean_map_50, r.clean_map_50_95
        );
        for a in &r.attacks {
            let _ = write!(
                out,
                " {}-{}[{}]: {:.3} {:.3}",
                a.attack, a.steps, a.loss_mode, a.map_50, a.map_50_95
            );
        }
        let _ = writeln!(out);
    }
    out
}

/// CSV rendering with full-precision floats, so a re-parse reproduces the
/// values bit-exactly.
pub fn format_report_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(
        "model,dataset,metric,attack,loss_mode,eps,steps,random_start,seed,map_50,map_50_95\n",
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},clean,,,,,,,{},{}",
            r.model, r.dataset, r.clean_map_50, r.clean_map_50_95
        );
        for a in &r.attacks {
            let _ = writeln!(
                out,
                "{},{},robust,{},{},{},{},{},{},{},{}",
                r.model,
                r.dataset,
                a.attack,
                a.loss_mode,
                a.eps,
                a.steps,
                a.random_start,
                a.seed,
                a.map_50,
                a.map_50_95
            );
        }
    }
    out
}

/// Writes `report.json`, `report.csv`, and `report.txt` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::json(dir.join("report.json"), e))?;
    std::fs::write(dir.join("report.json"), json)
        .map_err(|e| Error::io(dir.join("report.json"), e))?;
    std::fs::write(
        dir.join("report.csv"),
        format_report_csv(std::slice::from_ref(report)),
    )
    .map_err(|e| Error::io(dir.join("report.csv"), e))?;
    std::fs::write(
        dir.join("report.txt"),
        format_report_text(std::slice::from_ref(report)),
    )
    .map_err(|e| Error::io(dir.join("report.txt"), e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneConfig};
    use crate::model::DetectorConfig;

    fn small_dataset(n: usize) -> Vec<SceneSample> {
        let cfg = SceneConfig {
            seed: 31,
            ..SceneConfig::default()
        };
        (0..n).map(|i| generate_scene(&cfg, i as u64).unwrap()).collect()
    }

    #[test]
    fn ground_truth_oracle_scores_perfect_map() {
        let dataset = small_dataset(6);
        let gts = dataset_gts(&dataset);
        let dets: Vec<Vec<Detection>> = gts
            .iter()
            .map(|g| {
                g.iter()
                    .map(|gt| Detection {
                        bbox: gt.bbox,
                        class_id: gt.class_id,
                        score: 1.0,
                    })
                    .collect()
            })
            .collect();
        let (m50, m5095) = eval_prepared(&dets, &gts, 3).unwrap();
        assert_eq!(m50, 1.0);
        assert_eq!(m5095, 1.0);
    }

    #[test]
    fn empty_detector_scores_zero() {
        let dataset = small_dataset(4);
        let gts = dataset_gts(&dataset);
        let dets: Vec<Vec<Detection>> = vec![vec![]; dataset.len()];
        let (m50, m5095) = eval_prepared(&dets, &gts, 3).unwrap();
        assert_eq!(m50, 0.0);
        assert_eq!(m5095, 0.0);
    }

    #[test]
    fn zero_eps_robust_equals_clean_bitwise() {
        let mut model = DetectorModel::new(DetectorConfig {
            widths: [4, 4, 4, 4],
            seed: 2,
            ..DetectorConfig::default()
        });
        let dataset = small_dataset(4);
        let cfg = EvalConfig::default();
        let clean = eval_clean(&mut model, &dataset, &cfg).unwrap();
        let attack = AttackConfig {
            eps: 0.0,
            steps: 2,
            ..AttackConfig::default()
        };
        let robust = eval_robust(&mut model, &dataset, &attack, &cfg).unwrap();
        assert_eq!(clean, robust);
    }

    #[test]
    fn evaluation_never_mutates_the_model() {
        let mut model = DetectorModel::new(DetectorConfig {
            widths: [4, 4, 4, 4],
            seed: 3,
            ..DetectorConfig::default()
        });
        let weights = model.weights_checksum();
        let stats = model.backbone.stats_checksum();
        let dataset = small_dataset(3);
        let cfg = EvalConfig::default();
        eval_clean(&mut model, &dataset, &cfg).unwrap();
        let attack = AttackConfig {
            steps: 2,
            ..AttackConfig::default()
        };
        eval_robust(&mut model, &dataset, &attack, &cfg).unwrap();
        assert_eq!(model.weights_checksum(), weights);
        assert_eq!(model.backbone.stats_checksum(), stats);
    }

    #[test]
    fn self_transfer_matches_direct_attack() {
        let mut model = DetectorModel::new(DetectorConfig {
            widths: [4, 4, 4, 4],
            seed: 4,
            ..DetectorConfig::default()
        });
        let mut clone = model.clone();
        let dataset = small_dataset(3);
        let cfg = EvalConfig::default();
        let attack = AttackConfig {
            steps: 3,
            ..AttackConfig::default()
        };
        let direct = eval_robust(&mut model, &dataset, &attack, &cfg).unwrap();
        let transferred = eval_transfer(&mut clone, &mut model, &dataset, &attack, &cfg).unwrap();
        assert_eq!(direct, transferred);
    }

    #[test]
    fn report_renders_and_csv_roundtrips() {
        let report = EvalReport {
            model: "std".into(),
            dataset: "val".into(),
            clean_map_50: 0.752,
            clean_map_50_95: 0.4512345678901234,
            attacks: vec![
                AttackEntry {
                    attack: "fgsm".into(),
                    loss_mode: LossMode::Cls,
                    eps: 8.0 / 255.0,
                    steps: 1,
                    random_start: false,
                    seed: 0,
                    map_50: 0.162,
                    map_50_95: 0.1,
                },
                AttackEntry {
                    attack: "pgd".into(),
                    loss_mode: LossMode::Cls,
                    eps: 8.0 / 255.0,
                    steps: 10,
                    random_start: false,
                    seed: 0,
                    map_50: 0.012,
                    map_50_95: 0.008,
                },
            ],
        };
        let text = format_report_text(std::slice::from_ref(&report));
        assert!(text.contains("0.752"), "{text}");
        assert!(text.contains("fgsm-1[cls]: 0.162"), "{text}");
        assert!(text.contains("pgd-10[cls]: 0.012"), "{text}");

        let csv = format_report_csv(std::slice::from_ref(&report));
        let mut clean_seen = false;
        for line in csv.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields[2] == "clean" {
                clean_seen = true;
                let m50: f64 = fields[9].parse().unwrap();
                let m5095: f64 = fields[10].parse().unwrap();
                assert_eq!(m50, report.clean_map_50);
                assert_eq!(m5095, report.clean_map_50_95);
            }
            if fields[2] == "robust" && fields[3] == "fgsm" {
                let eps: f64 = fields[5].parse().unwrap();
                assert_eq!(eps, 8.0 / 255.0);
            }
        }
        assert!(clean_seen);
    }

    #[test]
    fn clean_only_report_renders() {
        let report = EvalReport {
            model: "m".into(),
            dataset: "d".into(),
            clean_map_50: 0.9,
            clean_map_50_95: 0.6,
            attacks: vec![],
        };
        let text = format_report_text(std::slice::from_ref(&report));
        assert!(text.contains("0.900"));
        let csv = format_report_csv(std::slice::from_ref(&report));
        assert_eq!(csv.lines().count(), 2);
    }
}
