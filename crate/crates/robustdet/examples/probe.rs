// Calibration driver: runs pieces of the pipeline at desk scale and prints
// the numbers the acceptance thresholds depend on. Pass stage names as args:
//   cargo run --release --example probe -- cls det frod
use std::time::Instant;

use robustdet::attack::AttackConfig;
use robustdet::data::{
    generate_cls_sample, generate_scene, ClsSample, CropConfig, SceneConfig, SceneSample,
};
use robustdet::eval::{eval_clean, eval_robust, EvalConfig};
use robustdet::model::{DetectorConfig, NormPolicy};
use robustdet::train::{
    classifier_accuracy, pretrain_attack, pretrain_backbone, train, Method, TrainConfig,
};

fn crops(n: usize, seed: u64, salt: u64) -> Vec<ClsSample> {
    let cfg = CropConfig {
        seed: seed ^ salt,
        ..CropConfig::default()
    };
    (0..n)
        .map(|i| generate_cls_sample(&cfg, i as u64).unwrap())
        .collect()
}

fn scenes(n: usize, seed: u64, salt: u64) -> Vec<SceneSample> {
    let cfg = SceneConfig {
        seed: seed ^ salt,
        ..SceneConfig::default()
    };
    (0..n)
        .map(|i| generate_scene(&cfg, i as u64).unwrap())
        .collect()
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let want = |s: &str| args.is_empty() || args.iter().any(|a| a == s);
    let widths = [16usize, 32, 64, 64];
    let eps = 8.0 / 255.0;

    let train_crops = crops(1024, 1, 0x11);
    let eval_crops = crops(512, 1, 0x22);
    let train_scenes = scenes(128, 1, 0x33);
    let eval_scenes = scenes(48, 1, 0x44);

    let mut std_ckpt = None;
    let mut robust_ckpt = None;

    if want("cls") {
        let t = Instant::now();
        let (mut std_cls, ckpt) =
            pretrain_backbone(&train_crops, false, 8, eps, widths, 7).unwrap();
        println!("std classifier trained in {:.1}s", t.elapsed().as_secs_f64());
        let clean = classifier_accuracy(&mut std_cls, &eval_crops, None, 64).unwrap();
        let pgd7 =
            classifier_accuracy(&mut std_cls, &eval_crops, Some(&pretrain_attack(eps, 7)), 64)
                .unwrap();
        println!("std classifier: clean {clean:.3}, pgd7 {pgd7:.3}");
        std_ckpt = Some(ckpt);

        let t = Instant::now();
        let (mut rob_cls, ckpt) = pretrain_backbone(&train_crops, true, 8, eps, widths, 7).unwrap();
        println!(
            "robust classifier trained in {:.1}s",
            t.elapsed().as_secs_f64()
        );
        let clean = classifier_accuracy(&mut rob_cls, &eval_crops, None, 64).unwrap();
        let pgd7 =
            classifier_accuracy(&mut rob_cls, &eval_crops, Some(&pretrain_attack(eps, 7)), 64)
                .unwrap();
        println!("robust classifier: clean {clean:.3}, pgd7 {pgd7:.3}");
        robust_ckpt = Some(ckpt);
    }

    let det_cfg = DetectorConfig {
        widths,
        ..DetectorConfig::default()
    };
    let eval_cfg = EvalConfig::default();
    let pgd10 = AttackConfig::default(); // eps 8/255, 10 steps, cls loss
    let mut eval_model = |name: &str, model: &mut robustdet::model::DetectorModel| {
        let t = Instant::now();
        let (c50, c95) = eval_clean(model, &eval_scenes, &eval_cfg).unwrap();
        let (r50, _r95) = eval_robust(model, &eval_scenes, &pgd10, &eval_cfg).unwrap();
        println!(
            "{name}: clean mAP50 {c50:.3} (50:95 {c95:.3}), PGD10-cls mAP50 {r50:.3}  [eval {:.0}s]",
            t.elapsed().as_secs_f64()
        );
    };

    if want("det") {
        let ckpt = std_ckpt.as_ref().expect("run cls stage first");
        let t = Instant::now();
        let cfg = TrainConfig {
            method: Method::Std,
            total_epochs: 14,
            seed: 5,
            ..TrainConfig::default()
        };
        let (mut model, log) = train(&cfg, &train_scenes, ckpt, det_cfg.clone()).unwrap();
        println!(
            "STD trained in {:.1}s; last losses cls {:.3} loc {:.3}",
            t.elapsed().as_secs_f64(),
            log.epochs.last().unwrap().mean_loss.cls,
            log.epochs.last().unwrap().mean_loss.loc
        );
        eval_model("STD", &mut model);
    }

    if want("frod") {
        let ckpt = robust_ckpt.as_ref().expect("run cls stage first");
        let t = Instant::now();
        let cfg = TrainConfig {
            method: Method::Frod,
            total_epochs: 14,
            seed: 5,
            ..TrainConfig::default()
        };
        let (mut model, _) = train(&cfg, &train_scenes, ckpt, det_cfg.clone()).unwrap();
        println!("FROD trained in {:.1}s", t.elapsed().as_secs_f64());
        eval_model("FROD", &mut model);

        let cfg = TrainConfig {
            method: Method::Frod,
            total_epochs: 14,
            seed: 5,
            norm_policy: Some(NormPolicy::Freeze),
            ..TrainConfig::default()
        };
        let (mut model, _) = train(&cfg, &train_scenes, ckpt, det_cfg.clone()).unwrap();
        eval_model("FROD-freezeBN", &mut model);

        let cfg = TrainConfig {
            method: Method::Frod,
            total_epochs: 14,
            seed: 5,
            retrain_blocks: Some(4),
            norm_policy: Some(NormPolicy::Freeze),
            ..TrainConfig::default()
        };
        let (mut model, _) = train(&cfg, &train_scenes, ckpt, det_cfg.clone()).unwrap();
        eval_model("naive-swap(k4,freeze)", &mut model);
    }

    if want("dat") {
        let ckpt = robust_ckpt.as_ref().expect("run cls stage first");
        let t = Instant::now();
        let cfg = TrainConfig {
            method: Method::FrodDat,
            total_epochs: 14,
            seed: 5,
            ..TrainConfig::default()
        };
        let (mut model, _) = train(&cfg, &train_scenes, ckpt, det_cfg.clone()).unwrap();
        println!("FROD-DAT trained in {:.1}s", t.elapsed().as_secs_f64());
        eval_model("FROD-DAT", &mut model);
    }
}
