//! One PASS/FAIL line per acceptance criterion. Failures are reported, not
//! raised, so the full list is always printed; run with `--nocapture`.
//!
//! The desk-scale experiment trains 24 toy networks and takes roughly 15
//! minutes on one CPU core. Set `DSAM_ACCEPTANCE_OUT` to keep its run
//! directories.

mod common;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use common::Check;
use dsam_core::backbone::BackboneConfig;
use dsam_core::data::SyntheticDomainSpec;
use dsam_core::experiment::{
    cmd_eval, cmd_train, pretrain_backbone, DatasetConfig, EvalMode, Experiment, ExperimentConfig, PretrainConfig,
};
use dsam_core::model::{ModuleConfig, NetworkKind};
use dsam_core::training::TrainConfig;

const CHANCE: f64 = 100.0 / 7.0;

fn desk_config(mode: NetworkKind, out: &Path, weights: &Path) -> ExperimentConfig {
    ExperimentConfig {
        name: Some("desk".into()),
        mode,
        target: "rotate-all".into(),
        seed: 0,
        output_dir: out.to_path_buf(),
        dtype: "f32".into(),
        eval: vec![EvalMode::EndToEnd],
        extract_features: false,
        probe_c: 1.0,
        dataset: DatasetConfig::Synthetic(SyntheticDomainSpec::new(4, 7, 50, 32, 0)),
        backbone: BackboneConfig::Toy {
            channels: vec![16, 32, 64, 128],
            input_size: 32,
            batch_norm: true,
            weights: Some(weights.to_path_buf()),
        },
        module: ModuleConfig::default(),
        train: TrainConfig {
            base_lr: 0.03,
            epochs: 12,
            lr_decay_period: 4,
            repetitions: 3,
            ..TrainConfig::default()
        },
        pretrain: None,
    }
}

fn desk_experiment() -> Check {
    let t = Instant::now();
    let keep = std::env::var_os("DSAM_ACCEPTANCE_OUT").map(PathBuf::from);
    let tmp = tempfile::tempdir().unwrap();
    let root = keep.clone().unwrap_or_else(|| tmp.path().to_path_buf());
    let weights = root.join("pretrained_toy.safetensors");

    let outcome = (|| -> dsam_core::error::Result<(f64, f64, f64, String)> {
        let base = desk_config(NetworkKind::Dsam, &root, &weights);
        let pre_acc = if weights.exists() {
            f64::NAN
        } else {
            pretrain_backbone(&base.backbone, &PretrainConfig::default(), 7, 32, DType::F32, &weights)?
        };
        let mut means = Vec::new();
        let mut rows = Vec::new();
        for (mode, dir) in [(NetworkKind::Dsam, "dsam"), (NetworkKind::DeepAll, "deep_all")] {
            let exp = Experiment::from_config(desk_config(mode, &root.join(dir), &weights))?;
            cmd_train(&exp)?;
            let report = cmd_eval(&exp)?;
            rows.push(
                report
                    .rows
                    .iter()
                    .map(|r| format!("{} {:.1}", r.domain, r.accuracy))
                    .collect::<Vec<_>>()
                    .join(", "),
            );
            means.push(report.average);
        }
        Ok((means[0], means[1], pre_acc, format!("D-SAM [{}]; Deep All [{}]", rows[0], rows[1])))
    })();
    let seconds = t.elapsed().as_secs_f64();
    let (pass, detail) = match outcome {
        Ok((dsam, deep_all, pre, rows)) => {
            let above = dsam - CHANCE >= 20.0 && deep_all - CHANCE >= 20.0;
            let parity = dsam >= deep_all - 1.0;
            let fast = seconds < 30.0 * 60.0;
            (
                above && parity && fast,
                format!(
                    "D-SAM {dsam:.2} vs Deep All {deep_all:.2} (need >= {:.2}: {}); both >= chance + 20 ({:.1}): {}; \
                     under 30 min: {fast}; auxiliary pretraining val {pre:.1}; {rows}",
                    deep_all - 1.0,
                    if parity { "met" } else { "not met" },
                    CHANCE + 20.0,
                    if above { "met" } else { "not met" },
                ),
            )
        }
        Err(e) => (false, format!("experiment failed: {e}")),
    };
    if let Some(k) = keep {
        println!("desk run directories kept under {}", k.display());
    }
    Check {
        name: "desk-scale DG experiment",
        pass,
        detail,
        seconds,
    }
}

/// Runs a full-scale rotate-all experiment when a dataset root and converted
/// backbone weights are supplied through the environment.
fn full_scale(backbone: &str, weights_var: &str, expected: f64) -> Check {
    let t = Instant::now();
    let name = if backbone == "resnet18" {
        "full-scale ResNet-18 rotate-all"
    } else {
        "full-scale AlexNet rotate-all"
    };
    let root = std::env::var_os("DSAM_PACS_ROOT");
    let weights = std::env::var_os(weights_var);
    let (Some(root), Some(weights)) = (root, weights) else {
        return Check {
            name,
            pass: false,
            detail: format!("not run: set DSAM_PACS_ROOT and {weights_var} (target {expected:.2} +/- 2.0)"),
            seconds: 0.0,
        };
    };
    let out = std::env::var_os("DSAM_FULL_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join(format!("dsam-full-{backbone}")));
    let train = if backbone == "resnet18" {
        TrainConfig::resnet()
    } else {
        TrainConfig::alexnet()
    };
    let toml = format!(
        r#"
output_dir = {out:?}
target = "rotate-all"

[dataset]
kind = "directory"
root = {root:?}

[backbone]
kind = "{backbone}"
weights = {weights:?}

[train]
base_lr = {}
"#,
        train.base_lr,
        out = out.display().to_string(),
        root = PathBuf::from(root).display().to_string(),
        weights = PathBuf::from(weights).display().to_string(),
    );
    let result = ExperimentConfig::from_toml(&toml)
        .and_then(Experiment::from_config)
        .and_then(|exp| {
            cmd_train(&exp)?;
            cmd_eval(&exp)
        });
    let (pass, detail) = match result {
        Ok(r) => (
            (r.average - expected).abs() <= 2.0,
            format!("average {:.2} vs {expected:.2} +/- 2.0", r.average),
        ),
        Err(e) => (false, format!("failed: {e}")),
    };
    Check {
        name,
        pass,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

/// Written straight to stdout so the lines survive the test harness's
/// output capture.
fn report(checks: &[Check]) {
    let mut out = std::io::stdout().lock();
    let passed = checks.iter().filter(|c| c.pass).count();
    let _ = writeln!(out, "\n==== acceptance ====");
    for c in checks {
        let _ = writeln!(out, "{}", c.line());
    }
    let _ = writeln!(out, "==== {passed}/{} passed ====\n", checks.len());
}

#[test]
fn acceptance() {
    let checks = vec![
        common::routing_suite(5),
        common::loss_gradient_suite(),
        common::schedule_protocol_suite(),
        common::fc_collapse_suite(100),
        common::feature_contract_suite(),
        desk_experiment(),
        Check {
            name: "full-scale (optional)",
            pass: false,
            detail: "not run by default; needs a PACS-layout dataset and converted weights, \
                     see `acceptance_full_scale` (--ignored)"
                .into(),
            seconds: 0.0,
        },
    ];
    report(&checks);
}

/// Full-scale checks are hours of GPU-class work; run with `--ignored`.
#[test]
#[ignore]
fn acceptance_full_scale() {
    report(&[
        full_scale("resnet18", "DSAM_RESNET18_WEIGHTS", 80.72),
        full_scale("alexnet", "DSAM_ALEXNET_WEIGHTS", 71.20),
    ]);
}
