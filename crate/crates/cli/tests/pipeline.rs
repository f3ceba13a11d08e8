use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use geodiff::backbone::{BackboneConfig, TrainConfig};
use geodiff::codec::{CodecConfig, CodecTrainOptions};
use geodiff::diffusion::ScheduleConfig;
use geodiff::optim::AdamWConfig;
use serde_json::{json, Value};

fn geodiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geodiff"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = geodiff(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = json!({
        "tiles": 30,
        "codec": CodecConfig { downsample_factor: 4, latent_channels: 1, hidden: vec![4, 4, 4], kl_weight: 1e-6, seed: 0 },
        "codec_train": CodecTrainOptions { steps: 2, batch: 2, lr: 1e-3, warmup_steps: 1, seed: 0 },
        "backbone": BackboneConfig { layers: 2, dim: 16, heads: 2, mlp_ratio: 2, zero_init_heads: true },
        "schedule": ScheduleConfig::shortened(50),
        "train": TrainConfig { batch: 4, steps: 6, ema_decay: 0.9, optim: AdamWConfig { warmup_steps: 2, ..AdamWConfig::default() } },
        "samples": 2,
        "eval_tiles": 2,
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

/// Runs dataset → codec → latents → train → sample → tile-level eval under `root`.
fn pipeline(root: &Path, config: &Path) {
    let p = |s: &str| root.join(s).to_str().unwrap().to_string();
    let c = config.to_str().unwrap();
    let base = ["--config", c, "--seed", "7"];
    let run = |rest: &[&str]| ok(&[&base[..], rest].concat());
    run(&["dataset", "--out", &p("data")]);
    run(&[
        "train-codec",
        "--dataset",
        &p("data"),
        "--unit",
        "DEM",
        "--out",
        &p("codecs"),
    ]);
    run(&[
        "preencode",
        "--dataset",
        &p("data"),
        "--codecs",
        &p("codecs"),
        "--out",
        &p("latents"),
    ]);
    run(&["train", "--latents", &p("latents"), "--out", &p("ckpt")]);
    let model = [
        "--checkpoint",
        &p("ckpt"),
        "--latents",
        &p("latents"),
        "--codecs",
        &p("codecs"),
    ];
    run(&[
        &["sample"][..],
        &model,
        &["--condition", "DEM,LULC", "--out", &p("ens")],
    ]
    .concat());
    run(&[
        "eval",
        "--protocol",
        "tile-level",
        "--ensemble",
        &p("ens"),
        "--dataset",
        &p("data"),
        "--out",
        &p("eval"),
    ]);
}

#[test]
fn pipeline_runs_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline(&a, &config);
    pipeline(&b, &config);
    for f in [
        "data/manifest.json",
        "codecs/DEM.bin",
        "latents/manifest.json",
        "ckpt/losses.csv",
        "ckpt/manifest.json",
        "ens/manifest.json",
        "eval/metrics.csv",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs between reruns"
        );
    }
    let run: Value = serde_json::from_slice(&fs::read(a.join("ckpt/run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "train");
    assert_eq!(run["seed"], 7);
    assert!(run["inputs"]["latents"].is_string());
    let metrics = fs::read_to_string(a.join("eval/metrics.csv")).unwrap();
    assert!(metrics.starts_with("tile,sample,seed,unit,metric,value"));
    assert!(metrics.contains("S2L2A.10m,mae"));
    assert!(
        !metrics.contains("DEM,"),
        "conditioned units are not scored"
    );
}

#[test]
fn remaining_protocols_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path());
    let root = tmp.path();
    pipeline(root, &config);
    let p = |s: &str| root.join(s).to_str().unwrap().to_string();
    let c = config.to_str().unwrap();
    ok(&[
        "--config",
        c,
        "sample",
        "--checkpoint",
        &p("ckpt"),
        "--latents",
        &p("latents"),
        "--codecs",
        &p("codecs"),
        "--n",
        "3",
        "--tiles",
        "1",
        "--out",
        &p("uncond"),
    ]);
    for (protocol, file) in [
        ("peak", "peak.csv"),
        ("spectral", "spectral.csv"),
        ("latlon", "latlon.json"),
    ] {
        let out = p(&format!("eval-{protocol}"));
        ok(&[
            "--config",
            c,
            "eval",
            "--protocol",
            protocol,
            "--ensemble",
            &p("uncond"),
            "--dataset",
            &p("data"),
            "--out",
            &out,
        ]);
        assert!(Path::new(&out).join(file).exists(), "{protocol}");
        assert!(Path::new(&out).join("run.json").exists());
    }
    let model = [
        "--checkpoint",
        &p("ckpt"),
        "--latents",
        &p("latents"),
        "--codecs",
        &p("codecs"),
    ];
    for (protocol, file) in [("leave-one-out", "loo.csv"), ("narrowing", "narrowing.csv")] {
        let out = p(protocol);
        ok(&[
            &[
                "--config",
                c,
                "eval",
                "--protocol",
                protocol,
                "--dataset",
                &p("data"),
            ][..],
            &model,
            &[
                "--target",
                "S2L2A.10m",
                "--n",
                "2",
                "--tiles",
                "1",
                "--out",
                &out,
            ],
        ]
        .concat());
        assert!(Path::new(&out).join(file).exists(), "{protocol}");
    }
    let rows = fs::read_to_string(root.join("narrowing/narrowing.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 4 * 4, "four rungs of four bands");
}

fn error_of(out: &Output) -> (i32, Value) {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    (
        out.status.code().unwrap(),
        serde_json::from_str(line).unwrap_or(Value::Null),
    )
}

#[test]
fn overlapping_spec_is_rejected_before_loading_anything() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing").to_str().unwrap().to_string();
    let out = geodiff(&[
        "sample",
        "--checkpoint",
        &missing,
        "--latents",
        &missing,
        "--condition",
        "DEM",
        "--generate",
        "DEM,SAR",
        "--out",
        &missing,
    ]);
    let (code, err) = error_of(&out);
    assert_eq!(code, 2);
    assert_eq!(err["error"], "invalid_spec");
    assert!(err["message"].as_str().unwrap().contains("DEM"));
    assert!(!tmp.path().join("nothing").exists());
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d").to_str().unwrap().to_string();
    let (code, err) = error_of(&geodiff(&["--threads", "4", "dataset", "--out", &d]));
    assert_eq!((code, err["error"].as_str()), (2, Some("invalid_input")));
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"tiles": 5, "unknown": 1}"#).unwrap();
    let (code, _) = error_of(&geodiff(&[
        "--config",
        bad.to_str().unwrap(),
        "dataset",
        "--out",
        &d,
    ]));
    assert_eq!(code, 2);
    let (code, err) = error_of(&geodiff(&[
        "eval",
        "--protocol",
        "tile-level",
        "--dataset",
        &d,
        "--out",
        &d,
    ]));
    assert_eq!((code, err["error"].as_str()), (4, Some("io")));
}

#[test]
fn tampered_dataset_is_an_integrity_error() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path());
    let c = config.to_str().unwrap();
    let data = tmp.path().join("data");
    ok(&["--config", c, "dataset", "--out", data.to_str().unwrap()]);
    fs::write(data.join("tiles/00000.bin"), b"junk").unwrap();
    let out = tmp.path().join("lat");
    let (code, err) = error_of(&geodiff(&[
        "--config",
        c,
        "preencode",
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!((code, err["error"].as_str()), (3, Some("integrity")));
}
