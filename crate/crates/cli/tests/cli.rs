use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_comrp");

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("COMRP_TRAINER_CMD")
        .env_remove("COMRP_PREDICTOR_CMD")
        .output()
        .expect("spawn comrp");
    assert!(
        out.status.success(),
        "comrp {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn synth(dir: &Path, n: &str, split: &str) -> PathBuf {
    run(dir, &["synth", "--seed", "3", "--n", n, "--size", "160", "--split-prob", split, "--out", "ds"]);
    dir.join("ds")
}

#[test]
fn pipeline_reaches_full_miou_on_clean_masks() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "8", "0");
    run(d, &["masks", "validate", "--manifest", "ds/manifest.json", "--masks", "ds/masks"]);
    run(d, &["features", "extract-baseline", "--manifest", "ds/manifest.json", "--masks", "ds/masks", "--out", "f.cmrp"]);
    let v: serde_json::Value =
        serde_json::from_slice(&run(d, &["features", "validate", "f.cmrp"]).stdout).unwrap();
    assert_eq!(v["dim"], 152);
    run(d, &["--threads", "2", "cluster", "--features", "f.cmrp", "--method", "spectral", "--k", "6", "--out", "model.json"]);
    let model = json(d.join("model.json"));
    assert_eq!(model["assignments"].as_object().unwrap().len() as u64, v["count"].as_u64().unwrap());

    run(d, &["merge", "oracle", "--model", "model.json", "--mask-classes", "ds/mask_classes.json", "--classes", "ds/classes.json", "--out", "merge.json"]);
    run(d, &["rasterize", "--model", "model.json", "--merge", "merge.json", "--manifest", "ds/manifest.json", "--masks", "ds/masks", "--out", "labels"]);
    run(d, &["eval", "--gt", "ds/gt", "--pred", "labels", "--classes", "ds/classes.json", "--out", "metrics.json"]);
    let m = json(d.join("metrics.json"));
    let miou = m["miou"].as_f64().unwrap();
    assert!(miou > 99.0, "mIoU {miou}");
}

#[test]
fn crops_and_direct_extraction_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "3", "0");
    run(d, &["features", "crop", "--manifest", "ds/manifest.json", "--masks", "ds/masks", "--out", "crops"]);
    run(d, &["features", "extract-baseline", "--crops", "crops", "--out", "a.cmrp"]);
    run(d, &["features", "extract-baseline", "--manifest", "ds/manifest.json", "--masks", "ds/masks", "--out", "b.cmrp"]);
    let a = comrp_pack(d.join("a.cmrp"));
    let b = comrp_pack(d.join("b.cmrp"));
    assert_eq!(a.len(), b.len());
    for (id, row) in &b {
        // PNG crops are lossless, so the descriptors are identical
        assert_eq!(a.get(id), Some(row), "{id}");
    }
}

/// Region id -> row, parsed straight from the pack layout.
fn comrp_pack(path: PathBuf) -> std::collections::BTreeMap<String, Vec<u32>> {
    let bytes = std::fs::read(path).unwrap();
    assert_eq!(&bytes[..4], b"CMRP");
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..20 + dim * count * 4];
    let trailer_len = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap()) as usize;
    let trailer: serde_json::Value =
        serde_json::from_slice(&bytes[bytes.len() - 8 - trailer_len..bytes.len() - 8]).unwrap();
    let ids = trailer["region_ids"].as_array().unwrap();
    ids.iter()
        .enumerate()
        .map(|(i, id)| {
            let row = body[i * dim * 4..(i + 1) * dim * 4]
                .chunks(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            (id.as_str().unwrap().to_string(), row)
        })
        .collect()
}

#[test]
fn filter_drops_small_masks() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "4", "0");
    run(d, &["masks", "filter", "--manifest", "ds/manifest.json", "--masks", "ds/masks", "--theta", "600", "--out", "big"]);
    let mut kept = 0;
    for e in std::fs::read_dir(d.join("big")).unwrap() {
        let v = json(e.unwrap().path());
        for m in v["masks"].as_array().unwrap() {
            assert!(m["area"].as_u64().unwrap() > 600);
            kept += 1;
        }
    }
    let cov: serde_json::Value = serde_json::from_slice(
        &run(d, &["masks", "coverage", "--manifest", "ds/manifest.json", "--masks", "ds/masks", "--theta", "600"]).stdout,
    )
    .unwrap();
    assert!(cov.is_object());
    assert!(kept > 0);
}

#[test]
fn merge_init_discards_every_cluster() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "3", "0");
    run(d, &["features", "extract-baseline", "--manifest", "ds/manifest.json", "--masks", "ds/masks", "--out", "f.cmrp"]);
    run(d, &["cluster", "--features", "f.cmrp", "--method", "kmeans", "--k", "4", "--out", "model.json"]);
    run(d, &["merge", "init", "--model", "model.json", "--classes", "ds/classes.json", "--out", "merge.json"]);
    let m = json(d.join("merge.json"));
    let map = m["mapping"].as_object().unwrap();
    assert_eq!(map.len(), 4);
    assert!(map.values().all(|v| v == "DISCARD"));
    run(d, &["rasterize", "--model", "model.json", "--merge", "merge.json", "--manifest", "ds/manifest.json", "--masks", "ds/masks", "--out", "labels"]);
    let png = image::open(d.join("labels/img_0000.png")).unwrap().to_luma8();
    assert!(png.pixels().all(|p| p.0[0] == 255));
}

#[test]
fn tiles_cover_detections() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let img = image::RgbImage::from_fn(1000, 600, |x, y| image::Rgb([(x % 256) as u8, (y % 256) as u8, 7]));
    img.save(d.join("a.png")).unwrap();
    std::fs::write(
        d.join("manifest.json"),
        r#"[{"image_id":"a","width":1000,"height":600,"path":"a.png"}]"#,
    )
    .unwrap();
    std::fs::create_dir(d.join("det")).unwrap();
    std::fs::write(
        d.join("det/a.json"),
        r#"{"image_id":"a","resize_long_side":1000,"detections":[
            {"image_id":"a","box":[0.1,0.2,0.9,0.8],"score":0.9,"label":"road","keep":true},
            {"image_id":"a","box":[0.0,0.0,0.05,0.05],"score":0.2,"label":"road","keep":false}]}"#,
    )
    .unwrap();
    run(d, &["tile", "--manifest", "manifest.json", "--detections", "det", "--tile-size", "400", "--out", "tiles"]);
    let plans = json(d.join("tiles/plans.json"));
    let plans = plans.as_array().unwrap();
    assert_eq!(plans.len(), 1);
    let tiles = plans[0]["tiles"].as_array().unwrap();
    assert!(!tiles.is_empty());
    for t in tiles {
        let (x, y) = (t[0].as_u64().unwrap() as u32, t[1].as_u64().unwrap() as u32);
        let tile = image::open(d.join(format!("tiles/a_{x}_{y}.png"))).unwrap().to_rgb8();
        assert_eq!(tile.dimensions(), (400, 400));
        assert_eq!(tile.get_pixel(0, 0), img.get_pixel(x, y));
        assert_eq!(tile.get_pixel(399, 399), img.get_pixel(x + 399, y + 399));
    }
}

#[test]
fn loop_drives_external_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "6", "0");
    run(d, &["features", "extract-baseline", "--manifest", "ds/manifest.json", "--masks", "ds/masks", "--out", "f.cmrp"]);
    run(d, &["cluster", "--features", "f.cmrp", "--k", "6", "--out", "model.json"]);
    run(d, &["merge", "oracle", "--model", "model.json", "--mask-classes", "ds/mask_classes.json", "--classes", "ds/classes.json", "--out", "merge.json"]);
    run(d, &["rasterize", "--model", "model.json", "--merge", "merge.json", "--manifest", "ds/manifest.json", "--masks", "ds/masks", "--out", "labels0"]);
    let cfg = serde_json::json!({
        "max_iters": 2,
        "plateau_eps": -1000.0,
        "trainer_cmd": format!("{BIN} toy train --manifest {{manifest}} --labels {{labels}} --out {{out}}"),
        "predictor_cmd": format!("{BIN} toy predict --model {{model}} --images {{images}} --out {{out}}"),
        "dev_gt_dir": "ds/gt",
        "workdir": "work",
        "manifest": "ds/manifest.json",
        "n_classes": 5,
        "split_seed": 1,
        "val_fraction": 0.2
    });
    std::fs::write(d.join("loop.json"), serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    let out = run(d, &["loop", "--config", "loop.json", "--labels", "labels0"]);
    let outcome: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let records = outcome["records"].as_array().unwrap();
    assert_eq!(records.len(), 3);
    for r in records {
        assert!(r["metrics"]["miou"].as_f64().unwrap() > 0.0);
    }
    let log = std::fs::read_to_string(d.join("work/loop.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(d.join("work/iter_1/model/model.json").exists());
    assert!(d.join("work/iter_2/labels/img_0000.png").exists());

    // a second invocation resumes and adds nothing
    run(d, &["loop", "--config", "loop.json", "--labels", "labels0"]);
    assert_eq!(std::fs::read_to_string(d.join("work/loop.jsonl")).unwrap(), log);
}

#[test]
fn bad_input_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .args(["features", "validate", "missing.cmrp"])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Error"));

    let out = Command::new(BIN)
        .args(["cluster", "--features", "x", "--method", "nope", "--out", "y"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
