use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use comrp_core::clustering::{cluster, ClusterConfig, ClusterMethod, ClusterModel};
use comrp_core::labeling::{read_merge_map, LabelMap};
use comrp_core::masks::Bitmask;
use comrp_core::metrics::evaluate_dirs;
use comrp_core::pipeline::{extract_baseline, rasterize_all, write_labels, Dataset};
use comrp_core::synth::{generate, oracle_merge, MaskNoise, SynthConfig, SynthDataset};
use comrp_core::{MergeMap, MergeTarget};
use comrp_server::{router, AppState, ClusterInfo, MergeMapResponse, MetricsResponse, SessionConfig};
use http_body_util::BodyExt;
use tower::ServiceExt;

struct Fixture {
    dir: tempfile::TempDir,
    ds: SynthDataset,
    data: Dataset,
    model: ClusterModel,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(&SynthConfig {
        seed: 11,
        n_images: 4,
        image_size: 96,
        mask_noise: MaskNoise {
            split_prob: 0.0,
            dilate_px: 0,
        },
        ..Default::default()
    })
    .unwrap();
    ds.write(dir.path()).unwrap();
    let data = Dataset::load(&dir.path().join("manifest.json"), &dir.path().join("masks")).unwrap();
    let pack = extract_baseline(&data).unwrap();
    let model = cluster(
        &pack,
        &ClusterConfig {
            method: ClusterMethod::Kmeans,
            k: 6,
            seed: 1,
            ..Default::default()
        },
    )
    .unwrap();
    std::fs::write(dir.path().join("model.json"), serde_json::to_vec(&model).unwrap()).unwrap();
    Fixture { dir, ds, data, model }
}

impl Fixture {
    fn oracle(&self) -> MergeMap {
        oracle_merge(&self.model, &self.ds.mask_classes(), self.ds.config.class_names(), 0.0)
    }

    fn gt(&self) -> Vec<LabelMap> {
        self.ds.images.iter().map(|i| i.gt.clone()).collect()
    }

    fn app(&self, merge: MergeMap, with_gt: bool) -> Router {
        let state = AppState::new(
            self.model.clone(),
            self.data.clone(),
            merge,
            with_gt.then(|| self.gt()),
            self.dir.path().join("merge.json"),
        );
        router(Arc::new(state), None)
    }
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn put_merge(app: &Router, merge: &MergeMap, if_match: Option<&str>) -> (StatusCode, serde_json::Value) {
    let mut req = Request::put("/api/mergemap").header("content-type", "application/json");
    if let Some(rev) = if_match {
        req = req.header("if-match", rev);
    }
    let (status, body) = send(app, req.body(Body::from(serde_json::to_vec(merge).unwrap())).unwrap()).await;
    (status, serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null))
}

fn decode_rgb(bytes: &[u8]) -> image::RgbImage {
    image::load_from_memory(bytes).unwrap().to_rgb8()
}

#[tokio::test]
async fn clusters_cover_every_region() {
    let fx = fixture();
    let app = fx.app(fx.oracle(), false);
    let (status, body) = get(&app, "/api/clusters").await;
    assert_eq!(status, StatusCode::OK);
    let clusters: Vec<ClusterInfo> = serde_json::from_slice(&body).unwrap();
    assert_eq!(clusters.len(), fx.model.n_clusters());
    assert_eq!(clusters.iter().map(|c| c.size).sum::<usize>(), fx.data.masks.len());
    assert!(clusters.iter().all(|c| !c.exemplars.is_empty() && c.mapping.is_some()));
}

#[tokio::test]
async fn empty_model_lists_nothing() {
    let model = ClusterModel {
        assignments: BTreeMap::new(),
        centroids: Vec::new(),
        config: ClusterConfig::default(),
        inertia: 0.0,
        exemplars: BTreeMap::new(),
    };
    let merge = MergeMap::discard_all(&model, vec![]);
    let dir = tempfile::tempdir().unwrap();
    let app = router(
        Arc::new(AppState::new(model, Dataset::default(), merge, None, dir.path().join("m.json"))),
        None,
    );
    let (status, body) = get(&app, "/api/clusters").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"[]");
}

#[tokio::test]
async fn crops() {
    let fx = fixture();
    let app = fx.app(fx.oracle(), false);
    let id = &fx.data.masks[0].mask_id;
    let uri = format!("/api/regions/{id}/crop.png");
    let (status, a) = get(&app, &uri).await;
    assert_eq!(status, StatusCode::OK);
    let img = decode_rgb(&a);
    assert!(img.width() <= 256 && img.height() <= 256);
    let (_, b) = get(&app, &uri).await;
    assert_eq!(a, b);
    let (status, _) = get(&app, "/api/regions/nope/crop.png").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn merge_map_optimistic_concurrency() {
    let fx = fixture();
    let app = fx.app(MergeMap::discard_all(&fx.model, fx.ds.config.class_names()), false);
    let (_, body) = get(&app, "/api/mergemap").await;
    let current: MergeMapResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(current.revision, 0);

    let oracle = fx.oracle();
    let (status, _) = put_merge(&app, &oracle, None).await;
    assert_eq!(status, StatusCode::PRECONDITION_REQUIRED);

    let (status, v) = put_merge(&app, &oracle, Some("\"0\"")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["revision"], 1);
    assert_eq!(read_merge_map(&fx.dir.path().join("merge.json")).unwrap(), oracle);

    let (status, v) = put_merge(&app, &oracle, Some("\"0\"")).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(v["revision"], 1);

    let mut partial = oracle.clone();
    partial.mapping.remove(&0);
    partial.mapping.remove(&2);
    let (status, v) = put_merge(&app, &partial, Some("1")).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["missing"], serde_json::json!([0, 2]));

    let (_, body) = get(&app, "/api/mergemap").await;
    let current: MergeMapResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!((current.revision, current.merge_map), (1, oracle));
}

#[tokio::test]
async fn preview_tints_only_labeled_pixels() {
    let fx = fixture();
    let image = &fx.ds.images[0];
    let uri = format!("/api/images/{}/preview", image.record.image_id);

    let discard = MergeMap::discard_all(&fx.model, fx.ds.config.class_names());
    let app = fx.app(discard.clone(), false);
    let (status, body) = get(&app, &uri).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(decode_rgb(&body), image.rgb);

    // road only: tinted pixels are exactly the union of road-cluster masks
    let oracle = fx.oracle();
    let mut road_only = discard;
    for (c, t) in &oracle.mapping {
        if *t == MergeTarget::Class(0) {
            road_only.mapping.insert(*c, MergeTarget::Class(0));
        }
    }
    let app = fx.app(road_only.clone(), false);
    let (_, body) = get(&app, &uri).await;
    let preview = decode_rgb(&body);
    let tinted = preview.pixels().zip(image.rgb.pixels()).filter(|(a, b)| a != b).count();
    let mut union = Bitmask::new(image.record.width, image.record.height);
    for m in &image.masks {
        if road_only.mapping[&fx.model.assignments[&m.mask_id]] == MergeTarget::Class(0) {
            union.union_with(&m.decode(&image.record).unwrap());
        }
    }
    assert!(tinted > 0);
    assert_eq!(tinted, union.area() as usize);

    // hiding the only class gives the plain image back
    let (_, body) = get(&app, &format!("{uri}?hide=0")).await;
    assert_eq!(decode_rgb(&body), image.rgb);

    let (status, _) = get(&app, "/api/images/missing/preview").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn preview_follows_revisions() {
    let fx = fixture();
    let app = fx.app(MergeMap::discard_all(&fx.model, fx.ds.config.class_names()), false);
    let uri = format!("/api/images/{}/preview", fx.ds.images[1].record.image_id);
    let (_, before) = get(&app, &uri).await;
    let (status, _) = put_merge(&app, &fx.oracle(), Some("0")).await;
    assert_eq!(status, StatusCode::OK);
    let (_, after) = get(&app, &uri).await;
    assert_ne!(before, after);
}

#[tokio::test]
async fn metrics_match_batch_evaluation() {
    let fx = fixture();
    let oracle = fx.oracle();
    let (status, _) = get(&fx.app(oracle.clone(), false), "/api/metrics").await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let app = fx.app(oracle.clone(), true);
    let (status, body) = get(&app, "/api/metrics").await;
    assert_eq!(status, StatusCode::OK);
    let served: MetricsResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(served.report.miou, 100.0);
    assert_eq!(served.report.pixel_accuracy, 100.0);

    let labels = rasterize_all(&fx.data, &fx.model, &oracle).unwrap();
    let pred_dir = fx.dir.path().join("pred");
    write_labels(&pred_dir, &labels).unwrap();
    let batch = evaluate_dirs(&fx.dir.path().join("gt"), &pred_dir, 5).unwrap().report().unwrap();
    assert_eq!(served.report, batch);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_reads_see_whole_revisions() {
    let fx = fixture();
    let base = MergeMap::discard_all(&fx.model, fx.ds.config.class_names());
    let app = fx.app(base.clone(), false);
    let versions: Vec<MergeMap> = (1..=20)
        .map(|r| MergeMap {
            created_by: format!("rev{r}"),
            ..fx.oracle()
        })
        .collect();

    let writer = {
        let app = app.clone();
        tokio::spawn(async move {
            for (i, m) in versions.iter().enumerate() {
                let (status, _) = put_merge(&app, m, Some(&i.to_string())).await;
                assert_eq!(status, StatusCode::OK);
            }
        })
    };
    let readers: Vec<_> = (0..8)
        .map(|_| {
            let app = app.clone();
            tokio::spawn(async move {
                let mut last = 0;
                for _ in 0..50 {
                    let (_, body) = get(&app, "/api/mergemap").await;
                    let r: MergeMapResponse = serde_json::from_slice(&body).unwrap();
                    assert!(r.revision >= last);
                    last = r.revision;
                    let expected = if r.revision == 0 { String::new() } else { format!("rev{}", r.revision) };
                    assert_eq!(r.merge_map.created_by, expected);
                }
            })
        })
        .collect();
    writer.await.unwrap();
    for r in readers {
        r.await.unwrap();
    }
}

#[tokio::test]
async fn session_loads_from_files() {
    let fx = fixture();
    let cfg = SessionConfig {
        model: fx.dir.path().join("model.json"),
        manifest: fx.dir.path().join("manifest.json"),
        masks: fx.dir.path().join("masks"),
        merge: fx.dir.path().join("merge.json"),
        classes: fx.ds.config.class_names(),
        gt: Some(fx.dir.path().join("gt")),
    };
    let state = AppState::load(&cfg).unwrap();
    assert_eq!(state.revision(), 0);
    let ui = fx.dir.path().join("ui");
    std::fs::create_dir_all(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<html></html>").unwrap();
    let app = router(Arc::new(state), Some(Path::new(&ui)));
    let (status, body) = get(&app, "/index.html").await;
    assert_eq!((status, body.as_slice()), (StatusCode::OK, &b"<html></html>"[..]));
    let (status, body) = get(&app, "/api/mergemap").await;
    assert_eq!(status, StatusCode::OK);
    let r: MergeMapResponse = serde_json::from_slice(&body).unwrap();
    assert!(r.merge_map.mapping.values().all(|t| *t == MergeTarget::Discard));
}
