use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use vbquant_core::phantom::CohortSpec;
use vbquant_core::trainer::Hyperparams;
use vbquant_core::vbnet::VbNetConfig;
use vbquant_core::volume::{window_value, LUNG_WINDOW_LEVEL, LUNG_WINDOW_WIDTH};
use vbquant_hitl::api::{router, AppState, ProposalBody, SessionStatus, SliceRle};
use vbquant_hitl::render::{quantize, slice_indices, Axis};
use vbquant_hitl::rle::encode_runs;
use vbquant_hitl::sim::{drive, sim_setup, SimAnnotator, SimConfig};
use vbquant_hitl::{time_report, HitlSession, IterationRecord, MaskRle, SessionState, TimeReport};

fn tiny() -> SimConfig {
    SimConfig {
        session_id: "s1".into(),
        cohort: CohortSpec {
            dims: [32; 3],
            lesions: (2, 3),
            radius_fraction: (0.1, 0.15),
            ..CohortSpec::default()
        },
        seed: 11,
        batch_sizes: vec![1, 2, 2],
        holdout: 2,
        model: VbNetConfig {
            levels: 2,
            channels_per_level: vec![4, 8],
            blocks_per_level: vec![1, 1],
            bottleneck_ratio: 2,
            ..VbNetConfig::default()
        },
        hyper: Hyperparams {
            epochs: 2,
            patch_size: [16; 3],
            patches_per_volume: 2,
            ..Hyperparams::default()
        },
        ..SimConfig::default()
    }
}

fn app(cfg: &SimConfig) -> (Router, SimAnnotator) {
    let (config, data, truths) = sim_setup(cfg).unwrap();
    let state = AppState::new();
    state.insert(HitlSession::new(config, Arc::new(data)).unwrap());
    let a = SimAnnotator {
        truths,
        corrector: cfg.corrector,
        seed: cfg.seed,
    };
    (router(state), a)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&b).unwrap())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let code = resp.status();
    (code, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn status(app: &Router) -> SessionStatus {
    let (code, body) = call(app, "GET", "/sessions/s1", None).await;
    assert_eq!(code, StatusCode::OK);
    serde_json::from_slice(&body).unwrap()
}

async fn wait_idle(app: &Router) -> SessionStatus {
    loop {
        let s = status(app).await;
        if !s.training {
            return s;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

/// Drive the whole loop through HTTP with the simulated annotator.
async fn scripted_loop(app: &Router, a: &SimAnnotator) -> (Vec<IterationRecord>, TimeReport) {
    loop {
        let s = wait_idle(app).await;
        assert_eq!(s.last_error, None);
        match s.state {
            SessionState::AwaitingAnnotation { batch } => {
                for id in &s.batches[batch] {
                    let (m, secs) = a.annotate(id).unwrap();
                    let body = json!({ "mask_rle": MaskRle::encode(&m), "seconds": secs, "editor": "simulated" });
                    let (code, _) = call(app, "POST", &format!("/sessions/s1/volumes/{id}/annotations"), Some(body)).await;
                    assert_eq!(code, StatusCode::OK);
                }
            }
            SessionState::Training { .. } => {
                let (code, _) = call(app, "POST", "/sessions/s1/iterate", None).await;
                assert_eq!(code, StatusCode::ACCEPTED);
                let (again, _) = call(app, "POST", "/sessions/s1/iterate", None).await;
                assert_eq!(again, StatusCode::CONFLICT);
            }
            SessionState::ServingProposals { batch } => {
                for id in &s.batches[batch] {
                    let (code, body) = call(app, "GET", &format!("/sessions/s1/volumes/{id}/proposal"), None).await;
                    assert_eq!(code, StatusCode::OK);
                    let p: ProposalBody = serde_json::from_slice(&body).unwrap();
                    let truth = &a.truths[id];
                    let proposal = p.mask_rle.decode(truth.geometry()).unwrap();
                    let (c, secs) = a.correct(id, &proposal, p.proposal_ref).unwrap();
                    let body = json!({
                        "mask_rle": MaskRle::encode(&c),
                        "seconds": secs,
                        "proposal_ref": p.proposal_ref,
                        "editor": "simulated",
                    });
                    let (code, _) = call(app, "POST", &format!("/sessions/s1/volumes/{id}/corrections"), Some(body)).await;
                    assert_eq!(code, StatusCode::OK);
                }
            }
            SessionState::Converged => {
                let (code, body) = call(app, "GET", "/sessions/s1/report", None).await;
                assert_eq!(code, StatusCode::OK);
                return (s.iterations, serde_json::from_slice(&body).unwrap());
            }
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn http_loop_matches_in_process_run() {
    let cfg = tiny();
    let (app, a) = app(&cfg);
    let fresh = status(&app).await;
    assert_eq!(fresh.state, SessionState::AwaitingAnnotation { batch: 0 });
    assert!(fresh.iterations.is_empty());
    let (code, _) = call(&app, "GET", "/sessions/s1/report", None).await;
    assert_eq!(code, StatusCode::CONFLICT);

    let (http_iters, http_report) = scripted_loop(&app, &a).await;

    let (config, data, truths) = sim_setup(&cfg).unwrap();
    let mut s = HitlSession::new(config, Arc::new(data)).unwrap();
    drive(&mut s, &SimAnnotator { truths, ..a }).unwrap();
    assert!(!http_iters.is_empty());
    assert_eq!(http_iters, s.iterations());
    assert_eq!(http_report, time_report(&s).unwrap());
}

#[tokio::test]
async fn error_statuses() {
    let cfg = tiny();
    let (app, a) = app(&cfg);
    let s = status(&app).await;
    let b0 = s.batches[0][0].clone();
    let b1 = s.batches[1][0].clone();
    assert_eq!(call(&app, "GET", "/sessions/zz", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/sessions/s1/volumes/zz/slices/z/0", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", &format!("/sessions/s1/volumes/{b0}/proposal"), None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "POST", "/sessions/s1/iterate", None).await.0, StatusCode::CONFLICT);
    let (m, secs) = a.annotate(&b0).unwrap();
    let wrong_batch = json!({ "mask_rle": MaskRle::encode(&m), "seconds": secs });
    assert_eq!(
        call(&app, "POST", &format!("/sessions/s1/volumes/{b1}/annotations"), Some(wrong_batch)).await.0,
        StatusCode::CONFLICT
    );
    let mut bad = MaskRle::encode(&m);
    bad.slices.pop();
    let body = json!({ "mask_rle": bad, "seconds": 1.0 });
    assert_eq!(
        call(&app, "POST", &format!("/sessions/s1/volumes/{b0}/annotations"), Some(body)).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    let body = json!({ "mask_rle": MaskRle::encode(&m), "seconds": 1.0, "proposal_ref": 1 });
    assert_eq!(
        call(&app, "POST", &format!("/sessions/s1/volumes/{b0}/corrections"), Some(body)).await.0,
        StatusCode::CONFLICT
    );
    assert_eq!(
        call(&app, "GET", &format!("/sessions/s1/volumes/{b0}/slices/w/0"), None).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    assert_eq!(
        call(&app, "GET", &format!("/sessions/s1/volumes/{b0}/slices/z/99"), None).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
}

#[tokio::test]
async fn slice_png_matches_window_mapping() {
    let cfg = tiny();
    let (config, data, _) = sim_setup(&cfg).unwrap();
    let vid = config.batches[0][0].clone();
    let volume = data.volumes[&vid].clone();
    let (app, _) = app(&cfg);
    for (axis, index, level, width) in [(Axis::Z, 16, LUNG_WINDOW_LEVEL, LUNG_WINDOW_WIDTH), (Axis::X, 5, 40.0, 350.0)] {
        let name = match axis {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        };
        let uri = format!("/sessions/s1/volumes/{vid}/slices/{name}/{index}?level={level}&width={width}");
        let (code, bytes) = call(&app, "GET", &uri, None).await;
        assert_eq!(code, StatusCode::OK);
        let dec = png::Decoder::new(bytes.as_slice());
        let mut reader = dec.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).unwrap();
        let (w, h, idx) = slice_indices(volume.dims(), axis, index).unwrap();
        assert_eq!((info.width as usize, info.height as usize), (w, h));
        let expect: Vec<u8> = idx.iter().map(|&i| quantize(window_value(volume.data()[i], level, width))).collect();
        assert_eq!(&buf[..info.buffer_size()], expect.as_slice());
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn proposal_slices_agree_with_the_volume_mask() {
    let cfg = SimConfig {
        batch_sizes: vec![1, 1],
        ..tiny()
    };
    let (app, a) = app(&cfg);
    let s = status(&app).await;
    let b0 = s.batches[0][0].clone();
    let (m, secs) = a.annotate(&b0).unwrap();
    let body = json!({ "mask_rle": MaskRle::encode(&m), "seconds": secs });
    call(&app, "POST", &format!("/sessions/s1/volumes/{b0}/annotations"), Some(body)).await;
    assert_eq!(call(&app, "POST", "/sessions/s1/iterate", None).await.0, StatusCode::ACCEPTED);
    let s = wait_idle(&app).await;
    let vid = match s.state {
        SessionState::ServingProposals { batch } => s.batches[batch][0].clone(),
        other => panic!("unexpected state {other:?}"),
    };
    let (_, body) = call(&app, "GET", &format!("/sessions/s1/volumes/{vid}/proposal"), None).await;
    let whole: ProposalBody = serde_json::from_slice(&body).unwrap();
    let voxels = whole.mask_rle.voxels().unwrap();
    let mut total = 0;
    for z in 0..whole.mask_rle.dims[2] {
        let (_, body) = call(&app, "GET", &format!("/sessions/s1/volumes/{vid}/proposal?axis=z&index={z}"), None).await;
        let sl: SliceRle = serde_json::from_slice(&body).unwrap();
        assert_eq!(sl.runs, whole.mask_rle.slices[z]);
        total += sl.runs.iter().map(|r| r[1]).sum::<usize>();
    }
    assert_eq!(total, voxels.iter().filter(|&&v| v).count());
    let (_, body) = call(&app, "GET", &format!("/sessions/s1/volumes/{vid}/proposal?axis=y&index=7"), None).await;
    let sl: SliceRle = serde_json::from_slice(&body).unwrap();
    let (_, _, idx) = slice_indices(whole.mask_rle.dims, Axis::Y, 7).unwrap();
    let px: Vec<bool> = idx.iter().map(|&i| voxels[i]).collect();
    assert_eq!(sl.runs, encode_runs(&px));

    // stale proposal reference
    let body = json!({ "mask_rle": whole.mask_rle, "seconds": 1.0, "proposal_ref": 5 });
    assert_eq!(
        call(&app, "POST", &format!("/sessions/s1/volumes/{vid}/corrections"), Some(body)).await.0,
        StatusCode::CONFLICT
    );
    let body = json!({ "mask_rle": whole.mask_rle, "seconds": 1.0, "proposal_ref": whole.proposal_ref });
    let (code, body) = call(&app, "POST", &format!("/sessions/s1/volumes/{vid}/corrections"), Some(body)).await;
    assert_eq!(code, StatusCode::OK);
    let ack: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(ack["edit_cost"], 0);
}
