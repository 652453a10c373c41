mod common;

use std::sync::Arc;

use axum::http::StatusCode;
use common::{assert_candidates, call, harness};
use dir_tir_core::{Engine, EngineSettings, Error, ImageId, OracleSuite, SessionMode, SessionState, MAX_ROUNDS};
use proptest::prelude::*;
use serde_json::json;

#[derive(Debug, Clone)]
enum Op {
    Answer(bool),
    Discrepancy(bool),
    Select(bool),
    Candidates,
    Transcript,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        6 => any::<bool>().prop_map(Op::Answer),
        6 => any::<bool>().prop_map(Op::Discrepancy),
        1 => any::<bool>().prop_map(Op::Select),
        2 => Just(Op::Candidates),
        1 => Just(Op::Transcript),
    ]
}

/// HTTP status the state machine's verdict should map to.
fn expected<T>(r: &Result<T, Error>) -> StatusCode {
    match r {
        Ok(_) => StatusCode::OK,
        Err(Error::WrongPhase(_)) => StatusCode::CONFLICT,
        Err(Error::SessionComplete) => StatusCode::GONE,
        Err(Error::EmptyResponse(_) | Error::UnknownTarget(_)) => StatusCode::BAD_REQUEST,
        Err(e) => panic!("unexpected verdict {e}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn http_status_mirrors_state_machine(ops in prop::collection::vec(op(), 1..60)) {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
        rt.block_on(async {
            let h = harness(3);
            let shadow = Engine::new(
                Arc::new(h.world.gallery()),
                OracleSuite::synthetic(h.world.clone()),
                EngineSettings::default(),
            )
            .unwrap();
            let r = call(&h.router, "POST", "/sessions", Some(json!({"description": "object"}))).await;
            assert_eq!(r.status, StatusCode::CREATED);
            let id = r.json()["session_id"].as_str().unwrap().to_string();
            let mut s: SessionState = shadow
                .open_session_as(&id, "object", SessionMode::Live, None, 0)
                .unwrap();
            let q = shadow.pose_question(&mut s).unwrap();
            assert_eq!(r.json()["question"].as_str().unwrap(), q.question);

            for op in ops {
                let (status, body) = match &op {
                    Op::Answer(ok) => {
                        let text = if *ok { "color=red" } else { " " };
                        let want = expected(&shadow.submit_answer(&mut s, text));
                        let r = call(&h.router, "POST", &format!("/sessions/{id}/answer"), Some(json!({"text": text}))).await;
                        assert_eq!(r.status, want, "{op:?}");
                        (r.status, r.json())
                    }
                    Op::Discrepancy(ok) => {
                        let text = if *ok { "shape: sphere not cube" } else { "" };
                        let want = expected(&shadow.submit_discrepancy(&mut s, text));
                        let r = call(&h.router, "POST", &format!("/sessions/{id}/discrepancy"), Some(json!({"text": text}))).await;
                        assert_eq!(r.status, want, "{op:?}");
                        (r.status, r.json())
                    }
                    Op::Select(ok) => {
                        let pick = if *ok { "img_000" } else { "img_9" };
                        let want = expected(&shadow.select_candidate(&mut s, &ImageId::new(pick)));
                        let r = call(&h.router, "POST", &format!("/sessions/{id}/select"), Some(json!({"image_id": pick}))).await;
                        assert_eq!(r.status, want, "{op:?}");
                        (r.status, r.json())
                    }
                    Op::Candidates => {
                        let want = if s.latest_candidates().is_some() { StatusCode::OK } else { StatusCode::CONFLICT };
                        let r = call(&h.router, "GET", &format!("/sessions/{id}/candidates"), None).await;
                        assert_eq!(r.status, want);
                        (r.status, r.json())
                    }
                    Op::Transcript => {
                        let r = call(&h.router, "GET", &format!("/sessions/{id}"), None).await;
                        assert_eq!(r.status, StatusCode::OK);
                        assert_eq!(r.json()["turns"].as_array().unwrap().len(), s.turns.len());
                        assert_eq!(r.json()["status"], s.status.as_str());
                        (r.status, r.json())
                    }
                };
                if status == StatusCode::OK && body.get("candidates").is_some() {
                    assert_candidates(&body["candidates"]);
                }
                assert!(s.turns.len() <= MAX_ROUNDS);
            }
            let stored = h.app.engine().store().unwrap().load(&id).unwrap();
            assert_eq!(stored.turns, s.turns);
            assert_eq!(stored.status, s.status);
        });
    }
}
