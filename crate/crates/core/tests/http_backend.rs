use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use fscs_core::canvas::{decode_mask_rle_base64, encode_image_png, BBox, Image, Rgb};
use fscs_core::toolkit::contract::{fixture_image, StubServer};
use fscs_core::toolkit::{
    call, Budget, CallContext, HttpBackend, HttpConfig, ManualClock, Payload, ResponseBody, RetryPolicy,
    SegmentQuery, ToolError, ToolKind, ToolRequest, ToolStatus, VisionQuery,
};

fn chat(text: &str) -> ToolRequest {
    ToolRequest {
        tool: ToolKind::Chat,
        payload: Payload::Chat { text: text.into() },
        budget: Budget { timeout_ms: 5_000, max_retries: 3 },
        context: CallContext::default(),
    }
}

fn backend(server: &StubServer) -> HttpBackend {
    HttpBackend::new(&HttpConfig { endpoint: server.url().into(), ..Default::default() }).unwrap()
}

#[test]
fn retries_server_errors_then_succeeds() {
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    let server = StubServer::start(move |method, path, body| {
        assert_eq!((method, path), ("POST", "/v1/complete"));
        assert!(body.contains("hello"));
        match counter.fetch_add(1, Ordering::SeqCst) {
            0 => (500, "boom".into()),
            1 => (429, "slow down".into()),
            _ => (200, r#"{"text": "hi there"}"#.into()),
        }
    })
    .unwrap();
    let clock = ManualClock::default();
    let resp = call(&backend(&server), &chat("hello"), &RetryPolicy::default(), &clock);
    assert_eq!(resp.status, ToolStatus::Ok);
    assert_eq!(resp.body, Some(ResponseBody::Text("hi there".into())));
    assert_eq!(resp.attempt_count, 3);
    assert_eq!(hits.load(Ordering::SeqCst), 3);
    assert_eq!(clock.sleeps().len(), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    let server = StubServer::start(move |_, _, _| {
        counter.fetch_add(1, Ordering::SeqCst);
        (401, "no".into())
    })
    .unwrap();
    let resp = call(&backend(&server), &chat("x"), &RetryPolicy::default(), &ManualClock::default());
    assert_eq!(resp.status, ToolStatus::FatalError);
    assert!(matches!(resp.error, Some(ToolError::Auth(_))));
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn malformed_bodies_exhaust_the_budget() {
    let server = StubServer::start(|_, _, _| (200, "not json".into())).unwrap();
    let mut req = chat("x");
    req.budget.max_retries = 2;
    let resp = call(&backend(&server), &req, &RetryPolicy::default(), &ManualClock::default());
    assert_eq!(resp.attempt_count, 3);
    assert!(matches!(resp.error, Some(ToolError::RetriesExhausted { attempts: 3, .. })), "{:?}", resp.error);
}

#[test]
fn vision_request_carries_images() {
    let server = StubServer::start(|_, _, body| {
        let v: serde_json::Value = serde_json::from_str(body).unwrap();
        let parts = v["messages"][0]["parts"].as_array().unwrap().len();
        (200, serde_json::json!({ "text": format!("{parts} parts") }).to_string())
    })
    .unwrap();
    let png = Arc::new(encode_image_png(&Image::new(3, 3, Rgb::WHITE)));
    let req = ToolRequest {
        tool: ToolKind::Vision,
        payload: Payload::Vision(VisionQuery {
            text: "look".into(),
            images: vec![fscs_core::toolkit::ImagePart { role_tag: "query".into(), png }],
        }),
        budget: Budget::default(),
        context: CallContext::default(),
    };
    let resp = call(&backend(&server), &req, &RetryPolicy::default(), &ManualClock::default());
    assert_eq!(resp.body, Some(ResponseBody::Text("3 parts".into())));
}

#[test]
fn segment_roundtrip_against_stub() {
    let server = StubServer::oracle_segment(fscs_core::toolkit::contract::StubFault::None).unwrap();
    let img = fixture_image(40, 30, &[(BBox::new(5, 5, 15, 15), Rgb::RED), (BBox::new(20, 10, 35, 25), Rgb(0, 0, 255))]);
    let boxes = vec![BBox::new(20, 10, 35, 25), BBox::new(4, 4, 16, 16)];
    let req = ToolRequest {
        tool: ToolKind::Segment,
        payload: Payload::Segment(SegmentQuery { image_png: Arc::new(encode_image_png(&img)), boxes: boxes.clone() }),
        budget: Budget::default(),
        context: CallContext::default(),
    };
    let resp = call(&backend(&server), &req, &RetryPolicy::default(), &ManualClock::default());
    let Some(ResponseBody::Masks(masks)) = resp.body else { panic!("{:?}", resp.error) };
    assert_eq!(masks.len(), 2);
    let first = decode_mask_rle_base64(&masks[0]).unwrap();
    let second = decode_mask_rle_base64(&masks[1]).unwrap();
    assert_eq!(first.dims(), (40, 30));
    assert_eq!(first.count(), 15 * 15);
    assert_eq!(second.count(), 10 * 10);
}
