//! Protocol fixture suite for `/v1/segment` servers, plus an in-process stub server.
//!
//! [`contract_check`] only asserts schema conformance: status codes, one mask per
//! box, mask dimensions equal to the image, and box order. Mask quality is not checked.

use std::fmt;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::Serialize;

use super::oracle::{oracle_segmenter, NoiseModel, OracleTruth};
use super::wire::{self, SegmentRequest, SegmentResponse, HEALTH_PATH, SEGMENT_PATH};
use crate::canvas::{decode_image_png, decode_mask_rle_base64, encode_image_png, encode_mask_rle_base64};
use crate::canvas::{BBox, BinaryMask, Image, Rgb};
use crate::episode::ClassId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckResult {
    pub fixture: String,
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ContractReport {
    pub endpoint: String,
    pub checks: Vec<CheckResult>,
}

impl ContractReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for ContractReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "contract check against {}", self.endpoint)?;
        for c in &self.checks {
            let mark = if c.passed { "PASS" } else { "FAIL" };
            write!(f, "  {mark} {}/{}", c.fixture, c.check)?;
            if !c.detail.is_empty() {
                write!(f, ": {}", c.detail)?;
            }
            writeln!(f)?;
        }
        let n = self.checks.iter().filter(|c| c.passed).count();
        write!(f, "{n}/{} checks passed", self.checks.len())
    }
}

/// Expected outcome of one fixture request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expect {
    /// 200 with one mask of the image's dimensions per box, in box order.
    Masks { width: u32, height: u32, boxes: Vec<BBox> },
    /// Any 4xx status.
    ClientError,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fixture {
    pub name: &'static str,
    pub body: String,
    pub expect: Expect,
}

/// Black canvas with a few flat-colored rectangles.
pub fn fixture_image(width: u32, height: u32, objects: &[(BBox, Rgb)]) -> Image {
    let mut img = Image::new(width, height, Rgb::BLACK);
    for &(b, c) in objects {
        img.fill_rect(b, c);
    }
    img
}

fn segment_body(img: &Image, boxes: &[BBox]) -> String {
    let req = SegmentRequest {
        image_png_base64: wire::b64(&encode_image_png(img)),
        boxes: boxes.iter().map(|&b| b.into()).collect(),
    };
    serde_json::to_string(&req).expect("request serializes")
}

/// The shared fixture suite.
pub fn fixtures() -> Vec<Fixture> {
    let tiny = fixture_image(8, 6, &[(BBox::new(2, 1, 6, 5), Rgb::WHITE)]);
    let pair_objects = [(BBox::new(4, 4, 20, 20), Rgb(200, 40, 40)), (BBox::new(40, 24, 60, 44), Rgb(40, 200, 40))];
    let pair = fixture_image(64, 48, &pair_objects);
    let pair_boxes = vec![BBox::new(2, 2, 22, 22), BBox::new(38, 22, 62, 46)];
    let three_boxes = vec![BBox::new(38, 22, 62, 46), BBox::new(0, 0, 64, 48), BBox::new(2, 2, 22, 22)];
    let odd = fixture_image(33, 17, &[(BBox::new(5, 3, 29, 15), Rgb(10, 20, 250))]);
    vec![
        Fixture {
            name: "tiny_one_box",
            body: segment_body(&tiny, &[BBox::new(1, 0, 7, 6)]),
            expect: Expect::Masks { width: 8, height: 6, boxes: vec![BBox::new(1, 0, 7, 6)] },
        },
        Fixture {
            name: "two_boxes",
            body: segment_body(&pair, &pair_boxes),
            expect: Expect::Masks { width: 64, height: 48, boxes: pair_boxes },
        },
        Fixture {
            name: "three_boxes_reordered",
            body: segment_body(&pair, &three_boxes),
            expect: Expect::Masks { width: 64, height: 48, boxes: three_boxes },
        },
        Fixture {
            name: "odd_dimensions",
            body: segment_body(&odd, &[BBox::new(4, 2, 30, 16)]),
            expect: Expect::Masks { width: 33, height: 17, boxes: vec![BBox::new(4, 2, 30, 16)] },
        },
        Fixture {
            name: "box_outside_image",
            body: segment_body(&tiny, &[BBox::new(2, 2, 9, 5)]),
            expect: Expect::ClientError,
        },
        Fixture {
            name: "inverted_box",
            body: r#"{"image_png_base64":"PLACEHOLDER","boxes":[[5,1,2,4]]}"#
                .replace("PLACEHOLDER", &wire::b64(&encode_image_png(&tiny))),
            expect: Expect::ClientError,
        },
        Fixture { name: "malformed_json", body: "{\"image_png_base64\": ".into(), expect: Expect::ClientError },
        Fixture {
            name: "invalid_base64",
            body: r#"{"image_png_base64":"%%%not base64%%%","boxes":[[0,0,1,1]]}"#.into(),
            expect: Expect::ClientError,
        },
        Fixture {
            name: "not_a_png",
            body: format!(r#"{{"image_png_base64":"{}","boxes":[[0,0,1,1]]}}"#, wire::b64(b"plain text")),
            expect: Expect::ClientError,
        },
    ]
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(timeout))
        .build()
        .into()
}

fn check(fixture: &str, name: &str, passed: bool, detail: impl Into<String>) -> CheckResult {
    CheckResult { fixture: fixture.into(), check: name.into(), passed, detail: detail.into() }
}

/// Fraction of `m`'s pixels inside `b`.
fn inside_fraction(m: &BinaryMask, b: BBox) -> f64 {
    let total = m.count();
    if total == 0 {
        return 0.0;
    }
    m.clip_to_box(b).count() as f64 / total as f64
}

fn check_masks(name: &str, masks: &[String], width: u32, height: u32, boxes: &[BBox], out: &mut Vec<CheckResult>) {
    out.push(check(
        name,
        "mask_count",
        masks.len() == boxes.len(),
        format!("{} masks for {} boxes", masks.len(), boxes.len()),
    ));
    let mut decoded = Vec::new();
    for (i, m) in masks.iter().enumerate() {
        match decode_mask_rle_base64(m) {
            Ok(mask) => {
                let ok = mask.dims() == (width, height);
                out.push(check(
                    name,
                    &format!("mask_{i}_dimensions"),
                    ok,
                    format!("got {}x{}, want {width}x{height}", mask.width(), mask.height()),
                ));
                decoded.push(ok.then_some(mask));
            }
            Err(e) => {
                out.push(check(name, &format!("mask_{i}_decodes"), false, e.to_string()));
                decoded.push(None);
            }
        }
    }
    // a nonempty mask must sit mostly in its own box rather than another one
    if masks.len() == boxes.len() && boxes.len() > 1 {
        let mut aligned = true;
        let mut detail = String::new();
        for (i, m) in decoded.iter().enumerate() {
            let Some(m) = m.as_ref().filter(|m| !m.is_empty()) else { continue };
            let own = inside_fraction(m, boxes[i]);
            for (j, &b) in boxes.iter().enumerate() {
                if j != i && inside_fraction(m, b) > own {
                    aligned = false;
                    detail = format!("mask {i} lies more inside box {j}");
                }
            }
        }
        out.push(check(name, "box_order", aligned, detail));
    }
}

/// Replays [`fixtures`] against `endpoint` (base URL) and reports every check.
pub fn contract_check(endpoint: &str) -> ContractReport {
    let base = endpoint.trim_end_matches('/').to_string();
    let agent = agent(Duration::from_secs(60));
    let mut checks = Vec::new();

    match agent.get(&format!("{base}{HEALTH_PATH}")).call() {
        Ok(r) => {
            let s = r.status().as_u16();
            checks.push(check("health", "status_200", s == 200, format!("status {s}")));
        }
        Err(e) => checks.push(check("health", "reachable", false, e.to_string())),
    }

    for fx in fixtures() {
        let resp = agent
            .post(&format!("{base}{SEGMENT_PATH}"))
            .header("content-type", "application/json")
            .send(fx.body.as_str());
        let mut resp = match resp {
            Ok(r) => r,
            Err(e) => {
                checks.push(check(fx.name, "reachable", false, e.to_string()));
                continue;
            }
        };
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().unwrap_or_default();
        match fx.expect {
            Expect::ClientError => {
                checks.push(check(fx.name, "status_4xx", (400..500).contains(&status), format!("status {status}")));
            }
            Expect::Masks { width, height, boxes } => {
                checks.push(check(fx.name, "status_200", status == 200, format!("status {status}")));
                if status != 200 {
                    continue;
                }
                match serde_json::from_str::<SegmentResponse>(&text) {
                    Ok(r) => {
                        checks.push(check(fx.name, "schema", true, ""));
                        check_masks(fx.name, &r.masks, width, height, &boxes, &mut checks);
                    }
                    Err(e) => checks.push(check(fx.name, "schema", false, e.to_string())),
                }
            }
        }
    }
    ContractReport { endpoint: base, checks }
}

/// Deliberate protocol violations for exercising the checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StubFault {
    #[default]
    None,
    /// Masks are one pixel wider than the image.
    WrongDimensions,
    /// The last mask is dropped.
    MissingMask,
    /// Out-of-bounds boxes are accepted instead of rejected.
    NoValidation,
    /// Masks come back in reverse box order.
    ReversedOrder,
}

/// Status and JSON body for one segment request, served by the ground-truth segmenter.
///
/// The fixture image's non-background pixels (anything differing from the top-left
/// pixel) stand in for the ground-truth mask.
pub fn oracle_segment_handler(body: &str, fault: StubFault) -> (u16, String) {
    let err = |code: u16, msg: String| (code, serde_json::json!({ "error": msg }).to_string());
    let req: SegmentRequest = match serde_json::from_str(body) {
        Ok(r) => r,
        Err(e) => return err(400, format!("malformed request: {e}")),
    };
    let png = match wire::unb64(&req.image_png_base64) {
        Ok(b) => b,
        Err(e) => return err(400, format!("invalid base64: {e}")),
    };
    let img = match decode_image_png(&png) {
        Ok(i) => i,
        Err(e) => return err(400, format!("invalid image: {e}")),
    };
    let (w, h) = img.dims();
    let boxes: Vec<BBox> = req.boxes.iter().map(|&b| BBox::from(b)).collect();
    for b in &boxes {
        let valid = b.is_valid_for(w, h);
        if !valid && fault != StubFault::NoValidation {
            return err(400, format!("box {:?} outside {w}x{h} image", <[u32; 4]>::from(*b)));
        }
    }
    let bg = img.get(0, 0);
    let fg = BinaryMask::from_fn(w, h, |x, y| img.get(x, y) != bg);
    let class = ClassId(1);
    let truth = OracleTruth {
        episode_id: "contract-stub".into(),
        dims: (w, h),
        gt_presence: [(class, true)].into(),
        gt_masks: [(class, fg)].into(),
        gt_boxes: Default::default(),
    };
    let mut masks: Vec<String> = boxes
        .iter()
        .map(|&b| {
            let clipped = BBox::new(b.x_min.min(w), b.y_min.min(h), b.x_max.min(w), b.y_max.min(h));
            let m = oracle_segmenter(&truth, class, clipped, &NoiseModel::default(), 0);
            if fault == StubFault::WrongDimensions {
                encode_mask_rle_base64(&BinaryMask::from_fn(w + 1, h, |x, y| x < w && m.get(x, y)))
            } else {
                encode_mask_rle_base64(&m)
            }
        })
        .collect();
    match fault {
        StubFault::MissingMask => {
            masks.pop();
        }
        StubFault::ReversedOrder => masks.reverse(),
        _ => {}
    }
    (200, serde_json::to_string(&SegmentResponse { masks }).expect("response serializes"))
}

type Handler = dyn Fn(&str, &str, &str) -> (u16, String) + Send + Sync;

/// A local HTTP server running on a background thread; stops on drop.
pub struct StubServer {
    server: Arc<tiny_http::Server>,
    url: String,
    thread: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Serves `handler(method, path, body) -> (status, json body)` on an ephemeral port.
    pub fn start(handler: impl Fn(&str, &str, &str) -> (u16, String) + Send + Sync + 'static) -> std::io::Result<Self> {
        let server = tiny_http::Server::http("127.0.0.1:0").map_err(std::io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("stub server has no ip address"))?;
        let server = Arc::new(server);
        let handler: Arc<Handler> = Arc::new(handler);
        let s = Arc::clone(&server);
        let thread = std::thread::spawn(move || {
            for mut request in s.incoming_requests() {
                let mut body = String::new();
                let (status, text) = match request.as_reader().read_to_string(&mut body) {
                    Ok(_) => handler(request.method().as_str(), request.url(), &body),
                    Err(e) => (400, serde_json::json!({ "error": e.to_string() }).to_string()),
                };
                let header = tiny_http::Header::from_bytes("content-type", "application/json").expect("static header");
                let resp = tiny_http::Response::from_string(text).with_status_code(status).with_header(header);
                let _ = request.respond(resp);
            }
        });
        Ok(Self { server, url: format!("http://{addr}"), thread: Some(thread) })
    }

    /// Segment endpoint backed by [`oracle_segment_handler`], with a health route.
    pub fn oracle_segment(fault: StubFault) -> std::io::Result<Self> {
        Self::start(move |method, path, body| match (method, path) {
            ("GET", HEALTH_PATH) => (200, r#"{"status":"ok"}"#.into()),
            ("POST", SEGMENT_PATH) => oracle_segment_handler(body, fault),
            _ => (404, r#"{"error":"not found"}"#.into()),
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
