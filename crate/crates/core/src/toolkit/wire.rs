//! JSON bodies of the HTTP tool protocol.
//!
//! * `POST /v1/complete` : `{"messages":[{"role","parts":[{"kind":"text"|"image_png_base64","data"}]}]}` → `{"text"}`
//! * `POST /v1/segment` : `{"image_png_base64","boxes":[[x_min,y_min,x_max,y_max],...]}` → `{"masks":[rle_base64,...]}`
//! * `GET /healthz` : 200 when ready

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Payload, ToolRequest};

pub const COMPLETE_PATH: &str = "/v1/complete";
pub const SEGMENT_PATH: &str = "/v1/segment";
pub const HEALTH_PATH: &str = "/healthz";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartKind {
    Text,
    ImagePngBase64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Part {
    pub kind: PartKind,
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub parts: Vec<Part>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompleteRequest {
    pub messages: Vec<Message>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompleteResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub image_png_base64: String,
    pub boxes: Vec<[u32; 4]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub masks: Vec<String>,
}

pub fn b64(data: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(data)
}

pub fn unb64(s: &str) -> Result<Vec<u8>, base64::DecodeError> {
    base64::engine::general_purpose::STANDARD.decode(s)
}

/// Endpoint path and JSON body for a request.
pub fn encode_request(req: &ToolRequest) -> (&'static str, String) {
    match &req.payload {
        Payload::Chat { text } => {
            let body = CompleteRequest {
                messages: vec![Message { role: "user".into(), parts: vec![Part { kind: PartKind::Text, data: text.clone() }] }],
            };
            (COMPLETE_PATH, serde_json::to_string(&body).expect("request serializes"))
        }
        Payload::Vision(v) => {
            let mut parts = vec![Part { kind: PartKind::Text, data: v.text.clone() }];
            for img in &v.images {
                parts.push(Part { kind: PartKind::Text, data: format!("<image:{}>", img.role_tag) });
                parts.push(Part { kind: PartKind::ImagePngBase64, data: b64(&img.png) });
            }
            let body = CompleteRequest { messages: vec![Message { role: "user".into(), parts }] };
            (COMPLETE_PATH, serde_json::to_string(&body).expect("request serializes"))
        }
        Payload::Segment(s) => {
            let body = SegmentRequest {
                image_png_base64: b64(&s.image_png),
                boxes: s.boxes.iter().map(|&b| b.into()).collect(),
            };
            (SEGMENT_PATH, serde_json::to_string(&body).expect("request serializes"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canvas::BBox;
    use crate::toolkit::{Budget, CallContext, ImagePart, SegmentQuery, ToolKind, VisionQuery};
    use std::sync::Arc;

    #[test]
    fn segment_body_shape() {
        let req = ToolRequest {
            tool: ToolKind::Segment,
            payload: Payload::Segment(SegmentQuery { image_png: Arc::new(vec![0xff]), boxes: vec![BBox::new(1, 2, 3, 4)] }),
            budget: Budget::default(),
            context: CallContext::default(),
        };
        let (path, body) = encode_request(&req);
        assert_eq!(path, "/v1/segment");
        let v: serde_json::Value = serde_json::from_str(&body).unwrap();
        assert_eq!(v, serde_json::json!({"image_png_base64": "/w==", "boxes": [[1, 2, 3, 4]]}));
    }

    #[test]
    fn vision_body_shape() {
        let req = ToolRequest {
            tool: ToolKind::Vision,
            payload: Payload::Vision(VisionQuery { text: "look".into(), images: vec![ImagePart::new("query", vec![1, 2])] }),
            budget: Budget::default(),
            context: CallContext::default(),
        };
        let (path, body) = encode_request(&req);
        assert_eq!(path, "/v1/complete");
        let v: serde_json::Value = serde_json::from_str(&body).unwrap();
        let parts = &v["messages"][0]["parts"];
        assert_eq!(parts[0], serde_json::json!({"kind": "text", "data": "look"}));
        assert_eq!(parts[2], serde_json::json!({"kind": "image_png_base64", "data": "AQI="}));
    }
}
