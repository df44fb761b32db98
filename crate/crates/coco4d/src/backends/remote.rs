//! Out-of-process backend adapter.
//!
//! Wire contract: HTTP POST to a single endpoint with JSON body
//! `{"op": <name>, "payload": {...}, "seed": <int>}`; the response mirrors
//! the payload shapes. Images, masks, and depth maps travel as base64
//! little-endian f32 (masks as bytes 0/1).

use std::io::{Read, Write};
use std::net::TcpStream;

use base64::Engine as _;
use base64::engine::general_purpose::STANDARD as B64;
use serde_json::{Value, json};

use super::{GenBackends, ScoreCondition, SegmentOutput};
use crate::error::{CocoError, Result};
use crate::geometry::CameraPose;
use crate::img::{DepthMap, Image, Mask, VideoBundle};

pub struct RemoteBackends {
    host: String,
    port: u16,
    path: String,
}

impl RemoteBackends {
    pub fn new(url: &str) -> Result<Self> {
        let rest = url.strip_prefix("http://").ok_or_else(|| {
            CocoError::InvalidConfig(format!("backend url must be http://…, got {url}"))
        })?;
        let (authority, path) = match rest.find('/') {
            Some(i) => (&rest[..i], rest[i..].to_string()),
            None => (rest, "/".to_string()),
        };
        let (host, port) = match authority.rsplit_once(':') {
            Some((h, p)) => (
                h.to_string(),
                p.parse::<u16>().map_err(|_| {
                    CocoError::InvalidConfig(format!("bad port in backend url {url}"))
                })?,
            ),
            None => (authority.to_string(), 80),
        };
        if host.is_empty() {
            return Err(CocoError::InvalidConfig(format!("empty host in backend url {url}")));
        }
        Ok(RemoteBackends { host, port, path })
    }

    fn call(&self, op: &str, payload: Value, seed: u64) -> Result<Value> {
        let body = json!({"op": op, "payload": payload, "seed": seed}).to_string();
        let unavailable = |msg: String| CocoError::BackendUnavailable(format!("{op}: {msg}"));
        let mut stream = TcpStream::connect((self.host.as_str(), self.port))
            .map_err(|e| unavailable(format!("connect {}:{}: {e}", self.host, self.port)))?;
        let request = format!(
            "POST {} HTTP/1.1\r\nHost: {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
            self.path,
            self.host,
            body.len(),
            body
        );
        stream
            .write_all(request.as_bytes())
            .map_err(|e| unavailable(format!("send: {e}")))?;
        let mut response = Vec::new();
        stream
            .read_to_end(&mut response)
            .map_err(|e| unavailable(format!("receive: {e}")))?;
        let text = String::from_utf8_lossy(&response);
        let (head, resp_body) = text
            .split_once("\r\n\r\n")
            .ok_or_else(|| unavailable("malformed HTTP response".into()))?;
        let status = head
            .lines()
            .next()
            .and_then(|l| l.split_whitespace().nth(1))
            .unwrap_or("");
        if status != "200" {
            return Err(unavailable(format!("HTTP status {status}: {resp_body}")));
        }
        serde_json::from_str(resp_body)
            .map_err(|e| unavailable(format!("bad JSON response: {e}")))
    }
}

fn b64_f64(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    B64.encode(bytes)
}

fn f64_b64(text: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(text)
        .map_err(|e| CocoError::BackendUnavailable(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(CocoError::BackendUnavailable("payload not f32-aligned".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

fn image_json(img: &Image) -> Value {
    json!({"h": img.height, "w": img.width, "rgb": b64_f64(&img.data)})
}

fn json_image(v: &Value) -> Result<Image> {
    let bad = || CocoError::BackendUnavailable("malformed image payload".into());
    let h = v["h"].as_u64().ok_or_else(bad)? as usize;
    let w = v["w"].as_u64().ok_or_else(bad)? as usize;
    let data = f64_b64(v["rgb"].as_str().ok_or_else(bad)?)?;
    if data.len() != h * w * 3 {
        return Err(bad());
    }
    Ok(Image {
        height: h,
        width: w,
        data,
    })
}

fn mask_json(m: &Mask) -> Value {
    let bytes: Vec<u8> = m.data.iter().map(|&b| b as u8).collect();
    json!({"h": m.height, "w": m.width, "bits": B64.encode(bytes)})
}

fn json_mask(v: &Value) -> Result<Mask> {
    let bad = || CocoError::BackendUnavailable("malformed mask payload".into());
    let h = v["h"].as_u64().ok_or_else(bad)? as usize;
    let w = v["w"].as_u64().ok_or_else(bad)? as usize;
    let bytes = B64
        .decode(v["bits"].as_str().ok_or_else(bad)?)
        .map_err(|_| bad())?;
    if bytes.len() != h * w {
        return Err(bad());
    }
    Ok(Mask {
        height: h,
        width: w,
        data: bytes.into_iter().map(|b| b != 0).collect(),
    })
}

fn depth_json(d: &DepthMap) -> Value {
    let valid: Vec<u8> = d.valid.iter().map(|&b| b as u8).collect();
    json!({
        "h": d.height, "w": d.width,
        "values": b64_f64(&d.values),
        "valid": B64.encode(valid),
    })
}

fn json_depth(v: &Value) -> Result<DepthMap> {
    let bad = || CocoError::BackendUnavailable("malformed depth payload".into());
    let h = v["h"].as_u64().ok_or_else(bad)? as usize;
    let w = v["w"].as_u64().ok_or_else(bad)? as usize;
    let values = f64_b64(v["values"].as_str().ok_or_else(bad)?)?;
    let valid = B64
        .decode(v["valid"].as_str().ok_or_else(bad)?)
        .map_err(|_| bad())?;
    if values.len() != h * w || valid.len() != h * w {
        return Err(bad());
    }
    Ok(DepthMap {
        height: h,
        width: w,
        values,
        valid: valid.into_iter().map(|b| b != 0).collect(),
    })
}

fn bundle_json(b: &VideoBundle) -> Value {
    json!({
        "frames": b.frames.iter().map(image_json).collect::<Vec<_>>(),
        "masks": b.masks.as_ref().map(|ms| ms.iter().map(mask_json).collect::<Vec<_>>()),
        "depth": b.depth.as_ref().map(|ds| ds.iter().map(depth_json).collect::<Vec<_>>()),
    })
}

fn json_bundle(v: &Value) -> Result<VideoBundle> {
    let bad = || CocoError::BackendUnavailable("malformed video payload".into());
    let frames = v["frames"]
        .as_array()
        .ok_or_else(bad)?
        .iter()
        .map(json_image)
        .collect::<Result<Vec<_>>>()?;
    let masks = match &v["masks"] {
        Value::Null => None,
        Value::Array(ms) => Some(ms.iter().map(json_mask).collect::<Result<Vec<_>>>()?),
        _ => return Err(bad()),
    };
    let depth = match &v["depth"] {
        Value::Null => None,
        Value::Array(ds) => Some(ds.iter().map(json_depth).collect::<Result<Vec<_>>>()?),
        _ => return Err(bad()),
    };
    let bundle = VideoBundle {
        frames,
        masks,
        depth,
    };
    bundle.check_aligned()?;
    Ok(bundle)
}

fn camera_json(c: &CameraPose) -> Value {
    serde_json::to_value(c).unwrap_or(Value::Null)
}

impl GenBackends for RemoteBackends {
    fn generate_reference_video(
        &self,
        prompt: &str,
        image: Option<&Image>,
        seed: u64,
        n_frames: usize,
        resolution: usize,
    ) -> Result<VideoBundle> {
        let payload = json!({
            "prompt": prompt,
            "image": image.map(image_json),
            "n_frames": n_frames,
            "resolution": resolution,
        });
        let resp = self.call("generate_reference_video", payload, seed)?;
        json_bundle(&resp["video"])
    }

    fn segment_video(&self, video: &VideoBundle) -> Result<SegmentOutput> {
        let resp = self.call("segment_video", json!({"video": bundle_json(video)}), 0)?;
        let masks = resp["masks"]
            .as_array()
            .ok_or_else(|| CocoError::BackendUnavailable("missing masks".into()))?
            .iter()
            .map(json_mask)
            .collect::<Result<Vec<_>>>()?;
        Ok(SegmentOutput {
            fg: json_bundle(&resp["fg"])?,
            bg: json_bundle(&resp["bg"])?,
            empty_warning: resp["empty_warning"].as_bool().unwrap_or(false),
            masks,
        })
    }

    fn estimate_depth(&self, image: &Image) -> Result<DepthMap> {
        let resp = self.call("estimate_depth", json!({"image": image_json(image)}), 0)?;
        json_depth(&resp["depth"])
    }

    fn inpaint_image(&self, image: &Image, mask: &Mask, prompt: &str) -> Result<Image> {
        let payload = json!({
            "image": image_json(image),
            "mask": mask_json(mask),
            "prompt": prompt,
        });
        let resp = self.call("inpaint_image", payload, 0)?;
        json_image(&resp["image"])
    }

    fn inpaint_video(
        &self,
        pseudo: &VideoBundle,
        masks: &[Mask],
        strength: f64,
    ) -> Result<VideoBundle> {
        let payload = json!({
            "pseudo": bundle_json(pseudo),
            "masks": masks.iter().map(mask_json).collect::<Vec<_>>(),
            "strength": strength,
        });
        let resp = self.call("inpaint_video", payload, 0)?;
        json_bundle(&resp["video"])
    }

    fn inpaint_depth(&self, depth: &DepthMap, mask: &Mask) -> Result<DepthMap> {
        let payload = json!({"depth": depth_json(depth), "mask": mask_json(mask)});
        let resp = self.call("inpaint_depth", payload, 0)?;
        json_depth(&resp["depth"])
    }

    fn score_epsilon(
        &self,
        noisy_image: &Image,
        condition: &ScoreCondition,
        gamma: f64,
    ) -> Result<Image> {
        let payload = json!({
            "noisy": image_json(noisy_image),
            "reference": image_json(&condition.reference),
            "relative_camera": condition.relative_camera.as_ref().map(camera_json),
            "text": condition.text,
            "gamma": gamma,
        });
        let resp = self.call("score_epsilon", payload, 0)?;
        json_image(&resp["epsilon"])
    }
}
