//! HTTP backend speaking the hosted-provider wire protocol.
//!
//! Chat goes to `POST {base_url}/chat/completions` with a messages array
//! whose user content mixes `text` and `image_url` (data-URI) parts; image
//! generation goes to `POST {base_url}/images/generations` and returns
//! base64 PNG. Credentials come from `SELFLOOP_API_KEY_<ROLE>`.

use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::json;

use crate::config::{EndpointConfig, Role};
use crate::store::Store;

use super::{ChatPart, ChatRequest, GatewayError, ImageRequest};

pub struct RemoteBackend {
    base_url: String,
    model_name: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
    store: Arc<Store>,
}

impl RemoteBackend {
    pub fn new(role: Role, cfg: &EndpointConfig, store: Arc<Store>) -> Result<Self, GatewayError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| GatewayError::ProtocolError {
                status: 0,
                excerpt: format!("http client init: {e}"),
            })?;
        let api_key = std::env::var(format!(
            "SELFLOOP_API_KEY_{}",
            role.as_str().to_uppercase()
        ))
        .ok();
        Ok(RemoteBackend {
            base_url: cfg.base_url.trim_end_matches('/').to_string(),
            model_name: cfg.model_name.clone(),
            api_key,
            http,
            store,
        })
    }

    fn post(&self, path: &str, body: serde_json::Value) -> Result<serde_json::Value, GatewayError> {
        let url = format!("{}{}", self.base_url, path);
        let mut req = self.http.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e|

 {
            if e.is_timeout() {
                GatewayError::Timeout { retries: 0 }
            } else {
                GatewayError::ProtocolError {
                    status: 0,
                    excerpt: format!("transport: {e}"),
                }
            }
        })?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| GatewayError::ProtocolError {
            status,
            excerpt: format!("body read: {e}"),
        })?;
        if status == 429 {
            return Err(GatewayError::RateLimited { retries: 0 });
        }
        if !(200..300).contains(&status) {
            return Err(GatewayError::ProtocolError {
                status,
                excerpt: excerpt(&text),
            });
        }
        serde_json::from_str(&text).map_err(|e| GatewayError::ProtocolError {
            status,
            excerpt: format!("bad json: {e}; body: {}", excerpt(&text)),
        })
    }

    pub fn complete_chat(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let mut content = Vec::new();
        for part in &request.user_turns {
            match part {
                ChatPart::Text(t) => content.push(json!({"type": "text", "text": t})),
                ChatPart::Image(r) => {
                    let bytes = self.store.verify(r)?;
                    content.push(json!({
                        "type": "image_url",
                        "image_url": {"url": format!("data:image/png;base64,{}", B64.encode(bytes))}
                    }));
                }
            }
        }
        let mut body = json!({
            "model": self.model_name,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": content},
            ],
            "temperature": request.decode.temperature,
            "max_tokens": request.decode.max_tokens,
        });
        if let Some(seed) = request.decode.seed {
            body["seed"] = json!(seed);
        }
        let v = self.post("/chat/completions", body)?;
        let text = v["choices"][0]["message"]["content"]
            .as_str()
            .unwrap_or("")
            .to_string();
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyCompletion);
        }
        Ok(text)
    }

    pub fn generate_image(&self, request: &ImageRequest) -> Result<Vec<u8>, GatewayError> {
        let body = json!({
            "model": self.model_name,
            "prompt": request.prompt,
            "seed": request.seed,
            "cfg_text_scale": request.cfg_text_scale,
            "size": format!("{}x{}", request.width, request.height),
        });
        let v = self.post("/images/generations", body)?;
        let b64 = v["data"][0]["b64_json"].as_str().ok_or_else(|| {
            GatewayError::ProtocolError {
                status: 200,
                excerpt: "response missing data[0].b64_json".into(),
            }
        })?;
        B64.decode(b64)
            .map_err(|e| GatewayError::UndecodableImage(format!("base64: {e}")))
    }
}

fn excerpt(s: &str) -> String {
    let t = s.trim();
    if t.len() <= 200 {
        t.to_string()
    } else {
        let mut end = 200;
        while !t.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}…", &t[..end])
    }
}
