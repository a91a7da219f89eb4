//! Wire capture: record every exchange to `captures/*.jsonl`, or replay a
//! prior capture offline. Entries are keyed by a request digest, so replay
//! order is free and concurrent recording is safe.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::config::Role;

use super::{ChatRequest, GatewayError, ImageRequest};

#[derive(Debug, Clone)]
pub enum CaptureMode {
    Off,
    /// Append every exchange under this directory.
    Record(PathBuf),
    /// Serve responses from a previous recording; misses are errors.
    Replay(PathBuf),
}

#[derive(Serialize, Deserialize)]
struct CaptureLine {
    role: String,
    kind: String,
    key: String,
    request: serde_json::Value,
    /// Completion text for chat, base64 PNG for images.
    response: String,
}

pub struct Capture {
    mode: Mode,
}

enum Mode {
    Off,
    Record {
        file: Mutex<fs::File>,
    },
    Replay {
        chat: HashMap<String, String>,
        image: HashMap<String, Vec<u8>>,
    },
}

fn io_gateway(e: std::io::Error, what: &str) -> GatewayError {
    GatewayError::ProtocolError {
        status: 0,
        excerpt: format!("capture {what}: {e}"),
    }
}

impl Capture {
    pub fn open(mode: CaptureMode) -> Result<Self, GatewayError> {
        let mode = match mode {
            CaptureMode::Off => Mode::Off,
            CaptureMode::Record(dir) => {
                fs::create_dir_all(&dir).map_err(|e| io_gateway(e, "mkdir"))?;
                let file = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join("wire.jsonl"))
                    .map_err(|e| io_gateway(e, "open"))?;
                Mode::Record {
                    file: Mutex::new(file),
                }
            }
            CaptureMode::Replay(dir) => {
                let mut chat = HashMap::new();
                let mut image = HashMap::new();
                for entry in fs::read_dir(&dir).map_err(|e| io_gateway(e, "read_dir"))? {
                    let path = entry.map_err(|e| io_gateway(e, "entry"))?.path();
                    if path.extension().and_then(|e| e.to_str()) != Some("jsonl") {
                        continue;
                    }
                    let text = fs::read_to_string(&path).map_err(|e| io_gateway(e, "read"))?;
                    for line in text.lines().filter(|l| !l.trim().is_empty()) {
                        let rec: CaptureLine =
                            serde_json::from_str(line).map_err(|e| GatewayError::ProtocolError {
                                status: 0,
                                excerpt: format!("capture parse: {e}"),
                            })?;
                        match rec.kind.as_str() {
                            "chat" => {
                                chat.insert(rec.key, rec.response);
                            }
                            "image" => {
                                let bytes = B64.decode(&rec.response).map_err(|e| {
                                    GatewayError::ProtocolError {
                                        status: 0,
                                        excerpt: format!("capture base64: {e}"),
                                    }
                                })?;
                                image.insert(rec.key, bytes);
                            }
                            _ => {}
                        }
                    }
                }
                Mode::Replay { chat, image }
            }
        };
        Ok(Capture { mode })
    }

    pub fn replay_chat(&self, key: &str) -> Result<Option<String>, GatewayError> {
        match &self.mode {
            Mode::Replay { chat, .. } => chat
                .get(key)
                .cloned()
                .map(Some)
                .ok_or_else(|| GatewayError::ReplayMiss { key: key.into() }),
            _ => Ok(None),
        }
    }

    pub fn replay_image(&self, key: &str) -> Result<Option<Vec<u8>>, GatewayError> {
        match &self.mode {
            Mode::Replay { image, .. } => image
                .get(key)
                .cloned()
                .map(Some)
                .ok_or_else(|| GatewayError::ReplayMiss { key: key.into() }),
            _ => Ok(None),
        }
    }

    pub fn record_chat(
        &self,
        role: Role,
        key: &str,
        request: &ChatRequest,
        response: &str,
    ) -> Result<(), GatewayError> {
        self.append(CaptureLine {
            role: role.to_string(),
            kind: "chat".into(),
            key: key.to_string(),
            request: serde_json::to_value(request).unwrap(),
            response: response.to_string(),
        })
    }

    pub fn record_image(
        &self,
        role: Role,
        key: &str,
        request: &ImageRequest,
        bytes: &[u8],
    ) -> Result<(), GatewayError> {
        self.append(CaptureLine {
            role: role.to_string(),
            kind: "image".into(),
            key: key.to_string(),
            request: serde_json::to_value(request).unwrap(),
            response: B64.encode(bytes),
        })
    }

    fn append(&self, line: CaptureLine) -> Result<(), GatewayError> {
        if let Mode::Record { file } = &self.mode {
            let mut f = file.lock().unwrap();
            let mut text = serde_json::to_string(&line).unwrap();
            text.push('\n');
            f.write_all(text.as_bytes())
                .map_err(|e| io_gateway(e, "append"))?;
        }
        Ok(())
    }
}
