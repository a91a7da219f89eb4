//! Deterministic in-process backend.
//!
//! Responses are a pure function of (role, request bytes, mock seed,
//! fidelity): replaying any request reproduces the byte-identical answer,
//! which is what makes full-pipeline runs diffable. Images are valid PNGs
//! whose pixels are a hash pattern and whose metadata chunk embeds the
//! generating prompt, seed, and guidance scale; the mock VQA answers by
//! reading that chunk back, degraded by the fidelity knob.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::config::{MockOptions, Role};
use crate::rng::unit_hash;
use crate::store::Store;

use super::{ChatPart, ChatRequest, GatewayError, ImageRequest};

/// One entry of the malformed-judge-output corpus. `salvageable` records
/// whether the parser is expected to recover a judgement from it.
#[derive(Debug, Clone, Deserialize)]
pub struct MalformedFixture {
    pub name: String,
    pub salvageable: bool,
    pub raw: String,
}

const MALFORMED_CORPUS: &str = include_str!("../../assets/malformed_judge_outputs.jsonl");

/// The 20-sample corpus of realistic judge-output failures, shared by the
/// mock's fault-injection mode and the parser robustness tests.
pub fn malformed_judge_fixtures() -> &'static [MalformedFixture] {
    static FIXTURES: OnceLock<Vec<MalformedFixture>> = OnceLock::new();
    FIXTURES.get_or_init(|| {
        MALFORMED_CORPUS
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).expect("fixture corpus is valid JSONL"))
            .collect()
    })
}

pub struct MockBackend {
    role: Role,
    seed: u64,
    opts: MockOptions,
    store: Arc<Store>,
    in_flight: AtomicUsize,
    high_water: AtomicUsize,
}

struct FlightGuard<'a>(&'a MockBackend);

impl Drop for FlightGuard<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

impl MockBackend {
    pub fn new(role: Role, opts: MockOptions, master_seed: u64, store: Arc<Store>) -> Self {
        let seed = opts.mock_seed.unwrap_or(master_seed);
        MockBackend {
            role,
            seed,
            opts,
            store,
            in_flight: AtomicUsize::new(0),
            high_water: AtomicUsize::new(0),
        }
    }

    pub fn high_water(&self) -> usize {
        self.high_water.load(Ordering::SeqCst)
    }

    fn enter(&self) -> FlightGuard<'_> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.high_water.fetch_max(now, Ordering::SeqCst);
        if self.opts.latency_ms > 0 {
            std::thread::sleep(Duration::from_millis(self.opts.latency_ms));
        }
        FlightGuard(self)
    }

    fn hash(&self, domain: &str, parts: &[&[u8]]) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"selfloop.mock.v1");
        h.update(self.seed.to_le_bytes());
        h.update(domain.as_bytes());
        for p in parts {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p);
        }
        h.finalize().into()
    }

    pub fn complete_chat(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let _guard = self.enter();
        let body = serde_json::to_vec(request).expect("request serializes");
        match self.role {
            Role::Proposer => Ok(self.propose(request, &body)),
            Role::Judge | Role::CycleJudge => self.judge(request, &body),
            Role::Vqa => self.answer_visual(request),
            Role::Solver => Err(GatewayError::Precondition(
                "mock solver has no text completion".into(),
            )),
        }
    }

    // ---- proposer ----------------------------------------------------

    fn propose(&self, request: &ChatRequest, body: &[u8]) -> String {
        let flat = request.flat_text();
        let category = extract_line_value(&flat, "Target Major Category: ")
            .map(|s| s.trim_end_matches('.').to_string())
            .unwrap_or_else(|| "General Object".into());
        let subcategory = extract_line_value(&flat, "Target Subcategory: ")
            .unwrap_or_else(|| "general".into());
        if self.opts.always_same_completion {
            return serde_json::json!({
                "major_category": category,
                "subcategory": subcategory,
                "prompt": "a single red apple on a white table",
            })
            .to_string();
        }
        let h = self.hash("propose", &[body]);
        let prompt = synth_prompt(&h, &subcategory);
        let json = serde_json::json!({
            "major_category": category,
            "subcategory": subcategory,
            "prompt": prompt,
        })
        .to_string();
        // every fifth response arrives fenced, like real chat models
        if h[31] % 5 == 0 {
            format!("```json\n{json}\n```")
        } else {
            json
        }
    }

    // ---- judge (image rubric + prompt quality + cycle eval) -----------

    fn judge(&self, request: &ChatRequest, body: &[u8]) -> Result<String, GatewayError> {
        if self.opts.malform_fraction > 0.0 {
            let u = unit_hash(&[&self.seed.to_le_bytes(), b"malform", body]);
            if u < self.opts.malform_fraction {
                let fixtures: Vec<&MalformedFixture> = malformed_judge_fixtures()
                    .iter()
                    .filter(|f| !f.salvageable)
                    .collect();
                let h = self.hash("malform-pick", &[body]);
                let pick = fixtures[h[0] as usize % fixtures.len()];
                return Ok(pick.raw.clone());
            }
        }
        let flat = request.flat_text();
        if self.role == Role::CycleJudge {
            return Ok(self.cycle_verdict(&flat));
        }
        let image_digest = request.user_turns.iter().find_map(|p| match p {
            ChatPart::Image(r) => Some(r.digest.clone()),
            ChatPart::Text(_) => None,
        });
        let h = self.hash(
            "judge-score",
            &[body, image_digest.as_deref().unwrap_or("").as_bytes()],
        );
        let halves = h[0] % 21; // 0..=20 -> 0, 0.5, ..., 10
        let score_text = if halves % 2 == 0 {
            format!("{}", halves / 2)
        } else {
            format!("{}.5", halves / 2)
        };
        let analysis = format!(
            "Checked the submission against the rubric: attribute coverage and composition \
             support a score of {score_text}."
        );
        Ok(format!(
            "{{\"analysis\": {}, \"score\": {score_text}}}",
            serde_json::to_string(&analysis).unwrap()
        ))
    }

    fn cycle_verdict(&self, flat: &str) -> String {
        let question = extract_line_value(flat, "Question: ").unwrap_or_default();
        let answer = extract_line_value(flat, "Answer: ").unwrap_or_default();
        let reference = extract_line_value(flat, "Reference Answer: ").unwrap_or_default();
        let text_mode = flat.contains("strict text rendering QA evaluator");

        let answer_tokens = normalize_tokens(&answer);
        let reference_tokens = normalize_tokens(&reference);
        let refusal = is_refusal(&answer_tokens);

        let evaluation = if text_mode {
            let count = if refusal {
                0
            } else {
                let mut distinct: Vec<&String> = Vec::new();
                for t in &reference_tokens {
                    if !distinct.contains(&t) {
                        distinct.push(t);
                    }
                }
                distinct
                    .iter()
                    .filter(|t| answer_tokens.contains(t))
                    .count()
            };
            count.to_string()
        } else {
            let supported = !refusal
                && !reference_tokens.is_empty()
                && reference_tokens.iter().all(|t| answer_tokens.contains(t));
            if supported { "yes" } else { "no" }.to_string()
        };
        serde_json::json!({
            "question": question,
            "answer": answer,
            "evaluation": evaluation,
        })
        .to_string()
    }

    // ---- vqa -----------------------------------------------------------

    fn answer_visual(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let image = request
            .user_turns
            .iter()
            .find_map(|p| match p {
                ChatPart::Image(r) => Some(r),
                ChatPart::Text(_) => None,
            })
            .ok_or_else(|| GatewayError::Precondition("mock vqa needs an image part".into()))?;
        let question = request
            .user_turns
            .iter()
            .rev()
            .find_map(|p| match p {
                ChatPart::Text(t) => Some(t.clone()),
                ChatPart::Image(_) => None,
            })
            .unwrap_or_default();
        let bytes = self.store.verify(image)?;
        let meta = read_image_metadata(&bytes)?;
        // the fidelity draw must not depend on fidelity itself, so raising
        // the knob can only turn refusals into answers, never the reverse
        let u = unit_hash(&[
            &self.seed.to_le_bytes(),
            meta.prompt.as_bytes(),
            question.as_bytes(),
        ]);
        if u < self.opts.fidelity {
            let polar = normalize_tokens(&question)
                .first()
                .map(|t| {
                    matches!(
                        t.as_str(),
                        "is" | "are" | "does" | "do" | "was" | "were" | "can" | "has" | "have"
                    )
                })
                .unwrap_or(false);
            if polar {
                Ok(format!("Yes. The image shows: {}", meta.prompt))
            } else {
                Ok(format!("The image shows: {}", meta.prompt))
            }
        } else {
            Ok("I cannot determine that from the image.".into())
        }
    }

    // ---- solver ---------------------------------------------------------

    pub fn generate_image(&self, request: &ImageRequest) -> Result<Vec<u8>, GatewayError> {
        let _guard = self.enter();
        if let Some(marker) = &self.opts.fail_prompt_contains {
            if request.prompt.contains(marker.as_str()) {
                return Err(GatewayError::ProtocolError {
                    status: 599,
                    excerpt: "mock image generation failure (injected)".into(),
                });
            }
        }
        let h = self.hash(
            "image",
            &[
                request.prompt.as_bytes(),
                &request.seed.to_le_bytes(),
                &request.cfg_text_scale.to_le_bytes(),
                &request.width.to_le_bytes(),
                &request.height.to_le_bytes(),
            ],
        );
        let meta = serde_json::json!({
            "prompt": request.prompt,
            "seed": request.seed,
            "cfg": request.cfg_text_scale,
        })
        .to_string();
        encode_pattern_png(request.width, request.height, &h, &meta)
    }
}

// ---- shared helpers -----------------------------------------------------

fn extract_line_value(text: &str, prefix: &str) -> Option<String> {
    text.lines()
        .find_map(|l| l.strip_prefix(prefix))
        .map(|s| s.trim().to_string())
}

/// Lowercase, strip punctuation, collapse whitespace, canonicalize the
/// spelling variants the eval templates treat as equivalent.
pub fn normalize_tokens(s: &str) -> Vec<String> {
    s.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(|t| match t {
            "grey" => "gray".to_string(),
            "colour" => "color".to_string(),
            other => other.to_string(),
        })
        .collect()
}

fn is_refusal(tokens: &[String]) -> bool {
    let joined = tokens.join(" ");
    joined.contains("cannot determine")
        || joined.contains("not sure")
        || joined.contains("unable to")
        || joined.contains("don t know")
}

const ADJECTIVES: [&str; 16] = [
    "crimson", "azure", "golden", "weathered", "translucent", "matte", "iridescent", "charcoal",
    "ivory", "emerald", "rust-colored", "pale", "glossy", "braided", "frosted", "speckled",
];
const SUBJECTS: [&str; 16] = [
    "teapot", "oak tree", "lighthouse", "mechanical clock", "paper crane", "stone bridge",
    "violin", "street lamp", "fishing boat", "orchid", "typewriter", "hot air balloon",
    "ceramic bowl", "bicycle", "telescope", "windmill",
];
const SETTINGS: [&str; 16] = [
    "on a rain-soaked pier", "inside a cluttered workshop", "under a low winter sun",
    "beside a tiled courtyard", "in a fog-covered valley", "on a black marble pedestal",
    "near a market stall at dusk", "within a glass atrium", "along a gravel path",
    "under festival lanterns", "on a drift of fresh snow", "beside a copper kettle",
    "in a terraced garden", "under a vaulted ceiling", "at the edge of a tide pool",
    "on a woven rug",
];
const LIGHTING: [&str; 16] = [
    "soft light from above", "long shadows across the floor", "reflections picking out the contours",
    "a shallow depth of field", "mist softening the background", "warm lamplight on the textures",
    "high-contrast edges", "delicate shadows on the ground", "backlit silhouettes",
    "dappled light through leaves", "a cold blue cast", "glowing embers nearby",
    "overcast even light", "a single hard spotlight", "golden-hour glow", "moonlit highlights",
];

fn synth_prompt(h: &[u8; 32], subcategory: &str) -> String {
    let core = format!(
        "a {} {} {}, {}, composed as a {} study",
        ADJECTIVES[h[1] as usize % 16],
        SUBJECTS[h[2] as usize % 16],
        SETTINGS[h[3] as usize % 16],
        LIGHTING[h[4] as usize % 16],
        subcategory
    );
    if h[5] % 2 == 0 {
        format!("Generate an image of {core}")
    } else {
        core
    }
}

// ---- mock PNG encoding / metadata ----------------------------------------

pub struct ImageMetadata {
    pub prompt: String,
    pub seed: u64,
    pub cfg: f64,
}

pub const METADATA_KEYWORD: &str = "selfloop";

fn encode_pattern_png(
    width: u32,
    height: u32,
    h: &[u8; 32],
    metadata: &str,
) -> Result<Vec<u8>, GatewayError> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width, height);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        encoder
            .add_itxt_chunk(METADATA_KEYWORD.to_string(), metadata.to_string())
            .map_err(|e| GatewayError::UndecodableImage(e.to_string()))?;
        let mut writer = encoder
            .write_header()
            .map_err(|e| GatewayError::UndecodableImage(e.to_string()))?;
        // 8x8 grid of flat color tiles derived from the hash
        let mut data = Vec::with_capacity((width * height * 3) as usize);
        for y in 0..height {
            let ty = (y * 8 / height) as usize;
            for x in 0..width {
                let tx = (x * 8 / width) as usize;
                let base = (ty * 8 + tx) % 10; // reuse hash bytes cyclically
                data.push(h[base]);
                data.push(h[(base + 11) % 32]);
                data.push(h[(base + 22) % 32]);
            }
        }
        writer
            .write_image_data(&data)
            .map_err(|e| GatewayError::UndecodableImage(e.to_string()))?;
    }
    Ok(out)
}

/// Reads the embedded {prompt, seed, cfg} chunk from a mock PNG.
pub fn read_image_metadata(bytes: &[u8]) -> Result<ImageMetadata, GatewayError> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let reader = decoder
        .read_info()
        .map_err(|e| GatewayError::UndecodableImage(e.to_string()))?;
    let info = reader.info();
    let chunk = info
        .utf8_text
        .iter()
        .find(|c| c.keyword == METADATA_KEYWORD)
        .ok_or_else(|| {
            GatewayError::UndecodableImage("image has no embedded metadata chunk".into())
        })?;
    let text = chunk
        .get_text()
        .map_err(|e| GatewayError::UndecodableImage(e.to_string()))?;
    #[derive(Deserialize)]
    struct Meta {
        prompt: String,
        seed: u64,
        cfg: f64,
    }
    let meta: Meta = serde_json::from_str(&text)
        .map_err(|e| GatewayError::UndecodableImage(format!("bad metadata json: {e}")))?;
    Ok(ImageMetadata {
        prompt: meta.prompt,
        seed: meta.seed,
        cfg: meta.cfg,
    })
}

