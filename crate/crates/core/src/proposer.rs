//! Prompt proposal stage: categorized, deduplicated prompt synthesis with
//! self-judged few-shot bootstrapping and periodic demo reseeding.
//!
//! Per category the stage boots by generating a small zero-shot pool,
//! scoring it with the prompt-quality judge, and installing the winner as
//! the first demo. From then on every accepted prompt is generated
//! few-shot; after each `reseed_cadence` acceptances a fresh demo set is
//! sampled from the growing library and re-judged. Duplicates (by
//! normalized-text hash) are discarded and regenerated under a bounded
//! attempt budget. The stage checkpoints after every acceptance and is
//! resumable.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::categories::{self, CategorySpec, UnknownCategory};
use crate::config::{PipelineConfig, Role};
use crate::gateway::{ChatRequest, GatewayError, ModelClient};
use crate::judge::{self, JudgeError};
use crate::parallel::parallel_map;
use crate::rational::Rational;
use crate::rng::derive_rng;
use crate::salvage;

pub const PROMPTS_FILE: &str = "prompts.jsonl";
pub const CHECKPOINT_FILE: &str = "prompts.ckpt";
const PARTS_DIR: &str = "prompts_parts";
/// Zero-shot candidates generated when bootstrapping a category's demos.
const BOOTSTRAP_POOL: usize = 4;
/// Attempt budget multiplier over the per-category target.
const MAX_ATTEMPT_FACTOR: usize = 5;
const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    /// Registry id of the major category.
    pub major_category: String,
    pub subcategory: String,
    /// The prompt text T.
    pub text: String,
    /// Reseed round the record was accepted in; demos always come from
    /// strictly earlier rounds.
    pub round: u32,
    pub demo_ids: Vec<String>,
    /// 128-bit hex hash of the normalized text (dedup key).
    pub norm_hash: String,
}

#[derive(Debug, Default, Clone)]
pub struct PromptLibrary {
    pub records: Vec<PromptRecord>,
    pub per_category_counts: BTreeMap<String, usize>,
}

impl PromptLibrary {
    pub fn push(&mut self, rec: PromptRecord) {
        *self
            .per_category_counts
            .entry(rec.major_category.clone())
            .or_insert(0) += 1;
        self.records.push(rec);
    }

    pub fn get(&self, id: &str) -> Option<&PromptRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn save(&self, path: &Path) -> Result<(), ProposerError> {
        let mut out = String::new();
        for rec in &self.records {
            out.push_str(&record_line(rec));
        }
        write_atomic(path, out.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, ProposerError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut lib = PromptLibrary::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            lib.push(parse_record_line(line)?);
        }
        Ok(lib)
    }
}

#[derive(Serialize, Deserialize)]
struct VersionedRecord {
    v: u32,
    #[serde(flatten)]
    rec: PromptRecord,
}

fn record_line(rec: &PromptRecord) -> String {
    let mut s = serde_json::to_string(&VersionedRecord {
        v: SCHEMA_VERSION,
        rec: rec.clone(),
    })
    .expect("record serializes");
    s.push('\n');
    s
}

fn parse_record_line(line: &str) -> Result<PromptRecord, ProposerError> {
    let v: VersionedRecord =
        serde_json::from_str(line).map_err(|e| ProposerError::Corrupt(e.to_string()))?;
    if v.v != SCHEMA_VERSION {
        return Err(ProposerError::Corrupt(format!(
            "unsupported prompt record version {}",
            v.v
        )));
    }
    Ok(v.rec)
}

#[derive(Debug, thiserror::Error)]
pub enum ProposerError {
    #[error("proposal is not JSON: {0}")]
    MalformedJson(String),
    #[error("proposal missing field {0:?}")]
    MissingField(&'static str),
    #[error("proposal category {got:?} does not match expected {expected:?}")]
    CategoryMismatch { expected: String, got: String },
    #[error("every bootstrap candidate failed to parse")]
    AllCandidatesInvalid,
    #[error("bootstrap pool must hold at least 2 candidates, got {0}")]
    PoolTooSmall(usize),
    #[error("category {0}: attempt budget exhausted before reaching the target")]
    TargetUnreachable(String),
    #[error(transparent)]
    UnknownCategory(#[from] UnknownCategory),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error("proposer io at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt proposer state: {0}")]
    Corrupt(String),
}

fn io_err(path: &Path, source: std::io::Error) -> ProposerError {
    ProposerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ProposerError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Normalization behind the dedup hash: lowercase, collapse whitespace,
/// strip terminal punctuation.
pub fn normalize_prompt(text: &str) -> String {
    let collapsed = text
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    collapsed
        .trim_end_matches(['.', '!', '?', '…'])
        .trim()
        .to_string()
}

pub fn norm_hash(text: &str) -> String {
    let digest = Sha256::digest(normalize_prompt(text).as_bytes());
    hex::encode(&digest[..16])
}

/// Renders the proposal request: the category's generation rule goes in
/// the system block verbatim, demos become the few-shot Example block, and
/// the user turn asks for exactly one new prompt.
pub fn render_proposer_prompt(
    category: &CategorySpec,
    demos: &[PromptRecord],
    subcategory: &str,
) -> ChatRequest {
    let mut examples = String::new();
    if demos.is_empty() {
        examples.push_str("(no examples yet — this is the bootstrap round)");
    } else {
        for d in demos {
            let obj = serde_json::json!({
                "major_category": categories::by_id(&d.major_category)
                    .map(|c| c.name)
                    .unwrap_or(d.major_category.as_str()),
                "subcategory": d.subcategory,
                "prompt": d.text,
            });
            examples.push_str(&obj.to_string());
            examples.push('\n');
        }
    }
    let system = format!(
        "Character Introduction\n\
         You are a specialist dataset architect for PromptBench. Your mission is to synthesize \
         high-quality, high-complexity text-to-image prompts that push the limits of generative \
         models.\n\n\
         Your Task\n\
         -Target Category:\n\
         Generate prompt ONLY for the category defined by: {name}.\n\
         -Category Definition and Specific Rule(MUST FOLLOW THE RULE FOR THE TARGET CATEGORY):\n\
         {rule}\n\n\
         -Informational Density:\n\
         The prompt must contain sufficient descriptive detail to ensure complex image \
         generation. Do not prioritize brevity over informational density\n\n\
         Response Format\n\
         Strictly follow the JSON format to output only the modified dialog without redundancy, \
         and do not add comments (//) in the response.\n\
         {{\n\
         \"major_category\": \"The primary classification\",\n\
         \"subcategory\": \"The secondary classification\",\n\
         \"prompt\": \"The high-density descriptive instruction.\"\n\
         }}\n\n\
         Example\n\
         {examples}",
        name = category.name,
        rule = category.generation_rule,
        examples = examples,
    );
    let user = format!(
        "Generate exactly ONE new prompt.\n\
         Target Major Category: {name}.\n\
         Target Subcategory: {sub}\n\
         Each generated item must have a major_category field set to {name}, a subcategory \
         field set to {sub}, and a prompt field. Ensure high diversity and strictly adhere to \
         the rule.",
        name = category.name,
        sub = subcategory,
    );
    ChatRequest::text_only(system, user)
}

/// The fields a proposal must carry, before library bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedProposal {
    pub subcategory: String,
    pub text: String,
}

/// Extracts the first JSON object (fenced or bare), validates the three
/// required fields, and rejects proposals for the wrong category.
pub fn parse_proposal(
    raw: &str,
    expected: &CategorySpec,
) -> Result<ParsedProposal, ProposerError> {
    let stripped = salvage::strip_code_fences(raw);
    let span = salvage::first_balanced_object(stripped)
        .ok_or_else(|| ProposerError::MalformedJson(excerpt(raw)))?;
    let v: serde_json::Value =
        serde_json::from_str(span).map_err(|_| ProposerError::MalformedJson(excerpt(raw)))?;
    let field = |name: &'static str| -> Result<String, ProposerError> {
        v.get(name)
            .and_then(|x| x.as_str())
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .ok_or(ProposerError::MissingField(name))
    };
    let major = field("major_category")?;
    let subcategory = field("subcategory")?;
    let text = field("prompt")?;
    if !major.trim().eq_ignore_ascii_case(expected.name) {
        return Err(ProposerError::CategoryMismatch {
            expected: expected.name.to_string(),
            got: major,
        });
    }
    Ok(ParsedProposal { subcategory, text })
}

fn excerpt(raw: &str) -> String {
    raw.chars().take(120).collect()
}

/// Argmax with lowest-index tie-break over judge scores.
pub fn select_top_index(scores: &[Rational]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) if s > &scores[b] => best = Some(i),
            _ => {}
        }
    }
    best
}

fn quality_score(
    client: &dyn ModelClient,
    category: &CategorySpec,
    text: &str,
) -> Result<Rational, ProposerError> {
    let request = judge::render_prompt_quality_prompt(category, text);
    let raw = client.complete_text(Role::Judge, &request)?;
    match judge::parse_judgement(&raw) {
        Ok(j) => Ok(j.score),
        // an unreadable quality verdict ranks the candidate last
        Err(_) => Ok(Rational::zero()),
    }
}

/// Generates `pool_size` zero-shot candidates, scores each with the
/// prompt-quality judge, and returns the top-scoring one (lowest candidate
/// index on ties) as the initial demo list.
pub fn bootstrap_demos(
    client: &dyn ModelClient,
    config: &PipelineConfig,
    category: &CategorySpec,
    pool_size: usize,
) -> Result<Vec<ParsedProposal>, ProposerError> {
    if pool_size < 2 {
        return Err(ProposerError::PoolTooSmall(pool_size));
    }
    let mut parsed: Vec<(usize, ParsedProposal)> = Vec::new();
    for k in 0..pool_size {
        let sub = category.subcategories[k % category.subcategories.len()];
        let mut request = render_proposer_prompt(category, &[], sub);
        let mut rng = derive_rng(
            config.master_seed,
            "proposer.decode",
            &format!("{}/boot/{}", category.id, k),
        );
        request.decode.seed = Some(rng.gen());
        request.decode.temperature = 1.0;
        let raw = client.complete_text(Role::Proposer, &request)?;
        if let Ok(p) = parse_proposal(&raw, category) {
            parsed.push((k, p));
        }
    }
    if parsed.is_empty() {
        return Err(ProposerError::AllCandidatesInvalid);
    }
    let scores: Vec<Rational> = parsed
        .iter()
        .map(|(_, p)| quality_score(client, category, &p.text))
        .collect::<Result<_, _>>()?;
    let winner = select_top_index(&scores).expect("non-empty pool");
    Ok(vec![parsed[winner].1.clone()])
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
struct CategoryCursor {
    attempts: usize,
    accepted: usize,
    round: u32,
    demo_ids: Vec<String>,
    reseeds: usize,
    bootstrapped: bool,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Checkpoint {
    categories: BTreeMap<String, CategoryCursor>,
}

struct CheckpointWriter {
    path: PathBuf,
    state: Mutex<Checkpoint>,
}

impl CheckpointWriter {
    fn update(&self, cat_id: &str, cursor: CategoryCursor) -> Result<(), ProposerError> {
        let mut state = self.state.lock().unwrap();
        state.categories.insert(cat_id.to_string(), cursor);
        let bytes = serde_json::to_vec_pretty(&*state).expect("checkpoint serializes");
        write_atomic(&self.path, &bytes)
    }
}

/// Runs proposal for every selected category (categories in parallel,
/// acceptance serialized per category) and writes `prompts.jsonl` plus the
/// per-category checkpoint. With an unchanged seed a resumed run converges
/// to the identical final library.
pub fn run_proposal_stage(
    client: &dyn ModelClient,
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<PromptLibrary, ProposerError> {
    let parts_dir = out_dir.join(PARTS_DIR);
    fs::create_dir_all(&parts_dir).map_err(|e| io_err(&parts_dir, e))?;
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let initial: Checkpoint = if ckpt_path.exists() {
        let text = fs::read_to_string(&ckpt_path).map_err(|e| io_err(&ckpt_path, e))?;
        serde_json::from_str(&text).map_err(|e| ProposerError::Corrupt(e.to_string()))?
    } else {
        Checkpoint::default()
    };
    let writer = CheckpointWriter {
        path: ckpt_path,
        state: Mutex::new(initial),
    };

    let selected = config.selected_categories();
    let results = parallel_map(&selected, config.parallelism, |_, category| {
        run_category(client, config, category, &parts_dir, &writer)
    });

    let mut library = PromptLibrary::default();
    for result in results {
        for rec in result? {
            library.push(rec);
        }
    }
    library.save(&out_dir.join(PROMPTS_FILE))?;
    Ok(library)
}

fn run_category(
    client: &dyn ModelClient,
    config: &PipelineConfig,
    category: &CategorySpec,
    parts_dir: &Path,
    writer: &CheckpointWriter,
) -> Result<Vec<PromptRecord>, ProposerError> {
    let target = config.prompts_per_category;
    let part_path = parts_dir.join(format!("{}.jsonl", category.id));

    // restore prior progress; the part file is the source of truth
    let mut records: Vec<PromptRecord> = if part_path.exists() {
        let text = fs::read_to_string(&part_path).map_err(|e| io_err(&part_path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(parse_record_line)
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };
    let mut cursor = {
        let state = writer.state.lock().unwrap();
        state
            .categories
            .get(category.id)
            .cloned()
            .unwrap_or_default()
    };
    cursor.accepted = records.len();
    let mut seen_hashes: std::collections::HashSet<String> =
        records.iter().map(|r| r.norm_hash.clone()).collect();

    let mut part_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&part_path)
        .map_err(|e| io_err(&part_path, e))?;
    let mut append = |rec: &PromptRecord| -> Result<(), ProposerError> {
        part_file
            .write_all(record_line(rec).as_bytes())
            .map_err(|e| io_err(&part_path, e))?;
        part_file.flush().map_err(|e| io_err(&part_path, e))
    };

    if !cursor.bootstrapped {
        let winners = bootstrap_demos(client, config, category, BOOTSTRAP_POOL)?;
        let winner = &winners[0];
        let rec = PromptRecord {
            id: format!("{}-{:05}", category.id, records.len()),
            major_category: category.id.to_string(),
            subcategory: winner.subcategory.clone(),
            text: winner.text.clone(),
            round: 0,
            demo_ids: Vec::new(),
            norm_hash: norm_hash(&winner.text),
        };
        seen_hashes.insert(rec.norm_hash.clone());
        append(&rec)?;
        cursor.demo_ids = vec![rec.id.clone()];
        records.push(rec);
        cursor.bootstrapped = true;
        cursor.round = 1;
        cursor.accepted = records.len();
        writer.update(category.id, cursor.clone())?;
    }

    let budget = MAX_ATTEMPT_FACTOR * target;
    while records.len() < target {
        if cursor.attempts >= budget {
            return Err(ProposerError::TargetUnreachable(category.id.to_string()));
        }
        let attempt = cursor.attempts;
        cursor.attempts += 1;
        let sub = category.subcategories[attempt % category.subcategories.len()];
        let demos: Vec<PromptRecord> = cursor
            .demo_ids
            .iter()
            .filter_map(|id| records.iter().find(|r| &r.id == id).cloned())
            .collect();
        let mut request = render_proposer_prompt(category, &demos, sub);
        let mut rng = derive_rng(
            config.master_seed,
            "proposer.decode",
            &format!("{}/{}", category.id, attempt),
        );
        request.decode.seed = Some(rng.gen());
        request.decode.temperature = 1.0;
        let raw = client.complete_text(Role::Proposer, &request)?;
        let proposal = match parse_proposal(&raw, category) {
            Ok(p) => p,
            Err(e) => {
                log::debug!("{}: discarded proposal ({e})", category.id);
                writer.update(category.id, cursor.clone())?;
                continue;
            }
        };
        let hash = norm_hash(&proposal.text);
        if seen_hashes.contains(&hash) {
            log::debug!("{}: duplicate prompt discarded", category.id);
            writer.update(category.id, cursor.clone())?;
            continue;
        }
        let rec = PromptRecord {
            id: format!("{}-{:05}", category.id, records.len()),
            major_category: category.id.to_string(),
            subcategory: proposal.subcategory,
            text: proposal.text,
            round: cursor.round,
            demo_ids: cursor.demo_ids.clone(),
            norm_hash: hash.clone(),
        };
        seen_hashes.insert(hash);
        append(&rec)?;
        records.push(rec);
        cursor.accepted = records.len();

        // dynamic seeding: refresh demos from the library slice
        let accepted_since_boot = records.len().saturating_sub(1);
        if accepted_since_boot > 0 && accepted_since_boot % config.reseed_cadence == 0 {
            let reseed_index = cursor.reseeds;
            cursor.reseeds += 1;
            let mut rng = derive_rng(
                config.master_seed,
                "proposer.reseed",
                &format!("{}/{}", category.id, reseed_index),
            );
            let sample_n = config.reseed_demo_count.min(records.len());
            let picked = rand::seq::index::sample(&mut rng, records.len(), sample_n).into_vec();
            let mut judged: Vec<(usize, Rational)> = Vec::with_capacity(picked.len());
            for idx in picked {
                let score = quality_score(client, category, &records[idx].text)?;
                judged.push((idx, score));
            }
            // highest score first, stable by library index
            judged.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            cursor.demo_ids = judged.iter().map(|(i, _)| records[*i].id.clone()).collect();
            cursor.round += 1;
        }
        writer.update(category.id, cursor.clone())?;
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::categories;

    fn demo(id: &str, cat: &str, text: &str) -> PromptRecord {
        PromptRecord {
            id: id.into(),
            major_category: cat.into(),
            subcategory: "single object".into(),
            text: text.into(),
            round: 0,
            demo_ids: vec![],
            norm_hash: norm_hash(text),
        }
    }

    #[test]
    fn render_contains_rule_verbatim_and_one_prompt_ask() {
        let cat = categories::by_name("General Object").unwrap();
        let req = render_proposer_prompt(cat, &[], "single-object");
        assert!(req.system.contains(cat.generation_rule));
        let flat = req.flat_text();
        assert!(flat.contains("Generate exactly ONE new prompt."));
        assert!(flat.contains("Target Subcategory: single-object"));
    }

    #[test]
    fn render_embeds_each_demo_once() {
        let cat = categories::by_name("General Object").unwrap();
        let demos = vec![
            demo("a-0", "general_object", "a red cube"),
            demo("a-1", "general_object", "a blue sphere"),
            demo("a-2", "general_object", "a green cone"),
        ];
        let req = render_proposer_prompt(cat, &demos, "shapes");
        // 3 demo objects + the schema sketch
        assert_eq!(req.system.matches("\"prompt\":").count(), 4);
        assert!(req.system.contains("a blue sphere"));
    }

    #[test]
    fn parse_accepts_bare_and_fenced() {
        let cat = categories::by_name("Counting").unwrap();
        let bare =
            r#"{"major_category":"Counting","subcategory":"small count","prompt":"five keys"}"#;
        let fenced = format!("```json\n{bare}\n```");
        assert_eq!(parse_proposal(bare, cat).unwrap().text, "five keys");
        assert_eq!(parse_proposal(&fenced, cat).unwrap().text, "five keys");
    }

    #[test]
    fn parse_rejects_mismatch_and_missing() {
        let counting = categories::by_name("Counting").unwrap();
        let wrong = r#"{"major_category":"Portrait","subcategory":"x","prompt":"p"}"#;
        assert!(matches!(
            parse_proposal(wrong, counting),
            Err(ProposerError::CategoryMismatch { .. })
        ));
        let missing = r#"{"major_category":"Counting","subcategory":"x"}"#;
        assert!(matches!(
            parse_proposal(missing, counting),
            Err(ProposerError::MissingField("prompt"))
        ));
        assert!(matches!(
            parse_proposal("not json", counting),
            Err(ProposerError::MalformedJson(_))
        ));
    }

    #[test]
    fn normalization_and_hash() {
        assert_eq!(normalize_prompt("  A  Red   Cube!! "), "a red cube");
        assert_eq!(norm_hash("A red cube."), norm_hash("a  red cube"));
        assert_ne!(norm_hash("a red cube"), norm_hash("a red cub"));
        assert_eq!(norm_hash("x").len(), 32); // 128-bit hex
    }

    #[test]
    fn top_index_breaks_ties_low() {
        // brute-force oracle over the list: argmax, first index wins ties
        let scores = vec![Rational::int(6), Rational::int(9), Rational::int(9)];
        assert_eq!(select_top_index(&scores), Some(1));
        let all_equal = vec![Rational::int(5); 4];
        assert_eq!(select_top_index(&all_equal), Some(0));
        assert_eq!(select_top_index(&[]), None);
    }
}
