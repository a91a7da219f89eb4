//! Rubric judging: prompt rendering, robust parsing of analysis+score
//! JSON, and per-group judging with a retry-then-zero fallback.

use serde::{Deserialize, Serialize};

use crate::categories::{CategorySpec, UnknownCategory};
use crate::config::Role;
use crate::gateway::{ChatPart, ChatRequest, DecodeParams, GatewayError, ModelClient};
use crate::rational::Rational;
use crate::salvage;
use crate::solver::RolloutGroup;
use crate::store::{ContentKind, ContentRef};

/// A judge's verdict on one image: free-text reasoning plus a score in
/// [0, 10], kept as an exact rational.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgement {
    pub analysis: String,
    pub score: Rational,
    /// The completion the judgement was parsed from, kept for audit.
    pub raw: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub salvage_note: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum JudgeError {
    #[error("unparseable judge output: {0:?}")]
    Unparseable(String),
    #[error("judge output has no usable score")]
    ScoreMissing,
    #[error(transparent)]
    UnknownCategory(#[from] UnknownCategory),
    #[error("candidate {0} is already judged")]
    AlreadyJudged(usize),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Renders the image-judging request: the category rubric and scoring
/// standard go in the system block, the prompt and image in the user turn,
/// and the response contract demands reasoning before the score.
pub fn render_judge_prompt(
    category: &CategorySpec,
    prompt_text: &str,
    image: &ContentRef,
) -> Result<ChatRequest, JudgeError> {
    if image.kind != ContentKind::Image {
        return Err(JudgeError::Gateway(GatewayError::Precondition(format!(
            "judge needs an image ref, got {}",
            image.kind
        ))));
    }
    let system = format!(
        "You are a rigorous Visual Quality Assessment Expert. Your mission is to evaluate the \
         alignment and technical fidelity of generated images against specific text prompts \
         using a deterministic, objective framework.\n\n\
         Evaluation Criteria (Ranked by Priority):\n{rubric}\n\n\
         Scoring Standard:(0 - 10)\n{standard}\n\n\
         Response Format:\n\
         Return a strictly valid JSON object only. Do not include conversational filler, \
         markdown commentary, or code block delimiters.\n\
         {{\n\
         \x20 \"analysis\": \"A concise, objective breakdown of the evaluation points.\",\n\
         \x20 \"score\": \"Integer or float from 0 to 10\"\n\
         }}",
        rubric = category.judgement_rubric,
        standard = category.scoring_standard,
    );
    let user = format!(
        "Input Data:\nCategory: {}\nPrompt: {}\nImage:",
        category.name, prompt_text
    );
    Ok(ChatRequest {
        system,
        user_turns: vec![ChatPart::Text(user), ChatPart::Image(image.clone())],
        decode: DecodeParams::default(),
    })
}

/// Text-only variant used to score candidate prompts during proposer
/// bootstrapping and demo reseeding. Same response contract as the image
/// judge so one parser serves both.
pub fn render_prompt_quality_prompt(category: &CategorySpec, prompt_text: &str) -> ChatRequest {
    let system = format!(
        "You are a rigorous Prompt Quality Assessment Expert. Your mission is to evaluate \
         candidate text-to-image prompts for the category {name} using a deterministic, \
         objective framework.\n\n\
         Evaluation Criteria (Ranked by Priority):\n\
         Specificity of the described scene, fit to the category rule, and informational \
         density sufficient for complex image generation.\n\n\
         Category rule:\n{rule}\n\n\
         Scoring Standard:(0 - 10)\n\
         9-10: highly specific, dense, and squarely within the category. 7-8: clear fit with \
         adequate detail. 4-6: generic or thin. 1-3: barely related. 0: unusable.\n\n\
         Response Format:\n\
         Return a strictly valid JSON object only. Do not include conversational filler, \
         markdown commentary, or code block delimiters.\n\
         {{\n\
         \x20 \"analysis\": \"A concise, objective breakdown of the evaluation points.\",\n\
         \x20 \"score\": \"Integer or float from 0 to 10\"\n\
         }}",
        name = category.name,
        rule = category.generation_rule,
    );
    let user = format!(
        "Input Data:\nCategory: {}\nCandidate prompt: {}",
        category.name, prompt_text
    );
    ChatRequest::text_only(system, user)
}

fn score_from_value(v: &serde_json::Value) -> Option<(Rational, Option<String>)> {
    match v {
        serde_json::Value::Number(n) => Rational::parse(&n.to_string()).ok().map(|r| (r, None)),
        serde_json::Value::String(s) => {
            let s = s.trim();
            if let Ok(r) = Rational::parse(s) {
                return Some((r, None));
            }
            // "8.5/10" style: take the part before the denominator
            if let Some(prefix) = s.strip_suffix("/10") {
                if let Ok(r) = Rational::parse(prefix.trim()) {
                    return Some((r, Some(format!("score read from {s:?}"))));
                }
            }
            None
        }
        _ => None,
    }
}

fn clamp_score(score: Rational, notes: &mut Vec<String>) -> Rational {
    let lo = Rational::zero();
    let hi = Rational::int(10);
    if score < lo || score > hi {
        notes.push(format!("clamped from {score}"));
        score.clamped(&lo, &hi)
    } else {
        score
    }
}

fn judgement_from_object(
    obj: &serde_json::Value,
    raw: &str,
    mut notes: Vec<String>,
) -> Result<Judgement, JudgeError> {
    let score_value = obj.get("score").ok_or(JudgeError::ScoreMissing)?;
    let (score, score_note) = score_from_value(score_value).ok_or(JudgeError::ScoreMissing)?;
    if let Some(n) = score_note {
        notes.push(n);
    }
    let score = clamp_score(score, &mut notes);
    let analysis = match obj.get("analysis").and_then(|a| a.as_str()) {
        Some(a) if !a.trim().is_empty() => a.to_string(),
        _ => {
            notes.push("analysis missing; placeholder inserted".into());
            "(no analysis provided)".to_string()
        }
    };
    Ok(Judgement {
        analysis,
        score,
        raw: raw.to_string(),
        salvage_note: if notes.is_empty() {
            None
        } else {
            Some(notes.join("; "))
        },
    })
}

/// Parses a judge completion, applying the salvage ladder in order:
/// whole-text JSON, fence stripping, first balanced `{...}` span, and
/// finally a key scan for a recoverable score and analysis. Scores outside
/// [0, 10] are clamped with a note; a non-numeric score is an error.
pub fn parse_judgement(raw: &str) -> Result<Judgement, JudgeError> {
    // step 1: the whole completion is the JSON object
    if let Ok(v) = serde_json::from_str::<serde_json::Value>(raw.trim()) {
        if v.is_object() {
            return judgement_from_object(&v, raw, Vec::new());
        }
    }
    // step 2: strip code fences
    let stripped = salvage::strip_code_fences(raw);
    if !std::ptr::eq(stripped, raw) {
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(stripped.trim()) {
            if v.is_object() {
                return judgement_from_object(&v, raw, vec!["stripped code fences".into()]);
            }
        }
    }
    // step 3: first balanced object span
    if let Some(span) = salvage::first_balanced_object(stripped) {
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(span) {
            if v.is_object() {
                return judgement_from_object(
                    &v,
                    raw,
                    vec!["parsed from first balanced JSON span".into()],
                );
            }
        }
    }
    // step 4: key scan when the JSON itself is broken
    if let Some(number) = salvage::scan_number_after_key(stripped, "score") {
        let analysis = salvage::scan_string_after_key(stripped, "analysis");
        if let Some(analysis) = analysis.filter(|a| !a.trim().is_empty()) {
            let mut notes = vec!["recovered by key scan".into()];
            let score = Rational::parse(&number).map_err(|_| JudgeError::ScoreMissing)?;
            let score = clamp_score(score, &mut notes);
            return Ok(Judgement {
                analysis,
                score,
                raw: raw.to_string(),
                salvage_note: Some(notes.join("; ")),
            });
        }
    }
    // distinguish "saw a score key but no usable number" from "no JSON at all"
    if stripped.contains("\"score\"") {
        return Err(JudgeError::ScoreMissing);
    }
    let excerpt: String = raw.chars().take(120).collect();
    Err(JudgeError::Unparseable(excerpt))
}

/// Judges every candidate in a group. A candidate whose completion fails
/// to parse is retried once with an explicit JSON reminder; a second
/// failure scores 0 with a salvage note so the group keeps its full
/// cardinality for best-of-N and pair mining.
pub fn judge_group(
    client: &dyn ModelClient,
    category: &CategorySpec,
    group: &mut RolloutGroup,
    mut on_failure: impl FnMut(usize, &str),
) -> Result<(), JudgeError> {
    for (i, cand) in group.candidates.iter().enumerate() {
        if cand.judgement.is_some() {
            return Err(JudgeError::AlreadyJudged(i));
        }
    }
    for cand in group.candidates.iter_mut() {
        let request = render_judge_prompt(category, &group.prompt.text, &cand.image)?;
        let raw = client.complete_text(Role::Judge, &request)?;
        let judgement = match parse_judgement(&raw) {
            Ok(j) => j,
            Err(first_err) => {
                let mut retry = request.clone();
                retry
                    .user_turns
                    .push(ChatPart::Text("Return ONLY the JSON object.".to_string()));
                let raw2 = client.complete_text(Role::Judge, &retry)?;
                match parse_judgement(&raw2) {
                    Ok(mut j) => {
                        let note = format!("retried after: {first_err}");
                        j.salvage_note = Some(match j.salvage_note {
                            Some(existing) => format!("{existing}; {note}"),
                            None => note,
                        });
                        j
                    }
                    Err(_) => {
                        on_failure(cand.rollout_index, &raw2);
                        log::warn!(
                            "judge unparseable twice for {} rollout {}; scoring 0",
                            group.prompt.id,
                            cand.rollout_index
                        );
                        Judgement {
                            analysis: "(judge output unparseable after retry)".into(),
                            score: Rational::zero(),
                            raw: raw2,
                            salvage_note: Some("judge-unparseable".into()),
                        }
                    }
                }
            }
        };
        cand.judgement = Some(judgement);
    }
    group.judged = true;
    Ok(())
}
