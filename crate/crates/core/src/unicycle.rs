//! Text→Image→Text cycle-consistency benchmark runner.
//!
//! For each instance the model under test generates an image from the
//! prompt, then answers every associated question independently from that
//! image alone. An external judge scores each answer against the original
//! prompt: binary questions score 0 or 1, text-rendering questions score
//! the fraction of required keywords recovered. Per instance, soft is the
//! mean of the question scores and hard is 1 only when every question
//! scores exactly 1 — all in exact rational arithmetic, since hard hinges
//! on exact equality.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, Role};
use crate::gateway::{ChatRequest, GatewayError, ImageRequest, ModelClient};
use crate::parallel::parallel_map;
use crate::rational::Rational;
use crate::rng::derive_rng;
use crate::store::ContentRef;

pub const RESULTS_FILE: &str = "cycle_results.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
/// Guidance used for the single benchmark render per instance.
const CYCLE_CFG: f64 = 4.0;
const CYCLE_SIZE: u32 = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionFormat {
    Mcq,
    Yesno,
    Open,
}

impl QuestionFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            QuestionFormat::Mcq => "mcq",
            QuestionFormat::Yesno => "yesno",
            QuestionFormat::Open => "open",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    Binary,
    KeywordFraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleQuestion {
    pub id: String,
    pub format: QuestionFormat,
    /// Derived from task_type when the file omits it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scoring_mode: Option<ScoringMode>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
    pub reference_answer: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub keywords: Vec<String>,
}

impl CycleQuestion {
    pub fn mode(&self) -> ScoringMode {
        self.scoring_mode.expect("loader resolves scoring modes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleInstance {
    pub id: String,
    /// The original text-to-image prompt T.
    pub prompt: String,
    pub task_type: String,
    pub questions: Vec<CycleQuestion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionScore {
    pub question_id: String,
    pub s: Rational,
    pub judge_raw: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleResult {
    pub instance_id: String,
    /// Absent when generation failed; such instances score zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ContentRef>,
    #[serde(default)]
    pub generation_failed: bool,
    pub per_question: Vec<QuestionScore>,
    pub soft: Rational,
    pub hard: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkCounts {
    pub instances: usize,
    pub questions: usize,
    pub mcq: usize,
    pub yesno: usize,
    pub open: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum CycleError {
    #[error("line {line}: {reason}")]
    SchemaViolation { line: usize, reason: String },
    #[error("duplicate instance id {0}")]
    DuplicateInstanceId(String),
    #[error("unparseable judge verdict: {0}")]
    VerdictUnparseable(String),
    #[error("keyword count is not an integer: {0}")]
    NonIntegerCount(String),
    #[error("cannot score an instance with no question scores")]
    EmptyScores,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("benchmark io at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn schema(line: usize, reason: impl Into<String>) -> CycleError {
    CycleError::SchemaViolation {
        line,
        reason: reason.into(),
    }
}

/// Loads the benchmark JSONL, validating every instance and resolving
/// scoring modes (text task types default to keyword-fraction). Returns
/// the instances with aggregate counts for comparison against the
/// published distribution.
pub fn load_benchmark(path: &Path) -> Result<(Vec<CycleInstance>, BenchmarkCounts), CycleError> {
    let text = fs::read_to_string(path).map_err(|e| CycleError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut instances = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut counts = BenchmarkCounts {
        instances: 0,
        questions: 0,
        mcq: 0,
        yesno: 0,
        open: 0,
    };
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut instance: CycleInstance =
            serde_json::from_str(line).map_err(|e| schema(line_no, e.to_string()))?;
        if !seen.insert(instance.id.clone()) {
            return Err(CycleError::DuplicateInstanceId(instance.id));
        }
        if instance.prompt.trim().is_empty() {
            return Err(schema(line_no, format!("{}: empty prompt", instance.id)));
        }
        if instance.questions.is_empty() {
            return Err(schema(line_no, format!("{}: no questions", instance.id)));
        }
        let mut qids = std::collections::HashSet::new();
        let text_task = instance.task_type.to_lowercase().contains("text");
        for q in &mut instance.questions {
            if !qids.insert(q.id.clone()) {
                return Err(schema(
                    line_no,
                    format!("{}: duplicate question id {}", instance.id, q.id),
                ));
            }
            if q.scoring_mode.is_none() {
                q.scoring_mode = Some(if text_task {
                    ScoringMode::KeywordFraction
                } else {
                    ScoringMode::Binary
                });
            }
            match q.format {
                QuestionFormat::Mcq => {
                    if q.options.len() < 2 {
                        return Err(schema(
                            line_no,
                            format!("{}/{}: mcq needs at least 2 options", instance.id, q.id),
                        ));
                    }
                    if !q.options.contains(&q.reference_answer) {
                        return Err(schema(
                            line_no,
                            format!(
                                "{}/{}: reference answer not among options",
                                instance.id, q.id
                            ),
                        ));
                    }
                }
                QuestionFormat::Yesno | QuestionFormat::Open => {
                    if q.reference_answer.trim().is_empty() {
                        return Err(schema(
                            line_no,
                            format!("{}/{}: empty reference answer", instance.id, q.id),
                        ));
                    }
                }
            }
            match q.mode() {
                ScoringMode::Binary => {
                    if !q.keywords.is_empty() {
                        return Err(schema(
                            line_no,
                            format!(
                                "{}/{}: binary questions must not carry keywords",
                                instance.id, q.id
                            ),
                        ));
                    }
                }
                ScoringMode::KeywordFraction => {
                    if q.keywords.is_empty() {
                        // denominator defaults to the normalized reference tokens
                        q.keywords = crate::gateway::normalize_tokens(&q.reference_answer);
                    }
                    if q.keywords.is_empty() {
                        return Err(schema(
                            line_no,
                            format!("{}/{}: no keywords derivable", instance.id, q.id),
                        ));
                    }
                }
            }
            counts.questions += 1;
            match q.format {
                QuestionFormat::Mcq => counts.mcq += 1,
                QuestionFormat::Yesno => counts.yesno += 1,
                QuestionFormat::Open => counts.open += 1,
            }
        }
        counts.instances += 1;
        instances.push(instance);
    }
    log::info!(
        "loaded benchmark: {} instances, {} questions (mcq {}, yes/no {}, open {})",
        counts.instances,
        counts.questions,
        counts.mcq,
        counts.yesno,
        counts.open
    );
    Ok((instances, counts))
}

/// Generates the image and collects one answer per question, each in a
/// fresh context. Returns None for the image when generation fails.
pub fn run_cycle_instance(
    client: &dyn ModelClient,
    config: &PipelineConfig,
    instance: &CycleInstance,
) -> (Option<ContentRef>, Vec<String>) {
    let mut rng = derive_rng(config.master_seed, "cycle.image", &instance.id);
    let request = ImageRequest {
        prompt: instance.prompt.clone(),
        seed: rng.gen(),
        cfg_text_scale: CYCLE_CFG,
        width: CYCLE_SIZE,
        height: CYCLE_SIZE,
    };
    let image = match client.generate_image(Role::Solver, &request) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("{}: image generation failed, scoring zero ({e})", instance.id);
            return (None, Vec::new());
        }
    };
    let mut answers = Vec::with_capacity(instance.questions.len());
    for q in &instance.questions {
        let answer = match client.answer_visual(Role::Vqa, &image, &q.text) {
            Ok(a) => a,
            Err(e) => {
                log::warn!("{}/{}: vqa failed ({e})", instance.id, q.id);
                String::new()
            }
        };
        answers.push(answer);
    }
    (Some(image), answers)
}

/// Renders the judging request for one answered question: binary questions
/// use the visual-QA template, keyword questions the text-rendering one.
pub fn render_eval_prompt(
    instance: &CycleInstance,
    question: &CycleQuestion,
    answer: &str,
) -> ChatRequest {
    let body = match question.mode() {
        ScoringMode::Binary => format!(
            "You are a strict visual QA evaluation assistant.\n\n\
             You will be given:\n\
             1) TASK_TYPE: the evaluation dimension to consider.\n\
             2) IMAGE_PROMPT describing what the image should contain.\n\
             3) ONE QA pair (Question, Answer).\n\
             4) A Reference Answer.\n\n\
             Your Task\n\
             Determine whether the Answer is consistent with IMAGE_PROMPT for TASK_TYPE only.\n\
             Ignore all other aspects. You may use the Reference Answer only for equivalence \
             checking.\n\n\
             Rules\n\
             - Use ONLY IMAGE_PROMPT; do NOT use external knowledge.\n\
             - Output \"yes\" ONLY if IMAGE_PROMPT clearly supports the Answer for TASK_TYPE.\n\
             - Output \"no\" if the Answer contradicts IMAGE_PROMPT, or if IMAGE_PROMPT is \
             insufficient.\n\
             - Output \"no\" if the Answer is a refusal, uncertainty, or hedging.\n\
             - Be strict: required details must be explicitly supported.\n\
             - Do NOT explain. Output JSON only.\n\n\
             Normalization rules (for equivalence checking only)\n\
             - Ignore letter case, punctuation, and extra whitespace.\n\
             - Minor spelling variants are equivalent (e.g., gray/grey, color/colour).\n\n\
             Output JSON with exactly these keys:\n\
             {{\n\
             \x20 \"question\": \"<question>\",\n\
             \x20 \"answer\": \"<answer>\",\n\
             \x20 \"evaluation\": \"yes\" or \"no\"\n\
             }}\n\n\
             [TASK_TYPE]\n{task_type}\n\n\
             [IMAGE_PROMPT]\n{image_prompt}\n\n\
             Question: {q}\n\
             Answer: {a}\n\
             Reference Answer: {r}",
            task_type = instance.task_type,
            image_prompt = instance.prompt,
            q = question.text,
            a = answer,
            r = question.reference_answer,
        ),
        ScoringMode::KeywordFraction => format!(
            "You are a strict text rendering QA evaluator.\n\n\
             You will be given:\n\
             1) IMAGE_PROMPT describing what the image should contain\n\
             2) ONE QA pair (Question, Answer)\n\
             3) A Reference Answer\n\n\
             Your task:\n\
             Count how many required words in the Answer are correctly supported by\n\
             IMAGE_PROMPT and Reference Answer.\n\n\
             Use ONLY IMAGE_PROMPT. Do NOT use external knowledge.\n\n\
             Output JSON only with exactly these keys:\n\
             {{\n\
             \x20 \"question\": \"<question>\",\n\
             \x20 \"answer\": \"<answer>\",\n\
             \x20 \"evaluation\": \"<number of correctly answered words>\"\n\
             }}\n\n\
             [IMAGE_PROMPT]\n{image_prompt}\n\n\
             Question: {q}\n\
             Answer: {a}\n\
             Reference Answer: {r}",
            image_prompt = instance.prompt,
            q = question.text,
            a = answer,
            r = question.reference_answer,
        ),
    };
    ChatRequest::text_only(String::new(), body)
}

/// Parses the judge's verdict JSON into a score fragment: binary yes/no
/// maps to 1/0; keyword counts are clamped to [0, keyword_total] and
/// divided exactly.
pub fn parse_eval_verdict(
    raw: &str,
    mode: ScoringMode,
    keyword_total: usize,
) -> Result<(Rational, Option<String>), CycleError> {
    let stripped = crate::salvage::strip_code_fences(raw);
    let span = crate::salvage::first_balanced_object(stripped)
        .ok_or_else(|| CycleError::VerdictUnparseable(excerpt(raw)))?;
    let v: serde_json::Value =
        serde_json::from_str(span).map_err(|_| CycleError::VerdictUnparseable(excerpt(raw)))?;
    let evaluation = v
        .get("evaluation")
        .ok_or_else(|| CycleError::VerdictUnparseable(excerpt(raw)))?;
    match mode {
        ScoringMode::Binary => {
            let word = evaluation
                .as_str()
                .map(|s| s.trim().to_lowercase())
                .ok_or_else(|| CycleError::VerdictUnparseable(excerpt(raw)))?;
            match word.as_str() {
                "yes" => Ok((Rational::one(), None)),
                "no" => Ok((Rational::zero(), None)),
                other => Err(CycleError::VerdictUnparseable(other.to_string())),
            }
        }
        ScoringMode::KeywordFraction => {
            assert!(keyword_total >= 1, "keyword_total must be positive");
            let count: i64 = match evaluation {
                serde_json::Value::Number(n) => n
                    .as_i64()
                    .ok_or_else(|| CycleError::NonIntegerCount(n.to_string()))?,
                serde_json::Value::String(s) => {
                    let t = s.trim();
                    t.parse::<i64>().map_err(|_| {
                        if t.parse::<f64>().is_ok() {
                            CycleError::NonIntegerCount(t.to_string())
                        } else {
                            CycleError::VerdictUnparseable(t.to_string())
                        }
                    })?
                }
                other => return Err(CycleError::VerdictUnparseable(other.to_string())),
            };
            let clamped = count.clamp(0, keyword_total as i64);
            let note = (clamped != count)
                .then(|| format!("count clamped from {count} to {clamped}"));
            Ok((
                Rational::int(clamped) / Rational::from_usize(keyword_total),
                note,
            ))
        }
    }
}

fn excerpt(raw: &str) -> String {
    raw.chars().take(120).collect()
}

/// Soft = mean of the question scores, Hard = 1 iff every score equals 1
/// exactly (rational equality, not epsilon).
pub fn score_instance(scores: &[QuestionScore]) -> Result<(Rational, bool), CycleError> {
    if scores.is_empty() {
        return Err(CycleError::EmptyScores);
    }
    let total: Rational = scores.iter().map(|q| q.s.clone()).sum();
    let soft = total / Rational::from_usize(scores.len());
    let hard = scores.iter().all(|q| q.s == Rational::one());
    Ok((soft, hard))
}

/// Runs the full benchmark: instances in parallel, image before questions,
/// results sorted by instance id.
pub fn run_benchmark(
    client: &dyn ModelClient,
    config: &PipelineConfig,
    instances: &[CycleInstance],
) -> Result<Vec<CycleResult>, CycleError> {
    let results = parallel_map(instances, config.parallelism, |_, instance| {
        evaluate_instance(client, config, instance)
    });
    let mut out: Vec<CycleResult> = results.into_iter().collect::<Result<_, _>>()?;
    out.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    Ok(out)
}

fn evaluate_instance(
    client: &dyn ModelClient,
    config: &PipelineConfig,
    instance: &CycleInstance,
) -> Result<CycleResult, CycleError> {
    let (image, answers) = run_cycle_instance(client, config, instance);
    if image.is_none() {
        // a model that cannot produce an image fails the whole cycle
        let per_question: Vec<QuestionScore> = instance
            .questions
            .iter()
            .map(|q| QuestionScore {
                question_id: q.id.clone(),
                s: Rational::zero(),
                judge_raw: String::new(),
                answer: String::new(),
                note: Some("generation failed".into()),
            })
            .collect();
        let (soft, hard) = score_instance(&per_question)?;
        return Ok(CycleResult {
            instance_id: instance.id.clone(),
            image: None,
            generation_failed: true,
            per_question,
            soft,
            hard,
        });
    }
    let mut per_question = Vec::with_capacity(instance.questions.len());
    for (q, answer) in instance.questions.iter().zip(&answers) {
        let request = render_eval_prompt(instance, q, answer);
        let raw = client.complete_text(Role::CycleJudge, &request)?;
        let (s, note) = match parse_eval_verdict(&raw, q.mode(), q.keywords.len().max(1)) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("{}/{}: verdict unusable, scoring 0 ({e})", instance.id, q.id);
                (Rational::zero(), Some(format!("verdict error: {e}")))
            }
        };
        per_question.push(QuestionScore {
            question_id: q.id.clone(),
            s,
            judge_raw: raw,
            answer: answer.clone(),
            note,
        });
    }
    let (soft, hard) = score_instance(&per_question)?;
    Ok(CycleResult {
        instance_id: instance.id.clone(),
        image,
        generation_failed: false,
        per_question,
        soft,
        hard,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTypeBreakdown {
    pub instances: usize,
    pub soft_mean_x100: f64,
    pub hard_mean_x100: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatBreakdown {
    pub questions: usize,
    pub mean_score_x100: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    /// Scores from a different judge are not comparable, so the report
    /// names the judge that produced them.
    pub judge_model: String,
    pub subject_model: String,
    pub instances: usize,
    pub generation_failures: usize,
    pub soft_mean_x100: f64,
    pub hard_mean_x100: f64,
    pub soft_mean_exact: Rational,
    pub hard_mean_exact: Rational,
    pub per_task_type: BTreeMap<String, TaskTypeBreakdown>,
    pub per_format: BTreeMap<String, FormatBreakdown>,
}

fn mean_x100(values: &[Rational]) -> (Rational, f64) {
    if values.is_empty() {
        return (Rational::zero(), 0.0);
    }
    let total: Rational = values.iter().cloned().sum();
    let mean = total / Rational::from_usize(values.len());
    let x100 = (Rational::int(100) * mean.clone()).to_f64();
    (mean, x100)
}

/// Aggregates per-instance results into the displayed means (×100) and
/// per-task-type / per-question-format breakdowns. Order independent: the
/// inputs are re-sorted by instance id.
pub fn aggregate_report(
    results: &[CycleResult],
    instances: &[CycleInstance],
    judge_model: &str,
    subject_model: &str,
) -> BenchmarkReport {
    let mut sorted: Vec<&CycleResult> = results.iter().collect();
    sorted.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    let by_id: BTreeMap<&str, &CycleInstance> =
        instances.iter().map(|i| (i.id.as_str(), i)).collect();

    let softs: Vec<Rational> = sorted.iter().map(|r| r.soft.clone()).collect();
    let hards: Vec<Rational> = sorted
        .iter()
        .map(|r| if r.hard { Rational::one() } else { Rational::zero() })
        .collect();
    let (soft_mean, soft_x100) = mean_x100(&softs);
    let (hard_mean, hard_x100) = mean_x100(&hards);

    let mut per_task: BTreeMap<String, (Vec<Rational>, Vec<Rational>)> = BTreeMap::new();
    let mut per_format: BTreeMap<String, Vec<Rational>> = BTreeMap::new();
    for r in &sorted {
        let Some(instance) = by_id.get(r.instance_id.as_str()) else {
            continue;
        };
        let entry = per_task.entry(instance.task_type.clone()).or_default();
        entry.0.push(r.soft.clone());
        entry
            .1
            .push(if r.hard { Rational::one() } else { Rational::zero() });
        for (q, score) in instance.questions.iter().zip(&r.per_question) {
            per_format
                .entry(q.format.as_str().to_string())
                .or_default()
                .push(score.s.clone());
        }
    }

    BenchmarkReport {
        judge_model: judge_model.to_string(),
        subject_model: subject_model.to_string(),
        instances: sorted.len(),
        generation_failures: sorted.iter().filter(|r| r.generation_failed).count(),
        soft_mean_x100: soft_x100,
        hard_mean_x100: hard_x100,
        soft_mean_exact: soft_mean,
        hard_mean_exact: hard_mean,
        per_task_type: per_task
            .into_iter()
            .map(|(k, (softs, hards))| {
                let (_, s) = mean_x100(&softs);
                let (_, h) = mean_x100(&hards);
                (
                    k,
                    TaskTypeBreakdown {
                        instances: softs.len(),
                        soft_mean_x100: s,
                        hard_mean_x100: h,
                    },
                )
            })
            .collect(),
        per_format: per_format
            .into_iter()
            .map(|(k, scores)| {
                let (_, m) = mean_x100(&scores);
                (
                    k,
                    FormatBreakdown {
                        questions: scores.len(),
                        mean_score_x100: m,
                    },
                )
            })
            .collect(),
    }
}

pub fn render_report_markdown(report: &BenchmarkReport) -> String {
    let mut md = String::new();
    md.push_str("# Cycle-consistency report\n\n");
    md.push_str(&format!(
        "- subject model: `{}`\n- judge model: `{}`\n- instances: {}\n- generation failures: {}\n\n",
        report.subject_model, report.judge_model, report.instances, report.generation_failures
    ));
    md.push_str(&format!(
        "| metric | score (x100) |\n|---|---|\n| soft | {:.1} |\n| hard | {:.1} |\n\n",
        report.soft_mean_x100, report.hard_mean_x100
    ));
    md.push_str("## Per task type\n\n| task type | instances | soft | hard |\n|---|---|---|---|\n");
    for (task, b) in &report.per_task_type {
        md.push_str(&format!(
            "| {task} | {} | {:.1} | {:.1} |\n",
            b.instances, b.soft_mean_x100, b.hard_mean_x100
        ));
    }
    md.push_str("\n## Per question format\n\n| format | questions | mean score |\n|---|---|---|\n");
    for (fmt, b) in &report.per_format {
        md.push_str(&format!(
            "| {fmt} | {} | {:.1} |\n",
            b.questions, b.mean_score_x100
        ));
    }
    md
}

/// Per-task-type rows for external plotting.
pub fn report_csv(report: &BenchmarkReport) -> String {
    let mut csv = String::from("task_type,instances,soft_mean_x100,hard_mean_x100\n");
    for (task, b) in &report.per_task_type {
        csv.push_str(&format!(
            "{task},{},{},{}\n",
            b.instances, b.soft_mean_x100, b.hard_mean_x100
        ));
    }
    csv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qs(scores: &[Rational]) -> Vec<QuestionScore> {
        scores
            .iter()
            .enumerate()
            .map(|(i, s)| QuestionScore {
                question_id: format!("q{i}"),
                s: s.clone(),
                judge_raw: String::new(),
                answer: String::new(),
                note: None,
            })
            .collect()
    }

    #[test]
    fn score_instance_examples() {
        let (soft, hard) = score_instance(&qs(&[
            Rational::one(),
            Rational::one(),
            Rational::one(),
        ]))
        .unwrap();
        assert_eq!(soft, Rational::one());
        assert!(hard);

        // hand evaluation: (1 + 0 + 1/2) / 3 = 1/2
        let (soft, hard) = score_instance(&qs(&[
            Rational::one(),
            Rational::zero(),
            Rational::new(1, 2),
        ]))
        .unwrap();
        assert_eq!(soft, Rational::new(1, 2));
        assert!(!hard);

        // exact rational equality, not float epsilon: 2/2 == 1
        let (soft, hard) = score_instance(&qs(&[
            Rational::one(),
            Rational::one(),
            Rational::new(2, 2),
        ]))
        .unwrap();
        assert_eq!(soft, Rational::one());
        assert!(hard);

        assert!(matches!(score_instance(&[]), Err(CycleError::EmptyScores)));
    }

    #[test]
    fn verdict_parsing() {
        let (s, _) =
            parse_eval_verdict("{\"question\":\"q\",\"answer\":\"a\",\"evaluation\":\"yes\"}",
                ScoringMode::Binary, 1)
            .unwrap();
        assert_eq!(s, Rational::one());
        let (s, _) = parse_eval_verdict("{\"evaluation\":\" No \"}", ScoringMode::Binary, 1).unwrap();
        assert_eq!(s, Rational::zero());

        // direct division per the text-scoring rule: 1 of 2 keywords
        let (s, _) =
            parse_eval_verdict("{\"evaluation\":\"1\"}", ScoringMode::KeywordFraction, 2).unwrap();
        assert_eq!(s, Rational::new(1, 2));
        // clamp rule: counts above the total cap at 1
        let (s, note) =
            parse_eval_verdict("{\"evaluation\":\"5\"}", ScoringMode::KeywordFraction, 2).unwrap();
        assert_eq!(s, Rational::one());
        assert!(note.unwrap().contains("clamped"));
        // bare numbers work too
        let (s, _) =
            parse_eval_verdict("{\"evaluation\": 2}", ScoringMode::KeywordFraction, 2).unwrap();
        assert_eq!(s, Rational::one());

        assert!(matches!(
            parse_eval_verdict("{\"evaluation\":\"maybe\"}", ScoringMode::Binary, 1),
            Err(CycleError::VerdictUnparseable(_))
        ));
        assert!(matches!(
            parse_eval_verdict("{\"evaluation\":\"1.5\"}", ScoringMode::KeywordFraction, 2),
            Err(CycleError::NonIntegerCount(_))
        ));
        assert!(matches!(
            parse_eval_verdict("no json", ScoringMode::Binary, 1),
            Err(CycleError::VerdictUnparseable(_))
        ));
    }

    fn sample_instance() -> CycleInstance {
        CycleInstance {
            id: "i1".into(),
            prompt: "a red apple on a wooden table".into(),
            task_type: "color".into(),
            questions: vec![CycleQuestion {
                id: "q1".into(),
                format: QuestionFormat::Open,
                scoring_mode: Some(ScoringMode::Binary),
                text: "What color is the apple?".into(),
                options: vec![],
                reference_answer: "red".into(),
                keywords: vec![],
            }],
        }
    }

    #[test]
    fn eval_prompt_anchors_and_slots() {
        let instance = sample_instance();
        let q = &instance.questions[0];
        let req = render_eval_prompt(&instance, q, "it is red");
        let flat = req.flat_text();
        assert!(flat.contains("Output \"no\" if the Answer is a refusal"));
        assert!(flat.contains("Question: What color is the apple?"));
        assert!(flat.contains("Answer: it is red"));
        assert!(flat.contains("Reference Answer: red"));
        assert!(flat.contains("[IMAGE_PROMPT]\na red apple on a wooden table"));

        let mut text_q = q.clone();
        text_q.scoring_mode = Some(ScoringMode::KeywordFraction);
        text_q.keywords = vec!["red".into()];
        let req = render_eval_prompt(&instance, &text_q, "red");
        assert!(req.flat_text().contains("Count how many required words"));
    }

    #[test]
    fn monotonicity_of_scores() {
        // raising any single s_k never decreases soft and never flips hard off
        let base = qs(&[Rational::new(1, 2), Rational::one(), Rational::zero()]);
        let (soft0, _) = score_instance(&base).unwrap();
        for i in 0..base.len() {
            let mut raised = base.clone();
            raised[i].s = Rational::one();
            let (soft1, hard1) = score_instance(&raised).unwrap();
            assert!(soft1 >= soft0);
            let all_one = raised.iter().all(|q| q.s == Rational::one());
            assert_eq!(hard1, all_one);
        }
    }

    #[test]
    fn aggregation_is_order_independent() {
        let instances = vec![
            CycleInstance {
                id: "a".into(),
                ..sample_instance()
            },
            CycleInstance {
                id: "b".into(),
                ..sample_instance()
            },
        ];
        let result = |id: &str, s: Rational, hard: bool| CycleResult {
            instance_id: id.into(),
            image: None,
            generation_failed: false,
            per_question: qs(&[s.clone()]),
            soft: s,
            hard,
        };
        let fwd = vec![
            result("a", Rational::one(), true),
            result("b", Rational::zero(), false),
        ];
        let rev = vec![fwd[1].clone(), fwd[0].clone()];
        let r1 = aggregate_report(&fwd, &instances, "judge", "subject");
        let r2 = aggregate_report(&rev, &instances, "judge", "subject");
        assert_eq!(r1, r2);
        assert_eq!(r1.soft_mean_x100, 50.0);
        assert_eq!(r1.hard_mean_x100, 50.0);
    }
}
