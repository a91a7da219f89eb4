//! Stage orchestration: resumable end-to-end runs with a per-run state
//! file, plus dataset validation.
//!
//! A run directory is keyed by the digest of its canonical config; resume
//! refuses to continue under an edited config. Stages checkpoint their own
//! progress (the proposer per acceptance, the solver per group); this
//! module sequences them and records which stages completed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, Role};
use crate::cpr::{self, CprError, Pattern, TrainingRecord};
use crate::curation::{self, CurationError};
use crate::gateway::{GatewayError, ModelClient};
use crate::judge::{self, JudgeError};
use crate::parallel::parallel_map;
use crate::proposer::{self, ProposerError, PromptLibrary};
use crate::rational::Rational;
use crate::solver::{self, RolloutGroup, SolverError};
use crate::unicycle::{self, CycleError};

pub const STATE_FILE: &str = "state.json";
pub const JUDGE_FAILURES_DIR: &str = "judge_failures";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Propose,
    Rollout,
    Judge,
    Curate,
    Build,
    Cycle,
}

impl Stage {
    pub const PIPELINE_ORDER: [Stage; 6] = [
        Stage::Propose,
        Stage::Rollout,
        Stage::Judge,
        Stage::Curate,
        Stage::Build,
        Stage::Cycle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Propose => "propose",
            Stage::Rollout => "rollout",
            Stage::Judge => "judge",
            Stage::Curate => "curate",
            Stage::Build => "build",
            Stage::Cycle => "cycle",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::PIPELINE_ORDER
            .into_iter()
            .find(|st| st.as_str() == s)
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    pub config_digest: String,
    pub completed_stages: Vec<Stage>,
}

impl RunState {
    pub fn new(config: &PipelineConfig) -> Self {
        let digest = config.digest();
        RunState {
            run_id: format!("run-{}", &digest[..12]),
            config_digest: digest,
            completed_stages: Vec::new(),
        }
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.completed_stages.contains(&stage)
    }

    fn mark(&mut self, stage: Stage) {
        if !self.is_complete(stage) {
            self.completed_stages.push(stage);
        }
    }

    pub fn load(out_dir: &Path) -> Result<Option<RunState>, PipelineError> {
        let path = out_dir.join(STATE_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let state =
            serde_json::from_str(&text).map_err(|e| PipelineError::Corrupt(e.to_string()))?;
        Ok(Some(state))
    }

    pub fn save(&self, out_dir: &Path) -> Result<(), PipelineError> {
        let path = out_dir.join(STATE_FILE);
        let tmp = path.with_extension("json.tmp");
        let mut text = serde_json::to_string_pretty(self).expect("state serializes");
        text.push('\n');
        fs::write(&tmp, text.as_bytes()).map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Proposer(#[from] ProposerError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Curation(#[from] CurationError),
    #[error(transparent)]
    Cpr(#[from] CprError),
    #[error(transparent)]
    Cycle(#[from] CycleError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("config drift: run was started with digest {expected}, current config has {found}")]
    ConfigDrift { expected: String, found: String },
    #[error("stage {stage} needs {artifact}, which is missing — run the earlier stages first")]
    MissingArtifact { stage: Stage, artifact: String },
    #[error("cycle stage needs benchmark_path in the config")]
    MissingBenchmark,
    #[error("pipeline io at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt run state: {0}")]
    Corrupt(String),
    #[error("validation failed: {0}")]
    Validation(String),
}

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Runs the requested stages in pipeline order. With `resume`, stages the
/// state file records as complete are skipped; without it, a fresh state
/// is written (an existing one with a different config digest is refused
/// either way).
pub fn run_stages(
    client: &dyn ModelClient,
    config: &PipelineConfig,
    out_dir: &Path,
    stages: &[Stage],
    resume: bool,
) -> Result<RunState, PipelineError> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut state = match RunState::load(out_dir)? {
        Some(existing) => {
            let digest = config.digest();
            if existing.config_digest != digest {
                return Err(PipelineError::ConfigDrift {
                    expected: existing.config_digest,
                    found: digest,
                });
            }
            if resume {
                existing
            } else {
                RunState::new(config)
            }
        }
        None => RunState::new(config),
    };
    state.save(out_dir)?;

    let mut ordered: Vec<Stage> = Stage::PIPELINE_ORDER
        .into_iter()
        .filter(|s| stages.contains(s))
        .collect();
    if ordered.is_empty() {
        ordered = stages.to_vec();
    }
    for stage in ordered {
        if resume && state.is_complete(stage) {
            log::info!("{stage}: already complete, skipping");
            continue;
        }
        log::info!("{stage}: starting");
        run_stage(client, config, out_dir, stage)?;
        state.mark(stage);
        state.save(out_dir)?;
        log::info!("{stage}: done");
    }
    Ok(state)
}

fn require_file(out_dir: &Path, name: &str, stage: Stage) -> Result<PathBuf, PipelineError> {
    let path = out_dir.join(name);
    if !path.exists() {
        return Err(PipelineError::MissingArtifact {
            stage,
            artifact: name.to_string(),
        });
    }
    Ok(path)
}

fn run_stage(
    client: &dyn ModelClient,
    config: &PipelineConfig,
    out_dir: &Path,
    stage: Stage,
) -> Result<(), PipelineError> {
    match stage {
        Stage::Propose => {
            proposer::run_proposal_stage(client, config, out_dir)?;
        }
        Stage::Rollout => {
            let prompts = require_file(out_dir, proposer::PROMPTS_FILE, stage)?;
            let library = PromptLibrary::load(&prompts)?;
            solver::run_rollout_stage(client, config, &library, out_dir)?;
        }
        Stage::Judge => {
            require_file(out_dir, solver::ROLLOUT_INDEX_FILE, stage)?;
            let groups = load_groups(out_dir)?;
            run_judge_stage(client, config, out_dir, groups)?;
        }
        Stage::Curate => {
            let groups = load_judged_groups(out_dir, stage)?;
            let (curated, _) = curation::curate_all(
                &groups,
                &config.judge_threshold,
                &config.reflection_min_gap,
                curation::DEFAULT_MAX_PAIRS,
            )?;
            curation::write_curated(out_dir, &curated)?;
        }
        Stage::Build => {
            let groups = load_judged_groups(out_dir, stage)?;
            let (curated, _) = curation::curate_all(
                &groups,
                &config.judge_threshold,
                &config.reflection_min_gap,
                curation::DEFAULT_MAX_PAIRS,
            )?;
            let records_by_pattern = BTreeMap::from([
                (Pattern::Generation, cpr::build_generation(&curated)?),
                (
                    Pattern::Caption,
                    cpr::build_caption(&curated, config.master_seed)?,
                ),
                (
                    Pattern::Judgement,
                    cpr::build_judgement(
                        &curated,
                        config.master_seed,
                        cpr::DEFAULT_JUDGEMENT_CAP,
                    )?,
                ),
                (Pattern::Reflection, cpr::build_reflection(&curated)?),
            ]);
            let (selected, counts, scale) = cpr::assemble_mixture(
                &records_by_pattern,
                &config.mixture_targets,
                config.master_seed,
            )?;
            cpr::write_shards(
                &selected,
                &counts,
                &config.mixture_targets,
                scale,
                config.master_seed,
                cpr::DEFAULT_SHARD_SIZE,
                out_dir,
            )?;
        }
        Stage::Cycle => {
            let Some(benchmark_path) = &config.benchmark_path else {
                return Err(PipelineError::MissingBenchmark);
            };
            let (instances, _) = unicycle::load_benchmark(Path::new(benchmark_path))?;
            run_cycle_stage(client, config, out_dir, &instances)?;
        }
    }
    Ok(())
}

fn load_groups(out_dir: &Path) -> Result<Vec<RolloutGroup>, PipelineError> {
    let index_path = out_dir.join(solver::ROLLOUT_INDEX_FILE);
    let text = fs::read_to_string(&index_path).map_err(|e| io_err(&index_path, e))?;
    let mut groups = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value =
            serde_json::from_str(line).map_err(|e| PipelineError::Corrupt(e.to_string()))?;
        let file = v["file"]
            .as_str()
            .ok_or_else(|| PipelineError::Corrupt("index line without file".into()))?;
        groups.push(solver::read_group(&out_dir.join(file))?);
    }
    Ok(groups)
}

fn load_judged_groups(out_dir: &Path, stage: Stage) -> Result<Vec<RolloutGroup>, PipelineError> {
    require_file(out_dir, solver::ROLLOUT_INDEX_FILE, stage)?;
    let groups = load_groups(out_dir)?;
    for g in &groups {
        if !g.judged {
            return Err(PipelineError::MissingArtifact {
                stage,
                artifact: format!("judgements for group {}", g.prompt.id),
            });
        }
    }
    Ok(groups)
}

/// Judges every unjudged group in place, archiving unparseable raw
/// completions under `judge_failures/`.
pub fn run_judge_stage(
    client: &dyn ModelClient,
    config: &PipelineConfig,
    out_dir: &Path,
    groups: Vec<RolloutGroup>,
) -> Result<Vec<RolloutGroup>, PipelineError> {
    let failures_dir = out_dir.join(JUDGE_FAILURES_DIR);
    fs::create_dir_all(&failures_dir).map_err(|e| io_err(&failures_dir, e))?;
    let results = parallel_map(&groups, config.parallelism, |_, group| {
        if group.judged {
            return Ok(group.clone());
        }
        let category = crate::categories::by_id(&group.prompt.major_category)
            .map_err(JudgeError::UnknownCategory)?;
        let mut judged_group = group.clone();
        let prompt_id = group.prompt.id.clone();
        judge::judge_group(client, category, &mut judged_group, |idx, raw| {
            let path = failures_dir.join(format!("{prompt_id}_{idx}.txt"));
            if let Err(e) = fs::write(&path, raw) {
                log::warn!("could not archive judge failure {}: {e}", path.display());
            }
        })?;
        solver::write_group(out_dir, &judged_group).map_err(|e| {
            JudgeError::Gateway(GatewayError::Precondition(format!(
                "cannot persist judged group: {e}"
            )))
        })?;
        Ok::<RolloutGroup, JudgeError>(judged_group)
    });
    let mut judged = Vec::with_capacity(groups.len());
    for r in results {
        judged.push(r?);
    }
    // refresh the index so the judged flags are queryable
    let index_path = out_dir.join(solver::ROLLOUT_INDEX_FILE);
    let mut index = String::new();
    for g in &judged {
        index.push_str(
            &serde_json::json!({
                "prompt_id": g.prompt.id,
                "file": format!("{}/{}.json", solver::ROLLOUTS_DIR, g.prompt.id),
                "candidates": g.candidates.len(),
                "judged": g.judged,
            })
            .to_string(),
        );
        index.push('\n');
    }
    fs::write(&index_path, index.as_bytes()).map_err(|e| io_err(&index_path, e))?;
    Ok(judged)
}

/// Runs the benchmark and writes `cycle_results.jsonl`, `report.json`, and
/// `report.md`. Returns the report.
pub fn run_cycle_stage(
    client: &dyn ModelClient,
    config: &PipelineConfig,
    out_dir: &Path,
    instances: &[unicycle::CycleInstance],
) -> Result<unicycle::BenchmarkReport, PipelineError> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let results = unicycle::run_benchmark(client, config, instances)?;
    let mut lines = String::new();
    for r in &results {
        lines.push_str(&serde_json::to_string(r).expect("result serializes"));
        lines.push('\n');
    }
    let results_path = out_dir.join(unicycle::RESULTS_FILE);
    fs::write(&results_path, lines.as_bytes()).map_err(|e| io_err(&results_path, e))?;

    let report = unicycle::aggregate_report(
        &results,
        instances,
        &config.endpoint(Role::CycleJudge).model_name,
        &config.endpoint(Role::Solver).model_name,
    );
    let report_path = out_dir.join(unicycle::REPORT_JSON);
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    fs::write(&report_path, text.as_bytes()).map_err(|e| io_err(&report_path, e))?;
    let md_path = out_dir.join(unicycle::REPORT_MD);
    fs::write(md_path.as_path(), unicycle::render_report_markdown(&report))
        .map_err(|e| io_err(&md_path, e))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub shards: usize,
    pub records: usize,
    pub captions_checked: usize,
    pub judgements_checked: usize,
    pub reflections_checked: usize,
}

/// Verifies a built dataset end to end: shard digests and counts, record
/// schemas, the Caption inverse-mapping (target equals the source prompt
/// byte for byte), Judgement target round-trips, and Reflection score
/// contrast. Fails on the first violation, naming its location.
pub fn validate_dataset(run_dir: &Path) -> Result<ValidationSummary, PipelineError> {
    let (manifest, records) = cpr::verify_shards(run_dir)?;
    let prompts_path = run_dir.join(proposer::PROMPTS_FILE);
    if !prompts_path.exists() {
        return Err(PipelineError::Validation(format!(
            "{} not found next to the dataset",
            proposer::PROMPTS_FILE
        )));
    }
    let library = PromptLibrary::load(&prompts_path)?;
    let mut groups: BTreeMap<String, RolloutGroup> = BTreeMap::new();
    let mut summary = ValidationSummary {
        shards: manifest.shards.len(),
        records: records.len(),
        captions_checked: 0,
        judgements_checked: 0,
        reflections_checked: 0,
    };
    for rec in &records {
        match &rec.payload {
            cpr::RecordPayload::Caption { target_text, .. } => {
                let source = library.get(&rec.source_prompt_id).ok_or_else(|| {
                    PipelineError::Validation(format!(
                        "record {}: source prompt {} not in library",
                        rec.id, rec.source_prompt_id
                    ))
                })?;
                if &source.text != target_text {
                    return Err(PipelineError::Validation(format!(
                        "record {}: caption target does not equal the source prompt text",
                        rec.id
                    )));
                }
                summary.captions_checked += 1;
            }
            cpr::RecordPayload::Judgement { target_json, .. } => {
                let target: cpr::JudgementTarget =
                    serde_json::from_str(target_json).map_err(|e| {
                        PipelineError::Validation(format!(
                            "record {}: target_json does not parse: {e}",
                            rec.id
                        ))
                    })?;
                if target.score < Rational::zero() || target.score > Rational::int(10) {
                    return Err(PipelineError::Validation(format!(
                        "record {}: target score {} out of range",
                        rec.id, target.score
                    )));
                }
                if target.analysis.trim().is_empty() {
                    return Err(PipelineError::Validation(format!(
                        "record {}: empty target analysis",
                        rec.id
                    )));
                }
                summary.judgements_checked += 1;
            }
            cpr::RecordPayload::Reflection { lose_judgement, .. } => {
                let group = match groups.get(&rec.source_prompt_id) {
                    Some(g) => g,
                    None => {
                        let path = solver::group_path(run_dir, &rec.source_prompt_id);
                        let g = solver::read_group(&path)?;
                        groups.insert(rec.source_prompt_id.clone(), g);
                        &groups[&rec.source_prompt_id]
                    }
                };
                let win = rec.provenance.first().copied().ok_or_else(|| {
                    PipelineError::Validation(format!("record {}: empty provenance", rec.id))
                })?;
                let win_score = group
                    .candidates
                    .get(win)
                    .and_then(|c| c.score())
                    .ok_or_else(|| {
                        PipelineError::Validation(format!(
                            "record {}: winning candidate {win} unjudged",
                            rec.id
                        ))
                    })?;
                if win_score <= &lose_judgement.score {
                    return Err(PipelineError::Validation(format!(
                        "record {}: reflection contrast violated ({} <= {})",
                        rec.id, win_score, lose_judgement.score
                    )));
                }
                summary.reflections_checked += 1;
            }
            cpr::RecordPayload::Generation { prompt_text, .. } => {
                if prompt_text.trim().is_empty() {
                    return Err(PipelineError::Validation(format!(
                        "record {}: empty prompt text",
                        rec.id
                    )));
                }
            }
        }
    }
    Ok(summary)
}

/// Convenience wrapper for callers that need the built training records.
pub fn load_dataset(run_dir: &Path) -> Result<Vec<TrainingRecord>, PipelineError> {
    Ok(cpr::verify_shards(run_dir)?.1)
}
