//! Image rollout stage: N candidates per prompt under varied seeds and
//! guidance scales, with whole-group atomicity.
//!
//! Best-of-N selection and reflection mining assume N comparable
//! candidates, so a group is only ever emitted complete: a prompt whose
//! group cannot be finished within the retry budget is dropped whole and
//! logged, never truncated.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, Role};
use crate::gateway::{GatewayError, ImageRequest, ModelClient};
use crate::judge::Judgement;
use crate::parallel::parallel_map;
use crate::proposer::{PromptLibrary, PromptRecord};
use crate::rational::Rational;
use crate::rng::derive_rng;
use crate::store::ContentRef;

pub const ROLLOUTS_DIR: &str = "rollouts";
pub const ROLLOUT_INDEX_FILE: &str = "rollouts.index.jsonl";
/// Guidance scales cycled across a group's rollouts.
pub const CFG_GRID: [f64; 4] = [3.0, 4.0, 5.0, 6.0];
/// Rollout-time render size.
pub const IMAGE_SIZE: u32 = 512;
/// Stage-level regeneration attempts per candidate, on top of the
/// gateway's own transient retries.
const CANDIDATE_ATTEMPTS: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageCandidate {
    pub prompt_id: String,
    pub rollout_index: usize,
    pub params: ImageRequest,
    pub image: ContentRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judgement: Option<Judgement>,
}

impl ImageCandidate {
    pub fn score(&self) -> Option<&Rational> {
        self.judgement.as_ref().map(|j| &j.score)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub prompt: PromptRecord,
    pub candidates: Vec<ImageCandidate>,
    #[serde(default)]
    pub judged: bool,
}

impl RolloutGroup {
    /// Structural invariants: full cardinality, indices 0..N-1, seeds
    /// pairwise distinct, shared prompt id.
    pub fn check_complete(&self, n: usize) -> Result<(), SolverError> {
        if self.candidates.len() != n {
            return Err(SolverError::Corrupt(format!(
                "group {} has {} candidates, expected {n}",
                self.prompt.id,
                self.candidates.len()
            )));
        }
        for (i, c) in self.candidates.iter().enumerate() {
            if c.rollout_index != i {
                return Err(SolverError::Corrupt(format!(
                    "group {}: candidate at position {i} has rollout_index {}",
                    self.prompt.id, c.rollout_index
                )));
            }
            if c.prompt_id != self.prompt.id {
                return Err(SolverError::Corrupt(format!(
                    "group {}: candidate {i} carries prompt id {}",
                    self.prompt.id, c.prompt_id
                )));
            }
        }
        let mut seeds: Vec<u64> = self.candidates.iter().map(|c| c.params.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != n {
            return Err(SolverError::Corrupt(format!(
                "group {}: rollout seeds are not pairwise distinct",
                self.prompt.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SolverError {
    #[error("rollout needs n >= 2, got {0}")]
    TooFewRollouts(usize),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("solver io at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt rollout state: {0}")]
    Corrupt(String),
    #[error("dropped {dropped} of {total} groups, above the failure ceiling")]
    FailureRateExceeded { dropped: usize, total: usize },
}

fn io_err(path: &Path, source: std::io::Error) -> SolverError {
    SolverError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Builds the N image requests for one prompt: seeds drawn pairwise
/// distinct from the derived generator, guidance cycling over the grid.
pub fn schedule_params(
    prompt: &PromptRecord,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ImageRequest>, SolverError> {
    if n < 2 {
        return Err(SolverError::TooFewRollouts(n));
    }
    let mut seeds: Vec<u64> = Vec::with_capacity(n);
    while seeds.len() < n {
        let s: u64 = rng.gen();
        if !seeds.contains(&s) {
            seeds.push(s);
        }
    }
    Ok(seeds
        .into_iter()
        .enumerate()
        .map(|(i, seed)| ImageRequest {
            prompt: prompt.text.clone(),
            seed,
            cfg_text_scale: CFG_GRID[i % CFG_GRID.len()],
            width: IMAGE_SIZE,
            height: IMAGE_SIZE,
        })
        .collect())
}

pub fn group_path(out_dir: &Path, prompt_id: &str) -> PathBuf {
    out_dir.join(ROLLOUTS_DIR).join(format!("{prompt_id}.json"))
}

pub fn write_group(out_dir: &Path, group: &RolloutGroup) -> Result<(), SolverError> {
    let path = group_path(out_dir, &group.prompt.id);
    let tmp = path.with_extension("json.tmp");
    let bytes = serde_json::to_vec_pretty(group).expect("group serializes");
    fs::write(&tmp, &bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))
}

pub fn read_group(path: &Path) -> Result<RolloutGroup, SolverError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| SolverError::Corrupt(e.to_string()))
}

#[derive(Serialize, Deserialize)]
struct IndexLine {
    prompt_id: String,
    file: String,
    candidates: usize,
    judged: bool,
}

/// Executes rollouts for every library prompt. Complete groups found on
/// disk are reused (resume); failed prompts are dropped whole. Aborts when
/// the drop rate exceeds the configured ceiling.
pub fn run_rollout_stage(
    client: &dyn ModelClient,
    config: &PipelineConfig,
    library: &PromptLibrary,
    out_dir: &Path,
) -> Result<Vec<RolloutGroup>, SolverError> {
    let rollouts_dir = out_dir.join(ROLLOUTS_DIR);
    fs::create_dir_all(&rollouts_dir).map_err(|e| io_err(&rollouts_dir, e))?;
    let n = config.rollouts_per_prompt;

    let results = parallel_map(&library.records, config.parallelism, |_, prompt| {
        rollout_one(client, config, prompt, out_dir, n)
    });

    let mut groups = Vec::new();
    let mut dropped = 0usize;
    for result in results {
        match result? {
            Some(group) => groups.push(group),
            None => dropped += 1,
        }
    }
    let total = library.records.len();
    if total > 0 {
        let rate = Rational::from_usize(dropped) / Rational::from_usize(total);
        if rate > config.solver_failure_ceiling {
            return Err(SolverError::FailureRateExceeded { dropped, total });
        }
    }

    let mut index = String::new();
    for g in &groups {
        let line = IndexLine {
            prompt_id: g.prompt.id.clone(),
            file: format!("{ROLLOUTS_DIR}/{}.json", g.prompt.id),
            candidates: g.candidates.len(),
            judged: g.judged,
        };
        index.push_str(&serde_json::to_string(&line).unwrap());
        index.push('\n');
    }
    let index_path = out_dir.join(ROLLOUT_INDEX_FILE);
    let tmp = index_path.with_extension("jsonl.tmp");
    fs::write(&tmp, index.as_bytes()).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, &index_path).map_err(|e| io_err(&index_path, e))?;
    Ok(groups)
}

fn rollout_one(
    client: &dyn ModelClient,
    config: &PipelineConfig,
    prompt: &PromptRecord,
    out_dir: &Path,
    n: usize,
) -> Result<Option<RolloutGroup>, SolverError> {
    let path = group_path(out_dir, &prompt.id);
    if path.exists() {
        match read_group(&path) {
            Ok(group) if group.check_complete(n).is_ok() => return Ok(Some(group)),
            // partial or corrupt groups are regenerated whole
            _ => log::warn!("{}: discarding incomplete group file", prompt.id),
        }
    }
    let mut rng = derive_rng(config.master_seed, "solver.params", &prompt.id);
    let requests = schedule_params(prompt, n, &mut rng)?;
    let mut candidates = Vec::with_capacity(n);
    for (i, req) in requests.into_iter().enumerate() {
        let mut image = None;
        for attempt in 0..CANDIDATE_ATTEMPTS {
            match client.generate_image(Role::Solver, &req) {
                Ok(r) => {
                    image = Some(r);
                    break;
                }
                Err(e) if attempt + 1 < CANDIDATE_ATTEMPTS => {
                    log::warn!("{} rollout {i}: generation failed, regenerating ({e})", prompt.id);
                }
                Err(e) => {
                    log::warn!("{}: dropping whole group (rollout {i} failed: {e})", prompt.id);
                    return Ok(None);
                }
            }
        }
        candidates.push(ImageCandidate {
            prompt_id: prompt.id.clone(),
            rollout_index: i,
            params: req,
            image: image.expect("loop breaks only with an image"),
            judgement: None,
        });
    }
    let group = RolloutGroup {
        prompt: prompt.clone(),
        candidates,
        judged: false,
    };
    group.check_complete(n)?;
    write_group(out_dir, &group)?;
    Ok(Some(group))
}
