//! Training-record construction: transform curated groups into the four
//! record patterns, assemble the configured mixture, and write sharded
//! JSONL with a content-addressed manifest.
//!
//! The four patterns reconstruct the self-play trace from different
//! angles: Generation keeps the best image per passing prompt, Caption
//! inverts it (image back to its originating prompt, byte for byte),
//! Judgement pairs an image with the judge's exact verdict, and Reflection
//! pairs a losing image and its judgement with the winning image as the
//! target.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::categories;
use crate::curation::CuratedGroup;
use crate::judge::Judgement;
use crate::rational::Rational;
use crate::rng::derive_rng;
use crate::store::{sha256_hex, ContentRef};

pub const DATASET_DIR: &str = "dataset";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_SHARD_SIZE: usize = 1000;
/// Judgement records sampled per group, stratified over the score range.
pub const DEFAULT_JUDGEMENT_CAP: usize = 2;
const SCHEMA_VERSION: u32 = 1;

const RECONSTRUCT_TEMPLATES: &str = include_str!("../assets/caption_reconstruct_templates.txt");
const PLAIN_TEMPLATES: &str = include_str!("../assets/caption_plain_templates.txt");
/// Prompts carrying these phrasings get a prompt-reconstruction
/// instruction instead of a plain caption ask.
const GENERATION_PHRASINGS: [&str; 2] = ["generate an image", "create an image"];

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Generation,
    Caption,
    Judgement,
    Reflection,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [
        Pattern::Generation,
        Pattern::Caption,
        Pattern::Judgement,
        Pattern::Reflection,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Pattern::Generation => "generation",
            Pattern::Caption => "caption",
            Pattern::Judgement => "judgement",
            Pattern::Reflection => "reflection",
        }
    }
}

impl std::fmt::Display for Pattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pattern", rename_all = "snake_case")]
pub enum RecordPayload {
    Generation {
        prompt_text: String,
        image: ContentRef,
    },
    Caption {
        instruction: String,
        image: ContentRef,
        /// Byte-identical to the originating prompt text.
        target_text: String,
    },
    Judgement {
        /// Rendered judge prompt text the record trains against.
        instruction: String,
        prompt_text: String,
        image: ContentRef,
        /// Serialized {"analysis", "score"} pair; parses back exactly.
        target_json: String,
    },
    Reflection {
        prompt_text: String,
        lose_image: ContentRef,
        lose_judgement: Judgement,
        target_image: ContentRef,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub id: String,
    pub source_prompt_id: String,
    /// Rollout indices the record was built from.
    pub provenance: Vec<usize>,
    #[serde(flatten)]
    pub payload: RecordPayload,
}

impl TrainingRecord {
    pub fn pattern(&self) -> Pattern {
        match self.payload {
            RecordPayload::Generation { .. } => Pattern::Generation,
            RecordPayload::Caption { .. } => Pattern::Caption,
            RecordPayload::Judgement { .. } => Pattern::Judgement,
            RecordPayload::Reflection { .. } => Pattern::Reflection,
        }
    }
}

/// The {analysis, score} pair a Judgement record targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgementTarget {
    pub analysis: String,
    pub score: Rational,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardInfo {
    pub path: String,
    pub record_count: usize,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub master_seed: u64,
    pub counts: BTreeMap<Pattern, usize>,
    pub mixture_targets: BTreeMap<Pattern, usize>,
    pub scale_factor: Rational,
    pub shards: Vec<ShardInfo>,
}

#[derive(Debug, thiserror::Error)]
pub enum CprError {
    #[error("no records available for pattern {0}; mixture infeasible")]
    MixtureInfeasible(Pattern),
    #[error("mixture targets must be positive (pattern {0})")]
    ZeroTarget(Pattern),
    #[error("group {0} lacks a judgement for candidate {1}")]
    Unjudged(String, usize),
    #[error("unknown category {0} on group {1}")]
    UnknownCategory(String, String),
    #[error("dataset io at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset verification failed: {0}")]
    Verify(String),
}

fn io_err(path: &Path, source: std::io::Error) -> CprError {
    CprError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn templates(raw: &'static str) -> Vec<&'static str> {
    raw.lines().map(str::trim).filter(|l| !l.is_empty()).collect()
}

fn reconstruct_pool() -> &'static [&'static str] {
    static POOL: OnceLock<Vec<&'static str>> = OnceLock::new();
    POOL.get_or_init(|| templates(RECONSTRUCT_TEMPLATES))
}

fn plain_pool() -> &'static [&'static str] {
    static POOL: OnceLock<Vec<&'static str>> = OnceLock::new();
    POOL.get_or_init(|| templates(PLAIN_TEMPLATES))
}

pub fn uses_generation_phrasing(prompt_text: &str) -> bool {
    let lower = prompt_text.to_lowercase();
    GENERATION_PHRASINGS.iter().any(|p| lower.contains(p))
}

fn require_judgement<'a>(
    curated: &'a CuratedGroup,
    index: usize,
) -> Result<&'a Judgement, CprError> {
    curated.group.candidates[index]
        .judgement
        .as_ref()
        .ok_or_else(|| CprError::Unjudged(curated.group.prompt.id.clone(), index))
}

/// One record per passing group: the prompt paired with its best image.
pub fn build_generation(curated: &[CuratedGroup]) -> Result<Vec<TrainingRecord>, CprError> {
    let mut out = Vec::new();
    for c in curated.iter().filter(|c| c.passed) {
        let best = c.best_index.expect("passed groups carry best_index");
        out.push(TrainingRecord {
            id: format!("g-{}", c.group.prompt.id),
            source_prompt_id: c.group.prompt.id.clone(),
            provenance: vec![best],
            payload: RecordPayload::Generation {
                prompt_text: c.group.prompt.text.clone(),
                image: c.group.candidates[best].image.clone(),
            },
        });
    }
    Ok(out)
}

/// One record per passing group: instruction sampled from the
/// reconstruction pool when the prompt uses generation phrasing, the plain
/// caption pool otherwise; the target is the originating prompt text.
pub fn build_caption(
    curated: &[CuratedGroup],
    master_seed: u64,
) -> Result<Vec<TrainingRecord>, CprError> {
    let mut out = Vec::new();
    for c in curated.iter().filter(|c| c.passed) {
        let best = c.best_index.expect("passed groups carry best_index");
        let pool = if uses_generation_phrasing(&c.group.prompt.text) {
            reconstruct_pool()
        } else {
            plain_pool()
        };
        let mut rng = derive_rng(master_seed, "cpr.caption", &c.group.prompt.id);
        let instruction = pool[rng.gen_range(0..pool.len())].to_string();
        out.push(TrainingRecord {
            id: format!("c-{}", c.group.prompt.id),
            source_prompt_id: c.group.prompt.id.clone(),
            provenance: vec![best],
            payload: RecordPayload::Caption {
                instruction,
                image: c.group.candidates[best].image.clone(),
                target_text: c.group.prompt.text.clone(),
            },
        });
    }
    Ok(out)
}

/// Samples up to `per_group_cap` candidates per judged group — passing or
/// not, since the pattern trains evaluation — stratified so the first pick
/// comes from the top half of the group's scores and the second from the
/// bottom half. The target is the candidate's exact judgement.
pub fn build_judgement(
    curated: &[CuratedGroup],
    master_seed: u64,
    per_group_cap: usize,
) -> Result<Vec<TrainingRecord>, CprError> {
    let mut out = Vec::new();
    if per_group_cap == 0 {
        return Ok(out);
    }
    for c in curated {
        let group = &c.group;
        let n = group.candidates.len();
        let category = categories::by_id(&group.prompt.major_category).map_err(|_| {
            CprError::UnknownCategory(group.prompt.major_category.clone(), group.prompt.id.clone())
        })?;
        // candidate indices ordered by ascending score, index-stable
        let mut by_score: Vec<usize> = (0..n).collect();
        let scores: Vec<&Rational> = group
            .candidates
            .iter()
            .enumerate()
            .map(|(i, cand)| {
                cand.score()
                    .ok_or_else(|| CprError::Unjudged(group.prompt.id.clone(), i))
            })
            .collect::<Result<_, _>>()?;
        by_score.sort_by(|a, b| scores[*a].cmp(scores[*b]).then(a.cmp(b)));
        let bottom = &by_score[..n / 2];
        let top = &by_score[n / 2..];

        let mut rng = derive_rng(master_seed, "cpr.judgement", &group.prompt.id);
        let mut chosen: Vec<usize> = Vec::new();
        if !top.is_empty() {
            chosen.push(top[rng.gen_range(0..top.len())]);
        }
        if chosen.len() < per_group_cap && !bottom.is_empty() {
            chosen.push(bottom[rng.gen_range(0..bottom.len())]);
        }
        while chosen.len() < per_group_cap.min(n) {
            let remaining: Vec<usize> =
                (0..n).filter(|i| !chosen.contains(i)).collect();
            if remaining.is_empty() {
                break;
            }
            chosen.push(remaining[rng.gen_range(0..remaining.len())]);
        }
        chosen.sort_unstable();

        for idx in chosen {
            let judgement = require_judgement(c, idx)?;
            let target = JudgementTarget {
                analysis: judgement.analysis.clone(),
                score: judgement.score.clone(),
            };
            let instruction = crate::judge::render_judge_prompt(
                category,
                &group.prompt.text,
                &group.candidates[idx].image,
            )
            .expect("image refs are images")
            .flat_text();
            out.push(TrainingRecord {
                id: format!("j-{}-{}", group.prompt.id, idx),
                source_prompt_id: group.prompt.id.clone(),
                provenance: vec![idx],
                payload: RecordPayload::Judgement {
                    instruction,
                    prompt_text: group.prompt.text.clone(),
                    image: group.candidates[idx].image.clone(),
                    target_json: serde_json::to_string(&target).unwrap(),
                },
            });
        }
    }
    Ok(out)
}

/// One record per mined pair: (prompt, losing image, its judgement) with
/// the winning image as target. Pairs without a strict score gap are
/// skipped, keeping the win/lose contrast real.
pub fn build_reflection(curated: &[CuratedGroup]) -> Result<Vec<TrainingRecord>, CprError> {
    let mut out = Vec::new();
    for c in curated {
        for &(win, lose) in &c.reflection_pairs {
            let win_j = require_judgement(c, win)?;
            let lose_j = require_judgement(c, lose)?;
            if win_j.score <= lose_j.score {
                log::debug!(
                    "{}: skipping reflection pair ({win},{lose}) without strict contrast",
                    c.group.prompt.id
                );
                continue;
            }
            out.push(TrainingRecord {
                id: format!("r-{}-{}", c.group.prompt.id, lose),
                source_prompt_id: c.group.prompt.id.clone(),
                provenance: vec![win, lose],
                payload: RecordPayload::Reflection {
                    prompt_text: c.group.prompt.text.clone(),
                    lose_image: c.group.candidates[lose].image.clone(),
                    lose_judgement: lose_j.clone(),
                    target_image: c.group.candidates[win].image.clone(),
                },
            });
        }
    }
    Ok(out)
}

/// Scales the mixture to availability: with f = min over patterns of
/// available/target (capped at 1), each pattern contributes
/// floor(f × target) records chosen by seeded uniform sampling without
/// replacement, so the configured ratios survive scarcity.
pub fn assemble_mixture(
    records_by_pattern: &BTreeMap<Pattern, Vec<TrainingRecord>>,
    targets: &BTreeMap<Pattern, usize>,
    master_seed: u64,
) -> Result<(Vec<TrainingRecord>, BTreeMap<Pattern, usize>, Rational), CprError> {
    let mut scale = Rational::one();
    for pattern in Pattern::ALL {
        let target = *targets.get(&pattern).unwrap_or(&0);
        if target == 0 {
            return Err(CprError::ZeroTarget(pattern));
        }
        let available = records_by_pattern.get(&pattern).map_or(0, Vec::len);
        if available == 0 {
            return Err(CprError::MixtureInfeasible(pattern));
        }
        let ratio = Rational::from_usize(available) / Rational::from_usize(target);
        scale = scale.min(ratio);
    }

    let mut selected = Vec::new();
    let mut counts = BTreeMap::new();
    for pattern in Pattern::ALL {
        let target = targets[&pattern];
        let pool = &records_by_pattern[&pattern];
        let take = (scale.clone() * Rational::from_usize(target)).floor_usize();
        let take = take.min(pool.len());
        counts.insert(pattern, take);

        let mut ordered: Vec<usize> = (0..pool.len()).collect();
        ordered.sort_by(|a, b| pool[*a].id.cmp(&pool[*b].id));
        let mut rng = derive_rng(master_seed, "cpr.mixture", pattern.as_str());
        let mut picked = rand::seq::index::sample(&mut rng, ordered.len(), take).into_vec();
        picked.sort_unstable();
        for p in picked {
            selected.push(pool[ordered[p]].clone());
        }
    }
    Ok((selected, counts, scale))
}

/// Serializes records one JSON object per line in deterministic order —
/// sorted by (pattern, id), then round-robin interleaved across patterns —
/// split into shards with recorded digests.
pub fn write_shards(
    records: &[TrainingRecord],
    counts: &BTreeMap<Pattern, usize>,
    targets: &BTreeMap<Pattern, usize>,
    scale_factor: Rational,
    master_seed: u64,
    shard_size: usize,
    out_dir: &Path,
) -> Result<DatasetManifest, CprError> {
    assert!(shard_size > 0);
    let dataset_dir = out_dir.join(DATASET_DIR);
    fs::create_dir_all(&dataset_dir).map_err(|e| io_err(&dataset_dir, e))?;

    let mut by_pattern: BTreeMap<Pattern, Vec<&TrainingRecord>> = BTreeMap::new();
    for r in records {
        by_pattern.entry(r.pattern()).or_default().push(r);
    }
    for list in by_pattern.values_mut() {
        list.sort_by(|a, b| a.id.cmp(&b.id));
    }
    let mut interleaved: Vec<&TrainingRecord> = Vec::with_capacity(records.len());
    let mut cursors: BTreeMap<Pattern, usize> = BTreeMap::new();
    while interleaved.len() < records.len() {
        for pattern in Pattern::ALL {
            let cursor = cursors.entry(pattern).or_insert(0);
            if let Some(list) = by_pattern.get(&pattern) {
                if *cursor < list.len() {
                    interleaved.push(list[*cursor]);
                    *cursor += 1;
                }
            }
        }
    }

    let mut shards = Vec::new();
    for (shard_idx, chunk) in interleaved.chunks(shard_size).enumerate() {
        let name = format!("shard-{shard_idx:04}.jsonl");
        let mut body = String::new();
        for rec in chunk {
            body.push_str(&serde_json::to_string(rec).expect("record serializes"));
            body.push('\n');
        }
        let path = dataset_dir.join(&name);
        fs::write(&path, body.as_bytes()).map_err(|e| io_err(&path, e))?;
        shards.push(ShardInfo {
            path: format!("{DATASET_DIR}/{name}"),
            record_count: chunk.len(),
            digest: sha256_hex(body.as_bytes()),
        });
    }

    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        master_seed,
        counts: counts.clone(),
        mixture_targets: targets.clone(),
        scale_factor,
        shards,
    };
    let manifest_path = dataset_dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&manifest_path, text.as_bytes()).map_err(|e| io_err(&manifest_path, e))?;
    Ok(manifest)
}

/// Re-reads a written dataset and checks shard digests and record counts
/// against the manifest. Returns the parsed records for deeper checks.
pub fn verify_shards(out_dir: &Path) -> Result<(DatasetManifest, Vec<TrainingRecord>), CprError> {
    let manifest_path = out_dir.join(DATASET_DIR).join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| CprError::Verify(format!("manifest: {e}")))?;
    let mut records = Vec::new();
    for shard in &manifest.shards {
        let path = out_dir.join(&shard.path);
        let body = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let digest = sha256_hex(body.as_bytes());
        if digest != shard.digest {
            return Err(CprError::Verify(format!(
                "shard {} digest mismatch: manifest {}, actual {digest}",
                shard.path, shard.digest
            )));
        }
        let mut count = 0usize;
        for line in body.lines().filter(|l| !l.trim().is_empty()) {
            let rec: TrainingRecord = serde_json::from_str(line)
                .map_err(|e| CprError::Verify(format!("{}: bad record: {e}", shard.path)))?;
            records.push(rec);
            count += 1;
        }
        if count != shard.record_count {
            return Err(CprError::Verify(format!(
                "shard {} holds {count} records, manifest says {}",
                shard.path, shard.record_count
            )));
        }
    }
    let total: usize = manifest.counts.values().sum();
    if total != records.len() {
        return Err(CprError::Verify(format!(
            "manifest counts sum to {total} but shards hold {}",
            records.len()
        )));
    }
    Ok((manifest, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curation::{curate_all, CuratedGroup};
    use crate::solver::RolloutGroup;

    fn curated_with_scores(id: &str, halves: &[i64]) -> CuratedGroup {
        let scores: Vec<Rational> = halves.iter().map(|&h| Rational::new(h, 2)).collect();
        let group: RolloutGroup = crate::curation::tests::group_with_scores(id, &scores);
        let (mut curated, _) =
            curate_all(std::slice::from_ref(&group), &Rational::int(7), &Rational::int(2), 2)
                .unwrap();
        curated.remove(0)
    }

    #[test]
    fn generation_only_from_passed_groups() {
        let passed = curated_with_scores("p1", &[18, 4, 10]); // 9, 2, 5
        let dropped = curated_with_scores("p2", &[8, 4, 10]); // 4, 2, 5
        assert!(passed.passed);
        assert!(!dropped.passed);
        let recs = build_generation(&[passed.clone(), dropped]).unwrap();
        assert_eq!(recs.len(), 1);
        match &recs[0].payload {
            RecordPayload::Generation { image, .. } => {
                assert_eq!(image, &passed.group.candidates[0].image);
            }
            other => panic!("unexpected payload {other:?}"),
        }
    }

    #[test]
    fn caption_pool_selection_follows_phrasing() {
        let mut c = curated_with_scores("p1", &[18, 4]);
        c.group.prompt.text = "Generate an image of a cat".into();
        let recs = build_caption(&[c.clone()], 1).unwrap();
        match &recs[0].payload {
            RecordPayload::Caption { instruction, target_text, .. } => {
                assert!(reconstruct_pool().contains(&instruction.as_str()));
                assert_eq!(target_text, "Generate an image of a cat");
            }
            other => panic!("unexpected payload {other:?}"),
        }
        c.group.prompt.text = "a cat on a mat".into();
        let recs = build_caption(&[c], 1).unwrap();
        match &recs[0].payload {
            RecordPayload::Caption { instruction, .. } => {
                assert!(plain_pool().contains(&instruction.as_str()));
            }
            other => panic!("unexpected payload {other:?}"),
        }
    }

    #[test]
    fn judgement_stratifies_top_and_bottom() {
        // scores [9, 1]: one record from the top half, one from the bottom
        let c = curated_with_scores("p1", &[18, 2]);
        let recs = build_judgement(&[c], 7, 2).unwrap();
        assert_eq!(recs.len(), 2);
        let mut indices: Vec<usize> = recs.iter().map(|r| r.provenance[0]).collect();
        indices.sort_unstable();
        assert_eq!(indices, vec![0, 1]);
        for r in &recs {
            match &r.payload {
                RecordPayload::Judgement { target_json, .. } => {
                    let target: JudgementTarget = serde_json::from_str(target_json).unwrap();
                    assert!(target.score >= Rational::zero());
                    assert!(target.score <= Rational::int(10));
                }
                other => panic!("unexpected payload {other:?}"),
            }
        }
    }

    #[test]
    fn judgement_cap_zero_yields_nothing() {
        let c = curated_with_scores("p1", &[18, 2]);
        assert!(build_judgement(&[c], 7, 0).unwrap().is_empty());
    }

    #[test]
    fn judgement_target_round_trips_exactly() {
        let c = curated_with_scores("p1", &[15, 2]); // 7.5 and 1
        let recs = build_judgement(&[c.clone()], 7, 2).unwrap();
        for r in recs {
            if let RecordPayload::Judgement { target_json, .. } = &r.payload {
                let target: JudgementTarget = serde_json::from_str(target_json).unwrap();
                let original = c.group.candidates[r.provenance[0]]
                    .score()
                    .unwrap()
                    .clone();
                assert_eq!(target.score, original);
            }
        }
    }

    #[test]
    fn reflection_builds_per_pair_and_keeps_contrast() {
        let c = curated_with_scores("p1", &[18, 4, 6]); // 9, 2, 3: two pairs
        assert_eq!(c.reflection_pairs.len(), 2);
        let recs = build_reflection(&[c.clone()]).unwrap();
        assert_eq!(recs.len(), 2);
        for r in &recs {
            match &r.payload {
                RecordPayload::Reflection { lose_judgement, .. } => {
                    let win = c.group.candidates[r.provenance[0]].score().unwrap();
                    assert!(win > &lose_judgement.score);
                }
                other => panic!("unexpected payload {other:?}"),
            }
        }
        // all-equal group has no pairs to build from
        let equal = curated_with_scores("p2", &[16, 16, 16]);
        assert!(equal.reflection_pairs.is_empty());
        assert!(build_reflection(&[equal]).unwrap().is_empty());
    }

    fn synth_records(pattern: Pattern, n: usize) -> Vec<TrainingRecord> {
        let image = ContentRef {
            kind: crate::store::ContentKind::Image,
            digest: "00".repeat(32),
            path: "image/00/0000".into(),
        };
        (0..n)
            .map(|i| TrainingRecord {
                id: format!("{}-{i:05}", pattern.as_str()),
                source_prompt_id: format!("p{i}"),
                provenance: vec![0],
                payload: match pattern {
                    Pattern::Generation => RecordPayload::Generation {
                        prompt_text: format!("prompt {i}"),
                        image: image.clone(),
                    },
                    Pattern::Caption => RecordPayload::Caption {
                        instruction: "caption it".into(),
                        image: image.clone(),
                        target_text: format!("prompt {i}"),
                    },
                    Pattern::Judgement => RecordPayload::Judgement {
                        instruction: "judge it".into(),
                        prompt_text: format!("prompt {i}"),
                        image: image.clone(),
                        target_json: "{\"analysis\":\"a\",\"score\":\"7\"}".into(),
                    },
                    Pattern::Reflection => RecordPayload::Reflection {
                        prompt_text: format!("prompt {i}"),
                        lose_image: image.clone(),
                        lose_judgement: Judgement {
                            analysis: "weak".into(),
                            score: Rational::int(3),
                            raw: String::new(),
                            salvage_note: None,
                        },
                        target_image: image.clone(),
                    },
                },
            })
            .collect()
    }

    fn availability(g: usize, c: usize, j: usize, r: usize) -> BTreeMap<Pattern, Vec<TrainingRecord>> {
        BTreeMap::from([
            (Pattern::Generation, synth_records(Pattern::Generation, g)),
            (Pattern::Caption, synth_records(Pattern::Caption, c)),
            (Pattern::Judgement, synth_records(Pattern::Judgement, j)),
            (Pattern::Reflection, synth_records(Pattern::Reflection, r)),
        ])
    }

    fn paper_targets() -> BTreeMap<Pattern, usize> {
        crate::config::default_mixture_targets()
    }

    #[test]
    fn mixture_scales_by_min_ratio() {
        // min-ratio formula applied by hand: f = 1/100
        let avail = availability(50, 50, 30, 10);
        let (selected, counts, scale) =
            assemble_mixture(&avail, &paper_targets(), 42).unwrap();
        assert_eq!(scale, Rational::new(1, 100));
        assert_eq!(counts[&Pattern::Generation], 50);
        assert_eq!(counts[&Pattern::Caption], 50);
        assert_eq!(counts[&Pattern::Judgement], 30);
        assert_eq!(counts[&Pattern::Reflection], 10);
        assert_eq!(selected.len(), 140);
    }

    #[test]
    fn mixture_full_availability_hits_targets() {
        let avail = availability(5000, 5000, 3000, 1000);
        let (_, counts, scale) = assemble_mixture(&avail, &paper_targets(), 42).unwrap();
        assert_eq!(scale, Rational::one());
        assert_eq!(counts, paper_targets());
    }

    #[test]
    fn mixture_infeasible_names_the_pattern() {
        let avail = availability(10, 0, 5, 5);
        match assemble_mixture(&avail, &paper_targets(), 42) {
            Err(CprError::MixtureInfeasible(Pattern::Caption)) => {}
            other => panic!("expected caption infeasible, got {other:?}"),
        }
    }

    #[test]
    fn shards_split_and_verify() {
        let dir = tempfile::tempdir().unwrap();
        let avail = availability(50, 50, 30, 10);
        let (selected, counts, scale) =
            assemble_mixture(&avail, &paper_targets(), 42).unwrap();
        let manifest = write_shards(
            &selected, &counts, &paper_targets(), scale, 42, 100, dir.path(),
        )
        .unwrap();
        assert_eq!(manifest.shards.len(), 2);
        assert_eq!(manifest.shards[0].record_count, 100);
        assert_eq!(manifest.shards[1].record_count, 40);
        let (_, records) = verify_shards(dir.path()).unwrap();
        assert_eq!(records.len(), 140);

        // identical inputs produce byte-identical shards
        let dir2 = tempfile::tempdir().unwrap();
        let manifest2 = write_shards(
            &selected, &counts, &paper_targets(), Rational::new(1, 100), 42, 100, dir2.path(),
        )
        .unwrap();
        assert_eq!(manifest.shards, manifest2.shards);

        // a flipped byte fails verification naming the shard
        let shard_path = dir.path().join(&manifest.shards[0].path);
        let mut bytes = fs::read(&shard_path).unwrap();
        bytes[10] ^= 1;
        fs::write(&shard_path, bytes).unwrap();
        match verify_shards(dir.path()) {
            Err(CprError::Verify(msg)) => assert!(msg.contains("shard-0000")),
            other => panic!("expected digest failure, got {other:?}"),
        }
    }

    #[test]
    fn interleave_is_deterministic_and_pattern_mixed() {
        let dir = tempfile::tempdir().unwrap();
        let avail = availability(4, 4, 4, 4);
        let targets = BTreeMap::from([
            (Pattern::Generation, 4),
            (Pattern::Caption, 4),
            (Pattern::Judgement, 4),
            (Pattern::Reflection, 4),
        ]);
        let (selected, counts, scale) = assemble_mixture(&avail, &targets, 1).unwrap();
        let manifest =
            write_shards(&selected, &counts, &targets, scale, 1, 100, dir.path()).unwrap();
        assert_eq!(manifest.shards.len(), 1);
        let (_, records) = verify_shards(dir.path()).unwrap();
        let patterns: Vec<Pattern> = records.iter().map(|r| r.pattern()).collect();
        assert_eq!(&patterns[..4], Pattern::ALL.as_slice());
    }

    proptest::proptest! {
        #[test]
        fn ratio_preservation_bound(
            g in 1usize..200, c in 1usize..200, j in 1usize..120, r in 1usize..40
        ) {
            let avail = availability(g, c, j, r);
            let (_, counts, _) = assemble_mixture(&avail, &paper_targets(), 9).unwrap();
            let counts_vec: Vec<usize> = Pattern::ALL.iter().map(|p| counts[p]).collect();
            proptest::prop_assume!(counts_vec.iter().all(|&c| c > 0));
            let targets = paper_targets();
            // floor error bound: with count = floor(f*target), the pairwise
            // ratio drifts by at most max(target ratio, 1) / denominator count
            for a in 0..4 {
                for b in 0..4 {
                    let (ca, cb) = (counts_vec[a] as f64, counts_vec[b] as f64);
                    let (ta, tb) = (
                        targets[&Pattern::ALL[a]] as f64,
                        targets[&Pattern::ALL[b]] as f64,
                    );
                    let drift = (ca / cb - ta / tb).abs();
                    let bound = (ta / tb).max(1.0) / cb;
                    proptest::prop_assert!(drift <= bound + 1e-9);
                }
            }
        }
    }
}
