//! Rejection sampling and structure mining over judged groups: threshold
//! filtering, best-of-N selection, and win/lose pair extraction.
//!
//! All operations here are pure functions over immutable groups, so their
//! outputs are independent of parallelism and execution order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::rational::Rational;
use crate::solver::RolloutGroup;

pub const CURATED_FILE: &str = "curated.jsonl";
/// Reflection pairs mined per group, lowest lose-scores first.
pub const DEFAULT_MAX_PAIRS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuratedGroup {
    pub group: RolloutGroup,
    pub passed: bool,
    pub best_index: Option<usize>,
    /// (win_index, lose_index) pairs; win is always the best candidate.
    pub reflection_pairs: Vec<(usize, usize)>,
}

/// One line of `curated.jsonl`: the decision summary, images by digest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CuratedSummary {
    pub prompt_id: String,
    pub passed: bool,
    pub best_index: Option<usize>,
    pub reflection_pairs: Vec<(usize, usize)>,
    pub scores: Vec<Rational>,
    pub image_digests: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationStats {
    pub groups: usize,
    pub passed: usize,
    pub pair_count: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum CurationError {
    #[error("group {0}: candidate {1} is unjudged")]
    Unjudged(String, usize),
    #[error("group {0} did not pass filtering; no pairs to mine")]
    GroupNotPassed(String),
    #[error("curation io at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn scores_of(group: &RolloutGroup) -> Result<Vec<&Rational>, CurationError> {
    group
        .candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            c.score()
                .ok_or_else(|| CurationError::Unjudged(group.prompt.id.clone(), i))
        })
        .collect()
}

/// Argmax by score with smallest-index tie-break.
pub fn select_best(group: &RolloutGroup) -> Result<usize, CurationError> {
    let scores = scores_of(group)?;
    let mut best = 0usize;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Keeps a group iff its maximum score reaches the threshold: groups are
/// dropped exactly when max < threshold, so a max of exactly the threshold
/// passes.
pub fn filter_group(group: &RolloutGroup, threshold: &Rational) -> Result<bool, CurationError> {
    let scores = scores_of(group)?;
    let max = scores.iter().max().expect("groups are non-empty");
    Ok(*max >= threshold)
}

/// Mines (best, lose) pairs: every candidate whose score trails the best
/// by at least `min_gap` qualifies, sorted ascending by lose score (index
/// breaks ties), truncated to `max_pairs`. A gap of 0 admits equal-scoring
/// candidates — every candidate other than the best qualifies.
pub fn mine_reflection_pairs(
    group: &RolloutGroup,
    best_index: usize,
    min_gap: &Rational,
    max_pairs: usize,
) -> Result<Vec<(usize, usize)>, CurationError> {
    let scores = scores_of(group)?;
    let best_score = scores[best_index];
    let mut losers: Vec<(usize, &Rational)> = scores
        .iter()
        .enumerate()
        .filter(|(j, s)| *j != best_index && &(best_score - **s) >= min_gap)
        .map(|(j, s)| (j, *s))
        .collect();
    losers.sort_by(|a, b| a.1.cmp(b.1).then(a.0.cmp(&b.0)));
    Ok(losers
        .into_iter()
        .take(max_pairs)
        .map(|(j, _)| (best_index, j))
        .collect())
}

/// Applies filter, best-of-N, and pair mining to every group, preserving
/// input order. Pairs are only mined for passing groups.
pub fn curate_all(
    groups: &[RolloutGroup],
    threshold: &Rational,
    min_gap: &Rational,
    max_pairs: usize,
) -> Result<(Vec<CuratedGroup>, CurationStats), CurationError> {
    let mut curated = Vec::with_capacity(groups.len());
    let mut stats = CurationStats {
        groups: groups.len(),
        passed: 0,
        pair_count: 0,
    };
    for group in groups {
        let passed = filter_group(group, threshold)?;
        let (best_index, reflection_pairs) = if passed {
            let best = select_best(group)?;
            let pairs = mine_reflection_pairs(group, best, min_gap, max_pairs)?;
            (Some(best), pairs)
        } else {
            (None, Vec::new())
        };
        stats.passed += passed as usize;
        stats.pair_count += reflection_pairs.len();
        curated.push(CuratedGroup {
            group: group.clone(),
            passed,
            best_index,
            reflection_pairs,
        });
    }
    log::info!(
        "curation: {}/{} groups passed, {} reflection pairs",
        stats.passed,
        stats.groups,
        stats.pair_count
    );
    Ok((curated, stats))
}

pub fn write_curated(out_dir: &Path, curated: &[CuratedGroup]) -> Result<(), CurationError> {
    let mut out = String::new();
    for c in curated {
        let summary = CuratedSummary {
            prompt_id: c.group.prompt.id.clone(),
            passed: c.passed,
            best_index: c.best_index,
            reflection_pairs: c.reflection_pairs.clone(),
            scores: c
                .group
                .candidates
                .iter()
                .map(|cand| cand.score().cloned().unwrap_or_else(Rational::zero))
                .collect(),
            image_digests: c
                .group
                .candidates
                .iter()
                .map(|cand| cand.image.digest.clone())
                .collect(),
        };
        out.push_str(&serde_json::to_string(&summary).unwrap());
        out.push('\n');
    }
    let path = out_dir.join(CURATED_FILE);
    let tmp = path.with_extension("jsonl.tmp");
    fs::write(&tmp, out.as_bytes()).map_err(|e| CurationError::Io {
        path: tmp.clone(),
        source: e,
    })?;
    fs::rename(&tmp, &path).map_err(|e| CurationError::Io { path, source: e })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::judge::Judgement;
    use crate::proposer::norm_hash;
    use crate::proposer::PromptRecord;
    use crate::solver::ImageCandidate;
    use crate::store::{ContentKind, ContentRef};
    use proptest::prelude::*;

    pub(crate) fn group_with_scores(id: &str, scores: &[Rational]) -> RolloutGroup {
        let prompt = PromptRecord {
            id: id.into(),
            major_category: "general_object".into(),
            subcategory: "single object".into(),
            text: format!("prompt for {id}"),
            round: 0,
            demo_ids: vec![],
            norm_hash: norm_hash(id),
        };
        let candidates = scores
            .iter()
            .enumerate()
            .map(|(i, s)| ImageCandidate {
                prompt_id: id.into(),
                rollout_index: i,
                params: crate::gateway::ImageRequest {
                    prompt: prompt.text.clone(),
                    seed: i as u64,
                    cfg_text_scale: 3.0,
                    width: 512,
                    height: 512,
                },
                image: ContentRef {
                    kind: ContentKind::Image,
                    digest: format!("{:064x}", i),
                    path: format!("image/00/{i:064x}"),
                },
                judgement: Some(Judgement {
                    analysis: "test".into(),
                    score: s.clone(),
                    raw: String::new(),
                    salvage_note: None,
                }),
            })
            .collect();
        RolloutGroup {
            prompt,
            candidates,
            judged: true,
        }
    }

    fn ints(scores: &[i64]) -> Vec<Rational> {
        scores.iter().map(|&s| Rational::int(s)).collect()
    }

    #[test]
    fn select_best_matches_brute_force() {
        // oracle: brute-force argmax over the list
        let g = group_with_scores("g", &ints(&[7, 3, 9, 9, 5, 2, 1, 0]));
        assert_eq!(select_best(&g).unwrap(), 2);
        let g = group_with_scores("g", &ints(&[5, 5, 5, 5]));
        assert_eq!(select_best(&g).unwrap(), 0);
        let g = group_with_scores("g", &ints(&[0, 0, 0]));
        assert_eq!(select_best(&g).unwrap(), 0);
    }

    #[test]
    fn filter_uses_strict_less_than_drop_rule() {
        let tau = Rational::int(7);
        let g = group_with_scores("g", &[Rational::parse("6.9").unwrap()]);
        assert!(!filter_group(&g, &tau).unwrap());
        let g = group_with_scores("g", &ints(&[7]));
        assert!(filter_group(&g, &tau).unwrap());
        let g = group_with_scores("g", &[Rational::parse("7.1").unwrap()]);
        assert!(filter_group(&g, &tau).unwrap());
        // threshold 0 keeps everything
        let g = group_with_scores("g", &ints(&[0, 0]));
        assert!(filter_group(&g, &Rational::zero()).unwrap());
    }

    #[test]
    fn unjudged_candidate_is_an_error() {
        let mut g = group_with_scores("g", &ints(&[5, 6]));
        g.candidates[1].judgement = None;
        assert!(matches!(
            select_best(&g),
            Err(CurationError::Unjudged(_, 1))
        ));
        assert!(filter_group(&g, &Rational::int(7)).is_err());
    }

    #[test]
    fn mine_pairs_matches_enumeration_oracle() {
        // oracle: enumerate all j with gap >= 2, sort by (score, index), truncate
        let g = group_with_scores("g", &ints(&[9, 9, 4, 8, 2, 6, 7, 5]));
        let pairs =
            mine_reflection_pairs(&g, 0, &Rational::int(2), DEFAULT_MAX_PAIRS).unwrap();
        assert_eq!(pairs, vec![(0, 4), (0, 2)]);
        // untruncated: every qualifying candidate, lowest scores first
        let all = mine_reflection_pairs(&g, 0, &Rational::int(2), usize::MAX).unwrap();
        assert_eq!(all, vec![(0, 4), (0, 2), (0, 7), (0, 5), (0, 6)]);
    }

    #[test]
    fn mine_pairs_all_equal_yields_none_with_positive_gap() {
        let g = group_with_scores("g", &ints(&[8, 8, 8, 8]));
        let pairs = mine_reflection_pairs(&g, 0, &Rational::int(2), 2).unwrap();
        assert!(pairs.is_empty());
    }

    #[test]
    fn mine_pairs_gap_zero_admits_equal_scores() {
        // documented rule: gap 0 pairs the best with every other candidate
        let g = group_with_scores("g", &ints(&[8, 8, 8]));
        let pairs = mine_reflection_pairs(&g, 0, &Rational::zero(), usize::MAX).unwrap();
        assert_eq!(pairs, vec![(0, 1), (0, 2)]);
    }

    #[test]
    fn curate_all_counts_match_recount() {
        let groups: Vec<RolloutGroup> = (0..50)
            .map(|i| {
                let scores = ints(&[(i % 11) as i64, ((i + 3) % 11) as i64, ((i + 7) % 11) as i64]);
                group_with_scores(&format!("g{i}"), &scores)
            })
            .collect();
        let tau = Rational::int(7);
        let (curated, stats) = curate_all(&groups, &tau, &Rational::int(2), 2).unwrap();
        // independent recount
        let expected_pass = groups
            .iter()
            .filter(|g| {
                g.candidates
                    .iter()
                    .map(|c| c.score().unwrap())
                    .max()
                    .unwrap()
                    >= &tau
            })
            .count();
        assert_eq!(stats.passed, expected_pass);
        assert_eq!(curated.len(), 50);
        for c in &curated {
            assert_eq!(c.passed, c.best_index.is_some());
            if let Some(b) = c.best_index {
                let scores: Vec<&Rational> =
                    c.group.candidates.iter().map(|x| x.score().unwrap()).collect();
                assert_eq!(scores[b], *scores.iter().max().unwrap());
                for (w, l) in &c.reflection_pairs {
                    assert_eq!(*w, b);
                    assert!(&(scores[*w] - scores[*l]) >= &Rational::int(2));
                }
            } else {
                assert!(c.reflection_pairs.is_empty());
            }
        }
    }

    #[test]
    fn curate_all_empty_input() {
        let (curated, stats) = curate_all(&[], &Rational::int(7), &Rational::int(2), 2).unwrap();
        assert!(curated.is_empty());
        assert_eq!(stats.groups, 0);
        assert_eq!(stats.passed, 0);
        assert_eq!(stats.pair_count, 0);
    }

    proptest! {
        #[test]
        fn pass_rate_monotone_in_threshold(
            score_matrix in proptest::collection::vec(
                proptest::collection::vec(0i64..=20, 2..=8), 1..=40
            )
        ) {
            let groups: Vec<RolloutGroup> = score_matrix
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    let scores: Vec<Rational> =
                        row.iter().map(|&h| Rational::new(h, 2)).collect();
                    group_with_scores(&format!("g{i}"), &scores)
                })
                .collect();
            let mut last_pass = usize::MAX;
            for tau_halves in 0..=20 {
                let tau = Rational::new(tau_halves, 2);
                let (_, stats) = curate_all(&groups, &tau, &Rational::int(2), 2).unwrap();
                prop_assert!(stats.passed <= last_pass);
                last_pass = stats.passed;
            }
        }

        #[test]
        fn mined_pairs_always_satisfy_gap(
            row in proptest::collection::vec(0i64..=20, 2..=8),
            gap_halves in 0i64..=6,
        ) {
            let scores: Vec<Rational> = row.iter().map(|&h| Rational::new(h, 2)).collect();
            let g = group_with_scores("g", &scores);
            let best = select_best(&g).unwrap();
            let gap = Rational::new(gap_halves, 2);
            let pairs = mine_reflection_pairs(&g, best, &gap, usize::MAX).unwrap();
            for (w, l) in pairs {
                prop_assert_eq!(w, best);
                prop_assert!(&(&scores[w] - &scores[l]) >= &gap);
            }
        }
    }
}
