//! Acceptance suite: one test per criterion, each printing a PASS line.
//!
//! Criterion 2 additionally checks the full published benchmark file when
//! one is supplied via SELFLOOP_UNICYCLE_FILE; the shipped 10-instance
//! fixture is always checked.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rand::Rng;
use selfloop_core::config::{PipelineConfig, Role};
use selfloop_core::cpr::{self, Pattern};
use selfloop_core::curation;
use selfloop_core::gateway::{self, CaptureMode, Gateway, ModelClient};
use selfloop_core::judge::{self, Judgement};
use selfloop_core::pipeline::{self, Stage};
use selfloop_core::proposer::norm_hash;
use selfloop_core::proposer::PromptRecord;
use selfloop_core::rational::Rational;
use selfloop_core::rng::derive_rng;
use selfloop_core::solver::{ImageCandidate, RolloutGroup};
use selfloop_core::store::{ContentKind, ContentRef, Store};
use selfloop_core::unicycle::{self, CycleInstance, QuestionScore, ScoringMode};

fn fixture_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/unicycle_sample.jsonl")
}

fn group_with_scores(id: &str, scores: &[Rational]) -> RolloutGroup {
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
            params: gateway::ImageRequest {
                prompt: prompt.text.clone(),
                seed: i as u64,
                cfg_text_scale: 3.0,
                width: 512,
                height: 512,
            },
            image: ContentRef {
                kind: ContentKind::Image,
                digest: format!("{i:064x}"),
                path: format!("image/00/{i:064x}"),
            },
            judgement: Some(Judgement {
                analysis: "synthetic".into(),
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

// ---- criterion 1 ----------------------------------------------------------

/// Independent fraction arithmetic (i128, gcd-reduced) for the oracle.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
struct Frac {
    num: i128,
    den: i128,
}

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

impl Frac {
    fn new(num: i128, den: i128) -> Frac {
        assert!(den > 0);
        let g = gcd(num, den).max(1);
        Frac {
            num: num / g,
            den: den / g,
        }
    }

    fn add(self, other: Frac) -> Frac {
        Frac::new(self.num * other.den + other.num * self.den, self.den * other.den)
    }

    fn div_int(self, k: i128) -> Frac {
        Frac::new(self.num, self.den * k)
    }

    fn is_one(self) -> bool {
        self.num == self.den
    }
}

#[test]
fn criterion_01_metric_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = derive_rng(2024, "acceptance", "metric-oracle");
    let mut checked = 0usize;
    for case in 0..1000 {
        let n_questions = rng.gen_range(1..=8);
        let mut scores = Vec::with_capacity(n_questions);
        let mut fracs = Vec::with_capacity(n_questions);
        for q in 0..n_questions {
            let den = rng.gen_range(1..=6i64);
            let num = rng.gen_range(0..=den);
            fracs.push(Frac::new(num as i128, den as i128));
            scores.push(QuestionScore {
                question_id: format!("c{case}-q{q}"),
                s: Rational::new(num, den),
                judge_raw: String::new(),
                answer: String::new(),
                note: None,
            });
        }
        let (soft, hard) = unicycle::score_instance(&scores).unwrap();

        // brute-force re-implementation: sum the fractions, divide by |Q|
        let total = fracs.iter().fold(Frac::new(0, 1), |acc, f| acc.add(*f));
        let oracle_soft = total.div_int(n_questions as i128);
        let oracle_hard = fracs.iter().all(|f| f.is_one());

        assert_eq!(
            soft,
            Rational::new(oracle_soft.num as i64, oracle_soft.den as i64),
            "case {case}: soft mismatch"
        );
        assert_eq!(hard, oracle_hard, "case {case}: hard mismatch");
        checked += 1;
    }
    let elapsed = started.elapsed();
    assert_eq!(checked, 1000);
    assert!(
        elapsed.as_secs_f64() < 1.0,
        "oracle equivalence took {elapsed:?}, budget is 1s"
    );
    println!("criterion 1 PASS — score_instance matches the brute-force oracle on 1000 instances in {elapsed:?}");
}

// ---- criterion 2 ----------------------------------------------------------

#[test]
fn criterion_02_benchmark_distribution_validation() {
    let (instances, counts) = unicycle::load_benchmark(&fixture_path()).unwrap();
    assert_eq!(instances.len(), 10);
    assert_eq!(counts.instances, 10);
    assert_eq!(counts.questions, 21);
    assert_eq!(counts.mcq, 5);
    assert_eq!(counts.yesno, 4);
    assert_eq!(counts.open, 12);

    match std::env::var("SELFLOOP_UNICYCLE_FILE") {
        Ok(path) => {
            let (_, full) = unicycle::load_benchmark(Path::new(&path)).unwrap();
            assert_eq!(full.instances, 1401);
            assert_eq!(full.questions, 2968);
            assert_eq!(full.mcq, 1067);
            assert_eq!(full.yesno, 200);
            assert_eq!(full.open, 1701);
            println!(
                "criterion 2 PASS — fixture counts exact; published file reports 1401/2968 with 1067/200/1701"
            );
        }
        Err(_) => {
            println!(
                "criterion 2 PASS — fixture counts exact (published file not supplied; set SELFLOOP_UNICYCLE_FILE to check 1401/2968/1067/200/1701)"
            );
        }
    }
}

// ---- criterion 3 ----------------------------------------------------------

#[test]
fn criterion_03_threshold_semantics() {
    let tau = Rational::int(7);
    let cases = [
        (Rational::parse("6.9").unwrap(), false),
        (Rational::int(7), true),
        (Rational::parse("7.1").unwrap(), true),
    ];
    for (max_score, expected) in &cases {
        let g = group_with_scores("g", &[Rational::int(1), max_score.clone()]);
        assert_eq!(
            curation::filter_group(&g, &tau).unwrap(),
            *expected,
            "max {max_score} under tau=7"
        );
    }

    // pass rate is monotone non-increasing in tau over 500 random groups
    let mut rng = derive_rng(2024, "acceptance", "threshold-suite");
    let groups: Vec<RolloutGroup> = (0..500)
        .map(|i| {
            let n = rng.gen_range(2..=8);
            let scores: Vec<Rational> = (0..n)
                .map(|_| Rational::new(rng.gen_range(0..=20), 2))
                .collect();
            group_with_scores(&format!("g{i}"), &scores)
        })
        .collect();
    let mut last = usize::MAX;
    for tau_halves in 0..=20 {
        let tau = Rational::new(tau_halves, 2);
        let passed = groups
            .iter()
            .filter(|g| curation::filter_group(g, &tau).unwrap())
            .count();
        assert!(
            passed <= last,
            "pass count rose from {last} to {passed} at tau {tau}"
        );
        last = passed;
    }
    println!("criterion 3 PASS — boundary {{6.9, 7.0, 7.1}} filters as {{drop, keep, keep}} and pass rate is monotone in tau");
}

// ---- criterion 4 ----------------------------------------------------------

#[test]
fn criterion_04_best_of_n_and_pairing() {
    let mut rng = derive_rng(2024, "acceptance", "best-of-n");
    let min_gap = Rational::int(2);
    for i in 0..500 {
        let n = rng.gen_range(2..=8);
        let scores: Vec<Rational> = (0..n)
            .map(|_| Rational::new(rng.gen_range(0..=20), 2))
            .collect();
        let g = group_with_scores(&format!("m{i}"), &scores);
        let best = curation::select_best(&g).unwrap();

        // brute-force argmax with lowest-index tie-break
        let mut oracle = 0usize;
        for (j, s) in scores.iter().enumerate() {
            if s > &scores[oracle] {
                oracle = j;
            }
        }
        assert_eq!(best, oracle, "matrix {i}");

        let pairs = curation::mine_reflection_pairs(&g, best, &min_gap, usize::MAX).unwrap();
        for (w, l) in &pairs {
            assert_eq!(*w, best);
            assert!(&(&scores[*w] - &scores[*l]) >= &min_gap, "matrix {i}: gap rule");
        }
        // completeness: every qualifying lose index is mined
        let qualifying = scores
            .iter()
            .enumerate()
            .filter(|(j, s)| *j != best && &(&scores[best] - *s) >= &min_gap)
            .count();
        assert_eq!(pairs.len(), qualifying, "matrix {i}: pair completeness");
    }

    let equal = group_with_scores("eq", &vec![Rational::int(5); 8]);
    let best = curation::select_best(&equal).unwrap();
    assert_eq!(best, 0);
    assert!(curation::mine_reflection_pairs(&equal, best, &min_gap, usize::MAX)
        .unwrap()
        .is_empty());
    println!("criterion 4 PASS — select_best matches brute force on 500 matrices; every mined pair satisfies the gap rule; all-equal groups yield zero pairs");
}

// ---- criterion 5 ----------------------------------------------------------

fn synthetic_records(pattern: Pattern, n: usize) -> Vec<cpr::TrainingRecord> {
    let image = ContentRef {
        kind: ContentKind::Image,
        digest: "00".repeat(32),
        path: "image/00/0".into(),
    };
    (0..n)
        .map(|i| cpr::TrainingRecord {
            id: format!("{}-{i:06}", pattern.as_str()),
            source_prompt_id: format!("p{i}"),
            provenance: vec![0],
            payload: match pattern {
                Pattern::Generation => cpr::RecordPayload::Generation {
                    prompt_text: format!("prompt {i}"),
                    image: image.clone(),
                },
                Pattern::Caption => cpr::RecordPayload::Caption {
                    instruction: "caption".into(),
                    image: image.clone(),
                    target_text: format!("prompt {i}"),
                },
                Pattern::Judgement => cpr::RecordPayload::Judgement {
                    instruction: "judge".into(),
                    prompt_text: format!("prompt {i}"),
                    image: image.clone(),
                    target_json: "{\"analysis\":\"a\",\"score\":\"7\"}".into(),
                },
                Pattern::Reflection => cpr::RecordPayload::Reflection {
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

#[test]
fn criterion_05_mixture_ratios() {
    let targets = selfloop_core::config::default_mixture_targets();

    let scarce = BTreeMap::from([
        (Pattern::Generation, synthetic_records(Pattern::Generation, 50)),
        (Pattern::Caption, synthetic_records(Pattern::Caption, 50)),
        (Pattern::Judgement, synthetic_records(Pattern::Judgement, 30)),
        (Pattern::Reflection, synthetic_records(Pattern::Reflection, 10)),
    ]);
    let (selected, counts, scale) = cpr::assemble_mixture(&scarce, &targets, 2024).unwrap();
    assert_eq!(scale, Rational::new(1, 100));
    assert_eq!(counts[&Pattern::Generation], 50);
    assert_eq!(counts[&Pattern::Caption], 50);
    assert_eq!(counts[&Pattern::Judgement], 30);
    assert_eq!(counts[&Pattern::Reflection], 10);
    assert_eq!(selected.len(), 140);

    let full = BTreeMap::from([
        (Pattern::Generation, synthetic_records(Pattern::Generation, 5000)),
        (Pattern::Caption, synthetic_records(Pattern::Caption, 5000)),
        (Pattern::Judgement, synthetic_records(Pattern::Judgement, 3000)),
        (Pattern::Reflection, synthetic_records(Pattern::Reflection, 1000)),
    ]);
    let (_, counts, scale) = cpr::assemble_mixture(&full, &targets, 2024).unwrap();
    assert_eq!(scale, Rational::one());
    assert_eq!(counts, targets);
    println!("criterion 5 PASS — scarce availability scales to {{50, 50, 30, 10}} at f=1/100; full availability hits 5k/5k/3k/1k");
}

// ---- criterion 6 (and the shared full-pipeline run for 10) ----------------

fn e2e_config(parallelism: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig::mock_default(2024);
    cfg.prompts_per_category = 4; // 40 prompts over the 10 categories
    cfg.rollouts_per_prompt = 8;
    cfg.parallelism = parallelism;
    cfg.benchmark_path = Some(fixture_path().display().to_string());
    cfg
}

struct E2eRun {
    dir: tempfile::TempDir,
    manifest: Vec<u8>,
    report: Vec<u8>,
}

fn run_full_pipeline(cfg: &PipelineConfig) -> E2eRun {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(Store::open(dir.path().join("store")).unwrap());
    let gw = Gateway::new(cfg, store, CaptureMode::Off).unwrap();
    pipeline::run_stages(&gw, cfg, dir.path(), &Stage::PIPELINE_ORDER, false).unwrap();
    let manifest = std::fs::read(dir.path().join("dataset/manifest.json")).unwrap();
    let report = std::fs::read(dir.path().join("report.json")).unwrap();
    E2eRun {
        dir,
        manifest,
        report,
    }
}

fn shared_run() -> &'static E2eRun {
    static RUN: OnceLock<E2eRun> = OnceLock::new();
    RUN.get_or_init(|| run_full_pipeline(&e2e_config(8)))
}

#[test]
fn criterion_06_end_to_end_determinism() {
    let started = Instant::now();
    let a = shared_run();
    let b = run_full_pipeline(&e2e_config(8));
    assert_eq!(a.manifest, b.manifest, "manifest.json differs across identical runs");
    assert_eq!(a.report, b.report, "report.json differs across identical runs");

    let serial = run_full_pipeline(&e2e_config(1));
    assert_eq!(a.manifest, serial.manifest, "manifest.json depends on parallelism");
    assert_eq!(a.report, serial.report, "report.json depends on parallelism");

    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs_f64() < 120.0,
        "end-to-end determinism took {elapsed:?}, budget is 2 min"
    );
    println!("criterion 6 PASS — 40-prompt mock pipeline is byte-identical across reruns and parallelism 1 vs 8 ({elapsed:?})");
}

// ---- criterion 7 ----------------------------------------------------------

#[test]
fn criterion_07_parser_robustness() {
    let fixtures = gateway::malformed_judge_fixtures();
    assert_eq!(fixtures.len(), 20, "corpus holds 20 samples");
    for f in fixtures {
        // must never panic: either a judgement or a typed error
        match judge::parse_judgement(&f.raw) {
            Ok(j) => {
                assert!(j.score >= Rational::zero() && j.score <= Rational::int(10));
                assert!(!j.analysis.is_empty());
            }
            Err(e) => {
                let _typed: judge::JudgeError = e;
            }
        }
    }

    // retry-then-zero fallback keeps every group at full cardinality
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("rollouts")).unwrap();
    let mut cfg = PipelineConfig::mock_default(2024);
    cfg.endpoints
        .get_mut(&Role::Judge)
        .unwrap()
        .mock
        .as_mut()
        .unwrap()
        .malform_fraction = 1.0;
    let store = Arc::new(Store::open(dir.path().join("store")).unwrap());
    let gw = Gateway::new(&cfg, Arc::clone(&store), CaptureMode::Off).unwrap();
    let groups: Vec<RolloutGroup> = (0..3)
        .map(|i| {
            let mut g = group_with_scores(
                &format!("p{i}"),
                &(0..8).map(|k| Rational::int(k)).collect::<Vec<_>>(),
            );
            for c in &mut g.candidates {
                c.judgement = None;
                // judge rendering needs real image refs
                c.image = gw
                    .generate_image(
                        Role::Solver,
                        &gateway::ImageRequest {
                            prompt: g.prompt.text.clone(),
                            seed: c.rollout_index as u64,
                            cfg_text_scale: 3.0,
                            width: 512,
                            height: 512,
                        },
                    )
                    .unwrap();
            }
            g.judged = false;
            g
        })
        .collect();
    let judged = pipeline::run_judge_stage(&gw, &cfg, dir.path(), groups).unwrap();
    for g in &judged {
        assert_eq!(g.candidates.len(), 8, "group cardinality preserved");
        for c in &g.candidates {
            let j = c.judgement.as_ref().unwrap();
            assert_eq!(j.score, Rational::zero());
            assert_eq!(j.salvage_note.as_deref(), Some("judge-unparseable"));
        }
    }
    println!("criterion 7 PASS — 20-sample corpus is crash-free and the retry-then-zero fallback keeps groups at N");
}

// ---- criterion 8 ----------------------------------------------------------

fn cycle_report_at_fidelity(fidelity: f64) -> unicycle::BenchmarkReport {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::mock_default(2024);
    cfg.endpoints
        .get_mut(&Role::Vqa)
        .unwrap()
        .mock
        .as_mut()
        .unwrap()
        .fidelity = fidelity;
    let store = Arc::new(Store::open(dir.path().join("store")).unwrap());
    let gw = Gateway::new(&cfg, store, CaptureMode::Off).unwrap();
    let (instances, _) = unicycle::load_benchmark(&fixture_path()).unwrap();
    pipeline::run_cycle_stage(&gw, &cfg, dir.path(), &instances).unwrap()
}

#[test]
fn criterion_08_cycle_loop_soundness() {
    let mut last_soft = -1.0f64;
    for fidelity in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let report = cycle_report_at_fidelity(fidelity);
        assert!(
            report.hard_mean_x100 <= report.soft_mean_x100 + 1e-9,
            "hard {} exceeds soft {} at fidelity {fidelity}",
            report.hard_mean_x100,
            report.soft_mean_x100
        );
        assert!(
            report.soft_mean_x100 >= last_soft - 1e-9,
            "soft mean fell from {last_soft} to {} at fidelity {fidelity}",
            report.soft_mean_x100
        );
        last_soft = report.soft_mean_x100;
        if fidelity == 0.0 {
            assert_eq!(report.soft_mean_x100, 0.0, "fidelity 0 must score 0");
            assert_eq!(report.hard_mean_x100, 0.0);
        }
        if fidelity == 1.0 {
            assert_eq!(report.soft_mean_x100, 100.0, "fidelity 1 must score 100");
            assert_eq!(report.hard_mean_x100, 100.0);
        }
    }
    println!("criterion 8 PASS — fidelity 0 gives 0/0, fidelity 1 gives 100/100, soft mean is monotone, hard <= soft throughout");
}

// ---- criterion 9 ----------------------------------------------------------

#[test]
fn criterion_09_text_question_scoring() {
    // judge count 1 of 2 keywords -> s = 1/2, hard fails
    let (s, _) = unicycle::parse_eval_verdict(
        "{\"question\":\"q\",\"answer\":\"a\",\"evaluation\":\"1\"}",
        ScoringMode::KeywordFraction,
        2,
    )
    .unwrap();
    assert_eq!(s, Rational::new(1, 2));
    let scores = vec![QuestionScore {
        question_id: "q1".into(),
        s,
        judge_raw: String::new(),
        answer: String::new(),
        note: None,
    }];
    let (soft, hard) = unicycle::score_instance(&scores).unwrap();
    assert_eq!(soft, Rational::new(1, 2));
    assert!(!hard);

    // count 2 -> s = 1
    let (s, _) = unicycle::parse_eval_verdict(
        "{\"evaluation\":\"2\"}",
        ScoringMode::KeywordFraction,
        2,
    )
    .unwrap();
    assert_eq!(s, Rational::one());

    // normalization: case and punctuation variants count through the judge
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::mock_default(2024);
    let store = Arc::new(Store::open(dir.path().join("store")).unwrap());
    let gw = Gateway::new(&cfg, store, CaptureMode::Off).unwrap();
    let instance = CycleInstance {
        id: "norm".into(),
        prompt: "a mug that says coffee time".into(),
        task_type: "text rendering".into(),
        questions: vec![unicycle::CycleQuestion {
            id: "q1".into(),
            format: unicycle::QuestionFormat::Open,
            scoring_mode: Some(ScoringMode::KeywordFraction),
            text: "What words are on the mug?".into(),
            options: vec![],
            reference_answer: "coffee time".into(),
            keywords: vec!["coffee".into(), "time".into()],
        }],
    };
    let q = &instance.questions[0];
    let raw = gw
        .complete_text(
            Role::CycleJudge,
            &unicycle::render_eval_prompt(&instance, q, "COFFEE, time!"),
        )
        .unwrap();
    let (s, _) = unicycle::parse_eval_verdict(&raw, ScoringMode::KeywordFraction, 2).unwrap();
    assert_eq!(s, Rational::one(), "case/punctuation variants must count");

    // spelling variants from the template's normalization rules
    let binary_instance = CycleInstance {
        id: "variant".into(),
        prompt: "a gray wolf in the snow".into(),
        task_type: "color".into(),
        questions: vec![unicycle::CycleQuestion {
            id: "q1".into(),
            format: unicycle::QuestionFormat::Open,
            scoring_mode: Some(ScoringMode::Binary),
            text: "What color is the wolf?".into(),
            options: vec![],
            reference_answer: "gray".into(),
            keywords: vec![],
        }],
    };
    let q = &binary_instance.questions[0];
    let raw = gw
        .complete_text(
            Role::CycleJudge,
            &unicycle::render_eval_prompt(&binary_instance, q, "It looks Grey."),
        )
        .unwrap();
    let (s, _) = unicycle::parse_eval_verdict(&raw, ScoringMode::Binary, 1).unwrap();
    assert_eq!(s, Rational::one(), "grey/gray are equivalent");

    println!("criterion 9 PASS — keyword counts divide exactly (1/2 fails hard, 2/2 passes) and normalization accepts case/punctuation/spelling variants");
}

// ---- criterion 10 ---------------------------------------------------------

#[test]
fn criterion_10_caption_inverse_mapping() {
    let run = shared_run();
    let summary = pipeline::validate_dataset(run.dir.path()).unwrap();
    assert!(summary.captions_checked > 0, "dataset contains caption records");
    assert!(summary.reflections_checked > 0, "dataset contains reflection records");
    println!(
        "criterion 10 PASS — validate confirmed {} caption round-trips and {} reflection contrasts over {} records",
        summary.captions_checked, summary.reflections_checked, summary.records
    );
}
