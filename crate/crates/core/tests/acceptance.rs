//! Acceptance suite: runs the nine criteria, prints one PASS/FAIL line per
//! criterion with its runtime, and exits nonzero when any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use confpref::backend::{sample_responses, DecodingParams, DialogueStyle, SampleSet};
use confpref::bce::{answer_confidence, cumulative_prob_ratio, estimate_for_set, BceConfig, RatioVariant};
use confpref::corpus::{toy_backend, toy_corpus};
use confpref::dpo::{self, DpoBatch, DpoConfig, DpoItem, TabularPolicy, TrainablePolicy};
use confpref::estimators::{cluster, semantic_entropy, EquivalenceJudge, SemanticClustering};
use confpref::eval::{auroc, ece};
use confpref::pipeline::{self, PipelineConfig};
use confpref::prefs::{
    assign_band, build_pairs, compute_thresholds, generate_candidates, generate_opposing_statement,
    validate_prefs, Band, Conversation, PrefsLine, StanceSource,
};
use confpref::regressor::{self, confidence_from_se, RegressorConfig, TrainingExample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Direct evaluation of the ratio: the answer plus every sample strictly
/// below it, over the answer plus all samples, with 1 for a zero
/// denominator.
fn ratio_oracle(p: f64, samples: &[f64]) -> f64 {
    let mut num = p;
    let mut den = p;
    for &s in samples {
        if s < p {
            num += s;
        }
        den += s;
    }
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

fn criterion_1() -> Outcome {
    const GRID: [f64; 5] = [0.0, -0.5, -1.0, -2.0, -4.0];
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for len in 0..=6u32 {
        for code in 0..5usize.pow(len) {
            let mut c = code;
            let samples: Vec<f64> = (0..len)
                .map(|_| {
                    let v = GRID[c % 5];
                    c /= 5;
                    v
                })
                .collect();
            for &p in &GRID {
                let got = cumulative_prob_ratio(p, &samples, RatioVariant::LogLiteral).map_err(err)?;
                let want = ratio_oracle(p, &samples);
                let diff = (got - want).abs();
                worst = worst.max(diff);
                check(diff <= 1e-12, || format!("p'={p} samples={samples:?}: {got} vs oracle {want}"))?;
                checked += 1;
            }
        }
    }
    let ll = RatioVariant::LogLiteral;
    for (p, s, want) in [
        (-1.0, vec![-2.0, -0.5], 6.0 / 7.0),
        (-1.0, vec![-1.0, -1.0], 1.0 / 3.0),
        (-0.5, vec![-1.0, -2.0], 1.0),
    ] {
        let got = cumulative_prob_ratio(p, &s, ll).map_err(err)?;
        check(got == want, || format!("hand case p'={p} samples={s:?}: {got} != {want}"))?;
    }
    Ok(format!("{checked} grid cases, max deviation {worst:e}; hand cases 6/7, 1/3, 1 exact"))
}

struct RangeStats {
    range: usize,
    ordering: usize,
    monotone: usize,
    first_monotone: Option<String>,
}

fn range_suite(variant: RatioVariant, rng: &mut ChaCha8Rng, instances: usize) -> Result<RangeStats, String> {
    let mut st = RangeStats {
        range: 0,
        ordering: 0,
        monotone: 0,
        first_monotone: None,
    };
    for _ in 0..instances {
        let n = rng.gen_range(1..=20);
        let samples: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.0..5.0)).collect();
        let a = -rng.gen_range(0.0..5.0f64);
        let b = -rng.gen_range(0.0..5.0f64);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let r_lo = cumulative_prob_ratio(lo, &samples, variant).map_err(err)?;
        let r_hi = cumulative_prob_ratio(hi, &samples, variant).map_err(err)?;
        for r in [r_lo, r_hi] {
            if !(r > 0.0 && r <= 1.0) {
                st.range += 1;
            }
        }
        let conf_q = rng.gen_range(1e-6..=1.0);
        let gamma = rng.gen_range(0.0..3.0);
        let qa = answer_confidence(r_hi, conf_q, gamma).map_err(err)?;
        if qa > conf_q {
            st.ordering += 1;
        }
        if r_lo > r_hi {
            st.monotone += 1;
            st.first_monotone.get_or_insert_with(|| {
                format!("p'={lo:.4} gives {r_lo:.6} but p'={hi:.4} gives {r_hi:.6} over {n} samples")
            });
        }
    }
    Ok(st)
}

fn criterion_2() -> Outcome {
    const N: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mult_worst = 0.0f64;
    for _ in 0..N {
        let (a, b) = (rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0));
        for alpha in [0.7, rng.gen_range(0.01..5.0)] {
            let lhs = confidence_from_se(a + b, alpha).map_err(err)?;
            let rhs = confidence_from_se(a, alpha).map_err(err)? * confidence_from_se(b, alpha).map_err(err)?;
            mult_worst = mult_worst.max((lhs - rhs).abs());
        }
    }
    check(mult_worst <= 1e-9, || format!("confidence_from_se multiplicativity off by {mult_worst:e}"))?;
    let default = BceConfig::default().variant;
    let st = range_suite(default, &mut rng, N)?;
    let exp = range_suite(RatioVariant::Exponentiated, &mut ChaCha8Rng::seed_from_u64(2), N)?;
    let summary = format!(
        "{N} instances, {} variant: range violations {}, confidence_qa > confidence_q {}, monotonicity violations {}; exponentiated variant: range {}, monotonicity {}; multiplicativity max error {mult_worst:e}",
        default.label(),
        st.range,
        st.ordering,
        st.monotone,
        exp.range,
        exp.monotone
    );
    check(st.range == 0 && st.ordering == 0, || summary.clone())?;
    match st.first_monotone {
        Some(example) => Err(format!("{summary}; first counterexample: {example}")),
        None => Ok(summary),
    }
}

fn toy_pairs(n: usize) -> Result<DpoBatch, String> {
    let items = (0..n)
        .map(|i| DpoItem {
            prompt: format!("prompt {}", i % 10),
            chosen: format!("keep {i}"),
            rejected: format!("yield {i}"),
        })
        .collect();
    DpoBatch::new(items).map_err(err)
}

fn criterion_3() -> Outcome {
    let batch = toy_pairs(50)?;
    let policy = TabularPolicy::for_batch(&batch).map_err(err)?;
    let beta = 0.1;
    let loss = dpo::dpo_loss(&policy, &policy, &batch, beta).map_err(err)?;
    check((loss - std::f64::consts::LN_2).abs() <= 1e-9, || format!("loss at reference {loss} != ln 2"))?;

    // A perturbed policy so the gradient is not symmetric.
    let small = toy_pairs(12)?;
    let reference = TabularPolicy::for_batch(&small).map_err(err)?;
    let mut probe = reference.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params: Vec<f64> = probe.params().iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
    probe.set_params(&params);
    let report = dpo::dpo_gradient_check(&probe, &reference, &small, beta, 1e-5).map_err(err)?;
    check(report.passed, || {
        format!(
            "gradient relative error {:e} at coordinate {}",
            report.max_relative_error, report.worst_coordinate
        )
    })?;

    let config = DpoConfig {
        // Gradients carry a factor of beta, so the toy needs a large step.
        learning_rate: 20.0,
        epochs: 60,
        batch_size: 5,
        ..DpoConfig::default()
    };
    let run = dpo::train(policy, &batch, &config).map_err(err)?;
    check(run.final_loss <= run.initial_loss / 2.0, || {
        format!("loss {} -> {} did not halve", run.initial_loss, run.final_loss)
    })?;
    Ok(format!(
        "reference loss ln 2 within {:e}; gradient max relative error {:e}; 50-pair loss {:.4} -> {:.4}",
        (loss - std::f64::consts::LN_2).abs(),
        report.max_relative_error,
        run.initial_loss,
        run.final_loss
    ))
}

fn criterion_4() -> Outcome {
    const TOL: f64 = 0.001;
    // Slack for binary representation of three-decimal values only.
    const FP: f64 = 1e-9;
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/published_results.csv");
    let mut rdr = csv::Reader::from_path(&path).map_err(err)?;
    let (mut rows, mut avg_bad, mut id_bad) = (0, Vec::new(), Vec::new());
    for rec in rdr.deserialize::<BTreeMap<String, String>>() {
        let r = rec.map_err(err)?;
        let f = |k: &str| r[k].parse::<f64>().map_err(err);
        let (c, fl, avg, both, either) = (f("llm_correct")?, f("llm_false")?, f("average")?, f("both")?, f("either")?);
        let label = format!("{}/{}/{}", r["model"], r["method"], r["benchmark"]);
        rows += 1;
        if ((c + fl) / 2.0 - avg).abs() > TOL + FP {
            avg_bad.push(format!("{label}: average {avg} vs {:.4}", (c + fl) / 2.0));
        }
        if (2.0 * both + either - (c + fl)).abs() > TOL + FP {
            id_bad.push(format!("{label}: 2*both+either {:.3} vs {:.3}", 2.0 * both + either, c + fl));
        }
    }
    check(rows == 192, || format!("fixture has {rows} rows, expected 192"))?;
    let vicuna_gsm8k: (f64, f64) = ((0.239 + 0.793) / 2.0, 2.0 * 0.116 + 0.800);
    check(
        (vicuna_gsm8k.0 - 0.516).abs() < 1e-9 && (vicuna_gsm8k.1 - 1.032).abs() < 1e-9,
        || "worked example does not reproduce".into(),
    )?;
    if avg_bad.is_empty() && id_bad.is_empty() {
        Ok(format!("{rows} rows satisfy both identities to ±{TOL}"))
    } else {
        Err(format!(
            "{rows} rows: {} average violations, {} 2*both+either violations; e.g. {}; {}",
            avg_bad.len(),
            id_bad.len(),
            avg_bad.first().map_or("-", String::as_str),
            id_bad.first().map_or("-", String::as_str)
        ))
    }
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let conf: Vec<f64> = (0..10_000).map(|_| rng.gen_range(0.0..=1.0)).collect();
    let labels: Vec<bool> = conf.iter().map(|c| rng.gen_bool(*c)).collect();
    let e = ece(&conf, &labels, 10).map_err(err)?;
    check(e < 0.02, || format!("ECE {e} >= 0.02"))?;
    let sep = auroc(&[0.1, 0.2, 0.3, 0.7, 0.8, 0.9], &[false, false, false, true, true, true]).map_err(err)?;
    check(sep == 1.0, || format!("separated AUROC {sep}"))?;
    let tied = auroc(&[0.5; 8], &[true, false, true, false, false, true, true, false]).map_err(err)?;
    check(tied == 0.5, || format!("tied AUROC {tied}"))?;
    Ok(format!("Bernoulli ECE {e:.4}; separated AUROC 1.0; tied AUROC 0.5"))
}

fn criterion_6() -> Outcome {
    const DIM: usize = 16;
    const ROWS: usize = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w: Vec<f64> = (0..DIM).map(|_| rng.gen_range(-0.25..0.25)).collect();
    let dataset: Vec<TrainingExample> = (0..500)
        .map(|_| {
            let features: Vec<Vec<f32>> = (0..ROWS)
                .map(|_| (0..DIM).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
                .collect();
            let mean: Vec<f64> = (0..DIM)
                .map(|k| features.iter().map(|r| f64::from(r[k])).sum::<f64>() / ROWS as f64)
                .collect();
            let target = 1.0 + 2.0 * w.iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>();
            TrainingExample {
                features,
                target_se: target.max(0.0),
            }
        })
        .collect();
    let config = RegressorConfig {
        seed: 6,
        ..RegressorConfig::default()
    };
    let model = regressor::train(&dataset, &config).map_err(err)?;
    check(model.val_mse < 0.01, || format!("val MSE {}", model.val_mse))?;
    let mut worst = 0.0f64;
    for ex in dataset.iter().take(20) {
        let base = regressor::predict_se(&model, &ex.features).map_err(err)?;
        let mut rows = ex.features.clone();
        rows.reverse();
        rows.rotate_left(3);
        let perm = regressor::predict_se(&model, &rows).map_err(err)?;
        worst = worst.max((base - perm).abs());
    }
    check(worst <= 1e-6, || format!("permutation changed the prediction by {worst:e}"))?;
    Ok(format!("val MSE {:.5}; permutation deviation {worst:e}", model.val_mse))
}

fn criterion_7() -> Outcome {
    let corpus = toy_corpus(30, 77);
    let backend = toy_backend(&corpus, 78, 16, DialogueStyle::Calibrated).map_err(err)?;
    let params = DecodingParams {
        seed: 79,
        ..DecodingParams::default()
    };
    let judge = EquivalenceJudge::ExtractedAnswerMatch;
    let sets: Vec<SampleSet> = corpus
        .iter()
        .map(|q| sample_responses(&backend, &q.question_id, &q.question, 20, &params))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let dataset: Vec<TrainingExample> = sets
        .iter()
        .map(|s| {
            Ok(TrainingExample {
                features: s.records.iter().map(|r| r.feature.clone()).collect(),
                target_se: semantic_entropy(&cluster(s, &judge)?),
            })
        })
        .collect::<confpref::Result<_>>()
        .map_err(err)?;
    let model = regressor::train(
        &dataset,
        &RegressorConfig {
            epochs: 10,
            ..RegressorConfig::default()
        },
    )
    .map_err(err)?;
    let bce = BceConfig::default();
    let estimates = sets
        .iter()
        .map(|s| estimate_for_set(s, None, &model, &bce))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    let confs: Vec<f64> = estimates.iter().map(|e| e.confidence_qa).collect();
    let spec = compute_thresholds(&confs).map_err(err)?;
    let mut sizes = BTreeMap::new();
    for c in &confs {
        *sizes.entry(assign_band(*c, &spec)).or_insert(0usize) += 1;
    }
    let counts: Vec<usize> = [Band::High, Band::Mid, Band::Low]
        .iter()
        .map(|b| sizes.get(b).copied().unwrap_or(0))
        .collect();
    check(counts.iter().sum::<usize>() == 30 && counts.iter().all(|n| n.abs_diff(10) <= 1), || {
        format!("band sizes high/mid/low {counts:?}")
    })?;
    check(assign_band(spec.t1, &spec) == Band::Mid, || "conf = t1 is not mid".into())?;
    check(assign_band(spec.t2, &spec) == Band::Low, || "conf = t2 is not low".into())?;

    let mut lines = Vec::new();
    for (q, e) in corpus.iter().zip(&estimates) {
        let (s, a_correct) = generate_opposing_statement(&backend, &q.question_id, &q.question, &e.answer_text, &q.gold, 80)
            .map_err(err)?
            .ok_or_else(|| format!("{} dropped", q.question_id))?;
        let conv = Conversation {
            question_id: q.question_id.clone(),
            q: q.question.clone(),
            a: e.answer_text.clone(),
            s,
            gold: Some(q.gold.clone()),
            a_is_correct: Some(a_correct),
        };
        let cands = generate_candidates(&backend, &conv, StanceSource::Backend, 81).map_err(err)?;
        let pairs = build_pairs(&conv, &cands, assign_band(e.confidence_qa, &spec), e.confidence_qa).map_err(err)?;
        check(pairs.len() == 6, || format!("{} yields {} pairs", q.question_id, pairs.len()))?;
        lines.extend(pairs.iter().map(PrefsLine::from));
    }
    let violations = validate_prefs(&lines, Some(&spec));
    check(violations.is_empty(), || format!("{} violations, first {:?}", violations.len(), violations[0]))?;
    Ok(format!(
        "bands high/mid/low {counts:?}; {} pairs from 30 conversations; 0 violations; boundaries t1 -> mid, t2 -> low",
        lines.len()
    ))
}

fn tree(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(err)? {
            let p = entry.map_err(err)?.path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let rel = p.strip_prefix(dir).map_err(err)?.display().to_string();
            let mut bytes = std::fs::read(&p).map_err(err)?;
            if rel.starts_with(pipeline::artifacts::MANIFESTS) {
                // Wall time is the one field expected to differ.
                let mut m: serde_json::Value = serde_json::from_slice(&bytes).map_err(err)?;
                m["wall_time_ms"] = serde_json::Value::Null;
                bytes = serde_json::to_vec(&m).map_err(err)?;
            }
            out.insert(rel, bytes);
        }
    }
    Ok(out)
}

fn criterion_8() -> Outcome {
    let mut trees = Vec::new();
    let dirs = [tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?];
    for d in &dirs {
        let cfg = PipelineConfig {
            out_dir: d.path().to_path_buf(),
            seed: 8,
            ..PipelineConfig::default()
        };
        pipeline::run_all(&cfg, false).map_err(err)?;
        trees.push(tree(d.path())?);
    }
    let (a, b) = (&trees[0], &trees[1]);
    check(a.keys().eq(b.keys()), || "the two runs produced different file sets".into())?;
    let differing: Vec<&String> = a.iter().filter(|(k, v)| b[*k] != **v).map(|(k, _)| k).collect();
    check(differing.is_empty(), || format!("files differ: {differing:?}"))?;
    Ok(format!("8 stages twice; {} files byte-identical (manifest wall time excluded)", a.len()))
}

fn criterion_9() -> Outcome {
    let se = |w: Vec<f64>| -> Result<f64, String> {
        Ok(semantic_entropy(&SemanticClustering::from_weights(w).map_err(err)?))
    };
    let two = se(vec![0.6, 0.4])?;
    check((two - 0.6730).abs() <= 1e-4, || format!("[0.6, 0.4] gives {two}"))?;
    let one = se(vec![1.0])?;
    check(one == 0.0, || format!("single cluster gives {one}"))?;
    for k in 1..=50usize {
        let v = se(vec![1.0 / k as f64; k])?;
        check((v - (k as f64).ln()).abs() <= 1e-9, || format!("uniform {k} clusters gives {v}"))?;
    }
    Ok(format!("[0.6, 0.4] -> {two:.6}; single -> 0; uniform k -> ln k for k = 1..50"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 9] = [
        ("BCE oracle equivalence", criterion_1, Duration::from_secs(10)),
        ("range and monotonicity", criterion_2, Duration::from_secs(30)),
        ("DPO correctness", criterion_3, Duration::from_secs(60)),
        ("published metric identities", criterion_4, Duration::from_secs(5)),
        ("calibration", criterion_5, Duration::from_secs(30)),
        ("regressor", criterion_6, Duration::from_secs(300)),
        ("preference construction", criterion_7, Duration::from_secs(60)),
        ("end-to-end determinism", criterion_8, Duration::from_secs(300)),
        ("semantic entropy", criterion_9, Duration::from_secs(5)),
    ];
    let mut failed = 0;
    for (i, (name, f, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let mut outcome = f();
        let took = start.elapsed();
        if outcome.is_ok() && took > *budget {
            outcome = Err(format!("took {took:.2?}, budget {budget:?}"));
        }
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name} ({took:.2?}): {detail}", i + 1),
            Err(reason) => {
                failed += 1;
                println!("criterion {}: FAIL {name} ({took:.2?}): {reason}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
