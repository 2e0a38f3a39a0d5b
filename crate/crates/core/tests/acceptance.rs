//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance` runs everything; numeric arguments select
//! criteria, e.g. `cargo test --test acceptance -- 1 8 9`. Criterion 7 is
//! judged on whichever of criteria 2 to 5 ran.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use convemo_core::annotator::{
    annotate_with_stats, build_prompt, label_overlap, parse_response, AnnotationCache, MockBackend, RetryPolicy,
};
use convemo_core::checkpoint::StageTag;
use convemo_core::context::Stage2Model;
use convemo_core::corpus::{LabelSpace, Sentiment};
use convemo_core::encoders::{pretrain_text_encoder, stage1_train, Modality, ReferenceTextEncoder, Stage1Inputs, Stage1Model, Tokenizer};
use convemo_core::evalkit::weighted_f1;
use convemo_core::fusion::CoAttentionBlock;
use convemo_core::gradcheck::gradient_check;
use convemo_core::nn::{normal_init, seeded_rng, ParamStore};
use convemo_core::pipeline::{
    ablate_fusion, ablate_merged, run_pipeline, ExperimentConfig, ExperimentData, ExperimentReport, FrozenCheck,
    ARM_COATTENTION, ARM_CONCAT, ARM_HIERARCHICAL, ARM_MERGED,
};
use convemo_core::synthetic::{generate, SyntheticKind, SyntheticSpec};
use convemo_core::trainer::TrainConfig;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s as f64, format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()))
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Independent weighted F1: per-class counts straight from the definitions.
fn brute_force_weighted_f1(preds: &[usize], golds: &[usize], n_classes: usize) -> f64 {
    let n = golds.len() as f64;
    let mut total = 0.0;
    for c in 0..n_classes {
        let tp = preds.iter().zip(golds).filter(|&(&p, &g)| p == c && g == c).count() as f64;
        let predicted = preds.iter().filter(|&&p| p == c).count() as f64;
        let support = golds.iter().filter(|&&g| g == c).count() as f64;
        let precision = if predicted == 0.0 { 0.0 } else { tp / predicted };
        let recall = if support == 0.0 { 0.0 } else { tp / support };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        total += support / n * f1;
    }
    total
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut rng = seeded_rng(1, "acceptance-metric");
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.random_range(2..=7);
        let len = rng.random_range(1..=500);
        let golds: Vec<usize> = (0..len).map(|_| rng.random_range(0..k)).collect();
        let preds: Vec<usize> = (0..len).map(|_| rng.random_range(0..k)).collect();
        let got = weighted_f1(&preds, &golds, k).map_err(err)?;
        worst = worst.max((got - brute_force_weighted_f1(&preds, &golds, k)).abs());
    }
    ensure(worst <= 1e-9, format!("max deviation {worst:e}"))?;
    within(t.elapsed(), 10)?;
    Ok(format!("1000 instances, max deviation {worst:.1e}"))
}

fn stage(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig::stage().with_epochs(epochs).with_lr(lr)
}

fn f1(report: &ExperimentReport, key: &str) -> Result<f64, String> {
    report.row(key).map(|r| r.val.weighted_f1).ok_or_else(|| format!("report has no {key} row"))
}

fn criterion_2(frozen: &mut Vec<FrozenCheck>) -> Outcome {
    let t = Instant::now();
    let spec = SyntheticSpec::new(SyntheticKind::Context, 2000, 21);
    ensure((spec.min_turns, spec.max_turns) == (2, 10), "context turns must span 2..=10")?;
    let data = ExperimentData::from_synthetic(&generate(&spec).map_err(err)?).map_err(err)?;
    let mut config = ExperimentConfig::for_synthetic(SyntheticKind::Context, 21);
    config.pretrain = TrainConfig::pretrain().with_epochs(3).with_lr(3e-3);
    config.stage1 = stage(3, 1e-3);
    config.stage2 = stage(4, 1e-3);
    config.stage3 = stage(1, 3e-4);
    let config = config.with_seed(21);
    let dir = tempfile::tempdir().map_err(err)?;
    let report = run_pipeline(&config, &data, dir.path()).map_err(err)?;
    frozen.extend(report.frozen_checks.iter().cloned());
    let (a1, a2, t1, t2) = (f1(&report, "audio-I")?, f1(&report, "audio-II")?, f1(&report, "text-I")?, f1(&report, "text-II")?);
    let line = format!("stage I audio {a1:.3} text {t1:.3}; stage II audio {a2:.3} text {t2:.3}");
    ensure(a1 <= 0.60 && t1 <= 0.60, format!("stage I too high: {line}"))?;
    ensure(a2 >= 0.95 && t2 >= 0.95, format!("stage II too low: {line}"))?;
    within(t.elapsed(), 180)?;
    Ok(line)
}

/// The XOR experiment, kept for the fusion ablation.
struct XorRun {
    dir: tempfile::TempDir,
    config: ExperimentConfig,
    data: ExperimentData,
}

fn criterion_3(frozen: &mut Vec<FrozenCheck>, keep: &mut Option<XorRun>) -> Outcome {
    let t = Instant::now();
    let spec = SyntheticSpec::new(SyntheticKind::Xor, 2000, 31);
    let data = ExperimentData::from_synthetic(&generate(&spec).map_err(err)?).map_err(err)?;
    let mut config = ExperimentConfig::for_synthetic(SyntheticKind::Xor, 31);
    config.pretrain = TrainConfig::pretrain().with_epochs(3).with_lr(3e-3);
    config.stage1 = stage(2, 1e-3);
    config.stage2 = stage(3, 1e-3);
    config.stage3 = stage(6, 3e-4);
    let config = config.with_seed(31);
    let dir = tempfile::tempdir().map_err(err)?;
    let report = run_pipeline(&config, &data, dir.path()).map_err(err)?;
    frozen.extend(report.frozen_checks.iter().cloned());
    let (a2, t2, fused) = (f1(&report, "audio-II")?, f1(&report, "text-II")?, f1(&report, "fused-III")?);
    let line = format!("stage II audio {a2:.3} text {t2:.3}; stage III co-attention {fused:.3}");
    *keep = Some(XorRun { dir, config, data });
    ensure(a2 <= 0.60 && t2 <= 0.60, format!("unimodal stage II too high: {line}"))?;
    ensure(fused >= 0.95, format!("fusion too low: {line}"))?;
    within(t.elapsed(), 180)?;
    Ok(line)
}

fn criterion_4(frozen: &mut Vec<FrozenCheck>, xor: Option<&XorRun>) -> Outcome {
    let owned;
    let run = match xor {
        Some(r) => r,
        None => {
            let mut unused = Vec::new();
            let mut slot = None;
            // criterion 3 not selected; build its checkpoints without judging it
            let _ = criterion_3(&mut unused, &mut slot);
            owned = slot.ok_or("could not build the XOR experiment")?;
            &owned
        }
    };
    let report = ablate_fusion(&run.config, &run.data, run.dir.path()).map_err(err)?;
    frozen.extend(report.frozen_checks.iter().cloned());
    ensure(report.arms() == [ARM_COATTENTION, ARM_CONCAT], format!("arms {:?}", report.arms()))?;
    let co = report.mean_val(ARM_COATTENTION).unwrap_or(f64::NAN);
    let cat = report.mean_val(ARM_CONCAT).unwrap_or(f64::NAN);
    let csv = report.to_chart().to_csv();
    ensure(csv.contains(ARM_CONCAT) && csv.contains(ARM_COATTENTION), "chart lacks a row")?;
    // both must learn the parity; no ordering between them is asserted
    ensure(co >= 0.9 && cat >= 0.9, format!("co-attention {co:.3}, concat {cat:.3}"))?;
    Ok(format!("rows emitted: co-attention {co:.3}, concatenation {cat:.3}"))
}

fn criterion_5(frozen: &mut Vec<FrozenCheck>) -> Outcome {
    let t = Instant::now();
    let spec = SyntheticSpec::new(SyntheticKind::Composite, 300, 51).with_sizes(100, 100, 100);
    let data = ExperimentData::from_synthetic(&generate(&spec).map_err(err)?).map_err(err)?;
    let mut config = ExperimentConfig::for_synthetic(SyntheticKind::Composite, 51);
    config.pretrain = TrainConfig::pretrain().with_epochs(3).with_lr(3e-3);
    config.stage1 = stage(3, 1e-3);
    config.stage2 = stage(20, 1e-3);
    config.stage3 = stage(30, 3e-4);
    let config = config.with_seed(51).with_stages(vec![StageTag::Pretrain, StageTag::Stage1]);
    let dir = tempfile::tempdir().map_err(err)?;
    let base = run_pipeline(&config, &data, dir.path()).map_err(err)?;
    frozen.extend(base.frozen_checks.iter().cloned());
    let report = ablate_merged(&config, &data, dir.path(), &[1, 2, 3, 4, 5]).map_err(err)?;
    frozen.extend(report.frozen_checks.iter().cloned());
    let h = report.mean_val(ARM_HIERARCHICAL).ok_or("no hierarchical rows")?;
    let m = report.mean_val(ARM_MERGED).ok_or("no merged rows")?;
    ensure(report.rows.len() == 10, format!("{} rows", report.rows.len()))?;
    let line = format!("mean val F1 over 5 seeds: hierarchical {h:.3}, merged {m:.3}");
    ensure(h >= m - 0.05, line.clone())?;
    within(t.elapsed(), 600)?;
    Ok(line)
}

fn criterion_6() -> Outcome {
    let max_epochs = 40;
    let mut lines = Vec::new();
    for seed in [61, 62, 63] {
        let synthetic = generate(&SyntheticSpec::new(SyntheticKind::Keyword, 100, seed)).map_err(err)?;
        let (train, val, _) = synthetic.split().map_err(err)?;
        let mut cache = AnnotationCache::in_memory();
        let corpus =
            annotate_with_stats(&synthetic.transcripts, &MockBackend::new(), &mut cache, &RetryPolicy::immediate()).map_err(err)?.0;
        let pre = pretrain_text_encoder(&corpus, &TrainConfig::pretrain().with_epochs(4).with_lr(3e-3).with_seed(seed))
            .map_err(err)?;
        let tokenizer = pre.encoder.tokenizer().clone();
        let cfg = stage(max_epochs, 1e-3).with_seed(seed);
        let ls = train.label_space;
        let (_, with_pre) = stage1_train(Stage1Model::text(pre.encoder, ls, seed), &train, &val, None, &cfg).map_err(err)?;
        let random = Stage1Model::text(ReferenceTextEncoder::new(tokenizer, seed), ls, seed);
        let (_, from_scratch) = stage1_train(random, &train, &val, None, &cfg).map_err(err)?;
        let p = with_pre.epochs_to_reach(0.9).ok_or(format!("seed {seed}: pre-trained never reached 0.9"))?;
        // never reaching the target within the budget counts as needing more than it
        let r = from_scratch.epochs_to_reach(0.9);
        let r_eff = r.unwrap_or(max_epochs + 1);
        lines.push(format!("seed {seed}: {p} vs {}", r.map_or(format!(">{max_epochs}"), |r| r.to_string())));
        ensure(2 * p <= r_eff, format!("seed {seed}: pre-trained {p} epochs, random {r_eff}"))?;
    }
    Ok(format!("epochs to 0.9 F1 (pre-trained vs random): {}", lines.join(", ")))
}

fn criterion_7(frozen: &[FrozenCheck]) -> Outcome {
    ensure(!frozen.is_empty(), "no later-stage runs were recorded")?;
    let thawed: Vec<String> =
        frozen.iter().filter(|c| !c.frozen).map(|c| format!("{} during {}", c.checkpoint, c.during)).collect();
    ensure(thawed.is_empty(), format!("changed: {}", thawed.join(", ")))?;
    Ok(format!("{} earlier-checkpoint comparisons, all bit-exact", frozen.len()))
}

fn criterion_8() -> Outcome {
    let t = Instant::now();
    let mut worst: Vec<(String, f64)> = Vec::new();

    let tok = Tokenizer::fit(["good day", "bad bad fine", "the bus"]);
    let text = Stage1Model::text(ReferenceTextEncoder::new(tok.clone(), 1), LabelSpace::iemocap4(), 1);
    let inputs = Stage1Inputs::Tokens(vec![tok.encode("good day"), tok.encode(""), tok.encode("bad bad fine")]);
    let mut stores = vec![text.body_params().clone(), text.head_params.clone()];
    let r = gradient_check(&mut stores, None, |tape| {
        let l = text.logits(tape, &inputs).expect("text logits");
        tape.cross_entropy(l, &[0, 2, 3])
    });
    worst.push(("stage I text".into(), r.max_rel_error));

    let speech = Stage1Model::speech(6, LabelSpace::iemocap4(), 2);
    let feats = Stage1Inputs::Features(normal_init(&mut seeded_rng(9, "x"), 3, 6, 1.0));
    let mut stores = vec![speech.body_params().clone(), speech.head_params.clone()];
    let r = gradient_check(&mut stores, None, |tape| {
        let l = speech.logits(tape, &feats).expect("speech logits");
        tape.cross_entropy(l, &[1, 1, 0])
    });
    worst.push(("stage I audio".into(), r.max_rel_error));

    let s2 = Stage2Model::with_dims(Modality::Speech, 5, 6, 2, LabelSpace::iemocap4(), 3);
    let x = normal_init(&mut seeded_rng(8, "seq"), 3, 5, 1.0);
    let mut stores = vec![s2.params.clone(), s2.head_params.clone()];
    let r = gradient_check(&mut stores, None, |tape| {
        let xv = tape.constant(x.clone());
        let f = s2.features(tape, 0, xv, &[3]);
        let l = s2.logits(tape, 1, f);
        tape.cross_entropy(l, &[0, 3, 1])
    });
    worst.push(("bi-GRU + self-attention".into(), r.max_rel_error));

    let mut store = ParamStore::new();
    let block = CoAttentionBlock::new(&mut store, &mut seeded_rng(4, "blk"), 8, 2);
    let a = normal_init(&mut seeded_rng(11, "a"), 2, 8, 1.0);
    let b = normal_init(&mut seeded_rng(12, "t"), 2, 8, 1.0);
    let mut stores = vec![store];
    let r = gradient_check(&mut stores, None, |tape| {
        let av = tape.constant(a.clone());
        let tv = tape.constant(b.clone());
        let (fa, ft) = block.forward(tape, 0, av, tv, &[true, true]);
        let la = tape.cross_entropy(fa, &[1, 5]);
        let lt = tape.cross_entropy(ft, &[0, 7]);
        tape.add(la, lt)
    });
    worst.push(("co-attention block".into(), r.max_rel_error));

    let bad: Vec<String> = worst.iter().filter(|(_, e)| !(*e < 1e-4)).map(|(n, e)| format!("{n} {e:.2e}")).collect();
    ensure(bad.is_empty(), format!("relative error above 1e-4: {}", bad.join(", ")))?;
    within(t.elapsed(), 30)?;
    Ok(worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", "))
}

fn criterion_9() -> Outcome {
    ensure(
        build_prompt("I hate this")
            == "You are a sentiment classification bot. Given the I hate this, classify as positive, negative or neutral sentiment. Please give the sentiment and no extra text as output.",
        "prompt differs from the golden text",
    )?;

    let mut runner = TestRunner::new(PropConfig { cases: 500, failure_persistence: None, ..PropConfig::default() });
    let strategy = (0usize..3, prop::collection::vec(any::<bool>(), 8), "[ \t\n.,:;!?\"'*()-]{0,6}", "[ \t\n.,:;!?\"'*()-]{0,6}");
    runner
        .run(&strategy, |(class, caps, pre, post)| {
            let s = Sentiment::ALL[class];
            let word: String = s
                .as_str()
                .chars()
                .zip(caps.iter().cycle())
                .map(|(c, &up)| if up { c.to_ascii_uppercase() } else { c })
                .collect();
            let raw = format!("{pre}{word}{post}");
            prop_assert_eq!(parse_response(&raw).ok(), Some(s), "{:?}", raw);
            Ok(())
        })
        .map_err(|e| format!("parse property: {e}"))?;

    let transcripts: Vec<(String, String)> =
        ["what a great day", "this is awful", "the bus leaves at noon", "what a great day"].iter().enumerate().map(|(i, t)| (format!("t{i}"), t.to_string())).collect();
    let dir = tempfile::tempdir().map_err(err)?;
    let cache_path = dir.path().join("cache.jsonl");
    let mock = MockBackend::new();
    let mut cache = AnnotationCache::open(&cache_path).map_err(err)?;
    let (first, s1) = annotate_with_stats(&transcripts, &mock, &mut cache, &RetryPolicy::immediate()).map_err(err)?;
    let mut reopened = AnnotationCache::open(&cache_path).map_err(err)?;
    let (second, s2) = annotate_with_stats(&transcripts, &mock, &mut reopened, &RetryPolicy::immediate()).map_err(err)?;
    ensure(s1.backend_calls == 3, format!("first run made {} calls", s1.backend_calls))?;
    ensure(s2.backend_calls == 0, format!("second run made {} calls", s2.backend_calls))?;
    ensure(first == second, "second run changed the labels")?;

    use Sentiment::{Negative, Neutral, Positive};
    ensure(label_overlap(&[Positive; 10], &[Positive; 10]).ok() == Some(1.0), "identical lists")?;
    ensure(
        label_overlap(&[Positive, Negative, Neutral, Positive], &[Positive, Positive, Neutral, Negative]).ok() == Some(0.5),
        "half overlap",
    )?;
    ensure(label_overlap(&[Positive, Negative], &[Neutral, Neutral]).ok() == Some(0.0), "no overlap")?;
    ensure(label_overlap(&[Positive], &[Positive, Negative]).is_err(), "length mismatch must fail")?;
    Ok("golden prompt, 500 parse cases, 0 calls on rerun, overlap hand cases".into())
}

fn artifacts(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(err)? {
        let path = entry.map_err(err)?.path();
        let name = path.file_name().unwrap_or_default().to_string_lossy().to_string();
        out.insert(name, fs::read(&path).map_err(err)?);
    }
    Ok(out)
}

fn criterion_10() -> Outcome {
    let spec = SyntheticSpec::new(SyntheticKind::Xor, 60, 101);
    let data = ExperimentData::from_synthetic(&generate(&spec).map_err(err)?).map_err(err)?;
    let mut config = ExperimentConfig::for_synthetic(SyntheticKind::Xor, 101);
    config.stage2 = stage(2, 1e-3);
    config.stage3 = stage(2, 3e-4);
    let config = config.with_seed(101);
    let (a, b) = (tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?);
    run_pipeline(&config, &data, a.path()).map_err(err)?;
    run_pipeline(&config, &data, b.path()).map_err(err)?;
    let (fa, fb) = (artifacts(a.path())?, artifacts(b.path())?);
    ensure(fa.keys().eq(fb.keys()), "different file sets")?;
    let differing: Vec<&String> = fa.iter().filter(|(k, v)| fb[*k] != **v).map(|(k, _)| k).collect();
    ensure(differing.is_empty(), format!("differing artifacts: {differing:?}"))?;
    let ckpts = fa.keys().filter(|k| k.ends_with(".ckpt")).count();
    ensure(ckpts == 6 && fa.contains_key("report.json"), format!("{ckpts} checkpoints"))?;
    Ok(format!("{} artifacts identical across runs, {ckpts} checkpoints", fa.len()))
}

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| selected.is_empty() || selected.contains(&n);
    let mut results: Vec<(u32, &str, Outcome, Duration)> = Vec::new();
    let mut frozen = Vec::new();
    let mut xor = None;
    let mut ran_stage_runs = false;

    let mut record = |n: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let out = f();
        let took = t.elapsed();
        let (tag, msg) = match &out {
            Ok(m) => ("PASS", m.clone()),
            Err(m) => ("FAIL", m.clone()),
        };
        println!("{tag} criterion {n:>2} {name}: {msg} [{:.1}s]", took.as_secs_f64());
        results.push((n, name, out, took));
    };

    if wanted(1) {
        record(1, "metric oracle", &mut criterion_1);
    }
    if wanted(2) {
        ran_stage_runs = true;
        record(2, "stage ordering (context)", &mut || criterion_2(&mut frozen));
    }
    if wanted(3) {
        ran_stage_runs = true;
        record(3, "fusion gain (xor)", &mut || criterion_3(&mut frozen, &mut xor));
    }
    if wanted(4) {
        ran_stage_runs = true;
        record(4, "co-attention vs concatenation", &mut || criterion_4(&mut frozen, xor.as_ref()));
    }
    drop(xor);
    if wanted(5) {
        ran_stage_runs = true;
        record(5, "hierarchical vs merged", &mut || criterion_5(&mut frozen));
    }
    if wanted(6) {
        record(6, "pre-training benefit", &mut criterion_6);
    }
    if wanted(7) && ran_stage_runs {
        record(7, "freezing contract", &mut || criterion_7(&frozen));
    } else if wanted(7) {
        println!("SKIP criterion  7 freezing contract: needs criteria 2-5");
    }
    if wanted(8) {
        record(8, "gradient checks", &mut criterion_8);
    }
    if wanted(9) {
        record(9, "annotation contract", &mut criterion_9);
    }
    if wanted(10) {
        record(10, "determinism", &mut criterion_10);
    }

    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
