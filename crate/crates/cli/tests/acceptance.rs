//! End-to-end acceptance checks. Each test prints one line of the form
//! `criterion N: PASS|FAIL ...` and fails if its criterion is not met.
//! Run with `--nocapture` to see the lines.

#[path = "../../core/tests/support/oracle.rs"]
mod oracle;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use emoter_core::corpus::{generate_synthetic_corpus, split_dataset, Record, SyntheticSpec};
use emoter_core::generator::{generate, GenerationQuery};
use emoter_core::lexicon::{EmotionCategory, Lexicon};
use emoter_core::metrics::{bleu, debiasing_score, div, fcr, fmr, hypothesis_feature_sets, rouge, usr, EvaluationPair};
use emoter_core::model::{check_gradients, fuse, random_input, EmoTer, EmoTerConfig, ModelInput};
use emoter_core::numerics::Tape;
use emoter_core::trainer::{evaluate_generation, evaluate_loss, prepare_data, train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    println!("criterion {n}: {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn tiny_config() -> EmoTerConfig {
    EmoTerConfig {
        embed_dim: 8,
        ffn_dim: 16,
        attention_heads: 2,
        encoder_layers: 2,
        decoder_layers: 2,
        emotion_hidden: 8,
        max_len: 8,
        ..EmoTerConfig::desk(20, 3, 3)
    }
}

#[test]
fn criterion_1_gradient_check() {
    let start = Instant::now();
    let report = check_gradients(&tiny_config(), 0, 200, 1e-5).unwrap();
    let elapsed = start.elapsed();
    let pass = report.max_relative_error < 1e-3 && report.checked >= 200 && elapsed < Duration::from_secs(60);
    verdict(
        1,
        "gradient correctness",
        pass,
        &format!(
            "max relative error {:.2e} over {} coordinates ({} kinks skipped) in {:.1}s",
            report.max_relative_error,
            report.checked,
            report.skipped_kinks,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_2_memorization() {
    let start = Instant::now();
    let lex = Lexicon::fixture();
    let records = generate_synthetic_corpus(&SyntheticSpec::desk(8, 8, 64, [1.0 / 6.0; 6]), 1).unwrap();
    let data = prepare_data(&records, &[], &[], &lex, 32).unwrap();
    let template = EmoTerConfig::desk(0, 0, 0);
    let train_cfg = TrainConfig {
        max_epochs: 500,
        patience: 500,
        target_loss: Some(0.005),
        ..TrainConfig::desk()
    };
    let (model, history) = train(&template, &train_cfg, &data, &lex).unwrap();
    let initial = history.initial_train.total;
    let last = evaluate_loss(&model, &data.train, &lex).unwrap().total;
    let exact = data
        .train_records
        .iter()
        .filter(|r| {
            let q = GenerationQuery::from_record(r, None).unwrap();
            generate(&model, &data.vocab, &lex, &q).unwrap() == r.tokens()
        })
        .count();
    let elapsed = start.elapsed();
    let share = exact as f64 / records.len() as f64;
    let pass =
        history.epochs.len() <= 500 && last < 0.1 * initial && share >= 0.9 && elapsed < Duration::from_secs(600);
    verdict(
        2,
        "memorization",
        pass,
        &format!(
            "L_total {initial:.3} -> {last:.5} in {} epochs, {exact}/{} reproduced exactly, {:.0}s",
            history.epochs.len(),
            records.len(),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_3_emotion_head_accuracy() {
    let start = Instant::now();
    let lex = Lexicon::fixture();
    let records = generate_synthetic_corpus(&SyntheticSpec::desk(30, 30, 600, [1.0 / 6.0; 6]), 3).unwrap();
    // the generator's tags must be exactly the lexicon's verdicts
    assert!(records.iter().all(|r| Some(lex.classify(&r.tokens())) == r.emotion));
    let split = split_dataset(&records, 3).unwrap();
    let data = prepare_data(&split.train, &split.valid, &split.test, &lex, 32).unwrap();
    // the tag token is hidden so the head has to read the explanation
    let template = EmoTerConfig {
        mask_emotion_tag: true,
        ..EmoTerConfig::desk(0, 0, 0)
    };
    let train_cfg = TrainConfig {
        max_epochs: 30,
        seed: 3,
        ..TrainConfig::desk()
    };
    let (model, _) = train(&template, &train_cfg, &data, &lex).unwrap();
    let correct = data
        .test
        .iter()
        .filter(|ex| {
            let p = model
                .predict_emotion(&ModelInput::from_example(ex, &lex, false))
                .unwrap();
            let best = (0..6).fold(0, |b, k| if p[k] > p[b] { k } else { b });
            EmotionCategory::ALL[best] == ex.emotion_target
        })
        .count();
    let elapsed = start.elapsed();
    let accuracy = correct as f64 / data.test.len() as f64;
    verdict(
        3,
        "emotion head",
        accuracy >= 0.9 && elapsed < Duration::from_secs(600),
        &format!(
            "held-out accuracy {:.1}% ({correct}/{}) in {:.0}s",
            100.0 * accuracy,
            data.test.len(),
            elapsed.as_secs_f64()
        ),
    );
}

/// Published hotel-review emotion audits under two detectors:
/// (category, ground truth %, baseline %, ours %, published debiasing).
type PublishedRow = (&'static str, f64, f64, f64, f64);

const TEXT2EMOTION_AUDIT: [PublishedRow; 6] = [
    ("happy", 42.8, 61.3, 47.2, 21.9),
    ("angry", 5.9, 5.4, 4.8, -10.2),
    ("surprise", 12.7, 5.0, 9.8, 37.8),
    ("sad", 7.7, 4.6, 5.8, 10.4),
    ("fear", 18.7, 11.7, 17.4, 30.5),
    ("neutral", 12.2, 11.8, 14.9, 25.4),
];

const GOEMOTION_AUDIT: [PublishedRow; 6] = [
    ("happy", 59.2, 69.5, 63.6, 10.0),
    ("angry", 1.5, 0.3, 0.5, 13.3),
    ("surprise", 1.6, 0.3, 0.4, 6.3),
    ("sad", 1.8, 0.6, 1.3, 38.9),
    ("fear", 0.3, 0.05, 0.06, 3.3),
    ("neutral", 35.6, 29.2, 34.2, 14.0),
];

/// Published rows that the formula is known not to reproduce.
const KNOWN_MISMATCHES: [&str; 2] = ["happy", "sad"];

#[test]
fn criterion_4_debiasing_formula() {
    let mut failures = Vec::new();
    let mut warnings = Vec::new();
    for (table, rows, exempt) in [
        ("goemotion", &GOEMOTION_AUDIT, &[][..]),
        ("text2emotion", &TEXT2EMOTION_AUDIT, &KNOWN_MISMATCHES[..]),
    ] {
        for &(name, gt, base, ours, published) in rows.iter() {
            let got = debiasing_score(gt, base, ours).unwrap();
            if (got - published).abs() <= 0.05 {
                continue;
            }
            let line = format!("{table}/{name}: computed {got:.2}, published {published}");
            if exempt.contains(&name) {
                warnings.push(line);
            } else {
                failures.push(line);
            }
        }
    }
    for w in &warnings {
        println!("criterion 4: WARN published value not reproducible from its own row: {w}");
    }
    let expected_warnings = KNOWN_MISMATCHES.len();
    let pass = failures.is_empty() && warnings.len() == expected_warnings;
    let detail = if pass {
        format!("12 published rows checked, {} documented mismatches", warnings.len())
    } else {
        format!(
            "mismatches: {failures:?}; warnings {}/{expected_warnings}",
            warnings.len()
        )
    };
    verdict(4, "debiasing formula fidelity", pass, &detail);
}

const WORDS: [&str; 7] = ["the", "pool", "bar", "was", "nice", "lobby", "a"];

fn random_corpus(rng: &mut ChaCha8Rng) -> Vec<EvaluationPair> {
    let n = rng.gen_range(1..=5);
    let sentence = |rng: &mut ChaCha8Rng, min: usize| -> Vec<String> {
        let len = rng.gen_range(min..=7);
        (0..len)
            .map(|_| WORDS[rng.gen_range(0..WORDS.len())].to_string())
            .collect()
    };
    (0..n)
        .map(|_| EvaluationPair {
            reference: sentence(rng, 1),
            hypothesis: sentence(rng, 0),
            features: vec![["pool", "bar", "lobby"][rng.gen_range(0..3)].to_string()],
        })
        .collect()
}

#[test]
fn criterion_5_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let pairs = random_corpus(&mut rng);
        let rh: Vec<_> = pairs
            .iter()
            .map(|p| (p.reference.clone(), p.hypothesis.clone()))
            .collect();
        let hyps: Vec<_> = pairs.iter().map(|p| p.hypothesis.clone()).collect();
        let feats: Vec<_> = pairs.iter().map(|p| p.features.clone()).collect();
        let mut diff = |a: f64, b: f64| worst = worst.max((a - b).abs());
        for n in [1, 4] {
            diff(bleu(&pairs, n).unwrap(), oracle::bleu(&rh, n));
        }
        for n in [1, 2] {
            let r = rouge(&pairs, n).unwrap();
            let (p, rc, f) = oracle::rouge(&rh, n);
            diff(r.precision, p);
            diff(r.recall, rc);
            diff(r.f1, f);
        }
        diff(usr(&hyps).unwrap(), oracle::usr(&hyps));
        diff(fmr(&pairs).unwrap(), oracle::fmr(&hyps, &feats));
        diff(fcr(&pairs).unwrap(), oracle::fcr(&hyps, &feats));
        if pairs.len() >= 2 {
            diff(
                div(&hypothesis_feature_sets(&pairs)).unwrap(),
                oracle::div(&hyps, &feats),
            );
        }
    }
    verdict(
        5,
        "metric oracle equivalence",
        worst <= 1e-9,
        &format!("20 corpora, largest difference {worst:.1e}"),
    );
}

/// All LM logits and the emotion logits for one input.
fn all_logits(model: &EmoTer, input: &ModelInput) -> Vec<f64> {
    let mut tape = Tape::new(&model.params);
    let pass = model.network.forward(&mut tape, input).unwrap();
    let lm = model.network.lm_head(&mut tape, pass.final_states).unwrap();
    let emo = model.network.emotion_head(&mut tape, pass.final_states, input).unwrap();
    let mut out = tape.value(lm).data().to_vec();
    out.extend_from_slice(tape.value(emo).data());
    out
}

#[test]
fn criterion_6_fusion_invariants() {
    let config = EmoTerConfig {
        intensity: 0.0,
        ..tiny_config()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut blind = true;
    for seed in 0..5 {
        let model = EmoTer::new(config.clone(), seed).unwrap();
        let a = random_input(&config, &mut rng);
        let reference = all_logits(&model, &a);
        for _ in 0..5 {
            let mut b = a.clone();
            b.emotions = random_input(&config, &mut rng).emotions;
            let other = all_logits(&model, &b);
            blind &= reference.iter().zip(&other).all(|(x, y)| x.to_bits() == y.to_bits());
        }
    }

    let model = EmoTer::new(tiny_config(), 7).unwrap();
    let input = random_input(&tiny_config(), &mut rng);
    let mut tape = Tape::new(&model.params);
    let e = model.network.encode_emotion(&mut tape, &input).unwrap();
    let c = model.network.encode_context(&mut tape, &input).unwrap();
    let base = fuse(&mut tape, e, c, 0.0).unwrap();
    let unit = fuse(&mut tape, e, c, 1.0).unwrap();
    let mut worst = 0.0f64;
    for a in [0.25, 0.5, 2.0, 3.7, -1.5] {
        let scaled = fuse(&mut tape, e, c, a).unwrap();
        let (f0, f1, fa) = (tape.value(base), tape.value(unit), tape.value(scaled));
        for k in 0..f0.numel() {
            let lhs = fa.data()[k] - f0.data()[k];
            let rhs = a * (f1.data()[k] - f0.data()[k]);
            worst = worst.max((lhs - rhs).abs());
        }
    }
    verdict(
        6,
        "fusion invariants",
        blind && worst < 1e-12,
        &format!("intensity 0 logits bitwise unchanged: {blind}; affine residual {worst:.1e}"),
    );
}

const SKEWED: [f64; 6] = [0.6, 0.05, 0.1, 0.1, 0.05, 0.1];

/// L1 distance, in percentage points, between the generated and reference
/// emotion distributions on the test split.
fn emotion_gap(records: &[Record], seed: u64, c2: f64) -> f64 {
    let lex = Lexicon::fixture();
    let split = split_dataset(records, seed).unwrap();
    let data = prepare_data(&split.train, &split.valid, &split.test, &lex, 32).unwrap();
    let template = EmoTerConfig {
        c2,
        ..EmoTerConfig::desk(0, 0, 0)
    };
    let train_cfg = TrainConfig {
        max_epochs: 30,
        seed,
        ..TrainConfig::desk()
    };
    let (model, _) = train(&template, &train_cfg, &data, &lex).unwrap();
    let (_, report) = evaluate_generation(&model, &data.vocab, &lex, &data.test_records, None).unwrap();
    let a = &report.emotion;
    a.generated
        .iter()
        .zip(&a.ground_truth)
        .map(|(g, t)| (g - t).abs())
        .sum()
}

#[test]
fn criterion_7_directional_debiasing() {
    let mut with_loss = Vec::new();
    let mut without = Vec::new();
    for seed in 0..3u64 {
        let records = generate_synthetic_corpus(&SyntheticSpec::desk(20, 20, 400, SKEWED), 70 + seed).unwrap();
        with_loss.push(emotion_gap(&records, seed, 1.0));
        without.push(emotion_gap(&records, seed, 0.0));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let strictly = with_loss.iter().zip(&without).filter(|(a, b)| a < b).count();
    let pass = mean(&with_loss) <= mean(&without) && strictly >= 2;
    verdict(
        7,
        "directional debiasing",
        pass,
        &format!(
            "L1 gap with L_emo {with_loss:.1?} (mean {:.1}), without {without:.1?} (mean {:.1}); strictly smaller in {strictly}/3",
            mean(&with_loss),
            mean(&without)
        ),
    );
}

fn emoter(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_emoter"))
        .args(args)
        .output()
        .expect("run emoter")
}

fn run_ok(args: &[&str]) {
    let out = emoter(args);
    assert!(
        out.status.success(),
        "emoter {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small corpus written by `synth`, shared by the CLI criteria.
fn small_corpus(dir: &Path) -> PathBuf {
    let out = dir.join("synth");
    run_ok(&[
        "synth",
        "--out",
        s(&out),
        "--seed",
        "8",
        "--set",
        "synth_users=8",
        "--set",
        "synth_items=8",
        "--set",
        "synth_records=64",
    ]);
    out.join("records.jsonl")
}

#[test]
fn criterion_8_ablation_grid() {
    let dir = tempfile::tempdir().unwrap();
    let records = small_corpus(dir.path());
    let out = dir.path().join("ablate");
    run_ok(&[
        "ablate",
        "--records",
        s(&records),
        "--out",
        s(&out),
        "--set",
        "max_epochs=2",
        "--set",
        "embed_dim=16",
        "--set",
        "ffn_dim=32",
    ]);
    let cells: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    let table = std::fs::read_to_string(out.join("ablation.txt")).unwrap();
    let mut seen = BTreeMap::new();
    let mut populated = true;
    for cell in &cells {
        let key = (
            cell["setting"].as_str().unwrap_or("").to_string(),
            cell["intensity"].to_string(),
        );
        *seen.entry(key).or_insert(0) += 1;
        let r = &cell["report"];
        for field in ["bleu1", "bleu4", "usr", "fmr", "fcr", "div"] {
            populated &= r[field].as_f64().is_some_and(f64::is_finite);
        }
        for field in ["rouge1", "rouge2"] {
            for part in ["precision", "recall", "f1"] {
                populated &= r[field][part].as_f64().is_some_and(f64::is_finite);
            }
        }
    }
    let rows = table.lines().filter(|l| l.contains(" i=")).count();
    let pass = cells.len() == 9 && seen.len() == 9 && rows == 9 && populated;
    verdict(
        8,
        "ablation harness",
        pass,
        &format!(
            "{} cells, {} distinct (setting, intensity), {rows} table rows, all columns populated: {populated}",
            cells.len(),
            seen.len()
        ),
    );
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Outputs of a run, with the resolved config's `out=` line dropped.
fn artifacts(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = files_under(root);
    for (path, bytes) in files.iter_mut() {
        if path.extension().is_some_and(|e| e == "cfg") && path.parent() == Some(Path::new("")) {
            let text = String::from_utf8(bytes.clone()).unwrap();
            *bytes = text
                .lines()
                .filter(|l| !l.starts_with("out="))
                .collect::<Vec<_>>()
                .join("\n")
                .into_bytes();
        }
    }
    files
}

#[test]
fn criterion_9_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let records = small_corpus(dir.path());
    let small = ["--set", "max_epochs=3", "--set", "embed_dim=16", "--set", "ffn_dim=32"];
    let first = dir.path().join("first");
    let p = first.join("prepare");
    let t = first.join("train");
    run_ok(&["prepare", "--records", s(&records), "--out", s(&p)]);
    run_ok(&[&["train", "--data", s(&p), "--out", s(&t)][..], &small].concat());
    let test = p.join("test.jsonl");
    let generated = t.join("generated.jsonl");
    run_ok(&[
        "generate",
        "--model",
        s(&t.join("model")),
        "--records",
        s(&test),
        "--emotion",
        "happy",
        "--out",
        s(&first.join("generate")),
    ]);
    run_ok(&[
        "evaluate",
        "--records",
        s(&test),
        "--generated",
        s(&generated),
        "--out",
        s(&first.join("evaluate")),
    ]);
    run_ok(&[
        "audit",
        "--records",
        s(&test),
        "--generated",
        s(&first.join("generate/generated.jsonl")),
        "--baseline",
        s(&generated),
        "--out",
        s(&first.join("audit")),
    ]);
    run_ok(&[
        "gradcheck",
        "--set",
        "embed_dim=8",
        "--set",
        "ffn_dim=16",
        "--out",
        s(&first.join("gradcheck")),
    ]);

    let mut compared = 0;
    let mut differing = Vec::new();
    for command in ["prepare", "train", "generate", "evaluate", "audit", "gradcheck"] {
        let a = first.join(command);
        let b = dir.path().join("second").join(command);
        let cfg = a.join(format!("{command}.cfg"));
        run_ok(&[command, "--config", s(&cfg), "--out", s(&b)]);
        let (fa, fb) = (artifacts(&a), artifacts(&b));
        if fa.keys().ne(fb.keys()) {
            differing.push(format!("{command}: file sets differ"));
        }
        for (path, bytes) in &fa {
            compared += 1;
            if fb.get(path) != Some(bytes) {
                differing.push(format!("{command}/{}", path.display()));
            }
        }
    }
    verdict(
        9,
        "determinism",
        differing.is_empty(),
        &format!("{compared} artifacts from 6 commands rerun from their resolved configs; differing: {differing:?}"),
    );
}
