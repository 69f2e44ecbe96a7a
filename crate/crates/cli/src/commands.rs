use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::Serialize;

use emoter_core::corpus::{
    corpus_stats, generate_synthetic_corpus, load_records, save_records, split_dataset, tag_records, Record,
    SyntheticSpec, Vocabulary,
};
use emoter_core::generator::{
    batch_generate, load_generations, save_generations, GeneratedExplanation, GenerationQuery,
};
use emoter_core::lexicon::{load_lexicon, Lexicon};
use emoter_core::metrics::{
    debiasing_scores, emotion_audit, evaluate, EvaluationPair, EvaluationReport, TABLE_COLUMNS,
};
use emoter_core::model::{check_gradients, EmoTer, EmoTerConfig};
use emoter_core::trainer::{
    ablation_grid, evaluate_generation, format_ablation, prepare_data, train_with_progress, PreparedData,
};
use emoter_core::{corpus::tokenize, Error};

use crate::config::RunConfig;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_THRESHOLD: i32 = 4;

pub const GRADCHECK_THRESHOLD: f64 = 1e-3;

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite(_) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<String> for Failure {
    fn from(message: String) -> Self {
        Failure::usage(message)
    }
}

type Outcome = Result<(), Failure>;

const LOCK_FILE: &str = ".emoter.lock";

/// Exclusive claim on an output directory, released on drop.
pub struct OutputDir {
    path: PathBuf,
}

impl OutputDir {
    pub fn claim(path: &Path) -> Result<Self, Failure> {
        std::fs::create_dir_all(path).map_err(|e| Failure::usage(format!("cannot create {}: {e}", path.display())))?;
        let lock = path.join(LOCK_FILE);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| {
                Failure::usage(format!(
                    "cannot lock {} ({e}); another run may be writing there. Remove the lock file if it is stale.",
                    lock.display()
                ))
            })?;
        Ok(OutputDir {
            path: path.to_path_buf(),
        })
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(self.path.join(LOCK_FILE));
    }
}

fn write_text(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::usage(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let file = File::open(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_reader(file).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn start(cfg: &RunConfig, command: &str) -> Result<OutputDir, Failure> {
    let out = OutputDir::claim(&cfg.require_path("out")?)?;
    write_text(&out.join(&format!("{command}.cfg")), &cfg.to_kv())?;
    Ok(out)
}

fn lexicon(cfg: &RunConfig) -> Result<Lexicon, Failure> {
    match cfg.path("lexicon") {
        Some(p) => Ok(load_lexicon(&p)?),
        None => Ok(Lexicon::fixture()),
    }
}

fn records(cfg: &RunConfig) -> Result<Vec<Record>, Failure> {
    Ok(load_records(&cfg.require_path("records")?)?)
}

pub fn synth(cfg: &RunConfig) -> Outcome {
    let spec = SyntheticSpec::desk(
        cfg.get("synth_users")?,
        cfg.get("synth_items")?,
        cfg.get("synth_records")?,
        cfg.distribution()?,
    );
    let records = generate_synthetic_corpus(&spec, cfg.get("seed")?)?;
    let out = start(cfg, "synth")?;
    save_records(&out.join("records.jsonl"), &records)?;
    println!(
        "wrote {} records to {}",
        records.len(),
        out.join("records.jsonl").display()
    );
    Ok(())
}

pub fn format_stats(records: &[Record]) -> String {
    let s = corpus_stats(records);
    format!(
        "#users                 {}\n#items                 {}\n#features              {}\n#records               {}\nwords/explanation      {:.2}\n",
        s.users, s.items, s.features, s.records, s.words_per_explanation
    )
}

pub fn prepare(cfg: &RunConfig) -> Outcome {
    let lex = lexicon(cfg)?;
    let mut records = records(cfg)?;
    tag_records(&mut records, &lex);
    let split = split_dataset(&records, cfg.get("seed")?)?;
    let data = prepare_data(&split.train, &split.valid, &split.test, &lex, cfg.get("max_len")?)?;
    let out = start(cfg, "prepare")?;
    save_records(&out.join("train.jsonl"), &data.train_records)?;
    save_records(&out.join("valid.jsonl"), &data.valid_records)?;
    save_records(&out.join("test.jsonl"), &data.test_records)?;
    write_json(&out.join("vocab.json"), &data.vocab)?;
    write_json(&out.join("stats.json"), &corpus_stats(&records))?;
    print!("{}", format_stats(&records));
    println!(
        "split                  {}/{}/{}",
        data.train_records.len(),
        data.valid_records.len(),
        data.test_records.len()
    );
    Ok(())
}

/// Prepared splits from `data`, or a fresh split of `records` with `seed`.
fn load_data(cfg: &RunConfig, lex: &Lexicon, seed: u64) -> Result<PreparedData, Failure> {
    let max_len = cfg.get("max_len")?;
    if let Some(dir) = cfg.path("data") {
        let load = |name: &str| load_records(&dir.join(name));
        return Ok(prepare_data(
            &load("train.jsonl")?,
            &load("valid.jsonl")?,
            &load("test.jsonl")?,
            lex,
            max_len,
        )?);
    }
    let split = split_dataset(&records(cfg)?, seed)?;
    Ok(prepare_data(&split.train, &split.valid, &split.test, lex, max_len)?)
}

fn save_model(dir: &Path, model: &EmoTer, vocab: &Vocabulary) -> Outcome {
    model.save(dir)?;
    write_json(&dir.join("vocab.json"), vocab)
}

fn load_model(dir: &Path) -> Result<(EmoTer, Vocabulary), Failure> {
    let model = EmoTer::load(dir)?;
    let vocab: Vocabulary = read_json(&dir.join("vocab.json"))?;
    let c = model.config();
    if (c.vocab_size, c.num_users, c.num_items) != (vocab.len(), vocab.num_users(), vocab.num_items()) {
        return Err(Failure::usage(format!(
            "{}: vocabulary does not match the checkpoint",
            dir.display()
        )));
    }
    Ok((model, vocab))
}

fn report_files(dir: &Path, label: &str, report: &EvaluationReport) -> Outcome {
    write_json(&dir.join("report.json"), report)?;
    write_text(
        &dir.join("report.txt"),
        &EvaluationReport::format_table(&[(label.to_string(), report)]),
    )
}

/// One full train-generate-evaluate run into `dir`.
fn train_once(cfg: &RunConfig, lex: &Lexicon, seed: u64, dir: &Path) -> Result<EvaluationReport, Failure> {
    let data = load_data(cfg, lex, seed)?;
    let template: EmoTerConfig = cfg.model_template()?;
    let mut train_cfg = cfg.train_config()?;
    train_cfg.seed = seed;
    let (model, history) = train_with_progress(&template, &train_cfg, &data, lex, |e| {
        let valid = e.valid.map_or_else(String::new, |v| format!(" valid {:.4}", v.total));
        eprintln!("epoch {:>3}  train {:.4}{valid}", e.epoch, e.train.total);
    })?;
    std::fs::create_dir_all(dir).map_err(|e| Failure::usage(format!("cannot create {}: {e}", dir.display())))?;
    save_model(&dir.join("model"), &model, &data.vocab)?;
    write_json(&dir.join("history.json"), &history)?;
    let (rows, report) = evaluate_generation(&model, &data.vocab, lex, &data.test_records, cfg.emotion()?)?;
    save_generations(&dir.join("generated.jsonl"), &rows)?;
    report_files(dir, "test", &report)?;
    Ok(report)
}

pub fn train(cfg: &RunConfig) -> Outcome {
    let lex = lexicon(cfg)?;
    let splits: usize = cfg.get("splits")?;
    if splits == 0 {
        return Err(Failure::usage("splits must be at least 1"));
    }
    if splits > 1 && cfg.path("data").is_some() {
        return Err(Failure::usage(
            "--splits needs raw --records; prepared data holds a single split",
        ));
    }
    let seed: u64 = cfg.get("seed")?;
    let out = start(cfg, "train")?;
    if splits == 1 {
        let report = train_once(cfg, &lex, seed, &out.path)?;
        print!("{}", EvaluationReport::format_table(&[("test".to_string(), &report)]));
        return Ok(());
    }
    let mut reports = Vec::with_capacity(splits);
    for k in 0..splits as u64 {
        let dir = out.join(&format!("split-{k}"));
        reports.push(train_once(cfg, &lex, seed + k, &dir)?);
    }
    let mut mean = BTreeMap::new();
    for (c, col) in TABLE_COLUMNS.iter().enumerate() {
        let m = reports.iter().map(|r| r.table_values()[c]).sum::<f64>() / splits as f64;
        mean.insert(col.to_string(), m);
    }
    write_json(&out.join("summary.json"), &mean)?;
    let rows: Vec<(String, &EvaluationReport)> = reports
        .iter()
        .enumerate()
        .map(|(k, r)| (format!("split-{k}"), r))
        .collect();
    let table = EvaluationReport::format_table(&rows);
    write_text(&out.join("summary.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn generate(cfg: &RunConfig) -> Outcome {
    let lex = lexicon(cfg)?;
    let (model, vocab) = load_model(&cfg.require_path("model")?)?;
    let mut records = records(cfg)?;
    tag_records(&mut records, &lex);
    let emotion = cfg.emotion()?;
    let queries = records
        .iter()
        .map(|r| GenerationQuery::from_record(r, emotion))
        .collect::<Result<Vec<_>, _>>()?;
    let out = start(cfg, "generate")?;
    let mut rows = Vec::with_capacity(queries.len());
    let mut failed = 0;
    for (q, res) in queries.iter().zip(batch_generate(&model, &vocab, &lex, &queries)) {
        match res {
            Ok(tokens) => rows.push(GeneratedExplanation::new(q, &tokens)),
            Err(e) => {
                failed += 1;
                eprintln!("skipping ({}, {}): {e}", q.user, q.item);
            }
        }
    }
    save_generations(&out.join("generated.jsonl"), &rows)?;
    println!("generated {} explanations ({failed} failed)", rows.len());
    if failed > 0 {
        return Err(Failure::usage(format!("{failed} queries failed")));
    }
    Ok(())
}

/// References and generations aligned line by line.
fn aligned(cfg: &RunConfig, key: &str) -> Result<(Vec<Record>, Vec<GeneratedExplanation>), Failure> {
    let refs = records(cfg)?;
    let path = cfg.require_path(key)?;
    let gens = load_generations(&path)?;
    if refs.len() != gens.len() {
        return Err(Failure::usage(format!(
            "{} has {} lines but the records file has {}",
            path.display(),
            gens.len(),
            refs.len()
        )));
    }
    for (k, (r, g)) in refs.iter().zip(&gens).enumerate() {
        if r.user != g.user || r.item != g.item {
            return Err(Failure::usage(format!(
                "line {}: generated ({}, {}) does not match record ({}, {})",
                k + 1,
                g.user,
                g.item,
                r.user,
                r.item
            )));
        }
    }
    Ok((refs, gens))
}

pub fn evaluate_cmd(cfg: &RunConfig) -> Outcome {
    let lex = lexicon(cfg)?;
    let (refs, gens) = aligned(cfg, "generated")?;
    let pairs: Vec<EvaluationPair> = refs
        .iter()
        .zip(&gens)
        .map(|(r, g)| EvaluationPair {
            reference: r.tokens(),
            hypothesis: tokenize(&g.explanation),
            features: r.features.clone(),
        })
        .collect();
    let report = evaluate(&pairs, &lex)?;
    let out = start(cfg, "evaluate")?;
    report_files(&out.path, "generated", &report)?;
    print!(
        "{}",
        EvaluationReport::format_table(&[("generated".to_string(), &report)])
    );
    Ok(())
}

pub fn audit(cfg: &RunConfig) -> Outcome {
    let lex = lexicon(cfg)?;
    let (refs, gens) = aligned(cfg, "generated")?;
    let truth: Vec<Vec<String>> = refs.iter().map(Record::tokens).collect();
    let texts = |gs: &[GeneratedExplanation]| gs.iter().map(|g| tokenize(&g.explanation)).collect::<Vec<_>>();
    let ours = emotion_audit(&truth, &texts(&gens), &lex)?;
    let debiasing = match cfg.path("baseline") {
        Some(_) => {
            let (_, base) = aligned(cfg, "baseline")?;
            let base = emotion_audit(&truth, &texts(&base), &lex)?;
            Some(debiasing_scores(&base, &ours))
        }
        None => None,
    };
    #[derive(Serialize)]
    struct AuditFile<'a> {
        categories: Vec<&'static str>,
        audit: &'a emoter_core::metrics::EmotionAudit,
        debiasing: Option<[Option<f64>; 6]>,
    }
    let out = start(cfg, "audit")?;
    let file = AuditFile {
        categories: emoter_core::lexicon::EmotionCategory::ALL
            .iter()
            .map(|c| c.name())
            .collect(),
        audit: &ours,
        debiasing,
    };
    write_json(&out.join("audit.json"), &file)?;
    let mut text = format!(
        "{:<10} {:>8} {:>8} {:>8} {:>10}\n",
        "emotion", "truth%", "gen%", "bias", "debiasing"
    );
    for c in emoter_core::lexicon::EmotionCategory::ALL {
        let k = c.index();
        let d = debiasing
            .and_then(|d| d[k])
            .map_or_else(|| "-".to_string(), |v| format!("{:.1}", v + 0.0));
        text.push_str(&format!(
            "{:<10} {:>8.1} {:>8.1} {:>+8.1} {:>10}\n",
            c.name(),
            ours.ground_truth[k],
            ours.generated[k],
            ours.bias[k],
            d
        ));
    }
    write_text(&out.join("audit.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn ablate(cfg: &RunConfig) -> Outcome {
    let lex = lexicon(cfg)?;
    let seed: u64 = cfg.get("seed")?;
    let data = load_data(cfg, &lex, seed)?;
    let cells = ablation_grid(&cfg.model_template()?, &cfg.train_config()?, &data, &lex)?;
    let out = start(cfg, "ablate")?;
    write_json(&out.join("ablation.json"), &cells)?;
    let table = format_ablation(&cells);
    write_text(&out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig) -> Outcome {
    let config = EmoTerConfig {
        vocab_size: 20,
        num_users: 3,
        num_items: 3,
        max_len: 8,
        ..cfg.model_template()?
    };
    let coords: usize = cfg.get("gradcheck_coords")?;
    let epsilon: f64 = cfg.get("gradcheck_epsilon")?;
    let report = check_gradients(&config, cfg.get("seed")?, coords, epsilon)?;
    let out = start(cfg, "gradcheck")?;
    #[derive(Serialize)]
    struct GradcheckFile<'a> {
        max_relative_error: f64,
        checked: usize,
        skipped_kinks: usize,
        worst: &'a Option<(String, usize)>,
        threshold: f64,
        passed: bool,
    }
    let passed = report.max_relative_error < GRADCHECK_THRESHOLD;
    write_json(
        &out.join("gradcheck.json"),
        &GradcheckFile {
            max_relative_error: report.max_relative_error,
            checked: report.checked,
            skipped_kinks: report.skipped_kinks,
            worst: &report.worst,
            threshold: GRADCHECK_THRESHOLD,
            passed,
        },
    )?;
    println!(
        "max relative error {:.3e} over {} coordinates ({} skipped near kinks)",
        report.max_relative_error, report.checked, report.skipped_kinks
    );
    if !passed {
        return Err(Failure {
            code: EXIT_THRESHOLD,
            message: format!(
                "gradient check failed: {:.3e} >= {GRADCHECK_THRESHOLD:e}",
                report.max_relative_error
            ),
        });
    }
    Ok(())
}
