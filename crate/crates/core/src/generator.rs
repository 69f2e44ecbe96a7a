//! Greedy explanation decoding.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_feature, EncodedExample, Record, Vocabulary, TEXT_BUDGET};
use crate::error::{Error, Result};
use crate::lexicon::{EmotionCategory, Lexicon};
use crate::model::{EmoTer, ModelInput};

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationQuery {
    pub user: String,
    pub item: String,
    pub features: Vec<String>,
    pub emotion: EmotionCategory,
    pub max_tokens: usize,
}

impl GenerationQuery {
    pub fn new(
        user: impl Into<String>,
        item: impl Into<String>,
        features: Vec<String>,
        emotion: EmotionCategory,
    ) -> Self {
        GenerationQuery {
            user: user.into(),
            item: item.into(),
            features,
            emotion,
            max_tokens: TEXT_BUDGET,
        }
    }

    /// Query for a record's (user, item, features), using `emotion` or else
    /// the record's own tag.
    pub fn from_record(record: &Record, emotion: Option<EmotionCategory>) -> Result<Self> {
        let emotion = emotion.or(record.emotion).ok_or_else(|| {
            Error::InvalidArgument(format!("record ({}, {}) has no emotion tag", record.user, record.item))
        })?;
        Ok(GenerationQuery::new(
            &record.user,
            &record.item,
            record.features.clone(),
            emotion,
        ))
    }
}

/// `[u, i, f.., <tag>, <bos>]` for a query.
fn encode_prefix(query: &GenerationQuery, vocab: &Vocabulary) -> Result<EncodedExample> {
    if query.features.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "query ({}, {}) has no features",
            query.user, query.item
        )));
    }
    let feature_words: Vec<String> = query.features.iter().map(|f| normalize_feature(f)).collect();
    let mut ids = vec![vocab.user_id(&query.user)?, vocab.item_id(&query.item)?];
    ids.extend(feature_words.iter().map(|f| vocab.token_id(f)));
    ids.push(Vocabulary::emotion_token(query.emotion));
    ids.push(Vocabulary::BOS);
    Ok(EncodedExample {
        prefix_len: ids.len() - 1,
        ids,
        emotion_target: query.emotion,
        text_len: 0,
        feature_words,
        text_words: Vec::new(),
    })
}

/// Index of the largest logit among words and `<eos>`; the lowest id wins
/// ties.
fn argmax_allowed(logits: &[f64]) -> usize {
    let mut best = Vocabulary::EOS;
    for (id, &x) in logits.iter().enumerate() {
        if Vocabulary::is_special(id) && id != Vocabulary::EOS {
            continue;
        }
        if x > logits[best] {
            best = id;
        }
    }
    best
}

/// Greedy decoding until `<eos>`, `max_tokens`, or the model's length limit.
pub fn generate(model: &EmoTer, vocab: &Vocabulary, lexicon: &Lexicon, query: &GenerationQuery) -> Result<Vec<String>> {
    let prefix = encode_prefix(query, vocab)?;
    let room = model.config().max_len.checked_sub(prefix.ids.len()).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "prefix of {} positions exceeds max_len {}",
            prefix.ids.len(),
            model.config().max_len
        ))
    })?;
    let limit = query.max_tokens.min(room);
    let mut generated = Vec::with_capacity(limit);
    while generated.len() < limit {
        let input = ModelInput::for_generation(&prefix, &generated, vocab, lexicon);
        let next = argmax_allowed(&model.next_token_logits(&input)?);
        if next == Vocabulary::EOS {
            break;
        }
        generated.push(next);
    }
    Ok(vocab.decode(&generated))
}

/// Elementwise [`generate`]; one failed query does not stop the rest.
pub fn batch_generate(
    model: &EmoTer,
    vocab: &Vocabulary,
    lexicon: &Lexicon,
    queries: &[GenerationQuery],
) -> Vec<Result<Vec<String>>> {
    queries.iter().map(|q| generate(model, vocab, lexicon, q)).collect()
}

/// One line of a generation output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedExplanation {
    pub user: String,
    pub item: String,
    pub explanation: String,
    pub requested_emotion: EmotionCategory,
}

impl GeneratedExplanation {
    pub fn new(query: &GenerationQuery, tokens: &[String]) -> Self {
        GeneratedExplanation {
            user: query.user.clone(),
            item: query.item.clone(),
            explanation: tokens.join(" "),
            requested_emotion: query.emotion,
        }
    }
}

pub fn write_generations<W: Write>(rows: &[GeneratedExplanation], mut w: W) -> std::io::Result<()> {
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_generations(path: &Path, rows: &[GeneratedExplanation]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_generations(rows, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_generations(path: &Path) -> Result<Vec<GeneratedExplanation>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: k + 1,
            message: e.to_string(),
        })?;
        out.push(row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, encode_example, generate_synthetic_corpus, SyntheticSpec};
    use crate::model::EmoTerConfig;
    use crate::numerics::Sgd;

    fn setup() -> (Vec<Record>, Vocabulary, EmoTer) {
        let spec = SyntheticSpec::desk(3, 3, 12, [0.5, 0.1, 0.1, 0.1, 0.1, 0.1]);
        let records = generate_synthetic_corpus(&spec, 5).unwrap();
        let vocab = build_vocabulary(&records).unwrap();
        let config = EmoTerConfig {
            embed_dim: 8,
            ffn_dim: 16,
            emotion_hidden: 8,
            max_len: 16,
            ..EmoTerConfig::desk(vocab.len(), vocab.num_users(), vocab.num_items())
        };
        let model = EmoTer::new(config, 3).unwrap();
        (records, vocab, model)
    }

    #[test]
    fn argmax_prefers_lowest_id_and_skips_reserved_tokens() {
        let mut logits = vec![0.0; 14];
        logits[Vocabulary::BOS] = 9.0;
        logits[Vocabulary::PAD] = 9.0;
        logits[11] = 2.0;
        logits[13] = 2.0;
        assert_eq!(argmax_allowed(&logits), 11);
        logits[Vocabulary::EOS] = 2.0;
        assert_eq!(argmax_allowed(&logits), Vocabulary::EOS);
    }

    #[test]
    fn output_is_bounded_and_free_of_reserved_tokens() {
        let (records, vocab, model) = setup();
        let lex = Lexicon::fixture();
        for r in &records {
            for max_tokens in [0, 1, 3, 20] {
                let mut q = GenerationQuery::from_record(r, None).unwrap();
                q.max_tokens = max_tokens;
                let out = generate(&model, &vocab, &lex, &q).unwrap();
                assert!(out.len() <= max_tokens);
                assert!(out.iter().all(|t| !Vocabulary::SPECIAL_TOKENS.contains(&t.as_str())));
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_batch_matches_sequential() {
        let (records, vocab, model) = setup();
        let lex = Lexicon::fixture();
        let queries: Vec<_> = records
            .iter()
            .map(|r| GenerationQuery::from_record(r, None).unwrap())
            .collect();
        let batch = batch_generate(&model, &vocab, &lex, &queries);
        for (q, b) in queries.iter().zip(&batch) {
            assert_eq!(b.as_ref().unwrap(), &generate(&model, &vocab, &lex, q).unwrap());
        }
        let single = batch_generate(&model, &vocab, &lex, &queries[..1]);
        assert_eq!(single[0].as_ref().unwrap(), batch[0].as_ref().unwrap());
        let reversed: Vec<_> = queries.iter().rev().cloned().collect();
        let rb = batch_generate(&model, &vocab, &lex, &reversed);
        for (a, b) in rb.iter().zip(batch.iter().rev()) {
            assert_eq!(a.as_ref().unwrap(), b.as_ref().unwrap());
        }
    }

    #[test]
    fn unknown_ids_fail_per_query() {
        let (records, vocab, model) = setup();
        let lex = Lexicon::fixture();
        let good = GenerationQuery::from_record(&records[0], None).unwrap();
        let mut bad = good.clone();
        bad.user = "nobody".into();
        let mut unknown_feature = good.clone();
        unknown_feature.features = vec!["zzzq".into()];
        let out = batch_generate(&model, &vocab, &lex, &[bad, good, unknown_feature]);
        assert!(matches!(out[0], Err(Error::UnknownId { .. })));
        assert!(out[1].is_ok());
        assert!(out[2].is_ok());
    }

    #[test]
    fn overfit_model_reproduces_its_record() {
        let (records, vocab, _) = setup();
        let lex = Lexicon::fixture();
        let r = &records[0];
        let config = EmoTerConfig {
            embed_dim: 16,
            ffn_dim: 32,
            attention_heads: 2,
            max_len: 16,
            ..EmoTerConfig::desk(vocab.len(), vocab.num_users(), vocab.num_items())
        };
        let mut model = EmoTer::new(config, 8).unwrap();
        let ex = encode_example(r, &vocab, 16).unwrap();
        let input = ModelInput::from_example(&ex, &lex, false);
        let sgd = Sgd::new(1.0, 1.0);
        for _ in 0..200 {
            let (_, g) = model.loss_and_gradients(&input).unwrap();
            model.params.accumulate(&g);
            sgd.step(&mut model.params).unwrap();
        }
        let out = generate(&model, &vocab, &lex, &GenerationQuery::from_record(r, None).unwrap()).unwrap();
        assert_eq!(out, r.tokens());
    }

    #[test]
    fn generations_round_trip_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.jsonl");
        let q = GenerationQuery::new("u1", "i2", vec!["pool".into()], EmotionCategory::Sad);
        let rows = vec![GeneratedExplanation::new(
            &q,
            &["a".into(), "gloomy".into(), "pool".into()],
        )];
        save_generations(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"requested_emotion\":\"sad\""));
        assert_eq!(load_generations(&path).unwrap(), rows);
    }
}
