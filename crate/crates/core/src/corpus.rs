//! Explanation records: loading, tokenization, vocabulary, encoding,
//! train/valid/test splitting, and synthetic corpora.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::{EmotionCategory, Lexicon};

/// Non-special vocabulary size cap.
pub const MAX_VOCAB_WORDS: usize = 20_000;
/// Default cap on explanation tokens per encoded example.
pub const TEXT_BUDGET: usize = 20;
pub const DEFAULT_MAX_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub user: String,
    pub item: String,
    pub features: Vec<String>,
    pub explanation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion: Option<EmotionCategory>,
}

impl Record {
    pub fn tokens(&self) -> Vec<String> {
        tokenize(&self.explanation)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.features.is_empty() {
            return Err("record has no features".into());
        }
        if self.features.iter().any(|f| normalize_feature(f).is_empty()) {
            return Err("record has a blank feature".into());
        }
        if tokenize(&self.explanation).is_empty() {
            return Err("explanation has no tokens".into());
        }
        Ok(())
    }
}

/// Lowercases, detaches every non-alphanumeric character into its own
/// token, and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Features occupy one position each, so they are kept whole.
pub fn normalize_feature(feature: &str) -> String {
    feature.trim().to_lowercase()
}

pub fn parse_records<R: BufRead>(reader: R, source: &Path) -> Result<Vec<Record>> {
    let mut records = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: source.to_path_buf(),
            line: n + 1,
            message,
        };
        let record: Record = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        record.validate().map_err(err)?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::Empty(format!("record file {}", source.display())));
    }
    Ok(records)
}

pub fn load_records(path: &Path) -> Result<Vec<Record>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_records(BufReader::new(file), path)
}

pub fn write_records<W: Write>(records: &[Record], mut w: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn save_records(path: &Path, records: &[Record]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_records(records, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Record>,
    pub valid: Vec<Record>,
    pub test: Vec<Record>,
    pub seed: u64,
}

/// Random 8:1:1 split in which every user and item keeps at least one
/// training record.
///
/// Records are visited in a seeded random order; the first record seen for a
/// not-yet-covered user or item is pinned to train. The remaining records
/// fill validation and test, and everything left over goes to train. Each
/// split keeps the input order.
pub fn split_dataset(records: &[Record], seed: u64) -> Result<DatasetSplit> {
    let n = records.len();
    if n < 10 {
        return Err(Error::InvalidArgument(format!(
            "need at least 10 records to split, got {n}"
        )));
    }
    let n_holdout = (n as f64 * 0.1).round() as usize;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut users = HashSet::new();
    let mut items = HashSet::new();
    let mut pinned = vec![false; n];
    let mut last_pinned = None;
    for &i in &order {
        let r = &records[i];
        let new_user = users.insert(r.user.as_str());
        let new_item = items.insert(r.item.as_str());
        if new_user || new_item {
            pinned[i] = true;
            last_pinned = Some(if new_user { &r.user } else { &r.item });
        }
    }

    let mut assignment = vec![0u8; n]; // 0 train, 1 valid, 2 test
    let (mut n_valid, mut n_test) = (0, 0);
    for &i in order.iter().filter(|&&i| !pinned[i]) {
        if n_valid < n_holdout {
            assignment[i] = 1;
            n_valid += 1;
        } else if n_test < n_holdout {
            assignment[i] = 2;
            n_test += 1;
        }
    }
    if n_valid == 0 || n_test == 0 {
        return Err(Error::InvalidArgument(format!(
            "user/item coverage leaves no records for validation or test (last pinned id '{}')",
            last_pinned.map_or("", String::as_str)
        )));
    }

    let mut split = DatasetSplit {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for (r, a) in records.iter().zip(assignment) {
        match a {
            0 => split.train.push(r.clone()),
            1 => split.valid.push(r.clone()),
            _ => split.test.push(r.clone()),
        }
    }
    Ok(split)
}

/// Token, user, and item tables. Ids are dense from zero; the first ten
/// token ids are reserved for the special tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    users: Vec<String>,
    items: Vec<String>,
    token_index: HashMap<String, usize>,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    tokens: Vec<String>,
    users: Vec<String>,
    items: Vec<String>,
}

impl From<VocabularyRepr> for Vocabulary {
    fn from(r: VocabularyRepr) -> Self {
        Vocabulary::from_tables(r.tokens, r.users, r.items)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            tokens: v.tokens,
            users: v.users,
            items: v.items,
        }
    }
}

fn index_of(table: &[String]) -> HashMap<String, usize> {
    table.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect()
}

impl Vocabulary {
    pub const BOS: usize = 0;
    pub const EOS: usize = 1;
    pub const PAD: usize = 2;
    pub const UNK: usize = 3;
    pub const NUM_SPECIAL: usize = 10;
    pub const SPECIAL_TOKENS: [&'static str; 10] = [
        "<bos>",
        "<eos>",
        "<pad>",
        "<unk>",
        "<happy>",
        "<angry>",
        "<surprise>",
        "<sad>",
        "<fear>",
        "<neutral>",
    ];

    fn from_tables(tokens: Vec<String>, users: Vec<String>, items: Vec<String>) -> Self {
        Vocabulary {
            token_index: index_of(&tokens),
            user_index: index_of(&users),
            item_index: index_of(&items),
            tokens,
            users,
            items,
        }
    }

    pub fn emotion_token(category: EmotionCategory) -> usize {
        4 + category.index()
    }

    pub fn is_special(id: usize) -> bool {
        id < Self::NUM_SPECIAL
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_words(&self) -> usize {
        self.tokens.len() - Self::NUM_SPECIAL
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    /// Token id, falling back to `<unk>`.
    pub fn token_id(&self, token: &str) -> usize {
        self.token_index.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.token_index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn user_id(&self, user: &str) -> Result<usize> {
        self.user_index.get(user).copied().ok_or_else(|| Error::UnknownId {
            kind: "user",
            id: user.to_string(),
        })
    }

    pub fn item_id(&self, item: &str) -> Result<usize> {
        self.item_index.get(item).copied().ok_or_else(|| Error::UnknownId {
            kind: "item",
            id: item.to_string(),
        })
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or("<unk>").to_string())
            .collect()
    }
}

pub fn build_vocabulary(train: &[Record]) -> Result<Vocabulary> {
    build_vocabulary_with_limit(train, MAX_VOCAB_WORDS)
}

/// Keeps the `limit` most frequent explanation and feature tokens; ties
/// are broken lexicographically.
pub fn build_vocabulary_with_limit(train: &[Record], limit: usize) -> Result<Vocabulary> {
    if train.is_empty() {
        return Err(Error::Empty("training records".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut users = BTreeSet::new();
    let mut items = BTreeSet::new();
    for r in train {
        for t in tokenize(&r.explanation) {
            *counts.entry(t).or_default() += 1;
        }
        for f in &r.features {
            *counts.entry(normalize_feature(f)).or_default() += 1;
        }
        users.insert(r.user.clone());
        items.insert(r.item.clone());
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(limit);

    let tokens = Vocabulary::SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _)| t))
        .collect();
    Ok(Vocabulary::from_tables(
        tokens,
        users.into_iter().collect(),
        items.into_iter().collect(),
    ))
}

/// One record laid out as `[u, i, f_1..f_F, <tag>, <bos>, e_1..e_E, <eos>]`
/// and padded to `max_len`.
///
/// Position 0 holds the user-table id and position 1 the item-table id; all
/// later positions hold token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    pub ids: Vec<usize>,
    pub emotion_target: EmotionCategory,
    /// Positions before `<bos>`: user, item, features, and the tag.
    pub prefix_len: usize,
    pub text_len: usize,
    /// Surface forms of the features and (truncated) explanation words.
    pub feature_words: Vec<String>,
    pub text_words: Vec<String>,
}

impl EncodedExample {
    pub fn tag_position(&self) -> usize {
        self.prefix_len - 1
    }

    pub fn bos_position(&self) -> usize {
        self.prefix_len
    }

    /// Positions up to and including `<eos>`.
    pub fn active_len(&self) -> usize {
        self.prefix_len + self.text_len + 2
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    pub fn text_ids(&self) -> &[usize] {
        &self.ids[self.prefix_len + 1..self.prefix_len + 1 + self.text_len]
    }
}

pub fn encode_example(record: &Record, vocab: &Vocabulary, max_len: usize) -> Result<EncodedExample> {
    let tag = record.emotion.ok_or_else(|| {
        Error::InvalidArgument(format!(
            "record ({}, {}) has no emotion tag; classify it first",
            record.user, record.item
        ))
    })?;
    let prefix_len = 3 + record.features.len();
    if prefix_len + 3 > max_len {
        return Err(Error::InvalidArgument(format!(
            "max_len {max_len} cannot hold a prefix of {prefix_len} plus <bos>, one token, and <eos>"
        )));
    }
    let budget = TEXT_BUDGET.min(max_len - prefix_len - 2);
    let mut text_words = tokenize(&record.explanation);
    text_words.truncate(budget);
    let feature_words: Vec<String> = record.features.iter().map(|f| normalize_feature(f)).collect();

    let mut ids = Vec::with_capacity(max_len);
    ids.push(vocab.user_id(&record.user)?);
    ids.push(vocab.item_id(&record.item)?);
    ids.extend(feature_words.iter().map(|f| vocab.token_id(f)));
    ids.push(Vocabulary::emotion_token(tag));
    ids.push(Vocabulary::BOS);
    ids.extend(text_words.iter().map(|w| vocab.token_id(w)));
    ids.push(Vocabulary::EOS);
    ids.resize(max_len, Vocabulary::PAD);

    Ok(EncodedExample {
        ids,
        emotion_target: tag,
        prefix_len,
        text_len: text_words.len(),
        feature_words,
        text_words,
    })
}

/// Entity counts and per-record averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub users: usize,
    pub items: usize,
    pub features: usize,
    pub records: usize,
    pub records_per_user: f64,
    pub records_per_item: f64,
    pub words_per_explanation: f64,
}

pub fn corpus_stats(records: &[Record]) -> CorpusStats {
    let users: HashSet<&str> = records.iter().map(|r| r.user.as_str()).collect();
    let items: HashSet<&str> = records.iter().map(|r| r.item.as_str()).collect();
    let features: HashSet<String> = records
        .iter()
        .flat_map(|r| r.features.iter().map(|f| normalize_feature(f)))
        .collect();
    let words: usize = records.iter().map(|r| tokenize(&r.explanation).len()).sum();
    let n = records.len().max(1) as f64;
    CorpusStats {
        users: users.len(),
        items: items.len(),
        features: features.len(),
        records: records.len(),
        records_per_user: records.len() as f64 / users.len().max(1) as f64,
        records_per_item: records.len() as f64 / items.len().max(1) as f64,
        words_per_explanation: words as f64 / n,
    }
}

/// Parameters of a synthetic corpus whose explanation emotions are fixed by
/// construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_records: usize,
    /// Target share per category, in [`EmotionCategory::ALL`] order.
    pub distribution: [f64; 6],
    /// Emotion-bearing words per category. The neutral pool must hold
    /// words the lexicon does not know.
    pub pools: [Vec<String>; 6],
    pub features: Vec<String>,
    pub max_features_per_item: usize,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

impl SyntheticSpec {
    /// Word pools matching the bundled fixture lexicon.
    pub fn desk(n_users: usize, n_items: usize, n_records: usize, distribution: [f64; 6]) -> Self {
        SyntheticSpec {
            n_users,
            n_items,
            n_records,
            distribution,
            pools: [
                words("delightful wonderful lovely joyful pleasant cheerful"),
                words("furious outrageous rude infuriating hostile hateful"),
                words("unexpected astonishing sudden startling stunning astounding"),
                words("gloomy depressing miserable sorrowful dreary heartbreaking"),
                words("scary creepy frightening terrifying dangerous alarming"),
                words("modern standard large small basic typical"),
            ],
            features: words("lobby pool bar breakfast location service bed view parking wifi gym spa"),
            max_features_per_item: 2,
        }
    }
}

/// Splits `n` into per-category counts proportional to `p` (largest
/// remainder, ties to the earlier category).
fn allocate(n: usize, p: &[f64; 6]) -> [usize; 6] {
    let raw = p.map(|x| x * n as f64);
    let mut counts = raw.map(|x| x.floor() as usize);
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..6).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

pub fn generate_synthetic_corpus(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Record>> {
    let total: f64 = spec.distribution.iter().sum();
    if (total - 1.0).abs() > 1e-9 || spec.distribution.iter().any(|&p| p < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "emotion distribution must be non-negative and sum to 1, got {:?}",
            spec.distribution
        )));
    }
    if spec.n_records == 0 {
        return Ok(Vec::new());
    }
    if spec.n_users == 0 || spec.n_items == 0 || spec.features.is_empty() {
        return Err(Error::InvalidArgument(
            "synthetic corpus needs users, items, and features".into(),
        ));
    }
    for (c, pool) in EmotionCategory::ALL.iter().zip(&spec.pools) {
        if pool.is_empty() && spec.distribution[c.index()] > 0.0 {
            return Err(Error::InvalidArgument(format!("empty word pool for {c}")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_feats = spec.max_features_per_item.clamp(1, spec.features.len());
    let item_features: Vec<Vec<String>> = (0..spec.n_items)
        .map(|_| {
            let k = rng.gen_range(1..=max_feats);
            spec.features.choose_multiple(&mut rng, k).cloned().collect()
        })
        .collect();

    let mut tags: Vec<EmotionCategory> = allocate(spec.n_records, &spec.distribution)
        .iter()
        .enumerate()
        .flat_map(|(i, &c)| std::iter::repeat_n(EmotionCategory::ALL[i], c))
        .collect();
    tags.shuffle(&mut rng);

    let distinct = spec.n_records <= spec.n_users * spec.n_items;
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(spec.n_records);
    for tag in tags {
        let (u, i) = loop {
            let pair = (rng.gen_range(0..spec.n_users), rng.gen_range(0..spec.n_items));
            if !distinct || seen.insert(pair) {
                break pair;
            }
        };
        let features = item_features[i].clone();
        let feature = features.choose(&mut rng).unwrap();
        let pool = &spec.pools[tag.index()];
        let a = pool.choose(&mut rng).unwrap();
        let b = pool.choose(&mut rng).unwrap();
        let explanation = match rng.gen_range(0..3) {
            0 => format!("the {feature} was {a} and {b}"),
            1 => format!("{a} {feature} and {b} atmosphere"),
            _ => format!("a {a} {feature}"),
        };
        records.push(Record {
            user: format!("u{u}"),
            item: format!("i{i}"),
            features,
            explanation,
            emotion: Some(tag),
        });
    }
    Ok(records)
}

/// Fills missing emotion tags with the lexicon classifier's verdict.
pub fn tag_records(records: &mut [Record], lexicon: &Lexicon) {
    for r in records.iter_mut().filter(|r| r.emotion.is_none()) {
        r.emotion = Some(lexicon.classify(&r.tokens()));
    }
}

/// Counts of each category among tagged records.
pub fn tag_counts(records: &[Record]) -> BTreeMap<EmotionCategory, usize> {
    let mut m = BTreeMap::new();
    for r in records {
        if let Some(t) = r.emotion {
            *m.entry(t).or_default() += 1;
        }
    }
    m
}
