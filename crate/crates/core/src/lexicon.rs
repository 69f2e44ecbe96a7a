//! Word-level emotion intensities and the lexicon-based explanation
//! classifier.
//!
//! Lexicon files hold one `word<TAB>category<TAB>score` triple per line.
//! Source categories are folded onto the six used throughout the crate
//! (`joy→happy`, `anger→angry`, `surprise→surprise`, `sadness→sad`,
//! `fear→fear`); any other category is dropped. Repeated entries keep the
//! maximum score.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Score below which an explanation is considered neutral.
pub const NEUTRAL_THRESHOLD: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionCategory {
    Happy,
    Angry,
    Surprise,
    Sad,
    Fear,
    Neutral,
}

impl EmotionCategory {
    pub const COUNT: usize = 6;
    pub const ALL: [EmotionCategory; 6] = [
        EmotionCategory::Happy,
        EmotionCategory::Angry,
        EmotionCategory::Surprise,
        EmotionCategory::Sad,
        EmotionCategory::Fear,
        EmotionCategory::Neutral,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionCategory::Happy => "happy",
            EmotionCategory::Angry => "angry",
            EmotionCategory::Surprise => "surprise",
            EmotionCategory::Sad => "sad",
            EmotionCategory::Fear => "fear",
            EmotionCategory::Neutral => "neutral",
        }
    }

    /// Source-lexicon category name mapped onto this set, if any.
    pub fn from_source(category: &str) -> Option<Self> {
        match category.to_ascii_lowercase().as_str() {
            "joy" => Some(EmotionCategory::Happy),
            "anger" => Some(EmotionCategory::Angry),
            "surprise" => Some(EmotionCategory::Surprise),
            "sadness" => Some(EmotionCategory::Sad),
            "fear" => Some(EmotionCategory::Fear),
            _ => None,
        }
    }
}

impl fmt::Display for EmotionCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::UnknownId {
                kind: "emotion",
                id: s.to_string(),
            })
    }
}

/// Six intensities in `[0, 1]`, ordered as [`EmotionCategory::ALL`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionVector(pub [f64; 6]);

impl EmotionVector {
    pub const NEUTRAL: EmotionVector = EmotionVector([0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);

    pub fn one_hot(category: EmotionCategory) -> Self {
        let mut v = [0.0; 6];
        v[category.index()] = 1.0;
        EmotionVector(v)
    }

    pub fn get(&self, category: EmotionCategory) -> f64 {
        self.0[category.index()]
    }
}

#[derive(Clone, Debug, Default)]
pub struct Lexicon {
    entries: HashMap<String, EmotionVector>,
    dropped_categories: BTreeSet<String>,
}

pub fn load_lexicon(path: &Path) -> Result<Lexicon> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Lexicon::parse(&text, path)
}

impl Lexicon {
    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let mut lex = Lexicon::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: source.to_path_buf(),
                line: n + 1,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            let [word, category, score] = fields[..] else {
                return Err(err(format!("expected 3 tab-separated fields, got {}", fields.len())));
            };
            let score: f64 = score
                .trim()
                .parse()
                .map_err(|_| err(format!("score '{score}' is not a number")))?;
            if !(0.0..=1.0).contains(&score) {
                return Err(err(format!("score {score} outside [0, 1]")));
            }
            let word = word.trim().to_lowercase();
            if word.is_empty() {
                return Err(err("empty word".into()));
            }
            match EmotionCategory::from_source(category.trim()) {
                Some(cat) => {
                    let entry = lex.entries.entry(word).or_insert(EmotionVector([0.0; 6]));
                    let slot = &mut entry.0[cat.index()];
                    *slot = slot.max(score);
                }
                None => {
                    lex.dropped_categories.insert(category.trim().to_string());
                }
            }
        }
        Ok(lex)
    }

    /// The small lexicon bundled with the crate.
    pub fn fixture() -> Self {
        Self::parse(FIXTURE, Path::new("<fixture lexicon>")).expect("bundled lexicon parses")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Source categories that were seen but not mapped.
    pub fn dropped_categories(&self) -> impl Iterator<Item = &str> {
        self.dropped_categories.iter().map(String::as_str)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains_key(&word.to_lowercase())
    }

    /// Intensity vector for `word`; words missing from the table are neutral.
    pub fn word_emotion(&self, word: &str) -> EmotionVector {
        let hit = match self.entries.get(word) {
            Some(v) => Some(v),
            None => self.entries.get(&word.to_lowercase()),
        };
        hit.copied().unwrap_or(EmotionVector::NEUTRAL)
    }

    /// Mean non-neutral intensity per category over `tokens`.
    pub fn explanation_scores<S: AsRef<str>>(&self, tokens: &[S]) -> [f64; 5] {
        if tokens.is_empty() {
            return [0.0; 5];
        }
        // Summing in sorted order keeps the result independent of token order.
        let mut columns: [Vec<f64>; 5] = Default::default();
        for t in tokens {
            let v = self.word_emotion(t.as_ref());
            for (col, &x) in columns.iter_mut().zip(&v.0[..5]) {
                col.push(x);
            }
        }
        let n = tokens.len() as f64;
        columns.map(|mut col| {
            col.sort_by(f64::total_cmp);
            col.iter().sum::<f64>() / n
        })
    }

    /// Sentence-level emotion: the strongest mean intensity, or neutral when
    /// it falls below `threshold`. Ties go to the earlier category.
    pub fn classify_explanation<S: AsRef<str>>(&self, tokens: &[S], threshold: f64) -> EmotionCategory {
        let scores = self.explanation_scores(tokens);
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        if tokens.is_empty() || scores[best] < threshold {
            EmotionCategory::Neutral
        } else {
            EmotionCategory::ALL[best]
        }
    }

    pub fn classify<S: AsRef<str>>(&self, tokens: &[S]) -> EmotionCategory {
        self.classify_explanation(tokens, NEUTRAL_THRESHOLD)
    }
}

const FIXTURE: &str = include_str!("../data/lexicon.tsv");

/// Share of each category in `categories`.
pub fn emotion_distribution(categories: &[EmotionCategory]) -> Result<[f64; 6]> {
    if categories.is_empty() {
        return Err(Error::Empty("category list".into()));
    }
    let mut counts = [0usize; 6];
    for c in categories {
        counts[c.index()] += 1;
    }
    let n = categories.len() as f64;
    Ok(counts.map(|c| c as f64 / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn parse(text: &str) -> Result<Lexicon> {
        Lexicon::parse(text, Path::new("test.tsv"))
    }

    #[test]
    fn lucky_vector() {
        let lex = parse("lucky\tjoy\t0.721\nlucky\tsurprise\t0.539\n").unwrap();
        assert_eq!(
            lex.word_emotion("lucky"),
            EmotionVector([0.721, 0.0, 0.539, 0.0, 0.0, 0.0])
        );
        // The bundled fixture carries the same entry plus a dropped trust line.
        let fixture = Lexicon::fixture();
        assert_eq!(
            fixture.word_emotion("lucky"),
            EmotionVector([0.721, 0.0, 0.539, 0.0, 0.0, 0.0])
        );
        assert!(fixture.dropped_categories().any(|c| c == "trust"));
    }

    #[test]
    fn missing_words_are_neutral() {
        let lex = Lexicon::fixture();
        assert_eq!(lex.word_emotion("zzzq"), EmotionVector::NEUTRAL);
        assert_eq!(EmotionVector::NEUTRAL.0, [0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        // A word carrying only dropped categories is absent as well.
        assert_eq!(lex.word_emotion("honest"), EmotionVector::NEUTRAL);
    }

    #[test]
    fn empty_file_gives_empty_lexicon() {
        let lex = parse("").unwrap();
        assert!(lex.is_empty());
        assert_eq!(lex.word_emotion("lucky"), EmotionVector::NEUTRAL);
    }

    #[test]
    fn duplicates_keep_the_maximum() {
        let raw = [
            ("w", "joy", 0.2),
            ("w", "joy", 0.5),
            ("w", "fear", 0.3),
            ("w", "fear", 0.1),
        ];
        let text: String = raw.iter().map(|(w, c, s)| format!("{w}\t{c}\t{s}\n")).collect();
        let lex = parse(&text).unwrap();
        // Oracle: max over raw triples per mapped category.
        let mut expected = [0.0; 6];
        for (_, c, s) in raw {
            let i = EmotionCategory::from_source(c).unwrap().index();
            expected[i] = f64::max(expected[i], s);
        }
        assert_eq!(lex.word_emotion("w").0, expected);
        assert_eq!(lex.word_emotion("w").get(EmotionCategory::Happy), 0.5);
    }

    #[test]
    fn lookup_is_case_insensitive() {
        let lex = Lexicon::fixture();
        assert_eq!(lex.word_emotion("Lucky"), lex.word_emotion("lucky"));
        assert_eq!(lex.word_emotion("LUCKY"), lex.word_emotion("lucky"));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse("# c\nok\tjoy\t0.5\nbroken line\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse("w\tjoy\t1.5\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse("w\tjoy\tabc\n").unwrap_err();
        assert!(err.to_string().contains("not a number"));
    }

    #[test]
    fn classify_rules() {
        let lex = Lexicon::fixture();
        assert_eq!(lex.classify(&["lucky"]), EmotionCategory::Happy);
        assert_eq!(lex.classify(&["zzzq", "qqq"]), EmotionCategory::Neutral);
        assert_eq!(lex.classify::<&str>(&[]), EmotionCategory::Neutral);

        // Mean max component exactly 0.19 sits below the threshold.
        let lex = parse("a\tjoy\t0.95\n").unwrap();
        assert_eq!(lex.classify(&["a", "x", "x", "x", "x"]), EmotionCategory::Neutral);
        let lex = parse("a\tjoy\t1.0\n").unwrap();
        assert_eq!(lex.classify(&["a", "x", "x", "x", "x"]), EmotionCategory::Happy);
    }

    #[test]
    fn classify_breaks_ties_by_category_order() {
        let lex = parse("a\tanger\t0.6\nb\tfear\t0.6\n").unwrap();
        assert_eq!(lex.classify(&["b", "a"]), EmotionCategory::Angry);
    }

    #[test]
    fn distribution_counts() {
        use EmotionCategory::*;
        assert_eq!(
            emotion_distribution(&[Happy, Happy, Sad, Neutral]).unwrap(),
            [0.5, 0.0, 0.0, 0.25, 0.0, 0.25]
        );
        assert_eq!(emotion_distribution(&[Fear]).unwrap(), [0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(emotion_distribution(&[]).is_err());
    }

    #[test]
    fn distribution_of_samples_tracks_source() {
        let target = [0.4, 0.1, 0.15, 0.05, 0.1, 0.2];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<EmotionCategory> = (0..1000)
            .map(|_| {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (i, p) in target.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return EmotionCategory::ALL[i];
                    }
                }
                EmotionCategory::Neutral
            })
            .collect();
        let dist = emotion_distribution(&samples).unwrap();
        for (d, t) in dist.iter().zip(target) {
            assert!((d - t).abs() <= 0.05, "{dist:?}");
        }
    }

    #[test]
    fn category_names_round_trip() {
        for c in EmotionCategory::ALL {
            assert_eq!(c.name().parse::<EmotionCategory>().unwrap(), c);
            assert_eq!(EmotionCategory::from_index(c.index()), Some(c));
        }
        assert!("trust".parse::<EmotionCategory>().is_err());
    }

    proptest! {
        #[test]
        fn classify_is_permutation_invariant(
            idx in proptest::collection::vec(0usize..12, 0..10),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let lex = Lexicon::fixture();
            let words = ["lucky", "dirty", "noisy", "shock", "gloomy", "scary", "the", "bar",
                         "wonderful", "furious", "stunning", "disaster"];
            let tokens: Vec<&str> = idx.iter().map(|&i| words[i]).collect();
            let mut shuffled = tokens.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(lex.classify(&tokens), lex.classify(&shuffled));
        }

        #[test]
        fn distribution_is_probability_vector(idx in proptest::collection::vec(0usize..6, 1..50)) {
            let cats: Vec<EmotionCategory> = idx.iter().map(|&i| EmotionCategory::ALL[i]).collect();
            let d = emotion_distribution(&cats).unwrap();
            prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(d.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}
