//! Text-quality, explainability, and emotion-distribution metrics.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::normalize_feature;
use crate::error::{Error, Result};
use crate::lexicon::{emotion_distribution, EmotionCategory, Lexicon};

/// Above this many hypotheses DIV samples pairs instead of enumerating them.
pub const DIV_EXACT_LIMIT: usize = 2000;
pub const DIV_SAMPLES: usize = 1_000_000;
const DIV_SEED: u64 = 0x0d17;

/// A reference explanation, the generated one, and the record's features.
#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationPair {
    pub reference: Vec<String>,
    pub hypothesis: Vec<String>,
    pub features: Vec<String>,
}

fn non_empty<T>(xs: &[T], what: &str) -> Result<()> {
    if xs.is_empty() {
        Err(Error::Empty(format!("{what} needs at least one pair")))
    } else {
        Ok(())
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and the two n-gram totals for one pair.
fn overlap(reference: &[String], hypothesis: &[String], n: usize) -> (usize, usize, usize) {
    let r = ngram_counts(reference, n);
    let h = ngram_counts(hypothesis, n);
    let matched = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (
        matched,
        hypothesis.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    )
}

/// Corpus-level BLEU over orders `1..=n` with brevity penalty, in percent.
/// Counts are pooled across pairs before any ratio is taken; no smoothing.
pub fn bleu(pairs: &[EvaluationPair], n: usize) -> Result<f64> {
    non_empty(pairs, "BLEU")?;
    if !(1..=4).contains(&n) {
        return Err(Error::InvalidArgument(format!("BLEU order must be 1..=4, got {n}")));
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (mut matched, mut total) = (0usize, 0usize);
        for p in pairs {
            let (m, h, _) = overlap(&p.reference, &p.hypothesis, k);
            matched += m;
            total += h;
        }
        if matched == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let c: usize = pairs.iter().map(|p| p.hypothesis.len()).sum();
    let r: usize = pairs.iter().map(|p| p.reference.len()).sum();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(100.0 * bp * (log_sum / n as f64).exp())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Macro-averaged ROUGE-n precision, recall, and F1, in percent.
pub fn rouge(pairs: &[EvaluationPair], n: usize) -> Result<PrecisionRecall> {
    non_empty(pairs, "ROUGE")?;
    if !(1..=2).contains(&n) {
        return Err(Error::InvalidArgument(format!("ROUGE order must be 1 or 2, got {n}")));
    }
    let mut sum = PrecisionRecall::default();
    for p in pairs {
        let (m, h, r) = overlap(&p.reference, &p.hypothesis, n);
        let precision = if h == 0 { 0.0 } else { m as f64 / h as f64 };
        let recall = if r == 0 { 0.0 } else { m as f64 / r as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        sum.precision += precision;
        sum.recall += recall;
        sum.f1 += f1;
    }
    let k = 100.0 / pairs.len() as f64;
    Ok(PrecisionRecall {
        precision: sum.precision * k,
        recall: sum.recall * k,
        f1: sum.f1 * k,
    })
}

/// Unique sentence ratio.
pub fn usr<S: AsRef<[String]>>(hypotheses: &[S]) -> Result<f64> {
    non_empty(hypotheses, "USR")?;
    let distinct: HashSet<String> = hypotheses.iter().map(|h| h.as_ref().join(" ")).collect();
    Ok(distinct.len() as f64 / hypotheses.len() as f64)
}

fn features_of(p: &EvaluationPair) -> impl Iterator<Item = String> + '_ {
    p.features.iter().map(|f| normalize_feature(f))
}

/// Fraction of pairs whose hypothesis contains one of the record's features.
pub fn fmr(pairs: &[EvaluationPair]) -> Result<f64> {
    non_empty(pairs, "FMR")?;
    let mut hits = 0usize;
    for p in pairs {
        let feats: Vec<String> = features_of(p).collect();
        if feats.is_empty() {
            return Err(Error::InvalidArgument("FMR pair without features".into()));
        }
        if p.hypothesis.iter().any(|t| feats.contains(t)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Distinct features across all evaluated records.
pub fn ground_truth_features(pairs: &[EvaluationPair]) -> BTreeSet<String> {
    pairs.iter().flat_map(features_of).collect()
}

/// Fraction of ground-truth features mentioned by any hypothesis.
pub fn fcr(pairs: &[EvaluationPair]) -> Result<f64> {
    non_empty(pairs, "FCR")?;
    let universe = ground_truth_features(pairs);
    if universe.is_empty() {
        return Err(Error::Empty("FCR needs at least one ground-truth feature".into()));
    }
    let mentioned: BTreeSet<&String> = pairs
        .iter()
        .flat_map(|p| p.hypothesis.iter())
        .filter(|t| universe.contains(*t))
        .collect();
    Ok(mentioned.len() as f64 / universe.len() as f64)
}

/// For each hypothesis, the ground-truth features it mentions.
pub fn hypothesis_feature_sets(pairs: &[EvaluationPair]) -> Vec<BTreeSet<String>> {
    let universe = ground_truth_features(pairs);
    pairs
        .iter()
        .map(|p| p.hypothesis.iter().filter(|t| universe.contains(*t)).cloned().collect())
        .collect()
}

/// Mean pairwise intersection size. Lower means more diverse.
pub fn div(sets: &[BTreeSet<String>]) -> Result<f64> {
    let n = sets.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("DIV needs at least two sets, got {n}")));
    }
    let inter = |a: usize, b: usize| sets[a].intersection(&sets[b]).count();
    let mut total = 0usize;
    let count = if n <= DIV_EXACT_LIMIT {
        for a in 0..n {
            for b in a + 1..n {
                total += inter(a, b);
            }
        }
        n * (n - 1) / 2
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(DIV_SEED);
        for _ in 0..DIV_SAMPLES {
            let a = rng.gen_range(0..n);
            let mut b = rng.gen_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            total += inter(a, b);
        }
        DIV_SAMPLES
    };
    Ok(total as f64 / count as f64)
}

/// Emotion distributions in percent, ordered as [`EmotionCategory::ALL`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionAudit {
    pub ground_truth: [f64; 6],
    pub generated: [f64; 6],
    /// Generated minus ground-truth share, in percentage points.
    pub bias: [f64; 6],
}

pub fn emotion_audit<S: AsRef<[String]>>(
    ground_truth: &[S],
    generated: &[S],
    lexicon: &Lexicon,
) -> Result<EmotionAudit> {
    if ground_truth.len() != generated.len() {
        return Err(Error::InvalidArgument(format!(
            "audit needs aligned lists, got {} ground-truth and {} generated explanations",
            ground_truth.len(),
            generated.len()
        )));
    }
    let classify = |xs: &[S]| -> Result<[f64; 6]> {
        let cats: Vec<EmotionCategory> = xs.iter().map(|x| lexicon.classify(x.as_ref())).collect();
        Ok(emotion_distribution(&cats)?.map(|p| 100.0 * p))
    };
    let gt = classify(ground_truth)?;
    let gen = classify(generated)?;
    let mut bias = [0.0; 6];
    for k in 0..6 {
        bias[k] = gen[k] - gt[k];
    }
    Ok(EmotionAudit {
        ground_truth: gt,
        generated: gen,
        bias,
    })
}

/// How far `ours` moved from `base` toward `gt`, relative to `gt`, in
/// percent. Positive when the move is toward the ground truth.
pub fn debiasing_score(gt: f64, base: f64, ours: f64) -> Result<f64> {
    if gt.is_nan() || gt <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "debiasing is undefined for a ground-truth share of {gt}"
        )));
    }
    let direction = if gt > base {
        1.0
    } else if gt < base {
        -1.0
    } else {
        0.0
    };
    Ok((ours - base) * direction / gt * 100.0)
}

/// Per-category debiasing of `ours` against `base`; `None` where the
/// ground-truth share is zero.
pub fn debiasing_scores(base: &EmotionAudit, ours: &EmotionAudit) -> [Option<f64>; 6] {
    std::array::from_fn(|k| debiasing_score(ours.ground_truth[k], base.generated[k], ours.generated[k]).ok())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub pairs: usize,
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge1: PrecisionRecall,
    pub rouge2: PrecisionRecall,
    pub usr: f64,
    pub fmr: f64,
    pub fcr: f64,
    pub div: f64,
    pub emotion: EmotionAudit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub debiasing: Option<[Option<f64>; 6]>,
}

pub fn evaluate(pairs: &[EvaluationPair], lexicon: &Lexicon) -> Result<EvaluationReport> {
    let refs: Vec<&[String]> = pairs.iter().map(|p| p.reference.as_slice()).collect();
    let hyps: Vec<&[String]> = pairs.iter().map(|p| p.hypothesis.as_slice()).collect();
    let div_value = if pairs.len() >= 2 {
        div(&hypothesis_feature_sets(pairs))?
    } else {
        0.0
    };
    Ok(EvaluationReport {
        pairs: pairs.len(),
        bleu1: bleu(pairs, 1)?,
        bleu4: bleu(pairs, 4)?,
        rouge1: rouge(pairs, 1)?,
        rouge2: rouge(pairs, 2)?,
        usr: usr(&hyps)?,
        fmr: fmr(pairs)?,
        fcr: fcr(pairs)?,
        div: div_value,
        emotion: emotion_audit(&refs, &hyps, lexicon)?,
        debiasing: None,
    })
}

pub const TABLE_COLUMNS: [&str; 12] = [
    "FMR", "FCR", "DIV", "USR", "BLEU-1", "BLEU-4", "R1-P", "R1-R", "R1-F", "R2-P", "R2-R", "R2-F",
];

impl EvaluationReport {
    /// Values in [`TABLE_COLUMNS`] order.
    pub fn table_values(&self) -> [f64; 12] {
        [
            self.fmr,
            self.fcr,
            self.div,
            self.usr,
            self.bleu1,
            self.bleu4,
            self.rouge1.precision,
            self.rouge1.recall,
            self.rouge1.f1,
            self.rouge2.precision,
            self.rouge2.recall,
            self.rouge2.f1,
        ]
    }

    /// Aligned plain-text table: one metrics row per labelled report, then
    /// the emotion distributions of the first report.
    pub fn format_table(rows: &[(String, &EvaluationReport)]) -> String {
        let label_width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
        let mut s = String::new();
        s.push_str("# BLEU: corpus-level, unsmoothed. ROUGE: macro-averaged over pairs.\n");
        let _ = write!(s, "{:<label_width$}", "");
        for c in TABLE_COLUMNS {
            let _ = write!(s, " {c:>7}");
        }
        s.push('\n');
        for (label, r) in rows {
            let _ = write!(s, "{label:<label_width$}");
            for v in r.table_values() {
                let _ = write!(s, " {v:>7.2}");
            }
            s.push('\n');
        }
        if let Some((_, r)) = rows.first() {
            s.push('\n');
            let _ = writeln!(
                s,
                "{:<10} {:>8} {:>8} {:>8} {:>10}",
                "emotion", "truth%", "gen%", "bias", "debiasing"
            );
            for c in EmotionCategory::ALL {
                let k = c.index();
                let d = r
                    .debiasing
                    .and_then(|d| d[k])
                    .map_or_else(|| "-".to_string(), |v| format!("{v:.1}"));
                let _ = writeln!(
                    s,
                    "{:<10} {:>8.1} {:>8.1} {:>+8.1} {:>10}",
                    c.name(),
                    r.emotion.ground_truth[k],
                    r.emotion.generated[k],
                    r.emotion.bias[k],
                    d
                );
            }
        }
        s
    }
}
