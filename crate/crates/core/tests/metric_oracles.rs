mod support;

use emoter_core::metrics::{bleu, div, fcr, fmr, hypothesis_feature_sets, rouge, usr, EvaluationPair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::oracle;

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
fn metrics_match_brute_force_on_random_corpora() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let pairs = random_corpus(&mut rng);
        let rh: Vec<_> = pairs
            .iter()
            .map(|p| (p.reference.clone(), p.hypothesis.clone()))
            .collect();
        let hyps: Vec<_> = pairs.iter().map(|p| p.hypothesis.clone()).collect();
        let feats: Vec<_> = pairs.iter().map(|p| p.features.clone()).collect();
        for n in [1, 4] {
            assert!((bleu(&pairs, n).unwrap() - oracle::bleu(&rh, n)).abs() < 1e-9);
        }
        for n in [1, 2] {
            let r = rouge(&pairs, n).unwrap();
            let (p, rc, f) = oracle::rouge(&rh, n);
            assert!((r.precision - p).abs() < 1e-9);
            assert!((r.recall - rc).abs() < 1e-9);
            assert!((r.f1 - f).abs() < 1e-9);
        }
        assert!((usr(&hyps).unwrap() - oracle::usr(&hyps)).abs() < 1e-9);
        assert!((fmr(&pairs).unwrap() - oracle::fmr(&hyps, &feats)).abs() < 1e-9);
        assert!((fcr(&pairs).unwrap() - oracle::fcr(&hyps, &feats)).abs() < 1e-9);
        if pairs.len() >= 2 {
            let d = div(&hypothesis_feature_sets(&pairs)).unwrap();
            assert!((d - oracle::div(&hyps, &feats)).abs() < 1e-9);
        }
    }
}
