//! Brute-force metric implementations used as test oracles. They enumerate
//! n-grams into plain vectors and count by linear scan.

#![allow(dead_code)]

pub fn grams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + n <= tokens.len() {
        out.push(tokens[i..i + n].to_vec());
        i += 1;
    }
    out
}

fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

/// (clipped matches, hypothesis n-grams, reference n-grams).
pub fn clipped(reference: &[String], hypothesis: &[String], n: usize) -> (usize, usize, usize) {
    let r = grams(reference, n);
    let h = grams(hypothesis, n);
    let mut seen: Vec<Vec<String>> = Vec::new();
    let mut matched = 0;
    for g in &h {
        if seen.contains(g) {
            continue;
        }
        seen.push(g.clone());
        matched += count(&h, g).min(count(&r, g));
    }
    (matched, h.len(), r.len())
}

pub fn bleu(pairs: &[(Vec<String>, Vec<String>)], n: usize) -> f64 {
    let mut product = 1.0;
    for k in 1..=n {
        let mut m = 0;
        let mut t = 0;
        for (r, h) in pairs {
            let (a, b, _) = clipped(r, h, k);
            m += a;
            t += b;
        }
        if m == 0 {
            return 0.0;
        }
        product *= m as f64 / t as f64;
    }
    let c: usize = pairs.iter().map(|(_, h)| h.len()).sum();
    let r: usize = pairs.iter().map(|(r, _)| r.len()).sum();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * product.powf(1.0 / n as f64)
}

/// Mean (P, R, F) in percent.
pub fn rouge(pairs: &[(Vec<String>, Vec<String>)], n: usize) -> (f64, f64, f64) {
    let (mut ps, mut rs, mut fs) = (0.0, 0.0, 0.0);
    for (r, h) in pairs {
        let (m, hn, rn) = clipped(r, h, n);
        let p = if hn > 0 { m as f64 / hn as f64 } else { 0.0 };
        let rc = if rn > 0 { m as f64 / rn as f64 } else { 0.0 };
        let f = if p + rc > 0.0 { 2.0 * p * rc / (p + rc) } else { 0.0 };
        ps += p;
        rs += rc;
        fs += f;
    }
    let k = pairs.len() as f64;
    (100.0 * ps / k, 100.0 * rs / k, 100.0 * fs / k)
}

pub fn usr(hyps: &[Vec<String>]) -> f64 {
    let mut distinct: Vec<&Vec<String>> = Vec::new();
    for h in hyps {
        if !distinct.contains(&h) {
            distinct.push(h);
        }
    }
    distinct.len() as f64 / hyps.len() as f64
}

pub fn fmr(hyps: &[Vec<String>], features: &[Vec<String>]) -> f64 {
    let hits = hyps
        .iter()
        .zip(features)
        .filter(|(h, f)| f.iter().any(|x| h.contains(x)))
        .count();
    hits as f64 / hyps.len() as f64
}

fn universe(features: &[Vec<String>]) -> Vec<String> {
    let mut u: Vec<String> = Vec::new();
    for f in features.iter().flatten() {
        if !u.contains(f) {
            u.push(f.clone());
        }
    }
    u
}

pub fn fcr(hyps: &[Vec<String>], features: &[Vec<String>]) -> f64 {
    let u = universe(features);
    let covered = u.iter().filter(|f| hyps.iter().any(|h| h.contains(f))).count();
    covered as f64 / u.len() as f64
}

pub fn div(hyps: &[Vec<String>], features: &[Vec<String>]) -> f64 {
    let u = universe(features);
    let sets: Vec<Vec<&String>> = hyps
        .iter()
        .map(|h| u.iter().filter(|f| h.contains(f)).collect())
        .collect();
    let mut total = 0;
    let mut pairs = 0;
    for a in 0..sets.len() {
        for b in a + 1..sets.len() {
            total += sets[a].iter().filter(|x| sets[b].contains(x)).count();
            pairs += 1;
        }
    }
    total as f64 / pairs as f64
}
