#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use secr::eval::{EvalCorpus, EvalItem};

// Direct-formula evaluators: n-grams as joined strings, counts in plain
// vectors, every quantity recomputed from scratch.

fn grams(s: &str, n: usize) -> Vec<String> {
    let w: Vec<&str> = s.split_whitespace().collect();
    if w.len() < n {
        return Vec::new();
    }
    (0..=w.len() - n).map(|i| w[i..i + n].join(" ")).collect()
}

fn count(list: &[String], g: &str) -> usize {
    list.iter().filter(|x| *x == g).count()
}

fn uniq(list: &[String]) -> Vec<String> {
    let mut u: Vec<String> = Vec::new();
    for g in list {
        if !u.contains(g) {
            u.push(g.clone());
        }
    }
    u
}

pub fn oracle_bleu(items: &[(String, Vec<String>)]) -> f64 {
    let mut p = Vec::new();
    for n in 1..=4 {
        let (mut num, mut den) = (0usize, 0usize);
        for (c, refs) in items {
            let cg = grams(c, n);
            for g in uniq(&cg) {
                let max_ref = refs.iter().map(|r| count(&grams(r, n), &g)).max().unwrap();
                num += count(&cg, &g).min(max_ref);
            }
            den += cg.len();
        }
        if den == 0 {
            continue;
        }
        if num == 0 {
            return 0.0;
        }
        p.push(num as f64 / den as f64);
    }
    let c_len: usize = items.iter().map(|(c, _)| c.split_whitespace().count()).sum();
    let mut r_len = 0usize;
    for (c, refs) in items {
        let cl = c.split_whitespace().count() as i64;
        let mut best: Option<i64> = None;
        for r in refs {
            let rl = r.split_whitespace().count() as i64;
            best = match best {
                None => Some(rl),
                Some(b) if (rl - cl).abs() < (b - cl).abs() || ((rl - cl).abs() == (b - cl).abs() && rl < b) => Some(rl),
                keep => keep,
            };
        }
        r_len += best.unwrap() as usize;
    }
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    bp * (p.iter().map(|x| x.ln()).sum::<f64>() / p.len() as f64).exp()
}

pub fn oracle_cider(items: &[(String, Vec<String>)]) -> Vec<f64> {
    let n_img = items.len() as f64;
    let df = |g: &str, n: usize| -> f64 {
        items.iter().filter(|(_, refs)| refs.iter().any(|r| grams(r, n).iter().any(|x| x == g))).count() as f64
    };
    let vector = |s: &str, n: usize| -> Vec<(String, f64)> {
        let gs = grams(s, n);
        uniq(&gs).into_iter().map(|g| {
            let w = count(&gs, &g) as f64 * (n_img.ln() - df(&g, n).max(1.0).ln());
            (g, w)
        }).collect()
    };
    let norm = |v: &[(String, f64)]| v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    items
        .iter()
        .map(|(c, refs)| {
            let mut total = 0.0;
            for r in refs {
                let dl = c.split_whitespace().count() as f64 - r.split_whitespace().count() as f64;
                let pen = (-dl * dl / 72.0).exp();
                let mut sims = Vec::new();
                for n in 1..=4 {
                    let (vc, vr) = (vector(c, n), vector(r, n));
                    if vc.is_empty() && vr.is_empty() {
                        continue;
                    }
                    let (nc, nr) = (norm(&vc), norm(&vr));
                    if nc == 0.0 || nr == 0.0 {
                        sims.push(0.0);
                        continue;
                    }
                    let mut dot = 0.0;
                    for (g, a) in &vc {
                        for (h, b) in &vr {
                            if g == h {
                                dot += a.min(*b) * b;
                            }
                        }
                    }
                    sims.push(dot / (nc * nr) * pen);
                }
                if !sims.is_empty() {
                    total += sims.iter().sum::<f64>() / sims.len() as f64;
                }
            }
            10.0 * total / refs.len() as f64
        })
        .collect()
}

pub fn corpus(items: &[(String, Vec<String>)]) -> EvalCorpus {
    EvalCorpus::new(
        items
            .iter()
            .enumerate()
            .map(|(i, (c, r))| EvalItem { image_id: i as u64, candidate: c.clone(), references: r.clone() })
            .collect(),
    )
    .unwrap()
}

pub fn random_sentence(rng: &mut ChaCha8Rng, words: &[&str]) -> String {
    let len = rng.gen_range(1..8);
    (0..len).map(|_| words[rng.gen_range(0..words.len())]).collect::<Vec<_>>().join(" ")
}

/// Micro-corpora over a tiny vocabulary, so n-gram overlap is frequent.
pub fn micro_corpus(seed: u64) -> Vec<(String, Vec<String>)> {
    let words = ["a", "red", "small", "circle", "above", "and", "blue"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = rng.gen_range(2..6);
    (0..images)
        .map(|_| {
            let refs = (0..rng.gen_range(1..4)).map(|_| random_sentence(&mut rng, &words)).collect::<Vec<_>>();
            let cand = if rng.gen_bool(0.3) { refs[0].clone() } else { random_sentence(&mut rng, &words) };
            (cand, refs)
        })
        .collect()
}
