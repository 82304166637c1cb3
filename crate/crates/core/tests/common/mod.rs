//! Independent oracles and small fixtures shared by the integration tests.
//!
//! Everything here is written with plain loops over `Vec<f64>` so it shares
//! no arithmetic with the library beyond IEEE float semantics.
#![allow(dead_code)]

use ctrg::align::{Candidate, QueuePolicy};
use ctrg::ten::Matrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| r.gen_range(-1.0..1.0) * scale).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn rand_unit(r: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

pub fn rand_unit_rows(r: &mut ChaCha8Rng, rows: usize, d: usize) -> Matrix<f64> {
    let v: Vec<Vec<f64>> = (0..rows).map(|_| rand_unit(r, d)).collect();
    Matrix::from_rows(&v).unwrap()
}

pub fn to_rows(m: &Matrix<f64>) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; b[0].len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b[0].len() {
            for t in 0..b.len() {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

fn normalize_exp(logits: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = logits.iter().map(|x| x.exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Query attention pooling with explicit loops; returns `(A, S)`.
pub fn observe_oracle(
    f: &Matrix<f64>,
    q: &Matrix<f64>,
    w0: &Matrix<f64>,
    w1: &Matrix<f64>,
    w2: &Matrix<f64>,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let keys_q = matmul(&to_rows(q), &to_rows(w0));
    let keys_f = matmul(&to_rows(f), &to_rows(w1));
    let vals = matmul(&to_rows(f), &to_rows(w2));
    let mut a = Vec::new();
    let mut s = Vec::new();
    for qs in &keys_q {
        let logits: Vec<f64> = keys_f.iter().map(|kf| dot(qs, kf)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let row = normalize_exp(&logits.iter().map(|x| x - m).collect::<Vec<_>>());
        let mut out = vec![0.0; vals[0].len()];
        for (p, w) in row.iter().enumerate() {
            for o in 0..out.len() {
                out[o] += w * vals[p][o];
            }
        }
        a.push(row);
        s.push(out);
    }
    (a, s)
}

/// Softmax over `[sim(v, pos), sim(v, neg_1), ...] / tau`.
pub fn dist_oracle(v: &[f64], pos: &[f64], negs: &[Vec<f64>], tau: f64) -> Vec<f64> {
    let mut logits = vec![dot(v, pos) / tau];
    logits.extend(negs.iter().map(|n| dot(v, n) / tau));
    normalize_exp(&logits)
}

pub fn itc_oracle(zv: &[Vec<f64>], zt: &[Vec<f64>], negs: &[Vec<f64>], tau: f64) -> f64 {
    let total: f64 = zv.iter().zip(zt).map(|(v, t)| -dist_oracle(v, t, negs, tau)[0].ln()).sum();
    total / zv.len() as f64
}

fn log_dist_oracle(v: &[f64], pos: &[f64], negs: &[Vec<f64>], tau: f64) -> Vec<f64> {
    let mut logits = vec![dot(v, pos) / tau];
    logits.extend(negs.iter().map(|n| dot(v, n) / tau));
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

pub fn kl_oracle(zv: &[Vec<f64>], zt: &[Vec<f64>], negs: &[Vec<f64>], tau: f64) -> f64 {
    let mut total = 0.0;
    for (v, t) in zv.iter().zip(zt) {
        let lp = log_dist_oracle(v, t, negs, tau);
        let lq = log_dist_oracle(t, t, negs, tau);
        for (a, b) in lq.iter().zip(&lp) {
            total += a.exp() * (a - b);
        }
    }
    total / zv.len() as f64
}

/// Step-by-step reimplementation of the queue rule with stale cached scores.
#[derive(Clone, Debug)]
pub struct QueueSim {
    pub capacity: usize,
    pub fifo: bool,
    /// Per structure: `(token, cached score, subject)`.
    pub slots: Vec<Vec<(Vec<f64>, f64, String)>>,
}

impl QueueSim {
    pub fn new(structures: usize, capacity: usize, policy: QueuePolicy) -> Self {
        Self {
            capacity,
            fifo: policy == QueuePolicy::Fifo,
            slots: vec![Vec::new(); structures],
        }
    }

    /// `key` maps a stored token to the vector used for scoring.
    pub fn push_all(&mut self, cands: &[Candidate<f64>], key: impl Fn(&[f64]) -> Vec<f64>) {
        for c in cands {
            let slot = &mut self.slots[c.structure];
            let kc = key(&c.token);
            let mut score = 0.0;
            for (tok, _, _) in slot.iter() {
                score += dot(&kc, &key(tok));
            }
            let entry = (c.token.clone(), score, c.subject.clone());
            if slot.len() < self.capacity {
                slot.push(entry);
            } else if self.fifo {
                slot.remove(0);
                slot.push(entry);
            } else {
                let mut imax = 0;
                for i in 1..slot.len() {
                    if slot[i].1 > slot[imax].1 {
                        imax = i;
                    }
                }
                if score < slot[imax].1 {
                    slot.remove(imax);
                    slot.push(entry);
                }
            }
        }
    }
}

/// Corpus BLEU with linear-search n-gram counting.
pub fn bleu_oracle(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>], n: usize) -> f64 {
    fn grams(s: &[String], k: usize) -> Vec<(Vec<String>, usize)> {
        let mut out: Vec<(Vec<String>, usize)> = Vec::new();
        if s.len() < k {
            return out;
        }
        for i in 0..=s.len() - k {
            let g = s[i..i + k].to_vec();
            match out.iter_mut().find(|(h, _)| *h == g) {
                Some(e) => e.1 += 1,
                None => out.push((g, 1)),
            }
        }
        out
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rs) in hyps.iter().zip(refs) {
        c += h.len();
        let mut best = rs[0].len();
        for rr in rs {
            let d = rr.len().abs_diff(h.len());
            let bd = best.abs_diff(h.len());
            if d < bd || (d == bd && rr.len() < best) {
                best = rr.len();
            }
        }
        r += best;
        for k in 1..=n {
            for (g, cnt) in grams(h, k) {
                let mut clip = 0;
                for rr in rs {
                    if let Some((_, rc)) = grams(rr, k).into_iter().find(|(x, _)| *x == g) {
                        clip = clip.max(rc);
                    }
                }
                matched[k - 1] += cnt.min(clip);
            }
            if h.len() >= k {
                total[k - 1] += h.len() - k + 1;
            }
        }
    }
    let mut log_sum = 0.0;
    for k in 0..n {
        if matched[k] == 0 || total[k] == 0 {
            return 0.0;
        }
        log_sum += (matched[k] as f64 / total[k] as f64).ln();
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    bp * (log_sum / n as f64).exp()
}

/// LCS by enumerating every subsequence of `a` (keep `a` short).
pub fn lcs_brute(a: &[String], b: &[String]) -> usize {
    assert!(a.len() <= 12);
    let is_subseq = |sub: &[&String]| {
        let mut it = b.iter();
        sub.iter().all(|x| it.any(|y| y == *x))
    };
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| &a[i]).collect();
        if sub.len() > best && is_subseq(&sub) {
            best = sub.len();
        }
    }
    best
}

pub fn rouge_oracle(hyp: &[String], reference: &[String]) -> f64 {
    let l = lcs_brute(hyp, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / hyp.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Micro-averaged precision, recall, F1 from raw counts.
pub fn ce_oracle(pred: &[Vec<u8>], truth: &[Vec<u8>]) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        for k in 0..p.len() {
            if p[k] == 1 && t[k] == 1 {
                tp += 1.0;
            } else if p[k] == 1 {
                fp += 1.0;
            } else if t[k] == 1 {
                fn_ += 1.0;
            }
        }
    }
    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

/// Random sentence over a small alphabet so n-gram overlap is common.
pub fn rand_words(r: &mut ChaCha8Rng, min: usize, max: usize, alphabet: usize) -> Vec<String> {
    let n = r.gen_range(min..=max);
    (0..n).map(|_| format!("w{}", r.gen_range(0..alphabet))).collect()
}
