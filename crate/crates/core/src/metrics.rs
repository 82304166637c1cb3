//! Corpus BLEU, ROUGE-L, clinical-efficacy P/R/F1, and retrieval recall@K.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::ten::Matrix;

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU-`n` with uniform weights: clipped n-gram matches are pooled
/// over the corpus, then combined by geometric mean and a brevity penalty.
/// The effective reference length per case is the one closest to the hypothesis
/// length (shorter wins ties).
pub fn bleu<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<Vec<S>>], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::Param(format!("BLEU order {n} outside 1..=4")));
    }
    if hyps.is_empty() {
        return Err(Error::Param("empty hypothesis corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::shape("bleu", &[hyps.len()], &[refs.len()]));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rs) in hyps.iter().zip(refs) {
        if rs.is_empty() {
            return Err(Error::Param("case without references".into()));
        }
        c += h.len();
        r += rs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(h.len()), l))
            .expect("non-empty references");
        for k in 1..=n {
            let hc = ngrams(h, k);
            let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
            for rr in rs {
                for (g, cnt) in ngrams(rr, k) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(cnt);
                }
            }
            matched[k - 1] += hc.iter().map(|(g, &cnt)| cnt.min(*max_ref.get(g).unwrap_or(&0))).sum::<usize>();
            total[k - 1] += h.len().saturating_sub(k - 1);
        }
    }
    if matched.iter().zip(&total).any(|(&m, &t)| m == 0 || t == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n as f64;
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(bp * log_p.exp())
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure with `beta = 1`.
pub fn rouge_l<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Param("empty ROUGE-L reference".into()));
    }
    if hyp.is_empty() {
        return Ok(0.0);
    }
    let l = lcs_len(hyp, reference) as f64;
    if l == 0.0 {
        return Ok(0.0);
    }
    let p = l / hyp.len() as f64;
    let r = l / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Mean ROUGE-L over cases.
pub fn rouge_l_corpus<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<f64> {
    if hyps.is_empty() || hyps.len() != refs.len() {
        return Err(Error::shape("rouge_l_corpus", &[hyps.len()], &[refs.len()]));
    }
    let total: f64 = hyps.iter().zip(refs).map(|(h, r)| rouge_l(h, r)).sum::<Result<f64>>()?;
    Ok(total / hyps.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    #[default]
    Micro,
    Macro,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn prf(tp: usize, fp: usize, fn_: usize) -> Prf {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf { precision, recall, f1 }
}

/// Precision / recall / F1 over multi-hot labels. Micro pools all
/// (case, label) cells; macro averages per-label scores.
pub fn ce_metrics(pred: &[Vec<u8>], truth: &[Vec<u8>], avg: Averaging) -> Result<Prf> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape("ce_metrics", &[pred.len()], &[truth.len()]));
    }
    let dim = truth[0].len();
    if pred.iter().chain(truth).any(|v| v.len() != dim) {
        return Err(Error::Param("label vectors differ in dimensionality".into()));
    }
    let mut counts = vec![(0usize, 0usize, 0usize); dim];
    for (p, t) in pred.iter().zip(truth) {
        for (k, (&pk, &tk)) in p.iter().zip(t).enumerate() {
            match (pk != 0, tk != 0) {
                (true, true) => counts[k].0 += 1,
                (true, false) => counts[k].1 += 1,
                (false, true) => counts[k].2 += 1,
                (false, false) => {}
            }
        }
    }
    Ok(match avg {
        Averaging::Micro => {
            let (tp, fp, fn_) = counts
                .iter()
                .fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
            prf(tp, fp, fn_)
        }
        Averaging::Macro => {
            let per: Vec<Prf> = counts.iter().map(|&(a, b, c)| prf(a, b, c)).collect();
            let n = dim.max(1) as f64;
            Prf {
                precision: per.iter().map(|x| x.precision).sum::<f64>() / n,
                recall: per.iter().map(|x| x.recall).sum::<f64>() / n,
                f1: per.iter().map(|x| x.f1).sum::<f64>() / n,
            }
        }
    })
}

/// Projected observation tokens of one subject; `None` where the structure
/// has no text.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectTokens<T> {
    pub tokens: Vec<Option<Vec<T>>>,
}

/// Mean over structures present in the query of `sim(s^v_i, s^t_i)`.
pub fn subject_score<T: Scalar>(text: &SubjectTokens<T>, volume: &Matrix<T>) -> T {
    let mut sum = T::zero();
    let mut n = 0usize;
    for (i, t) in text.tokens.iter().enumerate() {
        if let Some(t) = t {
            sum += t.iter().zip(volume.row(i)).map(|(&a, &b)| a * b).sum::<T>();
            n += 1;
        }
    }
    if n == 0 {
        T::zero()
    } else {
        sum / T::lit(n as f64)
    }
}

/// Report-to-volume recall@K. Query `i`'s true volume is volume `i`; ties
/// rank the lower volume index first.
pub fn retrieval_recall<T: Scalar>(texts: &[SubjectTokens<T>], volumes: &[Matrix<T>], ks: &[usize]) -> Result<Vec<f64>> {
    if texts.is_empty() || texts.len() != volumes.len() {
        return Err(Error::Param(format!(
            "retrieval needs equal, non-empty query and volume sets ({} vs {})",
            texts.len(),
            volumes.len()
        )));
    }
    let n = texts.len();
    let mut ranks = Vec::with_capacity(n);
    for (q, t) in texts.iter().enumerate() {
        let scores: Vec<T> = volumes.iter().map(|v| subject_score(t, v)).collect();
        let own = scores[q];
        let rank = scores
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > own || (s == own && j < q))
            .count();
        ranks.push(rank);
    }
    Ok(ks
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64)
        .collect())
}

/// Everything written to a metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub rouge_beta: f64,
    pub ce_precision: f64,
    pub ce_recall: f64,
    pub ce_f1: f64,
    pub ce_averaging: Averaging,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<RecallReport>,
    pub cases: usize,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub ks: Vec<usize>,
    pub values: Vec<f64>,
    pub cases: usize,
    pub config_hash: String,
}

/// Scores generated reports against references and their label vectors.
pub fn nlg_ce_report(
    hyps: &[Vec<String>],
    refs: &[Vec<String>],
    pred_labels: &[Vec<u8>],
    true_labels: &[Vec<u8>],
    avg: Averaging,
    config_hash: &str,
) -> Result<MetricReport> {
    let wrapped: Vec<Vec<Vec<String>>> = refs.iter().map(|r| vec![r.clone()]).collect();
    let ce = ce_metrics(pred_labels, true_labels, avg)?;
    Ok(MetricReport {
        bleu1: bleu(hyps, &wrapped, 1)?,
        bleu4: bleu(hyps, &wrapped, 4)?,
        rouge_l: rouge_l_corpus(hyps, refs)?,
        rouge_beta: 1.0,
        ce_precision: ce.precision,
        ce_recall: ce.recall,
        ce_f1: ce.f1,
        ce_averaging: avg,
        recall: None,
        cases: hyps.len(),
        config_hash: config_hash.to_string(),
    })
}
