//! Projection heads, the image-to-text contrastive objective with soft
//! text-text targets, and the per-structure negative queue.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::module::Module;
use crate::rng;
use crate::scalar::Scalar;
use crate::ten::{l2_normalize, softmax, softmax_rows, DiffArray, Matrix, Tape, Var, NORM_EPS};

pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;

/// `g_v`, `g_t` and the learnable temperature (stored as `log tau`).
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHeads<T> {
    pub gv_w: DiffArray<T>,
    pub gv_b: DiffArray<T>,
    pub gt_w: DiffArray<T>,
    pub gt_b: DiffArray<T>,
    pub log_tau: DiffArray<T>,
}

impl<T: Scalar> ProjectionHeads<T> {
    pub fn new(d_o: usize, d_t: usize, d_p: usize, tau: f64, seed: u64) -> Result<Self> {
        if !(TAU_MIN..=TAU_MAX).contains(&tau) {
            return Err(Error::Param(format!("initial temperature {tau} outside [{TAU_MIN}, {TAU_MAX}]")));
        }
        let mut r = rng::derive(seed, "heads");
        Ok(Self {
            gv_w: DiffArray::new(rng::normal(&mut r, d_o, d_p, 1.0 / (d_o as f64).sqrt())),
            gv_b: DiffArray::new(Matrix::zeros(1, d_p)),
            gt_w: DiffArray::new(rng::normal(&mut r, d_t, d_p, 1.0 / (d_t as f64).sqrt())),
            gt_b: DiffArray::new(Matrix::zeros(1, d_p)),
            log_tau: DiffArray::new(Matrix::scalar(T::lit(tau.ln()))),
        })
    }

    pub fn tau(&self) -> T {
        self.log_tau.value.item().exp()
    }

    pub fn clamp_tau(&mut self) {
        let lt = self.log_tau.value.item();
        let c = lt.max(T::lit(TAU_MIN.ln())).min(T::lit(TAU_MAX.ln()));
        self.log_tau.value = Matrix::scalar(c);
    }

    fn project(x: &Matrix<T>, w: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
        let mut out = x.matmul(w)?;
        for r in 0..out.rows() {
            for (o, &bi) in out.row_mut(r).iter_mut().zip(b.row(0)) {
                *o += bi;
            }
            let n = l2_normalize(out.row(r))?;
            out.row_mut(r).copy_from_slice(&n);
        }
        Ok(out)
    }

    /// Normalized `g_v` of each row.
    pub fn project_visual(&self, s_v: &Matrix<T>) -> Result<Matrix<T>> {
        Self::project(s_v, &self.gv_w.value, &self.gv_b.value)
    }

    /// Normalized `g_t` of each row.
    pub fn project_text(&self, s_t: &Matrix<T>) -> Result<Matrix<T>> {
        Self::project(s_t, &self.gt_w.value, &self.gt_b.value)
    }
}

impl<T: Scalar> Module<T> for ProjectionHeads<T> {
    fn params(&self) -> Vec<(&str, &DiffArray<T>)> {
        vec![
            ("gv_w", &self.gv_w),
            ("gv_b", &self.gv_b),
            ("gt_w", &self.gt_w),
            ("gt_b", &self.gt_b),
            ("log_tau", &self.log_tau),
        ]
    }

    fn params_mut(&mut self) -> Vec<(&str, &mut DiffArray<T>)> {
        vec![
            ("gv_w", &mut self.gv_w),
            ("gv_b", &mut self.gv_b),
            ("gt_w", &mut self.gt_w),
            ("gt_b", &mut self.gt_b),
            ("log_tau", &mut self.log_tau),
        ]
    }
}

/// `sim(u, w) = u^T w` for already projected, normalized tokens.
pub fn sim<T: Scalar>(u: &[T], w: &[T]) -> Result<T> {
    if u.len() != w.len() {
        return Err(Error::shape("sim", &[u.len()], &[w.len()]));
    }
    Ok(u.iter().zip(w).map(|(&a, &b)| a * b).sum())
}

fn candidate_logits<T: Scalar>(anchor: &[T], positive: &[T], negatives: &Matrix<T>, tau: T) -> Result<Vec<T>> {
    if tau <= T::zero() {
        return Err(Error::Param(format!("temperature {tau} must be positive")));
    }
    let mut logits = vec![sim(anchor, positive)? / tau];
    if !negatives.is_empty() {
        for r in 0..negatives.rows() {
            logits.push(sim(anchor, negatives.row(r))? / tau);
        }
    }
    Ok(logits)
}

/// `p^{v2t}` over `[positive, queue tokens...]`; index 0 is the positive.
pub fn image_to_text_dist<T: Scalar>(v: &[T], positive: &[T], negatives: &Matrix<T>, tau: T) -> Result<Vec<T>> {
    Ok(softmax(&candidate_logits(v, positive, negatives, tau)?))
}

/// `q^{t2t}`: the same candidate set scored with text-text similarity.
pub fn soft_targets<T: Scalar>(t: &[T], negatives: &Matrix<T>, tau: T) -> Result<Vec<T>> {
    image_to_text_dist(t, t, negatives, tau)
}

/// An empty `0 x d` stand-in for "no queued tokens".
pub fn no_negatives<T: Scalar>(d: usize) -> Matrix<T> {
    Matrix::zeros(0, d)
}

/// Loss terms recorded on a tape for one contrastive batch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub itc: Var,
    pub kl: Var,
    pub pre: Var,
}

/// Contrastive, soft-target and combined pretraining losses on a tape.
///
/// `zv` and `zt` are `M x d_p` normalized projections of the `M` present
/// (subject, structure) pairs; `negatives` holds the projected queue tokens.
/// Soft targets are computed from the values of `zt`, `negatives` and `tau`
/// and enter the tape as constants.
pub fn contrastive_losses<T: Scalar>(
    tape: &mut Tape<T>,
    zv: Var,
    zt: Var,
    log_tau: Var,
    negatives: Option<Var>,
    alpha: f64,
) -> Result<LossVars> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Param(format!("alpha {alpha} outside [0, 1]")));
    }
    let [m, d] = tape.shape(zv);
    if m == 0 {
        return Err(Error::Param("contrastive batch is empty".into()));
    }
    if tape.shape(zt) != [m, d] {
        return Err(Error::shape("contrastive_losses", &[m, d], &tape.shape(zt)));
    }
    let neg_log_tau = tape.scale(log_tau, -T::one());
    let inv_tau = tape.exp(neg_log_tau);
    let pos = tape.row_dot(zv, zt)?;
    let raw = match negatives {
        None => pos,
        Some(q) => {
            if tape.shape(q)[1] != d {
                return Err(Error::shape("contrastive_losses", &[m, d], &tape.shape(q)));
            }
            let neg = tape.matmul_t(zv, q)?;
            tape.concat_cols(&[pos, neg])?
        }
    };
    let negatives = match negatives {
        Some(q) => tape.value(q).clone(),
        None => no_negatives(d),
    };
    let logits = tape.mul_scalar(raw, inv_tau)?;

    let itc_rows = tape.nll_rows(logits, &vec![Some(0); m])?;
    let itc = tape.mean(itc_rows);

    let inv = tape.value(inv_tau).item();
    let t = tape.value(zt).clone();
    let mut target_logits = Matrix::zeros(m, 1 + negatives.rows());
    for i in 0..m {
        let row = candidate_logits(t.row(i), t.row(i), &negatives, T::one())?;
        for (o, x) in target_logits.row_mut(i).iter_mut().zip(row) {
            *o = x * inv;
        }
    }
    let q = softmax_rows(&target_logits);
    let kl_rows = tape.kl_logits_rows(q, logits)?;
    let kl = tape.mean(kl_rows);

    let a = tape.scale(itc, T::lit(1.0 - alpha));
    let b = tape.scale(kl, T::lit(alpha));
    let pre = tape.add(a, b)?;
    Ok(LossVars { itc, kl, pre })
}

/// Value-only contrastive loss: mean over pairs of `-log p_0`.
pub fn loss_so_itc<T: Scalar>(zv: &Matrix<T>, zt: &Matrix<T>, negatives: &Matrix<T>, tau: T) -> Result<T> {
    let (itc, _) = value_losses(zv, zt, negatives, tau)?;
    Ok(itc)
}

/// Value-only soft-target loss: mean over pairs of `KL(q^{t2t} || p^{v2t})`.
pub fn loss_so_kl<T: Scalar>(zv: &Matrix<T>, zt: &Matrix<T>, negatives: &Matrix<T>, tau: T) -> Result<T> {
    let (_, kl) = value_losses(zv, zt, negatives, tau)?;
    Ok(kl)
}

/// Value-only `(1 - alpha) * loss_so_itc + alpha * loss_so_kl`.
pub fn loss_so_pre<T: Scalar>(zv: &Matrix<T>, zt: &Matrix<T>, negatives: &Matrix<T>, tau: T, alpha: f64) -> Result<T> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Param(format!("alpha {alpha} outside [0, 1]")));
    }
    let (itc, kl) = value_losses(zv, zt, negatives, tau)?;
    Ok(T::lit(1.0 - alpha) * itc + T::lit(alpha) * kl)
}

fn value_losses<T: Scalar>(zv: &Matrix<T>, zt: &Matrix<T>, negatives: &Matrix<T>, tau: T) -> Result<(T, T)> {
    if zv.is_empty() {
        return Err(Error::Param("contrastive batch is empty".into()));
    }
    if zv.shape() != zt.shape() {
        return Err(Error::shape("contrastive batch", &zv.shape(), &zt.shape()));
    }
    let mut tape = Tape::new();
    let v = tape.constant(zv.clone());
    let t = tape.constant(zt.clone());
    let lt = tape.constant(Matrix::scalar(tau.ln()));
    let q = (!negatives.is_empty()).then(|| tape.constant(negatives.clone()));
    let l = contrastive_losses(&mut tape, v, t, lt, q, 0.0)?;
    Ok((tape.value(l.itc).item(), tape.value(l.kl).item()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueuePolicy {
    /// Evict the entry with the largest cached summed similarity.
    #[default]
    Diversity,
    /// Evict the oldest entry.
    Fifo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueueEntry<T> {
    pub token: Vec<T>,
    pub score: T,
    pub subject: String,
}

/// Per-structure bounded store of text tokens used as negatives.
///
/// Tokens are stored as given; callers decide whether they are raw encoder
/// outputs (projected at use) or already projected.
#[derive(Clone, Debug, PartialEq)]
pub struct DiversityQueue<T> {
    capacity: usize,
    dim: usize,
    policy: QueuePolicy,
    queues: Vec<Vec<QueueEntry<T>>>,
}

/// One enqueue request.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate<T> {
    pub structure: usize,
    pub token: Vec<T>,
    pub subject: String,
}

impl<T: Scalar> DiversityQueue<T> {
    pub fn new(structures: usize, capacity: usize, dim: usize, policy: QueuePolicy) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Param("queue capacity must be at least 1".into()));
        }
        Ok(Self {
            capacity,
            dim,
            policy,
            queues: vec![Vec::new(); structures],
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> QueuePolicy {
        self.policy
    }

    pub fn structure(&self, s: usize) -> &[QueueEntry<T>] {
        &self.queues[s]
    }

    pub fn structures(&self) -> usize {
        self.queues.len()
    }

    pub fn total_len(&self) -> usize {
        self.queues.iter().map(Vec::len).sum()
    }

    /// All queued tokens, structure-major, as rows (`0 x d` when empty).
    pub fn snapshot(&self) -> Matrix<T> {
        let data: Vec<T> = self
            .queues
            .iter()
            .flatten()
            .flat_map(|e| e.token.iter().copied())
            .collect();
        if data.is_empty() {
            return no_negatives(self.dim);
        }
        Matrix::from_vec(self.total_len(), self.dim, data).expect("queue tokens share one dimension")
    }

    /// Applies candidates in order, scoring with the stored tokens themselves.
    /// Returns how many were stored.
    pub fn update(&mut self, candidates: &[Candidate<T>]) -> Result<usize> {
        self.update_with(candidates, |m| Ok(m.clone()))
    }

    /// Applies candidates in order. Diversity scores are inner products of
    /// `key(tokens)` rows, e.g. the current text projection of stored tokens.
    pub fn update_with(
        &mut self,
        candidates: &[Candidate<T>],
        key: impl Fn(&Matrix<T>) -> Result<Matrix<T>>,
    ) -> Result<usize> {
        for c in candidates {
            if c.structure >= self.queues.len() {
                return Err(Error::Param(format!("structure {} out of range", c.structure)));
            }
            if c.token.len() != self.dim {
                return Err(Error::shape("queue_update", &[self.dim], &[c.token.len()]));
            }
        }
        let rows = |toks: Vec<&Vec<T>>| -> Result<Vec<Vec<T>>> {
            if toks.is_empty() {
                return Ok(Vec::new());
            }
            let m = Matrix::from_vec(toks.len(), self.dim, toks.into_iter().flatten().copied().collect())?;
            let k = key(&m)?;
            Ok((0..k.rows()).map(|r| k.row(r).to_vec()).collect())
        };
        let mut keys: Vec<Vec<Vec<T>>> = self
            .queues
            .iter()
            .map(|q| rows(q.iter().map(|e| &e.token).collect()))
            .collect::<Result<_>>()?;
        let cand_keys = rows(candidates.iter().map(|c| &c.token).collect())?;
        let mut stored = 0;
        for (c, ck) in candidates.iter().zip(cand_keys) {
            let (q, qk) = (&mut self.queues[c.structure], &mut keys[c.structure]);
            let score: T = qk.iter().map(|k| sim(&ck, k)).sum::<Result<T>>()?;
            let entry = QueueEntry {
                token: c.token.clone(),
                score,
                subject: c.subject.clone(),
            };
            let evict = if q.len() < self.capacity {
                None
            } else {
                match self.policy {
                    QueuePolicy::Fifo => Some(0),
                    QueuePolicy::Diversity => {
                        let imax = (1..q.len()).fold(0, |bi, i| if q[i].score > q[bi].score { i } else { bi });
                        if score < q[imax].score {
                            Some(imax)
                        } else {
                            continue;
                        }
                    }
                }
            };
            if let Some(i) = evict {
                q.remove(i);
                qk.remove(i);
            }
            q.push(entry);
            qk.push(ck);
            stored += 1;
        }
        Ok(stored)
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        ck.set_meta("queue.capacity", self.capacity.to_string());
        ck.set_meta("queue.dim", self.dim.to_string());
        ck.set_meta("queue.structures", self.queues.len().to_string());
        ck.set_meta("queue.policy", serde_json::to_string(&self.policy).expect("policy serializes"));
        for (s, q) in self.queues.iter().enumerate() {
            let subjects: Vec<&str> = q.iter().map(|e| e.subject.as_str()).collect();
            ck.set_meta(&format!("queue.{s}.subjects"), serde_json::to_string(&subjects).expect("strings serialize"));
            if q.is_empty() {
                continue;
            }
            let tokens = Matrix::from_vec(q.len(), self.dim, q.iter().flat_map(|e| e.token.clone()).collect())
                .expect("queue tokens share one dimension");
            let scores = Matrix::from_vec(q.len(), 1, q.iter().map(|e| e.score).collect()).expect("nonempty");
            ck.insert(format!("queue.{s}.tokens"), &tokens);
            ck.insert(format!("queue.{s}.scores"), &scores);
        }
    }

    pub fn load_from(ck: &Checkpoint) -> Result<Self> {
        let num = |k: &str| -> Result<usize> {
            ck.meta(k)?
                .parse()
                .map_err(|_| Error::Parse(format!("{k} is not an integer")))
        };
        let policy = serde_json::from_str(ck.meta("queue.policy")?)
            .map_err(|e| Error::Parse(format!("queue.policy: {e}")))?;
        let mut queue = Self::new(num("queue.structures")?, num("queue.capacity")?, num("queue.dim")?, policy)?;
        for s in 0..queue.queues.len() {
            let subjects: Vec<String> = serde_json::from_str(ck.meta(&format!("queue.{s}.subjects"))?)
                .map_err(|e| Error::Parse(format!("queue.{s}.subjects: {e}")))?;
            if subjects.is_empty() {
                continue;
            }
            let tokens: Matrix<T> = ck.get(&format!("queue.{s}.tokens"))?;
            let scores: Matrix<T> = ck.get(&format!("queue.{s}.scores"))?;
            if tokens.rows() != subjects.len() || scores.rows() != subjects.len() {
                return Err(Error::Parse(format!("queue {s} arrays disagree in length")));
            }
            queue.queues[s] = subjects
                .into_iter()
                .enumerate()
                .map(|(i, subject)| QueueEntry {
                    token: tokens.row(i).to_vec(),
                    score: scores.get(i, 0),
                    subject,
                })
                .collect();
        }
        Ok(queue)
    }
}

/// Rejects tokens whose norm is not 1 within `tol`.
pub fn check_unit_rows<T: Scalar>(m: &Matrix<T>, tol: f64) -> Result<()> {
    for r in 0..m.rows() {
        let n: T = m.row(r).iter().map(|&x| x * x).sum::<T>().sqrt();
        if (n.as_f64() - 1.0).abs() > tol || n.as_f64() < NORM_EPS {
            return Err(Error::Numeric(format!("row {r} has norm {n}")));
        }
    }
    Ok(())
}
