//! Frozen hashed bag-of-words text encoder.
//!
//! Words are lowercased alphanumeric runs. Each word is hashed (seeded
//! FNV-1a) into one of `buckets` slots; the count vector is multiplied by a
//! fixed Gaussian projection and normalized to unit length.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::report::ParsedReport;
use crate::rng;
use crate::scalar::Scalar;
use crate::ten::{l2_normalize, Matrix};

pub const DEFAULT_BUCKETS: usize = 4096;
pub const DEFAULT_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedder<T> {
    seed: u64,
    projection: Matrix<T>,
}

/// Per-structure textual tokens for one subject; `None` where the bucket is empty.
#[derive(Clone, Debug, PartialEq)]
pub struct TextObservationTokens<T> {
    pub subject_id: String,
    pub tokens: Vec<Option<Vec<T>>>,
}

pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

fn fnv1a(seed: u64, word: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in word.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl<T: Scalar> TextEmbedder<T> {
    pub fn new(seed: u64, buckets: usize, dim: usize) -> Result<Self> {
        if buckets == 0 || dim == 0 {
            return Err(Error::Param("text embedder needs positive buckets and dim".into()));
        }
        let mut r = rng::derive(seed, "text-embedder");
        let projection = rng::normal(&mut r, buckets, dim, 1.0 / (buckets as f64).sqrt());
        Ok(Self { seed, projection })
    }

    pub fn buckets(&self) -> usize {
        self.projection.rows()
    }

    pub fn dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn projection(&self) -> &Matrix<T> {
        &self.projection
    }

    pub fn bucket_of(&self, word: &str) -> usize {
        (fnv1a(self.seed, word) % self.buckets() as u64) as usize
    }

    /// Hashed word counts over all sentences of a bucket.
    pub fn counts(&self, sentences: &[String]) -> Vec<(usize, usize)> {
        let mut counts = std::collections::BTreeMap::new();
        for s in sentences {
            for w in words(s) {
                *counts.entry(self.bucket_of(&w)).or_insert(0usize) += 1;
            }
        }
        counts.into_iter().collect()
    }

    /// Embeds the concatenated sentences of one structure. Returns `None`
    /// for an empty sentence list.
    pub fn embed_structure(&self, sentences: &[String]) -> Result<Option<Vec<T>>> {
        if sentences.is_empty() {
            return Ok(None);
        }
        let counts = self.counts(sentences);
        if counts.is_empty() {
            return Err(Error::Degenerate("sentences contain no words".into()));
        }
        let mut v = vec![T::zero(); self.dim()];
        for (b, c) in counts {
            let c = T::lit(c as f64);
            for (x, &p) in v.iter_mut().zip(self.projection.row(b)) {
                *x += c * p;
            }
        }
        l2_normalize(&v).map(Some)
    }

    pub fn embed_report(&self, report: &ParsedReport) -> Result<TextObservationTokens<T>> {
        let tokens = report
            .buckets
            .iter()
            .map(|b| self.embed_structure(b))
            .collect::<Result<_>>()?;
        Ok(TextObservationTokens {
            subject_id: report.subject_id.clone(),
            tokens,
        })
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        ck.set_meta("text.seed", self.seed.to_string());
        ck.insert("text.projection", &self.projection);
    }

    pub fn load_from(ck: &Checkpoint) -> Result<Self> {
        let seed = ck
            .meta("text.seed")?
            .parse()
            .map_err(|_| Error::Parse("text.seed is not an integer".into()))?;
        Ok(Self {
            seed,
            projection: ck.get("text.projection")?,
        })
    }
}
