//! Word-level vocabulary and a small pre-norm transformer decoder that
//! cross-attends to visual tokens.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::module::Module;
use crate::rng;
use crate::scalar::Scalar;
use crate::ten::{DiffArray, Matrix, Tape, Var};
use crate::vision::VisualFeatures;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const LN_EPS: f64 = 1e-5;

/// Splits text into words and single punctuation marks, preserving case.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() || c == '-' || c == '\'' {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Inverse of [`tokenize`] for text whose punctuation attaches to the preceding word.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for t in tokens {
        let t = t.as_ref();
        let punct = t.chars().all(|c| !c.is_alphanumeric());
        if !out.is_empty() && !punct {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    ids: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn build<S: AsRef<str>>(texts: &[S]) -> Self {
        let mut words: Vec<String> = texts.iter().flat_map(|t| tokenize(t.as_ref())).collect();
        words.sort();
        words.dedup();
        let tokens = SPECIALS.iter().map(|s| s.to_string()).chain(words).collect();
        Self::from_tokens(tokens).expect("specials are distinct from words")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Parse("vocabulary must start with <pad> <bos> <eos> <unk>".into()));
        }
        let mut ids = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Parse(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `BOS text EOS`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        std::iter::once(BOS)
            .chain(tokenize(text).iter().map(|t| self.id(t)))
            .chain(std::iter::once(EOS))
            .collect()
    }

    /// Drops specials other than UNK and stops at the first EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK]))
            .collect();
        detokenize(&words)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderDims {
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff_hidden: usize,
    pub max_len: usize,
}

impl Default for DecoderDims {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 4,
            blocks: 2,
            ff_hidden: 128,
            max_len: 128,
        }
    }
}

/// Which visual token groups the decoder sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualInputs {
    pub use_sv: bool,
    pub use_ts: bool,
}

impl VisualInputs {
    pub const FULL: Self = Self { use_sv: true, use_ts: true };
}

const BLOCK_PARAMS: [&str; 20] = [
    "ln1_g", "ln1_b", "sa_q", "sa_k", "sa_v", "sa_o", "ln2_g", "ln2_b", "ca_q", "ca_k", "ca_v", "ca_o", "ln3_g", "ln3_b",
    "ff_w1", "ff_b1", "ff_w2", "ff_b2", "mem_g", "mem_b",
];

/// Decoder conditioned on `[S^v; T^s]` (S^v rows first, then T^s grouped by structure).
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderModel<T> {
    pub dims: DecoderDims,
    pub vocab: Vocab,
    pub inputs: VisualInputs,
    visual_len: usize,
    names: Vec<String>,
    params: Vec<DiffArray<T>>,
}


impl<T: Scalar> DecoderModel<T> {
    /// `structures` and `k` fix the visual sequence layout; `d_o`, `d_v` its feature widths.
    pub fn new(
        dims: DecoderDims,
        vocab: Vocab,
        inputs: VisualInputs,
        structures: usize,
        k: usize,
        d_o: usize,
        d_v: usize,
        seed: u64,
    ) -> Result<Self> {
        if dims.width == 0 || dims.heads == 0 || dims.width % dims.heads != 0 {
            return Err(Error::Config(format!("width {} must be a positive multiple of heads {}", dims.width, dims.heads)));
        }
        if dims.max_len < 2 {
            return Err(Error::Config("decoder max length must be at least 2".into()));
        }
        if !inputs.use_sv && !inputs.use_ts {
            return Err(Error::Config("decoder needs S^v, T^s, or both".into()));
        }
        let visual_len = if inputs.use_sv { structures } else { 0 } + if inputs.use_ts { k * structures } else { 0 };
        let w = dims.width;
        let mut r = rng::derive(seed, "decoder");
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut add = |name: String, m: Matrix<T>| {
            names.push(name);
            params.push(DiffArray::new(m));
        };
        let std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        add("tok_emb".into(), rng::normal(&mut r, vocab.len(), w, 0.1));
        add("pos_emb".into(), rng::normal(&mut r, dims.max_len, w, 0.02));
        add("vis_o".into(), rng::normal(&mut r, d_o, w, std(d_o)));
        add("vis_v".into(), rng::normal(&mut r, d_v, w, std(d_v)));
        add("vis_pos".into(), rng::normal(&mut r, visual_len, w, 0.02));
        for b in 0..dims.blocks {
            for pname in BLOCK_PARAMS {
                let m = match pname {
                    "ln1_g" | "ln2_g" | "ln3_g" | "mem_g" => Matrix::filled(1, w, T::one()),
                    "ln1_b" | "ln2_b" | "ln3_b" | "mem_b" | "ff_b2" => Matrix::zeros(1, w),
                    "ff_b1" => Matrix::zeros(1, dims.ff_hidden),
                    "ff_w1" => rng::normal(&mut r, w, dims.ff_hidden, std(w)),
                    "ff_w2" => rng::normal(&mut r, dims.ff_hidden, w, std(dims.ff_hidden)),
                    _ => rng::normal(&mut r, w, w, std(w)),
                };
                add(format!("block{b}.{pname}"), m);
            }
        }
        add("lnf_g".into(), Matrix::filled(1, w, T::one()));
        add("lnf_b".into(), Matrix::zeros(1, w));
        add("out_w".into(), rng::normal(&mut r, w, vocab.len(), std(w)));
        add("out_b".into(), Matrix::zeros(1, vocab.len()));
        Ok(Self {
            dims,
            vocab,
            inputs,
            visual_len,
            names,
            params,
        })
    }

    /// Number of visual tokens the decoder attends to.
    pub fn visual_len(&self) -> usize {
        self.visual_len
    }

    /// Assembles the decoder's visual input from frozen features.
    pub fn visual_input(&self, f: &VisualFeatures<T>) -> Result<(Option<Matrix<T>>, Option<Matrix<T>>)> {
        let sv = self.inputs.use_sv.then(|| f.observations.clone());
        let ts = self.inputs.use_ts.then(|| f.selected.clone());
        let n = sv.as_ref().map_or(0, Matrix::rows) + ts.as_ref().map_or(0, Matrix::rows);
        if n != self.visual_len {
            return Err(Error::shape("decoder visual input", &[n], &[self.visual_len]));
        }
        Ok((sv, ts))
    }

    fn idx(&self, name: &str) -> usize {
        self.names.iter().position(|n| n == name).expect("known parameter")
    }

    fn block_idx(&self, b: usize, p: &str) -> usize {
        let base = 5 + b * BLOCK_PARAMS.len();
        base + BLOCK_PARAMS.iter().position(|&n| n == p).expect("known block parameter")
    }

    fn layer_norm(tape: &mut Tape<T>, x: Var, g: Var, b: Var) -> Result<Var> {
        let n = tape.layer_norm_rows(x, T::lit(LN_EPS));
        let s = tape.mul_row(n, g)?;
        tape.add_row(s, b)
    }

    fn attention(&self, tape: &mut Tape<T>, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
        let h = self.dims.heads;
        let dh = self.dims.width / h;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let (a, b) = (i * dh, (i + 1) * dh);
            let qh = tape.slice_cols(q, a, b)?;
            let kh = tape.slice_cols(k, a, b)?;
            let vh = tape.slice_cols(v, a, b)?;
            let s = tape.matmul_t(qh, kh)?;
            let s = tape.scale(s, scale);
            let p = if causal { tape.causal_softmax_rows(s)? } else { tape.softmax_rows(s) };
            heads.push(tape.matmul(p, vh)?);
        }
        tape.concat_cols(&heads)
    }

    /// Per-position next-token logits for teacher-forced `input` ids.
    pub fn logits_on(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        sv: Option<&Matrix<T>>,
        ts: Option<&Matrix<T>>,
        input: &[usize],
    ) -> Result<Var> {
        let n = input.len();
        if n == 0 || n > self.dims.max_len {
            return Err(Error::Param(format!("decoder input length {n} outside 1..={}", self.dims.max_len)));
        }
        if let Some(&bad) = input.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(Error::Param(format!("token id {bad} outside vocabulary of {}", self.vocab.len())));
        }
        let v = |name: &str| vars[self.idx(name)];

        let mut mem_parts = Vec::new();
        if let Some(sv) = sv {
            let c = tape.constant(sv.clone());
            mem_parts.push(tape.matmul(c, v("vis_o"))?);
        }
        if let Some(ts) = ts {
            let c = tape.constant(ts.clone());
            mem_parts.push(tape.matmul(c, v("vis_v"))?);
        }
        if mem_parts.is_empty() {
            return Err(Error::Param("no visual input".into()));
        }
        let mem = tape.concat_rows(&mem_parts)?;
        if tape.shape(mem)[0] != self.visual_len {
            return Err(Error::shape("decoder visual input", &tape.shape(mem), &[self.visual_len]));
        }
        let mem = tape.add(mem, v("vis_pos"))?;

        let tok = tape.gather_rows(v("tok_emb"), input)?;
        let pos_idx: Vec<usize> = (0..n).collect();
        let pos = tape.gather_rows(v("pos_emb"), &pos_idx)?;
        let mut x = tape.add(tok, pos)?;

        for b in 0..self.dims.blocks {
            let bv = |p: &str| vars[self.block_idx(b, p)];
            let h = Self::layer_norm(tape, x, bv("ln1_g"), bv("ln1_b"))?;
            let q = tape.matmul(h, bv("sa_q"))?;
            let k = tape.matmul(h, bv("sa_k"))?;
            let vv = tape.matmul(h, bv("sa_v"))?;
            let a = self.attention(tape, q, k, vv, true)?;
            let a = tape.matmul(a, bv("sa_o"))?;
            x = tape.add(x, a)?;

            let h = Self::layer_norm(tape, x, bv("ln2_g"), bv("ln2_b"))?;
            let m = Self::layer_norm(tape, mem, bv("mem_g"), bv("mem_b"))?;
            let q = tape.matmul(h, bv("ca_q"))?;
            let k = tape.matmul(m, bv("ca_k"))?;
            let vv = tape.matmul(m, bv("ca_v"))?;
            let a = self.attention(tape, q, k, vv, false)?;
            let a = tape.matmul(a, bv("ca_o"))?;
            x = tape.add(x, a)?;

            let h = Self::layer_norm(tape, x, bv("ln3_g"), bv("ln3_b"))?;
            let f = tape.matmul(h, bv("ff_w1"))?;
            let f = tape.add_row(f, bv("ff_b1"))?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, bv("ff_w2"))?;
            let f = tape.add_row(f, bv("ff_b2"))?;
            x = tape.add(x, f)?;
        }
        let h = Self::layer_norm(tape, x, v("lnf_g"), v("lnf_b"))?;
        let o = tape.matmul(h, v("out_w"))?;
        tape.add_row(o, v("out_b"))
    }

    /// Per-position `-log P(t_k | t_<k)` as an `(n-1) x 1` column; PAD targets give 0.
    pub fn position_losses_on(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        sv: Option<&Matrix<T>>,
        ts: Option<&Matrix<T>>,
        target: &[usize],
    ) -> Result<Var> {
        self.check_target(target)?;
        let logits = self.logits_on(tape, vars, sv, ts, &target[..target.len() - 1])?;
        let labels: Vec<Option<usize>> = target[1..].iter().map(|&t| (t != PAD).then_some(t)).collect();
        tape.nll_rows(logits, &labels)
    }

    /// Summed next-token loss of one target sequence.
    pub fn loss_rg_on(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        sv: Option<&Matrix<T>>,
        ts: Option<&Matrix<T>>,
        target: &[usize],
    ) -> Result<Var> {
        let rows = self.position_losses_on(tape, vars, sv, ts, target)?;
        Ok(tape.sum(rows))
    }

    fn check_target(&self, target: &[usize]) -> Result<()> {
        if target.len() < 2 {
            return Err(Error::Param("target must hold at least BOS and EOS".into()));
        }
        if target[0] != BOS || *target.last().unwrap() != EOS {
            return Err(Error::Param("target must start with BOS and end with EOS".into()));
        }
        if target.len() > self.dims.max_len + 1 {
            return Err(Error::Param(format!("target length {} exceeds {}", target.len(), self.dims.max_len + 1)));
        }
        if let Some(&bad) = target.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(Error::Param(format!("unknown token id {bad}")));
        }
        Ok(())
    }

    /// Value of the summed next-token loss.
    pub fn loss_rg(&self, sv: Option<&Matrix<T>>, ts: Option<&Matrix<T>>, target: &[usize]) -> Result<T> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let l = self.loss_rg_on(&mut tape, &vars, sv, ts, target)?;
        Ok(tape.value(l).item())
    }

    /// Greedy decoding from BOS until EOS or `max_len` generated tokens. Output excludes BOS/EOS.
    pub fn generate(&self, sv: Option<&Matrix<T>>, ts: Option<&Matrix<T>>, max_len: usize) -> Result<Vec<usize>> {
        if max_len == 0 {
            return Err(Error::Param("generation max length must be at least 1".into()));
        }
        let frozen = self.without_grad();
        let mut seq = vec![BOS];
        let mut out = Vec::new();
        while out.len() < max_len && seq.len() <= self.dims.max_len {
            let mut tape = Tape::new();
            let vars = frozen.bind(&mut tape);
            let logits = frozen.logits_on(&mut tape, &vars, sv, ts, &seq)?;
            let lv = tape.value(logits);
            let last = lv.row(lv.rows() - 1);
            let next = argmax(last);
            if next == EOS {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }

    fn without_grad(&self) -> Self {
        let mut m = self.clone();
        m.set_trainable(false);
        m
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        Module::save_into(self, "decoder", ck);
        ck.set_meta("decoder.vocab", serde_json::to_string(self.vocab.tokens()).expect("strings serialize"));
        ck.set_meta("decoder.dims", serde_json::to_string(&self.dims).expect("dims serialize"));
        ck.set_meta("decoder.inputs", serde_json::to_string(&self.inputs).expect("flags serialize"));
    }

    pub fn vocab_from(ck: &Checkpoint) -> Result<Vocab> {
        let tokens: Vec<String> = serde_json::from_str(ck.meta("decoder.vocab")?)
            .map_err(|e| Error::Parse(format!("decoder.vocab: {e}")))?;
        Vocab::from_tokens(tokens)
    }

    pub fn load_from(&mut self, ck: &Checkpoint) -> Result<()> {
        Module::load_from(self, "decoder", ck)
    }
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

impl<T: Scalar> Module<T> for DecoderModel<T> {
    fn params(&self) -> Vec<(&str, &DiffArray<T>)> {
        self.names.iter().map(String::as_str).zip(self.params.iter()).collect()
    }

    fn params_mut(&mut self) -> Vec<(&str, &mut DiffArray<T>)> {
        self.names.iter().map(String::as_str).zip(self.params.iter_mut()).collect()
    }
}

impl<T: Scalar> DecoderModel<T> {
    /// Direct access for constructed-weight tests.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut DiffArray<T>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }
}
