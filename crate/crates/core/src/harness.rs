//! Two-stage training, evaluation, retrieval and ablation runs driven by a
//! [`RunConfig`], with on-disk checkpoints, manifests and metric files.
//!
//! Run directory layout:
//!
//! ```text
//! <output_dir>/config.toml
//! <output_dir>/stage1/{checkpoint.bin, manifest.json, loss_log.jsonl}
//! <output_dir>/stage2/{checkpoint.bin, manifest.json, loss_log.jsonl}
//! <output_dir>/eval/<split>/{metrics.json, predictions.jsonl}
//! <output_dir>/retrieve/<split>/recall.json
//! <output_dir>/generate/<split>.txt
//! <output_dir>/ablate/<grid>/<variant>/...   and  ablate/<grid>/summary.json
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::align::{contrastive_losses, Candidate, DiversityQueue, ProjectionHeads};
use crate::checkpoint::{sha256_hex, Checkpoint};
use crate::config::RunConfig;
use crate::decoder::{tokenize, DecoderModel, VisualInputs, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{nlg_ce_report, retrieval_recall, MetricReport, RecallReport, SubjectTokens};
use crate::module::Module;
use crate::optim::AdamW;
use crate::report::{parse_report, StructureCatalog};
use crate::rng;
use crate::synth::{self, label_report, Case, Split, Taxonomy};
use crate::text_embed::TextEmbedder;
use crate::ten::{Matrix, Tape, NORM_EPS};
use crate::vision::{patchify, VisionDims, VisionModel, VisualFeatures};

/// Tag written into manifests; bump when artifact layouts change.
pub const ARTIFACT_VERSION: &str = "ctrg-artifacts/1";

type F = f64;

/// Cases plus everything derived from them that never changes during training.
pub struct Dataset {
    pub catalog: StructureCatalog,
    pub taxonomy: Taxonomy,
    pub cases: Vec<Case<F>>,
    pub embedder: TextEmbedder<F>,
    /// Per case: `N^s` optional text tokens.
    pub text: Vec<Vec<Option<Vec<F>>>>,
    /// Per case: `N^v x patch_len` flattened patches.
    pub patches: Vec<Matrix<F>>,
}

impl Dataset {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let g = &cfg.data.generator;
        let full = match &cfg.data.catalog {
            Some(p) => StructureCatalog::load(p)?,
            None => StructureCatalog::chest_ct(),
        };
        let catalog = full.truncated(g.structures)?;
        let cases = match &cfg.data.corpus {
            Some(p) => synth::load_corpus(p)?,
            None => synth::generate_corpus(g, &full)?,
        };
        Self::from_cases(cfg, catalog, cases)
    }

    pub fn from_cases(cfg: &RunConfig, catalog: StructureCatalog, cases: Vec<Case<F>>) -> Result<Self> {
        let taxonomy = Taxonomy::for_catalog(&catalog)?;
        let embedder = TextEmbedder::new(cfg.model.text_seed, cfg.model.text_buckets, cfg.model.d_t)?;
        let layout = synth::PatchLayout::new(cfg.data.generator.volume, cfg.data.generator.patch)?;
        let mut text = Vec::with_capacity(cases.len());
        let mut patches = Vec::with_capacity(cases.len());
        for c in &cases {
            let parsed = parse_report(&c.id, &c.report, &catalog);
            text.push(embedder.embed_report(&parsed)?.tokens);
            patches.push(patchify(&c.volume, &layout)?);
        }
        Ok(Self {
            catalog,
            taxonomy,
            cases,
            embedder,
            text,
            patches,
        })
    }

    pub fn split(&self, split: Split) -> Vec<usize> {
        (0..self.cases.len()).filter(|&i| self.cases[i].split == split).collect()
    }

    /// Stored labels, or the rule labeler applied to the reference report.
    pub fn labels(&self, i: usize) -> Vec<u8> {
        self.cases[i]
            .labels
            .clone()
            .unwrap_or_else(|| label_report(&self.cases[i].report, &self.taxonomy))
    }
}

/// Trainable stage-1 state.
pub struct Stage1 {
    pub vision: VisionModel<F>,
    pub heads: ProjectionHeads<F>,
    pub queue: DiversityQueue<F>,
}

impl Stage1 {
    pub fn init(cfg: &RunConfig, structures: usize) -> Result<Self> {
        let m = &cfg.model;
        let g = &cfg.data.generator;
        let dims = VisionDims {
            layout: synth::PatchLayout::new(g.volume, g.patch)?,
            structures,
            d_v: m.d_v,
            d_q: m.d_q,
            d_a: m.d_a,
            d_o: m.d_o,
        };
        Ok(Self {
            vision: VisionModel::new(dims, cfg.seed),
            heads: ProjectionHeads::new(m.d_o, m.d_t, m.d_p, cfg.pretrain.tau, cfg.seed)?,
            queue: DiversityQueue::new(structures, cfg.pretrain.queue_size, m.d_t, cfg.pretrain.queue)?,
        })
    }

    pub fn to_checkpoint(&self, embedder: &TextEmbedder<F>, stage1_hash: &str) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "stage1");
        ck.set_meta("stage1_hash", stage1_hash);
        self.vision.save_into(&mut ck);
        Module::save_into(&self.heads, "heads", &mut ck);
        embedder.save_into(&mut ck);
        self.queue.save_into(&mut ck);
        ck
    }

    pub fn from_checkpoint(cfg: &RunConfig, structures: usize, ck: &Checkpoint) -> Result<Self> {
        let mut s = Self::init(cfg, structures)?;
        s.vision.load_from(ck)?;
        Module::load_from(&mut s.heads, "heads", ck)?;
        s.queue = DiversityQueue::load_from(ck)?;
        Ok(s)
    }

    /// Digest of everything stage 2 must leave untouched.
    pub fn frozen_digest(&self, embedder: &TextEmbedder<F>) -> String {
        frozen_digest(&self.vision, embedder)
    }
}

pub fn frozen_digest(vision: &VisionModel<F>, embedder: &TextEmbedder<F>) -> String {
    let text = crate::checkpoint::param_digest([("text.projection", embedder.projection())]);
    sha256_hex(format!("{}{}", vision.digest("vision"), text).as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub itc: f64,
    pub kl: f64,
    pub pre: f64,
    pub tau: f64,
    /// Candidates the queue accepted after this step.
    pub enqueued: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderLossRecord {
    pub step: usize,
    pub loss: f64,
}

fn batches(n: usize, batch: usize, steps: usize, seed: u64, label: &str) -> Vec<Vec<usize>> {
    let mut r = rng::derive(seed, label);
    let mut order: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut b = Vec::with_capacity(batch);
        while b.len() < batch.min(n) {
            if order.is_empty() {
                order = (0..n).collect();
                order.shuffle(&mut r);
                order.reverse();
            }
            b.push(order.pop().expect("refilled"));
        }
        out.push(b);
    }
    out
}

/// Loss values and gradients for one stage-1 batch; gradients are left in the modules.
pub fn pretrain_step(
    cfg: &RunConfig,
    data: &Dataset,
    state: &mut Stage1,
    batch: &[usize],
) -> Result<(LossRecord, Vec<Candidate<F>>)> {
    let p = &cfg.pretrain;
    let alpha = match (p.itc, p.kl) {
        (true, true) => p.alpha,
        (true, false) => 0.0,
        (false, true) => 1.0,
        (false, false) => p.alpha,
    };
    let mut tape = Tape::new();
    let vvars = state.vision.bind(&mut tape);
    let hvars = state.heads.bind(&mut tape);
    let mut sv_rows = Vec::new();
    let mut st_rows: Vec<F> = Vec::new();
    let mut owners = Vec::new();
    for &i in batch {
        let present: Vec<usize> = (0..data.text[i].len()).filter(|&s| data.text[i][s].is_some()).collect();
        if present.is_empty() {
            continue;
        }
        let x = tape.constant(data.patches[i].clone());
        let f = state.vision.embed_on(&mut tape, &vvars, x)?;
        let (_, s) = state.vision.observe_on(&mut tape, &vvars, f)?;
        sv_rows.push(tape.gather_rows(s, &present)?);
        for &s in &present {
            st_rows.extend_from_slice(data.text[i][s].as_ref().expect("present"));
            owners.push((s, data.cases[i].id.clone()));
        }
    }
    if sv_rows.is_empty() {
        return Err(Error::Param("batch has no structure with report text".into()));
    }
    let m = owners.len();
    let sv = tape.concat_rows(&sv_rows)?;
    let st = tape.constant(Matrix::from_vec(m, cfg.model.d_t, st_rows)?);
    let [gv_w, gv_b, gt_w, gt_b, log_tau] = hvars[..] else {
        unreachable!("five head parameters")
    };
    let zv = tape.matmul(sv, gv_w)?;
    let zv = tape.add_row(zv, gv_b)?;
    let zv = tape.l2_normalize_rows(zv, NORM_EPS)?;
    let zt = tape.matmul(st, gt_w)?;
    let zt = tape.add_row(zt, gt_b)?;
    let zt = tape.l2_normalize_rows(zt, NORM_EPS)?;
    let snapshot = state.queue.snapshot();
    let negatives = if snapshot.is_empty() {
        None
    } else {
        let q = tape.constant(snapshot);
        let q = tape.matmul(q, gt_w)?;
        let q = tape.add_row(q, gt_b)?;
        Some(tape.l2_normalize_rows(q, NORM_EPS)?)
    };
    let l = contrastive_losses(&mut tape, zv, zt, log_tau, negatives, alpha)?;
    let rec = LossRecord {
        step: 0,
        itc: tape.value(l.itc).item(),
        kl: tape.value(l.kl).item(),
        pre: tape.value(l.pre).item(),
        tau: state.heads.tau(),
        enqueued: 0,
    };
    if !(rec.itc.is_finite() && rec.kl.is_finite() && rec.pre.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite pretraining loss: itc={}, kl={}, pre={}, tau={}",
            rec.itc, rec.kl, rec.pre, rec.tau
        )));
    }
    if p.itc || p.kl {
        let grads = tape.backward(l.pre)?;
        state.vision.accumulate(&vvars, &grads);
        state.heads.accumulate(&hvars, &grads);
    }
    let st_val = tape.value(st);
    let candidates = owners
        .into_iter()
        .enumerate()
        .map(|(r, (structure, subject))| Candidate {
            structure,
            token: st_val.row(r).to_vec(),
            subject,
        })
        .collect();
    Ok((rec, candidates))
}

/// Stage 1 in memory. Returns the trained state and the per-step loss log.
pub fn pretrain(cfg: &RunConfig, data: &Dataset) -> Result<(Stage1, Vec<LossRecord>)> {
    let mut state = Stage1::init(cfg, data.catalog.len())?;
    let train = data.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Param("training split is empty".into()));
    }
    let p = &cfg.pretrain;
    if !p.enabled {
        return Ok((state, Vec::new()));
    }
    let o = &p.optim;
    let mut opt_v = AdamW::new(o.clone(), &state.vision);
    let mut opt_h = AdamW::new(o.clone(), &state.heads);
    let mut log = Vec::with_capacity(o.steps);
    for (step, b) in batches(train.len(), o.batch_size, o.steps, cfg.seed, "pretrain-batches")
        .into_iter()
        .enumerate()
    {
        let idx: Vec<usize> = b.iter().map(|&j| train[j]).collect();
        let (mut rec, cands) = pretrain_step(cfg, data, &mut state, &idx).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("step {step}: {msg}")),
            e => e,
        })?;
        rec.step = step;
        if p.itc || p.kl {
            let lr = o.lr_at(step);
            opt_v.step(&mut state.vision, lr);
            opt_h.step(&mut state.heads, lr);
            state.heads.clamp_tau();
        }
        let heads = &state.heads;
        rec.enqueued = state.queue.update_with(&cands, |m| heads.project_text(m))?;
        if step % 100 == 0 {
            debug!("pretrain step {step}: itc {:.4} kl {:.4} pre {:.4} tau {:.4}", rec.itc, rec.kl, rec.pre, rec.tau);
        }
        log.push(rec);
    }
    Ok((state, log))
}

/// Per-case projected tokens for retrieval: volumes (`N^s x d_p`) and texts.
pub fn retrieval_tokens(
    state: &Stage1,
    data: &Dataset,
    cases: &[usize],
) -> Result<(Vec<SubjectTokens<F>>, Vec<Matrix<F>>)> {
    let mut texts = Vec::with_capacity(cases.len());
    let mut vols = Vec::with_capacity(cases.len());
    for &i in cases {
        let feats = state.vision.embed_patches(&data.patches[i])?;
        let obs = crate::vision::observe(
            &feats,
            &state.vision.queries.value,
            &state.vision.w0.value,
            &state.vision.w1.value,
            &state.vision.w2.value,
        )?;
        vols.push(state.heads.project_visual(&obs.observations)?);
        let mut tokens = Vec::with_capacity(data.text[i].len());
        for t in &data.text[i] {
            tokens.push(match t {
                Some(t) => {
                    let m = state.heads.project_text(&Matrix::row_vector(t.clone())?)?;
                    Some(m.row(0).to_vec())
                }
                None => None,
            });
        }
        texts.push(SubjectTokens { tokens });
    }
    Ok((texts, vols))
}

pub fn retrieval(cfg: &RunConfig, state: &Stage1, data: &Dataset, split: Split) -> Result<RecallReport> {
    let cases = data.split(split);
    if cases.is_empty() {
        return Err(Error::Param(format!("{split:?} split is empty")));
    }
    let (texts, vols) = retrieval_tokens(state, data, &cases)?;
    Ok(RecallReport {
        values: retrieval_recall(&texts, &vols, &cfg.eval.ks)?,
        ks: cfg.eval.ks.clone(),
        cases: cases.len(),
        config_hash: cfg.stage1_hash(),
    })
}

/// Supplies frozen visual features to stage 2.
pub trait FeatureSource {
    fn features(&mut self, case: usize) -> Result<VisualFeatures<F>>;
    /// Digest of the parameters the source must not change.
    fn frozen_digest(&self) -> String;
}

/// The normal source: a frozen stage-1 vision model.
pub struct FrozenVision<'a> {
    pub vision: VisionModel<F>,
    pub data: &'a Dataset,
    pub k: usize,
}

impl<'a> FrozenVision<'a> {
    pub fn new(mut vision: VisionModel<F>, data: &'a Dataset, k: usize) -> Self {
        vision.freeze();
        Self { vision, data, k }
    }
}

impl FeatureSource for FrozenVision<'_> {
    fn features(&mut self, case: usize) -> Result<VisualFeatures<F>> {
        let feats = self.vision.embed_patches(&self.data.patches[case])?;
        let obs = crate::vision::observe(
            &feats,
            &self.vision.queries.value,
            &self.vision.w0.value,
            &self.vision.w1.value,
            &self.vision.w2.value,
        )?;
        let sel = crate::vision::select_patches(&obs.attention, &feats, self.k)?;
        Ok(VisualFeatures {
            observations: obs.observations,
            selected: sel.tokens,
        })
    }

    fn frozen_digest(&self) -> String {
        frozen_digest(&self.vision, &self.data.embedder)
    }
}

fn decoder_inputs(cfg: &RunConfig) -> VisualInputs {
    VisualInputs {
        use_sv: cfg.decoder.use_sv,
        use_ts: cfg.decoder.use_ts,
    }
}

/// Features of `cases`, each split into the optional `S^v` / `T^s` parts the decoder sees.
type DecoderVisual = (Option<Matrix<F>>, Option<Matrix<F>>);

fn collect_visual(
    model: &DecoderModel<F>,
    source: &mut dyn FeatureSource,
    cases: &[usize],
) -> Result<Vec<DecoderVisual>> {
    cases
        .iter()
        .map(|&i| model.visual_input(&source.features(i)?))
        .collect()
}

/// Stage 2 in memory: trains a fresh decoder on frozen features.
///
/// The source's frozen digest is compared before and after training; any
/// change is a contract violation.
pub fn train_decoder(
    cfg: &RunConfig,
    data: &Dataset,
    source: &mut dyn FeatureSource,
) -> Result<(DecoderModel<F>, Vec<DecoderLossRecord>)> {
    let before = source.frozen_digest();
    let train = data.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Param("training split is empty".into()));
    }
    let reports: Vec<&str> = train.iter().map(|&i| data.cases[i].report.as_str()).collect();
    let vocab = Vocab::build(&reports);
    let mut model = DecoderModel::new(
        cfg.decoder.dims,
        vocab,
        decoder_inputs(cfg),
        data.catalog.len(),
        cfg.model.k,
        cfg.model.d_o,
        cfg.model.d_v,
        cfg.seed,
    )?;
    let visual = collect_visual(&model, source, &train)?;
    let targets: Vec<Vec<usize>> = train.iter().map(|&i| model.vocab.encode(&data.cases[i].report)).collect();
    let log = fit_decoder(cfg, &mut model, &visual, &targets)?;
    let after = source.frozen_digest();
    if before != after {
        return Err(Error::Contract(format!(
            "frozen visual parameters changed during decoder training ({before} -> {after})"
        )));
    }
    Ok((model, log))
}

/// Teacher-forced training of `model` on `(visual, target)` pairs.
pub fn fit_decoder(
    cfg: &RunConfig,
    model: &mut DecoderModel<F>,
    visual: &[DecoderVisual],
    targets: &[Vec<usize>],
) -> Result<Vec<DecoderLossRecord>> {
    let o = &cfg.decoder.optim;
    let mut opt = AdamW::new(o.clone(), &*model);
    let mut log = Vec::with_capacity(o.steps);
    for (step, b) in batches(targets.len(), o.batch_size, o.steps, cfg.seed, "decoder-batches")
        .into_iter()
        .enumerate()
    {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let mut losses = Vec::with_capacity(b.len());
        for &j in &b {
            let (sv, ts) = &visual[j];
            losses.push(model.loss_rg_on(&mut tape, &vars, sv.as_ref(), ts.as_ref(), &targets[j])?);
        }
        let all = tape.concat_rows(&losses)?;
        let loss = tape.mean(all);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite decoder loss {value} at step {step}")));
        }
        let grads = tape.backward(loss)?;
        model.accumulate(&vars, &grads);
        opt.step(model, o.lr_at(step));
        if step % 100 == 0 {
            debug!("decoder step {step}: loss {value:.4}");
        }
        log.push(DecoderLossRecord { step, loss: value });
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub reference: String,
    pub generated: String,
}

pub fn generate_reports(
    cfg: &RunConfig,
    model: &DecoderModel<F>,
    source: &mut dyn FeatureSource,
    data: &Dataset,
    cases: &[usize],
) -> Result<Vec<Prediction>> {
    let visual = collect_visual(model, source, cases)?;
    cases
        .iter()
        .zip(&visual)
        .map(|(&i, (sv, ts))| {
            let ids = model.generate(sv.as_ref(), ts.as_ref(), cfg.eval.max_gen_len)?;
            Ok(Prediction {
                id: data.cases[i].id.clone(),
                reference: data.cases[i].report.clone(),
                generated: model.vocab.decode(&ids),
            })
        })
        .collect()
}

/// NLG and CE metrics of generated reports against references and stored labels.
pub fn score_predictions(
    cfg: &RunConfig,
    data: &Dataset,
    cases: &[usize],
    preds: &[Prediction],
) -> Result<MetricReport> {
    if preds.is_empty() {
        return Err(Error::Param("nothing to evaluate".into()));
    }
    let hyps: Vec<Vec<String>> = preds.iter().map(|p| tokenize(&p.generated)).collect();
    let refs: Vec<Vec<String>> = preds.iter().map(|p| tokenize(&p.reference)).collect();
    let pred_labels: Vec<Vec<u8>> = preds.iter().map(|p| label_report(&p.generated, &data.taxonomy)).collect();
    let true_labels: Vec<Vec<u8>> = cases.iter().map(|&i| data.labels(i)).collect();
    nlg_ce_report(&hyps, &refs, &pred_labels, &true_labels, cfg.eval.averaging, &cfg.hash())
}

// ---------------------------------------------------------------------------
// On-disk commands

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: u8,
    pub version: String,
    pub config_hash: String,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    /// Digest of the vision and text-embedder parameters.
    pub frozen_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage1_sha256: Option<String>,
    pub loss_log: String,
    pub wall_seconds: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &(serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"))
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn jsonl<S: Serialize>(header: &serde_json::Value, records: &[S]) -> String {
    let mut out = serde_json::to_string(header).expect("header serializes");
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn stage1_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("stage1")
}

pub fn stage2_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("stage2")
}

pub fn write_config_snapshot(cfg: &RunConfig) -> Result<()> {
    write_file(&cfg.output_dir.join("config.toml"), &cfg.to_toml())
}

/// `gen-data`: writes the configured synthetic corpus under `dir`.
pub fn cmd_gen_data(cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    let cases = synth::generate_corpus::<F>(&cfg.data.generator, &StructureCatalog::chest_ct())?;
    let path = synth::save_corpus(dir, &cases)?;
    info!("wrote {} cases to {}", cases.len(), path.display());
    Ok(path)
}

/// `pretrain`: stage 1, checkpoint, manifest, loss log.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<RunManifest> {
    let t0 = Instant::now();
    write_config_snapshot(cfg)?;
    let data = Dataset::load(cfg)?;
    let (state, log) = pretrain(cfg, &data)?;
    let dir = stage1_dir(cfg);
    let hash = cfg.stage1_hash();
    let ck_path = dir.join("checkpoint.bin");
    let sha = state.to_checkpoint(&data.embedder, &hash).save(&ck_path)?;
    let log_path = dir.join("loss_log.jsonl");
    write_file(&log_path, &jsonl(&serde_json::json!({ "config_hash": hash }), &log))?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        info!("stage 1: L_pre {:.4} -> {:.4}, tau {:.4}", first.pre, last.pre, last.tau);
    }
    let manifest = RunManifest {
        stage: 1,
        version: ARTIFACT_VERSION.into(),
        config_hash: hash,
        checkpoint: "checkpoint.bin".into(),
        checkpoint_sha256: sha,
        frozen_digest: state.frozen_digest(&data.embedder),
        stage1_sha256: None,
        loss_log: "loss_log.jsonl".into(),
        wall_seconds: t0.elapsed().as_secs_f64(),
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Loads the stage-1 artifacts and checks hashes against the manifest and `cfg`.
pub fn load_stage1(cfg: &RunConfig, data: &Dataset) -> Result<(Stage1, RunManifest)> {
    let dir = stage1_dir(cfg);
    let manifest = RunManifest::load(&dir.join("manifest.json"))?;
    if manifest.config_hash != cfg.stage1_hash() {
        return Err(Error::Contract(format!(
            "stage-1 artifacts were produced by a different configuration ({} vs {})",
            manifest.config_hash,
            cfg.stage1_hash()
        )));
    }
    let (ck, sha) = Checkpoint::load(&dir.join(&manifest.checkpoint))?;
    if sha != manifest.checkpoint_sha256 {
        return Err(Error::Contract(format!(
            "stage-1 checkpoint hash {sha} does not match manifest {}",
            manifest.checkpoint_sha256
        )));
    }
    let state = Stage1::from_checkpoint(cfg, data.catalog.len(), &ck)?;
    let embedder = TextEmbedder::<F>::load_from(&ck)?;
    if embedder.projection() != data.embedder.projection() {
        return Err(Error::Contract("text embedder differs from the stage-1 checkpoint".into()));
    }
    if state.frozen_digest(&data.embedder) != manifest.frozen_digest {
        return Err(Error::Contract("stage-1 parameters do not match the manifest digest".into()));
    }
    Ok((state, manifest))
}

/// `train-decoder`: stage 2 on the frozen stage-1 checkpoint.
pub fn cmd_train_decoder(cfg: &RunConfig) -> Result<RunManifest> {
    let data = Dataset::load(cfg)?;
    let (state, _) = load_stage1(cfg, &data)?;
    let mut source = FrozenVision::new(state.vision, &data, cfg.model.k);
    cmd_train_decoder_with(cfg, &data, &mut source)
}

/// Stage 2 with an explicit feature source (used to test the freeze contract).
pub fn cmd_train_decoder_with(cfg: &RunConfig, data: &Dataset, source: &mut dyn FeatureSource) -> Result<RunManifest> {
    let t0 = Instant::now();
    write_config_snapshot(cfg)?;
    let s1 = RunManifest::load(&stage1_dir(cfg).join("manifest.json"))?;
    if source.frozen_digest() != s1.frozen_digest {
        return Err(Error::Contract("visual parameters differ from the stage-1 manifest".into()));
    }
    let (model, log) = train_decoder(cfg, data, source)?;
    if source.frozen_digest() != s1.frozen_digest {
        return Err(Error::Contract("visual parameters changed during decoder training".into()));
    }
    let dir = stage2_dir(cfg);
    let mut ck = Checkpoint::new();
    ck.set_meta("kind", "stage2");
    ck.set_meta("config_hash", cfg.hash());
    model.save_into(&mut ck);
    let sha = ck.save(&dir.join("checkpoint.bin"))?;
    write_file(&dir.join("loss_log.jsonl"), &jsonl(&serde_json::json!({ "config_hash": cfg.hash() }), &log))?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        info!("stage 2: L_rg {:.4} -> {:.4}", first.loss, last.loss);
    }
    let manifest = RunManifest {
        stage: 2,
        version: ARTIFACT_VERSION.into(),
        config_hash: cfg.hash(),
        checkpoint: "checkpoint.bin".into(),
        checkpoint_sha256: sha,
        frozen_digest: s1.frozen_digest,
        stage1_sha256: Some(s1.checkpoint_sha256),
        loss_log: "loss_log.jsonl".into(),
        wall_seconds: t0.elapsed().as_secs_f64(),
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Loads both stages and returns the decoder with its frozen feature source.
pub fn load_stage2<'a>(cfg: &RunConfig, data: &'a Dataset) -> Result<(DecoderModel<F>, FrozenVision<'a>, RunManifest)> {
    let (state, s1) = load_stage1(cfg, data)?;
    let dir = stage2_dir(cfg);
    let manifest = RunManifest::load(&dir.join("manifest.json"))?;
    if manifest.config_hash != cfg.hash() {
        return Err(Error::Contract(format!(
            "stage-2 artifacts were produced by a different configuration ({} vs {})",
            manifest.config_hash,
            cfg.hash()
        )));
    }
    if manifest.stage1_sha256.as_deref() != Some(s1.checkpoint_sha256.as_str()) {
        return Err(Error::Contract("stage-2 checkpoint was trained on a different stage-1 checkpoint".into()));
    }
    let (ck, sha) = Checkpoint::load(&dir.join(&manifest.checkpoint))?;
    if sha != manifest.checkpoint_sha256 {
        return Err(Error::Contract(format!(
            "stage-2 checkpoint hash {sha} does not match manifest {}",
            manifest.checkpoint_sha256
        )));
    }
    let vocab = DecoderModel::<F>::vocab_from(&ck)?;
    let mut model = DecoderModel::new(
        cfg.decoder.dims,
        vocab,
        decoder_inputs(cfg),
        data.catalog.len(),
        cfg.model.k,
        cfg.model.d_o,
        cfg.model.d_v,
        cfg.seed,
    )?;
    model.load_from(&ck)?;
    Ok((model, FrozenVision::new(state.vision, data, cfg.model.k), manifest))
}

/// `generate`: one report per case of `split`, with a provenance header.
pub fn cmd_generate(cfg: &RunConfig, split: Split) -> Result<PathBuf> {
    let data = Dataset::load(cfg)?;
    let (model, mut source, manifest) = load_stage2(cfg, &data)?;
    let cases = data.split(split);
    if cases.is_empty() {
        return Err(Error::Param(format!("{split:?} split is empty")));
    }
    let preds = generate_reports(cfg, &model, &mut source, &data, &cases)?;
    let mut out = String::new();
    writeln!(out, "# checkpoint-sha256: {}", manifest.checkpoint_sha256).unwrap();
    writeln!(out, "# config-hash: {}", cfg.hash()).unwrap();
    for p in &preds {
        writeln!(out, "{}\t{}", p.id, p.generated).unwrap();
    }
    let path = cfg.output_dir.join("generate").join(format!("{}.txt", split_name(split)));
    write_file(&path, &out)?;
    Ok(path)
}

pub fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

/// `eval`: generated-report metrics for `split`.
pub fn cmd_eval(cfg: &RunConfig, split: Split) -> Result<MetricReport> {
    let data = Dataset::load(cfg)?;
    let (model, mut source, _) = load_stage2(cfg, &data)?;
    let cases = data.split(split);
    if cases.is_empty() {
        return Err(Error::Param(format!("{split:?} split is empty")));
    }
    let preds = generate_reports(cfg, &model, &mut source, &data, &cases)?;
    let report = score_predictions(cfg, &data, &cases, &preds)?;
    let dir = cfg.output_dir.join("eval").join(split_name(split));
    write_file(&dir.join("metrics.json"), &(serde_json::to_string_pretty(&report).expect("metrics serialize") + "\n"))?;
    write_file(&dir.join("predictions.jsonl"), &jsonl(&serde_json::json!({ "config_hash": cfg.hash() }), &preds))?;
    Ok(report)
}

/// `retrieve`: report-to-volume recall@K on `split` from the stage-1 checkpoint.
pub fn cmd_retrieve(cfg: &RunConfig, split: Split) -> Result<RecallReport> {
    let data = Dataset::load(cfg)?;
    let (state, _) = load_stage1(cfg, &data)?;
    let report = retrieval(cfg, &state, &data, split)?;
    let path = cfg.output_dir.join("retrieve").join(split_name(split)).join("recall.json");
    write_file(&path, &(serde_json::to_string_pretty(&report).expect("recall serializes") + "\n"))?;
    Ok(report)
}

/// One named variant of an ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: RunConfig,
}

/// Ablation grids over the base configuration.
pub fn ablation_grid(base: &RunConfig, grid: &str) -> Result<Vec<Variant>> {
    let v = |name: &str, f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        Variant { name: name.to_string(), config: c }
    };
    let fifo = crate::align::QueuePolicy::Fifo;
    let div = crate::align::QueuePolicy::Diversity;
    let variants = match grid {
        "components" => vec![
            v("a", &|c| {
                c.pretrain.enabled = false;
                c.pretrain.itc = false;
                c.pretrain.kl = false;
                c.pretrain.queue = fifo;
                c.decoder.use_ts = false;
            }),
            v("b", &|c| {
                c.pretrain.kl = false;
                c.pretrain.queue = fifo;
                c.decoder.use_ts = false;
            }),
            v("c", &|c| {
                c.pretrain.queue = fifo;
                c.decoder.use_ts = false;
            }),
            v("d", &|c| {
                c.pretrain.queue = div;
                c.decoder.use_ts = false;
            }),
            v("full", &|c| {
                c.pretrain.queue = div;
                c.decoder.use_ts = true;
            }),
        ],
        "alpha" => [0.0, 0.1, 0.2, 0.3, 0.4]
            .iter()
            .map(|&a| v(&format!("alpha-{a:.1}"), &|c| c.pretrain.alpha = a))
            .collect(),
        "k" => [0usize, 5, 10, 15, 20]
            .iter()
            .map(|&k| {
                v(&format!("k-{k}"), &|c| {
                    if k == 0 {
                        c.decoder.use_ts = false;
                    } else {
                        c.model.k = k;
                        c.decoder.use_ts = true;
                    }
                })
            })
            .collect(),
        other => return Err(Error::Config(format!("unknown ablation grid {other:?} (components, alpha, k)"))),
    };
    let mut out = Vec::with_capacity(variants.len());
    for mut var in variants {
        var.config.output_dir = base.output_dir.join("ablate").join(grid).join(&var.name);
        var.config.validate()?;
        out.push(var);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub config_hash: String,
    pub metrics: MetricReport,
    pub recall: RecallReport,
}

/// `ablate`: full pipeline per variant, then a summary file.
pub fn cmd_ablate(base: &RunConfig, grid: &str, split: Split) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    let mut stage1_done: Vec<(String, PathBuf)> = Vec::new();
    for var in ablation_grid(base, grid)? {
        let cfg = &var.config;
        let h = cfg.stage1_hash();
        match stage1_done.iter().find(|(k, _)| *k == h) {
            Some((_, src)) => copy_dir(src, &stage1_dir(cfg))?,
            None => {
                cmd_pretrain(cfg)?;
                stage1_done.push((h, stage1_dir(cfg)));
            }
        }
        write_config_snapshot(cfg)?;
        cmd_train_decoder(cfg)?;
        let metrics = cmd_eval(cfg, split)?;
        let recall = cmd_retrieve(cfg, split)?;
        info!("{grid}/{}: CE F1 {:.3}, BLEU-4 {:.3}", var.name, metrics.ce_f1, metrics.bleu4);
        rows.push(AblationRow {
            variant: var.name.clone(),
            config_hash: cfg.hash(),
            metrics,
            recall,
        });
    }
    let path = base.output_dir.join("ablate").join(grid).join("summary.json");
    write_file(&path, &(serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n"))?;
    Ok(rows)
}

fn copy_dir(src: &Path, dst: &Path) -> Result<()> {
    std::fs::create_dir_all(dst).map_err(|e| Error::io(dst, e))?;
    for entry in std::fs::read_dir(src).map_err(|e| Error::io(src, e))? {
        let entry = entry.map_err(|e| Error::io(src, e))?;
        let to = dst.join(entry.file_name());
        std::fs::copy(entry.path(), &to).map_err(|e| Error::io(&to, e))?;
    }
    Ok(())
}
