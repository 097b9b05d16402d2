//! Contrastive fine-tuning of the tuner against cached, read-only backbone
//! states.

use std::collections::{BTreeSet, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hidden_states::{ByteReader, LayeredStates, TrainExample};
use crate::tensor::{dot, l2_norm, Mat};
use crate::tuner::{encode_with_tape, save_checkpoint, tuner_backward, OutputGrad, TunerConfig, TunerParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Dot,
    #[default]
    Cosine,
}

impl Similarity {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dot" => Ok(Similarity::Dot),
            "cosine" | "cos" => Ok(Similarity::Cosine),
            other => Err(Error::Config(format!("unknown similarity {other:?}"))),
        }
    }
}

/// Similarity of two vectors of equal length.
pub fn similarity(a: &[f64], b: &[f64], kind: Similarity) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Data(format!(
            "similarity of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    match kind {
        Similarity::Dot => Ok(dot(a, b)),
        Similarity::Cosine => {
            let (na, nb) = (l2_norm(a), l2_norm(b));
            if na == 0.0 || nb == 0.0 {
                return Err(Error::numeric("cosine similarity", "zero vector"));
            }
            Ok(dot(a, b) / (na * nb))
        }
    }
}

/// Similarity and its gradients with respect to both arguments.
fn similarity_with_grad(a: &[f64], b: &[f64], kind: Similarity) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    match kind {
        Similarity::Dot => Ok((dot(a, b), b.to_vec(), a.to_vec())),
        Similarity::Cosine => {
            let (na, nb) = (l2_norm(a), l2_norm(b));
            if na == 0.0 || nb == 0.0 {
                return Err(Error::numeric("cosine similarity", "zero vector"));
            }
            let s = dot(a, b) / (na * nb);
            let ga = a
                .iter()
                .zip(b)
                .map(|(&x, &y)| y / (na * nb) - s * x / (na * na))
                .collect();
            let gb = a
                .iter()
                .zip(b)
                .map(|(&x, &y)| x / (na * nb) - s * y / (nb * nb))
                .collect();
            Ok((s, ga, gb))
        }
    }
}

/// `−log(e^{s⁺} / (e^{s⁺} + Σ e^{s⁻}))` with log-sum-exp stabilization.
///
/// Returns `(loss, ∂/∂s⁺, ∂/∂s⁻ for each negative)`.
pub fn contrastive_loss(sim_pos: f64, sim_negs: &[f64]) -> Result<(f64, f64, Vec<f64>)> {
    if !sim_pos.is_finite() || sim_negs.iter().any(|s| !s.is_finite()) {
        return Err(Error::numeric("contrastive loss", "non-finite similarity"));
    }
    let max = sim_negs.iter().copied().fold(sim_pos, f64::max);
    let exp_pos = (sim_pos - max).exp();
    let exp_negs: Vec<f64> = sim_negs.iter().map(|s| (s - max).exp()).collect();
    let total = exp_pos + exp_negs.iter().sum::<f64>();
    let loss = max + total.ln() - sim_pos;
    let grad_pos = exp_pos / total - 1.0;
    let grad_negs = exp_negs.iter().map(|e| e / total).collect();
    Ok((loss.max(0.0), grad_pos, grad_negs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Upper bound on explicit negatives used per example.
    pub negatives_per_query: usize,
    pub use_in_batch_negatives: bool,
    pub similarity: Similarity,
    /// Logits are `sim / temperature`.
    pub temperature: f64,
    pub adam: AdamConfig,
    /// Global-norm clipping threshold.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 5e-6,
            epochs: 3,
            negatives_per_query: 4,
            use_in_batch_negatives: false,
            similarity: Similarity::Cosine,
            temperature: 1.0,
            adam: AdamConfig::default(),
            grad_clip: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Adam moments, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: TunerParams,
    pub second_moment: TunerParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &TunerParams) -> Self {
        Self {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step: 0,
        }
    }
}

pub const OPTIMIZER_MAGIC: &[u8; 4] = b"OPT1";

/// `"OPT1" | step u64 | tensor_count u32 | (name_len u16 | name | len u64 | m f64*len | v f64*len)*`
pub fn encode_optimizer(state: &OptimizerState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(OPTIMIZER_MAGIC);
    out.extend_from_slice(&state.step.to_le_bytes());
    let mut firsts = Vec::new();
    state.first_moment.for_each(|n, m| firsts.push((n.to_string(), m.clone())));
    let mut seconds = Vec::new();
    state.second_moment.for_each(|_, m| seconds.push(m.clone()));
    out.extend_from_slice(&(firsts.len() as u32).to_le_bytes());
    for ((name, m), v) in firsts.iter().zip(&seconds) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.len() as u64).to_le_bytes());
        for x in m.as_slice().iter().chain(v.as_slice()) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Decodes optimizer state for parameters laid out like `like`.
pub fn decode_optimizer(bytes: &[u8], like: &TunerParams) -> Result<OptimizerState> {
    if bytes.len() < 4 || &bytes[..4] != OPTIMIZER_MAGIC {
        return Err(Error::Format("not an OPT1 optimizer file".into()));
    }
    let mut r = ByteReader::new(&bytes[4..], "optimizer state");
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let shapes = like.shapes();
    if count != shapes.len() {
        return Err(Error::Format(format!(
            "optimizer state holds {count} tensors, parameters have {}",
            shapes.len()
        )));
    }
    let mut ms = Vec::with_capacity(count);
    let mut vs = Vec::with_capacity(count);
    for (name, rows, cols) in &shapes {
        let len = r.u16()? as usize;
        let got = r.string(len)?;
        let n = r.u64()? as usize;
        if &got != name || n != rows * cols {
            return Err(Error::Format(format!(
                "optimizer tensor {got:?} ({n} values) does not match {name:?} ({rows}x{cols})"
            )));
        }
        ms.push(Mat::from_vec(*rows, *cols, r.f64_vec(n)?));
        vs.push(Mat::from_vec(*rows, *cols, r.f64_vec(n)?));
    }
    if !r.is_done() {
        return Err(Error::Format("trailing bytes after optimizer state".into()));
    }
    let mut first_moment = like.zeros_like();
    let mut second_moment = like.zeros_like();
    let mut it = ms.into_iter();
    first_moment.for_each_mut(|_, m| *m = it.next().unwrap());
    let mut it = vs.into_iter();
    second_moment.for_each_mut(|_, m| *m = it.next().unwrap());
    Ok(OptimizerState {
        first_moment,
        second_moment,
        step,
    })
}

pub fn save_optimizer(path: impl AsRef<Path>, state: &OptimizerState) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_optimizer(state)).map_err(|e| Error::io(path, e))
}

pub fn load_optimizer(path: impl AsRef<Path>, like: &TunerParams) -> Result<OptimizerState> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_optimizer(&bytes, like)
}

/// Tuner inputs of one sequence: the two selected backbone layers.
#[derive(Debug, Clone)]
pub struct TunerInput {
    pub h_a: Mat,
    pub h_u: Mat,
    pub mask: Vec<bool>,
}

impl TunerInput {
    pub fn from_record(record: &LayeredStates, config: &TunerConfig) -> Result<Self> {
        Ok(Self {
            h_a: record.layer_mat(config.align_layer)?,
            h_u: record.layer_mat(config.uniform_layer)?,
            mask: record.attention_mask.clone(),
        })
    }
}

/// Read-only `f64` copies of the selected layers, keyed by sequence id.
#[derive(Debug, Clone, Default)]
pub struct StateCache {
    inputs: HashMap<String, TunerInput>,
}

impl StateCache {
    pub fn build<'a>(
        records: impl IntoIterator<Item = &'a LayeredStates>,
        config: &TunerConfig,
    ) -> Result<Self> {
        let mut inputs = HashMap::new();
        for r in records {
            if inputs
                .insert(r.sequence_id.clone(), TunerInput::from_record(r, config)?)
                .is_some()
            {
                return Err(Error::Data(format!("duplicate sequence id {:?}", r.sequence_id)));
            }
        }
        Ok(Self { inputs })
    }

    pub fn get(&self, id: &str) -> Result<&TunerInput> {
        self.inputs
            .get(id)
            .ok_or_else(|| Error::Data(format!("no cached hidden states for {id:?}")))
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Summed contrastive loss of a batch and its gradient.
pub fn batch_loss_and_grads(
    batch: &[TrainExample],
    cache: &StateCache,
    params: &TunerParams,
    tuner: &TunerConfig,
    train: &TrainConfig,
) -> Result<(f64, TunerParams)> {
    // unique ids in first-seen order
    let mut ids: Vec<&str> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for e in batch {
        e.validate()?;
        let negs = e.negative_ids.iter().take(train.negatives_per_query);
        for id in std::iter::once(&e.query_id).chain(&e.positive_ids).chain(negs) {
            if !index.contains_key(id.as_str()) {
                index.insert(id.as_str(), ids.len());
                ids.push(id.as_str());
            }
        }
    }
    for id in &ids {
        cache.get(id)?;
    }

    let encoded: Vec<(Vec<f64>, crate::tuner::ForwardTape)> = ids
        .par_iter()
        .map(|id| {
            let input = cache.get(id)?;
            encode_with_tape(&input.h_a, &input.h_u, &input.mask, params, tuner)
        })
        .collect::<Result<_>>()?;

    let dim = tuner.d_model;
    let mut pooled_grads = vec![vec![0.0; dim]; ids.len()];
    let mut total = 0.0;
    let inv_t = 1.0 / train.temperature;
    for (bi, e) in batch.iter().enumerate() {
        let q = index[e.query_id.as_str()];
        let positives: BTreeSet<&str> = e.positive_ids.iter().map(String::as_str).collect();
        let mut negs: Vec<usize> = Vec::new();
        let mut seen = BTreeSet::new();
        for n in e.negative_ids.iter().take(train.negatives_per_query) {
            if seen.insert(n.as_str()) {
                negs.push(index[n.as_str()]);
            }
        }
        if train.use_in_batch_negatives {
            for (oi, other) in batch.iter().enumerate() {
                if oi == bi {
                    continue;
                }
                let extra = other
                    .positive_ids
                    .iter()
                    .chain(other.negative_ids.iter().take(train.negatives_per_query));
                for n in extra {
                    if !positives.contains(n.as_str()) && seen.insert(n.as_str()) {
                        negs.push(index[n.as_str()]);
                    }
                }
            }
        }
        let qv = &encoded[q].0;
        let neg_sims: Vec<(f64, Vec<f64>, Vec<f64>)> = negs
            .iter()
            .map(|&n| similarity_with_grad(qv, &encoded[n].0, train.similarity))
            .collect::<Result<_>>()?;
        for p in &e.positive_ids {
            let pi = index[p.as_str()];
            let (sp, gq_p, gp) = similarity_with_grad(qv, &encoded[pi].0, train.similarity)?;
            let logits: Vec<f64> = neg_sims.iter().map(|(s, _, _)| s * inv_t).collect();
            let (loss, dpos, dnegs) = contrastive_loss(sp * inv_t, &logits)?;
            if !loss.is_finite() {
                return Err(Error::numeric(
                    format!("loss for query {:?}", e.query_id),
                    format!("non-finite loss {loss}"),
                ));
            }
            total += loss;
            let dpos = dpos * inv_t;
            for k in 0..dim {
                pooled_grads[q][k] += dpos * gq_p[k];
                pooled_grads[pi][k] += dpos * gp[k];
            }
            for ((&n, (_, gq_n, gn)), &dn) in negs.iter().zip(&neg_sims).zip(&dnegs) {
                let dn = dn * inv_t;
                for k in 0..dim {
                    pooled_grads[q][k] += dn * gq_n[k];
                    pooled_grads[n][k] += dn * gn[k];
                }
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::numeric("batch loss", format!("non-finite total {total}")));
    }

    let per_seq: Vec<TunerParams> = encoded
        .par_iter()
        .zip(pooled_grads.par_iter())
        .map(|((_, tape), g)| tuner_backward(params, tape, &OutputGrad::Pooled(g.clone())))
        .collect::<Result<_>>()?;
    let mut grads = params.zeros_like();
    for g in &per_seq {
        add_params(&mut grads, g);
    }
    Ok((total, grads))
}

fn add_params(acc: &mut TunerParams, other: &TunerParams) {
    let mut it = other.tensors().into_iter();
    acc.for_each_mut(|_, m| m.add_assign(it.next().expect("same layout").1));
}

/// One Adam step (with optional global-norm clipping). Parameters stay
/// `f32`-representable afterwards.
pub fn adam_update(
    params: &mut TunerParams,
    grads: &TunerParams,
    state: &mut OptimizerState,
    train: &TrainConfig,
) {
    let mut scale = 1.0;
    if let Some(clip) = train.grad_clip {
        let norm = grads.flatten().iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > clip {
            scale = clip / norm;
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let AdamConfig { beta1, beta2, eps } = train.adam;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let lr = train.learning_rate;

    let g_parts: Vec<&[f64]> = grads.tensors().into_iter().map(|(_, m)| m.as_slice()).collect();
    let mut firsts: Vec<Mat> = Vec::new();
    state.first_moment.for_each(|_, m| firsts.push(m.clone()));
    let mut v_parts: Vec<Mat> = Vec::new();
    state.second_moment.for_each(|_, m| v_parts.push(m.clone()));

    let mut idx = 0;
    params.for_each_mut(|_, p| {
        let g = &g_parts[idx];
        let m = firsts[idx].as_mut_slice();
        let v = v_parts[idx].as_mut_slice();
        for (k, w) in p.as_mut_slice().iter_mut().enumerate() {
            let gk = g[k] * scale;
            m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
            v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
            let mhat = m[k] / c1;
            let vhat = v[k] / c2;
            *w = (*w - lr * mhat / (vhat.sqrt() + eps)) as f32 as f64;
        }
        idx += 1;
    });
    let mut it = firsts.into_iter();
    state.first_moment.for_each_mut(|_, m| *m = it.next().unwrap());
    let mut it = v_parts.into_iter();
    state.second_moment.for_each_mut(|_, m| *m = it.next().unwrap());
}

/// One optimization step over `batch`; returns the updated parameters,
/// optimizer state and summed batch loss.
pub fn train_step(
    batch: &[TrainExample],
    cache: &StateCache,
    params: &TunerParams,
    opt: &OptimizerState,
    tuner: &TunerConfig,
    train: &TrainConfig,
) -> Result<(TunerParams, OptimizerState, f64)> {
    let (loss, grads) = batch_loss_and_grads(batch, cache, params, tuner, train)?;
    let mut params = params.clone();
    let mut opt = opt.clone();
    adam_update(&mut params, &grads, &mut opt, train);
    Ok((params, opt, loss))
}

/// Where training is resumed from and where it stops.
#[derive(Debug, Clone, Default)]
pub struct TrainControl {
    pub resume: Option<(TunerParams, OptimizerState)>,
    /// Stop once the optimizer step counter reaches this value.
    pub stop_at_step: Option<u64>,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: TunerParams,
    pub optimizer: OptimizerState,
    /// `(step, batch loss)` for every step run in this call.
    pub loss_log: Vec<(u64, f64)>,
    pub finished: bool,
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn write_pair(dir: &Path, stem: &str, tuner: &TunerConfig, params: &TunerParams, opt: &OptimizerState) -> Result<()> {
    save_checkpoint(dir.join(format!("{stem}.lmt")), tuner, params)?;
    save_optimizer(dir.join(format!("{stem}.opt")), opt)
}

/// Appends `step,loss` rows, writing the header when the file is new.
pub fn append_loss_log(path: impl AsRef<Path>, log: &[(u64, f64)]) -> Result<()> {
    let path = path.as_ref();
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut s = String::new();
    if fresh {
        s.push_str("step,loss\n");
    }
    for (step, loss) in log {
        s.push_str(&format!("{step},{loss:.9e}\n"));
    }
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Shuffled mini-batch training for `train.epochs` epochs. With a
/// checkpoint directory, writes `epoch-<e>.{lmt,opt}` at every epoch end,
/// `final.{lmt,opt}` after the last step, `step-<k>.{lmt,opt}` when stopped
/// early, and appends to `loss.csv`.
pub fn train_loop(
    examples: &[TrainExample],
    cache: &StateCache,
    tuner: &TunerConfig,
    train: &TrainConfig,
    control: TrainControl,
) -> Result<TrainOutcome> {
    train.validate()?;
    let d_llm = cache
        .inputs
        .values()
        .next()
        .map(|i| i.h_a.cols())
        .unwrap_or(tuner.d_model);
    let (mut params, mut opt) = match control.resume {
        Some(state) => state,
        None => {
            let p = TunerParams::init(tuner, d_llm)?;
            let o = OptimizerState::new(&p);
            (p, o)
        }
    };
    if !params.matches(tuner) {
        return Err(Error::Config("resumed parameters do not match the tuner config".into()));
    }
    for e in examples {
        e.validate()?;
        for id in std::iter::once(&e.query_id)
            .chain(&e.positive_ids)
            .chain(e.negative_ids.iter().take(train.negatives_per_query))
        {
            cache.get(id)?;
        }
    }
    if let Some(dir) = &control.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let per_epoch = examples.len().div_ceil(train.batch_size) as u64;
    let total_steps = per_epoch * train.epochs as u64;
    let mut log = Vec::new();
    let mut finished = true;
    while opt.step < total_steps {
        if control.stop_at_step.is_some_and(|s| opt.step >= s) {
            finished = false;
            break;
        }
        let epoch = opt.step / per_epoch;
        let within = (opt.step % per_epoch) as usize;
        let order = epoch_order(examples.len(), train.seed, epoch);
        let start = within * train.batch_size;
        let end = (start + train.batch_size).min(examples.len());
        let batch: Vec<TrainExample> = order[start..end].iter().map(|&i| examples[i].clone()).collect();
        let (loss, grads) = batch_loss_and_grads(&batch, cache, &params, tuner, train)?;
        adam_update(&mut params, &grads, &mut opt, train);
        log.push((opt.step, loss));
        log::debug!("step {} epoch {} loss {loss:.6}", opt.step, epoch);
        if opt.step % per_epoch == 0 {
            if let Some(dir) = &control.checkpoint_dir {
                write_pair(dir, &format!("epoch-{}", opt.step / per_epoch), tuner, &params, &opt)?;
            }
        }
    }
    if let Some(dir) = &control.checkpoint_dir {
        if finished {
            write_pair(dir, "final", tuner, &params, &opt)?;
        } else {
            write_pair(dir, &format!("step-{}", opt.step), tuner, &params, &opt)?;
        }
        append_loss_log(dir.join("loss.csv"), &log)?;
    }
    Ok(TrainOutcome {
        params,
        optimizer: opt,
        loss_log: log,
        finished,
    })
}
