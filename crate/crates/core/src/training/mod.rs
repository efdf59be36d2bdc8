//! Loss assembly and the two-stage training procedure.

mod data;
mod loss;

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{Sample, TrainingData};
pub use loss::{bce, ips_weight, unbiased_loss, IpsMode, Propensities};

use crate::embedding::Vocab;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, CandidatePolicy};
use crate::interactions::{InteractionLog, SequenceIndex};
use crate::numeric::{AdamConfig, Gradients, Group, Tape, Tensor, Var};
use crate::parallel::{map_chunks, map_indices, mix_seed};
use crate::propensity::{clip, FrequencyPropensity};
use crate::recommender::DepsModel;

/// Loss weights, schedule and optimiser settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the item-view term.
    pub alpha: f64,
    /// Propensity clip `M`.
    pub clip: f64,
    /// Weight of the masked-token losses in stage 1.
    pub lambda_p: f64,
    /// Stage-1 epochs.
    pub n_p: usize,
    /// Stage-2 epochs.
    pub n_u: usize,
    /// Propensity updates per stage-2 epoch.
    pub n_b: usize,
    pub lr: f64,
    /// Learning rate of the propensity GRUs.
    pub lr_propensity: f64,
    pub batch_size: usize,
    /// Sequences per masked-token minibatch.
    pub mlm_batch: usize,
    pub seed: u64,
    pub ips_mode: IpsMode,
    /// Run stage 1 before stage 2.
    pub stage1: bool,
    /// Samples per gradient work unit.
    pub chunk_size: usize,
    /// Compute validation NDCG@10 after every stage-2 epoch.
    pub validate: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            clip: 0.05,
            lambda_p: 0.5,
            n_p: 10,
            n_u: 10,
            n_b: 2,
            lr: 5e-3,
            lr_propensity: 1e-2,
            batch_size: 64,
            mlm_batch: 32,
            seed: 0,
            ips_mode: IpsMode::Dual,
            stage1: true,
            chunk_size: 16,
            validate: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config { key: key.into(), msg });
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha", format!("must lie in [0, 1], got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.clip) {
            return bad("clip", format!("must lie in [0, 1), got {}", self.clip));
        }
        if !(self.lambda_p >= 0.0 && self.lambda_p.is_finite()) {
            return bad("lambda_p", format!("must be non-negative, got {}", self.lambda_p));
        }
        if self.n_b == 0 {
            return bad("n_b", "must be at least 1".into());
        }
        for (key, v) in [("lr", self.lr), ("lr_propensity", self.lr_propensity)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(key, format!("must be positive, got {v}"));
            }
        }
        for (key, v) in [
            ("batch_size", self.batch_size),
            ("mlm_batch", self.mlm_batch),
            ("chunk_size", self.chunk_size),
        ] {
            if v == 0 {
                return bad(key, "must be at least 1".into());
            }
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

/// Losses of one epoch. Stage-1 epochs carry masked-token losses, stage-2
/// epochs carry the weighted preference loss and the validation metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub ar_item_view: f64,
    pub ar_user_view: f64,
    pub mlm_item_view: Option<f64>,
    pub mlm_user_view: Option<f64>,
    pub unbiased: Option<f64>,
    pub val_ndcg10: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub config: LossConfig,
    pub records: Vec<EpochRecord>,
    pub checkpoint: Option<String>,
}

impl TrainingRun {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }
}

/// Held-out records for the per-epoch validation metric.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub log: &'a InteractionLog,
    /// Index over every click available for histories.
    pub index: &'a SequenceIndex,
    pub policy: CandidatePolicy,
}

fn finite(name: &'static str, epoch: usize, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { name, epoch, value: v })
    }
}

/// Gradients of a loss assembled independently per chunk, merged in chunk order.
fn chunked_gradients<T, F>(model: &DepsModel, items: &[T], chunk: usize, f: F) -> Result<(Gradients, f64)>
where
    T: Sync,
    F: Fn(&mut Tape, usize, &[T]) -> Result<Var> + Sync + Send,
{
    let parts = map_chunks(items, chunk, |offset, c| -> Result<(Gradients, f64)> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, offset, c)?;
        Ok((tape.backward(loss)?, tape.scalar(loss)))
    });
    let mut grads = Gradients::new(model.store.len());
    let mut total = 0.0;
    for p in parts {
        let (g, v) = p?;
        grads.merge(&g);
        total += v;
    }
    Ok((grads, total))
}

/// One update of the propensity GRUs on `L^AR_u + L^AR_i` over all
/// sequences. Returns the two losses before the update.
pub fn ar_step(model: &mut DepsModel, data: &TrainingData, cfg: &LossConfig, epoch: usize) -> Result<(f64, f64)> {
    let seqs: Vec<(Vocab, &Vec<usize>)> = data
        .item_sequences
        .iter()
        .map(|s| (Vocab::Items, s))
        .chain(data.user_sequences.iter().map(|s| (Vocab::Users, s)))
        .collect();
    let m: &DepsModel = model;
    let parts = map_chunks(&seqs, cfg.chunk_size, |_, c| -> Result<(Gradients, f64, f64)> {
        let mut tape = Tape::new();
        let items: Vec<Vec<usize>> = c.iter().filter(|s| s.0 == Vocab::Items).map(|s| s.1.clone()).collect();
        let users: Vec<Vec<usize>> = c.iter().filter(|s| s.0 == Vocab::Users).map(|s| s.1.clone()).collect();
        let a = m.estimator.ar_loss_item_view(&mut tape, &m.store, &m.emb, &items)?;
        let b = m.estimator.ar_loss_user_view(&mut tape, &m.store, &m.emb, &users)?;
        let total = tape.add(a, b)?;
        Ok((tape.backward(total)?, tape.scalar(a), tape.scalar(b)))
    });
    let mut grads = Gradients::new(model.store.len());
    let (mut li, mut lu) = (0.0, 0.0);
    for p in parts {
        let (g, a, b) = p?;
        grads.merge(&g);
        li += a;
        lu += b;
    }
    finite("ar_item_view", epoch, li)?;
    finite("ar_user_view", epoch, lu)?;
    model.store.set_grads(&grads);
    model
        .store
        .adam_step(&[Group::Propensity], &cfg.adam(cfg.lr_propensity))?;
    Ok((li, lu))
}

/// One pass of masked-token minibatches over both sequence corpora, updating
/// embeddings and encoders. Returns the summed item-view and user-view losses.
pub fn mlm_epoch(model: &mut DepsModel, data: &TrainingData, cfg: &LossConfig, epoch: usize) -> Result<(f64, f64)> {
    let mut seqs: Vec<(Vocab, &Vec<usize>)> = data
        .item_sequences
        .iter()
        .map(|s| (Vocab::Items, s))
        .chain(data.user_sequences.iter().map(|s| (Vocab::Users, s)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 1, epoch as u64]));
    seqs.shuffle(&mut rng);
    let (mut li, mut lu) = (0.0, 0.0);
    let mask_prob = model.config.mask_prob;
    for (b, batch) in seqs.chunks(cfg.mlm_batch).enumerate() {
        let m: &DepsModel = model;
        let parts = map_chunks(batch, cfg.chunk_size, |offset, c| -> Result<(Gradients, f64, f64)> {
            let mut tape = Tape::new();
            let mut a = tape.constant(Tensor::scalar(0.0));
            let mut bb = a;
            for (j, &(vocab, seq)) in c.iter().enumerate() {
                let key = mix_seed(&[cfg.seed, 2, epoch as u64, b as u64, (offset + j) as u64]);
                let mut r = ChaCha8Rng::seed_from_u64(key);
                let l = m.mlm_loss(&mut tape, vocab, std::slice::from_ref(seq), mask_prob, &mut r, true)?;
                match vocab {
                    Vocab::Items => a = tape.add(a, l)?,
                    Vocab::Users => bb = tape.add(bb, l)?,
                }
            }
            let sum = tape.add(a, bb)?;
            let total = tape.scale(sum, cfg.lambda_p);
            Ok((tape.backward(total)?, tape.scalar(a), tape.scalar(bb)))
        });
        let mut grads = Gradients::new(model.store.len());
        for p in parts {
            let (g, a, bb) = p?;
            grads.merge(&g);
            li += a;
            lu += bb;
        }
        finite("mlm_item_view", epoch, li)?;
        finite("mlm_user_view", epoch, lu)?;
        model.store.set_grads(&grads);
        model
            .store
            .adam_step(&[Group::Embedding, Group::Transformer], &cfg.adam(cfg.lr))?;
    }
    Ok((li, lu))
}

/// Clipped propensities of every training sample for `mode`.
pub fn compute_propensities(
    model: &DepsModel,
    data: &TrainingData,
    mode: IpsMode,
    clip_value: f64,
) -> Result<Vec<Propensities>> {
    match mode {
        IpsMode::None => Ok(vec![Propensities::ONE; data.samples.len()]),
        IpsMode::FrequencyDual => {
            let f = FrequencyPropensity::from_index(&data.index)?;
            Ok(data
                .samples
                .iter()
                .map(|s| Propensities {
                    item_view: clip(f.p_item[s.item], clip_value),
                    user_view: clip(f.p_user[s.user], clip_value),
                })
                .collect())
        }
        IpsMode::Dual | IpsMode::ItemOnly | IpsMode::UserOnly => {
            fn intern<'a>(
                key: (Vocab, &'a [usize]),
                keys: &mut Vec<(Vocab, &'a [usize])>,
                slot: &mut HashMap<(Vocab, &'a [usize]), usize>,
            ) -> usize {
                *slot.entry(key).or_insert_with(|| {
                    keys.push(key);
                    keys.len() - 1
                })
            }
            let mut keys = Vec::new();
            let mut slot = HashMap::new();
            let lookup: Vec<(usize, usize)> = data
                .samples
                .iter()
                .map(|s| {
                    let a = intern((Vocab::Items, s.h_u.as_slice()), &mut keys, &mut slot);
                    let b = intern((Vocab::Users, s.h_i.as_slice()), &mut keys, &mut slot);
                    (a, b)
                })
                .collect();
            let dists = map_indices(keys.len(), |k| {
                let (vocab, seq) = keys[k];
                model.estimator.distribution(&model.store, &model.emb, vocab, seq)
            });
            let dists: Vec<Vec<f64>> = dists.into_iter().collect::<Result<_>>()?;
            Ok(data
                .samples
                .iter()
                .zip(lookup)
                .map(|(s, (a, b))| Propensities {
                    item_view: clip(dists[a][s.item], clip_value),
                    user_view: clip(dists[b][s.user], clip_value),
                })
                .collect())
        }
    }
}

/// One shuffled minibatch pass of the weighted preference loss, updating
/// embeddings, encoders and the head. Returns the summed loss.
pub fn unbiased_epoch(
    model: &mut DepsModel,
    data: &TrainingData,
    props: &[Propensities],
    cfg: &LossConfig,
    epoch: usize,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 3, epoch as u64]));
    order.shuffle(&mut rng);
    let mut total = 0.0;
    for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
        let m: &DepsModel = model;
        let (grads, v) = chunked_gradients(m, batch, cfg.chunk_size, |tape, offset, c| {
            let samples: Vec<&Sample> = c.iter().map(|&k| &data.samples[k]).collect();
            let p: Vec<Propensities> = c.iter().map(|&k| props[k]).collect();
            let seeds: Vec<u64> = (0..c.len())
                .map(|j| mix_seed(&[cfg.seed, 4, epoch as u64, b as u64, (offset + j) as u64]))
                .collect();
            unbiased_loss(tape, m, &samples, &p, cfg.ips_mode, cfg.alpha, cfg.clip, Some(&seeds))
        })?;
        total += finite("unbiased", epoch, v)?;
        model.store.set_grads(&grads);
        model
            .store
            .adam_step(&[Group::Embedding, Group::Transformer, Group::Mlp], &cfg.adam(cfg.lr))?;
    }
    Ok(total)
}

/// Stage 1: per epoch one propensity update on the autoregressive losses,
/// then a masked-token pass over embeddings and encoders.
pub fn stage1_train(model: &mut DepsModel, data: &TrainingData, cfg: &LossConfig) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.n_p);
    for epoch in 0..cfg.n_p {
        let (ar_i, ar_u) = ar_step(model, data, cfg, epoch)?;
        let (mlm_i, mlm_u) = mlm_epoch(model, data, cfg, epoch)?;
        out.push(EpochRecord {
            stage: 1,
            epoch,
            ar_item_view: ar_i,
            ar_user_view: ar_u,
            mlm_item_view: Some(mlm_i),
            mlm_user_view: Some(mlm_u),
            unbiased: None,
            val_ndcg10: None,
        });
    }
    Ok(out)
}

/// Stage 2: per epoch `n_b` propensity updates, fresh clipped propensities,
/// then one pass of the weighted preference loss.
pub fn stage2_train(
    model: &mut DepsModel,
    data: &TrainingData,
    cfg: &LossConfig,
    validation: Option<Validation<'_>>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.n_u);
    for epoch in 0..cfg.n_u {
        let mut ar = (0.0, 0.0);
        for _ in 0..cfg.n_b {
            ar = ar_step(model, data, cfg, epoch)?;
        }
        let props = compute_propensities(model, data, cfg.ips_mode, cfg.clip)?;
        let loss = unbiased_epoch(model, data, &props, cfg, epoch)?;
        let val = match validation {
            Some(v) if cfg.validate => Some(
                evaluate(&*model, v.log, v.index, v.policy, &[10], model.config.max_len)?
                    .ndcg_at(10)
                    .expect("cutoff 10 requested"),
            ),
            _ => None,
        };
        out.push(EpochRecord {
            stage: 2,
            epoch,
            ar_item_view: ar.0,
            ar_user_view: ar.1,
            mlm_item_view: None,
            mlm_user_view: None,
            unbiased: Some(loss),
            val_ndcg10: val,
        });
    }
    Ok(out)
}

/// Both stages in order; stage 1 is skipped when `cfg.stage1` is false.
pub fn train(
    model: &mut DepsModel,
    data: &TrainingData,
    cfg: &LossConfig,
    validation: Option<Validation<'_>>,
) -> Result<TrainingRun> {
    cfg.validate()?;
    if (model.estimator.clip - cfg.clip).abs() > 0.0 {
        model.estimator = model.estimator.with_clip(cfg.clip)?;
    }
    let mut records = Vec::new();
    if cfg.stage1 {
        records.extend(stage1_train(model, data, cfg)?);
    }
    records.extend(stage2_train(model, data, cfg, validation)?);
    Ok(TrainingRun {
        config: *cfg,
        records,
        checkpoint: None,
    })
}
