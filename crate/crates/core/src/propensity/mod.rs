//! Sequential propensity estimators from both views, plus static frequency baselines.

mod gru;

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

pub use gru::GruCell;

use crate::embedding::{Embeddings, Vocab};
use crate::error::{Error, Result};
use crate::interactions::SequenceIndex;
use crate::numeric::{softmax_into, ParameterStore, Tape, Var};

/// `max(p, m)`
pub fn clip(p: f64, m: f64) -> f64 {
    p.max(m)
}

/// Two GRUs over the shared embedding tables. The item-view cell reads a
/// user's clicked items and scores the next item over all items; the
/// user-view cell reads an item's clicking users and scores the next user.
#[derive(Debug, Clone, Copy)]
pub struct PropensityEstimator {
    pub gru_item: GruCell,
    pub gru_user: GruCell,
    pub clip: f64,
}

impl PropensityEstimator {
    pub fn register<R: Rng>(store: &mut ParameterStore, dim: usize, clip: f64, rng: &mut R) -> Result<Self> {
        check_clip(clip)?;
        Ok(Self {
            gru_item: GruCell::register(store, "gru.item", dim, rng),
            gru_user: GruCell::register(store, "gru.user", dim, rng),
            clip,
        })
    }

    pub fn with_clip(mut self, clip: f64) -> Result<Self> {
        check_clip(clip)?;
        self.clip = clip;
        Ok(self)
    }

    fn cell(&self, vocab: Vocab) -> &GruCell {
        match vocab {
            Vocab::Items => &self.gru_item,
            Vocab::Users => &self.gru_user,
        }
    }

    /// GRU output after reading `seq`; the zero state when `seq` is empty.
    pub fn final_state(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        emb: &Embeddings,
        vocab: Vocab,
        seq: &[usize],
    ) -> Result<Var> {
        let cell = self.cell(vocab);
        if seq.is_empty() {
            return Ok(cell.zero_state(tape));
        }
        let xs = emb.sequence(tape, store, vocab, seq, None)?;
        Ok(*cell.scan(tape, store, xs)?.last().expect("non-empty"))
    }

    /// Unclipped next-token distribution over the whole vocabulary.
    pub fn distribution(
        &self,
        store: &ParameterStore,
        emb: &Embeddings,
        vocab: Vocab,
        seq: &[usize],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let y = self.final_state(&mut tape, store, emb, vocab, seq)?;
        let table = emb.vocab_matrix(&mut tape, store, vocab);
        let logits = tape.matmul_bt(y, table)?;
        let logits = tape.value(logits).data();
        let mut out = vec![0.0; logits.len()];
        softmax_into(logits, &mut out);
        Ok(out)
    }

    /// Unclipped `P(i | h_u)`.
    pub fn item_view_raw(&self, store: &ParameterStore, emb: &Embeddings, item: usize, h_u: &[usize]) -> Result<f64> {
        emb.check(Vocab::Items, item)?;
        Ok(self.distribution(store, emb, Vocab::Items, h_u)?[item])
    }

    /// Unclipped `P(u | h_i)`.
    pub fn user_view_raw(&self, store: &ParameterStore, emb: &Embeddings, user: usize, h_i: &[usize]) -> Result<f64> {
        emb.check(Vocab::Users, user)?;
        Ok(self.distribution(store, emb, Vocab::Users, h_i)?[user])
    }

    /// `max(P(i | h_u), M)`
    pub fn item_view_propensity(
        &self,
        store: &ParameterStore,
        emb: &Embeddings,
        item: usize,
        h_u: &[usize],
    ) -> Result<f64> {
        Ok(clip(self.item_view_raw(store, emb, item, h_u)?, self.clip))
    }

    /// `max(P(u | h_i), M)`
    pub fn user_view_propensity(
        &self,
        store: &ParameterStore,
        emb: &Embeddings,
        user: usize,
        h_i: &[usize],
    ) -> Result<f64> {
        Ok(clip(self.user_view_raw(store, emb, user, h_i)?, self.clip))
    }

    /// Autoregressive negative log-likelihood summed over every position of
    /// every sequence, using unclipped probabilities. The first position is
    /// predicted from the zero state.
    pub fn ar_loss(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        emb: &Embeddings,
        vocab: Vocab,
        sequences: &[Vec<usize>],
    ) -> Result<Var> {
        let cell = self.cell(vocab);
        let v = emb.table(vocab).size;
        let mut terms = Vec::new();
        for seq in sequences.iter().filter(|s| !s.is_empty()) {
            for &id in seq {
                emb.check(vocab, id)?;
            }
            let mut states = vec![cell.zero_state(tape)];
            if seq.len() > 1 {
                let xs = emb.sequence(tape, store, vocab, &seq[..seq.len() - 1], None)?;
                states.extend(cell.scan(tape, store, xs)?);
            }
            let ys = tape.concat_rows(&states)?;
            let table = emb.vocab_matrix(tape, store, vocab);
            let logits = tape.matmul_bt(ys, table)?;
            let logp = tape.log_softmax_rows(logits);
            let flat: Vec<usize> = seq.iter().enumerate().map(|(k, &id)| k * v + id).collect();
            let picked = tape.pick(logp, &flat)?;
            terms.push(tape.sum(picked));
        }
        let Some((&first, rest)) = terms.split_first() else {
            return Ok(tape.constant(crate::numeric::Tensor::scalar(0.0)));
        };
        let mut total = first;
        for &t in rest {
            total = tape.add(total, t)?;
        }
        Ok(tape.scale(total, -1.0))
    }

    /// `L^AR` over item sequences `h_u`.
    pub fn ar_loss_item_view(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        emb: &Embeddings,
        sequences: &[Vec<usize>],
    ) -> Result<Var> {
        self.ar_loss(tape, store, emb, Vocab::Items, sequences)
    }

    /// `L^AR` over user sequences `h_i`.
    pub fn ar_loss_user_view(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        emb: &Embeddings,
        sequences: &[Vec<usize>],
    ) -> Result<Var> {
        self.ar_loss(tape, store, emb, Vocab::Users, sequences)
    }
}

fn check_clip(m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::Config {
            key: "clip".into(),
            msg: format!("must lie in [0, 1), got {m}"),
        });
    }
    Ok(())
}

/// Static propensities `m / max m'` from click counts.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyPropensity {
    pub p_item: Vec<f64>,
    pub p_user: Vec<f64>,
}

impl FrequencyPropensity {
    /// Entities with no clicks count as one click so every value is positive.
    pub fn from_counts(user_clicks: &[usize], item_clicks: &[usize]) -> Result<Self> {
        let table = |counts: &[usize], what: &str| -> Result<Vec<f64>> {
            let max = counts.iter().copied().max().unwrap_or(0);
            if max == 0 {
                return Err(Error::Validation(format!("no {what} has any clicks")));
            }
            Ok(counts.iter().map(|&m| m.max(1) as f64 / max as f64).collect())
        };
        Ok(Self {
            p_item: table(item_clicks, "item")?,
            p_user: table(user_clicks, "user")?,
        })
    }

    pub fn from_index(index: &SequenceIndex) -> Result<Self> {
        let users: Vec<usize> = (0..index.user_count()).map(|u| index.user_click_count(u)).collect();
        let items: Vec<usize> = (0..index.item_count()).map(|i| index.item_click_count(i)).collect();
        Self::from_counts(&users, &items)
    }
}

/// One row of a propensity dump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropensityRow {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
    pub item_view: f64,
    pub user_view: f64,
}

/// Writes `user, item, timestamp, item-view, user-view` rows as TSV.
pub fn write_propensity_dump(path: &Path, rows: &[PropensityRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "user\titem\ttimestamp\tp_item_view\tp_user_view")?;
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.user, r.item, r.timestamp, r.item_view, r.user_view
        )?;
    }
    out.flush()?;
    Ok(())
}
