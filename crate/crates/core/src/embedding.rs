//! User and item embedding tables shared by every sub-model.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{Group, ParamId, ParameterStore, Tape, Tensor, Var};

/// Which vocabulary a sequence is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Vocab {
    Items,
    Users,
}

/// One embedding table plus its two special tokens.
#[derive(Debug, Clone, Copy)]
pub struct Table {
    pub table: ParamId,
    /// Replaces masked positions in masked-token training.
    pub mask: ParamId,
    /// Stands in for an empty history.
    pub pad: ParamId,
    pub size: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Embeddings {
    pub users: Table,
    pub items: Table,
    pub dim: usize,
}

impl Embeddings {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        user_count: usize,
        item_count: usize,
        dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let mut table = |prefix: &str, n: usize| Table {
            table: store.add_normal(format!("{prefix}.table"), Group::Embedding, &[n, dim], std, rng),
            mask: store.add_normal(format!("{prefix}.mask"), Group::Embedding, &[1, dim], std, rng),
            pad: store.add_normal(format!("{prefix}.pad"), Group::Embedding, &[1, dim], std, rng),
            size: n,
        };
        let users = table("emb.user", user_count);
        let items = table("emb.item", item_count);
        Self { users, items, dim }
    }

    pub fn table(&self, vocab: Vocab) -> &Table {
        match vocab {
            Vocab::Items => &self.items,
            Vocab::Users => &self.users,
        }
    }

    pub fn check(&self, vocab: Vocab, id: usize) -> Result<()> {
        let t = self.table(vocab);
        if id >= t.size {
            return Err(Error::Index {
                what: match vocab {
                    Vocab::Items => "item id",
                    Vocab::Users => "user id",
                },
                index: id,
                size: t.size,
            });
        }
        Ok(())
    }

    /// `1×d` embedding of one id.
    pub fn lookup(&self, tape: &mut Tape, store: &ParameterStore, vocab: Vocab, id: usize) -> Result<Var> {
        self.check(vocab, id)?;
        let t = tape.param(store, self.table(vocab).table);
        tape.gather_rows(t, &[id])
    }

    /// `L×d` embeddings of a sequence; positions flagged in `masked` use the mask token.
    pub fn sequence(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        vocab: Vocab,
        ids: &[usize],
        masked: Option<&[bool]>,
    ) -> Result<Var> {
        let t = self.table(vocab);
        if ids.is_empty() {
            return Ok(tape.param(store, t.pad));
        }
        let table = tape.param(store, t.table);
        let x = tape.gather_rows(table, ids)?;
        let Some(masked) = masked else { return Ok(x) };
        let d = self.dim;
        let keep: Vec<f64> = masked
            .iter()
            .flat_map(|&m| std::iter::repeat_n(if m { 0.0 } else { 1.0 }, d))
            .collect();
        let hit: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
        let kept = tape.mul_const(x, keep)?;
        let mask_tok = tape.param(store, t.mask);
        let tiled = tape.gather_rows(mask_tok, &vec![0; ids.len()])?;
        let placed = tape.mul_const(tiled, hit)?;
        tape.add(kept, placed)
    }

    pub fn vocab_matrix(&self, tape: &mut Tape, store: &ParameterStore, vocab: Vocab) -> Var {
        tape.param(store, self.table(vocab).table)
    }

    pub fn raw_row<'a>(&self, store: &'a ParameterStore, vocab: Vocab, id: usize) -> &'a [f64] {
        store.value(self.table(vocab).table).row_slice(id)
    }

    pub fn zero_row(&self) -> Tensor {
        Tensor::zeros(&[1, self.dim])
    }
}
