//! Dual-transformer preference model.

mod transformer;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use transformer::TransformerEncoder;

use crate::embedding::{Embeddings, Vocab};
use crate::error::{Error, Result};
use crate::numeric::{checkpoint, Group, ParamId, ParameterStore, Tape, Tensor, Var};
use crate::propensity::PropensityEstimator;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub mask_prob: f64,
    pub ffn_mult: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            layers: 2,
            heads: 2,
            max_len: 50,
            dropout: 0.1,
            mask_prob: 0.2,
            ffn_mult: 4,
            init_std: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config { key: key.into(), msg });
        if self.dim == 0 {
            return bad("dim", "must be positive".into());
        }
        if self.layers == 0 {
            return bad("layers", "must be positive".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(
                "heads",
                format!("{} heads do not divide width {}", self.heads, self.dim),
            );
        }
        if self.max_len == 0 {
            return bad("max_len", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return bad("mask_prob", format!("must lie in (0, 1), got {}", self.mask_prob));
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult", "must be positive".into());
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std", format!("must be positive, got {}", self.init_std));
        }
        Ok(())
    }
}

/// Two-layer head over `e(h_u) ‖ e(i) ‖ e(h_i) ‖ e(u)`.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Hyperparameter manifest stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub user_count: usize,
    pub item_count: usize,
    pub clip: f64,
    pub seed: u64,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const MANIFEST_FILE: &str = "model.json";

/// Anything that can score a `(user, item)` pair given both histories.
pub trait Scorer: Sync {
    fn score(&self, user: usize, item: usize, h_u: &[usize], h_i: &[usize]) -> Result<f64>;

    /// Scores several candidate items for one user; `h_is[k]` is the history of `items[k]`.
    fn score_items(&self, user: usize, h_u: &[usize], items: &[usize], h_is: &[Vec<usize>]) -> Result<Vec<f64>> {
        items
            .iter()
            .zip(h_is)
            .map(|(&i, h_i)| self.score(user, i, h_u, h_i))
            .collect()
    }
}

/// Embeddings, both propensity GRUs, both encoders and the prediction head.
#[derive(Debug, Clone)]
pub struct DepsModel {
    pub config: ModelConfig,
    pub store: ParameterStore,
    pub emb: Embeddings,
    pub estimator: PropensityEstimator,
    pub item_encoder: TransformerEncoder,
    pub user_encoder: TransformerEncoder,
    pub mlp: Mlp,
    pub seed: u64,
}

impl DepsModel {
    pub fn new(config: ModelConfig, user_count: usize, item_count: usize, clip: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        if user_count == 0 || item_count == 0 {
            return Err(Error::Validation("model needs at least one user and one item".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let d = config.dim;
        let emb = Embeddings::register(&mut store, user_count, item_count, d, config.init_std, &mut rng);
        let estimator = PropensityEstimator::register(&mut store, d, clip, &mut rng)?;
        let encoder = |store: &mut ParameterStore, prefix: &str, rng: &mut ChaCha8Rng| {
            TransformerEncoder::register(
                store,
                prefix,
                d,
                config.layers,
                config.heads,
                config.max_len,
                config.ffn_mult,
                config.dropout,
                rng,
            )
        };
        let item_encoder = encoder(&mut store, "enc.item", &mut rng)?;
        let user_encoder = encoder(&mut store, "enc.user", &mut rng)?;
        let mlp = Mlp {
            w1: store.add_xavier("mlp.w1", Group::Mlp, 4 * d, d, &mut rng),
            b1: store.add_constant("mlp.b1", Group::Mlp, &[1, d], 0.0),
            w2: store.add_xavier("mlp.w2", Group::Mlp, d, 1, &mut rng),
            b2: store.add_constant("mlp.b2", Group::Mlp, &[1, 1], 0.0),
        };
        Ok(Self {
            config,
            store,
            emb,
            estimator,
            item_encoder,
            user_encoder,
            mlp,
            seed,
        })
    }

    pub fn user_count(&self) -> usize {
        self.emb.users.size
    }

    pub fn item_count(&self) -> usize {
        self.emb.items.size
    }

    pub fn encoder(&self, vocab: Vocab) -> &TransformerEncoder {
        match vocab {
            Vocab::Items => &self.item_encoder,
            Vocab::Users => &self.user_encoder,
        }
    }

    fn truncate<'a>(&self, seq: &'a [usize]) -> &'a [usize] {
        &seq[seq.len().saturating_sub(self.config.max_len)..]
    }

    /// Mean-pooled `1×d` encoding of a history; an empty history encodes the pad token.
    pub fn encode_history(
        &self,
        tape: &mut Tape,
        vocab: Vocab,
        seq: &[usize],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let seq = self.truncate(seq);
        for &id in seq {
            self.emb.check(vocab, id)?;
        }
        let x = self.emb.sequence(tape, &self.store, vocab, seq, None)?;
        let h = self.encoder(vocab).forward(tape, &self.store, x, rng)?;
        Ok(tape.mean_rows(h))
    }

    /// `e(h_u)`: encoding of a user's item history.
    pub fn encode_item_history(&self, tape: &mut Tape, h_u: &[usize], rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        self.encode_history(tape, Vocab::Items, h_u, rng)
    }

    /// `e(h_i)`: encoding of an item's user history.
    pub fn encode_user_history(&self, tape: &mut Tape, h_i: &[usize], rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        self.encode_history(tape, Vocab::Users, h_i, rng)
    }

    /// `σ(MLP(...))` from precomputed history encodings, as a `1×1` node.
    pub fn head(&self, tape: &mut Tape, user: usize, item: usize, enc_hu: Var, enc_hi: Var) -> Result<Var> {
        let e_i = self.emb.lookup(tape, &self.store, Vocab::Items, item)?;
        let e_u = self.emb.lookup(tape, &self.store, Vocab::Users, user)?;
        let z = tape.concat_cols(&[enc_hu, e_i, enc_hi, e_u])?;
        let (w1, b1) = (
            tape.param(&self.store, self.mlp.w1),
            tape.param(&self.store, self.mlp.b1),
        );
        let (w2, b2) = (
            tape.param(&self.store, self.mlp.w2),
            tape.param(&self.store, self.mlp.b2),
        );
        let h = tape.matmul(z, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h);
        let o = tape.matmul(h, w2)?;
        let o = tape.add_row(o, b2)?;
        Ok(tape.sigmoid(o))
    }

    /// Predicted preference as a tape node; dropout is active only with `rng`.
    pub fn predict_var(
        &self,
        tape: &mut Tape,
        user: usize,
        item: usize,
        h_u: &[usize],
        h_i: &[usize],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.emb.check(Vocab::Users, user)?;
        self.emb.check(Vocab::Items, item)?;
        let a = self.encode_item_history(tape, h_u, rng.as_deref_mut())?;
        let b = self.encode_user_history(tape, h_i, rng)?;
        self.head(tape, user, item, a, b)
    }

    /// Deterministic preference `r̂ ∈ (0, 1)`.
    pub fn predict(&self, user: usize, item: usize, h_u: &[usize], h_i: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.predict_var(&mut tape, user, item, h_u, h_i, None)?;
        Ok(tape.scalar(p))
    }

    /// Masked-token loss summed over sequences; each sequence contributes the
    /// mean negative log-likelihood of its masked positions.
    pub fn mlm_loss(
        &self,
        tape: &mut Tape,
        vocab: Vocab,
        sequences: &[Vec<usize>],
        mask_prob: f64,
        rng: &mut ChaCha8Rng,
        dropout: bool,
    ) -> Result<Var> {
        let v = self.emb.table(vocab).size;
        let mut terms = Vec::new();
        for seq in sequences.iter().filter(|s| !s.is_empty()) {
            let seq = self.truncate(seq);
            for &id in seq {
                self.emb.check(vocab, id)?;
            }
            let masked = mask_positions(seq.len(), mask_prob, rng);
            let x = self.emb.sequence(tape, &self.store, vocab, seq, Some(&masked))?;
            let h = self
                .encoder(vocab)
                .forward(tape, &self.store, x, dropout.then_some(&mut *rng))?;
            let at: Vec<usize> = (0..seq.len()).filter(|&k| masked[k]).collect();
            let hm = tape.gather_rows(h, &at)?;
            let table = self.emb.vocab_matrix(tape, &self.store, vocab);
            let logits = tape.matmul_bt(hm, table)?;
            let logp = tape.log_softmax_rows(logits);
            let flat: Vec<usize> = at.iter().enumerate().map(|(r, &k)| r * v + seq[k]).collect();
            let picked = tape.pick(logp, &flat)?;
            let s = tape.sum(picked);
            terms.push(tape.scale(s, -1.0 / at.len() as f64));
        }
        let Some((&first, rest)) = terms.split_first() else {
            return Ok(tape.constant(Tensor::scalar(0.0)));
        };
        let mut total = first;
        for &t in rest {
            total = tape.add(total, t)?;
        }
        Ok(total)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            config: self.config,
            user_count: self.user_count(),
            item_count: self.item_count(),
            clip: self.estimator.clip,
            seed: self.seed,
        }
    }

    /// Writes the checkpoint and its JSON manifest into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CHECKPOINT_FILE), checkpoint::to_bytes(&self.store))?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self.manifest())?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let mut model = Self::new(
            manifest.config,
            manifest.user_count,
            manifest.item_count,
            manifest.clip,
            manifest.seed,
        )?;
        let bytes = fs::read(dir.join(CHECKPOINT_FILE))?;
        checkpoint::read_into_store(&mut bytes.as_slice(), &mut model.store)?;
        Ok(model)
    }
}

impl Scorer for DepsModel {
    fn score(&self, user: usize, item: usize, h_u: &[usize], h_i: &[usize]) -> Result<f64> {
        self.predict(user, item, h_u, h_i)
    }

    fn score_items(&self, user: usize, h_u: &[usize], items: &[usize], h_is: &[Vec<usize>]) -> Result<Vec<f64>> {
        self.emb.check(Vocab::Users, user)?;
        let mut base = Tape::new();
        let enc_hu = self.encode_item_history(&mut base, h_u, None)?;
        let enc_hu = base.value(enc_hu).clone();
        items
            .iter()
            .zip(h_is)
            .map(|(&item, h_i)| {
                self.emb.check(Vocab::Items, item)?;
                let mut tape = Tape::new();
                let a = tape.constant(enc_hu.clone());
                let b = self.encode_user_history(&mut tape, h_i, None)?;
                let p = self.head(&mut tape, user, item, a, b)?;
                Ok(tape.scalar(p))
            })
            .collect()
    }
}

/// Independent Bernoulli selection with at least one selected position.
pub fn mask_positions<R: Rng>(len: usize, p: f64, rng: &mut R) -> Vec<bool> {
    let mut masked: Vec<bool> = (0..len).map(|_| rng.random::<f64>() < p).collect();
    if len > 0 && !masked.iter().any(|&m| m) {
        masked[rng.random_range(0..len)] = true;
    }
    masked
}
