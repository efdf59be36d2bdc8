use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::{Group, ParamId, ParameterStore, Tape, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
struct Layer {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// Post-norm encoder stack with learned positions and mean-poolable output.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub positions: ParamId,
    layers: Vec<Layer>,
    pub dim: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl TransformerEncoder {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        dim: usize,
        layers: usize,
        heads: usize,
        max_len: usize,
        ffn_mult: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config {
                key: "heads".into(),
                msg: format!("{heads} heads do not divide width {dim}"),
            });
        }
        let g = Group::Transformer;
        let positions = store.add_normal(format!("{prefix}.positions"), g, &[max_len + 1, dim], 0.1, rng);
        let hidden = dim * ffn_mult;
        let layers = (0..layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                let mut mat =
                    |name: &str, fi: usize, fo: usize| store.add_xavier(format!("{p}.{name}"), g, fi, fo, rng);
                let (wq, wk, wv, wo) = (
                    mat("wq", dim, dim),
                    mat("wk", dim, dim),
                    mat("wv", dim, dim),
                    mat("wo", dim, dim),
                );
                let (w1, w2) = (mat("w1", dim, hidden), mat("w2", hidden, dim));
                let mut c = |name: &str, n: usize, v: f64| store.add_constant(format!("{p}.{name}"), g, &[1, n], v);
                Layer {
                    wq,
                    bq: c("bq", dim, 0.0),
                    wk,
                    bk: c("bk", dim, 0.0),
                    wv,
                    bv: c("bv", dim, 0.0),
                    wo,
                    bo: c("bo", dim, 0.0),
                    ln1_g: c("ln1_g", dim, 1.0),
                    ln1_b: c("ln1_b", dim, 0.0),
                    w1,
                    b1: c("b1", hidden, 0.0),
                    w2,
                    b2: c("b2", dim, 0.0),
                    ln2_g: c("ln2_g", dim, 1.0),
                    ln2_b: c("ln2_b", dim, 0.0),
                }
            })
            .collect();
        Ok(Self {
            positions,
            layers,
            dim,
            heads,
            max_len,
            dropout,
        })
    }

    /// Attention projection parameters of every layer, query/key/value/output.
    pub fn attention_params(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| [l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo])
            .collect()
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
        let Some(rng) = rng.as_deref_mut() else { return Ok(x) };
        if self.dropout <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.dropout;
        let mask = (0..tape.value(x).len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        tape.mul_const(x, mask)
    }

    fn linear(tape: &mut Tape, store: &ParameterStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let w = tape.param(store, w);
        let b = tape.param(store, b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    /// Encodes `L×d` token embeddings into `L×d` outputs. Dropout is active
    /// only when `rng` is given.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        tokens: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let (len, d) = tape.value(tokens).dims2();
        if d != self.dim {
            return Err(Error::shape("encoder", format!("width {d}, expected {}", self.dim)));
        }
        if len > self.max_len + 1 {
            return Err(Error::shape(
                "encoder",
                format!("length {len} exceeds {}", self.max_len + 1),
            ));
        }
        let pos_table = tape.param(store, self.positions);
        let pos = tape.gather_rows(pos_table, &(0..len).collect::<Vec<_>>())?;
        let mut x = tape.add(tokens, pos)?;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for layer in &self.layers {
            let q = Self::linear(tape, store, x, layer.wq, layer.bq)?;
            let k = Self::linear(tape, store, x, layer.wk, layer.bk)?;
            let v = Self::linear(tape, store, x, layer.wv, layer.bv)?;
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = tape.slice_cols(q, h * dh, dh)?;
                let kh = tape.slice_cols(k, h * dh, dh)?;
                let vh = tape.slice_cols(v, h * dh, dh)?;
                let scores = tape.matmul_bt(qh, kh)?;
                let scores = tape.scale(scores, scale);
                let attn = tape.softmax_rows(scores);
                let attn = self.dropout(tape, attn, &mut rng)?;
                heads.push(tape.matmul(attn, vh)?);
            }
            let merged = if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat_cols(&heads)?
            };
            let attended = Self::linear(tape, store, merged, layer.wo, layer.bo)?;
            let res = tape.add(x, attended)?;
            let (g1, b1) = (tape.param(store, layer.ln1_g), tape.param(store, layer.ln1_b));
            let x1 = tape.layer_norm(res, g1, b1, LN_EPS)?;

            let hidden = Self::linear(tape, store, x1, layer.w1, layer.b1)?;
            let hidden = tape.gelu(hidden);
            let ff = Self::linear(tape, store, hidden, layer.w2, layer.b2)?;
            let ff = self.dropout(tape, ff, &mut rng)?;
            let res = tape.add(x1, ff)?;
            let (g2, b2) = (tape.param(store, layer.ln2_g), tape.param(store, layer.ln2_b));
            x = tape.layer_norm(res, g2, b2, LN_EPS)?;
        }
        Ok(x)
    }
}
