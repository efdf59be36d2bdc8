use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{Group, ParamId, ParameterStore, Tape, Tensor, Var};

/// Single-layer GRU with gate blocks ordered `[reset | update | candidate]`.
///
/// `r = σ(x W_r + b_r + h U_r + c_r)`, `z = σ(x W_z + b_z + h U_z + c_z)`,
/// `n = tanh(x W_n + b_n + r ⊙ (h U_n + c_n))`, `h' = (1 - z) ⊙ n + z ⊙ h`.
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    /// `d × 3d`
    pub w_input: ParamId,
    /// `d × 3d`
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
    pub dim: usize,
}

impl GruCell {
    pub fn register<R: Rng>(store: &mut ParameterStore, prefix: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            w_input: store.add_xavier(format!("{prefix}.w_input"), Group::Propensity, dim, 3 * dim, rng),
            w_hidden: store.add_xavier(format!("{prefix}.w_hidden"), Group::Propensity, dim, 3 * dim, rng),
            b_input: store.add_constant(format!("{prefix}.b_input"), Group::Propensity, &[1, 3 * dim], 0.0),
            b_hidden: store.add_constant(format!("{prefix}.b_hidden"), Group::Propensity, &[1, 3 * dim], 0.0),
            dim,
        }
    }

    pub fn zero_state(&self, tape: &mut Tape) -> Var {
        tape.constant(Tensor::zeros(&[1, self.dim]))
    }

    /// Input projections `X W + b` for a whole `L×d` sequence.
    pub fn project_inputs(&self, tape: &mut Tape, store: &ParameterStore, xs: Var) -> Result<Var> {
        let w = tape.param(store, self.w_input);
        let b = tape.param(store, self.b_input);
        let gi = tape.matmul(xs, w)?;
        tape.add_row(gi, b)
    }

    /// One update from a projected input row; returns the new hidden state,
    /// which is also the cell output.
    pub fn step_projected(&self, tape: &mut Tape, store: &ParameterStore, gi: Var, h: Var) -> Result<Var> {
        let d = self.dim;
        let u = tape.param(store, self.w_hidden);
        let c = tape.param(store, self.b_hidden);
        let gh = tape.matmul(h, u)?;
        let gh = tape.add_row(gh, c)?;

        let gi_rz = tape.slice_cols(gi, 0, 2 * d)?;
        let gh_rz = tape.slice_cols(gh, 0, 2 * d)?;
        let rz = tape.add(gi_rz, gh_rz)?;
        let rz = tape.sigmoid(rz);
        let r = tape.slice_cols(rz, 0, d)?;
        let z = tape.slice_cols(rz, d, d)?;

        let gi_n = tape.slice_cols(gi, 2 * d, d)?;
        let gh_n = tape.slice_cols(gh, 2 * d, d)?;
        let gated = tape.mul(r, gh_n)?;
        let n = tape.add(gi_n, gated)?;
        let n = tape.tanh(n);

        let diff = tape.sub(h, n)?;
        let kept = tape.mul(z, diff)?;
        tape.add(n, kept)
    }

    pub fn step(&self, tape: &mut Tape, store: &ParameterStore, x: Var, h: Var) -> Result<Var> {
        if tape.value(x).shape() != [1, self.dim] || tape.value(h).shape() != [1, self.dim] {
            return Err(Error::shape(
                "gru_step",
                format!(
                    "input {:?}, hidden {:?}, expected [1, {}]",
                    tape.value(x).shape(),
                    tape.value(h).shape(),
                    self.dim
                ),
            ));
        }
        let gi = self.project_inputs(tape, store, x)?;
        self.step_projected(tape, store, gi, h)
    }

    /// Hidden states after each input row of `xs`, starting from zero.
    pub fn scan(&self, tape: &mut Tape, store: &ParameterStore, xs: Var) -> Result<Vec<Var>> {
        let rows = tape.value(xs).rows();
        let gi = self.project_inputs(tape, store, xs)?;
        let mut h = self.zero_state(tape);
        let mut out = Vec::with_capacity(rows);
        for k in 0..rows {
            let row = tape.gather_rows(gi, &[k])?;
            h = self.step_projected(tape, store, row, h)?;
            out.push(h);
        }
        Ok(out)
    }
}
