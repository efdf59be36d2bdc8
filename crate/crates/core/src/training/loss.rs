use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Tape, Var};
use crate::recommender::DepsModel;

use super::data::Sample;

/// Which inverse propensity weights the preference loss uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IpsMode {
    #[default]
    Dual,
    ItemOnly,
    UserOnly,
    None,
    FrequencyDual,
}

impl IpsMode {
    pub const ALL: [IpsMode; 5] = [
        IpsMode::Dual,
        IpsMode::ItemOnly,
        IpsMode::UserOnly,
        IpsMode::None,
        IpsMode::FrequencyDual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Dual => "dual",
            Self::ItemOnly => "item_only",
            Self::UserOnly => "user_only",
            Self::None => "none",
            Self::FrequencyDual => "frequency_dual",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config {
                key: "ips_mode".into(),
                msg: format!("unknown mode `{s}`"),
            })
    }

    pub fn uses_gru(self) -> bool {
        matches!(self, Self::Dual | Self::ItemOnly | Self::UserOnly)
    }
}

/// Clipped propensities of one sample from both views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Propensities {
    /// `P̃(i, h_u)`
    pub item_view: f64,
    /// `P̃(u, h_i)`
    pub user_view: f64,
}

impl Propensities {
    pub const ONE: Self = Self {
        item_view: 1.0,
        user_view: 1.0,
    };
}

/// Binary cross entropy with the probability clamped to `[1e-12, 1 - 1e-12]`.
pub fn bce(c: f64, r_hat: f64) -> f64 {
    crate::numeric::bce_value(c, r_hat)
}

/// Weight multiplying `δ` for one sample:
/// `α / P̃(i, h_u) + (1 - α) / P̃(u, h_i)` in the dual modes.
pub fn ips_weight(mode: IpsMode, alpha: f64, p: Propensities, clip: f64) -> Result<f64> {
    let check = |v: f64, what: &str| -> Result<f64> {
        if !(v >= clip) || !(v <= 1.0) {
            return Err(Error::Invariant(format!(
                "{what} propensity {v} outside [{clip}, 1] after clipping"
            )));
        }
        Ok(v)
    };
    Ok(match mode {
        IpsMode::None => 1.0,
        IpsMode::ItemOnly => 1.0 / check(p.item_view, "item-view")?,
        IpsMode::UserOnly => 1.0 / check(p.user_view, "user-view")?,
        IpsMode::Dual | IpsMode::FrequencyDual => {
            alpha / check(p.item_view, "item-view")? + (1.0 - alpha) / check(p.user_view, "user-view")?
        }
    })
}

/// `Σ_k w_k · δ(c_k, r̂_k)` over `samples`, propensities held constant.
/// With `dropout_seeds`, sample `k` runs with dropout seeded by `seeds[k]`.
pub fn unbiased_loss(
    tape: &mut Tape,
    model: &DepsModel,
    samples: &[&Sample],
    props: &[Propensities],
    mode: IpsMode,
    alpha: f64,
    clip: f64,
    dropout_seeds: Option<&[u64]>,
) -> Result<Var> {
    if samples.len() != props.len() {
        return Err(Error::shape(
            "unbiased_loss",
            format!("{} samples, {} propensities", samples.len(), props.len()),
        ));
    }
    let mut total: Option<Var> = None;
    for (k, (s, &p)) in samples.iter().zip(props).enumerate() {
        let w = ips_weight(mode, alpha, p, clip)?;
        let mut rng = dropout_seeds.map(|seeds| ChaCha8Rng::seed_from_u64(seeds[k]));
        let r_hat = model.predict_var(tape, s.user, s.item, &s.h_u, &s.h_i, rng.as_mut())?;
        let delta = tape.bce(r_hat, if s.click { 1.0 } else { 0.0 })?;
        let term = tape.scale(delta, w);
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(crate::numeric::Tensor::scalar(0.0))))
}
