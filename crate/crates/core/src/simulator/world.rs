use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interactions::{Interaction, InteractionLog};
use crate::numeric::sigmoid;
use crate::parallel::mix_seed;

/// Exposure score `pop_i^a · rec_i^b`, normalised by its maximum over items
/// and floored. `pop_i` is one plus the item's past clicks; `rec_i` is
/// `1 / (1 + Δ_i / τ)` with `Δ_i` the accesses since the item's last click.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExposureParams {
    pub popularity: f64,
    pub recency: f64,
    pub recency_tau: f64,
    pub floor: f64,
}

impl Default for ExposureParams {
    fn default() -> Self {
        Self {
            popularity: 2.0,
            recency: 1.0,
            recency_tau: 20.0,
            floor: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_users: usize,
    pub n_items: usize,
    /// Latent dimension `d_w`.
    pub dim: usize,
    /// Multiplier `s` in `ρ = σ(s · (⟨p_u, q_i⟩ − c))`.
    pub latent_scale: f64,
    /// Offset `c`; larger values make relevance sparser.
    pub relevance_offset: f64,
    /// Zipf exponent of user access frequency; `0` is uniform.
    pub activity_skew: f64,
    pub exposure: ExposureParams,
    /// Number of exposed records to generate.
    pub horizon: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_users: 100,
            n_items: 100,
            dim: 8,
            latent_scale: 2.0,
            relevance_offset: 0.0,
            activity_skew: 0.0,
            exposure: ExposureParams::default(),
            horizon: 5000,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config { key: key.into(), msg });
        if self.n_users < 2 {
            return bad("n_users", format!("need at least 2, got {}", self.n_users));
        }
        if self.n_items < 2 {
            return bad("n_items", format!("need at least 2, got {}", self.n_items));
        }
        if self.dim == 0 {
            return bad("dim", "must be positive".into());
        }
        if !self.latent_scale.is_finite() || self.latent_scale < 0.0 {
            return bad(
                "latent_scale",
                format!("must be finite and non-negative, got {}", self.latent_scale),
            );
        }
        if !self.relevance_offset.is_finite() {
            return bad(
                "relevance_offset",
                format!("must be finite, got {}", self.relevance_offset),
            );
        }
        if !self.activity_skew.is_finite() || self.activity_skew < 0.0 {
            return bad(
                "activity_skew",
                format!("must be non-negative, got {}", self.activity_skew),
            );
        }
        let e = &self.exposure;
        if !e.popularity.is_finite() || e.popularity < 0.0 {
            return bad(
                "exposure.popularity",
                format!("must be non-negative, got {}", e.popularity),
            );
        }
        if !e.recency.is_finite() || e.recency < 0.0 {
            return bad("exposure.recency", format!("must be non-negative, got {}", e.recency));
        }
        if !(e.recency_tau > 0.0 && e.recency_tau.is_finite()) {
            return bad(
                "exposure.recency_tau",
                format!("must be positive, got {}", e.recency_tau),
            );
        }
        if !(e.floor > 0.0 && e.floor <= 1.0) {
            return bad("exposure.floor", format!("must lie in (0, 1], got {}", e.floor));
        }
        if self.horizon == 0 {
            return bad("horizon", "must be at least 1".into());
        }
        Ok(())
    }
}

/// Ground-truth relevance and exposure mechanism.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub user_latent: Vec<Vec<f64>>,
    pub item_latent: Vec<Vec<f64>>,
    /// Row-major `n_users × n_items` relevance probabilities.
    rho: Vec<f64>,
    /// Cumulative user access distribution.
    access_cdf: Vec<f64>,
}

/// Click state that drives exposure; only past accesses update it.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureState {
    pub item_clicks: Vec<usize>,
    pub last_click: Vec<Option<i64>>,
}

impl ExposureState {
    pub fn new(n_items: usize) -> Self {
        Self {
            item_clicks: vec![0; n_items],
            last_click: vec![None; n_items],
        }
    }

    pub fn record_click(&mut self, item: usize, t: i64) {
        self.item_clicks[item] += 1;
        self.last_click[item] = Some(t);
    }
}

pub fn generate_world(config: &WorldConfig) -> Result<SyntheticWorld> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 11]));
    // coordinate variance 1/sqrt(d) gives unit-variance dot products
    let normal = Normal::new(0.0, (config.dim as f64).powf(-0.25)).expect("finite std");
    let mut draw = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..config.dim).map(|_| normal.sample(&mut rng)).collect())
            .collect()
    };
    let user_latent = draw(config.n_users);
    let item_latent = draw(config.n_items);
    let mut rho = Vec::with_capacity(config.n_users * config.n_items);
    for p in &user_latent {
        for q in &item_latent {
            let dot: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
            rho.push(sigmoid(config.latent_scale * (dot - config.relevance_offset)));
        }
    }
    let weights: Vec<f64> = (0..config.n_users)
        .map(|u| ((u + 1) as f64).powf(-config.activity_skew))
        .collect();
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    let mut access_cdf: Vec<f64> = weights
        .iter()
        .map(|w| {
            acc += w / total;
            acc
        })
        .collect();
    *access_cdf.last_mut().expect("at least two users") = 1.0;
    Ok(SyntheticWorld {
        config: *config,
        user_latent,
        item_latent,
        rho,
        access_cdf,
    })
}

impl SyntheticWorld {
    pub fn n_users(&self) -> usize {
        self.config.n_users
    }

    pub fn n_items(&self) -> usize {
        self.config.n_items
    }

    /// `P(r = 1 | u, i)`
    pub fn rho(&self, user: usize, item: usize) -> f64 {
        self.rho[user * self.config.n_items + item]
    }

    /// Replaces the relevance matrix (row-major `n_users × n_items`, values in `[0, 1]`).
    pub fn with_relevance(mut self, rho: Vec<f64>) -> Result<Self> {
        if rho.len() != self.config.n_users * self.config.n_items {
            return Err(Error::shape(
                "with_relevance",
                format!(
                    "expected {} values, got {}",
                    self.config.n_users * self.config.n_items,
                    rho.len()
                ),
            ));
        }
        if let Some(bad) = rho.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Validation(format!("relevance {bad} outside [0, 1]")));
        }
        self.rho = rho;
        Ok(self)
    }

    pub fn sample_user<R: Rng>(&self, rng: &mut R) -> usize {
        let x: f64 = rng.random();
        self.access_cdf
            .partition_point(|&c| c <= x)
            .min(self.config.n_users - 1)
    }

    /// Exposure probability of every item at access time `t` given the state
    /// accumulated strictly before `t`.
    pub fn exposure(&self, state: &ExposureState, t: i64) -> Vec<f64> {
        let e = &self.config.exposure;
        let raw: Vec<f64> = (0..self.config.n_items)
            .map(|i| {
                let pop = (1 + state.item_clicks[i]) as f64;
                let since = match state.last_click[i] {
                    Some(s) => (t - s) as f64,
                    None => (t + 1) as f64,
                };
                let rec = 1.0 / (1.0 + since / e.recency_tau);
                pop.powf(e.popularity) * rec.powf(e.recency)
            })
            .collect();
        let max = raw.iter().cloned().fold(0.0, f64::max);
        raw.iter().map(|&s| (s / max).max(e.floor)).collect()
    }
}

/// One user visit: exposure probability, exposure draw and relevance draw for every item.
#[derive(Debug, Clone, PartialEq)]
pub struct Access {
    pub t: i64,
    pub user: usize,
    pub omega: Vec<f64>,
    pub exposed: Vec<bool>,
    pub relevant: Vec<bool>,
}

/// Simulated log: every access with its hidden draws, plus the public view
/// holding only exposed pairs with `click = r`.
#[derive(Debug, Clone)]
pub struct SimulatedLog {
    pub accesses: Vec<Access>,
    pub log: InteractionLog,
}

/// Runs accesses until at least `horizon` exposed records exist. Timestamps
/// are access indices, so all records of one access share a timestamp.
pub fn simulate_log(world: &SyntheticWorld, horizon: usize) -> Result<SimulatedLog> {
    if horizon == 0 {
        return Err(Error::Config {
            key: "horizon".into(),
            msg: "must be at least 1".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[world.config.seed, 12]));
    let mut state = ExposureState::new(world.n_items());
    let mut accesses = Vec::new();
    let mut records = Vec::with_capacity(horizon);
    let mut t = 0i64;
    while records.len() < horizon {
        let user = world.sample_user(&mut rng);
        let omega = world.exposure(&state, t);
        let mut exposed = Vec::with_capacity(omega.len());
        let mut relevant = Vec::with_capacity(omega.len());
        for (i, &w) in omega.iter().enumerate() {
            let o = rng.random::<f64>() < w;
            let r = rng.random::<f64>() < world.rho(user, i);
            exposed.push(o);
            relevant.push(r);
            if o {
                records.push(Interaction::new(user, i, t, r));
            }
        }
        for i in 0..omega.len() {
            if exposed[i] && relevant[i] {
                state.record_click(i, t);
            }
        }
        accesses.push(Access {
            t,
            user,
            omega,
            exposed,
            relevant,
        });
        t += 1;
    }
    let log = InteractionLog::new(records, world.n_users(), world.n_items())?;
    Ok(SimulatedLog { accesses, log })
}

impl SimulatedLog {
    /// Hidden view: `user, item, timestamp, click, r, o, omega` for every pair of every access.
    pub fn write_hidden_tsv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(out, "user\titem\ttimestamp\tclick\tr\to\tomega")?;
        for a in &self.accesses {
            for i in 0..a.omega.len() {
                let (o, r) = (a.exposed[i] as u8, a.relevant[i] as u8);
                writeln!(out, "{}\t{i}\t{}\t{}\t{r}\t{o}\t{}", a.user, a.t, o * r, a.omega[i])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_public_tsv(&self, path: &Path) -> Result<()> {
        self.log.write_tsv(path)
    }
}
