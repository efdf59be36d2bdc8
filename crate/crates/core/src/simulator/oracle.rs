use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interactions::SequenceIndex;
use crate::numeric::bce_value;
use crate::parallel::{map_indices, mix_seed};
use crate::recommender::Scorer;

use super::world::{SimulatedLog, SyntheticWorld};

/// Largest item vocabulary for which the exact per-access sum is attempted.
pub const MAX_EXACT_ITEMS: usize = 200;

const Z_95: f64 = 1.959_963_984_540_054;

/// One (access, item) pair with everything the oracles need.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleSample {
    pub user: usize,
    pub item: usize,
    pub t: i64,
    pub omega: f64,
    pub rho: f64,
    /// Realised relevance draw from the hidden log.
    pub relevant: bool,
    pub r_hat: f64,
}

impl OracleSample {
    pub fn delta(&self, r: bool) -> f64 {
        bce_value(if r { 1.0 } else { 0.0 }, self.r_hat)
    }

    /// `E_r δ(r, r̂)` under `r ~ Bernoulli(ρ)`.
    pub fn expected_delta(&self) -> f64 {
        self.rho * self.delta(true) + (1.0 - self.rho) * self.delta(false)
    }
}

/// `n` access indices spread evenly over `0..total`.
pub fn evenly_spaced(total: usize, n: usize) -> Vec<usize> {
    if n >= total {
        return (0..total).collect();
    }
    (0..n).map(|k| k * total / n).collect()
}

/// Scores every item at each chosen access, with histories taken from the
/// public log strictly before the access time.
pub fn collect_samples<S: Scorer + ?Sized>(
    world: &SyntheticWorld,
    sim: &SimulatedLog,
    scorer: &S,
    accesses: &[usize],
    max_len: usize,
) -> Result<Vec<OracleSample>> {
    if world.n_items() > MAX_EXACT_ITEMS {
        return Err(Error::Validation(format!(
            "{} items exceeds the exact-summation limit of {MAX_EXACT_ITEMS}; use a sampled subset of items",
            world.n_items()
        )));
    }
    for &a in accesses {
        if a >= sim.accesses.len() {
            return Err(Error::Index {
                what: "access",
                index: a,
                size: sim.accesses.len(),
            });
        }
    }
    let index = SequenceIndex::build(&sim.log);
    let items: Vec<usize> = (0..world.n_items()).collect();
    let per_access = map_indices(accesses.len(), |k| -> Result<Vec<OracleSample>> {
        let acc = &sim.accesses[accesses[k]];
        let h_u = index.item_view_sequence(acc.user, acc.t, max_len);
        let h_is: Vec<Vec<usize>> = items
            .iter()
            .map(|&i| index.user_view_sequence(i, acc.t, max_len))
            .collect();
        let scores = scorer.score_items(acc.user, &h_u, &items, &h_is)?;
        Ok(items
            .iter()
            .map(|&i| OracleSample {
                user: acc.user,
                item: i,
                t: acc.t,
                omega: acc.omega[i],
                rho: world.rho(acc.user, i),
                relevant: acc.relevant[i],
                r_hat: scores[i],
            })
            .collect())
    });
    let mut out = Vec::with_capacity(accesses.len() * items.len());
    for block in per_access {
        out.extend(block?);
    }
    Ok(out)
}

/// Exact ideal loss: expected `δ` over relevance, summed over all items of every chosen access.
pub fn ideal_loss_oracle<S: Scorer + ?Sized>(
    world: &SyntheticWorld,
    sim: &SimulatedLog,
    scorer: &S,
    accesses: &[usize],
    max_len: usize,
) -> Result<f64> {
    let samples = collect_samples(world, sim, scorer, accesses, max_len)?;
    Ok(ideal_loss(&samples))
}

pub fn ideal_loss(samples: &[OracleSample]) -> f64 {
    samples.iter().map(OracleSample::expected_delta).sum()
}

/// Dual-view IPS weight with both views set to the true exposure probability.
pub fn true_weight(omega: f64, clip: f64, alpha: f64) -> f64 {
    let p = omega.max(clip);
    alpha / p + (1.0 - alpha) / p
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceSummary {
    pub samples: usize,
    pub replications: usize,
    pub bound_violations: usize,
    pub view_violations: usize,
    /// Largest empirical variance divided by `(1/M − 1)·δ²`.
    pub max_ratio: f64,
    pub mean_empirical: f64,
    pub mean_bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub alpha: f64,
    pub clip: f64,
    pub replications: usize,
    pub samples: usize,
    pub mc_mean: f64,
    pub ideal: f64,
    pub relative_bias: f64,
    /// Half-width of the 95% interval on the relative bias.
    pub ci_half_width: f64,
    pub ci_contains_zero: bool,
    pub variance: VarianceSummary,
}

impl OracleReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub const MIN_REPLICATIONS: usize = 1000;

fn check_common(clip: f64, alpha: f64, replications: usize) -> Result<()> {
    if replications < MIN_REPLICATIONS {
        return Err(Error::Config {
            key: "replications".into(),
            msg: format!("need at least {MIN_REPLICATIONS}, got {replications}"),
        });
    }
    if !(0.0..=1.0).contains(&clip) {
        return Err(Error::Config {
            key: "clip".into(),
            msg: format!("must lie in [0, 1], got {clip}"),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config {
            key: "alpha".into(),
            msg: format!("must lie in [0, 1], got {alpha}"),
        });
    }
    Ok(())
}

/// Per-sample mean and population variance of `o·δ(r)` over independent
/// exposure and relevance draws; each sample has its own sub-seed.
fn exposure_moments(samples: &[OracleSample], replications: usize, seed: u64) -> Vec<(f64, f64)> {
    map_indices(samples.len(), |s| {
        let x = &samples[s];
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, s as u64]));
        let (d1, d0) = (x.delta(true), x.delta(false));
        let mut draws = Vec::with_capacity(replications);
        for _ in 0..replications {
            let o = rng.random::<f64>() < x.omega;
            let r = rng.random::<f64>() < x.rho;
            draws.push(if o {
                if r {
                    d1
                } else {
                    d0
                }
            } else {
                0.0
            });
        }
        moments(&draws)
    })
}

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Monte Carlo check that true-propensity IPS reproduces the ideal loss,
/// plus the per-sample variance bound.
pub fn unbiasedness_check(
    samples: &[OracleSample],
    clip: f64,
    alpha: f64,
    replications: usize,
    seed: u64,
) -> Result<OracleReport> {
    check_common(clip, alpha, replications)?;
    if samples.is_empty() {
        return Err(Error::EmptySequence("unbiasedness_check"));
    }
    let ideal = ideal_loss(samples);
    let stats = exposure_moments(samples, replications, mix_seed(&[seed, 1]));
    let mut mean = 0.0;
    let mut var = 0.0;
    for (x, (m, v)) in samples.iter().zip(&stats) {
        let w = true_weight(x.omega, clip, alpha);
        mean += w * m;
        var += w * w * v;
    }
    let half = Z_95 * (var / replications as f64).sqrt();
    let variance = variance_check(samples, clip, alpha, replications, mix_seed(&[seed, 2]))?;
    Ok(OracleReport {
        alpha,
        clip,
        replications,
        samples: samples.len(),
        mc_mean: mean,
        ideal,
        relative_bias: (mean - ideal) / ideal,
        ci_half_width: half / ideal,
        ci_contains_zero: (mean - ideal).abs() <= half,
        variance,
    })
}

const ROUNDING_SLACK: f64 = 1e-12;

/// Per-sample variance of the weighted loss over stratified exposure draws,
/// with `δ` fixed at the realised relevance, compared with `(1/M − 1)·δ²`
/// and with the larger single-view variance.
pub fn variance_check(
    samples: &[OracleSample],
    clip: f64,
    alpha: f64,
    replications: usize,
    seed: u64,
) -> Result<VarianceSummary> {
    check_common(clip, alpha, replications)?;
    let per = map_indices(samples.len(), |s| {
        let x = &samples[s];
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, s as u64]));
        let start: f64 = rng.random();
        let delta = x.delta(x.relevant);
        let p = x.omega.max(clip);
        let (mut dual, mut user, mut item) = (
            Vec::with_capacity(replications),
            Vec::with_capacity(replications),
            Vec::with_capacity(replications),
        );
        for k in 0..replications {
            let o = ((k as f64 + start) / replications as f64) < x.omega;
            let o = if o { 1.0 } else { 0.0 };
            dual.push(o * (alpha * delta / p + (1.0 - alpha) * delta / p));
            user.push(o * delta / p);
            item.push(o * delta / p);
        }
        let v = moments(&dual).1;
        let single = moments(&user).1.max(moments(&item).1);
        let bound = if clip > 0.0 {
            (1.0 / clip - 1.0) * delta * delta
        } else {
            f64::INFINITY
        };
        (v, single, bound)
    });
    let mut summary = VarianceSummary {
        samples: samples.len(),
        replications,
        bound_violations: 0,
        view_violations: 0,
        max_ratio: 0.0,
        mean_empirical: 0.0,
        mean_bound: 0.0,
    };
    for &(v, single, bound) in &per {
        if v > bound * (1.0 + ROUNDING_SLACK) {
            summary.bound_violations += 1;
        }
        if v > single * (1.0 + ROUNDING_SLACK) {
            summary.view_violations += 1;
        }
        if bound > 0.0 && bound.is_finite() {
            summary.max_ratio = summary.max_ratio.max(v / bound);
        }
        summary.mean_empirical += v;
        summary.mean_bound += bound;
    }
    let n = per.len().max(1) as f64;
    summary.mean_empirical /= n;
    summary.mean_bound /= n;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipPoint {
    pub clip: f64,
    /// `L^ideal − E[L_M]`.
    pub bias: f64,
    /// Mean per-sample variance of the clipped weighted loss.
    pub variance: f64,
}

/// Bias and variance of the clipped estimator at each `M`, all computed
/// from one shared set of draws.
pub fn clip_bias_variance(
    samples: &[OracleSample],
    clips: &[f64],
    alpha: f64,
    replications: usize,
    seed: u64,
) -> Result<Vec<ClipPoint>> {
    for &m in clips {
        check_common(m, alpha, replications)?;
    }
    if samples.is_empty() {
        return Err(Error::EmptySequence("clip_bias_variance"));
    }
    let ideal = ideal_loss(samples);
    let stats = exposure_moments(samples, replications, mix_seed(&[seed, 3]));
    Ok(clips
        .iter()
        .map(|&m| {
            let mut mean = 0.0;
            let mut var = 0.0;
            for (x, (mu, v)) in samples.iter().zip(&stats) {
                let w = true_weight(x.omega, m, alpha);
                mean += w * mu;
                var += w * w * v;
            }
            ClipPoint {
                clip: m,
                bias: ideal - mean,
                variance: var / samples.len() as f64,
            }
        })
        .collect())
}

/// Recomputes every access's exposure vector from the public clicks strictly
/// before it and returns the indices of accesses that disagree with the hidden log.
pub fn causality_audit(world: &SyntheticWorld, sim: &SimulatedLog) -> Vec<usize> {
    let index = SequenceIndex::build(&sim.log);
    let mut bad = Vec::new();
    for (k, acc) in sim.accesses.iter().enumerate() {
        let mut state = super::world::ExposureState::new(world.n_items());
        for i in 0..world.n_items() {
            let seq = index.user_view_sequence(i, acc.t, usize::MAX);
            state.item_clicks[i] = seq.len();
            let last = index
                .item_timeline(i)
                .iter()
                .take_while(|&&(ts, _)| ts < acc.t)
                .last()
                .map(|&(ts, _)| ts);
            state.last_click[i] = last;
        }
        if world.exposure(&state, acc.t) != acc.omega {
            bad.push(k);
        }
    }
    bad
}
