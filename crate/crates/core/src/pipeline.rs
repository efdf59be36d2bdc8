//! End-to-end experiment configuration and orchestration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate, CandidatePolicy, MetricTable, DEFAULT_KS};
use crate::interactions::{temporal_debiased_split, InteractionLog, SequenceIndex, Split, SplitSpec};
use crate::recommender::{DepsModel, ModelConfig};
use crate::simulator::{
    clip_bias_variance, collect_samples, evenly_spaced, generate_world, simulate_log, unbiasedness_check, ClipPoint,
    OracleReport, SimulatedLog, SyntheticWorld, WorldConfig,
};
use crate::training::{train, IpsMode, LossConfig, TrainingData, TrainingRun, Validation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub replications: usize,
    /// Accesses sampled evenly from the simulated log; every item is scored at each.
    pub accesses: usize,
    pub alphas: Vec<f64>,
    /// Clip values for the variance bound check.
    pub clips: Vec<f64>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            replications: 10_000,
            accesses: 100,
            alphas: vec![0.0, 0.5, 1.0],
            clips: vec![0.05, 0.1, 0.2],
        }
    }
}

/// Every knob of one experiment. `seed` is the master seed and is copied
/// into the world, split and training sections by [`RunConfig::resolved`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// External `user, item, timestamp, click` TSV; the simulator is used when absent.
    pub data: Option<PathBuf>,
    pub world: WorldConfig,
    pub split: SplitSpec,
    pub model: ModelConfig,
    pub training: LossConfig,
    pub policy: CandidatePolicy,
    pub ks: Vec<usize>,
    pub oracle: OracleConfig,
    pub sweep_clips: Vec<f64>,
    pub sweep_alphas: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: None,
            world: WorldConfig::default(),
            split: SplitSpec::default(),
            model: ModelConfig::default(),
            training: LossConfig::default(),
            policy: CandidatePolicy::default(),
            ks: DEFAULT_KS.to_vec(),
            oracle: OracleConfig::default(),
            sweep_clips: vec![0.01, 0.02, 0.05, 0.1, 0.2],
            sweep_alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let key = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.starts_with("unknown field"))
                .unwrap_or("<document>")
                .to_string();
            Error::Config { key, msg }
        })?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolved()
    }

    pub fn resolved(mut self) -> Self {
        self.world.seed = self.seed;
        self.split.seed = self.seed;
        self.training.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.split.validate()?;
        self.model.validate()?;
        self.training.validate()?;
        let bad = |key: &str, msg: String| Err(Error::Config { key: key.into(), msg });
        if self.ks.is_empty() || self.ks.contains(&0) {
            return bad("ks", "cutoffs must be non-empty and positive".into());
        }
        if self.oracle.replications < crate::simulator::MIN_REPLICATIONS {
            return bad(
                "oracle.replications",
                format!("need at least {}", crate::simulator::MIN_REPLICATIONS),
            );
        }
        if self.oracle.accesses == 0 {
            return bad("oracle.accesses", "must be at least 1".into());
        }
        for (key, vals, hi) in [
            ("oracle.alphas", &self.oracle.alphas, 1.0),
            ("oracle.clips", &self.oracle.clips, 1.0),
            ("sweep_alphas", &self.sweep_alphas, 1.0),
        ] {
            if vals.iter().any(|v| !(0.0..=hi).contains(v)) {
                return bad(key, "values must lie in [0, 1]".into());
            }
        }
        if self.sweep_clips.iter().any(|v| !(0.0..1.0).contains(v)) {
            return bad("sweep_clips", "values must lie in [0, 1)".into());
        }
        if self.sweep_clips.windows(2).any(|w| w[0] >= w[1]) {
            return bad("sweep_clips", "values must be sorted ascending".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn simulate(cfg: &RunConfig) -> Result<(SyntheticWorld, SimulatedLog)> {
    let world = generate_world(&cfg.world)?;
    let sim = simulate_log(&world, cfg.world.horizon)?;
    Ok((world, sim))
}

pub fn split(cfg: &RunConfig, log: &InteractionLog) -> Result<Split> {
    temporal_debiased_split(log, &cfg.split)
}

/// Trains a fresh model on `split.train`. Histories for validation come from
/// `full`, which must contain every record (train or not) before each time.
pub fn fit(cfg: &RunConfig, split: &Split, full: &SequenceIndex) -> Result<(DepsModel, TrainingRun)> {
    let mut model = DepsModel::new(
        cfg.model,
        split.train.user_count(),
        split.train.item_count(),
        cfg.training.clip,
        cfg.seed,
    )?;
    let data = TrainingData::from_log(&split.train, cfg.model.max_len);
    let validation = (!split.validation.is_empty()).then_some(Validation {
        log: &split.validation,
        index: full,
        policy: cfg.policy,
    });
    let run = train(&mut model, &data, &cfg.training, validation)?;
    Ok((model, run))
}

pub fn test_metrics(
    cfg: &RunConfig,
    model: &DepsModel,
    test: &InteractionLog,
    full: &SequenceIndex,
) -> Result<MetricTable> {
    Ok(evaluate(model, test, full, cfg.policy, &cfg.ks, cfg.model.max_len)?
        .with_meta("seed", cfg.seed)
        .with_meta("ips_mode", cfg.training.ips_mode.name())
        .with_meta("clip", cfg.training.clip)
        .with_meta("alpha", cfg.training.alpha)
        .with_meta("stage1", cfg.training.stage1))
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub metrics: MetricTable,
    pub run: TrainingRun,
    pub model: DepsModel,
}

/// Train and test on a prepared log.
pub fn run_on_log(cfg: &RunConfig, log: &InteractionLog) -> Result<Outcome> {
    let split = split(cfg, log)?;
    let full = SequenceIndex::build(log);
    let (model, run) = fit(cfg, &split, &full)?;
    let metrics = test_metrics(cfg, &model, &split.test, &full)?;
    Ok(Outcome { metrics, run, model })
}

/// Simulate, split, train and test in memory.
pub fn run_simulated(cfg: &RunConfig) -> Result<Outcome> {
    let (_, sim) = simulate(cfg)?;
    run_on_log(cfg, &sim.log)
}

/// Unbiasedness reports, one per configured `α` with `M = 0`, followed by
/// variance-bound reports for every configured `(M, α)`.
pub fn verify(
    cfg: &RunConfig,
    world: &SyntheticWorld,
    sim: &SimulatedLog,
    model: &DepsModel,
) -> Result<Vec<OracleReport>> {
    let accesses = evenly_spaced(sim.accesses.len(), cfg.oracle.accesses);
    let samples = collect_samples(world, sim, model, &accesses, cfg.model.max_len)?;
    let mut out = Vec::new();
    for &alpha in &cfg.oracle.alphas {
        out.push(unbiasedness_check(
            &samples,
            0.0,
            alpha,
            cfg.oracle.replications,
            cfg.seed,
        )?);
    }
    for &m in &cfg.oracle.clips {
        for &alpha in &cfg.oracle.alphas {
            out.push(unbiasedness_check(
                &samples,
                m,
                alpha,
                cfg.oracle.replications,
                cfg.seed,
            )?);
        }
    }
    Ok(out)
}

/// Fails with an invariant error if an unclipped report is biased or any
/// report violates the variance bound.
pub fn check_reports(reports: &[OracleReport], max_relative_bias: f64) -> Result<()> {
    for r in reports {
        if r.clip == 0.0 && (r.relative_bias.abs() >= max_relative_bias || !r.ci_contains_zero) {
            return Err(Error::Invariant(format!(
                "unclipped estimator biased at alpha {}: relative bias {:.4} ± {:.4}",
                r.alpha, r.relative_bias, r.ci_half_width
            )));
        }
        if r.variance.bound_violations > 0 || r.variance.view_violations > 0 {
            return Err(Error::Invariant(format!(
                "variance bound violated at M {} alpha {}: {} bound, {} view violations",
                r.clip, r.alpha, r.variance.bound_violations, r.variance.view_violations
            )));
        }
    }
    Ok(())
}

/// One row of a clip sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipSweepRow {
    pub clip: f64,
    pub bias: f64,
    pub variance: f64,
    pub ndcg10: f64,
}

/// Oracle bias and variance on the simulated world plus trained test NDCG@10 per clip value.
pub fn clip_sweep(cfg: &RunConfig, clips: &[f64]) -> Result<Vec<ClipSweepRow>> {
    if clips.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config {
            key: "sweep_clips".into(),
            msg: "values must be sorted ascending".into(),
        });
    }
    let (world, sim) = simulate(cfg)?;
    let log = &sim.log;
    let split = split(cfg, log)?;
    let full = SequenceIndex::build(log);
    let mut rows = Vec::new();
    let mut points: Option<Vec<ClipPoint>> = None;
    for &m in clips {
        let mut c = cfg.clone();
        c.training.clip = m;
        let (model, _) = fit(&c, &split, &full)?;
        if points.is_none() {
            let accesses = evenly_spaced(sim.accesses.len(), cfg.oracle.accesses);
            let samples = collect_samples(&world, &sim, &model, &accesses, cfg.model.max_len)?;
            points = Some(clip_bias_variance(
                &samples,
                clips,
                cfg.training.alpha,
                cfg.oracle.replications,
                cfg.seed,
            )?);
        }
        let p = points.as_ref().expect("set above")[rows.len()];
        let metrics = test_metrics(&c, &model, &split.test, &full)?;
        rows.push(ClipSweepRow {
            clip: m,
            bias: p.bias,
            variance: p.variance,
            ndcg10: metrics.ndcg_at(10).unwrap_or(f64::NAN),
        });
    }
    Ok(rows)
}

/// The ablation grid: every IPS mode with both stages, then dual without stage 1.
pub fn ablation_configs(cfg: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut out: Vec<(String, RunConfig)> = IpsMode::ALL
        .iter()
        .map(|&mode| {
            let mut c = cfg.clone();
            c.training.ips_mode = mode;
            c.training.stage1 = true;
            (mode.name().to_string(), c)
        })
        .collect();
    let mut c = cfg.clone();
    c.training.ips_mode = IpsMode::Dual;
    c.training.stage1 = false;
    out.push(("dual_no_stage1".to_string(), c));
    out
}
