use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use deps::interactions::{load_log, write_split, IdMap, InteractionLog, SequenceIndex, Split, SplitMetadata};
use deps::pipeline::{self, ClipSweepRow, RunConfig};
use deps::recommender::{DepsModel, MANIFEST_FILE};
use deps::training::TrainingRun;
use deps::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_ECHO: &str = "config.json";
pub const LOG_FILE: &str = "log.tsv";
pub const HIDDEN_FILE: &str = "hidden.tsv";
pub const DATASET_FILE: &str = "dataset.json";
pub const RUN_FILE: &str = "training_run.json";
pub const TRACE_FILE: &str = "training_trace.jsonl";
pub const VERIFY_FILE: &str = "verify.json";

/// Shape of the prepared log in an output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub user_count: usize,
    pub item_count: usize,
    pub records: usize,
    pub source: String,
    pub ids: IdMap,
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Ctx {
    pub fn new(cfg: RunConfig, out: PathBuf) -> Result<Self> {
        fs::create_dir_all(&out)?;
        fs::write(out.join(CONFIG_ECHO), cfg.to_json()?)?;
        Ok(Self { cfg, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, name: &str, hint: &str) -> Result<T> {
        let p = self.path(name);
        let text = fs::read_to_string(&p)
            .map_err(|e| Error::Validation(format!("cannot read {}: {e}; run `{hint}` first", p.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn dataset(&self) -> Result<Dataset> {
        self.read_json(DATASET_FILE, "simulate` or `split")
    }

    fn full_log(&self) -> Result<InteractionLog> {
        let d = self.dataset()?;
        InteractionLog::read_dense_tsv(&self.path(LOG_FILE), d.user_count, d.item_count)
    }

    fn split_files(&self) -> Result<(SplitMetadata, Split)> {
        let meta: SplitMetadata = self.read_json("split.json", "split")?;
        let read = |name: &str| InteractionLog::read_dense_tsv(&self.path(name), meta.user_count, meta.item_count);
        let split = Split {
            train: read("train.tsv")?,
            validation: read("valid.tsv")?,
            test: read("test.tsv")?,
            remainder: meta.remainder_records,
        };
        Ok((meta, split))
    }
}

fn write_dataset(ctx: &Ctx, log: &InteractionLog, source: &str, ids: IdMap) -> Result<Dataset> {
    log.write_tsv(&ctx.path(LOG_FILE))?;
    let d = Dataset {
        user_count: log.user_count(),
        item_count: log.item_count(),
        records: log.len(),
        source: source.to_string(),
        ids,
    };
    fs::write(ctx.path(DATASET_FILE), serde_json::to_string_pretty(&d)?)?;
    Ok(d)
}

#[derive(Serialize)]
struct WorldDump<'a> {
    config: &'a deps::simulator::WorldConfig,
    user_latent: &'a [Vec<f64>],
    item_latent: &'a [Vec<f64>],
    accesses: usize,
}

pub fn simulate(ctx: &Ctx) -> Result<String> {
    let (world, sim) = pipeline::simulate(&ctx.cfg)?;
    sim.write_hidden_tsv(&ctx.path(HIDDEN_FILE))?;
    let ids = IdMap::identity(world.n_users(), world.n_items());
    let d = write_dataset(ctx, &sim.log, "simulator", ids)?;
    let dump = WorldDump {
        config: &world.config,
        user_latent: &world.user_latent,
        item_latent: &world.item_latent,
        accesses: sim.accesses.len(),
    };
    fs::write(ctx.path("world.json"), serde_json::to_string_pretty(&dump)?)?;
    Ok(format!(
        "simulated {} records over {} accesses ({} users, {} items)",
        d.records,
        sim.accesses.len(),
        d.user_count,
        d.item_count
    ))
}

/// Full log for `split`: the configured external file, else the one in the output directory.
fn source_log(ctx: &Ctx) -> Result<(InteractionLog, IdMap)> {
    if let Some(path) = &ctx.cfg.data {
        let (log, ids) = load_log(path)?;
        write_dataset(ctx, &log, &path.display().to_string(), ids.clone())?;
        return Ok((log, ids));
    }
    let d = ctx.dataset()?;
    Ok((ctx.full_log()?, d.ids))
}

pub fn split(ctx: &Ctx) -> Result<String> {
    let (log, ids) = source_log(ctx)?;
    let s = pipeline::split(&ctx.cfg, &log)?;
    let meta = write_split(&ctx.out, &s, &ctx.cfg.split, &ids)?;
    Ok(format!(
        "train {} / validation {} / test {} (remainder {})",
        meta.train_records, meta.validation_records, meta.test_records, meta.remainder_records
    ))
}

pub fn train(ctx: &Ctx) -> Result<String> {
    let (_, split) = ctx.split_files()?;
    let full = SequenceIndex::build(&ctx.full_log()?);
    let (model, mut run) = pipeline::fit(&ctx.cfg, &split, &full)?;
    model.save(&ctx.out)?;
    run.checkpoint = Some(deps::recommender::CHECKPOINT_FILE.to_string());
    write_run(ctx, &run)?;
    let last = run.records.last();
    Ok(format!(
        "trained {} epochs; final weighted loss {}",
        run.records.len(),
        last.and_then(|r| r.unbiased)
            .map_or("n/a".into(), |v| format!("{v:.6}"))
    ))
}

fn write_run(ctx: &Ctx, run: &TrainingRun) -> Result<()> {
    fs::write(ctx.path(RUN_FILE), serde_json::to_string_pretty(run)?)?;
    run.write_jsonl(&ctx.path(TRACE_FILE))
}

pub fn eval(ctx: &Ctx) -> Result<String> {
    let model = DepsModel::load(&ctx.out).map_err(|e| {
        Error::Validation(format!(
            "cannot load model from {}: {e}; run `train` first",
            ctx.out.display()
        ))
    })?;
    let (_, split) = ctx.split_files()?;
    let full = SequenceIndex::build(&ctx.full_log()?);
    let table = pipeline::test_metrics(&ctx.cfg, &model, &split.test, &full)?;
    table.write(&ctx.out, "metrics")?;
    Ok(table.to_tsv())
}

pub fn verify(ctx: &Ctx) -> Result<String> {
    if ctx.cfg.data.is_some() {
        return Err(Error::Config {
            key: "data".into(),
            msg: "verify needs the simulator's ground truth; remove `data`".into(),
        });
    }
    let (world, sim) = pipeline::simulate(&ctx.cfg)?;
    let model = if ctx.path(MANIFEST_FILE).exists() {
        DepsModel::load(&ctx.out)?
    } else {
        DepsModel::new(
            ctx.cfg.model,
            world.n_users(),
            world.n_items(),
            ctx.cfg.training.clip,
            ctx.cfg.seed,
        )?
    };
    let reports = pipeline::verify(&ctx.cfg, &world, &sim, &model)?;
    fs::write(ctx.path(VERIFY_FILE), serde_json::to_string_pretty(&reports)?)?;
    let mut s = String::from("clip\talpha\trelative_bias\tci_half_width\tbound_violations\tview_violations\n");
    for r in &reports {
        let _ = writeln!(
            s,
            "{}\t{}\t{:.6}\t{:.6}\t{}\t{}",
            r.clip, r.alpha, r.relative_bias, r.ci_half_width, r.variance.bound_violations, r.variance.view_violations
        );
    }
    pipeline::check_reports(&reports, 0.02)?;
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKey {
    Clip,
    Alpha,
}

#[derive(Serialize)]
struct AlphaRow {
    alpha: f64,
    ndcg10: f64,
}

fn run_any(cfg: &RunConfig, ctx: &Ctx) -> Result<pipeline::Outcome> {
    match &cfg.data {
        Some(_) => pipeline::run_on_log(cfg, &source_log(ctx)?.0),
        None => pipeline::run_simulated(cfg),
    }
}

pub fn sweep(ctx: &Ctx, key: SweepKey, values: Option<Vec<f64>>) -> Result<String> {
    match key {
        SweepKey::Clip => {
            let clips = values.unwrap_or_else(|| ctx.cfg.sweep_clips.clone());
            if ctx.cfg.data.is_some() {
                return Err(Error::Config {
                    key: "data".into(),
                    msg: "the clip sweep measures bias against the simulator; remove `data`".into(),
                });
            }
            let rows: Vec<ClipSweepRow> = pipeline::clip_sweep(&ctx.cfg, &clips)?;
            let mut tsv = String::from("clip\tbias\tvariance\tndcg@10\n");
            for r in &rows {
                let _ = writeln!(tsv, "{}\t{:.6}\t{:.6}\t{:.6}", r.clip, r.bias, r.variance, r.ndcg10);
            }
            fs::write(ctx.path("sweep_clip.tsv"), &tsv)?;
            fs::write(ctx.path("sweep_clip.json"), serde_json::to_string_pretty(&rows)?)?;
            Ok(tsv)
        }
        SweepKey::Alpha => {
            let alphas = values.unwrap_or_else(|| ctx.cfg.sweep_alphas.clone());
            let mut rows = Vec::new();
            for &a in &alphas {
                if !(0.0..=1.0).contains(&a) {
                    return Err(Error::Config {
                        key: "alpha".into(),
                        msg: format!("must lie in [0, 1], got {a}"),
                    });
                }
                let mut c = ctx.cfg.clone();
                c.training.alpha = a;
                let o = run_any(&c, ctx)?;
                rows.push(AlphaRow {
                    alpha: a,
                    ndcg10: o.metrics.ndcg_at(10).unwrap_or(f64::NAN),
                });
            }
            let mut tsv = String::from("alpha\tndcg@10\n");
            for r in &rows {
                let _ = writeln!(tsv, "{}\t{:.6}", r.alpha, r.ndcg10);
            }
            fs::write(ctx.path("sweep_alpha.tsv"), &tsv)?;
            fs::write(ctx.path("sweep_alpha.json"), serde_json::to_string_pretty(&rows)?)?;
            Ok(tsv)
        }
    }
}

pub fn ablate(ctx: &Ctx) -> Result<String> {
    let mut summary = String::from("variant\tips_mode\tstage1\tndcg@10\thr@10\n");
    for (name, c) in pipeline::ablation_configs(&ctx.cfg) {
        let o = run_any(&c, ctx)?;
        let dir = ctx.out.join("ablate").join(&name);
        o.metrics.write(&dir, "metrics")?;
        let _ = writeln!(
            summary,
            "{name}\t{}\t{}\t{:.6}\t{:.6}",
            c.training.ips_mode.name(),
            c.training.stage1,
            o.metrics.ndcg_at(10).unwrap_or(f64::NAN),
            o.metrics.hr_at(10).unwrap_or(f64::NAN)
        );
    }
    fs::write(ctx.path("ablate.tsv"), &summary)?;
    Ok(summary)
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg.resolved(),
    };
    cfg.validate()?;
    Ok(cfg)
}
