use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::log::{IdMap, Interaction, InteractionLog};
use crate::error::{Error, Result};

/// Temporal split with popularity-resampled evaluation data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    /// Share of the log, by time, used for training.
    pub train_fraction: f64,
    /// Share of the accepted remainder used for validation; the rest is test.
    pub validation_fraction: f64,
    /// Exponent on the item click count in the acceptance weight. `0` disables resampling.
    pub gamma: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.5,
            validation_fraction: 0.4,
            gamma: -1.0,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn test_fraction(&self) -> f64 {
        1.0 - self.validation_fraction
    }

    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.train_fraction) {
            return Err(Error::Config {
                key: "train_fraction".into(),
                msg: format!("must lie in (0,1), got {}", self.train_fraction),
            });
        }
        if !open(self.validation_fraction) {
            return Err(Error::Config {
                key: "validation_fraction".into(),
                msg: format!("must lie in (0,1), got {}", self.validation_fraction),
            });
        }
        if !(self.gamma <= 0.0) {
            return Err(Error::Config {
                key: "gamma".into(),
                msg: format!("must be <= 0, got {}", self.gamma),
            });
        }
        Ok(())
    }

    /// Acceptance probability of each item: `max(m_i, 1)^gamma` over the maximum.
    pub fn acceptance_weights(&self, item_clicks: &[usize]) -> Result<Vec<f64>> {
        let raw: Vec<f64> = item_clicks
            .iter()
            .map(|&m| (m.max(1) as f64).powf(self.gamma))
            .collect();
        let max = raw.iter().cloned().fold(0.0, f64::max);
        if !(max > 0.0) || !max.is_finite() {
            return Err(Error::Split("degenerate acceptance weights".into()));
        }
        Ok(raw.into_iter().map(|w| w / max).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: InteractionLog,
    pub validation: InteractionLog,
    pub test: InteractionLog,
    /// Remainder records before resampling.
    pub remainder: usize,
}

/// Cut index at `frac` of `records`, moved forward past equal timestamps.
fn time_cut(records: &[Interaction], frac: f64) -> usize {
    let mut cut = ((records.len() as f64) * frac).round() as usize;
    cut = cut.clamp(0, records.len());
    if cut == 0 {
        return 0;
    }
    let boundary = records[cut - 1].timestamp;
    while cut < records.len() && records[cut].timestamp == boundary {
        cut += 1;
    }
    cut
}

/// Earliest `train_fraction` for training; the rest is resampled with
/// acceptance `(m_i)^gamma / max_j (m_j)^gamma` and split by time into
/// validation and test.
pub fn temporal_debiased_split(log: &InteractionLog, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    if log.is_empty() {
        return Err(Error::Split("cannot split an empty log".into()));
    }
    let records = log.records();
    let cut = time_cut(records, spec.train_fraction);
    let (train, rest) = records.split_at(cut);

    let weights = spec.acceptance_weights(&log.item_click_counts())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let accepted: Vec<Interaction> = if spec.gamma == 0.0 {
        rest.to_vec()
    } else {
        rest.iter()
            .copied()
            .filter(|r| rng.random::<f64>() < weights[r.item])
            .collect()
    };
    let vcut = time_cut(&accepted, spec.validation_fraction);
    let (validation, test) = accepted.split_at(vcut);
    Ok(Split {
        train: log.with_records(train.to_vec()),
        validation: log.with_records(validation.to_vec()),
        test: log.with_records(test.to_vec()),
        remainder: rest.len(),
    })
}

/// JSON sidecar describing a written split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetadata {
    pub spec: SplitSpec,
    pub user_count: usize,
    pub item_count: usize,
    pub train_records: usize,
    pub validation_records: usize,
    pub test_records: usize,
    pub remainder_records: usize,
    pub ids: IdMap,
}

/// Writes `train.tsv`, `valid.tsv`, `test.tsv` and `split.json` into `dir`.
pub fn write_split(dir: &Path, split: &Split, spec: &SplitSpec, ids: &IdMap) -> Result<SplitMetadata> {
    fs::create_dir_all(dir)?;
    split.train.write_tsv(&dir.join("train.tsv"))?;
    split.validation.write_tsv(&dir.join("valid.tsv"))?;
    split.test.write_tsv(&dir.join("test.tsv"))?;
    let meta = SplitMetadata {
        spec: *spec,
        user_count: split.train.user_count(),
        item_count: split.train.item_count(),
        train_records: split.train.len(),
        validation_records: split.validation.len(),
        test_records: split.test.len(),
        remainder_records: split.remainder,
        ids: ids.clone(),
    };
    fs::write(dir.join("split.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Zipf};

    fn zipf_log(seed: u64, n: usize, items: usize) -> InteractionLog {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Zipf::new(items as f64, 1.1).unwrap();
        let recs = (0..n)
            .map(|t| {
                let item = z.sample(&mut rng) as usize - 1;
                Interaction::new(rng.random_range(0..20), item, t as i64, true)
            })
            .collect();
        InteractionLog::new(recs, 20, items).unwrap()
    }

    #[test]
    fn gamma_zero_is_pure_time_split() {
        let log = zipf_log(1, 100, 10);
        let spec = SplitSpec {
            gamma: 0.0,
            ..Default::default()
        };
        let s = temporal_debiased_split(&log, &spec).unwrap();
        assert_eq!(s.train.len(), 50);
        assert_eq!(s.validation.len(), 20);
        assert_eq!(s.test.len(), 30);
    }

    #[test]
    fn acceptance_weight_definition() {
        let spec = SplitSpec::default();
        assert_eq!(spec.acceptance_weights(&[1, 4]).unwrap(), vec![1.0, 0.25]);
    }

    #[test]
    fn no_leakage_and_disjoint() {
        let log = zipf_log(2, 400, 15);
        let s = temporal_debiased_split(&log, &SplitSpec::default()).unwrap();
        let max_train = s.train.records().iter().map(|r| r.timestamp).max().unwrap();
        for r in s.validation.records().iter().chain(s.test.records()) {
            assert!(r.timestamp > max_train);
        }
        let max_val = s.validation.records().iter().map(|r| r.timestamp).max().unwrap();
        assert!(s.test.records().iter().all(|r| r.timestamp > max_val));
        assert!(s.validation.len() + s.test.len() <= s.remainder);
    }

    #[test]
    fn ties_do_not_straddle_the_cut() {
        let recs = (0..10)
            .map(|k| Interaction::new(k % 3, k % 4, (k / 4) as i64, true))
            .collect();
        let log = InteractionLog::new(recs, 3, 4).unwrap();
        let spec = SplitSpec {
            gamma: 0.0,
            ..Default::default()
        };
        let s = temporal_debiased_split(&log, &spec).unwrap();
        let max_train = s.train.records().iter().map(|r| r.timestamp).max().unwrap();
        assert!(s
            .validation
            .records()
            .iter()
            .chain(s.test.records())
            .all(|r| r.timestamp > max_train));
    }

    #[test]
    fn deterministic_under_seed() {
        let log = zipf_log(5, 500, 20);
        let a = temporal_debiased_split(&log, &SplitSpec::default()).unwrap();
        let b = temporal_debiased_split(&log, &SplitSpec::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_log_and_bad_spec() {
        assert!(temporal_debiased_split(&InteractionLog::empty(1, 1), &SplitSpec::default()).is_err());
        let log = zipf_log(1, 10, 3);
        let bad = SplitSpec {
            gamma: 0.5,
            ..Default::default()
        };
        assert!(matches!(temporal_debiased_split(&log, &bad), Err(Error::Config { .. })));
    }

    fn kl_to_uniform(counts: &[usize]) -> f64 {
        let n: usize = counts.iter().sum();
        let k = counts.len() as f64;
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n as f64;
                p * (p * k).ln()
            })
            .sum()
    }

    #[test]
    fn resampling_flattens_item_frequencies() {
        // Monte Carlo over seeds: the accepted remainder is closer to uniform
        // than the remainder it was drawn from.
        let log = zipf_log(9, 1000, 25);
        let mut before_sum = 0.0;
        let mut after_sum = 0.0;
        for seed in 0..20 {
            let spec = SplitSpec {
                seed,
                ..Default::default()
            };
            let s = temporal_debiased_split(&log, &spec).unwrap();
            let cut = log.len() - s.remainder;
            let mut before = vec![0; 25];
            for r in &log.records()[cut..] {
                before[r.item] += 1;
            }
            let mut after = vec![0; 25];
            for r in s.validation.records().iter().chain(s.test.records()) {
                after[r.item] += 1;
            }
            let (b, a) = (kl_to_uniform(&before), kl_to_uniform(&after));
            assert!(a < b, "seed {seed}: {a} !< {b}");
            before_sum += b;
            after_sum += a;
        }
        assert!(after_sum < 0.5 * before_sum);
    }
}
