//! Full-ranking metrics against a frozen scorer.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interactions::{InteractionLog, SequenceIndex};
use crate::parallel::map_indices;
use crate::recommender::Scorer;

pub const DEFAULT_KS: [usize; 3] = [5, 10, 20];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CandidatePolicy {
    AllItems,
    /// Items the user has not clicked before `t`, plus the target.
    #[default]
    AllUnseenItems,
}

impl CandidatePolicy {
    pub fn name(self) -> &'static str {
        match self {
            Self::AllItems => "all_items",
            Self::AllUnseenItems => "all_unseen_items",
        }
    }

    /// Candidate items for `user` at `t`, ascending by id.
    pub fn candidates(self, index: &SequenceIndex, user: usize, t: i64) -> Vec<usize> {
        let all = 0..index.item_count();
        match self {
            Self::AllItems => all.collect(),
            Self::AllUnseenItems => {
                let mut seen = vec![false; index.item_count()];
                let tl = index.user_timeline(user);
                for &(_, i) in &tl[..tl.partition_point(|&(ts, _)| ts < t)] {
                    seen[i] = true;
                }
                all.filter(|&i| !seen[i]).collect()
            }
        }
    }

    pub fn admits(self, index: &SequenceIndex, user: usize, item: usize, t: i64) -> bool {
        match self {
            Self::AllItems => item < index.item_count(),
            Self::AllUnseenItems => item < index.item_count() && !index.clicked_before(user, item, t),
        }
    }
}

/// Rank of one held-out target among its candidates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
    pub rank: usize,
    pub candidates: usize,
    pub policy: CandidatePolicy,
}

/// 1-based rank of `target`; ties go to the smaller item id.
pub fn rank_in(scores: &[f64], items: &[usize], target: usize) -> Result<usize> {
    let pos = items
        .iter()
        .position(|&i| i == target)
        .ok_or_else(|| Error::Contract(format!("item {target} is not among the candidates")))?;
    let s = scores[pos];
    let ahead = items
        .iter()
        .zip(scores)
        .filter(|&(&i, &v)| v > s || (v == s && i < target))
        .count();
    Ok(ahead + 1)
}

/// Scores every candidate at time `t` with histories strictly before `t`.
pub fn candidate_scores<S: Scorer + ?Sized>(
    scorer: &S,
    user: usize,
    t: i64,
    index: &SequenceIndex,
    items: &[usize],
    max_len: usize,
) -> Result<Vec<f64>> {
    let h_u = index.item_view_sequence(user, t, max_len);
    let h_is: Vec<Vec<usize>> = items.iter().map(|&i| index.user_view_sequence(i, t, max_len)).collect();
    scorer.score_items(user, &h_u, items, &h_is)
}

pub fn rank_target<S: Scorer + ?Sized>(
    scorer: &S,
    user: usize,
    target: usize,
    t: i64,
    index: &SequenceIndex,
    policy: CandidatePolicy,
    max_len: usize,
) -> Result<RankingResult> {
    if user >= index.user_count() {
        return Err(Error::Index {
            what: "user id",
            index: user,
            size: index.user_count(),
        });
    }
    if !policy.admits(index, user, target, t) {
        return Err(Error::Contract(format!(
            "target item {target} is excluded by policy {} for user {user} at {t}",
            policy.name()
        )));
    }
    let items = policy.candidates(index, user, t);
    let scores = candidate_scores(scorer, user, t, index, &items, max_len)?;
    Ok(RankingResult {
        user,
        item: target,
        timestamp: t,
        rank: rank_in(&scores, &items, target)?,
        candidates: items.len(),
        policy,
    })
}

/// `1 / log2(rank + 1)` inside the cutoff, else 0.
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0
    } else {
        0.0
    }
}

/// Macro-averaged metrics per cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub ks: Vec<usize>,
    pub ndcg: Vec<f64>,
    pub hr: Vec<f64>,
    pub count: usize,
    pub policy: CandidatePolicy,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl MetricTable {
    pub fn from_ranks(ranks: &[usize], ks: &[usize], policy: CandidatePolicy) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Validation("no test interactions to evaluate".into()));
        }
        let n = ranks.len() as f64;
        let mean = |f: fn(usize, usize) -> f64, k: usize| ranks.iter().map(|&r| f(r, k)).sum::<f64>() / n;
        Ok(Self {
            ks: ks.to_vec(),
            ndcg: ks.iter().map(|&k| mean(ndcg_at_k, k)).collect(),
            hr: ks.iter().map(|&k| mean(hr_at_k, k)).collect(),
            count: ranks.len(),
            policy,
            metadata: BTreeMap::new(),
        })
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|p| self.ndcg[p])
    }

    pub fn hr_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|p| self.hr[p])
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.into(), value.to_string());
        self
    }

    /// Rows are metrics, columns are cutoffs, followed by metadata rows.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric");
        for k in &self.ks {
            let _ = write!(s, "\t@{k}");
        }
        s.push('\n');
        for (name, vals) in [("ndcg", &self.ndcg), ("hr", &self.hr)] {
            s.push_str(name);
            for v in vals {
                let _ = write!(s, "\t{v:.6}");
            }
            s.push('\n');
        }
        let _ = writeln!(s, "# count\t{}", self.count);
        let _ = writeln!(s, "# policy\t{}", self.policy.name());
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "# {k}\t{v}");
        }
        s
    }

    /// Writes `<stem>.tsv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.tsv")), self.to_tsv())?;
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Ranks every clicked test record admitted by `policy`. Records sharing a
/// `(user, timestamp)` share one candidate scoring pass.
pub fn rank_all<S: Scorer + ?Sized>(
    scorer: &S,
    test: &InteractionLog,
    index: &SequenceIndex,
    policy: CandidatePolicy,
    max_len: usize,
) -> Result<Vec<RankingResult>> {
    let mut groups: BTreeMap<(usize, i64), Vec<usize>> = BTreeMap::new();
    for r in test.clicks() {
        if policy.admits(index, r.user, r.item, r.timestamp) {
            groups.entry((r.user, r.timestamp)).or_default().push(r.item);
        }
    }
    let groups: Vec<((usize, i64), Vec<usize>)> = groups.into_iter().collect();
    let per_group = map_indices(groups.len(), |g| -> Result<Vec<RankingResult>> {
        let ((user, t), targets) = &groups[g];
        let items = policy.candidates(index, *user, *t);
        let scores = candidate_scores(scorer, *user, *t, index, &items, max_len)?;
        targets
            .iter()
            .map(|&item| {
                Ok(RankingResult {
                    user: *user,
                    item,
                    timestamp: *t,
                    rank: rank_in(&scores, &items, item)?,
                    candidates: items.len(),
                    policy,
                })
            })
            .collect()
    });
    let mut out = Vec::new();
    for g in per_group {
        out.extend(g?);
    }
    Ok(out)
}

pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    test: &InteractionLog,
    index: &SequenceIndex,
    policy: CandidatePolicy,
    ks: &[usize],
    max_len: usize,
) -> Result<MetricTable> {
    let ranks: Vec<usize> = rank_all(scorer, test, index, policy, max_len)?
        .iter()
        .map(|r| r.rank)
        .collect();
    MetricTable::from_ranks(&ranks, ks, policy)
}
