use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One logged `(user, item, timestamp, click)` record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
    pub click: bool,
}

impl Interaction {
    pub fn new(user: usize, item: usize, timestamp: i64, click: bool) -> Self {
        Self {
            user,
            item,
            timestamp,
            click,
        }
    }

    /// Canonical order: timestamp, then user, then item.
    pub fn sort_key(&self) -> (i64, usize, usize) {
        (self.timestamp, self.user, self.item)
    }
}

/// Interaction records over dense user and item ids.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InteractionLog {
    records: Vec<Interaction>,
    user_count: usize,
    item_count: usize,
}

impl InteractionLog {
    /// Builds a log, validating ids and sorting into canonical order.
    pub fn new(mut records: Vec<Interaction>, user_count: usize, item_count: usize) -> Result<Self> {
        for r in &records {
            if r.user >= user_count {
                return Err(Error::Validation(format!(
                    "user id {} outside [0, {user_count})",
                    r.user
                )));
            }
            if r.item >= item_count {
                return Err(Error::Validation(format!(
                    "item id {} outside [0, {item_count})",
                    r.item
                )));
            }
        }
        records.sort_by_key(Interaction::sort_key);
        Ok(Self {
            records,
            user_count,
            item_count,
        })
    }

    pub fn empty(user_count: usize, item_count: usize) -> Self {
        Self {
            records: Vec::new(),
            user_count,
            item_count,
        }
    }

    pub fn records(&self) -> &[Interaction] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn user_count(&self) -> usize {
        self.user_count
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    pub fn clicks(&self) -> impl Iterator<Item = &Interaction> {
        self.records.iter().filter(|r| r.click)
    }

    /// Click counts per item over the whole log.
    pub fn item_click_counts(&self) -> Vec<usize> {
        let mut m = vec![0; self.item_count];
        for r in self.clicks() {
            m[r.item] += 1;
        }
        m
    }

    pub fn user_click_counts(&self) -> Vec<usize> {
        let mut m = vec![0; self.user_count];
        for r in self.clicks() {
            m[r.user] += 1;
        }
        m
    }

    /// Same id space, subset of records.
    pub fn with_records(&self, records: Vec<Interaction>) -> Self {
        let mut records = records;
        records.sort_by_key(Interaction::sort_key);
        Self {
            records,
            user_count: self.user_count,
            item_count: self.item_count,
        }
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        for r in &self.records {
            writeln!(out, "{}\t{}\t{}\t{}", r.user, r.item, r.timestamp, r.click as u8)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a TSV whose ids are already dense in `[0, count)`.
    pub fn read_dense_tsv(path: &Path, user_count: usize, item_count: usize) -> Result<Self> {
        let rows = parse_tsv(path)?;
        let mut records = Vec::with_capacity(rows.len());
        for (line, (u, i, t, c)) in rows {
            let check = |id: i64, count: usize, what: &str| -> Result<usize> {
                usize::try_from(id)
                    .ok()
                    .filter(|&v| v < count)
                    .ok_or_else(|| Error::Parse {
                        path: path.to_path_buf(),
                        line,
                        msg: format!("{what} id {id} outside [0, {count})"),
                    })
            };
            records.push(Interaction::new(
                check(u, user_count, "user")?,
                check(i, item_count, "item")?,
                t,
                c,
            ));
        }
        Self::new(records, user_count, item_count)
    }
}

/// Dense id -> original id, for both entity kinds.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IdMap {
    pub users: Vec<i64>,
    pub items: Vec<i64>,
}

impl IdMap {
    pub fn identity(user_count: usize, item_count: usize) -> Self {
        Self {
            users: (0..user_count as i64).collect(),
            items: (0..item_count as i64).collect(),
        }
    }
}

type Row = (usize, (i64, i64, i64, bool));

fn parse_tsv(path: &Path) -> Result<Vec<Row>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(parse_err(format!(
                "expected 4 tab-separated columns, found {}",
                cols.len()
            )));
        }
        let num = |s: &str, what: &str| -> Result<i64> {
            s.trim()
                .parse::<i64>()
                .map_err(|e| parse_err(format!("bad {what} `{s}`: {e}")))
        };
        let user = num(cols[0], "user_id")?;
        let item = num(cols[1], "item_id")?;
        let ts = num(cols[2], "timestamp")?;
        let click = match num(cols[3], "click")? {
            0 => false,
            1 => true,
            other => {
                return Err(Error::Validation(format!(
                    "{}:{line_no}: click must be 0 or 1, got {other}",
                    path.display()
                )))
            }
        };
        rows.push((line_no, (user, item, ts, click)));
    }
    Ok(rows)
}

/// Loads a `user<TAB>item<TAB>timestamp<TAB>click` file and remaps ids to
/// dense integers in ascending order of the original ids.
pub fn load_log(path: &Path) -> Result<(InteractionLog, IdMap)> {
    let rows = parse_tsv(path)?;
    let users: BTreeSet<i64> = rows.iter().map(|(_, r)| r.0).collect();
    let items: BTreeSet<i64> = rows.iter().map(|(_, r)| r.1).collect();
    let map = IdMap {
        users: users.into_iter().collect(),
        items: items.into_iter().collect(),
    };
    let records = rows
        .iter()
        .map(|(_, (u, i, t, c))| {
            Interaction::new(
                map.users.binary_search(u).unwrap(),
                map.items.binary_search(i).unwrap(),
                *t,
                *c,
            )
        })
        .collect();
    let log = InteractionLog::new(records, map.users.len(), map.items.len())?;
    Ok((log, map))
}
