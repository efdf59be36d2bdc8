use super::log::InteractionLog;

/// Clicked records of a log sliced two ways: items per user and users per item.
///
/// Entries are `(timestamp, id)` in canonical time order. Non-clicked
/// records appear in neither view.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceIndex {
    by_user: Vec<Vec<(i64, usize)>>,
    by_item: Vec<Vec<(i64, usize)>>,
}

fn window(seq: &[(i64, usize)], t: i64, max_len: usize) -> Vec<usize> {
    let end = seq.partition_point(|&(ts, _)| ts < t);
    let start = end.saturating_sub(max_len);
    seq[start..end].iter().map(|&(_, id)| id).collect()
}

impl SequenceIndex {
    pub fn build(log: &InteractionLog) -> Self {
        let mut by_user = vec![Vec::new(); log.user_count()];
        let mut by_item = vec![Vec::new(); log.item_count()];
        // the log is already in canonical order
        for r in log.clicks() {
            by_user[r.user].push((r.timestamp, r.item));
            by_item[r.item].push((r.timestamp, r.user));
        }
        Self { by_user, by_item }
    }

    pub fn user_count(&self) -> usize {
        self.by_user.len()
    }

    pub fn item_count(&self) -> usize {
        self.by_item.len()
    }

    /// `h_u^{<t}`: items clicked by `user` strictly before `t`, most recent `max_len`.
    pub fn item_view_sequence(&self, user: usize, t: i64, max_len: usize) -> Vec<usize> {
        window(&self.by_user[user], t, max_len)
    }

    /// `h_i^{<t}`: users who clicked `item` strictly before `t`, most recent `max_len`.
    pub fn user_view_sequence(&self, item: usize, t: i64, max_len: usize) -> Vec<usize> {
        window(&self.by_item[item], t, max_len)
    }

    /// `l(u, t)`, untruncated.
    pub fn user_history_len(&self, user: usize, t: i64) -> usize {
        self.by_user[user].partition_point(|&(ts, _)| ts < t)
    }

    pub fn item_history_len(&self, item: usize, t: i64) -> usize {
        self.by_item[item].partition_point(|&(ts, _)| ts < t)
    }

    /// Full time-ordered click list of a user.
    pub fn user_timeline(&self, user: usize) -> &[(i64, usize)] {
        &self.by_user[user]
    }

    pub fn item_timeline(&self, item: usize) -> &[(i64, usize)] {
        &self.by_item[item]
    }

    /// `m_u`
    pub fn user_click_count(&self, user: usize) -> usize {
        self.by_user[user].len()
    }

    /// `m_i`
    pub fn item_click_count(&self, item: usize) -> usize {
        self.by_item[item].len()
    }

    /// Whether `user` clicked `item` strictly before `t`.
    pub fn clicked_before(&self, user: usize, item: usize, t: i64) -> bool {
        let seq = &self.by_user[user];
        seq[..seq.partition_point(|&(ts, _)| ts < t)]
            .iter()
            .any(|&(_, i)| i == item)
    }

    /// Every user's clicked items split into consecutive windows of at most `max_len`.
    pub fn item_view_windows(&self, max_len: usize) -> Vec<Vec<usize>> {
        chunked(&self.by_user, max_len)
    }

    pub fn user_view_windows(&self, max_len: usize) -> Vec<Vec<usize>> {
        chunked(&self.by_item, max_len)
    }

    /// `(user, item, timestamp)` triples of the item view, flattened.
    pub fn triples_from_user_view(&self) -> Vec<(usize, usize, i64)> {
        let mut out: Vec<_> = self
            .by_user
            .iter()
            .enumerate()
            .flat_map(|(u, seq)| seq.iter().map(move |&(t, i)| (u, i, t)))
            .collect();
        out.sort_unstable();
        out
    }

    pub fn triples_from_item_view(&self) -> Vec<(usize, usize, i64)> {
        let mut out: Vec<_> = self
            .by_item
            .iter()
            .enumerate()
            .flat_map(|(i, seq)| seq.iter().map(move |&(t, u)| (u, i, t)))
            .collect();
        out.sort_unstable();
        out
    }
}

fn chunked(seqs: &[Vec<(i64, usize)>], max_len: usize) -> Vec<Vec<usize>> {
    seqs.iter()
        .flat_map(|s| {
            s.chunks(max_len.max(1))
                .map(|c| c.iter().map(|&(_, id)| id).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        })
        .collect()
}
