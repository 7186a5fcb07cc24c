//! Frequency caps: bid partitions and their cap bounds for the sample LP,
//! and exact per-user counting at serve time.

use std::collections::HashMap;
use std::io::{self, Write};

use thiserror::Error;

use crate::lp::{sample_instance, CapRow, LpError, LpInstance, ScaleMode};
use crate::model::{CampaignBook, Impression, Micros};

#[derive(Debug, Error)]
pub enum FcapError {
    #[error("campaign {campaign} has no non-zero bids in the sample")]
    NoBids { campaign: usize },
    #[error("number of bins must be positive")]
    NoBins,
    #[error("partitions do not match the sample: {0}")]
    PartitionMismatch(String),
    #[error(transparent)]
    Lp(#[from] LpError),
}

/// Quantile partition of one campaign's non-zero bids.
#[derive(Clone, Debug, PartialEq)]
pub struct CampaignPartition {
    pub campaign: usize,
    /// Upper edges of all bins but the last, in revenue micros. A bid goes
    /// into the bin whose index is the number of edges strictly below it.
    pub edges: Vec<Micros>,
    /// Sample indices per nonempty bin, ascending by bid, sample order within.
    pub sets: Vec<Vec<usize>>,
}

/// Partitions for every capped campaign with bids in the sample.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PartitionSet {
    pub n_bins: usize,
    pub campaigns: Vec<CampaignPartition>,
}

impl PartitionSet {
    pub fn build(
        sample: &[Impression],
        book: &CampaignBook,
        n_bins: usize,
    ) -> Result<PartitionSet, FcapError> {
        let mut campaigns = Vec::new();
        for i in 0..book.len() {
            if book.fcap(i).is_none() {
                continue;
            }
            match partition_campaign(sample, i, n_bins) {
                Ok(p) => campaigns.push(p),
                Err(FcapError::NoBids { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(PartitionSet { n_bins, campaigns })
    }

    /// Total number of sets, i.e. cap rows added to the LP.
    pub fn n_sets(&self) -> usize {
        self.campaigns.iter().map(|c| c.sets.len()).sum()
    }
}

/// Splits the impressions where `campaign` bids a positive revenue into at
/// most `n_bins` quantile bins by that revenue. Edge `k` (1-based) is the
/// `ceil(k n / n_bins)`-th smallest bid; ties at an edge stay in the lower
/// bin and empty bins are dropped.
pub fn partition_bids(
    sample: &[Impression],
    campaign: usize,
    n_bins: usize,
) -> Result<Vec<Vec<usize>>, FcapError> {
    Ok(partition_campaign(sample, campaign, n_bins)?.sets)
}

pub fn partition_campaign(
    sample: &[Impression],
    campaign: usize,
    n_bins: usize,
) -> Result<CampaignPartition, FcapError> {
    if n_bins == 0 {
        return Err(FcapError::NoBins);
    }
    let bids: Vec<(usize, Micros)> = sample
        .iter()
        .enumerate()
        .filter_map(|(j, imp)| {
            imp.entry(campaign)
                .filter(|e| e.revenue.0 > 0)
                .map(|e| (j, e.revenue))
        })
        .collect();
    if bids.is_empty() {
        return Err(FcapError::NoBids { campaign });
    }
    let mut sorted: Vec<Micros> = bids.iter().map(|b| b.1).collect();
    sorted.sort_unstable();
    let n = sorted.len();
    let edges: Vec<Micros> = (1..n_bins)
        .map(|k| sorted[(k * n).div_ceil(n_bins).max(1) - 1])
        .collect();
    let mut sets = vec![Vec::new(); n_bins];
    for (j, r) in bids {
        let bin = edges.partition_point(|e| *e < r);
        sets[bin].push(j);
    }
    sets.retain(|s| !s.is_empty());
    Ok(CampaignPartition {
        campaign,
        edges,
        sets,
    })
}

/// Largest number of impressions in a set that can be served without any
/// user exceeding `cap`: the sum over users of `min(cap, count)`.
pub fn partition_cap<'a, I>(users: I, cap: u32) -> u64
where
    I: IntoIterator<Item = &'a str>,
{
    let mut seen: HashMap<&str, u32> = HashMap::new();
    let mut total = 0;
    for u in users {
        let c = seen.entry(u).or_insert(0);
        if *c < cap {
            *c += 1;
            total += 1;
        }
    }
    total
}

/// Sample LP with budgets scaled by `eps`, plus one row per partition set
/// limiting its assignments to the set's cap bound.
pub fn build_fcap_lp(
    sample: &[Impression],
    book: &CampaignBook,
    eps: f64,
    mode: ScaleMode,
    partitions: &PartitionSet,
) -> Result<LpInstance, FcapError> {
    let mut inst = sample_instance(sample, book, eps, mode)?;
    for part in &partitions.campaigns {
        let cap = book.fcap(part.campaign).ok_or_else(|| {
            FcapError::PartitionMismatch(format!("campaign {} has no cap", part.campaign))
        })?;
        for set in &part.sets {
            let users = set
                .iter()
                .map(|&j| sample.get(j).map(|imp| imp.user.as_str()))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| {
                    FcapError::PartitionMismatch(format!("index beyond sample of {}", sample.len()))
                })?;
            inst.add_cap_row(CapRow {
                campaign: part.campaign,
                members: set.clone(),
                cap: partition_cap(users, cap) as f64,
            })
            .map_err(|e| FcapError::PartitionMismatch(e.to_string()))?;
        }
    }
    Ok(inst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionRow {
    pub campaign: String,
    pub bin: usize,
    pub size: usize,
    pub cap: u64,
}

/// One row per partition set: campaign id, bin, set size and cap bound.
pub fn partition_table(
    sample: &[Impression],
    book: &CampaignBook,
    partitions: &PartitionSet,
) -> Vec<PartitionRow> {
    let mut rows = Vec::new();
    for part in &partitions.campaigns {
        let cap = book.fcap(part.campaign).unwrap_or(u32::MAX);
        for (bin, set) in part.sets.iter().enumerate() {
            rows.push(PartitionRow {
                campaign: book.campaign(part.campaign).id.clone(),
                bin,
                size: set.len(),
                cap: partition_cap(set.iter().map(|&j| sample[j].user.as_str()), cap),
            });
        }
    }
    rows
}

pub fn write_partition_table<W: Write>(rows: &[PartitionRow], mut out: W) -> io::Result<()> {
    writeln!(out, "campaign\tbin\tsize\tcap")?;
    for r in rows {
        writeln!(out, "{}\t{}\t{}\t{}", r.campaign, r.bin, r.size, r.cap)?;
    }
    Ok(())
}

/// Serves per (user, campaign) over the whole window.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UserCapCounter {
    users: HashMap<String, u32>,
    counts: HashMap<(u32, usize), u32>,
}

impl UserCapCounter {
    pub fn new() -> UserCapCounter {
        UserCapCounter::default()
    }

    /// Dense key of a user seen before, if any.
    #[inline]
    pub fn user_key(&self, user: &str) -> Option<u32> {
        self.users.get(user).copied()
    }

    #[inline]
    pub fn count_for(&self, key: Option<u32>, campaign: usize) -> u32 {
        match key {
            Some(k) => self.counts.get(&(k, campaign)).copied().unwrap_or(0),
            None => 0,
        }
    }

    pub fn count(&self, user: &str, campaign: usize) -> u32 {
        self.count_for(self.user_key(user), campaign)
    }

    pub fn allowed(&self, user: &str, campaign: usize, cap: Option<u32>) -> bool {
        cap.map_or(true, |f| self.count(user, campaign) < f)
    }

    /// Returns whether one more serve is within the cap, recording it if so.
    pub fn check_and_count(&mut self, user: &str, campaign: usize, cap: Option<u32>) -> bool {
        if !self.allowed(user, campaign, cap) {
            return false;
        }
        if cap.is_some() {
            let next = self.users.len() as u32;
            let k = *self.users.entry(user.to_owned()).or_insert(next);
            *self.counts.entry((k, campaign)).or_insert(0) += 1;
        }
        true
    }

    /// Largest count recorded for any (user, campaign) pair of `campaign`.
    pub fn max_count(&self, campaign: usize) -> u32 {
        self.counts
            .iter()
            .filter(|((_, c), _)| *c == campaign)
            .map(|(_, n)| *n)
            .max()
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Entry;

    fn bids(values: &[i64]) -> Vec<Impression> {
        values
            .iter()
            .enumerate()
            .map(|(j, &r)| {
                Impression::new(
                    j.to_string(),
                    "u",
                    vec![Entry::new(0, Micros(r), Micros(1))],
                )
            })
            .collect()
    }

    #[test]
    fn quantile_bins() {
        let sample = bids(&[7, 3, 9, 1, 5, 10, 2, 8, 4, 6]);
        let sets = partition_bids(&sample, 0, 2).unwrap();
        assert_eq!(sets, vec![vec![1, 3, 4, 6, 8], vec![0, 2, 5, 7, 9]]);
        assert_eq!(
            partition_bids(&sample, 0, 1).unwrap(),
            vec![(0..10).collect::<Vec<_>>()]
        );
        let flat = bids(&[4, 4, 4, 4]);
        assert_eq!(partition_bids(&flat, 0, 5).unwrap().len(), 1);
        assert!(matches!(
            partition_bids(&sample, 1, 2),
            Err(FcapError::NoBids { campaign: 1 })
        ));
        assert!(matches!(
            partition_bids(&sample, 0, 0),
            Err(FcapError::NoBins)
        ));
    }

    #[test]
    fn more_bins_than_bids() {
        let sample = bids(&[5, 1, 3]);
        let sets = partition_bids(&sample, 0, 10).unwrap();
        assert_eq!(sets, vec![vec![1], vec![2], vec![0]]);
    }

    #[test]
    fn caps() {
        assert_eq!(partition_cap(["u1", "u1", "u1", "u2"], 2), 3);
        assert_eq!(partition_cap(["u1", "u2"], 0), 0);
        assert_eq!(partition_cap(["u1", "u1", "u2"], 5), 3);
    }

    #[test]
    fn counter() {
        let mut c = UserCapCounter::new();
        assert!(c.check_and_count("a", 0, Some(1)));
        assert!(!c.check_and_count("a", 0, Some(1)));
        assert!(c.check_and_count("b", 0, Some(1)));
        for _ in 0..5 {
            assert!(c.check_and_count("a", 1, None));
        }
        assert_eq!(c.count("a", 1), 0);
        assert_eq!(c.max_count(0), 1);
    }
}
