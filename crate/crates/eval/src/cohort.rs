//! Grouping users by click count into evaluation cohorts.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mind::MindDataset;

pub const BUCKET_WIDTH: usize = 10;
pub const BUCKET_COUNT: usize = 11;
pub const DEFAULT_CLICK_QUOTA: usize = 10_000;

/// A click-count interval `[lower, upper)`; the last bucket is open-ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Bucket(pub usize);

impl Bucket {
    pub fn all() -> impl Iterator<Item = Bucket> {
        (0..BUCKET_COUNT).map(Bucket)
    }

    pub fn of(clicks: usize) -> Self {
        Bucket((clicks / BUCKET_WIDTH).min(BUCKET_COUNT - 1))
    }

    pub fn lower(self) -> usize {
        self.0 * BUCKET_WIDTH
    }

    /// `None` for the open-ended last bucket.
    pub fn upper(self) -> Option<usize> {
        (self.0 + 1 < BUCKET_COUNT).then(|| (self.0 + 1) * BUCKET_WIDTH)
    }

    pub fn contains(self, clicks: usize) -> bool {
        clicks >= self.lower() && self.upper().is_none_or(|u| clicks < u)
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.upper() {
            Some(upper) => write!(f, "[{}, {})", self.lower(), upper),
            None => write!(f, "[{}, inf)", self.lower()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Cohort {
    pub bucket: Bucket,
    /// Selected users in draw order.
    pub users: Vec<String>,
    pub clicks: usize,
    /// Users available in the bucket before drawing.
    pub population: usize,
    /// The whole bucket was taken and still fell short of the quota.
    pub shortfall: bool,
}

/// Draws users per bucket, in seeded random order, until each cohort's clicks
/// reach `quota`. Empty buckets produce no cohort.
pub fn bucket_users<R: Rng + ?Sized>(dataset: &MindDataset, quota: usize, rng: &mut R) -> Vec<Cohort> {
    let mut buckets: BTreeMap<Bucket, Vec<(&str, usize)>> = BTreeMap::new();
    for (user, clicks) in dataset.click_counts() {
        buckets.entry(Bucket::of(clicks)).or_default().push((user, clicks));
    }
    buckets
        .into_iter()
        .map(|(bucket, mut members)| {
            let population = members.len();
            members.shuffle(rng);
            let mut users = Vec::new();
            let mut clicks = 0;
            for (user, c) in members {
                if clicks >= quota {
                    break;
                }
                users.push(user.to_string());
                clicks += c;
            }
            Cohort { bucket, shortfall: clicks < quota, users, clicks, population }
        })
        .collect()
}
