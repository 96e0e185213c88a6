//! K-way trial slates cut from a single impression.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use veil_core::profile::{Impression, Item};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrialSlate {
    pub impression_id: String,
    pub candidates: Vec<Item>,
    /// Position of the clicked item in `candidates`.
    pub pos_index: usize,
}

impl TrialSlate {
    pub fn k(&self) -> usize {
        self.candidates.len()
    }

    pub fn clicked(&self) -> &Item {
        &self.candidates[self.pos_index]
    }
}

/// One clicked item (drawn uniformly if several) plus `k - 1` unclicked
/// items drawn without replacement, in shuffled order. `None` when the
/// impression has no click or too few unclicked items.
pub fn make_trial<R: Rng + ?Sized>(impression: &Impression, k: usize, rng: &mut R) -> Option<TrialSlate> {
    assert!(k >= 2, "a trial needs at least two candidates");
    let clicked: Vec<&Item> = impression.clicked().collect();
    let unclicked: Vec<&Item> = impression.unclicked().collect();
    if unclicked.len() < k - 1 {
        return None;
    }
    let pos = *clicked.choose(rng)?;
    let mut candidates: Vec<Item> = vec![pos.clone()];
    candidates.extend(unclicked.choose_multiple(rng, k - 1).map(|i| (*i).clone()));
    candidates.shuffle(rng);
    let pos_index = candidates.iter().position(|c| c.id == pos.id)?;
    Some(TrialSlate { impression_id: impression.impression_id.clone(), candidates, pos_index })
}
