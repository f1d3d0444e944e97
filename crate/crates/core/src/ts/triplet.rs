use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::D_TS;
use crate::error::{Error, Result};
use crate::nn::seeded_rng;

pub const MIN_SUBWINDOW: usize = 50;
pub const DEFAULT_NEGATIVES: usize = 5;

/// What counts as a positive for an anchor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveMode {
    /// Same recorded segment; negatives come from other segments.
    #[default]
    SameSegment,
    /// Same terrain anywhere; negatives come from other terrains.
    SameTerrain,
}

/// Column range `[offset, offset+len)` of window `window`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SubWindow {
    pub window: usize,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: SubWindow,
    pub positive: SubWindow,
    pub negatives: Vec<SubWindow>,
}

/// Draws triplets over a set of windows labelled by segment and terrain.
pub struct TripletSampler {
    groups: Vec<Vec<usize>>,
    group_of: Vec<usize>,
    k: usize,
    rng: ChaCha8Rng,
}

impl TripletSampler {
    /// `segments[i]` and `terrains[i]` label window `i`.
    pub fn new(
        segments: &[usize],
        terrains: &[usize],
        mode: PositiveMode,
        k: usize,
        seed: u64,
    ) -> Result<Self> {
        if segments.len() != terrains.len() {
            return Err(Error::Input(
                "segment and terrain labels differ in length".into(),
            ));
        }
        let keys = match mode {
            PositiveMode::SameSegment => segments,
            PositiveMode::SameTerrain => terrains,
        };
        let mut ids: Vec<usize> = keys.to_vec();
        ids.sort_unstable();
        ids.dedup();
        if segments.len() < 2 || ids.len() < 2 {
            return Err(Error::Sampling(format!(
                "need at least 2 windows in 2 groups, have {} windows in {} group(s)",
                segments.len(),
                ids.len()
            )));
        }
        let mut groups = vec![Vec::new(); ids.len()];
        let mut group_of = Vec::with_capacity(keys.len());
        for (i, key) in keys.iter().enumerate() {
            let g = ids.binary_search(key).expect("key was collected");
            groups[g].push(i);
            group_of.push(g);
        }
        Ok(Self {
            groups,
            group_of,
            k,
            rng: seeded_rng(seed, 3),
        })
    }

    pub fn group_of(&self, window: usize) -> usize {
        self.group_of[window]
    }

    fn sub(&mut self, window: usize) -> SubWindow {
        let len = self.rng.random_range(MIN_SUBWINDOW..=D_TS);
        let offset = self.rng.random_range(0..=D_TS - len);
        SubWindow {
            window,
            offset,
            len,
        }
    }

    pub fn sample(&mut self) -> Triplet {
        let n = self.group_of.len();
        let a = self.rng.random_range(0..n);
        let g = self.group_of[a];
        let p = *self.groups[g]
            .choose(&mut self.rng)
            .expect("group is non-empty");
        let anchor = self.sub(a);
        let positive = self.sub(p);
        let negatives = (0..self.k)
            .map(|_| {
                let mut other = self.rng.random_range(0..self.groups.len() - 1);
                if other >= g {
                    other += 1;
                }
                let w = *self.groups[other]
                    .choose(&mut self.rng)
                    .expect("group is non-empty");
                self.sub(w)
            })
            .collect();
        Triplet {
            anchor,
            positive,
            negatives,
        }
    }
}

/// One triplet from a fresh sampler seeded with `seed`.
pub fn sample_triplet(
    segments: &[usize],
    terrains: &[usize],
    k: usize,
    seed: u64,
) -> Result<Triplet> {
    Ok(TripletSampler::new(segments, terrains, PositiveMode::SameSegment, k, seed)?.sample())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_segments_force_the_negative() {
        let seg = [0, 0, 1, 1];
        for seed in 0..50 {
            let t = sample_triplet(&seg, &seg, 1, seed).unwrap();
            assert_ne!(seg[t.anchor.window], seg[t.negatives[0].window]);
            assert_eq!(seg[t.anchor.window], seg[t.positive.window]);
        }
    }

    #[test]
    fn single_segment_is_rejected() {
        assert!(matches!(
            sample_triplet(&[3, 3, 3], &[0, 0, 0], 1, 0),
            Err(Error::Sampling(_))
        ));
        assert!(matches!(
            sample_triplet(&[1], &[0], 1, 0),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn deterministic_and_in_bounds() {
        let seg: Vec<usize> = (0..30).map(|i| i / 3).collect();
        let a = sample_triplet(&seg, &seg, 5, 17).unwrap();
        assert_eq!(a, sample_triplet(&seg, &seg, 5, 17).unwrap());
        assert_eq!(a.negatives.len(), 5);
        for s in std::iter::once(a.anchor)
            .chain([a.positive])
            .chain(a.negatives)
        {
            assert!(s.len >= MIN_SUBWINDOW && s.offset + s.len <= D_TS);
        }
    }

    #[test]
    fn same_terrain_mode_groups_by_terrain() {
        let seg: Vec<usize> = (0..12).collect();
        let ter: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let mut s = TripletSampler::new(&seg, &ter, PositiveMode::SameTerrain, 3, 2).unwrap();
        for _ in 0..200 {
            let t = s.sample();
            assert_eq!(ter[t.anchor.window], ter[t.positive.window]);
            assert!(t
                .negatives
                .iter()
                .all(|n| ter[n.window] != ter[t.anchor.window]));
        }
    }
}
