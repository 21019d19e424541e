use std::fmt;
use std::str::FromStr;

use super::TrainError;
use crate::rng::Rng;

/// Target:auxiliary pair-count ratio of the training pool.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MixRatio {
    #[default]
    Off,
    ThreeToOne,
    OneToOne,
}

impl MixRatio {
    /// `(target_share, auxiliary_share)`.
    pub fn shares(self) -> (usize, usize) {
        match self {
            MixRatio::Off => (1, 0),
            MixRatio::ThreeToOne => (3, 1),
            MixRatio::OneToOne => (1, 1),
        }
    }

    /// Auxiliary pairs per epoch: `floor(n_target * aux / target)`.
    pub fn aux_count(self, n_target: usize) -> usize {
        let (t, a) = self.shares();
        n_target * a / t
    }
}

impl fmt::Display for MixRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MixRatio::Off => "off",
            MixRatio::ThreeToOne => "3:1",
            MixRatio::OneToOne => "1:1",
        })
    }
}

impl FromStr for MixRatio {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" | "none" => Ok(MixRatio::Off),
            "3:1" => Ok(MixRatio::ThreeToOne),
            "1:1" => Ok(MixRatio::OneToOne),
            _ => Err(format!("unknown mix ratio '{s}' (expected off, 3:1 or 1:1)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum SampleRef {
    Target(usize),
    Auxiliary(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub epoch: usize,
    pub items: Vec<SampleRef>,
}

/// Endless stream of batches. Each epoch pool holds every target pair once
/// plus `ratio.aux_count` auxiliary pairs drawn without replacement, shuffled;
/// batches never straddle epochs.
#[derive(Clone, Debug)]
pub struct MixedSampler {
    rng: Rng,
    n_target: usize,
    n_aux: usize,
    ratio: MixRatio,
    batch_size: usize,
    fixed_aux: Option<Vec<usize>>,
    pool: Vec<SampleRef>,
    cursor: usize,
    epoch: usize,
}

impl MixedSampler {
    /// With `fixed_aux_subset` the auxiliary selection is drawn once and
    /// reused every epoch. Requests beyond `n_aux` are capped at `n_aux`.
    pub fn new(
        rng: Rng,
        n_target: usize,
        n_aux: usize,
        ratio: MixRatio,
        batch_size: usize,
        fixed_aux_subset: bool,
    ) -> Result<Self, TrainError> {
        if n_target == 0 {
            return Err(TrainError::Config("target dataset is empty".into()));
        }
        if batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if ratio != MixRatio::Off && n_aux == 0 {
            return Err(TrainError::EmptyAuxiliary(ratio));
        }
        let mut s = Self {
            rng,
            n_target,
            n_aux,
            ratio,
            batch_size,
            fixed_aux: None,
            pool: Vec::new(),
            cursor: 0,
            epoch: 0,
        };
        if fixed_aux_subset {
            s.fixed_aux = Some(s.draw_aux());
        }
        s.refill();
        Ok(s)
    }

    pub fn pool_size(&self) -> usize {
        self.n_target + self.aux_per_epoch()
    }

    pub fn aux_per_epoch(&self) -> usize {
        self.ratio.aux_count(self.n_target).min(self.n_aux)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.pool_size().div_ceil(self.batch_size)
    }

    fn draw_aux(&mut self) -> Vec<usize> {
        let k = self.aux_per_epoch();
        let mut idx: Vec<usize> = (0..self.n_aux).collect();
        // Partial Fisher-Yates: the first k entries are a uniform k-subset.
        for i in 0..k {
            let j = i + self.rng.below(self.n_aux - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }

    fn refill(&mut self) {
        let aux = match &self.fixed_aux {
            Some(a) => a.clone(),
            None => self.draw_aux(),
        };
        let mut pool: Vec<SampleRef> = (0..self.n_target).map(SampleRef::Target).collect();
        pool.extend(aux.into_iter().map(SampleRef::Auxiliary));
        self.rng.shuffle(&mut pool);
        self.pool = pool;
        self.cursor = 0;
    }

    /// The current epoch's full pool (before batching).
    pub fn current_pool(&self) -> &[SampleRef] {
        &self.pool
    }

    pub fn next_batch(&mut self) -> Batch {
        if self.cursor >= self.pool.len() {
            self.epoch += 1;
            self.refill();
        }
        let end = (self.cursor + self.batch_size).min(self.pool.len());
        let items = self.pool[self.cursor..end].to_vec();
        self.cursor = end;
        Batch {
            epoch: self.epoch,
            items,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn sampler(n_t: usize, n_a: usize, ratio: MixRatio, fixed: bool) -> MixedSampler {
        MixedSampler::new(Rng::new(5), n_t, n_a, ratio, 8, fixed).unwrap()
    }

    #[test]
    fn pool_sizes_match_reference_totals() {
        assert_eq!(sampler(900, 900, MixRatio::ThreeToOne, false).pool_size(), 1200);
        assert_eq!(sampler(900, 900, MixRatio::OneToOne, false).pool_size(), 1800);
        assert_eq!(MixRatio::ThreeToOne.aux_count(900), 300);
        assert_eq!(MixRatio::OneToOne.aux_count(900), 900);
        let off = sampler(900, 0, MixRatio::Off, false);
        assert_eq!(off.pool_size(), 900);
        assert!(off.current_pool().iter().all(|s| matches!(s, SampleRef::Target(_))));
    }

    #[test]
    fn auxiliary_required_when_mixing() {
        assert!(matches!(
            MixedSampler::new(Rng::new(1), 10, 0, MixRatio::OneToOne, 4, false),
            Err(TrainError::EmptyAuxiliary(_))
        ));
    }

    #[test]
    fn small_auxiliary_set_is_capped() {
        let s = sampler(100, 20, MixRatio::OneToOne, false);
        assert_eq!(s.aux_per_epoch(), 20);
    }

    #[test]
    fn batches_stay_within_epochs() {
        let mut s = sampler(20, 20, MixRatio::ThreeToOne, false);
        assert_eq!(s.pool_size(), 26);
        assert_eq!(s.steps_per_epoch(), 4);
        let sizes: Vec<(usize, usize)> = (0..8).map(|_| {
            let b = s.next_batch();
            (b.epoch, b.items.len())
        }).collect();
        assert_eq!(sizes, vec![(0, 8), (0, 8), (0, 8), (0, 2), (1, 8), (1, 8), (1, 8), (1, 2)]);
    }

    #[test]
    fn fixed_subset_reuses_selection() {
        let mut s = sampler(30, 50, MixRatio::ThreeToOne, true);
        let aux_of = |p: &[SampleRef]| {
            let mut a: Vec<usize> = p
                .iter()
                .filter_map(|r| match r {
                    SampleRef::Auxiliary(i) => Some(*i),
                    _ => None,
                })
                .collect();
            a.sort();
            a
        };
        let first = aux_of(s.current_pool());
        for _ in 0..s.steps_per_epoch() + 1 {
            s.next_batch();
        }
        assert_eq!(aux_of(s.current_pool()), first);
    }

    #[test]
    fn deterministic_given_seed() {
        let mut a = sampler(40, 40, MixRatio::OneToOne, false);
        let mut b = sampler(40, 40, MixRatio::OneToOne, false);
        for _ in 0..30 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
    }

    proptest! {
        #[test]
        fn every_target_once_per_epoch(n_t in 1usize..60, n_a in 1usize..60, r in 0usize..3, bs in 1usize..10, seed in 0u64..1000) {
            let ratio = [MixRatio::Off, MixRatio::ThreeToOne, MixRatio::OneToOne][r];
            let mut s = MixedSampler::new(Rng::new(seed), n_t, n_a, ratio, bs, false).unwrap();
            for epoch in 0..3 {
                let mut seen_t = vec![0usize; n_t];
                let mut seen_a = vec![0usize; n_a];
                for _ in 0..s.steps_per_epoch() {
                    let b = s.next_batch();
                    prop_assert_eq!(b.epoch, epoch);
                    for it in b.items {
                        match it {
                            SampleRef::Target(i) => seen_t[i] += 1,
                            SampleRef::Auxiliary(i) => seen_a[i] += 1,
                        }
                    }
                }
                prop_assert!(seen_t.iter().all(|&c| c == 1));
                prop_assert!(seen_a.iter().all(|&c| c <= 1));
                prop_assert_eq!(seen_a.iter().sum::<usize>(), ratio.aux_count(n_t).min(n_a));
            }
        }
    }
}
