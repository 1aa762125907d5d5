//! Fixed-budget rehearsal memory and the merged training loader.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::ClassCounts;

/// A stored sample: index into the stream's training pool plus its label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub index: usize,
    pub label: usize,
    pub task_of_origin: usize,
}

impl Exemplar {
    pub fn sample(&self) -> Sample {
        Sample {
            index: self.index,
            label: self.label,
        }
    }
}

/// Exemplars per class under a total budget.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBuffer {
    pub capacity: usize,
    pub seed: u64,
    store: BTreeMap<usize, Vec<Exemplar>>,
}

/// Per-class quota: `capacity / n` each, with the remainder going one apiece
/// to the lowest class ids.
pub fn class_quotas(capacity: usize, classes: &[usize]) -> BTreeMap<usize, usize> {
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let n = sorted.len();
    if n == 0 {
        return BTreeMap::new();
    }
    let (base, rem) = (capacity / n, capacity % n);
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, c)| (c, base + usize::from(i < rem)))
        .collect()
}

impl MemoryBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            capacity,
            seed,
            store: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.store.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.store.keys().copied()
    }

    pub fn exemplars(&self, class: usize) -> &[Exemplar] {
        self.store.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Exemplar> {
        self.store.values().flatten()
    }

    pub fn samples(&self) -> Vec<Sample> {
        self.iter().map(Exemplar::sample).collect()
    }

    /// Re-balance after a task: shrink stored classes to their quota by
    /// keeping a stable prefix, then fill the task's new classes by seeded
    /// uniform sampling without replacement.
    pub fn update(&mut self, task_index: usize, task_samples: &[Sample], seen_classes: &[usize]) {
        if self.capacity < seen_classes.len() {
            warn!(
                "memory capacity {} is below the {} seen classes; some classes get no exemplars",
                self.capacity,
                seen_classes.len()
            );
        }
        let quotas = class_quotas(self.capacity, seen_classes);
        self.store.retain(|c, _| quotas.contains_key(c));
        for (class, stored) in &mut self.store {
            stored.truncate(quotas[class]);
        }
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for s in task_samples {
            by_class.entry(s.label).or_default().push(s.index);
        }
        for (class, mut indices) in by_class {
            let Some(&quota) = quotas.get(&class) else { continue };
            if self.store.contains_key(&class) {
                continue;
            }
            indices.sort_unstable();
            let mut rng = ChaCha8Rng::seed_from_u64(self.class_seed(class));
            let take = quota.min(indices.len());
            let chosen = index::sample(&mut rng, indices.len(), take);
            let exemplars = chosen
                .into_iter()
                .map(|i| Exemplar {
                    index: indices[i],
                    label: class,
                    task_of_origin: task_index,
                })
                .collect();
            self.store.insert(class, exemplars);
        }
    }

    fn class_seed(&self, class: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(class as u64)
    }

    /// Rebuild from stored exemplars, grouped by label.
    pub fn from_exemplars(capacity: usize, seed: u64, exemplars: impl IntoIterator<Item = Exemplar>) -> Self {
        let mut store: BTreeMap<usize, Vec<Exemplar>> = BTreeMap::new();
        for e in exemplars {
            store.entry(e.label).or_default().push(e);
        }
        Self {
            capacity,
            seed,
            store,
        }
    }

    /// Class id to sample indices, for checkpoints.
    pub fn to_index_map(&self) -> BTreeMap<usize, Vec<usize>> {
        self.store
            .iter()
            .map(|(&c, ex)| (c, ex.iter().map(|e| e.index).collect()))
            .collect()
    }

    /// Rebuild a buffer from [`MemoryBuffer::to_index_map`] output.
    /// `task_of` maps a class to the task that introduced it.
    pub fn from_index_map(
        capacity: usize,
        seed: u64,
        map: &BTreeMap<usize, Vec<usize>>,
        task_of: impl Fn(usize) -> usize,
    ) -> Self {
        let store = map
            .iter()
            .map(|(&c, idx)| {
                let ex = idx
                    .iter()
                    .map(|&index| Exemplar {
                        index,
                        label: c,
                        task_of_origin: task_of(c),
                    })
                    .collect();
                (c, ex)
            })
            .collect();
        Self {
            capacity,
            seed,
            store,
        }
    }
}

/// `s_j` over the union of the current task's samples and the buffer.
pub fn class_counts(buffer: &MemoryBuffer, task_samples: &[Sample]) -> ClassCounts {
    ClassCounts::from_labels(
        task_samples
            .iter()
            .map(|s| s.label)
            .chain(buffer.iter().map(|e| e.label)),
    )
}

/// Seeded mini-batches over the union of task samples and exemplars.
#[derive(Clone, Debug)]
pub struct MergedLoader {
    samples: Vec<Sample>,
    batch_size: usize,
    seed: u64,
}

impl MergedLoader {
    pub fn new(buffer: &MemoryBuffer, task_samples: &[Sample], batch_size: usize, seed: u64) -> Result<Self> {
        let mut samples = task_samples.to_vec();
        samples.extend(buffer.samples());
        Self::from_samples(samples, batch_size, seed)
    }

    pub fn from_samples(samples: Vec<Sample>, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if samples.is_empty() {
            return Err(Error::Data("nothing to train on".into()));
        }
        Ok(Self {
            samples,
            batch_size,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.samples.len().div_ceil(self.batch_size)
    }

    pub fn counts(&self) -> ClassCounts {
        ClassCounts::from_labels(self.samples.iter().map(|s| s.label))
    }

    /// The shuffled batches of `epoch`; every sample appears exactly once.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<Sample>> {
        let mut order = self.samples.clone();
        let seed = self
            .seed
            .wrapping_add((epoch as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03));
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.chunks(self.batch_size).map(<[Sample]>::to_vec).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn samples_for(classes: std::ops::Range<usize>, per_class: usize) -> Vec<Sample> {
        classes
            .flat_map(|c| (0..per_class).map(move |i| Sample { index: c * 1000 + i, label: c }))
            .collect()
    }

    #[test]
    fn quotas_divide_budget() {
        let q = class_quotas(200, &(0..10).collect::<Vec<_>>());
        assert!(q.values().all(|&v| v == 20));
        let q = class_quotas(10, &[5, 1, 3]);
        assert_eq!(q[&1], 4);
        assert_eq!(q[&3], 3);
        assert_eq!(q[&5], 3);
    }

    #[test]
    fn growth_truncates_old_classes() {
        let mut buf = MemoryBuffer::new(200, 1);
        buf.update(1, &samples_for(0..10, 50), &(0..10).collect::<Vec<_>>());
        assert_eq!(buf.len(), 200);
        assert!((0..10).all(|c| buf.exemplars(c).len() == 20));
        let prefix: Vec<Exemplar> = buf.exemplars(0)[..2].to_vec();
        let mut seen: Vec<usize> = (0..10).collect();
        for t in 1..10 {
            let new = (t * 10)..(t * 10 + 10);
            seen.extend(new.clone());
            buf.update(t + 1, &samples_for(new, 50), &seen);
        }
        assert_eq!(buf.len(), 200);
        assert!((0..100).all(|c| buf.exemplars(c).len() == 2));
        assert_eq!(buf.exemplars(0), prefix.as_slice());
    }

    #[test]
    fn update_is_deterministic() {
        let run = || {
            let mut b = MemoryBuffer::new(30, 9);
            b.update(1, &samples_for(0..4, 40), &[0, 1, 2, 3]);
            b
        };
        assert_eq!(run(), run());
        let mut other = MemoryBuffer::new(30, 10);
        other.update(1, &samples_for(0..4, 40), &[0, 1, 2, 3]);
        assert_ne!(run(), other);
    }

    #[test]
    fn small_capacity_leaves_some_classes_empty() {
        let mut b = MemoryBuffer::new(2, 0);
        b.update(1, &samples_for(0..5, 3), &[0, 1, 2, 3, 4]);
        assert_eq!(b.len(), 2);
        assert_eq!(b.exemplars(4).len(), 0);
    }

    #[test]
    fn counts_cover_union() {
        let mut b = MemoryBuffer::new(190, 0);
        let old: Vec<usize> = (0..95).collect();
        b.update(1, &samples_for(0..95, 10), &old);
        let new = samples_for(95..100, 500);
        let seen: Vec<usize> = (0..100).collect();
        // quota for 100 classes is 1-2; before the update the buffer holds 2 per old class
        let counts = class_counts(&b, &new);
        assert_eq!(counts.get(0), 2);
        assert_eq!(counts.get(97), 500);
        assert_eq!(counts.total(), new.len() + b.len());
        b.update(2, &new, &seen);
        assert!(b.len() <= 190);

        let empty = MemoryBuffer::new(10, 0);
        let task = samples_for(0..3, 7);
        assert_eq!(class_counts(&empty, &task), ClassCounts::from_labels(task.iter().map(|s| s.label)));
    }

    #[test]
    fn loader_epochs() {
        let mut b = MemoryBuffer::new(100, 0);
        b.update(1, &samples_for(0..10, 20), &(0..10).collect::<Vec<_>>());
        let task = samples_for(10..20, 90);
        let loader = MergedLoader::new(&b, &task, 100, 5).unwrap();
        assert_eq!(loader.len(), 1000);
        assert_eq!(loader.batches_per_epoch(), 10);
        let e0 = loader.epoch(0);
        let e1 = loader.epoch(1);
        assert_eq!(e0.len(), 10);
        assert_ne!(e0, e1);
        let mut m0: Vec<Sample> = e0.concat();
        let mut m1: Vec<Sample> = e1.concat();
        m0.sort();
        m1.sort();
        assert_eq!(m0, m1);
        let labels: std::collections::BTreeSet<usize> = m0.iter().map(|s| s.label).collect();
        assert_eq!(labels.len(), 20);
        // frequencies agree with class_counts
        assert_eq!(ClassCounts::from_labels(m0.iter().map(|s| s.label)), class_counts(&b, &task));
        assert_eq!(loader.epoch(0), e0);
    }

    #[test]
    fn loader_errors() {
        let b = MemoryBuffer::new(0, 0);
        assert!(MergedLoader::new(&b, &[], 4, 0).is_err());
        assert!(MergedLoader::new(&b, &samples_for(0..1, 2), 0, 0).is_err());
    }

    #[test]
    fn index_map_round_trip() {
        let mut b = MemoryBuffer::new(12, 3);
        b.update(1, &samples_for(0..3, 10), &[0, 1, 2]);
        let rebuilt = MemoryBuffer::from_index_map(12, 3, &b.to_index_map(), |_| 1);
        assert_eq!(rebuilt, b);
    }

    proptest! {
        #[test]
        fn budget_and_balance_hold(capacity in 1usize..120, tasks in prop::collection::vec(1usize..8, 1..6), seed in 0u64..50) {
            let mut b = MemoryBuffer::new(capacity, seed);
            let mut seen = Vec::new();
            let mut next = 0;
            for (t, &k) in tasks.iter().enumerate() {
                let classes = next..next + k;
                next += k;
                seen.extend(classes.clone());
                b.update(t + 1, &samples_for(classes, 200), &seen);
                prop_assert!(b.len() <= capacity);
                let sizes: Vec<usize> = seen.iter().map(|&c| b.exemplars(c).len()).collect();
                let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
                prop_assert!(hi - lo <= 1);
            }
        }
    }
}
