//! Samples, labeled datasets and cross-domain batch pairing.

mod folder;
mod toy;

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use folder::{load_image_folder, write_image_folder};
pub use toy::{
    generate_toy_benchmark, load_toy_benchmark, save_toy_benchmark, toy_taxonomy_edges, DomainShift, ToyBenchmark,
    ToyBenchmarkSpec, SHAPE_CATALOGUE,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DomainRole {
    Source,
    Target,
    Pretrain,
}

impl DomainRole {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainRole::Source => "source",
            DomainRole::Target => "target",
            DomainRole::Pretrain => "pretrain",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "source" => Some(DomainRole::Source),
            "target" => Some(DomainRole::Target),
            "pretrain" => Some(DomainRole::Pretrain),
            _ => None,
        }
    }
}

impl fmt::Display for DomainRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[c, h, w]` with values in `[0, 1]`.
    pub image: Tensor,
    pub label: Option<usize>,
    pub role: DomainRole,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    samples: Vec<Sample>,
    class_set: Vec<String>,
    role: DomainRole,
}

impl LabeledDataset {
    /// Validates pixel range, label range and a uniform image shape.
    pub fn new(samples: Vec<Sample>, class_set: Vec<String>, role: DomainRole) -> Result<Self> {
        let shape = samples.first().map(|s| s.image.shape().to_vec());
        for (i, s) in samples.iter().enumerate() {
            if Some(s.image.shape()) != shape.as_deref() || s.image.shape().len() != 3 {
                return Err(Error::invalid(format!("sample {i} has image shape {:?}", s.image.shape())));
            }
            if s.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid(format!("sample {i} has pixels outside [0, 1]")));
            }
            if let Some(l) = s.label {
                if l >= class_set.len() {
                    return Err(Error::invalid(format!("sample {i} label {l} outside {} classes", class_set.len())));
                }
            }
            if s.role != role {
                return Err(Error::invalid(format!("sample {i} belongs to the {} domain, not {role}", s.role)));
            }
        }
        Ok(Self { samples, class_set, role })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn class_set(&self) -> &[String] {
        &self.class_set
    }

    pub fn role(&self) -> DomainRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.image.shape())
    }

    /// Stacks the selected images into `[n, c, h, w]`.
    pub fn images(&self, idx: &[usize]) -> Tensor {
        let items: Vec<&Tensor> = idx.iter().map(|&i| &self.samples[i].image).collect();
        Tensor::stack(&items).expect("uniform image shapes")
    }

    pub fn all_images(&self) -> Tensor {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.images(&idx)
    }

    /// Labels of the selected samples; fails if any is absent.
    pub fn labels(&self, idx: &[usize]) -> Result<Vec<usize>> {
        idx.iter()
            .map(|&i| {
                self.samples[i]
                    .label
                    .ok_or_else(|| Error::invalid(format!("sample {i} of the {} domain has no label", self.role)))
            })
            .collect()
    }

    pub fn all_labels(&self) -> Result<Vec<usize>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.labels(&idx)
    }

    /// Copy with labels replaced (pseudo-labels, corrupted labels).
    pub fn with_labels(&self, labels: &[usize]) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::invalid(format!("{} labels for {} samples", labels.len(), self.len())));
        }
        let samples = self
            .samples
            .iter()
            .zip(labels)
            .map(|(s, &l)| Sample {
                label: Some(l),
                ..s.clone()
            })
            .collect();
        Self::new(samples, self.class_set.clone(), self.role)
    }

    /// Copy without labels.
    pub fn unlabeled(&self) -> Self {
        let samples = self.samples.iter().map(|s| Sample { label: None, ..s.clone() }).collect();
        Self {
            samples,
            class_set: self.class_set.clone(),
            role: self.role,
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            class_set: self.class_set.clone(),
            role: self.role,
        }
    }

    /// Same samples under a different domain role.
    pub fn with_role(&self, role: DomainRole) -> Self {
        Self {
            samples: self.samples.iter().map(|s| Sample { role, ..s.clone() }).collect(),
            class_set: self.class_set.clone(),
            role,
        }
    }

    /// Keeps only samples of the listed classes (in the listed order),
    /// at most `per_class_cap` each, relabeled `0..classes.len()`.
    pub fn filter_classes(&self, classes: &[String], per_class_cap: Option<usize>) -> Result<Self> {
        let mut remap = vec![None; self.class_set.len()];
        for (new, c) in classes.iter().enumerate() {
            let old = self
                .class_set
                .iter()
                .position(|x| x == c)
                .ok_or_else(|| Error::invalid(format!("class `{c}` is not in the {} dataset", self.role)))?;
            remap[old] = Some(new);
        }
        let mut counts = vec![0usize; classes.len()];
        let mut samples = Vec::new();
        for s in &self.samples {
            let Some(l) = s.label else { continue };
            let Some(new) = remap[l] else { continue };
            if per_class_cap.is_some_and(|cap| counts[new] >= cap) {
                continue;
            }
            counts[new] += 1;
            samples.push(Sample {
                label: Some(new),
                ..s.clone()
            });
        }
        Self::new(samples, classes.to_vec(), self.role)
    }
}

/// Index batches for one step of a paired stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPair {
    pub epoch: usize,
    pub step: usize,
    pub a: Vec<usize>,
    pub b: Vec<usize>,
}

/// Endless stream pairing two datasets of possibly different sizes. Each
/// epoch walks the larger one in a fresh shuffled order; the smaller one is
/// drawn from a shuffled cycle that is reshuffled whenever exhausted.
#[derive(Clone, Debug)]
pub struct PairedBatches {
    len_a: usize,
    len_b: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    epoch: usize,
    step: usize,
    larger_order: Vec<usize>,
    cycle: Vec<usize>,
    cycle_pos: usize,
}

pub fn paired_batches(a: &LabeledDataset, b: &LabeledDataset, batch_size: usize, seed: u64) -> Result<PairedBatches> {
    PairedBatches::new(a.len(), b.len(), batch_size, seed)
}

impl PairedBatches {
    pub fn new(len_a: usize, len_b: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if len_a == 0 || len_b == 0 {
            return Err(Error::invalid("both datasets must be non-empty"));
        }
        let mut s = Self {
            len_a,
            len_b,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            epoch: 0,
            step: 0,
            larger_order: Vec::new(),
            cycle: Vec::new(),
            cycle_pos: 0,
        };
        s.start_epoch();
        s.cycle = (0..s.smaller_len()).collect();
        s.cycle.shuffle(&mut s.rng);
        Ok(s)
    }

    fn a_is_larger(&self) -> bool {
        self.len_a >= self.len_b
    }

    fn larger_len(&self) -> usize {
        self.len_a.max(self.len_b)
    }

    fn smaller_len(&self) -> usize {
        if self.a_is_larger() {
            self.len_b
        } else {
            self.len_a
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.larger_len().div_ceil(self.batch_size)
    }

    fn start_epoch(&mut self) {
        self.larger_order = (0..self.larger_len()).collect();
        self.larger_order.shuffle(&mut self.rng);
    }

    fn draw_smaller(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cycle_pos == self.cycle.len() {
                self.cycle.shuffle(&mut self.rng);
                self.cycle_pos = 0;
            }
            out.push(self.cycle[self.cycle_pos]);
            self.cycle_pos += 1;
        }
        out
    }
}

impl Iterator for PairedBatches {
    type Item = BatchPair;

    fn next(&mut self) -> Option<BatchPair> {
        if self.step == self.steps_per_epoch() {
            self.epoch += 1;
            self.step = 0;
            self.start_epoch();
        }
        let lo = self.step * self.batch_size;
        let hi = (lo + self.batch_size).min(self.larger_len());
        let larger = self.larger_order[lo..hi].to_vec();
        let smaller = self.draw_smaller(larger.len());
        let (a, b) = if self.a_is_larger() { (larger, smaller) } else { (smaller, larger) };
        let pair = BatchPair {
            epoch: self.epoch,
            step: self.step,
            a,
            b,
        };
        self.step += 1;
        Some(pair)
    }
}

/// Endless shuffled cycle over `0..len`, reshuffled whenever exhausted.
#[derive(Clone, Debug)]
pub struct CyclicSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl CyclicSampler {
    pub fn new(len: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("cannot sample from an empty dataset"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Ok(Self { order, pos: 0, rng })
    }

    pub fn draw(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Shuffled mini-batches over one dataset, reshuffled every epoch.
pub fn epoch_batches(len: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn ds(n: usize, role: DomainRole) -> LabeledDataset {
        let samples = (0..n)
            .map(|i| Sample {
                image: Tensor::full(&[1, 2, 2], (i % 10) as f64 / 10.0),
                label: Some(i % 2),
                role,
            })
            .collect();
        LabeledDataset::new(samples, vec!["a".into(), "b".into()], role).unwrap()
    }

    #[test]
    fn ten_vs_four_gives_five_steps() {
        let a = ds(10, DomainRole::Target);
        let b = ds(4, DomainRole::Pretrain);
        let stream = paired_batches(&a, &b, 2, 0).unwrap();
        assert_eq!(stream.steps_per_epoch(), 5);
        let steps: Vec<BatchPair> = stream.take(5).collect();
        let mut seen_a: Vec<usize> = steps.iter().flat_map(|p| p.a.clone()).collect();
        seen_a.sort();
        assert_eq!(seen_a, (0..10).collect::<Vec<_>>());
        // b is cycled: first four draws cover it once, then a reshuffle
        let b_draws: Vec<usize> = steps.iter().flat_map(|p| p.b.clone()).collect();
        let mut first: Vec<usize> = b_draws[..4].to_vec();
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3]);
        assert!(steps.iter().all(|p| p.a.len() == p.b.len() && p.epoch == 0));
    }

    #[test]
    fn equal_sizes_same_seed_same_pairing() {
        let a = ds(6, DomainRole::Source);
        let b = ds(6, DomainRole::Target);
        let x: Vec<_> = paired_batches(&a, &b, 4, 9).unwrap().take(6).collect();
        let y: Vec<_> = paired_batches(&a, &b, 4, 9).unwrap().take(6).collect();
        assert_eq!(x, y);
    }

    #[test]
    fn singleton_dataset_pairs_every_step() {
        let a = ds(7, DomainRole::Target);
        let b = ds(1, DomainRole::Pretrain);
        for p in paired_batches(&a, &b, 3, 1).unwrap().take(6) {
            assert!(p.b.iter().all(|&i| i == 0));
            assert_eq!(p.a.len(), p.b.len());
        }
    }

    #[test]
    fn zero_batch_and_empty_are_rejected() {
        let a = ds(3, DomainRole::Target);
        assert!(paired_batches(&a, &a, 0, 0).is_err());
        let empty = LabeledDataset::new(vec![], vec![], DomainRole::Target).unwrap();
        assert!(paired_batches(&a, &empty, 2, 0).is_err());
    }

    #[test]
    fn dataset_validation() {
        let bad = Sample {
            image: Tensor::full(&[1, 1, 1], 1.5),
            label: None,
            role: DomainRole::Target,
        };
        assert!(LabeledDataset::new(vec![bad], vec![], DomainRole::Target).is_err());
        let bad_label = Sample {
            image: Tensor::zeros(&[1, 1, 1]),
            label: Some(3),
            role: DomainRole::Source,
        };
        assert!(LabeledDataset::new(vec![bad_label], vec!["x".into()], DomainRole::Source).is_err());
    }

    #[test]
    fn filter_classes_relabels_and_caps() {
        let d = ds(10, DomainRole::Pretrain);
        let f = d.filter_classes(&["b".to_string()], Some(3)).unwrap();
        assert_eq!(f.len(), 3);
        assert_eq!(f.all_labels().unwrap(), vec![0, 0, 0]);
        assert!(d.filter_classes(&["zzz".to_string()], None).is_err());
    }

    proptest! {
        #[test]
        fn steps_per_epoch_and_equal_lengths(la in 1usize..40, lb in 1usize..40, bs in 1usize..9, seed in 0u64..100) {
            let mut s = PairedBatches::new(la, lb, bs, seed).unwrap();
            let steps = la.max(lb).div_ceil(bs);
            prop_assert_eq!(s.steps_per_epoch(), steps);
            for _ in 0..steps {
                let p = s.next().unwrap();
                prop_assert_eq!(p.a.len(), p.b.len());
                prop_assert!(p.a.iter().all(|&i| i < la) && p.b.iter().all(|&i| i < lb));
                prop_assert_eq!(p.epoch, 0);
            }
            prop_assert_eq!(s.next().unwrap().epoch, 1);
        }
    }
}
