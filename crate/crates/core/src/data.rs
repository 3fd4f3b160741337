//! Datasets, client shards and poison mixing.

use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{cos, round, sin};
use crate::nn::Shape3;
use crate::rng::{derived_rng, rng_from, TAG_MIX};

/// Image stored channel-major (CHW) with pixel values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub shape: Shape3,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(shape: Shape3, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != shape.len() {
            return Err(Error::shape(shape.len(), pixels.len()));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::InvalidInput(alloc::format!("pixel {v} outside [-1, 1]")));
        }
        Ok(Self { shape, pixels })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub image: Image,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    samples: Vec<LabeledSample>,
    num_classes: usize,
    class_names: Option<Vec<String>>,
}

impl Dataset {
    /// Validates labels, pixel ranges and that every image shares one shape.
    pub fn new(
        samples: Vec<LabeledSample>,
        num_classes: usize,
        class_names: Option<Vec<String>>,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidDataset("num_classes must be positive".into()));
        }
        if let Some(names) = &class_names {
            if names.len() != num_classes {
                return Err(Error::InvalidDataset(alloc::format!(
                    "{} class names for {num_classes} classes",
                    names.len()
                )));
            }
        }
        if let Some(first) = samples.first() {
            let shape = first.image.shape;
            for (i, s) in samples.iter().enumerate() {
                if s.label >= num_classes {
                    return Err(Error::InvalidDataset(alloc::format!(
                        "sample {i} has label {} >= {num_classes}",
                        s.label
                    )));
                }
                if s.image.shape != shape {
                    return Err(Error::InvalidDataset(alloc::format!(
                        "sample {i} has shape {:?}, expected {shape:?}",
                        s.image.shape
                    )));
                }
                if s.image.pixels.iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
                    return Err(Error::InvalidDataset(alloc::format!(
                        "sample {i} has pixels outside [-1, 1]"
                    )));
                }
            }
        }
        Ok(Self { samples, num_classes, class_names })
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    /// Shape shared by every image, `None` for an empty dataset.
    pub fn image_shape(&self) -> Option<Shape3> {
        self.samples.first().map(|s| s.image.shape)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = alloc::vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}

/// One client's local data. `origin[i]` is the dataset index of sample `i`,
/// or `None` for synthesized (poison) samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Shard {
    pub samples: Vec<LabeledSample>,
    pub origin: Vec<Option<usize>>,
}

impl Shard {
    pub fn from_samples(samples: Vec<LabeledSample>) -> Self {
        let origin = alloc::vec![None; samples.len()];
        Self { samples, origin }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.samples.iter().map(|s| s.label)
    }
}

/// Where a poisoned dataset came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator_id: u64,
    pub iterations: u32,
}

/// Generated samples that all carry the target label.
#[derive(Clone, Debug, PartialEq)]
pub struct PoisonedDataset {
    samples: Vec<LabeledSample>,
    target: usize,
    pub provenance: Provenance,
}

impl PoisonedDataset {
    pub fn new(samples: Vec<LabeledSample>, target: usize, provenance: Provenance) -> Result<Self> {
        if samples.iter().any(|s| s.label != target) {
            return Err(Error::InvalidDataset("poisoned sample without the target label".into()));
        }
        Ok(Self { samples, target, provenance })
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    #[default]
    Iid,
}

/// Knobs of the procedural texture generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextureParams {
    pub noise_std: f64,
    pub phase_jitter: f64,
    pub angle_jitter: f64,
}

impl Default for TextureParams {
    fn default() -> Self {
        Self { noise_std: 0.3, phase_jitter: PI / 4.0, angle_jitter: 0.05 }
    }
}

/// Balanced single-channel dataset of oriented sinusoidal gratings, one
/// orientation/frequency pair per class, with per-sample jitter and noise.
pub fn synth_texture_dataset(
    num_classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
) -> Result<Dataset> {
    synth_texture_dataset_with(num_classes, per_class, size, seed, TextureParams::default())
}

pub fn synth_texture_dataset_with(
    num_classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
    tex: TextureParams,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::config("synthetic dataset needs at least 2 classes"));
    }
    if size < 8 {
        return Err(Error::config("synthetic images must be at least 8x8"));
    }
    let mut rng = rng_from(seed);
    let shape = Shape3::new(1, size, size);
    let mut samples = Vec::with_capacity(num_classes * per_class);
    for label in 0..num_classes {
        let base_angle = PI * label as f64 / num_classes as f64;
        let freq = 2.0 + (label % 2) as f64;
        for _ in 0..per_class {
            let angle = base_angle + tex.angle_jitter * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            let phase = rng.gen_range(-tex.phase_jitter..=tex.phase_jitter);
            let amp = rng.gen_range(0.5..0.8);
            let offset = rng.gen_range(-0.1..0.1);
            let (ca, sa) = (cos(angle), sin(angle));
            let mut pixels = Vec::with_capacity(size * size);
            for y in 0..size {
                for x in 0..size {
                    let u = (x as f64 * ca + y as f64 * sa) / size as f64;
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let v = amp * sin(2.0 * PI * freq * u + phase) + offset + tex.noise_std * noise;
                    pixels.push(v.clamp(-1.0, 1.0));
                }
            }
            samples.push(LabeledSample { image: Image { shape, pixels }, label });
        }
    }
    Dataset::new(samples, num_classes, None)
}

/// Shuffles the dataset and splits it into `n_clients` disjoint shards whose
/// sizes differ by at most one.
pub fn partition_dataset(
    dataset: &Dataset,
    n_clients: usize,
    scheme: PartitionScheme,
    seed: u64,
) -> Result<Vec<Shard>> {
    let PartitionScheme::Iid = scheme;
    if n_clients == 0 || n_clients > dataset.len() {
        return Err(Error::config(alloc::format!(
            "cannot split {} samples across {n_clients} clients",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng_from(seed));
    let base = dataset.len() / n_clients;
    let extra = dataset.len() % n_clients;
    let mut shards = Vec::with_capacity(n_clients);
    let mut start = 0;
    for c in 0..n_clients {
        let len = base + usize::from(c < extra);
        let ids = &order[start..start + len];
        shards.push(Shard {
            samples: ids.iter().map(|&i| dataset.samples[i].clone()).collect(),
            origin: ids.iter().map(|&i| Some(i)).collect(),
        });
        start += len;
    }
    Ok(shards)
}

/// Replaces `round(ratio * len)` samples of `clean` with poison samples and
/// shuffles the result. The shard keeps its size; the evicted clean samples
/// are chosen uniformly at random.
pub fn mix_poison(clean: &Shard, poison: &PoisonedDataset, ratio: f64, seed: u64) -> Result<Shard> {
    mix_poison_evicting(clean, poison, ratio, None, seed)
}

/// Like [`mix_poison`], but clean samples labelled `evict_first` are the
/// first to be replaced; the rest of the eviction quota is filled at random.
pub fn mix_poison_evicting(
    clean: &Shard,
    poison: &PoisonedDataset,
    ratio: f64,
    evict_first: Option<usize>,
    seed: u64,
) -> Result<Shard> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::config(alloc::format!("poison ratio {ratio} outside [0, 1]")));
    }
    let n = clean.len();
    let n_poison = round(ratio * n as f64) as usize;
    if n_poison > 0 && poison.is_empty() {
        return Err(Error::config("poison ratio is positive but the poison set is empty"));
    }
    let mut rng = derived_rng(seed, &[TAG_MIX]);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    // stable partition: preferred evictions move to the back, which is dropped first
    if let Some(label) = evict_first {
        order.sort_by_key(|&i| clean.samples[i].label == label);
    }
    order.truncate(n - n_poison);
    order.sort_unstable();
    let mut entries: Vec<(LabeledSample, Option<usize>)> = order
        .into_iter()
        .map(|i| (clean.samples[i].clone(), clean.origin[i]))
        .collect();
    entries.extend(
        poison.samples().iter().cycle().take(n_poison).map(|s| (s.clone(), None)),
    );
    entries.shuffle(&mut rng);
    let (samples, origin) = entries.into_iter().unzip();
    Ok(Shard { samples, origin })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn tiny_sample(label: usize, v: f64) -> LabeledSample {
        LabeledSample { image: Image::new(Shape3::new(1, 1, 2), vec![v, -v]).unwrap(), label }
    }

    fn poison_set(target: usize, n: usize) -> PoisonedDataset {
        let samples = (0..n).map(|i| tiny_sample(target, i as f64 / n as f64)).collect();
        PoisonedDataset::new(samples, target, Provenance { generator_id: 0, iterations: 1 }).unwrap()
    }

    #[test]
    fn synthetic_dataset_is_balanced_and_deterministic() {
        let a = synth_texture_dataset(4, 50, 16, 11).unwrap();
        assert_eq!(a.len(), 200);
        assert_eq!(a.class_counts(), vec![50; 4]);
        let b = synth_texture_dataset(4, 50, 16, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_texture_dataset(4, 50, 16, 12).unwrap());
        assert!(a.samples().iter().all(|s| s.image.pixels.iter().all(|v| v.abs() <= 1.0)));
    }

    #[test]
    fn synthetic_dataset_rejects_bad_params() {
        assert!(synth_texture_dataset(1, 5, 16, 0).is_err());
        assert!(synth_texture_dataset(3, 5, 4, 0).is_err());
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(vec![tiny_sample(2, 0.0)], 2, None).is_err());
        let wide = LabeledSample {
            image: Image { shape: Shape3::new(1, 1, 2), pixels: vec![1.5, 0.0] },
            label: 0,
        };
        assert!(Dataset::new(vec![wide], 2, None).is_err());
    }

    #[test]
    fn partition_even_split() {
        let ds = synth_texture_dataset(4, 50, 8, 1).unwrap();
        let shards = partition_dataset(&ds, 20, PartitionScheme::Iid, 3).unwrap();
        assert_eq!(shards.len(), 20);
        assert!(shards.iter().all(|s| s.len() == 10));
        let mut ids: Vec<usize> = shards.iter().flat_map(|s| s.origin.iter().map(|o| o.unwrap())).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..200).collect::<Vec<_>>());
    }

    #[test]
    fn partition_single_client_and_errors() {
        let ds = synth_texture_dataset(2, 5, 8, 1).unwrap();
        let shards = partition_dataset(&ds, 1, PartitionScheme::Iid, 0).unwrap();
        let mut ids: Vec<usize> = shards[0].origin.iter().map(|o| o.unwrap()).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());
        assert!(partition_dataset(&ds, 11, PartitionScheme::Iid, 0).is_err());
        assert!(partition_dataset(&ds, 0, PartitionScheme::Iid, 0).is_err());
    }

    #[test]
    fn mix_poison_ratios() {
        let mut clean = Shard::from_samples((0..10).map(|i| tiny_sample(i % 3, 0.1)).collect());
        clean.origin = (0..10).map(Some).collect();
        let poison = poison_set(3, 4);

        let none = mix_poison(&clean, &poison, 0.0, 5).unwrap();
        let mut a: Vec<usize> = none.labels().collect();
        let mut b: Vec<usize> = clean.labels().collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);

        let all = mix_poison(&clean, &poison, 1.0, 5).unwrap();
        assert_eq!(all.len(), 10);
        assert!(all.labels().all(|l| l == 3));

        let half = mix_poison(&clean, &poison, 0.5, 5).unwrap();
        assert_eq!(half.len(), 10);
        assert_eq!(half.labels().filter(|&l| l == 3).count(), 5);
        assert_eq!(half.origin.iter().filter(|o| o.is_none()).count(), 5);

        assert!(mix_poison(&clean, &poison, 1.5, 5).is_err());
        assert!(mix_poison(&clean, &poison, -0.1, 5).is_err());
        let empty = PoisonedDataset::new(vec![], 3, poison.provenance).unwrap();
        assert!(mix_poison(&clean, &empty, 0.3, 5).is_err());
        assert_eq!(mix_poison(&clean, &poison, 0.5, 5).unwrap(), half);
    }

    #[test]
    fn eviction_prefers_the_given_label() {
        let clean = Shard::from_samples((0..12).map(|i| tiny_sample(i % 3, 0.1)).collect());
        let poison = poison_set(3, 4);
        // four samples carry label 0; replacing three removes only those
        let mixed = mix_poison_evicting(&clean, &poison, 0.25, Some(0), 9).unwrap();
        assert_eq!(mixed.labels().filter(|&l| l == 0).count(), 1);
        assert_eq!(mixed.labels().filter(|&l| l == 3).count(), 3);
        let mixed = mix_poison_evicting(&clean, &poison, 0.5, Some(0), 9).unwrap();
        assert_eq!(mixed.labels().filter(|&l| l == 0).count(), 0);
        assert_eq!(mixed.labels().filter(|&l| l == 1).count() + mixed.labels().filter(|&l| l == 2).count(), 6);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn mix_preserves_cardinality(n in 1usize..30, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
                let clean = Shard::from_samples((0..n).map(|i| tiny_sample(i % 2, 0.0)).collect());
                let out = mix_poison(&clean, &poison_set(2, 3), ratio, seed).unwrap();
                prop_assert_eq!(out.len(), n);
            }

            #[test]
            fn partition_is_a_partition(n in 1usize..60, clients in 1usize..20, seed in any::<u64>()) {
                prop_assume!(clients <= n);
                let samples = (0..n).map(|i| tiny_sample(i % 2, 0.0)).collect();
                let ds = Dataset::new(samples, 2, None).unwrap();
                let shards = partition_dataset(&ds, clients, PartitionScheme::Iid, seed).unwrap();
                let mut ids: Vec<usize> = shards.iter().flat_map(|s| s.origin.iter().map(|o| o.unwrap())).collect();
                ids.sort_unstable();
                prop_assert_eq!(ids, (0..n).collect::<Vec<_>>());
                let sizes: Vec<usize> = shards.iter().map(Shard::len).collect();
                prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            }
        }
    }
}
