//! Synthetic re-identification dataset: rendering, splits, augmentation,
//! identity-balanced batch sampling, and the on-disk format.

mod augment;
mod io;
mod render;
mod sampler;

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{invalid, Result};

pub use augment::{augment, AugmentConfig};
pub use io::{load_dataset, save_dataset, read_ppm, write_ppm, DatasetMeta, ImageRecord};
pub use render::{render_identity, IdentityLook, Jitter, BACKGROUND};
pub use sampler::pk_sample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Total identities; the last `test_identities` of them form the test split.
    pub num_identities: usize,
    pub test_identities: usize,
    /// Renderings per training identity.
    pub images_per_identity: usize,
    pub image_size: usize,
    /// Orientation range in radians, `[min, max)`.
    pub rotation_range: (f64, f64),
    /// Maximum translation as a fraction of the half-extent.
    pub translation_jitter: f64,
    pub scale_jitter: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_identities: 96,
            test_identities: 32,
            images_per_identity: 20,
            image_size: 64,
            rotation_range: (0.0, TAU),
            translation_jitter: 0.08,
            scale_jitter: (0.9, 1.1),
            noise_sigma: 0.02,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn train_identities(&self) -> usize {
        self.num_identities.saturating_sub(self.test_identities)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images_per_identity < 3 {
            return Err(invalid!("synthetic spec: images_per_identity must be >= 3"));
        }
        if self.test_identities < 2 || self.train_identities() < 2 {
            return Err(invalid!(
                "synthetic spec: {} identities cannot be split into {} test and at least 2 train identities",
                self.num_identities,
                self.test_identities
            ));
        }
        if self.image_size < 8 {
            return Err(invalid!("synthetic spec: image_size must be >= 8"));
        }
        let (lo, hi) = self.rotation_range;
        if !(lo >= 0.0 && hi <= TAU && lo < hi) {
            return Err(invalid!("synthetic spec: rotation_range must satisfy 0 <= min < max <= 2π"));
        }
        let (s0, s1) = self.scale_jitter;
        if !(s0 > 0.0 && s0 <= s1) {
            return Err(invalid!("synthetic spec: scale_jitter must satisfy 0 < min <= max"));
        }
        if !(0.0..0.5).contains(&self.translation_jitter) {
            return Err(invalid!("synthetic spec: translation_jitter must be in [0, 0.5)"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid!("synthetic spec: noise_sigma must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// File stem, unique within a dataset.
    pub name: String,
    /// `[3,S,S]`, values in [0,1].
    pub pixels: Tensor<f32>,
    pub identity: usize,
    /// Ground-truth orientation in radians; metadata only.
    pub orientation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub train: Vec<LabeledImage>,
    pub query: Vec<LabeledImage>,
    pub gallery: Vec<LabeledImage>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[LabeledImage] {
        match split {
            Split::Train => &self.train,
            Split::Query => &self.query,
            Split::Gallery => &self.gallery,
        }
    }

    /// Number of distinct training identities (the classifier width).
    pub fn num_train_classes(&self) -> usize {
        self.train.iter().map(|im| im.identity + 1).max().unwrap_or(0)
    }
}

/// Stacks `[3,S,S]` images into `[N,3,S,S]`.
pub fn stack(images: &[&LabeledImage]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| invalid!("stack: no images"))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.pixels.shape());
    let mut data = Vec::with_capacity(images.len() * first.pixels.numel());
    for im in images {
        if im.pixels.shape() != first.pixels.shape() {
            return Err(invalid!("stack: image {} has shape {:?}", im.name, im.pixels.shape()));
        }
        data.extend_from_slice(im.pixels.data());
    }
    Tensor::new(shape, data)
}

/// SplitMix64 finaliser, used to derive independent per-image seeds.
pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    mix(mix(mix(seed) ^ a) ^ b)
}

/// Rounds to the 8-bit grid used on disk, so in-memory and reloaded
/// datasets hold identical pixels.
pub(crate) fn quantize(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| (v * 255.0).round().clamp(0.0, 255.0) / 255.0)
}

/// Minimum mean absolute pixel difference between renders of any two
/// identities at equal orientation.
pub const MIN_IDENTITY_SEPARATION: f64 = 0.01;
/// Orientations at which separation is checked during generation.
pub const SEPARATION_PROBES: [f64; 4] = [0.0, 1.0, 2.5, 4.0];

fn mean_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.numel() as f64
}

/// Identity seeds for all identities, re-drawn until every pair of
/// noiseless, unjittered renders is separated at each probe orientation.
fn identity_seeds(spec: &SyntheticSpec) -> Result<Vec<u64>> {
    let quiet = SyntheticSpec {
        noise_sigma: 0.0,
        ..spec.clone()
    };
    let mut seeds: Vec<u64> = Vec::with_capacity(spec.num_identities);
    let mut renders: Vec<Vec<Tensor<f32>>> = Vec::with_capacity(spec.num_identities);
    let mut counter = 0u64;
    let budget = 10_000 + 100 * spec.num_identities as u64;
    while seeds.len() < spec.num_identities {
        if counter == budget {
            return Err(invalid!(
                "synthetic spec: found only {} of {} separable identities",
                seeds.len(),
                spec.num_identities
            ));
        }
        let s = stream_seed(spec.seed, u64::MAX, counter);
        counter += 1;
        let imgs = SEPARATION_PROBES
            .iter()
            .map(|&o| render_identity(s, o, Jitter::NONE, &quiet))
            .collect::<Result<Vec<_>>>()?;
        let separated = renders
            .iter()
            .all(|other| other.iter().zip(&imgs).all(|(a, b)| mean_abs_diff(a, b) > MIN_IDENTITY_SEPARATION));
        if separated {
            renders.push(imgs);
            seeds.push(s);
        }
    }
    Ok(seeds)
}

struct Job {
    identity: usize,
    index: usize,
    split: Split,
}

/// Renders train, query and gallery splits.
///
/// Train and test identities are disjoint. Each test identity contributes
/// exactly one query and one gallery rendering at independent orientations,
/// so every query has a single true match and the other gallery images are
/// distractors.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let seeds = identity_seeds(spec)?;
    let n_train = spec.train_identities();
    let mut jobs = Vec::new();
    for identity in 0..spec.num_identities {
        if identity < n_train {
            for index in 0..spec.images_per_identity {
                jobs.push(Job { identity, index, split: Split::Train });
            }
        } else {
            jobs.push(Job { identity, index: 0, split: Split::Query });
            jobs.push(Job { identity, index: 1, split: Split::Gallery });
        }
    }

    let rendered: Vec<(Split, LabeledImage)> = jobs
        .par_iter()
        .map(|job| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, job.identity as u64, job.index as u64));
            let (lo, hi) = spec.rotation_range;
            let orientation = rng.gen_range(lo..hi);
            let t = spec.translation_jitter;
            let jitter = Jitter {
                dx: if t > 0.0 { rng.gen_range(-t..=t) } else { 0.0 },
                dy: if t > 0.0 { rng.gen_range(-t..=t) } else { 0.0 },
                scale: rng.gen_range(spec.scale_jitter.0..=spec.scale_jitter.1),
                noise_seed: rng.gen(),
            };
            let pixels = render_identity(seeds[job.identity], orientation, jitter, spec)?;
            Ok((
                job.split,
                LabeledImage {
                    name: format!("{}_{:04}_{:02}", job.split.as_str(), job.identity, job.index),
                    pixels: quantize(&pixels),
                    identity: job.identity,
                    orientation,
                },
            ))
        })
        .collect::<Result<_>>()?;

    let mut ds = Dataset {
        spec: spec.clone(),
        train: Vec::new(),
        query: Vec::new(),
        gallery: Vec::new(),
    };
    for (split, im) in rendered {
        match split {
            Split::Train => ds.train.push(im),
            Split::Query => ds.query.push(im),
            Split::Gallery => ds.gallery.push(im),
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            num_identities: 12,
            test_identities: 5,
            images_per_identity: 4,
            image_size: 16,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn split_protocol() {
        let ds = generate_dataset(&spec()).unwrap();
        assert_eq!(ds.train.len(), 7 * 4);
        assert_eq!(ds.query.len(), 5);
        assert_eq!(ds.gallery.len(), 5);
        let train: BTreeSet<usize> = ds.train.iter().map(|im| im.identity).collect();
        let test: BTreeSet<usize> = ds.query.iter().map(|im| im.identity).collect();
        assert!(train.is_disjoint(&test));
        assert_eq!(ds.num_train_classes(), 7);
        for q in &ds.query {
            let matches: Vec<_> = ds.gallery.iter().filter(|g| g.identity == q.identity).collect();
            assert_eq!(matches.len(), 1);
            assert_ne!(matches[0].orientation, q.orientation);
        }
        let all = ds.train.iter().chain(&ds.query).chain(&ds.gallery);
        for im in all {
            assert!((0.0..TAU).contains(&im.orientation));
            assert!(im.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_dataset(&spec()).unwrap(), generate_dataset(&spec()).unwrap());
        let other = SyntheticSpec { seed: 8, ..spec() };
        assert_ne!(generate_dataset(&spec()).unwrap().train, generate_dataset(&other).unwrap().train);
    }

    #[test]
    fn identities_are_separated() {
        let s = SyntheticSpec {
            image_size: 32,
            noise_sigma: 0.0,
            ..SyntheticSpec::default()
        };
        let seeds = identity_seeds(&s).unwrap();
        for orientation in SEPARATION_PROBES {
            let imgs: Vec<_> = seeds
                .iter()
                .map(|&id| render_identity(id, orientation, Jitter::NONE, &s).unwrap())
                .collect();
            for i in 0..imgs.len() {
                for j in i + 1..imgs.len() {
                    let d = mean_abs_diff(&imgs[i], &imgs[j]);
                    assert!(d > MIN_IDENTITY_SEPARATION, "{i} vs {j} at {orientation}: {d}");
                }
            }
        }
    }

    #[test]
    fn bad_specs_rejected() {
        let bad = [
            SyntheticSpec { images_per_identity: 2, ..spec() },
            SyntheticSpec { num_identities: 6, test_identities: 5, ..spec() },
            SyntheticSpec { rotation_range: (1.0, 1.0), ..spec() },
            SyntheticSpec { scale_jitter: (1.2, 1.0), ..spec() },
            SyntheticSpec { translation_jitter: 0.5, ..spec() },
        ];
        for s in bad {
            assert!(generate_dataset(&s).is_err());
        }
    }

    #[test]
    fn stack_checks_shapes() {
        let ds = generate_dataset(&spec()).unwrap();
        let t = stack(&[&ds.train[0], &ds.train[1]]).unwrap();
        assert_eq!(t.shape(), [2, 3, 16, 16]);
        assert!(stack(&[]).is_err());
    }
}
