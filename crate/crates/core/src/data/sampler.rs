use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::LabeledImage;
use crate::error::{invalid, Result};

/// Identity-balanced batch: `p` distinct identities with `k` images each,
/// returned as shuffled indices into `split`.
pub fn pk_sample<R: Rng>(split: &[LabeledImage], p: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if p == 0 || k == 0 {
        return Err(invalid!("pk_sample: P and K must be positive"));
    }
    let mut by_identity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, im) in split.iter().enumerate() {
        by_identity.entry(im.identity).or_default().push(i);
    }
    let eligible: Vec<&Vec<usize>> = by_identity.values().filter(|v| v.len() >= k).collect();
    if eligible.len() < p {
        return Err(invalid!(
            "pk_sample: need {p} identities with at least {k} images, found {}",
            eligible.len()
        ));
    }
    let mut batch = Vec::with_capacity(p * k);
    for members in eligible.choose_multiple(rng, p) {
        batch.extend(members.choose_multiple(rng, k).copied());
    }
    batch.shuffle(rng);
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn split(ids: usize, per: usize) -> Vec<LabeledImage> {
        (0..ids * per)
            .map(|i| LabeledImage {
                name: format!("im{i}"),
                pixels: Tensor::zeros([3, 2, 2]),
                identity: i / per,
                orientation: 0.0,
            })
            .collect()
    }

    #[test]
    fn batches_are_balanced() {
        let s = split(20, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let b = pk_sample(&s, 8, 4, &mut rng).unwrap();
            assert_eq!(b.len(), 32);
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for &i in &b {
                *counts.entry(s[i].identity).or_default() += 1;
            }
            assert_eq!(counts.len(), 8);
            assert!(counts.values().all(|&c| c == 4));
            let mut uniq = b.clone();
            uniq.sort_unstable();
            uniq.dedup();
            assert_eq!(uniq.len(), 32);
        }
    }

    #[test]
    fn every_identity_is_drawn() {
        let s = split(20, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut seen = [false; 20];
        for _ in 0..200 {
            for i in pk_sample(&s, 8, 4, &mut rng).unwrap() {
                seen[s[i].identity] = true;
            }
        }
        assert!(seen.iter().all(|&x| x));
    }

    #[test]
    fn insufficient_data_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(pk_sample(&split(7, 4), 8, 4, &mut rng).is_err());
        assert!(pk_sample(&split(10, 3), 8, 4, &mut rng).is_err());
        assert!(pk_sample(&split(10, 4), 0, 4, &mut rng).is_err());
    }
}
