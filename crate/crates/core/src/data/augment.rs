use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

/// Random erasing followed by per-channel colour jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub erase_prob: f64,
    /// Erased area as a fraction of the image.
    pub erase_area: (f64, f64),
    /// Height / width ratio of the erased rectangle.
    pub erase_aspect: (f64, f64),
    pub gain: (f32, f32),
    pub offset: (f32, f32),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            erase_prob: 0.5,
            erase_area: (0.02, 0.2),
            erase_aspect: (0.3, 3.3),
            gain: (0.8, 1.2),
            offset: (-0.1, 0.1),
        }
    }
}

impl AugmentConfig {
    /// Leaves every image untouched.
    pub fn identity() -> Self {
        AugmentConfig {
            erase_prob: 0.0,
            gain: (1.0, 1.0),
            offset: (0.0, 0.0),
            ..Self::default()
        }
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f32, f32)) -> f32 {
    if lo < hi {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Training-time augmentation of one `[C,H,W]` image.
pub fn augment<R: Rng>(img: &Tensor<f32>, cfg: &AugmentConfig, rng: &mut R) -> Tensor<f32> {
    let mut out = img.clone();
    let (c, h, w) = match img.shape() {
        &[c, h, w] => (c, h, w),
        other => panic!("augment expects [C,H,W], got {other:?}"),
    };
    let hw = h * w;

    if cfg.erase_prob > 0.0 && rng.gen_bool(cfg.erase_prob.min(1.0)) {
        let means: Vec<f32> = img
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().sum::<f32>() / hw as f32)
            .collect();
        for _ in 0..10 {
            let area = rng.gen_range(cfg.erase_area.0..=cfg.erase_area.1) * hw as f64;
            let aspect = rng.gen_range(cfg.erase_aspect.0..=cfg.erase_aspect.1);
            let eh = (area * aspect).sqrt().round() as usize;
            let ew = (area / aspect).sqrt().round() as usize;
            if eh == 0 || ew == 0 || eh >= h || ew >= w {
                continue;
            }
            let y0 = rng.gen_range(0..=h - eh);
            let x0 = rng.gen_range(0..=w - ew);
            let data = out.data_mut();
            for (ch, &m) in means.iter().enumerate() {
                for y in y0..y0 + eh {
                    data[ch * hw + y * w + x0..ch * hw + y * w + x0 + ew].fill(m);
                }
            }
            break;
        }
    }

    let identity_jitter = cfg.gain == (1.0, 1.0) && cfg.offset == (0.0, 0.0);
    if !identity_jitter {
        let data = out.data_mut();
        for ch in 0..c {
            let gain = uniform(rng, cfg.gain);
            let offset = uniform(rng, cfg.offset);
            for v in &mut data[ch * hw..(ch + 1) * hw] {
                *v = (*v * gain + offset).clamp(0.0, 1.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([3, 16, 16], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn identity_config_is_a_no_op() {
        let img = image(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            assert_eq!(augment(&img, &AugmentConfig::identity(), &mut rng), img);
        }
    }

    #[test]
    fn stays_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = AugmentConfig::default();
        let imgs: Vec<_> = (0..10).map(image).collect();
        for i in 0..10_000 {
            let out = augment(&imgs[i % 10], &cfg, &mut rng);
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn erased_region_holds_the_fill() {
        let img = image(4);
        let cfg = AugmentConfig {
            erase_prob: 1.0,
            gain: (1.0, 1.0),
            offset: (0.0, 0.0),
            ..AugmentConfig::default()
        };
        let means: Vec<f32> = img.data().chunks(256).map(|p| p.iter().sum::<f32>() / 256.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let out = augment(&img, &cfg, &mut rng);
            let mut erased = 0;
            for (k, (&o, &i)) in out.data().iter().zip(img.data()).enumerate() {
                if o != i {
                    assert_eq!(o, means[k / 256]);
                    erased += 1;
                }
            }
            assert!(erased > 0);
            assert!(erased <= (0.2f64 * 256.0 * 3.0).ceil() as usize + 3 * 16);
        }
    }
}
