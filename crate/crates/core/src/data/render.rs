//! Procedural top-down "vehicle" renderer.
//!
//! Every identity is an elongated body with a dark windscreen bar near its
//! front end and two or three coloured patches at fixed body-frame slots.
//! Body and patch colours come from small shared palettes, so many
//! identities share colours and differ in where their patches sit relative
//! to the body axis.

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::data::SyntheticSpec;
use crate::error::{invalid, Result};

type Rgb = [f32; 3];

pub const BACKGROUND: Rgb = [0.30, 0.32, 0.30];
const WINDSCREEN: Rgb = [0.08, 0.10, 0.16];

const BODY_PALETTE: [Rgb; 5] = [
    [0.88, 0.88, 0.86],
    [0.78, 0.16, 0.14],
    [0.18, 0.30, 0.78],
    [0.86, 0.76, 0.20],
    [0.92, 0.50, 0.12],
];

const PATCH_PALETTE: [Rgb; 4] = [
    [0.15, 0.80, 0.30],
    [0.85, 0.20, 0.75],
    [0.15, 0.75, 0.85],
    [0.02, 0.02, 0.02],
];

/// Body half-extents in normalized image units (x along the body axis).
const HALF_LENGTH: f64 = 0.60;
const HALF_WIDTH: f64 = 0.26;
/// Windscreen bar span along the body axis.
const WINDSCREEN_X: (f64, f64) = (0.29, 0.41);
/// Patch slot centres in the body frame and the patch half-size.
const SLOTS: [(f64, f64); 6] = [
    (-0.44, -0.13),
    (-0.44, 0.13),
    (-0.18, -0.13),
    (-0.18, 0.13),
    (0.08, -0.13),
    (0.08, 0.13),
];
const PATCH_HALF: f64 = 0.09;

const SUPERSAMPLE: usize = 2;

/// Appearance of one identity in its own body frame.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityLook {
    pub body: Rgb,
    /// `(slot index, colour)` per patch.
    pub patches: Vec<(usize, Rgb)>,
}

impl IdentityLook {
    pub fn from_seed(identity_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(identity_seed);
        let body_idx = rng.gen_range(0..BODY_PALETTE.len());
        let count = rng.gen_range(2..=3);
        let mut slots: Vec<usize> = (0..SLOTS.len()).collect();
        slots.shuffle(&mut rng);
        let mut patches: Vec<(usize, Rgb)> = slots[..count]
            .iter()
            .map(|&s| (s, PATCH_PALETTE[rng.gen_range(0..PATCH_PALETTE.len())]))
            .collect();
        patches.sort_by_key(|&(s, _)| s);
        IdentityLook {
            body: BODY_PALETTE[body_idx],
            patches,
        }
    }

    /// Colour at body-frame point `(x, y)`, or `None` off the body.
    fn colour_at(&self, x: f64, y: f64) -> Option<Rgb> {
        if x.abs() > HALF_LENGTH || y.abs() > HALF_WIDTH {
            return None;
        }
        if x >= WINDSCREEN_X.0 && x <= WINDSCREEN_X.1 && y.abs() <= HALF_WIDTH - 0.03 {
            return Some(WINDSCREEN);
        }
        for &(slot, colour) in &self.patches {
            let (cx, cy) = SLOTS[slot];
            if (x - cx).abs() <= PATCH_HALF && (y - cy).abs() <= PATCH_HALF {
                return Some(colour);
            }
        }
        Some(self.body)
    }
}

/// Placement of one rendering: translation in normalized units, isotropic
/// scale, and the seed of its pixel noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
    pub noise_seed: u64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        dx: 0.0,
        dy: 0.0,
        scale: 1.0,
        noise_seed: 0,
    };
}

/// Renders identity `identity_seed` rotated by `orientation` radians into a
/// `[3,S,S]` image in [0,1].
///
/// Rotation uses image axes (x right, y down): a body-frame point `(x, y)`
/// lands at `(x cos φ - y sin φ, x sin φ + y cos φ)` before scaling and
/// translation.
pub fn render_identity(identity_seed: u64, orientation: f64, jitter: Jitter, spec: &SyntheticSpec) -> Result<Tensor<f32>> {
    if !(0.0..TAU).contains(&orientation) {
        return Err(invalid!("render_identity: orientation {orientation} outside [0, 2π)"));
    }
    let look = IdentityLook::from_seed(identity_seed);
    let s = spec.image_size;
    let hi = s * SUPERSAMPLE;
    let (sin, cos) = orientation.sin_cos();
    let inv_scale = 1.0 / jitter.scale;

    let mut sum = vec![[0.0f64; 3]; s * s];
    for py in 0..hi {
        let v = (py as f64 + 0.5) / hi as f64 * 2.0 - 1.0 - jitter.dy;
        for px in 0..hi {
            let u = (px as f64 + 0.5) / hi as f64 * 2.0 - 1.0 - jitter.dx;
            // Inverse rotation back into the body frame.
            let bx = (cos * u + sin * v) * inv_scale;
            let by = (-sin * u + cos * v) * inv_scale;
            let c = look.colour_at(bx, by).unwrap_or(BACKGROUND);
            let acc = &mut sum[(py / SUPERSAMPLE) * s + px / SUPERSAMPLE];
            for ch in 0..3 {
                acc[ch] += c[ch] as f64;
            }
        }
    }

    let norm = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(jitter.noise_seed);
    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("sigma"));
    let mut data = vec![0.0f32; 3 * s * s];
    for ch in 0..3 {
        for (i, acc) in sum.iter().enumerate() {
            let mut v = acc[ch] * norm;
            if let Some(n) = &noise {
                v += n.sample(&mut noise_rng);
            }
            data[ch * s * s + i] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Tensor::new(vec![3, s, s], data)
}
