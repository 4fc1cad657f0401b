//! Self-alignment module: a localisation network regresses a 2×3 affine
//! matrix per sample, a grid generator maps every target location through
//! it, and a bilinear sampler reads the source feature map at the mapped
//! coordinates.
//!
//! Coordinates are normalized to [-1, 1] on each spatial axis with -1 at
//! the first pixel centre and +1 at the last, so the identity transform
//! samples pixel centres exactly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Group, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::init;

/// Row-major `[θ11, θ12, θ13, θ21, θ22, θ23]`.
pub const IDENTITY_THETA: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// Per-sample affine parameters, detached from any tape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTheta(pub Vec<[f32; 6]>);

impl AffineTheta {
    pub fn identity(n: usize) -> Self {
        AffineTheta(vec![IDENTITY_THETA.map(|v| v as f32); n])
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let [_, six] = t.dims2("affine_theta")?;
        if six != 6 {
            return Err(invalid!("affine_theta: expected [N,6], got {:?}", t.shape()));
        }
        Ok(AffineTheta(
            t.data()
                .chunks_exact(6)
                .map(|r| std::array::from_fn(|i| r[i].as_f64() as f32))
                .collect(),
        ))
    }

    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        Tensor::new(
            vec![self.0.len(), 6],
            self.0.iter().flatten().map(|&v| T::lit(v as f64)).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Normalized coordinate of pixel centre `i` on an axis of `extent` pixels.
pub fn target_coord<T: Real>(i: usize, extent: usize) -> T {
    T::lit(-1.0) + T::lit(2.0) * T::lit(i as f64) / T::lit((extent - 1) as f64)
}

/// Maps a normalized coordinate to a pixel position, snapping values within
/// a few ulps of a pixel centre onto it.
#[inline]
fn to_pixel<T: Real>(v: T, extent: usize) -> T {
    let scale = T::lit((extent - 1) as f64) * T::lit(0.5);
    let p = (v + T::one()) * scale;
    let r = p.round();
    let tol = T::epsilon() * T::lit(8.0 * extent as f64);
    if (p - r).abs() <= tol {
        r
    } else {
        p
    }
}

/// Grid generator: `[N,6]` parameters to `[N,h,w,2]` source coordinates,
/// `(x_s, y_s) = θ · (x_t, y_t, 1)` over the regular target grid.
pub fn affine_grid<'t, T: Real>(theta: &Var<'t, T>, h_out: usize, w_out: usize) -> Result<Var<'t, T>> {
    if h_out < 2 || w_out < 2 {
        return Err(invalid!("affine_grid: output extents must be >= 2, got {h_out}x{w_out}"));
    }
    let th = theta.value();
    let [n, six] = th.dims2("affine_grid")?;
    if six != 6 {
        return Err(Error::InvalidShape {
            op: "affine_grid",
            reason: format!("expected [N,6] parameters, got {:?}", th.shape()),
        });
    }
    let xs: Vec<T> = (0..w_out).map(|j| target_coord(j, w_out)).collect();
    let ys: Vec<T> = (0..h_out).map(|i| target_coord(i, h_out)).collect();
    let mut out = Vec::with_capacity(n * h_out * w_out * 2);
    for t in th.data().chunks_exact(6) {
        for &y in &ys {
            for &x in &xs {
                out.push(t[0] * x + t[1] * y + t[2]);
                out.push(t[3] * x + t[4] * y + t[5]);
            }
        }
    }
    Ok(theta.tape().record(
        "affine_grid",
        Tensor::from_parts(vec![n, h_out, w_out, 2], out),
        &[*theta],
        Box::new(move |ctx| {
            let g = ctx.grad.data();
            let mut d = vec![T::zero(); n * 6];
            for (b, dt) in d.chunks_exact_mut(6).enumerate() {
                let gb = &g[b * h_out * w_out * 2..][..h_out * w_out * 2];
                for (i, &y) in ys.iter().enumerate() {
                    for (j, &x) in xs.iter().enumerate() {
                        let k = (i * w_out + j) * 2;
                        let (gx, gy) = (gb[k], gb[k + 1]);
                        dt[0] += gx * x;
                        dt[1] += gx * y;
                        dt[2] += gx;
                        dt[3] += gy * x;
                        dt[4] += gy * y;
                        dt[5] += gy;
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![n, 6], d))]
        }),
    ))
}

/// Bilinear taps for one sample point: up to four `(flat index, weight)`
/// pairs plus the pixel-space position, with out-of-range taps dropped.
struct Taps<T> {
    x0: isize,
    y0: isize,
    fx: T,
    fy: T,
}

impl<T: Real> Taps<T> {
    fn new(gx: T, gy: T, h: usize, w: usize) -> Self {
        let px = to_pixel(gx, w);
        let py = to_pixel(gy, h);
        let x0 = px.floor();
        let y0 = py.floor();
        Taps {
            x0: x0.to_isize().unwrap_or(isize::MIN / 2),
            y0: y0.to_isize().unwrap_or(isize::MIN / 2),
            fx: px - x0,
            fy: py - y0,
        }
    }

    #[inline]
    fn index(y: isize, x: isize, h: usize, w: usize) -> Option<usize> {
        (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w).then(|| y as usize * w + x as usize)
    }

    /// `[(idx, weight, d weight/d px, d weight/d py)]` for the four corners.
    fn corners(&self, h: usize, w: usize) -> [(Option<usize>, T, T, T); 4] {
        let one = T::one();
        let (fx, fy) = (self.fx, self.fy);
        let (x0, y0) = (self.x0, self.y0);
        [
            (Self::index(y0, x0, h, w), (one - fx) * (one - fy), -(one - fy), -(one - fx)),
            (Self::index(y0, x0 + 1, h, w), fx * (one - fy), one - fy, -fx),
            (Self::index(y0 + 1, x0, h, w), (one - fx) * fy, -fy, one - fx),
            (Self::index(y0 + 1, x0 + 1, h, w), fx * fy, fy, fx),
        ]
    }
}

/// Differentiable bilinear sampling of `[N,C,H,W]` at `[N,h,w,2]` grid
/// coordinates; taps outside the source contribute zero.
pub fn grid_sample<'t, T: Real>(input: &Var<'t, T>, grid: &Var<'t, T>) -> Result<Var<'t, T>> {
    let (u, gr) = (input.value(), grid.value());
    let [n, c, h, w] = u.dims4("bilinear_sample")?;
    let [gn, oh, ow, two] = gr.dims4("bilinear_sample")?;
    if gn != n || two != 2 {
        return Err(Error::ShapeMismatch {
            op: "bilinear_sample",
            lhs: u.shape().to_vec(),
            rhs: gr.shape().to_vec(),
        });
    }
    if h < 2 || w < 2 {
        return Err(invalid!("bilinear_sample: source extents must be >= 2"));
    }
    let (hw, ohw) = (h * w, oh * ow);
    let mut out = vec![T::zero(); n * c * ohw];
    for b in 0..n {
        let gb = &gr.data()[b * ohw * 2..][..ohw * 2];
        for (p, xy) in gb.chunks_exact(2).enumerate() {
            let corners = Taps::new(xy[0], xy[1], h, w).corners(h, w);
            for ch in 0..c {
                let plane = &u.data()[(b * c + ch) * hw..][..hw];
                let mut acc = T::zero();
                for &(idx, wt, _, _) in &corners {
                    if let Some(i) = idx {
                        acc += wt * plane[i];
                    }
                }
                out[(b * c + ch) * ohw + p] = acc;
            }
        }
    }
    Ok(input.tape().record(
        "bilinear_sample",
        Tensor::from_parts(vec![n, c, oh, ow], out),
        &[*input, *grid],
        Box::new(move |ctx| {
            let (u, gr) = (&ctx.inputs[0], &ctx.inputs[1]);
            let g = ctx.grad.data();
            let mut du = ctx.needs[0].then(|| vec![T::zero(); n * c * hw]);
            let mut dg = ctx.needs[1].then(|| vec![T::zero(); n * ohw * 2]);
            let sx = T::lit((w - 1) as f64) * T::lit(0.5);
            let sy = T::lit((h - 1) as f64) * T::lit(0.5);
            for b in 0..n {
                let gb = &gr.data()[b * ohw * 2..][..ohw * 2];
                for (p, xy) in gb.chunks_exact(2).enumerate() {
                    let corners = Taps::new(xy[0], xy[1], h, w).corners(h, w);
                    let (mut dpx, mut dpy) = (T::zero(), T::zero());
                    for ch in 0..c {
                        let go = g[(b * c + ch) * ohw + p];
                        if go == T::zero() {
                            continue;
                        }
                        let base = (b * c + ch) * hw;
                        for &(idx, wt, dwx, dwy) in &corners {
                            let Some(i) = idx else { continue };
                            if let Some(du) = du.as_mut() {
                                du[base + i] += go * wt;
                            }
                            let v = u.data()[base + i];
                            dpx += go * v * dwx;
                            dpy += go * v * dwy;
                        }
                    }
                    if let Some(dg) = dg.as_mut() {
                        dg[(b * ohw + p) * 2] = dpx * sx;
                        dg[(b * ohw + p) * 2 + 1] = dpy * sy;
                    }
                }
            }
            vec![
                du.map(|d| Tensor::from_parts(vec![n, c, h, w], d)),
                dg.map(|d| Tensor::from_parts(vec![n, oh, ow, 2], d)),
            ]
        }),
    ))
}

/// Layer widths of the localisation network.
pub const LOC_CONV1: usize = 16;
pub const LOC_CONV2: usize = 32;
pub const LOC_HIDDEN: usize = 64;

const LOC_KERNEL: usize = 5;

/// Registers the localisation parameters under `prefix`. The final layer
/// starts at zero weight and identity bias so the module begins as the
/// identity map.
pub fn init_localisation<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    prefix: &str,
    in_channels: usize,
    rng: &mut R,
) -> Result<()> {
    let k = LOC_KERNEL;
    let p = |s: &str| format!("{prefix}.{s}");
    store.insert(p("conv1.weight"), Group::Stn, init::he_conv(rng, LOC_CONV1, in_channels, k, k))?;
    store.insert(p("conv1.bias"), Group::Stn, Tensor::zeros([LOC_CONV1]))?;
    store.insert(p("conv2.weight"), Group::Stn, init::he_conv(rng, LOC_CONV2, LOC_CONV1, k, k))?;
    store.insert(p("conv2.bias"), Group::Stn, Tensor::zeros([LOC_CONV2]))?;
    store.insert(p("fc1.weight"), Group::Stn, init::he_linear(rng, LOC_CONV2, LOC_HIDDEN))?;
    store.insert(p("fc1.bias"), Group::Stn, Tensor::zeros([LOC_HIDDEN]))?;
    store.insert(p("fc2.weight"), Group::Stn, Tensor::zeros([LOC_HIDDEN, 6]))?;
    store.insert(
        p("fc2.bias"),
        Group::Stn,
        Tensor::new([6], IDENTITY_THETA.iter().map(|&v| T::lit(v)).collect())?,
    )?;
    Ok(())
}

/// Localisation network: `[N,C,H,W]` features to `[N,6]` affine parameters.
pub fn localize<'t, T: Real>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    u: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    let pv = |s: &str| tape.parameter(store, &format!("{prefix}.{s}"));
    let pad = LOC_KERNEL / 2;
    let x = u.conv2d(&pv("conv1.weight")?, &pv("conv1.bias")?, 2, pad)?.relu();
    let x = x.conv2d(&pv("conv2.weight")?, &pv("conv2.bias")?, 2, pad)?.relu();
    let x = x.global_avg_pool()?;
    let x = x.linear(&pv("fc1.weight")?, &pv("fc1.bias")?)?.relu();
    x.linear(&pv("fc2.weight")?, &pv("fc2.bias")?)
}

/// Aligns `u` with parameters regressed from `u` itself. The output keeps
/// the input's spatial extent.
pub fn stn_forward<'t, T: Real>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    u: &Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let theta = localize(tape, store, prefix, u)?;
    let v = warp(u, &theta)?;
    Ok((v, theta))
}

/// Resamples `u` through `theta` at its own spatial extent.
pub fn warp<'t, T: Real>(u: &Var<'t, T>, theta: &Var<'t, T>) -> Result<Var<'t, T>> {
    let [_, _, h, w] = u.value().dims4("stn")?;
    let grid = affine_grid(theta, h, w)?;
    grid_sample(u, &grid)
}

/// Applies per-sample affine parameters to images outside any training tape.
pub fn warp_images(images: &Tensor<f32>, theta: &AffineTheta) -> Result<Tensor<f32>> {
    let tape = Tape::new();
    let u = tape.constant(images.clone());
    let t = tape.constant(theta.to_tensor()?);
    let v = warp(&u, &t)?;
    let out = v.value();
    Ok((*out).clone())
}

/// Plain (untaped) bilinear warp of `[N,C,H,W]` images at their own extent.
/// Taps outside the source read `fill[c]` instead of zero, so resampled
/// images keep their background; with identity parameters the output
/// equals the input bit for bit.
pub fn warp_images_filled(images: &Tensor<f32>, theta: &AffineTheta, fill: &[Vec<f32>]) -> Result<Tensor<f32>> {
    let [n, c, h, w] = images.dims4("warp_images_filled")?;
    if theta.len() != n || fill.len() != n || fill.iter().any(|f| f.len() != c) {
        return Err(invalid!("warp_images_filled: parameters or fill values do not match batch {n}x{c}"));
    }
    if h < 2 || w < 2 {
        return Err(invalid!("warp_images_filled: extents must be >= 2"));
    }
    let hw = h * w;
    let mut out = vec![0.0f32; n * c * hw];
    for b in 0..n {
        let t = theta.0[b];
        for i in 0..h {
            let yt: f32 = target_coord(i, h);
            for j in 0..w {
                let xt: f32 = target_coord(j, w);
                let xs = t[0] * xt + t[1] * yt + t[2];
                let ys = t[3] * xt + t[4] * yt + t[5];
                let corners = Taps::new(xs, ys, h, w).corners(h, w);
                for ch in 0..c {
                    let plane = &images.data()[(b * c + ch) * hw..][..hw];
                    let mut acc = 0.0f32;
                    for &(idx, wt, _, _) in &corners {
                        acc += wt * idx.map_or(fill[b][ch], |k| plane[k]);
                    }
                    out[(b * c + ch) * hw + i * w + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}
