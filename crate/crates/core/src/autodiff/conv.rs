//! 2-D cross-correlation via batched im2col + GEMM.

use crate::autodiff::real::gemm;
use crate::autodiff::{Real, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }

    /// Source pixel for output coordinate `o` and kernel tap `k`, if inside.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        (o * stride + k).checked_sub(pad).filter(|&i| i < extent)
    }
}

fn output_extent(op: &'static str, input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || k == 0 {
        return Err(Error::InvalidShape {
            op,
            reason: format!("stride {stride} and kernel extent {k} must be positive"),
        });
    }
    let padded = input + 2 * pad;
    if k > padded {
        return Err(Error::InvalidShape {
            op,
            reason: format!("kernel extent {k} exceeds padded input extent {padded}"),
        });
    }
    // Floor convention: trailing positions that cannot host a full stride are dropped.
    Ok((padded - k) / stride + 1)
}

fn im2col<T: Real>(x: &[T], g: &Geometry) -> Vec<T> {
    let ohw = g.oh * g.ow;
    let ncols = g.cols();
    let mut cols = vec![T::zero(); g.rows() * ncols];
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let plane = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst_row[n * ohw..(n + 1) * ohw];
                    for oy in 0..g.oh {
                        let Some(iy) = Geometry::src(oy, ky, g.stride, g.pad, g.h) else {
                            continue;
                        };
                        let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                        let dst_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            if let Some(ix) = Geometry::src(ox, kx, g.stride, g.pad, g.w) {
                                *d = src_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &Geometry) -> Vec<T> {
    let ohw = g.oh * g.ow;
    let ncols = g.cols();
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let plane = &mut x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[n * ohw..(n + 1) * ohw];
                    for oy in 0..g.oh {
                        let Some(iy) = Geometry::src(oy, ky, g.stride, g.pad, g.h) else {
                            continue;
                        };
                        let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                        for (ox, &v) in src[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                            if let Some(ix) = Geometry::src(ox, kx, g.stride, g.pad, g.w) {
                                dst[ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

impl<'t, T: Real> Var<'t, T> {
    /// Zero-padded cross-correlation of `[N,C,H,W]` with `[F,C,kh,kw]` plus
    /// a per-filter bias, giving `[N,F,H',W']`.
    pub fn conv2d(
        &self,
        kernel: &Var<'t, T>,
        bias: &Var<'t, T>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        const OP: &str = "conv2d";
        let (x, k, b) = (self.value(), kernel.value(), bias.value());
        let [n, c, h, w] = x.dims4(OP)?;
        let [f, kc, kh, kw] = k.dims4(OP)?;
        if kc != c {
            return Err(Error::ShapeMismatch {
                op: OP,
                lhs: x.shape().to_vec(),
                rhs: k.shape().to_vec(),
            });
        }
        if b.shape() != [f] {
            return Err(Error::ShapeMismatch {
                op: OP,
                lhs: k.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidShape {
                op: OP,
                reason: "stride must be positive".into(),
            });
        }
        let oh = output_extent(OP, h, kh, stride, pad)?;
        let ow = output_extent(OP, w, kw, stride, pad)?;
        let geo = Geometry { n, c, h, w, kh, kw, stride, pad, oh, ow };

        let cols = im2col(x.data(), &geo);
        let (rows, ncols, ohw) = (geo.rows(), geo.cols(), oh * ow);
        let mut y = vec![T::zero(); f * ncols];
        gemm(false, false, f, rows, ncols, k.data(), &cols, T::zero(), &mut y);

        // [F, N·OHW] -> [N, F, OHW] with bias.
        let mut out = vec![T::zero(); n * f * ohw];
        for fi in 0..f {
            let bv = b.data()[fi];
            for ni in 0..n {
                let src = &y[fi * ncols + ni * ohw..][..ohw];
                let dst = &mut out[(ni * f + fi) * ohw..][..ohw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }

        Ok(self.tape().record(
            OP,
            Tensor::from_parts(vec![n, f, oh, ow], out),
            &[*self, *kernel, *bias],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut gp = vec![T::zero(); f * ncols];
                for fi in 0..f {
                    for ni in 0..n {
                        gp[fi * ncols + ni * ohw..][..ohw]
                            .copy_from_slice(&g[(ni * f + fi) * ohw..][..ohw]);
                    }
                }
                let dx = ctx.needs[0].then(|| {
                    let mut dcols = vec![T::zero(); rows * ncols];
                    gemm(true, false, rows, f, ncols, ctx.inputs[1].data(), &gp, T::zero(), &mut dcols);
                    Tensor::from_parts(vec![n, c, h, w], col2im(&dcols, &geo))
                });
                let dk = ctx.needs[1].then(|| {
                    let mut dk = vec![T::zero(); f * rows];
                    gemm(false, true, f, ncols, rows, &gp, &cols, T::zero(), &mut dk);
                    Tensor::from_parts(vec![f, c, kh, kw], dk)
                });
                let db = ctx.needs[2].then(|| {
                    let db = gp.chunks_exact(ncols).map(|r| r.iter().copied().sum()).collect();
                    Tensor::from_parts(vec![f], db)
                });
                vec![dx, dk, db]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct six-loop cross-correlation with zero padding.
    fn oracle(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
        let (xs, ks) = (x.shape(), k.shape());
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ks[0], ks[2], ks[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * f * oh * ow];
        for b_ in 0..n {
            for f_ in 0..f {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b.data()[f_];
                        for c_ in 0..c {
                            for u in 0..kh {
                                for v in 0..kw {
                                    let y = (i * stride + u) as isize - pad as isize;
                                    let xx = (j * stride + v) as isize - pad as isize;
                                    if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                        continue;
                                    }
                                    acc += x.data()[((b_ * c + c_) * h + y as usize) * w + xx as usize]
                                        * k.data()[((f_ * c + c_) * kh + u) * kw + v];
                                }
                            }
                        }
                        out[((b_ * f + f_) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        (vec![n, f, oh, ow], out)
    }

    fn conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Result<Tensor<f64>> {
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .conv2d(&tape.constant(k.clone()), &tape.constant(b.clone()), stride, pad)?;
        let v = (*y.value()).clone();
        Ok(v)
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(&mut rng, &[2, 1, 4, 5]);
        let y = conv(&x, &Tensor::full([1, 1, 1, 1], 1.0), &Tensor::zeros([1]), 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(&mut rng, &[1, 2, 5, 5]);
        let b = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv(&x, &Tensor::zeros([3, 2, 3, 3]), &b, 1, 1).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, b.data()[i / 25]);
        }
    }

    #[test]
    fn matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, k, b) = (random(&mut rng, &[1, 2, 5, 5]), random(&mut rng, &[3, 2, 3, 3]), random(&mut rng, &[3]));
        let y = conv(&x, &k, &b, 1, 1).unwrap();
        let (shape, want) = oracle(&x, &k, &b, 1, 1);
        assert_eq!(y.shape(), &shape[..]);
        for (a, w) in y.data().iter().zip(&want) {
            assert!((a - w).abs() < 1e-5);
        }
    }

    #[test]
    fn strided_extent_uses_floor() {
        assert_eq!(output_extent("conv2d", 64, 3, 2, 1).unwrap(), 32);
        assert_eq!(output_extent("conv2d", 8, 5, 2, 2).unwrap(), 4);
        assert_eq!(output_extent("conv2d", 5, 3, 2, 0).unwrap(), 2);
        assert!(output_extent("conv2d", 2, 5, 1, 1).is_err());
        assert!(output_extent("conv2d", 4, 3, 0, 1).is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        let x = Tensor::<f64>::zeros([1, 2, 4, 4]);
        assert!(conv(&x, &Tensor::zeros([3, 1, 3, 3]), &Tensor::zeros([3]), 1, 1).is_err());
        assert!(conv(&x, &Tensor::zeros([3, 2, 3, 3]), &Tensor::zeros([2]), 1, 1).is_err());
        assert!(conv(&x, &Tensor::zeros([3, 2, 7, 7]), &Tensor::zeros([3]), 1, 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn oracle_random_configs(
            n in 1usize..3, c in 1usize..4, f in 1usize..4, h in 3usize..8, w in 3usize..8,
            kh in 1usize..4, kw in 1usize..4, stride in 1usize..3, pad in 0usize..2, seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, k, b) = (random(&mut rng, &[n, c, h, w]), random(&mut rng, &[f, c, kh, kw]), random(&mut rng, &[f]));
            let y = conv(&x, &k, &b, stride, pad).unwrap();
            let (shape, want) = oracle(&x, &k, &b, stride, pad);
            prop_assert_eq!(y.shape(), &shape[..]);
            for (a, w) in y.data().iter().zip(&want) {
                prop_assert!((a - w).abs() < 1e-9);
            }
        }
    }
}
