//! Differentiable tensor operations.

use crate::autodiff::real::gemm;
use crate::autodiff::{Real, Tensor, Var};
use crate::error::{invalid, Error, Result};

/// Spatial axis of an `[N,C,H,W]` feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Height,
    Width,
}

/// Squared-distance floor under the square root in [`Var::pairwise_distance`].
pub const DISTANCE_FLOOR: f64 = 1e-12;

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<'t, T: Real> Var<'t, T> {
    fn check_tape(&self, other: &Var<'_, T>, op: &'static str) -> Result<()> {
        if !self.same_tape(other) {
            return Err(invalid!("{op}: operands recorded on different tapes"));
        }
        Ok(())
    }

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(rhs, "matmul")?;
        let (a, b) = (self.value(), rhs.value());
        let [m, k] = a.dims2("matmul")?;
        let [k2, n] = b.dims2("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(false, false, m, k, n, a.data(), b.data(), T::zero(), &mut out);
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.tape().record(
            "matmul",
            value,
            &[*self, *rhs],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
                let da = ctx.needs[0].then(|| {
                    let mut da = vec![T::zero(); m * k];
                    gemm(false, true, m, n, k, g, b.data(), T::zero(), &mut da);
                    Tensor::from_parts(vec![m, k], da)
                });
                let db = ctx.needs[1].then(|| {
                    let mut db = vec![T::zero(); k * n];
                    gemm(true, false, k, m, n, a.data(), g, T::zero(), &mut db);
                    Tensor::from_parts(vec![k, n], db)
                });
                vec![da, db]
            }),
        ))
    }

    /// Adds `bias[D]` to every row of `[N,D]`.
    pub fn add_bias(&self, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(bias, "add_bias")?;
        let (x, b) = (self.value(), bias.value());
        let [n, d] = x.dims2("add_bias")?;
        if b.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = x.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self.tape().record(
            "add_bias",
            Tensor::from_parts(vec![n, d], out),
            &[*self, *bias],
            Box::new(move |ctx| {
                let g = ctx.grad;
                let db = ctx.needs[1].then(|| {
                    let mut db = vec![T::zero(); d];
                    for row in g.data().chunks_exact(d) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    Tensor::from_parts(vec![d], db)
                });
                vec![ctx.needs[0].then(|| g.clone()), db]
            }),
        ))
    }

    /// Fully-connected layer `x·W + b` with `W` stored `[in, out]`.
    pub fn linear(&self, weight: &Var<'t, T>, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul(weight)?.add_bias(bias)
    }

    pub fn add(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_with("add", rhs, |a, b| a + b, |_, _| (T::one(), T::one()))
    }

    pub fn sub(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_with("sub", rhs, |a, b| a - b, |_, _| (T::one(), -T::one()))
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_with("mul", rhs, |a, b| a * b, |a, b| (b, a))
    }

    fn zip_with(
        &self,
        op: &'static str,
        rhs: &Var<'t, T>,
        f: fn(T, T) -> T,
        df: fn(T, T) -> (T, T),
    ) -> Result<Var<'t, T>> {
        self.check_tape(rhs, op)?;
        let (a, b) = (self.value(), rhs.value());
        same_shape(op, &a, &b)?;
        let out: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.tape().record(
            op,
            Tensor::from_parts(a.shape().to_vec(), out),
            &[*self, *rhs],
            Box::new(move |ctx| {
                let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
                let mut da = ctx.needs[0].then(|| Vec::with_capacity(a.numel()));
                let mut db = ctx.needs[1].then(|| Vec::with_capacity(b.numel()));
                for ((&g, &x), &y) in ctx.grad.data().iter().zip(a.data()).zip(b.data()) {
                    let (dx, dy) = df(x, y);
                    if let Some(da) = da.as_mut() {
                        da.push(g * dx);
                    }
                    if let Some(db) = db.as_mut() {
                        db.push(g * dy);
                    }
                }
                let shape = a.shape().to_vec();
                vec![
                    da.map(|d| Tensor::from_parts(shape.clone(), d)),
                    db.map(|d| Tensor::from_parts(shape, d)),
                ]
            }),
        ))
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        let x = self.value();
        self.tape().record(
            "scale",
            x.map(|v| v * c),
            &[*self],
            Box::new(move |ctx| vec![Some(ctx.grad.map(|g| g * c))]),
        )
    }

    pub fn add_scalar(&self, c: T) -> Var<'t, T> {
        let x = self.value();
        self.tape().record(
            "add_scalar",
            x.map(|v| v + c),
            &[*self],
            Box::new(|ctx| vec![Some(ctx.grad.clone())]),
        )
    }

    pub fn sum(&self) -> Var<'t, T> {
        let x = self.value();
        let s: T = x.data().iter().copied().sum();
        self.tape().record(
            "sum",
            Tensor::scalar(s),
            &[*self],
            Box::new(|ctx| {
                let g = ctx.grad.item();
                vec![Some(Tensor::full(ctx.inputs[0].shape().to_vec(), g))]
            }),
        )
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = T::lit(self.value().numel() as f64);
        self.sum().scale(T::one() / n)
    }

    pub fn relu(&self) -> Var<'t, T> {
        let x = self.value();
        self.tape().record(
            "relu",
            x.map(|v| if v > T::zero() { v } else { T::zero() }),
            &[*self],
            Box::new(|ctx| {
                let x = &ctx.inputs[0];
                let d = ctx
                    .grad
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                vec![Some(Tensor::from_parts(x.shape().to_vec(), d))]
            }),
        )
    }

    /// `[N,C,H,W] -> [N,C]`, mean over the spatial extent.
    pub fn global_avg_pool(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let [n, c, h, w] = x.dims4("global_avg_pool")?;
        let hw = h * w;
        let inv = T::one() / T::lit(hw as f64);
        let out = x
            .data()
            .chunks_exact(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self.tape().record(
            "global_avg_pool",
            Tensor::from_parts(vec![n, c], out),
            &[*self],
            Box::new(move |ctx| {
                let mut d = Vec::with_capacity(n * c * hw);
                for &g in ctx.grad.data() {
                    d.extend(std::iter::repeat(g * inv).take(hw));
                }
                vec![Some(Tensor::from_parts(vec![n, c, h, w], d))]
            }),
        ))
    }

    /// Subtracts each plane's spatial mean: `[N,C,H,W]` in and out.
    pub fn center_spatial(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let [_, _, h, w] = x.dims4("center_spatial")?;
        let hw = h * w;
        let inv = T::one() / T::lit(hw as f64);
        let center = move |data: &[T]| -> Vec<T> {
            let mut out = Vec::with_capacity(data.len());
            for plane in data.chunks_exact(hw) {
                let m = plane.iter().copied().sum::<T>() * inv;
                out.extend(plane.iter().map(|&v| v - m));
            }
            out
        };
        let shape = x.shape().to_vec();
        Ok(self.tape().record(
            "center_spatial",
            Tensor::from_parts(shape.clone(), center(x.data())),
            &[*self],
            Box::new(move |ctx| vec![Some(Tensor::from_parts(shape.clone(), center(ctx.grad.data())))]),
        ))
    }

    /// Strip `part` of `parts` equal strips along a spatial axis.
    ///
    /// Height strips run top to bottom, width strips left to right. The
    /// extent must divide evenly; uneven splits are rejected.
    pub fn spatial_strip(&self, axis: Axis, part: usize, parts: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let [n, c, h, w] = x.dims4("slice_spatial")?;
        let extent = match axis {
            Axis::Height => h,
            Axis::Width => w,
        };
        if parts == 0 || part >= parts {
            return Err(invalid!("slice_spatial: strip {part} of {parts}"));
        }
        if extent % parts != 0 {
            return Err(Error::InvalidShape {
                op: "slice_spatial",
                reason: format!("{axis:?} extent {extent} does not split into {parts} equal strips"),
            });
        }
        let len = extent / parts;
        let (h0, oh, w0, ow) = match axis {
            Axis::Height => (part * len, len, 0, w),
            Axis::Width => (0, h, part * len, len),
        };
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in x.data().chunks_exact(h * w) {
            for y in h0..h0 + oh {
                out.extend_from_slice(&plane[y * w + w0..y * w + w0 + ow]);
            }
        }
        Ok(self.tape().record(
            "slice_spatial",
            Tensor::from_parts(vec![n, c, oh, ow], out),
            &[*self],
            Box::new(move |ctx| {
                let mut d = vec![T::zero(); n * c * h * w];
                for (plane, g) in d
                    .chunks_exact_mut(h * w)
                    .zip(ctx.grad.data().chunks_exact(oh * ow))
                {
                    for (r, y) in (h0..h0 + oh).enumerate() {
                        plane[y * w + w0..y * w + w0 + ow].copy_from_slice(&g[r * ow..(r + 1) * ow]);
                    }
                }
                vec![Some(Tensor::from_parts(vec![n, c, h, w], d))]
            }),
        ))
    }

    /// First (top / left) or second (bottom / right) half along `axis`.
    pub fn slice_spatial(&self, axis: Axis, second_half: bool) -> Result<Var<'t, T>> {
        self.spatial_strip(axis, usize::from(second_half), 2)
    }

    /// Mean cross-entropy of `[N,C]` logits against class indices.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let [n, c] = x.dims2("softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(invalid!(
                "softmax_cross_entropy: {} labels for batch of {n}",
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(invalid!("softmax_cross_entropy: label {bad} outside [0, {c})"));
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut total = T::zero();
        for (row, &label) in x.data().chunks_exact(c).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            total += log_z - row[label];
            probs.extend(row.iter().map(|&v| (v - log_z).exp()));
        }
        let inv_n = T::one() / T::lit(n as f64);
        let labels = labels.to_vec();
        Ok(self.tape().record(
            "softmax_cross_entropy",
            Tensor::scalar(total * inv_n),
            &[*self],
            Box::new(move |ctx| {
                let scale = ctx.grad.item() * inv_n;
                let mut d = probs.clone();
                for (row, &label) in d.chunks_exact_mut(c).zip(&labels) {
                    row[label] -= T::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                vec![Some(Tensor::from_parts(vec![n, c], d))]
            }),
        ))
    }

    /// Elements at flat row-major `indices`, as a rank-1 tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        if indices.is_empty() {
            return Err(invalid!("gather: empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.numel()) {
            return Err(invalid!("gather: index {bad} out of range for {:?}", x.shape()));
        }
        let out = indices.iter().map(|&i| x.data()[i]).collect();
        let indices = indices.to_vec();
        Ok(self.tape().record(
            "gather",
            Tensor::from_parts(vec![indices.len()], out),
            &[*self],
            Box::new(move |ctx| {
                let src = &ctx.inputs[0];
                let mut d = vec![T::zero(); src.numel()];
                for (&i, &g) in indices.iter().zip(ctx.grad.data()) {
                    d[i] += g;
                }
                vec![Some(Tensor::from_parts(src.shape().to_vec(), d))]
            }),
        ))
    }

    /// Euclidean distances between all rows of `[N,D]`, giving `[N,N]`.
    ///
    /// Squared distances are floored at [`DISTANCE_FLOOR`] before the square
    /// root; the floored entries (including the diagonal) carry no gradient.
    pub fn pairwise_distance(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let [n, d] = x.dims2("pairwise_distance")?;
        let floor = T::lit(DISTANCE_FLOOR);
        let rows: Vec<&[T]> = x.data().chunks_exact(d).collect();
        let mut out = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                let sq: T = rows[i]
                    .iter()
                    .zip(rows[j])
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum();
                out[i * n + j] = sq.max(floor).sqrt();
            }
        }
        Ok(self.tape().record(
            "pairwise_distance",
            Tensor::from_parts(vec![n, n], out),
            &[*self],
            Box::new(move |ctx| {
                let x = ctx.inputs[0].data();
                let dist = ctx.output.data();
                let g = ctx.grad.data();
                let mut dx = vec![T::zero(); n * d];
                let floor_dist = floor.sqrt();
                for i in 0..n {
                    for j in 0..n {
                        let dij = dist[i * n + j];
                        let gij = g[i * n + j];
                        if i == j || dij <= floor_dist || gij == T::zero() {
                            continue;
                        }
                        let s = gij / dij;
                        for k in 0..d {
                            let diff = (x[i * d + k] - x[j * d + k]) * s;
                            dx[i * d + k] += diff;
                            dx[j * d + k] -= diff;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![n, d], dx))]
            }),
        ))
    }
}

/// Joins tensors along their final axis; leading extents must agree.
pub fn concat_last_axis<'t, T: Real>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = parts
        .first()
        .ok_or_else(|| invalid!("concat_last_axis: no inputs"))?;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let lead = &values[0].shape()[..values[0].rank() - 1];
    for (p, v) in parts.iter().zip(&values) {
        first.check_tape(p, "concat_last_axis")?;
        if v.rank() == 0 || &v.shape()[..v.rank() - 1] != lead {
            return Err(Error::ShapeMismatch {
                op: "concat_last_axis",
                lhs: values[0].shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
    }
    let widths: Vec<usize> = values.iter().map(|v| *v.shape().last().unwrap()).collect();
    let total: usize = widths.iter().sum();
    let rows: usize = lead.iter().product();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (v, &w) in values.iter().zip(&widths) {
            out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Ok(first.tape().record(
        "concat_last_axis",
        Tensor::from_parts(shape, out),
        parts,
        Box::new(move |ctx| {
            let g = ctx.grad.data();
            let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(widths.len());
            let mut offset = 0;
            for (i, &w) in widths.iter().enumerate() {
                if ctx.needs[i] {
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    grads.push(Some(Tensor::from_parts(ctx.inputs[i].shape().to_vec(), d)));
                } else {
                    grads.push(None);
                }
                offset += w;
            }
            grads
        }),
    ))
}
