//! Differentiable operations over [`Var`].
//!
//! Image tensors are `[N, C, H, W]`; vectors batches are `[N, D]`.

use std::sync::Arc;

use crate::diff::tape::Var;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{gemm, Real, Tensor};

fn same_tape<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.tape().same_as(b.tape()) {
        Ok(())
    } else {
        Err(Error::shape("operands recorded on different tapes"))
    }
}

fn dims4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(format!(
            "{what}: expected [N, C, H, W], got {shape:?}"
        ))),
    }
}

fn dims2(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(format!(
            "{what}: expected a matrix, got {shape:?}"
        ))),
    }
}

impl<T: Real> Var<T> {
    fn unary(
        &self,
        value: Tensor<T>,
        local_grad: impl Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>) -> Tensor<T> + 'static,
    ) -> Var<T> {
        let x = self.value_rc();
        let out = Arc::new(value);
        let out_c = Arc::clone(&out);
        self.tape().record_rc(
            &[self],
            out,
            Box::new(move |g, _| vec![Some(local_grad(g, &x, &out_c))]),
        )
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        same_tape(self, other)?;
        let value = self.value().zip_map(other.value(), |a, b| a + b)?;
        Ok(self.tape().record(
            &[self, other],
            value,
            Box::new(|g, need| vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())]),
        ))
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        same_tape(self, other)?;
        let value = self.value().zip_map(other.value(), |a, b| a - b)?;
        Ok(self.tape().record(
            &[self, other],
            value,
            Box::new(|g, need| vec![need[0].then(|| g.clone()), need[1].then(|| g.map(|x| -x))]),
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        same_tape(self, other)?;
        let value = self.value().zip_map(other.value(), |a, b| a * b)?;
        let a = self.value_rc();
        let b = other.value_rc();
        Ok(self.tape().record(
            &[self, other],
            value,
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.zip_map(&b, |g, b| g * b).unwrap()),
                    need[1].then(|| g.zip_map(&a, |g, a| g * a).unwrap()),
                ]
            }),
        ))
    }

    pub fn scale(&self, s: T) -> Var<T> {
        let value = self.value().map(|x| x * s);
        self.tape().record(
            &[self],
            value,
            Box::new(move |g, _| vec![Some(g.map(|x| x * s))]),
        )
    }

    pub fn add_scalar(&self, s: T) -> Var<T> {
        let value = self.value().map(|x| x + s);
        self.tape()
            .record(&[self], value, Box::new(|g, _| vec![Some(g.clone())]))
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-T::one())
    }

    pub fn relu(&self) -> Var<T> {
        let value = self.value().map(|x| x.max(T::zero()));
        self.unary(value, |g, x, _| {
            g.zip_map(x, |g, x| if x > T::zero() { g } else { T::zero() })
                .unwrap()
        })
    }

    pub fn sigmoid(&self) -> Var<T> {
        let value = self.value().map(sigmoid);
        self.unary(value, |g, _, y| {
            g.zip_map(y, |g, y| g * y * (T::one() - y)).unwrap()
        })
    }

    pub fn log(&self) -> Var<T> {
        let value = self.value().map(|x| x.ln());
        self.unary(value, |g, x, _| g.zip_map(x, |g, x| g / x).unwrap())
    }

    pub fn square(&self) -> Var<T> {
        let value = self.value().map(|x| x * x);
        self.unary(value, |g, x, _| {
            g.zip_map(x, |g, x| g * x * T::c(2.0)).unwrap()
        })
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: T, hi: T) -> Var<T> {
        let value = self.value().map(|x| x.max(lo).min(hi));
        self.unary(value, move |g, x, _| {
            g.zip_map(x, |g, x| if x >= lo && x <= hi { g } else { T::zero() })
                .unwrap()
        })
    }

    /// `log(x / (1 - x))` with `x` clamped into `[eps, 1 - eps]`.
    pub fn logit(&self, eps: T) -> Var<T> {
        let hi = T::one() - eps;
        let value = self.value().map(|x| {
            let x = x.max(eps).min(hi);
            (x / (T::one() - x)).ln()
        });
        self.unary(value, move |g, x, _| {
            g.zip_map(x, |g, x| {
                if x >= eps && x <= hi {
                    g / (x * (T::one() - x))
                } else {
                    T::zero()
                }
            })
            .unwrap()
        })
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<T>> {
        let original = self.shape().to_vec();
        let value = self.value().clone().reshape(shape)?;
        Ok(self.tape().record(
            &[self],
            value,
            Box::new(move |g, _| vec![Some(g.clone().reshape(original.clone()).unwrap())]),
        ))
    }

    pub fn sum(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        let value = Tensor::scalar(self.value().sum());
        self.tape().record(
            &[self],
            value,
            Box::new(move |g, _| vec![Some(Tensor::full(shape.clone(), g.item()))]),
        )
    }

    pub fn mean(&self) -> Var<T> {
        let n = T::from_usize(self.value().numel()).unwrap();
        self.sum().scale(T::one() / n)
    }

    /// Mean squared error `mean((self - other)^2)`.
    pub fn mse(&self, other: &Var<T>) -> Result<Var<T>> {
        same_tape(self, other)?;
        let diff = self.value().zip_map(other.value(), |a, b| a - b)?;
        let n = T::from_usize(diff.numel()).unwrap();
        let value = Tensor::scalar(diff.data().iter().map(|&d| d * d).sum::<T>() / n);
        let diff = Arc::new(diff);
        Ok(self.tape().record(
            &[self, other],
            value,
            Box::new(move |g, need| {
                let k = g.item() * T::c(2.0) / n;
                let ga = diff.map(|d| d * k);
                vec![need[0].then(|| ga.clone()), need[1].then(|| ga.map(|x| -x))]
            }),
        ))
    }

    /// `[N, I] x [I, O] -> [N, O]`.
    pub fn matmul(&self, rhs: &Var<T>) -> Result<Var<T>> {
        same_tape(self, rhs)?;
        let (n, i) = dims2(self.shape(), "matmul lhs")?;
        let (i2, o) = dims2(rhs.shape(), "matmul rhs")?;
        if i != i2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {i} vs {i2}"
            )));
        }
        let mut out = vec![T::zero(); n * o];
        gemm(
            n,
            i,
            o,
            self.value().data(),
            false,
            rhs.value().data(),
            false,
            &mut out,
            false,
        );
        let a = self.value_rc();
        let b = rhs.value_rc();
        Ok(self.tape().record(
            &[self, rhs],
            Tensor::from_parts(vec![n, o], out),
            Box::new(move |g, need| {
                let ga = need[0].then(|| {
                    let mut d = vec![T::zero(); n * i];
                    gemm(n, o, i, g.data(), false, b.data(), true, &mut d, false);
                    Tensor::from_parts(vec![n, i], d)
                });
                let gb = need[1].then(|| {
                    let mut d = vec![T::zero(); i * o];
                    gemm(i, n, o, a.data(), true, g.data(), false, &mut d, false);
                    Tensor::from_parts(vec![i, o], d)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Adds a `[O]` bias to every row of `[N, O]`.
    pub fn add_row_bias(&self, bias: &Var<T>) -> Result<Var<T>> {
        same_tape(self, bias)?;
        let (n, o) = dims2(self.shape(), "row bias input")?;
        if bias.shape() != [o] {
            return Err(Error::shape(format!(
                "bias shape {:?} does not match width {o}",
                bias.shape()
            )));
        }
        let b = bias.value().data();
        let mut out = self.value().data().to_vec();
        for row in out.chunks_mut(o) {
            for (x, &bb) in row.iter_mut().zip(b) {
                *x = *x + bb;
            }
        }
        Ok(self.tape().record(
            &[self, bias],
            Tensor::from_parts(vec![n, o], out),
            Box::new(move |g, need| {
                let gb = need[1].then(|| {
                    let mut d = vec![T::zero(); o];
                    for row in g.data().chunks(o) {
                        for (acc, &x) in d.iter_mut().zip(row) {
                            *acc = *acc + x;
                        }
                    }
                    Tensor::from_parts(vec![o], d)
                });
                vec![need[0].then(|| g.clone()), gb]
            }),
        ))
    }

    /// Concatenates `[N, Ci, H, W]` tensors along the channel axis.
    pub fn concat_channels(parts: &[&Var<T>]) -> Result<Var<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let (n, _, h, w) = dims4(first.shape(), "concat")?;
        let mut chans = Vec::with_capacity(parts.len());
        for p in parts {
            same_tape(first, p)?;
            let (pn, pc, ph, pw) = dims4(p.shape(), "concat")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(format!(
                    "concat: {:?} incompatible with {:?}",
                    p.shape(),
                    first.shape()
                )));
            }
            chans.push(pc);
        }
        let hw = h * w;
        let total: usize = chans.iter().sum();
        let mut out = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for (p, &c) in parts.iter().zip(&chans) {
                out.extend_from_slice(&p.value().data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let chans_c = chans.clone();
        Ok(first.tape().record(
            parts,
            Tensor::from_parts(vec![n, total, h, w], out),
            Box::new(move |g, need| {
                let mut grads: Vec<Option<Vec<T>>> = chans_c
                    .iter()
                    .zip(need)
                    .map(|(&c, &nd)| nd.then(|| Vec::with_capacity(n * c * hw)))
                    .collect();
                let gd = g.data();
                let mut off = 0;
                for _ in 0..n {
                    for (slot, &c) in grads.iter_mut().zip(&chans_c) {
                        if let Some(v) = slot {
                            v.extend_from_slice(&gd[off..off + c * hw]);
                        }
                        off += c * hw;
                    }
                }
                grads
                    .into_iter()
                    .zip(&chans_c)
                    .map(|(v, &c)| v.map(|v| Tensor::from_parts(vec![n, c, h, w], v)))
                    .collect()
            }),
        ))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&self) -> Result<Var<T>> {
        let (n, c, h, w) = dims4(self.shape(), "global average pool")?;
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let out: Vec<T> = self
            .value()
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self.tape().record(
            &[self],
            Tensor::from_parts(vec![n, c], out),
            Box::new(move |g, _| {
                let mut d = Vec::with_capacity(n * c * hw);
                for &x in g.data() {
                    d.extend(std::iter::repeat_n(x * inv, hw));
                }
                vec![Some(Tensor::from_parts(vec![n, c, h, w], d))]
            }),
        ))
    }

    /// Replicates `[N, L]` across an `H x W` grid: `[N, L, H, W]`.
    pub fn expand_spatial(&self, h: usize, w: usize) -> Result<Var<T>> {
        let (n, l) = dims2(self.shape(), "expand")?;
        if h == 0 || w == 0 {
            return Err(Error::shape("expand: zero spatial size"));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * l * hw);
        for &x in self.value().data() {
            out.extend(std::iter::repeat_n(x, hw));
        }
        Ok(self.tape().record(
            &[self],
            Tensor::from_parts(vec![n, l, h, w], out),
            Box::new(move |g, _| {
                let d = g
                    .data()
                    .chunks(hw)
                    .map(|p| p.iter().copied().sum())
                    .collect();
                vec![Some(Tensor::from_parts(vec![n, l], d))]
            }),
        ))
    }

    /// Applies `Y = A X B^T` to every `H x W` plane, with constant `A: [H', H]`
    /// and `B: [W', W]`. Bilinear resampling is expressed this way.
    pub fn plane_linear(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Var<T>> {
        let (n, c, h, w) = dims4(self.shape(), "plane linear")?;
        let (ho, ha) = dims2(a.shape(), "plane linear rows")?;
        let (wo, wb) = dims2(b.shape(), "plane linear cols")?;
        if ha != h || wb != w {
            return Err(Error::shape(format!(
                "plane linear: operators {:?}/{:?} do not fit {h}x{w}",
                a.shape(),
                b.shape()
            )));
        }
        let a = Arc::new(a.clone());
        let b = Arc::new(b.clone());
        let planes = n * c;
        let mut out = vec![T::zero(); planes * ho * wo];
        {
            let x = self.value().data();
            let (a, b) = (a.data(), b.data());
            par::for_each_chunk_mut(&mut out, ho * wo, |p, dst| {
                let mut tmp = vec![T::zero(); ho * w];
                gemm(
                    ho,
                    h,
                    w,
                    a,
                    false,
                    &x[p * h * w..(p + 1) * h * w],
                    false,
                    &mut tmp,
                    false,
                );
                gemm(ho, w, wo, &tmp, false, b, true, dst, false);
            });
        }
        Ok(self.tape().record(
            &[self],
            Tensor::from_parts(vec![n, c, ho, wo], out),
            Box::new(move |g, _| {
                let mut d = vec![T::zero(); planes * h * w];
                let (a, b, gd) = (a.data(), b.data(), g.data());
                par::for_each_chunk_mut(&mut d, h * w, |p, dst| {
                    let mut tmp = vec![T::zero(); h * wo];
                    gemm(
                        h,
                        ho,
                        wo,
                        a,
                        true,
                        &gd[p * ho * wo..(p + 1) * ho * wo],
                        false,
                        &mut tmp,
                        false,
                    );
                    gemm(h, wo, w, &tmp, false, b, false, dst, false);
                });
                vec![Some(Tensor::from_parts(vec![n, c, h, w], d))]
            }),
        ))
    }

    /// Blockwise 8x8 orthonormal DCT, multiply coefficients by `keep`
    /// (row-major 8x8, usually 0/1), inverse DCT. The map is self-adjoint.
    pub fn dct8_mask(&self, keep: &[T; 64]) -> Result<Var<T>> {
        let (_, _, h, w) = dims4(self.shape(), "dct mask")?;
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::shape(format!(
                "dct mask: spatial dims {h}x{w} not divisible by 8"
            )));
        }
        let keep = *keep;
        let value = dct8_mask_apply(self.value(), &keep);
        Ok(self.tape().record(
            &[self],
            value,
            Box::new(move |g, _| vec![Some(dct8_mask_apply(g, &keep))]),
        ))
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Orthonormal 8-point DCT-II matrix, row `u` holds basis `u`.
pub(crate) fn dct8_matrix<T: Real>() -> [[T; 8]; 8] {
    let mut d = [[T::zero(); 8]; 8];
    for (u, row) in d.iter_mut().enumerate() {
        let alpha = if u == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for (x, v) in row.iter_mut().enumerate() {
            let angle = std::f64::consts::PI * (2 * x + 1) as f64 * u as f64 / 16.0;
            *v = T::c(alpha * angle.cos());
        }
    }
    d
}

fn dct8_mask_apply<T: Real>(x: &Tensor<T>, keep: &[T; 64]) -> Tensor<T> {
    let shape = x.shape().to_vec();
    let (h, w) = (shape[2], shape[3]);
    let d = dct8_matrix::<T>();
    let mut out = vec![T::zero(); x.numel()];
    let src = x.data();
    par::for_each_chunk_mut(&mut out, h * w, |p, dst| {
        let plane = &src[p * h * w..(p + 1) * h * w];
        let mut blk = [[T::zero(); 8]; 8];
        let mut tmp = [[T::zero(); 8]; 8];
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                for (i, row) in blk.iter_mut().enumerate() {
                    row.copy_from_slice(&plane[(by + i) * w + bx..(by + i) * w + bx + 8]);
                }
                // coefficients = D X D^T
                for u in 0..8 {
                    for x in 0..8 {
                        let mut s = T::zero();
                        for y in 0..8 {
                            s = s + d[u][y] * blk[y][x];
                        }
                        tmp[u][x] = s;
                    }
                }
                for u in 0..8 {
                    for v in 0..8 {
                        let mut s = T::zero();
                        for x in 0..8 {
                            s = s + tmp[u][x] * d[v][x];
                        }
                        blk[u][v] = s * keep[u * 8 + v];
                    }
                }
                // back: D^T C D
                for y in 0..8 {
                    for v in 0..8 {
                        let mut s = T::zero();
                        for u in 0..8 {
                            s = s + d[u][y] * blk[u][v];
                        }
                        tmp[y][v] = s;
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        let mut s = T::zero();
                        for v in 0..8 {
                            s = s + tmp[y][v] * d[v][x];
                        }
                        dst[(by + y) * w + bx + x] = s;
                    }
                }
            }
        }
    });
    Tensor::from_parts(shape, out)
}
