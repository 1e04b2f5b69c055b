//! Convolution and batch normalization over `[N, C, H, W]` tensors.

use std::sync::Arc;

use crate::diff::tape::Var;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{gemm, Real, Tensor};

/// Unfolds one `[C, H, W]` image into `[C * ks * ks, H * W]` patches with
/// zero padding `ks / 2` (same-size output, stride 1).
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, ks: usize, cols: &mut [T]) {
    let pad = (ks / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..ks {
            for kx in 0..ks {
                let row = ((ch * ks + ky) * ks + kx) * hw;
                let dst_plane = &mut cols[row..row + hw];
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    let dst = &mut dst_plane[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    dst[..x0].fill(T::zero());
                    dst[x1..].fill(T::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    dst[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back into the image.
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, ks: usize, x: &mut [T]) {
    let pad = (ks / 2) as isize;
    let hw = h * w;
    x.fill(T::zero());
    for ch in 0..c {
        let plane = &mut x[ch * hw..(ch + 1) * hw];
        for ky in 0..ks {
            for kx in 0..ks {
                let row = ((ch * ks + ky) * ks + kx) * hw;
                let src_plane = &cols[row..row + hw];
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    let src = &src_plane[y * w + x0..y * w + x1];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

impl<T: Real> Var<T> {
    /// Stride-1 "same" convolution: `x: [N, Ci, H, W]`, `weight: [Co, Ci, k, k]`
    /// with odd `k`, `bias: [Co]`.
    pub fn conv2d(&self, weight: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
        let (n, ci, h, w) = match *self.shape() {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape(format!("conv2d input {:?}", self.shape()))),
        };
        let (co, ks) = match *weight.shape() {
            [co, wci, k1, k2] if wci == ci && k1 == k2 && k1 % 2 == 1 => (co, k1),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d weight {:?} incompatible with input {:?}",
                    weight.shape(),
                    self.shape()
                )))
            }
        };
        if bias.shape() != [co] {
            return Err(Error::shape(format!("conv2d bias {:?}", bias.shape())));
        }
        let hw = h * w;
        let kdim = ci * ks * ks;
        let mut out = vec![T::zero(); n * co * hw];
        {
            let x = self.value().data();
            let wt = weight.value().data();
            let b = bias.value().data();
            par::for_each_chunk_mut(&mut out, co * hw, |i, dst| {
                let xi = &x[i * ci * hw..(i + 1) * ci * hw];
                if ks == 1 {
                    gemm(co, kdim, hw, wt, false, xi, false, dst, false);
                } else {
                    let mut cols = vec![T::zero(); kdim * hw];
                    im2col(xi, ci, h, w, ks, &mut cols);
                    gemm(co, kdim, hw, wt, false, &cols, false, dst, false);
                }
                for (row, &bb) in dst.chunks_mut(hw).zip(b) {
                    for v in row {
                        *v = *v + bb;
                    }
                }
            });
        }
        let x = self.value_rc();
        let wt = weight.value_rc();
        Ok(self.tape().record(
            &[self, weight, bias],
            Tensor::from_parts(vec![n, co, h, w], out),
            Box::new(move |g, need| {
                let gd = g.data();
                let gx = need[0].then(|| {
                    let mut dx = vec![T::zero(); n * ci * hw];
                    let wt = wt.data();
                    par::for_each_chunk_mut(&mut dx, ci * hw, |i, dst| {
                        let gi = &gd[i * co * hw..(i + 1) * co * hw];
                        if ks == 1 {
                            gemm(kdim, co, hw, wt, true, gi, false, dst, false);
                        } else {
                            let mut dcols = vec![T::zero(); kdim * hw];
                            gemm(kdim, co, hw, wt, true, gi, false, &mut dcols, false);
                            col2im(&dcols, ci, h, w, ks, dst);
                        }
                    });
                    Tensor::from_parts(vec![n, ci, h, w], dx)
                });
                let gw = need[1].then(|| {
                    let xd = x.data();
                    let partials = par::map_range(n, |i| {
                        let xi = &xd[i * ci * hw..(i + 1) * ci * hw];
                        let gi = &gd[i * co * hw..(i + 1) * co * hw];
                        let mut dw = vec![T::zero(); co * kdim];
                        if ks == 1 {
                            gemm(co, hw, kdim, gi, false, xi, true, &mut dw, false);
                        } else {
                            let mut cols = vec![T::zero(); kdim * hw];
                            im2col(xi, ci, h, w, ks, &mut cols);
                            gemm(co, hw, kdim, gi, false, &cols, true, &mut dw, false);
                        }
                        dw
                    });
                    let mut dw = vec![T::zero(); co * kdim];
                    for p in partials {
                        for (a, b) in dw.iter_mut().zip(p) {
                            *a = *a + b;
                        }
                    }
                    Tensor::from_parts(vec![co, ci, ks, ks], dw)
                });
                let gb = need[2].then(|| {
                    let mut db = vec![T::zero(); co];
                    for (j, plane) in gd.chunks(hw).enumerate() {
                        let c = j % co;
                        db[c] = db[c] + plane.iter().copied().sum::<T>();
                    }
                    Tensor::from_parts(vec![co], db)
                });
                vec![gx, gw, gb]
            }),
        ))
    }

    /// Batch normalization with batch statistics (training mode).
    ///
    /// Returns the normalized output together with the per-channel batch mean
    /// and biased variance, for the caller's running-statistics update.
    pub fn batch_norm_train(
        &self,
        gamma: &Var<T>,
        beta: &Var<T>,
        eps: T,
    ) -> Result<(Var<T>, Tensor<T>, Tensor<T>)> {
        let (n, c, h, w) = bn_dims(self, gamma, beta)?;
        let hw = h * w;
        let m = T::from_usize(n * hw).unwrap();
        let x = self.value().data();
        let stats: Vec<(T, T)> = par::map_range(c, |ch| {
            let mut s = T::zero();
            for i in 0..n {
                s = s + x[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
            let mean = s / m;
            let mut v = T::zero();
            for i in 0..n {
                for &xv in &x[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                    v = v + (xv - mean) * (xv - mean);
                }
            }
            (mean, v / m)
        });
        let inv_std: Vec<T> = stats
            .iter()
            .map(|&(_, v)| T::one() / (v + eps).sqrt())
            .collect();
        let mut xhat = vec![T::zero(); x.len()];
        for (j, (dst, src)) in xhat.chunks_mut(hw).zip(x.chunks(hw)).enumerate() {
            let ch = j % c;
            let (mean, is) = (stats[ch].0, inv_std[ch]);
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
        }
        let out = affine_channels(&xhat, c, hw, gamma.value().data(), beta.value().data());
        let xhat = Arc::new(xhat);
        let gam = gamma.value_rc();
        let mean_t = Tensor::from_parts(vec![c], stats.iter().map(|s| s.0).collect());
        let var_t = Tensor::from_parts(vec![c], stats.iter().map(|s| s.1).collect());
        let v = self.tape().record(
            &[self, gamma, beta],
            Tensor::from_parts(vec![n, c, h, w], out),
            Box::new(move |g, need| {
                let gd = g.data();
                let (sum_g, sum_gx) = channel_sums(gd, &xhat, c, hw);
                let gx = need[0].then(|| {
                    let gm = gam.data();
                    let mut dx = vec![T::zero(); gd.len()];
                    for (j, ((dst, gp), xp)) in dx
                        .chunks_mut(hw)
                        .zip(gd.chunks(hw))
                        .zip(xhat.chunks(hw))
                        .enumerate()
                    {
                        let ch = j % c;
                        let k = gm[ch] * inv_std[ch] / m;
                        for ((d, &gv), &xv) in dst.iter_mut().zip(gp).zip(xp) {
                            *d = k * (m * gv - sum_g[ch] - xv * sum_gx[ch]);
                        }
                    }
                    Tensor::from_parts(vec![n, c, h, w], dx)
                });
                vec![
                    gx,
                    need[1].then(|| Tensor::from_parts(vec![c], sum_gx.clone())),
                    need[2].then(|| Tensor::from_parts(vec![c], sum_g.clone())),
                ]
            }),
        );
        Ok((v, mean_t, var_t))
    }

    /// Batch normalization with fixed statistics (evaluation mode).
    pub fn batch_norm_eval(
        &self,
        gamma: &Var<T>,
        beta: &Var<T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
    ) -> Result<Var<T>> {
        let (n, c, h, w) = bn_dims(self, gamma, beta)?;
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(Error::shape("batch norm running statistics"));
        }
        let hw = h * w;
        let inv_std: Vec<T> = running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let mean = running_mean.data().to_vec();
        let mut xhat = vec![T::zero(); n * c * hw];
        for (j, (dst, src)) in xhat
            .chunks_mut(hw)
            .zip(self.value().data().chunks(hw))
            .enumerate()
        {
            let ch = j % c;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean[ch]) * inv_std[ch];
            }
        }
        let out = affine_channels(&xhat, c, hw, gamma.value().data(), beta.value().data());
        let xhat = Arc::new(xhat);
        let gam = gamma.value_rc();
        Ok(self.tape().record(
            &[self, gamma, beta],
            Tensor::from_parts(vec![n, c, h, w], out),
            Box::new(move |g, need| {
                let gd = g.data();
                let (sum_g, sum_gx) = channel_sums(gd, &xhat, c, hw);
                let gx = need[0].then(|| {
                    let gm = gam.data();
                    let mut dx = vec![T::zero(); gd.len()];
                    for (j, (dst, gp)) in dx.chunks_mut(hw).zip(gd.chunks(hw)).enumerate() {
                        let k = gm[j % c] * inv_std[j % c];
                        for (d, &gv) in dst.iter_mut().zip(gp) {
                            *d = k * gv;
                        }
                    }
                    Tensor::from_parts(vec![n, c, h, w], dx)
                });
                vec![
                    gx,
                    need[1].then(|| Tensor::from_parts(vec![c], sum_gx)),
                    need[2].then(|| Tensor::from_parts(vec![c], sum_g)),
                ]
            }),
        ))
    }
}

fn bn_dims<T: Real>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] if gamma.shape() == [c] && beta.shape() == [c] => Ok((n, c, h, w)),
        _ => Err(Error::shape(format!(
            "batch norm: input {:?}, gamma {:?}, beta {:?}",
            x.shape(),
            gamma.shape(),
            beta.shape()
        ))),
    }
}

fn affine_channels<T: Real>(xhat: &[T], c: usize, hw: usize, gamma: &[T], beta: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); xhat.len()];
    for (j, (dst, src)) in out.chunks_mut(hw).zip(xhat.chunks(hw)).enumerate() {
        let (g, b) = (gamma[j % c], beta[j % c]);
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = g * s + b;
        }
    }
    out
}

/// Per-channel `sum(g)` and `sum(g * xhat)`.
fn channel_sums<T: Real>(g: &[T], xhat: &[T], c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for (j, (gp, xp)) in g.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
        let ch = j % c;
        let mut a = T::zero();
        let mut b = T::zero();
        for (&gv, &xv) in gp.iter().zip(xp) {
            a = a + gv;
            b = b + gv * xv;
        }
        sum_g[ch] = sum_g[ch] + a;
        sum_gx[ch] = sum_gx[ch] + b;
    }
    (sum_g, sum_gx)
}
