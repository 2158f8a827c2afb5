//! NCHW tensors and the handful of layers the velocity network needs, each
//! with a hand-written backward pass.
//!
//! Layers do not own their weights: they hold offsets into a flat parameter
//! vector, and gradients are accumulated into a vector of the same layout.

use crate::scalar::Real;

/// Dense `n x c x h x w` activation buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let len = self.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn same_shape(&self) -> Self {
        Self::zeros(self.n, self.c, self.h, self.w)
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    x.sigmoid()
}

pub fn silu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor {
        data: x.data.iter().map(|&v| v * sigmoid(v)).collect(),
        ..*x
    }
}

pub fn silu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    Tensor {
        data: x
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&v, &g)| {
                let s = sigmoid(v);
                g * s * (T::one() + v * (T::one() - s))
            })
            .collect(),
        ..*x
    }
}

pub fn silu_vec<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_vec_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (T::one() + v * (T::one() - s))
        })
        .collect()
}

/// 2D convolution, zero padding `k / 2`, stride 1 or 2.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn param_count(cin: usize, cout: usize, k: usize) -> usize {
        cin * cout * k * k + cout
    }

    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.k / 2;
        (
            (h + 2 * pad - self.k) / self.stride + 1,
            (w + 2 * pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    /// Output columns `ox` whose input column `ox * stride + kx - pad` lies
    /// inside `0..w`.
    fn valid_cols(&self, kx: usize, w: usize, wo: usize) -> (usize, usize) {
        let (s, pad) = (self.stride, self.k / 2);
        let lo = (pad.saturating_sub(kx)).div_ceil(s);
        // largest ox with ox * s + kx - pad <= w - 1
        let hi = if w + pad > kx { ((w + pad - kx - 1) / s + 1).min(wo) } else { 0 };
        (lo.min(hi), hi)
    }

    fn im2col<T: Real>(&self, x: &[T], h: usize, w: usize, ho: usize, wo: usize, col: &mut [T]) {
        let (k, s) = (self.k, self.stride);
        let pad = (k / 2) as isize;
        let plane = ho * wo;
        for ci in 0..self.cin {
            let src = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((ci * k + ky) * k + kx) * plane..][..plane];
                    let (lo, hi) = self.valid_cols(kx, w, wo);
                    let shift = kx as isize - pad;
                    for oy in 0..ho {
                        let iy = (oy * s) as isize + ky as isize - pad;
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let line = &src[iy as usize * w..(iy as usize + 1) * w];
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        if lo < hi {
                            let first = (lo * s) as isize + shift;
                            if s == 1 {
                                let a = first as usize;
                                dst[lo..hi].copy_from_slice(&line[a..a + hi - lo]);
                            } else {
                                for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                                    *d = line[first as usize + j * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], h: usize, w: usize, ho: usize, wo: usize, dx: &mut [T]) {
        let (k, s) = (self.k, self.stride);
        let pad = (k / 2) as isize;
        let plane = ho * wo;
        for ci in 0..self.cin {
            let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((ci * k + ky) * k + kx) * plane..][..plane];
                    let (lo, hi) = self.valid_cols(kx, w, wo);
                    if lo >= hi {
                        continue;
                    }
                    let first = ((lo * s) as isize + kx as isize - pad) as usize;
                    for oy in 0..ho {
                        let iy = (oy * s) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let line = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        let src = &row[oy * wo + lo..oy * wo + hi];
                        if s == 1 {
                            for (d, &v) in line[first..first + hi - lo].iter_mut().zip(src) {
                                *d += v;
                            }
                        } else {
                            for (j, &v) in src.iter().enumerate() {
                                line[first + j * s] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Tensor<T>) -> Tensor<T> {
        debug_assert_eq!(x.c, self.cin);
        let (ho, wo) = self.out_size(x.h, x.w);
        let kk = self.cin * self.k * self.k;
        let plane = ho * wo;
        let wt = &p[self.weight..self.weight + self.cout * kk];
        let bias = &p[self.bias..self.bias + self.cout];
        let mut y = Tensor::zeros(x.n, self.cout, ho, wo);
        let mut col = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); kk * plane]
        };
        for i in 0..x.n {
            let cols: &[T] = if self.is_pointwise() {
                x.sample(i)
            } else {
                self.im2col(x.sample(i), x.h, x.w, ho, wo, &mut col);
                &col
            };
            let out = y.sample_mut(i);
            for (co, b) in bias.iter().enumerate() {
                out[co * plane..(co + 1) * plane].fill(*b);
            }
            T::gemm(
                self.cout,
                kk,
                plane,
                T::one(),
                wt,
                kk as isize,
                1,
                cols,
                plane as isize,
                1,
                T::one(),
                out,
                plane as isize,
                1,
            );
        }
        y
    }

    /// Accumulates parameter gradients into `g`, returns the input gradient.
    pub fn backward<T: Real>(&self, p: &[T], g: &mut [T], x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (ho, wo) = (dy.h, dy.w);
        let kk = self.cin * self.k * self.k;
        let plane = ho * wo;
        let wt = &p[self.weight..self.weight + self.cout * kk];
        let mut dx = x.same_shape();
        let mut col = vec![T::zero(); kk * plane];
        let mut dcol = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); kk * plane]
        };
        for i in 0..x.n {
            let dys = dy.sample(i);
            {
                let gb = &mut g[self.bias..self.bias + self.cout];
                for (co, gbv) in gb.iter_mut().enumerate() {
                    *gbv += dys[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
                }
            }
            let cols: &[T] = if self.is_pointwise() {
                x.sample(i)
            } else {
                self.im2col(x.sample(i), x.h, x.w, ho, wo, &mut col);
                &col
            };
            // dW += dy @ col^T
            T::gemm(
                self.cout,
                plane,
                kk,
                T::one(),
                dys,
                plane as isize,
                1,
                cols,
                1,
                plane as isize,
                T::one(),
                &mut g[self.weight..self.weight + self.cout * kk],
                kk as isize,
                1,
            );
            // dcol = W^T @ dy
            if self.is_pointwise() {
                T::gemm(
                    kk,
                    self.cout,
                    plane,
                    T::one(),
                    wt,
                    1,
                    kk as isize,
                    dys,
                    plane as isize,
                    1,
                    T::zero(),
                    dx.sample_mut(i),
                    plane as isize,
                    1,
                );
            } else {
                T::gemm(
                    kk,
                    self.cout,
                    plane,
                    T::one(),
                    wt,
                    1,
                    kk as isize,
                    dys,
                    plane as isize,
                    1,
                    T::zero(),
                    &mut dcol,
                    plane as isize,
                    1,
                );
                self.col2im(&dcol, x.h, x.w, ho, wo, dx.sample_mut(i));
            }
        }
        dx
    }
}

/// Fully connected layer on `n x features` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub fin: usize,
    pub fout: usize,
}

impl Linear {
    pub fn param_count(fin: usize, fout: usize) -> usize {
        fin * fout + fout
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &[T], n: usize) -> Vec<T> {
        let wt = &p[self.weight..self.weight + self.fin * self.fout];
        let bias = &p[self.bias..self.bias + self.fout];
        let mut y: Vec<T> = (0..n).flat_map(|_| bias.iter().copied()).collect();
        // y[n, out] += x[n, in] @ W^T
        T::gemm(
            n,
            self.fin,
            self.fout,
            T::one(),
            x,
            self.fin as isize,
            1,
            wt,
            1,
            self.fin as isize,
            T::one(),
            &mut y,
            self.fout as isize,
            1,
        );
        y
    }

    pub fn backward<T: Real>(&self, p: &[T], g: &mut [T], x: &[T], dy: &[T], n: usize) -> Vec<T> {
        let wt = &p[self.weight..self.weight + self.fin * self.fout];
        for row in dy.chunks_exact(self.fout) {
            for (gb, &d) in g[self.bias..self.bias + self.fout].iter_mut().zip(row) {
                *gb += d;
            }
        }
        // dW[out, in] += dy^T @ x
        T::gemm(
            self.fout,
            n,
            self.fin,
            T::one(),
            dy,
            1,
            self.fout as isize,
            x,
            self.fin as isize,
            1,
            T::one(),
            &mut g[self.weight..self.weight + self.fin * self.fout],
            self.fin as isize,
            1,
        );
        let mut dx = vec![T::zero(); n * self.fin];
        T::gemm(
            n,
            self.fout,
            self.fin,
            T::one(),
            dy,
            self.fout as isize,
            1,
            wt,
            self.fin as isize,
            1,
            T::zero(),
            &mut dx,
            self.fin as isize,
            1,
        );
        dx
    }
}

pub const GN_EPS: f64 = 1e-5;

/// Group normalization with a per-channel affine map.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: usize,
    pub beta: usize,
    pub channels: usize,
    pub groups: usize,
}

pub struct GroupNormCache<T> {
    xhat: Tensor<T>,
    rstd: Vec<T>,
}

impl GroupNorm {
    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Tensor<T>) -> (Tensor<T>, GroupNormCache<T>) {
        let cg = self.channels / self.groups;
        let plane = x.plane();
        let len = cg * plane;
        let eps = T::of(GN_EPS);
        let mut xhat = x.same_shape();
        let mut y = x.same_shape();
        let mut rstd = Vec::with_capacity(x.n * self.groups);
        let gamma = &p[self.gamma..self.gamma + self.channels];
        let beta = &p[self.beta..self.beta + self.channels];
        let inv_len = T::one() / T::of(len as f64);
        for i in 0..x.n {
            for gi in 0..self.groups {
                let off = i * x.sample_len() + gi * len;
                let src = &x.data[off..off + len];
                let mean = lane_sum2(src, src, |v, _| v) * inv_len;
                let var = lane_sum2(src, src, |v, _| (v - mean) * (v - mean)) * inv_len;
                let r = T::one() / (var + eps).sqrt();
                rstd.push(r);
                for cj in 0..cg {
                    let c = gi * cg + cj;
                    let (gc, bc) = (gamma[c], beta[c]);
                    let range = off + cj * plane..off + (cj + 1) * plane;
                    let xs = &x.data[range.clone()];
                    let xh = &mut xhat.data[range.clone()];
                    let ys = &mut y.data[range];
                    for ((h, o), &v) in xh.iter_mut().zip(ys.iter_mut()).zip(xs) {
                        *h = (v - mean) * r;
                        *o = gc * *h + bc;
                    }
                }
            }
        }
        (y, GroupNormCache { xhat, rstd })
    }

    pub fn backward<T: Real>(&self, p: &[T], g: &mut [T], cache: &GroupNormCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let cg = self.channels / self.groups;
        let plane = dy.plane();
        let len = cg * plane;
        let n_el = T::of(len as f64);
        let mut dx = dy.same_shape();
        for i in 0..dy.n {
            for gi in 0..self.groups {
                let off = i * dy.sample_len() + gi * len;
                let r = cache.rstd[i * self.groups + gi];
                let mut sum_dxh = T::zero();
                let mut sum_dxh_xh = T::zero();
                for cj in 0..cg {
                    let c = gi * cg + cj;
                    let range = off + cj * plane..off + (cj + 1) * plane;
                    let d = &dy.data[range.clone()];
                    let xh = &cache.xhat.data[range];
                    let sd = lane_sum2(d, d, |a, _| a);
                    let sdx = lane_sum2(d, xh, |a, b| a * b);
                    g[self.gamma + c] += sdx;
                    g[self.beta + c] += sd;
                    sum_dxh += sd * p[self.gamma + c];
                    sum_dxh_xh += sdx * p[self.gamma + c];
                }
                let scale = r / n_el;
                for cj in 0..cg {
                    let gc = p[self.gamma + gi * cg + cj];
                    let range = off + cj * plane..off + (cj + 1) * plane;
                    let d = &dy.data[range.clone()];
                    let xh = &cache.xhat.data[range.clone()];
                    for ((o, &dv), &h) in dx.data[range].iter_mut().zip(d).zip(xh) {
                        *o = scale * (n_el * dv * gc - sum_dxh - h * sum_dxh_xh);
                    }
                }
            }
        }
        dx
    }
}

/// `sum(f(a[i], b[i]))` with eight independent accumulators, which
/// vectorizes and loses less precision than a single running total.
#[inline]
fn lane_sum2<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += f(x[l], y[l]);
        }
    }
    for (&x, &y) in ra.iter().zip(rb) {
        acc[0] += f(x, y);
    }
    acc.iter().copied().sum()
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (h2, w2) = (2 * x.h, 2 * x.w);
    let mut y = Tensor::zeros(x.n, x.c, h2, w2);
    for nc in 0..x.n * x.c {
        let src = &x.data[nc * x.plane()..(nc + 1) * x.plane()];
        let dst = &mut y.data[nc * h2 * w2..(nc + 1) * h2 * w2];
        for r in 0..h2 {
            for c in 0..w2 {
                dst[r * w2 + c] = src[(r / 2) * x.w + c / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for nc in 0..dy.n * dy.c {
        let src = &dy.data[nc * dy.plane()..(nc + 1) * dy.plane()];
        let dst = &mut dx.data[nc * h * w..(nc + 1) * h * w];
        for r in 0..dy.h {
            for c in 0..dy.w {
                dst[(r / 2) * w + c / 2] += src[r * dy.w + c];
            }
        }
    }
    dx
}

/// Channel concatenation `[a, b]`.
pub fn concat<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w));
    let mut y = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    for i in 0..a.n {
        let (la, lb) = (a.sample_len(), b.sample_len());
        let dst = y.sample_mut(i);
        dst[..la].copy_from_slice(a.sample(i));
        dst[la..la + lb].copy_from_slice(b.sample(i));
    }
    y
}

pub fn split<T: Real>(y: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let mut a = Tensor::zeros(y.n, ca, y.h, y.w);
    let mut b = Tensor::zeros(y.n, y.c - ca, y.h, y.w);
    for i in 0..y.n {
        let la = a.sample_len();
        let src = y.sample(i);
        a.sample_mut(i).copy_from_slice(&src[..la]);
        b.sample_mut(i).copy_from_slice(&src[la..]);
    }
    (a, b)
}

/// Adds a per-(sample, channel) bias to every pixel.
pub fn add_channel_bias<T: Real>(x: &mut Tensor<T>, bias: &[T]) {
    let plane = x.plane();
    for (nc, &b) in bias.iter().enumerate() {
        for v in &mut x.data[nc * plane..(nc + 1) * plane] {
            *v += b;
        }
    }
}

pub fn channel_bias_backward<T: Real>(dy: &Tensor<T>) -> Vec<T> {
    let plane = dy.plane();
    dy.data.chunks_exact(plane).map(|p| p.iter().copied().sum()).collect()
}

/// Scale applied to `t in [0, 1]` before the sinusoidal embedding.
pub const TIME_SCALE: f64 = 1000.0;
pub const MAX_PERIOD: f64 = 10_000.0;

/// `[cos(t * f_0..), sin(t * f_0..)]` with geometrically spaced frequencies.
pub fn timestep_embedding<T: Real>(t: &[T], dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let ts = ti.f64() * TIME_SCALE;
        let mut row = vec![T::zero(); dim];
        for i in 0..half {
            let freq = (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp();
            row[i] = T::of((ts * freq).cos());
            row[half + i] = T::of((ts * freq).sin());
        }
        out.extend(row);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from_seed, standard_normal};

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| standard_normal(&mut rng)).collect()
    }

    fn rand_tensor(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        Tensor {
            n,
            c,
            h,
            w,
            data: rand_vec(n * c * h * w, seed),
        }
    }

    /// Direct convolution oracle.
    fn conv_naive(conv: &Conv2d, p: &[f64], x: &Tensor<f64>) -> Tensor<f64> {
        let pad = (conv.k / 2) as isize;
        let ho = (x.h + 2 * pad as usize - conv.k) / conv.stride + 1;
        let wo = (x.w + 2 * pad as usize - conv.k) / conv.stride + 1;
        let mut y = Tensor::zeros(x.n, conv.cout, ho, wo);
        for i in 0..x.n {
            for co in 0..conv.cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = p[conv.bias + co];
                        for ci in 0..conv.cin {
                            for ky in 0..conv.k {
                                for kx in 0..conv.k {
                                    let iy = (oy * conv.stride) as isize + ky as isize - pad;
                                    let ix = (ox * conv.stride) as isize + kx as isize - pad;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    let wi = ((co * conv.cin + ci) * conv.k + ky) * conv.k + kx;
                                    let xi = ((i * x.c + ci) * x.h + iy as usize) * x.w + ix as usize;
                                    acc += p[conv.weight + wi] * x.data[xi];
                                }
                            }
                        }
                        y.data[((i * conv.cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_forward_matches_direct_loops() {
        for &(k, stride) in &[(3, 1), (3, 2), (1, 1)] {
            let (cin, cout) = (3, 4);
            let conv = Conv2d {
                weight: 0,
                bias: cin * cout * k * k,
                cin,
                cout,
                k,
                stride,
            };
            let p = rand_vec(Conv2d::param_count(cin, cout, k), 1);
            for (h, w) in [(6, 8), (5, 7), (1, 2)] {
                let x = rand_tensor(2, cin, h, w, 2);
                let y = conv.forward(&p, &x);
                let oracle = conv_naive(&conv, &p, &x);
                assert_eq!((y.h, y.w), (oracle.h, oracle.w));
                for (a, b) in y.data.iter().zip(&oracle.data) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    /// Checks backward passes through the adjoint identity
    /// <dy, J dx> = <J^T dy, dx> using a directional finite difference.
    #[test]
    fn conv_backward_is_the_adjoint() {
        for &(k, stride) in &[(3, 1), (3, 2), (1, 1)] {
            let (cin, cout) = (2, 3);
            let conv = Conv2d {
                weight: 0,
                bias: cin * cout * k * k,
                cin,
                cout,
                k,
                stride,
            };
            let p = rand_vec(Conv2d::param_count(cin, cout, k), 3);
            let x = rand_tensor(2, cin, 5, 7, 4);
            let y = conv.forward(&p, &x);
            let dy = rand_tensor(y.n, y.c, y.h, y.w, 5);
            let mut g = vec![0.0; p.len()];
            let dx = conv.backward(&p, &mut g, &x, &dy);
            // input direction
            let v = rand_tensor(x.n, x.c, x.h, x.w, 6);
            let eps = 1e-6;
            let mut xp = x.clone();
            for (a, b) in xp.data.iter_mut().zip(&v.data) {
                *a += eps * b;
            }
            let yp = conv.forward(&p, &xp);
            let fd: Vec<f64> = yp.data.iter().zip(&y.data).map(|(a, b)| (a - b) / eps).collect();
            assert!((dot(&dy.data, &fd) - dot(&dx.data, &v.data)).abs() < 1e-5);
            // parameter direction
            let u = rand_vec(p.len(), 7);
            let pp: Vec<f64> = p.iter().zip(&u).map(|(a, b)| a + eps * b).collect();
            let yp = conv.forward(&pp, &x);
            let fd: Vec<f64> = yp.data.iter().zip(&y.data).map(|(a, b)| (a - b) / eps).collect();
            assert!((dot(&dy.data, &fd) - dot(&g, &u)).abs() < 1e-5);
        }
    }

    #[test]
    fn group_norm_backward_matches_finite_differences() {
        let gn = GroupNorm {
            gamma: 0,
            beta: 4,
            channels: 4,
            groups: 2,
        };
        let mut p = rand_vec(8, 8);
        for v in &mut p[..4] {
            *v += 1.0;
        }
        let x = rand_tensor(2, 4, 3, 3, 9);
        let (y, cache) = gn.forward(&p, &x);
        let dy = rand_tensor(2, 4, 3, 3, 10);
        let mut g = vec![0.0; 8];
        let dx = gn.backward(&p, &mut g, &cache, &dy);
        let eps = 1e-6;
        let v = rand_tensor(2, 4, 3, 3, 11);
        let mut xp = x.clone();
        for (a, b) in xp.data.iter_mut().zip(&v.data) {
            *a += eps * b;
        }
        let mut xm = x.clone();
        for (a, b) in xm.data.iter_mut().zip(&v.data) {
            *a -= eps * b;
        }
        let (yp, _) = gn.forward(&p, &xp);
        let (ym, _) = gn.forward(&p, &xm);
        let fd: Vec<f64> = yp.data.iter().zip(&ym.data).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        let (lhs, rhs) = (dot(&dy.data, &fd), dot(&dx.data, &v.data));
        assert!((lhs - rhs).abs() < 1e-5, "{lhs} vs {rhs}");
        let u = rand_vec(8, 12);
        let pp: Vec<f64> = p.iter().zip(&u).map(|(a, b)| a + eps * b).collect();
        let (yp, _) = gn.forward(&pp, &x);
        let fd: Vec<f64> = yp.data.iter().zip(&y.data).map(|(a, b)| (a - b) / eps).collect();
        assert!((dot(&dy.data, &fd) - dot(&g, &u)).abs() < 1e-5);
    }

    #[test]
    fn group_norm_output_is_standardized() {
        let gn = GroupNorm {
            gamma: 0,
            beta: 2,
            channels: 2,
            groups: 1,
        };
        let p = vec![1.0, 1.0, 0.0, 0.0];
        let x = rand_tensor(1, 2, 5, 5, 13);
        let (y, _) = gn.forward(&p, &x);
        let mean: f64 = y.data.iter().sum::<f64>() / 50.0;
        let var: f64 = y.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn linear_backward_is_the_adjoint() {
        let lin = Linear {
            weight: 0,
            bias: 15,
            fin: 5,
            fout: 3,
        };
        let p = rand_vec(18, 14);
        let x = rand_vec(10, 15);
        let y = lin.forward(&p, &x, 2);
        let dy = rand_vec(6, 16);
        let mut g = vec![0.0; 18];
        let dx = lin.backward(&p, &mut g, &x, &dy, 2);
        let eps = 1e-6;
        let v = rand_vec(10, 17);
        let xp: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + eps * b).collect();
        let yp = lin.forward(&p, &xp, 2);
        let fd: Vec<f64> = yp.iter().zip(&y).map(|(a, b)| (a - b) / eps).collect();
        assert!((dot(&dy, &fd) - dot(&dx, &v)).abs() < 1e-6);
        let u = rand_vec(18, 18);
        let pp: Vec<f64> = p.iter().zip(&u).map(|(a, b)| a + eps * b).collect();
        let yp = lin.forward(&pp, &x, 2);
        let fd: Vec<f64> = yp.iter().zip(&y).map(|(a, b)| (a - b) / eps).collect();
        assert!((dot(&dy, &fd) - dot(&g, &u)).abs() < 1e-6);
    }

    #[test]
    fn upsample_and_concat_adjoints() {
        let x = rand_tensor(2, 3, 2, 3, 19);
        let y = upsample2(&x);
        assert_eq!((y.h, y.w), (4, 6));
        let dy = rand_tensor(2, 3, 4, 6, 20);
        let dx = upsample2_backward(&dy);
        assert!((dot(&y.data, &dy.data) - dot(&x.data, &dx.data)).abs() < 1e-12);

        let b = rand_tensor(2, 1, 2, 3, 21);
        let cat = concat(&x, &b);
        let (a2, b2) = split(&cat, 3);
        assert_eq!(a2, x);
        assert_eq!(b2, b);
    }

    #[test]
    fn silu_derivative() {
        let x = rand_tensor(1, 1, 4, 4, 22);
        let ones = Tensor {
            data: vec![1.0; 16],
            ..x
        };
        let d = silu_backward(&x, &ones);
        let eps = 1e-6;
        for (i, &v) in x.data.iter().enumerate() {
            let f = |z: f64| z / (1.0 + (-z).exp());
            let fd = (f(v + eps) - f(v - eps)) / (2.0 * eps);
            assert!((fd - d.data[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn embedding_layout() {
        let e = timestep_embedding(&[0.0f64, 0.5], 8);
        assert_eq!(e.len(), 16);
        assert_eq!(&e[0..4], &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(&e[4..8], &[0.0, 0.0, 0.0, 0.0]);
        assert!((e[8] - (500.0f64).cos()).abs() < 1e-12);
    }
}
