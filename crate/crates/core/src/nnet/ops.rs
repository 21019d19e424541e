//! Forward and backward kernels used by the tape. Plain slices in, plain
//! slices out; no allocation of graph state here.

use super::Float;

/// Mirror an out-of-range index back into `0..n` without repeating the edge
/// sample (`-1 -> 1`, `n -> n - 2`). Folds repeatedly, so any offset works.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Mirror an out-of-range index back into `0..n`, repeating the edge sample
/// (`-1 -> 0`, `n -> n - 1`). With a symmetric kernel this makes the blur
/// operator symmetric, so it preserves the image mean exactly.
pub fn symmetric_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`
pub fn gelu<F: Float>(x: F) -> F {
    let half = F::of(0.5);
    let u = F::of(GELU_C) * (x + F::of(GELU_K) * x * x * x);
    half * x * (F::one() + u.tanh())
}

pub fn gelu_grad<F: Float>(x: F) -> F {
    let half = F::of(0.5);
    let u = F::of(GELU_C) * (x + F::of(GELU_K) * x * x * x);
    let th = u.tanh();
    let du = F::of(GELU_C) * (F::one() + F::of(3.0 * GELU_K) * x * x);
    half * (F::one() + th) + half * x * (F::one() - th * th) * du
}

/// Normalized 1-D Gaussian taps `exp(-i^2 / (2 sigma^2))`, `i in -r..=r`.
pub fn gaussian_kernel(radius: usize, sigma: f64) -> Vec<f64> {
    let r = radius as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable blur of `(c, h, w)` planes with reflect padding.
pub fn blur_image(x: &[f64], c: usize, h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    blur_forward(x, c, h, w, taps)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h - self.k) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w - self.k) / self.stride + 1
    }
}

/// Valid (unpadded) cross-correlation.
pub(crate) fn conv_forward<F: Float>(x: &[F], wt: &[F], bias: Option<&[F]>, g: ConvGeom) -> Vec<F> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut out = vec![F::zero(); g.cout * ho * wo];
    for co in 0..g.cout {
        let o = &mut out[co * ho * wo..(co + 1) * ho * wo];
        if let Some(b) = bias {
            o.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..g.cin {
            let xp = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = wt[((co * g.cin + ci) * g.k + ky) * g.k + kx];
                    for oy in 0..ho {
                        let row = &xp[(oy * g.stride + ky) * g.w..];
                        let orow = &mut o[oy * wo..(oy + 1) * wo];
                        if g.stride == 1 {
                            for (ov, &xv) in orow.iter_mut().zip(&row[kx..kx + wo]) {
                                *ov += wv * xv;
                            }
                        } else {
                            for (ox, ov) in orow.iter_mut().enumerate() {
                                *ov += wv * row[ox * g.stride + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_backward<F: Float>(
    x: &[F],
    wt: &[F],
    g: ConvGeom,
    dout: &[F],
    dx: &mut [F],
    dw: &mut [F],
    db: Option<&mut [F]>,
) {
    let (ho, wo) = (g.out_h(), g.out_w());
    if let Some(db) = db {
        for co in 0..g.cout {
            db[co] += dout[co * ho * wo..(co + 1) * ho * wo].iter().copied().sum();
        }
    }
    for co in 0..g.cout {
        let d = &dout[co * ho * wo..(co + 1) * ho * wo];
        for ci in 0..g.cin {
            let base = ci * g.h * g.w;
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let widx = ((co * g.cin + ci) * g.k + ky) * g.k + kx;
                    let wv = wt[widx];
                    let mut acc = F::zero();
                    for oy in 0..ho {
                        let r = base + (oy * g.stride + ky) * g.w;
                        let drow = &d[oy * wo..(oy + 1) * wo];
                        if g.stride == 1 {
                            let xr = &x[r + kx..r + kx + wo];
                            let dxr = &mut dx[r + kx..r + kx + wo];
                            for ((&dv, &xv), dxv) in drow.iter().zip(xr).zip(dxr.iter_mut()) {
                                acc += dv * xv;
                                *dxv += wv * dv;
                            }
                        } else {
                            for (ox, &dv) in drow.iter().enumerate() {
                                let xi = r + ox * g.stride + kx;
                                acc += dv * x[xi];
                                dx[xi] += wv * dv;
                            }
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
}

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Per-channel normalization over the spatial plane. Returns the output plus
/// the normalized values and inverse deviations needed for backward.
pub(crate) fn norm_forward<F: Float>(
    x: &[F],
    c: usize,
    plane: usize,
    gamma: &[F],
    beta: &[F],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let mut out = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut inv_std = vec![F::zero(); c];
    let n = F::of(plane as f64);
    for ch in 0..c {
        let xs = &x[ch * plane..(ch + 1) * plane];
        let mean = xs.iter().copied().sum::<F>() / n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let inv = F::one() / (var + F::of(NORM_EPS)).sqrt();
        inv_std[ch] = inv;
        for i in 0..plane {
            let h = (xs[i] - mean) * inv;
            xhat[ch * plane + i] = h;
            out[ch * plane + i] = gamma[ch] * h + beta[ch];
        }
    }
    (out, xhat, inv_std)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn norm_backward<F: Float>(
    xhat: &[F],
    inv_std: &[F],
    gamma: &[F],
    c: usize,
    plane: usize,
    dout: &[F],
    dx: &mut [F],
    dgamma: &mut [F],
    dbeta: &mut [F],
) {
    let n = F::of(plane as f64);
    for ch in 0..c {
        let r = ch * plane..(ch + 1) * plane;
        let (h, d) = (&xhat[r.clone()], &dout[r.clone()]);
        let mut sum_d = F::zero();
        let mut sum_dh = F::zero();
        for (&hv, &dv) in h.iter().zip(d) {
            sum_d += dv;
            sum_dh += dv * hv;
        }
        dbeta[ch] += sum_d;
        dgamma[ch] += sum_dh;
        // d/dx of gamma * xhat: inv/N * (N dxhat - sum dxhat - xhat sum(dxhat xhat))
        let scale = gamma[ch] * inv_std[ch] / n;
        for ((&hv, &dv), dxv) in h.iter().zip(d).zip(dx[r].iter_mut()) {
            *dxv += scale * (n * dv - sum_d - hv * sum_dh);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub heads: usize,
}

impl AttnGeom {
    fn tokens(&self) -> usize {
        self.window * self.window
    }
    fn head_dim(&self) -> usize {
        self.c / self.heads
    }
    fn windows(&self) -> (usize, usize) {
        (self.h / self.window, self.w / self.window)
    }
    /// Flat spatial offset of token `t` in window `(wy, wx)`.
    fn pos(&self, wy: usize, wx: usize, t: usize) -> usize {
        let y = wy * self.window + t / self.window;
        let x = wx * self.window + t % self.window;
        y * self.w + x
    }
    pub fn prob_len(&self) -> usize {
        let (nh, nw) = self.windows();
        nh * nw * self.heads * self.tokens() * self.tokens()
    }
}

/// Windowed scaled dot-product attention. Returns the output and the softmax
/// probabilities laid out `[window][head][query][key]`.
pub(crate) fn attn_forward<F: Float>(q: &[F], k: &[F], v: &[F], g: AttnGeom) -> (Vec<F>, Vec<F>) {
    let n = g.tokens();
    let d = g.head_dim();
    let plane = g.h * g.w;
    let scale = F::of(1.0 / (d as f64).sqrt());
    let (nh, nw) = g.windows();
    let mut out = vec![F::zero(); q.len()];
    let mut probs = vec![F::zero(); g.prob_len()];
    let mut row = vec![F::zero(); n];
    for wy in 0..nh {
        for wx in 0..nw {
            let pos: Vec<usize> = (0..n).map(|t| g.pos(wy, wx, t)).collect();
            for head in 0..g.heads {
                let ch0 = head * d;
                let pbase = ((wy * nw + wx) * g.heads + head) * n * n;
                for t in 0..n {
                    let mut max = F::neg_infinity();
                    for u in 0..n {
                        let mut s = F::zero();
                        for j in 0..d {
                            let cp = (ch0 + j) * plane;
                            s += q[cp + pos[t]] * k[cp + pos[u]];
                        }
                        s *= scale;
                        row[u] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut total = F::zero();
                    for r in row.iter_mut() {
                        *r = (*r - max).exp();
                        total += *r;
                    }
                    for u in 0..n {
                        let p = row[u] / total;
                        probs[pbase + t * n + u] = p;
                        for j in 0..d {
                            let cp = (ch0 + j) * plane;
                            out[cp + pos[t]] += p * v[cp + pos[u]];
                        }
                    }
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attn_backward<F: Float>(
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    g: AttnGeom,
    dout: &[F],
    dq: &mut [F],
    dk: &mut [F],
    dv: &mut [F],
) {
    let n = g.tokens();
    let d = g.head_dim();
    let plane = g.h * g.w;
    let scale = F::of(1.0 / (d as f64).sqrt());
    let (nh, nw) = g.windows();
    let mut dp = vec![F::zero(); n];
    for wy in 0..nh {
        for wx in 0..nw {
            let pos: Vec<usize> = (0..n).map(|t| g.pos(wy, wx, t)).collect();
            for head in 0..g.heads {
                let ch0 = head * d;
                let pbase = ((wy * nw + wx) * g.heads + head) * n * n;
                for t in 0..n {
                    let p = &probs[pbase + t * n..pbase + (t + 1) * n];
                    // dP[t][u] = dO[t] . V[u]; dV[u] += P[t][u] dO[t]
                    let mut dot = F::zero();
                    for u in 0..n {
                        let mut s = F::zero();
                        for j in 0..d {
                            let cp = (ch0 + j) * plane;
                            let go = dout[cp + pos[t]];
                            s += go * v[cp + pos[u]];
                            dv[cp + pos[u]] += p[u] * go;
                        }
                        dp[u] = s;
                        dot += s * p[u];
                    }
                    for u in 0..n {
                        let ds = p[u] * (dp[u] - dot) * scale;
                        for j in 0..d {
                            let cp = (ch0 + j) * plane;
                            dq[cp + pos[t]] += ds * k[cp + pos[u]];
                            dk[cp + pos[u]] += ds * q[cp + pos[t]];
                        }
                    }
                }
            }
        }
    }
}

/// Separable blur with reflect borders: horizontal pass then vertical pass.
pub(crate) fn blur_forward<F: Float>(x: &[F], c: usize, h: usize, w: usize, taps: &[F]) -> Vec<F> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![F::zero(); x.len()];
    let mut out = vec![F::zero(); x.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for xx in 0..w {
                let mut s = F::zero();
                for (i, &wt) in taps.iter().enumerate() {
                    let sx = symmetric_index(xx as isize + i as isize - r, w);
                    s += wt * x[base + y * w + sx];
                }
                tmp[base + y * w + xx] = s;
            }
        }
        for y in 0..h {
            for xx in 0..w {
                let mut s = F::zero();
                for (i, &wt) in taps.iter().enumerate() {
                    let sy = symmetric_index(y as isize + i as isize - r, h);
                    s += wt * tmp[base + sy * w + xx];
                }
                out[base + y * w + xx] = s;
            }
        }
    }
    out
}

/// Adjoint of [`blur_forward`]: accumulates into `dx`.
pub(crate) fn blur_adjoint<F: Float>(dout: &[F], c: usize, h: usize, w: usize, taps: &[F], dx: &mut [F]) {
    let r = (taps.len() / 2) as isize;
    let mut dtmp = vec![F::zero(); dout.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for xx in 0..w {
                let g = dout[base + y * w + xx];
                for (i, &wt) in taps.iter().enumerate() {
                    let sy = symmetric_index(y as isize + i as isize - r, h);
                    dtmp[base + sy * w + xx] += wt * g;
                }
            }
        }
        for y in 0..h {
            for xx in 0..w {
                let g = dtmp[base + y * w + xx];
                for (i, &wt) in taps.iter().enumerate() {
                    let sx = symmetric_index(xx as isize + i as isize - r, w);
                    dx[base + y * w + sx] += wt * g;
                }
            }
        }
    }
}
