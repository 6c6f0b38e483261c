//! Raw loops behind the graph operations. All buffers are row-major.

use super::scalar::{c, Real};

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[m,k] += d[m,n] * b[k,n]^T`
pub(crate) fn matmul_a_bt_acc<T: Real>(
    d: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let drow = &d[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&dv, &bv) in drow.iter().zip(brow) {
                s = s + dv * bv;
            }
            out[i * k + p] = out[i * k + p] + s;
        }
    }
}

/// `out[k,n] += a[m,k]^T * d[m,n]`
pub(crate) fn matmul_at_b_acc<T: Real>(
    a: &[T],
    d: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let drow = &d[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &dv) in orow.iter_mut().zip(drow) {
                *o = *o + av * dv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub ci: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Calls `f(oy, ox, ky, kx, iy, ix)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        for oy in 0..self.ho {
            for ky in 0..self.k {
                let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                if iy < 0 || iy as usize >= self.h {
                    continue;
                }
                for ox in 0..self.wo {
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix as usize >= self.w {
                            continue;
                        }
                        f(oy, ox, ky, kx, iy as usize, ix as usize);
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], w: &[T], g: ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.ho * g.wo * g.co];
    g.for_each_tap(|oy, ox, ky, kx, iy, ix| {
        let xrow = &x[(iy * g.w + ix) * g.ci..(iy * g.w + ix + 1) * g.ci];
        let obase = (oy * g.wo + ox) * g.co;
        let orow = &mut out[obase..obase + g.co];
        let wbase = (ky * g.k + kx) * g.ci * g.co;
        for (cin, &xv) in xrow.iter().enumerate() {
            if xv == T::zero() {
                continue;
            }
            let wrow = &w[wbase + cin * g.co..wbase + (cin + 1) * g.co];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o = *o + xv * wv;
            }
        }
    });
    out
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    g.for_each_tap(|oy, ox, ky, kx, iy, ix| {
        let obase = (oy * g.wo + ox) * g.co;
        let drow = &dout[obase..obase + g.co];
        let xbase = (iy * g.w + ix) * g.ci;
        let wbase = (ky * g.k + kx) * g.ci * g.co;
        for cin in 0..g.ci {
            let wrow = &w[wbase + cin * g.co..wbase + (cin + 1) * g.co];
            if let Some(dx) = dx.as_deref_mut() {
                let mut s = T::zero();
                for (&wv, &dv) in wrow.iter().zip(drow) {
                    s = s + wv * dv;
                }
                dx[xbase + cin] = dx[xbase + cin] + s;
            }
            if let Some(dw) = dw.as_deref_mut() {
                let xv = x[xbase + cin];
                if xv != T::zero() {
                    let dwrow = &mut dw[wbase + cin * g.co..wbase + (cin + 1) * g.co];
                    for (o, &dv) in dwrow.iter_mut().zip(drow) {
                        *o = *o + xv * dv;
                    }
                }
            }
        }
    });
}

/// Source index pair and weight for align-corners-false bilinear resampling
/// along one axis.
pub(crate) fn bilinear_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let lambda = if i0 == i1 { 0.0 } else { pos - i0 as f64 };
            (i0, i1, lambda)
        })
        .collect()
}

pub(crate) fn bilinear_forward<T: Real>(
    x: &[T],
    h: usize,
    w: usize,
    ch: usize,
    th: usize,
    tw: usize,
) -> Vec<T> {
    if h == th && w == tw {
        return x.to_vec();
    }
    let ys = bilinear_axis(h, th);
    let xs = bilinear_axis(w, tw);
    let mut out = vec![T::zero(); th * tw * ch];
    for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
        let ly: T = c(ly);
        for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
            let lx: T = c(lx);
            let o = &mut out[(oy * tw + ox) * ch..(oy * tw + ox + 1) * ch];
            for (cc, ov) in o.iter_mut().enumerate() {
                let v00 = x[(y0 * w + x0) * ch + cc];
                let v01 = x[(y0 * w + x1) * ch + cc];
                let v10 = x[(y1 * w + x0) * ch + cc];
                let v11 = x[(y1 * w + x1) * ch + cc];
                // lerp form keeps constant inputs exact
                let top = v00 + lx * (v01 - v00);
                let bot = v10 + lx * (v11 - v10);
                *ov = top + ly * (bot - top);
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward<T: Real>(
    dout: &[T],
    dx: &mut [T],
    h: usize,
    w: usize,
    ch: usize,
    th: usize,
    tw: usize,
) {
    if h == th && w == tw {
        for (d, &g) in dx.iter_mut().zip(dout) {
            *d = *d + g;
        }
        return;
    }
    let ys = bilinear_axis(h, th);
    let xs = bilinear_axis(w, tw);
    for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
        let ly: T = c(ly);
        for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
            let lx: T = c(lx);
            let taps = [
                ((y0 * w + x0) * ch, (T::one() - ly) * (T::one() - lx)),
                ((y0 * w + x1) * ch, (T::one() - ly) * lx),
                ((y1 * w + x0) * ch, ly * (T::one() - lx)),
                ((y1 * w + x1) * ch, ly * lx),
            ];
            let d = &dout[(oy * tw + ox) * ch..(oy * tw + ox + 1) * ch];
            for (base, wt) in taps {
                for (cc, &dv) in d.iter().enumerate() {
                    dx[base + cc] = dx[base + cc] + wt * dv;
                }
            }
        }
    }
}

/// Multi-head scaled dot-product attention over `[n, d]` inputs.
/// Returns the output and the attention probabilities `[heads, n, n]`.
pub(crate) fn attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    n: usize,
    d: usize,
    heads: usize,
    causal: bool,
) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale: T = c(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); n * d];
    let mut probs = vec![T::zero(); heads * n * n];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let prow = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
            let jmax = if causal { i + 1 } else { n };
            let qi = &q[i * d + off..i * d + off + dh];
            let mut mx = T::neg_infinity();
            for (j, p) in prow.iter_mut().enumerate().take(jmax) {
                let kj = &k[j * d + off..j * d + off + dh];
                let mut s = T::zero();
                for (&a, &b) in qi.iter().zip(kj) {
                    s = s + a * b;
                }
                *p = s * scale;
                mx = mx.max(*p);
            }
            let mut z = T::zero();
            for p in prow.iter_mut().take(jmax) {
                *p = (*p - mx).exp();
                z = z + *p;
            }
            for p in prow.iter_mut().take(jmax) {
                *p = *p / z;
            }
            let orow = &mut out[i * d + off..i * d + off + dh];
            for (j, &p) in prow.iter().enumerate().take(jmax) {
                let vj = &v[j * d + off..j * d + off + dh];
                for (o, &vv) in orow.iter_mut().zip(vj) {
                    *o = *o + p * vv;
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    n: usize,
    d: usize,
    heads: usize,
    causal: bool,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let dh = d / heads;
    let scale: T = c(1.0 / (dh as f64).sqrt());
    let mut dp = vec![T::zero(); n];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let jmax = if causal { i + 1 } else { n };
            let prow = &probs[(h * n + i) * n..(h * n + i + 1) * n];
            let doi = &dout[i * d + off..i * d + off + dh];
            let mut dot = T::zero();
            for j in 0..jmax {
                let vj = &v[j * d + off..j * d + off + dh];
                let mut s = T::zero();
                for (&a, &b) in doi.iter().zip(vj) {
                    s = s + a * b;
                }
                dp[j] = s;
                dot = dot + s * prow[j];
                let dvj = &mut dv[j * d + off..j * d + off + dh];
                for (o, &g) in dvj.iter_mut().zip(doi) {
                    *o = *o + prow[j] * g;
                }
            }
            for j in 0..jmax {
                let ds = prow[j] * (dp[j] - dot) * scale;
                if ds == T::zero() {
                    continue;
                }
                for t in 0..dh {
                    dq[i * d + off + t] = dq[i * d + off + t] + ds * k[j * d + off + t];
                    dk[j * d + off + t] = dk[j * d + off + t] + ds * q[i * d + off + t];
                }
            }
        }
    }
}
