//! Slice-level kernels shared by the graph operations and by the test oracles'
//! counterparts. Layouts are row-major with the channel axis last.

use crate::Real;

/// `c = beta * c + op(a) op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// With `ta` set, `a` is stored as `k x m`; with `tb`, `b` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    beta: T,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above; strides describe dense row-major storage.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Column layout of a same-padded 2-D patch extraction over `[batch, t, f, c]`:
/// one row per output position, columns ordered `(dt, df, c)`.
pub fn im2col_2d<T: Real>(
    x: &[T],
    dims: [usize; 4],
    kt: usize,
    kf: usize,
) -> Vec<T> {
    let [nb, nt, nf, nc] = dims;
    let (pt, pf) = (kt / 2, kf / 2);
    let row = kt * kf * nc;
    let mut cols = vec![T::zero(); nb * nt * nf * row];
    for b in 0..nb {
        for t in 0..nt {
            for f in 0..nf {
                let r = ((b * nt + t) * nf + f) * row;
                for dt in 0..kt {
                    let st = t as isize + dt as isize - pt as isize;
                    if st < 0 || st >= nt as isize {
                        continue;
                    }
                    for df in 0..kf {
                        let sf = f as isize + df as isize - pf as isize;
                        if sf < 0 || sf >= nf as isize {
                            continue;
                        }
                        let src = ((b * nt + st as usize) * nf + sf as usize) * nc;
                        let dst = r + (dt * kf + df) * nc;
                        cols[dst..dst + nc].copy_from_slice(&x[src..src + nc]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col_2d`]: scatter-adds column gradients back onto the input.
pub fn col2im_2d<T: Real>(cols: &[T], dims: [usize; 4], kt: usize, kf: usize, gx: &mut [T]) {
    let [nb, nt, nf, nc] = dims;
    let (pt, pf) = (kt / 2, kf / 2);
    let row = kt * kf * nc;
    for b in 0..nb {
        for t in 0..nt {
            for f in 0..nf {
                let r = ((b * nt + t) * nf + f) * row;
                for dt in 0..kt {
                    let st = t as isize + dt as isize - pt as isize;
                    if st < 0 || st >= nt as isize {
                        continue;
                    }
                    for df in 0..kf {
                        let sf = f as isize + df as isize - pf as isize;
                        if sf < 0 || sf >= nf as isize {
                            continue;
                        }
                        let dst = ((b * nt + st as usize) * nf + sf as usize) * nc;
                        let src = r + (dt * kf + df) * nc;
                        for c in 0..nc {
                            gx[dst + c] += cols[src + c];
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded 1-D patches over `[batch, seq, c]` restricted to channels
/// `c0..c0 + cl`; columns ordered `(dk, c)`.
pub fn im2col_1d<T: Real>(x: &[T], dims: [usize; 3], k: usize, c0: usize, cl: usize) -> Vec<T> {
    let [nb, ns, nc] = dims;
    let p = k / 2;
    let row = k * cl;
    let mut cols = vec![T::zero(); nb * ns * row];
    for b in 0..nb {
        for s in 0..ns {
            let r = (b * ns + s) * row;
            for dk in 0..k {
                let ss = s as isize + dk as isize - p as isize;
                if ss < 0 || ss >= ns as isize {
                    continue;
                }
                let src = (b * ns + ss as usize) * nc + c0;
                let dst = r + dk * cl;
                cols[dst..dst + cl].copy_from_slice(&x[src..src + cl]);
            }
        }
    }
    cols
}

pub fn col2im_1d<T: Real>(
    cols: &[T],
    dims: [usize; 3],
    k: usize,
    c0: usize,
    cl: usize,
    gx: &mut [T],
) {
    let [nb, ns, nc] = dims;
    let p = k / 2;
    let row = k * cl;
    for b in 0..nb {
        for s in 0..ns {
            let r = (b * ns + s) * row;
            for dk in 0..k {
                let ss = s as isize + dk as isize - p as isize;
                if ss < 0 || ss >= ns as isize {
                    continue;
                }
                let dst = (b * ns + ss as usize) * nc + c0;
                let src = r + dk * cl;
                for c in 0..cl {
                    gx[dst + c] += cols[src + c];
                }
            }
        }
    }
}

/// Copies a `rows x cols` sub-block starting at column `c0` of a matrix with
/// `stride` columns into a dense buffer.
pub fn take_columns<T: Real>(src: &[T], rows: usize, stride: usize, c0: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        out.extend_from_slice(&src[r * stride + c0..r * stride + c0 + cols]);
    }
    out
}

pub fn put_columns<T: Real>(dst: &mut [T], rows: usize, stride: usize, c0: usize, block: &[T]) {
    let cols = block.len() / rows.max(1);
    for r in 0..rows {
        dst[r * stride + c0..r * stride + c0 + cols].copy_from_slice(&block[r * cols..(r + 1) * cols]);
    }
}

pub fn add_columns<T: Real>(dst: &mut [T], rows: usize, stride: usize, c0: usize, block: &[T]) {
    let cols = block.len() / rows.max(1);
    for r in 0..rows {
        for (d, &s) in dst[r * stride + c0..r * stride + c0 + cols]
            .iter_mut()
            .zip(&block[r * cols..(r + 1) * cols])
        {
            *d += s;
        }
    }
}

/// Layer normalization over rows of width `c`. Returns the output plus per-row
/// mean and reciprocal standard deviation.
pub fn layer_norm_fwd<T: Real>(x: &[T], c: usize, gain: &[T], bias: &[T], eps: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / c;
    let mut y = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let inv_c = T::one() / T::of(c as f64);
    for r in 0..rows {
        let xr = &x[r * c..(r + 1) * c];
        let mean = xr.iter().copied().sum::<T>() * inv_c;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let rstd = T::one() / (var + eps).sqrt();
        for (i, (o, &v)) in y[r * c..(r + 1) * c].iter_mut().zip(xr).enumerate() {
            *o = (v - mean) * rstd * gain[i] + bias[i];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (y, means, rstds)
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_bwd<T: Real>(
    x: &[T],
    c: usize,
    gain: &[T],
    means: &[T],
    rstds: &[T],
    gy: &[T],
    gx: &mut [T],
    ggain: &mut [T],
    gbias: &mut [T],
) {
    let inv_c = T::one() / T::of(c as f64);
    let mut dxhat = vec![T::zero(); c];
    for r in 0..x.len() / c {
        let (mean, rstd) = (means[r], rstds[r]);
        let xr = &x[r * c..(r + 1) * c];
        let gr = &gy[r * c..(r + 1) * c];
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for i in 0..c {
            let xhat = (xr[i] - mean) * rstd;
            ggain[i] += gr[i] * xhat;
            gbias[i] += gr[i];
            dxhat[i] = gr[i] * gain[i];
            m1 += dxhat[i];
            m2 += dxhat[i] * xhat;
        }
        m1 *= inv_c;
        m2 *= inv_c;
        for i in 0..c {
            let xhat = (xr[i] - mean) * rstd;
            gx[r * c + i] += rstd * (dxhat[i] - m1 - xhat * m2);
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    // exp overflow saturates to +inf and yields the correct limit 0.
    T::one() / (T::one() + (-x).exp())
}

/// `y = a * swish(b)` with `(a, b)` the two halves of each row of width `2h`.
pub fn swiglu_fwd<T: Real>(x: &[T], h: usize) -> Vec<T> {
    let rows = x.len() / (2 * h);
    let mut y = Vec::with_capacity(rows * h);
    for r in 0..rows {
        let xr = &x[r * 2 * h..(r + 1) * 2 * h];
        for i in 0..h {
            let (a, b) = (xr[i], xr[h + i]);
            y.push(a * b * sigmoid(b));
        }
    }
    y
}

pub fn swiglu_bwd<T: Real>(x: &[T], h: usize, gy: &[T], gx: &mut [T]) {
    let rows = x.len() / (2 * h);
    for r in 0..rows {
        let base = r * 2 * h;
        for i in 0..h {
            let (a, b) = (x[base + i], x[base + h + i]);
            let s = sigmoid(b);
            let g = gy[r * h + i];
            gx[base + i] += g * b * s;
            gx[base + h + i] += g * a * (s + b * s * (T::one() - s));
        }
    }
}

/// Cosine/sine table `[seq, d/2]` for rotary embeddings at positions `offset..offset+seq`.
pub fn rope_table<T: Real>(seq: usize, d: usize, base: f64, offset: f64) -> (Vec<T>, Vec<T>) {
    let half = d / 2;
    let mut cos = Vec::with_capacity(seq * half);
    let mut sin = Vec::with_capacity(seq * half);
    for s in 0..seq {
        let pos = offset + s as f64;
        for i in 0..half {
            let theta = base.powf(-(2.0 * i as f64) / d as f64);
            let a = pos * theta;
            cos.push(T::of(a.cos()));
            sin.push(T::of(a.sin()));
        }
    }
    (cos, sin)
}

/// Rotates consecutive pairs of the last axis of `[n, seq, heads, d]`.
/// `inverse` applies the transpose rotation (used for gradients).
pub fn rope_apply<T: Real>(
    x: &[T],
    dims: [usize; 4],
    cos: &[T],
    sin: &[T],
    inverse: bool,
    out: &mut [T],
) {
    let [n, seq, heads, d] = dims;
    let half = d / 2;
    for b in 0..n {
        for s in 0..seq {
            let tc = &cos[s * half..(s + 1) * half];
            let ts = &sin[s * half..(s + 1) * half];
            for h in 0..heads {
                let o = ((b * seq + s) * heads + h) * d;
                for i in 0..half {
                    let (x0, x1) = (x[o + 2 * i], x[o + 2 * i + 1]);
                    let (c, sn) = (tc[i], if inverse { -ts[i] } else { ts[i] });
                    out[o + 2 * i] += x0 * c - x1 * sn;
                    out[o + 2 * i + 1] += x0 * sn + x1 * c;
                }
            }
        }
    }
}

/// Softmax over rows of width `w`, in place.
pub fn softmax_rows<T: Real>(x: &mut [T], w: usize) {
    for row in x.chunks_mut(w) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Geometry of a scaled dot-product attention call on `[n, seq, heads, d]` tensors.
#[derive(Debug, Clone, Copy)]
pub struct AttnDims {
    pub n: usize,
    pub sq: usize,
    pub sk: usize,
    pub heads: usize,
    pub d: usize,
    pub causal: bool,
}

impl AttnDims {
    #[inline]
    fn visible(&self, i: usize) -> usize {
        if self.causal {
            (i + 1).min(self.sk)
        } else {
            self.sk
        }
    }
}

/// Strided `c = alpha * a @ b + beta * c` for `a [m, k]`, `b [k, n]`, `c [m, n]`.
/// Strides are `(row, col)` pairs in elements.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm_strided<T: Real>(
    (m, kk, nn): (usize, usize, usize),
    alpha: T,
    a: &[T],
    sa: (usize, usize),
    b: &[T],
    sb: (usize, usize),
    beta: T,
    c: &mut [T],
    sc: (usize, usize),
) {
    if m == 0 || nn == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, s: (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * s.0 + (cols - 1) * s.1 + 1
        }
    };
    assert!(a.len() >= span(m, kk, sa) && b.len() >= span(kk, nn, sb));
    assert!(c.len() >= span(m, nn, sc));
    // SAFETY: every accessed element lies within the slices checked above.
    unsafe {
        T::gemm_raw(
            m,
            kk,
            nn,
            alpha,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}

/// Returns `(out [n, sq, heads, d], probs [n, heads, sq, sk])`.
pub fn attention_fwd<T: Real>(q: &[T], k: &[T], v: &[T], g: AttnDims) -> (Vec<T>, Vec<T>) {
    let AttnDims { n, sq, sk, heads, d, .. } = g;
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut out = vec![T::zero(); n * sq * heads * d];
    let mut probs = vec![T::zero(); n * heads * sq * sk];
    let row = heads * d;
    for b in 0..n {
        for h in 0..heads {
            let qb = &q[b * sq * row + h * d..];
            let kb = &k[b * sk * row + h * d..];
            let vb = &v[b * sk * row + h * d..];
            let pb = &mut probs[(b * heads + h) * sq * sk..(b * heads + h + 1) * sq * sk];
            gemm_strided((sq, d, sk), scale, qb, (row, 1), kb, (1, row), T::zero(), pb, (sk, 1));
            for (i, r) in pb.chunks_mut(sk).enumerate() {
                let vis = g.visible(i);
                softmax_rows(&mut r[..vis], vis);
                r[vis..].fill(T::zero());
            }
            let ob = &mut out[b * sq * row + h * d..];
            gemm_strided((sq, sk, d), T::one(), pb, (sk, 1), vb, (row, 1), T::zero(), ob, (row, 1));
        }
    }
    (out, probs)
}

/// Accumulates gradients of [`attention_fwd`] into `gq`, `gk`, `gv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_bwd<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    gout: &[T],
    g: AttnDims,
    gq: &mut [T],
    gk: &mut [T],
    gv: &mut [T],
) {
    let AttnDims { n, sq, sk, heads, d, .. } = g;
    let scale = T::one() / T::of(d as f64).sqrt();
    let row = heads * d;
    let mut ds = vec![T::zero(); sq * sk];
    for b in 0..n {
        for h in 0..heads {
            let (qo, ko) = (b * sq * row + h * d, b * sk * row + h * d);
            let pb = &probs[(b * heads + h) * sq * sk..(b * heads + h + 1) * sq * sk];
            let go = &gout[qo..];
            // dV += P^T dO
            gemm_strided((sk, sq, d), T::one(), pb, (1, sk), go, (row, 1), T::one(), &mut gv[ko..], (row, 1));
            // dP = dO V^T
            gemm_strided((sq, d, sk), T::one(), go, (row, 1), &v[ko..], (1, row), T::zero(), &mut ds, (sk, 1));
            for (dr, pr) in ds.chunks_mut(sk).zip(pb.chunks(sk)) {
                let dot = dr.iter().zip(pr).fold(T::zero(), |acc, (&a, &p)| acc + a * p);
                for (x, &p) in dr.iter_mut().zip(pr) {
                    *x = p * (*x - dot);
                }
            }
            // dQ += scale dS K, dK += scale dS^T Q
            gemm_strided((sq, sk, d), scale, &ds, (sk, 1), &k[ko..], (row, 1), T::one(), &mut gq[qo..], (row, 1));
            gemm_strided((sk, sq, d), scale, &ds, (1, sk), &q[qo..], (row, 1), T::one(), &mut gk[ko..], (row, 1));
        }
    }
}

/// General axis permutation: `out.shape[i] = shape[perm[i]]`.
pub fn permute<T: Real>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = crate::tensor::strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    if x.is_empty() {
        return out;
    }
    // Copy contiguous runs when the innermost axis is kept in place.
    let inner = if perm[rank - 1] == rank - 1 {
        shape[rank - 1]
    } else {
        1
    };
    let outer_rank = if inner > 1 { rank - 1 } else { rank };
    let mut idx = vec![0usize; outer_rank];
    loop {
        let src: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.extend_from_slice(&x[src..src + inner]);
        let mut ax = outer_rank;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
