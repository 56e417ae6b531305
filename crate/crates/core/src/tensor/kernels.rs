//! Forward and backward kernels on raw row-major slices.
//!
//! These carry no bookkeeping; the tape and the tape-free inference paths
//! both call them, which keeps training and probing numerically identical.

use super::Real;

/// `c (+)= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
/// With `ta`, `a` is stored `k×m`; with `tb`, `b` is stored `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Real>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "matmul: lhs size");
    assert_eq!(b.len(), k * n, "matmul: rhs size");
    assert_eq!(c.len(), m * n, "matmul: out size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: sizes asserted above; `c` is a distinct &mut borrow.
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

/// `y = x·W + b` for `x: rows×d_in`, `W: d_in×d_out`.
pub fn affine<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, rows: usize, d_in: usize, d_out: usize) -> Vec<T> {
    let mut y = match b {
        Some(b) => {
            let mut y = Vec::with_capacity(rows * d_out);
            for _ in 0..rows {
                y.extend_from_slice(b);
            }
            y
        }
        None => vec![T::zero(); rows * d_out],
    };
    matmul(x, w, &mut y, rows, d_in, d_out, false, false, b.is_some());
    y
}

pub struct AffineGrads<T> {
    pub dx: Vec<T>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn affine_backward<T: Real>(
    dy: &[T],
    x: &[T],
    w: &[T],
    rows: usize,
    d_in: usize,
    d_out: usize,
) -> AffineGrads<T> {
    let mut dx = vec![T::zero(); rows * d_in];
    matmul(dy, w, &mut dx, rows, d_out, d_in, false, true, false);
    let mut dw = vec![T::zero(); d_in * d_out];
    matmul(x, dy, &mut dw, d_in, rows, d_out, true, false, false);
    let mut db = vec![T::zero(); d_out];
    for row in dy.chunks_exact(d_out) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    AffineGrads { dx, dw, db }
}

/// Saved statistics of a layer norm forward pass.
pub struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Real>(
    x: &[T],
    gain: &[T],
    shift: &[T],
    d: usize,
    eps: T,
) -> (Vec<T>, LayerNormCache<T>) {
    let rows = x.len() / d;
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (xr[c] - mean) * rs;
            xhat[r * d + c] = h;
            y[r * d + c] = h * gain[c] + shift[c];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

/// Returns `(dx, dgain, dshift)`.
pub fn layer_norm_backward<T: Real>(
    dy: &[T],
    cache: &LayerNormCache<T>,
    gain: &[T],
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = dy.len() / d;
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut dx = vec![T::zero(); dy.len()];
    let mut dg = vec![T::zero(); d];
    let mut ds = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for c in 0..d {
            dg[c] += dyr[c] * xh[c];
            ds[c] += dyr[c];
            dxhat[c] = dyr[c] * gain[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xh[c];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let rs = cache.rstd[r];
        for c in 0..d {
            dx[r * d + c] = rs * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    (dx, dg, ds)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// Numerically stable softmax over each row of width `d`.
pub fn softmax_rows<T: Real>(x: &[T], d: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (o, &v) in yr.iter_mut().zip(xr) {
            *o = (v - max).exp();
            sum += *o;
        }
        let inv = T::one() / sum;
        for o in yr.iter_mut() {
            *o *= inv;
        }
    }
    y
}

pub fn softmax_rows_backward<T: Real>(dy: &[T], y: &[T], d: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); dy.len()];
    for ((dyr, yr), dxr) in dy.chunks_exact(d).zip(y.chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
        let dot: T = dyr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
        for c in 0..d {
            dxr[c] = yr[c] * (dyr[c] - dot);
        }
    }
    dx
}

/// Geometry of a batched multi-head attention call. Rows of `q`, `k`, `v`
/// are ordered `batch`-major, then position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnShape {
    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    fn probs_len(&self) -> usize {
        self.batch * self.heads * self.seq * self.seq
    }
}

/// Causal scaled dot-product attention on already-projected `q`, `k`, `v`.
/// Returns the mixed values and the attention weights `[batch, head, i, j]`,
/// which are exactly zero for `j > i`.
pub fn attention_mix<T: Real>(q: &[T], k: &[T], v: &[T], s: AttnShape) -> (Vec<T>, Vec<T>) {
    let d = s.model_dim();
    let scale = T::one() / T::from_usize(s.head_dim).unwrap().sqrt();
    let mut out = vec![T::zero(); q.len()];
    let mut probs = vec![T::zero(); s.probs_len()];
    let mut scores = vec![T::zero(); s.seq];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let off = h * s.head_dim;
            for i in 0..s.seq {
                let qi = &q[(b * s.seq + i) * d + off..][..s.head_dim];
                let mut max = T::neg_infinity();
                for (j, sc) in scores.iter_mut().enumerate().take(i + 1) {
                    let kj = &k[(b * s.seq + j) * d + off..][..s.head_dim];
                    *sc = qi.iter().zip(kj).map(|(&a, &c)| a * c).sum::<T>() * scale;
                    max = max.max(*sc);
                }
                let p = &mut probs[((b * s.heads + h) * s.seq + i) * s.seq..][..s.seq];
                let mut sum = T::zero();
                for j in 0..=i {
                    p[j] = (scores[j] - max).exp();
                    sum += p[j];
                }
                let inv = T::one() / sum;
                let oi = &mut out[(b * s.seq + i) * d + off..][..s.head_dim];
                for j in 0..=i {
                    p[j] *= inv;
                    let vj = &v[(b * s.seq + j) * d + off..][..s.head_dim];
                    for (o, &vv) in oi.iter_mut().zip(vj) {
                        *o += p[j] * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
pub fn attention_mix_backward<T: Real>(
    dout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    s: AttnShape,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = s.model_dim();
    let scale = T::one() / T::from_usize(s.head_dim).unwrap().sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); s.seq];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let off = h * s.head_dim;
            for i in 0..s.seq {
                let row_i = (b * s.seq + i) * d + off;
                let p = &probs[((b * s.heads + h) * s.seq + i) * s.seq..][..s.seq];
                let doi = &dout[row_i..][..s.head_dim];
                let mut dot = T::zero();
                for j in 0..=i {
                    let row_j = (b * s.seq + j) * d + off;
                    let vj = &v[row_j..][..s.head_dim];
                    dp[j] = doi.iter().zip(vj).map(|(&a, &c)| a * c).sum();
                    dot += p[j] * dp[j];
                    let dvj = &mut dv[row_j..][..s.head_dim];
                    for (g, &o) in dvj.iter_mut().zip(doi) {
                        *g += p[j] * o;
                    }
                }
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let row_j = (b * s.seq + j) * d + off;
                    for c in 0..s.head_dim {
                        dq[row_i + c] += ds * k[row_j + c];
                        dk[row_j + c] += ds * q[row_i + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Mean negative log-likelihood over the rows that carry a target.
/// Returns `(loss, softmax probabilities, number of targeted rows)`.
pub fn cross_entropy<T: Real>(logits: &[T], targets: &[Option<u32>], v: usize) -> (T, Vec<T>, usize) {
    let probs = softmax_rows(logits, v);
    let mut total = T::zero();
    let mut count = 0usize;
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            let row = &logits[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            total += lse - row[t as usize];
            count += 1;
        }
    }
    let loss = if count == 0 {
        T::zero()
    } else {
        total / T::from_usize(count).unwrap()
    };
    (loss, probs, count)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul(&a, &b, &mut c, 2, 2, 2, false, false, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        matmul(&a, &b, &mut c, 2, 2, 2, true, false, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        matmul(&a, &b, &mut c, 2, 2, 2, false, true, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        matmul(&a, &b, &mut c, 2, 2, 2, false, true, true);
        assert_eq!(c, [34.0, 46.0, 78.0, 106.0]);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_192).abs() < 1e-5);
        assert!(gelu(-10.0f64).abs() < 1e-12);
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let y = softmax_rows(&[3.0f64; 7], 7);
        for p in y {
            assert!((p - 1.0 / 7.0).abs() < 1e-15);
        }
    }
}
