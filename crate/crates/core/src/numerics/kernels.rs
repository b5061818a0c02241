//! Slice-level kernels shared by the autodiff tape and the cached inference path.

use super::tensor::Real;

pub const LN_EPS: f64 = 1e-5;

/// out[m×n] += a[m×k] · b[k×n]
pub fn matmul_acc<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×k] += a[m×n] · b[k×n]ᵀ
pub fn matmul_bt_acc<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += dot(arow, brow);
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
pub fn matmul_at_acc<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Normalizes `x` in place to zero mean / unit variance; returns 1/σ.
pub fn normalize_row<S: Real>(x: &mut [S]) -> S {
    let n = S::of(x.len() as f64);
    let mean = x.iter().copied().sum::<S>() / n;
    let mut var = S::zero();
    for v in x.iter_mut() {
        *v -= mean;
        var += *v * *v;
    }
    let inv_std = S::one() / (var / n + S::of(LN_EPS)).sqrt();
    for v in x.iter_mut() {
        *v *= inv_std;
    }
    inv_std
}

pub fn layer_norm_row<S: Real>(x: &[S], gain: &[S], bias: &[S], out: &mut [S]) {
    out.copy_from_slice(x);
    normalize_row(out);
    for ((o, &g), &b) in out.iter_mut().zip(gain).zip(bias) {
        *o = *o * g + b;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub fn gelu<S: Real>(x: S) -> S {
    let c = S::of(GELU_C);
    let inner = c * (x + S::of(0.044715) * x * x * x);
    S::of(0.5) * x * (S::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<S: Real>(x: S) -> S {
    let c = S::of(GELU_C);
    let inner = c * (x + S::of(0.044715) * x * x * x);
    let t = inner.tanh();
    let dinner = c * (S::one() + S::of(3.0 * 0.044715) * x * x);
    S::of(0.5) * (S::one() + t) + S::of(0.5) * x * (S::one() - t * t) * dinner
}

#[inline]
pub fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Row log-softmax with max subtraction.
pub fn log_softmax_row<S: Real>(x: &[S], out: &mut [S]) {
    let max = x.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = x.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<S: Real>(x: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Causal attention for one query row over `keys`/`values` rows (each `d` wide,
/// split into `heads`). Writes the attended output into `out` and the
/// per-head probabilities into `probs` (heads × n_keys) when given.
pub fn attend_row<S: Real>(
    q: &[S],
    keys: &[S],
    values: &[S],
    n_keys: usize,
    heads: usize,
    out: &mut [S],
    mut probs: Option<&mut [S]>,
) {
    let d = q.len();
    let dh = d / heads;
    let scale = S::one() / S::of(dh as f64).sqrt();
    let mut scores = vec![S::zero(); n_keys];
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        let mut max = S::neg_infinity();
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(qh, &keys[j * d + h * dh..j * d + (h + 1) * dh]) * scale;
            max = max.max(*s);
        }
        let mut denom = S::zero();
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            denom += *s;
        }
        let oh = &mut out[h * dh..(h + 1) * dh];
        oh.iter_mut().for_each(|o| *o = S::zero());
        for (j, s) in scores.iter_mut().enumerate() {
            *s /= denom;
            let vj = &values[j * d + h * dh..j * d + (h + 1) * dh];
            for (o, &v) in oh.iter_mut().zip(vj) {
                *o += *s * v;
            }
        }
        if let Some(p) = probs.as_deref_mut() {
            p[h * n_keys..(h + 1) * n_keys].copy_from_slice(&scores);
        }
    }
}
