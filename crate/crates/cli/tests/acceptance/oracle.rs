//! Direct-summation references, independent of the vectorized code paths.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * r.sample::<f64, _>(StandardNormal))
}

pub fn randn(r: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| r.sample::<f64, _>(StandardNormal))
}

pub fn softmax(row: &[f64], tau: f64) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| ((v - m) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

/// Per-class binary KL summed over classes.
pub fn bkl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(a, b)| a * (a / b).ln() + (1.0 - a) * ((1.0 - a) / (1.0 - b)).ln())
        .sum()
}

/// KL split into the target/non-target binary term and the renormalized
/// non-target term, each summed directly.
pub fn dkd_parts(pt: &[f64], ps: &[f64], target: usize) -> (f64, f64) {
    let (bt, bs) = (pt[target], ps[target]);
    let tckd = bt * (bt / bs).ln() + (1.0 - bt) * ((1.0 - bt) / (1.0 - bs)).ln();
    let mut nckd = 0.0;
    for c in 0..pt.len() {
        if c != target {
            let (a, b) = (pt[c] / (1.0 - bt), ps[c] / (1.0 - bs));
            nckd += a * (a / b).ln();
        }
    }
    (tckd, nckd)
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        cov += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma).powi(2);
        vb += (b[i] - mb).powi(2);
    }
    cov / (va.sqrt() * vb.sqrt())
}

pub fn rows(x: &Array2<f64>) -> Vec<Vec<f64>> {
    x.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Linear CKA from explicit Gram matrices: HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L)).
pub fn cka_gram(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let n = x.nrows();
    let center = |g: Array2<f64>| {
        let h = Array2::from_shape_fn((n, n), |(i, j)| f64::from(i == j) - 1.0 / n as f64);
        h.dot(&g).dot(&h)
    };
    let k = center(x.dot(&x.t()));
    let l = center(y.dot(&y.t()));
    let hsic = |a: &Array2<f64>, b: &Array2<f64>| (a * b).sum();
    hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
}

/// Gram-Schmidt on a Gaussian matrix.
pub fn orthogonal(d: usize, seed: u64) -> Array2<f64> {
    let g = gaussian(&mut rng(seed), d, d, 1.0);
    let mut q = Array2::<f64>::zeros((d, d));
    for j in 0..d {
        let mut v = g.column(j).to_owned();
        for k in 0..j {
            let qk = q.column(k).to_owned();
            v = &v - &(&qk * qk.dot(&v));
        }
        let n = v.dot(&v).sqrt();
        q.column_mut(j).assign(&(v / n));
    }
    q
}
