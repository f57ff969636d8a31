mod common;

use approx::assert_abs_diff_eq;
use kdbench_core::analysis::*;
use ndarray::{s, Array2};

fn orthogonal(d: usize, seed: u64) -> Array2<f64> {
    // Gram-Schmidt on a Gaussian matrix
    let g = common::gaussian(&mut common::rng(seed), d, d, 1.0);
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

#[test]
fn invariances() {
    for seed in 0..20 {
        let mut r = common::rng(seed);
        let x = common::gaussian(&mut r, 40, 8, 1.0);
        let y = common::gaussian(&mut r, 40, 5, 1.0) + &x.slice(s![.., 0..5]);
        let base = cka_linear(x.view(), y.view()).unwrap();
        assert_abs_diff_eq!(cka_linear(x.view(), x.view()).unwrap(), 1.0, epsilon = 1e-9);
        let xq = x.dot(&orthogonal(8, seed + 100));
        assert_abs_diff_eq!(cka_linear(xq.view(), y.view()).unwrap(), base, epsilon = 1e-6);
        assert_abs_diff_eq!(cka_linear((&x * 7.5).view(), y.view()).unwrap(), base, epsilon = 1e-6);
        assert_abs_diff_eq!(cka_linear(y.view(), x.view()).unwrap(), base, epsilon = 1e-8);
        assert_abs_diff_eq!(cka_linear((&x + 3.0).view(), y.view()).unwrap(), base, epsilon = 1e-9);
    }
}

#[test]
fn independent_gaussians_near_zero() {
    let draws = 5;
    let mut total = 0.0;
    for seed in 0..draws {
        let mut r = common::rng(1000 + seed);
        let x = common::gaussian(&mut r, 2048, 16, 1.0);
        let y = common::gaussian(&mut r, 2048, 16, 1.0);
        let v = cka_linear(x.view(), y.view()).unwrap();
        assert!(v <= 0.05, "draw {seed}: {v}");
        total += v;
    }
    // E[CKA] for independent data is about D/N here
    assert!(total / draws as f64 <= 0.02);
}

#[test]
fn minibatch_accumulation_converges() {
    let mut r = common::rng(77);
    let x = common::gaussian(&mut r, 3200, 6, 1.0);
    let mix = common::gaussian(&mut r, 6, 4, 1.0);
    let y = x.dot(&mix) + common::gaussian(&mut r, 3200, 4, 1.5);
    let full = cka_linear(x.view(), y.view()).unwrap();
    let mut acc = CkaAccumulator::default();
    for b in 0..50 {
        let rows = s![b * 64..(b + 1) * 64, ..];
        acc.add(x.slice(rows), y.slice(rows)).unwrap();
    }
    assert!((acc.value().unwrap() - full).abs() <= 0.05);
}

#[test]
fn grid_diagonal_for_identical_models() {
    let mut r = common::rng(3);
    let acts: Vec<Array2<f64>> = (0..3).map(|_| common::gaussian(&mut r, 32, 4, 1.0)).collect();
    let ids = vec!["stage1".to_string(), "stage2".into(), "stage3".into()];
    let mut g = CkaGrid::new(ids.clone(), ids.clone());
    let fetch = |id: &str| ids.iter().position(|i| i == id).map(|p| acts[p].clone());
    g.add(&fetch, &fetch).unwrap();
    let m = g.finish().unwrap();
    for i in 0..3 {
        assert_abs_diff_eq!(m.values[[i, i]], 1.0, epsilon = 1e-9);
    }
    let mut missing = CkaGrid::new(vec!["stage9".into()], ids.clone());
    assert!(matches!(missing.add(&fetch, &fetch), Err(kdbench_core::Error::Tap(_))));
}

#[test]
fn gap_table_examples() {
    let r = |pair: &str, m: &str, v: f64| MethodResult { pair: pair.into(), scale: 1.0, method: m.into(), top1: v };
    let g = gap_table(&[
        r("resnet34->resnet18", "KD", 73.46),
        r("resnet34->resnet18", "DKD", 72.90),
        r("resnet34->resnet18", "DIST", 73.52),
        r("resnet56->resnet20", "KD", 72.34),
        r("resnet56->resnet20", "DKD", 73.10),
        r("resnet56->resnet20", "DIST", 74.51),
    ])
    .unwrap();
    let a = g.get("resnet34->resnet18", 1.0).unwrap();
    assert_abs_diff_eq!(a.delta, -0.06, epsilon = 1e-9);
    let b = g.get("resnet56->resnet20", 1.0).unwrap();
    assert_abs_diff_eq!(b.delta, -2.17, epsilon = 1e-9);
    assert_eq!(b.best_other, "DIST");
    for e in &g.entries {
        assert_eq!(e.recompute_delta().unwrap(), e.delta);
    }
}
