//! Property checks on the loss, mixing and CKA primitives.

use kdbench_core::analysis::cka_linear;
use kdbench_core::config::{HintMetric, LabelLoss};
use kdbench_core::data::{apply_mixing, cutmix_with_box, mixup_with, CutBox};
use kdbench_core::gradcheck::{central_difference, relative_error};
use kdbench_core::losses::hint::{cc_loss, cc_loss_with_grad, hint_loss, hint_loss_with_grad, rkd_loss, rkd_loss_with_grad, FeatureMap};
use kdbench_core::losses::logits::*;
use ndarray::{s, Array2, Array4, ArrayD};
use rand::Rng;

use crate::oracle::*;

pub type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lb(x: &Array2<f64>) -> LogitsBatch {
    LogitsBatch::new(x.clone()).unwrap()
}

fn fm(x: &ArrayD<f64>) -> FeatureMap {
    FeatureMap::new("f", x.clone()).unwrap()
}

pub fn zero_at_equality() -> Check {
    let mut r = rng(101);
    let mut worst = 0.0f64;
    let cases = 200;
    for _ in 0..cases {
        let n = r.random_range(3..=16);
        let k = r.random_range(2..=32);
        let tau = r.random_range(1.0..5.0);
        let z = lb(&gaussian(&mut r, n, k, 3.0));
        let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let h = HardTargetBatch::Indices(idx.clone());
        let none = HardLoss::new(LabelLoss::None, 0.0);
        let feats = randn(&mut r, &[n, 4, 3, 3]);
        let emb = randn(&mut r, &[n, 8]);
        let values = [
            vanilla_kd_loss(&z, &z, &h, none, SoftMeasure::Kl, 0.0, tau).unwrap().total,
            kl_soft_loss(&z, &z, tau).unwrap(),
            bkl_loss(&z, &z, tau).unwrap(),
            dkd_loss(&z, &z, &idx, 1.0, 8.0, tau).unwrap().total,
            dist_loss(&z, &z, &h, none, 1.0, 1.0, tau).unwrap().total,
            hint_loss(&fm(&feats), &fm(&feats), None, None, HintMetric::L2).unwrap(),
            hint_loss(&fm(&feats), &fm(&feats), None, None, HintMetric::L1).unwrap(),
            cc_loss(&fm(&emb), &fm(&emb)).unwrap(),
            rkd_loss(&fm(&emb), &fm(&emb), 25.0, 50.0).unwrap(),
        ];
        worst = values.iter().fold(worst, |w, v| w.max(v.abs()));
    }
    ensure(worst <= 1e-8, || format!("largest loss at equality {worst:.3e}"))?;
    Ok(format!("{cases} instances x 9 losses, max {worst:.1e}"))
}

type GradFn<'a> = Box<dyn Fn(&Array2<f64>) -> (f64, Array2<f64>) + 'a>;

pub fn gradient_checks() -> Check {
    let mut r = rng(102);
    let mut worst = 0.0f64;
    let mut worst_name = "";
    let cases = 100;
    for case in 0..cases {
        let n = r.random_range(3..6);
        let k = r.random_range(2..9);
        let tau = [1.0, 2.0, 4.0][case % 3];
        let t = lb(&gaussian(&mut r, n, k, 2.0));
        let s = gaussian(&mut r, n, k, 2.0);
        let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let h = HardTargetBatch::Indices(idx.clone());
        let logit_fns: Vec<(&str, GradFn)> = vec![
            ("KL", Box::new(|x| kl_soft_loss_with_grad(&lb(x), &t, tau).unwrap())),
            ("BKL", Box::new(|x| bkl_loss_with_grad(&lb(x), &t, tau).unwrap())),
            ("CE", Box::new(|x| ce_loss_with_grad(&lb(x), &h, 0.1).unwrap())),
            ("BCE", Box::new(|x| bce_loss_with_grad(&lb(x), &h).unwrap())),
            ("KD", Box::new(|x| {
                let ce = HardLoss::new(LabelLoss::Ce, 0.0);
                let (b, g) = vanilla_kd_loss_with_grad(&lb(x), &t, &h, ce, SoftMeasure::Kl, 0.5, tau).unwrap();
                (b.total, g)
            })),
            ("DKD", Box::new(|x| {
                let (b, g) = dkd_loss_with_grad(&lb(x), &t, &idx, 1.0, 8.0, tau).unwrap();
                (b.total, g)
            })),
            ("DIST", Box::new(|x| {
                let ce = HardLoss::new(LabelLoss::Ce, 0.0);
                let (b, g) = dist_loss_with_grad(&lb(x), &t, &h, ce, 1.0, 2.0, tau).unwrap();
                (b.total, g)
            })),
        ];
        for (name, f) in &logit_fns {
            let num = central_difference(&s, 1e-5, |y| f(y).0);
            let e = relative_error(&f(&s).1, &num);
            if e > worst {
                worst = e;
                worst_name = name;
            }
        }

        let xs = randn(&mut r, &[n, 3, 4, 4]);
        let xt = fm(&randn(&mut r, &[n, 3, 2, 2]));
        let vs = randn(&mut r, &[n, 5]);
        let vt = fm(&randn(&mut r, &[n, 3]));
        type FeatFn<'a> = Box<dyn Fn(&ArrayD<f64>) -> (f64, ArrayD<f64>) + 'a>;
        let feat_fns: Vec<(&str, &ArrayD<f64>, FeatFn)> = vec![
            ("hint", &xs, Box::new(|x| hint_loss_with_grad(&fm(x), &xt, None, None, HintMetric::L2).unwrap())),
            ("CC", &vs, Box::new(|x| cc_loss_with_grad(&fm(x), &vt).unwrap())),
            ("RKD", &vs, Box::new(|x| rkd_loss_with_grad(&fm(x), &vt, 25.0, 50.0).unwrap())),
        ];
        for (name, x, f) in &feat_fns {
            let num = central_difference(*x, 1e-6, |y| f(y).0);
            let e = relative_error(&f(x).1, &num);
            if e > worst {
                worst = e;
                worst_name = name;
            }
        }
    }
    ensure(worst <= 1e-4, || format!("{worst_name} relative error {worst:.3e}"))?;
    Ok(format!("{cases} instances x 10 losses, max rel err {worst:.1e} ({worst_name})"))
}

pub fn dkd_identity() -> Check {
    let mut r = rng(103);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = r.random_range(2..32);
        let s = gaussian(&mut r, 1, k, 2.0);
        let t = gaussian(&mut r, 1, k, 2.0);
        let target = r.random_range(0..k);
        let (ps, pt) = (softmax(&s.row(0).to_vec(), 1.0), softmax(&t.row(0).to_vec(), 1.0));
        let direct = kl(&pt, &ps);
        let (tckd, nckd) = dkd_parts(&pt, &ps, target);
        worst = worst.max((direct - (tckd + (1.0 - pt[target]) * nckd)).abs());
        let b = dkd_loss(&lb(&s), &lb(&t), &[target], 1.0, 1.0, 1.0).unwrap();
        worst = worst.max((b.extra["tckd"] - tckd).abs()).max((b.extra["nckd"] - nckd).abs());
    }
    ensure(worst <= 1e-6, || format!("deviation {worst:.3e}"))?;
    Ok(format!("1000 instances, max {worst:.1e}"))
}

pub fn dist_affine_invariance() -> Check {
    let mut r = rng(104);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n = r.random_range(2..10);
        let k = r.random_range(2..20);
        let ps = gaussian(&mut r, n, k, 1.0).mapv(f64::exp);
        let pt = gaussian(&mut r, n, k, 1.0).mapv(f64::exp);
        let want: f64 =
            rows(&ps).iter().zip(rows(&pt)).map(|(a, b)| 1.0 - pearson(a, &b)).sum::<f64>() / n as f64;
        let base = dist_inter(ps.view(), pt.view());
        let mut moved = ps.clone();
        for mut row in moved.rows_mut() {
            let (a, b) = (r.random_range(0.1..10.0), r.random_range(-5.0..5.0));
            row.mapv_inplace(|v| a * v + b);
        }
        worst = worst.max((dist_inter(moved.view(), pt.view()) - base).abs()).max((base - want).abs());
    }
    ensure(worst <= 1e-6, || format!("deviation {worst:.3e}"))?;
    Ok(format!("500 instances, max {worst:.1e}"))
}

pub fn bkl_oracle() -> Check {
    let (pt, ps) = ([0.7, 0.2, 0.1], [0.5, 0.3, 0.2]);
    let oracle = bkl(&pt, &ps);
    let t = LogitsBatch::from_probs(&[&pt]).unwrap();
    let s = LogitsBatch::from_probs(&[&ps]).unwrap();
    let got = bkl_loss(&s, &t, 1.0).unwrap();
    ensure((got - oracle).abs() <= 1e-8, || format!("worked instance {got} vs oracle {oracle}"))?;
    ensure((oracle - 0.1447).abs() <= 5e-5, || format!("oracle value {oracle}"))?;
    let mut r = rng(105);
    let mut worst = 0.0f64;
    for _ in 0..300 {
        let n = r.random_range(1..8);
        let k = r.random_range(2..20);
        let tau = r.random_range(1.0..4.0);
        let (s, t) = (gaussian(&mut r, n, k, 1.0), gaussian(&mut r, n, k, 1.0));
        let want: f64 = rows(&s)
            .iter()
            .zip(rows(&t))
            .map(|(a, b)| bkl(&softmax(&b, tau), &softmax(a, tau)))
            .sum::<f64>()
            / n as f64;
        worst = worst.max((bkl_loss(&lb(&s), &lb(&t), tau).unwrap() - want).abs());
    }
    ensure(worst <= 1e-8, || format!("brute-force deviation {worst:.3e}"))?;
    Ok(format!("worked instance {oracle:.4}, 300 random instances max {worst:.1e}"))
}

pub fn mixing_invariants() -> Check {
    let mut r = rng(106);
    let images = |r: &mut rand_chacha::ChaCha8Rng, n: usize, h: usize, w: usize| {
        Array4::<f32>::from_shape_fn((n, 3, h, w), |_| r.random_range(-2.0..2.0))
    };
    let x = images(&mut r, 4, 6, 6);
    let t = HardTargetBatch::Indices(vec![0, 1, 2, 3]);
    let m = mixup_with(&x, &t, 4, 1.0, &[3, 2, 1, 0]).unwrap();
    ensure(m.images == x, || "mixup with lambda 1 changed the images".into())?;
    ensure(m.targets.to_weights(4).unwrap() == t.to_weights(4).unwrap(), || "mixup with lambda 1 changed targets".into())?;
    for _ in 0..300 {
        let (h, w) = (r.random_range(1..40), r.random_range(1..40));
        let y0 = r.random_range(0..=h);
        let y1 = r.random_range(y0..=h);
        let x0 = r.random_range(0..=w);
        let x1 = r.random_range(x0..=w);
        let xb = images(&mut r, 3, h, w);
        let tb = HardTargetBatch::Indices(vec![0, 1, 2]);
        let m = cutmix_with_box(&xb, &tb, 3, CutBox { y0, y1, x0, x1 }, &[2, 0, 1]).unwrap();
        let want = 1.0 - ((y1 - y0) * (x1 - x0)) as f64 / (h * w) as f64;
        ensure(m.lam == want, || format!("cutmix lambda {} vs area ratio {want}", m.lam))?;
    }
    let mut worst = 0.0f64;
    for _ in 0..300 {
        let n = r.random_range(2..8);
        let k = r.random_range(2..12);
        let xb = images(&mut r, n, 8, 8);
        let tb = HardTargetBatch::Indices((0..n).map(|_| r.random_range(0..k)).collect());
        let (a, c) = (r.random_range(0.05..2.0), r.random_range(0.0..2.0));
        let m = apply_mixing(&xb, &tb, k, a, c, &mut r).unwrap();
        for row in m.targets.to_weights(k).unwrap().rows() {
            worst = worst.max((row.sum() - 1.0).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("target row sum off by {worst:.3e}"))?;
    Ok(format!("identity, 300 exact cut areas, 300 mixed batches (row sums within {worst:.1e})"))
}

pub fn cka_properties() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let mut r = rng(200 + seed);
        let x = gaussian(&mut r, 64, 8, 1.0);
        let y = gaussian(&mut r, 64, 5, 1.0) + &x.slice(s![.., 0..5]);
        let base = cka_linear(x.view(), y.view()).unwrap();
        let oracle = cka_gram(&x, &y);
        let xq = x.dot(&orthogonal(8, 300 + seed));
        for v in [
            (cka_linear(x.view(), x.view()).unwrap() - 1.0).abs(),
            (base - oracle).abs(),
            (cka_linear(xq.view(), y.view()).unwrap() - base).abs(),
            (cka_linear((&x * 7.5).view(), y.view()).unwrap() - base).abs(),
            (cka_linear(x.view(), (&y * 0.2).view()).unwrap() - base).abs(),
        ] {
            worst = worst.max(v);
        }
    }
    ensure(worst <= 1e-6, || format!("invariance deviation {worst:.3e}"))?;
    let mut r = rng(400);
    let mut worst_indep = 0.0f64;
    for _ in 0..5 {
        let x = gaussian(&mut r, 2048, 16, 1.0);
        let y = gaussian(&mut r, 2048, 16, 1.0);
        worst_indep = worst_indep.max(cka_linear(x.view(), y.view()).unwrap());
    }
    ensure(worst_indep <= 0.05, || format!("independent Gaussians gave {worst_indep:.4}"))?;
    Ok(format!("invariances within {worst:.1e}; independent N=2048 D=16 max {worst_indep:.4}"))
}
