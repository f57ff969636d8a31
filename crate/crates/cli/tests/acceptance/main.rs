//! One PASS/FAIL line per acceptance criterion.
//!
//! Criteria 9 to 11 train CIFAR-100 students to convergence and only run
//! with `KDBENCH_FULL=1 CIFAR100_ROOT=...`; otherwise they report FAIL as
//! not run and do not affect the exit status.

mod oracle;
mod props;
mod runs;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use props::Check;

fn guarded(f: impl FnOnce() -> Check) -> Check {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() -> ExitCode {
    // libtest flags such as --list or --ignored may be passed; list mode
    // must not run anything.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let env = runs::CifarEnv::from_env();
    let gated = |f: fn(&runs::CifarEnv) -> Check| -> Box<dyn FnOnce() -> Check> {
        match &env {
            Ok(e) => Box::new(move || f(e)),
            Err(msg) => {
                let msg = msg.clone();
                Box::new(move || Err(msg))
            }
        }
    };
    let criteria: Vec<(u32, &str, bool, Box<dyn FnOnce() -> Check>)> = vec![
        (1, "losses vanish at equality", true, Box::new(props::zero_at_equality)),
        (2, "analytic gradients match finite differences", true, Box::new(props::gradient_checks)),
        (3, "DKD decomposition identity", true, Box::new(props::dkd_identity)),
        (4, "DIST inter-class term is affine invariant", true, Box::new(props::dist_affine_invariance)),
        (5, "BKL matches per-class binary KL", true, Box::new(props::bkl_oracle)),
        (6, "mixing invariants", true, Box::new(props::mixing_invariants)),
        (7, "CKA identities and independence", true, Box::new(props::cka_properties)),
        (8, "determinism and resume equivalence", true, Box::new(runs::determinism)),
        (9, "CIFAR-100 Res56->Res20 KD, 240-epoch protocol", env.is_ok(), gated(runs::cifar_previous_recipe)),
        (10, "CIFAR-100 Res56->Res20 recipe C, KD/DKD/DIST", env.is_ok(), gated(runs::cifar_stronger_recipe)),
        (11, "CIFAR-100 Res32x4->Res8x4 recipe C gap", env.is_ok(), gated(runs::cifar_wide_pair)),
        (12, "ImageNet configs smoke and 30% subset pipeline", true, Box::new(runs::imagenet_smoke_and_subset_pipeline)),
    ];
    let mut failed = 0;
    for (n, name, counts, check) in criteria {
        let started = Instant::now();
        let result = guarded(check);
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {n:>2}: {name} ({detail}) [{secs:.1}s]"),
            Err(why) => {
                println!("FAIL criterion {n:>2}: {name} ({why}) [{secs:.1}s]");
                if counts {
                    failed += 1;
                }
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
