//! Exhaustive-enumeration and planted-construction oracles for the
//! assignment solver and weight matching.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use starlight_core::data::gen_blobs;
use starlight_core::landscape::BarrierParams;
use starlight_core::nn::{forward, init_params, param_dot, param_norm, Matrix, MlpArchitecture, Mode};
use starlight_core::permute::{
    apply_permutation, barrier_after_match, solve_lap, weight_match, Objective, PermutationSet,
    DEFAULT_MAX_SWEEPS,
};

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn brute_force(cost: &[Vec<f64>], objective: Objective) -> f64 {
    let values = permutations(cost.len())
        .into_iter()
        .map(|p| p.iter().enumerate().map(|(r, &c)| cost[r][c]).sum::<f64>());
    match objective {
        Objective::Maximize => values.fold(f64::NEG_INFINITY, f64::max),
        Objective::Minimize => values.fold(f64::INFINITY, f64::min),
    }
}

#[test]
fn lap_matches_factorial_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for n in 2..=7 {
        for trial in 0..100 {
            let integral = trial % 2 == 0;
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    (0..n)
                        .map(|_| if integral { rng.random_range(-5..=5) as f64 } else { rng.random_range(-1.0..1.0) })
                        .collect()
                })
                .collect();
            for objective in [Objective::Maximize, Objective::Minimize] {
                let (perm, value) = solve_lap(&cost, objective).unwrap();
                let mut seen = perm.clone();
                seen.sort_unstable();
                assert_eq!(seen, (0..n).collect::<Vec<_>>());
                let direct: f64 = perm.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
                assert_eq!(value, direct);
                assert_eq!(value, brute_force(&cost, objective), "n={n} trial={trial} {objective:?}");
            }
        }
    }
}

#[test]
fn permutation_preserves_function() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..50 {
        let bn = case % 2 == 1;
        let arch = MlpArchitecture::new(6, vec![rng.random_range(2..24), rng.random_range(2..24)], 4)
            .unwrap()
            .with_batchnorm(bn);
        let mut params = init_params::<f32>(&arch, case).unwrap();
        for norm in params.norms_mut() {
            for v in norm.running_mean.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            for v in norm.running_var.iter_mut() {
                *v = rng.random_range(0.5..2.0);
            }
            for v in norm.beta.iter_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
        let perm = PermutationSet::random(&arch, &mut rng);
        let permuted = apply_permutation(&perm, &params).unwrap();
        let probe: Vec<f32> = (0..128 * 6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Matrix::from_vec(128, 6, probe).unwrap();
        let a = forward(&params, &x, Mode::Eval).unwrap().logits;
        let b = forward(&permuted, &x, Mode::Eval).unwrap().logits;
        let diff = a.as_slice().iter().zip(b.as_slice()).map(|(u, v)| (u - v).abs()).fold(0.0f32, f32::max);
        assert!(diff < 1e-5, "case {case}: max abs diff {diff}");
    }
}

#[test]
fn planted_permutations_are_recovered() {
    let data = gen_blobs(3, 20, 5, 0.3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..20u64 {
        let arch = MlpArchitecture::new(5, vec![rng.random_range(8..=32), rng.random_range(8..=32)], 3)
            .unwrap()
            .with_batchnorm(case % 4 == 3);
        let reference = init_params::<f32>(&arch, 100 + case).unwrap();
        let planted = PermutationSet::random(&arch, &mut rng);
        let other = apply_permutation(&planted, &reference).unwrap();
        let outcome = weight_match(&reference, &other, DEFAULT_MAX_SWEEPS, case).unwrap();
        let norm2 = param_norm(&reference).powi(2);
        assert!(outcome.final_dot() >= (1.0 - 1e-6) * norm2, "case {case}");
        let aligned = apply_permutation(&outcome.permutation, &other).unwrap();
        assert!(param_dot(&reference, &aligned).unwrap() >= (1.0 - 1e-6) * norm2);
        let mb = barrier_after_match(&reference, &other, &data, None, &BarrierParams::default()).unwrap();
        assert!(mb.report.barrier <= 1e-6, "case {case}: barrier {}", mb.report.barrier);
    }
}

#[test]
fn width_three_matching_reaches_exhaustive_optimum() {
    let perms = permutations(3);
    for seed in 0..30u64 {
        let arch = MlpArchitecture::new(4, vec![3, 3], 2).unwrap();
        let a = init_params::<f32>(&arch, 2 * seed).unwrap();
        let b = init_params::<f32>(&arch, 2 * seed + 1).unwrap();
        let mut best = f64::NEG_INFINITY;
        for p in &perms {
            for q in &perms {
                let set = PermutationSet::new(vec![p.clone(), q.clone()]).unwrap();
                let dot = param_dot(&a, &apply_permutation(&set, &b).unwrap()).unwrap();
                best = best.max(dot);
            }
        }
        let found = weight_match(&a, &b, DEFAULT_MAX_SWEEPS, seed).unwrap().final_dot();
        assert!((found - best).abs() <= 1e-9 * best.abs().max(1.0), "seed {seed}: {found} vs {best}");
    }
}
