//! Criteria checked against exhaustive enumeration, finite differences or
//! hand-computed values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use starlight_core::bma::{auroc, averaged_predict, ece_from_confidences};
use starlight_core::data::{batches, gen_blobs};
use starlight_core::landscape::{barrier, equispaced, BarrierParams, InterpolationCurve};
use starlight_core::nn::{
    backward, cross_entropy, forward, init_params, lerp_params, optimizer_step, param_dot, param_norm, Matrix,
    MlpArchitecture, Mode, ModelParams, OptimizerState, Schedule, TrainConfig,
};
use starlight_core::permute::{
    apply_permutation, barrier_after_match, solve_lap, weight_match, Objective, PermutationSet, DEFAULT_MAX_SWEEPS,
};
use starlight_core::starlight::star_gradient;
use starlight_core::Split;

use crate::Verdict;

fn fd_relative_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let depth = rng.random_range(1..=3);
    let widths = (0..depth).map(|_| rng.random_range(2..=16)).collect();
    let arch = MlpArchitecture::new(rng.random_range(2..=8), widths, rng.random_range(2..=6))
        .unwrap()
        .with_batchnorm(seed % 2 == 1);
    let mut params = init_params::<f64>(&arch, seed).unwrap();
    for layer in params.layers_mut() {
        for b in layer.bias.iter_mut() {
            *b = rng.random_range(-0.2..0.2);
        }
    }
    for bn in params.norms_mut() {
        for g in bn.gamma.iter_mut() {
            *g = rng.random_range(0.5..1.5);
        }
    }
    let n = rng.random_range(4..=10);
    let x = Matrix::from_vec(n, arch.input_dim, (0..n * arch.input_dim).map(|_| rng.random_range(-2.0..2.0)).collect())
        .unwrap();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..arch.num_classes)).collect();
    let analytic = backward(&params, &x, &labels).unwrap().grads;
    let loss = |p: &ModelParams<f64>| cross_entropy(&forward(p, &x, Mode::Train).unwrap().logits, &labels).unwrap().loss;
    let h = 1e-4;
    let mut worst = 0.0f64;
    let sizes: Vec<usize> = params.trainable().iter().map(|f| f.len()).collect();
    for (f, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let orig = params.trainable()[f][i];
            let mut at = |d: f64| {
                params.trainable_mut()[f][i] = orig + d;
                loss(&params)
            };
            let numeric = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
            params.trainable_mut()[f][i] = orig;
            let a = analytic.fields[f][i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    worst
}

pub fn c1_gradients() -> Verdict {
    let worst = (0..20).map(fd_relative_error).fold(0.0, f64::max);
    Verdict::check(worst < 1e-4, format!("max relative error {worst:.2e} over 20 MLPs"))
}

pub fn c2_function_preservation() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f32;
    for case in 0..50u64 {
        let arch = MlpArchitecture::new(7, vec![rng.random_range(2..32), rng.random_range(2..32)], 5)
            .unwrap()
            .with_batchnorm(case % 2 == 0);
        let mut p = init_params::<f32>(&arch, case).unwrap();
        for bn in p.norms_mut() {
            for v in bn.running_mean.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            for v in bn.running_var.iter_mut() {
                *v = rng.random_range(0.5..2.0);
            }
        }
        let q = apply_permutation(&PermutationSet::random(&arch, &mut rng), &p).unwrap();
        let x = Matrix::from_vec(128, 7, (0..128 * 7).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let a = forward(&p, &x, Mode::Eval).unwrap().logits;
        let b = forward(&q, &x, Mode::Eval).unwrap().logits;
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            worst = worst.max((u - v).abs());
        }
    }
    Verdict::check(worst < 1e-5, format!("max abs logit difference {worst:.2e} over 50 pairs"))
}

fn best_by_enumeration(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.max(acc);
            return;
        }
        for c in 0..cost.len() {
            if !used[c] {
                used[c] = true;
                go(cost, row + 1, used, acc + cost[row][c], best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::NEG_INFINITY;
    go(cost, 0, &mut vec![false; cost.len()], 0.0, &mut best);
    best
}

pub fn c3_lap() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for n in 2..=7 {
        for _ in 0..100 {
            // Integer costs make every permutation sum exact, so equality is exact.
            let cost: Vec<Vec<f64>> =
                (0..n).map(|_| (0..n).map(|_| rng.random_range(-50..=50) as f64).collect()).collect();
            let (_, value) = solve_lap(&cost, Objective::Maximize).unwrap();
            if value != best_by_enumeration(&cost) {
                mismatches += 1;
            }
        }
    }
    Verdict::check(mismatches == 0, format!("{mismatches} mismatches in 600 instances"))
}

pub fn c4_planted() -> Verdict {
    let data = gen_blobs(4, 30, 6, 0.3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = Vec::new();
    let mut worst_barrier = f64::NEG_INFINITY;
    for case in 0..20u64 {
        let arch = MlpArchitecture::new(6, vec![rng.random_range(8..=32), rng.random_range(8..=32)], 4).unwrap();
        let reference = init_params::<f32>(&arch, 500 + case).unwrap();
        let other = apply_permutation(&PermutationSet::random(&arch, &mut rng), &reference).unwrap();
        let m = weight_match(&reference, &other, DEFAULT_MAX_SWEEPS, case).unwrap();
        let aligned = apply_permutation(&m.permutation, &other).unwrap();
        let norm2 = param_norm(&reference).powi(2);
        let dot = param_dot(&reference, &aligned).unwrap();
        let b = barrier_after_match(&reference, &other, &data, None, &BarrierParams::default()).unwrap().report.barrier;
        worst_barrier = worst_barrier.max(b);
        if dot < (1.0 - 1e-6) * norm2 || b > 1e-6 {
            failures.push(case);
        }
    }
    Verdict::check(
        failures.is_empty(),
        format!("failing cases {failures:?}, worst barrier after match {worst_barrier:.2e}"),
    )
}

pub fn c5_barrier_identities() -> Verdict {
    let data = gen_blobs(3, 20, 4, 0.3, 5);
    let arch = MlpArchitecture::new(4, vec![10], 3).unwrap();
    let p = init_params::<f32>(&arch, 5).unwrap();
    let self_barrier = barrier_after_match(&p, &p, &data, None, &BarrierParams::default()).unwrap().report.barrier;
    let hand = barrier(InterpolationCurve::from_values(vec![0.0, 0.5, 1.0], vec![1.0, 3.0, 1.0], vec![0.0; 3], Split::Train).unwrap());
    let t = equispaced(11);
    let convex = barrier(
        InterpolationCurve::from_values(t.clone(), t.iter().map(|t| 1.0 - t * (1.0 - t)).collect(), vec![0.0; 11], Split::Train)
            .unwrap(),
    );
    Verdict::check(
        self_barrier == 0.0 && hand.barrier == 2.0 && hand.argmax_t == 0.5 && convex.barrier < 0.0,
        format!(
            "B(theta,theta) = {self_barrier}, hand curve {} at t = {}, convex curve {:.3}",
            hand.barrier, hand.argmax_t, convex.barrier
        ),
    )
}

pub fn c11_step_scaling() -> Verdict {
    let data = gen_blobs(3, 40, 5, 0.4, 11);
    let arch = MlpArchitecture::new(5, vec![12, 10], 3).unwrap();
    let theta = init_params::<f64>(&arch, 1).unwrap();
    let source = init_params::<f64>(&arch, 2).unwrap();
    let batch = batches(&data, 32, 0, 0).next().unwrap();
    let cfg = TrainConfig { learning_rate: 0.05, momentum: 0.0, weight_decay: 0.0, schedule: Schedule::Constant, ..TrainConfig::default() };
    let norm_at = |t: f64| {
        let (_, grads, _) = star_gradient(&theta, &source, t, &batch, false).unwrap();
        let mut next = theta.clone();
        optimizer_step(&mut next, &grads, 1, &mut OptimizerState::new(&theta), &cfg, cfg.learning_rate).unwrap();
        let sq: f64 = next
            .trainable()
            .iter()
            .zip(theta.trainable())
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)))
            .sum();
        let phi = lerp_params(&theta, &source, t).unwrap();
        let raw = backward(&phi, &batch.inputs::<f64>(), batch.labels()).unwrap().grads.norm();
        (sq.sqrt(), cfg.learning_rate * raw)
    };
    let mut worst = 0.0f64;
    let mut ok = true;
    for t in [0.0, 0.25, 0.5, 1.0] {
        let (update, unscaled) = norm_at(t);
        let expected = (1.0 - t) * unscaled;
        if expected == 0.0 {
            ok &= update == 0.0;
        } else {
            worst = worst.max((update - expected).abs() / expected);
        }
    }
    Verdict::check(ok && worst <= 1e-6, format!("max relative deviation from (1 - t) scaling {worst:.2e}"))
}

pub fn c12_metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let conf: Vec<f64> = (0..200).map(|_| (rng.random::<f64>() * 20.0).round() / 20.0).collect();
    let correct: Vec<bool> = conf.iter().map(|&c| rng.random::<f64>() < c).collect();
    let (mut credit, mut pairs) = (0.0, 0.0);
    for i in (0..200).filter(|&i| correct[i]) {
        for j in (0..200).filter(|&j| !correct[j]) {
            pairs += 1.0;
            credit += if conf[i] > conf[j] { 1.0 } else if conf[i] == conf[j] { 0.5 } else { 0.0 };
        }
    }
    let fast = auroc(&conf, &correct).unwrap();
    let slow = credit / pairs;
    // Two bins over (0.5, 1]: 0.5 * |0.5 - 0.9| + 0.5 * |1.0 - 0.6| = 0.4.
    let ece = ece_from_confidences(&[0.9, 0.9, 0.6, 0.6], &[true, false, true, true], 2, 0.5).unwrap();
    let arch = MlpArchitecture::new(4, vec![8], 5).unwrap();
    let models: Vec<ModelParams<f32>> = (0..4).map(|s| init_params(&arch, s).unwrap()).collect();
    let x = Matrix::from_vec(64, 4, (0..256).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap();
    let probs = averaged_predict(&models, &x).unwrap();
    let worst_row = (0..64).map(|r| (probs.row(r).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    Verdict::check(
        fast == slow && ece == 0.4 && worst_row <= 1e-6,
        format!("AUROC {fast} vs pairwise {slow}, ECE {ece}, max row-sum error {worst_row:.1e}"),
    )
}
