//! Weight matching: coordinate ascent over hidden layers, solving one
//! linear assignment problem per layer to maximize the parameter inner
//! product between a reference model and a permuted model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::landscape::{barrier, interpolation_curve, BarrierParams, BarrierReport};
use crate::nn::{param_dot, Matrix, ModelParams};
use crate::permute::lap::{solve_lap, Objective};
use crate::permute::{apply_permutation, PermutationSet};

pub const DEFAULT_MAX_SWEEPS: usize = 50;

#[derive(Debug, Clone)]
pub struct MatchOutcome {
    pub permutation: PermutationSet,
    /// `param_dot(reference, apply(P, other))` at the winning run's starting
    /// point and after each accepted layer update. Non-decreasing.
    pub dot_trace: Vec<f64>,
    pub sweeps: usize,
    /// True when a full sweep changed no layer.
    pub converged: bool,
}

impl MatchOutcome {
    pub fn final_dot(&self) -> f64 {
        *self.dot_trace.last().expect("trace holds the initial dot")
    }
}

/// Which neighbour terms enter a layer's similarity matrix.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Terms {
    /// Incoming weights, biases and normalization vectors only.
    Inbound,
    /// Outgoing weights only.
    Outbound,
    All,
}

/// Similarity between slot `i` of `reference` and unit `j` of `other` in
/// hidden layer `l`, given the current permutations of the neighbouring
/// layers. Bias, gain and shift terms carry the same weight as weight rows.
fn similarity(
    reference: &ModelParams<f64>,
    other: &ModelParams<f64>,
    perm: &PermutationSet,
    l: usize,
    terms: Terms,
) -> Vec<Vec<f64>> {
    let hidden = reference.arch().num_hidden();
    let w = reference.arch().hidden_widths[l];
    let inbound = if l == 0 { None } else { Some(perm.layer(l - 1)) };
    let outbound = if l + 1 < hidden { Some(perm.layer(l + 1)) } else { None };

    let ref_in = &reference.layers()[l].weight;
    let oth_in = &other.layers()[l].weight;
    let fan_in = ref_in.cols();
    // Columns of the other model's incoming weights in reference order.
    let mut oth_in_aligned = Matrix::<f64>::zeros(w, fan_in);
    for j in 0..w {
        let src = oth_in.row(j);
        let dst = oth_in_aligned.row_mut(j);
        match inbound {
            Some(p) => {
                for (k, &pk) in p.iter().enumerate() {
                    dst[k] = src[pk];
                }
            }
            None => dst.copy_from_slice(src),
        }
    }

    let mut s = vec![vec![0.0f64; w]; w];
    if terms != Terms::Outbound {
        for i in 0..w {
            let a = ref_in.row(i);
            for j in 0..w {
                let b = oth_in_aligned.row(j);
                s[i][j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
    }
    if terms != Terms::Inbound {
        let ref_out = &reference.layers()[l + 1].weight;
        let oth_out = &other.layers()[l + 1].weight;
        for o in 0..ref_out.rows() {
            let a = ref_out.row(o);
            let b = oth_out.row(outbound.map_or(o, |p| p[o]));
            for i in 0..w {
                let ai = a[i];
                if ai == 0.0 {
                    continue;
                }
                let si = &mut s[i];
                for j in 0..w {
                    si[j] += ai * b[j];
                }
            }
        }
    }
    if terms == Terms::Outbound {
        return s;
    }
    let mut vector_terms: Vec<(&[f64], &[f64])> =
        vec![(&reference.layers()[l].bias, &other.layers()[l].bias)];
    if let (Some(rb), Some(ob)) = (reference.norms().get(l), other.norms().get(l)) {
        vector_terms.push((&rb.gamma, &ob.gamma));
        vector_terms.push((&rb.beta, &ob.beta));
    }
    for (rv, ov) in vector_terms {
        for i in 0..w {
            for j in 0..w {
                s[i][j] += rv[i] * ov[j];
            }
        }
    }
    s
}

/// Seeded random starting points tried in addition to the identity and the
/// forward pass.
const RANDOM_RESTARTS: usize = 8;

/// Layer-by-layer assignment from the input upward using only incoming
/// terms. Recovers a planted permutation exactly, since each layer's
/// inbound alignment is then already correct.
fn forward_init(r64: &ModelParams<f64>, o64: &ModelParams<f64>) -> Result<PermutationSet> {
    let mut perm = PermutationSet::identity(r64.arch());
    for l in 0..r64.arch().num_hidden() {
        let s = similarity(r64, o64, &perm, l, Terms::Inbound);
        perm.set_layer(l, solve_lap(&s, Objective::Maximize)?.0);
    }
    Ok(perm)
}

/// Mirror of [`forward_init`] from the output layer downward, using only
/// outgoing weights.
fn backward_init(r64: &ModelParams<f64>, o64: &ModelParams<f64>) -> Result<PermutationSet> {
    let mut perm = PermutationSet::identity(r64.arch());
    for l in (0..r64.arch().num_hidden()).rev() {
        let s = similarity(r64, o64, &perm, l, Terms::Outbound);
        perm.set_layer(l, solve_lap(&s, Objective::Maximize)?.0);
    }
    Ok(perm)
}

struct Ascent {
    perm: PermutationSet,
    dot_trace: Vec<f64>,
    sweeps: usize,
    converged: bool,
}

fn coordinate_ascent(
    r64: &ModelParams<f64>,
    o64: &ModelParams<f64>,
    mut perm: PermutationSet,
    max_sweeps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Ascent> {
    let hidden = r64.arch().num_hidden();
    let dot_of = |p: &PermutationSet| -> Result<f64> { param_dot(r64, &apply_permutation(p, o64)?) };
    let mut dot_trace = vec![dot_of(&perm)?];
    let mut order: Vec<usize> = (0..hidden).collect();
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < max_sweeps {
        sweeps += 1;
        order.shuffle(rng);
        let mut changed = false;
        for &l in &order {
            let s = similarity(r64, o64, &perm, l, Terms::All);
            let current: f64 = perm.layer(l).iter().enumerate().map(|(i, &j)| s[i][j]).sum();
            let (assignment, value) = solve_lap(&s, Objective::Maximize)?;
            let tol = 1e-12 * current.abs().max(1.0);
            if value > current + tol && assignment != perm.layer(l) {
                perm.set_layer(l, assignment);
                changed = true;
                dot_trace.push(dot_of(&perm)?);
            }
        }
        if !changed {
            converged = true;
            break;
        }
    }
    Ok(Ascent {
        perm,
        dot_trace,
        sweeps,
        converged,
    })
}

/// Finds a permutation of `other` that (locally) maximizes its inner
/// product with `reference`.
///
/// Coordinate ascent visits layers in a freshly shuffled order every sweep
/// and replaces a layer's assignment only when the new one strictly
/// improves the objective, stopping at the first sweep that changes nothing
/// (or after `max_sweeps`). It runs from the identity, from forward- and
/// backward-pass assignments, and from a few seeded random permutations;
/// the best run is returned, so the result never scores below the
/// unpermuted model.
pub fn weight_match(
    reference: &ModelParams<f32>,
    other: &ModelParams<f32>,
    max_sweeps: usize,
    rng_seed: u64,
) -> Result<MatchOutcome> {
    reference.arch().ensure_compatible(other.arch())?;
    if max_sweeps == 0 {
        return Err(Error::InvalidArgument("max_sweeps must be >= 1".into()));
    }
    let r64: ModelParams<f64> = reference.cast();
    let o64: ModelParams<f64> = other.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut starts = vec![
        PermutationSet::identity(reference.arch()),
        forward_init(&r64, &o64)?,
        backward_init(&r64, &o64)?,
    ];
    for _ in 0..RANDOM_RESTARTS {
        starts.push(PermutationSet::random(reference.arch(), &mut rng));
    }
    let mut best: Option<Ascent> = None;
    for start in starts {
        let run = coordinate_ascent(&r64, &o64, start, max_sweeps, &mut rng)?;
        let better = best
            .as_ref()
            .is_none_or(|b| run.dot_trace.last() > b.dot_trace.last());
        if better {
            best = Some(run);
        }
    }
    let best = best.expect("at least one start");
    Ok(MatchOutcome {
        permutation: best.perm,
        dot_trace: best.dot_trace,
        sweeps: best.sweeps,
        converged: best.converged,
    })
}

#[derive(Debug, Clone)]
pub struct MatchedBarrier {
    pub report: BarrierReport,
    pub permutation: PermutationSet,
    pub matched: bool,
    /// Inner product after alignment.
    pub aligned_dot: f64,
}

/// Matches `other` onto `reference`, then measures the barrier along the
/// segment from `reference` to the aligned model. Bitwise-identical inputs
/// skip matching. With `params.align == false` the raw barrier is measured.
pub fn barrier_after_match(
    reference: &ModelParams<f32>,
    other: &ModelParams<f32>,
    eval: &Dataset,
    calibration: Option<&Dataset>,
    params: &BarrierParams,
) -> Result<MatchedBarrier> {
    reference.arch().ensure_compatible(other.arch())?;
    let (permutation, matched) = if !params.align || reference == other {
        (PermutationSet::identity(reference.arch()), false)
    } else {
        let outcome = weight_match(reference, other, params.match_sweeps, params.match_seed)?;
        (outcome.permutation, true)
    };
    let aligned = apply_permutation(&permutation, other)?;
    let curve = interpolation_curve(reference, &aligned, eval, calibration, params)?;
    Ok(MatchedBarrier {
        report: barrier(curve),
        aligned_dot: param_dot(reference, &aligned)?,
        permutation,
        matched,
    })
}
