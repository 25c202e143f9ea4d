//! Hidden-unit permutation symmetries and weight-matching re-basin.

mod lap;
mod matching;

pub use lap::{solve_lap, Objective};
pub use matching::{
    barrier_after_match, weight_match, MatchOutcome, MatchedBarrier, DEFAULT_MAX_SWEEPS,
};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{MlpArchitecture, Matrix, ModelParams, Real};

/// One permutation per hidden layer. Slot `i` of hidden layer `l` receives
/// unit `perms[l][i]` of the permuted model.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PermutationSet {
    perms: Vec<Vec<usize>>,
}

fn is_bijection(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    for &i in p {
        if i >= p.len() || std::mem::replace(&mut seen[i], true) {
            return false;
        }
    }
    true
}

impl PermutationSet {
    pub fn new(perms: Vec<Vec<usize>>) -> Result<Self> {
        for (l, p) in perms.iter().enumerate() {
            if !is_bijection(p) {
                return Err(Error::InvalidArgument(format!(
                    "layer {l} permutation is not a bijection"
                )));
            }
        }
        Ok(Self { perms })
    }

    pub fn identity(arch: &MlpArchitecture) -> Self {
        Self {
            perms: arch.hidden_widths.iter().map(|&w| (0..w).collect()).collect(),
        }
    }

    pub fn random<R: Rng + ?Sized>(arch: &MlpArchitecture, rng: &mut R) -> Self {
        let mut p = Self::identity(arch);
        for layer in &mut p.perms {
            layer.shuffle(rng);
        }
        p
    }

    pub fn layers(&self) -> &[Vec<usize>] {
        &self.perms
    }

    pub fn layer(&self, l: usize) -> &[usize] {
        &self.perms[l]
    }

    pub(crate) fn set_layer(&mut self, l: usize, perm: Vec<usize>) {
        debug_assert!(is_bijection(&perm));
        self.perms[l] = perm;
    }

    pub fn is_identity(&self) -> bool {
        self.perms
            .iter()
            .all(|p| p.iter().enumerate().all(|(i, &j)| i == j))
    }

    /// The set whose action equals applying `inner` first, then `self`.
    pub fn compose(&self, inner: &Self) -> Result<Self> {
        self.check_shape(&inner.widths())?;
        Ok(Self {
            perms: self
                .perms
                .iter()
                .zip(&inner.perms)
                .map(|(p, q)| p.iter().map(|&i| q[i]).collect())
                .collect(),
        })
    }

    pub fn inverse(&self) -> Self {
        Self {
            perms: self
                .perms
                .iter()
                .map(|p| {
                    let mut inv = vec![0; p.len()];
                    for (i, &j) in p.iter().enumerate() {
                        inv[j] = i;
                    }
                    inv
                })
                .collect(),
        }
    }

    fn widths(&self) -> Vec<usize> {
        self.perms.iter().map(Vec::len).collect()
    }

    fn check_shape(&self, widths: &[usize]) -> Result<()> {
        if self.perms.len() != widths.len() {
            return Err(Error::dim("permuted layers", widths.len(), self.perms.len()));
        }
        for (p, &w) in self.perms.iter().zip(widths) {
            if p.len() != w {
                return Err(Error::dim("permutation length", w, p.len()));
            }
        }
        Ok(())
    }

    pub fn matches(&self, arch: &MlpArchitecture) -> Result<()> {
        self.check_shape(&arch.hidden_widths)
    }
}

/// Plain text: one line per hidden layer, space-separated indices.
impl fmt::Display for PermutationSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.perms {
            let line: Vec<String> = p.iter().map(usize::to_string).collect();
            writeln!(f, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

impl FromStr for PermutationSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let perms = s
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                line.split_whitespace()
                    .map(|tok| {
                        tok.parse::<usize>()
                            .map_err(|e| Error::InvalidArgument(format!("bad index {tok:?}: {e}")))
                    })
                    .collect::<Result<Vec<usize>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(perms)
    }
}

fn permute_rows<T: Real>(m: &Matrix<T>, perm: &[usize]) -> Matrix<T> {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for (i, &src) in perm.iter().enumerate() {
        out.row_mut(i).copy_from_slice(m.row(src));
    }
    out
}

fn permute_cols<T: Real>(m: &Matrix<T>, perm: &[usize]) -> Matrix<T> {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let src = m.row(r);
        let dst = out.row_mut(r);
        for (i, &j) in perm.iter().enumerate() {
            dst[i] = src[j];
        }
    }
    out
}

fn permute_vec<T: Copy>(v: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&j| v[j]).collect()
}

/// Reorders hidden units; the represented function is unchanged.
pub fn apply_permutation<T: Real>(perm: &PermutationSet, params: &ModelParams<T>) -> Result<ModelParams<T>> {
    perm.matches(params.arch())?;
    let mut out = params.clone();
    for (l, p) in perm.layers().iter().enumerate() {
        {
            let layer = &mut out.layers_mut()[l];
            layer.weight = permute_rows(&layer.weight, p);
            layer.bias = permute_vec(&layer.bias, p);
        }
        {
            let next = &mut out.layers_mut()[l + 1];
            next.weight = permute_cols(&next.weight, p);
        }
        if let Some(bn) = out.norms_mut().get_mut(l) {
            bn.gamma = permute_vec(&bn.gamma, p);
            bn.beta = permute_vec(&bn.beta, p);
            bn.running_mean = permute_vec(&bn.running_mean, p);
            bn.running_var = permute_vec(&bn.running_var, p);
        }
    }
    Ok(out)
}
