use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::arch::MlpArchitecture;
use crate::nn::matrix::Matrix;
use crate::nn::real::Real;

pub const BATCHNORM_EPSILON: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

/// Affine layer `z = W x + b`; `W` has one row per output unit.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

/// Normalization parameters of one hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// A full parameter point of an MLP.
///
/// Trainable fields are ordered layer by layer as `W_l, b_l` followed by
/// `gamma_l, beta_l` for hidden layers when batchnorm is enabled. Running
/// statistics are not trainable and come after all trainable fields in
/// the serialized order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    arch: MlpArchitecture,
    layers: Vec<DenseLayer<T>>,
    norms: Vec<BatchNormLayer<T>>,
    epsilon: f64,
    stat_momentum: f64,
}

/// Gradient of a scalar loss with respect to every trainable field, in the
/// same order as [`ModelParams::trainable`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTree<T = f32> {
    pub fields: Vec<Vec<T>>,
}

impl<T: Real> GradientTree<T> {
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        Self {
            fields: params
                .trainable()
                .iter()
                .map(|f| vec![T::zero(); f.len()])
                .collect(),
        }
    }

    pub fn scale(&mut self, factor: T) {
        for f in &mut self.fields {
            for v in f.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// `self += other`
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        if self.fields.len() != other.fields.len() {
            return Err(Error::dim("gradient fields", self.fields.len(), other.fields.len()));
        }
        for (a, b) in self.fields.iter_mut().zip(&other.fields) {
            if a.len() != b.len() {
                return Err(Error::dim("gradient field", a.len(), b.len()));
            }
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.fields
            .iter()
            .flatten()
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub(crate) fn check_congruent(&self, params: &ModelParams<T>) -> Result<()> {
        let t = params.trainable();
        if t.len() != self.fields.len() {
            return Err(Error::dim("gradient fields", t.len(), self.fields.len()));
        }
        for (p, g) in t.iter().zip(&self.fields) {
            if p.len() != g.len() {
                return Err(Error::dim("gradient field", p.len(), g.len()));
            }
        }
        Ok(())
    }
}

/// He-style initialization: weights `N(0, 2 / fan_in)`, zero biases, unit
/// gains, zero shifts and identity running statistics.
pub fn init_params<T: Real>(arch: &MlpArchitecture, seed: u64) -> Result<ModelParams<T>> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(arch.num_layers());
    for l in 0..arch.num_layers() {
        let (fan_out, fan_in) = arch.layer_shape(l);
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..fan_out * fan_in)
            .map(|_| T::of(normal.sample(&mut rng)))
            .collect();
        layers.push(DenseLayer {
            weight: Matrix::from_vec(fan_out, fan_in, data)?,
            bias: vec![T::zero(); fan_out],
        });
    }
    let norms = if arch.use_batchnorm {
        arch.hidden_widths
            .iter()
            .map(|&w| BatchNormLayer {
                gamma: vec![T::one(); w],
                beta: vec![T::zero(); w],
                running_mean: vec![T::zero(); w],
                running_var: vec![T::one(); w],
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(ModelParams {
        arch: arch.clone(),
        layers,
        norms,
        epsilon: BATCHNORM_EPSILON,
        stat_momentum: BATCHNORM_MOMENTUM,
    })
}

impl<T: Real> ModelParams<T> {
    /// Assembles parameters from parts, checking every shape against `arch`.
    pub fn from_parts(
        arch: MlpArchitecture,
        layers: Vec<DenseLayer<T>>,
        norms: Vec<BatchNormLayer<T>>,
    ) -> Result<Self> {
        let p = Self {
            arch,
            layers,
            norms,
            epsilon: BATCHNORM_EPSILON,
            stat_momentum: BATCHNORM_MOMENTUM,
        };
        p.validate()?;
        Ok(p)
    }

    /// All-zero trainable fields (running variance stays at one).
    pub fn zeros(arch: &MlpArchitecture) -> Result<Self> {
        let mut p = init_params::<T>(arch, 0)?;
        for f in p.trainable_mut() {
            f.fill(T::zero());
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.layers.len() != self.arch.num_layers() {
            return Err(Error::dim("layer count", self.arch.num_layers(), self.layers.len()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let (o, i) = self.arch.layer_shape(l);
            if layer.weight.shape() != (o, i) {
                return Err(Error::dim("weight elements", o * i, layer.weight.as_slice().len()));
            }
            if layer.bias.len() != o {
                return Err(Error::dim("bias", o, layer.bias.len()));
            }
        }
        let expected_norms = if self.arch.use_batchnorm {
            self.arch.num_hidden()
        } else {
            0
        };
        if self.norms.len() != expected_norms {
            return Err(Error::dim("batchnorm layers", expected_norms, self.norms.len()));
        }
        for (l, bn) in self.norms.iter().enumerate() {
            let w = self.arch.hidden_widths[l];
            for (name, v) in [
                ("gamma", &bn.gamma),
                ("beta", &bn.beta),
                ("running_mean", &bn.running_mean),
                ("running_var", &bn.running_var),
            ] {
                if v.len() != w {
                    return Err(Error::InvalidArgument(format!(
                        "{name} of hidden layer {l} has length {}, expected {w}",
                        v.len()
                    )));
                }
            }
            if bn.running_var.iter().any(|&v| !(v > T::zero())) {
                return Err(Error::InvalidArgument(format!(
                    "running_var of hidden layer {l} must be strictly positive"
                )));
            }
        }
        Ok(())
    }

    pub fn arch(&self) -> &MlpArchitecture {
        &self.arch
    }

    pub fn layers(&self) -> &[DenseLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer<T>] {
        &mut self.layers
    }

    pub fn norms(&self) -> &[BatchNormLayer<T>] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [BatchNormLayer<T>] {
        &mut self.norms
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn stat_momentum(&self) -> f64 {
        self.stat_momentum
    }

    pub fn total_dim(&self) -> usize {
        self.arch.total_dim()
    }

    /// Names of the trainable fields, in [`Self::trainable`] order.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.layers.len() {
            names.push(format!("layer{l}.weight"));
            names.push(format!("layer{l}.bias"));
            if l < self.norms.len() {
                names.push(format!("layer{l}.gamma"));
                names.push(format!("layer{l}.beta"));
            }
        }
        names
    }

    pub fn trainable(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(4 * self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            out.push(layer.weight.as_slice());
            out.push(layer.bias.as_slice());
            if let Some(bn) = self.norms.get(l) {
                out.push(bn.gamma.as_slice());
                out.push(bn.beta.as_slice());
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(4 * self.layers.len());
        let mut norms = self.norms.iter_mut();
        for layer in self.layers.iter_mut() {
            out.push(layer.weight.as_mut_slice());
            out.push(layer.bias.as_mut_slice());
            if let Some(bn) = norms.next() {
                out.push(bn.gamma.as_mut_slice());
                out.push(bn.beta.as_mut_slice());
            }
        }
        out
    }

    /// Every field including running statistics, with names, in serialized order.
    pub fn all_fields(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = self
            .trainable_names()
            .into_iter()
            .zip(self.trainable())
            .collect();
        for (l, bn) in self.norms.iter().enumerate() {
            out.push((format!("layer{l}.running_mean"), bn.running_mean.as_slice()));
            out.push((format!("layer{l}.running_var"), bn.running_var.as_slice()));
        }
        out
    }

    pub fn all_fields_mut(&mut self) -> Vec<&mut [T]> {
        let mut norm_trainable = Vec::with_capacity(self.norms.len());
        let mut stats = Vec::with_capacity(2 * self.norms.len());
        for bn in self.norms.iter_mut() {
            let BatchNormLayer {
                gamma,
                beta,
                running_mean,
                running_var,
            } = bn;
            norm_trainable.push((gamma.as_mut_slice(), beta.as_mut_slice()));
            stats.push(running_mean.as_mut_slice());
            stats.push(running_var.as_mut_slice());
        }
        let mut out = Vec::with_capacity(2 * self.layers.len() + 4 * norm_trainable.len());
        let mut norm_trainable = norm_trainable.into_iter();
        for layer in self.layers.iter_mut() {
            out.push(layer.weight.as_mut_slice());
            out.push(layer.bias.as_mut_slice());
            if let Some((g, b)) = norm_trainable.next() {
                out.push(g);
                out.push(b);
            }
        }
        out.extend(stats);
        out
    }

    /// Converts to another element type.
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let c = |v: &Vec<T>| v.iter().map(|&x| U::of(x.as_f64())).collect::<Vec<U>>();
        ModelParams {
            arch: self.arch.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weight: l.weight.cast(),
                    bias: c(&l.bias),
                })
                .collect(),
            norms: self
                .norms
                .iter()
                .map(|bn| BatchNormLayer {
                    gamma: c(&bn.gamma),
                    beta: c(&bn.beta),
                    running_mean: c(&bn.running_mean),
                    running_var: c(&bn.running_var),
                })
                .collect(),
            epsilon: self.epsilon,
            stat_momentum: self.stat_momentum,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.all_fields()
            .iter()
            .all(|(_, f)| f.iter().all(|v| v.is_finite()))
    }

    /// `self -= rate * grads` over trainable fields.
    pub fn apply_gradient(&mut self, grads: &GradientTree<T>, rate: T) -> Result<()> {
        grads.check_congruent(self)?;
        for (p, g) in self.trainable_mut().into_iter().zip(&grads.fields) {
            for (x, &d) in p.iter_mut().zip(g) {
                *x -= rate * d;
            }
        }
        Ok(())
    }
}

/// The point `(1 - t) * a + t * b`, including normalization statistics.
/// The endpoints are returned exactly.
pub fn lerp_params<T: Real>(a: &ModelParams<T>, b: &ModelParams<T>, t: f64) -> Result<ModelParams<T>> {
    a.arch.ensure_compatible(&b.arch)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("interpolation t={t} outside [0, 1]")));
    }
    if t == 0.0 {
        return Ok(a.clone());
    }
    if t == 1.0 {
        return Ok(b.clone());
    }
    let tt = T::of(t);
    let mut out = a.clone();
    let src = b.all_fields();
    for (dst, (_, other)) in out.all_fields_mut().into_iter().zip(src) {
        for (x, &y) in dst.iter_mut().zip(other) {
            *x += tt * (y - *x);
        }
    }
    Ok(out)
}

/// Inner product over trainable fields, accumulated in `f64`.
pub fn param_dot<T: Real>(a: &ModelParams<T>, b: &ModelParams<T>) -> Result<f64> {
    a.arch.ensure_compatible(&b.arch)?;
    Ok(a.trainable()
        .iter()
        .zip(b.trainable())
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(&p, &q)| p.as_f64() * q.as_f64())
                .sum::<f64>()
        })
        .sum())
}

pub fn param_norm<T: Real>(p: &ModelParams<T>) -> f64 {
    param_dot(p, p).expect("same arch").sqrt()
}
