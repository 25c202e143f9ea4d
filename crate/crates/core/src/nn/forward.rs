//! Forward and backward passes, cross-entropy, and batchnorm statistics.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::matrix::Matrix;
use crate::nn::params::{GradientTree, ModelParams};
use crate::nn::real::{axpy, dot, Real};

/// Which normalization statistics a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; requires at least two rows when batchnorm is on.
    Train,
    /// Running statistics; a pure function of parameters and inputs.
    Eval,
}

/// Per-hidden-layer mean and (biased) variance of pre-normalization
/// activations over one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub logits: Matrix<T>,
    /// Present in [`Mode::Train`] for batchnorm architectures.
    pub batch_stats: Option<BatchStats>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossAndAccuracy {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct Backprop<T> {
    pub loss: f64,
    pub accuracy: f64,
    pub grads: GradientTree<T>,
    pub batch_stats: Option<BatchStats>,
}

struct HiddenCache<T> {
    /// Normalized pre-activations (only with batchnorm).
    zhat: Option<Matrix<T>>,
    inv_std: Vec<T>,
    /// Post-affine (and post-norm) values before the ReLU.
    pre_relu: Matrix<T>,
}

struct Trace<T> {
    /// `activations[0]` is the input; `activations[l + 1]` the output of hidden layer `l`.
    activations: Vec<Matrix<T>>,
    hidden: Vec<HiddenCache<T>>,
    logits: Matrix<T>,
    stats: Option<BatchStats>,
}

/// `x W^T + b` for a batch `x` (rows are examples).
fn affine<T: Real>(x: &Matrix<T>, w: &Matrix<T>, b: &[T]) -> Matrix<T> {
    let (n, _) = x.shape();
    let out_dim = w.rows();
    let mut out = Matrix::zeros(n, out_dim);
    for r in 0..n {
        let xr = x.row(r);
        let or = out.row_mut(r);
        for (o, v) in or.iter_mut().enumerate() {
            *v = dot(w.row(o), xr) + b[o];
        }
    }
    out
}

fn column_moments<T: Real>(z: &Matrix<T>) -> (Vec<f64>, Vec<f64>) {
    let (n, c) = z.shape();
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    for r in 0..n {
        for (j, &v) in z.row(r).iter().enumerate() {
            let v = v.as_f64();
            sum[j] += v;
            sq[j] += v * v;
        }
    }
    let nf = n as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    // Second pass for the variance keeps cancellation out of the result.
    let mut var = vec![0.0f64; c];
    for r in 0..n {
        for (j, &v) in z.row(r).iter().enumerate() {
            let d = v.as_f64() - mean[j];
            var[j] += d * d;
        }
    }
    for v in &mut var {
        *v /= nf;
    }
    (mean, var)
}

fn check_inputs<T: Real>(params: &ModelParams<T>, inputs: &Matrix<T>, mode: Mode) -> Result<()> {
    let arch = params.arch();
    if inputs.cols() != arch.input_dim {
        return Err(Error::dim("input width", arch.input_dim, inputs.cols()));
    }
    if inputs.rows() == 0 {
        return Err(Error::dim("batch size", 1, 0));
    }
    if mode == Mode::Train && arch.use_batchnorm && inputs.rows() < 2 {
        return Err(Error::InvalidArgument(
            "train-mode batchnorm needs at least two examples".into(),
        ));
    }
    if !inputs.is_finite() {
        return Err(Error::NonFinite("inputs"));
    }
    Ok(())
}

fn run<T: Real>(params: &ModelParams<T>, inputs: &Matrix<T>, mode: Mode, keep: bool) -> Result<Trace<T>> {
    check_inputs(params, inputs, mode)?;
    let arch = params.arch();
    let h = arch.num_hidden();
    let eps = params.epsilon();
    let mut activations = Vec::with_capacity(if keep { h + 1 } else { 1 });
    let mut hidden = Vec::with_capacity(h);
    let mut stats = (mode == Mode::Train && arch.use_batchnorm).then(|| BatchStats {
        mean: Vec::with_capacity(h),
        var: Vec::with_capacity(h),
    });
    let mut current = inputs.clone();
    for l in 0..h {
        let layer = &params.layers()[l];
        let mut z = affine(&current, &layer.weight, &layer.bias);
        let mut zhat_keep = None;
        let mut inv_std = Vec::new();
        if let Some(bn) = params.norms().get(l) {
            let (mean, var) = match mode {
                Mode::Train => {
                    let (m, v) = column_moments(&z);
                    if let Some(s) = stats.as_mut() {
                        s.mean.push(m.clone());
                        s.var.push(v.clone());
                    }
                    (m, v)
                }
                Mode::Eval => (
                    bn.running_mean.iter().map(|v| v.as_f64()).collect(),
                    bn.running_var.iter().map(|v| v.as_f64()).collect(),
                ),
            };
            inv_std = var.iter().map(|v| T::of(1.0 / (v + eps).sqrt())).collect();
            let mean_t: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();
            let mut zhat = z.clone();
            for r in 0..zhat.rows() {
                let zr = zhat.row_mut(r);
                for j in 0..zr.len() {
                    zr[j] = (zr[j] - mean_t[j]) * inv_std[j];
                }
            }
            for r in 0..z.rows() {
                let src = zhat.row(r);
                let dst = z.row_mut(r);
                for j in 0..dst.len() {
                    dst[j] = bn.gamma[j] * src[j] + bn.beta[j];
                }
            }
            if keep {
                zhat_keep = Some(zhat);
            }
        }
        let mut a = z.clone();
        for v in a.as_mut_slice() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        if keep {
            activations.push(std::mem::replace(&mut current, a));
            hidden.push(HiddenCache {
                zhat: zhat_keep,
                inv_std,
                pre_relu: z,
            });
        } else {
            current = a;
        }
    }
    let out = &params.layers()[h];
    let logits = affine(&current, &out.weight, &out.bias);
    if keep {
        activations.push(current);
    }
    Ok(Trace {
        activations,
        hidden,
        logits,
        stats,
    })
}

/// Logits for a batch of inputs.
pub fn forward<T: Real>(params: &ModelParams<T>, inputs: &Matrix<T>, mode: Mode) -> Result<ForwardOutput<T>> {
    let trace = run(params, inputs, mode, false)?;
    Ok(ForwardOutput {
        logits: trace.logits,
        batch_stats: trace.stats,
    })
}

fn check_labels(labels: &[usize], rows: usize, num_classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::dim("labels", rows, labels.len()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange { label, num_classes });
    }
    Ok(())
}

/// Mean cross-entropy via log-sum-exp with max shift, plus top-1 accuracy.
/// Also returns `d loss / d logits` scaled for the batch mean.
fn cross_entropy_with_grad<T: Real>(
    logits: &Matrix<T>,
    labels: &[usize],
    want_grad: bool,
) -> Result<(LossAndAccuracy, Option<Matrix<T>>)> {
    let (n, c) = logits.shape();
    check_labels(labels, n, c)?;
    if n == 0 {
        return Err(Error::dim("batch size", 1, 0));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("logits"));
    }
    let mut total = 0.0f64;
    let mut correct = 0usize;
    let mut grad = want_grad.then(|| Matrix::zeros(n, c));
    let inv_n = 1.0 / n as f64;
    for r in 0..n {
        let row = logits.row(r);
        let mut argmax = 0;
        let mut max = row[0].as_f64();
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v.as_f64() > max {
                max = v.as_f64();
                argmax = j;
            }
        }
        let sum_exp: f64 = row.iter().map(|&v| (v.as_f64() - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        total += log_z - row[labels[r]].as_f64();
        if argmax == labels[r] {
            correct += 1;
        }
        if let Some(g) = grad.as_mut() {
            let gr = g.row_mut(r);
            for j in 0..c {
                let p = (row[j].as_f64() - log_z).exp();
                let target = if j == labels[r] { 1.0 } else { 0.0 };
                gr[j] = T::of((p - target) * inv_n);
            }
        }
    }
    let loss = (total * inv_n).max(0.0);
    Ok((
        LossAndAccuracy {
            loss,
            accuracy: correct as f64 * inv_n,
        },
        grad,
    ))
}

/// Mean cross-entropy and accuracy of `logits` against `labels`.
pub fn cross_entropy<T: Real>(logits: &Matrix<T>, labels: &[usize]) -> Result<LossAndAccuracy> {
    cross_entropy_with_grad(logits, labels, false).map(|(l, _)| l)
}

/// Row-wise softmax computed in `f64`.
pub fn softmax<T: Real>(logits: &Matrix<T>) -> Matrix<f64> {
    let (n, c) = logits.shape();
    let mut out = Matrix::zeros(n, c);
    for r in 0..n {
        let row = logits.row(r);
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let o = out.row_mut(r);
        let mut s = 0.0;
        for j in 0..c {
            o[j] = (row[j].as_f64() - max).exp();
            s += o[j];
        }
        for v in o.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Exact gradient of the mean cross-entropy of a train-mode forward pass.
pub fn backward<T: Real>(params: &ModelParams<T>, inputs: &Matrix<T>, labels: &[usize]) -> Result<Backprop<T>> {
    let trace = run(params, inputs, Mode::Train, true)?;
    let (la, dlogits) = cross_entropy_with_grad(&trace.logits, labels, true)?;
    let mut delta = dlogits.expect("gradient requested");
    let arch = params.arch();
    let h = arch.num_hidden();
    let n = inputs.rows();
    let nt = T::of(n as f64);

    // Gradients collected per layer, then laid out in trainable order.
    let mut dw: Vec<Matrix<T>> = Vec::with_capacity(h + 1);
    let mut db: Vec<Vec<T>> = Vec::with_capacity(h + 1);
    let mut dgamma: Vec<Vec<T>> = Vec::new();
    let mut dbeta: Vec<Vec<T>> = Vec::new();

    for l in (0..=h).rev() {
        let layer = &params.layers()[l];
        let input = &trace.activations[l];
        let (out_dim, in_dim) = layer.weight.shape();
        let mut gw = Matrix::zeros(out_dim, in_dim);
        let mut gb = vec![T::zero(); out_dim];
        for r in 0..n {
            let dr = delta.row(r);
            let xr = input.row(r);
            for o in 0..out_dim {
                let d = dr[o];
                if d != T::zero() {
                    axpy(d, xr, gw.row_mut(o));
                }
                gb[o] += d;
            }
        }
        dw.push(gw);
        db.push(gb);
        if l == 0 {
            break;
        }
        // Propagate into hidden layer l - 1.
        let mut da = Matrix::zeros(n, in_dim);
        for r in 0..n {
            let dr = delta.row(r);
            let out = da.row_mut(r);
            for o in 0..out_dim {
                let d = dr[o];
                if d != T::zero() {
                    axpy(d, layer.weight.row(o), out);
                }
            }
        }
        let cache = &trace.hidden[l - 1];
        for (g, &pre) in da.as_mut_slice().iter_mut().zip(cache.pre_relu.as_slice()) {
            if !(pre > T::zero()) {
                *g = T::zero();
            }
        }
        if let Some(zhat) = &cache.zhat {
            let bn = &params.norms()[l - 1];
            let w = in_dim;
            let mut g_gamma = vec![T::zero(); w];
            let mut g_beta = vec![T::zero(); w];
            let mut sum_dzhat = vec![0.0f64; w];
            let mut sum_dzhat_zhat = vec![0.0f64; w];
            for r in 0..n {
                let dy = da.row(r);
                let zh = zhat.row(r);
                for j in 0..w {
                    g_gamma[j] += dy[j] * zh[j];
                    g_beta[j] += dy[j];
                    let dzh = (dy[j] * bn.gamma[j]).as_f64();
                    sum_dzhat[j] += dzh;
                    sum_dzhat_zhat[j] += dzh * zh[j].as_f64();
                }
            }
            let s1: Vec<T> = sum_dzhat.iter().map(|&v| T::of(v)).collect();
            let s2: Vec<T> = sum_dzhat_zhat.iter().map(|&v| T::of(v)).collect();
            for r in 0..n {
                let zh = zhat.row(r).to_vec();
                let dy = da.row_mut(r);
                for j in 0..w {
                    let dzh = dy[j] * bn.gamma[j];
                    dy[j] = cache.inv_std[j] / nt * (nt * dzh - s1[j] - zh[j] * s2[j]);
                }
            }
            dgamma.push(g_gamma);
            dbeta.push(g_beta);
        }
        delta = da;
    }
    dw.reverse();
    db.reverse();
    dgamma.reverse();
    dbeta.reverse();

    let mut fields = Vec::with_capacity(4 * (h + 1));
    let mut gammas = dgamma.into_iter();
    let mut betas = dbeta.into_iter();
    for (l, (w, b)) in dw.into_iter().zip(db).enumerate() {
        fields.push(w.into_vec());
        fields.push(b);
        if l < h && arch.use_batchnorm {
            fields.push(gammas.next().expect("gamma grad"));
            fields.push(betas.next().expect("beta grad"));
        }
    }
    Ok(Backprop {
        loss: la.loss,
        accuracy: la.accuracy,
        grads: GradientTree { fields },
        batch_stats: trace.stats,
    })
}

/// Exponential moving update of running statistics from one batch, using
/// the unbiased variance estimate.
pub fn update_running_stats<T: Real>(params: &mut ModelParams<T>, stats: &BatchStats, batch_size: usize) {
    let m = params.stat_momentum();
    let eps = params.epsilon();
    let correction = if batch_size > 1 {
        batch_size as f64 / (batch_size as f64 - 1.0)
    } else {
        1.0
    };
    for (l, bn) in params.norms_mut().iter_mut().enumerate() {
        for j in 0..bn.running_mean.len() {
            let rm = bn.running_mean[j].as_f64();
            let rv = bn.running_var[j].as_f64();
            bn.running_mean[j] = T::of((1.0 - m) * rm + m * stats.mean[l][j]);
            bn.running_var[j] = T::of(((1.0 - m) * rv + m * stats.var[l][j] * correction).max(eps));
        }
    }
}

/// Replaces running statistics with the exact mean and variance of every
/// hidden layer's pre-normalization activations over the whole dataset.
///
/// Layers are processed in order in a single pass: each layer's statistics
/// are computed from activations normalized with the already-updated
/// statistics of the layers below it. Variances are floored at epsilon.
pub fn recalibrate_batchnorm<T: Real>(params: &ModelParams<T>, dataset: &Dataset) -> Result<ModelParams<T>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut out = params.clone();
    if !params.arch().use_batchnorm {
        return Ok(out);
    }
    let inputs: Matrix<T> = dataset.inputs().cast();
    check_inputs(params, &inputs, Mode::Eval)?;
    let eps = params.epsilon();
    let mut current = inputs;
    for l in 0..params.arch().num_hidden() {
        let layer = &params.layers()[l];
        let mut z = affine(&current, &layer.weight, &layer.bias);
        let (mean, var) = column_moments(&z);
        let bn = &mut out.norms_mut()[l];
        for j in 0..mean.len() {
            bn.running_mean[j] = T::of(mean[j]);
            bn.running_var[j] = T::of(var[j].max(eps));
        }
        // Same arithmetic as an eval-mode forward pass.
        let bn = &out.norms()[l];
        let inv_std: Vec<T> = bn
            .running_var
            .iter()
            .map(|v| T::of(1.0 / (v.as_f64() + eps).sqrt()))
            .collect();
        for r in 0..z.rows() {
            let zr = z.row_mut(r);
            for j in 0..zr.len() {
                let v = (zr[j] - bn.running_mean[j]) * inv_std[j];
                let y = bn.gamma[j] * v + bn.beta[j];
                zr[j] = if y > T::zero() { y } else { T::zero() };
            }
        }
        current = z;
    }
    Ok(out)
}

const EVAL_CHUNK: usize = 2048;

/// Eval-mode mean loss and accuracy over a whole dataset.
pub fn evaluate<T: Real>(params: &ModelParams<T>, dataset: &Dataset) -> Result<LossAndAccuracy> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = dataset.len();
    let mut loss = 0.0;
    let mut correct = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let x: Matrix<T> = dataset.inputs().select_rows(&idx).cast();
        let out = forward(params, &x, Mode::Eval)?;
        let la = cross_entropy(&out.logits, &dataset.labels()[start..end])?;
        let m = (end - start) as f64;
        loss += la.loss * m;
        correct += la.accuracy * m;
        start = end;
    }
    let loss = loss / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok(LossAndAccuracy {
        loss,
        accuracy: correct / n as f64,
    })
}

/// Eval-mode logits for every row of the dataset.
pub fn predict_logits<T: Real>(params: &ModelParams<T>, inputs: &Matrix<f32>) -> Result<Matrix<T>> {
    let x: Matrix<T> = inputs.cast();
    Ok(forward(params, &x, Mode::Eval)?.logits)
}
