use starlight_core::data::Dataset;
use starlight_core::nn::{Matrix, MlpArchitecture, ModelParams};
use starlight_core::Split;

/// Network whose only difference between models is one output weight `w`:
/// input x > 0 passes through a unit ReLU, logits are `[w * x, 0]`.
#[allow(dead_code)]
pub fn one_weight_model(w: f32) -> ModelParams<f32> {
    let arch = MlpArchitecture::new(1, vec![1], 2).unwrap();
    let mut p = ModelParams::<f32>::zeros(&arch).unwrap();
    p.layers_mut()[0].weight = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
    p.layers_mut()[1].weight = Matrix::from_vec(2, 1, vec![w, 0.0]).unwrap();
    p
}

#[allow(dead_code)]
pub fn two_point_dataset() -> Dataset {
    Dataset::new(Matrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap(), vec![0, 1], 2, Split::Train).unwrap()
}

/// Mean cross-entropy of the one-weight model at weight `w` on the two
/// points: label 0 at x=1 and label 1 at x=2.
#[allow(dead_code)]
pub fn closed_form_loss(w: f64) -> f64 {
    let softplus = |z: f64| z.exp().ln_1p();
    0.5 * (softplus(-w) + softplus(2.0 * w))
}

