//! Finite-difference gradient verification.
//!
//! Runs entirely in f64. The scalar probe loss is the inner product of the
//! model output with a fixed projection tensor, so every analytic gradient
//! can be checked coordinate-by-coordinate against a central difference.

use crate::error::{Error, Result};
use crate::model::{Gradients, Model, ParamKind};
use crate::tensor::DenseTensor;

/// Default step for central differences.
pub const DEFAULT_EPS: f64 = 1e-4;

/// Central difference of a scalar function: `(f(p+eps) - f(p-eps)) / 2eps`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, p: f64, eps: f64) -> f64 {
    (f(p + eps) - f(p - eps)) / (2.0 * eps)
}

/// `sum(output .* projection)` for the model on the given input.
pub fn projection_loss(
    model: &Model<f64>,
    input: &DenseTensor<f64>,
    projection: &DenseTensor<f64>,
) -> Result<f64> {
    let (out, _) = model.forward_collect(input.clone())?;
    if out.shape() != projection.shape() {
        return Err(Error::InvalidInput(format!(
            "projection shape {:?} does not match output shape {:?}",
            projection.shape(),
            out.shape()
        )));
    }
    Ok(out.data().iter().zip(projection.data()).map(|(a, b)| a * b).sum())
}

/// Analytic gradients of the projection loss for every parameter and the
/// input, via the plain backward path.
pub fn analytic_gradients(
    model: &Model<f64>,
    input: &DenseTensor<f64>,
    projection: &DenseTensor<f64>,
) -> Result<Gradients<f64>> {
    let (out, acts) = model.forward_collect(input.clone())?;
    if out.shape() != projection.shape() {
        return Err(Error::InvalidInput("projection shape mismatch".into()));
    }
    model.backward_plain(&acts, projection)
}

/// Central-difference estimate of the projection-loss gradient for one
/// parameter coordinate.
pub fn finite_difference_param_grad(
    model: &mut Model<f64>,
    input: &DenseTensor<f64>,
    projection: &DenseTensor<f64>,
    layer: usize,
    kind: ParamKind,
    coord: usize,
    eps: f64,
) -> Result<f64> {
    let original = model
        .param(layer, kind)
        .ok_or_else(|| Error::InvalidInput(format!("layer {layer} has no {kind:?} parameter")))?
        .data()[coord];
    let mut eval = |v: f64| -> Result<f64> {
        model.param_mut(layer, kind).unwrap().data_mut()[coord] = v;
        projection_loss(model, input, projection)
    };
    let plus = eval(original + eps)?;
    let minus = eval(original - eps)?;
    model.param_mut(layer, kind).unwrap().data_mut()[coord] = original;
    Ok((plus - minus) / (2.0 * eps))
}

/// Central-difference estimate of the projection-loss gradient for one
/// input coordinate.
pub fn finite_difference_input_grad(
    model: &Model<f64>,
    input: &DenseTensor<f64>,
    projection: &DenseTensor<f64>,
    coord: usize,
    eps: f64,
) -> Result<f64> {
    let mut x = input.clone();
    let original = x.data()[coord];
    x.data_mut()[coord] = original + eps;
    let plus = projection_loss(model, &x, projection)?;
    x.data_mut()[coord] = original - eps;
    let minus = projection_loss(model, &x, projection)?;
    Ok((plus - minus) / (2.0 * eps))
}

/// Relative error with a floor so near-zero gradients compare absolutely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Result of sweeping finite differences over a model's gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOutcome {
    /// Coordinates compared against the analytic gradient.
    pub checked: usize,
    /// Coordinates excluded because the loss is not smooth there (a ReLU
    /// kink or a max-pool tie inside the difference window).
    pub skipped: usize,
    pub max_rel_err: f64,
}

/// Compare analytic gradients against central differences on sampled
/// coordinates of every parameter tensor and the input.
///
/// Non-smooth points are detected by disagreement between the eps and eps/2
/// estimates (smooth points agree to O(eps^2)) and excluded, implementing
/// the exact-tie / exact-kink exclusion.
pub fn check_model_gradients(
    model: &Model<f64>,
    input: &DenseTensor<f64>,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckOutcome> {
    use crate::model::ParamKind::{Beta, Bias, Gamma, Weight};
    use rand::{Rng, SeedableRng};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (out, _) = model.forward_collect(input.clone())?;
    let projection = DenseTensor::from_fn(out.shape().to_vec(), |_| rng.gen::<f64>() * 2.0 - 1.0);
    let analytic = analytic_gradients(model, input, &projection)?;
    let mut fd_model = model.clone();
    let mut outcome = GradCheckOutcome { checked: 0, skipped: 0, max_rel_err: 0.0 };

    let sample = |len: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<usize> {
        if len <= coords_per_tensor {
            (0..len).collect()
        } else {
            (0..coords_per_tensor).map(|_| rng.gen_range(0..len)).collect()
        }
    };
    let compare = |analytic_value: f64, fd_full: f64, fd_half: f64,
                       outcome: &mut GradCheckOutcome| {
        let spread = (fd_full - fd_half).abs();
        if spread > 1e-3 * fd_full.abs().max(fd_half.abs()).max(1.0) {
            outcome.skipped += 1;
            return;
        }
        let rel = relative_error(analytic_value, fd_half);
        if rel > outcome.max_rel_err {
            outcome.max_rel_err = rel;
        }
        outcome.checked += 1;
    };

    for layer in 0..model.num_layers() {
        for kind in [Weight, Bias, Gamma, Beta] {
            let Some(param) = model.param(layer, kind) else { continue };
            let coords = sample(param.numel(), &mut rng);
            for coord in coords {
                let fd_full = finite_difference_param_grad(
                    &mut fd_model, input, &projection, layer, kind, coord, DEFAULT_EPS,
                )?;
                let fd_half = finite_difference_param_grad(
                    &mut fd_model, input, &projection, layer, kind, coord, DEFAULT_EPS / 2.0,
                )?;
                let a = match kind {
                    Weight => analytic.layers[layer].weight.as_ref(),
                    Bias => analytic.layers[layer].bias.as_ref(),
                    Gamma => analytic.layers[layer].gamma.as_ref(),
                    Beta => analytic.layers[layer].beta.as_ref(),
                }
                .unwrap()
                .data()[coord];
                compare(a, fd_full, fd_half, &mut outcome);
            }
        }
    }
    for coord in sample(input.numel(), &mut rng) {
        let fd_full =
            finite_difference_input_grad(model, input, &projection, coord, DEFAULT_EPS)?;
        let fd_half =
            finite_difference_input_grad(model, input, &projection, coord, DEFAULT_EPS / 2.0)?;
        compare(analytic.input.data()[coord], fd_full, fd_half, &mut outcome);
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerKind;
    use crate::nn::Conv2dCfg;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_slope_at_three() {
        let g = central_difference(|p| p * p, 3.0, 1e-4);
        assert!((g - 6.0).abs() < 1e-8, "got {g}");
    }

    #[test]
    fn conv_parameter_gradient_matches_analytic() {
        let model = Model::<f64>::build(
            vec![LayerKind::Conv2d(Conv2dCfg {
                in_channels: 2,
                out_channels: 3,
                kernel_h: 3,
                kernel_w: 3,
                stride: 1,
                padding: 1,
            })],
            5,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let input = DenseTensor::from_fn(vec![2, 2, 5, 5], |_| rng.gen::<f64>() * 2.0 - 1.0);
        let projection = DenseTensor::from_fn(vec![2, 3, 5, 5], |_| rng.gen::<f64>() * 2.0 - 1.0);
        let analytic = analytic_gradients(&model, &input, &projection).unwrap();
        let mut fd_model = model.clone();
        for coord in [0usize, 7, 29, 53] {
            let fd = finite_difference_param_grad(
                &mut fd_model,
                &input,
                &projection,
                0,
                ParamKind::Weight,
                coord,
                DEFAULT_EPS,
            )
            .unwrap();
            let a = analytic.layers[0].weight.as_ref().unwrap().data()[coord];
            assert!(relative_error(a, fd) < 1e-6, "coord {coord}: {a} vs {fd}");
        }
    }
}
