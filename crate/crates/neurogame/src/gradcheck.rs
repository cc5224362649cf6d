//! Central finite-difference gradient checking for whole models.
//!
//! The check freezes every coalition gate's mask (the selection is treated as
//! a constant during differentiation), reseeds the dropout stream identically
//! for every evaluation, and compares the analytic parameter gradients of the
//! summed head losses against `(L(p+h) - L(p-h)) / 2h` at sampled
//! coordinates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layer::Mode;
use crate::models::{LossKind, Model};
use crate::nn::ForwardCtx;
use crate::ops;
use crate::tensor::Tensor;

pub struct GradCheckReport {
    /// Coordinates compared.
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter and coordinate of the worst error.
    pub worst: String,
}

/// Evaluate the summed head losses of a train-mode forward pass with a fixed
/// dropout stream.
fn eval_loss(model: &mut Model<f64>, x: &Tensor<f64>, targets: &[Tensor<f64>], rng_seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut ctx = ForwardCtx {
        mode: Mode::Train,
        iteration: model.iteration,
        rng: &mut rng,
        diag: None,
    };
    let outs = model.forward(x, &mut ctx)?;
    let mut loss = 0.0;
    for ((out, target), head) in outs.iter().zip(targets).zip(&model.heads) {
        loss += match head.loss {
            LossKind::BinaryCrossEntropy => ops::binary_cross_entropy(out, target)?,
            LossKind::MeanAbsoluteError => ops::mean_absolute_error(out, target)?,
        };
    }
    Ok(loss)
}

fn with_param<R>(model: &mut Model<f64>, index: usize, f: impl FnOnce(&mut Tensor<f64>) -> R) -> Result<R> {
    let mut f = Some(f);
    let mut out = None;
    let mut at = 0;
    model.visit_params(&mut |_, value, _| {
        if at == index {
            out = Some((f.take().expect("visited once"))(value));
        }
        at += 1;
        Ok(())
    })?;
    out.ok_or_else(|| Error::invalid("gradcheck", format!("parameter index {index} out of range")))
}

/// Check every parameter tensor of `model` at up to `coords_per_tensor`
/// sampled coordinates. `targets` must match the model's heads in order.
pub fn check_model_gradients(
    model: &mut Model<f64>,
    x: &Tensor<f64>,
    targets: &[Tensor<f64>],
    coords_per_tensor: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    model.set_gates_frozen(true);
    // Warm pass caches the gate masks at the unperturbed parameters.
    eval_loss(model, x, targets, seed)?;

    // Analytic gradients at the same dropout stream and masks.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ctx = ForwardCtx {
        mode: Mode::Train,
        iteration: model.iteration,
        rng: &mut rng,
        diag: None,
    };
    let outs = model.forward(x, &mut ctx)?;
    let mut head_grads = Vec::with_capacity(outs.len());
    for ((out, target), head) in outs.iter().zip(targets).zip(&model.heads) {
        head_grads.push(match head.loss {
            LossKind::BinaryCrossEntropy => ops::binary_cross_entropy_grad(out, target)?,
            LossKind::MeanAbsoluteError => ops::mean_absolute_error_grad(out, target)?,
        });
    }
    model.zero_grads();
    model.backward(&head_grads)?;

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |name, _, grad| {
        analytic.push((name.to_string(), grad.data().to_vec()));
        Ok(())
    })?;

    let mut pick = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for (t, (name, grads)) in analytic.iter().enumerate() {
        let mut coords: Vec<usize> = (0..grads.len()).collect();
        coords.shuffle(&mut pick);
        coords.truncate(coords_per_tensor.min(grads.len()));
        for &k in &coords {
            let plus = {
                with_param(model, t, |p| p.data_mut()[k] += step)?;
                eval_loss(model, x, targets, seed)?
            };
            let minus = {
                with_param(model, t, |p| p.data_mut()[k] -= 2.0 * step)?;
                eval_loss(model, x, targets, seed)?
            };
            with_param(model, t, |p| p.data_mut()[k] += step)?;
            let fd = (plus - minus) / (2.0 * step);
            let a = grads[k];
            // The denominator floor keeps central-difference roundoff noise
            // (~1e-11 absolute at this step size) from dominating coordinates
            // whose true derivative is essentially zero.
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{name}[{k}] analytic {a:.3e} fd {fd:.3e}");
            }
        }
    }
    model.set_gates_frozen(false);
    Ok(report)
}
