//! Finite-difference checks of every loss, through softmax and through a
//! full model.

use std::fmt;

use rand::Rng;

use crate::error::Result;
use crate::losses::{regularized_batch_loss, LossKind, LossParams, LossSpec};
use crate::model::{backward, forward, init_params, Activation, Arch};
use crate::numerics::{
    finite_diff_gradient, gradient_relative_error, softmax, softmax_backward, DenseMatrix,
    LabelVector, DEFAULT_FD_STEP,
};
use crate::rng::{stream, Purpose, StreamRng};

pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub points: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error < self.tolerance)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            let status = if e.max_rel_error < self.tolerance { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{status:4} {:<28} points={:<4} max_rel_err={:.3e}",
                e.name, e.points, e.max_rel_error
            )?;
        }
        Ok(())
    }
}

fn random_params(rng: &mut StreamRng) -> LossParams {
    LossParams {
        gamma: rng.random_range(0.0..3.0),
        gce_q: rng.random_range(0.1..=1.0),
        rce_log_zero: rng.random_range(-8.0..-1.0),
        agce_a: rng.random_range(0.1..3.0),
        agce_q: rng.random_range(0.1..2.0),
        alpha: rng.random_range(0.1..2.0),
        beta: rng.random_range(0.1..2.0),
    }
}

/// Every half of the points carries an entropy term.
fn random_lambda(rng: &mut StreamRng) -> f64 {
    if rng.random_bool(0.5) {
        rng.random_range(0.0..1.0)
    } else {
        0.0
    }
}

/// Objective through softmax: regularized batch loss as a function of the
/// flattened logits.
fn logit_objective<'a>(
    spec: &'a LossSpec,
    labels: &'a LabelVector,
    lambda: f64,
    shape: (usize, usize),
) -> impl Fn(&[f64]) -> f64 + 'a {
    move |z: &[f64]| {
        let logits = DenseMatrix::new(shape.0, shape.1, z.to_vec()).expect("finite logits");
        let probs = softmax(&logits).expect("finite logits");
        regularized_batch_loss(spec, &probs, labels, lambda)
            .expect("valid batch")
            .0
    }
}

/// Largest relative error between the analytic logit gradient and central
/// differences over `points` random (logits, label, params, λ) draws.
pub fn check_logit_gradients(kind: LossKind, points: usize, seed: u64) -> Result<f64> {
    let mut rng = stream(seed, Purpose::GradCheck, kind as u64);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let k = rng.random_range(2..=10);
        let n = rng.random_range(1..=4);
        let z: Vec<f64> = (0..n * k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels = LabelVector::new((0..n).map(|_| rng.random_range(0..k)).collect(), k)?;
        let spec = LossSpec::new(kind, random_params(&mut rng), None)?;
        let lambda = random_lambda(&mut rng);

        let logits = DenseMatrix::new(n, k, z.clone())?;
        let probs = softmax(&logits)?;
        let (_, grad_p) = regularized_batch_loss(&spec, &probs, &labels, lambda)?;
        let analytic = softmax_backward(&probs, &grad_p)?;
        let numeric = finite_diff_gradient(
            logit_objective(&spec, &labels, lambda, (n, k)),
            &z,
            DEFAULT_FD_STEP,
        )?;
        worst = worst.max(gradient_relative_error(analytic.as_slice(), &numeric));
    }
    Ok(worst)
}

/// Largest relative error of d(loss)/d(parameters) for a small tanh MLP on
/// a 3-class, 8-sample toy problem, with and without the entropy term.
pub fn check_model_gradients(kind: LossKind, seed: u64) -> Result<f64> {
    let mut rng = stream(seed, Purpose::GradCheck, 100 + kind as u64);
    let (n, d, k) = (8, 4, 3);
    let x = DenseMatrix::new(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let labels = LabelVector::new((0..n).map(|i| i % k).collect(), k)?;
    let spec = LossSpec::new(kind, LossParams::default(), None)?;
    let arch = Arch::Mlp {
        depth: 2,
        hidden: 5,
        activation: Activation::Tanh,
    };
    let params = init_params(arch, d, k, seed)?;
    let mut worst: f64 = 0.0;
    for lambda in [0.0, 0.2] {
        let (logits, cache) = forward(&params, &x)?;
        let probs = softmax(&logits)?;
        let (_, grad_p) = regularized_batch_loss(&spec, &probs, &labels, lambda)?;
        let grads = backward(&params, &cache, &softmax_backward(&probs, &grad_p)?)?;

        let mut probe = params.clone();
        let objective = |theta: &[f64]| {
            probe.set_flat(theta).expect("same layout");
            let (z, _) = forward(&probe, &x).expect("forward");
            let p = softmax(&z).expect("finite logits");
            regularized_batch_loss(&spec, &p, &labels, lambda)
                .expect("valid batch")
                .0
        };
        let numeric = finite_diff_gradient(objective, &params.flatten(), DEFAULT_FD_STEP)?;
        worst = worst.max(gradient_relative_error(&grads.flatten(), &numeric));
    }
    Ok(worst)
}

/// The full suite: `points` random logit-space checks per loss kind, plus
/// one model-level check per kind.
pub fn run_grad_check_suite(points: usize, seed: u64) -> Result<GradCheckReport> {
    let mut entries = Vec::with_capacity(2 * LossKind::ALL.len());
    for kind in LossKind::ALL {
        entries.push(GradCheckEntry {
            name: format!("{kind} (logits)"),
            points,
            max_rel_error: check_logit_gradients(kind, points, seed)?,
        });
    }
    for kind in LossKind::ALL {
        entries.push(GradCheckEntry {
            name: format!("{kind} (mlp params)"),
            points: 2,
            max_rel_error: check_model_gradients(kind, seed)?,
        });
    }
    Ok(GradCheckReport {
        entries,
        tolerance: GRAD_CHECK_TOLERANCE,
    })
}
