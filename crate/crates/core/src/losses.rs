//! Classification losses on probability rows.
//!
//! Every loss takes a probability row `p` (post-softmax) and a class index and
//! returns the value together with `∂L/∂p`, treating the entries of `p` as
//! free variables. Gradients reach the logits through
//! [`softmax_backward`](crate::numerics::softmax_backward), so each loss owns
//! exactly one derivative and the finite-difference oracle can check all of
//! them the same way.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{clamp_prob, row_entropy, DenseMatrix, LabelVector, ProbBatch, PROB_FLOOR};

/// A loss value and its gradient with respect to the probability row.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossGrad {
    fn zeros(value: f64, k: usize) -> Self {
        Self {
            value,
            grad: vec![0.0; k],
        }
    }
}

/// `d/dp ln(clamp(p))`; zero where the clamp is active.
#[inline]
fn dlog(p: f64) -> f64 {
    if p > PROB_FLOOR {
        1.0 / p
    } else {
        0.0
    }
}

/// Cross entropy `−ln p_y`.
pub fn ce(p: &[f64], y: usize) -> LossGrad {
    let mut out = LossGrad::zeros(-clamp_prob(p[y]).ln(), p.len());
    out.grad[y] = -dlog(p[y]);
    out
}

/// Focal loss `−(1 − p_y)^γ ln p_y`.
pub fn focal(p: &[f64], y: usize, gamma: f64) -> LossGrad {
    let py = p[y];
    let ln_p = clamp_prob(py).ln();
    let one_minus = (1.0 - py).max(0.0);
    let weight = one_minus.powf(gamma);
    let mut out = LossGrad::zeros(-weight * ln_p, p.len());
    let slope = if gamma == 0.0 || one_minus == 0.0 {
        0.0
    } else {
        gamma * one_minus.powf(gamma - 1.0) * ln_p
    };
    out.grad[y] = slope - weight * dlog(py);
    out
}

/// Mean absolute error against the one-hot target, `Σ_k |q_k − p_k|`.
pub fn mae(p: &[f64], y: usize) -> LossGrad {
    let mut value = 0.0;
    let mut grad = vec![0.0; p.len()];
    for (k, (&pk, g)) in p.iter().zip(grad.iter_mut()).enumerate() {
        let target = if k == y { 1.0 } else { 0.0 };
        value += (target - pk).abs();
        *g = if k == y { -1.0 } else { 1.0 };
    }
    LossGrad { value, grad }
}

/// Generalized cross entropy `(1 − p_y^q) / q`.
pub fn gce(p: &[f64], y: usize, q: f64) -> LossGrad {
    let py = clamp_prob(p[y]);
    let mut out = LossGrad::zeros((1.0 - py.powf(q)) / q, p.len());
    out.grad[y] = if p[y] > PROB_FLOOR { -py.powf(q - 1.0) } else { 0.0 };
    out
}

/// Reverse cross entropy `−Σ_k p_k ln q_k`, with `ln 0` replaced by `log_zero`.
/// For a one-hot target this is `−log_zero · Σ_{k≠y} p_k`.
pub fn rce(p: &[f64], y: usize, log_zero: f64) -> LossGrad {
    let off_target: f64 = p
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != y)
        .map(|(_, &pk)| pk)
        .sum();
    let mut grad = vec![-log_zero; p.len()];
    grad[y] = 0.0;
    LossGrad {
        value: -log_zero * off_target,
        grad,
    }
}

/// Symmetric cross entropy `α·CE + β·RCE`.
pub fn sce(p: &[f64], y: usize, alpha: f64, beta: f64, log_zero: f64) -> LossGrad {
    apl_combine(&ce(p, y), &rce(p, y, log_zero), alpha, beta)
}

/// Normalized cross entropy `ln p_y / Σ_k ln p_k`, in `[0, 1]`.
pub fn nce(p: &[f64], y: usize) -> LossGrad {
    let neg_logs: Vec<f64> = p.iter().map(|&pk| -clamp_prob(pk).ln()).collect();
    let num = neg_logs[y];
    let den: f64 = neg_logs.iter().sum();
    let den2 = den * den;
    let grad = p
        .iter()
        .enumerate()
        .map(|(k, &pk)| {
            let own = if k == y { -dlog(pk) * den } else { 0.0 };
            (own + num * dlog(pk)) / den2
        })
        .collect();
    LossGrad {
        value: num / den,
        grad,
    }
}

/// Asymmetric generalized cross entropy `((a + 1)^q − (a + p_y)^q) / q`.
pub fn agce(p: &[f64], y: usize, a: f64, q: f64) -> LossGrad {
    let base = a + p[y];
    let mut out = LossGrad::zeros(((a + 1.0).powf(q) - base.powf(q)) / q, p.len());
    out.grad[y] = -base.powf(q - 1.0);
    out
}

/// Normalized negative cross entropy
/// `1 − ln(1 − p_y) / Σ_k ln(1 − p_k)`, in `[0, 1]`.
///
/// A passive loss: it is small when little mass sits on the non-target
/// classes.
pub fn nnce(p: &[f64], y: usize) -> LossGrad {
    let neg_logs: Vec<f64> = p.iter().map(|&pk| -clamp_prob(1.0 - pk).ln()).collect();
    let dneg: Vec<f64> = p.iter().map(|&pk| dlog(1.0 - pk)).collect();
    let num = neg_logs[y];
    let den: f64 = neg_logs.iter().sum();
    let den2 = den * den;
    let grad = (0..p.len())
        .map(|k| {
            let own = if k == y { dneg[y] * den } else { 0.0 };
            -(own - num * dneg[k]) / den2
        })
        .collect();
    LossGrad {
        value: 1.0 - num / den,
        grad,
    }
}

/// Negative-learning loss `−ln(1 − p_c)` for a complementary label `c`.
pub fn nl_loss(p: &[f64], complementary: usize) -> LossGrad {
    let rest = 1.0 - p[complementary];
    let mut out = LossGrad::zeros(-clamp_prob(rest).ln(), p.len());
    out.grad[complementary] = dlog(rest);
    out
}

/// `α·active + β·passive`, applied to both value and gradient.
pub fn apl_combine(active: &LossGrad, passive: &LossGrad, alpha: f64, beta: f64) -> LossGrad {
    debug_assert_eq!(active.grad.len(), passive.grad.len());
    LossGrad {
        value: alpha * active.value + beta * passive.value,
        grad: active
            .grad
            .iter()
            .zip(&passive.grad)
            .map(|(a, p)| alpha * a + beta * p)
            .collect(),
    }
}

/// The loss families supported by [`LossSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    Ce,
    Focal,
    Mae,
    Gce,
    Rce,
    Sce,
    Nce,
    Agce,
    Nnce,
    Nl,
    NceRce,
    NceAgce,
    AnlCe,
}

impl LossKind {
    pub const ALL: [LossKind; 13] = [
        LossKind::Ce,
        LossKind::Focal,
        LossKind::Mae,
        LossKind::Gce,
        LossKind::Rce,
        LossKind::Sce,
        LossKind::Nce,
        LossKind::Agce,
        LossKind::Nnce,
        LossKind::Nl,
        LossKind::NceRce,
        LossKind::NceAgce,
        LossKind::AnlCe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Focal => "fl",
            LossKind::Mae => "mae",
            LossKind::Gce => "gce",
            LossKind::Rce => "rce",
            LossKind::Sce => "sce",
            LossKind::Nce => "nce",
            LossKind::Agce => "agce",
            LossKind::Nnce => "nnce",
            LossKind::Nl => "nl",
            LossKind::NceRce => "nce+rce",
            LossKind::NceAgce => "nce+agce",
            LossKind::AnlCe => "anl-ce",
        }
    }

    /// Whether training feeds this loss complementary ("not this class")
    /// labels instead of the annotated ones.
    pub fn uses_complementary_labels(self) -> bool {
        self == LossKind::Nl
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let kind = match lower.as_str() {
            "focal" => LossKind::Focal,
            "anl" | "anl_ce" => LossKind::AnlCe,
            other => *LossKind::ALL
                .iter()
                .find(|k| k.name() == other)
                .ok_or_else(|| Error::invalid(format!("unknown loss `{s}`")))?,
        };
        Ok(kind)
    }
}

/// Hyperparameters shared by the loss families. Each kind reads only the
/// ones it needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    /// Focal exponent γ.
    pub gamma: f64,
    /// GCE exponent q.
    pub gce_q: f64,
    /// Stand-in A for `ln 0` in RCE (must be negative).
    pub rce_log_zero: f64,
    /// AGCE offset a.
    pub agce_a: f64,
    /// AGCE exponent q.
    pub agce_q: f64,
    /// Weight of the active (or CE) term.
    pub alpha: f64,
    /// Weight of the passive (or RCE) term.
    pub beta: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            gce_q: 0.7,
            rce_log_zero: -4.0,
            agce_a: 0.6,
            agce_q: 0.6,
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

/// How the entropy weight λ evolves over epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    Constant,
    /// Ramp from 0 at the first epoch to `lambda_max` at the last.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub kind: ScheduleKind,
    pub lambda_max: f64,
    pub total_epochs: usize,
}

impl LambdaSchedule {
    pub fn new(kind: ScheduleKind, lambda_max: f64, total_epochs: usize) -> Result<Self> {
        if !(lambda_max >= 0.0 && lambda_max.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda_max must be a finite value >= 0, got {lambda_max}"
            )));
        }
        if total_epochs == 0 {
            return Err(Error::invalid("schedule needs at least one epoch"));
        }
        Ok(Self {
            kind,
            lambda_max,
            total_epochs,
        })
    }

    /// Parses `constant:<λ>` or `linear:<λmax>`.
    pub fn parse(text: &str, total_epochs: usize) -> Result<Self> {
        let (kind, value) = text
            .trim()
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("expected `kind:value`, got `{text}`")))?;
        let kind = match kind.trim().to_ascii_lowercase().as_str() {
            "constant" | "const" => ScheduleKind::Constant,
            "linear" => ScheduleKind::Linear,
            other => return Err(Error::invalid(format!("unknown schedule kind `{other}`"))),
        };
        let lambda_max: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("bad lambda value `{value}`")))?;
        Self::new(kind, lambda_max, total_epochs)
    }

    /// λ in effect during `epoch` (zero-based).
    pub fn lambda_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::invalid(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        Ok(match self.kind {
            ScheduleKind::Constant => self.lambda_max,
            ScheduleKind::Linear if self.total_epochs == 1 => self.lambda_max,
            ScheduleKind::Linear => {
                self.lambda_max * epoch as f64 / (self.total_epochs - 1) as f64
            }
        })
    }
}

impl fmt::Display for LambdaSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ScheduleKind::Constant => "constant",
            ScheduleKind::Linear => "linear",
        };
        write!(f, "{kind}:{}", self.lambda_max)
    }
}

/// Free-function form of [`LambdaSchedule::lambda_at`].
pub fn lambda_at(schedule: &LambdaSchedule, epoch: usize) -> Result<f64> {
    schedule.lambda_at(epoch)
}

/// A loss family, its hyperparameters and an optional entropy schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub params: LossParams,
    pub entropy_schedule: Option<LambdaSchedule>,
}

impl LossSpec {
    pub fn new(
        kind: LossKind,
        params: LossParams,
        entropy_schedule: Option<LambdaSchedule>,
    ) -> Result<Self> {
        let spec = Self {
            kind,
            params,
            entropy_schedule,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A spec with default hyperparameters and no entropy term.
    pub fn plain(kind: LossKind) -> Self {
        Self {
            kind,
            params: LossParams::default(),
            entropy_schedule: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        let check = |ok: bool, what: &str, v: f64| {
            if ok {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "{} loss: {what} out of range ({v})",
                    self.kind
                )))
            }
        };
        let weights = || {
            check(p.alpha >= 0.0 && p.alpha.is_finite(), "alpha", p.alpha)?;
            check(p.beta >= 0.0 && p.beta.is_finite(), "beta", p.beta)
        };
        let log_zero = || check(p.rce_log_zero < 0.0 && p.rce_log_zero.is_finite(), "rce A", p.rce_log_zero);
        let agce = || {
            check(p.agce_a > 0.0 && p.agce_a.is_finite(), "agce a", p.agce_a)?;
            check(p.agce_q > 0.0 && p.agce_q.is_finite(), "agce q", p.agce_q)
        };
        match self.kind {
            LossKind::Focal => check(p.gamma >= 0.0 && p.gamma.is_finite(), "gamma", p.gamma),
            LossKind::Gce => check(p.gce_q > 0.0 && p.gce_q <= 1.0, "gce q", p.gce_q),
            LossKind::Rce => log_zero(),
            LossKind::Sce | LossKind::NceRce => {
                weights()?;
                log_zero()
            }
            LossKind::Agce => agce(),
            LossKind::NceAgce => {
                weights()?;
                agce()
            }
            LossKind::AnlCe => weights(),
            LossKind::Ce | LossKind::Mae | LossKind::Nce | LossKind::Nnce | LossKind::Nl => Ok(()),
        }
    }

    /// Per-sample loss. For [`LossKind::Nl`], `label` is the complementary label.
    pub fn eval(&self, p: &[f64], label: usize) -> LossGrad {
        let k = &self.params;
        match self.kind {
            LossKind::Ce => ce(p, label),
            LossKind::Focal => focal(p, label, k.gamma),
            LossKind::Mae => mae(p, label),
            LossKind::Gce => gce(p, label, k.gce_q),
            LossKind::Rce => rce(p, label, k.rce_log_zero),
            LossKind::Sce => sce(p, label, k.alpha, k.beta, k.rce_log_zero),
            LossKind::Nce => nce(p, label),
            LossKind::Agce => agce(p, label, k.agce_a, k.agce_q),
            LossKind::Nnce => nnce(p, label),
            LossKind::Nl => nl_loss(p, label),
            LossKind::NceRce => apl_combine(
                &nce(p, label),
                &rce(p, label, k.rce_log_zero),
                k.alpha,
                k.beta,
            ),
            LossKind::NceAgce => apl_combine(
                &nce(p, label),
                &agce(p, label, k.agce_a, k.agce_q),
                k.alpha,
                k.beta,
            ),
            LossKind::AnlCe => apl_combine(&nce(p, label), &nnce(p, label), k.alpha, k.beta),
        }
    }

    /// λ for `epoch` under this spec's schedule (zero when there is none).
    pub fn lambda_for_epoch(&self, epoch: usize) -> Result<f64> {
        self.entropy_schedule
            .as_ref()
            .map_or(Ok(0.0), |s| s.lambda_at(epoch))
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        if let Some(s) = &self.entropy_schedule {
            write!(f, "+H[{s}]")?;
        }
        Ok(())
    }
}

/// Mean base loss over the batch plus `λ` times the mean prediction entropy.
///
/// Returns the value and its gradient with respect to every probability. The
/// gradient already carries the `1/n` of the batch mean, so downstream
/// backward passes must not divide again.
pub fn regularized_batch_loss(
    base: &LossSpec,
    probs: &ProbBatch,
    labels: &LabelVector,
    lambda: f64,
) -> Result<(f64, DenseMatrix)> {
    let n = probs.num_samples();
    let k = probs.num_classes();
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if labels.len() != n {
        return Err(Error::invalid(format!(
            "{} labels for {n} probability rows",
            labels.len()
        )));
    }
    if labels.num_classes() != k {
        return Err(Error::invalid(format!(
            "labels over {} classes, probabilities over {k}",
            labels.num_classes()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }

    let inv_n = 1.0 / n as f64;
    let mut base_sum = 0.0;
    let mut entropy_sum = 0.0;
    let mut grad = Vec::with_capacity(n * k);
    for (row, &y) in probs.matrix().iter_rows().zip(labels.labels()) {
        let lg = base.eval(row, y);
        base_sum += lg.value;
        if lambda > 0.0 {
            entropy_sum += row_entropy(row);
            grad.extend(
                lg.grad
                    .iter()
                    .zip(row)
                    .map(|(g, &p)| inv_n * (g - lambda * (clamp_prob(p).ln() + 1.0))),
            );
        } else {
            grad.extend(lg.grad.iter().map(|g| inv_n * g));
        }
    }
    let mut value = base_sum / n as f64;
    if lambda > 0.0 {
        value += lambda * (entropy_sum / n as f64);
    }
    Ok((value, DenseMatrix::from_vec_unchecked(n, k, grad)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_gradient, gradient_relative_error, softmax, DEFAULT_FD_STEP};

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn ce_examples() {
        close(ce(&[1.0, 0.0], 0).value, 0.0, 0.0);
        close(ce(&[0.5, 0.5], 0).value, 2f64.ln(), 1e-12);
        close(ce(&[0.8, 0.2], 0).value, 0.223144, 1e-6);
        assert_eq!(ce(&[0.8, 0.2], 0).grad, vec![-1.25, 0.0]);
    }

    #[test]
    fn focal_examples() {
        close(focal(&[1.0, 0.0], 0, 0.5).value, 0.0, 0.0);
        close(focal(&[0.5, 0.5], 0, 0.5).value, 0.490129, 1e-6);
        for p in [[0.3, 0.7], [0.9, 0.1], [1.0, 0.0]] {
            for y in 0..2 {
                assert_eq!(focal(&p, y, 0.0), ce(&p, y));
            }
        }
        assert!(focal(&[1.0, 0.0], 0, 0.5).grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn mae_examples() {
        close(mae(&[1.0, 0.0], 0).value, 0.0, 0.0);
        close(mae(&[0.0, 1.0], 0).value, 2.0, 0.0);
        close(mae(&[0.5, 0.5], 0).value, 1.0, 0.0);
        assert_eq!(mae(&[0.2, 0.3, 0.5], 1).grad, vec![1.0, -1.0, 1.0]);
    }

    #[test]
    fn gce_examples() {
        close(gce(&[1.0, 0.0], 0, 0.7).value, 0.0, 0.0);
        close(gce(&[0.3, 0.7], 0, 1.0).value, 0.7, 1e-15);
        close(gce(&[0.5, 0.5], 0, 0.7).value, 0.549182, 1e-6);
    }

    #[test]
    fn rce_examples() {
        close(rce(&[1.0, 0.0], 0, -4.0).value, 0.0, 0.0);
        close(rce(&[0.0, 1.0], 0, -4.0).value, 4.0, 0.0);
        close(rce(&[0.5, 0.5], 0, -4.0).value, 2.0, 0.0);
        assert_eq!(rce(&[0.2, 0.3, 0.5], 2, -4.0).grad, vec![4.0, 4.0, 0.0]);
    }

    #[test]
    fn sce_examples() {
        let p = [0.35, 0.65];
        assert_eq!(sce(&p, 0, 1.0, 0.0, -4.0).value, ce(&p, 0).value);
        assert_eq!(sce(&p, 0, 0.0, 1.0, -4.0).value, rce(&p, 0, -4.0).value);
        close(sce(&[0.5, 0.5], 0, 1.0, 1.0, -4.0).value, 2.693147, 1e-6);
    }

    #[test]
    fn nce_examples() {
        for k in [2usize, 3, 7] {
            let p = vec![1.0 / k as f64; k];
            close(nce(&p, k - 1).value, 1.0 / k as f64, 1e-12);
        }
        close(nce(&[1.0, 0.0], 0).value, 0.0, 1e-12);
        close(nce(&[0.8, 0.2], 0).value, 0.121760, 1e-5);
    }

    #[test]
    fn agce_examples() {
        close(agce(&[1.0, 0.0], 0, 0.6, 0.6).value, 0.0, 1e-15);
        close(agce(&[0.0, 1.0], 0, 0.6, 0.6).value, 0.982933, 1e-6);
        close(agce(&[0.5, 0.5], 0, 0.6, 0.6).value, 0.444881, 1e-6);
    }

    #[test]
    fn nnce_examples() {
        close(nnce(&[0.5, 0.5], 0).value, 0.5, 1e-12);
        close(nnce(&[1.0, 0.0], 0).value, 0.0, 1e-12);
        close(nnce(&[0.8, 0.2], 0).value, 0.121760, 1e-5);
    }

    #[test]
    fn nl_examples() {
        close(nl_loss(&[1.0, 0.0], 1).value, 0.0, 0.0);
        close(nl_loss(&[0.5, 0.5], 1).value, 2f64.ln(), 1e-12);
        close(nl_loss(&[0.2, 0.8], 1).value, 1.609438, 1e-6);
        close(nl_loss(&[0.8, 0.2], 1).value, 0.223144, 1e-6);
    }

    #[test]
    fn apl_combine_examples() {
        let a = LossGrad { value: 0.3, grad: vec![1.0, -2.0] };
        let b = LossGrad { value: 0.2, grad: vec![0.5, 0.5] };
        assert_eq!(apl_combine(&a, &b, 1.0, 0.0), a);
        assert_eq!(apl_combine(&a, &b, 0.0, 1.0), b);
        let c = apl_combine(&a, &b, 1.0, 1.0);
        close(c.value, 0.5, 1e-15);
        assert_eq!(c.grad, vec![1.5, -1.5]);
    }

    #[test]
    fn lambda_schedule_examples() {
        let s = LambdaSchedule::new(ScheduleKind::Linear, 0.3, 50).unwrap();
        assert_eq!(lambda_at(&s, 0).unwrap(), 0.0);
        close(lambda_at(&s, 49).unwrap(), 0.3, 1e-15);
        let s = LambdaSchedule::new(ScheduleKind::Linear, 0.3, 51).unwrap();
        close(s.lambda_at(25).unwrap(), 0.15, 1e-15);
        assert!(s.lambda_at(51).is_err());

        let one = LambdaSchedule::new(ScheduleKind::Linear, 0.3, 1).unwrap();
        assert_eq!(one.lambda_at(0).unwrap(), 0.3);
        let c = LambdaSchedule::new(ScheduleKind::Constant, 0.1, 5).unwrap();
        assert!((0..5).all(|e| c.lambda_at(e).unwrap() == 0.1));

        assert!(LambdaSchedule::new(ScheduleKind::Constant, -0.1, 5).is_err());
        assert!(LambdaSchedule::new(ScheduleKind::Constant, 0.1, 0).is_err());
    }

    #[test]
    fn lambda_schedule_parse() {
        let s = LambdaSchedule::parse("linear:0.3", 30).unwrap();
        assert_eq!(s, LambdaSchedule::new(ScheduleKind::Linear, 0.3, 30).unwrap());
        let s = LambdaSchedule::parse(" constant : 0.01 ", 30).unwrap();
        assert_eq!(s.kind, ScheduleKind::Constant);
        assert!(LambdaSchedule::parse("cosine:0.3", 30).is_err());
        assert!(LambdaSchedule::parse("linear", 30).is_err());
        assert_eq!(s.to_string(), "constant:0.01");
    }

    #[test]
    fn loss_kind_names_round_trip() {
        for kind in LossKind::ALL {
            assert_eq!(kind.name().parse::<LossKind>().unwrap(), kind);
        }
        assert_eq!("focal".parse::<LossKind>().unwrap(), LossKind::Focal);
        assert!("lose".parse::<LossKind>().is_err());
    }

    #[test]
    fn spec_validation_rejects_out_of_range_params() {
        let bad = |kind, f: fn(&mut LossParams)| {
            let mut p = LossParams::default();
            f(&mut p);
            LossSpec::new(kind, p, None).is_err()
        };
        assert!(bad(LossKind::Focal, |p| p.gamma = -0.1));
        assert!(bad(LossKind::Gce, |p| p.gce_q = 0.0));
        assert!(bad(LossKind::Gce, |p| p.gce_q = 1.5));
        assert!(bad(LossKind::Rce, |p| p.rce_log_zero = 0.0));
        assert!(bad(LossKind::Agce, |p| p.agce_a = 0.0));
        assert!(bad(LossKind::NceAgce, |p| p.agce_q = -1.0));
        assert!(bad(LossKind::AnlCe, |p| p.beta = -1.0));
        // params a kind does not read are ignored
        assert!(!bad(LossKind::Ce, |p| p.gamma = -5.0));
    }

    fn batch(rows: &[Vec<f64>]) -> ProbBatch {
        ProbBatch::from_rows(rows).unwrap()
    }

    #[test]
    fn regularized_loss_reductions() {
        let probs = batch(&[vec![0.7, 0.2, 0.1], vec![0.1, 0.3, 0.6]]);
        let labels = LabelVector::new(vec![0, 1], 3).unwrap();
        for kind in LossKind::ALL {
            let spec = LossSpec::plain(kind);
            let (v, _) = regularized_batch_loss(&spec, &probs, &labels, 0.0).unwrap();
            let manual = (spec.eval(probs.row(0), 0).value + spec.eval(probs.row(1), 1).value) / 2.0;
            assert_eq!(v.to_bits(), manual.to_bits(), "{kind}");
        }
    }

    #[test]
    fn regularized_loss_adds_weighted_entropy() {
        // base value 0.5 (MAE on p_y = 0.75) and uniform k=e: H = 1 is not
        // reachable exactly, so check linearity against the computed entropy
        let probs = batch(&[vec![0.75, 0.25]]);
        let labels = LabelVector::new(vec![0], 2).unwrap();
        let spec = LossSpec::plain(LossKind::Mae);
        let (v, _) = regularized_batch_loss(&spec, &probs, &labels, 0.3).unwrap();
        let h = row_entropy(probs.row(0));
        close(v, 0.5 + 0.3 * h, 1e-15);
    }

    #[test]
    fn regularized_loss_rejects_bad_inputs() {
        let probs = batch(&[vec![0.5, 0.5]]);
        let spec = LossSpec::plain(LossKind::Ce);
        let two = LabelVector::new(vec![0, 1], 2).unwrap();
        assert!(regularized_batch_loss(&spec, &probs, &two, 0.1).is_err());
        let three = LabelVector::new(vec![0], 3).unwrap();
        assert!(regularized_batch_loss(&spec, &probs, &three, 0.1).is_err());
        let one = LabelVector::new(vec![0], 2).unwrap();
        assert!(regularized_batch_loss(&spec, &probs, &one, -0.1).is_err());
    }

    #[test]
    fn regularized_gradient_matches_probability_space_oracle() {
        // the probability-space gradient treats p as free variables
        let rows = vec![vec![0.6, 0.3, 0.1], vec![0.2, 0.2, 0.6]];
        let labels = LabelVector::new(vec![1, 2], 3).unwrap();
        for kind in LossKind::ALL {
            let spec = LossSpec::plain(kind);
            let probs = batch(&rows);
            let (_, g) = regularized_batch_loss(&spec, &probs, &labels, 0.25).unwrap();
            let flat: Vec<f64> = rows.concat();
            let f = |x: &[f64]| {
                let m = DenseMatrix::from_vec_unchecked(2, 3, x.to_vec());
                // bypass ProbBatch validation: perturbed rows leave the simplex
                let pb = ProbBatch::from_matrix_unchecked(m);
                regularized_batch_loss(&spec, &pb, &labels, 0.25).unwrap().0
            };
            let numeric = finite_diff_gradient(f, &flat, DEFAULT_FD_STEP).unwrap();
            let err = gradient_relative_error(g.as_slice(), &numeric);
            assert!(err < 1e-6, "{kind}: {err}");
        }
    }

    #[test]
    fn entropy_gradient_through_softmax_matches_oracle() {
        let z = vec![0.3, -0.8, 1.1, 0.0];
        let labels = LabelVector::new(vec![2], 4).unwrap();
        let spec = LossSpec::plain(LossKind::Ce);
        let f = |z: &[f64]| {
            let p = softmax(&DenseMatrix::from_vec_unchecked(1, 4, z.to_vec())).unwrap();
            regularized_batch_loss(&spec, &p, &labels, 0.3).unwrap().0
        };
        let p = softmax(&DenseMatrix::from_vec_unchecked(1, 4, z.clone())).unwrap();
        let (_, gp) = regularized_batch_loss(&spec, &p, &labels, 0.3).unwrap();
        let gz = crate::numerics::softmax_backward(&p, &gp).unwrap();
        let numeric = finite_diff_gradient(f, &z, DEFAULT_FD_STEP).unwrap();
        assert!(gradient_relative_error(gz.as_slice(), &numeric) < 1e-6);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        /// Interior simplex points, kept away from the clamp boundary.
        fn simplex() -> impl Strategy<Value = Vec<f64>> {
            (2usize..11).prop_flat_map(|k| {
                prop::collection::vec(0.05f64..1.0, k).prop_map(|w| {
                    let s: f64 = w.iter().sum();
                    w.into_iter().map(|v| v / s).collect()
                })
            })
        }

        proptest! {
            #[test]
            fn symmetric_losses_sum_to_constants(p in simplex(), a in -8.0f64..-0.5) {
                let k = p.len();
                let mae_sum: f64 = (0..k).map(|y| mae(&p, y).value).sum();
                let nce_sum: f64 = (0..k).map(|y| nce(&p, y).value).sum();
                let rce_sum: f64 = (0..k).map(|y| rce(&p, y, a).value).sum();
                prop_assert!((mae_sum - 2.0 * (k as f64 - 1.0)).abs() < 1e-9);
                prop_assert!((nce_sum - 1.0).abs() < 1e-9);
                prop_assert!((rce_sum + a * (k as f64 - 1.0)).abs() < 1e-9);
            }

            #[test]
            fn bounded_losses_stay_in_range(
                p in simplex(),
                y_seed in 0usize..100,
                q in 0.05f64..=1.0,
                a in 0.05f64..3.0,
            ) {
                let y = y_seed % p.len();
                let v = nce(&p, y).value;
                prop_assert!((0.0..=1.0).contains(&v));
                let v = nnce(&p, y).value;
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v));
                let v = gce(&p, y, q).value;
                prop_assert!(v >= 0.0 && v <= 1.0 / q);
                let v = agce(&p, y, a, q).value;
                prop_assert!(v >= 0.0 && v <= ((a + 1.0).powf(q) - a.powf(q)) / q + 1e-12);
            }

            #[test]
            fn reductions_hold(p in simplex(), y_seed in 0usize..100) {
                let y = y_seed % p.len();
                prop_assert_eq!(focal(&p, y, 0.0), ce(&p, y));
                prop_assert!((gce(&p, y, 1.0).value - (1.0 - p[y])).abs() < 1e-12);
            }

            #[test]
            fn apl_combine_is_linear(
                v1 in -5.0f64..5.0, v2 in -5.0f64..5.0, w1 in -5.0f64..5.0,
                alpha in 0.0f64..3.0, beta in 0.0f64..3.0, s in 0.0f64..3.0,
            ) {
                let a = LossGrad { value: v1, grad: vec![w1, v2] };
                let b = LossGrad { value: v2, grad: vec![v1, w1] };
                let c = apl_combine(&a, &b, alpha * s, beta * s);
                let d = apl_combine(&a, &b, alpha, beta);
                prop_assert!((c.value - s * d.value).abs() < 1e-9);
                for (x, y) in c.grad.iter().zip(&d.grad) {
                    prop_assert!((x - s * y).abs() < 1e-9);
                }
            }
        }
    }
}
