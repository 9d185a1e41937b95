//! Regularized negative log-likelihood and the geometric λ schedule.

use crate::diff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{Confusion, Forward};
use serde::{Deserialize, Serialize};

/// Clamp added inside every logarithm of a predicted probability.
pub const LOG_EPS: f64 = 1e-12;

/// Default weight of the trace penalty.
pub const DEFAULT_TRACE_WEIGHT: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    #[default]
    Entropy,
    Info,
    Trace,
    None,
}

impl std::fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegularizerKind::Entropy => "entropy",
            RegularizerKind::Info => "info",
            RegularizerKind::Trace => "trace",
            RegularizerKind::None => "none",
        })
    }
}

/// `λ(e) = λ₀ · ratioᵉ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaSchedule {
    pub initial: f64,
    pub ratio: f64,
}

impl LambdaSchedule {
    pub const MNIST: LambdaSchedule = LambdaSchedule { initial: 0.001506746, ratio: 1.18 };
    pub const CIFAR: LambdaSchedule = LambdaSchedule { initial: 3.0517578125e-05, ratio: 1.11 };
    pub const FMNIST: LambdaSchedule = LambdaSchedule { initial: 6.103515625e-05, ratio: 1.12 };
    pub const CURATED: LambdaSchedule = LambdaSchedule { initial: 0.01, ratio: 2.0 };
    pub const OFF: LambdaSchedule = LambdaSchedule { initial: 0.0, ratio: 1.0 };

    pub fn constant(value: f64) -> Self {
        LambdaSchedule { initial: value, ratio: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial.is_finite() && self.initial >= 0.0) {
            return Err(Error::config("train.lambda.initial", format!("must be finite and non-negative, got {}", self.initial)));
        }
        if !(self.ratio.is_finite() && self.ratio >= 1.0) {
            return Err(Error::config("train.lambda.ratio", format!("must be at least 1, got {}", self.ratio)));
        }
        Ok(())
    }

    pub fn lambda_at(&self, epoch: usize) -> f64 {
        self.initial * self.ratio.powi(epoch as i32)
    }
}

/// Shannon entropy in nats of one distribution, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// `-ln max p`.
pub fn info(p: &[f64]) -> f64 {
    -p.iter().copied().fold(f64::NEG_INFINITY, f64::max).ln()
}

/// Batch-mean `-ln(q[y] + ε)` over the rows of `q: [N, C]`.
pub fn nll(g: &mut Graph, q: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(q).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Dimension(format!("{} labels for predictions {s:?}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= s[1]) {
        return Err(Error::Usage(format!("label {bad} out of range for {} classes", s[1])));
    }
    let picked = g.gather(q, 1, labels)?;
    let shifted = g.add_scalar(picked, LOG_EPS);
    let logs = g.log(shifted)?;
    let m = g.mean(logs);
    Ok(g.neg(m))
}

/// Batch-mean entropy of the rows of `p: [N, C]`.
pub fn entropy_reg(g: &mut Graph, p: Var) -> Result<Var> {
    let rows = g.shape(p)[0];
    let t = g.xlogx(p)?;
    let s = g.sum(t);
    Ok(g.scale(s, -1.0 / rows as f64))
}

/// Batch-mean `-ln max p` of the rows of `p: [N, C]`; the gradient flows to
/// the lowest-index maximizer.
pub fn info_reg(g: &mut Graph, p: Var) -> Result<Var> {
    let m = g.max_axis(p, 1)?;
    let l = g.log(m)?;
    let mean = g.mean(l);
    Ok(g.neg(mean))
}

/// Mean over annotators and rows of `tr U`.
pub fn trace_reg(g: &mut Graph, confusions: &[Confusion], classes: usize) -> Result<Var> {
    if confusions.is_empty() {
        return Err(Error::Usage("trace of no confusion matrices".into()));
    }
    let eye = Tensor::eye(classes);
    let mut terms = Vec::with_capacity(confusions.len());
    for u in confusions {
        let t = match *u {
            Confusion::Identity => g.constant(Tensor::new(vec![1], vec![classes as f64])?),
            Confusion::Shared(u) => {
                let mask = g.constant(eye.clone());
                let d = g.mul(u, mask)?;
                let s = g.sum(d);
                g.reshape(s, &[1])?
            }
            Confusion::PerRow(u) => {
                let n = g.shape(u)[0];
                let mask = Tensor::from_fn(&[n, classes, classes], |k| eye.data()[k % (classes * classes)]);
                let mask = g.constant(mask);
                let d = g.mul(u, mask)?;
                let s = g.sum(d);
                let m = g.scale(s, 1.0 / n as f64);
                g.reshape(m, &[1])?
            }
        };
        terms.push(t);
    }
    let all = g.concat(&terms, 0)?;
    Ok(g.mean(all))
}

/// Value of each term of [`combined_loss`].
#[derive(Clone, Copy, Debug)]
pub struct Loss {
    pub total: Var,
    pub nll: Var,
    pub penalty: Option<Var>,
}

/// `Σ_r mean_n NLL(q_r, ỹ_r) + λ · mean_n R(p)`; for `Trace` the penalty is
/// `λ · trace_reg`. `labels[r]` holds annotator `r`'s label for every row.
pub fn combined_loss(
    g: &mut Graph,
    forward: &Forward,
    labels: &[Vec<usize>],
    lambda: f64,
    kind: RegularizerKind,
) -> Result<Loss> {
    if labels.len() != forward.confusions.len() {
        return Err(Error::Dimension(format!(
            "{} label sets for {} annotators",
            labels.len(),
            forward.confusions.len()
        )));
    }
    let mut nll_total: Option<Var> = None;
    for (u, y) in forward.confusions.iter().zip(labels) {
        let q = crate::model::pipeline(g, forward.probs, *u)?;
        let term = nll(g, q, y)?;
        nll_total = Some(match nll_total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let nll_total = nll_total.ok_or_else(|| Error::Usage("no annotators".into()))?;
    let classes = g.shape(forward.probs)[1];
    let penalty = match kind {
        RegularizerKind::None => None,
        RegularizerKind::Entropy => Some(entropy_reg(g, forward.probs)?),
        RegularizerKind::Info => Some(info_reg(g, forward.probs)?),
        RegularizerKind::Trace => Some(trace_reg(g, &forward.confusions, classes)?),
    };
    let total = match penalty {
        Some(r) if lambda != 0.0 => {
            let w = g.scale(r, lambda);
            g.add(nll_total, w)?
        }
        _ => nll_total,
    };
    Ok(Loss { total, nll: nll_total, penalty })
}
