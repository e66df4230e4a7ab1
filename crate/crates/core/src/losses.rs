//! Training and adaptation losses, and parameter importance estimation.
//!
//! Every loss exists in two forms: a graph form (`*_var`) that records onto
//! a [`Graph`] so it can be differentiated, and a value form that evaluates
//! a throwaway graph and returns the scalar.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::guidance::UNLABELLED;
use crate::params::{ParamSet, ParamVars};
use crate::segnet::{Prediction, SegNet, PROB_EPS};
use crate::tensor::{Tensor, TensorError};

/// Per-parameter importance weights, non-negative, mirroring a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceSet(ParamSet);

impl ImportanceSet {
    pub fn from_params(params: ParamSet) -> Result<Self> {
        if params.iter().any(|(_, t)| t.data().iter().any(|&v| v < 0.0)) {
            return Err(Error::Config("importance weights must be non-negative".into()));
        }
        Ok(Self(params))
    }

    pub(crate) fn from_params_unchecked(params: ParamSet) -> Self {
        Self(params)
    }

    /// Uniform importance of one for every entry.
    pub fn ones_like(params: &ParamSet) -> Self {
        Self(params.iter().map(|(n, t)| (n.clone(), Tensor::full(t.shape(), 1.0))).collect())
    }

    pub fn as_params(&self) -> &ParamSet {
        &self.0
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    /// Mean over every scalar entry.
    pub fn mean(&self) -> f64 {
        let total: f64 = self.0.iter().map(|(_, t)| t.sum()).sum();
        total / self.0.num_scalars() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptLossConfig {
    /// Weight of the correction term; the prediction anchor gets `1 - lambda`.
    pub lambda: f64,
    /// Strength of the importance-weighted drift penalty.
    pub gamma: f64,
    /// Drops the correction term entirely (ablation).
    #[serde(default)]
    pub without_corrections: bool,
}

impl AdaptLossConfig {
    pub fn new(lambda: f64, gamma: f64) -> Result<Self> {
        let cfg = Self {
            lambda,
            gamma,
            without_corrections: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma {} must be finite and >= 0", self.gamma)));
        }
        Ok(())
    }
}

/// `-Σ w·[t·log p + (1-t)·log(1-p)]` with `p` clamped to `[ε, 1-ε]`.
fn weighted_bce(g: &mut Graph, probs: Var, target: &Tensor, weights: &Tensor) -> Result<Var> {
    g.value(probs).expect_shape("bce", target.shape())?;
    let p = g.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
    let log_p = g.log(p)?;
    let neg = g.scale(p, -1.0)?;
    let one_minus = g.offset(neg, 1.0)?;
    let log_q = g.log(one_minus)?;
    let wt = g.constant(weights.zip_map(target, "bce", |w, t| w * t)?);
    let wnt = g.constant(weights.zip_map(target, "bce", |w, t| w * (1.0 - t))?);
    let a = g.mul(wt, log_p)?;
    let b = g.mul(wnt, log_q)?;
    let s = g.add(a, b)?;
    let total = g.sum(s);
    Ok(g.scale(total, -1.0)?)
}

/// Dense cross-entropy averaged over all pixels.
pub fn ce_loss_var(g: &mut Graph, probs: Var, y: &Tensor) -> Result<Var> {
    let w = Tensor::full(y.shape(), 1.0 / y.len() as f64);
    weighted_bce(g, probs, y, &w)
}

/// Cross-entropy averaged over the pixels with a correction (`c != -1`).
pub fn gce_loss_var(g: &mut Graph, probs: Var, c: &Tensor) -> Result<Var> {
    let count = c.data().iter().filter(|&&v| v != UNLABELLED).count();
    if count == 0 {
        return Err(Error::NoCorrections);
    }
    let inv = 1.0 / count as f64;
    let w = c.map(|v| if v != UNLABELLED { inv } else { 0.0 });
    let target = c.map(|v| if v != UNLABELLED { v } else { 0.0 });
    weighted_bce(g, probs, &target, &w)
}

/// The correction loss with the binary initial prediction as a dense target.
pub fn gce_on_prediction_var(g: &mut Graph, probs: Var, p0: &Prediction) -> Result<Var> {
    ce_loss_var(g, probs, &p0.binary)
}

/// `Σ ω·(θ − θ*)²` over every parameter entry.
pub fn mas_penalty_var(g: &mut Graph, theta: &ParamVars, theta_star: &ParamSet, omega: &ImportanceSet) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (name, star) in theta_star.iter() {
        let v = theta.get(name)?;
        let w = omega
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
        w.expect_shape("mas_penalty", star.shape())?;
        let s = g.constant(star.clone());
        let d = g.sub(v, s)?;
        let sq = g.square(d);
        let wc = g.constant(w.clone());
        let weighted = g.mul(wc, sq)?;
        let part = g.sum(weighted);
        total = Some(match total {
            Some(t) => g.add(t, part)?,
            None => part,
        });
    }
    total.ok_or_else(|| Error::Config("empty parameter set".into()))
}

/// Graph nodes of the combined adaptation loss and its terms.
#[derive(Debug, Clone, Copy)]
pub struct AdaptLossVars {
    pub total: Var,
    pub corrections: Option<Var>,
    pub anchor: Option<Var>,
    pub penalty: Option<Var>,
}

/// `λ·GCE(c) + (1−λ)·GCE(p0) + γ·penalty`. Terms with zero weight are not
/// recorded; the correction term is also dropped under the ablation flag.
#[allow(clippy::too_many_arguments)]
pub fn adapt_loss_var(
    g: &mut Graph,
    probs: Var,
    p0: &Prediction,
    corrections: &Tensor,
    theta: &ParamVars,
    theta_star: &ParamSet,
    omega: &ImportanceSet,
    cfg: &AdaptLossConfig,
) -> Result<AdaptLossVars> {
    cfg.validate()?;
    let mut terms = Vec::new();
    let corr = if cfg.lambda > 0.0 && !cfg.without_corrections {
        let v = gce_loss_var(g, probs, corrections)?;
        terms.push(g.scale(v, cfg.lambda)?);
        Some(v)
    } else {
        None
    };
    let anchor = if cfg.lambda < 1.0 {
        let v = gce_on_prediction_var(g, probs, p0)?;
        terms.push(g.scale(v, 1.0 - cfg.lambda)?);
        Some(v)
    } else {
        None
    };
    let penalty = if cfg.gamma > 0.0 {
        let v = mas_penalty_var(g, theta, theta_star, omega)?;
        terms.push(g.scale(v, cfg.gamma)?);
        Some(v)
    } else {
        None
    };
    let mut total = match terms.first() {
        Some(&t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    for &t in &terms[1.min(terms.len())..] {
        total = g.add(total, t)?;
    }
    Ok(AdaptLossVars {
        total,
        corrections: corr,
        anchor,
        penalty,
    })
}

fn eval_scalar(build: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let v = build(&mut g)?;
    Ok(g.value(v).item()?)
}

pub fn ce_loss(probs: &Tensor, y: &Tensor) -> Result<f64> {
    eval_scalar(|g| {
        let p = g.constant(probs.clone());
        ce_loss_var(g, p, y)
    })
}

pub fn gce_loss(probs: &Tensor, c: &Tensor) -> Result<f64> {
    eval_scalar(|g| {
        let p = g.constant(probs.clone());
        gce_loss_var(g, p, c)
    })
}

pub fn gce_on_prediction(probs: &Tensor, p0: &Prediction) -> Result<f64> {
    eval_scalar(|g| {
        let p = g.constant(probs.clone());
        gce_on_prediction_var(g, p, p0)
    })
}

pub fn mas_penalty(theta: &ParamSet, theta_star: &ParamSet, omega: &ImportanceSet) -> Result<f64> {
    theta.check_layout(theta_star, "mas_penalty")?;
    theta.check_layout(omega.as_params(), "mas_penalty")?;
    eval_scalar(|g| {
        let vars = theta.register(g, false);
        mas_penalty_var(g, &vars, theta_star, omega)
    })
}

/// Combined adaptation loss of `net` on input `x`.
pub fn adapt_loss(
    net: &SegNet,
    x: &Tensor,
    p0: &Prediction,
    corrections: &Tensor,
    theta_star: &ParamSet,
    omega: &ImportanceSet,
    cfg: &AdaptLossConfig,
) -> Result<f64> {
    eval_scalar(|g| {
        let vars = net.params.register(g, false);
        let xv = g.constant(x.clone());
        let probs = net.forward(g, &vars, xv)?;
        Ok(adapt_loss_var(g, probs, p0, corrections, &vars, theta_star, omega, cfg)?.total)
    })
}

/// Importance from the sensitivity of the squared L2 norm of the output map.
///
/// For every sample the gradient of `‖f(x; θ)‖²` is taken, its absolute value
/// averaged over samples, and the result scaled so the mean entry is one.
/// `forward` must record the model on the graph and return its output node.
pub fn mas_importance_with<F>(params: &ParamSet, samples: &[Tensor], forward: F) -> Result<ImportanceSet>
where
    F: Fn(&mut Graph, &ParamVars, Var) -> Result<Var>,
{
    if samples.is_empty() {
        return Err(Error::Config("importance estimation needs at least one sample".into()));
    }
    let mut acc: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    for x in samples {
        let mut g = Graph::new();
        let vars = params.register(&mut g, true);
        let xv = g.constant(x.clone());
        let out = forward(&mut g, &vars, xv)?;
        let sq = g.square(out);
        let norm = g.sum(sq);
        let grads = g.backward(norm)?;
        for ((name, _), slot) in params.iter().zip(acc.iter_mut()) {
            let gr = grads.get(name).expect("every parameter has a gradient");
            slot.iter_mut().zip(gr.data()).for_each(|(a, d)| *a += d.abs());
        }
    }
    let n = samples.len() as f64;
    let total: f64 = acc.iter().flatten().map(|v| v / n).sum();
    let mean = total / params.num_scalars() as f64;
    if mean <= 0.0 {
        return Err(Error::Config("model output does not depend on any parameter".into()));
    }
    let omega = params
        .iter()
        .zip(acc)
        .map(|((name, t), a)| {
            let data = a.into_iter().map(|v| v / n / mean).collect();
            Ok((name.clone(), Tensor::new(t.shape().to_vec(), data)?))
        })
        .collect::<Result<ParamSet>>()?;
    Ok(ImportanceSet(omega))
}

pub fn mas_importance(net: &SegNet, samples: &[Tensor]) -> Result<ImportanceSet> {
    mas_importance_with(&net.params, samples, |g, vars, x| net.forward(g, vars, x))
}
