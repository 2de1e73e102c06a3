//! Training objectives. Every function returns the loss together with its gradient with
//! respect to the function's direct inputs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Frame, LabelMap, Normalization};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before every logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Tolerance on `logsumexp = 0` for per-pixel log-probabilities.
pub const LOGPROB_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    /// Named terms of a composite loss, before their weights.
    pub components: BTreeMap<String, f64>,
    /// Set when every pixel was ignored or mined away; `value` is then 0.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub all_excluded: bool,
}

impl LossValue {
    pub fn scalar(value: f64) -> Self {
        LossValue {
            value,
            ..Default::default()
        }
    }

    fn composite(terms: &[(&str, f64, f64)]) -> Self {
        LossValue {
            value: terms.iter().map(|(_, v, w)| v * w).sum(),
            components: terms.iter().map(|(n, v, _)| (n.to_string(), *v)).collect(),
            all_excluded: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecNorm {
    /// Euclidean norm divided by sqrt(element count).
    #[default]
    Rms,
    /// Plain Euclidean norm.
    L2,
    /// Mean squared difference.
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_adv: f64,
    pub lambda_ip: f64,
    /// Per-class weights; `None` means all ones.
    pub class_weights: Option<Vec<f64>>,
    /// Mining threshold on the true-class probability.
    pub mining_tau: f64,
    pub mine_pp: bool,
    pub mine_ip: bool,
    pub rec_norm: RecNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_adv: 0.2,
            lambda_ip: 0.3,
            class_weights: None,
            mining_tau: 0.9,
            mine_pp: false,
            mine_ip: false,
            rec_norm: RecNorm::Rms,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_adv >= 0.0) || !(self.lambda_ip >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.mining_tau > 0.0 && self.mining_tau <= 1.0) {
            return Err(Error::Config(format!("mining threshold {} outside (0, 1]", self.mining_tau)));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::Config("class weights must be positive".into()));
            }
        }
        Ok(())
    }

    /// Class weights resolved against a class count.
    pub fn weights_for(&self, num_classes: usize) -> Result<Vec<f64>> {
        match &self.class_weights {
            Some(w) if w.len() == num_classes => Ok(w.clone()),
            Some(w) => Err(Error::Config(format!(
                "{} class weights for {num_classes} classes",
                w.len()
            ))),
            None => Ok(vec![1.0; num_classes]),
        }
    }

    pub fn pp_mining(&self) -> Option<f64> {
        self.mine_pp.then_some(self.mining_tau)
    }

    pub fn ip_mining(&self) -> Option<f64> {
        self.mine_ip.then_some(self.mining_tau)
    }
}

fn check_probs(name: &str, p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidArgument(format!("{name}: empty batch")));
    }
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("{name}: probability {bad} outside [0, 1]")));
    }
    Ok(())
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `-ln(1 - d_fake) - ln(d_real)`, batch averaged. Gradients are taken at the clamped
/// probabilities.
pub fn discriminator_loss(d_fake: &[f64], d_real: &[f64]) -> Result<(LossValue, Vec<f64>, Vec<f64>)> {
    check_probs("d_fake", d_fake)?;
    check_probs("d_real", d_real)?;
    if d_fake.len() != d_real.len() {
        return Err(Error::Shape("real and fake batches differ in size".into()));
    }
    let n = d_fake.len() as f64;
    let mut value = 0.0;
    let mut g_fake = Vec::with_capacity(d_fake.len());
    let mut g_real = Vec::with_capacity(d_real.len());
    for (&f, &r) in d_fake.iter().zip(d_real) {
        let (f, r) = (clamp_prob(f), clamp_prob(r));
        value += -(1.0 - f).ln() - r.ln();
        g_fake.push(1.0 / ((1.0 - f) * n));
        g_real.push(-1.0 / (r * n));
    }
    Ok((LossValue::scalar(value / n), g_fake, g_real))
}

/// `-ln(d_fake)`, batch averaged.
pub fn adversarial_loss(d_fake: &[f64]) -> Result<(LossValue, Vec<f64>)> {
    check_probs("d_fake", d_fake)?;
    let n = d_fake.len() as f64;
    let mut value = 0.0;
    let grad = d_fake
        .iter()
        .map(|&f| {
            let f = clamp_prob(f);
            value -= f.ln();
            -1.0 / (f * n)
        })
        .collect();
    Ok((LossValue::scalar(value / n), grad))
}

/// Per-sample difference norm averaged over the batch (`[N, ...]` tensors).
pub fn reconstruction_loss(pred: &Tensor, target: &Tensor, norm: RecNorm) -> Result<(LossValue, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.n();
    let m = pred.len() / n;
    let mut grad = Tensor::zeros(pred.shape());
    let mut value = 0.0;
    for b in 0..n {
        let (p, t) = (pred.sample(b), target.sample(b));
        let sq: f64 = p.iter().zip(t).map(|(a, c)| (a - c) * (a - c)).sum();
        let (v, scale) = match norm {
            RecNorm::Rms => {
                let v = (sq / m as f64).sqrt();
                (v, if v > 0.0 { 1.0 / (m as f64 * v) } else { 0.0 })
            }
            RecNorm::L2 => {
                let v = sq.sqrt();
                (v, if v > 0.0 { 1.0 / v } else { 0.0 })
            }
            RecNorm::Mse => (sq / m as f64, 2.0 / m as f64),
        };
        value += v;
        for ((g, a), c) in grad.sample_mut(b).iter_mut().zip(p).zip(t) {
            *g = scale * (a - c) / n as f64;
        }
    }
    Ok((LossValue::scalar(value / n as f64), grad))
}

/// [`reconstruction_loss`] on two frames in the prediction domain.
pub fn reconstruction_loss_frames(pred: &Frame, target: &Frame, norm: RecNorm) -> Result<LossValue> {
    pred.expect_norm(Normalization::Prediction)?;
    target.expect_norm(Normalization::Prediction)?;
    if !pred.same_size(target) {
        return Err(Error::Shape("reconstruction of differently sized frames".into()));
    }
    let shape = [1, 1, 1, pred.pixels().len()];
    let p = Tensor::from_vec(shape, pred.pixels().to_vec())?;
    let t = Tensor::from_vec(shape, target.pixels().to_vec())?;
    Ok(reconstruction_loss(&p, &t, norm)?.0)
}

/// `rec + lambda_adv * adv`.
pub fn generator_loss(rec: &LossValue, adv: &LossValue, lambda_adv: f64) -> Result<LossValue> {
    if !(lambda_adv >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda_adv {lambda_adv} is negative")));
    }
    Ok(LossValue::composite(&[("rec", rec.value, 1.0), ("adv", adv.value, lambda_adv)]))
}

/// Weighted pixel cross-entropy over a `[N, C, H, W]` batch of log-probabilities.
///
/// The value is `-sum(w_y * logprob_y) / count` over contributing pixels: not ignored
/// and, with mining `Some(tau)`, true-class probability below `tau`.
pub fn weighted_ce_loss(
    logprobs: &Tensor,
    labels: &[&LabelMap],
    weights: &[f64],
    mining: Option<f64>,
) -> Result<(LossValue, Tensor)> {
    let [n, c, h, w] = logprobs.shape();
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} predictions but {} label maps", labels.len())));
    }
    if weights.len() != c {
        return Err(Error::Shape(format!("{} class weights for {c} classes", weights.len())));
    }
    if let Some(tau) = mining {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::InvalidArgument(format!("mining threshold {tau} outside (0, 1]")));
        }
    }
    let hw = h * w;
    let mut contributing: Vec<(usize, usize)> = Vec::new();
    let mut sum = 0.0;
    for (b, label) in labels.iter().enumerate() {
        if label.height() != h || label.width() != w || label.num_classes() != c {
            return Err(Error::Shape(format!(
                "label {}x{} with {} classes vs prediction {h}x{w}x{c}",
                label.height(),
                label.width(),
                label.num_classes()
            )));
        }
        let x = logprobs.sample(b);
        for q in 0..hw {
            let max = (0..c).map(|k| x[k * hw + q]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..c).map(|k| (x[k * hw + q] - max).exp()).sum::<f64>().ln();
            if !(lse.abs() <= LOGPROB_TOLERANCE) {
                return Err(Error::InvalidArgument(format!(
                    "log-probabilities at sample {b} pixel {q} are not normalized (logsumexp {lse})"
                )));
            }
            let y = label.labels()[q];
            if label.is_ignored(y) {
                continue;
            }
            let lp = x[y as usize * hw + q];
            if let Some(tau) = mining {
                if lp.exp() >= tau {
                    continue;
                }
            }
            sum += weights[y as usize] * lp.max(PROB_EPS.ln());
            contributing.push((b, y as usize * hw + q));
        }
    }
    let mut grad = Tensor::zeros(logprobs.shape());
    if contributing.is_empty() {
        return Ok((
            LossValue {
                value: 0.0,
                all_excluded: true,
                ..Default::default()
            },
            grad,
        ));
    }
    let count = contributing.len() as f64;
    for (b, i) in contributing {
        let k = i / hw;
        if logprobs.sample(b)[i] > PROB_EPS.ln() {
            grad.sample_mut(b)[i] = -weights[k] / count;
        }
    }
    Ok((LossValue::scalar(-sum / count), grad))
}

/// `ce(pp) + lambda_ip * ce(fused)` with per-branch mining.
#[allow(clippy::too_many_arguments)]
pub fn pspnet_loss(
    pp_logprobs: &Tensor,
    fused_logprobs: &Tensor,
    labels: &[&LabelMap],
    weights: &[f64],
    lambda_ip: f64,
    pp_mining: Option<f64>,
    ip_mining: Option<f64>,
) -> Result<(LossValue, Tensor, Tensor)> {
    if !(lambda_ip >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda_ip {lambda_ip} is negative")));
    }
    let (pp, g_pp) = weighted_ce_loss(pp_logprobs, labels, weights, pp_mining)?;
    let (ip, mut g_ip) = weighted_ce_loss(fused_logprobs, labels, weights, ip_mining)?;
    g_ip.scale(lambda_ip);
    let mut v = LossValue::composite(&[("pp", pp.value, 1.0), ("ip", ip.value, lambda_ip)]);
    v.all_excluded = pp.all_excluded && ip.all_excluded;
    Ok((v, g_pp, g_ip))
}
