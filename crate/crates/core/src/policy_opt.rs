//! Group-relative advantages, wd1 weights and loss, and the diffu-GRPO
//! baseline objective.

use serde::{Deserialize, Serialize};

use crate::diffcore::{AdamConfig, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::sampler::SampleConfig;

/// `R_i - mean(R)`; no std division.
pub fn group_advantage(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Config(format!(
            "group size {} < 2; advantages need at least two completions",
            rewards.len()
        )));
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(rewards.iter().map(|r| r - mean).collect())
}

fn softmax_scaled(x: &[f64], s: f64) -> Vec<f64> {
    let m = x.iter().map(|v| s * v).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (s * v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `(softmax(ψA), softmax(-ψA))`.
pub fn wd1_weights(advantages: &[f64], psi: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if advantages.is_empty() {
        return Err(Error::Input("empty advantage vector".into()));
    }
    if !(psi > 0.0 && psi.is_finite()) {
        return Err(Error::Input(format!(
            "psi must be positive and finite, got {psi}"
        )));
    }
    if let Some(a) = advantages.iter().find(|a| !a.is_finite()) {
        return Err(Error::Input(format!("non-finite advantage {a}")));
    }
    Ok((
        softmax_scaled(advantages, psi),
        softmax_scaled(advantages, -psi),
    ))
}

/// Per-completion loss coefficients `-w+ + w-`, or `-w+` alone for the
/// positive-only variant.
pub fn wd1_coefficients(w_pos: &[f64], w_neg: &[f64], positive_only: bool) -> Result<Vec<f64>> {
    if w_pos.len() != w_neg.len() {
        return Err(Error::Input("weight vectors differ in length".into()));
    }
    Ok(w_pos
        .iter()
        .zip(w_neg)
        .map(|(p, n)| if positive_only { -p } else { -p + n })
        .collect())
}

/// Sequence log-likelihood node from a per-token vector node.
pub fn seq_loglik_node<T: Real>(
    tape: &mut Tape<'_, T>,
    token_logliks: Var,
    length_normalize: bool,
) -> Result<Var> {
    let n = tape.value(token_logliks).len();
    if n == 0 {
        return Err(Error::Input("empty completion".into()));
    }
    let w = if length_normalize {
        1.0 / n as f64
    } else {
        1.0
    };
    tape.dot(token_logliks, &vec![T::of(w); n])
}

/// `Σ_i c_i log π(o_i|q)` for one group.
pub fn wd1_group_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    seq_logliks: &[Var],
    coefficients: &[f64],
) -> Result<Var> {
    if seq_logliks.len() != coefficients.len() || seq_logliks.is_empty() {
        return Err(Error::Input(format!(
            "{} log-likelihoods for {} coefficients",
            seq_logliks.len(),
            coefficients.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (&l, &c) in seq_logliks.iter().zip(coefficients) {
        let term = tape.scale(l, T::of(c))?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// Mean over prompts of scalar per-group losses.
pub fn mean_over_prompts<T: Real>(tape: &mut Tape<'_, T>, group_losses: &[Var]) -> Result<Var> {
    if group_losses.is_empty() {
        return Err(Error::Input("no groups in batch".into()));
    }
    let mut acc = group_losses[0];
    for &g in &group_losses[1..] {
        acc = tape.add(acc, g)?;
    }
    tape.scale(acc, T::of(1.0 / group_losses.len() as f64))
}

/// Plain-number wd1 loss for one group.
pub fn wd1_loss_value(coefficients: &[f64], seq_logliks: &[f64]) -> f64 {
    coefficients
        .iter()
        .zip(seq_logliks)
        .map(|(c, l)| c * l)
        .sum()
}

/// Self-normalized importance-sampling NLL: `-Σ softmax(ψA)_i log π(o_i|q)`.
pub fn nll_is_estimate(advantages: &[f64], psi: f64, seq_logliks: &[f64]) -> Result<f64> {
    if advantages.len() < 2 || advantages.len() != seq_logliks.len() {
        return Err(Error::Input(format!(
            "need G >= 2 matching log-likelihoods, got {} advantages and {} values",
            advantages.len(),
            seq_logliks.len()
        )));
    }
    let (w, _) = wd1_weights(advantages, psi)?;
    Ok(-w.iter().zip(seq_logliks).map(|(w, l)| w * l).sum::<f64>())
}

/// One completion's contribution to the diffu-GRPO objective:
/// `(1/|o|) Σ_k [min(r A, clip(r, 1-ε, 1+ε) A) - β_kl KL_k]`, where
/// `r = exp(new - old)` and `KL_k = exp(ref - new) - (ref - new) - 1`.
pub fn diffu_grpo_seq_term<T: Real>(
    tape: &mut Tape<'_, T>,
    new: Var,
    old: &[f64],
    reference: Option<&[f64]>,
    advantage: f64,
    epsilon: f64,
    beta_kl: f64,
) -> Result<Var> {
    let n = tape.value(new).len();
    if n == 0 || old.len() != n {
        return Err(Error::Input(format!(
            "{} old log-likelihoods for {n} tokens",
            old.len()
        )));
    }
    let neg_old: Vec<T> = old.iter().map(|&v| T::of(-v)).collect();
    let delta = tape.add_const(new, &neg_old)?;
    let ratio = tape.exp(delta)?;
    let adv = vec![T::of(advantage); n];
    let unclipped = tape.mul_const(ratio, &adv)?;
    let clipped = tape.clamp(ratio, T::of(1.0 - epsilon), T::of(1.0 + epsilon))?;
    let clipped = tape.mul_const(clipped, &adv)?;
    let mut per_token = tape.minimum(unclipped, clipped)?;
    if beta_kl > 0.0 {
        let reference = reference
            .ok_or_else(|| Error::Config("beta > 0 requires reference log-likelihoods".into()))?;
        if reference.len() != n {
            return Err(Error::Input(format!(
                "{} reference log-likelihoods for {n} tokens",
                reference.len()
            )));
        }
        let neg_new = tape.scale(new, T::of(-1.0))?;
        let refc: Vec<T> = reference.iter().map(|&v| T::of(v)).collect();
        let d = tape.add_const(neg_new, &refc)?;
        let ed = tape.exp(d)?;
        let kl = tape.sub(ed, d)?;
        let kl = tape.add_const(kl, &vec![T::of(-1.0); n])?;
        let kl = tape.scale(kl, T::of(beta_kl))?;
        per_token = tape.sub(per_token, kl)?;
    }
    tape.dot(per_token, &vec![T::of(1.0 / n as f64); n])
}

/// Negated group mean of the per-completion objective terms.
pub fn diffu_grpo_group_loss<T: Real>(tape: &mut Tape<'_, T>, terms: &[Var]) -> Result<Var> {
    let mean = mean_over_prompts(tape, terms)?;
    tape.scale(mean, T::of(-1.0))
}

/// Plain-number diffu-GRPO objective (not negated) for one group; each
/// element of `new`/`old`/`reference` is one completion's token values.
pub fn diffu_grpo_objective_value(
    new: &[Vec<f64>],
    old: &[Vec<f64>],
    reference: Option<&[Vec<f64>]>,
    advantages: &[f64],
    epsilon: f64,
    beta_kl: f64,
) -> Result<f64> {
    let g = advantages.len();
    if new.len() != g || old.len() != g || reference.is_some_and(|r| r.len() != g) {
        return Err(Error::Input("group size mismatch".into()));
    }
    if beta_kl > 0.0 && reference.is_none() {
        return Err(Error::Config(
            "beta > 0 requires reference log-likelihoods".into(),
        ));
    }
    let mut total = 0.0;
    for i in 0..g {
        let n = new[i].len();
        let mut s = 0.0;
        for k in 0..n {
            let r = (new[i][k] - old[i][k]).exp();
            let a = advantages[i];
            let mut v = (r * a).min(r.clamp(1.0 - epsilon, 1.0 + epsilon) * a);
            if beta_kl > 0.0 {
                let d = reference.unwrap()[i][k] - new[i][k];
                v -= beta_kl * (d.exp() - d - 1.0);
            }
            s += v;
        }
        total += s / n as f64;
    }
    Ok(total / g as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Wd1,
    #[serde(rename = "wd1-p")]
    Wd1P,
    DiffuGrpo,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wd1" => Ok(Method::Wd1),
            "wd1-p" => Ok(Method::Wd1P),
            "diffu-grpo" => Ok(Method::DiffuGrpo),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected wd1, wd1-p or diffu-grpo)"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Wd1 => "wd1",
            Method::Wd1P => "wd1-p",
            Method::DiffuGrpo => "diffu-grpo",
        })
    }
}

/// RL hyperparameters. `beta` is the reverse-KL weight: it enters ψ and the
/// sampling mixture for wd1, and is the token KL coefficient for diffu-GRPO.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub num_generations: usize,
    pub lambda: f64,
    pub beta: f64,
    pub num_iterations: usize,
    pub epsilon: f64,
    pub p_mask_prompt: f64,
    pub length_normalize: bool,
    pub advantage_shift: bool,
    pub prompts_per_step: usize,
    pub optimizer: AdamConfig,
    pub sampling: SampleConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Wd1,
            num_generations: 6,
            lambda: 1.0,
            beta: 0.0,
            num_iterations: 8,
            epsilon: 0.5,
            p_mask_prompt: 0.15,
            length_normalize: false,
            advantage_shift: false,
            prompts_per_step: 2,
            optimizer: AdamConfig::default(),
            sampling: SampleConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn psi(&self) -> f64 {
        1.0 / (self.lambda + self.beta)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_generations < 2 {
            return bad(format!("num_generations = {} < 2", self.num_generations));
        }
        if !(self.lambda >= 0.0 && self.beta >= 0.0 && self.lambda + self.beta > 0.0) {
            return bad(format!(
                "need lambda, beta >= 0 with lambda + beta > 0 (got {}, {})",
                self.lambda, self.beta
            ));
        }
        if self.num_iterations == 0 {
            return bad("num_iterations must be >= 1".into());
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon = {} must be positive", self.epsilon));
        }
        if !(0.0..1.0).contains(&self.p_mask_prompt) {
            return bad(format!(
                "p_mask_prompt = {} outside [0, 1)",
                self.p_mask_prompt
            ));
        }
        if self.prompts_per_step == 0 {
            return bad("prompts_per_step must be >= 1".into());
        }
        self.sampling.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{ParamStore, Tensor};

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn advantages() {
        assert_eq!(group_advantage(&[2.0, 2.0, 2.0]).unwrap(), vec![0.0; 3]);
        assert!(close(
            &group_advantage(&[1.0, 0.1, 0.1]).unwrap(),
            &[0.6, -0.3, -0.3],
            1e-15
        ));
        assert!(matches!(group_advantage(&[1.0]), Err(Error::Config(_))));
    }

    #[test]
    fn weights_examples() {
        let (p, n) = wd1_weights(&[0.0, 0.0], 3.0).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        assert_eq!(n, vec![0.5, 0.5]);
        let (p, n) = wd1_weights(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!(close(&p, &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
        assert!(close(&n, &[1.0 / 3.0, 2.0 / 3.0], 1e-15));
        let (p, _) = wd1_weights(&[1.0, 0.0, -1.0], 1.0).unwrap();
        let z = 1f64.exp() + 1.0 + (-1f64).exp();
        assert!(close(
            &p,
            &[1f64.exp() / z, 1.0 / z, (-1f64).exp() / z],
            1e-15
        ));
        assert!(close(&p, &[0.66524, 0.24473, 0.09003], 1e-5));
        assert!(wd1_weights(&[f64::NAN, 0.0], 1.0).is_err());
        assert!(wd1_weights(&[1e6, -1e6], 10.0)
            .unwrap()
            .0
            .iter()
            .all(|w| w.is_finite()));
    }

    #[test]
    fn loss_coefficients() {
        // psi * A = ±ln 2  =>  w+ = [4/5, 1/5]
        let (lambda, beta) = (1.0, 0.5);
        let a = 2f64.ln() * (lambda + beta);
        let (p, n) = wd1_weights(&[a, -a], 1.0 / (lambda + beta)).unwrap();
        let c = wd1_coefficients(&p, &n, false).unwrap();
        assert!(close(&c, &[-0.6, 0.6], 1e-15));
        // ±ln2/2 gives the [-1/3, 1/3] pair
        let (p, n) = wd1_weights(&[a / 2.0, -a / 2.0], 1.0 / (lambda + beta)).unwrap();
        assert!(close(
            &wd1_coefficients(&p, &n, false).unwrap(),
            &[-1.0 / 3.0, 1.0 / 3.0],
            1e-15
        ));
        assert_eq!(wd1_coefficients(&p, &n, true).unwrap(), vec![-p[0], -p[1]]);
    }

    #[test]
    fn nll_matches_positive_only_loss() {
        let adv = [0.3, -0.1, -0.2];
        let ll = [-3.0, -4.0, -2.5];
        let (p, n) = wd1_weights(&adv, 2.0).unwrap();
        let c = wd1_coefficients(&p, &n, true).unwrap();
        assert!((nll_is_estimate(&adv, 2.0, &ll).unwrap() - wd1_loss_value(&c, &ll)).abs() < 1e-15);
        let uniform = nll_is_estimate(&[0.0; 3], 2.0, &ll).unwrap();
        assert!((uniform - 9.5 / 3.0).abs() < 1e-15);
    }

    fn scalar_params(vals: &[f64]) -> ParamStore<f64> {
        let mut ps = ParamStore::new();
        ps.push("x", Tensor::vector(vals.to_vec()));
        ps
    }

    #[test]
    fn zero_advantage_gives_zero_gradient() {
        let ps = scalar_params(&[-1.0, -2.0, -0.5]);
        let mut tape = Tape::new(&ps);
        let x = tape.param(0);
        let seqs: Vec<Var> = (0..2)
            .map(|_| seq_loglik_node(&mut tape, x, false).unwrap())
            .collect();
        let (p, n) = wd1_weights(&[0.0, 0.0], 1.0).unwrap();
        let c = wd1_coefficients(&p, &n, false).unwrap();
        let loss = wd1_group_loss(&mut tape, &seqs, &c).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        let g = tape.backward(loss).unwrap();
        assert!(g.grad(0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grpo_examples() {
        let new = vec![vec![-1.0], vec![-2.0]];
        let obj = diffu_grpo_objective_value(&new, &new, None, &[1.0, -1.0], 0.2, 0.0).unwrap();
        assert_eq!(obj, 0.0);
        // ratio 1 => mean token advantage
        let new = vec![vec![-1.0, -1.5], vec![-2.0]];
        let obj = diffu_grpo_objective_value(&new, &new, None, &[0.5, 0.1], 0.2, 0.0).unwrap();
        assert!((obj - 0.3).abs() < 1e-15);
        // r = 1 + 2ε with A > 0 is clipped to (1 + ε) A
        let eps = 0.2;
        let obj = diffu_grpo_objective_value(
            &[vec![(1.0 + 2.0 * eps as f64).ln()]],
            &[vec![0.0]],
            None,
            &[2.0],
            eps,
            0.0,
        )
        .unwrap();
        assert!((obj - 1.2 * 2.0).abs() < 1e-12);
        assert!(matches!(
            diffu_grpo_objective_value(&[vec![0.0]], &[vec![0.0]], None, &[1.0], eps, 0.04),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn grpo_graph_matches_plain_value() {
        let new = [-0.7, -1.2, -0.1];
        let old = [-0.9, -1.0, -0.1];
        let refr = [-1.1, -0.8, -0.3];
        let ps = scalar_params(&new);
        let mut tape = Tape::new(&ps);
        let x = tape.param(0);
        let t = diffu_grpo_seq_term(&mut tape, x, &old, Some(&refr), 0.8, 0.2, 0.04).unwrap();
        let loss = diffu_grpo_group_loss(&mut tape, &[t]).unwrap();
        let want = diffu_grpo_objective_value(
            &[new.to_vec()],
            &[old.to_vec()],
            Some(&[refr.to_vec()]),
            &[0.8],
            0.2,
            0.04,
        )
        .unwrap();
        assert!((tape.value(loss).item() + want).abs() < 1e-14);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert_eq!(TrainConfig::default().psi(), 1.0);
        let bad = TrainConfig {
            lambda: 0.0,
            beta: 0.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            num_generations: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!("wd1-p".parse::<Method>().unwrap(), Method::Wd1P);
        assert!("ppo".parse::<Method>().is_err());
    }
}
