use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{closed_form_target, geometric_mixture, TabularPolicy};
use crate::error::{Error, Result};

/// Finite discounted MDP. `transition` and `reward` are indexed
/// `[(s * A + a) * S + s']`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub states: usize,
    pub actions: usize,
    pub transition: Vec<f64>,
    pub reward: Vec<f64>,
    pub gamma: f64,
    pub start: Vec<f64>,
}

impl TabularMdp {
    pub fn new(
        states: usize,
        actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
        start: Vec<f64>,
    ) -> Result<Self> {
        let n = states * actions * states;
        if states == 0 || actions == 0 || states * actions > 64 {
            return Err(Error::Domain(format!(
                "{states} states x {actions} actions outside enumeration bound"
            )));
        }
        if transition.len() != n || reward.len() != n || start.len() != states {
            return Err(Error::Domain(
                "MDP table sizes do not match states/actions".into(),
            ));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Domain(format!("gamma = {gamma} outside [0, 1)")));
        }
        for row in transition.chunks(states) {
            if row.iter().any(|&p| p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::Domain("transition row is not a distribution".into()));
            }
        }
        if (start.iter().sum::<f64>() - 1.0).abs() > 1e-12 || start.iter().any(|&p| p < 0.0) {
            return Err(Error::Domain(
                "start distribution is not a distribution".into(),
            ));
        }
        Ok(TabularMdp {
            states,
            actions,
            transition,
            reward,
            gamma,
            start,
        })
    }

    /// Uniform-random kernel rows and start, rewards in [-1, 1].
    pub fn random<R: Rng + ?Sized>(
        states: usize,
        actions: usize,
        gamma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let dist = |rng: &mut R, n: usize| {
            let raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 1e-3).collect();
            let z: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / z).collect::<Vec<f64>>()
        };
        let mut transition = Vec::with_capacity(states * actions * states);
        for _ in 0..states * actions {
            transition.extend(dist(rng, states));
        }
        let reward = (0..states * actions * states)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let start = dist(rng, states);
        TabularMdp::new(states, actions, transition, reward, gamma, start)
    }

    fn idx(&self, s: usize, a: usize, s2: usize) -> usize {
        (s * self.actions + a) * self.states + s2
    }
}

/// Exact policy evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub value: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub advantage: Vec<Vec<f64>>,
    /// Expected discounted return from the start distribution.
    pub eta: f64,
    /// Unnormalized discounted state visitation `Σ_t γ^t P(s_t = s)`.
    pub visitation: Vec<f64>,
}

pub fn evaluate_policy(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<Evaluation> {
    let (ns, na) = (mdp.states, mdp.actions);
    if pi.prompts() != ns || pi.outcomes() != na {
        return Err(Error::Domain("policy shape does not match the MDP".into()));
    }
    let mut system = DMatrix::<f64>::identity(ns, ns);
    let mut r_pi = DVector::<f64>::zeros(ns);
    for s in 0..ns {
        for a in 0..na {
            let w = pi.row(s)[a];
            for s2 in 0..ns {
                let p = mdp.transition[mdp.idx(s, a, s2)];
                system[(s, s2)] -= mdp.gamma * w * p;
                r_pi[s] += w * p * mdp.reward[mdp.idx(s, a, s2)];
            }
        }
    }
    let lu = system.clone().lu();
    let value = lu
        .solve(&r_pi)
        .ok_or_else(|| Error::numeric("policy evaluation", "singular system"))?;
    let visitation = system
        .transpose()
        .lu()
        .solve(&DVector::from_column_slice(&mdp.start))
        .ok_or_else(|| Error::numeric("visitation", "singular system"))?;
    let mut q = vec![vec![0.0; na]; ns];
    let mut advantage = vec![vec![0.0; na]; ns];
    for s in 0..ns {
        for a in 0..na {
            q[s][a] = (0..ns)
                .map(|s2| {
                    let i = mdp.idx(s, a, s2);
                    mdp.transition[i] * (mdp.reward[i] + mdp.gamma * value[s2])
                })
                .sum();
            advantage[s][a] = q[s][a] - value[s];
        }
    }
    let eta = mdp.start.iter().zip(value.iter()).map(|(m, v)| m * v).sum();
    Ok(Evaluation {
        value: value.iter().copied().collect(),
        q,
        advantage,
        eta,
        visitation: visitation.iter().copied().collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thm1Check {
    pub eta_old: f64,
    pub eta_new: f64,
    pub l_value: f64,
    pub c: f64,
    pub d_tv_max: f64,
    /// `η(π_new) - (L(π_new) - C D_TV^max²)`.
    pub slack: f64,
    pub holds: bool,
}

/// Checks `η(π_new) ≥ L_old(π_new) - C·D_TV^max(π_old, π_new)²` with
/// `C = 4 max|A^old| γ / (1-γ)²`.
pub fn thm1_bound_check(
    mdp: &TabularMdp,
    pi_old: &TabularPolicy,
    pi_new: &TabularPolicy,
) -> Result<Thm1Check> {
    let old = evaluate_policy(mdp, pi_old)?;
    let new = evaluate_policy(mdp, pi_new)?;
    let gain: f64 = (0..mdp.states)
        .map(|s| {
            old.visitation[s]
                * (0..mdp.actions)
                    .map(|a| pi_new.row(s)[a] * old.advantage[s][a])
                    .sum::<f64>()
        })
        .sum();
    let l_value = old.eta + gain;
    let max_adv = old
        .advantage
        .iter()
        .flatten()
        .fold(0.0f64, |m, a| m.max(a.abs()));
    let c = 4.0 * max_adv * mdp.gamma / (1.0 - mdp.gamma).powi(2);
    let d_tv_max = pi_old.tv_rows(pi_new)?.into_iter().fold(0.0, f64::max);
    let slack = new.eta - (l_value - c * d_tv_max * d_tv_max);
    Ok(Thm1Check {
        eta_old: old.eta,
        eta_new: new.eta,
        l_value,
        c,
        d_tv_max,
        slack,
        holds: slack >= -1e-9,
    })
}

/// Horizon-1 problem: prompts drawn uniformly, reward `r(q, o)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bandit {
    pub rewards: Vec<Vec<f64>>,
}

impl Bandit {
    pub fn random<R: Rng + ?Sized>(prompts: usize, outcomes: usize, rng: &mut R) -> Self {
        Bandit {
            rewards: (0..prompts)
                .map(|_| (0..outcomes).map(|_| rng.gen::<f64>()).collect())
                .collect(),
        }
    }

    pub fn eta(&self, pi: &TabularPolicy) -> f64 {
        self.rewards
            .iter()
            .zip(pi.rows())
            .map(|(r, p)| r.iter().zip(p).map(|(r, p)| r * p).sum::<f64>())
            .sum::<f64>()
            / self.rewards.len() as f64
    }

    pub fn advantages(&self, pi: &TabularPolicy) -> Vec<Vec<f64>> {
        self.rewards
            .iter()
            .zip(pi.rows())
            .map(|(r, p)| {
                let v: f64 = r.iter().zip(p).map(|(r, p)| r * p).sum();
                r.iter().map(|r| r - v).collect()
            })
            .collect()
    }

    fn check(&self, pi: &TabularPolicy) -> Result<()> {
        if pi.prompts() != self.rewards.len()
            || self.rewards.iter().any(|r| r.len() != pi.outcomes())
        {
            return Err(Error::Domain(
                "policy shape does not match the bandit".into(),
            ));
        }
        Ok(())
    }
}

/// `η(π) - β E_q KL(π ‖ π_ref)`.
pub fn regularized_return(
    bandit: &Bandit,
    pi: &TabularPolicy,
    pi_ref: &TabularPolicy,
    beta: f64,
) -> Result<f64> {
    bandit.check(pi)?;
    let kls = pi.kl_rows(pi_ref)?;
    Ok(bandit.eta(pi) - beta * kls.iter().sum::<f64>() / kls.len() as f64)
}

/// Iterates the exact maximizer of
/// `M(π) = L(π) - E_q[λ KL(π‖π_k) + β KL(π‖π_ref)]` from `pi_start` and
/// returns `η'` before the first and after every iteration.
pub fn thm3_monotone_iterate(
    bandit: &Bandit,
    pi_ref: &TabularPolicy,
    pi_start: &TabularPolicy,
    lambda: f64,
    beta: f64,
    iterations: usize,
) -> Result<Vec<f64>> {
    if !(lambda >= 0.0 && beta >= 0.0 && lambda + beta > 0.0) {
        return Err(Error::Config(
            "need lambda, beta >= 0 with lambda + beta > 0".into(),
        ));
    }
    let mut pi = pi_start.clone();
    let mut trace = vec![regularized_return(bandit, &pi, pi_ref, beta)?];
    for _ in 0..iterations {
        let proposal = geometric_mixture(&pi, pi_ref, lambda, beta)?;
        pi = closed_form_target(&proposal, &bandit.advantages(&pi), 1.0 / (lambda + beta))?;
        trace.push(regularized_return(bandit, &pi, pi_ref, beta)?);
    }
    Ok(trace)
}

/// Direct maximization of `M` by mirror ascent on the simplex; used to
/// cross-check the closed form.
pub fn maximize_m_mirror(
    bandit: &Bandit,
    pi_old: &TabularPolicy,
    pi_ref: &TabularPolicy,
    lambda: f64,
    beta: f64,
    steps: usize,
) -> Result<TabularPolicy> {
    bandit.check(pi_old)?;
    let adv = bandit.advantages(pi_old);
    let step = 0.5 / (lambda + beta);
    let mut logp: Vec<Vec<f64>> = vec![vec![0.0; pi_old.outcomes()]; pi_old.prompts()];
    for _ in 0..steps {
        for q in 0..logp.len() {
            for o in 0..logp[q].len() {
                let grad = adv[q][o]
                    - lambda * (logp[q][o] - pi_old.row(q)[o].ln())
                    - beta * (logp[q][o] - pi_ref.row(q)[o].ln());
                logp[q][o] += step * grad;
            }
            let m = logp[q].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lz = logp[q].iter().map(|l| (l - m).exp()).sum::<f64>().ln() + m;
            logp[q].iter_mut().for_each(|l| *l -= lz);
        }
    }
    TabularPolicy::from_logits(&logp)
}
