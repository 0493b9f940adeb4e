//! Exact tabular checks of the weighting theory: the closed-form tilted
//! target, the self-normalized NLL estimator, the policy-improvement bound,
//! and monotone reverse-KL-regularized iteration.

mod audit;
mod mdp;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy_opt::nll_is_estimate;

pub use audit::{run_check, AuditScale, Check, OracleReport};
pub use mdp::{
    evaluate_policy, maximize_m_mirror, regularized_return, thm1_bound_check,
    thm3_monotone_iterate, Bandit, Evaluation, TabularMdp, Thm1Check,
};

const ROW_TOL: f64 = 1e-12;

/// `π(o|q)` as an explicit table, one row per prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    rows: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || width == 0 {
            return Err(Error::Domain("policy table is empty".into()));
        }
        for (q, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(Error::Domain(format!(
                    "row {q} has {} outcomes, expected {width}",
                    row.len()
                )));
            }
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::Domain(format!(
                    "row {q} has a negative or non-finite entry"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_TOL {
                return Err(Error::Domain(format!("row {q} sums to {s}")));
            }
        }
        Ok(TabularPolicy { rows })
    }

    pub fn uniform(prompts: usize, outcomes: usize) -> Self {
        TabularPolicy {
            rows: vec![vec![1.0 / outcomes as f64; outcomes]; prompts],
        }
    }

    /// Row-wise softmax of `logits`.
    pub fn from_logits(logits: &[Vec<f64>]) -> Result<Self> {
        TabularPolicy::new(logits.iter().map(|l| softmax(l)).collect())
    }

    /// Random strictly positive table: row-wise softmax of `N(0, scale²)`
    /// logits.
    pub fn random<R: Rng + ?Sized>(
        prompts: usize,
        outcomes: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let normal = rand_distr::Normal::new(0.0, scale).expect("finite scale");
        let rows = (0..prompts)
            .map(|_| {
                softmax(
                    &(0..outcomes)
                        .map(|_| normal.sample(rng))
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        TabularPolicy { rows }
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, q: usize) -> &[f64] {
        &self.rows[q]
    }

    pub fn prompts(&self) -> usize {
        self.rows.len()
    }

    pub fn outcomes(&self) -> usize {
        self.rows[0].len()
    }

    fn same_shape(&self, other: &TabularPolicy) -> Result<()> {
        if self.prompts() != other.prompts() || self.outcomes() != other.outcomes() {
            return Err(Error::Domain("policy tables differ in shape".into()));
        }
        Ok(())
    }

    /// Per-prompt `KL(self ‖ other)`; infinite where `other` lacks support.
    pub fn kl_rows(&self, other: &TabularPolicy) -> Result<Vec<f64>> {
        self.same_shape(other)?;
        Ok(self
            .rows
            .iter()
            .zip(&other.rows)
            .map(|(a, b)| kl(a, b))
            .collect())
    }

    pub fn tv_rows(&self, other: &TabularPolicy) -> Result<Vec<f64>> {
        self.same_shape(other)?;
        Ok(self
            .rows
            .iter()
            .zip(&other.rows)
            .map(|(a, b)| 0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
            .collect())
    }

    pub fn max_row_error(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `KL(a ‖ b)` for one pair of distributions.
pub fn kl(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| {
            if q > 0.0 {
                p * (p / q).ln()
            } else {
                f64::INFINITY
            }
        })
        .sum()
}

/// `π_old^{λ/(λ+β)} π_ref^{β/(λ+β)}`, normalized per prompt.
pub fn geometric_mixture(
    old: &TabularPolicy,
    reference: &TabularPolicy,
    lambda: f64,
    beta: f64,
) -> Result<TabularPolicy> {
    old.same_shape(reference)?;
    let (a, b) = (lambda / (lambda + beta), beta / (lambda + beta));
    let rows = old
        .rows
        .iter()
        .zip(&reference.rows)
        .map(|(o, r)| {
            let un: Vec<f64> = o
                .iter()
                .zip(r)
                .map(|(&x, &y)| x.powf(a) * y.powf(b))
                .collect();
            normalize(un)
        })
        .collect::<Result<Vec<_>>>()?;
    TabularPolicy::new(rows)
}

fn normalize(un: Vec<f64>) -> Result<Vec<f64>> {
    let z: f64 = un.iter().sum();
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::numeric("normalize", format!("normalizer {z}")));
    }
    Ok(un.into_iter().map(|v| v / z).collect())
}

/// `π*(o|q) ∝ π_old^ref(o|q) exp(ψ A(q, o))`.
pub fn closed_form_target(
    pi_old_ref: &TabularPolicy,
    advantages: &[Vec<f64>],
    psi: f64,
) -> Result<TabularPolicy> {
    if advantages.len() != pi_old_ref.prompts()
        || advantages.iter().any(|a| a.len() != pi_old_ref.outcomes())
    {
        return Err(Error::Input(
            "advantage table shape does not match the policy".into(),
        ));
    }
    if advantages.iter().flatten().any(|a| !a.is_finite()) {
        return Err(Error::Input("non-finite advantage".into()));
    }
    let rows = pi_old_ref
        .rows
        .iter()
        .zip(advantages)
        .map(|(p, a)| {
            let m = a.iter().map(|v| psi * v).fold(f64::NEG_INFINITY, f64::max);
            normalize(
                p.iter()
                    .zip(a)
                    .map(|(&p, &v)| p * (psi * v - m).exp())
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TabularPolicy { rows })
}

/// `-(1/|Q|) Σ_q Σ_o π*(o|q) log π_θ(o|q)`.
pub fn exact_nll(pi_star: &TabularPolicy, pi_theta: &TabularPolicy) -> Result<f64> {
    pi_star.same_shape(pi_theta)?;
    let mut total = 0.0;
    for (s, t) in pi_star.rows.iter().zip(&pi_theta.rows) {
        for (&ps, &pt) in s.iter().zip(t) {
            if ps > 0.0 {
                if pt <= 0.0 {
                    return Err(Error::Domain(
                        "pi_theta has no mass where pi_star does".into(),
                    ));
                }
                total -= ps * pt.ln();
            }
        }
    }
    Ok(total / pi_star.prompts() as f64)
}

/// One point of the estimator error curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thm2Point {
    pub group_size: usize,
    pub mean_abs_error: f64,
    /// Standard error of `mean_abs_error` over trials.
    pub std_error: f64,
    pub relative_error: f64,
}

/// Error of the self-normalized NLL estimate (groups drawn from
/// `pi_old_ref`, weighted by `exp(ψ A)`) against the exact NLL of
/// `pi_theta` under the tilted target, for one prompt.
pub fn thm2_convergence<R: Rng + ?Sized>(
    pi_old_ref: &[f64],
    advantages: &[f64],
    pi_theta: &[f64],
    psi: f64,
    group_sizes: &[usize],
    trials: usize,
    rng: &mut R,
) -> Result<Vec<Thm2Point>> {
    if trials < 2 {
        return Err(Error::Input("need at least two trials".into()));
    }
    let base = TabularPolicy::new(vec![pi_old_ref.to_vec()])?;
    let theta = TabularPolicy::new(vec![pi_theta.to_vec()])?;
    let target = closed_form_target(&base, &[advantages.to_vec()], psi)?;
    let exact = exact_nll(&target, &theta)?;
    let sampler = WeightedIndex::new(pi_old_ref).map_err(|e| Error::Domain(e.to_string()))?;
    let mut out = Vec::with_capacity(group_sizes.len());
    for &g in group_sizes {
        let mut errs = Vec::with_capacity(trials);
        for _ in 0..trials {
            let idx: Vec<usize> = (0..g).map(|_| sampler.sample(rng)).collect();
            let adv: Vec<f64> = idx.iter().map(|&i| advantages[i]).collect();
            let ll: Vec<f64> = idx.iter().map(|&i| pi_theta[i].ln()).collect();
            errs.push((nll_is_estimate(&adv, psi, &ll)? - exact).abs());
        }
        let n = errs.len() as f64;
        let mean = errs.iter().sum::<f64>() / n;
        let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
        out.push(Thm2Point {
            group_size: g,
            mean_abs_error: mean,
            std_error: (var / n).sqrt(),
            relative_error: mean / exact.abs(),
        });
    }
    Ok(out)
}

/// `KL(π* ‖ π_θ)` per step for gradient descent on logits, starting from
/// `log π_old^ref`, under the exact-expectation w⁺-only loss and the full
/// loss with the w⁻ term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WdTrace {
    pub positive_only: Vec<f64>,
    pub full: Vec<f64>,
}

pub fn tabular_wd1_vs_target(
    pi_old_ref: &TabularPolicy,
    advantages: &[Vec<f64>],
    psi: f64,
    steps: usize,
    lr: f64,
) -> Result<WdTrace> {
    let target = closed_form_target(pi_old_ref, advantages, psi)?;
    let neg: Vec<Vec<f64>> = advantages
        .iter()
        .map(|a| a.iter().map(|v| -v).collect())
        .collect();
    let repel = closed_form_target(pi_old_ref, &neg, psi)?;
    let start: Vec<Vec<f64>> = pi_old_ref
        .rows
        .iter()
        .map(|r| r.iter().map(|p| p.ln()).collect())
        .collect();
    let nq = pi_old_ref.prompts() as f64;

    let run = |with_negative: bool| -> Result<Vec<f64>> {
        let mut logits = start.clone();
        let mut trace = Vec::with_capacity(steps + 1);
        for step in 0..=steps {
            let pi = TabularPolicy::from_logits(&logits)?;
            trace.push(target.kl_rows(&pi)?.iter().sum::<f64>() / nq);
            if step == steps {
                break;
            }
            // d/dz of -Σ π* log softmax(z) is softmax(z) - π*; the w⁻ term adds
            // -(softmax(z) - π⁻).
            for q in 0..logits.len() {
                for o in 0..logits[q].len() {
                    let mut g = pi.rows[q][o] - target.rows[q][o];
                    if with_negative {
                        g -= pi.rows[q][o] - repel.rows[q][o];
                    }
                    logits[q][o] -= lr * g / nq;
                }
            }
        }
        Ok(trace)
    };
    Ok(WdTrace {
        positive_only: run(false)?,
        full: run(true)?,
    })
}
