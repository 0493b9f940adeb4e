//! Absorbing-state forward process, the masked-diffusion ELBO, and the
//! per-token likelihood surrogates used by the policy-optimization losses.

mod quadrature;
mod vocab;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{forward_logits, DenoiserConfig, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub use quadrature::{gauss_legendre, integrate};
pub use vocab::{TokenId, Vocab};

/// Lower clamp on the diffusion time. `t` is drawn from `U[T_FLOOR, 1]` so
/// the `1/t` weight stays bounded.
pub const T_FLOOR: f64 = 1e-3;

/// Quadrature order for the exact oracles.
pub const QUADRATURE_POINTS: usize = 64;

/// Largest completion the exact oracles will enumerate.
pub const MAX_ORACLE_LEN: usize = 4;

/// Clean prompt and completion, laid out as `[prompt ‖ completion]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptCompletion {
    pub prompt: Vec<TokenId>,
    pub completion: Vec<TokenId>,
}

impl PromptCompletion {
    pub fn new(prompt: Vec<TokenId>, completion: Vec<TokenId>, mask_id: TokenId) -> Result<Self> {
        if prompt.contains(&mask_id) || completion.contains(&mask_id) {
            return Err(Error::Input(
                "clean data must not contain the mask token".into(),
            ));
        }
        Ok(PromptCompletion { prompt, completion })
    }

    pub fn check_lengths(&self, max_prompt: usize, max_completion: usize) -> Result<()> {
        if self.prompt.len() > max_prompt || self.completion.len() > max_completion {
            return Err(Error::Input(format!(
                "prompt/completion lengths {}/{} exceed {max_prompt}/{max_completion}",
                self.prompt.len(),
                self.completion.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.prompt.len() + self.completion.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        let mut t = self.prompt.clone();
        t.extend_from_slice(&self.completion);
        t
    }
}

/// A noised sequence `x_t` in the same layout as its source.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisedSeq {
    pub tokens: Vec<TokenId>,
    pub t: f64,
    /// Per position of the full layout; prompt entries are always false.
    pub masked: Vec<bool>,
}

impl NoisedSeq {
    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

/// Draws `t ~ U[T_FLOOR, 1]`.
pub fn sample_t<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    T_FLOOR + (1.0 - T_FLOOR) * rng.gen::<f64>()
}

/// Absorbing forward process: each completion position independently
/// becomes `mask_id` with probability `t`. The prompt is left intact.
pub fn forward_mask<R: Rng + ?Sized>(
    x0: &PromptCompletion,
    t: f64,
    mask_id: TokenId,
    rng: &mut R,
) -> Result<NoisedSeq> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Input(format!("t = {t} outside [0, 1]")));
    }
    let p = x0.prompt.len();
    let mut tokens = x0.tokens();
    let mut masked = vec![false; tokens.len()];
    for k in 0..x0.completion.len() {
        if rng.gen::<f64>() < t {
            tokens[p + k] = mask_id;
            masked[p + k] = true;
        }
    }
    Ok(NoisedSeq { tokens, t, masked })
}

/// A denoiser: configuration plus parameters.
#[derive(Clone, Copy)]
pub struct Denoiser<'a, T: Real> {
    pub config: &'a DenoiserConfig,
    pub params: &'a ParamStore<T>,
}

impl<'a, T: Real> Denoiser<'a, T> {
    pub fn new(config: &'a DenoiserConfig, params: &'a ParamStore<T>) -> Self {
        Denoiser { config, params }
    }

    /// Per-position log-probabilities `[len, vocab]`.
    pub fn log_probs(&self, tokens: &[TokenId]) -> Result<Tensor<T>> {
        let mut tape = Tape::new(self.params);
        let lp = log_probs_graph(&mut tape, self.config, tokens)?;
        Ok(tape.value(lp).clone())
    }
}

pub fn log_probs_graph<T: Real>(
    tape: &mut Tape<'_, T>,
    cfg: &DenoiserConfig,
    tokens: &[TokenId],
) -> Result<Var> {
    let logits = forward_logits(tape, cfg, tokens)?;
    tape.log_softmax(logits)
}

/// One draw of the ELBO integrand, `(1/t) Σ_k 1[x_t^k = mask] log π(x_0^k | x_t)`,
/// as a scalar node.
pub fn elbo_term_graph<T: Real>(
    tape: &mut Tape<'_, T>,
    cfg: &DenoiserConfig,
    x0: &PromptCompletion,
    noised: &NoisedSeq,
) -> Result<Var> {
    let lp = log_probs_graph(tape, cfg, &noised.tokens)?;
    let clean = x0.tokens();
    let at: Vec<(usize, usize)> = (x0.prompt.len()..clean.len())
        .map(|pos| (pos, clean[pos] as usize))
        .collect();
    let picked = tape.pick(lp, &at)?;
    let inv_t = 1.0 / noised.t;
    let w: Vec<T> = (x0.prompt.len()..clean.len())
        .map(|pos| T::of(if noised.masked[pos] { inv_t } else { 0.0 }))
        .collect();
    tape.dot(picked, &w)
}

/// Independent single-sample ELBO draws (t and mask resampled per draw).
pub fn elbo_draws<T: Real, R: Rng + ?Sized>(
    model: Denoiser<'_, T>,
    x0: &PromptCompletion,
    n_samples: usize,
    mask_id: TokenId,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n_samples == 0 {
        return Err(Error::Input("n_samples must be >= 1".into()));
    }
    if x0.completion.is_empty() {
        return Err(Error::Input("empty completion".into()));
    }
    let mut out = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let t = sample_t(rng);
        let noised = forward_mask(x0, t, mask_id, rng)?;
        if noised.masked_count() == 0 {
            out.push(0.0);
            continue;
        }
        let mut tape = Tape::new(model.params);
        let v = elbo_term_graph(&mut tape, model.config, x0, &noised)?;
        out.push(tape.value(v).item().f64());
    }
    Ok(out)
}

/// Monte Carlo estimate of the masked-diffusion ELBO (nats, maximand sign).
pub fn elbo_estimate<T: Real, R: Rng + ?Sized>(
    model: Denoiser<'_, T>,
    x0: &PromptCompletion,
    n_samples: usize,
    mask_id: TokenId,
    rng: &mut R,
) -> Result<f64> {
    let draws = elbo_draws(model, x0, n_samples, mask_id, rng)?;
    Ok(draws.iter().sum::<f64>() / draws.len() as f64)
}

/// Weight of one mask pattern with `masked` of `len` completion positions
/// masked, averaged over `t ~ U[T_FLOOR, 1]`. With `inv_t` the integrand
/// carries the `1/t` factor.
fn pattern_weight(masked: usize, len: usize, inv_t: bool, points: usize) -> f64 {
    let m = masked as i32;
    let rest = (len - masked) as i32;
    let f = |t: f64| {
        let base = t.powi(m) * (1.0 - t).powi(rest);
        if inv_t {
            base / t
        } else {
            base
        }
    };
    integrate(f, T_FLOOR, 1.0, points) / (1.0 - T_FLOOR)
}

/// Exact per-token expectations `E_t[1[x_t^k = mask] w(t) log π(x_0^k | x_t)]`
/// by enumerating all `2^L` completion mask patterns, with `w(t) = 1/t` when
/// `inv_t` is set and 1 otherwise.
pub fn exact_token_elbo_oracle<T: Real>(
    model: Denoiser<'_, T>,
    x0: &PromptCompletion,
    mask_id: TokenId,
    inv_t: bool,
    quadrature_points: usize,
) -> Result<Vec<f64>> {
    let len = x0.completion.len();
    if len == 0 {
        return Err(Error::Input("empty completion".into()));
    }
    if len > MAX_ORACLE_LEN {
        return Err(Error::Capability(format!(
            "exact enumeration supports completions up to {MAX_ORACLE_LEN} tokens, got {len}"
        )));
    }
    let p = x0.prompt.len();
    let clean = x0.tokens();
    let mut per_token = vec![0.0; len];
    for pattern in 1u32..(1 << len) {
        let mut tokens = clean.clone();
        for k in 0..len {
            if pattern & (1 << k) != 0 {
                tokens[p + k] = mask_id;
            }
        }
        let lp = model.log_probs(&tokens)?;
        let w = pattern_weight(pattern.count_ones() as usize, len, inv_t, quadrature_points);
        for k in 0..len {
            if pattern & (1 << k) != 0 {
                let v = lp.row(p + k)[clean[p + k] as usize].f64();
                per_token[k] += w * v;
            }
        }
    }
    Ok(per_token)
}

/// Exact ELBO under the same `t` floor as [`elbo_estimate`].
pub fn exact_elbo_oracle<T: Real>(
    model: Denoiser<'_, T>,
    x0: &PromptCompletion,
    mask_id: TokenId,
    quadrature_points: usize,
) -> Result<f64> {
    let per = exact_token_elbo_oracle(model, x0, mask_id, true, quadrature_points)?;
    Ok(per.iter().sum())
}

/// Independent Bernoulli(`p`) mask over prompt positions.
pub fn draw_prompt_mask<R: Rng + ?Sized>(prompt_len: usize, p: f64, rng: &mut R) -> Vec<bool> {
    (0..prompt_len)
        .map(|_| p > 0.0 && rng.gen::<f64>() < p)
        .collect()
}

/// `[q' ‖ mask…]` where `q'` masks the flagged prompt positions.
pub fn masked_prompt_input(
    pc: &PromptCompletion,
    prompt_mask: &[bool],
    mask_id: TokenId,
) -> Vec<TokenId> {
    let mut x: Vec<TokenId> = pc
        .prompt
        .iter()
        .zip(prompt_mask)
        .map(|(&tok, &m)| if m { mask_id } else { tok })
        .collect();
    x.extend(std::iter::repeat(mask_id).take(pc.completion.len()));
    x
}

/// `log π(o^k | q')` for every completion position, as a vector node, from
/// a single forward pass over `[q' ‖ all-mask completion]`.
pub fn masked_prompt_token_logliks_graph<T: Real>(
    tape: &mut Tape<'_, T>,
    cfg: &DenoiserConfig,
    pc: &PromptCompletion,
    prompt_mask: &[bool],
    mask_id: TokenId,
) -> Result<Var> {
    if prompt_mask.len() != pc.prompt.len() {
        return Err(Error::Input("prompt mask length mismatch".into()));
    }
    let x = masked_prompt_input(pc, prompt_mask, mask_id);
    let lp = log_probs_graph(tape, cfg, &x)?;
    let p = pc.prompt.len();
    let at: Vec<(usize, usize)> = pc
        .completion
        .iter()
        .enumerate()
        .map(|(k, &tok)| (p + k, tok as usize))
        .collect();
    tape.pick(lp, &at)
}

/// Per-token `log π(o^k | q')` with a freshly drawn random prompt mask.
pub fn token_loglik_masked_prompt<T: Real, R: Rng + ?Sized>(
    model: Denoiser<'_, T>,
    pc: &PromptCompletion,
    p_mask_prompt: f64,
    mask_id: TokenId,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p_mask_prompt) {
        return Err(Error::Input(format!(
            "p_mask_prompt = {p_mask_prompt} outside [0, 1)"
        )));
    }
    let prompt_mask = draw_prompt_mask(pc.prompt.len(), p_mask_prompt, rng);
    let mut tape = Tape::new(model.params);
    let v = masked_prompt_token_logliks_graph(&mut tape, model.config, pc, &prompt_mask, mask_id)?;
    Ok(tape.value(v).data().iter().map(|x| x.f64()).collect())
}

/// Monte Carlo per-token ELBO surrogate: for each token, the average over
/// all draws of `1[masked] w(t) log π(o^k | x_t, q)`, normalized by the total
/// draw count. `weighted` selects `w(t) = 1/t` (default) or `w(t) = 1`.
pub fn token_loglik_elbo<T: Real, R: Rng + ?Sized>(
    model: Denoiser<'_, T>,
    pc: &PromptCompletion,
    n_samples: usize,
    weighted: bool,
    mask_id: TokenId,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n_samples == 0 {
        return Err(Error::Input("n_samples must be >= 1".into()));
    }
    let len = pc.completion.len();
    let p = pc.prompt.len();
    let clean = pc.tokens();
    let mut acc = vec![0.0; len];
    for _ in 0..n_samples {
        let t = sample_t(rng);
        let noised = forward_mask(pc, t, mask_id, rng)?;
        if noised.masked_count() == 0 {
            continue;
        }
        let lp = model.log_probs(&noised.tokens)?;
        let w = if weighted { 1.0 / t } else { 1.0 };
        for k in 0..len {
            if noised.masked[p + k] {
                acc[k] += w * lp.row(p + k)[clean[p + k] as usize].f64();
            }
        }
    }
    Ok(acc.into_iter().map(|a| a / n_samples as f64).collect())
}

/// Mean-field sequence log-likelihood: the sum of per-token values,
/// optionally divided by the token count.
pub fn seq_loglik_meanfield(per_token: &[f64], length_normalize: bool) -> Result<f64> {
    if per_token.is_empty() {
        return Err(Error::Input("empty per-token log-likelihoods".into()));
    }
    let s: f64 = per_token.iter().sum();
    Ok(if length_normalize {
        s / per_token.len() as f64
    } else {
        s
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::randomize;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(vocab: usize) -> DenoiserConfig {
        DenoiserConfig {
            vocab_size: vocab,
            max_len: 8,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            init_std: 0.02,
        }
    }

    fn pc(prompt: &[u32], completion: &[u32]) -> PromptCompletion {
        PromptCompletion::new(prompt.to_vec(), completion.to_vec(), 1).unwrap()
    }

    #[test]
    fn forward_mask_extremes() {
        let x0 = pc(&[3, 4], &[0, 2, 3, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let none = forward_mask(&x0, 0.0, 1, &mut rng).unwrap();
        assert_eq!(none.masked_count(), 0);
        assert_eq!(none.tokens, x0.tokens());
        let all = forward_mask(&x0, 1.0, 1, &mut rng).unwrap();
        assert_eq!(all.masked_count(), 4);
        assert_eq!(&all.tokens[..2], &[3, 4]);
        assert!(all.tokens[2..].iter().all(|&t| t == 1));
        assert!(forward_mask(&x0, 1.5, 1, &mut rng).is_err());
        assert!(forward_mask(&x0, -0.1, 1, &mut rng).is_err());
    }

    #[test]
    fn forward_mask_marginal_is_t() {
        let x0 = pc(&[3], &[2; 32]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let mut masked = 0usize;
        for _ in 0..n {
            masked += forward_mask(&x0, 0.5, 1, &mut rng).unwrap().masked_count();
        }
        let frac = masked as f64 / (n * 32) as f64;
        assert!((frac - 0.5).abs() < 0.02, "fraction {frac}");
    }

    #[test]
    fn clean_data_rejects_mask() {
        assert!(PromptCompletion::new(vec![1], vec![2], 1).is_err());
    }

    #[test]
    fn uniform_model_elbo_and_meanfield() {
        let cfg = small_cfg(4);
        let params = cfg
            .init_params(&mut ChaCha8Rng::seed_from_u64(0))
            .unwrap()
            .cast::<f64>();
        let model = Denoiser::new(&cfg, &params);
        let x0 = pc(&[3], &[2, 3]);
        let exact = exact_elbo_oracle(model, &x0, 1, QUADRATURE_POINTS).unwrap();
        // patterns {1}, {2}: ∫(1-t) each; {1,2}: ∫t·2 → total 2·∫1 dt = 2
        assert!((exact + 2.0 * 4f64.ln()).abs() < 1e-10, "{exact}");
        let lp = token_loglik_masked_prompt(model, &x0, 0.0, 1, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let s = seq_loglik_meanfield(&lp, false).unwrap();
        assert!((s + 2.0 * 4f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn oracle_length_bound() {
        let cfg = small_cfg(4);
        let params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let model = Denoiser::new(&cfg, &params);
        let x0 = pc(&[3], &[2, 3, 2, 3, 2]);
        assert!(matches!(
            exact_elbo_oracle(model, &x0, 1, 64),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn single_token_per_token_elbo_matches_sequence_elbo() {
        let cfg = small_cfg(5);
        let mut params = cfg
            .init_params(&mut ChaCha8Rng::seed_from_u64(0))
            .unwrap()
            .cast::<f64>();
        randomize(&mut params, 0.5, &mut ChaCha8Rng::seed_from_u64(1));
        let model = Denoiser::new(&cfg, &params);
        let x0 = pc(&[3, 4], &[2]);
        let a = elbo_estimate(model, &x0, 200, 1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b =
            token_loglik_elbo(model, &x0, 200, true, 1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!((a - b[0]).abs() < 1e-12);
    }

    #[test]
    fn masked_prompt_loglik_is_seed_free_without_prompt_masking() {
        let cfg = small_cfg(6);
        let mut params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        randomize(&mut params, 0.3, &mut ChaCha8Rng::seed_from_u64(4));
        let model = Denoiser::new(&cfg, &params);
        let x0 = pc(&[3, 4, 5], &[2, 3, 4]);
        let a = token_loglik_masked_prompt(model, &x0, 0.0, 1, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let b = token_loglik_masked_prompt(model, &x0, 0.0, 1, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&x| x <= 0.0 && x.is_finite()));
        assert!(
            token_loglik_masked_prompt(model, &x0, 1.0, 1, &mut ChaCha8Rng::seed_from_u64(1))
                .is_err()
        );
    }

    #[test]
    fn meanfield_examples() {
        assert_eq!(
            seq_loglik_meanfield(&[-1.0, -1.0, -2.0], false).unwrap(),
            -4.0
        );
        assert!(
            (seq_loglik_meanfield(&[-1.0, -1.0, -2.0], true).unwrap() + 4.0 / 3.0).abs() < 1e-15
        );
        assert!(seq_loglik_meanfield(&[], false).is_err());
    }
}
