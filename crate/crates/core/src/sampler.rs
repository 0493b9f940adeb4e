//! Iterative denoising generation: semi-autoregressive block decoding with
//! low-confidence remasking, optionally from a geometric mixture of an old
//! and a reference policy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{log_softmax_row, Real, Tensor};
use crate::diffusion::{Denoiser, TokenId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Remasking {
    LowConfidence,
    Random,
}

impl std::str::FromStr for Remasking {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low_confidence" => Ok(Remasking::LowConfidence),
            "random" => Ok(Remasking::Random),
            other => Err(Error::Config(format!("unknown remasking mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub gen_length: usize,
    pub diffusion_steps: usize,
    pub block_length: usize,
    pub remasking: Remasking,
    pub temperature: f64,
    /// Exponent on the old policy in the geometric mixture.
    pub lambda: f64,
    /// Exponent on the reference policy in the geometric mixture.
    pub beta: f64,
    /// Use `λ·log π_old + β·log π_ref` without dividing by `λ+β`.
    pub unnormalized_mixture: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            gen_length: 32,
            diffusion_steps: 16,
            block_length: 16,
            remasking: Remasking::LowConfidence,
            temperature: 1.0,
            lambda: 1.0,
            beta: 0.0,
            unnormalized_mixture: false,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        unmasking_schedule(self.gen_length, self.diffusion_steps, self.block_length)?;
        if !(self.temperature >= 0.0) {
            return Err(Error::Config("temperature must be >= 0".into()));
        }
        if self.lambda < 0.0 || self.beta < 0.0 || !(self.lambda + self.beta > 0.0) {
            return Err(Error::Config(
                "mixture exponents need λ, β >= 0 and λ+β > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Commit counts per denoising step, grouped by block.
///
/// Steps are split across blocks as evenly as possible (earlier blocks take
/// the remainder); within a block, tokens are split across its steps the
/// same way.
pub fn unmasking_schedule(
    gen_length: usize,
    diffusion_steps: usize,
    block_length: usize,
) -> Result<Vec<Vec<usize>>> {
    if gen_length == 0 || block_length == 0 || gen_length % block_length != 0 {
        return Err(Error::Config(format!(
            "block_length {block_length} must divide gen_length {gen_length}"
        )));
    }
    let blocks = gen_length / block_length;
    if diffusion_steps < blocks {
        return Err(Error::Config(format!(
            "diffusion_steps {diffusion_steps} < number of blocks {blocks}"
        )));
    }
    let split = |total: usize, parts: usize| -> Vec<usize> {
        let (base, rem) = (total / parts, total % parts);
        (0..parts).map(|i| base + usize::from(i < rem)).collect()
    };
    let steps = split(diffusion_steps, blocks);
    if steps.iter().any(|&s| s > block_length) {
        return Err(Error::Config(format!(
            "{diffusion_steps} steps over {blocks} block(s) leaves steps that commit nothing"
        )));
    }
    Ok(steps.into_iter().map(|s| split(block_length, s)).collect())
}

/// Log-space geometric mixture of two policies' per-position distributions.
///
/// Both inputs are log-softmaxed first; the result is
/// `(λ·log π_old + β·log π_ref) / (λ+β)`, or the plain weighted sum when
/// `unnormalized` is set.
pub fn mixture_logits<T: Real>(
    logits_old: &Tensor<T>,
    logits_ref: &Tensor<T>,
    lambda: f64,
    beta: f64,
    unnormalized: bool,
) -> Result<Tensor<T>> {
    if logits_old.shape() != logits_ref.shape() {
        return Err(Error::Input(format!(
            "mixture shapes {:?} vs {:?}",
            logits_old.shape(),
            logits_ref.shape()
        )));
    }
    if lambda < 0.0 || beta < 0.0 || !(lambda + beta > 0.0) {
        return Err(Error::Input("mixture needs λ, β >= 0 and λ+β > 0".into()));
    }
    let (wo, wr) = if unnormalized {
        (lambda, beta)
    } else {
        (lambda / (lambda + beta), beta / (lambda + beta))
    };
    let cols = logits_old.cols();
    let mut lo = vec![T::zero(); cols];
    let mut lr = vec![T::zero(); cols];
    let mut out = Vec::with_capacity(logits_old.len());
    for r in 0..logits_old.rows() {
        log_softmax_row(logits_old.row(r), &mut lo);
        log_softmax_row(logits_ref.row(r), &mut lr);
        for c in 0..cols {
            let a = if wo == 0.0 { 0.0 } else { wo * lo[c].f64() };
            let b = if wr == 0.0 { 0.0 } else { wr * lr[c].f64() };
            out.push(T::of(a + b));
        }
    }
    Ok(Tensor::new(logits_old.shape().to_vec(), out))
}

/// Forward-evaluation counts for one generation call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NfeCount {
    pub old: u64,
    pub reference: u64,
}

impl NfeCount {
    pub fn total(&self) -> u64 {
        self.old + self.reference
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub completion: Vec<TokenId>,
    pub nfe: NfeCount,
    /// Completion positions committed at each step, in step order.
    pub commits: Vec<Vec<usize>>,
}

/// Generates a completion for `prompt` by iterative denoising.
///
/// Starts from an all-mask completion and decodes block by block. At each
/// step every masked position of the current block is predicted from the
/// (possibly mixed) distribution; the most confident predictions are
/// committed and the rest stay masked. The mask token is never emitted.
pub fn generate<T: Real, R: Rng + ?Sized>(
    old: Denoiser<'_, T>,
    reference: Option<Denoiser<'_, T>>,
    prompt: &[TokenId],
    mask_id: TokenId,
    cfg: &SampleConfig,
    rng: &mut R,
) -> Result<Generation> {
    if prompt.is_empty() {
        return Err(Error::Input("empty prompt".into()));
    }
    cfg.validate()?;
    let use_ref = cfg.beta > 0.0;
    if use_ref && reference.is_none() {
        return Err(Error::Config("β > 0 requires a reference policy".into()));
    }
    let schedule = unmasking_schedule(cfg.gen_length, cfg.diffusion_steps, cfg.block_length)?;
    let p = prompt.len();
    let mut x: Vec<TokenId> = prompt.to_vec();
    x.extend(std::iter::repeat(mask_id).take(cfg.gen_length));
    let mut nfe = NfeCount::default();
    let mut commits = Vec::with_capacity(cfg.diffusion_steps);
    let vocab = old.config.vocab_size;
    let mut probs = vec![0.0f64; vocab];

    for (b, block_counts) in schedule.iter().enumerate() {
        let start = b * cfg.block_length;
        let end = start + cfg.block_length;
        for &k in block_counts {
            let logits_old = crate::diffcore::infer_logits(old.params, old.config, &x)?;
            nfe.old += 1;
            let logp = if use_ref {
                let r = reference.expect("checked above");
                let logits_ref = crate::diffcore::infer_logits(r.params, r.config, &x)?;
                nfe.reference += 1;
                mixture_logits(
                    &logits_old,
                    &logits_ref,
                    cfg.lambda,
                    cfg.beta,
                    cfg.unnormalized_mixture,
                )?
            } else {
                let mut lp = logits_old.clone();
                let cols = lp.cols();
                for r in 0..lp.rows() {
                    let src = logits_old.row(r).to_vec();
                    log_softmax_row(&src, &mut lp.data_mut()[r * cols..(r + 1) * cols]);
                }
                lp
            };

            // (position, token, confidence) for each masked slot in the block
            let mut cands: Vec<(usize, TokenId, f64)> = Vec::new();
            for pos in start..end {
                if x[p + pos] != mask_id {
                    continue;
                }
                let row = logp.row(p + pos);
                let (tok, prob) = pick_token(row, mask_id, cfg.temperature, &mut probs, rng);
                let conf = match cfg.remasking {
                    Remasking::LowConfidence => prob,
                    Remasking::Random => rng.gen::<f64>(),
                };
                cands.push((pos, tok, conf));
            }
            // highest confidence first, ties to the lowest position
            cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
            let mut committed: Vec<usize> = Vec::with_capacity(k);
            for &(pos, tok, _) in cands.iter().take(k) {
                x[p + pos] = tok;
                committed.push(pos);
            }
            committed.sort_unstable();
            commits.push(committed);
        }
    }
    let completion = x[p..].to_vec();
    debug_assert!(!completion.contains(&mask_id));
    Ok(Generation {
        completion,
        nfe,
        commits,
    })
}

/// Samples (or argmaxes, at temperature 0) a token from one row of log
/// probabilities with the mask token excluded. Returns the token and its
/// probability under the untempered distribution.
fn pick_token<T: Real, R: Rng + ?Sized>(
    logp: &[T],
    mask_id: TokenId,
    temperature: f64,
    probs: &mut [f64],
    rng: &mut R,
) -> (TokenId, f64) {
    let m = mask_id as usize;
    let max = logp
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != m)
        .map(|(_, v)| v.f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (i, v) in logp.iter().enumerate() {
        probs[i] = if i == m { 0.0 } else { (v.f64() - max).exp() };
        z += probs[i];
    }
    for q in probs.iter_mut() {
        *q /= z;
    }
    let tok = if temperature == 0.0 {
        // first maximal entry
        let mut best = usize::MAX;
        for i in 0..probs.len() {
            if i != m && (best == usize::MAX || probs[i] > probs[best]) {
                best = i;
            }
        }
        best
    } else {
        let inv = 1.0 / temperature;
        let mut tempered: Vec<f64> = logp
            .iter()
            .enumerate()
            .map(|(i, v)| {
                if i == m {
                    f64::NEG_INFINITY
                } else {
                    (v.f64() - max) * inv
                }
            })
            .collect();
        let tmax = tempered.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut tz = 0.0;
        for v in tempered.iter_mut() {
            *v = (*v - tmax).exp();
            tz += *v;
        }
        let u = rng.gen::<f64>() * tz;
        let mut acc = 0.0;
        let mut chosen = None;
        for (i, &w) in tempered.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            acc += w;
            if u < acc {
                chosen = Some(i);
                break;
            }
        }
        chosen.unwrap_or_else(|| {
            tempered
                .iter()
                .rposition(|&w| w > 0.0)
                .expect("nonempty support")
        })
    };
    (tok as TokenId, probs[tok])
}
