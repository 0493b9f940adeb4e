//! The RL outer loop: snapshot π_old, sample groups, score, weight, then
//! take μ inner gradient steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::Resolved;
use super::data::{completion_len, encode_prompt};
use super::metrics::MetricsRecord;
use super::{accumulate, stream, Stream};
use crate::diffcore::{Checkpoint, OptimizerState, ParamStore, Tape};
use crate::diffusion::{
    draw_prompt_mask, masked_prompt_token_logliks_graph, Denoiser, PromptCompletion, TokenId, Vocab,
};
use crate::error::{Error, Result};
use crate::policy_opt::{
    diffu_grpo_seq_term, group_advantage, seq_loglik_node, wd1_coefficients, wd1_weights, Method,
};
use crate::sampler::generate;
use crate::tasks::Instance;

/// Cumulative forward-pass counts. One batched pass over a global step's
/// completions counts as one likelihood NFE; sampling counts every
/// denoiser call per completion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NfeLedger {
    pub sampling: u64,
    pub likelihood: u64,
}

/// Everything that evolves during RL.
#[derive(Clone)]
pub struct RunState {
    pub params: ParamStore<f32>,
    /// Frozen copy of `params` taken at the start of each global step.
    pub old: ParamStore<f32>,
    pub reference: Option<ParamStore<f32>>,
    pub opt: OptimizerState,
    pub global_step: u64,
    /// Gradient steps taken so far.
    pub step: u64,
    pub nfe: NfeLedger,
    sample_rng: ChaCha8Rng,
    mask_rng: ChaCha8Rng,
    data_rng: ChaCha8Rng,
    /// Hash of the weight vectors of the most recent global step.
    pub weights_hash: String,
    /// Hash of `old` as sampled from in the most recent global step.
    pub snapshot_hash: String,
}

impl RunState {
    /// Starts from `init`; the reference policy is a frozen copy of it when
    /// the method needs one.
    pub fn new(r: &Resolved, init: &Checkpoint) -> Result<Self> {
        r.model.check_layout(&init.params)?;
        if init.model != r.model {
            return Err(Error::Config(
                "checkpoint model does not match the config".into(),
            ));
        }
        let t = &r.train;
        let reference = (t.beta > 0.0).then(|| init.params.clone());
        Ok(RunState {
            params: init.params.clone(),
            old: init.params.clone(),
            reference,
            opt: OptimizerState::new(t.optimizer.clone(), &init.params),
            global_step: 0,
            step: 0,
            nfe: NfeLedger::default(),
            sample_rng: stream(r.seed, Stream::Sample),
            mask_rng: stream(r.seed, Stream::Mask),
            data_rng: stream(r.seed, Stream::Data),
            weights_hash: String::new(),
            snapshot_hash: String::new(),
        })
    }

    pub fn checkpoint(&self, r: &Resolved, config_hash: &str) -> Checkpoint {
        Checkpoint {
            model: r.model.clone(),
            params: self.params.clone(),
            step: self.step,
            config_hash: config_hash.to_string(),
        }
    }
}

/// Hex SHA-256 over the bit patterns of a parameter store.
pub fn params_hash(p: &ParamStore<f32>) -> String {
    let mut h = Sha256::new();
    for (name, t) in p.iter() {
        h.update(name.as_bytes());
        for x in t.data() {
            h.update(x.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn f64s_hash(xs: &[f64]) -> String {
    let mut h = Sha256::new();
    for x in xs {
        h.update(x.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// One sampled completion and its score.
struct Rollout {
    pc: PromptCompletion,
    reward: f64,
    len: usize,
}

fn sample_groups(
    r: &Resolved,
    st: &mut RunState,
    vocab: &Vocab,
    prompts: &[&Instance],
) -> Result<Vec<Vec<Rollout>>> {
    let g = r.train.num_generations;
    let scfg = r.rollout_sampling();
    let jobs: Vec<(usize, u64)> = (0..prompts.len())
        .flat_map(|p| (0..g).map(move |_| p))
        .map(|p| (p, st.sample_rng.gen()))
        .collect();
    let encoded: Vec<Vec<TokenId>> = prompts
        .iter()
        .map(|inst| encode_prompt(vocab, inst, r.max_prompt_length))
        .collect::<Result<_>>()?;
    let old = Denoiser::new(&r.model, &st.old);
    let reference = st.reference.as_ref().map(|p| Denoiser::new(&r.model, p));
    let gens = jobs
        .par_iter()
        .map(|&(p, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            generate(old, reference, &encoded[p], vocab.mask_id, &scfg, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut groups: Vec<Vec<Rollout>> = (0..prompts.len()).map(|_| Vec::with_capacity(g)).collect();
    for (&(p, _), gen) in jobs.iter().zip(gens) {
        st.nfe.sampling += gen.nfe.total();
        let text = vocab.decode(&gen.completion);
        groups[p].push(Rollout {
            reward: prompts[p].reward(&text).total,
            len: completion_len(&gen.completion, vocab.eos_id),
            pc: PromptCompletion::new(encoded[p].clone(), gen.completion, vocab.mask_id)?,
        });
    }
    Ok(groups)
}

/// Per-token log-likelihoods of every rollout under `params`, one prompt
/// mask per prompt.
fn token_logliks(
    r: &Resolved,
    params: &ParamStore<f32>,
    flat: &[&Rollout],
    owner: &[usize],
    masks: &[Vec<bool>],
    mask_id: TokenId,
) -> Result<Vec<Vec<f64>>> {
    flat.par_iter()
        .zip(owner.par_iter())
        .map(|(ro, &p)| {
            let mut tape = Tape::new(params);
            let v =
                masked_prompt_token_logliks_graph(&mut tape, &r.model, &ro.pc, &masks[p], mask_id)?;
            Ok(tape.value(v).data().iter().map(|x| f64::from(*x)).collect())
        })
        .collect()
}

/// Runs one global step: refresh π_old, sample and score groups, compute
/// advantages and weights once, then μ inner gradient steps. Returns one
/// metrics record per gradient step.
pub fn global_step(
    r: &Resolved,
    st: &mut RunState,
    pool: &[Instance],
) -> Result<Vec<MetricsRecord>> {
    let t = &r.train;
    let vocab = Vocab::char_level();
    let mask_id = vocab.mask_id;
    st.old.copy_from(&st.params)?;
    st.snapshot_hash = params_hash(&st.old);

    let prompts: Vec<&Instance> = (0..t.prompts_per_step)
        .map(|_| &pool[st.data_rng.gen_range(0..pool.len())])
        .collect();
    let groups = sample_groups(r, st, &vocab, &prompts)?;
    let n_prompts = groups.len();
    let flat: Vec<&Rollout> = groups.iter().flatten().collect();
    let owner: Vec<usize> = groups
        .iter()
        .enumerate()
        .flat_map(|(p, g)| vec![p; g.len()])
        .collect();

    // prompt masks for every inner iteration, drawn up front
    let masks: Vec<Vec<Vec<bool>>> = (0..t.num_iterations)
        .map(|_| {
            groups
                .iter()
                .map(|g| draw_prompt_mask(g[0].pc.prompt.len(), t.p_mask_prompt, &mut st.mask_rng))
                .collect()
        })
        .collect();

    let mut advantages = Vec::with_capacity(flat.len());
    for g in &groups {
        let rewards: Vec<f64> = g.iter().map(|ro| ro.reward).collect();
        advantages.extend(group_advantage(&rewards)?);
    }

    // wd1: fixed per-completion coefficients; baseline: cached old/ref
    let mut coefficients = Vec::new();
    let mut old_ll = Vec::new();
    let mut ref_ll = None;
    match t.method {
        Method::Wd1 | Method::Wd1P => {
            if t.advantage_shift && t.beta > 0.0 {
                let reference = st.reference.as_ref().expect("beta > 0 keeps a reference");
                let ll = token_logliks(r, reference, &flat, &owner, &masks[0], mask_id)?;
                st.nfe.likelihood += 1;
                for (a, l) in advantages.iter_mut().zip(&ll) {
                    *a += t.beta * l.iter().sum::<f64>() / (t.lambda + t.beta);
                }
            }
            let mut start = 0;
            let mut all_w = Vec::new();
            for g in &groups {
                let adv = &advantages[start..start + g.len()];
                let (wp, wn) = wd1_weights(adv, t.psi())?;
                all_w.extend(wp.iter().chain(&wn));
                let c = wd1_coefficients(&wp, &wn, t.method == Method::Wd1P)?;
                coefficients.extend(c.into_iter().map(|c| c / n_prompts as f64));
                start += g.len();
            }
            st.weights_hash = f64s_hash(&all_w);
        }
        Method::DiffuGrpo => {
            old_ll = token_logliks(r, &st.old, &flat, &owner, &masks[0], mask_id)?;
            st.nfe.likelihood += 1;
            if t.beta > 0.0 {
                let reference = st.reference.as_ref().expect("beta > 0 keeps a reference");
                ref_ll = Some(token_logliks(
                    r, reference, &flat, &owner, &masks[0], mask_id,
                )?);
                st.nfe.likelihood += 1;
            }
            st.weights_hash = f64s_hash(&advantages);
        }
    }

    let rewards: Vec<f64> = flat.iter().map(|ro| ro.reward).collect();
    let n = rewards.len() as f64;
    let reward_mean = rewards.iter().sum::<f64>() / n;
    let reward_max = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let reward_std = (rewards
        .iter()
        .map(|x| (x - reward_mean).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let completion_len_mean = flat.iter().map(|ro| ro.len as f64).sum::<f64>() / n;

    let mut records = Vec::with_capacity(t.num_iterations);
    for (k, mask) in masks.iter().enumerate() {
        let (loss, grads) = accumulate(&st.params, flat.len(), |tape, i| {
            let ll = masked_prompt_token_logliks_graph(
                tape,
                &r.model,
                &flat[i].pc,
                &mask[owner[i]],
                mask_id,
            )?;
            match t.method {
                Method::Wd1 | Method::Wd1P => {
                    let seq = seq_loglik_node(tape, ll, t.length_normalize)?;
                    tape.scale(seq, coefficients[i] as f32)
                }
                Method::DiffuGrpo => {
                    let group = groups[owner[i]].len() as f64;
                    let term = diffu_grpo_seq_term(
                        tape,
                        ll,
                        &old_ll[i],
                        ref_ll.as_ref().map(|v| v[i].as_slice()),
                        advantages[i],
                        t.epsilon,
                        t.beta,
                    )?;
                    tape.scale(term, (-1.0 / (group * n_prompts as f64)) as f32)
                }
            }
        })?;
        if !loss.is_finite() {
            return Err(Error::numeric(
                "rl loss",
                format!("global step {}: {loss}", st.global_step),
            ));
        }
        let stats = st.opt.step(&mut st.params, &grads)?;
        st.nfe.likelihood += 1;
        st.step += 1;
        records.push(MetricsRecord {
            step: st.step,
            global_step: st.global_step,
            inner_step: k,
            seed: r.seed,
            method: t.method.to_string(),
            loss,
            grad_norm: stats.grad_norm,
            reward_mean,
            reward_max,
            reward_std,
            completion_len_mean,
            nfe_sampling: st.nfe.sampling,
            nfe_likelihood: st.nfe.likelihood,
        });
    }
    st.global_step += 1;
    Ok(records)
}

/// Repeats global steps until `max_steps` gradient steps are done. A
/// numeric failure rolls the state back to the start of the global step,
/// reseeds the sampling stream and retries, up to `max_retries` times.
pub fn rl_train(
    r: &Resolved,
    st: &mut RunState,
    pool: &[Instance],
    sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<()> {
    let mut retries = 0;
    while st.step < r.max_steps {
        let saved = st.clone();
        match global_step(r, st, pool) {
            Ok(records) => {
                for rec in records.iter().take((r.max_steps - saved.step) as usize) {
                    sink(rec)?;
                }
                retries = 0;
            }
            Err(e @ Error::Numeric { .. }) => {
                if retries >= r.max_retries {
                    return Err(e);
                }
                retries += 1;
                let reseed: u64 = st.sample_rng.gen();
                *st = saved;
                st.sample_rng = ChaCha8Rng::seed_from_u64(reseed);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(())
}
