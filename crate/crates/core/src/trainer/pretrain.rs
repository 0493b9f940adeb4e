//! Supervised pretraining on the negative ELBO.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{PretrainTarget, Resolved};
use super::data::{encode_completion, encode_prompt};
use super::{accumulate, stream, Stream};
use crate::diffcore::{AdamConfig, Checkpoint, OptimizerState, ParamStore};
use crate::diffusion::{
    elbo_term_graph, forward_mask, sample_t, NoisedSeq, PromptCompletion, Vocab,
};
use crate::error::{Error, Result};
use crate::tasks::Instance;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: u64,
    pub seed: u64,
    /// Batch mean of −ELBO / completion length.
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug)]
pub enum PretrainEnd {
    Done(Checkpoint),
    /// Loss or gradient went non-finite; `last_good` holds the weights from
    /// before the failing step.
    Diverged {
        last_good: Checkpoint,
        error: Error,
    },
}

/// Fresh weights from the run seed.
pub fn init_checkpoint(r: &Resolved, config_hash: &str) -> Result<Checkpoint> {
    let params = r.model.init_params(&mut stream(r.seed, Stream::Init))?;
    Ok(Checkpoint {
        model: r.model.clone(),
        params,
        step: 0,
        config_hash: config_hash.to_string(),
    })
}

/// One minibatch of noised (prompt, completion) pairs.
fn draw_batch<R: Rng>(
    r: &Resolved,
    vocab: &Vocab,
    pool: &[Instance],
    rng: &mut R,
) -> Result<Vec<(PromptCompletion, NoisedSeq)>> {
    (0..r.pretrain_batch_size)
        .map(|_| {
            let inst = &pool[rng.gen_range(0..pool.len())];
            let text = match r.pretrain_target {
                PretrainTarget::Gold => inst.gold_completion(),
                PretrainTarget::Format => inst.format_completion(rng),
            };
            let pc = PromptCompletion::new(
                encode_prompt(vocab, inst, r.max_prompt_length)?,
                encode_completion(vocab, &text, r.train.sampling.gen_length)?,
                vocab.mask_id,
            )?;
            let noised = forward_mask(&pc, sample_t(rng), vocab.mask_id, rng)?;
            Ok((pc, noised))
        })
        .collect()
}

/// Minimizes `−ELBO / |o|` averaged over minibatches for `pretrain_steps`
/// steps, starting from `init`. `sink` sees one record per step.
pub fn pretrain(
    r: &Resolved,
    init: Checkpoint,
    pool: &[Instance],
    sink: &mut dyn FnMut(&PretrainRecord) -> Result<()>,
) -> Result<PretrainEnd> {
    if pool.is_empty() {
        return Err(Error::Input("empty pretraining pool".into()));
    }
    r.model.check_layout(&init.params)?;
    let vocab = Vocab::char_level();
    let opt_cfg = AdamConfig {
        learning_rate: r.pretrain_learning_rate,
        ..r.train.optimizer.clone()
    };
    let mut params: ParamStore<f32> = init.params.clone();
    let mut opt = OptimizerState::new(opt_cfg, &params);
    let mut rng = stream(r.seed, Stream::Data);
    let scale = 1.0 / r.pretrain_batch_size as f64;
    let ckpt = |params: &ParamStore<f32>, step: u64| Checkpoint {
        model: r.model.clone(),
        params: params.clone(),
        step: init.step + step,
        config_hash: init.config_hash.clone(),
    };

    for step in 0..r.pretrain_steps {
        let batch = draw_batch(r, &vocab, pool, &mut rng)?;
        let result = accumulate(&params, batch.len(), |tape, i| {
            let (pc, noised) = &batch[i];
            let elbo = elbo_term_graph(tape, &r.model, pc, noised)?;
            tape.scale(elbo, -(scale / pc.completion.len() as f64) as f32)
        })
        .and_then(|(loss, grads)| {
            if !loss.is_finite() {
                return Err(Error::numeric(
                    "pretrain loss",
                    format!("step {step}: {loss}"),
                ));
            }
            let stats = opt.step(&mut params, &grads)?;
            Ok((loss, stats))
        });
        match result {
            Ok((loss, stats)) => sink(&PretrainRecord {
                step: step + 1,
                seed: r.seed,
                loss,
                grad_norm: stats.grad_norm,
            })?,
            Err(error @ Error::Numeric { .. }) => {
                return Ok(PretrainEnd::Diverged {
                    last_good: ckpt(&params, step),
                    error,
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(PretrainEnd::Done(ckpt(&params, r.pretrain_steps)))
}
