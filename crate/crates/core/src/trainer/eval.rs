//! Greedy evaluation on held-out prompts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::encode_prompt;
use crate::diffcore::Checkpoint;
use crate::diffusion::{Denoiser, Vocab};
use crate::error::{Error, Result};
use crate::sampler::{generate, SampleConfig};
use crate::tasks::{Instance, TaskKind, REWARD_SOLVED};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub n_prompts: usize,
    /// Countdown: solved rate. Sudoku: mean fraction of empty cells filled
    /// correctly. Arithmetic: rate of correct answers.
    pub success: f64,
    pub mean_reward: f64,
    pub checkpoint_step: u64,
}

fn success_of(inst: &Instance, completion: &str) -> f64 {
    let r = inst.reward(completion);
    match inst {
        Instance::Countdown(_) => f64::from(u8::from(r.total == REWARD_SOLVED)),
        Instance::Sudoku(_) => r.total,
        Instance::Arithmetic(_) => f64::from(u8::from(r.get("correctness").unwrap_or(0.0) > 0.0)),
    }
}

/// Scores fixed completions, one per instance.
pub fn score_completions(
    instances: &[Instance],
    completions: &[String],
    checkpoint_step: u64,
) -> Result<EvalReport> {
    if instances.is_empty() || instances.len() != completions.len() {
        return Err(Error::Input(format!(
            "{} completions for {} instances",
            completions.len(),
            instances.len()
        )));
    }
    let n = instances.len() as f64;
    let success = instances
        .iter()
        .zip(completions)
        .map(|(i, c)| success_of(i, c))
        .sum::<f64>()
        / n;
    let mean_reward = instances
        .iter()
        .zip(completions)
        .map(|(i, c)| i.reward(c).total)
        .sum::<f64>()
        / n;
    Ok(EvalReport {
        task: instances[0].kind(),
        n_prompts: instances.len(),
        success,
        mean_reward,
        checkpoint_step,
    })
}

/// Temperature-0 completions from the checkpoint's policy alone.
pub fn greedy_completions(
    ckpt: &Checkpoint,
    sampling: &SampleConfig,
    instances: &[Instance],
    max_prompt_length: usize,
) -> Result<Vec<String>> {
    let vocab = Vocab::char_level();
    let cfg = SampleConfig {
        temperature: 0.0,
        lambda: 1.0,
        beta: 0.0,
        ..sampling.clone()
    };
    let model = Denoiser::new(&ckpt.model, &ckpt.params);
    instances
        .par_iter()
        .map(|inst| {
            let prompt = encode_prompt(&vocab, inst, max_prompt_length)?;
            // low-confidence greedy decoding draws nothing; the rng only
            // matters for random remasking
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let g = generate(model, None, &prompt, vocab.mask_id, &cfg, &mut rng)?;
            Ok(vocab.decode(&g.completion))
        })
        .collect()
}

pub fn evaluate(
    ckpt: &Checkpoint,
    sampling: &SampleConfig,
    instances: &[Instance],
    max_prompt_length: usize,
) -> Result<EvalReport> {
    let completions = greedy_completions(ckpt, sampling, instances, max_prompt_length)?;
    score_completions(instances, &completions, ckpt.step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::generate as gen_tasks;
    use crate::trainer::{init_checkpoint, RunConfig};

    #[test]
    fn oracle_completions_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inst = gen_tasks(TaskKind::Sudoku, &mut rng, 10).unwrap();
        let gold: Vec<String> = inst.iter().map(Instance::gold_completion).collect();
        let rep = score_completions(&inst, &gold, 0).unwrap();
        assert_eq!(rep.success, 1.0);
        assert_eq!(rep.mean_reward, 1.0);
        let inst = gen_tasks(TaskKind::Arithmetic, &mut rng, 10).unwrap();
        let gold: Vec<String> = inst.iter().map(Instance::gold_completion).collect();
        assert_eq!(score_completions(&inst, &gold, 0).unwrap().success, 1.0);
    }

    #[test]
    fn untrained_model_fails_countdown_and_replays() {
        let mut c = RunConfig::default();
        for kv in [
            "d_model=16",
            "n_heads=2",
            "d_ff=32",
            "n_layers=1",
            "max_completion_length=8",
            "block_length=8",
            "diffusion_steps=4",
        ] {
            c.apply_override(kv).unwrap();
        }
        let r = c.resolve().unwrap();
        let ckpt = init_checkpoint(&r, "h").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inst = gen_tasks(TaskKind::Countdown, &mut rng, 256).unwrap();
        let a = evaluate(&ckpt, &r.train.sampling, &inst, r.max_prompt_length).unwrap();
        assert!(a.success <= 0.01, "{a:?}");
        assert_eq!(
            a,
            evaluate(&ckpt, &r.train.sampling, &inst, r.max_prompt_length).unwrap()
        );
    }
}
