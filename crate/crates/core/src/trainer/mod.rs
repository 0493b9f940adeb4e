//! Pretraining, the RL loop for wd1 / wd1-P / diffu-GRPO, evaluation and
//! metrics.

mod config;
mod data;
mod eval;
mod metrics;
mod pretrain;
mod rl;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diffcore::{GradStore, ParamStore, Tape, Var};
use crate::error::Result;

pub use config::{PretrainTarget, Resolved, RunConfig};
pub use data::{
    completion_len, encode_completion, encode_prompt, eval_pool, pretrain_pool, train_pool,
};
pub use eval::{evaluate, greedy_completions, score_completions, EvalReport};
pub use metrics::{
    plot_rows, read_metrics, window_mean, write_plot_csv, JsonlWriter, MetricsRecord, TimingRecord,
    PLOT_WINDOW,
};
pub use pretrain::{init_checkpoint, pretrain, PretrainEnd, PretrainRecord};
pub use rl::{global_step, params_hash, rl_train, NfeLedger, RunState};

/// Independent random streams derived from one run seed.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Stream {
    Init = 1,
    Data = 2,
    Sample = 3,
    Mask = 4,
}

pub(crate) fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Sums `n` independent scalar losses and their gradients. Each term gets
/// its own tape; terms run in parallel and are reduced in index order.
pub(crate) fn accumulate<F>(
    params: &ParamStore<f32>,
    n: usize,
    term: F,
) -> Result<(f64, GradStore<f32>)>
where
    F: Fn(&mut Tape<'_, f32>, usize) -> Result<Var> + Sync,
{
    let parts = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut tape = Tape::new(params);
            let loss = term(&mut tape, i)?;
            let value = f64::from(tape.value(loss).item());
            Ok((value, tape.backward(loss)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut grads = GradStore::zeros_like(params);
    for (v, g) in &parts {
        total += v;
        grads.add_scaled(g, 1.0);
    }
    Ok((total, grads))
}
