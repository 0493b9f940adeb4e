//! Shared fixtures: finite-difference gradient checks on a small f64
//! denoiser.
#![allow(dead_code)]

use dlmwpo::diffcore::{randomize, DenoiserConfig, ParamStore, Tape, Var};
use dlmwpo::diffusion::{
    draw_prompt_mask, elbo_term_graph, forward_mask, masked_prompt_token_logliks_graph,
    PromptCompletion,
};
use dlmwpo::policy_opt::{
    diffu_grpo_group_loss, diffu_grpo_seq_term, group_advantage, seq_loglik_node, wd1_coefficients,
    wd1_group_loss, wd1_weights,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MASK: u32 = 1;

pub fn small_model(seed: u64) -> (DenoiserConfig, ParamStore<f64>) {
    let cfg = DenoiserConfig {
        vocab_size: 11,
        max_len: 12,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        init_std: 0.3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = cfg.init_params(&mut rng).unwrap().cast::<f64>();
    randomize(&mut params, 0.3, &mut rng);
    (cfg, params)
}

fn random_pc(rng: &mut ChaCha8Rng, prompt: usize, completion: usize) -> PromptCompletion {
    let tok = |rng: &mut ChaCha8Rng| rng.gen_range(3..11u32);
    let p = (0..prompt).map(|_| tok(rng)).collect();
    let c = (0..completion).map(|_| tok(rng)).collect();
    PromptCompletion::new(p, c, MASK).unwrap()
}

/// A loss graph over whatever parameters the tape holds.
pub type LossFn = Box<dyn Fn(&mut Tape<'_, f64>) -> Var>;

/// Single-draw negative ELBO per completion token, summed over two
/// sequences.
pub fn elbo_loss(cfg: &DenoiserConfig, seed: u64) -> LossFn {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    for _ in 0..2 {
        let pc = random_pc(&mut rng, 3, 5);
        let t = rng.gen_range(0.3..1.0);
        let mut noised = forward_mask(&pc, t, MASK, &mut rng).unwrap();
        if noised.masked_count() == 0 {
            noised = forward_mask(&pc, 1.0, MASK, &mut rng).unwrap();
        }
        items.push((pc, noised));
    }
    let cfg = cfg.clone();
    Box::new(move |tape| {
        let mut terms = Vec::new();
        for (pc, noised) in &items {
            let e = elbo_term_graph(tape, &cfg, pc, noised).unwrap();
            terms.push(tape.scale(e, -1.0 / pc.completion.len() as f64).unwrap());
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t).unwrap();
        }
        total
    })
}

struct Group {
    pcs: Vec<PromptCompletion>,
    mask: Vec<bool>,
    rewards: Vec<f64>,
}

fn group(rng: &mut ChaCha8Rng, g: usize) -> Group {
    let prompt = random_pc(rng, 4, 1).prompt;
    let pcs = (0..g)
        .map(|_| {
            let c = random_pc(rng, 1, 4).completion;
            PromptCompletion::new(prompt.clone(), c, MASK).unwrap()
        })
        .collect();
    let mut mask = draw_prompt_mask(4, 0.5, rng);
    mask[0] = true;
    let rewards = (0..g).map(|_| rng.gen_range(0.0..1.0)).collect();
    Group { pcs, mask, rewards }
}

/// diffu-GRPO loss for one group of four, with clipping and the token KL
/// active. Old and reference log-likelihoods are fixed constants near the
/// current ones so the ratio straddles the clip range.
pub fn grpo_loss(cfg: &DenoiserConfig, params: &ParamStore<f64>, seed: u64) -> LossFn {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = group(&mut rng, 4);
    let adv = group_advantage(&g.rewards).unwrap();
    let cur: Vec<Vec<f64>> = g
        .pcs
        .iter()
        .map(|pc| {
            let mut tape = Tape::new(params);
            let v = masked_prompt_token_logliks_graph(&mut tape, cfg, pc, &g.mask, MASK).unwrap();
            tape.value(v).data().to_vec()
        })
        .collect();
    let jitter = |rng: &mut ChaCha8Rng, v: &[f64]| -> Vec<f64> {
        v.iter().map(|x| x + rng.gen_range(-0.4..0.4)).collect()
    };
    let old: Vec<Vec<f64>> = cur.iter().map(|v| jitter(&mut rng, v)).collect();
    let reference: Vec<Vec<f64>> = cur.iter().map(|v| jitter(&mut rng, v)).collect();
    let cfg = cfg.clone();
    Box::new(move |tape| {
        let terms: Vec<Var> = g
            .pcs
            .iter()
            .enumerate()
            .map(|(i, pc)| {
                let ll = masked_prompt_token_logliks_graph(tape, &cfg, pc, &g.mask, MASK).unwrap();
                diffu_grpo_seq_term(tape, ll, &old[i], Some(&reference[i]), adv[i], 0.2, 0.04)
                    .unwrap()
            })
            .collect();
        diffu_grpo_group_loss(tape, &terms).unwrap()
    })
}

/// wd1 loss for one group of four.
pub fn wd1_loss(cfg: &DenoiserConfig, seed: u64) -> LossFn {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = group(&mut rng, 4);
    let adv = group_advantage(&g.rewards).unwrap();
    let (wp, wn) = wd1_weights(&adv, 1.0).unwrap();
    let coef = wd1_coefficients(&wp, &wn, false).unwrap();
    let cfg = cfg.clone();
    Box::new(move |tape| {
        let seqs: Vec<Var> = g
            .pcs
            .iter()
            .map(|pc| {
                let ll = masked_prompt_token_logliks_graph(tape, &cfg, pc, &g.mask, MASK).unwrap();
                seq_loglik_node(tape, ll, false).unwrap()
            })
            .collect();
        wd1_group_loss(tape, &seqs, &coef).unwrap()
    })
}

#[derive(Debug)]
pub struct GradReport {
    pub coords: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
}

fn eval(params: &ParamStore<f64>, loss: &LossFn) -> f64 {
    let mut tape = Tape::new(params);
    let v = loss(&mut tape);
    tape.value(v).item()
}

/// Analytic vs central-difference gradient on `coords` random coordinates.
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`, so gradients far below
/// the difference quotient's roundoff are compared absolutely.
pub fn gradcheck(params: &ParamStore<f64>, loss: &LossFn, coords: usize, seed: u64) -> GradReport {
    let mut tape = Tape::new(params);
    let v = loss(&mut tape);
    let grads = tape.backward(v).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.num_scalars();
    let h = 1e-4;
    let mut p = params.clone();
    let mut worst = (0.0, 0);
    for _ in 0..coords {
        let i = rng.gen_range(0..n);
        let x = p.flat(i);
        p.set_flat(i, x + h);
        let up = eval(&p, loss);
        p.set_flat(i, x - h);
        let down = eval(&p, loss);
        p.set_flat(i, x);
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.flat(i);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    GradReport {
        coords,
        max_rel_err: worst.0,
        worst_coord: worst.1,
    }
}
