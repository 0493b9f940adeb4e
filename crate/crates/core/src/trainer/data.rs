//! Instance pools and token encoding for training and evaluation.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::Resolved;
use crate::diffusion::{TokenId, Vocab};
use crate::error::{Error, Result};
use crate::tasks::{generate, read_dataset, Instance};

/// Training prompts: the `train_data` file if set, else `train_size`
/// instances generated from `data_seed`.
pub fn train_pool(r: &Resolved) -> Result<Vec<Instance>> {
    let pool = match &r.train_data {
        Some(p) => read_dataset(p)?,
        None => generate(
            r.task,
            &mut ChaCha8Rng::seed_from_u64(r.data_seed),
            r.train_size,
        )?,
    };
    check_task(r, &pool)?;
    Ok(pool)
}

/// Pretraining instances: the `train_data` file if set, else
/// `pretrain_size` instances from `data_seed`. Generation is sequential, so
/// the smaller of this and [`train_pool`] is a prefix of the other.
pub fn pretrain_pool(r: &Resolved) -> Result<Vec<Instance>> {
    let pool = match &r.train_data {
        Some(p) => read_dataset(p)?,
        None => generate(
            r.task,
            &mut ChaCha8Rng::seed_from_u64(r.data_seed),
            r.pretrain_size,
        )?,
    };
    check_task(r, &pool)?;
    Ok(pool)
}

/// Held-out prompts from `eval_data` or `eval_seed`, with any prompt that
/// also appears in the training or pretraining pool dropped.
pub fn eval_pool(r: &Resolved) -> Result<Vec<Instance>> {
    let pool = match &r.eval_data {
        Some(p) => read_dataset(p)?,
        None => generate(
            r.task,
            &mut ChaCha8Rng::seed_from_u64(r.eval_seed),
            r.eval_size,
        )?,
    };
    check_task(r, &pool)?;
    let seen: HashSet<String> = train_pool(r)?
        .iter()
        .chain(&pretrain_pool(r)?)
        .map(Instance::prompt)
        .collect();
    let held: Vec<Instance> = pool
        .into_iter()
        .filter(|i| !seen.contains(&i.prompt()))
        .collect();
    if held.is_empty() {
        return Err(Error::Input(
            "every evaluation prompt also appears in training".into(),
        ));
    }
    Ok(held)
}

fn check_task(r: &Resolved, pool: &[Instance]) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::Input("empty instance pool".into()));
    }
    if let Some(bad) = pool.iter().find(|i| i.kind() != r.task) {
        return Err(Error::Config(format!(
            "dataset holds {} instances but task = {}",
            bad.kind(),
            r.task
        )));
    }
    Ok(())
}

pub fn encode_prompt(vocab: &Vocab, inst: &Instance, max_len: usize) -> Result<Vec<TokenId>> {
    let ids = vocab.encode(&inst.prompt())?;
    if ids.is_empty() || ids.len() > max_len {
        return Err(Error::Input(format!(
            "prompt {:?} has {} tokens, limit {max_len}",
            inst.prompt(),
            ids.len()
        )));
    }
    Ok(ids)
}

/// Text followed by eos padding out to exactly `len` tokens.
pub fn encode_completion(vocab: &Vocab, text: &str, len: usize) -> Result<Vec<TokenId>> {
    let mut ids = vocab.encode(text)?;
    if ids.len() >= len {
        return Err(Error::Input(format!(
            "completion {text:?} needs {} tokens plus eos, limit {len}",
            ids.len()
        )));
    }
    ids.resize(len, vocab.eos_id);
    Ok(ids)
}

/// Tokens before the first eos.
pub fn completion_len(tokens: &[TokenId], eos: TokenId) -> usize {
    tokens
        .iter()
        .position(|&t| t == eos)
        .unwrap_or(tokens.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::RunConfig;

    #[test]
    fn completion_padding() {
        let v = Vocab::char_level();
        let ids = encode_completion(&v, "1+2", 6).unwrap();
        assert_eq!(ids.len(), 6);
        assert_eq!(completion_len(&ids, v.eos_id), 3);
        assert_eq!(v.decode(&ids), "1+2");
        assert!(encode_completion(&v, "123456", 6).is_err());
    }

    #[test]
    fn pools_are_seeded_and_disjoint() {
        let mut c = RunConfig::default();
        c.apply_override("train_size=40").unwrap();
        c.apply_override("eval_size=40").unwrap();
        let r = c.resolve().unwrap();
        let a = train_pool(&r).unwrap();
        assert_eq!(a, train_pool(&r).unwrap());
        let train: HashSet<String> = a.iter().map(Instance::prompt).collect();
        let eval = eval_pool(&r).unwrap();
        assert!(eval.iter().all(|i| !train.contains(&i.prompt())));
    }

    #[test]
    fn train_pool_prefixes_pretrain_pool() {
        let mut c = RunConfig::default();
        c.apply_override("train_size=4").unwrap();
        c.apply_override("pretrain_size=64").unwrap();
        let r = c.resolve().unwrap();
        let pre = pretrain_pool(&r).unwrap();
        assert_eq!(pre.len(), 64);
        assert_eq!(train_pool(&r).unwrap()[..], pre[..4]);
    }
}
