//! Bidirectional transformer denoiser: maps a partially masked token
//! sequence to per-position vocabulary logits.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub init_std: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            vocab_size: 64,
            max_len: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            init_std: 0.02,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.max_len == 0 || self.n_layers == 0 {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Parameter names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".into(), vec![self.max_len, d]),
        ];
        for l in 0..self.n_layers {
            out.push((format!("blocks.{l}.ln1.g"), vec![d]));
            out.push((format!("blocks.{l}.ln1.b"), vec![d]));
            for w in ["q", "k", "v", "o"] {
                out.push((format!("blocks.{l}.attn.w{w}"), vec![d, d]));
                out.push((format!("blocks.{l}.attn.b{w}"), vec![d]));
            }
            out.push((format!("blocks.{l}.ln2.g"), vec![d]));
            out.push((format!("blocks.{l}.ln2.b"), vec![d]));
            out.push((format!("blocks.{l}.mlp.w1"), vec![d, f]));
            out.push((format!("blocks.{l}.mlp.b1"), vec![f]));
            out.push((format!("blocks.{l}.mlp.w2"), vec![f, d]));
            out.push((format!("blocks.{l}.mlp.b2"), vec![d]));
        }
        out.push(("ln_f.g".into(), vec![d]));
        out.push(("ln_f.b".into(), vec![d]));
        out.push(("head.w".into(), vec![d, v]));
        out.push(("head.b".into(), vec![v]));
        out
    }

    /// Gaussian weights with `init_std`, zero biases, unit layer-norm gains,
    /// and a zero output head so the initial policy is exactly uniform.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore<f32>> {
        self.validate()?;
        let normal = Normal::new(0.0f64, self.init_std)
            .map_err(|e| Error::Config(format!("init_std: {e}")))?;
        let mut p = ParamStore::new();
        for (name, shape) in self.layout() {
            let n: usize = shape.iter().product();
            let leaf = name.rsplit('.').next().unwrap_or("");
            let data: Vec<f32> = if name.starts_with("head.") || leaf.starts_with('b') {
                vec![0.0; n]
            } else if leaf == "g" {
                vec![1.0; n]
            } else {
                (0..n).map(|_| normal.sample(rng) as f32).collect()
            };
            p.push(name, Tensor::new(shape, data));
        }
        Ok(p)
    }

    /// Checks that `params` has exactly the layout `init_params` produces.
    pub fn check_layout<T: Real>(&self, params: &ParamStore<T>) -> Result<()> {
        let layout = self.layout();
        let ok = layout.len() == params.len()
            && layout
                .iter()
                .zip(params.iter())
                .all(|((n, s), (name, t))| n == name && s.as_slice() == t.shape());
        if ok {
            Ok(())
        } else {
            Err(Error::Input(
                "parameter layout does not match model config".into(),
            ))
        }
    }
}

fn finite_or<T: Real>(tape: &Tape<'_, T>, v: Var, layer: &str) -> Result<Var> {
    if tape.value(v).all_finite() {
        Ok(v)
    } else {
        Err(Error::numeric(layer, "non-finite activation"))
    }
}

/// Builds the forward pass on `tape` and returns the `[len, vocab]` logits.
pub fn forward_logits<T: Real>(
    tape: &mut Tape<'_, T>,
    cfg: &DenoiserConfig,
    tokens: &[u32],
) -> Result<Var> {
    let len = tokens.len();
    if len == 0 || len > cfg.max_len {
        return Err(Error::Input(format!(
            "sequence length {len} outside 1..={}",
            cfg.max_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} >= vocab size {}",
            cfg.vocab_size
        )));
    }
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..len).collect();

    let tok_emb = tape.param_named("tok_emb")?;
    let pos_emb = tape.param_named("pos_emb")?;
    let te = tape.embed(tok_emb, &ids)?;
    let pe = tape.embed(pos_emb, &positions)?;
    let mut x = tape.add(te, pe)?;
    x = finite_or(tape, x, "embedding")?;

    let dh = cfg.d_model / cfg.n_heads;
    let att_scale = T::of(1.0 / (dh as f64).sqrt());
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        let g1 = tape.param_named(&p("ln1.g"))?;
        let b1 = tape.param_named(&p("ln1.b"))?;
        let h = tape.layer_norm(x, g1, b1)?;

        let proj = |tape: &mut Tape<'_, T>, w: &str| -> Result<Var> {
            let wv = tape.param_named(&p(&format!("attn.w{w}")))?;
            let bv = tape.param_named(&p(&format!("attn.b{w}")))?;
            let y = tape.matmul(h, wv)?;
            tape.add_row(y, bv)
        };
        let q = proj(tape, "q")?;
        let k = proj(tape, "k")?;
        let v = proj(tape, "v")?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, hd * dh, dh)?;
            let kh = tape.slice_cols(k, hd * dh, dh)?;
            let vh = tape.slice_cols(v, hd * dh, dh)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, att_scale)?;
            let probs = tape.softmax(scores)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let wo = tape.param_named(&p("attn.wo"))?;
        let bo = tape.param_named(&p("attn.bo"))?;
        let o = tape.matmul(cat, wo)?;
        let o = tape.add_row(o, bo)?;
        x = tape.add(x, o)?;
        x = finite_or(tape, x, &p("attn"))?;

        let g2 = tape.param_named(&p("ln2.g"))?;
        let b2 = tape.param_named(&p("ln2.b"))?;
        let h2 = tape.layer_norm(x, g2, b2)?;
        let w1 = tape.param_named(&p("mlp.w1"))?;
        let bb1 = tape.param_named(&p("mlp.b1"))?;
        let w2 = tape.param_named(&p("mlp.w2"))?;
        let bb2 = tape.param_named(&p("mlp.b2"))?;
        let f = tape.matmul(h2, w1)?;
        let f = tape.add_row(f, bb1)?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, w2)?;
        let f = tape.add_row(f, bb2)?;
        x = tape.add(x, f)?;
        x = finite_or(tape, x, &p("mlp"))?;
    }
    let gf = tape.param_named("ln_f.g")?;
    let bf = tape.param_named("ln_f.b")?;
    let h = tape.layer_norm(x, gf, bf)?;
    let hw = tape.param_named("head.w")?;
    let hb = tape.param_named("head.b")?;
    let logits = tape.matmul(h, hw)?;
    let logits = tape.add_row(logits, hb)?;
    finite_or(tape, logits, "head")
}

/// Forward pass without keeping the tape; returns `[len, vocab]` logits.
pub fn infer_logits<T: Real>(
    params: &ParamStore<T>,
    cfg: &DenoiserConfig,
    tokens: &[u32],
) -> Result<Tensor<T>> {
    let mut tape = Tape::new(params);
    let v = forward_logits(&mut tape, cfg, tokens)?;
    Ok(tape.value(v).clone())
}

/// Overwrites every parameter (including the zero head) with N(0, std)
/// draws. Used to build random frozen models for oracle checks.
pub fn randomize<T: Real, R: Rng + ?Sized>(params: &mut ParamStore<T>, std: f64, rng: &mut R) {
    let normal = Normal::new(0.0, std).expect("positive std");
    for i in 0..params.len() {
        for x in params.tensor_mut(i).data_mut() {
            *x = T::of(normal.sample(rng));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            vocab_size: 7,
            max_len: 8,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            init_std: 0.02,
        }
    }

    #[test]
    fn zero_head_gives_uniform_distribution() {
        let cfg = tiny();
        let params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let logits = infer_logits(&params, &cfg, &[1, 2, 3]).unwrap();
        let mut lp = vec![0.0f32; cfg.vocab_size];
        for r in 0..3 {
            crate::diffcore::log_softmax_row(logits.row(r), &mut lp);
            for &x in &lp {
                assert!((x + (cfg.vocab_size as f32).ln()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let cfg = tiny();
        let mut params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        randomize(&mut params, 0.3, &mut ChaCha8Rng::seed_from_u64(2));
        let a = infer_logits(&params, &cfg, &[0, 4, 6, 1]).unwrap();
        let b = infer_logits(&params, &cfg, &[0, 4, 6, 1]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_out_of_range_tokens_and_lengths() {
        let cfg = tiny();
        let params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(
            infer_logits(&params, &cfg, &[7]),
            Err(Error::Input(_))
        ));
        assert!(infer_logits(&params, &cfg, &[0; 9]).is_err());
        assert!(infer_logits(&params, &cfg, &[]).is_err());
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let cfg = tiny();
        let mut params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let idx = params.index_of("blocks.1.mlp.b2").unwrap();
        params.tensor_mut(idx).data_mut()[0] = f32::INFINITY;
        match infer_logits(&params, &cfg, &[1, 2]) {
            Err(Error::Numeric { context, .. }) => assert_eq!(context, "blocks.1.mlp"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn layout_check_accepts_own_params() {
        let cfg = tiny();
        let params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        cfg.check_layout(&params).unwrap();
        let other = DenoiserConfig { d_ff: 8, ..tiny() };
        assert!(other.check_layout(&params).is_err());
    }
}
