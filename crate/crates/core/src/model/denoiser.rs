//! Toy text-conditioned noise predictor.
//!
//! The latent grid `H×W×C` is flattened into `H·W` tokens of width
//! `model_dim`. Each block applies self-attention, cross-attention over the
//! text features and a GELU feed-forward, all pre-normalized with residual
//! connections. There are no convolutions; every block works at the single
//! latent resolution, so cross-attention maps reshape losslessly to `H×W`.

use tokensplit_tensor::{Real, Tape, Tensor, Var};

use crate::adapters::{AdapterHook, Target};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::schedule::NoiseSchedule;
use crate::params::{BoundParams, ParamSet};
use crate::rng::SplitMix64;
use crate::text::{EncodedPrompt, TextEmbedder, Vocabulary};

/// Per-call modifications to cross-attention.
#[derive(Debug, Clone, Default)]
pub struct Hooks<T> {
    /// Adapter deltas injected into value (and, for ablations, key) rows.
    pub adapters: Option<AdapterHook<T>>,
    /// Additive `(H·W × n)` offset on pre-softmax cross-attention logits,
    /// applied in every block and head.
    pub logit_offset: Option<Var>,
}

impl<T> Hooks<T> {
    pub fn none() -> Self {
        Hooks {
            adapters: None,
            logit_offset: None,
        }
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// Noise prediction, shape `[H, W, C]`.
    pub eps: Var,
    /// Post-softmax cross-attention maps `[block][head]`, each `(H·W × n)`.
    pub cross_maps: Vec<Vec<Var>>,
    /// Residual stream entering each cross-attention sublayer.
    pub cross_inputs: Vec<Var>,
}

/// Materialized forward result.
#[derive(Debug, Clone)]
pub struct Prediction<T> {
    pub eps: Tensor<T>,
    pub cross_maps: Vec<Vec<Tensor<T>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel<T> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamSet<T>,
    pub schedule: NoiseSchedule,
}

fn normal<T: Real>(rng: &mut SplitMix64, shape: &[usize], std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.normal() * std)).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

impl<T: Real> DenoiserModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_vocab(config, Vocabulary::default(), seed)
    }

    pub fn with_vocab(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::stream(seed, 0x1417);
        let c = &config;
        let (dm, d, a, v) = (c.model_dim, c.text_dim, c.attn_dim, c.value_dim);
        let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let mut p = ParamSet::default();
        p.insert("text.embedding", normal(&mut rng, &[vocab.len(), d], 1.0));
        p.insert("in.weight", normal(&mut rng, &[c.channels, dm], lin(c.channels)));
        p.insert("in.bias", Tensor::zeros(&[dm]));
        p.insert("pos", normal(&mut rng, &[c.cells(), dm], 0.5));
        p.insert("time", normal(&mut rng, &[c.train_timesteps, dm], 0.5));
        for b in 0..c.blocks {
            for ln in ["ln1", "ln2", "ln3"] {
                p.insert(format!("b{b}.{ln}.g"), Tensor::ones(&[dm]));
                p.insert(format!("b{b}.{ln}.b"), Tensor::zeros(&[dm]));
            }
            for w in ["q", "k", "v", "o"] {
                p.insert(format!("b{b}.self.{w}"), normal(&mut rng, &[dm, dm], lin(dm)));
            }
            p.insert(format!("b{b}.cross.q"), normal(&mut rng, &[dm, a], lin(dm)));
            p.insert(format!("b{b}.cross.k"), normal(&mut rng, &[d, a], lin(d)));
            p.insert(format!("b{b}.cross.v"), normal(&mut rng, &[d, v], lin(d)));
            p.insert(format!("b{b}.cross.o"), normal(&mut rng, &[v, dm], lin(v)));
            let hidden = dm * c.ff_mult;
            p.insert(format!("b{b}.ff.w1"), normal(&mut rng, &[dm, hidden], lin(dm)));
            p.insert(format!("b{b}.ff.b1"), Tensor::zeros(&[hidden]));
            p.insert(format!("b{b}.ff.w2"), normal(&mut rng, &[hidden, dm], lin(hidden)));
            p.insert(format!("b{b}.ff.b2"), Tensor::zeros(&[dm]));
        }
        p.insert("out.ln.g", Tensor::ones(&[dm]));
        p.insert("out.ln.b", Tensor::zeros(&[dm]));
        p.insert("out.weight", normal(&mut rng, &[dm, c.channels], 0.01));
        p.insert("out.bias", Tensor::zeros(&[c.channels]));
        Ok(DenoiserModel {
            schedule: NoiseSchedule::cosine(config.train_timesteps),
            config,
            vocab,
            params: p,
        })
    }

    /// Copy with every parameter converted to `U`, e.g. an `f32` training
    /// result promoted for `f64` verification.
    pub fn cast<U: Real>(&self) -> DenoiserModel<U> {
        DenoiserModel {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.cast(),
            schedule: self.schedule.clone(),
        }
    }

    pub fn embedder(&self) -> TextEmbedder {
        TextEmbedder::new(self.vocab.clone(), self.config.max_tokens)
    }

    pub fn encode(&self, prompt: &str) -> Result<EncodedPrompt> {
        self.embedder().tokenize_str(prompt)
    }

    /// Text features `c = E(prompt)`, shape `(n × d)`.
    pub fn text_features(&self, prompt: &EncodedPrompt) -> Result<Tensor<T>> {
        self.embedder().features(self.params.require("text.embedding")?, prompt)
    }

    /// Text features gathered from the bound embedding table, so they carry
    /// gradients during base training.
    pub fn text_features_on(&self, tape: &mut Tape<T>, bound: &BoundParams, prompt: &EncodedPrompt) -> Result<Var> {
        Ok(tape.select_rows(bound.var("text.embedding"), &prompt.ids)?)
    }

    fn affine_ln(&self, tape: &mut Tape<T>, bound: &BoundParams, x: Var, prefix: &str) -> Result<Var> {
        let n = tape.layer_norm(x)?;
        let g = tape.broadcast_mul(n, bound.var(&format!("{prefix}.g")))?;
        Ok(tape.broadcast_add(g, bound.var(&format!("{prefix}.b")))?)
    }

    fn check_latent(&self, shape: &[usize]) -> Result<()> {
        if shape != self.config.latent_shape() {
            return Err(Error::contract(format!(
                "latent shape {shape:?} does not match model {:?}",
                self.config.latent_shape()
            )));
        }
        Ok(())
    }

    /// Noise prediction and cross-attention maps for `(z, c, t)`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        z: Var,
        c: Var,
        t: usize,
        hooks: &Hooks<T>,
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        self.check_latent(tape.value(z).shape())?;
        if t >= cfg.train_timesteps {
            return Err(Error::contract(format!(
                "timestep {t} outside schedule of {}",
                cfg.train_timesteps
            )));
        }
        let (n, d) = tape.value(c).dims2("text features")?;
        if n != cfg.max_tokens || d != cfg.text_dim {
            return Err(Error::contract(format!(
                "text features are {n}×{d}, model expects {}×{}",
                cfg.max_tokens, cfg.text_dim
            )));
        }
        if let Some(hook) = &hooks.adapters {
            hook.validate(n, cfg.blocks)?;
        }
        if let Some(off) = hooks.logit_offset {
            let shape = tape.value(off).shape();
            if shape != [cfg.cells(), n] {
                return Err(Error::contract(format!(
                    "logit offset has shape {shape:?}, expected [{}, {n}]",
                    cfg.cells()
                )));
            }
        }

        let flat = tape.reshape(z, &[cfg.cells(), cfg.channels])?;
        let x = tape.matmul(flat, bound.var("in.weight"))?;
        let x = tape.broadcast_add(x, bound.var("in.bias"))?;
        let mut x = tape.add(x, bound.var("pos"))?;
        let temb = tape.select_rows(bound.var("time"), &[t])?;
        x = tape.broadcast_add(x, temb)?;

        let mut cross_maps = Vec::with_capacity(cfg.blocks);
        let mut cross_inputs = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            // self-attention
            let h = self.affine_ln(tape, bound, x, &format!("b{b}.ln1"))?;
            let q = tape.matmul(h, bound.var(&format!("b{b}.self.q")))?;
            let k = tape.matmul(h, bound.var(&format!("b{b}.self.k")))?;
            let v = tape.matmul(h, bound.var(&format!("b{b}.self.v")))?;
            let (att, _) = attention(tape, q, k, v, cfg.heads, None)?;
            let att = tape.matmul(att, bound.var(&format!("b{b}.self.o")))?;
            x = tape.add(x, att)?;

            cross_inputs.push(x);
            let (att, maps) = self.cross_attention(tape, bound, b, x, c, hooks)?;
            x = tape.add(x, att)?;
            cross_maps.push(maps);

            // feed-forward
            let h = self.affine_ln(tape, bound, x, &format!("b{b}.ln3"))?;
            let h = tape.matmul(h, bound.var(&format!("b{b}.ff.w1")))?;
            let h = tape.broadcast_add(h, bound.var(&format!("b{b}.ff.b1")))?;
            let h = tape.gelu(h);
            let h = tape.matmul(h, bound.var(&format!("b{b}.ff.w2")))?;
            let h = tape.broadcast_add(h, bound.var(&format!("b{b}.ff.b2")))?;
            x = tape.add(x, h)?;
        }

        let h = self.affine_ln(tape, bound, x, "out.ln")?;
        let out = tape.matmul(h, bound.var("out.weight"))?;
        let out = tape.broadcast_add(out, bound.var("out.bias"))?;
        let eps = tape.reshape(out, &cfg.latent_shape())?;
        Ok(ForwardVars {
            eps,
            cross_maps,
            cross_inputs,
        })
    }

    /// Cross-attention sublayer of `block` on the residual stream `x`
    /// (`H·W × model_dim`). Returns the projected output, before the residual
    /// add, and the per-head maps.
    pub fn cross_attention(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        block: usize,
        x: Var,
        c: Var,
        hooks: &Hooks<T>,
    ) -> Result<(Var, Vec<Var>)> {
        let b = block;
        if b >= self.config.blocks {
            return Err(Error::contract(format!(
                "block {b} outside {} blocks",
                self.config.blocks
            )));
        }
        let h = self.affine_ln(tape, bound, x, &format!("b{b}.ln2"))?;
        let q = tape.matmul(h, bound.var(&format!("b{b}.cross.q")))?;
        let mut k = tape.matmul(c, bound.var(&format!("b{b}.cross.k")))?;
        let mut v = tape.matmul(c, bound.var(&format!("b{b}.cross.v")))?;
        if let Some(hook) = &hooks.adapters {
            k = hook.inject(tape, k, c, b, Target::Key)?;
            v = hook.inject(tape, v, c, b, Target::Value)?;
        }
        let (att, maps) = attention(tape, q, k, v, self.config.heads, hooks.logit_offset)?;
        let att = tape.matmul(att, bound.var(&format!("b{b}.cross.o")))?;
        Ok((att, maps))
    }

    /// Gradient-free forward on a throwaway tape.
    pub fn predict(
        &self,
        z: &Tensor<T>,
        c: &Tensor<T>,
        t: usize,
        adapters: Option<&crate::adapters::AdapterSet<'_, T>>,
        logit_offset: Option<&Tensor<T>>,
    ) -> Result<Prediction<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let cv = tape.constant(c.clone());
        let hooks = Hooks {
            adapters: adapters.map(|s| s.bind(&mut tape, false)),
            logit_offset: logit_offset.map(|o| tape.constant(o.clone())),
        };
        let out = self.forward(&mut tape, &bound, zv, cv, t, &hooks)?;
        Ok(Prediction {
            eps: tape.value(out.eps).clone(),
            cross_maps: out
                .cross_maps
                .iter()
                .map(|heads| heads.iter().map(|&m| tape.value(m).clone()).collect())
                .collect(),
        })
    }
}

/// Multi-head scaled dot-product attention; returns the concatenated head
/// outputs and the per-head post-softmax weights.
fn attention<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    logit_offset: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    let a = tape.value(q).shape()[1];
    let vd = tape.value(v).shape()[1];
    let (ha, hv) = (a / heads, vd / heads);
    let scale = T::lit(1.0 / (ha as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let qa: Vec<usize> = (h * ha..(h + 1) * ha).collect();
        let va: Vec<usize> = (h * hv..(h + 1) * hv).collect();
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.select_columns(q, &qa)?,
                tape.select_columns(k, &qa)?,
                tape.select_columns(v, &va)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let mut logits = tape.scale(logits, scale);
        if let Some(off) = logit_offset {
            logits = tape.add(logits, off)?;
        }
        let p = tape.row_softmax(logits)?;
        outs.push(tape.matmul(p, vh)?);
        maps.push(p);
    }
    let out = if heads == 1 {
        outs[0]
    } else {
        tape.concat_columns(&outs)?
    };
    Ok((out, maps))
}
