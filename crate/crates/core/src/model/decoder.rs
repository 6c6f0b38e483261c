use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{encode_images, visual_tokens, ImagePair, ModelConfig, Stage};
use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

fn default_mlp_ratio() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

impl DecoderConfig {
    /// Reserved id that terminates every answer.
    pub fn end_token(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn validate(&self, path: &str, errs: &mut Vec<String>) {
        if self.vocab_size < 2 {
            errs.push(format!(
                "{path}.vocab_size: need at least one token besides the end token"
            ));
        }
        if self.context_length == 0 {
            errs.push(format!("{path}.context_length: must be positive"));
        }
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            errs.push(format!(
                "{path}.heads: width {} must be a positive multiple of heads {}",
                self.width, self.heads
            ));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            errs.push(format!("{path}: depth and mlp_ratio must be positive"));
        }
    }
}

/// Instruction tokens followed by the answer tokens. The answer excludes the
/// end token, which is appended as the final target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub instruction: Vec<usize>,
    pub answer: Vec<usize>,
}

impl TokenSequence {
    /// Tokens fed to the decoder after the visual tokens.
    pub fn text_len(&self) -> usize {
        self.instruction.len() + self.answer.len()
    }
}

pub fn init_decoder<R: Rng + ?Sized>(
    store: &mut ParamStore<f32>,
    rng: &mut R,
    cfg: &DecoderConfig,
) {
    let d = cfg.width;
    store.insert(
        "decoder.tok_emb",
        Tensor::randn(&[cfg.vocab_size, d], 1.0, rng),
    );
    store.insert(
        "decoder.pos",
        Tensor::randn(&[cfg.context_length, d], 0.02, rng),
    );
    for b in 0..cfg.depth {
        nn::init_transformer_block(
            store,
            rng,
            &format!("decoder.block{b}"),
            d,
            cfg.mlp_ratio,
            cfg.depth,
        );
    }
    nn::init_layer_norm(store, "decoder.ln_f", d);
    nn::init_linear(store, rng, "decoder.head", d, cfg.vocab_size, 1.0);
}

fn check_context(cfg: &DecoderConfig, needed: usize) -> Result<()> {
    if needed > cfg.context_length {
        return Err(Error::ContextOverflow {
            needed,
            context: cfg.context_length,
        });
    }
    Ok(())
}

/// Causal decoder over `[visual; embed(tokens)]`, returning the hidden states
/// of the rows listed in `rows` after the final layer norm.
pub fn decoder_hidden<T: Real>(
    g: &mut Graph<T>,
    cfg: &DecoderConfig,
    p: &ParamStore<T>,
    visual: Var,
    tokens: &[usize],
    rows: &[usize],
) -> Result<Var> {
    let n = g.shape(visual)[0];
    let len = n + tokens.len();
    check_context(cfg, len)?;
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::shape(
            "decoder",
            format!("token id {t} outside vocabulary of {}", cfg.vocab_size),
        ));
    }
    let x = if tokens.is_empty() {
        visual
    } else {
        let table = g.param(p, "decoder.tok_emb")?;
        let text = g.embedding(table, tokens)?;
        g.concat_rows(&[visual, text])?
    };
    let pos_table = g.param(p, "decoder.pos")?;
    let positions: Vec<usize> = (0..len).collect();
    let pos = g.embedding(pos_table, &positions)?;
    let mut x = g.add(x, pos)?;
    for b in 0..cfg.depth {
        x = nn::transformer_block(g, p, &format!("decoder.block{b}"), x, cfg.heads, true)?;
    }
    let picked = g.embedding(x, rows)?;
    nn::layer_norm(g, p, "decoder.ln_f", picked)
}

pub struct LossOutput {
    /// Mean cross-entropy over the answer positions.
    pub loss: Var,
    /// Logits `[S + 1, m]`, one row per predicted answer token (end included).
    pub logits: Var,
}

/// Teacher-forced loss over the answer tokens and the end token.
pub fn forward_loss<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &ParamStore<T>,
    images: &ImagePair<T>,
    seq: &TokenSequence,
    stage: Stage,
) -> Result<LossOutput> {
    let n = cfg.visual_tokens()?;
    check_context(&cfg.decoder, n + seq.text_len())?;
    let features = encode_images(g, cfg, p, images, stage)?;
    let visual = visual_tokens(g, p, features)?;
    let mut tokens = seq.instruction.clone();
    tokens.extend_from_slice(&seq.answer);
    let first = n + seq.instruction.len() - 1;
    let rows: Vec<usize> = (first..=first + seq.answer.len()).collect();
    let hidden = decoder_hidden(g, &cfg.decoder, p, visual, &tokens, &rows)?;
    let logits = nn::linear(g, p, "decoder.head", hidden)?;
    let mut targets: Vec<Option<usize>> = seq.answer.iter().map(|&t| Some(t)).collect();
    targets.push(Some(cfg.decoder.end_token()));
    let loss = g.cross_entropy(logits, &targets)?;
    Ok(LossOutput { loss, logits })
}

/// Softmax of each logit row.
pub fn answer_distributions<T: Real>(g: &Graph<T>, out: &LossOutput) -> Vec<Vec<f64>> {
    let logits = g.value(out.logits);
    logits
        .data()
        .chunks(logits.cols())
        .map(|row| {
            let mx = row
                .iter()
                .map(|v| v.as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

/// Greedy decoding until the end token, `max_steps` tokens, or a full context.
pub fn generate<T: Real>(
    cfg: &ModelConfig,
    p: &ParamStore<T>,
    images: &ImagePair<T>,
    instruction: &[usize],
    stage: Stage,
    max_steps: usize,
) -> Result<Vec<usize>> {
    let n = cfg.visual_tokens()?;
    check_context(&cfg.decoder, n + instruction.len())?;
    if max_steps == 0 {
        return Ok(Vec::new());
    }
    let visual = {
        let mut g = Graph::new();
        let f = encode_images(&mut g, cfg, p, images, stage)?;
        let v = visual_tokens(&mut g, p, f)?;
        g.value(v).clone()
    };
    let mut tokens = instruction.to_vec();
    let mut answer = Vec::new();
    while answer.len() < max_steps {
        let mut g = Graph::new();
        let v = g.constant(visual.clone())?;
        let last = n + tokens.len() - 1;
        let h = decoder_hidden(&mut g, &cfg.decoder, p, v, &tokens, &[last])?;
        let logits = nn::linear(&mut g, p, "decoder.head", h)?;
        let row = g.value(logits).data();
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if best == cfg.decoder.end_token() {
            break;
        }
        answer.push(best);
        tokens.push(best);
        if n + tokens.len() > cfg.decoder.context_length {
            break;
        }
    }
    Ok(answer)
}
