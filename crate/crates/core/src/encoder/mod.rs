//! A small frozen transformer encoder standing in for a pretrained language
//! model. Its weights enter every tape as constants, so gradients reach the
//! appended prompt vectors but never the encoder itself.

mod lexicon;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use lexicon::{load_embedding_lexicon, Lexicon};

use crate::error::{Error, Result};
use crate::init::{checksum, normal_tensor};
use crate::numeric::{Tape, Tensor, Var};
use crate::Real;

/// Std of the scaled-normal initialisation for every weight matrix.
pub const INIT_STD: Real = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub feedforward_dim: usize,
    pub max_sequence_length: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            embedding_dim: 64,
            num_layers: 2,
            num_heads: 4,
            feedforward_dim: 128,
            max_sequence_length: 64,
            seed: 13,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.vocab_size == 0 || c.embedding_dim == 0 || c.feedforward_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if c.num_heads == 0 || !c.embedding_dim.is_multiple_of(c.num_heads) {
            return Err(Error::Config(format!(
                "embedding_dim {} not divisible by num_heads {}",
                c.embedding_dim, c.num_heads
            )));
        }
        if c.max_sequence_length == 0 {
            return Err(Error::Config("max_sequence_length must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layer {
    w_qkv: Tensor<Real>,
    b_qkv: Tensor<Real>,
    w_out: Tensor<Real>,
    b_out: Tensor<Real>,
    ln1_gain: Tensor<Real>,
    ln1_bias: Tensor<Real>,
    w_ff1: Tensor<Real>,
    b_ff1: Tensor<Real>,
    w_ff2: Tensor<Real>,
    b_ff2: Tensor<Real>,
    ln2_gain: Tensor<Real>,
    ln2_bias: Tensor<Real>,
}

impl Layer {
    fn tensors(&self) -> [&Tensor<Real>; 12] {
        [
            &self.w_qkv,
            &self.b_qkv,
            &self.w_out,
            &self.b_out,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_ff1,
            &self.b_ff1,
            &self.w_ff2,
            &self.b_ff2,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }
}

/// Deterministic, non-trainable post-LN transformer encoder.
#[derive(Clone, Debug)]
pub struct FrozenEncoder {
    config: EncoderConfig,
    token_embedding: Tensor<Real>,
    position_embedding: Tensor<Real>,
    emb_ln_gain: Tensor<Real>,
    emb_ln_bias: Tensor<Real>,
    layers: Vec<Layer>,
}

/// Tape handles for the two slices of the encoder output.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub tokens: Var,
    pub prompts: Option<Var>,
}

impl FrozenEncoder {
    /// Draws every weight matrix from N(0, 0.02²) with a ChaCha8 stream
    /// seeded by `config.seed`; layer-norm gains are 1 and all biases 0.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (e, f) = (config.embedding_dim, config.feedforward_dim);
        let token_embedding = normal_tensor(&mut rng, &[config.vocab_size, e], INIT_STD);
        let position_embedding =
            normal_tensor(&mut rng, &[config.max_sequence_length, e], INIT_STD);
        let ones = Tensor::vector(vec![1.0; e]);
        let zeros = Tensor::zeros(&[e]);
        let layers = (0..config.num_layers)
            .map(|_| Layer {
                w_qkv: normal_tensor(&mut rng, &[e, 3 * e], INIT_STD),
                b_qkv: Tensor::zeros(&[3 * e]),
                w_out: normal_tensor(&mut rng, &[e, e], INIT_STD),
                b_out: zeros.clone(),
                ln1_gain: ones.clone(),
                ln1_bias: zeros.clone(),
                w_ff1: normal_tensor(&mut rng, &[e, f], INIT_STD),
                b_ff1: Tensor::zeros(&[f]),
                w_ff2: normal_tensor(&mut rng, &[f, e], INIT_STD),
                b_ff2: zeros.clone(),
                ln2_gain: ones.clone(),
                ln2_bias: zeros.clone(),
            })
            .collect();
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            emb_ln_gain: ones,
            emb_ln_bias: zeros,
            layers,
        })
    }

    /// Like [`FrozenEncoder::new`], then overwrites the first `lexicon.len()`
    /// rows of the token embedding table with the lexicon vectors.
    pub fn with_lexicon(config: EncoderConfig, lexicon: &Lexicon) -> Result<Self> {
        let mut enc = Self::new(config)?;
        if lexicon.is_empty() {
            return Ok(enc);
        }
        if lexicon.dim() != enc.config.embedding_dim {
            return Err(Error::Config(format!(
                "lexicon dim {} differs from embedding_dim {}",
                lexicon.dim(),
                enc.config.embedding_dim
            )));
        }
        if lexicon.len() > enc.config.vocab_size {
            return Err(Error::Config(format!(
                "lexicon has {} entries but vocab_size is {}",
                lexicon.len(),
                enc.config.vocab_size
            )));
        }
        for (i, v) in lexicon.vectors().iter().enumerate() {
            enc.token_embedding.row_mut(i).copy_from_slice(v);
        }
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.embedding_dim
    }

    /// Content hash over every weight.
    pub fn checksum(&self) -> u64 {
        let mut all = vec![
            &self.token_embedding,
            &self.position_embedding,
            &self.emb_ln_gain,
            &self.emb_ln_bias,
        ];
        for layer in &self.layers {
            all.extend(layer.tensors());
        }
        checksum(all)
    }

    /// Records the encoder over `[tokens; prompts]` on `tape`. Prompts get
    /// positions `L..L+P` and attend bidirectionally with the tokens.
    pub fn encode_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a, Real>,
        tokens: &[u32],
        prompts: Option<Var>,
    ) -> Result<Encoded> {
        let e = self.dim();
        let len = tokens.len();
        let n_prompts = match prompts {
            Some(p) => {
                let shape = tape.value(p).shape();
                if shape.len() != 2 || shape[1] != e {
                    return Err(Error::Contract(format!(
                        "prompt matrix shape {shape:?}, expected [P, {e}]"
                    )));
                }
                shape[0]
            }
            None => 0,
        };
        if len == 0 {
            return Err(Error::Contract("cannot encode an empty sentence".into()));
        }
        if len + n_prompts > self.config.max_sequence_length {
            return Err(Error::Capacity(format!(
                "{len} tokens + {n_prompts} prompts exceed max_sequence_length {}",
                self.config.max_sequence_length
            )));
        }
        let mut input = Vec::with_capacity(len * e);
        for (pos, &tok) in tokens.iter().enumerate() {
            let tok = tok as usize;
            if tok >= self.config.vocab_size {
                return Err(Error::Index(format!(
                    "token id {tok} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            let emb = self.token_embedding.row(tok);
            let p = self.position_embedding.row(pos);
            input.extend(emb.iter().zip(p).map(|(a, b)| a + b));
        }
        let mut x = tape.constant_owned(Tensor::matrix(len, e, input)?);
        if let (Some(p), true) = (prompts, n_prompts > 0) {
            let pos = self.position_embedding.data()[len * e..(len + n_prompts) * e].to_vec();
            let pos = tape.constant_owned(Tensor::matrix(n_prompts, e, pos)?);
            let shifted = tape.add(p, pos)?;
            x = tape.concat_rows(x, shifted)?;
        }
        let (g, b) = (tape.constant(&self.emb_ln_gain), tape.constant(&self.emb_ln_bias));
        x = tape.layer_norm(x, g, b)?;
        for layer in &self.layers {
            x = self.layer_on_tape(tape, layer, x)?;
        }
        let token_reps = tape.slice_rows(x, 0, len)?;
        let prompt_reps = match (prompts, n_prompts) {
            (Some(_), p) if p > 0 => Some(tape.slice_rows(x, len, len + p)?),
            (Some(p), _) => Some(p),
            _ => None,
        };
        Ok(Encoded {
            tokens: token_reps,
            prompts: prompt_reps,
        })
    }

    fn layer_on_tape<'a>(&'a self, tape: &mut Tape<'a, Real>, l: &'a Layer, x: Var) -> Result<Var> {
        let w_qkv = tape.constant(&l.w_qkv);
        let b_qkv = tape.constant(&l.b_qkv);
        let qkv = tape.affine(x, w_qkv, b_qkv)?;
        let attn = tape.attention(qkv, self.config.num_heads)?;
        let w_out = tape.constant(&l.w_out);
        let b_out = tape.constant(&l.b_out);
        let proj = tape.affine(attn, w_out, b_out)?;
        let res = tape.add(x, proj)?;
        let (g1, b1) = (tape.constant(&l.ln1_gain), tape.constant(&l.ln1_bias));
        let h = tape.layer_norm(res, g1, b1)?;
        let w1 = tape.constant(&l.w_ff1);
        let bf1 = tape.constant(&l.b_ff1);
        let ff = tape.affine(h, w1, bf1)?;
        let ff = tape.gelu(ff);
        let w2 = tape.constant(&l.w_ff2);
        let bf2 = tape.constant(&l.b_ff2);
        let ff = tape.affine(ff, w2, bf2)?;
        let res = tape.add(h, ff)?;
        let (g2, b2) = (tape.constant(&l.ln2_gain), tape.constant(&l.ln2_bias));
        tape.layer_norm(res, g2, b2)
    }

    /// Forward-only encoding; returns `(token_reps L×e, prompt_reps P×e)`.
    pub fn encode(&self, tokens: &[u32], prompts: &[Vec<Real>]) -> Result<(Tensor<Real>, Tensor<Real>)> {
        let e = self.dim();
        let mut tape = Tape::new();
        let prompt_var = if prompts.is_empty() {
            None
        } else {
            Some(tape.constant_owned(Tensor::from_rows(prompts)?))
        };
        if prompts.iter().any(|p| p.len() != e) {
            return Err(Error::Contract(format!("prompt vectors must have dim {e}")));
        }
        let out = self.encode_on_tape(&mut tape, tokens, prompt_var)?;
        let token_reps = tape.value(out.tokens).clone();
        let prompt_reps = match out.prompts {
            Some(p) => tape.value(p).clone(),
            None => Tensor::zeros(&[0, e]),
        };
        Ok((token_reps, prompt_reps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 20,
            embedding_dim: 8,
            num_layers: 2,
            num_heads: 2,
            feedforward_dim: 16,
            max_sequence_length: 12,
            seed: 3,
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = FrozenEncoder::new(small()).unwrap();
        let b = FrozenEncoder::new(small()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = FrozenEncoder::new(EncoderConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn heads_must_divide_dim() {
        let cfg = EncoderConfig {
            embedding_dim: 15,
            num_heads: 4,
            ..small()
        };
        assert!(matches!(FrozenEncoder::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn empty_prompt_set_matches_bare_sentence() {
        let enc = FrozenEncoder::new(small()).unwrap();
        let (tok, prompts) = enc.encode(&[1, 5, 7], &[]).unwrap();
        assert_eq!(tok.shape(), &[3, 8]);
        assert_eq!(prompts.shape(), &[0, 8]);
        let mut tape = Tape::new();
        let out = enc.encode_on_tape(&mut tape, &[1, 5, 7], None).unwrap();
        assert_eq!(tape.value(out.tokens), &tok);
    }

    #[test]
    fn capacity_and_dim_errors() {
        let enc = FrozenEncoder::new(small()).unwrap();
        let prompts = vec![vec![0.1; 8]; 5];
        assert!(matches!(
            enc.encode(&[1; 8], &prompts),
            Err(Error::Capacity(_))
        ));
        assert!(matches!(
            enc.encode(&[1, 2], &[vec![0.0; 7]]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn prompts_change_prompt_reps() {
        let enc = FrozenEncoder::new(small()).unwrap();
        let (_, a) = enc.encode(&[1, 2, 3], &[vec![0.5; 8], vec![-0.3; 8]]).unwrap();
        let mut moved = vec![0.5; 8];
        moved[2] += 0.7;
        let (_, b) = enc.encode(&[1, 2, 3], &[moved, vec![-0.3; 8]]).unwrap();
        assert_ne!(a.row(0), b.row(0));
    }

    #[test]
    fn lexicon_seeds_token_rows() {
        let mut lex = Lexicon::new(8);
        lex.insert("a", vec![1.0; 8]).unwrap();
        let enc = FrozenEncoder::with_lexicon(small(), &lex).unwrap();
        assert_eq!(enc.token_embedding.row(0), &[1.0; 8]);
        let bad = Lexicon::new(4);
        assert!(FrozenEncoder::with_lexicon(small(), &bad).is_ok());
        let mut bad = Lexicon::new(4);
        bad.insert("b", vec![0.0; 4]).unwrap();
        assert!(FrozenEncoder::with_lexicon(small(), &bad).is_err());
    }
}
