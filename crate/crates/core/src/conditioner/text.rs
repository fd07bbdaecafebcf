use orca_tape::{Graph, Module, Param, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{Init, LayerNorm, TransformerBlock};

pub const BOS_ID: u32 = 0;
pub const EOS_ID: u32 = 1;

/// Whitespace tokenizer with hashed word ids. Words are lowercased and
/// stripped of surrounding punctuation; ids `0` and `1` are reserved for
/// `<bos>` and `<eos>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    pub vocab_size: u32,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self { vocab_size: 1024 }
    }
}

impl Tokenizer {
    pub fn words(text: &str) -> Vec<String> {
        text.split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
            .filter(|w| !w.is_empty())
            .collect()
    }

    pub fn id(&self, word: &str) -> u32 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in word.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        2 + (h % u64::from(self.vocab_size - 2)) as u32
    }

    /// Word ids paired with their labels, without special tokens.
    pub fn encode(&self, text: &str) -> Vec<(u32, String)> {
        Self::words(text).into_iter().map(|w| (self.id(&w), w)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderConfig {
    pub vocab_size: u32,
    pub width: usize,
    pub max_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self { vocab_size: 1024, width: 32, max_len: 77, layers: 2, heads: 2, seed: 0x7e47_0001 }
    }
}

/// Frozen causal transformer over token embeddings. Input embeddings may
/// mix looked-up word rows with learned prompt vectors; the encoder only
/// sees `[N, L, width]`.
#[derive(Debug, Clone)]
pub struct TextEncoder<S> {
    pub tokenizer: Tokenizer,
    token_emb: Param<S>,
    pos_emb: Param<S>,
    blocks: Vec<TransformerBlock<S>>,
    ln_final: LayerNorm<S>,
    max_len: usize,
}

impl<S: Scalar> TextEncoder<S> {
    pub fn new(config: &TextEncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = Init::new(&mut rng, false);
        let d = config.width;
        let token_emb = init.normal("text.token_emb", &[config.vocab_size as usize, d], 0.02);
        let pos_emb = init.normal("text.pos_emb", &[config.max_len, d], 0.02);
        let blocks =
            (0..config.layers).map(|i| TransformerBlock::new(&mut init, &format!("text.block{i}"), d, config.heads, true)).collect();
        let ln_final = LayerNorm::new(&mut init, "text.ln_final", d);
        Self {
            tokenizer: Tokenizer { vocab_size: config.vocab_size },
            token_emb,
            pos_emb,
            blocks,
            ln_final,
            max_len: config.max_len,
        }
    }

    pub fn width(&self) -> usize {
        self.token_emb.value.shape()[1]
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Input embedding rows for token ids, `[ids.len(), width]`.
    pub fn lookup(&self, ids: &[u32]) -> Tensor<S> {
        let d = self.width();
        let table = self.token_emb.value.data();
        let data = ids.iter().flat_map(|&i| table[i as usize * d..(i as usize + 1) * d].iter().copied()).collect();
        Tensor::from_vec(&[ids.len(), d], data)
    }

    /// Runs the encoder on input embeddings `x: [N, L, width]`.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, S>, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (n, l, d) = (s[0], s[1], s[2]);
        assert!(l <= self.max_len, "sequence of {l} tokens exceeds {}", self.max_len);
        let pos = Tensor::from_vec(&[l * d], self.pos_emb.value.data()[..l * d].to_vec());
        let pos = g.constant(pos);
        let mut h = g.add_bcast(x, pos, n, 1);
        for b in &self.blocks {
            h = b.forward(g, h);
        }
        self.ln_final.forward(g, h)
    }
}

impl<S: Scalar> Module<S> for TextEncoder<S> {
    fn params(&self) -> Vec<&Param<S>> {
        let mut p = vec![&self.token_emb, &self.pos_emb];
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.ln_final.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut p = vec![&mut self.token_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            p.extend(b.params_mut());
        }
        p.extend(self.ln_final.params_mut());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_words_and_ids() {
        let t = Tokenizer::default();
        assert_eq!(Tokenizer::words("  Button press. "), vec!["button", "press"]);
        assert_eq!(t.id("button"), t.id("button"));
        assert!(t.id("x") >= 2 && t.id("x") < 1024);
        assert!(t.encode("").is_empty());
    }
}
