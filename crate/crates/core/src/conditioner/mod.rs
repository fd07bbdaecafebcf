//! Condition embeddings for the denoiser's cross-attention: null, fixed
//! text, learned prefix, and task + visual prompts.

mod captions;
mod text;
mod vision;

use std::fmt;
use std::str::FromStr;

use orca_tape::{Graph, Module, Param, Scalar, Tensor, Var};
use rand::Rng;

use crate::error::contract;
use crate::nn::Init;
use crate::{Error, Frame, Result};

pub use captions::{caption, caption_keys, default_caption_key, Caption};
pub use text::{TextEncoder, TextEncoderConfig, Tokenizer, BOS_ID, EOS_ID};
pub use vision::{VisionEncoder, VisionEncoderConfig};

pub const BOS_LABEL: &str = "<bos>";
pub const EOS_LABEL: &str = "<eos>";

/// Tag stored with every embedding; both text baselines share `Text`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VariantTag {
    Null,
    Text,
    Coop,
    Orca,
    TaskOnly,
    VisualOnly,
}

impl VariantTag {
    pub fn as_str(self) -> &'static str {
        match self {
            VariantTag::Null => "null",
            VariantTag::Text => "text",
            VariantTag::Coop => "coop",
            VariantTag::Orca => "orca",
            VariantTag::TaskOnly => "task_only",
            VariantTag::VisualOnly => "visual_only",
        }
    }
}

/// Conditioner selected by `condition.variant`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionVariant {
    Null,
    TextSimple,
    TextCaption,
    Coop,
    Orca,
    TaskOnly,
    VisualOnly,
}

impl ConditionVariant {
    pub const ALL: [ConditionVariant; 7] = [
        ConditionVariant::Null,
        ConditionVariant::TextSimple,
        ConditionVariant::TextCaption,
        ConditionVariant::Coop,
        ConditionVariant::Orca,
        ConditionVariant::TaskOnly,
        ConditionVariant::VisualOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConditionVariant::Null => "null",
            ConditionVariant::TextSimple => "text_simple",
            ConditionVariant::TextCaption => "text_caption",
            ConditionVariant::Coop => "coop",
            ConditionVariant::Orca => "orca",
            ConditionVariant::TaskOnly => "task_only",
            ConditionVariant::VisualOnly => "visual_only",
        }
    }

    pub fn tag(self) -> VariantTag {
        match self {
            ConditionVariant::Null => VariantTag::Null,
            ConditionVariant::TextSimple | ConditionVariant::TextCaption => VariantTag::Text,
            ConditionVariant::Coop => VariantTag::Coop,
            ConditionVariant::Orca => VariantTag::Orca,
            ConditionVariant::TaskOnly => VariantTag::TaskOnly,
            ConditionVariant::VisualOnly => VariantTag::VisualOnly,
        }
    }

    /// Prompt lengths actually used by this variant, given the configured
    /// `(l_t, l_v)`.
    pub fn prompt_lengths(self, l_t: usize, l_v: usize) -> (usize, usize) {
        match self {
            ConditionVariant::Orca => (l_t, l_v),
            ConditionVariant::TaskOnly => (l_t, 0),
            ConditionVariant::VisualOnly => (0, l_v),
            ConditionVariant::Coop => (l_t, 0),
            _ => (0, 0),
        }
    }

    /// Whether the condition differs from frame to frame.
    pub fn is_framewise(self) -> bool {
        matches!(self, ConditionVariant::Orca | ConditionVariant::VisualOnly)
    }

    /// Whether the condition has trainable parameters.
    pub fn is_learned(self) -> bool {
        matches!(self, ConditionVariant::Coop | ConditionVariant::Orca | ConditionVariant::TaskOnly | ConditionVariant::VisualOnly)
    }
}

impl fmt::Display for ConditionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown condition variant `{s}`")))
    }
}

/// Token sequence `C` handed to the denoiser, `tokens: [L, condition_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding<S> {
    pub tokens: Tensor<S>,
    pub variant_tag: VariantTag,
    pub token_labels: Vec<String>,
    /// Set when the prompt had to be cut to fit the encoder.
    pub warning: Option<String>,
}

impl<S: Scalar> ConditionEmbedding<S> {
    pub fn len(&self) -> usize {
        self.token_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_labels.is_empty()
    }
}

/// Learnable task tokens and visual-prompt projector.
///
/// The projector is a 1×1 convolution from the vision encoder's width to
/// the prompt width, applied after adaptive pooling to a `g × g` grid with
/// `g² = l_v`.
#[derive(Debug, Clone)]
pub struct PromptBank<S> {
    pub task_tokens: Param<S>,
    pub proj_weight: Param<S>,
    pub proj_bias: Param<S>,
    pub l_t: usize,
    pub l_v: usize,
}

impl<S: Scalar> PromptBank<S> {
    pub fn new<R: Rng>(rng: &mut R, l_t: usize, l_v: usize, prompt_dim: usize, vision_dim: usize) -> Result<Self> {
        grid_side(l_v)?;
        let mut init = Init::new(rng, true);
        Ok(Self {
            task_tokens: init.normal("prompt.task_tokens", &[l_t, prompt_dim], 0.02),
            proj_weight: init.normal("prompt.proj.weight", &[prompt_dim, vision_dim, 1, 1], 0.02),
            proj_bias: init.zeros("prompt.proj.bias", &[prompt_dim]),
            l_t,
            l_v,
        })
    }

    pub fn prompt_dim(&self) -> usize {
        self.proj_weight.value.shape()[0]
    }

    /// Visual tokens `[N, l_v, prompt_dim]` from dense features
    /// `[N, C_v, H_v, W_v]`.
    pub fn project_graph<'a>(&'a self, g: &mut Graph<'a, S>, dense: Var) -> Result<Var> {
        let side = grid_side(self.l_v)?;
        let s = g.shape(dense).to_vec();
        contract!(s.len() == 4, "dense features must be [N, C, H, W], got {s:?}");
        let c_v = self.proj_weight.value.shape()[1];
        contract!(s[1] == c_v, "dense features have {} channels, projector expects {c_v}", s[1]);
        let n = s[0];
        let d = self.prompt_dim();
        let pooled = g.adaptive_avg_pool(dense, side);
        let w = g.param(&self.proj_weight);
        let b = g.param(&self.proj_bias);
        let y = g.conv2d(pooled, w, 1, 0);
        let y = g.add_bcast(y, b, n, self.l_v);
        let y = g.swap12(y, [n, d, self.l_v, 1]);
        Ok(g.reshape(y, &[n, self.l_v, d]))
    }
}

impl<S: Scalar> Module<S> for PromptBank<S> {
    fn params(&self) -> Vec<&Param<S>> {
        vec![&self.task_tokens, &self.proj_weight, &self.proj_bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![&mut self.task_tokens, &mut self.proj_weight, &mut self.proj_bias]
    }
}

fn grid_side(l_v: usize) -> Result<usize> {
    let side = (l_v as f64).sqrt().round() as usize;
    if side * side != l_v {
        return Err(Error::Config(format!("l_v = {l_v} is not a perfect square")));
    }
    Ok(side)
}

/// Pools `dense: [C_v, H_v, W_v]` to a `√l_v` grid and applies the 1×1
/// projector, giving `[l_v, prompt_dim]` tokens in row-major grid order.
pub fn project_visual<S: Scalar>(dense: &Tensor<S>, bank: &PromptBank<S>) -> Result<Tensor<S>> {
    let s = dense.shape();
    contract!(s.len() == 3, "dense map must be [C, H, W], got {s:?}");
    let mut g = Graph::new();
    let x = g.constant(dense.clone().reshape(&[1, s[0], s[1], s[2]]));
    let y = bank.project_graph(&mut g, x)?;
    let t = g.value(y);
    Ok(t.clone().reshape(&t.shape()[1..]))
}

/// One stretch of the encoder's input sequence.
#[derive(Debug, Clone, PartialEq)]
enum Segment {
    Words(Vec<u32>),
    Task,
    Visual,
}

/// Input sequence recipe: `<bos>`, segments, `<eos>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    segments: Vec<Segment>,
    pub labels: Vec<String>,
    pub tag: VariantTag,
    pub warning: Option<String>,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn uses_visual(&self) -> bool {
        self.segments.contains(&Segment::Visual)
    }
}

/// The frozen text and vision encoders plus the tokenizer.
#[derive(Debug, Clone)]
pub struct Conditioner<S> {
    pub text: TextEncoder<S>,
    pub vision: VisionEncoder<S>,
}

impl<S: Scalar> Conditioner<S> {
    pub fn new(text: &TextEncoderConfig, vision: &VisionEncoderConfig) -> Self {
        Self { text: TextEncoder::new(text), vision: VisionEncoder::new(vision) }
    }

    pub fn prompt_dim(&self) -> usize {
        self.text.width()
    }

    pub fn vision_dim(&self) -> usize {
        self.vision.width()
    }

    pub fn new_bank<R: Rng>(&self, rng: &mut R, l_t: usize, l_v: usize) -> Result<PromptBank<S>> {
        PromptBank::new(rng, l_t, l_v, self.prompt_dim(), self.vision_dim())
    }

    fn words(&self, text: &str, budget: usize) -> (Vec<u32>, Vec<String>, Option<String>) {
        let mut toks = self.text.tokenizer.encode(text);
        let mut warning = None;
        if toks.len() > budget {
            warning = Some(format!("prompt truncated from {} to {budget} words", toks.len()));
            toks.truncate(budget);
        }
        let (ids, labels) = toks.into_iter().unzip();
        (ids, labels, warning)
    }

    fn layout(&self, segments: Vec<Segment>, mut labels: Vec<String>, tag: VariantTag, warning: Option<String>) -> Layout {
        labels.insert(0, BOS_LABEL.to_string());
        labels.push(EOS_LABEL.to_string());
        Layout { segments, labels, tag, warning }
    }

    pub fn null_layout(&self) -> Layout {
        self.layout(Vec::new(), Vec::new(), VariantTag::Null, None)
    }

    pub fn text_layout(&self, prompt: &str) -> Layout {
        let (ids, labels, warning) = self.words(prompt, self.text.max_len() - 2);
        if ids.is_empty() {
            return self.null_layout();
        }
        self.layout(vec![Segment::Words(ids)], labels, VariantTag::Text, warning)
    }

    pub fn coop_layout(&self, prefix_len: usize, class_text: &str) -> Result<Layout> {
        let max = self.text.max_len();
        if prefix_len + 2 > max {
            return Err(Error::Config(format!("prefix of {prefix_len} tokens does not fit in {max}")));
        }
        let (ids, words, warning) = self.words(class_text, max - 2 - prefix_len);
        let mut labels: Vec<String> = (0..prefix_len).map(|i| format!("ctx_{i}")).collect();
        labels.extend(words);
        Ok(self.layout(vec![Segment::Task, Segment::Words(ids)], labels, VariantTag::Coop, warning))
    }

    pub fn prompt_layout(&self, l_t: usize, l_v: usize) -> Result<Layout> {
        let max = self.text.max_len();
        if l_t + l_v + 2 > max {
            return Err(Error::Config(format!("l_t + l_v + 2 = {} exceeds the condition limit {max}", l_t + l_v + 2)));
        }
        if l_t + l_v == 0 {
            return Err(Error::Config("prompt condition needs l_t + l_v >= 1".into()));
        }
        let tag = match (l_t, l_v) {
            (_, 0) => VariantTag::TaskOnly,
            (0, _) => VariantTag::VisualOnly,
            _ => VariantTag::Orca,
        };
        let mut labels: Vec<String> = (0..l_t).map(|i| format!("task_{i}")).collect();
        labels.extend((0..l_v).map(|i| format!("vis_{i}")));
        let mut segments = Vec::new();
        if l_t > 0 {
            segments.push(Segment::Task);
        }
        if l_v > 0 {
            segments.push(Segment::Visual);
        }
        Ok(self.layout(segments, labels, tag, None))
    }

    /// Layout for a configured variant.
    pub fn variant_layout(&self, variant: ConditionVariant, l_t: usize, l_v: usize, captions: &Caption) -> Result<Layout> {
        match variant {
            ConditionVariant::Null => Ok(self.null_layout()),
            ConditionVariant::TextSimple => Ok(self.text_layout(&captions.simple)),
            ConditionVariant::TextCaption => Ok(self.text_layout(&captions.caption)),
            ConditionVariant::Coop => self.coop_layout(l_t, &captions.simple),
            _ => {
                let (t, v) = variant.prompt_lengths(l_t, l_v);
                self.prompt_layout(t, v)
            }
        }
    }

    /// Encodes a batch of `n` conditions following `layout`. `dense` holds
    /// the vision features `[n, C_v, H_v, W_v]` and is required when the
    /// layout has visual tokens. Returns `[n, L, prompt_dim]`.
    pub fn encode_graph<'a>(
        &'a self,
        g: &mut Graph<'a, S>,
        layout: &Layout,
        bank: Option<&'a PromptBank<S>>,
        dense: Option<Var>,
        n: usize,
    ) -> Result<Var> {
        let d = self.prompt_dim();
        let rows = |g: &mut Graph<'a, S>, ids: &[u32]| {
            let t = self.text.lookup(ids);
            let k = ids.len();
            let tiled: Vec<S> = (0..n).flat_map(|_| t.data().iter().copied()).collect();
            g.constant(Tensor::from_vec(&[n, k, d], tiled))
        };
        let mut parts = vec![rows(g, &[BOS_ID])];
        for seg in &layout.segments {
            match seg {
                Segment::Words(ids) if !ids.is_empty() => parts.push(rows(g, ids)),
                Segment::Words(_) => {}
                Segment::Task => {
                    let bank = bank.ok_or_else(|| Error::Config("layout needs a prompt bank".into()))?;
                    let lt = bank.task_tokens.value.shape()[0];
                    let z = g.constant(Tensor::zeros(&[n, lt, d]));
                    let p = g.param(&bank.task_tokens);
                    parts.push(g.add_bcast(z, p, n, 1));
                }
                Segment::Visual => {
                    let bank = bank.ok_or_else(|| Error::Config("layout needs a prompt bank".into()))?;
                    let visual = layout.labels.iter().filter(|l| l.starts_with("vis_")).count();
                    contract!(visual == bank.l_v, "layout has {visual} visual tokens, bank has l_v = {}", bank.l_v);
                    let dense = dense.ok_or_else(|| Error::Config("visual tokens need dense vision features".into()))?;
                    contract!(g.shape(dense)[0] == n, "dense batch {} differs from {n}", g.shape(dense)[0]);
                    parts.push(bank.project_graph(g, dense)?);
                }
            }
        }
        parts.push(rows(g, &[EOS_ID]));
        let x = g.concat(&parts, 1);
        let l = g.shape(x)[1];
        contract!(l == layout.len(), "sequence has {l} tokens, layout labels {}", layout.len());
        Ok(self.text.forward(g, x))
    }

    /// Single-condition convenience around [`Conditioner::encode_graph`].
    pub fn encode(&self, layout: &Layout, bank: Option<&PromptBank<S>>, frame: Option<&Frame>) -> Result<ConditionEmbedding<S>> {
        let mut g = Graph::new();
        let dense = match (layout.uses_visual(), frame) {
            (true, Some(f)) => {
                let x = g.constant(Frame::batch(&[f]));
                Some(self.vision.forward(&mut g, x))
            }
            (true, None) => return Err(Error::Config("visual tokens need a frame".into())),
            (false, _) => None,
        };
        let y = self.encode_graph(&mut g, layout, bank, dense, 1)?;
        let t = g.value(y);
        Ok(ConditionEmbedding {
            tokens: t.clone().reshape(&t.shape()[1..]),
            variant_tag: layout.tag,
            token_labels: layout.labels.clone(),
            warning: layout.warning.clone(),
        })
    }

    /// Empty prompt: `<bos>`, `<eos>`.
    pub fn encode_null(&self) -> Result<ConditionEmbedding<S>> {
        self.encode(&self.null_layout(), None, None)
    }

    pub fn encode_text(&self, prompt: &str) -> Result<ConditionEmbedding<S>> {
        self.encode(&self.text_layout(prompt), None, None)
    }

    /// Learned prefix (the bank's task tokens) followed by the class words.
    pub fn encode_coop(&self, bank: &PromptBank<S>, class_text: &str) -> Result<ConditionEmbedding<S>> {
        let layout = self.coop_layout(bank.l_t, class_text)?;
        self.encode(&layout, Some(bank), None)
    }

    /// Task tokens and this frame's visual tokens.
    pub fn encode_orca(&self, bank: &PromptBank<S>, frame: &Frame) -> Result<ConditionEmbedding<S>> {
        let layout = self.prompt_layout(bank.l_t, bank.l_v)?;
        self.encode(&layout, Some(bank), Some(frame))
    }
}

impl<S: Scalar> Default for Conditioner<S> {
    fn default() -> Self {
        Self::new(&TextEncoderConfig::default(), &VisionEncoderConfig::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Conditioner<f64>, PromptBank<f64>) {
        let c = Conditioner::default();
        let bank = c.new_bank(&mut ChaCha8Rng::seed_from_u64(3), 4, 16).unwrap();
        (c, bank)
    }

    #[test]
    fn null_and_text_lengths() {
        let (c, _) = setup();
        let null = c.encode_null().unwrap();
        assert_eq!(null.token_labels, vec!["<bos>", "<eos>"]);
        assert_eq!(null.variant_tag, VariantTag::Null);
        assert_eq!(null, c.encode_null().unwrap());
        let t = c.encode_text("button press").unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t.variant_tag, VariantTag::Text);
        assert_eq!(t.tokens.shape(), &[4, 32]);
        assert_eq!(c.encode_text("").unwrap(), null);
    }

    #[test]
    fn coop_and_orca_lengths() {
        let (c, bank) = setup();
        assert_eq!(c.encode_coop(&bank, "bin picking").unwrap().len(), 8);
        let f = Frame::filled(64, 64, [10, 20, 30]);
        let o = c.encode_orca(&bank, &f).unwrap();
        assert_eq!(o.len(), 22);
        assert_eq!(o.token_labels.first().unwrap(), "<bos>");
        assert_eq!(o.token_labels.last().unwrap(), "<eos>");
        assert_eq!(o.token_labels[5], "vis_0");
    }

    #[test]
    fn overlong_prompt_is_truncated_with_warning() {
        let (c, _) = setup();
        let long = vec!["word"; 100].join(" ");
        let e = c.encode_text(&long).unwrap();
        assert_eq!(e.len(), 77);
        assert!(e.warning.is_some());
    }

    #[test]
    fn projector_contracts() {
        let (_, mut bank) = setup();
        let dense = Tensor::<f64>::full(&[32, 8, 8], 0.7);
        let toks = project_visual(&dense, &bank).unwrap();
        assert_eq!(toks.shape(), &[16, 32]);
        let first = &toks.data()[..32];
        assert!(toks.data().chunks(32).all(|r| r == first));
        bank.proj_weight.value = Tensor::zeros(bank.proj_weight.value.shape());
        bank.proj_bias.value = Tensor::from_f64(&[32], &(0..32).map(|i| i as f64).collect::<Vec<_>>());
        let toks = project_visual(&Tensor::<f64>::randn(&[32, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(0)), &bank).unwrap();
        assert!(toks.data().chunks(32).all(|r| r == bank.proj_bias.value.data()));
        assert!(matches!(PromptBank::<f64>::new(&mut ChaCha8Rng::seed_from_u64(0), 4, 15, 32, 32), Err(Error::Config(_))));
    }

    #[test]
    fn orca_length_limit() {
        let (c, _) = setup();
        assert!(matches!(c.prompt_layout(40, 36), Err(Error::Config(_))));
        assert!(c.prompt_layout(39, 36).is_ok());
        assert_eq!(c.prompt_layout(4, 0).unwrap().tag, VariantTag::TaskOnly);
        assert_eq!(c.prompt_layout(0, 16).unwrap().tag, VariantTag::VisualOnly);
    }
}
