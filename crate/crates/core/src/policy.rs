//! Autoregressive linear-softmax policies.
//!
//! A policy is a weight table `W` of shape `feature_dim × vocab`. At step
//! `t` a [`ContextBuilder`] turns the emitted prefix into a feature vector
//! `x_t`, and the next token is drawn from `softmax(x_tᵀ W)` restricted to
//! the tokens the builder allows. Features are sparse, so logits and
//! gradients only touch the rows of active features.

use std::hash::{Hash, Hasher};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{argmax, log_softmax_unchecked, sample_unchecked, Mat, Rng};
use crate::vocab::{Caption, Role, Vocab, END};
use crate::world::{Frame, Question, SymbolicVideo, SLOTS};

/// Default number of trailing input frames the frame policy sees.
pub const DEFAULT_REF_FRAMES: usize = 6;
pub const CAPTION_MAX_LEN: usize = 48;
/// Five frames of four slots.
pub const FRAME_MAX_LEN: usize = 5 * SLOTS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Caption,
    Frame,
}

impl PolicyKind {
    fn code(self) -> u8 {
        match self {
            PolicyKind::Caption => 1,
            PolicyKind::Frame => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(PolicyKind::Caption),
            2 => Some(PolicyKind::Frame),
            _ => None,
        }
    }
}

/// Sparse feature vector of fixed dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseFeatures {
    pub dim: usize,
    pub entries: Vec<(usize, f64)>,
}

impl SparseFeatures {
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(i, v) in &self.entries {
            out[i] += v;
        }
        out
    }
}

/// Conditioning for one generation: features of a prefix, plus the token
/// mask, end token and length limit.
pub trait ContextBuilder: Sync {
    fn kind(&self) -> PolicyKind;
    fn feature_dim(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn end_token(&self) -> usize;
    fn max_len(&self) -> usize;
    fn features(&self, prefix: &[usize]) -> SparseFeatures;
    fn allowed(&self, _prefix: &[usize], _token: usize) -> bool {
        true
    }
}

/// Feature layout of [`CaptionContext`], as offsets into the vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CaptionLayout {
    /// Symbol bag of the input video, counts divided by frame count.
    pub video_bag: usize,
    /// One-hot of the last input frame's symbols (order-sensitive).
    pub recency: usize,
    /// Token bag of the question.
    pub question_bag: usize,
    /// Indicator of tokens already emitted.
    pub prefix_bag: usize,
    /// Previous token one-hot; the extra last slot marks "no previous".
    pub previous: usize,
    pub position: usize,
    pub bias: usize,
    pub dim: usize,
}

impl CaptionLayout {
    pub fn new(vocab: &Vocab) -> Self {
        let s = vocab.num_symbols();
        let c = vocab.caption_vocab();
        let video_bag = 0;
        let recency = video_bag + s;
        let question_bag = recency + s;
        let prefix_bag = question_bag + c;
        let previous = prefix_bag + c;
        let position = previous + c + 1;
        let bias = position + CAPTION_MAX_LEN;
        CaptionLayout {
            video_bag,
            recency,
            question_bag,
            prefix_bag,
            previous,
            position,
            bias,
            dim: bias + 1,
        }
    }
}

/// Captioner conditioning on `(v_in, Q)`.
#[derive(Clone, Debug)]
pub struct CaptionContext {
    vocab: Vocab,
    layout: CaptionLayout,
    base: Vec<(usize, f64)>,
}

impl CaptionContext {
    pub fn new(vocab: &Vocab, input_video: &SymbolicVideo, question: &Question) -> Self {
        let layout = CaptionLayout::new(vocab);
        let s = vocab.num_symbols();
        let c = vocab.caption_vocab();
        let mut dense = vec![0.0; layout.prefix_bag];
        let inv = 1.0 / input_video.len() as f64;
        for sym in input_video.symbols() {
            if sym < s {
                dense[layout.video_bag + sym] += inv;
            }
        }
        for &sym in input_video.last_frame().slots() {
            if sym < s {
                dense[layout.recency + sym] = 1.0;
            }
        }
        for &t in &question.tokens {
            if t < c {
                dense[layout.question_bag + t] += 1.0;
            }
        }
        let mut base: Vec<(usize, f64)> = dense.into_iter().enumerate().filter(|(_, v)| *v != 0.0).collect();
        base.push((layout.bias, 1.0));
        CaptionContext {
            vocab: *vocab,
            layout,
            base,
        }
    }

    pub fn layout(&self) -> CaptionLayout {
        self.layout
    }
}

impl ContextBuilder for CaptionContext {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Caption
    }

    fn feature_dim(&self) -> usize {
        self.layout.dim
    }

    fn vocab_size(&self) -> usize {
        self.vocab.caption_vocab()
    }

    fn end_token(&self) -> usize {
        END
    }

    fn max_len(&self) -> usize {
        CAPTION_MAX_LEN
    }

    fn features(&self, prefix: &[usize]) -> SparseFeatures {
        let l = &self.layout;
        let c = self.vocab.caption_vocab();
        let mut entries = self.base.clone();
        let mut seen = vec![false; c];
        for &t in prefix {
            if t < c && !seen[t] {
                seen[t] = true;
                entries.push((l.prefix_bag + t, 1.0));
            }
        }
        let prev = prefix.last().copied().filter(|&t| t < c).unwrap_or(c);
        entries.push((l.previous + prev, 1.0));
        entries.push((l.position + prefix.len().min(CAPTION_MAX_LEN - 1), 1.0));
        SparseFeatures { dim: l.dim, entries }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameLayout {
    /// Symbol counts of the caption's answer span.
    pub caption_bag: usize,
    /// Symbol bag of the reference frames, counts divided by frame count.
    pub reference_bag: usize,
    /// Previous emitted symbol; the extra last slot marks "no previous".
    pub previous: usize,
    pub position: usize,
    pub bias: usize,
    pub dim: usize,
}

impl FrameLayout {
    pub fn new(vocab: &Vocab) -> Self {
        let s = vocab.num_symbols();
        let caption_bag = 0;
        let reference_bag = caption_bag + s;
        let previous = reference_bag + s;
        let position = previous + vocab.frame_vocab() + 1;
        let bias = position + FRAME_MAX_LEN;
        FrameLayout {
            caption_bag,
            reference_bag,
            previous,
            position,
            bias,
            dim: bias + 1,
        }
    }
}

/// Frame-policy conditioning on a caption and reference frames. The caption
/// block precedes the visual block.
#[derive(Clone, Debug)]
pub struct FrameContext {
    vocab: Vocab,
    layout: FrameLayout,
    base: Vec<(usize, f64)>,
}

impl FrameContext {
    pub fn new(vocab: &Vocab, caption: &Caption, reference_frames: &[Frame]) -> Self {
        let layout = FrameLayout::new(vocab);
        let s = vocab.num_symbols();
        let mut dense = vec![0.0; layout.previous];
        for sym in caption.answer_or_all().iter().filter_map(|&t| vocab.symbol_of_token(t)) {
            dense[layout.caption_bag + sym] += 1.0;
        }
        if !reference_frames.is_empty() {
            let inv = 1.0 / reference_frames.len() as f64;
            for f in reference_frames {
                for &sym in f.slots() {
                    if sym < s {
                        dense[layout.reference_bag + sym] += inv;
                    }
                }
            }
        }
        let mut base: Vec<(usize, f64)> = dense.into_iter().enumerate().filter(|(_, v)| *v != 0.0).collect();
        base.push((layout.bias, 1.0));
        FrameContext {
            vocab: *vocab,
            layout,
            base,
        }
    }

    /// Conditions on the last `n` frames of `input_video` (all of them when
    /// the video is shorter).
    pub fn from_input(vocab: &Vocab, caption: &Caption, input_video: &SymbolicVideo, n: usize) -> Self {
        Self::new(vocab, caption, input_video.tail(n))
    }

    pub fn layout(&self) -> FrameLayout {
        self.layout
    }
}

impl ContextBuilder for FrameContext {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Frame
    }

    fn feature_dim(&self) -> usize {
        self.layout.dim
    }

    fn vocab_size(&self) -> usize {
        self.vocab.frame_vocab()
    }

    fn end_token(&self) -> usize {
        self.vocab.frame_end()
    }

    fn max_len(&self) -> usize {
        FRAME_MAX_LEN
    }

    fn features(&self, prefix: &[usize]) -> SparseFeatures {
        let l = &self.layout;
        let v = self.vocab.frame_vocab();
        let mut entries = self.base.clone();
        let prev = prefix.last().copied().filter(|&t| t < v).unwrap_or(v);
        entries.push((l.previous + prev, 1.0));
        entries.push((l.position + prefix.len().min(FRAME_MAX_LEN - 1), 1.0));
        SparseFeatures { dim: l.dim, entries }
    }

    /// Each slot accepts only symbols of its role; end of video only at a
    /// frame boundary after at least one frame.
    fn allowed(&self, prefix: &[usize], token: usize) -> bool {
        if token == self.vocab.frame_end() {
            return !prefix.is_empty() && prefix.len().is_multiple_of(SLOTS);
        }
        self.vocab
            .role_symbols(Role::ALL[prefix.len() % SLOTS])
            .contains(&token)
    }
}

/// Decodes a flattened frame trajectory (optionally end-terminated).
pub fn tokens_to_video(tokens: &[usize], vocab: &Vocab) -> Result<SymbolicVideo> {
    let body = match tokens.last() {
        Some(&t) if t == vocab.frame_end() => &tokens[..tokens.len() - 1],
        _ => tokens,
    };
    if body.len() % SLOTS != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} frame symbols is not a whole number of frames",
            body.len()
        )));
    }
    if let Some(&t) = body.iter().find(|&&t| t >= vocab.num_symbols()) {
        return Err(Error::OutOfVocab {
            token: t,
            vocab: vocab.num_symbols(),
        });
    }
    SymbolicVideo::new(body.chunks(SLOTS).map(|c| Frame(c.to_vec())).collect())
}

/// Flattened, end-terminated frame tokens of a video.
pub fn video_to_tokens(v: &SymbolicVideo, vocab: &Vocab) -> Vec<usize> {
    let mut out: Vec<usize> = v.symbols().collect();
    if out.len() < FRAME_MAX_LEN {
        out.push(vocab.frame_end());
    }
    out
}

/// Generated tokens with their log-probabilities under the sampling policy.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub tokens: Vec<usize>,
    pub log_probs: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

/// Weight table `feature_dim × vocab`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSoftmaxPolicy {
    kind: PolicyKind,
    feature_dim: usize,
    vocab: usize,
    weights: Vec<f64>,
}

const MAGIC: &[u8; 8] = b"JGRPOPOL";

impl LinearSoftmaxPolicy {
    pub fn zeros(kind: PolicyKind, feature_dim: usize, vocab: usize) -> Self {
        LinearSoftmaxPolicy {
            kind,
            feature_dim,
            vocab,
            weights: vec![0.0; feature_dim * vocab],
        }
    }

    pub fn caption(vocab: &Vocab) -> Self {
        Self::zeros(
            PolicyKind::Caption,
            CaptionLayout::new(vocab).dim,
            vocab.caption_vocab(),
        )
    }

    pub fn frame(vocab: &Vocab) -> Self {
        Self::zeros(PolicyKind::Frame, FrameLayout::new(vocab).dim, vocab.frame_vocab())
    }

    /// Small Gaussian initialization.
    pub fn random(kind: PolicyKind, feature_dim: usize, vocab: usize, scale: f64, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(kind, feature_dim, vocab);
        p.weights.iter_mut().for_each(|w| *w = scale * rng.normal());
        p
    }

    pub fn from_mat(kind: PolicyKind, m: Mat) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::NonFinite("policy weights"));
        }
        Ok(LinearSoftmaxPolicy {
            kind,
            feature_dim: m.rows(),
            vocab: m.cols(),
            weights: m.into_vec(),
        })
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn params(&self) -> &[f64] {
        &self.weights
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn to_mat(&self) -> Mat {
        Mat::from_vec(self.feature_dim, self.vocab, self.weights.clone()).expect("finite weights")
    }

    /// Frozen deep copy.
    pub fn snapshot(&self) -> Self {
        self.clone()
    }

    fn check_ctx(&self, ctx: &dyn ContextBuilder) -> Result<()> {
        if ctx.feature_dim() != self.feature_dim {
            return Err(Error::ShapeMismatch {
                expected: self.feature_dim,
                got: ctx.feature_dim(),
            });
        }
        if ctx.vocab_size() != self.vocab {
            return Err(Error::ShapeMismatch {
                expected: self.vocab,
                got: ctx.vocab_size(),
            });
        }
        Ok(())
    }

    pub fn logits(&self, x: &SparseFeatures) -> Vec<f64> {
        let mut z = vec![0.0; self.vocab];
        for &(i, v) in &x.entries {
            let row = &self.weights[i * self.vocab..(i + 1) * self.vocab];
            for (zk, wk) in z.iter_mut().zip(row) {
                *zk += v * wk;
            }
        }
        z
    }

    /// Masked next-token log-distribution (`-inf` on disallowed tokens).
    pub fn step_log_probs(&self, ctx: &dyn ContextBuilder, prefix: &[usize]) -> Result<Vec<f64>> {
        let x = ctx.features(prefix);
        let mut z = self.logits(&x);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits"));
        }
        for (k, zk) in z.iter_mut().enumerate() {
            if !ctx.allowed(prefix, k) {
                *zk = f64::NEG_INFINITY;
            }
        }
        Ok(log_softmax_unchecked(&z))
    }

    pub fn sample(&self, ctx: &dyn ContextBuilder, rng: &mut Rng) -> Result<Trajectory> {
        self.generate(ctx, |lp| {
            sample_unchecked(&lp.iter().map(|x| x.exp()).collect::<Vec<_>>(), rng)
        })
    }

    /// Argmax decoding.
    pub fn greedy(&self, ctx: &dyn ContextBuilder) -> Result<Trajectory> {
        self.generate(ctx, argmax)
    }

    fn generate(&self, ctx: &dyn ContextBuilder, mut pick: impl FnMut(&[f64]) -> usize) -> Result<Trajectory> {
        self.check_ctx(ctx)?;
        let max_len = ctx.max_len().max(1);
        let mut tokens = Vec::new();
        let mut log_probs = Vec::new();
        while tokens.len() < max_len {
            let lp = self.step_log_probs(ctx, &tokens)?;
            let k = pick(&lp);
            tokens.push(k);
            log_probs.push(lp[k]);
            if k == ctx.end_token() {
                break;
            }
        }
        Ok(Trajectory { tokens, log_probs })
    }

    /// Teacher-forced per-token log-probabilities of `tokens`.
    pub fn log_probs(&self, ctx: &dyn ContextBuilder, tokens: &[usize]) -> Result<Vec<f64>> {
        self.check_ctx(ctx)?;
        let mut out = Vec::with_capacity(tokens.len());
        for (t, &tok) in tokens.iter().enumerate() {
            if tok >= self.vocab {
                return Err(Error::OutOfVocab {
                    token: tok,
                    vocab: self.vocab,
                });
            }
            let lp = self.step_log_probs(ctx, &tokens[..t])?[tok];
            if !lp.is_finite() {
                return Err(Error::InvalidArgument(format!("token {tok} at position {t} is masked")));
            }
            out.push(lp);
        }
        Ok(out)
    }

    /// `∂ log π(o_t | prefix) / ∂W = outer(x_t, onehot(o_t) − p_t)`, dense.
    pub fn grad_log_prob(&self, ctx: &dyn ContextBuilder, tokens: &[usize], t: usize) -> Result<Vec<f64>> {
        if t >= tokens.len() {
            return Err(Error::IndexOutOfRange {
                index: t,
                len: tokens.len(),
            });
        }
        let mut g = vec![0.0; self.weights.len()];
        let lp = self.step_log_probs(ctx, &tokens[..t])?;
        let x = ctx.features(&tokens[..t]);
        self.add_score(&x, &lp, tokens[t], 1.0, &mut g);
        Ok(g)
    }

    /// `grad += coef · outer(x, onehot(token) − exp(lp))`.
    pub(crate) fn add_score(&self, x: &SparseFeatures, lp: &[f64], token: usize, coef: f64, grad: &mut [f64]) {
        let v = self.vocab;
        for &(i, xi) in &x.entries {
            let row = &mut grad[i * v..(i + 1) * v];
            let c = coef * xi;
            for (k, gk) in row.iter_mut().enumerate() {
                let p = lp[k].exp();
                *gk -= c * p;
            }
            row[token] += c;
        }
    }

    /// `grad += outer(x, d)` for an arbitrary logit-space direction `d`.
    pub(crate) fn add_logit_grad(&self, x: &SparseFeatures, d: &[f64], grad: &mut [f64]) {
        let v = self.vocab;
        for &(i, xi) in &x.entries {
            let row = &mut grad[i * v..(i + 1) * v];
            for (gk, dk) in row.iter_mut().zip(d) {
                *gk += xi * dk;
            }
        }
    }

    /// Binary checkpoint: magic, kind byte, vocab and feature dim as u64
    /// little-endian, then the row-major weights as f64 little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(25 + 8 * self.weights.len());
        out.extend_from_slice(MAGIC);
        out.push(self.kind.code());
        out.extend_from_slice(&(self.vocab as u64).to_le_bytes());
        out.extend_from_slice(&(self.feature_dim as u64).to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::InvalidArgument(format!("policy checkpoint: {m}"));
        if bytes.len() < 25 || &bytes[..8] != MAGIC {
            return Err(bad("bad header"));
        }
        let kind = PolicyKind::from_code(bytes[8]).ok_or_else(|| bad("unknown policy kind"))?;
        let u = |r: std::ops::Range<usize>| u64::from_le_bytes(bytes[r].try_into().expect("8 bytes")) as usize;
        let vocab = u(9..17);
        let dim = u(17..25);
        let n = vocab.checked_mul(dim).ok_or_else(|| bad("size overflow"))?;
        if bytes.len() != 25 + 8 * n {
            return Err(bad("length does not match header"));
        }
        let weights: Vec<f64> = bytes[25..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("policy checkpoint"));
        }
        Ok(LinearSoftmaxPolicy {
            kind,
            feature_dim: dim,
            vocab,
            weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Hash of the serialized bytes, for freeze checks and logs.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.to_bytes().hash(&mut h);
        h.finish()
    }
}
