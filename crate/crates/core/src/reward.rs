//! Rewards and metrics: template format check, ROUGE-L, BLEU, histogram
//! embeddings standing in for CLIP features, a Fréchet distance over
//! embedding sets, and the two stage-wise composite rewards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{dot, norm, symmetric_eigen, Mat};
use crate::vocab::{Caption, Vocab};
use crate::world::{Frame, SymbolicVideo};

/// 1 when the caption follows `[T] .. [/T] [A] .. [/A]`, else 0.
pub fn format_reward(caption: &Caption) -> f64 {
    if caption.is_well_formed() {
        1.0
    } else {
        0.0
    }
}

pub fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1.
pub fn rouge_l(candidate: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("rouge reference"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let l = lcs_len(candidate, reference) as f64;
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    if p + r == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * p * r / (p + r))
    }
}

/// ROUGE-L between the answer spans of two captions (all tokens for a
/// malformed candidate).
pub fn caption_rouge(candidate: &Caption, reference: &Caption) -> Result<f64> {
    rouge_l(candidate.answer_or_all(), reference.answer_or_all())
}

fn ngram_counts(tokens: &[usize], n: usize) -> std::collections::HashMap<&[usize], usize> {
    let mut counts = std::collections::HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and candidate n-gram total.
pub fn modified_precision_counts(candidate: &[usize], reference: &[usize], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

/// Single-reference BLEU@`max_n` with the standard brevity penalty.
/// Without smoothing any zero precision makes the score zero; with
/// smoothing, orders n >= 2 use (matches + 1) / (total + 1).
pub fn bleu_with(candidate: &[usize], reference: &[usize], max_n: usize, smoothing: bool) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("bleu reference"));
    }
    if !(1..=4).contains(&max_n) {
        return Err(Error::InvalidArgument(format!("BLEU order {max_n} not in 1..=4")));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (m, t) = modified_precision_counts(candidate, reference, n);
        let (m, t) = if smoothing && n > 1 {
            (m as f64 + 1.0, t as f64 + 1.0)
        } else {
            (m as f64, t as f64)
        };
        if m == 0.0 || t == 0.0 {
            return Ok(0.0);
        }
        log_sum += (m / t).ln();
    }
    let bp = (1.0 - reference.len() as f64 / candidate.len() as f64).min(0.0).exp();
    Ok(bp * (log_sum / max_n as f64).exp())
}

pub fn bleu(candidate: &[usize], reference: &[usize], max_n: usize) -> Result<f64> {
    bleu_with(candidate, reference, max_n, false)
}

/// L2-normalized histogram over the symbol vocabulary; zero for empty
/// content.
pub type Embedding = Vec<f64>;

fn normalize(mut v: Vec<f64>) -> Embedding {
    let n = norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

pub fn embed_symbols(symbols: impl IntoIterator<Item = usize>, vocab: &Vocab) -> Embedding {
    let mut h = vec![0.0; vocab.num_symbols()];
    for s in symbols {
        if s < h.len() {
            h[s] += 1.0;
        }
    }
    normalize(h)
}

pub fn embed_frame(frame: &Frame, vocab: &Vocab) -> Embedding {
    embed_symbols(frame.0.iter().copied(), vocab)
}

pub fn embed_frames(frames: &[Frame], vocab: &Vocab) -> Embedding {
    embed_symbols(frames.iter().flat_map(|f| f.0.iter().copied()), vocab)
}

pub fn embed_video(v: &SymbolicVideo, vocab: &Vocab) -> Embedding {
    embed_frames(v.frames(), vocab)
}

/// Answer-span tokens mapped through the token <-> symbol table.
pub fn embed_caption(c: &Caption, vocab: &Vocab) -> Embedding {
    embed_symbols(
        c.answer_or_all().iter().filter_map(|&t| vocab.symbol_of_token(t)),
        vocab,
    )
}

/// Cosine similarity, 0 when either side is the zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot(a, b) / (na * nb)).clamp(0.0, 1.0)
    }
}

/// Mean framewise cosine; the shorter video is padded with its last frame.
pub fn clip_v(a: &SymbolicVideo, b: &SymbolicVideo, vocab: &Vocab) -> f64 {
    let n = a.len().max(b.len());
    let frame = |v: &SymbolicVideo, i: usize| v.frames()[i.min(v.len() - 1)].clone();
    let total: f64 = (0..n)
        .map(|i| cosine(&embed_frame(&frame(a, i), vocab), &embed_frame(&frame(b, i), vocab)))
        .sum();
    total / n as f64
}

/// Caption-video agreement: cosine of the caption embedding with the pooled
/// video embedding.
pub fn clip_t(caption: &Caption, v: &SymbolicVideo, vocab: &Vocab) -> f64 {
    cosine(&embed_caption(caption, vocab), &embed_video(v, vocab))
}

/// Ridge added to covariances estimated from fewer than `dim + 1` samples.
pub const COV_RIDGE: f64 = 1e-6;
/// Eigenvalues of the covariance product below this are an error; those in
/// `[-PSD_TOL, 0)` are clamped to zero.
pub const PSD_TOL: f64 = 1e-8;

fn mean_cov(set: &[Embedding]) -> Result<(Vec<f64>, Mat)> {
    let n = set.len();
    if n == 0 {
        return Err(Error::Empty("embedding set"));
    }
    let d = set[0].len();
    if let Some(bad) = set.iter().find(|e| e.len() != d) {
        return Err(Error::ShapeMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    let mut mu = vec![0.0; d];
    for e in set {
        for (m, x) in mu.iter_mut().zip(e) {
            *m += x;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = Mat::zeros(d, d);
    if n > 1 {
        for e in set {
            for i in 0..d {
                let di = e[i] - mu[i];
                if di == 0.0 {
                    continue;
                }
                for j in 0..d {
                    cov[(i, j)] += di * (e[j] - mu[j]);
                }
            }
        }
        cov.scale(1.0 / (n - 1) as f64);
    }
    if n < d + 1 {
        for i in 0..d {
            cov[(i, i)] += COV_RIDGE;
        }
    }
    Ok((mu, cov))
}

fn psd_sqrt(m: &Mat) -> Result<Mat> {
    let (vals, vecs) = symmetric_eigen(m)?;
    let n = vals.len();
    let mut out = Mat::zeros(n, n);
    for (k, &l) in vals.iter().enumerate() {
        if l < -PSD_TOL {
            return Err(Error::NotPsd(l));
        }
        let s = l.max(0.0).sqrt();
        for i in 0..n {
            let vik = vecs[(i, k)] * s;
            for j in 0..n {
                out[(i, j)] += vik * vecs[(j, k)];
            }
        }
    }
    Ok(out)
}

/// `Tr((A B)^{1/2})` for PSD `A`, `B`, via the eigenvalues of the
/// similar symmetric matrix `A^{1/2} B A^{1/2}`.
pub fn trace_sqrt_product(a: &Mat, b: &Mat) -> Result<f64> {
    let sa = psd_sqrt(a)?;
    let m = sa.matmul(b)?.matmul(&sa)?;
    let (vals, _) = symmetric_eigen(&m)?;
    let mut t = 0.0;
    for l in vals {
        if l < -PSD_TOL {
            return Err(Error::NotPsd(l));
        }
        t += l.max(0.0).sqrt();
    }
    Ok(t)
}

/// Fréchet distance (squared) between Gaussian fits of two embedding sets.
pub fn frechet_proxy(set_a: &[Embedding], set_b: &[Embedding]) -> Result<f64> {
    let (mu_a, cov_a) = mean_cov(set_a)?;
    let (mu_b, cov_b) = mean_cov(set_b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::ShapeMismatch {
            expected: mu_a.len(),
            got: mu_b.len(),
        });
    }
    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y) * (x - y)).sum();
    let cross = trace_sqrt_product(&cov_a, &cov_b)?;
    Ok((mean_term + cov_a.trace() + cov_b.trace() - 2.0 * cross).max(0.0))
}

/// Upper bound of [`frechet_proxy`] for unit, non-negative embeddings:
/// `E|x|^2 = 1` per side and `mu_a . mu_b >= 0`.
pub const FRECHET_BOUND: f64 = 2.0;

pub fn normalized_frechet(d2: f64) -> f64 {
    (d2 / FRECHET_BOUND).clamp(0.0, 1.0)
}

/// Named reward components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Component {
    #[serde(rename = "r_f")]
    Format,
    #[serde(rename = "r_t1")]
    TextFidelity,
    #[serde(rename = "r_v1")]
    VideoFidelity1,
    #[serde(rename = "r_v2")]
    VideoFidelity2,
    #[serde(rename = "r_c2")]
    SemanticAlignment,
}

impl Component {
    pub const STAGE1: [Component; 3] = [Component::Format, Component::TextFidelity, Component::VideoFidelity1];
    pub const STAGE2: [Component; 2] = [Component::VideoFidelity2, Component::SemanticAlignment];

    pub fn key(self) -> &'static str {
        match self {
            Component::Format => "r_f",
            Component::TextFidelity => "r_t1",
            Component::VideoFidelity1 => "r_v1",
            Component::VideoFidelity2 => "r_v2",
            Component::SemanticAlignment => "r_c2",
        }
    }
}

/// Weighting coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub f: f64,
    pub t1: f64,
    pub v1: f64,
    pub v2: f64,
    pub c2: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            f: 1.0,
            t1: 1.0,
            v1: 1.0,
            v2: 1.0,
            c2: 1.0,
        }
    }
}

impl RewardWeights {
    pub fn get(&self, c: Component) -> f64 {
        match c {
            Component::Format => self.f,
            Component::TextFidelity => self.t1,
            Component::VideoFidelity1 => self.v1,
            Component::VideoFidelity2 => self.v2,
            Component::SemanticAlignment => self.c2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentValue {
    pub name: Component,
    pub weight: f64,
    pub value: f64,
}

/// Weighted components and their total, `Σ weight · value` summed in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub components: Vec<ComponentValue>,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn from_components(components: Vec<ComponentValue>) -> Self {
        let total = Self::weighted_sum(&components);
        RewardBreakdown { components, total }
    }

    pub fn weighted_sum(components: &[ComponentValue]) -> f64 {
        components.iter().fold(0.0, |acc, c| acc + c.weight * c.value)
    }

    pub fn get(&self, name: Component) -> Option<f64> {
        self.components.iter().find(|c| c.name == name).map(|c| c.value)
    }
}

fn build(items: &[(Component, f64)], include: &[Component], weights: &RewardWeights) -> RewardBreakdown {
    RewardBreakdown::from_components(
        items
            .iter()
            .filter(|(c, _)| include.contains(c))
            .map(|&(name, value)| ComponentValue {
                name,
                weight: weights.get(name),
                value,
            })
            .collect(),
    )
}

/// Stage-1 reward restricted to `include` (a subset of
/// [`Component::STAGE1`]).
pub fn stage1_reward_with(
    caption: &Caption,
    generated_video: &SymbolicVideo,
    gt_caption: &Caption,
    gt_video: &SymbolicVideo,
    weights: &RewardWeights,
    include: &[Component],
    vocab: &Vocab,
) -> Result<RewardBreakdown> {
    let rt1 = if include.contains(&Component::TextFidelity) {
        caption_rouge(caption, gt_caption)?
    } else {
        0.0
    };
    let rv1 = if include.contains(&Component::VideoFidelity1) {
        clip_v(generated_video, gt_video, vocab)
    } else {
        0.0
    };
    Ok(build(
        &[
            (Component::Format, format_reward(caption)),
            (Component::TextFidelity, rt1),
            (Component::VideoFidelity1, rv1),
        ],
        include,
        weights,
    ))
}

/// `λ_f r_f + λ_t1 r_t1 + λ_v1 r_v1`.
pub fn stage1_reward(
    caption: &Caption,
    generated_video: &SymbolicVideo,
    gt_caption: &Caption,
    gt_video: &SymbolicVideo,
    weights: &RewardWeights,
    vocab: &Vocab,
) -> Result<RewardBreakdown> {
    stage1_reward_with(
        caption,
        generated_video,
        gt_caption,
        gt_video,
        weights,
        &Component::STAGE1,
        vocab,
    )
}

pub fn stage2_reward_with(
    generated_video: &SymbolicVideo,
    anchor: &Caption,
    gt_video: &SymbolicVideo,
    weights: &RewardWeights,
    include: &[Component],
    vocab: &Vocab,
) -> Result<RewardBreakdown> {
    if anchor.is_empty() {
        return Err(Error::Empty("anchor caption"));
    }
    Ok(build(
        &[
            (Component::VideoFidelity2, clip_v(generated_video, gt_video, vocab)),
            (Component::SemanticAlignment, clip_t(anchor, generated_video, vocab)),
        ],
        include,
        weights,
    ))
}

/// `λ_v2 r_v2 + λ_c2 r_c2`.
pub fn stage2_reward(
    generated_video: &SymbolicVideo,
    anchor: &Caption,
    gt_video: &SymbolicVideo,
    weights: &RewardWeights,
    vocab: &Vocab,
) -> Result<RewardBreakdown> {
    stage2_reward_with(generated_video, anchor, gt_video, weights, &Component::STAGE2, vocab)
}
