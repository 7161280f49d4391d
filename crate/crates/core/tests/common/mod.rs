//! Shared fixtures for the integration tests: a three-token toy context and
//! dense reference implementations used as oracles.

#![allow(dead_code)]

use jointgrpo::grpo::GroupRollout;
use jointgrpo::math::Rng;
use jointgrpo::policy::{ContextBuilder, LinearSoftmaxPolicy, PolicyKind, SparseFeatures};

pub const TOY_VOCAB: usize = 3;
pub const TOY_END: usize = 2;
pub const TOY_DIM: usize = 6;

/// Bias, start flag, previous-token one-hot and a position ramp. The end
/// token is allowed at every step, so trajectories have 1..=max_len tokens.
#[derive(Clone, Debug)]
pub struct ToyContext {
    pub max_len: usize,
    /// Added to the bias feature, so different contexts give different
    /// distributions.
    pub shift: f64,
}

impl ToyContext {
    pub fn new(max_len: usize) -> Self {
        ToyContext { max_len, shift: 0.0 }
    }
}

impl ContextBuilder for ToyContext {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Caption
    }
    fn feature_dim(&self) -> usize {
        TOY_DIM
    }
    fn vocab_size(&self) -> usize {
        TOY_VOCAB
    }
    fn end_token(&self) -> usize {
        TOY_END
    }
    fn max_len(&self) -> usize {
        self.max_len
    }
    fn features(&self, prefix: &[usize]) -> SparseFeatures {
        let mut entries = vec![(0, 1.0 + self.shift)];
        match prefix.last() {
            None => entries.push((1, 1.0)),
            Some(&p) => entries.push((2 + p, 1.0)),
        }
        entries.push((5, 0.5 * prefix.len() as f64));
        SparseFeatures { dim: TOY_DIM, entries }
    }
}

pub fn toy_policy(scale: f64, rng: &mut Rng) -> LinearSoftmaxPolicy {
    LinearSoftmaxPolicy::random(PolicyKind::Caption, TOY_DIM, TOY_VOCAB, scale, rng)
}

/// Dense `log softmax(xᵀW)` computed without the library's helpers.
pub fn dense_log_probs(w: &[f64], vocab: usize, x: &SparseFeatures) -> Vec<f64> {
    let dense = x.to_dense();
    let z: Vec<f64> = (0..vocab)
        .map(|k| dense.iter().enumerate().map(|(i, xi)| xi * w[i * vocab + k]).sum())
        .collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Teacher-forced log-probabilities of `tokens` (toy context has no mask).
pub fn dense_traj_log_probs(w: &[f64], ctx: &dyn ContextBuilder, tokens: &[usize]) -> Vec<f64> {
    (0..tokens.len())
        .map(|t| dense_log_probs(w, ctx.vocab_size(), &ctx.features(&tokens[..t]))[tokens[t]])
        .collect()
}

/// Term-by-term evaluation of the clipped surrogate with the k3 penalty.
pub fn brute_objective(
    w: &[f64],
    w_ref: &[f64],
    group: &GroupRollout,
    ctx: &dyn ContextBuilder,
    eps: f64,
    beta: f64,
) -> f64 {
    let g = group.trajectories.len() as f64;
    let mut total = 0.0;
    for (i, traj) in group.trajectories.iter().enumerate() {
        let lp = dense_traj_log_probs(w, ctx, &traj.tokens);
        let lref = dense_traj_log_probs(w_ref, ctx, &traj.tokens);
        let a = group.advantages[i];
        let mut s = 0.0;
        for t in 0..traj.tokens.len() {
            let r = (lp[t] - group.old_log_probs[i][t]).exp();
            let clipped = r.max(1.0 - eps).min(1.0 + eps);
            let surrogate = if r * a < clipped * a { r * a } else { clipped * a };
            let rho = (lref[t] - lp[t]).exp();
            s += surrogate - beta * (rho - rho.ln() - 1.0);
        }
        total += s / traj.tokens.len() as f64;
    }
    total / g
}

/// Group of `g` trajectories sampled from `old` with the given rewards.
pub fn toy_group(old: &LinearSoftmaxPolicy, ctx: &ToyContext, g: usize, rewards: &[f64], rng: &Rng) -> GroupRollout {
    let mut group = jointgrpo::grpo::rollout_group(old, ctx, g, rng, "toy").expect("sampling");
    group.set_rewards(rewards.to_vec(), 1e-8).expect("rewards");
    group
}

/// Central finite differences of `f` over every coordinate of `theta`.
pub fn central_diff(theta: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = theta.to_vec();
    (0..theta.len())
        .map(|k| {
            x[k] = theta[k] + h;
            let up = f(&x);
            x[k] = theta[k] - h;
            let down = f(&x);
            x[k] = theta[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn with_params(p: &LinearSoftmaxPolicy, theta: &[f64]) -> LinearSoftmaxPolicy {
    let mut q = p.clone();
    q.params_mut().copy_from_slice(theta);
    q
}

/// Largest `|a − b|` relative to the largest `|b|` (floored at `floor`).
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let scale = b.iter().fold(floor, |m, x| m.max(x.abs()));
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Longest common subsequence by trying every subset of `a`, largest first.
pub fn brute_lcs(a: &[usize], b: &[usize]) -> usize {
    let n = a.len();
    let mut best = 0;
    for mask in 0u32..(1 << n) {
        let k = mask.count_ones() as usize;
        if k <= best {
            continue;
        }
        let sub: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
        let mut it = b.iter();
        if sub.iter().all(|x| it.any(|y| y == x)) {
            best = k;
        }
    }
    best
}

/// Clipped n-gram matches by enumerating every n-gram over `alphabet`.
pub fn brute_clipped(cand: &[usize], reference: &[usize], n: usize, alphabet: usize) -> (usize, usize) {
    let count = |s: &[usize], g: &[usize]| {
        if s.len() < n {
            0
        } else {
            (0..=s.len() - n).filter(|&i| &s[i..i + n] == g).count()
        }
    };
    let mut matched = 0;
    let mut gram = vec![0; n];
    for code in 0..alphabet.pow(n as u32) {
        let mut c = code;
        for slot in gram.iter_mut() {
            *slot = c % alphabet;
            c /= alphabet;
        }
        matched += count(cand, &gram).min(count(reference, &gram));
    }
    let total = if cand.len() >= n { cand.len() - n + 1 } else { 0 };
    (matched, total)
}

/// BLEU from clipped counts as a product of precisions.
pub fn bleu_from_counts(counts: &[(usize, usize)], cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        return 0.0;
    }
    let mut prod = 1.0;
    for &(m, t) in counts {
        if m == 0 || t == 0 {
            return 0.0;
        }
        prod *= m as f64 / t as f64;
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * prod.powf(1.0 / counts.len() as f64)
}

/// Every sequence over `alphabet` of length exactly `len`.
pub fn sequences(alphabet: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|s| {
                (0..alphabet).map(move |x| {
                    let mut t = s.clone();
                    t.push(x);
                    t
                })
            })
            .collect();
    }
    out
}
