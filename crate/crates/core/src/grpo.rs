//! Group-relative policy optimization: group rollouts, group-normalized
//! advantages, the per-token clipped surrogate with a KL penalty toward a
//! reference policy, and one analytic-gradient ascent step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{OptimizerKind, OptimizerState, Rng};
use crate::par;
use crate::policy::{ContextBuilder, LinearSoftmaxPolicy, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// Per-token `k3 = ρ − ln ρ − 1` with `ρ = π_ref / π_θ`.
    #[default]
    K3,
    /// Exact per-position `KL(π_θ(·|prefix) ‖ π_ref(·|prefix))`.
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    /// Groups whose reward std falls below this get zero advantages.
    pub std_eps: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub kl_mode: KlMode,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            clip_eps: 1e-3,
            kl_beta: 0.004,
            std_eps: 1e-8,
            learning_rate: 0.3,
            optimizer: OptimizerKind::Plain,
            kl_mode: KlMode::K3,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config(format!(
                "group size must be >= 2, got {}",
                self.group_size
            )));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps.is_finite()) {
            return Err(Error::Config(format!("clip must be > 0, got {}", self.clip_eps)));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.kl_beta)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    pub fn optimizer_state(&self) -> Result<OptimizerState> {
        OptimizerState::new(self.optimizer, self.learning_rate)
    }
}

/// `G` trajectories for one context with rewards and advantages.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupRollout {
    pub context_id: String,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Per-token log-probs under `π_old`, the policy that sampled the group.
    pub old_log_probs: Vec<Vec<f64>>,
}

impl GroupRollout {
    /// Wraps already-sampled trajectories; their recorded log-probs become
    /// the `π_old` values.
    pub fn from_trajectories(context_id: impl Into<String>, trajectories: Vec<Trajectory>) -> Self {
        let old_log_probs = trajectories.iter().map(|t| t.log_probs.clone()).collect();
        GroupRollout {
            context_id: context_id.into(),
            trajectories,
            rewards: Vec::new(),
            advantages: Vec::new(),
            old_log_probs,
        }
    }

    pub fn group_size(&self) -> usize {
        self.trajectories.len()
    }

    pub fn set_rewards(&mut self, rewards: Vec<f64>, std_eps: f64) -> Result<()> {
        if rewards.len() != self.trajectories.len() {
            return Err(Error::ShapeMismatch {
                expected: self.trajectories.len(),
                got: rewards.len(),
            });
        }
        self.advantages = normalize_advantages(&rewards, std_eps)?;
        self.rewards = rewards;
        Ok(())
    }

    fn check(&self) -> Result<()> {
        let g = self.trajectories.len();
        if g == 0 {
            return Err(Error::Empty("group"));
        }
        for len in [self.rewards.len(), self.advantages.len(), self.old_log_probs.len()] {
            if len != g {
                return Err(Error::ShapeMismatch { expected: g, got: len });
            }
        }
        Ok(())
    }
}

/// Samples `g` trajectories; member `i` uses the child stream `rng.derive(i)`,
/// so the group is identical whether sampled sequentially or in parallel.
pub fn rollout_group(
    policy: &LinearSoftmaxPolicy,
    ctx: &dyn ContextBuilder,
    g: usize,
    rng: &Rng,
    context_id: impl Into<String>,
) -> Result<GroupRollout> {
    if g < 2 {
        return Err(Error::InvalidArgument(format!("group size must be >= 2, got {g}")));
    }
    let trajectories = par::map_range(g, |i| policy.sample(ctx, &mut rng.derive(i as u64)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(GroupRollout::from_trajectories(context_id, trajectories))
}

/// `Ã_i = (r_i − r̄) / σ_r` with the population standard deviation; all
/// zeros when `σ_r < std_eps`.
pub fn normalize_advantages(rewards: &[f64], std_eps: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("rewards"));
    }
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g;
    let std = var.sqrt();
    if std < std_eps {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Per-token `ρ − ln ρ − 1` from log-probs under the reference and the
/// current policy.
pub fn k3(ref_lp: f64, lp: f64) -> f64 {
    let log_rho = ref_lp - lp;
    log_rho.exp() - log_rho - 1.0
}

/// `min(r·A, clip(r, 1−ε, 1+ε)·A)`.
pub fn clipped_term(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// Whether the unclipped branch is the active one (and so carries gradient).
fn unclipped_active(ratio: f64, adv: f64, eps: f64) -> bool {
    (adv > 0.0 && ratio <= 1.0 + eps) || (adv < 0.0 && ratio >= 1.0 - eps)
}

fn is_clipped(ratio: f64, adv: f64, eps: f64) -> bool {
    adv != 0.0 && !unclipped_active(ratio, adv, eps)
}

/// Averages of the per-step quantities, reported with each update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub objective: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub kl: f64,
    pub grad_norm: f64,
}

struct TokenEval {
    lp: Vec<f64>,
    ref_lp: Vec<f64>,
    /// Exact per-position KL (only in exact mode).
    exact_kl: Vec<f64>,
}

fn eval_trajectory(
    policy: &LinearSoftmaxPolicy,
    reference: &LinearSoftmaxPolicy,
    ctx: &dyn ContextBuilder,
    tokens: &[usize],
    mode: KlMode,
    need_ref: bool,
) -> Result<TokenEval> {
    let mut out = TokenEval {
        lp: Vec::with_capacity(tokens.len()),
        ref_lp: Vec::with_capacity(tokens.len()),
        exact_kl: Vec::new(),
    };
    for (t, &tok) in tokens.iter().enumerate() {
        let prefix = &tokens[..t];
        let lp = policy.step_log_probs(ctx, prefix)?;
        out.lp.push(lp[tok]);
        if need_ref {
            let q = reference.step_log_probs(ctx, prefix)?;
            out.ref_lp.push(q[tok]);
            if mode == KlMode::Exact {
                out.exact_kl.push(exact_kl_terms(&lp, &q));
            }
        }
    }
    if out.lp.iter().chain(&out.ref_lp).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("token log-probability"));
    }
    Ok(out)
}

fn exact_kl_terms(lp: &[f64], lq: &[f64]) -> f64 {
    lp.iter()
        .zip(lq)
        .filter(|(a, _)| a.is_finite())
        .map(|(a, b)| a.exp() * (a - b))
        .sum()
}

fn check_inputs(group: &GroupRollout, cfg: &GrpoConfig) -> Result<()> {
    group.check()?;
    cfg.validate()
}

/// Evaluates the objective and, when `want_grad`, its gradient with
/// respect to the policy weights.
fn objective_impl(
    policy: &LinearSoftmaxPolicy,
    group: &GroupRollout,
    ctxs: &[&dyn ContextBuilder],
    reference: &LinearSoftmaxPolicy,
    cfg: &GrpoConfig,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>, StepDiagnostics)> {
    check_inputs(group, cfg)?;
    if ctxs.len() != 1 && ctxs.len() != group.group_size() {
        return Err(Error::ShapeMismatch {
            expected: group.group_size(),
            got: ctxs.len(),
        });
    }
    let need_ref = cfg.kl_beta > 0.0;
    let g = group.group_size() as f64;
    let per_traj = par::map_range(group.group_size(), |i| -> Result<(f64, Option<Vec<f64>>, [f64; 4])> {
        let traj = &group.trajectories[i];
        let ctx = if ctxs.len() == 1 { ctxs[0] } else { ctxs[i] };
        let tokens = &traj.tokens;
        let old = &group.old_log_probs[i];
        if old.len() != tokens.len() {
            return Err(Error::ShapeMismatch {
                expected: tokens.len(),
                got: old.len(),
            });
        }
        if tokens.is_empty() {
            return Err(Error::Empty("trajectory"));
        }
        let ev = eval_trajectory(policy, reference, ctx, tokens, cfg.kl_mode, need_ref)?;
        let adv = group.advantages[i];
        let inv_t = 1.0 / tokens.len() as f64;
        let scale = inv_t / g;
        let mut grad = want_grad.then(|| vec![0.0; policy.params().len()]);
        let (mut sum, mut ratio_sum, mut clipped, mut kl_sum) = (0.0, 0.0, 0.0, 0.0);
        for t in 0..tokens.len() {
            let ratio = (ev.lp[t] - old[t]).exp();
            if !ratio.is_finite() {
                return Err(Error::NonFinite("probability ratio"));
            }
            let kl = if !need_ref {
                0.0
            } else {
                match cfg.kl_mode {
                    KlMode::K3 => k3(ev.ref_lp[t], ev.lp[t]),
                    KlMode::Exact => ev.exact_kl[t],
                }
            };
            sum += clipped_term(ratio, adv, cfg.clip_eps) - cfg.kl_beta * kl;
            ratio_sum += ratio;
            kl_sum += kl;
            if is_clipped(ratio, adv, cfg.clip_eps) {
                clipped += 1.0;
            }
            if let Some(grad) = grad.as_mut() {
                let prefix = &tokens[..t];
                let x = ctx.features(prefix);
                let lp = policy.step_log_probs(ctx, prefix)?;
                let mut coef = if unclipped_active(ratio, adv, cfg.clip_eps) {
                    adv * ratio
                } else {
                    0.0
                };
                if need_ref && cfg.kl_mode == KlMode::K3 {
                    let rho = (ev.ref_lp[t] - ev.lp[t]).exp();
                    coef -= cfg.kl_beta * (1.0 - rho);
                }
                if coef != 0.0 {
                    policy.add_score(&x, &lp, tokens[t], coef * scale, grad);
                }
                if need_ref && cfg.kl_mode == KlMode::Exact {
                    let q = reference.step_log_probs(ctx, prefix)?;
                    let kl_t = ev.exact_kl[t];
                    let d: Vec<f64> = lp
                        .iter()
                        .zip(&q)
                        .map(|(&a, &b)| {
                            if a.is_finite() {
                                -cfg.kl_beta * scale * a.exp() * ((a - b) - kl_t)
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    policy.add_logit_grad(&x, &d, grad);
                }
            }
        }
        let n = tokens.len() as f64;
        Ok((sum * inv_t / g, grad, [ratio_sum, clipped, kl_sum * inv_t, n]))
    });
    let mut objective = 0.0;
    let mut grad_total = want_grad.then(|| vec![0.0; policy.params().len()]);
    let (mut ratio_sum, mut clipped, mut kl_sum, mut tokens) = (0.0, 0.0, 0.0, 0.0);
    for r in per_traj {
        let (j, grad, [rs, cl, kl, n]) = r?;
        objective += j;
        ratio_sum += rs;
        clipped += cl;
        kl_sum += kl;
        tokens += n;
        if let (Some(total), Some(grad)) = (grad_total.as_mut(), grad) {
            for (a, b) in total.iter_mut().zip(&grad) {
                *a += b;
            }
        }
    }
    let grad_norm = grad_total
        .as_ref()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>().sqrt())
        .unwrap_or(0.0);
    let diag = StepDiagnostics {
        objective,
        mean_ratio: ratio_sum / tokens,
        clip_fraction: clipped / tokens,
        kl: kl_sum / g,
        grad_norm,
    };
    Ok((objective, grad_total, diag))
}

/// `J(θ) = 1/G Σ_i 1/T_i Σ_t [min(r_t Ã_i, clip(r_t, 1−ε, 1+ε) Ã_i) − β KL_t]`.
pub fn surrogate_objective(
    policy: &LinearSoftmaxPolicy,
    group: &GroupRollout,
    ctx: &dyn ContextBuilder,
    reference: &LinearSoftmaxPolicy,
    cfg: &GrpoConfig,
) -> Result<f64> {
    objective_impl(policy, group, &[ctx], reference, cfg, false).map(|r| r.0)
}

/// Analytic gradient of [`surrogate_objective`], flattened like the weights.
pub fn surrogate_gradient(
    policy: &LinearSoftmaxPolicy,
    group: &GroupRollout,
    ctx: &dyn ContextBuilder,
    reference: &LinearSoftmaxPolicy,
    cfg: &GrpoConfig,
) -> Result<(Vec<f64>, StepDiagnostics)> {
    surrogate_gradient_multi(policy, group, &[ctx], reference, cfg)
}

/// As [`surrogate_gradient`] with one context per trajectory.
pub fn surrogate_gradient_multi(
    policy: &LinearSoftmaxPolicy,
    group: &GroupRollout,
    ctxs: &[&dyn ContextBuilder],
    reference: &LinearSoftmaxPolicy,
    cfg: &GrpoConfig,
) -> Result<(Vec<f64>, StepDiagnostics)> {
    let (_, g, d) = objective_impl(policy, group, ctxs, reference, cfg, true)?;
    Ok((g.expect("gradient requested"), d))
}

/// One ascent step on the surrogate. Diagnostics describe the objective at
/// the pre-update parameters.
pub fn grpo_step(
    policy: &mut LinearSoftmaxPolicy,
    group: &GroupRollout,
    ctx: &dyn ContextBuilder,
    reference: &LinearSoftmaxPolicy,
    cfg: &GrpoConfig,
    optimizer: &mut OptimizerState,
) -> Result<StepDiagnostics> {
    grpo_step_multi(policy, group, &[ctx], reference, cfg, optimizer)
}

/// As [`grpo_step`] with one context per trajectory (trajectories that
/// were generated under different conditioning).
pub fn grpo_step_multi(
    policy: &mut LinearSoftmaxPolicy,
    group: &GroupRollout,
    ctxs: &[&dyn ContextBuilder],
    reference: &LinearSoftmaxPolicy,
    cfg: &GrpoConfig,
    optimizer: &mut OptimizerState,
) -> Result<StepDiagnostics> {
    let (grad, diag) = surrogate_gradient_multi(policy, group, ctxs, reference, cfg)?;
    optimizer.step(policy.params_mut(), &grad)?;
    Ok(diag)
}

/// Mean per-token k3 estimate of `KL(π_θ ‖ π_ref)` along a trajectory.
pub fn kl_estimate(
    policy: &LinearSoftmaxPolicy,
    reference: &LinearSoftmaxPolicy,
    ctx: &dyn ContextBuilder,
    traj: &Trajectory,
) -> Result<f64> {
    if traj.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    let lp = policy.log_probs(ctx, &traj.tokens)?;
    let rp = reference.log_probs(ctx, &traj.tokens)?;
    let total: f64 = lp.iter().zip(&rp).map(|(&a, &b)| k3(b, a)).sum();
    if !total.is_finite() {
        return Err(Error::NonFinite("kl estimate"));
    }
    Ok(total / traj.len() as f64)
}
