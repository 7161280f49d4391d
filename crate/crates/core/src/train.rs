//! Training regimes: supervised warm-up, the two joint stages, the
//! all-in-one baseline, ablation variants and seed sweeps.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, write_file, MetricTable};
use crate::grpo::{grpo_step, grpo_step_multi, rollout_group, GroupRollout, GrpoConfig};
use crate::math::{OptimizerKind, OptimizerState, Rng};
use crate::par;
use crate::policy::{
    tokens_to_video, video_to_tokens, CaptionContext, ContextBuilder, FrameContext, LinearSoftmaxPolicy,
    DEFAULT_REF_FRAMES,
};
use crate::reward::{
    caption_rouge, stage1_reward_with, stage2_reward_with, Component, ComponentValue, RewardBreakdown, RewardWeights,
};
use crate::vocab::{Caption, Vocab};
use crate::world::{CorpusConfig, Episode};

/// Every scalar of a run. Unknown keys are rejected when parsing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub grpo: GrpoConfig,
    pub weights: RewardWeights,
    pub anchor_rouge_threshold: f64,
    pub anchor_max_retries: usize,
    pub sft_steps: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub sft_learning_rate: f64,
    pub sft_optimizer: OptimizerKind,
    /// SFT learning rate of the frame policy; the captioner uses
    /// `sft_learning_rate`.
    pub sft_frame_learning_rate: f64,
    pub sft_batch_size: usize,
    /// Learning rate of frame-policy updates; the captioner uses
    /// `grpo.learning_rate`.
    pub frame_learning_rate: f64,
    pub ref_frames: usize,
    /// Checkpoint / evaluation period in steps; 0 disables.
    pub eval_every: usize,
    pub symbols_per_role: usize,
    pub world_seed: u64,
    pub corpus: CorpusConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            grpo: GrpoConfig::default(),
            weights: RewardWeights::default(),
            anchor_rouge_threshold: 0.6,
            anchor_max_retries: 16,
            sft_steps: 3000,
            stage1_steps: 800,
            stage2_steps: 1000,
            sft_learning_rate: 0.002,
            sft_optimizer: OptimizerKind::Adam,
            sft_frame_learning_rate: 0.001,
            sft_batch_size: 8,
            frame_learning_rate: 0.15,
            ref_frames: DEFAULT_REF_FRAMES,
            eval_every: 0,
            symbols_per_role: 8,
            world_seed: 0,
            corpus: CorpusConfig::default(),
            train_path: None,
            eval_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.grpo.validate()?;
        if !(0.0..=1.0).contains(&self.anchor_rouge_threshold) {
            return Err(Error::Config(format!(
                "anchor threshold must lie in [0, 1], got {}",
                self.anchor_rouge_threshold
            )));
        }
        for (name, v) in [
            ("sft_steps", self.sft_steps),
            ("stage1_steps", self.stage1_steps),
            ("stage2_steps", self.stage2_steps),
            ("sft_batch_size", self.sft_batch_size),
            ("ref_frames", self.ref_frames),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        for (name, v) in [
            ("sft_learning_rate", self.sft_learning_rate),
            ("sft_frame_learning_rate", self.sft_frame_learning_rate),
            ("frame_learning_rate", self.frame_learning_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        let w = &self.weights;
        if [w.f, w.t1, w.v1, w.v2, w.c2].iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("reward weights must be finite".into()));
        }
        Vocab::new(self.symbols_per_role).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.symbols_per_role)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn frame_grpo(&self) -> GrpoConfig {
        GrpoConfig {
            learning_rate: self.frame_learning_rate,
            ..self.grpo
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sft,
    Stage1,
    Stage2,
    AllInOne,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Sft => "sft",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::AllInOne => "all_in_one",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub step: usize,
    /// Mean per-token teacher-forced log-likelihood over the batch.
    pub caption_log_likelihood: f64,
    pub frame_log_likelihood: f64,
}

/// One GRPO update. Reward components are group means; `total` is their
/// weighted sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub step: usize,
    pub components: Vec<ComponentValue>,
    pub total: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    /// Mean think-span length of the captions involved (sampled captions
    /// in stage 1, the anchor in stage 2).
    pub thinking_length: f64,
    pub answer_length: f64,
    pub video_length: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_rouge: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_fallback: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_attempts: Option<usize>,
}

impl StepRecord {
    pub fn component(&self, c: Component) -> Option<f64> {
        self.components.iter().find(|x| x.name == c).map(|x| x.value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub stage: Stage,
    pub step: usize,
    pub table: MetricTable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    Header {
        #[serde(skip_serializing_if = "Option::is_none", default)]
        variant: Option<String>,
        config: TrainConfig,
    },
    Sft(SftRecord),
    Step(StepRecord),
    Eval(EvalRecord),
}

/// Append-only run log, one JSON record per line, config header first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn new(config: &TrainConfig, variant: Option<&str>) -> Self {
        RunLog {
            records: vec![LogRecord::Header {
                variant: variant.map(str::to_string),
                config: config.clone(),
            }],
        }
    }

    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    pub fn extend(&mut self, other: RunLog) {
        self.records.extend(
            other
                .records
                .into_iter()
                .filter(|r| !matches!(r, LogRecord::Header { .. })),
        );
    }

    pub fn steps(&self, stage: Stage) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(move |r| match r {
            LogRecord::Step(s) if s.stage == stage => Some(s),
            _ => None,
        })
    }

    pub fn sft(&self) -> impl Iterator<Item = &SftRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Sft(s) => Some(s),
            _ => None,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_jsonl().as_bytes())
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: LogRecord = serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e))?;
            records.push(r);
        }
        Ok(RunLog { records })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// The captioner / frame-policy pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Policies {
    pub captioner: LinearSoftmaxPolicy,
    pub frame: LinearSoftmaxPolicy,
}

impl Policies {
    pub fn new(vocab: &Vocab) -> Self {
        Policies {
            captioner: LinearSoftmaxPolicy::caption(vocab),
            frame: LinearSoftmaxPolicy::frame(vocab),
        }
    }

    pub fn save(&self, dir: &Path, prefix: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.captioner.save(&dir.join(format!("{prefix}captioner.bin")))?;
        self.frame.save(&dir.join(format!("{prefix}frame.bin")))
    }

    pub fn load(dir: &Path, prefix: &str) -> Result<Self> {
        Ok(Policies {
            captioner: LinearSoftmaxPolicy::load(&dir.join(format!("{prefix}captioner.bin")))?,
            frame: LinearSoftmaxPolicy::load(&dir.join(format!("{prefix}frame.bin")))?,
        })
    }
}

/// Which captions condition the frame policy in stage 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorSource {
    /// Sampled from the frozen captioner with ROUGE-L rejection.
    Captioner,
    /// The ground-truth caption.
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorDraw {
    pub caption: Caption,
    pub fallback: bool,
    pub attempts: usize,
    /// ROUGE-L of the returned caption against the ground truth.
    pub rouge: f64,
}

/// Samples captions until one reaches the ROUGE-L threshold; after
/// `anchor_max_retries` rejections returns the ground-truth caption with
/// the fallback flag set. Attempt `k` draws from `rng.derive(k)`.
pub fn anchor_sample(
    captioner: &LinearSoftmaxPolicy,
    ep: &Episode,
    cfg: &TrainConfig,
    vocab: &Vocab,
    rng: &Rng,
) -> Result<AnchorDraw> {
    let ctx = CaptionContext::new(vocab, &ep.input_video, &ep.question);
    for k in 0..cfg.anchor_max_retries {
        let caption = Caption::new(captioner.sample(&ctx, &mut rng.derive(k as u64))?.tokens);
        let rouge = caption_rouge(&caption, &ep.gt_caption)?;
        if rouge >= cfg.anchor_rouge_threshold {
            return Ok(AnchorDraw {
                caption,
                fallback: false,
                attempts: k + 1,
                rouge,
            });
        }
    }
    Ok(AnchorDraw {
        caption: ep.gt_caption.clone(),
        fallback: true,
        attempts: cfg.anchor_max_retries,
        rouge: caption_rouge(&ep.gt_caption, &ep.gt_caption)?,
    })
}

/// Periodic checkpointing and held-out evaluation during training.
#[derive(Clone, Debug, Default)]
pub struct Monitor<'a> {
    pub checkpoint_dir: Option<PathBuf>,
    pub eval: Option<(&'a [Episode], &'a HashSet<String>)>,
}

const TAG_SFT: u64 = 0x5346_5400;
const TAG_STAGE1: u64 = 0x5354_4731;
const TAG_STAGE2: u64 = 0x5354_4732;
const TAG_ALL: u64 = 0x414c_4c31;

fn mean_breakdown(bs: &[RewardBreakdown]) -> (Vec<ComponentValue>, f64) {
    let n = bs.len() as f64;
    let comps: Vec<ComponentValue> = bs[0]
        .components
        .iter()
        .enumerate()
        .map(|(k, c)| ComponentValue {
            name: c.name,
            weight: c.weight,
            value: bs.iter().map(|b| b.components[k].value).sum::<f64>() / n,
        })
        .collect();
    let total = RewardBreakdown::weighted_sum(&comps);
    (comps, total)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn answer_len(c: &Caption) -> f64 {
    c.answer().map_or(0.0, |a| a.len() as f64)
}

/// Runs training regimes for one configuration.
pub struct Trainer<'a> {
    pub cfg: &'a TrainConfig,
    pub vocab: Vocab,
    pub monitor: Monitor<'a>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            cfg,
            vocab: cfg.vocab()?,
            monitor: Monitor::default(),
        })
    }

    pub fn with_monitor(mut self, monitor: Monitor<'a>) -> Self {
        self.monitor = monitor;
        self
    }

    fn after_step(&self, stage: Stage, step: usize, policies: &Policies, log: &mut RunLog) -> Result<()> {
        let every = self.cfg.eval_every;
        if every == 0 || !(step + 1).is_multiple_of(every) {
            return Ok(());
        }
        if let Some(dir) = &self.monitor.checkpoint_dir {
            policies.save(dir, &format!("{}-{:05}-", stage.name(), step + 1))?;
        }
        if let Some((eval_set, train_ids)) = self.monitor.eval {
            let table = evaluate(
                &policies.captioner,
                &policies.frame,
                eval_set,
                train_ids,
                &self.vocab,
                self.cfg.ref_frames,
            )?;
            log.push(LogRecord::Eval(EvalRecord { stage, step, table }));
        }
        Ok(())
    }

    fn pick<'d>(&self, data: &'d [Episode], rng: &Rng) -> &'d Episode {
        &data[rng.derive(0).below(data.len())]
    }

    /// Teacher-forced maximum likelihood on ground-truth captions (given
    /// `v_in`, `Q`) and ground-truth videos (given the ground-truth caption
    /// and reference frames).
    pub fn sft(&self, policies: &mut Policies, data: &[Episode], log: &mut RunLog) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let cfg = self.cfg;
        let base = Rng::new(cfg.seed).derive(TAG_SFT);
        let mut opt_c = OptimizerState::new(cfg.sft_optimizer, cfg.sft_learning_rate)?;
        let mut opt_f = OptimizerState::new(cfg.sft_optimizer, cfg.sft_frame_learning_rate)?;
        let b = cfg.sft_batch_size;
        for step in 0..cfg.sft_steps {
            let mut rng = base.derive(step as u64);
            let batch: Vec<&Episode> = (0..b).map(|_| &data[rng.below(data.len())]).collect();
            let parts = par::map(&batch, |ep| self.sft_grads(policies, ep));
            let mut gc = vec![0.0; policies.captioner.params().len()];
            let mut gf = vec![0.0; policies.frame.params().len()];
            let (mut llc, mut llf) = (0.0, 0.0);
            for p in parts {
                let (c, f, lc, lf) = p?;
                gc.iter_mut().zip(&c).for_each(|(a, x)| *a += x / b as f64);
                gf.iter_mut().zip(&f).for_each(|(a, x)| *a += x / b as f64);
                llc += lc / b as f64;
                llf += lf / b as f64;
            }
            opt_c.step(policies.captioner.params_mut(), &gc)?;
            opt_f.step(policies.frame.params_mut(), &gf)?;
            log.push(LogRecord::Sft(SftRecord {
                step,
                caption_log_likelihood: llc,
                frame_log_likelihood: llf,
            }));
            self.after_step(Stage::Sft, step, policies, log)?;
        }
        Ok(())
    }

    fn sft_grads(&self, policies: &Policies, ep: &Episode) -> Result<(Vec<f64>, Vec<f64>, f64, f64)> {
        let cctx = CaptionContext::new(&self.vocab, &ep.input_video, &ep.question);
        let fctx = FrameContext::from_input(&self.vocab, &ep.gt_caption, &ep.input_video, self.cfg.ref_frames);
        let (gc, lc) = mean_score(&policies.captioner, &cctx, ep.gt_caption.tokens())?;
        let (gf, lf) = mean_score(&policies.frame, &fctx, &video_to_tokens(&ep.gt_video, &self.vocab))?;
        Ok((gc, gf, lc, lf))
    }

    /// Optimizes the captioner with the frame policy frozen. `include`
    /// selects the stage-1 reward components.
    pub fn stage1(
        &self,
        policies: &mut Policies,
        data: &[Episode],
        include: &[Component],
        log: &mut RunLog,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let cfg = self.cfg;
        let vocab = &self.vocab;
        let reference = policies.captioner.snapshot();
        let mut opt = cfg.grpo.optimizer_state()?;
        let base = Rng::new(cfg.seed).derive(TAG_STAGE1);
        let need_video = include.contains(&Component::VideoFidelity1);
        for step in 0..cfg.stage1_steps {
            let rng = base.derive(step as u64);
            let ep = self.pick(data, &rng);
            let ctx = CaptionContext::new(vocab, &ep.input_video, &ep.question);
            let mut group = rollout_group(&policies.captioner, &ctx, cfg.grpo.group_size, &rng.derive(1), &ep.id)?;
            let captions: Vec<Caption> = group
                .trajectories
                .iter()
                .map(|t| Caption::new(t.tokens.clone()))
                .collect();
            let frame = &policies.frame;
            let scored = par::map_range(captions.len(), |i| -> Result<(RewardBreakdown, f64)> {
                let video = if need_video {
                    let fctx = FrameContext::from_input(vocab, &captions[i], &ep.input_video, cfg.ref_frames);
                    let t = frame.sample(&fctx, &mut rng.derive2(2, i as u64))?;
                    tokens_to_video(&t.tokens, vocab)?
                } else {
                    ep.gt_video.clone()
                };
                let r = stage1_reward_with(
                    &captions[i],
                    &video,
                    &ep.gt_caption,
                    &ep.gt_video,
                    &cfg.weights,
                    include,
                    vocab,
                )?;
                Ok((r, video.len() as f64))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let (breakdowns, lens): (Vec<_>, Vec<_>) = scored.into_iter().unzip();
            group.set_rewards(breakdowns.iter().map(|b| b.total).collect(), cfg.grpo.std_eps)?;
            let diag = grpo_step(&mut policies.captioner, &group, &ctx, &reference, &cfg.grpo, &mut opt)?;
            let (components, total) = mean_breakdown(&breakdowns);
            log.push(LogRecord::Step(StepRecord {
                stage: Stage::Stage1,
                step,
                components,
                total,
                kl: diag.kl,
                clip_fraction: diag.clip_fraction,
                mean_ratio: diag.mean_ratio,
                thinking_length: mean(captions.iter().map(|c| c.thinking_length() as f64)),
                answer_length: mean(captions.iter().map(answer_len)),
                video_length: if need_video { mean(lens.into_iter()) } else { 0.0 },
                anchor_rouge: None,
                anchor_fallback: None,
                anchor_attempts: None,
            }));
            self.after_step(Stage::Stage1, step, policies, log)?;
        }
        Ok(())
    }

    /// Optimizes the frame policy with the captioner frozen.
    pub fn stage2(
        &self,
        policies: &mut Policies,
        data: &[Episode],
        include: &[Component],
        anchors: AnchorSource,
        log: &mut RunLog,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let cfg = self.cfg;
        let vocab = &self.vocab;
        let grpo_cfg = cfg.frame_grpo();
        let reference = policies.frame.snapshot();
        let mut opt = grpo_cfg.optimizer_state()?;
        let base = Rng::new(cfg.seed).derive(TAG_STAGE2);
        for step in 0..cfg.stage2_steps {
            let rng = base.derive(step as u64);
            let ep = self.pick(data, &rng);
            let anchor = match anchors {
                AnchorSource::Captioner => anchor_sample(&policies.captioner, ep, cfg, vocab, &rng.derive(2))?,
                AnchorSource::GroundTruth => AnchorDraw {
                    caption: ep.gt_caption.clone(),
                    fallback: false,
                    attempts: 0,
                    rouge: 1.0,
                },
            };
            let fctx = FrameContext::from_input(vocab, &anchor.caption, &ep.input_video, cfg.ref_frames);
            let mut group = rollout_group(&policies.frame, &fctx, grpo_cfg.group_size, &rng.derive(1), &ep.id)?;
            let videos = group
                .trajectories
                .iter()
                .map(|t| tokens_to_video(&t.tokens, vocab))
                .collect::<Result<Vec<_>>>()?;
            let breakdowns = par::map(&videos, |v| {
                stage2_reward_with(v, &anchor.caption, &ep.gt_video, &cfg.weights, include, vocab)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            group.set_rewards(breakdowns.iter().map(|b| b.total).collect(), grpo_cfg.std_eps)?;
            let diag = grpo_step(&mut policies.frame, &group, &fctx, &reference, &grpo_cfg, &mut opt)?;
            let (components, total) = mean_breakdown(&breakdowns);
            let from_captioner = anchors == AnchorSource::Captioner;
            log.push(LogRecord::Step(StepRecord {
                stage: Stage::Stage2,
                step,
                components,
                total,
                kl: diag.kl,
                clip_fraction: diag.clip_fraction,
                mean_ratio: diag.mean_ratio,
                thinking_length: anchor.caption.thinking_length() as f64,
                answer_length: answer_len(&anchor.caption),
                video_length: mean(videos.iter().map(|v| v.len() as f64)),
                anchor_rouge: from_captioner.then_some(anchor.rouge),
                anchor_fallback: from_captioner.then_some(anchor.fallback),
                anchor_attempts: from_captioner.then_some(anchor.attempts),
            }));
            self.after_step(Stage::Stage2, step, policies, log)?;
        }
        Ok(())
    }

    /// Single loop updating both policies each step from one shared
    /// stage-1 reward computed on the final video.
    pub fn all_in_one(
        &self,
        policies: &mut Policies,
        data: &[Episode],
        include: &[Component],
        log: &mut RunLog,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let cfg = self.cfg;
        let vocab = &self.vocab;
        let frame_cfg = cfg.frame_grpo();
        let ref_c = policies.captioner.snapshot();
        let ref_f = policies.frame.snapshot();
        let mut opt_c = cfg.grpo.optimizer_state()?;
        let mut opt_f = frame_cfg.optimizer_state()?;
        let base = Rng::new(cfg.seed).derive(TAG_ALL);
        for step in 0..cfg.stage1_steps + cfg.stage2_steps {
            let rng = base.derive(step as u64);
            let ep = self.pick(data, &rng);
            let cctx = CaptionContext::new(vocab, &ep.input_video, &ep.question);
            let mut cgroup = rollout_group(&policies.captioner, &cctx, cfg.grpo.group_size, &rng.derive(1), &ep.id)?;
            let captions: Vec<Caption> = cgroup
                .trajectories
                .iter()
                .map(|t| Caption::new(t.tokens.clone()))
                .collect();
            let fctxs: Vec<FrameContext> = captions
                .iter()
                .map(|c| FrameContext::from_input(vocab, c, &ep.input_video, cfg.ref_frames))
                .collect();
            let frame = &policies.frame;
            let trajs = par::map_range(captions.len(), |i| {
                frame.sample(&fctxs[i], &mut rng.derive2(2, i as u64))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let videos = trajs
                .iter()
                .map(|t| tokens_to_video(&t.tokens, vocab))
                .collect::<Result<Vec<_>>>()?;
            let breakdowns = par::map_range(captions.len(), |i| {
                stage1_reward_with(
                    &captions[i],
                    &videos[i],
                    &ep.gt_caption,
                    &ep.gt_video,
                    &cfg.weights,
                    include,
                    vocab,
                )
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let rewards: Vec<f64> = breakdowns.iter().map(|b| b.total).collect();
            cgroup.set_rewards(rewards.clone(), cfg.grpo.std_eps)?;
            let mut fgroup = GroupRollout::from_trajectories(ep.id.clone(), trajs);
            fgroup.set_rewards(rewards, cfg.grpo.std_eps)?;
            let diag = grpo_step(&mut policies.captioner, &cgroup, &cctx, &ref_c, &cfg.grpo, &mut opt_c)?;
            let ctx_refs: Vec<&dyn ContextBuilder> = fctxs.iter().map(|c| c as &dyn ContextBuilder).collect();
            grpo_step_multi(&mut policies.frame, &fgroup, &ctx_refs, &ref_f, &frame_cfg, &mut opt_f)?;
            let (components, total) = mean_breakdown(&breakdowns);
            log.push(LogRecord::Step(StepRecord {
                stage: Stage::AllInOne,
                step,
                components,
                total,
                kl: diag.kl,
                clip_fraction: diag.clip_fraction,
                mean_ratio: diag.mean_ratio,
                thinking_length: mean(captions.iter().map(|c| c.thinking_length() as f64)),
                answer_length: mean(captions.iter().map(answer_len)),
                video_length: mean(videos.iter().map(|v| v.len() as f64)),
                anchor_rouge: None,
                anchor_fallback: None,
                anchor_attempts: None,
            }));
            self.after_step(Stage::AllInOne, step, policies, log)?;
        }
        Ok(())
    }

    /// Runs the RL part of `variant` starting from `init` (typically the
    /// SFT policies). Returns the trained pair and its log.
    pub fn run_variant(
        &self,
        variant: &AblationVariant,
        init: &Policies,
        data: &[Episode],
    ) -> Result<(Policies, RunLog)> {
        variant.validate()?;
        let mut log = RunLog::new(self.cfg, Some(&variant.to_string()));
        let mut p = init.clone();
        let s1 = variant.stage1_components();
        let s2 = variant.stage2_components();
        match variant.kind {
            VariantKind::SftOnly => {}
            VariantKind::GrpoVlm => self.stage1(&mut p, data, &s1, &mut log)?,
            VariantKind::GrpoVdm => self.stage2(&mut p, data, &s2, AnchorSource::GroundTruth, &mut log)?,
            VariantKind::Cascade => {
                let mut vlm = init.clone();
                self.stage1(&mut vlm, data, &s1, &mut log)?;
                let mut vdm = init.clone();
                self.stage2(&mut vdm, data, &s2, AnchorSource::GroundTruth, &mut log)?;
                p = Policies {
                    captioner: vlm.captioner,
                    frame: vdm.frame,
                };
            }
            VariantKind::JointStage1 => self.stage1(&mut p, data, &s1, &mut log)?,
            VariantKind::JointStage12 => {
                self.stage1(&mut p, data, &s1, &mut log)?;
                self.stage2(&mut p, data, &s2, AnchorSource::Captioner, &mut log)?;
            }
            VariantKind::JointAllInOne => self.all_in_one(&mut p, data, &s1, &mut log)?,
        }
        Ok((p, log))
    }
}

/// Mean over tokens of the score function, and the mean log-likelihood.
fn mean_score(policy: &LinearSoftmaxPolicy, ctx: &dyn ContextBuilder, tokens: &[usize]) -> Result<(Vec<f64>, f64)> {
    let mut g = vec![0.0; policy.params().len()];
    let inv = 1.0 / tokens.len() as f64;
    let mut ll = 0.0;
    for (t, &tok) in tokens.iter().enumerate() {
        let prefix = &tokens[..t];
        let lp = policy.step_log_probs(ctx, prefix)?;
        if !lp[tok].is_finite() {
            return Err(Error::InvalidArgument(format!("target token {tok} is masked at {t}")));
        }
        ll += lp[tok] * inv;
        policy.add_score(&ctx.features(prefix), &lp, tok, inv, &mut g);
    }
    Ok((g, ll))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    SftOnly,
    GrpoVlm,
    GrpoVdm,
    #[serde(rename = "grpo_vlm_plus_vdm_cascade")]
    Cascade,
    JointStage1,
    #[serde(rename = "joint_stage1_2")]
    JointStage12,
    JointAllInOne,
}

impl VariantKind {
    pub const ALL: [VariantKind; 7] = [
        VariantKind::SftOnly,
        VariantKind::GrpoVlm,
        VariantKind::GrpoVdm,
        VariantKind::Cascade,
        VariantKind::JointStage1,
        VariantKind::JointStage12,
        VariantKind::JointAllInOne,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::SftOnly => "sft_only",
            VariantKind::GrpoVlm => "grpo_vlm",
            VariantKind::GrpoVdm => "grpo_vdm",
            VariantKind::Cascade => "grpo_vlm_plus_vdm_cascade",
            VariantKind::JointStage1 => "joint_stage1",
            VariantKind::JointStage12 => "joint_stage1_2",
            VariantKind::JointAllInOne => "joint_all_in_one",
        }
    }

    fn is_joint(self) -> bool {
        matches!(
            self,
            VariantKind::JointStage1 | VariantKind::JointStage12 | VariantKind::JointAllInOne
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DropFlags {
    pub no_rt1: bool,
    pub no_rv1: bool,
    pub no_rc2: bool,
    pub no_rv2: bool,
}

impl DropFlags {
    fn any(&self) -> bool {
        self.no_rt1 || self.no_rv1 || self.no_rc2 || self.no_rv2
    }
}

/// A regime plus optional reward-drop flags, written `kind[+flag...]`,
/// e.g. `joint_stage1_2+no_rt1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AblationVariant {
    pub kind: VariantKind,
    pub drop: DropFlags,
}

impl AblationVariant {
    pub fn new(kind: VariantKind) -> Self {
        AblationVariant {
            kind,
            drop: DropFlags::default(),
        }
    }

    pub fn with_drop(kind: VariantKind, drop: DropFlags) -> Result<Self> {
        let v = AblationVariant { kind, drop };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.drop;
        if d.any() && !self.kind.is_joint() {
            return Err(Error::InvalidArgument(format!(
                "reward-drop flags need a joint variant, not {}",
                self.kind.name()
            )));
        }
        if (d.no_rc2 || d.no_rv2) && self.kind != VariantKind::JointStage12 {
            return Err(Error::InvalidArgument(format!(
                "no_rc2 / no_rv2 only apply to {}",
                VariantKind::JointStage12.name()
            )));
        }
        if d.no_rc2 && d.no_rv2 {
            return Err(Error::InvalidArgument(
                "dropping both stage-2 rewards leaves none".into(),
            ));
        }
        Ok(())
    }

    pub fn stage1_components(&self) -> Vec<Component> {
        if self.kind == VariantKind::GrpoVlm {
            return vec![Component::Format, Component::TextFidelity];
        }
        Component::STAGE1
            .into_iter()
            .filter(|c| match c {
                Component::TextFidelity => !self.drop.no_rt1,
                Component::VideoFidelity1 => !self.drop.no_rv1,
                _ => true,
            })
            .collect()
    }

    pub fn stage2_components(&self) -> Vec<Component> {
        if matches!(self.kind, VariantKind::GrpoVdm | VariantKind::Cascade) {
            return vec![Component::VideoFidelity2];
        }
        Component::STAGE2
            .into_iter()
            .filter(|c| match c {
                Component::VideoFidelity2 => !self.drop.no_rv2,
                Component::SemanticAlignment => !self.drop.no_rc2,
                _ => true,
            })
            .collect()
    }

    /// The seven table rows without drop flags.
    pub fn table_rows() -> Vec<AblationVariant> {
        VariantKind::ALL.into_iter().map(AblationVariant::new).collect()
    }

    /// Table rows plus the four single-reward drops of the full method.
    pub fn all() -> Vec<AblationVariant> {
        let mut v = Self::table_rows();
        let k = VariantKind::JointStage12;
        for drop in [
            DropFlags {
                no_rt1: true,
                ..Default::default()
            },
            DropFlags {
                no_rv1: true,
                ..Default::default()
            },
            DropFlags {
                no_rc2: true,
                ..Default::default()
            },
            DropFlags {
                no_rv2: true,
                ..Default::default()
            },
        ] {
            v.push(AblationVariant { kind: k, drop });
        }
        v
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind.name())?;
        for (on, name) in [
            (self.drop.no_rt1, "no_rt1"),
            (self.drop.no_rv1, "no_rv1"),
            (self.drop.no_rc2, "no_rc2"),
            (self.drop.no_rv2, "no_rv2"),
        ] {
            if on {
                write!(f, "+{name}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split('+');
        let head = parts.next().unwrap_or_default().to_ascii_lowercase();
        let kind = match head.as_str() {
            "cascade" => VariantKind::Cascade,
            "all_in_one" => VariantKind::JointAllInOne,
            h => VariantKind::ALL
                .into_iter()
                .find(|k| k.name() == h)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {h:?}")))?,
        };
        let mut drop = DropFlags::default();
        for flag in parts {
            let slot = match flag.to_ascii_lowercase().as_str() {
                "no_rt1" => &mut drop.no_rt1,
                "no_rv1" => &mut drop.no_rv1,
                "no_rc2" => &mut drop.no_rc2,
                "no_rv2" => &mut drop.no_rv2,
                other => return Err(Error::InvalidArgument(format!("unknown flag {other:?}"))),
            };
            *slot = true;
        }
        Self::with_drop(kind, drop)
    }
}

/// Parses a comma-separated variant list; `all` expands to
/// [`AblationVariant::all`] and `table` to the seven table rows.
pub fn parse_variants(s: &str) -> Result<Vec<AblationVariant>> {
    let mut out: Vec<AblationVariant> = Vec::new();
    for item in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
        let expanded = match item {
            "all" => AblationVariant::all(),
            "table" => AblationVariant::table_rows(),
            other => vec![other.parse()?],
        };
        for v in expanded {
            if !out.contains(&v) {
                out.push(v);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("no variants given".into()));
    }
    Ok(out)
}

/// One trained (variant, seed) cell.
#[derive(Clone, Debug)]
pub struct SweepCell {
    pub variant: AblationVariant,
    pub seed: u64,
    pub table: MetricTable,
    pub log: RunLog,
    pub policies: Policies,
}

/// Trains every (variant, seed) cell. SFT runs once per seed and is shared
/// by all variants of that seed. Cells run concurrently; output order is
/// seed-major, variant-minor.
pub fn ablation_sweep(
    variants: &[AblationVariant],
    seeds: &[u64],
    train: &[Episode],
    eval_set: &[Episode],
    base: &TrainConfig,
) -> Result<Vec<SweepCell>> {
    let train_ids: HashSet<String> = train.iter().map(|e| e.id.clone()).collect();
    let per_seed = par::map(seeds, |&seed| -> Result<Vec<SweepCell>> {
        let cfg = TrainConfig { seed, ..base.clone() };
        let trainer = Trainer::new(&cfg)?;
        let mut sft = Policies::new(&trainer.vocab);
        let mut sft_log = RunLog::new(&cfg, Some("sft"));
        trainer.sft(&mut sft, train, &mut sft_log)?;
        par::map(variants, |v| -> Result<SweepCell> {
            let (policies, log) = trainer.run_variant(v, &sft, train)?;
            let table = evaluate(
                &policies.captioner,
                &policies.frame,
                eval_set,
                &train_ids,
                &trainer.vocab,
                cfg.ref_frames,
            )?;
            Ok(SweepCell {
                variant: *v,
                seed,
                table,
                log,
                policies,
            })
        })
        .into_iter()
        .collect()
    });
    let mut out = Vec::new();
    for cells in per_seed {
        out.extend(cells?);
    }
    Ok(out)
}

/// Median (mean of the middle pair for even counts).
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Window used when judging reward curves.
pub const SMOOTH_WINDOW: usize = 20;

/// Trailing mean over `window` points (shorter at the start).
pub fn smooth(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for i in 0..xs.len() {
        acc += xs[i];
        if i >= w {
            acc -= xs[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}
