//! Synthetic next-event world: symbolic videos, rule-driven episodes, the
//! four-stage curation analog and the line-record dataset format.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Rng;
use crate::par;
use crate::reward;
use crate::vocab::{Caption, Role, Vocab, Word, NUM_BRANCHES};

/// One frame: a fixed-arity tuple of symbols in slot order
/// (actor, object, action, location).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Frame(pub Vec<usize>);

pub const SLOT_ACTOR: usize = 0;
pub const SLOT_OBJECT: usize = 1;
pub const SLOT_ACTION: usize = 2;
pub const SLOT_LOCATION: usize = 3;
pub const SLOTS: usize = 4;

impl Frame {
    pub fn new(actor: usize, object: usize, action: usize, location: usize) -> Self {
        Frame(vec![actor, object, action, location])
    }

    pub fn slots(&self) -> &[usize] {
        &self.0
    }

    pub fn action(&self) -> usize {
        self.0[SLOT_ACTION]
    }
}

/// Ordered, non-empty list of equal-arity frames.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Frame>", into = "Vec<Frame>")]
pub struct SymbolicVideo {
    frames: Vec<Frame>,
}

impl TryFrom<Vec<Frame>> for SymbolicVideo {
    type Error = Error;
    fn try_from(frames: Vec<Frame>) -> Result<Self> {
        SymbolicVideo::new(frames)
    }
}

impl From<SymbolicVideo> for Vec<Frame> {
    fn from(v: SymbolicVideo) -> Self {
        v.frames
    }
}

impl SymbolicVideo {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::Empty("video frames"));
        };
        let arity = first.0.len();
        if arity == 0 || frames.iter().any(|f| f.0.len() != arity) {
            return Err(Error::InvalidArgument(
                "all frames must share a non-zero slot arity".into(),
            ));
        }
        Ok(SymbolicVideo { frames })
    }

    pub fn repeat(frame: Frame, n: usize) -> Result<Self> {
        SymbolicVideo::new(vec![frame; n])
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn arity(&self) -> usize {
        self.frames[0].0.len()
    }

    pub fn last_frame(&self) -> &Frame {
        self.frames.last().expect("non-empty")
    }

    /// The last `n` frames (all of them when shorter).
    pub fn tail(&self, n: usize) -> &[Frame] {
        let start = self.frames.len().saturating_sub(n);
        &self.frames[start..]
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        SymbolicVideo::new(self.frames[range].to_vec())
    }

    pub fn symbols(&self) -> impl Iterator<Item = usize> + '_ {
        self.frames.iter().flat_map(|f| f.0.iter().copied())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Procedural,
    Predictive,
}

impl QuestionKind {
    pub const ALL: [QuestionKind; 2] = [QuestionKind::Procedural, QuestionKind::Predictive];

    pub fn name(self) -> &'static str {
        match self {
            QuestionKind::Procedural => "procedural",
            QuestionKind::Predictive => "predictive",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Question {
    pub kind: QuestionKind,
    pub tokens: Vec<usize>,
}

impl Question {
    pub fn new(kind: QuestionKind, tokens: Vec<usize>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Empty("question tokens"));
        }
        Ok(Question { kind, tokens })
    }

    /// Hypothesis branch encoded in a predictive question.
    pub fn branch(&self) -> Option<usize> {
        self.tokens.iter().find_map(|&t| Word::branch_of(t))
    }
}

/// `(v_in, Q, s_gt, v_gt)` plus the reference reasoning trace.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Episode {
    pub id: String,
    pub input_video: SymbolicVideo,
    pub question: Question,
    pub gt_caption: Caption,
    pub gt_video: SymbolicVideo,
    pub cot: Vec<usize>,
}

/// Length bounds for answer videos (one frame per "second").
pub const MIN_CLIP: usize = 3;
pub const MAX_CLIP: usize = 5;

/// Answer-span tokens that appear verbatim in `question`.
pub fn leaked_tokens(answer: &[usize], question: &[usize]) -> Vec<usize> {
    let q: HashSet<usize> = question.iter().copied().collect();
    answer.iter().copied().filter(|t| q.contains(t)).collect()
}

impl Episode {
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.gt_video.len();
        if !(MIN_CLIP..=MAX_CLIP).contains(&n) {
            return Err(Error::InvalidArgument(format!(
                "episode {}: answer video has {n} frames",
                self.id
            )));
        }
        let answer = self
            .gt_caption
            .answer()
            .ok_or_else(|| Error::InvalidArgument(format!("episode {}: malformed caption", self.id)))?;
        let leaked = leaked_tokens(answer, &self.question.tokens);
        if !leaked.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "episode {}: answer tokens {leaked:?} leak into the question",
                self.id
            )));
        }
        Ok(())
    }
}

/// The event that follows a signature frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NextEvent {
    pub action: usize,
    pub frames: usize,
}

/// Deterministic next-event rules.
///
/// Procedural actions form a single cycle (every step has a unique
/// successor). Predictive actions branch on the question's hypothesis word:
/// branch `h` always lands in `vocab.branch_outcomes(h)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RuleTable {
    vocab: Vocab,
    procedural_next: Vec<usize>,
    predictive_next: Vec<[usize; NUM_BRANCHES]>,
    duration: Vec<usize>,
}

impl RuleTable {
    pub fn new(vocab: Vocab, seed: u64) -> Self {
        let mut rng = Rng::new(seed).derive(0x7275_6c65);
        let mut cycle: Vec<usize> = vocab.procedural_actions().collect();
        rng.shuffle(&mut cycle);
        let base = vocab.procedural_actions().start;
        let mut procedural_next = vec![0; cycle.len()];
        for (i, &a) in cycle.iter().enumerate() {
            procedural_next[a - base] = cycle[(i + 1) % cycle.len()];
        }
        let predictive_next = vocab
            .predictive_actions()
            .map(|a| {
                let mut out = [0; NUM_BRANCHES];
                for (h, slot) in out.iter_mut().enumerate() {
                    let options: Vec<usize> = vocab.branch_outcomes(h).filter(|&o| o != a).collect();
                    *slot = *rng.choose(&options);
                }
                out
            })
            .collect();
        let duration = vocab
            .role_symbols(Role::Action)
            .map(|_| rng.range_inclusive(MIN_CLIP, MAX_CLIP))
            .collect();
        RuleTable {
            vocab,
            procedural_next,
            predictive_next,
            duration,
        }
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn duration(&self, action: usize) -> usize {
        self.duration[action - self.vocab.role_symbols(Role::Action).start]
    }

    pub fn procedural_successor(&self, action: usize) -> Option<usize> {
        let r = self.vocab.procedural_actions();
        r.contains(&action).then(|| self.procedural_next[action - r.start])
    }

    pub fn predictive_outcome(&self, action: usize, branch: usize) -> Option<usize> {
        let r = self.vocab.predictive_actions();
        (r.contains(&action) && branch < NUM_BRANCHES).then(|| self.predictive_next[action - r.start][branch])
    }

    /// Looks up the event following `signature` (the last observed frame).
    pub fn next_event(&self, signature: &Frame, kind: QuestionKind, branch: Option<usize>) -> Result<NextEvent> {
        let a = signature.action();
        let action = match (kind, branch) {
            (QuestionKind::Procedural, _) => self.procedural_successor(a),
            (QuestionKind::Predictive, Some(h)) => self.predictive_outcome(a, h),
            (QuestionKind::Predictive, None) => None,
        }
        .ok_or_else(|| Error::MissingRule(format!("(action {a}, {}, branch {branch:?})", kind.name())))?;
        Ok(NextEvent {
            action,
            frames: self.duration(action),
        })
    }

    /// Every (signature action, kind, branch) key the table defines.
    pub fn signatures(&self) -> Vec<(usize, QuestionKind, Option<usize>)> {
        let mut out: Vec<_> = self
            .vocab
            .procedural_actions()
            .map(|a| (a, QuestionKind::Procedural, None))
            .collect();
        for a in self.vocab.predictive_actions() {
            for h in 0..NUM_BRANCHES {
                out.push((a, QuestionKind::Predictive, Some(h)));
            }
        }
        out
    }
}

/// Reference reasoning for the event after `current_action`.
pub fn reasoning_trace(vocab: &Vocab, kind: QuestionKind, current_action: usize, branch: Option<usize>) -> Vec<usize> {
    let a = vocab.token_of_symbol(current_action);
    match kind {
        QuestionKind::Procedural => vec![a, Word::Then.token(), Word::Next.token(), Word::Step.token()],
        QuestionKind::Predictive => vec![
            a,
            Word::If.token(),
            Word::hypothesis(branch.unwrap_or(0)).token(),
            Word::Then.token(),
        ],
    }
}

/// Answer tokens describing a frame's event.
pub fn describe_frame(vocab: &Vocab, frame: &Frame) -> Vec<usize> {
    [SLOT_ACTOR, SLOT_ACTION, SLOT_OBJECT, SLOT_LOCATION]
        .iter()
        .map(|&s| vocab.token_of_symbol(frame.0[s]))
        .collect()
}

/// What the question generator needs to know about the observed event.
#[derive(Clone, Debug)]
pub struct QaContext {
    pub kind: QuestionKind,
    pub current: Frame,
    pub branch: Option<usize>,
}

/// Stand-in for the external annotator in the curation pipeline.
pub trait Annotator {
    /// Caption describing a clip.
    fn caption(&self, clip: &SymbolicVideo) -> Result<Caption>;

    /// Candidate question templates for the observed event, in no
    /// particular order. Some may leak the answer; the caller filters.
    fn question_templates(&self, ctx: &QaContext) -> Vec<Vec<usize>>;
}

/// Template-driven annotator.
#[derive(Clone, Debug)]
pub struct RuleAnnotator {
    pub vocab: Vocab,
}

impl Annotator for RuleAnnotator {
    fn caption(&self, clip: &SymbolicVideo) -> Result<Caption> {
        // Describe the most frequent frame; earliest on ties.
        let mut best = &clip.frames()[0];
        let mut best_count = 0;
        for f in clip.frames() {
            let c = clip.frames().iter().filter(|g| *g == f).count();
            if c > best_count {
                best = f;
                best_count = c;
            }
        }
        let think = vec![self.vocab.token_of_symbol(best.action()), Word::Then.token()];
        Ok(Caption::compose(&think, &describe_frame(&self.vocab, best)))
    }

    fn question_templates(&self, ctx: &QaContext) -> Vec<Vec<usize>> {
        use Word::*;
        let a = self.vocab.token_of_symbol(ctx.current.action());
        let actor = self.vocab.token_of_symbol(ctx.current.0[SLOT_ACTOR]);
        let object = self.vocab.token_of_symbol(ctx.current.0[SLOT_OBJECT]);
        match ctx.kind {
            QuestionKind::Procedural => vec![
                vec![What.token(), Next.token(), Step.token(), After.token(), a],
                vec![What.token(), Happens.token(), After.token(), a],
                // names the actor, which the answer repeats
                vec![What.token(), Does.token(), actor, Next.token()],
            ],
            QuestionKind::Predictive => {
                let h = Word::hypothesis(ctx.branch.unwrap_or(0)).token();
                vec![
                    vec![What.token(), Happens.token(), If.token(), h, After.token(), a],
                    vec![What.token(), If.token(), h],
                    // names the object, which the answer repeats
                    vec![What.token(), Happens.token(), To.token(), object, If.token(), h],
                ]
            }
        }
    }
}

/// Default bound on question regeneration attempts.
pub const QA_MAX_RETRIES: usize = 8;

/// Proposes questions until one passes the leakage self-check. Templates
/// are tried without replacement, so at most `min(retries, templates)`
/// attempts are made. Returns the question and the attempt count.
pub fn question_with_self_check(
    annotator: &dyn Annotator,
    ctx: &QaContext,
    answer: &[usize],
    max_retries: usize,
    rng: &mut Rng,
) -> Result<(Question, usize)> {
    let mut templates = annotator.question_templates(ctx);
    rng.shuffle(&mut templates);
    let mut attempts = 0;
    for tokens in templates.into_iter().take(max_retries) {
        attempts += 1;
        if leaked_tokens(answer, &tokens).is_empty() && !tokens.is_empty() {
            return Ok((Question::new(ctx.kind, tokens)?, attempts));
        }
    }
    Err(Error::RetriesExhausted(attempts))
}

/// Samples one episode directly from the rules.
pub fn generate_episode(
    rules: &RuleTable,
    kind: QuestionKind,
    rng: &mut Rng,
    id: impl Into<String>,
) -> Result<Episode> {
    let vocab = rules.vocab();
    let pick = |rng: &mut Rng, role: Role| vocab.symbol(role, rng.below(vocab.per_role));
    let actor = pick(rng, Role::Actor);
    let object = pick(rng, Role::Object);
    let location = pick(rng, Role::Location);

    let events = rng.range_inclusive(2, 4);
    let mut actions = Vec::with_capacity(events);
    match kind {
        QuestionKind::Procedural => {
            let r = vocab.procedural_actions();
            let mut a = r.start + rng.below(r.len());
            actions.push(a);
            for _ in 1..events {
                a = rules
                    .procedural_successor(a)
                    .ok_or_else(|| Error::MissingRule(format!("procedural action {a}")))?;
                actions.push(a);
            }
        }
        QuestionKind::Predictive => {
            let r = vocab.predictive_actions();
            for _ in 0..events {
                actions.push(r.start + rng.below(r.len()));
            }
        }
    }
    let mut frames = Vec::new();
    for &a in &actions {
        let reps = rng.range_inclusive(1, 2);
        frames.extend(std::iter::repeat_n(Frame::new(actor, object, a, location), reps));
    }
    let input_video = SymbolicVideo::new(frames)?;
    let branch = match kind {
        QuestionKind::Procedural => None,
        QuestionKind::Predictive => Some(rng.below(NUM_BRANCHES)),
    };
    let signature = input_video.last_frame().clone();
    let next = rules.next_event(&signature, kind, branch)?;
    let next_frame = Frame::new(actor, object, next.action, location);
    let gt_video = SymbolicVideo::repeat(next_frame.clone(), next.frames)?;

    let cot = reasoning_trace(&vocab, kind, signature.action(), branch);
    let answer = describe_frame(&vocab, &next_frame);
    let gt_caption = Caption::compose(&cot, &answer);
    let ctx = QaContext {
        kind,
        current: signature,
        branch,
    };
    let annotator = RuleAnnotator { vocab };
    let (question, _) = question_with_self_check(&annotator, &ctx, &answer, QA_MAX_RETRIES, rng)?;
    let ep = Episode {
        id: id.into(),
        input_video,
        question,
        gt_caption,
        gt_video,
        cot,
    };
    ep.check_invariants()?;
    Ok(ep)
}

/// Splits a long video at `boundaries` and drops segments shorter than
/// [`MIN_CLIP`] frames. Returns `(kept, dropped)`, each in source order.
pub fn shot_split_with_dropped(
    long_video: &SymbolicVideo,
    boundaries: &[usize],
) -> Result<(Vec<SymbolicVideo>, Vec<SymbolicVideo>)> {
    let n = long_video.len();
    for w in boundaries.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::InvalidArgument(format!(
                "boundaries must be strictly increasing: {boundaries:?}"
            )));
        }
    }
    if let Some(&b) = boundaries.iter().find(|&&b| b == 0 || b >= n) {
        return Err(Error::InvalidArgument(format!("boundary {b} outside (0, {n})")));
    }
    let mut cuts = Vec::with_capacity(boundaries.len() + 2);
    cuts.push(0);
    cuts.extend_from_slice(boundaries);
    cuts.push(n);
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for w in cuts.windows(2) {
        let seg = long_video.slice(w[0]..w[1])?;
        if seg.len() >= MIN_CLIP {
            kept.push(seg);
        } else {
            dropped.push(seg);
        }
    }
    Ok((kept, dropped))
}

pub fn shot_split(long_video: &SymbolicVideo, boundaries: &[usize]) -> Result<Vec<SymbolicVideo>> {
    Ok(shot_split_with_dropped(long_video, boundaries)?.0)
}

/// Centered window of at most [`MAX_CLIP`] frames.
pub fn center_clip(v: &SymbolicVideo) -> SymbolicVideo {
    if v.len() <= MAX_CLIP {
        return v.clone();
    }
    let start = (v.len() - MAX_CLIP) / 2;
    v.slice(start..start + MAX_CLIP).expect("non-empty window")
}

/// Picks the segment best aligned with `caption` (earliest on ties) and
/// truncates it to at most five centered frames.
pub fn clip_select(segments: &[SymbolicVideo], caption: &Caption, vocab: &Vocab) -> Result<SymbolicVideo> {
    if segments.is_empty() {
        return Err(Error::Empty("segments"));
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, seg) in segments.iter().enumerate() {
        let s = reward::clip_t(caption, seg, vocab);
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    Ok(center_clip(&segments[best]))
}

/// A generated question/answer pair about clip `index`.
#[derive(Clone, Debug)]
pub struct QaPair {
    pub index: usize,
    pub question: Question,
    pub cot: Vec<usize>,
    pub caption: Caption,
    pub attempts: usize,
}

/// Asks about a random clip `k` of the sequence; the answer is clip
/// `k + 1`'s caption. Kind and branch are read off the observed actions.
pub fn qa_generate(
    clips: &[(SymbolicVideo, Caption)],
    annotator: &dyn Annotator,
    vocab: &Vocab,
    rng: &mut Rng,
) -> Result<QaPair> {
    if clips.len() < 2 {
        return Err(Error::InvalidArgument(
            "question generation needs at least two consecutive clips".into(),
        ));
    }
    let k = rng.below(clips.len() - 1);
    let current = clips[k].0.last_frame().clone();
    let next_answer = clips[k + 1]
        .1
        .answer()
        .ok_or_else(|| Error::InvalidArgument("clip caption is malformed".into()))?
        .to_vec();
    let next_action = clips[k + 1].0.last_frame().action();
    let kind = if vocab.procedural_actions().contains(&current.action()) {
        QuestionKind::Procedural
    } else {
        QuestionKind::Predictive
    };
    let branch = match kind {
        QuestionKind::Procedural => None,
        QuestionKind::Predictive => (0..NUM_BRANCHES).find(|&h| vocab.branch_outcomes(h).contains(&next_action)),
    };
    let cot = reasoning_trace(vocab, kind, current.action(), branch);
    let ctx = QaContext { kind, current, branch };
    let (question, attempts) = question_with_self_check(annotator, &ctx, &next_answer, QA_MAX_RETRIES, rng)?;
    let caption = Caption::compose(&cot, &next_answer);
    Ok(QaPair {
        index: k,
        question,
        cot,
        caption,
        attempts,
    })
}

/// A long unedited video: a chain of events with their true boundaries and
/// captions.
#[derive(Clone, Debug)]
pub struct LongVideo {
    pub video: SymbolicVideo,
    pub boundaries: Vec<usize>,
    pub captions: Vec<Caption>,
}

/// Rule-consistent long video with `events` events of 2..=7 frames each.
pub fn generate_long_video(rules: &RuleTable, kind: QuestionKind, events: usize, rng: &mut Rng) -> Result<LongVideo> {
    let vocab = rules.vocab();
    let pick = |rng: &mut Rng, role: Role| vocab.symbol(role, rng.below(vocab.per_role));
    let actor = pick(rng, Role::Actor);
    let object = pick(rng, Role::Object);
    let location = pick(rng, Role::Location);
    let start = match kind {
        QuestionKind::Procedural => vocab.procedural_actions(),
        QuestionKind::Predictive => vocab.predictive_actions(),
    };
    let mut action = start.start + rng.below(start.len());
    let annotator = RuleAnnotator { vocab };
    let mut frames = Vec::new();
    let mut boundaries = Vec::new();
    let mut captions = Vec::new();
    for e in 0..events {
        if e > 0 {
            boundaries.push(frames.len());
            let branch = (kind == QuestionKind::Predictive).then(|| rng.below(NUM_BRANCHES));
            action = rules
                .next_event(&Frame::new(actor, object, action, location), kind, branch)?
                .action;
        }
        let len = rng.range_inclusive(2, 7);
        let frame = Frame::new(actor, object, action, location);
        captions.push(annotator.caption(&SymbolicVideo::repeat(frame.clone(), 1)?)?);
        frames.extend(std::iter::repeat_n(frame, len));
    }
    Ok(LongVideo {
        video: SymbolicVideo::new(frames)?,
        boundaries,
        captions,
    })
}

/// Shot split, clip selection and QA generation over a long video. Events
/// whose shot was dropped break the chain; QA runs over each unbroken run.
pub fn curate(
    long: &LongVideo,
    annotator: &dyn Annotator,
    vocab: &Vocab,
    rng: &mut Rng,
    id_prefix: &str,
) -> Result<Vec<Episode>> {
    let mut cuts = vec![0];
    cuts.extend_from_slice(&long.boundaries);
    cuts.push(long.video.len());
    let kept = shot_split(&long.video, &long.boundaries)?;
    let mut runs: Vec<Vec<(SymbolicVideo, Caption)>> = vec![Vec::new()];
    for (e, caption) in long.captions.iter().enumerate() {
        let len = cuts[e + 1] - cuts[e];
        if len < MIN_CLIP || kept.is_empty() {
            runs.push(Vec::new());
            continue;
        }
        let clip = clip_select(&kept, caption, vocab)?;
        runs.last_mut().expect("non-empty").push((clip, caption.clone()));
    }
    let mut out = Vec::new();
    for run in runs.into_iter().filter(|r| r.len() >= 2) {
        let qa = qa_generate(&run, annotator, vocab, rng)?;
        let ep = Episode {
            id: format!("{id_prefix}-{}", out.len()),
            input_video: run[qa.index].0.clone(),
            question: qa.question,
            gt_caption: qa.caption,
            gt_video: run[qa.index + 1].0.clone(),
            cot: qa.cot,
        };
        ep.check_invariants()?;
        out.push(ep);
    }
    Ok(out)
}

/// Corpus sizes per split and kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub train_per_kind: usize,
    pub eval_per_kind: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            train_per_kind: 2000,
            eval_per_kind: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<Episode>,
    pub eval: Vec<Episode>,
}

impl Corpus {
    pub fn eval_split(&self, kind: QuestionKind) -> Vec<Episode> {
        self.eval.iter().filter(|e| e.question.kind == kind).cloned().collect()
    }
}

fn generate_split(rules: &RuleTable, seed: u64, split: &str, per_kind: usize) -> Result<Vec<Episode>> {
    let root = Rng::new(seed);
    let split_label = if split == "train" { 1 } else { 2 };
    let mut out = Vec::with_capacity(2 * per_kind);
    for (ki, kind) in QuestionKind::ALL.into_iter().enumerate() {
        let eps: Vec<Result<Episode>> = par::map_range(per_kind, |i| {
            let mut rng = root.derive2(split_label * 16 + ki as u64, i as u64);
            let id = format!("{split}-{}-{i:05}", &kind.name()[..4]);
            generate_episode(rules, kind, &mut rng, id)
        });
        for e in eps {
            out.push(e?);
        }
    }
    Ok(out)
}

/// Train and evaluation splits; ids are disjoint by construction.
pub fn generate_corpus(rules: &RuleTable, cfg: CorpusConfig, seed: u64) -> Result<Corpus> {
    Ok(Corpus {
        train: generate_split(rules, seed, "train", cfg.train_per_kind)?,
        eval: generate_split(rules, seed, "eval", cfg.eval_per_kind)?,
    })
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    records: usize,
}

#[derive(Serialize, Deserialize)]
struct EpisodeRecord {
    id: String,
    kind: QuestionKind,
    input_video: Vec<Vec<usize>>,
    question: Vec<usize>,
    cot: Vec<usize>,
    gt_caption: Vec<usize>,
    gt_video: Vec<Vec<usize>>,
}

const DATASET_FORMAT: &str = "jointgrpo-episodes";

fn frames_of(v: &SymbolicVideo) -> Vec<Vec<usize>> {
    v.frames().iter().map(|f| f.0.clone()).collect()
}

fn video_of(frames: Vec<Vec<usize>>) -> Result<SymbolicVideo> {
    SymbolicVideo::new(frames.into_iter().map(Frame).collect())
}

/// One JSON object per line, preceded by a header line.
pub fn write_dataset(episodes: &[Episode], path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: 1,
        records: episodes.len(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes")).map_err(io)?;
    for ep in episodes {
        let rec = EpisodeRecord {
            id: ep.id.clone(),
            kind: ep.question.kind,
            input_video: frames_of(&ep.input_video),
            question: ep.question.tokens.clone(),
            cot: ep.cot.clone(),
            gt_caption: ep.gt_caption.tokens().to_vec(),
            gt_video: frames_of(&ep.gt_video),
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_dataset(path: &Path) -> Result<Vec<Episode>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "missing header line"))?
        .map_err(|e| Error::io(path, e))?;
    let header: DatasetHeader = serde_json::from_str(&header_line).map_err(|e| Error::parse(path, 1, e))?;
    if header.format != DATASET_FORMAT {
        return Err(Error::parse(path, 1, format!("unknown format {:?}", header.format)));
    }
    let mut out = Vec::with_capacity(header.records);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        let rec: EpisodeRecord = serde_json::from_str(&line).map_err(|e| Error::parse(path, lineno, e))?;
        let bad = |e: Error| Error::parse(path, lineno, e);
        out.push(Episode {
            id: rec.id,
            input_video: video_of(rec.input_video).map_err(bad)?,
            question: Question::new(rec.kind, rec.question).map_err(bad)?,
            gt_caption: Caption::new(rec.gt_caption),
            gt_video: video_of(rec.gt_video).map_err(bad)?,
            cot: rec.cot,
        });
    }
    if out.len() != header.records {
        return Err(Error::parse(
            path,
            out.len() + 2,
            format!("header declares {} records, found {}", header.records, out.len()),
        ));
    }
    Ok(out)
}
