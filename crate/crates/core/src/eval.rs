//! Held-out evaluation: greedy captions and videos scored against ground
//! truth, per question kind, plus report files.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::policy::{tokens_to_video, CaptionContext, FrameContext, LinearSoftmaxPolicy};
use crate::reward::{bleu, caption_rouge, clip_t, clip_v, embed_frame, frechet_proxy, normalized_frechet, Embedding};
use crate::vocab::{Caption, Vocab};
use crate::world::{Episode, QuestionKind, SymbolicVideo};

/// Means over one evaluation split. `frechet` is the pooled set-level
/// distance between generated and ground-truth frame embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub episodes: usize,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub frechet: f64,
    pub clip_v: f64,
    pub clip_t: f64,
}

impl MetricRow {
    /// Mean of ROUGE-L, CLIP-V, CLIP-T and `1 − normalized Fréchet`.
    pub fn combined_score(&self) -> f64 {
        (self.rouge_l + self.clip_v + self.clip_t + (1.0 - normalized_frechet(self.frechet))) / 4.0
    }

    pub const COLUMNS: [&'static str; 8] = [
        "bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "frechet", "clip_v", "clip_t",
    ];

    pub fn values(&self) -> [f64; 8] {
        [
            self.bleu1,
            self.bleu2,
            self.bleu3,
            self.bleu4,
            self.rouge_l,
            self.frechet,
            self.clip_v,
            self.clip_t,
        ]
    }
}

/// One row per benchmark split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub procedural: Option<MetricRow>,
    pub predictive: Option<MetricRow>,
}

impl MetricTable {
    pub fn split(&self, kind: QuestionKind) -> Option<&MetricRow> {
        match kind {
            QuestionKind::Procedural => self.procedural.as_ref(),
            QuestionKind::Predictive => self.predictive.as_ref(),
        }
    }
}

/// Greedy caption then greedy video for one episode.
pub fn generate(
    captioner: &LinearSoftmaxPolicy,
    frame_policy: &LinearSoftmaxPolicy,
    ep: &Episode,
    vocab: &Vocab,
    ref_frames: usize,
) -> Result<(Caption, SymbolicVideo)> {
    let cctx = CaptionContext::new(vocab, &ep.input_video, &ep.question);
    let caption = Caption::new(captioner.greedy(&cctx)?.tokens);
    let fctx = FrameContext::from_input(vocab, &caption, &ep.input_video, ref_frames);
    let video = tokens_to_video(&frame_policy.greedy(&fctx)?.tokens, vocab)?;
    Ok((caption, video))
}

struct EpisodeScores {
    id: String,
    text: [f64; 5],
    clip_v: f64,
    clip_t: f64,
    generated: Vec<Embedding>,
    reference: Vec<Embedding>,
}

fn score_episode(
    captioner: &LinearSoftmaxPolicy,
    frame_policy: &LinearSoftmaxPolicy,
    ep: &Episode,
    vocab: &Vocab,
    ref_frames: usize,
) -> Result<EpisodeScores> {
    let (caption, video) = generate(captioner, frame_policy, ep, vocab, ref_frames)?;
    let cand = caption.answer_or_all();
    let gt = ep.gt_caption.answer_or_all();
    Ok(EpisodeScores {
        id: ep.id.clone(),
        text: [
            bleu(cand, gt, 1)?,
            bleu(cand, gt, 2)?,
            bleu(cand, gt, 3)?,
            bleu(cand, gt, 4)?,
            caption_rouge(&caption, &ep.gt_caption)?,
        ],
        clip_v: clip_v(&video, &ep.gt_video, vocab),
        clip_t: clip_t(&ep.gt_caption, &video, vocab),
        generated: video.frames().iter().map(|f| embed_frame(f, vocab)).collect(),
        reference: ep.gt_video.frames().iter().map(|f| embed_frame(f, vocab)).collect(),
    })
}

/// Scores one split. Per-episode results are reduced in id order, so the
/// row does not depend on the order of `episodes`.
pub fn evaluate_split(
    captioner: &LinearSoftmaxPolicy,
    frame_policy: &LinearSoftmaxPolicy,
    episodes: &[Episode],
    vocab: &Vocab,
    ref_frames: usize,
) -> Result<MetricRow> {
    if episodes.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let mut scores = par::map(episodes, |ep| {
        score_episode(captioner, frame_policy, ep, vocab, ref_frames)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    scores.sort_by(|a, b| a.id.cmp(&b.id));
    let n = scores.len() as f64;
    let mut text = [0.0; 5];
    let (mut cv, mut ct) = (0.0, 0.0);
    let mut generated = Vec::new();
    let mut reference = Vec::new();
    for s in scores {
        for (acc, v) in text.iter_mut().zip(s.text) {
            *acc += v;
        }
        cv += s.clip_v;
        ct += s.clip_t;
        generated.extend(s.generated);
        reference.extend(s.reference);
    }
    Ok(MetricRow {
        episodes: episodes.len(),
        bleu1: text[0] / n,
        bleu2: text[1] / n,
        bleu3: text[2] / n,
        bleu4: text[3] / n,
        rouge_l: text[4] / n,
        frechet: frechet_proxy(&generated, &reference)?,
        clip_v: cv / n,
        clip_t: ct / n,
    })
}

/// Evaluates both splits of `eval_set`, refusing any episode whose id is
/// in `train_ids`.
pub fn evaluate(
    captioner: &LinearSoftmaxPolicy,
    frame_policy: &LinearSoftmaxPolicy,
    eval_set: &[Episode],
    train_ids: &HashSet<String>,
    vocab: &Vocab,
    ref_frames: usize,
) -> Result<MetricTable> {
    if eval_set.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if let Some(ep) = eval_set.iter().find(|e| train_ids.contains(&e.id)) {
        return Err(Error::Overlap(ep.id.clone()));
    }
    let row = |kind| -> Result<Option<MetricRow>> {
        let split: Vec<Episode> = eval_set.iter().filter(|e| e.question.kind == kind).cloned().collect();
        if split.is_empty() {
            Ok(None)
        } else {
            evaluate_split(captioner, frame_policy, &split, vocab, ref_frames).map(Some)
        }
    };
    Ok(MetricTable {
        procedural: row(QuestionKind::Procedural)?,
        predictive: row(QuestionKind::Predictive)?,
    })
}

/// Report line record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub frechet: f64,
    pub clip_v: f64,
    pub clip_t: f64,
}

impl ReportRow {
    pub fn new(variant: &str, m: &MetricRow) -> Self {
        ReportRow {
            variant: variant.to_string(),
            bleu1: m.bleu1,
            bleu2: m.bleu2,
            bleu3: m.bleu3,
            bleu4: m.bleu4,
            rouge_l: m.rouge_l,
            frechet: m.frechet,
            clip_v: m.clip_v,
            clip_t: m.clip_t,
        }
    }

    fn values(&self) -> [f64; 8] {
        [
            self.bleu1,
            self.bleu2,
            self.bleu3,
            self.bleu4,
            self.rouge_l,
            self.frechet,
            self.clip_v,
            self.clip_t,
        ]
    }
}

pub const REPORT_HEADER: &str = "variant,bleu1,bleu2,bleu3,bleu4,rouge_l,frechet,clip_v,clip_t";

/// Writes `<stem>.csv` and `<stem>.jsonl` into `dir`, rows sorted by
/// variant name. Returns the two paths.
pub fn write_report(rows: &[ReportRow], dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    if rows.is_empty() {
        return Err(Error::Empty("report rows"));
    }
    let mut sorted: BTreeMap<&str, &ReportRow> = BTreeMap::new();
    for r in rows {
        if r.variant.contains(',') || r.variant.contains('\n') {
            return Err(Error::InvalidArgument(format!(
                "variant name {:?} not representable",
                r.variant
            )));
        }
        if sorted.insert(&r.variant, r).is_some() {
            return Err(Error::Duplicate(r.variant.clone()));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let jsonl_path = dir.join(format!("{stem}.jsonl"));
    let mut csv = String::from(REPORT_HEADER);
    csv.push('\n');
    let mut jsonl = String::new();
    for r in sorted.values() {
        csv.push_str(&r.variant);
        for v in r.values() {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
        jsonl.push_str(&serde_json::to_string(r).expect("report row serializes"));
        jsonl.push('\n');
    }
    write_file(&csv_path, csv.as_bytes())?;
    write_file(&jsonl_path, jsonl.as_bytes())?;
    Ok((csv_path, jsonl_path))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Parses a report CSV written by [`write_report`].
pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(REPORT_HEADER) => {}
        other => return Err(Error::parse(path, 1, format!("unexpected header {other:?}"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::parse(
                path,
                i + 2,
                format!("expected 9 fields, got {}", fields.len()),
            ));
        }
        let mut v = [0.0; 8];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|e| Error::parse(path, i + 2, e))?;
        }
        out.push(ReportRow {
            variant: fields[0].to_string(),
            bleu1: v[0],
            bleu2: v[1],
            bleu3: v[2],
            bleu4: v[3],
            rouge_l: v[4],
            frechet: v[5],
            clip_v: v[6],
            clip_t: v[7],
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(x: f64) -> MetricRow {
        MetricRow {
            episodes: 3,
            bleu1: x,
            bleu2: x / 2.0,
            bleu3: 0.1,
            bleu4: 0.0,
            rouge_l: 0.3333333333333333,
            frechet: 1.25,
            clip_v: 0.9,
            clip_t: 0.7,
        }
    }

    #[test]
    fn report_round_trip_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![ReportRow::new("b", &row(0.5)), ReportRow::new("a", &row(0.25))];
        let (csv, jsonl) = write_report(&rows, dir.path(), "r").unwrap();
        let back = read_report_csv(&csv).unwrap();
        assert_eq!(back[0], rows[1]);
        assert_eq!(back[1], rows[0]);
        let jl = std::fs::read_to_string(jsonl).unwrap();
        assert_eq!(jl.lines().count(), 2);
        let dup = vec![ReportRow::new("a", &row(0.5)), ReportRow::new("a", &row(0.1))];
        assert!(matches!(write_report(&dup, dir.path(), "d"), Err(Error::Duplicate(_))));
    }

    #[test]
    fn combined_score_bounds() {
        let r = row(1.0);
        let s = r.combined_score();
        assert!((s - (0.3333333333333333 + 0.9 + 0.7 + (1.0 - 0.625)) / 4.0).abs() < 1e-15);
    }
}
