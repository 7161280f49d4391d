use jointgrpo::curves::*;
use jointgrpo::reward::{Component, ComponentValue, RewardBreakdown};
use jointgrpo::train::{LogRecord, RunLog, SftRecord, Stage, StepRecord, TrainConfig};

fn step(stage: Stage, step: usize, comps: &[(Component, f64)], thinking: f64) -> LogRecord {
    let components: Vec<ComponentValue> = comps
        .iter()
        .map(|&(name, value)| ComponentValue {
            name,
            weight: 1.0,
            value,
        })
        .collect();
    LogRecord::Step(StepRecord {
        stage,
        step,
        total: RewardBreakdown::weighted_sum(&components),
        components,
        kl: 0.0,
        clip_fraction: 0.0,
        mean_ratio: 1.0,
        thinking_length: thinking,
        answer_length: 4.0,
        video_length: 3.0,
        anchor_rouge: None,
        anchor_fallback: None,
        anchor_attempts: None,
    })
}

fn read_csv(path: &std::path::Path) -> Vec<(usize, f64)> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,value"));
    lines
        .map(|l| {
            let (s, v) = l.split_once(',').unwrap();
            (s.parse().unwrap(), v.parse().unwrap())
        })
        .collect()
}

#[test]
fn an_empty_log_gives_header_only_files() {
    let dir = tempfile::tempdir().unwrap();
    let paths = export_curves(&RunLog::new(&TrainConfig::default(), None), dir.path()).unwrap();
    assert_eq!(paths.len(), CURVES.len());
    for (p, name) in paths.iter().zip(CURVES) {
        assert_eq!(p.file_name().unwrap().to_str().unwrap(), format!("{name}.csv"));
        assert_eq!(std::fs::read_to_string(p).unwrap(), "step,value\n");
    }
}

#[test]
fn series_pick_the_right_stage_and_component() {
    let mut log = RunLog::new(&TrainConfig::default(), Some("joint_stage1_2"));
    log.push(LogRecord::Sft(SftRecord {
        step: 0,
        caption_log_likelihood: -1.0,
        frame_log_likelihood: -2.0,
    }));
    let s1 = [
        (Component::Format, 1.0),
        (Component::TextFidelity, 0.25),
        (Component::VideoFidelity1, 0.1),
    ];
    log.push(step(Stage::Stage1, 0, &s1, 3.0));
    log.push(step(Stage::Stage1, 1, &s1[..2], 5.5));
    log.push(step(
        Stage::Stage2,
        0,
        &[(Component::VideoFidelity2, 0.3), (Component::SemanticAlignment, 0.7)],
        4.0,
    ));
    assert_eq!(curve(&log, "r_t1").unwrap(), vec![(0, 0.25), (1, 0.25)]);
    assert_eq!(curve(&log, "r_v1").unwrap(), vec![(0, 0.1)]);
    assert_eq!(curve(&log, "thinking_length").unwrap(), vec![(0, 3.0), (1, 5.5)]);
    assert_eq!(
        curve(&log, "stage1_total").unwrap(),
        vec![(0, 1.0 + 0.25 + 0.1), (1, 1.25)]
    );
    assert_eq!(curve(&log, "r_c2").unwrap(), vec![(0, 0.7)]);
    assert_eq!(curve(&log, "stage2_total").unwrap(), vec![(0, 0.3 + 0.7)]);
    assert!(curve(&log, "loss").is_err());

    // Export through a file and parse the CSVs back.
    let dir = tempfile::tempdir().unwrap();
    let log_path = dir.path().join("run.jsonl");
    log.write(&log_path).unwrap();
    let out = dir.path().join("curves");
    let paths = export_curves_from_file(&log_path, &out).unwrap();
    for (p, name) in paths.iter().zip(CURVES) {
        assert_eq!(read_csv(p), curve(&log, name).unwrap(), "{name}");
    }
}

#[test]
fn malformed_logs_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.jsonl");
    let good = RunLog::new(&TrainConfig::default(), None).to_jsonl();
    std::fs::write(&path, format!("{good}\n{{broken\n")).unwrap();
    let err = export_curves_from_file(&path, dir.path()).unwrap_err().to_string();
    assert!(err.contains("run.jsonl:3:"), "{err}");
    assert!(export_curves_from_file(&dir.path().join("missing.jsonl"), dir.path()).is_err());
}
