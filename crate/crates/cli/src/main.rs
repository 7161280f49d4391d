//! Command-line front end: dataset generation, training, ablation sweeps,
//! evaluation and curve export. Every command writes its resolved config
//! to `--out`.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jointgrpo::curves::export_curves_from_file;
use jointgrpo::eval::{evaluate, write_report, MetricRow, MetricTable, ReportRow};
use jointgrpo::train::{
    ablation_sweep, median, parse_variants, AblationVariant, Monitor, Policies, RunLog, TrainConfig, Trainer,
};
use jointgrpo::world::{generate_corpus, read_dataset, write_dataset, Corpus, QuestionKind, RuleTable};
use jointgrpo::Error;

#[derive(Parser, Debug)]
#[command(name = "jointgrpo", version, about = "Joint GRPO on a synthetic next-event world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/eval episode files.
    GenData(GenDataArgs),
    /// Supervised warm start of both policies.
    TrainSft(TrainArgs),
    /// One training regime (default: the two-stage joint method).
    TrainJoint(TrainJointArgs),
    /// Variant x seed sweep with per-cell and median reports.
    Ablate(AblateArgs),
    /// Score saved policies on the eval split.
    Eval(EvalArgs),
    /// Write one step,value CSV per training curve from a run log.
    ExportCurves(ExportCurvesArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    train_per_kind: Option<usize>,
    #[arg(long)]
    eval_per_kind: Option<usize>,
    #[arg(long)]
    symbols_per_role: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long)]
    sft_steps: Option<usize>,
    #[arg(long)]
    stage1_steps: Option<usize>,
    #[arg(long)]
    stage2_steps: Option<usize>,
    #[arg(long)]
    group_size: Option<usize>,
    /// Ratio clip range ε.
    #[arg(long)]
    clip: Option<f64>,
    /// KL penalty coefficient.
    #[arg(long)]
    beta: Option<f64>,
    /// ROUGE-L threshold for stage-2 anchor captions.
    #[arg(long)]
    anchor_threshold: Option<f64>,
    #[arg(long)]
    lambda_f: Option<f64>,
    #[arg(long)]
    lambda_t1: Option<f64>,
    #[arg(long)]
    lambda_v1: Option<f64>,
    #[arg(long)]
    lambda_v2: Option<f64>,
    #[arg(long)]
    lambda_c2: Option<f64>,
    /// Checkpoint and evaluate every N steps (0 disables).
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Directory holding train.jsonl and eval.jsonl. Without it the corpus
    /// is generated from the config.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct TrainJointArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, default_value = "joint_stage1_2", value_parser = parse_variant)]
    variant: AblationVariant,
    /// Directory with `sft-` policies from train-sft; SFT runs first otherwise.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Comma-separated variants; `all` and `table` expand.
    #[arg(long, default_value = "all", value_parser = parse_variant_list)]
    variants: VariantList,
    /// A count N (seeds s..s+N with s from --seed) or a comma-separated list.
    #[arg(long)]
    seeds: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Directory with saved policies.
    #[arg(long)]
    checkpoint: PathBuf,
    /// File-name prefix of the policies inside --checkpoint.
    #[arg(long, default_value = "final-")]
    prefix: String,
    /// Row label in the report.
    #[arg(long, default_value = "eval")]
    name: String,
}

#[derive(Args, Debug)]
struct ExportCurvesArgs {
    /// Run log written by train-joint or ablate.
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Debug)]
struct VariantList(Vec<AblationVariant>);

fn parse_variant(s: &str) -> Result<AblationVariant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_variant_list(s: &str) -> Result<VariantList, String> {
    parse_variants(s).map(VariantList).map_err(|e| e.to_string())
}

/// Config errors count as usage errors (exit 1); anything else exits 2.
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Usage(msg),
            e => Failure::Runtime(e),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainSft(a) => train_sft(a),
        Command::TrainJoint(a) => train_joint(a),
        Command::Ablate(a) => ablate(a),
        Command::Eval(a) => eval(a),
        Command::ExportCurves(a) => {
            let paths = export_curves_from_file(&a.log, &a.out)?;
            eprintln!("wrote {} curve files to {}", paths.len(), a.out.display());
            Ok(())
        }
    }
}

fn base_config(common: &Common) -> Result<TrainConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Applies flag overrides in order, validating after each so an invalid
/// value is reported against its flag.
fn apply(cfg: &mut TrainConfig, o: &Overrides) -> Result<(), Failure> {
    cfg.validate()
        .map_err(|e| Failure::Usage(format!("invalid configuration: {e}")))?;
    macro_rules! set {
        ($flag:literal, $slot:expr, $v:expr) => {
            if let Some(v) = $v {
                $slot = v;
                cfg.validate()
                    .map_err(|e| Failure::Usage(format!("invalid value for '--{}': {e}", $flag)))?;
            }
        };
    }
    set!("sft-steps", cfg.sft_steps, o.sft_steps);
    set!("stage1-steps", cfg.stage1_steps, o.stage1_steps);
    set!("stage2-steps", cfg.stage2_steps, o.stage2_steps);
    set!("group-size", cfg.grpo.group_size, o.group_size);
    set!("clip", cfg.grpo.clip_eps, o.clip);
    set!("beta", cfg.grpo.kl_beta, o.beta);
    set!("anchor-threshold", cfg.anchor_rouge_threshold, o.anchor_threshold);
    set!("lambda-f", cfg.weights.f, o.lambda_f);
    set!("lambda-t1", cfg.weights.t1, o.lambda_t1);
    set!("lambda-v1", cfg.weights.v1, o.lambda_v1);
    set!("lambda-v2", cfg.weights.v2, o.lambda_v2);
    set!("lambda-c2", cfg.weights.c2, o.lambda_c2);
    set!("eval-every", cfg.eval_every, o.eval_every);
    Ok(())
}

/// Validates `cfg`, creates `out` and writes `config.toml` into it.
fn prepare_out(cfg: &TrainConfig, out: &Path) -> Outcome {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("config.toml");
    std::fs::write(&path, cfg.to_toml_string()).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn generated_corpus(cfg: &TrainConfig) -> Result<Corpus, Error> {
    let rules = RuleTable::new(cfg.vocab()?, cfg.world_seed);
    generate_corpus(&rules, cfg.corpus, cfg.world_seed)
}

/// Loads `<dir>/train.jsonl` and `<dir>/eval.jsonl`, or generates the
/// corpus the config describes. Records the source paths in `cfg`.
fn load_corpus(cfg: &mut TrainConfig, dataset: Option<&Path>) -> Result<Corpus, Error> {
    let Some(dir) = dataset else {
        return generated_corpus(cfg);
    };
    let (train_path, eval_path) = (dir.join("train.jsonl"), dir.join("eval.jsonl"));
    let corpus = Corpus {
        train: read_dataset(&train_path)?,
        eval: read_dataset(&eval_path)?,
    };
    cfg.train_path = Some(train_path);
    cfg.eval_path = Some(eval_path);
    Ok(corpus)
}

fn gen_data(a: GenDataArgs) -> Outcome {
    let mut cfg = base_config(&a.common)?;
    // The data seed picks the world.
    if let Some(s) = a.common.seed {
        cfg.world_seed = s;
    }
    if let Some(n) = a.train_per_kind {
        cfg.corpus.train_per_kind = n;
    }
    if let Some(n) = a.eval_per_kind {
        cfg.corpus.eval_per_kind = n;
    }
    if let Some(n) = a.symbols_per_role {
        cfg.symbols_per_role = n;
    }
    prepare_out(&cfg, &a.common.out)?;
    let corpus = generated_corpus(&cfg)?;
    write_dataset(&corpus.train, &a.common.out.join("train.jsonl"))?;
    write_dataset(&corpus.eval, &a.common.out.join("eval.jsonl"))?;
    eprintln!(
        "wrote {} train and {} eval episodes to {}",
        corpus.train.len(),
        corpus.eval.len(),
        a.common.out.display()
    );
    Ok(())
}

fn resolve(t: &TrainArgs) -> Result<(TrainConfig, Corpus), Failure> {
    let mut cfg = base_config(&t.common)?;
    apply(&mut cfg, &t.overrides)?;
    let corpus = load_corpus(&mut cfg, t.dataset.as_deref())?;
    if corpus.train.is_empty() {
        return Err(Error::Empty("training set").into());
    }
    prepare_out(&cfg, &t.common.out)?;
    Ok((cfg, corpus))
}

fn train_sft(a: TrainArgs) -> Outcome {
    let (cfg, corpus) = resolve(&a)?;
    let out = &a.common.out;
    let trainer = Trainer::new(&cfg)?;
    let mut policies = Policies::new(&trainer.vocab);
    let mut log = RunLog::new(&cfg, Some("sft"));
    trainer.sft(&mut policies, &corpus.train, &mut log)?;
    policies.save(out, "sft-")?;
    log.write(&out.join("sft.jsonl"))?;
    eprintln!("saved SFT policies to {}", out.display());
    Ok(())
}

fn ids(corpus: &Corpus) -> HashSet<String> {
    corpus.train.iter().map(|e| e.id.clone()).collect()
}

fn write_table(table: &MetricTable, label: &str, out: &Path) -> Result<(), Error> {
    for kind in QuestionKind::ALL {
        if let Some(row) = table.split(kind) {
            write_report(&[ReportRow::new(label, row)], out, kind.name())?;
        }
    }
    Ok(())
}

fn train_joint(a: TrainJointArgs) -> Outcome {
    let (cfg, corpus) = resolve(&a.train)?;
    let out = &a.train.common.out;
    let train_ids = ids(&corpus);
    let monitor = Monitor {
        checkpoint_dir: Some(out.join("checkpoints")),
        eval: (!corpus.eval.is_empty()).then_some((corpus.eval.as_slice(), &train_ids)),
    };
    let trainer = Trainer::new(&cfg)?.with_monitor(monitor);
    let mut log = RunLog::new(&cfg, Some(&a.variant.to_string()));
    let init = match &a.init {
        Some(dir) => Policies::load(dir, "sft-")?,
        None => {
            let mut p = Policies::new(&trainer.vocab);
            trainer.sft(&mut p, &corpus.train, &mut log)?;
            p.save(out, "sft-")?;
            p
        }
    };
    let (policies, run_log) = trainer.run_variant(&a.variant, &init, &corpus.train)?;
    log.extend(run_log);
    policies.save(out, "final-")?;
    log.write(&out.join("run.jsonl"))?;
    if !corpus.eval.is_empty() {
        let table = evaluate(
            &policies.captioner,
            &policies.frame,
            &corpus.eval,
            &train_ids,
            &trainer.vocab,
            cfg.ref_frames,
        )?;
        write_table(&table, &a.variant.to_string(), out)?;
    }
    eprintln!("trained {} into {}", a.variant, out.display());
    Ok(())
}

fn parse_seeds(arg: Option<&str>, first: u64) -> Result<Vec<u64>, Failure> {
    let bad = |s: &str| {
        Failure::Usage(format!(
            "invalid value {s:?} for '--seeds': expected a count or a comma-separated list"
        ))
    };
    let Some(s) = arg else {
        return Ok(vec![first]);
    };
    let seeds: Vec<u64> = if s.contains(',') {
        s.split(',')
            .map(|x| x.trim().parse().map_err(|_| bad(s)))
            .collect::<Result<_, _>>()?
    } else {
        let n: u64 = s.trim().parse().map_err(|_| bad(s))?;
        (first..first + n).collect()
    };
    let unique: HashSet<u64> = seeds.iter().copied().collect();
    if seeds.is_empty() || unique.len() != seeds.len() {
        return Err(bad(s));
    }
    Ok(seeds)
}

fn median_row(rows: &[&MetricRow]) -> MetricRow {
    let col = |k: usize| median(&rows.iter().map(|r| r.values()[k]).collect::<Vec<_>>()).unwrap_or(f64::NAN);
    MetricRow {
        episodes: rows.first().map_or(0, |r| r.episodes),
        bleu1: col(0),
        bleu2: col(1),
        bleu3: col(2),
        bleu4: col(3),
        rouge_l: col(4),
        frechet: col(5),
        clip_v: col(6),
        clip_t: col(7),
    }
}

fn ablate(a: AblateArgs) -> Outcome {
    let seeds = parse_seeds(a.seeds.as_deref(), a.train.common.seed.unwrap_or(0))?;
    let (cfg, corpus) = resolve(&a.train)?;
    if corpus.eval.is_empty() {
        return Err(Error::Empty("evaluation set").into());
    }
    let out = &a.train.common.out;
    let variants = &a.variants.0;
    let cells = ablation_sweep(variants, &seeds, &corpus.train, &corpus.eval, &cfg)?;
    for cell in &cells {
        let dir = out.join("cells").join(format!("{}_seed{}", cell.variant, cell.seed));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        cell.log.write(&dir.join("run.jsonl"))?;
        cell.policies.save(&dir, "final-")?;
    }
    for kind in QuestionKind::ALL {
        let mut per_cell = Vec::new();
        let mut by_variant: BTreeMap<String, Vec<&MetricRow>> = BTreeMap::new();
        for cell in &cells {
            if let Some(row) = cell.table.split(kind) {
                let name = cell.variant.to_string();
                per_cell.push(ReportRow::new(&format!("{name}@seed{}", cell.seed), row));
                by_variant.entry(name).or_default().push(row);
            }
        }
        if per_cell.is_empty() {
            continue;
        }
        let medians: Vec<ReportRow> = by_variant
            .iter()
            .map(|(name, rows)| ReportRow::new(name, &median_row(rows)))
            .collect();
        write_report(&per_cell, out, &format!("{}_cells", kind.name()))?;
        write_report(&medians, out, &format!("{}_median", kind.name()))?;
    }
    eprintln!(
        "ablated {} variants x {} seeds into {}",
        variants.len(),
        seeds.len(),
        out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome {
    let mut cfg = base_config(&a.common)?;
    let corpus = load_corpus(&mut cfg, a.dataset.as_deref())?;
    prepare_out(&cfg, &a.common.out)?;
    let policies = Policies::load(&a.checkpoint, &a.prefix)?;
    let table = evaluate(
        &policies.captioner,
        &policies.frame,
        &corpus.eval,
        &ids(&corpus),
        &cfg.vocab()?,
        cfg.ref_frames,
    )?;
    write_table(&table, &a.name, &a.common.out)?;
    eprintln!("wrote evaluation report to {}", a.common.out.display());
    Ok(())
}
