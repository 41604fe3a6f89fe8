//! `strucfill`: tokenize, build datasets, train, infill and evaluate.
//!
//! Every flag can also be set through a `STRUCFILL_*` environment variable.
//! Precedence is flag, then env, then request file, then `--config`, then
//! built-in defaults.

mod config;
mod request;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use strucfill::checkpoint;
use strucfill::infill::{copy_baseline, generate, InfillRequest, DEFAULT_MAX_TOKENS};
use strucfill::ingest::{
    build_test_cases, build_training_examples, load_corpus_dir, load_midi, make_synthetic_corpus, read_dataset, split_corpus, write_dataset, write_melody_bars, DEFAULT_FORMS,
};
use strucfill::metrics::{evaluate, MetricsReport};
use strucfill::model::Model;
use strucfill::structure::parse_annotation_file;
use strucfill::tokenizer::{decode, encode_bars, Bar, Token, TokenSeq};
use strucfill::train::{train_loop, TrainConfig};
use strucfill::{Error, Scalar};

use config::{Precision, Preset, RunConfig};
use request::{parse_plan, Plan, RequestFile, SamplingOverrides};

#[derive(Parser, Debug)]
#[command(name = "strucfill", version, about = "Structure-aware melody infilling")]
struct Cli {
    /// Seed for splits, initialization, batching and sampling.
    #[arg(long, global = true, env = "STRUCFILL_SEED")]
    seed: Option<u64>,
    /// TOML run configuration.
    #[arg(long, global = true, env = "STRUCFILL_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Encode one song's melody as a token line.
    Tokenize(TokenizeArgs),
    /// Split a corpus into songs and write train/test example files.
    BuildDataset(BuildDatasetArgs),
    /// Train a model on a dataset file and save a checkpoint.
    Train(TrainArgs),
    /// Generate a target phrase for a request file or for every case of a dataset.
    Infill(InfillArgs),
    /// Score generated targets against their cases.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct TokenizeArgs {
    #[arg(long, env = "STRUCFILL_MIDI")]
    midi: PathBuf,
    /// `song_id<TAB>annotation` lines.
    #[arg(long, env = "STRUCFILL_ANNOTATIONS")]
    annotations: PathBuf,
    /// Defaults to the MIDI file stem.
    #[arg(long, env = "STRUCFILL_SONG_ID")]
    song_id: Option<String>,
    #[arg(long, env = "STRUCFILL_OUT")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BuildDatasetArgs {
    /// Directory with `annotations.tsv` and `<song_id>.mid` files.
    #[arg(long, env = "STRUCFILL_CORPUS_DIR", conflicts_with = "synthetic", required_unless_present = "synthetic")]
    corpus_dir: Option<PathBuf>,
    /// Generate a synthetic corpus instead of reading one.
    #[arg(long, env = "STRUCFILL_SYNTHETIC")]
    synthetic: bool,
    #[arg(long, env = "STRUCFILL_SONGS", default_value_t = 16)]
    songs: usize,
    /// Synthetic song form such as "i2 A4 B4 A4 o2"; repeat for several.
    #[arg(long = "form")]
    forms: Vec<String>,
    /// Fraction of songs on the training side.
    #[arg(long, env = "STRUCFILL_RATIO", default_value_t = 0.9)]
    ratio: f64,
    /// Output directory for train.txt and test.txt.
    #[arg(long, env = "STRUCFILL_OUT")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, env = "STRUCFILL_DATASET")]
    dataset: PathBuf,
    /// Checkpoint to write.
    #[arg(long, env = "STRUCFILL_OUT")]
    out: PathBuf,
    #[arg(long, env = "STRUCFILL_STEPS")]
    steps: Option<usize>,
    #[arg(long, env = "STRUCFILL_LR")]
    lr: Option<f64>,
    #[arg(long, env = "STRUCFILL_BATCH_SIZE")]
    batch_size: Option<usize>,
    #[arg(long, value_enum, env = "STRUCFILL_PRESET")]
    preset: Option<Preset>,
    /// Start from the small-corpus overfitting schedule.
    #[arg(long, env = "STRUCFILL_OVERFIT")]
    overfit: bool,
    /// Write `step,loss` lines here.
    #[arg(long, env = "STRUCFILL_LOG")]
    log: Option<PathBuf>,
    #[arg(long, value_enum, env = "STRUCFILL_PRECISION")]
    precision: Option<Precision>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
enum Baseline {
    #[default]
    Model,
    Copy,
}

#[derive(Args, Debug)]
struct InfillArgs {
    /// Not needed with `--baseline copy`.
    #[arg(long, env = "STRUCFILL_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Baseline::Model, env = "STRUCFILL_BASELINE")]
    baseline: Baseline,
    /// TOML request describing one infill.
    #[arg(long, env = "STRUCFILL_REQUEST", conflicts_with = "cases", required_unless_present = "cases")]
    request: Option<PathBuf>,
    /// Dataset file; one output line per case is written to `--tokens-out`.
    #[arg(long, env = "STRUCFILL_CASES")]
    cases: Option<PathBuf>,
    /// MIDI file with the generated bars.
    #[arg(long, env = "STRUCFILL_OUT")]
    out: Option<PathBuf>,
    /// Token line(s) of the generated bars.
    #[arg(long, env = "STRUCFILL_TOKENS_OUT")]
    tokens_out: Option<PathBuf>,
    /// MIDI file with past, generated and future bars in time order.
    #[arg(long, env = "STRUCFILL_SPLICED_OUT")]
    spliced_out: Option<PathBuf>,
    #[arg(long, env = "STRUCFILL_TOP_P")]
    top_p: Option<f64>,
    #[arg(long, env = "STRUCFILL_TEMPERATURE")]
    temperature: Option<f64>,
    /// Number of bars to generate.
    #[arg(long, env = "STRUCFILL_BARS")]
    bars: Option<usize>,
    /// Structure index per generated bar, e.g. "1,1,2,2".
    #[arg(long, env = "STRUCFILL_PLAN", value_parser = parse_plan)]
    plan: Option<Plan>,
    /// Always take the most probable allowed token.
    #[arg(long, env = "STRUCFILL_GREEDY")]
    greedy: bool,
    #[arg(long, env = "STRUCFILL_MAX_TOKENS")]
    max_tokens: Option<usize>,
    #[arg(long, value_enum, env = "STRUCFILL_PRECISION")]
    precision: Option<Precision>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, env = "STRUCFILL_CASES")]
    cases: PathBuf,
    /// One token line per case.
    #[arg(long, env = "STRUCFILL_OUTPUTS")]
    outputs: PathBuf,
    /// Metrics table; per-case records go to `<report>.cases.tsv`.
    #[arg(long, env = "STRUCFILL_REPORT")]
    report: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(c) = &cli.config {
        require_file(c)?;
    }
    let rc = RunConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.or(rc.seed);
    match cli.command {
        Command::Tokenize(a) => tokenize(a),
        Command::BuildDataset(a) => build_dataset(a, seed.unwrap_or(0)),
        Command::Train(a) => train(a, &rc, seed),
        Command::Infill(a) => infill(a, &rc, cli.seed),
        Command::Eval(a) => eval(a),
    }
}

fn require_file(path: &Path) -> Result<()> {
    ensure!(path.is_file(), "{} does not exist or is not a file", path.display());
    Ok(())
}

fn require_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure!(dir.is_dir(), "output directory {} does not exist", dir.display());
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn tokenize(a: TokenizeArgs) -> Result<()> {
    require_file(&a.midi)?;
    require_file(&a.annotations)?;
    require_parent(&a.out)?;
    let id = match a.song_id {
        Some(id) => id,
        None => a.midi.file_stem().and_then(|s| s.to_str()).context("cannot derive a song id from the MIDI file name")?.to_string(),
    };
    let text = fs::read_to_string(&a.annotations).with_context(|| format!("reading {}", a.annotations.display()))?;
    let annotation = parse_annotation_file(&text)
        .with_context(|| a.annotations.display().to_string())?
        .into_iter()
        .find(|(song, _)| *song == id)
        .map(|(_, ann)| ann)
        .ok_or_else(|| Error::Parse { index: 0, reason: format!("no annotation for song `{id}` in {}", a.annotations.display()) })?;
    let ids = annotation.bar_struct_ids();
    let song = load_midi(&a.midi, &id, annotation)?;
    let tokens = encode_bars(&song.bars, &ids, false)?;
    write_text(&a.out, &format!("{tokens}\n"))?;
    println!("{}: {} bars, {} tokens", id, song.bars.len(), tokens.len());
    Ok(())
}

fn build_dataset(a: BuildDatasetArgs, seed: u64) -> Result<()> {
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let songs = match &a.corpus_dir {
        Some(dir) => {
            ensure!(dir.is_dir(), "{} is not a directory", dir.display());
            load_corpus_dir(dir)?
        }
        None => {
            let forms: Vec<&str> = if a.forms.is_empty() { DEFAULT_FORMS.to_vec() } else { a.forms.iter().map(String::as_str).collect() };
            ensure!(a.songs > 0, "--songs must be positive");
            make_synthetic_corpus(seed, a.songs, &forms)
        }
    };
    let (train_songs, test_songs) = split_corpus(&songs, a.ratio, seed)?;
    let mut train = Vec::new();
    for song in &train_songs {
        train.extend(build_training_examples(song)?);
    }
    let test = build_test_cases(&test_songs)?;
    if train.is_empty() {
        return Err(Error::Coverage("no training examples could be built".into()).into());
    }
    if test.is_empty() {
        log::warn!("no test-side phrase qualifies as a test case; test.txt will be empty");
    }
    write_dataset(&a.out.join("train.txt"), &train)?;
    write_dataset(&a.out.join("test.txt"), &test)?;
    let summary = format!("songs {} (train {}, test {}); training examples {}; test cases {}", songs.len(), train_songs.len(), test_songs.len(), train.len(), test.len());
    log::info!("{summary}");
    println!("{summary}");
    Ok(())
}

fn train(a: TrainArgs, rc: &RunConfig, seed: Option<u64>) -> Result<()> {
    require_file(&a.dataset)?;
    require_parent(&a.out)?;
    if let Some(log) = &a.log {
        require_parent(log)?;
    }
    let model_cfg = rc.model_config(a.preset)?;
    let mut cfg = if a.overfit { TrainConfig::overfit() } else { rc.train.clone().unwrap_or_default() };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.max_steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    let examples = read_dataset(&a.dataset)?;
    log::info!("{} examples, {} steps, model {:?}", examples.len(), cfg.max_steps, model_cfg);
    let mut log_file = match &a.log {
        Some(p) => {
            let mut f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
            writeln!(f, "step,loss")?;
            Some((p.clone(), f))
        }
        None => None,
    };
    let losses = match a.precision.or(rc.precision).unwrap_or_default() {
        Precision::F32 => run_training::<f32>(model_cfg, &examples, &cfg, &a.out, &mut log_file)?,
        Precision::F64 => run_training::<f64>(model_cfg, &examples, &cfg, &a.out, &mut log_file)?,
    };
    match losses.last() {
        Some(l) => println!("trained {} steps, final loss {l:.6}, wrote {}", losses.len(), a.out.display()),
        None => println!("no training steps, wrote initial model to {}", a.out.display()),
    }
    Ok(())
}

fn run_training<T: Scalar>(
    model_cfg: strucfill::model::ModelConfig,
    examples: &[strucfill::ingest::InfillingExample],
    cfg: &TrainConfig,
    out: &Path,
    log_file: &mut Option<(PathBuf, fs::File)>,
) -> Result<Vec<f64>> {
    let mut model = Model::<T>::new(model_cfg, cfg.seed)?;
    let losses = train_loop(&mut model, examples, cfg, |step, loss| {
        if let Some((path, f)) = log_file.as_mut() {
            writeln!(f, "{step},{loss}").map_err(|e| Error::io(path.clone(), e))?;
        }
        if step % 100 == 0 {
            log::info!("step {step} loss {loss:.5}");
        }
        Ok(())
    })?;
    checkpoint::save(out, &model)?;
    Ok(losses)
}

enum Engine {
    F32(Model<f32>),
    F64(Model<f64>),
    Copy,
}

impl Engine {
    fn run(&self, request: &InfillRequest) -> Result<TokenSeq> {
        Ok(match self {
            Engine::F32(m) => generate(m, request)?,
            Engine::F64(m) => generate(m, request)?,
            Engine::Copy => copy_baseline(request)?,
        })
    }
}

fn infill(a: InfillArgs, rc: &RunConfig, seed_flag: Option<u64>) -> Result<()> {
    for p in a.request.iter().chain(&a.cases) {
        require_file(p)?;
    }
    for p in a.out.iter().chain(&a.tokens_out).chain(&a.spliced_out) {
        require_parent(p)?;
    }
    let engine = match a.baseline {
        Baseline::Copy => Engine::Copy,
        Baseline::Model => {
            let path = a.checkpoint.as_deref().context("--checkpoint is required unless --baseline copy is given")?;
            require_file(path)?;
            match a.precision.or(rc.precision).unwrap_or_default() {
                Precision::F32 => Engine::F32(checkpoint::load(path, None)?),
                Precision::F64 => Engine::F64(checkpoint::load(path, None)?),
            }
        }
    };
    let flags = SamplingOverrides { top_p: a.top_p, temperature: a.temperature, seed: seed_flag, greedy: a.greedy.then_some(true) };
    if let Some(cases_path) = &a.cases {
        let tokens_out = a.tokens_out.as_deref().context("--cases writes token lines and needs --tokens-out")?;
        if a.out.is_some() || a.spliced_out.is_some() || a.bars.is_some() || a.plan.is_some() {
            bail!("--out, --spliced-out, --bars and --plan apply to --request only");
        }
        let cases = read_dataset(cases_path)?;
        let sampling = flags.or(&rc.sampling.clone().or(&SamplingOverrides { seed: rc.seed, ..Default::default() })).resolve();
        let mut out = String::new();
        for (i, case) in cases.iter().enumerate() {
            // each case gets its own stream so results do not depend on case order
            let mut s = sampling.clone();
            s.seed = sampling.seed.wrapping_add(i as u64);
            let mut req = InfillRequest::from_example(case, s);
            if let Some(m) = a.max_tokens {
                req.max_tokens = m;
            }
            let tokens = engine.run(&req).with_context(|| format!("case {i}"))?;
            out.push_str(&tokens.to_string());
            out.push('\n');
        }
        write_text(tokens_out, &out)?;
        println!("wrote {} outputs to {}", cases.len(), tokens_out.display());
        return Ok(());
    }

    let request_path = a.request.as_deref().expect("clap requires --request or --cases");
    let file = RequestFile::load(request_path)?;
    let seg = file.segments()?;
    let sampling = flags.or(&file.sampling).or(&rc.sampling).or(&SamplingOverrides { seed: rc.seed, ..Default::default() }).resolve();
    let bar_count = a.bars.or(file.bar_count).context("the number of bars to generate is not set (--bars or bar_count)")?;
    let default_plan = if seg.contexts.is_empty() { 0 } else { 1 };
    let bar_plan = a.plan.clone().map(|p| p.0).or(file.bar_plan.clone()).unwrap_or_else(|| vec![default_plan; bar_count]);
    let request = InfillRequest {
        past: seg.past,
        future: seg.future,
        contexts: seg.contexts,
        bar_count,
        bar_plan,
        sampling,
        max_tokens: a.max_tokens.or(file.max_tokens).unwrap_or(DEFAULT_MAX_TOKENS),
    };
    request.validate()?;
    let tokens = engine.run(&request)?;
    let bars = decode(&tokens)?;
    if let Some(p) = &a.tokens_out {
        write_text(p, &format!("{tokens}\n"))?;
    }
    if let Some(p) = &a.out {
        write_melody_bars(p, &bars)?;
    }
    if let Some(p) = &a.spliced_out {
        let mut all: Vec<Bar> = decode(&request.past)?;
        all.extend(bars.iter().cloned());
        all.extend(decode(&request.future)?);
        write_melody_bars(p, &all)?;
    }
    if a.out.is_none() && a.tokens_out.is_none() && a.spliced_out.is_none() {
        println!("{tokens}");
    } else {
        println!("generated {} bars, {} tokens", bars.len(), tokens.len());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    require_file(&a.cases)?;
    require_file(&a.outputs)?;
    require_parent(&a.report)?;
    let cases = read_dataset(&a.cases)?;
    if cases.is_empty() {
        bail!("{} holds no test cases", a.cases.display());
    }
    let text = fs::read_to_string(&a.outputs).with_context(|| format!("reading {}", a.outputs.display()))?;
    let outputs: Vec<Vec<Token>> = text
        .lines()
        .enumerate()
        .map(|(i, line)| match line.parse::<TokenSeq>() {
            Ok(seq) => seq.0,
            Err(e) => {
                log::warn!("output {i} is not a token line ({e}); scored as a failure");
                Vec::new()
            }
        })
        .collect();
    let report = evaluate(&cases, &outputs)?;
    let table = MetricsReport::table(&[("generated", &report)]);
    write_text(&a.report, &table)?;
    let mut records = a.report.clone().into_os_string();
    records.push(".cases.tsv");
    write_text(Path::new(&records), &report.case_records())?;
    print!("{table}");
    Ok(())
}
