//! Command-line interface.
//!
//! Exit codes: 0 success, 1 invalid input or arguments, 2 file-system error.

use std::collections::HashMap;
use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use rescorer_core::metrics::{corpus_wer, word_errors};
use rescorer_core::model::{CostModel, ParamCount};
use rescorer_core::scoring::{rescore_nbest, rank};
use rescorer_core::synth::ToyTask;
use rescorer_core::train::{self, CheckedLoss, GradCheckOptions, ToyTrainConfig};
use rescorer_core::vocab::Vocabulary;
use rescorer_core::{LstmRescorerConfig, RescorerConfig, TransformerRescorer};

use crate::bench::{self, BenchOptions, Engine, Scale};
use crate::io::nbest::{self, encode_features, HypRecord, NBestError, NBestRecord};
use crate::io::weights::{self, WeightFileError};
use crate::io::write_atomic;
use crate::ThreadExecutor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_IO: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "rescorer", version, about = "Second-pass N-best rescoring toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rescore an N-best file and write a results CSV.
    Rescore(RescoreArgs),
    /// Measure rescoring latency on a synthetic suite.
    Bench(BenchArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Train a toy rescorer with CE then MWER.
    TrainToy(TrainToyArgs),
    /// Print the parameter count of a named configuration.
    Params(ConfigArgs),
    /// Print multiply-accumulates per hypothesis of a named configuration.
    Flops(FlopsArgs),
    /// Corpus WER of the top-ranked hypotheses in a results CSV.
    Wer(WerArgs),
    /// Write a randomly initialized weight file.
    Init(InitArgs),
}

#[derive(Debug, Args)]
struct RescoreArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    nbest: PathBuf,
    /// Results CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Weight of the first-pass score.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    quantized: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Engines to time, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "transformer-parallel,lstm-sequential")]
    engine: Vec<Engine>,
    /// Worker counts, comma separated; every engine runs at each.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    threads: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    suite_seed: u64,
    #[arg(long, default_value_t = bench::DEFAULT_SUITE_SIZE)]
    n: usize,
    #[arg(long)]
    quantized: bool,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    /// `paper` or `toy` model dimensions.
    #[arg(long, default_value = "paper")]
    scale: Scale,
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
    /// Print per-percentile latency columns instead of the summary.
    #[arg(long)]
    fig4: bool,
    /// Per-utterance timing CSV.
    #[arg(long)]
    rows: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// `toy` or `paper-scaled`.
    #[arg(long, default_value = "toy")]
    config: String,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainToyArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    epochs_ce: Option<usize>,
    #[arg(long)]
    epochs_mwer: Option<usize>,
    #[arg(long)]
    train_utterances: Option<usize>,
    #[arg(long)]
    dev_utterances: Option<usize>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Directory for trace.csv, model.trsc and the dev N-best set.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// paper, paper-2cross, paper-4cross, paper-scaled, toy, lstm-baseline or lstm-toy.
    #[arg(long, default_value = "paper")]
    config: String,
}

#[derive(Debug, Args)]
struct FlopsArgs {
    #[arg(long, default_value = "paper")]
    config: String,
    #[arg(long, default_value_t = 12)]
    hyp_len: usize,
}

#[derive(Debug, Args)]
struct WerArgs {
    #[arg(long)]
    results: PathBuf,
    /// N-best file supplying hypothesis tokens and references.
    #[arg(long)]
    nbest: PathBuf,
    /// Piece table, one piece per line; synthetic pieces when omitted.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InitArgs {
    /// A transformer configuration name.
    #[arg(long, default_value = "toy")]
    config: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Invalid(String),
    Io(String),
}

type CliResult<T = ()> = Result<T, CliError>;

fn invalid(e: impl Display) -> CliError {
    CliError::Invalid(e.to_string())
}

fn io_error(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| {
        if e.is_io_error() {
            CliError::Io(format!("{}: {e}", path.display()))
        } else {
            CliError::Invalid(format!("{}: {e}", path.display()))
        }
    }
}

impl From<WeightFileError> for CliError {
    fn from(e: WeightFileError) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Invalid(e.to_string())
        }
    }
}

impl From<NBestError> for CliError {
    fn from(e: NBestError) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Invalid(e.to_string())
        }
    }
}

impl From<rescorer_core::Error> for CliError {
    fn from(e: rescorer_core::Error) -> Self {
        invalid(e)
    }
}

enum NamedConfig {
    Transformer(RescorerConfig),
    Lstm(LstmRescorerConfig),
}

impl NamedConfig {
    fn parse(name: &str) -> CliResult<Self> {
        Ok(match name {
            "paper" | "paper-2cross" => NamedConfig::Transformer(RescorerConfig::paper()),
            "paper-4cross" => NamedConfig::Transformer(RescorerConfig::paper_with_cross(&[1, 2, 3, 4])),
            "paper-scaled" => NamedConfig::Transformer(RescorerConfig::paper_scaled()),
            "toy" => NamedConfig::Transformer(RescorerConfig::toy()),
            "lstm-baseline" => NamedConfig::Lstm(LstmRescorerConfig::baseline()),
            "lstm-toy" => NamedConfig::Lstm(LstmRescorerConfig::toy()),
            other => return Err(invalid(format!("unknown configuration `{other}`"))),
        })
    }

    fn cost(&self) -> &dyn CostModel {
        match self {
            NamedConfig::Transformer(c) => c,
            NamedConfig::Lstm(c) => c,
        }
    }
}

fn transformer_config(name: &str) -> CliResult<RescorerConfig> {
    match NamedConfig::parse(name)? {
        NamedConfig::Transformer(c) => Ok(c),
        NamedConfig::Lstm(_) => Err(invalid(format!("`{name}` is not a transformer configuration"))),
    }
}

fn threads(n: usize) -> CliResult<ThreadExecutor> {
    ThreadExecutor::new(n).ok_or_else(|| invalid("--threads must be at least 1"))
}

/// Runs the tool with `args` (program name first) and returns the exit code.
pub fn run_cli_with<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                EXIT_INVALID
            } else {
                let _ = write!(out, "{text}");
                EXIT_OK
            };
        }
    };
    let result = match cli.command {
        Command::Rescore(a) => rescore(a, out),
        Command::Bench(a) => run_bench(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::TrainToy(a) => train_toy(a, out),
        Command::Params(a) => params(a, out),
        Command::Flops(a) => flops(a, out),
        Command::Wer(a) => wer(a, out),
        Command::Init(a) => init(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(CliError::Invalid(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_INVALID
        }
        Err(CliError::Io(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_IO
        }
    }
}

/// Runs the tool on the process arguments and standard streams.
pub fn run_cli() -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_cli_with(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}

fn emit(out: &mut dyn Write, text: impl Display) -> CliResult {
    writeln!(out, "{text}").map_err(|e| CliError::Io(format!("stdout: {e}")))
}

/// Writes `bytes` to `path`, or to `out` when there is no path.
fn deliver(path: Option<&Path>, bytes: &[u8], out: &mut dyn Write) -> CliResult {
    match path {
        Some(p) => write_atomic(p, bytes).map_err(io_error(p)),
        None => out.write_all(bytes).map_err(|e| CliError::Io(format!("stdout: {e}"))),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ResultRow {
    uid: String,
    hyp_index: usize,
    first_pass: f64,
    second_pass: f64,
    combined: f64,
    /// 1 is best.
    rank: usize,
}

fn rescore(a: RescoreArgs, out: &mut dyn Write) -> CliResult {
    let exec = threads(a.threads)?;
    let mut model = weights::load_model(&a.weights)?;
    if a.quantized {
        model.quantize()?;
    }
    let enc_in = model.config().enc_in_dim;
    let mut w = csv::Writer::from_writer(Vec::new());
    for pending in nbest::parse_nbest(&a.nbest)? {
        let list = pending?.load(enc_in)?;
        let result = rescore_nbest(&model, &exec, &list, a.lambda)
            .map_err(|e| invalid(format!("{}: {e}", list.uid)))?;
        let mut position = vec![0; list.hyps.len()];
        for (r, &i) in result.ranking.iter().enumerate() {
            position[i] = r + 1;
        }
        for (i, h) in list.hyps.iter().enumerate() {
            w.serialize(ResultRow {
                uid: list.uid.clone(),
                hyp_index: i,
                first_pass: h.first_pass_log_prob,
                second_pass: result.second_pass_log_prob[i],
                combined: result.combined_score[i],
                rank: position[i],
            })
            .map_err(invalid)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| invalid(e.error()))?;
    deliver(a.out.as_deref(), &bytes, out)
}

fn run_bench(a: BenchArgs, out: &mut dyn Write) -> CliResult {
    let suite = bench::generate_suite(a.n, a.suite_seed).map_err(invalid)?;
    let mut reports = Vec::new();
    for &engine in &a.engine {
        for &t in &a.threads {
            let options = BenchOptions {
                engine,
                threads: t,
                quantized: a.quantized,
                warmup: a.warmup,
                reps: a.reps,
                scale: a.scale,
                model_seed: a.model_seed,
            };
            reports.push(bench::run_benchmark(&suite, &options).map_err(invalid)?);
        }
    }
    if let Some(path) = &a.rows {
        let mut buf = Vec::new();
        bench::write_rows_csv(&reports, &mut buf).map_err(invalid)?;
        write_atomic(path, &buf).map_err(io_error(path))?;
    }
    let mut buf = Vec::new();
    if a.fig4 {
        bench::write_fig4_csv(&reports, &mut buf)
    } else {
        bench::write_summary_csv(&reports, &mut buf)
    }
    .map_err(invalid)?;
    deliver(None, &buf, out)
}

fn gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> CliResult {
    let config = match a.config.as_str() {
        "toy" => RescorerConfig::toy(),
        "paper-scaled" => RescorerConfig::paper_scaled(),
        other => return Err(invalid(format!("gradcheck supports toy and paper-scaled, not `{other}`"))),
    };
    if !(a.tolerance > 0.0) {
        return Err(invalid("--tolerance must be positive"));
    }
    let options = GradCheckOptions {
        tolerance: a.tolerance,
        seed: a.seed,
        ..GradCheckOptions::default()
    };
    let mut failed = Vec::new();
    for (label, loss) in [("ce", CheckedLoss::CrossEntropy), ("mwer", CheckedLoss::Mwer)] {
        let report = train::rescorer_grad_check(&config, loss, a.seed, &options)?;
        for t in &report.tensors {
            emit(out, format_args!("{label}\t{}\t{}\t{:.3e}", t.name, t.checked, t.max_rel_error))?;
        }
        let verdict = if report.passed() { "ok" } else { "FAILED" };
        emit(
            out,
            format_args!(
                "{label}: max relative error {:.3e} ({}) tolerance {:.1e}: {verdict}",
                report.max_rel_error,
                report.worst.as_deref().unwrap_or("-"),
                report.tolerance
            ),
        )?;
        if !report.passed() {
            failed.push(label);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(invalid(format!("gradient check failed for {}", failed.join(", "))))
    }
}

#[derive(Serialize)]
struct TraceRecord {
    epoch: usize,
    stage: &'static str,
    loss: Option<f64>,
    dev_wer: f64,
    dev_ce: f64,
    dev_expected_errors: f64,
}

fn train_toy(a: TrainToyArgs, out: &mut dyn Write) -> CliResult {
    let exec = threads(a.threads)?;
    let mut config = ToyTrainConfig {
        seed: a.seed,
        ..ToyTrainConfig::default()
    };
    if let Some(n) = a.epochs_ce {
        config.epochs_ce = n;
    }
    if let Some(n) = a.epochs_mwer {
        config.epochs_mwer = n;
    }
    if let Some(n) = a.train_utterances {
        config.train_utterances = n;
    }
    if let Some(n) = a.dev_utterances {
        config.dev_utterances = n;
    }
    let outcome = train::train_toy(&config, &exec)?;

    let dir = &a.out;
    std::fs::create_dir_all(dir.join("features")).map_err(io_error(dir))?;
    let mut trace = csv::Writer::from_writer(Vec::new());
    for r in &outcome.trace {
        trace
            .serialize(TraceRecord {
                epoch: r.epoch,
                stage: r.stage.as_str(),
                loss: r.loss,
                dev_wer: r.dev_wer,
                dev_ce: r.dev_ce,
                dev_expected_errors: r.dev_expected_errors,
            })
            .map_err(invalid)?;
    }
    let trace = trace.into_inner().map_err(|e| invalid(e.error()))?;
    let path = dir.join("trace.csv");
    write_atomic(&path, &trace).map_err(io_error(&path))?;
    weights::save_model(&dir.join("model.trsc"), &outcome.model)?;

    // The dev set, so that `rescore` and `wer` can be run on it.
    let task = ToyTask::new(config.task.clone(), config.seed);
    let mut lines = String::new();
    for u in task.dataset(1, config.dev_utterances) {
        let rel = format!("features/{}.f32", u.nbest.uid);
        let path = dir.join(&rel);
        write_atomic(&path, &encode_features(&u.nbest.features)).map_err(io_error(&path))?;
        let record = NBestRecord {
            uid: u.nbest.uid.clone(),
            features: rel,
            hyps: u
                .nbest
                .hyps
                .iter()
                .map(|h| HypRecord {
                    tokens: h.tokens.clone(),
                    score: h.first_pass_log_prob,
                })
                .collect(),
            reference: u.nbest.reference_words.as_ref().map(|w| w.join(" ")),
        };
        lines.push_str(&nbest::to_line(&record));
        lines.push('\n');
    }
    let path = dir.join("dev.jsonl");
    write_atomic(&path, lines.as_bytes()).map_err(io_error(&path))?;

    let last = outcome.trace.last().expect("trace has an initial row");
    emit(
        out,
        format_args!(
            "first-pass WER {:.4}, rescored WER {:.4}, dev CE {:.4}, expected errors {:.4}",
            outcome.first_pass_wer, last.dev_wer, last.dev_ce, last.dev_expected_errors
        ),
    )
}

fn format_millions(n: u64) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

fn params(a: ConfigArgs, out: &mut dyn Write) -> CliResult {
    let ParamCount {
        rescorer,
        additional_encoder,
    } = NamedConfig::parse(&a.config)?.cost().param_count();
    emit(out, format_args!("config {}", a.config))?;
    emit(out, format_args!("params {rescorer} ({})", format_millions(rescorer)))?;
    emit(
        out,
        format_args!(
            "additional_encoder {additional_encoder} ({})",
            format_millions(additional_encoder)
        ),
    )?;
    let total = rescorer + additional_encoder;
    emit(out, format_args!("total {total} ({})", format_millions(total)))
}

fn flops(a: FlopsArgs, out: &mut dyn Write) -> CliResult {
    let n = NamedConfig::parse(&a.config)?.cost().flops_per_hypothesis(a.hyp_len);
    emit(
        out,
        format_args!("config {} hyp_len {} flops {n} ({})", a.config, a.hyp_len, format_millions(n)),
    )
}

fn read_vocab(path: &Path) -> CliResult<Vocabulary> {
    let text = std::fs::read_to_string(path).map_err(io_error(path))?;
    Ok(Vocabulary::new(text.lines().map(str::to_string).collect()))
}

fn wer(a: WerArgs, out: &mut dyn Write) -> CliResult {
    let mut best: HashMap<String, usize> = HashMap::new();
    let mut reader = csv::Reader::from_path(&a.results).map_err(csv_error(&a.results))?;
    for row in reader.deserialize::<ResultRow>() {
        let row = row.map_err(csv_error(&a.results))?;
        if row.rank == 1 {
            best.insert(row.uid, row.hyp_index);
        }
    }
    let mut records = Vec::new();
    for pending in nbest::parse_nbest(&a.nbest)? {
        records.push(pending?.record);
    }
    let vocab = match &a.vocab {
        Some(p) => read_vocab(p)?,
        None => {
            let max_id = records
                .iter()
                .flat_map(|r| r.hyps.iter().flat_map(|h| h.tokens.iter().copied()))
                .max()
                .unwrap_or(0);
            Vocabulary::synthetic(max_id as usize + 1)
        }
    };
    let (mut rescored, mut first_pass) = (Vec::new(), Vec::new());
    for r in &records {
        let reference: Vec<&str> = r
            .reference
            .as_deref()
            .ok_or_else(|| invalid(format!("{}: no reference", r.uid)))?
            .split_whitespace()
            .collect();
        let chosen = *best
            .get(&r.uid)
            .ok_or_else(|| invalid(format!("{}: missing from results", r.uid)))?;
        let hyp = r
            .hyps
            .get(chosen)
            .ok_or_else(|| invalid(format!("{}: hypothesis {chosen} out of range", r.uid)))?;
        rescored.push(word_errors(&reference, &vocab.detokenize(&hyp.tokens)));
        let scores: Vec<f64> = r.hyps.iter().map(|h| h.score).collect();
        if let Some(&top) = rank(&scores).first() {
            first_pass.push(word_errors(&reference, &vocab.detokenize(&r.hyps[top].tokens)));
        }
    }
    let wer = corpus_wer(&rescored)?;
    let first = corpus_wer(&first_pass)?;
    emit(out, format_args!("utterances {}", records.len()))?;
    emit(out, format_args!("first_pass_wer {first:.6}"))?;
    emit(out, format_args!("rescored_wer {wer:.6}"))
}

fn init(a: InitArgs, out: &mut dyn Write) -> CliResult {
    let config = transformer_config(&a.config)?;
    let model = TransformerRescorer::<f32>::random(config, a.seed)?;
    weights::save_model(&a.out, &model)?;
    emit(out, format_args!("wrote {}", a.out.display()))
}
