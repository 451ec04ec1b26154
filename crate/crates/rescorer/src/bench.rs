//! Latency benchmark: a synthetic utterance suite, wall-time measurement of
//! the rescoring engines and nearest-rank percentile summaries.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use rescorer_core::model::ForwardCounters;
use rescorer_core::scoring::{rescore_nbest, HypothesisScorer};
use rescorer_core::vocab::FIRST_PIECE;
use rescorer_core::{
    Hypothesis, LstmRescorer, LstmRescorerConfig, NBestList, RescorerConfig, Tensor,
    TransformerRescorer,
};

use crate::ThreadExecutor;

/// Milliseconds of audio per encoder frame.
pub const FRAME_MS: f64 = 30.0;
pub const MIN_AUDIO_S: f64 = 1.5;
pub const MAX_AUDIO_S: f64 = 9.3;
pub const MIN_HYP_LEN: usize = 3;
pub const MAX_HYP_LEN: usize = 29;
pub const HYPS_PER_UTTERANCE: usize = 4;
pub const DEFAULT_SUITE_SIZE: usize = 89;
/// The reference utterance always placed first: 6 s of audio, 12 tokens.
pub const ANCHOR_AUDIO_S: f64 = 6.0;
pub const ANCHOR_HYP_LEN: usize = 12;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("suite needs at least one utterance")]
    EmptySuite,
    #[error("thread count must be at least 1")]
    Threads,
    #[error("at least one timed repetition is required")]
    Reps,
    #[error("{uid}: {source}")]
    Engine {
        uid: String,
        source: rescorer_core::Error,
    },
    #[error(transparent)]
    Model(#[from] rescorer_core::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchUtterance {
    pub uid: String,
    pub frames: usize,
    pub hyp_lens: Vec<usize>,
    /// Seeds the token ids and features of this utterance.
    pub content_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSuite {
    pub seed: u64,
    pub utterances: Vec<BenchUtterance>,
}

pub fn frames_for(seconds: f64) -> usize {
    (seconds * 1000.0 / FRAME_MS).round() as usize
}

/// `n` utterances: the anchor, then durations uniform over
/// `[MIN_AUDIO_S, MAX_AUDIO_S]` and hypothesis lengths uniform over
/// `[MIN_HYP_LEN, MAX_HYP_LEN]`.
pub fn generate_suite(n: usize, seed: u64) -> Result<BenchSuite, BenchError> {
    if n == 0 {
        return Err(BenchError::EmptySuite);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut utterances = Vec::with_capacity(n);
    utterances.push(BenchUtterance {
        uid: "bench-0000".into(),
        frames: frames_for(ANCHOR_AUDIO_S),
        hyp_lens: vec![ANCHOR_HYP_LEN; HYPS_PER_UTTERANCE],
        content_seed: rng.random(),
    });
    for i in 1..n {
        let seconds = rng.random_range(MIN_AUDIO_S..=MAX_AUDIO_S);
        let hyp_lens = (0..HYPS_PER_UTTERANCE)
            .map(|_| rng.random_range(MIN_HYP_LEN..=MAX_HYP_LEN))
            .collect();
        utterances.push(BenchUtterance {
            uid: format!("bench-{i:04}"),
            frames: frames_for(seconds),
            hyp_lens,
            content_seed: rng.random(),
        });
    }
    Ok(BenchSuite { seed, utterances })
}

impl BenchUtterance {
    /// Random features and token ids for a model with the given dimensions.
    pub fn materialize(&self, enc_in_dim: usize, vocab_size: usize) -> NBestList<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.content_seed);
        let features = Tensor::from_fn(&[self.frames, enc_in_dim], |_| rng.random_range(-1.0..1.0));
        let hyps = self
            .hyp_lens
            .iter()
            .map(|&len| Hypothesis {
                tokens: (0..len)
                    .map(|_| rng.random_range(FIRST_PIECE..vocab_size as u32))
                    .collect(),
                first_pass_log_prob: -rng.random_range(0.0..10.0),
            })
            .collect();
        NBestList {
            uid: self.uid.clone(),
            features,
            hyps,
            reference_words: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Engine {
    /// Transformer with cross-attention on layers 1 and 3.
    TransformerParallel,
    /// Transformer with cross-attention on every layer.
    Transformer4Cross,
    LstmSequential,
}

impl Engine {
    pub const ALL: [Engine; 3] = [
        Engine::TransformerParallel,
        Engine::Transformer4Cross,
        Engine::LstmSequential,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Engine::TransformerParallel => "transformer-parallel",
            Engine::Transformer4Cross => "transformer-4cross",
            Engine::LstmSequential => "lstm-sequential",
        }
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Engine {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Engine::ALL
            .into_iter()
            .find(|e| e.label() == s)
            .ok_or_else(|| format!("unknown engine `{s}`"))
    }
}

/// Model dimensions to benchmark at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Paper,
    Toy,
}

impl FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "paper" => Ok(Scale::Paper),
            "toy" => Ok(Scale::Toy),
            _ => Err(format!("unknown scale `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub engine: Engine,
    pub threads: usize,
    pub quantized: bool,
    pub warmup: usize,
    pub reps: usize,
    pub scale: Scale,
    /// Seeds the random model weights.
    pub model_seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            engine: Engine::TransformerParallel,
            threads: 1,
            quantized: false,
            warmup: 3,
            reps: 10,
            scale: Scale::Paper,
            model_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub uid: String,
    pub frames: usize,
    pub max_hyp_len: usize,
    pub batch_size: usize,
    /// Median wall time of the timed repetitions.
    pub ms: f64,
    /// Batched decoder forwards during one rescoring call.
    pub batched_forwards: u64,
    /// Sequential decoder steps during one rescoring call.
    pub sequential_steps: u64,
    pub second_pass_log_probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Percentiles {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub engine: Engine,
    pub threads: usize,
    pub quantized: bool,
    pub scale: Scale,
    pub rows: Vec<TimingRow>,
    pub percentiles: Percentiles,
    pub environment: String,
}

impl LatencyReport {
    /// `engine/threads/quantization`, used as a column label.
    pub fn label(&self) -> String {
        format!(
            "{}-t{}-{}",
            self.engine,
            self.threads,
            if self.quantized { "int8" } else { "f32" }
        )
    }

    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.ms).collect()
    }

    pub fn percentile(&self, q: f64) -> f64 {
        let mut t = self.times();
        t.sort_by(f64::total_cmp);
        nearest_rank(&t, q)
    }
}

/// Nearest-rank percentile of ascending `sorted`: the value at rank
/// `ceil(q / 100 * n)`, clamped to `[1, n]`. NaN for an empty slice.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn percentiles(samples: &[f64]) -> Percentiles {
    let mut t = samples.to_vec();
    t.sort_by(f64::total_cmp);
    Percentiles {
        p50: nearest_rank(&t, 50.0),
        p90: nearest_rank(&t, 90.0),
        p99: nearest_rank(&t, 99.0),
    }
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

/// Host description recorded with every report.
pub fn environment() -> String {
    let cpus = std::thread::available_parallelism().map_or(0, |n| n.get());
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown".into());
    format!(
        "{}-{}; cpus={cpus}; cpu={model}; frame_ms={FRAME_MS}",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

enum Model {
    Transformer(TransformerRescorer<f32>),
    Lstm(LstmRescorer<f32>),
}

impl Model {
    fn build(options: &BenchOptions) -> Result<Self, BenchError> {
        let paper = options.scale == Scale::Paper;
        let mut model = match options.engine {
            Engine::TransformerParallel | Engine::Transformer4Cross => {
                let mut config = if paper { RescorerConfig::paper() } else { RescorerConfig::toy() };
                if options.engine == Engine::Transformer4Cross {
                    config.cross_attention_layers = (1..=config.num_layers).collect();
                }
                Model::Transformer(TransformerRescorer::random(config, options.model_seed)?)
            }
            Engine::LstmSequential => {
                let config = if paper {
                    LstmRescorerConfig::baseline()
                } else {
                    LstmRescorerConfig::toy()
                };
                Model::Lstm(LstmRescorer::random(config, options.model_seed)?)
            }
        };
        if options.quantized {
            match &mut model {
                Model::Transformer(m) => m.quantize()?,
                Model::Lstm(m) => m.quantize()?,
            }
        }
        Ok(model)
    }

    fn dims(&self) -> (usize, usize) {
        match self {
            Model::Transformer(m) => (m.config().enc_in_dim, m.config().vocab_size),
            Model::Lstm(m) => (m.config().enc_in_dim, m.config().vocab_size),
        }
    }

    fn scorer(&self) -> &dyn HypothesisScorer<f32> {
        match self {
            Model::Transformer(m) => m,
            Model::Lstm(m) => m,
        }
    }

    fn counters(&self) -> &ForwardCounters {
        match self {
            Model::Transformer(m) => m.counters(),
            Model::Lstm(m) => m.counters(),
        }
    }
}

/// Times rescoring of every utterance in `suite`. Each utterance is rescored
/// `warmup` times untimed, then `reps` times timed; the row keeps the median.
/// Scores are those of the last repetition.
pub fn run_benchmark(suite: &BenchSuite, options: &BenchOptions) -> Result<LatencyReport, BenchError> {
    let exec = ThreadExecutor::new(options.threads).ok_or(BenchError::Threads)?;
    if options.reps == 0 {
        return Err(BenchError::Reps);
    }
    let model = Model::build(options)?;
    let (enc_in_dim, vocab) = model.dims();
    let scorer = model.scorer();
    let counters = model.counters();
    let mut rows = Vec::with_capacity(suite.utterances.len());
    for utt in &suite.utterances {
        let nbest = utt.materialize(enc_in_dim, vocab);
        let engine_err = |source| BenchError::Engine {
            uid: utt.uid.clone(),
            source,
        };
        for _ in 0..options.warmup {
            rescore_nbest(scorer, &exec, &nbest, 1.0).map_err(engine_err)?;
        }
        let mut times = Vec::with_capacity(options.reps);
        let mut last = None;
        for _ in 0..options.reps {
            counters.reset();
            let start = Instant::now();
            let result = rescore_nbest(scorer, &exec, &nbest, 1.0);
            times.push(start.elapsed().as_secs_f64() * 1e3);
            last = Some(result.map_err(engine_err)?);
        }
        let result = last.expect("reps >= 1");
        rows.push(TimingRow {
            uid: utt.uid.clone(),
            frames: utt.frames,
            max_hyp_len: utt.hyp_lens.iter().copied().max().unwrap_or(0),
            batch_size: result.batch_size_used,
            ms: median(&mut times),
            batched_forwards: counters.batched_forwards(),
            sequential_steps: counters.sequential_steps(),
            second_pass_log_probs: result.second_pass_log_prob,
        });
    }
    let percentiles = percentiles(&rows.iter().map(|r| r.ms).collect::<Vec<_>>());
    Ok(LatencyReport {
        engine: options.engine,
        threads: options.threads,
        quantized: options.quantized,
        scale: options.scale,
        rows,
        percentiles,
        environment: environment(),
    })
}

#[derive(Serialize)]
struct RowRecord<'a> {
    uid: &'a str,
    engine: &'static str,
    threads: usize,
    quantized: bool,
    #[serde(rename = "T")]
    frames: usize,
    max_hyp_len: usize,
    batch_size: usize,
    ms: String,
}

/// One line per utterance and report.
pub fn write_rows_csv<W: Write>(reports: &[LatencyReport], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for report in reports {
        for row in &report.rows {
            w.serialize(RowRecord {
                uid: &row.uid,
                engine: report.engine.label(),
                threads: report.threads,
                quantized: report.quantized,
                frames: row.frames,
                max_hyp_len: row.max_hyp_len,
                batch_size: row.batch_size,
                ms: format!("{:.4}", row.ms),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SummaryRecord<'a> {
    engine: &'static str,
    threads: usize,
    quantized: bool,
    utterances: usize,
    p50_ms: String,
    p90_ms: String,
    p99_ms: String,
    environment: &'a str,
}

/// One line per report with its p50/p90/p99.
pub fn write_summary_csv<W: Write>(reports: &[LatencyReport], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(SummaryRecord {
            engine: r.engine.label(),
            threads: r.threads,
            quantized: r.quantized,
            utterances: r.rows.len(),
            p50_ms: format!("{:.4}", r.percentiles.p50),
            p90_ms: format!("{:.4}", r.percentiles.p90),
            p99_ms: format!("{:.4}", r.percentiles.p99),
            environment: &r.environment,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Percentiles tabulated for plotting.
pub const FIG4_PERCENTILES: [u32; 12] = [10, 20, 30, 40, 50, 60, 70, 80, 90, 95, 99, 100];

/// One line per percentile, one latency column per report.
pub fn write_fig4_csv<W: Write>(reports: &[LatencyReport], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["percentile".to_string()];
    header.extend(reports.iter().map(LatencyReport::label));
    w.write_record(&header)?;
    let sorted: Vec<Vec<f64>> = reports
        .iter()
        .map(|r| {
            let mut t = r.times();
            t.sort_by(f64::total_cmp);
            t
        })
        .collect();
    for q in FIG4_PERCENTILES {
        let mut record = vec![q.to_string()];
        record.extend(sorted.iter().map(|t| format!("{:.4}", nearest_rank(t, f64::from(q)))));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_on_ten_samples() {
        let s: Vec<f64> = (1..=10).map(|v| v as f64 * 10.0).collect();
        assert_eq!(nearest_rank(&s, 50.0), 50.0);
        assert_eq!(nearest_rank(&s, 90.0), 90.0);
        assert_eq!(nearest_rank(&s, 91.0), 100.0);
        assert_eq!(nearest_rank(&s, 99.0), 100.0);
        assert_eq!(nearest_rank(&s, 5.0), 10.0);
        assert_eq!(nearest_rank(&s, 0.0), 10.0);
        assert_eq!(nearest_rank(&s, 100.0), 100.0);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn frame_rate() {
        assert_eq!(frames_for(6.0), 200);
        assert_eq!(frames_for(1.5), 50);
        assert_eq!(frames_for(9.3), 310);
    }

    #[test]
    fn engine_labels_round_trip() {
        for e in Engine::ALL {
            assert_eq!(e.label().parse::<Engine>().unwrap(), e);
        }
        assert!("gru".parse::<Engine>().is_err());
    }
}
