use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use trikv::cache::{simulate_decode, DecodeReport, PruneConfig, DEFAULT_BUDGET, DEFAULT_WINDOW};
use trikv::dfs::{generate_batch, score_batch, BatchParams, DfsBatch, ScoreTable};
use trikv::rope::DEFAULT_THETA;
use trikv::scoring::{HeadScorer, KeyRecord, OffsetSet, ScoreVariant};
use trikv::stats::{calibrate as run_calibration, Calibration, QkTrace};
use trikv::synth::{generate_trace, SynthHeadSpec, SynthProvenance};
use trikv::trig::{log_spaced_distances, reconstruction_correlation, ReconstructionReport};
use trikv::FrequencySpec;

use crate::CliError;

type CmdResult = Result<(), CliError>;

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Trace file to write.
    #[arg(long)]
    pub output: PathBuf,
    /// Provenance sidecar; defaults to `<output>.json`.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    #[arg(long, default_value_t = 1024)]
    pub tokens: usize,
    #[arg(long, default_value_t = 8)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 1)]
    pub q_heads: usize,
    #[arg(long, default_value_t = 1)]
    pub k_heads: usize,
    /// Angular concentration on every band (0 = uniform angles).
    #[arg(long, default_value_t = 50.0)]
    pub kappa: f64,
    #[arg(long, default_value_t = 0.1)]
    pub norm_jitter: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THETA)]
    pub theta: f64,
    /// Stats JSON to write; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub stats: PathBuf,
    /// Decode position to score from; defaults to the trace's last position.
    #[arg(long)]
    pub position: Option<u64>,
    /// `geometric:MIN:MAX` or `linear:MIN:MAX:COUNT`.
    #[arg(long, default_value = "geometric:1:65536", value_parser = parse_offsets_arg)]
    pub offsets: String,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub stats: PathBuf,
    /// Query heads to analyse; all when omitted.
    #[arg(long = "head")]
    pub heads: Vec<usize>,
    /// Largest distance sampled; defaults to the trace's position span.
    #[arg(long)]
    pub max_delta: Option<u64>,
    /// Keep only the latest N eligible queries per head.
    #[arg(long)]
    pub max_queries: Option<usize>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Optional `head,mean_r` CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    pub budget: usize,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    /// `geometric:MIN:MAX` or `linear:MIN:MAX:COUNT`.
    #[arg(long, default_value = "geometric:1:65536", value_parser = parse_offsets_arg)]
    pub offsets: String,
    /// Score by the norm term only.
    #[arg(long, conflicts_with = "no_mrl_weight")]
    pub no_trig: bool,
    /// Drop the (1 − R_f) weighting of the norm term.
    #[arg(long)]
    pub no_mrl_weight: bool,
    /// Never evict keys from the most recent window.
    #[arg(long)]
    pub protect_recent: bool,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DfsArgs {
    #[arg(long, default_value_t = 16)]
    pub nodes: u32,
    #[arg(long, default_value_t = 0.2)]
    pub density: f64,
    #[arg(long, default_value_t = 6)]
    pub steps_min: usize,
    #[arg(long, default_value_t = 20)]
    pub steps_max: usize,
    #[arg(long, default_value_t = 80)]
    pub per_step: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args, Serialize)]
pub struct DfsScoreArgs {
    /// Batch JSON written by `dfs`.
    #[arg(long)]
    pub batch: PathBuf,
    /// JSON object mapping item id to answer text.
    #[arg(long)]
    pub answers: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Parses `geometric:MIN:MAX` or `linear:MIN:MAX:COUNT`.
pub fn parse_offsets(text: &str) -> Result<OffsetSet, String> {
    let parts: Vec<&str> = text.split(':').collect();
    let num = |s: &str| {
        s.parse::<u64>()
            .map_err(|_| format!("bad number {s:?} in offsets {text:?}"))
    };
    let set = match parts.as_slice() {
        ["geometric", min, max] => OffsetSet::geometric(num(min)?, num(max)?),
        ["linear", min, max, count] => {
            OffsetSet::linear(num(min)?, num(max)?, num(count)? as usize)
        }
        _ => {
            return Err(format!(
                "offsets must be geometric:MIN:MAX or linear:MIN:MAX:COUNT, got {text:?}"
            ))
        }
    };
    set.map_err(|e| e.to_string())
}

fn parse_offsets_arg(text: &str) -> Result<String, String> {
    parse_offsets(text).map(|_| text.to_string())
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::data("io", format!("{}: {e}", path.display()))
}

fn read_trace(path: &Path) -> Result<QkTrace, CliError> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    Ok(QkTrace::from_bytes(&bytes)?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::data("json", format!("{}: {e}", path.display())))
}

fn write_bytes(path: Option<&Path>, bytes: &[u8]) -> CmdResult {
    match path {
        Some(p) => fs::write(p, bytes).map_err(|e| io_error(p, e)),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| CliError::data("io", e.to_string())),
    }
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).expect("outputs serialize");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

/// Stats JSON: the calibration plus the echoed invocation.
#[derive(Debug, Serialize, Deserialize)]
pub struct StatsDocument {
    pub invocation: Value,
    #[serde(flatten)]
    pub calibration: Calibration,
}

fn read_stats(path: &Path) -> Result<Calibration, CliError> {
    let doc: StatsDocument = read_json(path)?;
    doc.calibration.validate()?;
    Ok(doc.calibration)
}

fn check_pairing(trace: &QkTrace, cal: &Calibration) -> CmdResult {
    let spec = &cal.frequency_spec;
    if trace.head_dim() != spec.head_dim()
        || trace.num_q_heads() != cal.num_q_heads
        || trace.num_k_heads() != cal.num_k_heads
    {
        return Err(CliError::data(
            "configuration",
            format!(
                "trace (d={}, Hq={}, Hk={}) does not match stats (d={}, Hq={}, Hk={})",
                trace.head_dim(),
                trace.num_q_heads(),
                trace.num_k_heads(),
                spec.head_dim(),
                cal.num_q_heads,
                cal.num_k_heads
            ),
        ));
    }
    Ok(())
}

#[derive(Serialize)]
struct SynthSidecar<'a> {
    invocation: Value,
    provenance: &'a SynthProvenance,
}

pub fn synth(args: &SynthArgs, config: Value) -> CmdResult {
    let spec =
        SynthHeadSpec::with_uniform_kappa(args.head_dim, args.kappa, args.norm_jitter, args.seed);
    let trace = generate_trace(&spec, args.tokens, args.q_heads, args.k_heads)?;
    write_bytes(Some(&args.output), &trace.to_bytes())?;
    let sidecar = args.sidecar.clone().unwrap_or_else(|| {
        let mut s = args.output.clone().into_os_string();
        s.push(".json");
        PathBuf::from(s)
    });
    let provenance = SynthProvenance::new(&spec, args.tokens, args.q_heads, args.k_heads);
    write_json(
        Some(&sidecar),
        &SynthSidecar {
            invocation: config,
            provenance: &provenance,
        },
    )
}

pub fn calibrate(args: &CalibrateArgs, config: Value) -> CmdResult {
    let trace = read_trace(&args.trace)?;
    let spec = FrequencySpec::new(trace.head_dim(), args.theta)?;
    let calibration = run_calibration(&trace, &spec)?;
    write_json(
        args.output.as_deref(),
        &StatsDocument {
            invocation: config,
            calibration,
        },
    )
}

#[derive(Serialize)]
struct HeadScores {
    q_head_index: usize,
    k_head_index: usize,
    positions: Vec<u64>,
    scores: Vec<f64>,
}

#[derive(Serialize)]
struct ScoreDocument {
    invocation: Value,
    current_position: u64,
    offsets: OffsetSet,
    heads: Vec<HeadScores>,
}

pub fn score(args: &ScoreArgs, config: Value) -> CmdResult {
    let trace = read_trace(&args.trace)?;
    let cal = read_stats(&args.stats)?;
    check_pairing(&trace, &cal)?;
    let offsets = parse_offsets(&args.offsets).map_err(CliError::Usage)?;
    let last = *trace
        .positions()
        .last()
        .ok_or_else(|| CliError::data("empty-input", "trace has no tokens"))?;
    let current = args.position.unwrap_or(last);
    let tokens: Vec<usize> = (0..trace.num_tokens())
        .filter(|&t| trace.positions()[t] <= current)
        .collect();
    let mut heads = Vec::new();
    for head in &cal.heads {
        let scorer = HeadScorer::new(head, &cal.frequency_spec, ScoreVariant::Full)?;
        let mut positions = Vec::with_capacity(tokens.len());
        let mut scores = Vec::with_capacity(tokens.len());
        for &t in &tokens {
            let key = KeyRecord::new(trace.k_vector(t, head.k_head_index), trace.positions()[t]);
            positions.push(key.position);
            scores.push(scorer.averaged(&key, current, &offsets)?);
        }
        heads.push(HeadScores {
            q_head_index: head.q_head_index,
            k_head_index: head.k_head_index,
            positions,
            scores,
        });
    }
    write_json(
        args.output.as_deref(),
        &ScoreDocument {
            invocation: config,
            current_position: current,
            offsets,
            heads,
        },
    )
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReconstructDocument {
    pub invocation: Value,
    pub distances: Vec<u64>,
    /// Unweighted mean of the per-head `mean_r`.
    pub mean_r_across_heads: f64,
    pub heads: Vec<ReconstructionReport>,
}

pub fn reconstruct(args: &ReconstructArgs, config: Value) -> CmdResult {
    let trace = read_trace(&args.trace)?;
    let cal = read_stats(&args.stats)?;
    check_pairing(&trace, &cal)?;
    let span = match (trace.positions().first(), trace.positions().last()) {
        (Some(a), Some(b)) => b - a,
        _ => 0,
    };
    let distances = log_spaced_distances(args.max_delta.unwrap_or(span))?;
    let selected: Vec<usize> = if args.heads.is_empty() {
        (0..cal.num_q_heads).collect()
    } else {
        args.heads.clone()
    };
    let mut reports = Vec::new();
    for h in selected {
        let head = cal.heads.get(h).ok_or_else(|| {
            CliError::data("configuration", format!("no stats for query head {h}"))
        })?;
        reports.push(reconstruction_correlation(
            &trace,
            head,
            &cal.frequency_spec,
            &distances,
            args.max_queries,
        )?);
    }
    let mean = reports.iter().map(|r| r.mean_r).sum::<f64>() / reports.len().max(1) as f64;
    if let Some(csv) = &args.csv {
        let mut text = String::from("head,mean_r\n");
        for r in &reports {
            text.push_str(&format!("{},{}\n", r.head_index, r.mean_r));
        }
        write_bytes(Some(csv), text.as_bytes())?;
    }
    write_json(
        args.output.as_deref(),
        &ReconstructDocument {
            invocation: config,
            distances,
            mean_r_across_heads: mean,
            heads: reports,
        },
    )
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DecodeDocument {
    pub invocation: Value,
    #[serde(flatten)]
    pub report: DecodeReport,
}

fn check_decode_invariants(report: &DecodeReport) -> CmdResult {
    let budget = report.config.budget;
    for round in &report.rounds {
        if round.retained.iter().any(|r| r.len() > budget) {
            return Err(CliError::Internal(format!(
                "round at step {} retained more than {budget} keys",
                round.step
            )));
        }
    }
    for (kh, evicted) in report.evictions.iter().enumerate() {
        for &(pos, step) in evicted {
            let resurrected = report
                .rounds
                .iter()
                .filter(|r| r.step > step)
                .any(|r| r.retained[kh].binary_search(&pos).is_ok());
            if resurrected || report.final_positions[kh].binary_search(&pos).is_ok() {
                return Err(CliError::Internal(format!(
                    "position {pos} of key head {kh} reappeared after eviction at step {step}"
                )));
            }
        }
    }
    Ok(())
}

pub fn simulate(args: &SimulateArgs, config: Value) -> CmdResult {
    let trace = read_trace(&args.trace)?;
    let cal = read_stats(&args.stats)?;
    check_pairing(&trace, &cal)?;
    let variant = if args.no_trig {
        ScoreVariant::NoTrig
    } else if args.no_mrl_weight {
        ScoreVariant::NoMrlWeight
    } else {
        ScoreVariant::Full
    };
    let prune = PruneConfig {
        budget: args.budget,
        window: args.window,
        offsets: parse_offsets(&args.offsets).map_err(CliError::Usage)?,
        group_size: trace.group_size(),
        variant,
        protect_recent: args.protect_recent,
    };
    let report = simulate_decode(&trace, &cal.heads, &cal.frequency_spec, &prune)?;
    check_decode_invariants(&report)?;
    write_json(
        args.output.as_deref(),
        &DecodeDocument {
            invocation: config,
            report,
        },
    )
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DfsDocument {
    pub invocation: Value,
    #[serde(flatten)]
    pub batch: DfsBatch,
}

pub fn dfs(args: &DfsArgs, config: Value) -> CmdResult {
    let params = BatchParams {
        num_nodes: args.nodes,
        edge_density: args.density,
        steps_min: args.steps_min,
        steps_max: args.steps_max,
        per_step: args.per_step,
        seed: args.seed,
    };
    let batch = generate_batch(&params)?;
    write_json(
        args.output.as_deref(),
        &DfsDocument {
            invocation: config,
            batch,
        },
    )
}

#[derive(Serialize)]
struct DfsScoreDocument {
    invocation: Value,
    #[serde(flatten)]
    table: ScoreTable,
}

pub fn dfs_score(args: &DfsScoreArgs, config: Value) -> CmdResult {
    let doc: DfsDocument = read_json(&args.batch)?;
    let answers: BTreeMap<String, String> = read_json(&args.answers)?;
    let table = score_batch(&doc.batch, &answers);
    match args.format {
        Format::Json => write_json(
            args.output.as_deref(),
            &DfsScoreDocument {
                invocation: config,
                table,
            },
        ),
        Format::Csv => {
            let mut text = String::from("steps,n,stack_exact,current_exact,visited_exact\n");
            for r in &table.rows {
                text.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.steps, r.n, r.stack_exact, r.current_exact, r.visited_exact
                ));
            }
            let o = &table.overall;
            text.push_str(&format!(
                "all,{},{},{},{}\n",
                o.n, o.stack_exact, o.current_exact, o.visited_exact
            ));
            write_bytes(args.output.as_deref(), text.as_bytes())
        }
    }
}
