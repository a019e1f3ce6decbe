//! Command-line front end.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::decode::{decode_bectra, IterationRecord, Vocabs};
use crate::error::{invalid, Result};
use crate::model::ModelParams;
use crate::training::{average_checkpoints, Checkpoint};

use super::config::Config;
use super::data::{generate_corpus, load_split, Split};
use super::pipeline::{
    bench_tradeoff, build_vocabs, evaluate, load_vocabs, pretrain, run_training, tradeoff_table,
    write_report, write_tradeoff, DecodeMode, Layout,
};

#[derive(Debug, Parser)]
#[command(
    name = "bectra",
    version,
    about = "Masked-LM-conditioned CTC and transducer ASR on synthetic data"
)]
pub struct Cli {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root of all artifacts.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Bectra,
    Bertctc,
    Greedy,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    GenData,
    /// Build the LM and ASR vocabularies.
    BuildVocab,
    /// Initialise the model and pretrain the masked LM.
    PretrainMlm,
    /// Train and write per-epoch and averaged checkpoints.
    Train,
    /// Decode a split and report WER and CER.
    Evaluate {
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum, default_value = "bectra")]
        mode: ModeArg,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        beam: Option<usize>,
        /// Defaults to the averaged checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Decode one utterance and print its refinement trace.
    DecodeOne {
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, conflicts_with = "index")]
        id: Option<String>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// WER and real-time factor over the configured (K, B) grid.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Average checkpoints elementwise.
    AverageCkpts {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
}

/// Runs the CLI; returns the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_params(
    layout: &Layout,
    checkpoint: &Option<PathBuf>,
) -> Result<(PathBuf, ModelParams<f32>)> {
    let path = checkpoint.clone().unwrap_or_else(|| layout.averaged());
    let params = Checkpoint::load(&path)?.params;
    Ok((path, params))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let layout = Layout::new(&cli.out_dir);
    match &cli.command {
        Command::GenData => {
            let c = generate_corpus(&cfg.data, cfg.seed, &cfg.hash(), &layout.data())?;
            for (split, utts) in &c.splits {
                println!("{}: {} utterances", split.name(), utts.len());
            }
            println!("lm corpus: {} sentences", c.lm_text.len());
        }
        Command::BuildVocab => {
            let v = build_vocabs(&cfg, &layout)?;
            println!("lm units: {}  asr units: {}", v.lm.len(), v.asr.len());
        }
        Command::PretrainMlm => {
            let v = load_vocabs(&layout)?;
            let r = pretrain(&cfg, &layout, &v)?;
            println!(
                "masked-LM held-out loss {:.4} -> {:.4} (uniform {:.4})",
                r.initial_heldout, r.final_heldout, r.uniform
            );
        }
        Command::Train => {
            let v = load_vocabs(&layout)?;
            let o = run_training(&cfg, &layout, &v)?;
            let last = o.dev_curve.last().map(|d| d.l_total).unwrap_or(f64::NAN);
            println!(
                "{} epochs in {:.1} s, final dev loss {last:.4}, averaged model {}",
                o.checkpoints.len(),
                o.wall_seconds,
                o.averaged.display()
            );
        }
        Command::Evaluate {
            split,
            mode,
            iterations,
            beam,
            checkpoint,
        } => {
            let split = Split::parse(split)?;
            let v = load_vocabs(&layout)?;
            let (_, params) = load_params(&layout, checkpoint)?;
            let k = iterations.unwrap_or(cfg.decode.iterations);
            let b = beam.unwrap_or(cfg.decode.beam);
            let mode = match mode {
                ModeArg::Bectra => DecodeMode::Bectra {
                    iterations: k,
                    beam: b,
                },
                ModeArg::Bertctc => DecodeMode::Bertctc { iterations: k },
                ModeArg::Greedy => DecodeMode::Greedy { iterations: k },
            };
            let utts = load_split(&layout.data(), split)?;
            let report = evaluate(&params, &v, &utts, mode, cfg.decode.max_symbols)?;
            let (per, _) = write_report(&report, &layout.eval(), split)?;
            println!(
                "{} {}: WER {:.2}% CER {:.2}% over {} utterances ({})",
                split.name(),
                mode.label(),
                100.0 * report.wer,
                100.0 * report.cer,
                report.utterances,
                per.display()
            );
        }
        Command::DecodeOne {
            split,
            id,
            index,
            iterations,
            beam,
            checkpoint,
        } => {
            let split = Split::parse(split)?;
            let v = load_vocabs(&layout)?;
            let (_, params) = load_params(&layout, checkpoint)?;
            let utts = load_split(&layout.data(), split)?;
            let u = match id {
                Some(id) => utts.iter().find(|u| &u.id == id),
                None => utts.get(*index),
            }
            .ok_or_else(|| invalid("no such utterance"))?;
            let k = iterations.unwrap_or(cfg.decode.iterations);
            let b = beam.unwrap_or(cfg.decode.beam);
            let out = decode_bectra(&params, &v, &u.feats, k, b, cfg.decode.max_symbols)?;
            let text = v.asr.detokenize(&out.hypothesis.tokens);
            print!(
                "{}",
                format_trace(&u.id, &u.text, &out.refinement.trace, &text, &v)
            );
            let path = write_trace(&layout.eval(), &u.id, &out.refinement.trace)?;
            println!("trace written to {}", path.display());
        }
        Command::Bench { checkpoint } => {
            let v = load_vocabs(&layout)?;
            let (path, params) = load_params(&layout, checkpoint)?;
            let mut utts = load_split(&layout.data(), Split::Test)?;
            if cfg.bench.utterances > 0 {
                utts.truncate(cfg.bench.utterances);
            }
            let recs = bench_tradeoff(
                &params,
                &v,
                &utts,
                &cfg.bench.iterations,
                &cfg.bench.beams,
                cfg.bench.repeats,
                cfg.decode.max_symbols,
            )?;
            let csv = write_tradeoff(&recs, &cfg, &path, &layout.bench())?;
            print!("{}", tradeoff_table(&recs));
            println!("grid written to {}", csv.display());
        }
        Command::AverageCkpts { inputs, output } => {
            let c = average_checkpoints(inputs)?;
            if let Some(dir) = output.parent() {
                std::fs::create_dir_all(dir)?;
            }
            c.save(output)?;
            println!(
                "averaged {} checkpoints into {}",
                inputs.len(),
                output.display()
            );
        }
    }
    Ok(())
}

/// One line per iteration; positions re-masked for the next iteration are
/// shown as `[mask]` after the predicted token.
pub fn format_trace(
    id: &str,
    reference: &str,
    trace: &[IterationRecord],
    output: &str,
    v: &Vocabs,
) -> String {
    let mask =
        v.lm.mask_id()
            .and_then(|m| v.lm.token(m))
            .unwrap_or("[mask]");
    let mut s = format!("{id}\nreference : {reference}\n");
    for r in trace {
        let line: Vec<String> = r
            .tokens
            .iter()
            .zip(&r.masked)
            .map(|(t, &m)| {
                if m {
                    format!("{t}→{mask}")
                } else {
                    t.clone()
                }
            })
            .collect();
        s.push_str(&format!("k={:<3}     : {}\n", r.k, line.join(" ")));
    }
    s.push_str(&format!("output    : {output}\n"));
    s
}

pub fn write_trace(dir: &Path, id: &str, trace: &[IterationRecord]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("trace.{id}.jsonl"));
    let mut w = BufWriter::new(File::create(&path)?);
    for r in trace {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    Ok(path)
}
