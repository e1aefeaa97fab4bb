use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use biaslab::biaslist::{self, build_lists, extract_rarewords};
use biaslab::checkpoint;
use biaslab::decoder::{self, DecodeMode};
use biaslab::experiment::{
    decode_corpus, prepare_examples, random_instance, run_biasing, score_corpus, InstanceDims,
    ToyOptions, ToySetup,
};
use biaslab::losses::{fd_check, LossConfig, LossMode};
use biaslab::seeding::derive_seed;
use biaslab::simulator::{gen_corpus, render_condition, Condition, Corpus, SimConfig};
use biaslab::tokenizer::read_word_list;
use biaslab::trainer::{train, write_log_csv, TrainConfig};
use biaslab::Error;

const FORMATS: &str = "\
File formats:
  corpus      biaslab-corpus v1: JSON lines; a header {format, version, condition, vocab}
              then one {id, ref_words, p_mdl_seq, h_dec_seq} per utterance
  biaslists   JSON lines {id, words[, short]}
  checkpoint  biaslab-pgparams v1: one JSON header line, then token_embed, w_q, w_g, b_g
              as little-endian f64
  hyps        JSON lines {id, hyp_words, trace[{step, p_gen, active, emitted}]}
  report      pretty JSON score report; CSV rows use the header printed by `score`
  train log   CSV epoch,l_gen,l_ptr,l_asr,dev_far,dev_tar,lr
  word list   one word per line";

#[derive(Parser)]
#[command(name = "biaslab", version, about = "Contextual biasing with a tree-constrained pointer-generator on simulated ASR outputs", after_help = FORMATS)]
struct Cli {
    /// Worker threads for per-utterance stages (0 = all cores). Output does not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Print the fully resolved configuration as JSON before running.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write simulator configs and the common-word list of the seeded toy setup.
    ToyConfig(ToyConfigArgs),
    /// Generate a simulated corpus from a JSON simulator config.
    Simulate(SimulateArgs),
    /// Build per-utterance biasing lists: own rare words plus random distractors.
    Biaslists(BiaslistsArgs),
    /// Train the biasing module.
    Train(TrainArgs),
    /// Greedy-decode a corpus with or without biasing.
    Decode(DecodeArgs),
    /// Score hypotheses: WER, B-WER, U-WER, FAR, TAR.
    Score(ScoreArgs),
    /// Train and score the toy setup for several alpha values.
    SweepAlpha(SweepArgs),
    /// Compare analytic gradients with central finite differences on random instances.
    FdCheck(FdArgs),
}

#[derive(Args, Serialize)]
struct ToyConfigArgs {
    #[arg(long, default_value_t = 3)]
    seed: u64,
    /// JSON file overriding the toy options.
    #[arg(long)]
    options: Option<PathBuf>,
    /// Output directory for train.json, test.json and common.txt.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "train")]
    condition: Condition,
}

#[derive(Args, Serialize)]
struct BiaslistsArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Common-word list; every other reference word is rare.
    #[arg(long)]
    common: PathBuf,
    #[arg(long, default_value_t = 10)]
    n_distractors: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    biaslists: PathBuf,
    #[arg(long, default_value = "two_loss")]
    mode: LossMode,
    #[arg(long, default_value_t = 0.7)]
    alpha: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 32)]
    embed_dim: usize,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Training-log CSV path; defaults to the checkpoint path with a .log.csv suffix.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Per-step JSON-lines loss/gradient trace.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct DecodeArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Required unless --mode none.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    biaslists: PathBuf,
    #[arg(long, default_value = "unscaled")]
    mode: DecodeMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ScoreArgs {
    /// Reference corpus.
    #[arg(long)]
    refs: PathBuf,
    #[arg(long)]
    hyps: PathBuf,
    #[arg(long)]
    biaslists: PathBuf,
    /// JSON report path.
    #[arg(long)]
    out: PathBuf,
    /// Per-utterance CSV breakdown path.
    #[arg(long)]
    per_utt: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.7")]
    alphas: Vec<f64>,
    #[arg(long, default_value_t = 3)]
    seed: u64,
    /// JSON file overriding the toy options.
    #[arg(long)]
    options: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[arg(long, default_value = "unscaled")]
    mode: DecodeMode,
    /// CSV table path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct FdArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Vocabulary size, embedding width, state width, utterance length.
    #[arg(long, value_delimiter = ',', default_values_t = [12, 6, 6, 10])]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Optional JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::InvalidAlpha(_) => 2,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Failures to read user-supplied inputs are usage errors.
fn input<T>(r: biaslab::Result<T>) -> CliResult<T> {
    r.map_err(|e| Failure {
        code: 2,
        message: e.to_string(),
    })
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e).into())
}

fn finish(mut w: BufWriter<File>, path: &Path) -> CliResult<()> {
    w.flush().map_err(|e| Error::io(path, e).into())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let file = input(File::open(path).map_err(|e| Error::io(path, e)))?;
    input(
        serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::format("config", format!("{}: {e}", path.display()))),
    )
}

fn echo<T: Serialize>(enabled: bool, value: &T) -> CliResult<()> {
    if enabled {
        println!(
            "{}",
            serde_json::to_string_pretty(value).map_err(Error::from)?
        );
    }
    Ok(())
}

fn toy_options(seed: u64, path: Option<&Path>) -> CliResult<ToyOptions> {
    let mut opts = match path {
        Some(p) => read_json(p)?,
        None => ToyOptions::default(),
    };
    opts.seed = seed;
    Ok(opts)
}

fn toy_config(a: &ToyConfigArgs, print: bool) -> CliResult<()> {
    let opts = toy_options(a.seed, a.options.as_deref())?;
    let setup = ToySetup::new(&opts);
    echo(print, &opts)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    for (name, cfg) in [("train.json", &setup.train), ("test.json", &setup.test)] {
        let path = a.out_dir.join(name);
        let mut w = create(&path)?;
        serde_json::to_writer_pretty(&mut w, cfg).map_err(Error::from)?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        finish(w, &path)?;
    }
    let path = a.out_dir.join("common.txt");
    let mut w = create(&path)?;
    for word in &setup.train.common_words {
        writeln!(w, "{word}").map_err(|e| Error::io(&path, e))?;
    }
    finish(w, &path)?;
    println!(
        "wrote train.json, test.json, common.txt to {}",
        a.out_dir.display()
    );
    Ok(())
}

fn simulate(a: &SimulateArgs, print: bool) -> CliResult<()> {
    let config: SimConfig = read_json(&a.config)?;
    input(config.validate())?;
    echo(print, &config)?;
    let corpus = gen_corpus(&config)?;
    let corpus = match a.condition {
        Condition::Train => corpus,
        Condition::Test => render_condition(&corpus, Condition::Test, &config)?,
    };
    corpus.save(&a.out)?;
    println!(
        "wrote {} utterances to {}",
        corpus.utterances.len(),
        a.out.display()
    );
    Ok(())
}

fn biaslists(a: &BiaslistsArgs, print: bool) -> CliResult<()> {
    echo(print, a)?;
    let corpus = input(Corpus::load(&a.corpus))?;
    let common: HashSet<String> = input(read_word_list(&a.common))?
        .into_iter()
        .map(|w| w.to_lowercase())
        .collect();
    let refs = || corpus.utterances.iter().map(|u| u.ref_words.as_slice());
    let all = extract_rarewords(refs(), &common);
    let lists = build_lists(
        corpus
            .utterances
            .iter()
            .map(|u| (u.id.as_str(), u.ref_words.as_slice())),
        &common,
        &all,
        a.n_distractors,
        a.seed,
    );
    biaslist::save(&lists, &a.out)?;
    let short = lists.iter().filter(|l| l.short).count();
    println!(
        "wrote {} lists ({} rare words, {} short of distractors) to {}",
        lists.len(),
        all.len(),
        short,
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: &TrainArgs, print: bool) -> CliResult<()> {
    let cfg = TrainConfig {
        mode: a.mode,
        alpha: a.alpha,
        lr: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        embed_dim: a.embed_dim,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    echo(print, &cfg)?;
    let corpus = input(Corpus::load(&a.corpus))?;
    let lists = input(biaslist::load(&a.biaslists))?;
    let examples = prepare_examples(&corpus, &lists)?;
    let mut trace = a.trace.as_deref().map(create).transpose()?;
    let outcome = train(
        &examples,
        corpus.vocab.size(),
        &cfg,
        trace.as_mut().map(|w| w as &mut dyn Write),
    )?;
    if let (Some(w), Some(p)) = (trace, a.trace.as_deref()) {
        finish(w, p)?;
    }
    checkpoint::save(&a.out, &outcome.params, a.seed, corpus.vocab.tokens())?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".log.csv");
        PathBuf::from(s)
    });
    let w = create(&log_path)?;
    write_log_csv(&outcome.log, w)?;
    if let Some(epoch) = outcome.diverged {
        eprintln!("training diverged at epoch {epoch}; kept the best earlier parameters");
    }
    println!(
        "trained {} epochs (best {}), wrote {} and {}",
        outcome.log.len(),
        outcome.best_epoch,
        a.out.display(),
        log_path.display()
    );
    Ok(())
}

fn decode_cmd(a: &DecodeArgs, print: bool) -> CliResult<()> {
    echo(print, a)?;
    let corpus = input(Corpus::load(&a.corpus))?;
    let lists = input(biaslist::load(&a.biaslists))?;
    let params = match (a.mode, a.ckpt.as_deref()) {
        (DecodeMode::None, _) => None,
        (_, None) => {
            return Err(Error::Config(format!("--mode {} needs --ckpt", a.mode)).into());
        }
        (_, Some(path)) => {
            let (header, params) = input(checkpoint::load(path))?;
            if header.vocab != corpus.vocab.tokens() {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained on a different vocabulary",
                    path.display()
                ))
                .into());
            }
            Some(params)
        }
    };
    let hyps = decode_corpus(&corpus, params.as_ref(), &lists, a.mode)?;
    let w = create(&a.out)?;
    decoder::write_jsonl(&hyps, w)?;
    println!("decoded {} utterances to {}", hyps.len(), a.out.display());
    Ok(())
}

fn score_cmd(a: &ScoreArgs, print: bool) -> CliResult<()> {
    echo(print, a)?;
    let corpus = input(Corpus::load(&a.refs))?;
    let file = input(File::open(&a.hyps).map_err(|e| Error::io(&a.hyps, e)))?;
    let hyps = input(decoder::read_jsonl(std::io::BufReader::new(file)))?;
    let lists = input(biaslist::load(&a.biaslists))?;
    let report = score_corpus(&corpus.utterances, &hyps, &lists)?;
    let mut w = create(&a.out)?;
    report.write_json(&mut w)?;
    w.write_all(b"\n").map_err(|e| Error::io(&a.out, e))?;
    finish(w, &a.out)?;
    if let Some(path) = &a.per_utt {
        let mut w = create(path)?;
        let io = |e| Error::io(path, e);
        writeln!(w, "id,{}", biaslab::metrics::ScoreReport::CSV_HEADER).map_err(io)?;
        for utt in &corpus.utterances {
            let one = score_corpus(std::slice::from_ref(utt), &hyps, &lists)?;
            writeln!(w, "{},{}", utt.id, one.csv_row()).map_err(io)?;
        }
        finish(w, path)?;
    }
    println!("{}", biaslab::metrics::ScoreReport::CSV_HEADER);
    println!("{}", report.csv_row());
    Ok(())
}

#[derive(Serialize)]
struct SweepConfig<'a> {
    alphas: &'a [f64],
    mode: DecodeMode,
    toy: &'a ToyOptions,
    train: &'a TrainConfig,
}

fn sweep(a: &SweepArgs, print: bool) -> CliResult<()> {
    let opts = toy_options(a.seed, a.options.as_deref())?;
    let base = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        seed: a.seed,
        ..TrainConfig::default()
    };
    for &alpha in &a.alphas {
        LossConfig::new(LossMode::TwoLoss, alpha)?;
    }
    base.validate()?;
    echo(
        print,
        &SweepConfig {
            alphas: &a.alphas,
            mode: a.mode,
            toy: &opts,
            train: &base,
        },
    )?;
    let setup = ToySetup::new(&opts);
    let fmt = |x: Option<f64>| {
        x.map(|v| format!("{v:.2}"))
            .unwrap_or_else(|| "undefined".into())
    };
    let mut w = create(&a.out)?;
    let io = |e| Error::io(&a.out, e);
    let header = "alpha,WER,FAR,#U-WE-B,TAR,B-WER";
    writeln!(w, "{header}").map_err(io)?;
    println!("{header}");
    for &alpha in &a.alphas {
        let cfg = TrainConfig {
            alpha,
            ..base.clone()
        };
        let run = run_biasing(&setup, &cfg, a.mode)?;
        let r = &run.biased;
        let row = format!(
            "{alpha},{},{},{},{},{}",
            fmt(r.wer),
            fmt(r.far),
            r.counts.u_we_b,
            fmt(r.tar),
            fmt(r.b_wer)
        );
        writeln!(w, "{row}").map_err(io)?;
        println!("{row}");
    }
    finish(w, &a.out)
}

#[derive(Serialize)]
struct FdSummary {
    instances: usize,
    mode: String,
    max_rel_error: f64,
    worst_instance: u64,
    tolerance: f64,
    pass: bool,
}

fn fd_cmd(a: &FdArgs, print: bool) -> CliResult<bool> {
    if a.dims.len() != 4 {
        return Err(Error::Config(format!(
            "--dims takes four values V,d,d_h,U, got {}",
            a.dims.len()
        ))
        .into());
    }
    echo(print, a)?;
    let dims = InstanceDims {
        vocab: a.dims[0],
        embed: a.dims[1],
        state: a.dims[2],
        len: a.dims[3],
    };
    let mut summaries = Vec::new();
    for mode in [LossMode::TwoLoss, LossMode::Asr] {
        let mut worst = (0.0f64, 0u64);
        for k in 0..a.instances {
            let seed = derive_seed(a.seed, &["fd-check", &k.to_string()]);
            let (_, params, batch) = random_instance(seed, dims)?;
            let report = fd_check(&params, &batch, &LossConfig::new(mode, 0.7)?, a.step)?;
            if report.max_rel_error >= worst.0 {
                worst = (report.max_rel_error, seed);
            }
        }
        println!(
            "{mode}: max relative error {:.3e} over {} instances",
            worst.0, a.instances
        );
        summaries.push(FdSummary {
            instances: a.instances,
            mode: mode.to_string(),
            max_rel_error: worst.0,
            worst_instance: worst.1,
            tolerance: a.tolerance,
            pass: worst.0 < a.tolerance,
        });
    }
    if let Some(path) = &a.out {
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, &summaries).map_err(Error::from)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        finish(w, path)?;
    }
    Ok(summaries.iter().all(|s| s.pass))
}

fn run(cli: Cli) -> CliResult<ExitCode> {
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", cli.jobs)))?;
    }
    let p = cli.print_config;
    match &cli.command {
        Command::ToyConfig(a) => toy_config(a, p)?,
        Command::Simulate(a) => simulate(a, p)?,
        Command::Biaslists(a) => biaslists(a, p)?,
        Command::Train(a) => train_cmd(a, p)?,
        Command::Decode(a) => decode_cmd(a, p)?,
        Command::Score(a) => score_cmd(a, p)?,
        Command::SweepAlpha(a) => sweep(a, p)?,
        Command::FdCheck(a) => {
            if !fd_cmd(a, p)? {
                eprintln!("gradient check above tolerance {}", a.tolerance);
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
