use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pfxd::checkpoint::load_checkpoint;
use pfxd::config::{vocabulary_from_records, RunConfig};
use pfxd::data::{captions_tsv, read_features, toy_dataset, write_features, FeatureRecord};
use pfxd::diffusion::Parameterization;
use pfxd::metrics::evaluate;
use pfxd::schedule::{dump_schedule, make_schedule, ScheduleKind};
use pfxd::select::{Generator, ToyTextEncoder};
use pfxd::training::{fit, log_path, RoundingInput, TrainConfig};
use pfxd::vocab::Vocabulary;
use pfxd::{Error, Result};

#[derive(Parser)]
#[command(
    name = "pfxd",
    version,
    about = "Prefix-conditioned diffusion captioner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a toy scene dataset (feature file plus captions TSV).
    GenData {
        #[arg(long, default_value_t = 32)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Print candidates and the selected caption for feature records.
    Sample(SampleArgs),
    /// Evaluate a checkpoint on a feature file.
    Eval(EvalArgs),
    /// Print a variance schedule as CSV.
    DumpSchedule {
        #[arg(long, default_value = "t_linear")]
        kind: ScheduleKind,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 0.01)]
        beta_min: f64,
        #[arg(long, default_value_t = 0.03)]
        beta_max: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    schedule: Option<ScheduleKind>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    diffusion_steps: Option<usize>,
    #[arg(long)]
    d1: Option<usize>,
    #[arg(long)]
    d2: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    prefix_len: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    freeze_embeddings: bool,
    /// What the denoiser predicts: `noise` or `start` (clean data).
    #[arg(long)]
    parameterization: Option<Parameterization>,
    /// What the rounding loss scores: `estimate` or `clean`.
    #[arg(long)]
    rounding: Option<RoundingInput>,
    #[arg(long)]
    emb_init_std: Option<f64>,
    /// Start from the tuned desk settings (clean-data prediction, unit
    /// embedding init, lr 2e-3) before applying the flags above.
    #[arg(long)]
    tuned: bool,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Only this record; every record otherwise.
    #[arg(long)]
    id: Option<String>,
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[arg(long, default_value_t = 50)]
    eval_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample without snapping estimates to embeddings.
    #[arg(long)]
    no_clamp: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    eval_steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also write every selected caption as "id<TAB>caption".
    #[arg(long)]
    captions_out: Option<PathBuf>,
    /// Add per-image Dist-n over the candidate sets.
    #[arg(long)]
    per_image: bool,
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    path.as_deref()
        .map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn gen_data(count: usize, seed: u64, out_dir: &Path) -> Result<()> {
    if count == 0 {
        return Err(Error::BadConfig("count must be at least 1".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let records: Vec<FeatureRecord> = toy_dataset(count, seed)
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    let feats = out_dir.join("features.bin");
    let caps = out_dir.join("captions.tsv");
    write_features(&feats, &records)?;
    write_file(&caps, captions_tsv(&records).as_bytes())?;
    println!(
        "wrote {} records ({} captions) to {} and {}",
        records.len(),
        records.iter().map(|r| r.captions.len()).sum::<usize>(),
        feats.display(),
        caps.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if args.tuned {
        let tuned = TrainConfig::tuned();
        cfg.train.lr = tuned.lr;
        cfg.train.parameterization = tuned.parameterization;
        cfg.train.emb_init_std = tuned.emb_init_std;
    }
    let t = &mut cfg.train;
    let m = &mut t.model;
    macro_rules! set {
        ($($src:ident => $dst:expr),* $(,)?) => {
            $(if let Some(v) = args.$src { $dst = v; })*
        };
    }
    set!(
        steps => t.steps,
        batch_size => t.batch_size,
        lr => t.lr,
        seed => t.seed,
        schedule => t.schedule,
        lambda => t.lambda,
        diffusion_steps => m.steps,
        d1 => m.d1,
        d2 => m.d2,
        k => m.k,
        prefix_len => m.prefix_len,
        layers => m.layers,
        heads => m.heads,
        parameterization => t.parameterization,
        rounding => t.rounding,
        emb_init_std => t.emb_init_std,
    );
    if args.freeze_embeddings {
        t.freeze_embeddings = true;
    }
    if args.features.is_some() {
        cfg.features = args.features;
    }
    if args.vocab.is_some() {
        cfg.vocab = args.vocab;
    }
    if args.out.is_some() {
        cfg.checkpoint = args.out;
    }
    let features = RunConfig::require(&cfg.features, "features")?;
    let out = RunConfig::require(&cfg.checkpoint, "checkpoint")?;
    let records = read_features(features)?;
    if let Some(r) = records.first() {
        cfg.train.model.feat_dim = r.feat.len();
    }
    cfg.train.validate()?;
    let vocab = match &cfg.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => vocabulary_from_records(&records)?,
    };
    let state = fit(&cfg.train, &records, &vocab, out)?;
    let log = std::fs::read_to_string(log_path(out)).unwrap_or_default();
    let losses: Vec<&str> = log
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(1))
        .collect();
    println!(
        "trained {} steps on {} records; loss {} -> {}; checkpoint {}",
        state.step,
        records.len(),
        losses.first().unwrap_or(&"-"),
        losses.last().unwrap_or(&"-"),
        out.display()
    );
    Ok(())
}

fn generator(path: &Path) -> Result<Generator> {
    Generator::from_checkpoint(load_checkpoint(path)?)
}

fn sample(args: SampleArgs) -> Result<()> {
    let mut gen = generator(&args.checkpoint)?;
    if args.no_clamp {
        gen.clamp = false;
    }
    let mut records = read_features(&args.features)?;
    if let Some(id) = &args.id {
        records.retain(|r| &r.id == id);
        if records.is_empty() {
            return Err(Error::Malformed(format!("no record with id {id}")));
        }
    }
    let feats: Vec<&[f64]> = records.iter().map(|r| r.feat.as_slice()).collect();
    let all = gen.generate_many(&feats, args.n, args.eval_steps, args.seed)?;
    let mut out = std::io::stdout().lock();
    for (r, cands) in records.iter().zip(all) {
        let set =
            Generator::choose(&r.feat, cands, &ToyTextEncoder).map_err(|e| Error::Record {
                id: r.id.clone(),
                source: Box::new(e),
            })?;
        let _ = writeln!(out, "{}", r.id);
        for (i, c) in set.candidates.iter().enumerate() {
            let mark = if i == set.chosen { '*' } else { ' ' };
            let score = c.score.map_or("-".to_string(), |s| format!("{s:.4}"));
            let _ = writeln!(out, "{mark} {i:>2} {score:>7}  {}", c.caption);
        }
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let checkpoint = args.checkpoint.or(cfg.checkpoint.clone());
    let features = args
        .features
        .or(cfg.eval_features.clone())
        .or(cfg.features.clone());
    let report_path = args.report.or(cfg.report.clone());
    let gen = generator(RunConfig::require(&checkpoint, "checkpoint")?)?;
    let records = read_features(RunConfig::require(&features, "features")?)?;
    let n = args.n.unwrap_or(cfg.n_candidates);
    let eval_steps = args.eval_steps.unwrap_or(cfg.eval_steps);
    let ev = evaluate(
        &gen,
        &records,
        n,
        eval_steps,
        args.seed,
        &ToyTextEncoder,
        args.per_image,
    )?;
    print!("{}", ev.report.to_table());
    if let Some(p) = report_path {
        write_file(&p, serde_json::to_string_pretty(&ev.report)?.as_bytes())?;
    }
    if let Some(p) = args.captions_out {
        let text: String = records
            .iter()
            .zip(&ev.selected)
            .map(|(r, c)| format!("{}\t{}\n", r.id, c))
            .collect();
        write_file(&p, text.as_bytes())?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            count,
            seed,
            out_dir,
        } => gen_data(count, seed, &out_dir),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a),
        Command::DumpSchedule {
            kind,
            steps,
            beta_min,
            beta_max,
            out,
        } => {
            let csv = dump_schedule(&make_schedule(kind, steps, beta_min, beta_max)?);
            match out {
                Some(p) => write_file(&p, csv.as_bytes()),
                None => {
                    print!("{csv}");
                    Ok(())
                }
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(n) = std::env::var("PFXD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
