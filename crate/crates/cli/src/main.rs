use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use srn_core::data::{
    batch_tensor, generate_dataset, generate_lexicon, load_split, render_word, Charset, DatasetSpec, RenderParams,
    Split,
};
use srn_core::harness::ablate::{self, find_variant, Splits, VARIANTS};
use srn_core::harness::bench::{self, BenchOptions};
use srn_core::harness::{evaluate, gradients, infer_file, Checkpoint, Config, DecoderKind, Model, Trainer};
use srn_core::vsfd::Fusion;

#[derive(Parser)]
#[command(
    name = "srn",
    version,
    about = "Parallel text recognition with global semantic reasoning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic confusable-glyph dataset
    GenData(GenDataArgs),
    /// Train a model on a generated dataset
    Train(TrainArgs),
    /// Word and character accuracy of a checkpoint on one split
    Eval(EvalArgs),
    /// Decode one PGM image, optionally dumping attention maps
    Infer(InferArgs),
    /// Parallel vs serial decoder latency
    Benchmark(BenchArgs),
    /// Finite-difference gradient audit of every module
    GradCheck(GradCheckArgs),
    /// Decoder and fusion ablations branching from a shared warm-up
    Ablate(AblateArgs),
}

/// Configuration file plus command-line overrides.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    decoder: Option<DecoderKind>,
    #[arg(long)]
    gsrm_units: Option<usize>,
    #[arg(long)]
    fusion: Option<Fusion>,
    #[arg(long)]
    alpha_e: Option<f64>,
    #[arg(long)]
    alpha_r: Option<f64>,
    #[arg(long)]
    alpha_f: Option<f64>,
    /// Decoded sequence length N, EOS included
    #[arg(long)]
    max_len: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config> {
        let mut c = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(v) = self.seed {
            c.train.seed = v;
        }
        if let Some(v) = self.decoder {
            c.model.decoder = v;
        }
        if let Some(v) = self.gsrm_units {
            c.model.gsrm_units = v;
        }
        if let Some(v) = self.fusion {
            c.model.fusion = v;
        }
        if let Some(v) = self.alpha_e {
            c.train.weights.alpha_e = v;
        }
        if let Some(v) = self.alpha_r {
            c.train.weights.alpha_r = v;
        }
        if let Some(v) = self.alpha_f {
            c.train.weights.alpha_f = v;
        }
        if let Some(v) = self.max_len {
            c.model.max_len = v;
        }
        Ok(c)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Samples over all splits
    #[arg(long, default_value_t = 25_000)]
    count: usize,
    #[arg(long, default_value = "0.8,0.1,0.1")]
    ratios: String,
    #[arg(long, default_value_t = 50)]
    lexicon_size: usize,
    #[arg(long, default_value_t = 3)]
    min_word: usize,
    /// Sequence length N; words are at most N-1 characters
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    /// `desk` (12 symbols), `alphanumeric` (36) or a charset file
    #[arg(long, default_value = "desk")]
    charset: String,
    #[arg(long, default_value_t = 0.2)]
    noise: f64,
    #[arg(long, default_value_t = 0.7)]
    confusability: f64,
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory written by gen-data
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Defaults to charset.txt next to the checkpoint
    #[arg(long)]
    charset: Option<PathBuf>,
    #[arg(long)]
    dump_attention: bool,
    /// Directory for attention maps
    #[arg(long, default_value = "attention")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Parallel decoder checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Serial baseline checkpoint; a fresh decoder on the same backbone if absent
    #[arg(long)]
    serial_checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [10, 25, 50])]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 20)]
    inner: usize,
    /// PGM image to decode; a rendered word if absent
    #[arg(long)]
    image: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2])]
    seeds: Vec<u64>,
    /// Subset of srn,srn_no_gsrm,fsrm,bsrm,add,concat,dot
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
}

fn parse_ratios(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("bad ratios `{s}`"))?;
    match parts[..] {
        [a, b, c] => Ok([a, b, c]),
        _ => bail!("expected three ratios, got `{s}`"),
    }
}

fn load_charset(spec: &str) -> Result<Charset> {
    Ok(match spec {
        "desk" => Charset::desk(),
        "alphanumeric" => Charset::alphanumeric(),
        path => Charset::load(Path::new(path))?,
    })
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let charset = load_charset(&a.charset)?;
    let render = RenderParams {
        height: a.height,
        width: a.width,
        noise: a.noise,
        confusability: a.confusability,
    };
    let longest = (a.max_len.saturating_sub(1)).min(render.max_chars());
    let lexicon = generate_lexicon(&charset, a.lexicon_size, a.min_word, longest, a.seed)?;
    let spec = DatasetSpec {
        count: a.count,
        ratios: parse_ratios(&a.ratios)?,
        seed: a.seed,
        render,
    };
    let counts = generate_dataset(&a.out, &lexicon, &charset, &spec)?;
    println!(
        "wrote {} train, {} val, {} test samples to {}",
        counts[0],
        counts[1],
        counts[2],
        a.out.display()
    );
    Ok(())
}

fn dataset_config(mut config: Config, data: &Path) -> Result<(Config, Charset)> {
    let charset = Charset::load(&data.join("charset.txt"))?;
    config.model.num_classes = charset.num_classes();
    config.validate()?;
    Ok((config, charset))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn train(a: TrainArgs) -> Result<()> {
    let (config, charset) = dataset_config(a.config.load()?, &a.data)?;
    let train = load_split(&a.data, Split::Train)?;
    let val = load_split(&a.data, Split::Val)?;
    create_dir(&a.out)?;
    let model = Model::init(&config.model, config.train.seed)?;
    let mut trainer = Trainer::new(model, config.train.clone())?;
    trainer.fit(&train, &val, &charset, |s| println!("{}", s.log_line()))?;
    fs::write(a.out.join("metrics.log"), trainer.log())?;
    fs::write(a.out.join("config.txt"), config.to_text())?;
    charset.save(&a.out.join("charset.txt"))?;
    let path = a.out.join("checkpoint.srn");
    Checkpoint::from_model(&trainer.model, &config, trainer.step()).save(&path)?;
    println!("saved {}", path.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.model()?;
    let charset = Charset::load(&a.data.join("charset.txt"))?;
    let samples = load_split(&a.data, a.split)?;
    let m = evaluate(&model, &samples, &charset, ck.config.train.batch_size)?;
    println!(
        "split {} samples {} word_accuracy {} char_accuracy {}",
        a.split.name(),
        m.samples,
        m.word_accuracy,
        m.char_accuracy
    );
    Ok(())
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn infer(a: InferArgs) -> Result<()> {
    let model = Checkpoint::load(&a.checkpoint)?.model()?;
    let charset_path = a.charset.unwrap_or_else(|| sibling(&a.checkpoint, "charset.txt"));
    let charset = Charset::load(&charset_path)?;
    let dump = a.dump_attention.then_some(a.out.as_path());
    let out = infer_file(&model, &charset, &a.image, dump)?;
    println!("{}", out.text);
    for p in &out.maps {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn benchmark(a: BenchArgs) -> Result<()> {
    let srn = Checkpoint::load(&a.checkpoint)?.model()?;
    let serial = a
        .serial_checkpoint
        .as_ref()
        .map(|p| Checkpoint::load(p).and_then(|c| c.model()))
        .transpose()?;
    let image = match &a.image {
        Some(p) => srn_core::data::pgm::read(p)?,
        None => {
            let charset = Charset::load(&sibling(&a.checkpoint, "charset.txt")).unwrap_or_else(|_| Charset::desk());
            let word: String = charset.symbols().iter().cycle().take(5).collect();
            let params = RenderParams {
                height: srn.config.height,
                width: srn.config.width,
                ..RenderParams::default()
            };
            render_word(&word, &charset, 0, &params)?
        }
    };
    let opts = BenchOptions {
        repetitions: a.reps,
        inner: a.inner,
    };
    let rows = bench::benchmark(&srn, serial.as_ref(), &batch_tensor(&[&image])?, &a.lengths, &opts)?;
    print!("{}", bench::format_table(&rows));
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Result<bool> {
    let checks = gradients::audit(a.seed, a.instances, a.tol)?;
    let mut ok = true;
    for module in gradients::MODULES {
        let mine: Vec<_> = checks.iter().filter(|c| c.module == module).collect();
        let worst = mine.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
        let failed = mine.iter().filter(|c| !c.passed).count();
        ok &= failed == 0;
        println!(
            "{:<22} instances {:>3} failed {:>3} max_rel_err {:.3e}",
            module,
            mine.len(),
            failed,
            worst
        );
    }
    Ok(ok)
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let (config, charset) = dataset_config(a.config.load()?, &a.data)?;
    let variants = if a.variants.is_empty() {
        VARIANTS.to_vec()
    } else {
        a.variants
            .iter()
            .map(|v| find_variant(v))
            .collect::<srn_core::Result<_>>()?
    };
    let splits = Splits {
        train: load_split(&a.data, Split::Train)?,
        val: load_split(&a.data, Split::Val)?,
        test: load_split(&a.data, Split::Test)?,
        charset,
    };
    create_dir(&a.out)?;
    let mut results = Vec::new();
    for &seed in &a.seeds {
        let runs = ablate::run_seed(&config, &splits, seed, &variants, |name, s| {
            println!("seed {seed} {name} {}", s.log_line())
        })?;
        for r in &runs {
            let log: String = r.history.iter().map(|s| s.log_line() + "\n").collect();
            fs::write(a.out.join(format!("{}_seed{seed}.log", r.variant.name)), log)?;
            println!(
                "seed {seed} {} test word_accuracy {} char_accuracy {}",
                r.variant.name, r.test.word_accuracy, r.test.char_accuracy
            );
        }
        results.extend(runs);
    }
    let summary = ablate::summary(&results);
    fs::write(a.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Infer(a) => infer(a).map(|_| true),
        Command::Benchmark(a) => benchmark(a).map(|_| true),
        Command::GradCheck(a) => grad_check(a),
        Command::Ablate(a) => ablate_cmd(a).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
