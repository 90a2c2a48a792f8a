use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use walkre::checkpoint;
use walkre::config::parse_key_values;
use walkre::dataset::{generate_synthetic, parse_corpus, save_corpus, GeneratorSpec, Sentence, Vocabulary};
use walkre::embeddings::{load_pretrained, read_vectors};
use walkre::evaluation::{
    approx_randomization, breakdown_by_entity_count, default_buckets, gold_decisions, micro_prf,
    read_decisions, write_decisions, DecisionSet, Report, Significance,
};
use walkre::gradcheck::{gradcheck, GradcheckDims};
use walkre::training::{predict_corpus, train};
use walkre::{Config, Model};

#[derive(Parser)]
#[command(name = "walkre", version, about = "Walk-based relation extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score predictions against gold decisions.
    Eval(EvalArgs),
    /// Write the decisions of a checkpoint on a corpus.
    Predict(PredictArgs),
    /// Generate a synthetic corpus.
    GenData(GenArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
}

/// Path keys a config file may contain besides the model settings.
const PATH_KEYS: [&str; 6] = ["train", "dev", "test", "pretrained", "checkpoint", "output"];

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set beta=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

struct RunConfig {
    model: Config,
    paths: BTreeMap<String, PathBuf>,
}

impl RunConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if PATH_KEYS.contains(&key) {
            self.paths.insert(key.to_string(), PathBuf::from(value));
            Ok(())
        } else {
            Ok(self.model.set(key, value)?)
        }
    }

    fn path(&self, key: &str) -> Option<&Path> {
        self.paths.get(key).map(PathBuf::as_path)
    }

    fn require(&self, key: &str) -> Result<&Path> {
        let p = self.path(key).ok_or_else(|| anyhow!("missing `{key}` path (flag or config key)"))?;
        if key != "output" && key != "checkpoint" && !p.exists() {
            bail!("{key} file {} does not exist", p.display());
        }
        Ok(p)
    }

    fn to_text(&self) -> String {
        let mut s = self.model.to_text();
        for (k, v) in &self.paths {
            s.push_str(&format!("{k} = {}\n", v.display()));
        }
        s
    }
}

impl ConfigArgs {
    fn resolve(&self, flags: &[(&str, &Option<PathBuf>)]) -> Result<RunConfig> {
        let mut run = RunConfig {
            model: Config::default(),
            paths: BTreeMap::new(),
        };
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            for entry in parse_key_values(&text).with_context(|| path.display().to_string())? {
                run.set(&entry.key, &entry.value)
                    .with_context(|| format!("{}:{}", path.display(), entry.line))?;
            }
        }
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {o:?}"))?;
            run.set(k.trim(), v.trim())?;
        }
        for (key, value) in flags {
            if let Some(p) = value {
                run.paths.insert(key.to_string(), p.clone());
            }
        }
        if let Some(seed) = self.seed {
            run.model.seed = seed;
        }
        run.model.validate()?;
        Ok(run)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Word vectors, one `word v1 ... vD` line each.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long = "out", alias = "output")]
    output: Option<PathBuf>,
    /// Also append the epoch log to this file.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Gold decisions (JSON lines).
    #[arg(long)]
    gold: Option<PathBuf>,
    /// Corpus supplying gold decisions and entity counts.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Predicted decisions (JSON lines).
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Predict `--corpus` with this checkpoint instead of reading `--pred`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Second system for the approximate randomization test.
    #[arg(long)]
    pred_b: Option<PathBuf>,
    #[arg(long, default_value_t = 10000)]
    iterations: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Per entity-count breakdown (needs `--corpus`).
    #[arg(long)]
    breakdown: bool,
    /// Bucket boundaries, e.g. `2,3,4,6,12,23`.
    #[arg(long, value_delimiter = ',')]
    buckets: Option<Vec<usize>>,
    /// Write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    /// `default`, `two-hop`, or a JSON generator spec file.
    #[arg(long, default_value = "default")]
    spec: String,
    #[arg(long)]
    sentences: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 3)]
    seed: u64,
    /// `tiny` or `small`.
    #[arg(long, default_value = "tiny")]
    dims: String,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn read_corpus(path: &Path) -> Result<Vec<Sentence>> {
    parse_corpus(path).with_context(|| format!("reading corpus {}", path.display()))
}

fn run_train(args: TrainArgs) -> Result<()> {
    let run = args.config.resolve(&[
        ("train", &args.train),
        ("dev", &args.dev),
        ("pretrained", &args.pretrained),
        ("output", &args.output),
    ])?;
    if args.config.print_config {
        print!("{}", run.to_text());
        return Ok(());
    }
    let train_set = read_corpus(run.require("train")?)?;
    let dev_set = read_corpus(run.require("dev")?)?;
    let out = run.require("output")?.to_path_buf();

    let (vocab, pretrained) = match run.path("pretrained") {
        Some(_) => {
            let path = run.require("pretrained")?;
            let (_, vectors) = read_vectors(path)?;
            let mut words: Vec<String> = vectors.into_keys().collect();
            words.sort();
            let vocab = Vocabulary::build(&train_set, Some(&words));
            let mut rng = ChaCha8Rng::seed_from_u64(run.model.seed);
            let loaded = load_pretrained(path, &vocab, run.model.word_dim, &mut rng)?;
            eprintln!(
                "pretrained vectors cover {}/{} words ({:.1}%)",
                loaded.found,
                vocab.word_count() - 2,
                100.0 * loaded.coverage
            );
            (vocab, Some(loaded.table))
        }
        None => (Vocabulary::build(&train_set, None), None),
    };
    let model = Model::new(run.model.clone(), vocab, pretrained)?;
    let mut log_file = match &args.log {
        Some(p) => Some(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => None,
    };
    let outcome = train(model, &train_set, &dev_set, |entry| {
        let line = entry.line();
        println!("{line}");
        if let Some(f) = log_file.as_mut() {
            let _ = writeln!(f, "{line}");
        }
    })?;
    checkpoint::save(&out, &outcome.model)?;
    println!(
        "best epoch {}  dev F1 {:.4}  checkpoint {}",
        outcome.best_epoch,
        outcome.best_dev.f1,
        out.display()
    );
    Ok(())
}

fn buckets_from(bounds: &[usize]) -> Result<Vec<std::ops::Range<usize>>> {
    if bounds.len() < 2 {
        bail!("--buckets needs at least two boundaries");
    }
    Ok(bounds.windows(2).map(|w| w[0]..w[1]).collect())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let corpus = args.corpus.as_deref().map(read_corpus).transpose()?;
    let gold = match (&args.gold, &corpus) {
        (Some(p), _) => read_decisions(p).with_context(|| format!("reading {}", p.display()))?,
        (None, Some(c)) => gold_decisions(c),
        (None, None) => bail!("give --gold or --corpus"),
    };
    let pred = match (&args.pred, &args.checkpoint) {
        (Some(p), None) => read_decisions(p).with_context(|| format!("reading {}", p.display()))?,
        (None, Some(ck)) => {
            let c = corpus.as_ref().ok_or_else(|| anyhow!("--checkpoint needs --corpus"))?;
            predict_corpus(&checkpoint::load(ck)?, c)?
        }
        _ => bail!("give exactly one of --pred and --checkpoint"),
    };
    let mut report = Report::new(&gold, &pred);
    if args.breakdown || args.buckets.is_some() {
        let c = corpus.as_ref().ok_or_else(|| anyhow!("the breakdown needs --corpus"))?;
        let buckets = match &args.buckets {
            Some(b) => buckets_from(b)?,
            None => default_buckets(),
        };
        report.buckets = Some(breakdown_by_entity_count(&gold, &pred, c, &buckets)?);
    }
    if let Some(pb) = &args.pred_b {
        let other = read_decisions(pb).with_context(|| format!("reading {}", pb.display()))?;
        report.significance = Some(Significance {
            f1_a: report.prf.f1,
            f1_b: micro_prf(&gold, &other).f1,
            iterations: args.iterations,
            seed: args.seed,
            p_value: approx_randomization(&pred, &other, &gold, args.iterations, args.seed)?,
        });
    }
    print!("{}", report.to_text());
    if let Some(p) = &args.json {
        fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn run_predict(args: PredictArgs) -> Result<()> {
    let model = checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let corpus = read_corpus(&args.corpus)?;
    let decisions: DecisionSet = predict_corpus(&model, &corpus)?;
    match &args.out {
        Some(p) => {
            let mut w = std::io::BufWriter::new(fs::File::create(p)?);
            write_decisions(&mut w, &decisions)?;
            w.flush()?;
        }
        None => write_decisions(std::io::stdout().lock(), &decisions)?,
    }
    Ok(())
}

fn run_gen(args: GenArgs) -> Result<()> {
    let mut spec = match args.spec.as_str() {
        "default" => GeneratorSpec::default(),
        "two-hop" => GeneratorSpec::two_hop(),
        path => {
            let text = fs::read_to_string(path).with_context(|| format!("reading spec {path}"))?;
            serde_json::from_str(&text).with_context(|| format!("parsing spec {path}"))?
        }
    };
    if let Some(n) = args.sentences {
        spec.sentences = n;
    }
    let corpus = generate_synthetic(&spec, args.seed)?;
    save_corpus(&args.out, &corpus)?;
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<()> {
    let dims = GradcheckDims::from_name(&args.dims)?;
    let report = gradcheck(args.seed, dims)?;
    for p in &report.params {
        println!("{:<22} {:>6} entries  worst {:.3e}", p.name, p.checked, p.worst);
    }
    let verdict = if report.passed(args.tolerance) { "PASS" } else { "FAIL" };
    println!(
        "{verdict}: worst relative error {:.3e} ({}), tolerance {:.0e}, {:.2}s",
        report.worst,
        report.worst_param,
        args.tolerance,
        report.elapsed.as_secs_f64()
    );
    if !report.passed(args.tolerance) {
        bail!("gradient check failed");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Predict(a) => run_predict(a),
        Command::GenData(a) => run_gen(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
