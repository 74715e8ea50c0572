use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mtltext::config::RunConfig;
use mtltext::error::{Error, Result};
use mtltext::experiment::{load_resources, load_run, prepare, run_cross_validation, run_training};
use mtltext::preprocess::Preprocessor;
use mtltext::report::{audit, Report};
use mtltext::search::{search_config, SearchSpace};

/// Multi-task CNN text classifiers for hate speech and sentiment.
#[derive(Parser)]
#[command(name = "mtltext", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean and tokenize text, one input line per output line.
    Preprocess(PreprocessArgs),
    /// Train the configured model on all training data and save it.
    Train(RunArgs),
    /// Score a labeled file with a saved model.
    Evaluate(EvaluateArgs),
    /// Run stratified k-fold cross-validation and write the report.
    CrossValidate(RunArgs),
    /// Random search over learning rate, filter count and window sets.
    Search(SearchArgs),
    /// Render or audit a saved report.
    Report(ReportArgs),
}

#[derive(Args, Clone, Default)]
struct ResourceArgs {
    /// Config file of `key = value` lines.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Directory holding lexicon.tsv, emoticons.tsv, vectors.txt and
    /// subwords.txt [env: MTLTEXT_RESOURCES]
    #[arg(long)]
    resources: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    emoticons: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    subwords: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    #[command(flatten)]
    res: ResourceArgs,
    /// Model variant, 1 to 10.
    #[arg(long)]
    variant: Option<u8>,
    #[arg(long)]
    seed: Option<u64>,
    /// Task as NAME=ROLE:PATH with ROLE hate or sentiment. Repeatable.
    #[arg(long = "task", value_name = "NAME=ROLE:PATH")]
    tasks: Vec<String>,
    /// Held-out test file as NAME=PATH. Repeatable.
    #[arg(long = "test", value_name = "NAME=PATH")]
    tests: Vec<String>,
    /// Label order as NAME=a,b,c. Repeatable.
    #[arg(long = "labels", value_name = "NAME=LABELS")]
    labels: Vec<String>,
    /// Loss weight as NAME=W. Repeatable.
    #[arg(long = "weight", value_name = "NAME=W")]
    weights: Vec<String>,
    /// Output directory.
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long)]
    word_dim: Option<usize>,
    #[arg(long)]
    subword_dim: Option<usize>,
    #[arg(long)]
    subword_buckets: Option<usize>,
    #[arg(long)]
    trainable_subwords: Option<bool>,
    /// Token sequence length; 0 picks it from the training data.
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    char_len: Option<usize>,
    /// Word-CNN windows, comma separated.
    #[arg(long)]
    windows: Option<String>,
    #[arg(long)]
    word_filters: Option<usize>,
    /// Hidden layer widths, comma separated (may be empty).
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    char_kernel: Option<usize>,
    /// Two strides, comma separated.
    #[arg(long)]
    char_strides: Option<String>,
    #[arg(long)]
    char_pool: Option<usize>,
    #[arg(long)]
    char_filters: Option<usize>,
    #[arg(long)]
    char_hidden: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    search_budget: Option<usize>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[command(flatten)]
    res: ResourceArgs,
    /// Input file; standard input when absent.
    input: Option<PathBuf>,
    /// Print tokens with their provenance as JSON lines.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    res: ResourceArgs,
    /// Directory written by `train`.
    #[arg(long, short)]
    model: PathBuf,
    #[arg(long)]
    task: String,
    /// Labeled CSV with `id,text,label` columns.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Write the best configuration here.
    #[arg(long)]
    write_config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Plain,
    Csv,
    Json,
}

#[derive(Args)]
struct ReportArgs {
    /// report.json, or the directory holding it.
    path: PathBuf,
    #[arg(long, value_enum, default_value = "plain")]
    format: Format,
    /// Re-derive every score and fail on any disagreement.
    #[arg(long)]
    audit: bool,
}

fn named(flag: &str, v: &str) -> Result<(String, String)> {
    v.split_once('=')
        .map(|(n, x)| (n.trim().to_string(), x.trim().to_string()))
        .filter(|(n, _)| !n.is_empty())
        .ok_or_else(|| Error::Config(format!("--{flag}: expected NAME=VALUE, got '{v}'")))
}

impl ResourceArgs {
    fn lines(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (k, v) in [
            ("lexicon", &self.lexicon),
            ("emoticons", &self.emoticons),
            ("embeddings", &self.embeddings),
            ("subwords", &self.subwords),
        ] {
            if let Some(p) = v {
                out.push((k.to_string(), p.display().to_string()));
            }
        }
        out
    }

    /// File config, then flags, then the resource directory for anything
    /// still unset.
    fn config(&self, extra: Vec<(String, String)>) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut doc = String::new();
        for (k, v) in self.lines().into_iter().chain(extra) {
            if v.contains('\n') || v.contains('#') {
                return Err(Error::Config(format!(
                    "--{}: value may not contain newlines or '#'",
                    k.replace('_', "-")
                )));
            }
            doc.push_str(&format!("{k} = {v}\n"));
        }
        cfg.update(&doc, "command line", Path::new(""))?;
        match &self.resources {
            Some(dir) => cfg.apply_resource_dir(dir),
            None => cfg.apply_resource_env(),
        }
        Ok(cfg)
    }

    fn preprocessor(&self) -> Result<Preprocessor> {
        let mut cfg = self.config(Vec::new())?;
        cfg.embeddings = None;
        cfg.subwords = None;
        Ok(load_resources(&cfg)?.preprocessor)
    }
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut lines: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                lines.push((k.to_string(), v));
            }
        };
        let s = |v: &Option<String>| v.clone();
        put("variant", self.variant.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("output", self.output.as_ref().map(|p| p.display().to_string()));
        put("word_dim", self.word_dim.map(|v| v.to_string()));
        put("subword_dim", self.subword_dim.map(|v| v.to_string()));
        put("subword_buckets", self.subword_buckets.map(|v| v.to_string()));
        put("trainable_subwords", self.trainable_subwords.map(|v| v.to_string()));
        put("seq_len", self.seq_len.map(|v| v.to_string()));
        put("char_len", self.char_len.map(|v| v.to_string()));
        put("windows", s(&self.windows));
        put("word_filters", self.word_filters.map(|v| v.to_string()));
        put("hidden", s(&self.hidden));
        put("char_kernel", self.char_kernel.map(|v| v.to_string()));
        put("char_strides", s(&self.char_strides));
        put("char_pool", self.char_pool.map(|v| v.to_string()));
        put("char_filters", self.char_filters.map(|v| v.to_string()));
        put("char_hidden", self.char_hidden.map(|v| v.to_string()));
        put("batch_size", self.batch_size.map(|v| v.to_string()));
        put("max_epochs", self.max_epochs.map(|v| v.to_string()));
        put("patience", self.patience.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| format!("{v:e}")));
        put("beta1", self.beta1.map(|v| v.to_string()));
        put("beta2", self.beta2.map(|v| v.to_string()));
        put("epsilon", self.epsilon.map(|v| format!("{v:e}")));
        put("folds", self.folds.map(|v| v.to_string()));
        put("val_fraction", self.val_fraction.map(|v| v.to_string()));
        put("search_budget", self.search_budget.map(|v| v.to_string()));
        for t in &self.tasks {
            let (name, v) = named("task", t)?;
            lines.push((format!("task.{name}"), v));
        }
        for (flag, field, values) in [
            ("test", "test", &self.tests),
            ("labels", "labels", &self.labels),
            ("weight", "weight", &self.weights),
        ] {
            for v in values {
                let (name, v) = named(flag, v)?;
                lines.push((format!("task.{name}.{field}"), v));
            }
        }
        self.res.config(lines)
    }
}

fn preprocess_cmd(args: &PreprocessArgs) -> Result<()> {
    let pre = args.res.preprocessor()?;
    let reader: Box<dyn BufRead> = match &args.input {
        Some(p) => Box::new(io::BufReader::new(
            std::fs::File::open(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(io::stdin().lock()),
    };
    let mut out = io::BufWriter::new(io::stdout().lock());
    for line in reader.lines() {
        let cleaned = pre.run(&line?);
        if args.json {
            let json = serde_json::to_string(&cleaned.tokens).map_err(|e| Error::Data(e.to_string()))?;
            writeln!(out, "{json}")?;
        } else {
            writeln!(out, "{}", cleaned.render())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn train_cmd(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let fin = run_training(&cfg)?;
    let dir = cfg.output.as_ref().expect("validated");
    for m in &fin.models {
        println!("saved {} ({})", m.record.name, m.record.tasks.join(", "));
    }
    for (task, eval) in &fin.tests {
        println!(
            "test {task}: accuracy {:.2} macro-F {:.2} weighted-F {:.2}",
            100.0 * eval.scores.accuracy,
            100.0 * eval.scores.macro_f1,
            100.0 * eval.scores.weighted_f1
        );
    }
    for e in &fin.events {
        eprintln!("note: {e}");
    }
    println!("model written to {}", dir.display());
    Ok(())
}

fn evaluate_cmd(args: &EvaluateArgs) -> Result<()> {
    let pre = args.res.preprocessor()?;
    let run = load_run(&args.model)?;
    let eval = run.evaluate_file(&args.task, &args.data, &pre)?;
    if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&eval).map_err(|e| Error::Data(e.to_string()))?
        );
        return Ok(());
    }
    println!("{}", eval.confusion.render());
    println!("accuracy    {:.2}", 100.0 * eval.scores.accuracy);
    println!("macro-F     {:.2}", 100.0 * eval.scores.macro_f1);
    println!("weighted-F  {:.2}", 100.0 * eval.scores.weighted_f1);
    for z in &eval.zero_division {
        eprintln!("note: zero division in {z}, scored as 0");
    }
    Ok(())
}

fn cross_validate_cmd(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let report = run_cross_validation(&cfg)?;
    print!("{}", report.to_plain());
    Ok(())
}

fn search_cmd(args: &SearchArgs) -> Result<()> {
    let cfg = args.run.config()?;
    cfg.validate()?;
    let res = load_resources(&cfg)?;
    let prep = prepare(&cfg, &res, None)?;
    let result = search_config(&cfg, &prep, &SearchSpace::default())?;
    println!(
        "{:>4}  {:>8}  {:>7}  {:<10}  {:>8}",
        "#", "lr", "filters", "windows", "macro-F"
    );
    for (i, t) in result.trials.iter().enumerate() {
        let w: Vec<String> = t.draw.windows.iter().map(|w| w.to_string()).collect();
        let mark = if i == result.best { " *" } else { "" };
        println!(
            "{:>4}  {:>8.0e}  {:>7}  {:<10}  {:>8.2}{mark}",
            i + 1,
            t.draw.lr,
            t.draw.filters,
            w.join(","),
            100.0 * t.score
        );
    }
    if let Some(p) = &args.write_config {
        std::fs::write(p, result.best().draw.apply(&cfg).to_text())?;
        println!("best configuration written to {}", p.display());
    }
    Ok(())
}

fn report_cmd(args: &ReportArgs) -> Result<()> {
    let path = if args.path.is_dir() {
        args.path.join("report.json")
    } else {
        args.path.clone()
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let report = Report::from_json(&text)?;
    if args.audit {
        let problems = audit(&report);
        if !problems.is_empty() {
            for p in &problems {
                eprintln!("audit: {p}");
            }
            return Err(Error::Data(format!(
                "{}: {} audit failures",
                path.display(),
                problems.len()
            )));
        }
    }
    match args.format {
        Format::Plain => print!("{}", report.to_plain()),
        Format::Csv => print!("{}", report.to_csv()),
        Format::Json => print!("{}", report.to_json()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Preprocess(a) => preprocess_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::CrossValidate(a) => cross_validate_cmd(a),
        Command::Search(a) => search_cmd(a),
        Command::Report(a) => report_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Io(e)) if e.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mtltext: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
