use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use dfzsl::benchmark::{make_benchmark, BenchmarkSpec};
use dfzsl::emb::SplitSpec;
use dfzsl::oracle::{serve, ScoreMode, ServerClassifier};
use dfzsl::pipeline::{
    apply_override, files, initial_prompt_state, run_pipeline, stage_flpt, stage_generate, stage_recover,
    stage_train_eval, PipelineConfig, StageIo, TextInput,
};
use dfzsl::recovery::RecoveryMode;
use dfzsl::{ClassPrototypes, Error, Result};

/// Data-free zero-shot learning on embedding vectors.
#[derive(Parser)]
#[command(name = "dfzsl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve a classifier over HTTP (runs until interrupted).
    Serve(ServeArgs),
    /// Sample virtual base-class features from a classifier.
    Recover(RecoverArgs),
    /// Tune prompts and the visual shift on virtual features.
    Flpt(FlptArgs),
    /// Train the feature generator and synthesize new-class features.
    Generate(GenerateArgs),
    /// Train the final classifier and write the evaluation report.
    TrainEval(TrainEvalArgs),
    /// Write the synthetic benchmark dataset.
    MakeBenchmark(BenchmarkArgs),
    /// Run every stage from one config file.
    Run(RunArgs),
}

/// Flags shared by the pipeline subcommands. Precedence: config file,
/// then these flags, then `--set`.
#[derive(Args, Default)]
struct Common {
    /// Pipeline config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config field, e.g. `--set flpt.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// white | black
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    server_url: Option<String>,
    /// Concentration multiplier for virtual-feature sampling.
    #[arg(long)]
    lambda: Option<f64>,
    /// Weight of the visual shift.
    #[arg(long)]
    alpha: Option<f64>,
    /// Virtual features per base class.
    #[arg(long)]
    samples_per_class: Option<usize>,
    /// Synthesized features per new class.
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long, value_parser = ["gzsl", "base-new", "base-to-new"])]
    protocol: Option<String>,
    #[arg(long, value_parser = ["cvae", "cgan"])]
    backend: Option<String>,
}

impl Common {
    fn config(&self) -> Result<PipelineConfig> {
        let mut value = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|_| Error::Config(format!("cannot read config {}", p.display())))?;
                serde_json::from_str(&text)?
            }
            None => Value::Object(Default::default()),
        };
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("mode", self.mode.clone()),
            ("server_url", self.server_url.clone()),
            ("recovery.lambda", self.lambda.map(|v| v.to_string())),
            ("flpt.alpha", self.alpha.map(|v| v.to_string())),
            ("recovery.samples_per_class", self.samples_per_class.map(|v| v.to_string())),
            ("generator.per_class", self.per_class.map(|v| v.to_string())),
            ("protocol", self.protocol.clone()),
            ("generator.backend", self.backend.clone()),
        ];
        for (key, v) in flags {
            if let Some(v) = v {
                apply_override(&mut value, &format!("{key}={v}"))?;
            }
        }
        for s in &self.set {
            apply_override(&mut value, s)?;
        }
        let config = PipelineConfig::from_value(value)?;
        config.recovery.validate()?;
        config.flpt.validate()?;
        config.generator.validate()?;
        config.classifier.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct ServeArgs {
    /// Classifier weights (EMB1, one record per class).
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// 0 picks a free port.
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "cosine", value_parser = ["cosine", "softmax"])]
    score_mode: String,
}

#[derive(Args)]
struct RecoverArgs {
    #[command(flatten)]
    common: Common,
    /// Server weights (white-box).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Class text features (black-box initialization).
    #[arg(long)]
    text: Option<PathBuf>,
    #[arg(long)]
    token_table: Option<PathBuf>,
    /// Base classes, in the server's class order.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Virtual feature output.
    #[arg(long)]
    out: PathBuf,
    /// Prototype output (learned mean directions).
    #[arg(long)]
    prototypes_out: Option<PathBuf>,
    /// Recovery summary JSON.
    #[arg(long)]
    summary_out: Option<PathBuf>,
}

#[derive(Args)]
struct FlptArgs {
    #[command(flatten)]
    common: Common,
    /// Virtual base features.
    #[arg(long = "virtual")]
    virtual_base: PathBuf,
    #[arg(long)]
    text: Option<PathBuf>,
    #[arg(long)]
    token_table: Option<PathBuf>,
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    /// Enhanced base features.
    #[arg(long)]
    base: PathBuf,
    /// Enhanced text features for every class.
    #[arg(long)]
    text: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainEvalArgs {
    #[command(flatten)]
    common: Common,
    /// Enhanced base features.
    #[arg(long)]
    base: PathBuf,
    /// Synthesized new-class features; without them the text classifier is
    /// evaluated untrained.
    #[arg(long)]
    synth: Option<PathBuf>,
    /// Enhanced text features for every class.
    #[arg(long)]
    text: PathBuf,
    /// Prompt state used to shift the test features.
    #[arg(long)]
    state: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 10)]
    base_classes: usize,
    #[arg(long, default_value_t = 5)]
    new_classes: usize,
    #[arg(long, default_value_t = 50.0)]
    kappa: f64,
    #[arg(long, default_value_t = 200)]
    samples_per_class: usize,
    /// Angle between each class mean and its text feature.
    #[arg(long, default_value_t = 10.0)]
    noise_deg: f64,
    #[arg(long, default_value_t = 25.0)]
    min_angle_deg: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Serve(a) => cmd_serve(a),
        Command::Recover(a) => cmd_recover(a),
        Command::Flpt(a) => cmd_flpt(a),
        Command::Generate(a) => cmd_generate(a),
        Command::TrainEval(a) => cmd_train_eval(a),
        Command::MakeBenchmark(a) => cmd_make_benchmark(a),
        Command::Run(a) => cmd_run(a),
    }
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} does not exist", path.display())))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    require(&a.weights)?;
    let weights = StageIo::default().read_prototypes(&a.weights)?;
    let mode: ScoreMode = a.score_mode.parse()?;
    let classifier = ServerClassifier::new(weights, mode);
    serve(classifier, &format!("{}:{}", a.host, a.port), |addr| {
        println!("listening on http://{addr}");
        let _ = std::io::stdout().flush();
    })
}

fn cmd_recover(a: RecoverArgs) -> Result<()> {
    let config = a.common.config()?;
    let mut io = StageIo::default();
    let split = match &a.split {
        Some(p) => {
            require(p)?;
            Some(io.read_split(p)?)
        }
        None => None,
    };
    let (weights, text_base) = match config.mode {
        RecoveryMode::WhiteBox => {
            let p = a
                .weights
                .as_ref()
                .ok_or_else(|| Error::Config("white-box recovery needs --weights".into()))?;
            require(p)?;
            let w = io.read_prototypes(p)?;
            let w = match &split {
                Some(s) => w.select(&s.base)?,
                None => w,
            };
            (Some(w), None)
        }
        RecoveryMode::BlackBox => {
            let url = config
                .server_url
                .clone()
                .ok_or_else(|| Error::Config("black-box recovery needs --server-url".into()))?;
            let input = text_input(a.text.as_deref(), a.token_table.as_deref())?;
            let oracle = dfzsl::oracle::HttpOracle::new(url, config.retry);
            let dim = dfzsl::oracle::PredictionService::info(&oracle)?.dim;
            let source = input.load(&mut io, dim, config.seed)?;
            let names = match (&split, &source) {
                (Some(s), _) => s.base.clone(),
                (None, dfzsl::flpt::TextSource::Frozen(p)) => p.class_names().to_vec(),
                (None, _) => return Err(Error::Config("--split is required with a token table".into())),
            };
            let state = initial_prompt_state(&source, &config.flpt, dim, config.seed)?;
            (None, Some(source.encode(&state, &names)?))
        }
    };
    let r = stage_recover(
        config.mode,
        weights.as_ref(),
        text_base.as_ref(),
        config.server_url.as_deref(),
        config.retry,
        &config.recovery,
        config.seed,
    )?;
    for p in [Some(&a.out), a.prototypes_out.as_ref(), a.summary_out.as_ref()].into_iter().flatten() {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
    }
    io.write_emb1(&r.virtual_base, &a.out)?;
    if let Some(p) = &a.prototypes_out {
        io.write_prototypes(&r.prototypes, p)?;
    }
    if let Some(p) = &a.summary_out {
        io.write_json(&r.summary, p)?;
    }
    println!(
        "wrote {} virtual features for {} classes to {}",
        r.virtual_base.len(),
        r.virtual_base.num_classes(),
        a.out.display()
    );
    Ok(())
}

fn text_input(text: Option<&Path>, tokens: Option<&Path>) -> Result<TextInput> {
    for p in text.iter().chain(tokens.iter()) {
        require(p)?;
    }
    if text.is_none() && tokens.is_none() {
        return Err(Error::Config("--text or --token-table is required".into()));
    }
    Ok(TextInput {
        text_features: text.map(Path::to_path_buf),
        token_table: tokens.map(Path::to_path_buf),
    })
}

fn load_split(io: &mut StageIo, p: &Path) -> Result<SplitSpec> {
    require(p)?;
    io.read_split(p)
}

fn cmd_flpt(a: FlptArgs) -> Result<()> {
    let config = a.common.config()?;
    require(&a.virtual_base)?;
    let input = text_input(a.text.as_deref(), a.token_table.as_deref())?;
    let mut io = StageIo::default();
    let virtual_base = io.read_emb1(&a.virtual_base)?;
    let split = load_split(&mut io, &a.split)?;
    let source = input.load(&mut io, virtual_base.dim(), config.seed)?;
    let f = stage_flpt(
        &virtual_base,
        &source,
        &split.all_classes(),
        &config.flpt,
        config.use_flpt,
        config.seed,
    )?;
    create_dir(&a.out_dir)?;
    let at = |n: &str| a.out_dir.join(n);
    io.write_with(&at(files::FLPT_STATE), |p| f.state.save(p))?;
    io.write_emb1(&f.enhanced_base, &at(files::ENHANCED_BASE))?;
    io.write_prototypes(&f.enhanced_text, &at(files::ENHANCED_TEXT))?;
    io.write_json(&f.summary, &at(files::FLPT))?;
    if let (Some(first), Some(last)) = (f.summary.loss_history.first(), f.summary.loss_history.last()) {
        println!("prompt tuning loss {first:.4} -> {last:.4}");
    }
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let config = a.common.config()?;
    require(&a.base)?;
    require(&a.text)?;
    let mut io = StageIo::default();
    let base = io.read_emb1(&a.base)?;
    let text: ClassPrototypes = io.read_prototypes(&a.text)?;
    let split = load_split(&mut io, &a.split)?;
    let g = stage_generate(&base, &text, &split.new, &config.generator, config.seed)?;
    create_dir(&a.out_dir)?;
    let at = |n: &str| a.out_dir.join(n);
    io.write_with(&at(files::GENERATOR), |p| g.state.save(p))?;
    io.write_emb1(&g.synthesized, &at(files::SYNTHESIZED))?;
    io.write_json(&g.summary, &at(files::GENERATION))?;
    println!(
        "synthesized {} features for {} new classes",
        g.synthesized.len(),
        split.new.len()
    );
    Ok(())
}

fn cmd_train_eval(a: TrainEvalArgs) -> Result<()> {
    let config = a.common.config()?;
    for p in [&a.base, &a.text, &a.state, &a.test].into_iter().chain(a.synth.as_ref()) {
        require(p)?;
    }
    let mut io = StageIo::default();
    let base = io.read_emb1(&a.base)?;
    let synth = a.synth.as_ref().map(|p| io.read_emb1(p)).transpose()?;
    let text = io.read_prototypes(&a.text)?;
    let state = io.read_prompt_state(&a.state)?;
    let test = io.read_emb1(&a.test)?;
    let split = load_split(&mut io, &a.split)?;
    let t = stage_train_eval(
        &base,
        synth.as_ref(),
        &text,
        &state,
        &test,
        &split,
        config.protocol,
        &config.classifier,
        config.seed,
    )?;
    create_dir(&a.out_dir)?;
    let at = |n: &str| a.out_dir.join(n);
    io.write_json(&t.classifiers, &at(files::CLASSIFIER))?;
    io.write_with(&at(files::REPORT), |p| t.report.write_json(p))?;
    io.write_with(&at(files::REPORT_CSV), |p| t.report.write_csv(p))?;
    println!("{}", t.report.summary());
    Ok(())
}

fn cmd_make_benchmark(a: BenchmarkArgs) -> Result<()> {
    let spec = BenchmarkSpec {
        dim: a.dim,
        base_classes: a.base_classes,
        new_classes: a.new_classes,
        kappa: a.kappa,
        samples_per_class: a.samples_per_class,
        noise_deg: a.noise_deg,
        min_angle_deg: a.min_angle_deg,
        seed: a.seed,
    };
    let (_, paths) = make_benchmark(&spec, &a.out_dir)?;
    println!("{}", serde_json::to_string_pretty(&paths)?);
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let mut common = a.common;
    if common.config.is_none() {
        return Err(Error::Config("run needs --config".into()));
    }
    if let Some(dir) = a.out_dir {
        common.set.insert(0, format!("paths.out_dir={}", dir.display()));
    }
    let config = common.config()?;
    let report = run_pipeline(&config)?;
    println!("{}", report.summary());
    println!(
        "report written to {}",
        config.paths.out_dir.join(files::REPORT).display()
    );
    Ok(())
}
