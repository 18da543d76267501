//! File-level orchestration: recovery → prompt tuning → generation →
//! train/eval.
//!
//! Every stage is a function over in-memory values plus a file wrapper that
//! the CLI subcommands call directly. Stage seeds are derived from the run
//! seed inside each stage, so running the subcommands one after another on
//! the intermediate files reproduces `run_pipeline` exactly.
//!
//! All file reads and writes go through [`StageIo`], which records them in
//! the manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::classifier::{
    evaluate_base_to_new, evaluate_gzsl, ClassifierConfig, EvalReport, LinearClassifier, Protocol,
};
use crate::emb::{read_emb1, write_emb1, EmbeddingSet, SplitSpec};
use crate::error::{Error, Result};
use crate::flpt::{enhance_features, train_flpt, FlptConfig, PromptState, TextEncoder, TextSource, TextTokenTable};
use crate::generator::{synthesize, train_generator, GeneratorConfig, GeneratorState};
use crate::oracle::{HttpOracle, RetryPolicy};
use crate::recovery::{recover_blackbox, recover_whitebox, RecoveryConfig, RecoveryMode};
use crate::seed::derive_seed;
use crate::vmf::ClassPrototypes;

const SALT_RECOVER: u64 = 1;
const SALT_FLPT: u64 = 2;
const SALT_ENCODER: u64 = 3;
const SALT_GENERATOR: u64 = 4;
const SALT_SYNTH: u64 = 5;
const SALT_CLASSIFIER: u64 = 6;

/// Output file names inside the run directory.
pub mod files {
    pub const VIRTUAL_BASE: &str = "virtual_base.emb1";
    pub const PROTOTYPES: &str = "prototypes.emb1";
    pub const RECOVERY: &str = "recovery.json";
    pub const FLPT_STATE: &str = "flpt_state.json";
    pub const ENHANCED_BASE: &str = "enhanced_base.emb1";
    pub const ENHANCED_TEXT: &str = "enhanced_text.emb1";
    pub const FLPT: &str = "flpt.json";
    pub const GENERATOR: &str = "generator.gen1";
    pub const SYNTHESIZED: &str = "synthesized_new.emb1";
    pub const GENERATION: &str = "generator.json";
    pub const CLASSIFIER: &str = "classifier.json";
    pub const REPORT: &str = "report.json";
    pub const REPORT_CSV: &str = "report.csv";
    pub const MANIFEST: &str = "manifest.json";
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelinePaths {
    /// EMB1 with one text feature per class (base and new).
    pub text_features: Option<PathBuf>,
    /// Token-table JSON; used when no text features are given.
    pub token_table: Option<PathBuf>,
    pub split: PathBuf,
    /// Server classifier weights (white-box only).
    pub weights: Option<PathBuf>,
    pub test_features: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: RecoveryMode,
    pub seed: u64,
    pub paths: PipelinePaths,
    pub server_url: Option<String>,
    pub retry: RetryPolicy,
    pub recovery: RecoveryConfig,
    pub flpt: FlptConfig,
    pub generator: GeneratorConfig,
    pub classifier: ClassifierConfig,
    pub protocol: Protocol,
    /// Ablation switches.
    pub use_flpt: bool,
    pub use_generator: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: RecoveryMode::WhiteBox,
            seed: 0,
            paths: PipelinePaths::default(),
            server_url: None,
            retry: RetryPolicy::default(),
            recovery: RecoveryConfig::default(),
            flpt: FlptConfig::default(),
            generator: GeneratorConfig::default(),
            classifier: ClassifierConfig::default(),
            protocol: Protocol::Gzsl,
            use_flpt: true,
            use_generator: true,
        }
    }
}

fn require_file(what: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} file {} does not exist", path.display())))
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_with_overrides(path, &[])
    }

    /// Reads the config and applies `key=value` overrides (dotted keys,
    /// values parsed as JSON and otherwise taken as strings).
    pub fn load_with_overrides(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut value: Value = serde_json::from_str(&text)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.recovery.validate()?;
        self.flpt.validate()?;
        self.generator.validate()?;
        self.classifier.validate()?;
        let p = &self.paths;
        match self.mode {
            RecoveryMode::WhiteBox => {
                let w = p
                    .weights
                    .as_ref()
                    .ok_or_else(|| Error::Config("white-box mode needs paths.weights".into()))?;
                require_file("weights", w)?;
            }
            RecoveryMode::BlackBox => {
                if self.server_url.as_deref().unwrap_or("").is_empty() {
                    return Err(Error::Config("black-box mode needs server_url".into()));
                }
            }
        }
        match (&p.text_features, &p.token_table) {
            (Some(t), _) => require_file("text features", t)?,
            (None, Some(t)) => require_file("token table", t)?,
            (None, None) => {
                return Err(Error::Config(
                    "paths.text_features or paths.token_table is required".into(),
                ))
            }
        }
        require_file("split", &p.split)?;
        require_file("test features", &p.test_features)?;
        if p.out_dir.as_os_str().is_empty() {
            return Err(Error::Config("paths.out_dir is required".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Sets `a.b.c=value` inside a JSON object, creating objects on the way.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("override key {key:?} has an empty segment")));
        }
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            } else {
                return Err(Error::Config(format!("override {key:?}: {part:?} is not inside an object")));
            }
        }
        let map = node.as_object_mut().unwrap();
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileAccess {
    pub stage: String,
    pub op: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seconds: f64,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub mode: RecoveryMode,
    pub stages: Vec<StageRecord>,
    pub file_access: Vec<FileAccess>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }
}

/// Records every file a stage touches.
#[derive(Debug, Default)]
pub struct StageIo {
    pub reads: Vec<PathBuf>,
    pub writes: Vec<PathBuf>,
}

impl StageIo {
    fn read(&mut self, p: &Path) {
        if !self.reads.iter().any(|r| r == p) {
            self.reads.push(p.to_path_buf());
        }
    }

    fn wrote(&mut self, p: &Path) {
        if !self.writes.iter().any(|r| r == p) {
            self.writes.push(p.to_path_buf());
        }
    }

    pub fn read_emb1(&mut self, p: &Path) -> Result<EmbeddingSet> {
        self.read(p);
        read_emb1(p)
    }

    pub fn read_prototypes(&mut self, p: &Path) -> Result<ClassPrototypes> {
        ClassPrototypes::from_embedding_set(&self.read_emb1(p)?)
    }

    pub fn read_split(&mut self, p: &Path) -> Result<SplitSpec> {
        self.read(p);
        SplitSpec::load(p)
    }

    pub fn read_prompt_state(&mut self, p: &Path) -> Result<PromptState> {
        self.read(p);
        PromptState::load(p)
    }

    pub fn read_generator(&mut self, p: &Path) -> Result<GeneratorState> {
        self.read(p);
        GeneratorState::load(p)
    }

    pub fn read_token_table(&mut self, p: &Path) -> Result<TextTokenTable> {
        self.read(p);
        TextTokenTable::load(p)
    }

    pub fn write_emb1(&mut self, set: &EmbeddingSet, p: &Path) -> Result<()> {
        write_emb1(set, p)?;
        self.wrote(p);
        Ok(())
    }

    pub fn write_prototypes(&mut self, protos: &ClassPrototypes, p: &Path) -> Result<()> {
        self.write_emb1(&protos.to_embedding_set()?, p)
    }

    pub fn write_json<T: Serialize>(&mut self, value: &T, p: &Path) -> Result<()> {
        fs::write(p, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(p, e))?;
        self.wrote(p);
        Ok(())
    }

    pub fn write_with(&mut self, p: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        write(p)?;
        self.wrote(p);
        Ok(())
    }
}

/// Where the class text features come from, as given on the command line
/// or in the config.
#[derive(Debug, Clone, Default)]
pub struct TextInput {
    pub text_features: Option<PathBuf>,
    pub token_table: Option<PathBuf>,
}

impl TextInput {
    /// Frozen exported features when a text-feature file is given,
    /// otherwise prompted through the frozen default encoder.
    pub fn load(&self, io: &mut StageIo, dim: usize, seed: u64) -> Result<TextSource> {
        if let Some(p) = &self.text_features {
            let protos = io.read_prototypes(p)?;
            if protos.dim() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: protos.dim(),
                });
            }
            return Ok(TextSource::Frozen(protos));
        }
        if let Some(p) = &self.token_table {
            let tokens = io.read_token_table(p)?;
            let encoder = TextEncoder::random(tokens.dim, dim, derive_seed(seed, SALT_ENCODER));
            return Ok(TextSource::Prompted { encoder, tokens });
        }
        Err(Error::Config("text features or a token table is required".into()))
    }
}

/// Prompt state before any tuning, shared by recovery (text
/// initialization) and prompt tuning.
pub fn initial_prompt_state(source: &TextSource, config: &FlptConfig, dim: usize, seed: u64) -> Result<PromptState> {
    let prefix = match source {
        TextSource::Prompted { tokens, .. } => tokens.prefix_tensor(),
        TextSource::Frozen(_) => None,
    };
    PromptState::init(source.token_dim(config), dim, prefix.as_ref(), config, derive_seed(seed, SALT_FLPT))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoverySummary {
    pub mode: RecoveryMode,
    pub kappa_text: f64,
    pub lambda: f64,
    pub samples_per_class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_history: Vec<f64>,
}

pub struct RecoveryOutput {
    pub virtual_base: EmbeddingSet,
    pub prototypes: ClassPrototypes,
    pub summary: RecoverySummary,
}

/// White-box: `weights` are the server classifier. Black-box: `text_base`
/// holds the base-class text features in the server's class order.
pub fn stage_recover(
    mode: RecoveryMode,
    weights: Option<&ClassPrototypes>,
    text_base: Option<&ClassPrototypes>,
    server_url: Option<&str>,
    retry: RetryPolicy,
    config: &RecoveryConfig,
    seed: u64,
) -> Result<RecoveryOutput> {
    let seed = derive_seed(seed, SALT_RECOVER);
    match mode {
        RecoveryMode::WhiteBox => {
            let w = weights.ok_or_else(|| Error::Config("white-box recovery needs weights".into()))?;
            let (virtual_base, params) = recover_whitebox(w, config, seed)?;
            Ok(RecoveryOutput {
                virtual_base,
                prototypes: w.clone(),
                summary: RecoverySummary {
                    mode,
                    kappa_text: params.kappa_text,
                    lambda: params.lambda,
                    samples_per_class: config.samples_per_class,
                    initial_loss: None,
                    final_loss: None,
                    converged: None,
                    loss_history: Vec::new(),
                },
            })
        }
        RecoveryMode::BlackBox => {
            let text = text_base.ok_or_else(|| Error::Config("black-box recovery needs text features".into()))?;
            let url = server_url.ok_or_else(|| Error::Config("black-box recovery needs a server url".into()))?;
            let oracle = HttpOracle::new(url, retry);
            let out = recover_blackbox(text, &oracle, config, seed)?;
            Ok(RecoveryOutput {
                virtual_base: out.virtual_base,
                prototypes: out.prototypes,
                summary: RecoverySummary {
                    mode,
                    kappa_text: out.params.kappa_text,
                    lambda: out.params.lambda,
                    samples_per_class: config.samples_per_class,
                    initial_loss: Some(out.initial_loss),
                    final_loss: Some(out.final_loss),
                    converged: Some(out.converged),
                    loss_history: out.loss_history,
                },
            })
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlptSummary {
    pub tuned: bool,
    pub initial_loss: Option<f64>,
    pub loss_history: Vec<f64>,
    pub shift_norm: f64,
}

pub struct FlptOutput {
    pub state: PromptState,
    pub enhanced_base: EmbeddingSet,
    /// Text features for `all_classes`, in that order.
    pub enhanced_text: ClassPrototypes,
    pub summary: FlptSummary,
}

/// With `tune = false` the initial state is kept: zero shift, untouched
/// prompts.
pub fn stage_flpt(
    virtual_base: &EmbeddingSet,
    source: &TextSource,
    all_classes: &[String],
    config: &FlptConfig,
    tune: bool,
    seed: u64,
) -> Result<FlptOutput> {
    let (state, enhanced_base, initial_loss, history) = if tune {
        let out = train_flpt(virtual_base, source, config, derive_seed(seed, SALT_FLPT))?;
        (out.state, out.enhanced_base, Some(out.initial_loss), out.loss_history)
    } else {
        let state = initial_prompt_state(source, config, virtual_base.dim(), seed)?;
        let enhanced = enhance_features(virtual_base, &state)?;
        (state, enhanced, None, Vec::new())
    };
    let enhanced_text = source.encode(&state, all_classes)?;
    let shift_norm = state.compute_shift().iter().map(|v| v * v).sum::<f64>().sqrt() * state.alpha;
    Ok(FlptOutput {
        state,
        enhanced_base,
        enhanced_text,
        summary: FlptSummary {
            tuned: tune,
            initial_loss,
            loss_history: history,
            shift_norm,
        },
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub backend: String,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub min_kl: f64,
    pub loss_history: Vec<f64>,
    pub per_class: usize,
}

pub struct GenerationOutput {
    pub state: GeneratorState,
    pub synthesized: EmbeddingSet,
    pub summary: GenerationSummary,
}

/// Trains on the enhanced base features and synthesizes `new_classes`.
pub fn stage_generate(
    enhanced_base: &EmbeddingSet,
    enhanced_text: &ClassPrototypes,
    new_classes: &[String],
    config: &GeneratorConfig,
    seed: u64,
) -> Result<GenerationOutput> {
    let out = train_generator(enhanced_base, enhanced_text, config, derive_seed(seed, SALT_GENERATOR))?;
    let synthesized = synthesize(
        &out.state,
        &enhanced_text.select(new_classes)?,
        config.per_class,
        derive_seed(seed, SALT_SYNTH),
    )?;
    Ok(GenerationOutput {
        summary: GenerationSummary {
            backend: config.backend.to_string(),
            initial_loss: out.initial_loss,
            final_loss: out.final_loss,
            min_kl: out.min_kl,
            loss_history: out.loss_history,
            per_class: config.per_class,
        },
        state: out.state,
        synthesized,
    })
}

/// Classifier(s) and the report. Base-to-new trains one classifier per
/// label space.
pub struct TrainEvalOutput {
    pub classifiers: Vec<LinearClassifier>,
    pub report: EvalReport,
}

/// Without synthesized features the classifier stays the text classifier
/// (no training), since new classes would have no samples.
#[allow(clippy::too_many_arguments)]
pub fn stage_train_eval(
    enhanced_base: &EmbeddingSet,
    synthesized: Option<&EmbeddingSet>,
    enhanced_text: &ClassPrototypes,
    state: &PromptState,
    test: &EmbeddingSet,
    split: &SplitSpec,
    protocol: Protocol,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<TrainEvalOutput> {
    let seed = derive_seed(seed, SALT_CLASSIFIER);
    let test = enhance_features(test, state)?;
    let test_base = test.select_classes(&split.base)?;
    let test_new = test.select_classes(&split.new)?;
    let base_train = enhanced_base.select_classes(&split.base)?;
    match protocol {
        Protocol::Gzsl => {
            let mut clf = LinearClassifier::from_text(&enhanced_text.select(&split.all_classes())?, config.tau);
            if let Some(synth) = synthesized {
                let mut train = EmbeddingSet::new(base_train.dim(), split.all_classes())?;
                train.extend_from(&base_train)?;
                train.extend_from(synth)?;
                clf.train(&train, config, seed)?;
            }
            let report = evaluate_gzsl(&clf, &test_base, &test_new)?;
            Ok(TrainEvalOutput {
                classifiers: vec![clf],
                report,
            })
        }
        Protocol::BaseToNew => {
            let mut base = LinearClassifier::from_text(&enhanced_text.select(&split.base)?, config.tau);
            let mut new = LinearClassifier::from_text(&enhanced_text.select(&split.new)?, config.tau);
            if let Some(synth) = synthesized {
                base.train(&base_train, config, seed)?;
                new.train(&synth.select_classes(&split.new)?, config, derive_seed(seed, 1))?;
            }
            let report = evaluate_base_to_new(&base, &new, &test_base, &test_new)?;
            Ok(TrainEvalOutput {
                classifiers: vec![base, new],
                report,
            })
        }
    }
}

struct Run<'a> {
    config: &'a PipelineConfig,
    manifest: Manifest,
    manifest_path: PathBuf,
}

impl Run<'_> {
    fn stage<T>(&mut self, name: &str, body: impl FnOnce(&mut StageIo) -> Result<T>) -> Result<T> {
        let mut io = StageIo::default();
        let start = Instant::now();
        let result = body(&mut io);
        let mut record = StageRecord {
            name: name.to_owned(),
            seed: self.config.seed,
            inputs: io.reads.clone(),
            outputs: io.writes.clone(),
            seconds: start.elapsed().as_secs_f64(),
            status: "ok".into(),
            error: None,
        };
        if let Err(e) = &result {
            record.status = "failed".into();
            record.error = Some(e.to_string());
        }
        for (op, paths) in [("read", &io.reads), ("write", &io.writes)] {
            for p in paths {
                self.manifest.file_access.push(FileAccess {
                    stage: name.to_owned(),
                    op: op.into(),
                    path: p.clone(),
                });
            }
        }
        self.manifest.stages.push(record);
        self.save()?;
        log::info!("stage {name}: {:.2}s", start.elapsed().as_secs_f64());
        result.map_err(|e| Error::Stage {
            stage: name.to_owned(),
            source: Box::new(e),
        })
    }

    fn save(&self) -> Result<()> {
        fs::write(&self.manifest_path, serde_json::to_string_pretty(&self.manifest)? + "\n")
            .map_err(|e| Error::io(&self.manifest_path, e))
    }
}

/// Runs every stage and writes all intermediates, the report and the
/// manifest to `paths.out_dir`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<EvalReport> {
    config.validate()?;
    let out = &config.paths.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let at = |name: &str| out.join(name);
    let mut run = Run {
        config,
        manifest: Manifest {
            config_hash: config.hash(),
            seed: config.seed,
            mode: config.mode,
            stages: Vec::new(),
            file_access: Vec::new(),
        },
        manifest_path: at(files::MANIFEST),
    };
    let seed = config.seed;
    let text_input = TextInput {
        text_features: config.paths.text_features.clone(),
        token_table: config.paths.token_table.clone(),
    };

    run.stage("recover", |io| {
        let split = io.read_split(&config.paths.split)?;
        let (weights, text_base) = match config.mode {
            RecoveryMode::WhiteBox => {
                let w = io.read_prototypes(config.paths.weights.as_ref().expect("validated"))?;
                (Some(w.select(&split.base)?), None)
            }
            RecoveryMode::BlackBox => {
                let info_dim = HttpOracle::new(config.server_url.clone().unwrap_or_default(), config.retry);
                let dim = crate::oracle::PredictionService::info(&info_dim)?.dim;
                let source = text_input.load(io, dim, seed)?;
                let state = initial_prompt_state(&source, &config.flpt, dim, seed)?;
                (None, Some(source.encode(&state, &split.base)?))
            }
        };
        let r = stage_recover(
            config.mode,
            weights.as_ref(),
            text_base.as_ref(),
            config.server_url.as_deref(),
            config.retry,
            &config.recovery,
            seed,
        )?;
        io.write_emb1(&r.virtual_base, &at(files::VIRTUAL_BASE))?;
        io.write_prototypes(&r.prototypes, &at(files::PROTOTYPES))?;
        io.write_json(&r.summary, &at(files::RECOVERY))
    })?;

    run.stage("flpt", |io| {
        let virtual_base = io.read_emb1(&at(files::VIRTUAL_BASE))?;
        let split = io.read_split(&config.paths.split)?;
        let source = text_input.load(io, virtual_base.dim(), seed)?;
        let f = stage_flpt(&virtual_base, &source, &split.all_classes(), &config.flpt, config.use_flpt, seed)?;
        io.write_with(&at(files::FLPT_STATE), |p| f.state.save(p))?;
        io.write_emb1(&f.enhanced_base, &at(files::ENHANCED_BASE))?;
        io.write_prototypes(&f.enhanced_text, &at(files::ENHANCED_TEXT))?;
        io.write_json(&f.summary, &at(files::FLPT))
    })?;

    if config.use_generator {
        run.stage("generate", |io| {
            let base = io.read_emb1(&at(files::ENHANCED_BASE))?;
            let text = io.read_prototypes(&at(files::ENHANCED_TEXT))?;
            let split = io.read_split(&config.paths.split)?;
            let g = stage_generate(&base, &text, &split.new, &config.generator, seed)?;
            io.write_with(&at(files::GENERATOR), |p| g.state.save(p))?;
            io.write_emb1(&g.synthesized, &at(files::SYNTHESIZED))?;
            io.write_json(&g.summary, &at(files::GENERATION))
        })?;
    }

    run.stage("train-eval", |io| {
        let base = io.read_emb1(&at(files::ENHANCED_BASE))?;
        let synth = if config.use_generator {
            Some(io.read_emb1(&at(files::SYNTHESIZED))?)
        } else {
            None
        };
        let text = io.read_prototypes(&at(files::ENHANCED_TEXT))?;
        let state = io.read_prompt_state(&at(files::FLPT_STATE))?;
        let test = io.read_emb1(&config.paths.test_features)?;
        let split = io.read_split(&config.paths.split)?;
        let t = stage_train_eval(
            &base,
            synth.as_ref(),
            &text,
            &state,
            &test,
            &split,
            config.protocol,
            &config.classifier,
            seed,
        )?;
        io.write_json(&t.classifiers, &at(files::CLASSIFIER))?;
        io.write_with(&at(files::REPORT), |p| t.report.write_json(p))?;
        io.write_with(&at(files::REPORT_CSV), |p| t.report.write_csv(p))?;
        Ok(t.report)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_set_nested_values() {
        let mut v = json!({"seed": 1, "flpt": {"alpha": 1.0}});
        apply_override(&mut v, "flpt.alpha=0.5").unwrap();
        apply_override(&mut v, "seed=9").unwrap();
        apply_override(&mut v, "server_url=http://x:1").unwrap();
        apply_override(&mut v, "generator.backend=cgan").unwrap();
        assert_eq!(v["flpt"]["alpha"], 0.5);
        assert_eq!(v["seed"], 9);
        assert_eq!(v["server_url"], "http://x:1");
        let cfg = PipelineConfig::from_value(v).unwrap();
        assert_eq!(cfg.generator.backend, crate::generator::Backend::Cgan);
        assert!(apply_override(&mut json!({}), "novalue").is_err());
        assert!(apply_override(&mut json!({"a": 1}), "a.b=2").is_err());
    }

    #[test]
    fn missing_files_fail_validation() {
        let cfg = PipelineConfig {
            paths: PipelinePaths {
                weights: Some("/nonexistent/w.emb1".into()),
                text_features: Some("/nonexistent/t.emb1".into()),
                split: "/nonexistent/split.json".into(),
                test_features: "/nonexistent/test.emb1".into(),
                out_dir: "/tmp/x".into(),
                token_table: None,
            },
            ..Default::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.is_validation(), "{err}");
        let black = PipelineConfig {
            mode: RecoveryMode::BlackBox,
            ..cfg
        };
        assert!(black.validate().unwrap_err().to_string().contains("server_url"));
    }

    #[test]
    fn mistyped_config_field_is_a_validation_error() {
        let err = PipelineConfig::from_value(json!({"seed": "seven"})).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
