//! Experiment specs, the key-value config format, presets and the
//! JSON-lines metrics writer. This is the only module that touches the
//! filesystem or the environment.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_blobs, Dataset};
use crate::error::{Error, Result};
use crate::federation::{run_federation, ArchitectureKind, FederationConfig, Method, RoundMetrics, TaskData};

/// Prefix of environment variables that override config keys.
/// `ILORA_FEDERATION__ROUNDS=3` sets `federation.rounds`.
pub const ENV_PREFIX: &str = "ILORA_";

pub const PRESETS: [&str; 3] = ["default", "canonical", "paper-hetero"];

/// Where the training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub d_in: usize,
    pub spread: f64,
    pub holdout_fraction: f64,
    /// Text dataset to load instead of generating blobs.
    pub path: Option<PathBuf>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            samples_per_class: 200,
            d_in: 16,
            spread: 0.5,
            holdout_fraction: 0.2,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub preset: String,
    pub federation: FederationConfig,
    pub data: DatasetSpec,
    pub output: Option<PathBuf>,
    /// When non-empty, the run is repeated for each Dirichlet parameter.
    pub sweep_alphas: Vec<f64>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        preset("default").expect("default preset exists")
    }
}

impl ExperimentSpec {
    /// Sets every seed to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        let f = &mut self.federation;
        f.data_seed = seed;
        f.partition_seed = seed;
        f.training_seed = seed;
        f.model_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.federation.validate()?;
        let d = &self.data;
        if d.path.is_none() && (d.n_classes < 2 || d.samples_per_class == 0 || d.d_in == 0) {
            return Err(Error::InvalidConfig(
                "data needs at least 2 classes, 1 sample per class and 1 feature".into(),
            ));
        }
        if !(d.spread >= 0.0) {
            return Err(Error::InvalidConfig("data.spread must be nonnegative".into()));
        }
        if !(d.holdout_fraction > 0.0 && d.holdout_fraction < 1.0) {
            return Err(Error::InvalidConfig("data.holdout_fraction must be in (0, 1)".into()));
        }
        if self.sweep_alphas.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::InvalidConfig("sweep.dirichlet_alphas must be positive".into()));
        }
        Ok(())
    }
}

/// Named starting points.
///
/// * `default`: 3 clients of rank 4, server rank 4, AdamW lr 1e-4, one
///   local epoch, 5 rounds, full participation.
/// * `canonical`: softmax regression with 8 clients, Dir(0.3), two local
///   epochs and 30 rounds; the drift and convergence checks run on it.
/// * `paper-hetero`: ranks 2/8/16 on three clients with a sweep over
///   Dir(0.1), Dir(0.5) and Dir(1.0) and a global scale of 0.5.
pub fn preset(name: &str) -> Result<ExperimentSpec> {
    let base = ExperimentSpec {
        preset: name.to_string(),
        federation: FederationConfig::default(),
        data: DatasetSpec::default(),
        output: None,
        sweep_alphas: Vec::new(),
    };
    match name {
        "default" => Ok(base),
        "canonical" => Ok(ExperimentSpec {
            federation: FederationConfig {
                n_clients: 8,
                client_ranks: vec![4; 8],
                server_rank: 6,
                local_epochs: 2,
                rounds: 30,
                batch_size: 32,
                dirichlet_alpha: 0.3,
                optimizer: crate::optim::AdamWConfig {
                    lr: 5e-3,
                    ..Default::default()
                },
                ..FederationConfig::default()
            },
            data: DatasetSpec {
                n_classes: 8,
                samples_per_class: 300,
                d_in: 16,
                spread: 0.2,
                ..DatasetSpec::default()
            },
            ..base
        }),
        "paper-hetero" => Ok(ExperimentSpec {
            federation: FederationConfig {
                n_clients: 3,
                client_ranks: vec![2, 8, 16],
                server_rank: 16,
                global_scale: 0.5,
                ..FederationConfig::default()
            },
            data: DatasetSpec {
                n_classes: 16,
                d_in: 32,
                ..DatasetSpec::default()
            },
            sweep_alphas: vec![0.1, 0.5, 1.0],
            ..base
        }),
        other => Err(Error::InvalidConfig(format!(
            "unknown preset `{other}` (known: {})",
            PRESETS.join(", ")
        ))),
    }
}

/// Keys accepted by [`parse_config`].
pub const KEYS: &[&str] = &[
    "preset",
    "seed",
    "seed.data",
    "seed.partition",
    "seed.training",
    "seed.model",
    "output.path",
    "federation.n_clients",
    "federation.participation",
    "federation.local_epochs",
    "federation.batch_size",
    "federation.rounds",
    "federation.client_ranks",
    "federation.server_rank",
    "federation.method",
    "federation.lora_alpha",
    "federation.dirichlet_alpha",
    "federation.global_scale",
    "federation.train_bias",
    "model.architecture",
    "model.hidden_width",
    "model.theta0_scale",
    "optimizer.lr",
    "optimizer.beta1",
    "optimizer.beta2",
    "optimizer.eps",
    "optimizer.weight_decay",
    "data.n_classes",
    "data.samples_per_class",
    "data.d_in",
    "data.spread",
    "data.holdout_fraction",
    "data.path",
    "sweep.dirichlet_alphas",
];

struct Entry {
    line: usize,
    key: String,
    value: String,
}

fn tokenize(text: &str) -> Result<Vec<Entry>> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(inner) = content.strip_prefix('[') {
            let name = inner
                .strip_suffix(']')
                .ok_or_else(|| Error::Parse { line, message: "unterminated section header".into() })?
                .trim();
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(Error::Parse { line, message: format!("bad section name `{name}`") });
            }
            section = format!("{name}.");
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::Parse { line, message: format!("expected `key = value`, got `{content}`") })?;
        let key = format!("{section}{}", key.trim());
        let value = value.trim().trim_matches('"').to_string();
        out.push(Entry { line, key, value });
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(e: &Entry) -> Result<T> {
    e.value.parse().map_err(|_| Error::Parse {
        line: e.line,
        message: format!("`{}` expects a {}, got `{}`", e.key, std::any::type_name::<T>(), e.value),
    })
}

fn list<T: std::str::FromStr>(e: &Entry) -> Result<Vec<T>> {
    let inner = e.value.trim_start_matches('[').trim_end_matches(']');
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|s| {
            s.trim().parse().map_err(|_| Error::Parse {
                line: e.line,
                message: format!("`{}`: cannot parse list item `{}`", e.key, s.trim()),
            })
        })
        .collect()
}

fn boolean(e: &Entry) -> Result<bool> {
    match e.value.as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Parse { line: e.line, message: format!("`{}` expects true or false", e.key) }),
    }
}

/// Parses config text. Keys are `section.name = value`, optionally grouped
/// under `[section]` headers; `#` starts a comment and later assignments
/// win. `preset` selects the starting point regardless of its position.
pub fn parse_config(text: &str) -> Result<ExperimentSpec> {
    parse_config_with_overrides(text, &[])
}

/// Like [`parse_config`], then applies `overrides` as if appended to the
/// file (they are reported as line 0 on error).
pub fn parse_config_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<ExperimentSpec> {
    let mut entries = tokenize(text)?;
    entries.extend(overrides.iter().map(|(k, v)| Entry {
        line: 0,
        key: k.clone(),
        value: v.clone(),
    }));
    for e in &entries {
        if !KEYS.contains(&e.key.as_str()) {
            return Err(Error::Parse { line: e.line, message: format!("unknown key `{}`", e.key) });
        }
    }
    let preset_name = entries
        .iter()
        .rev()
        .find(|e| e.key == "preset")
        .map(|e| e.value.clone())
        .unwrap_or_else(|| "default".into());
    let mut spec = preset(&preset_name)?;
    let mut ranks: Option<(usize, Vec<usize>)> = None;
    let mut server_rank_set = false;
    let mut arch: Option<(usize, String)> = None;
    let mut width = match spec.federation.architecture {
        ArchitectureKind::OneHidden { width } => width,
        ArchitectureKind::Linear => 32,
    };

    for e in &entries {
        let f = &mut spec.federation;
        match e.key.as_str() {
            "preset" => {}
            "seed" => {
                let s: u64 = num(e)?;
                f.data_seed = s;
                f.partition_seed = s;
                f.training_seed = s;
                f.model_seed = s;
            }
            "seed.data" => f.data_seed = num(e)?,
            "seed.partition" => f.partition_seed = num(e)?,
            "seed.training" => f.training_seed = num(e)?,
            "seed.model" => f.model_seed = num(e)?,
            "output.path" => spec.output = (!e.value.is_empty()).then(|| PathBuf::from(&e.value)),
            "federation.n_clients" => f.n_clients = num(e)?,
            "federation.participation" => f.participation = num(e)?,
            "federation.local_epochs" => f.local_epochs = num(e)?,
            "federation.batch_size" => f.batch_size = num(e)?,
            "federation.rounds" => f.rounds = num(e)?,
            "federation.client_ranks" => ranks = Some((e.line, list(e)?)),
            "federation.server_rank" => {
                f.server_rank = num(e)?;
                server_rank_set = true;
            }
            "federation.method" => {
                f.method = e.value.parse().map_err(|err: Error| Error::Parse {
                    line: e.line,
                    message: err.to_string(),
                })?
            }
            "federation.lora_alpha" => f.lora_alpha = num(e)?,
            "federation.dirichlet_alpha" => f.dirichlet_alpha = num(e)?,
            "federation.global_scale" => f.global_scale = num(e)?,
            "federation.train_bias" => f.train_bias = boolean(e)?,
            "model.architecture" => arch = Some((e.line, e.value.clone())),
            "model.hidden_width" => width = num(e)?,
            "model.theta0_scale" => f.theta0_scale = num(e)?,
            "optimizer.lr" => f.optimizer.lr = num(e)?,
            "optimizer.beta1" => f.optimizer.beta1 = num(e)?,
            "optimizer.beta2" => f.optimizer.beta2 = num(e)?,
            "optimizer.eps" => f.optimizer.eps = num(e)?,
            "optimizer.weight_decay" => f.optimizer.weight_decay = num(e)?,
            "data.n_classes" => spec.data.n_classes = num(e)?,
            "data.samples_per_class" => spec.data.samples_per_class = num(e)?,
            "data.d_in" => spec.data.d_in = num(e)?,
            "data.spread" => spec.data.spread = num(e)?,
            "data.holdout_fraction" => spec.data.holdout_fraction = num(e)?,
            "data.path" => spec.data.path = (!e.value.is_empty()).then(|| PathBuf::from(&e.value)),
            "sweep.dirichlet_alphas" => spec.sweep_alphas = list(e)?,
            _ => unreachable!("keys checked above"),
        }
    }

    let f = &mut spec.federation;
    match arch {
        Some((_, a)) if a == "linear" => f.architecture = ArchitectureKind::Linear,
        Some((_, a)) if a == "one_hidden" => f.architecture = ArchitectureKind::OneHidden { width },
        Some((line, a)) => {
            return Err(Error::Parse { line, message: format!("unknown architecture `{a}`") })
        }
        None => {
            if let ArchitectureKind::OneHidden { .. } = f.architecture {
                f.architecture = ArchitectureKind::OneHidden { width };
            }
        }
    }
    match ranks {
        Some((line, pattern)) => {
            if pattern.is_empty() {
                return Err(Error::Parse { line, message: "client_ranks is empty".into() });
            }
            f.client_ranks = (0..f.n_clients).map(|i| pattern[i % pattern.len()]).collect();
            if !server_rank_set {
                let max = pattern.iter().copied().max().unwrap_or(1);
                let homogeneous = pattern.iter().all(|&r| r == pattern[0]);
                f.server_rank = if homogeneous { max } else { max.max(6) };
            }
        }
        None => {
            // keep the preset's pattern when only the client count changes
            let pattern = f.client_ranks.clone();
            if pattern.len() != f.n_clients && !pattern.is_empty() {
                f.client_ranks = (0..f.n_clients).map(|i| pattern[i % pattern.len()]).collect();
            }
        }
    }
    spec.validate()?;
    Ok(spec)
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

/// Writes every field explicitly; `parse_config` of the result is equal
/// to `spec`.
pub fn serialize_config(spec: &ExperimentSpec) -> String {
    let f = &spec.federation;
    let o = &f.optimizer;
    let d = &spec.data;
    let mut s = String::new();
    let (arch, width) = match f.architecture {
        ArchitectureKind::Linear => ("linear", 32),
        ArchitectureKind::OneHidden { width } => ("one_hidden", width),
    };
    let _ = writeln!(s, "preset = {}", spec.preset);
    if let Some(p) = &spec.output {
        let _ = writeln!(s, "output.path = {}", p.display());
    }
    let _ = writeln!(s, "\n[seed]");
    let _ = writeln!(s, "data = {}\npartition = {}\ntraining = {}\nmodel = {}", f.data_seed, f.partition_seed, f.training_seed, f.model_seed);
    let _ = writeln!(s, "\n[federation]");
    let _ = writeln!(s, "n_clients = {}\nparticipation = {:?}\nlocal_epochs = {}\nbatch_size = {}\nrounds = {}", f.n_clients, f.participation, f.local_epochs, f.batch_size, f.rounds);
    let _ = writeln!(s, "client_ranks = [{}]\nserver_rank = {}\nmethod = {}", join(&f.client_ranks), f.server_rank, f.method);
    let _ = writeln!(s, "lora_alpha = {:?}\ndirichlet_alpha = {:?}\nglobal_scale = {:?}\ntrain_bias = {}", f.lora_alpha, f.dirichlet_alpha, f.global_scale, f.train_bias);
    let _ = writeln!(s, "\n[model]");
    let _ = writeln!(s, "architecture = {arch}\nhidden_width = {width}\ntheta0_scale = {:?}", f.theta0_scale);
    let _ = writeln!(s, "\n[optimizer]");
    let _ = writeln!(s, "lr = {:?}\nbeta1 = {:?}\nbeta2 = {:?}\neps = {:?}\nweight_decay = {:?}", o.lr, o.beta1, o.beta2, o.eps, o.weight_decay);
    let _ = writeln!(s, "\n[data]");
    let _ = writeln!(s, "n_classes = {}\nsamples_per_class = {}\nd_in = {}\nspread = {:?}\nholdout_fraction = {:?}", d.n_classes, d.samples_per_class, d.d_in, d.spread, d.holdout_fraction);
    if let Some(p) = &d.path {
        let _ = writeln!(s, "path = {}", p.display());
    }
    let alphas: Vec<String> = spec.sweep_alphas.iter().map(|a| format!("{a:?}")).collect();
    let _ = writeln!(s, "\n[sweep]\ndirichlet_alphas = [{}]", alphas.join(", "));
    s
}

/// `(key, value)` pairs from `ILORA_*` variables in `vars`.
pub fn env_overrides<I: IntoIterator<Item = (String, String)>>(vars: I) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            Some((rest.to_ascii_lowercase().replace("__", "."), v))
        })
        .filter(|(k, _)| KEYS.contains(&k.as_str()))
        .collect();
    out.sort();
    out
}

/// Reads and parses a config file, then applies environment overrides.
pub fn load_config(path: &Path) -> Result<ExperimentSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_config_with_overrides(&text, &env_overrides(std::env::vars()))
}

/// Generates or loads the dataset and splits off the hold-out set.
pub fn load_data(spec: &ExperimentSpec) -> Result<TaskData> {
    let d = &spec.data;
    let full = match &d.path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
            Dataset::from_text(&text)?
        }
        None => generate_blobs(d.n_classes, d.samples_per_class, d.d_in, d.spread, spec.federation.data_seed)?,
    };
    let (train, holdout) = full.split_holdout(d.holdout_fraction, spec.federation.data_seed)?;
    Ok(TaskData { train, holdout })
}

/// One line of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub dirichlet_alpha: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: RoundMetrics,
}

/// Runs the spec (every sweep point in order) and returns all records.
pub fn run_spec(spec: &ExperimentSpec) -> Result<Vec<MetricsRecord>> {
    spec.validate()?;
    let data = load_data(spec)?;
    let alphas = if spec.sweep_alphas.is_empty() {
        vec![spec.federation.dirichlet_alpha]
    } else {
        spec.sweep_alphas.clone()
    };
    let mut records = Vec::new();
    for alpha in alphas {
        let config = FederationConfig {
            dirichlet_alpha: alpha,
            ..spec.federation.clone()
        };
        for metrics in run_federation(&config, &data)? {
            records.push(MetricsRecord {
                dirichlet_alpha: alpha,
                seed: config.training_seed,
                metrics,
            });
        }
    }
    Ok(records)
}

pub fn to_json_lines(records: &[MetricsRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Io(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// Runs the spec and writes JSON lines to `spec.output`, or to `sink` when
/// no output path is set.
pub fn run_experiment<W: std::io::Write>(spec: &ExperimentSpec, sink: &mut W) -> Result<Vec<MetricsRecord>> {
    let records = run_spec(spec)?;
    let text = to_json_lines(&records)?;
    match &spec.output {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            let mut file = fs::File::create(path)?;
            file.write_all(text.as_bytes())?;
        }
        None => sink.write_all(text.as_bytes())?,
    }
    Ok(records)
}

/// Applies the CLI flags of `run` on top of a parsed spec.
pub fn apply_cli(
    mut spec: ExperimentSpec,
    seed: Option<u64>,
    method: Option<Method>,
    rounds: Option<usize>,
    out: Option<PathBuf>,
) -> Result<ExperimentSpec> {
    if let Some(s) = seed {
        spec = spec.with_seed(s);
    }
    if let Some(m) = method {
        spec.federation.method = m;
    }
    if let Some(t) = rounds {
        spec.federation.rounds = t;
    }
    if out.is_some() {
        spec.output = out;
    }
    spec.validate()?;
    Ok(spec)
}
