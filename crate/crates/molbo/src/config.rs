//! Run configuration: a flat dotted-key text format, experiment presets,
//! and their resolution into an executable plan.
//!
//! The config grammar is one `key = value` pair per line; blank lines and
//! `#` comments are ignored; duplicate keys are an error. Resolution layers
//! three sources, later ones winning: preset defaults, the config file, and
//! explicit overrides. Every key must be recognized and consumed - unknown
//! keys fail fast with the list of valid names - and the fully-resolved
//! key set is echoed back so a run can be reproduced from its own summary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::bo_loop::{
    AcquisitionSpec, CampaignConfig, DEFAULT_JOINT_CAP, LaplaceMlpSpec, Representation,
    SurrogateSpec,
};
use crate::pool::{CandidatePool, Direction, PoolError, read_feature_file};
use crate::surrogate::curvature::{CurvatureStructure, MargLikConfig};
use crate::surrogate::gp::{GpConfig, KernelKind};
use crate::surrogate::laplace::{PriorGrouping, TrainConfig};
use crate::surrogate::lora::{LoraConfig, PeftConfig};
use crate::surrogate::mlp::Activation;
use crate::surrogate::transformer::{Proj, ToyTransformer, TransformerConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("key {key:?}: {message}")]
    BadValue { key: String, message: String },
    #[error("missing required key {key:?}")]
    MissingKey { key: &'static str },
    #[error("unknown key(s) {keys:?}; valid keys: {valid}")]
    UnknownKeys { keys: Vec<String>, valid: String },
    #[error("unknown preset {name:?}; valid presets: {valid}")]
    UnknownPreset { name: String, valid: String },
    #[error("unknown surrogate {name:?}; valid surrogates: {valid}")]
    UnknownSurrogate { name: String, valid: String },
    #[error("file not found: {path}")]
    FileMissing { path: String },
    #[error("{0}")]
    Pool(#[from] PoolError),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("base weights {path}: {message}")]
    BaseWeights { path: String, message: String },
}

/// Parse the flat `key = value` grammar.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let stripped = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if stripped.is_empty() {
            continue;
        }
        let Some((key, value)) = stripped.split_once('=') else {
            return Err(ConfigError::Malformed {
                line,
                text: raw.trim().to_string(),
            });
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::Malformed {
                line,
                text: raw.trim().to_string(),
            });
        }
        if map.contains_key(&key) {
            return Err(ConfigError::DuplicateKey { line, key });
        }
        map.insert(key, value);
    }
    Ok(map)
}

/// Named bundles of defaults mirroring the experiment protocols at desk
/// scale. Every preset resolves to a runnable plan once a pool path is
/// supplied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Fingerprint GP with the Tanimoto kernel, Thompson sampling.
    GpTanimoto,
    /// Dense-feature GP with the Matern-5/2 kernel, Thompson sampling.
    GpMatern,
    /// Laplace-approximated MLP on cached dense features.
    LaMlp,
    /// LoRA-adapted toy transformer with a linearized Laplace posterior,
    /// re-finetuned every iteration.
    LoraLla,
    /// Uniform random search baseline.
    Random,
}

pub const PRESET_NAMES: [&str; 5] = ["gp-tanimoto", "gp-matern", "la-mlp", "lora-lla", "random"];
pub const SURROGATE_NAMES: [&str; 4] = ["gp-tanimoto", "gp-matern", "laplace-mlp", "lora-transformer"];

impl Preset {
    pub fn from_name(name: &str) -> Result<Self, ConfigError> {
        match name {
            "gp-tanimoto" => Ok(Preset::GpTanimoto),
            "gp-matern" => Ok(Preset::GpMatern),
            "la-mlp" => Ok(Preset::LaMlp),
            "lora-lla" => Ok(Preset::LoraLla),
            "random" => Ok(Preset::Random),
            other => Err(ConfigError::UnknownPreset {
                name: other.to_string(),
                valid: PRESET_NAMES.join(", "),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::GpTanimoto => "gp-tanimoto",
            Preset::GpMatern => "gp-matern",
            Preset::LaMlp => "la-mlp",
            Preset::LoraLla => "lora-lla",
            Preset::Random => "random",
        }
    }

    /// The preset's key-value defaults (the same namespace as config files).
    pub fn defaults(self) -> Vec<(&'static str, String)> {
        let mut keys: Vec<(&'static str, String)> = vec![("seeds", "0,1,2,3,4".to_string())];
        match self {
            Preset::GpTanimoto => {
                keys.extend([
                    ("T", "100".to_string()),
                    ("m", "10".to_string()),
                    ("surrogate.kind", "gp-tanimoto".to_string()),
                    ("representation.kind", "fingerprints".to_string()),
                    ("representation.radius", "2".to_string()),
                    ("representation.bits", "1024".to_string()),
                    ("acquisition.kind", "thompson".to_string()),
                ]);
            }
            Preset::GpMatern => {
                keys.extend([
                    ("T", "100".to_string()),
                    ("m", "10".to_string()),
                    ("surrogate.kind", "gp-matern".to_string()),
                    ("representation.kind", "features".to_string()),
                    ("acquisition.kind", "thompson".to_string()),
                ]);
            }
            Preset::LaMlp => {
                keys.extend([
                    ("T", "100".to_string()),
                    ("m", "10".to_string()),
                    ("surrogate.kind", "laplace-mlp".to_string()),
                    ("representation.kind", "features".to_string()),
                    ("acquisition.kind", "thompson".to_string()),
                ]);
            }
            Preset::LoraLla => {
                keys.extend([
                    ("T", "15".to_string()),
                    ("m", "5".to_string()),
                    ("surrogate.kind", "lora-transformer".to_string()),
                    ("representation.kind", "tokens".to_string()),
                    ("representation.max_len", "64".to_string()),
                    ("acquisition.kind", "thompson".to_string()),
                ]);
            }
            Preset::Random => {
                keys.extend([("T", "100".to_string()), ("m", "10".to_string())]);
            }
        }
        keys
    }
}

/// A fully-resolved run: where the data lives, what to run, and the exact
/// key set that produced it (for the summary echo).
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub pool_path: PathBuf,
    pub features_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub directions: Vec<Direction>,
    pub seeds: Vec<u64>,
    /// `None` for the pure random-search baseline.
    pub campaign: Option<CampaignConfig>,
    pub t_budget: usize,
    pub m_init: usize,
    /// Every key that fed this plan, defaults expanded.
    pub resolved: BTreeMap<String, String>,
}

struct KeyReader {
    map: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl KeyReader {
    fn take(&mut self, key: &str) -> Option<String> {
        let v = self.map.remove(key)?;
        self.resolved.insert(key.to_string(), v.clone());
        Some(v)
    }

    fn record_default(&mut self, key: &str, value: impl ToString) {
        self.resolved
            .entry(key.to_string())
            .or_insert_with(|| value.to_string());
    }

    fn required(&mut self, key: &'static str) -> Result<String, ConfigError> {
        self.take(key).ok_or(ConfigError::MissingKey { key })
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T: ToString,
    {
        let out = match self.take(key) {
            Some(v) => v.parse::<T>().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                message: format!("cannot parse {v:?}"),
            })?,
            None => default,
        };
        self.record_default(key, out.to_string());
        Ok(out)
    }

    fn parse_bool(&mut self, key: &str, default: bool) -> Result<bool, ConfigError> {
        let out = match self.take(key) {
            Some(v) => match v.as_str() {
                "true" => true,
                "false" => false,
                _ => {
                    return Err(ConfigError::BadValue {
                        key: key.to_string(),
                        message: format!("expected true or false, got {v:?}"),
                    });
                }
            },
            None => default,
        };
        self.record_default(key, out.to_string());
        Ok(out)
    }
}

fn parse_u64_list(key: &str, text: &str) -> Result<Vec<u64>, ConfigError> {
    text.split(',')
        .map(|p| {
            p.trim().parse::<u64>().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                message: format!("expected a comma-separated list of integers, got {text:?}"),
            })
        })
        .collect()
}

fn parse_usize_list(key: &str, text: &str) -> Result<Vec<usize>, ConfigError> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| ConfigError::BadValue {
                    key: key.to_string(),
                    message: format!("expected a comma-separated list of sizes, got {text:?}"),
                })
        })
        .collect()
}

fn parse_directions(key: &str, text: &str) -> Result<Vec<Direction>, ConfigError> {
    text.split(',')
        .map(|p| match p.trim() {
            "max" => Ok(Direction::Maximize),
            "min" => Ok(Direction::Minimize),
            other => Err(ConfigError::BadValue {
                key: key.to_string(),
                message: format!("expected max or min, got {other:?}"),
            }),
        })
        .collect()
}

/// Resolve preset defaults, config-file keys, and explicit overrides (in
/// that precedence order, later wins) into a run plan.
pub fn resolve(
    preset: Option<Preset>,
    file_keys: BTreeMap<String, String>,
    overrides: &[(String, String)],
) -> Result<RunPlan, ConfigError> {
    let mut merged: BTreeMap<String, String> = BTreeMap::new();
    if let Some(p) = preset {
        for (k, v) in p.defaults() {
            merged.insert(k.to_string(), v);
        }
    }
    for (k, v) in file_keys {
        merged.insert(k, v);
    }
    for (k, v) in overrides {
        merged.insert(k.clone(), v.clone());
    }

    let mut r = KeyReader {
        map: merged,
        resolved: BTreeMap::new(),
    };

    let pool_path = PathBuf::from(r.required("pool")?);
    let features_path = r.take("features").map(PathBuf::from);
    let out_dir = PathBuf::from(r.take("out_dir").unwrap_or_else(|| "out".to_string()));
    r.record_default("out_dir", out_dir.display().to_string());
    let t_budget = r.parse::<usize>("T", 100)?;
    let m_init = r.parse::<usize>("m", 10)?;
    let seeds = match r.take("seeds") {
        Some(v) => parse_u64_list("seeds", &v)?,
        None => vec![0, 1, 2, 3, 4],
    };
    if seeds.is_empty() {
        return Err(ConfigError::BadValue {
            key: "seeds".to_string(),
            message: "at least one seed is required".to_string(),
        });
    }
    r.record_default(
        "seeds",
        seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    let directions = match r.take("directions") {
        Some(v) => parse_directions("directions", &v)?,
        None => Vec::new(),
    };
    if !directions.is_empty() {
        r.record_default(
            "directions",
            directions
                .iter()
                .map(|d| match d {
                    Direction::Maximize => "max",
                    Direction::Minimize => "min",
                })
                .collect::<Vec<_>>()
                .join(","),
        );
    }
    let joint_cap = r.parse::<usize>("joint_cap", DEFAULT_JOINT_CAP)?;

    let surrogate_kind = r.take("surrogate.kind");
    let campaign = match surrogate_kind.as_deref() {
        None => None,
        Some(kind) => {
            r.record_default("surrogate.kind", kind);
            let surrogate = build_surrogate(kind, &mut r)?;
            let representation = build_representation(&surrogate, &mut r)?;
            let acquisition = build_acquisition(&mut r)?;
            Some(CampaignConfig {
                surrogate,
                representation,
                acquisition,
                t_budget,
                m_init,
                seed: seeds[0],
                joint_cap,
            })
        }
    };

    if !r.map.is_empty() {
        let keys: Vec<String> = r.map.keys().cloned().collect();
        return Err(ConfigError::UnknownKeys {
            keys,
            valid: VALID_KEYS.join(", "),
        });
    }

    Ok(RunPlan {
        pool_path,
        features_path,
        out_dir,
        directions,
        seeds,
        campaign,
        t_budget,
        m_init,
        resolved: r.resolved,
    })
}

/// Every key the resolver understands (for error messages and docs).
pub const VALID_KEYS: [&str; 40] = [
    "pool",
    "features",
    "out_dir",
    "T",
    "m",
    "seeds",
    "directions",
    "joint_cap",
    "surrogate.kind",
    "surrogate.standardize",
    "surrogate.fit_steps",
    "surrogate.fit_lr",
    "surrogate.hidden",
    "surrogate.activation",
    "surrogate.epochs",
    "surrogate.lr",
    "surrogate.batch_size",
    "surrogate.lambda",
    "surrogate.sigma2",
    "surrogate.structure",
    "surrogate.grouping",
    "surrogate.tune",
    "surrogate.marglik_iters",
    "surrogate.rank",
    "surrogate.alpha",
    "surrogate.dropout",
    "surrogate.targets",
    "surrogate.joint_epochs",
    "surrogate.head_epochs",
    "surrogate.adapter_lr",
    "surrogate.head_lr",
    "surrogate.weight_decay",
    "surrogate.base_weights",
    "surrogate.base_seed",
    "representation.kind",
    "representation.radius",
    "representation.bits",
    "representation.max_len",
    "acquisition.kind",
    "acquisition.beta",
];

fn build_surrogate(kind: &str, r: &mut KeyReader) -> Result<SurrogateSpec, ConfigError> {
    match kind {
        "gp-tanimoto" | "gp-matern" => {
            let kernel = if kind == "gp-tanimoto" {
                KernelKind::Tanimoto
            } else {
                KernelKind::Matern52
            };
            let mut cfg = GpConfig::new(kernel);
            cfg.standardize = r.parse_bool("surrogate.standardize", cfg.standardize)?;
            cfg.fit_steps = r.parse::<u64>("surrogate.fit_steps", cfg.fit_steps)?;
            cfg.fit_lr = r.parse::<f64>("surrogate.fit_lr", cfg.fit_lr)?;
            Ok(SurrogateSpec::Gp(cfg))
        }
        "laplace-mlp" => {
            let hidden = match r.take("surrogate.hidden") {
                Some(v) => parse_usize_list("surrogate.hidden", &v)?,
                None => vec![50, 50],
            };
            r.record_default(
                "surrogate.hidden",
                hidden
                    .iter()
                    .map(|h| h.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            );
            let activation = match r.take("surrogate.activation").as_deref() {
                None | Some("relu") => Activation::Relu,
                Some("tanh") => Activation::Tanh,
                Some(other) => {
                    return Err(ConfigError::BadValue {
                        key: "surrogate.activation".to_string(),
                        message: format!("expected relu or tanh, got {other:?}"),
                    });
                }
            };
            r.record_default(
                "surrogate.activation",
                match activation {
                    Activation::Relu => "relu",
                    Activation::Tanh => "tanh",
                },
            );
            let mut spec = LaplaceMlpSpec::new(hidden, activation);
            let mut train = TrainConfig::default();
            train.epochs = r.parse::<u64>("surrogate.epochs", train.epochs)?;
            train.lr = r.parse::<f64>("surrogate.lr", train.lr)?;
            train.batch_size = r.parse::<usize>("surrogate.batch_size", train.batch_size)?;
            train.lambda = r.parse::<f64>("surrogate.lambda", train.lambda)?;
            train.sigma2 = r.parse::<f64>("surrogate.sigma2", train.sigma2)?;
            spec.base.train = train;
            spec.base.structure = match r.take("surrogate.structure").as_deref() {
                None | Some("kfac") => CurvatureStructure::Kfac,
                Some("full") => CurvatureStructure::Full,
                Some("diag") => CurvatureStructure::Diagonal,
                Some(other) => {
                    return Err(ConfigError::BadValue {
                        key: "surrogate.structure".to_string(),
                        message: format!("expected full, diag, or kfac, got {other:?}"),
                    });
                }
            };
            r.record_default(
                "surrogate.structure",
                match spec.base.structure {
                    CurvatureStructure::Full => "full",
                    CurvatureStructure::Diagonal => "diag",
                    CurvatureStructure::Kfac => "kfac",
                },
            );
            spec.base.grouping = match r.take("surrogate.grouping").as_deref() {
                None | Some("per-layer") => PriorGrouping::PerLayer,
                Some("scalar") => PriorGrouping::Scalar,
                Some(other) => {
                    return Err(ConfigError::BadValue {
                        key: "surrogate.grouping".to_string(),
                        message: format!("expected scalar or per-layer, got {other:?}"),
                    });
                }
            };
            r.record_default(
                "surrogate.grouping",
                match spec.base.grouping {
                    PriorGrouping::Scalar => "scalar",
                    PriorGrouping::PerLayer => "per-layer",
                },
            );
            spec.base.tune = r.parse_bool("surrogate.tune", true)?;
            let mut marglik = MargLikConfig::default();
            marglik.iterations = r.parse::<u64>("surrogate.marglik_iters", marglik.iterations)?;
            spec.base.marglik = marglik;
            Ok(SurrogateSpec::LaplaceMlp(spec))
        }
        "lora-transformer" => {
            let mut lora = LoraConfig::default();
            lora.rank = r.parse::<usize>("surrogate.rank", lora.rank)?;
            lora.alpha = r.parse::<f64>("surrogate.alpha", lora.alpha)?;
            lora.dropout = r.parse::<f64>("surrogate.dropout", lora.dropout)?;
            let targets = r.take("surrogate.targets").unwrap_or_else(|| "kv".to_string());
            lora.targets = targets
                .chars()
                .map(|c| match c {
                    'q' => Ok(Proj::Q),
                    'k' => Ok(Proj::K),
                    'v' => Ok(Proj::V),
                    other => Err(ConfigError::BadValue {
                        key: "surrogate.targets".to_string(),
                        message: format!("expected a string over q, k, v; got {other:?}"),
                    }),
                })
                .collect::<Result<_, _>>()?;
            r.record_default("surrogate.targets", &targets);
            let mut peft = PeftConfig::default();
            peft.lora = lora;
            peft.joint_epochs = r.parse::<usize>("surrogate.joint_epochs", peft.joint_epochs)?;
            peft.head_epochs = r.parse::<usize>("surrogate.head_epochs", peft.head_epochs)?;
            peft.batch_size = r.parse::<usize>("surrogate.batch_size", peft.batch_size)?;
            peft.adapter_lr = r.parse::<f64>("surrogate.adapter_lr", peft.adapter_lr)?;
            peft.head_lr = r.parse::<f64>("surrogate.head_lr", peft.head_lr)?;
            peft.weight_decay = r.parse::<f64>("surrogate.weight_decay", peft.weight_decay)?;
            peft.tune = r.parse_bool("surrogate.tune", true)?;
            peft.marglik.iterations =
                r.parse::<u64>("surrogate.marglik_iters", peft.marglik.iterations)?;
            let base = match r.take("surrogate.base_weights") {
                Some(path) => {
                    r.record_default("surrogate.base_weights", &path);
                    ToyTransformer::load(Path::new(&path)).map_err(|e| {
                        ConfigError::BaseWeights {
                            path,
                            message: e.to_string(),
                        }
                    })?
                }
                None => {
                    let seed = r.parse::<u64>("surrogate.base_seed", 7)?;
                    let tokenizer = crate::surrogate::transformer::SmilesTokenizer::new();
                    ToyTransformer::init(
                        TransformerConfig::standard(tokenizer.vocab_size()),
                        seed,
                    )
                    .map_err(|e| ConfigError::BadValue {
                        key: "surrogate.base_seed".to_string(),
                        message: e.to_string(),
                    })?
                }
            };
            Ok(SurrogateSpec::LoraTransformer {
                base: Box::new(base),
                peft,
            })
        }
        other => Err(ConfigError::UnknownSurrogate {
            name: other.to_string(),
            valid: SURROGATE_NAMES.join(", "),
        }),
    }
}

fn build_representation(
    surrogate: &SurrogateSpec,
    r: &mut KeyReader,
) -> Result<Representation, ConfigError> {
    let default_kind = match surrogate {
        SurrogateSpec::Gp(cfg) if cfg.kernel == KernelKind::Tanimoto => "fingerprints",
        SurrogateSpec::Gp(_) | SurrogateSpec::LaplaceMlp(_) => "features",
        SurrogateSpec::LoraTransformer { .. } => "tokens",
    };
    let kind = r
        .take("representation.kind")
        .unwrap_or_else(|| default_kind.to_string());
    r.record_default("representation.kind", &kind);
    match kind.as_str() {
        "fingerprints" => {
            let radius = r.parse::<u32>("representation.radius", 2)?;
            let bits = r.parse::<usize>("representation.bits", 1024)?;
            Ok(Representation::Fingerprints { radius, bits })
        }
        "features" => Ok(Representation::Features),
        "tokens" => {
            let max_len = r.parse::<usize>("representation.max_len", 64)?;
            Ok(Representation::Tokens { max_len })
        }
        other => Err(ConfigError::BadValue {
            key: "representation.kind".to_string(),
            message: format!("expected fingerprints, features, or tokens; got {other:?}"),
        }),
    }
}

fn build_acquisition(r: &mut KeyReader) -> Result<AcquisitionSpec, ConfigError> {
    let kind = r
        .take("acquisition.kind")
        .unwrap_or_else(|| "thompson".to_string());
    r.record_default("acquisition.kind", &kind);
    match kind.as_str() {
        "thompson" => Ok(AcquisitionSpec::Thompson),
        "ei" => Ok(AcquisitionSpec::ExpectedImprovement),
        "ucb" => {
            let beta = r.parse::<f64>("acquisition.beta", 2.0)?;
            Ok(AcquisitionSpec::Ucb { beta })
        }
        other => Err(ConfigError::BadValue {
            key: "acquisition.kind".to_string(),
            message: format!("expected thompson, ei, or ucb; got {other:?}"),
        }),
    }
}

/// Load the plan's pool (directions applied, features attached when given).
pub fn load_pool(plan: &RunPlan) -> Result<CandidatePool, ConfigError> {
    if !plan.pool_path.exists() {
        return Err(ConfigError::FileMissing {
            path: plan.pool_path.display().to_string(),
        });
    }
    let mut pool = CandidatePool::load_csv(&plan.pool_path, &plan.directions)?;
    if let Some(fpath) = &plan.features_path {
        if !fpath.exists() {
            return Err(ConfigError::FileMissing {
                path: fpath.display().to_string(),
            });
        }
        let features = read_feature_file(fpath)?;
        pool.attach_features(features)?;
    }
    Ok(pool)
}

/// Worker-thread cap: an explicit flag wins over the MOLBO_THREADS
/// environment variable; neither means the runtime decides.
pub fn thread_cap(flag: Option<usize>) -> Option<usize> {
    flag.or_else(|| {
        std::env::var("MOLBO_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
    })
}

/// Cap the global worker pool. A no-op when `cap` is `None` or when a pool
/// has already been initialized for this process.
pub fn apply_thread_cap(cap: Option<usize>) {
    if let Some(threads) = cap {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}
