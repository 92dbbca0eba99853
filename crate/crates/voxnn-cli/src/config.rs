//! Line-oriented `key = value` run configuration with `[sections]`.
//!
//! Unknown sections, unknown keys, duplicates, and type mismatches are hard
//! errors carrying the offending line number. Only `[run] seed` is
//! mandatory; everything else has a documented default (see
//! `configs/default.cfg`).

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use voxnn::cae::{CaeLayerSpec, PretrainConfig};
use voxnn::eval::{TrainingRecipe, TsneParams};
use voxnn::network::{ConvLayerSpec, NetworkConfig};
use voxnn::nnops::Activation;
use voxnn::optim::{mix_seed, OptimizerSpec};
use voxnn::volume::{Gaussian, GeometrySpec, PhantomParams, Shape4, Task};

/// Configuration parse failure; `line` is 0 for file-level problems.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: usize,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "{}", self.msg)
        } else {
            write!(f, "line {}: {}", self.line, self.msg)
        }
    }
}

fn err(line: usize, msg: impl Into<String>) -> ConfigError {
    ConfigError {
        line,
        msg: msg.into(),
    }
}

/// Which task(s) a command operates on.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TaskSelection {
    One(Task),
    All,
}

impl TaskSelection {
    pub fn tasks(self) -> Vec<Task> {
        match self {
            TaskSelection::One(task) => vec![task],
            TaskSelection::All => Task::ALL.to_vec(),
        }
    }

    pub fn name(self) -> String {
        match self {
            TaskSelection::One(task) => task.name().to_string(),
            TaskSelection::All => "all".to_string(),
        }
    }

    pub fn parse(token: &str) -> Option<Self> {
        if token == "all" {
            return Some(TaskSelection::All);
        }
        Task::parse(token).map(TaskSelection::One)
    }
}

/// Optimizer choice of one training stage.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct OptChoice {
    pub kind: OptKind,
    pub rho: f64,
    pub eps: f64,
    pub rate: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum OptKind {
    Adadelta,
    Sgd,
}

impl Default for OptChoice {
    fn default() -> Self {
        Self {
            kind: OptKind::Adadelta,
            rho: 0.95,
            eps: 1e-6,
            rate: 0.1,
        }
    }
}

impl OptChoice {
    pub fn spec(&self) -> OptimizerSpec {
        match self.kind {
            OptKind::Adadelta => OptimizerSpec::Adadelta {
                rho: self.rho,
                eps: self.eps,
            },
            OptKind::Sgd => OptimizerSpec::Sgd { rate: self.rate },
        }
    }

    fn kind_name(&self) -> &'static str {
        match self.kind {
            OptKind::Adadelta => "adadelta",
            OptKind::Sgd => "sgd",
        }
    }
}

#[derive(Clone, PartialEq, Debug)]
pub struct RunSection {
    pub seed: u64,
    pub task: TaskSelection,
    pub folds: usize,
    pub out_dir: PathBuf,
    pub threads: usize,
}

#[derive(Clone, Copy, PartialEq, Debug)]
pub struct ClassGeometry {
    pub outer_mean: f64,
    pub outer_sd: f64,
    pub shell_mean: f64,
    pub shell_sd: f64,
    pub cavity_mean: f64,
    pub cavity_sd: f64,
}

impl ClassGeometry {
    fn spec(&self) -> GeometrySpec {
        GeometrySpec {
            outer_radius: Gaussian {
                mean: self.outer_mean,
                sd: self.outer_sd,
            },
            shell_thickness: Gaussian {
                mean: self.shell_mean,
                sd: self.shell_sd,
            },
            cavity_radius: Gaussian {
                mean: self.cavity_mean,
                sd: self.cavity_sd,
            },
        }
    }
}

#[derive(Clone, PartialEq, Debug)]
pub struct PhantomSection {
    pub grid: usize,
    pub count_per_class: usize,
    pub source_count_per_class: usize,
    pub noise_sd: f64,
    pub ad: ClassGeometry,
    pub mci: ClassGeometry,
    pub nc: ClassGeometry,
}

#[derive(Clone, PartialEq, Debug)]
pub struct CaeSection {
    pub maps: Vec<usize>,
    pub kernel: usize,
    pub pool: usize,
    pub encoder_activation: Activation,
    pub decoder_activation: Activation,
    pub epochs: usize,
    pub batch: usize,
    pub optimizer: OptChoice,
    pub pretrain_per_fold: bool,
}

#[derive(Clone, PartialEq, Debug)]
pub struct NetworkSection {
    pub fc: Vec<usize>,
    pub aux_weights: Vec<f64>,
    pub top_weight: f64,
    pub widen_noise: f64,
    pub conv_maps: Vec<usize>,
    pub conv_kernel: usize,
    pub conv_pool: usize,
    pub conv_activation: Activation,
    pub finetune_epochs: usize,
    pub freeze_conv: bool,
    pub optimizer: OptChoice,
}

#[derive(Clone, PartialEq, Debug)]
pub struct TsneSection {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
}

/// Fully validated run configuration.
#[derive(Clone, PartialEq, Debug)]
pub struct RunConfig {
    pub run: RunSection,
    pub phantom: PhantomSection,
    pub cae: CaeSection,
    pub network: NetworkSection,
    pub tsne: TsneSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run: RunSection {
                seed: 42,
                task: TaskSelection::One(Task::Ternary),
                folds: 10,
                out_dir: PathBuf::from("runs"),
                threads: 0,
            },
            phantom: PhantomSection {
                grid: 32,
                count_per_class: 50,
                source_count_per_class: 10,
                noise_sd: 0.0,
                ad: ClassGeometry {
                    outer_mean: 12.5,
                    outer_sd: 0.4,
                    shell_mean: 1.5,
                    shell_sd: 0.15,
                    cavity_mean: 5.0,
                    cavity_sd: 0.3,
                },
                mci: ClassGeometry {
                    outer_mean: 12.5,
                    outer_sd: 0.4,
                    shell_mean: 2.25,
                    shell_sd: 0.15,
                    cavity_mean: 3.5,
                    cavity_sd: 0.3,
                },
                nc: ClassGeometry {
                    outer_mean: 12.5,
                    outer_sd: 0.4,
                    shell_mean: 3.0,
                    shell_sd: 0.15,
                    cavity_mean: 2.0,
                    cavity_sd: 0.3,
                },
            },
            cae: CaeSection {
                maps: vec![8, 16, 32],
                kernel: 3,
                pool: 2,
                encoder_activation: Activation::Relu,
                decoder_activation: Activation::Linear,
                epochs: 20,
                batch: 5,
                optimizer: OptChoice::default(),
                pretrain_per_fold: false,
            },
            network: NetworkSection {
                fc: vec![128, 64],
                aux_weights: vec![0.3, 0.3],
                top_weight: 1.0,
                widen_noise: 0.01,
                conv_maps: vec![8, 16, 32],
                conv_kernel: 3,
                conv_pool: 2,
                conv_activation: Activation::Relu,
                finetune_epochs: 40,
                freeze_conv: true,
                optimizer: OptChoice::default(),
            },
            tsne: TsneSection {
                perplexity: 10.0,
                iterations: 500,
                learning_rate: 100.0,
                early_exaggeration: 4.0,
                exaggeration_iters: 100,
            },
        }
    }
}

impl RunConfig {
    pub fn phantom_params(&self, seed: u64) -> PhantomParams {
        PhantomParams {
            grid: self.phantom.grid,
            ad: self.phantom.ad.spec(),
            mci: self.phantom.mci.spec(),
            nc: self.phantom.nc.spec(),
            noise_sd: self.phantom.noise_sd,
            seed,
        }
    }

    pub fn stack_specs(&self) -> Vec<CaeLayerSpec> {
        self.cae
            .maps
            .iter()
            .map(|&maps| CaeLayerSpec {
                maps,
                kernel: self.cae.kernel,
                pool: self.cae.pool,
                encoder_activation: self.cae.encoder_activation,
                decoder_activation: self.cae.decoder_activation,
            })
            .collect()
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            optimizer: self.cae.optimizer.spec(),
            epochs: self.cae.epochs,
            batch_size: self.cae.batch,
        }
    }

    pub fn network_config(&self, classes: usize) -> NetworkConfig {
        let g = self.phantom.grid;
        NetworkConfig {
            input_shape: Shape4::new(1, g, g, g).expect("validated grid"),
            conv: self
                .network
                .conv_maps
                .iter()
                .map(|&maps| ConvLayerSpec {
                    maps,
                    kernel: self.network.conv_kernel,
                    pool: self.network.conv_pool,
                    activation: self.network.conv_activation,
                })
                .collect(),
            fc_widths: self.network.fc.clone(),
            classes,
            aux_weights: self.network.aux_weights.clone(),
            top_weight: self.network.top_weight,
            widen_noise: self.network.widen_noise,
        }
    }

    pub fn recipe(&self, classes: usize) -> TrainingRecipe {
        TrainingRecipe {
            stack_specs: self.stack_specs(),
            pretrain: self.pretrain_config(),
            pretrain_per_fold: self.cae.pretrain_per_fold,
            source_volumes: None,
            network: self.network_config(classes),
            finetune_optimizer: self.network.optimizer.spec(),
            finetune_epochs: self.network.finetune_epochs,
            freeze_conv: self.network.freeze_conv,
        }
    }

    pub fn tsne_params(&self) -> TsneParams {
        TsneParams {
            perplexity: self.tsne.perplexity,
            iterations: self.tsne.iterations,
            learning_rate: self.tsne.learning_rate,
            early_exaggeration: self.tsne.early_exaggeration,
            exaggeration_iters: self.tsne.exaggeration_iters,
            seed: mix_seed(self.run.seed, 0x75E),
        }
    }

    /// Canonical `key = value` dump. With `execution_keys` the
    /// output-directory and thread-count keys are included; they are left
    /// out of the hash because they do not affect results.
    pub fn canonical(&self, execution_keys: bool) -> String {
        let mut s = String::new();
        s.push_str("[run]\n");
        s.push_str(&format!("seed = {}\n", self.run.seed));
        s.push_str(&format!("task = {}\n", self.run.task.name()));
        s.push_str(&format!("folds = {}\n", self.run.folds));
        if execution_keys {
            s.push_str(&format!("out_dir = {}\n", self.run.out_dir.display()));
            s.push_str(&format!("threads = {}\n", self.run.threads));
        }
        s.push_str("\n[phantom]\n");
        s.push_str(&format!("grid = {}\n", self.phantom.grid));
        s.push_str(&format!("count_per_class = {}\n", self.phantom.count_per_class));
        s.push_str(&format!(
            "source_count_per_class = {}\n",
            self.phantom.source_count_per_class
        ));
        s.push_str(&format!("noise_sd = {}\n", self.phantom.noise_sd));
        for (prefix, g) in [
            ("ad", &self.phantom.ad),
            ("mci", &self.phantom.mci),
            ("nc", &self.phantom.nc),
        ] {
            s.push_str(&format!("{prefix}_outer_mean = {}\n", g.outer_mean));
            s.push_str(&format!("{prefix}_outer_sd = {}\n", g.outer_sd));
            s.push_str(&format!("{prefix}_shell_mean = {}\n", g.shell_mean));
            s.push_str(&format!("{prefix}_shell_sd = {}\n", g.shell_sd));
            s.push_str(&format!("{prefix}_cavity_mean = {}\n", g.cavity_mean));
            s.push_str(&format!("{prefix}_cavity_sd = {}\n", g.cavity_sd));
        }
        s.push_str("\n[cae]\n");
        s.push_str(&format!("maps = {}\n", join_usize(&self.cae.maps)));
        s.push_str(&format!("kernel = {}\n", self.cae.kernel));
        s.push_str(&format!("pool = {}\n", self.cae.pool));
        s.push_str(&format!(
            "encoder_activation = {}\n",
            self.cae.encoder_activation.name()
        ));
        s.push_str(&format!(
            "decoder_activation = {}\n",
            self.cae.decoder_activation.name()
        ));
        s.push_str(&format!("epochs = {}\n", self.cae.epochs));
        s.push_str(&format!("batch = {}\n", self.cae.batch));
        s.push_str(&opt_lines(&self.cae.optimizer));
        s.push_str(&format!("pretrain_per_fold = {}\n", self.cae.pretrain_per_fold));
        s.push_str("\n[network]\n");
        s.push_str(&format!("fc = {}\n", join_usize(&self.network.fc)));
        s.push_str(&format!("aux_weights = {}\n", join_f64(&self.network.aux_weights)));
        s.push_str(&format!("top_weight = {}\n", self.network.top_weight));
        s.push_str(&format!("widen_noise = {}\n", self.network.widen_noise));
        s.push_str(&format!("conv_maps = {}\n", join_usize(&self.network.conv_maps)));
        s.push_str(&format!("conv_kernel = {}\n", self.network.conv_kernel));
        s.push_str(&format!("conv_pool = {}\n", self.network.conv_pool));
        s.push_str(&format!(
            "conv_activation = {}\n",
            self.network.conv_activation.name()
        ));
        s.push_str(&format!("finetune_epochs = {}\n", self.network.finetune_epochs));
        s.push_str(&format!("freeze_conv = {}\n", self.network.freeze_conv));
        s.push_str(&opt_lines(&self.network.optimizer));
        s.push_str("\n[tsne]\n");
        s.push_str(&format!("perplexity = {}\n", self.tsne.perplexity));
        s.push_str(&format!("iterations = {}\n", self.tsne.iterations));
        s.push_str(&format!("learning_rate = {}\n", self.tsne.learning_rate));
        s.push_str(&format!(
            "early_exaggeration = {}\n",
            self.tsne.early_exaggeration
        ));
        s.push_str(&format!(
            "exaggeration_iters = {}\n",
            self.tsne.exaggeration_iters
        ));
        s
    }

    /// Hex-truncated SHA-256 of the canonical configuration; names the run
    /// directory.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.canonical(false).as_bytes());
        let mut hex = String::with_capacity(12);
        for byte in digest.iter().take(6) {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.run.folds < 2 {
            return Err(err(0, "folds must be >= 2"));
        }
        if self.phantom.grid < 4 {
            return Err(err(0, "phantom grid must be >= 4"));
        }
        if self.phantom.count_per_class == 0 || self.phantom.source_count_per_class == 0 {
            return Err(err(0, "phantom counts must be >= 1"));
        }
        if self.cae.maps.is_empty() {
            return Err(err(0, "cae maps list must not be empty"));
        }
        if self.network.conv_maps.len() != self.cae.maps.len() {
            return Err(err(
                0,
                "network conv_maps must have one entry per cae layer",
            ));
        }
        if self.network.fc.len() != self.network.aux_weights.len() {
            return Err(err(0, "aux_weights needs one entry per fc layer"));
        }
        self.phantom_params(0)
            .validate()
            .map_err(|e| err(0, e.to_string()))?;
        self.network_config(2)
            .validate()
            .map_err(|e| err(0, e.to_string()))?;
        Ok(())
    }
}

fn join_usize(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn join_f64(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn opt_lines(opt: &OptChoice) -> String {
    format!(
        "optimizer = {}\nrho = {}\neps = {}\nrate = {}\n",
        opt.kind_name(),
        opt.rho,
        opt.eps,
        opt.rate
    )
}

fn parse_usize(line: usize, key: &str, value: &str) -> Result<usize, ConfigError> {
    value
        .parse()
        .map_err(|_| err(line, format!("expected an integer for `{key}`, found {value:?}")))
}

fn parse_u64(line: usize, key: &str, value: &str) -> Result<u64, ConfigError> {
    value
        .parse()
        .map_err(|_| err(line, format!("expected an integer for `{key}`, found {value:?}")))
}

fn parse_f64(line: usize, key: &str, value: &str) -> Result<f64, ConfigError> {
    value
        .parse()
        .map_err(|_| err(line, format!("expected a number for `{key}`, found {value:?}")))
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(err(
            line,
            format!("expected true/false for `{key}`, found {value:?}"),
        )),
    }
}

fn parse_usize_list(line: usize, key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    value
        .split(',')
        .map(|v| parse_usize(line, key, v.trim()))
        .collect()
}

fn parse_f64_list(line: usize, key: &str, value: &str) -> Result<Vec<f64>, ConfigError> {
    value
        .split(',')
        .map(|v| parse_f64(line, key, v.trim()))
        .collect()
}

fn parse_activation(line: usize, key: &str, value: &str) -> Result<Activation, ConfigError> {
    Activation::parse(value).ok_or_else(|| {
        err(
            line,
            format!("expected relu/sigmoid/linear for `{key}`, found {value:?}"),
        )
    })
}

fn parse_opt_kind(line: usize, value: &str) -> Result<OptKind, ConfigError> {
    match value {
        "adadelta" => Ok(OptKind::Adadelta),
        "sgd" => Ok(OptKind::Sgd),
        _ => Err(err(
            line,
            format!("expected adadelta/sgd for `optimizer`, found {value:?}"),
        )),
    }
}

/// Parses a configuration file into a validated [`RunConfig`].
pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path)
        .map_err(|e| err(0, format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let mut seed_seen = false;
    let mut section: Option<String> = None;
    let mut seen: HashSet<(String, String)> = HashSet::new();

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| err(line_no, format!("malformed section header {line:?}")))?
                .trim()
                .to_string();
            if !["run", "phantom", "cae", "network", "tsne"].contains(&name.as_str()) {
                return Err(err(line_no, format!("unknown section [{name}]")));
            }
            section = Some(name);
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(line_no, format!("expected `key = value`, found {line:?}")))?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        let section_name = section
            .clone()
            .ok_or_else(|| err(line_no, "key outside any [section]"))?;
        if !seen.insert((section_name.clone(), key.clone())) {
            return Err(err(
                line_no,
                format!("duplicate key `{key}` in [{section_name}]"),
            ));
        }

        match (section_name.as_str(), key.as_str()) {
            ("run", "seed") => {
                cfg.run.seed = parse_u64(line_no, &key, &value)?;
                seed_seen = true;
            }
            ("run", "task") => {
                cfg.run.task = TaskSelection::parse(&value).ok_or_else(|| {
                    err(
                        line_no,
                        format!(
                            "expected one of ternary/ad_nc/admci_nc/ad_mci/mci_nc/all, found {value:?}"
                        ),
                    )
                })?;
            }
            ("run", "folds") => cfg.run.folds = parse_usize(line_no, &key, &value)?,
            ("run", "out_dir") => cfg.run.out_dir = PathBuf::from(&value),
            ("run", "threads") => cfg.run.threads = parse_usize(line_no, &key, &value)?,

            ("phantom", "grid") => cfg.phantom.grid = parse_usize(line_no, &key, &value)?,
            ("phantom", "count_per_class") => {
                cfg.phantom.count_per_class = parse_usize(line_no, &key, &value)?
            }
            ("phantom", "source_count_per_class") => {
                cfg.phantom.source_count_per_class = parse_usize(line_no, &key, &value)?
            }
            ("phantom", "noise_sd") => cfg.phantom.noise_sd = parse_f64(line_no, &key, &value)?,
            ("phantom", geom_key) if geom_key.contains('_') => {
                let (prefix, field) = geom_key.split_once('_').expect("checked");
                let class = match prefix {
                    "ad" => &mut cfg.phantom.ad,
                    "mci" => &mut cfg.phantom.mci,
                    "nc" => &mut cfg.phantom.nc,
                    _ => {
                        return Err(err(
                            line_no,
                            format!("unknown key `{geom_key}` in [phantom]"),
                        ))
                    }
                };
                let v = parse_f64(line_no, &key, &value)?;
                match field {
                    "outer_mean" => class.outer_mean = v,
                    "outer_sd" => class.outer_sd = v,
                    "shell_mean" => class.shell_mean = v,
                    "shell_sd" => class.shell_sd = v,
                    "cavity_mean" => class.cavity_mean = v,
                    "cavity_sd" => class.cavity_sd = v,
                    _ => {
                        return Err(err(
                            line_no,
                            format!("unknown key `{geom_key}` in [phantom]"),
                        ))
                    }
                }
            }

            ("cae", "maps") => cfg.cae.maps = parse_usize_list(line_no, &key, &value)?,
            ("cae", "kernel") => cfg.cae.kernel = parse_usize(line_no, &key, &value)?,
            ("cae", "pool") => cfg.cae.pool = parse_usize(line_no, &key, &value)?,
            ("cae", "encoder_activation") => {
                cfg.cae.encoder_activation = parse_activation(line_no, &key, &value)?
            }
            ("cae", "decoder_activation") => {
                cfg.cae.decoder_activation = parse_activation(line_no, &key, &value)?
            }
            ("cae", "epochs") => cfg.cae.epochs = parse_usize(line_no, &key, &value)?,
            ("cae", "batch") => cfg.cae.batch = parse_usize(line_no, &key, &value)?,
            ("cae", "optimizer") => cfg.cae.optimizer.kind = parse_opt_kind(line_no, &value)?,
            ("cae", "rho") => cfg.cae.optimizer.rho = parse_f64(line_no, &key, &value)?,
            ("cae", "eps") => cfg.cae.optimizer.eps = parse_f64(line_no, &key, &value)?,
            ("cae", "rate") => cfg.cae.optimizer.rate = parse_f64(line_no, &key, &value)?,
            ("cae", "pretrain_per_fold") => {
                cfg.cae.pretrain_per_fold = parse_bool(line_no, &key, &value)?
            }

            ("network", "fc") => cfg.network.fc = parse_usize_list(line_no, &key, &value)?,
            ("network", "aux_weights") => {
                cfg.network.aux_weights = parse_f64_list(line_no, &key, &value)?
            }
            ("network", "top_weight") => {
                cfg.network.top_weight = parse_f64(line_no, &key, &value)?
            }
            ("network", "widen_noise") => {
                cfg.network.widen_noise = parse_f64(line_no, &key, &value)?
            }
            ("network", "conv_maps") => {
                cfg.network.conv_maps = parse_usize_list(line_no, &key, &value)?
            }
            ("network", "conv_kernel") => {
                cfg.network.conv_kernel = parse_usize(line_no, &key, &value)?
            }
            ("network", "conv_pool") => {
                cfg.network.conv_pool = parse_usize(line_no, &key, &value)?
            }
            ("network", "conv_activation") => {
                cfg.network.conv_activation = parse_activation(line_no, &key, &value)?
            }
            ("network", "finetune_epochs") => {
                cfg.network.finetune_epochs = parse_usize(line_no, &key, &value)?
            }
            ("network", "freeze_conv") => {
                cfg.network.freeze_conv = parse_bool(line_no, &key, &value)?
            }
            ("network", "optimizer") => {
                cfg.network.optimizer.kind = parse_opt_kind(line_no, &value)?
            }
            ("network", "rho") => cfg.network.optimizer.rho = parse_f64(line_no, &key, &value)?,
            ("network", "eps") => cfg.network.optimizer.eps = parse_f64(line_no, &key, &value)?,
            ("network", "rate") => cfg.network.optimizer.rate = parse_f64(line_no, &key, &value)?,

            ("tsne", "perplexity") => cfg.tsne.perplexity = parse_f64(line_no, &key, &value)?,
            ("tsne", "iterations") => cfg.tsne.iterations = parse_usize(line_no, &key, &value)?,
            ("tsne", "learning_rate") => {
                cfg.tsne.learning_rate = parse_f64(line_no, &key, &value)?
            }
            ("tsne", "early_exaggeration") => {
                cfg.tsne.early_exaggeration = parse_f64(line_no, &key, &value)?
            }
            ("tsne", "exaggeration_iters") => {
                cfg.tsne.exaggeration_iters = parse_usize(line_no, &key, &value)?
            }

            (section, key) => {
                return Err(err(
                    line_no,
                    format!("unknown key `{key}` in [{section}]"),
                ))
            }
        }
    }

    if !seed_seen {
        return Err(err(0, "missing mandatory key `seed` in [run]"));
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_gets_the_documented_defaults() {
        let cfg = parse_config_str("[run]\nseed = 7\n").unwrap();
        let mut expected = RunConfig::default();
        expected.run.seed = 7;
        assert_eq!(cfg, expected);
    }

    #[test]
    fn non_numeric_folds_is_a_type_error_with_line() {
        let text = "[run]\nseed = 1\nfolds = ten\n";
        let e = parse_config_str(text).unwrap_err();
        assert_eq!(e.line, 3);
        assert!(e.msg.contains("expected an integer"), "{}", e.msg);
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let e = parse_config_str("[run]\nseed = 1\nbogus = 2\n").unwrap_err();
        assert_eq!(e.line, 3);
        assert!(e.msg.contains("unknown key"));
        let e = parse_config_str("[nonsense]\nx = 1\n").unwrap_err();
        assert!(e.msg.contains("unknown section"));
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let e = parse_config_str("[run]\nseed = 1\nseed = 2\n").unwrap_err();
        assert_eq!(e.line, 3);
        assert!(e.msg.contains("duplicate"));
    }

    #[test]
    fn missing_seed_is_rejected() {
        let e = parse_config_str("[run]\nfolds = 5\n").unwrap_err();
        assert!(e.msg.contains("seed"));
    }

    #[test]
    fn golden_config_parses_to_the_default() {
        let path = concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../configs/default.cfg"
        );
        let cfg = parse_config(Path::new(path)).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn canonical_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.run.seed = 99;
        cfg.cae.optimizer.kind = OptKind::Sgd;
        cfg.cae.optimizer.rate = 0.05;
        cfg.network.fc = vec![32, 16];
        cfg.network.aux_weights = vec![0.1, 0.2];
        let text = cfg.canonical(true);
        let back = parse_config_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn hash_ignores_execution_keys() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.run.out_dir = PathBuf::from("elsewhere");
        b.run.threads = 1;
        assert_eq!(a.hash(), b.hash());
        let mut c = RunConfig::default();
        c.run.seed = 43;
        assert_ne!(a.hash(), c.hash());
    }
}
