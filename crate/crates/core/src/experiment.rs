//! Experiment configuration (JSON) and the runners behind the CLI.
//!
//! A config names a task, a net shape, a data source and a training
//! recipe. Relative paths inside the file resolve against the file's
//! directory. One master `seed` drives initialization (`seed`), data
//! generation (`seed + 1`, `seed + 2`) and training (`seed`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, NamedTarget, Split, Targets, Toy2d};
use crate::device::DeviceKind;
use crate::dynamics::LayerDynamics;
use crate::error::{Error, Result};
use crate::integrator::{IntegratorConfig, Method, DEFAULT_STEPS};
use crate::io::write_atomic;
use crate::model::{KirchhoffNet, Layer};
use crate::topology::{fc_topo, ne_topo, proj_topo, Topology};
use crate::training::{self, evaluate, metrics_csv, Task, TrainConfig, TrainOutcome};

pub const CONFIG_VERSION: u32 = 1;

/// Side of the images in IDX files accepted by the classification task.
pub const IDX_SIDE: usize = 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Regression,
    Classification,
    Generation,
    Density,
}

impl TaskKind {
    pub fn is_flow(self) -> bool {
        matches!(self, TaskKind::Generation | TaskKind::Density)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerPattern {
    Fc,
    Ne,
    Proj,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub layer: LayerPattern,
    /// Node count of an `fc` layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<usize>,
    #[serde(default = "one")]
    pub channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    /// Projected nodes of a `proj` layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projected: Option<usize>,
    #[serde(default = "one")]
    pub repeat: usize,
    #[serde(default = "one")]
    pub repeat_proj: usize,
    /// Devices from every node to ground, per node.
    #[serde(default)]
    pub ground_repeat: usize,
    pub depth: usize,
    /// Horizon `T` of each layer.
    pub horizon: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub method: Method,
    pub kind: DeviceKind,
    #[serde(default = "unit")]
    pub theta_cap: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_nodes: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub readout_nodes: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataConfig {
    Friedman {
        n_train: usize,
        n_test: usize,
        #[serde(default)]
        noise_sd: f64,
    },
    Toy2d {
        name: String,
        n_train: usize,
        n_test: usize,
    },
    Csv {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
        /// Rows used for training when there is no separate test file.
        #[serde(default)]
        n_train: Option<usize>,
        #[serde(default)]
        target_column: Option<String>,
        #[serde(default = "yes")]
        standardize: bool,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default = "one")]
        downsample: usize,
    },
    Target {
        name: String,
        #[serde(default = "default_eval_draws")]
        eval_draws: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub task: TaskKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub net: NetConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    /// Samples written after training a flow.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn unit() -> f64 {
    1.0
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}

fn default_eval_draws() -> usize {
    2000
}

fn default_samples() -> usize {
    512
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn bad(key: &str, message: impl Into<String>) -> Error {
    Error::config(key, message)
}

/// Dimension of the data and of the target, when known before loading.
struct Shape {
    input: Option<usize>,
    output: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| {
            let message = e.to_string();
            // serde names the offending field in its message
            let key = message
                .split('`')
                .nth(1)
                .filter(|_| message.contains("field") || message.contains("variant"))
                .unwrap_or("<root>")
                .to_string();
            Error::Config { key, message }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut resolved = self.clone();
        resolved.train.seed = self.seed;
        serde_json::to_string_pretty(&resolved).expect("config serialization cannot fail")
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if path.is_relative() => base.join(path),
            _ => path.to_path_buf(),
        }
    }

    fn shape(&self) -> Result<Shape> {
        Ok(match &self.data {
            DataConfig::Friedman { .. } => Shape {
                input: Some(5),
                output: Some(1),
            },
            DataConfig::Toy2d { .. } | DataConfig::Target { .. } => Shape {
                input: Some(2),
                output: None,
            },
            DataConfig::Csv { target_column, .. } => Shape {
                input: None,
                output: target_column.as_ref().map(|_| 1),
            },
            DataConfig::Idx { downsample, .. } => {
                if *downsample == 0 || !IDX_SIDE.is_multiple_of(*downsample) {
                    return Err(bad("data.downsample", format!("must divide the image side {IDX_SIDE}")));
                }
                let side = IDX_SIDE / downsample;
                Shape {
                    input: Some(side * side),
                    output: None,
                }
            }
        })
    }

    /// Grid and projected node counts implied by `net`.
    fn node_layout(&self) -> Result<(usize, usize)> {
        let net = &self.net;
        match net.layer {
            LayerPattern::Fc => {
                let n = net.nodes.ok_or_else(|| bad("net.nodes", "an fc layer needs a node count"))?;
                if n == 0 {
                    return Err(bad("net.nodes", "an fc layer needs at least one node"));
                }
                if net.projected.is_some() {
                    return Err(bad("net.projected", "only proj layers have projected nodes"));
                }
                Ok((n, 0))
            }
            LayerPattern::Ne | LayerPattern::Proj => {
                let (w, h) = match (net.width, net.height) {
                    (Some(w), Some(h)) if w > 0 && h > 0 => (w, h),
                    _ => return Err(bad("net.width", "ne and proj layers need positive width and height")),
                };
                let k = net.kernel.ok_or_else(|| bad("net.kernel", "ne and proj layers need a kernel size"))?;
                if k == 0 || k > w.min(h) {
                    return Err(bad("net.kernel", format!("must lie in 1..={}", w.min(h))));
                }
                if net.channels == 0 {
                    return Err(bad("net.channels", "a grid needs at least one channel"));
                }
                let projected = match (net.layer, net.projected) {
                    (LayerPattern::Proj, Some(p)) if p > 0 => p,
                    (LayerPattern::Proj, _) => return Err(bad("net.projected", "a proj layer needs at least one projected node")),
                    (_, Some(_)) => return Err(bad("net.projected", "only proj layers have projected nodes")),
                    (_, None) => 0,
                };
                Ok((net.channels * w * h, projected))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(bad("version", format!("unsupported config version {}, expected {CONFIG_VERSION}", self.version)));
        }
        let net = &self.net;
        if net.depth == 0 {
            return Err(bad("net.depth", "a net needs at least one layer"));
        }
        if !(net.horizon > 0.0 && net.horizon.is_finite()) {
            return Err(bad("net.horizon", "the layer horizon must be a positive number"));
        }
        if net.steps == 0 {
            return Err(bad("net.steps", "each layer needs at least one integration step"));
        }
        if !(net.theta_cap > 0.0 && net.theta_cap.is_finite()) {
            return Err(bad("net.theta_cap", "the ground capacitance must be a positive number"));
        }
        if net.kind.ensure_branch().is_err() {
            return Err(bad("net.kind", format!("`{}` cannot sit on an edge", net.kind)));
        }
        if net.repeat == 0 || net.repeat_proj == 0 {
            return Err(bad("net.repeat", "repeat counts must be at least 1"));
        }
        let (grid, projected) = self.node_layout()?;
        let total = grid + projected;
        self.train.validate()?;

        let source_ok = matches!(
            (self.task, &self.data),
            (TaskKind::Regression, DataConfig::Friedman { .. })
                | (TaskKind::Regression, DataConfig::Csv { target_column: Some(_), .. })
                | (TaskKind::Classification, DataConfig::Idx { .. })
                | (TaskKind::Generation, DataConfig::Toy2d { .. })
                | (TaskKind::Generation, DataConfig::Csv { target_column: None, .. })
                | (TaskKind::Density, DataConfig::Target { .. })
        );
        if !source_ok {
            return Err(bad("data.source", format!("not usable for a {:?} task", self.task).to_lowercase()));
        }
        match &self.data {
            DataConfig::Friedman { n_train, n_test, noise_sd } => {
                if *n_train == 0 || *n_test == 0 {
                    return Err(bad("data.n_train", "train and test sizes must be at least 1"));
                }
                if !(*noise_sd >= 0.0 && noise_sd.is_finite()) {
                    return Err(bad("data.noise_sd", "must be a finite non-negative number"));
                }
            }
            DataConfig::Toy2d { name, n_train, n_test } => {
                name.parse::<Toy2d>().map_err(|e| bad("data.name", e.to_string()))?;
                if *n_train == 0 || *n_test == 0 {
                    return Err(bad("data.n_train", "train and test sizes must be at least 1"));
                }
            }
            DataConfig::Target { name, eval_draws } => {
                name.parse::<NamedTarget>().map_err(|e| bad("data.name", e.to_string()))?;
                if *eval_draws == 0 {
                    return Err(bad("data.eval_draws", "the KL estimate needs at least one draw"));
                }
            }
            DataConfig::Csv { test, n_train, .. } => {
                if test.is_none() && n_train.is_none() {
                    return Err(bad("data.n_train", "needed to split the csv when no test file is given"));
                }
            }
            DataConfig::Idx { .. } => {}
        }
        let shape = self.shape()?;

        if self.task.is_flow() {
            if net.layer != LayerPattern::Fc {
                return Err(bad("net.layer", "flow tasks keep one node per data dimension and need fc layers"));
            }
            if net.input_nodes.is_some() || net.readout_nodes.is_some() {
                return Err(bad("net.input_nodes", "flow tasks read and write every node; remove the override"));
            }
            if let Some(d) = shape.input {
                if total != d {
                    return Err(bad("net.nodes", format!("a flow on {d}-dimensional data needs exactly {d} nodes")));
                }
            }
        } else if let Some(d) = shape.input {
            if net.input_nodes.is_none() && d > total {
                return Err(bad("net.nodes", format!("{total} nodes cannot hold {d} input features")));
            }
        }
        if let (Some(d), Some(inputs)) = (shape.input, &net.input_nodes) {
            if inputs.len() != d {
                return Err(bad("net.input_nodes", format!("lists {} nodes for {d} input features", inputs.len())));
            }
        }
        for (key, list) in [("net.input_nodes", &net.input_nodes), ("net.readout_nodes", &net.readout_nodes)] {
            if let Some(list) = list {
                if let Some(&i) = list.iter().find(|&&i| i >= total) {
                    return Err(bad(key, format!("node {i} does not exist in a {total}-node layer")));
                }
            }
        }
        match self.task {
            TaskKind::Classification => {
                if projected == 0 && net.readout_nodes.is_none() {
                    return Err(bad("net.readout_nodes", "classification needs a proj layer or explicit readout nodes"));
                }
                if net.readout_nodes.as_ref().map_or(projected, Vec::len) < 2 {
                    return Err(bad("net.readout_nodes", "classification needs at least two logits"));
                }
            }
            TaskKind::Regression => {
                if let (Some(out), Some(r)) = (shape.output, &net.readout_nodes) {
                    if r.len() != out {
                        return Err(bad("net.readout_nodes", format!("lists {} nodes for {out} targets", r.len())));
                    }
                }
            }
            _ => {}
        }
        if self.samples == 0 && self.task.is_flow() {
            return Err(bad("samples", "a flow run writes at least one sample"));
        }
        Ok(())
    }

    pub fn topology(&self) -> Result<Topology> {
        let n = &self.net;
        let topo = match n.layer {
            LayerPattern::Fc => fc_topo(self.node_layout()?.0, n.repeat)?,
            LayerPattern::Ne => ne_topo(
                n.channels,
                n.width.unwrap_or(0),
                n.height.unwrap_or(0),
                n.kernel.unwrap_or(0),
                n.repeat,
            )?,
            LayerPattern::Proj => proj_topo(
                n.channels,
                n.width.unwrap_or(0),
                n.height.unwrap_or(0),
                n.kernel.unwrap_or(0),
                n.projected.unwrap_or(0),
                n.repeat,
                n.repeat_proj,
            )?,
        };
        Ok(if n.ground_repeat > 0 {
            topo.with_ground_edges(n.ground_repeat)
        } else {
            topo
        })
    }

    /// Fresh net initialized from `seed`.
    ///
    /// Default placement: inputs on the first nodes; readout on the
    /// projected nodes for proj layers, on every node for flows, and on the
    /// last `target_dim` nodes otherwise.
    pub fn build_net(&self, input_dim: usize, target_dim: usize) -> Result<KirchhoffNet> {
        let topo = self.topology()?;
        let n = topo.num_nodes;
        let (_, projected) = self.node_layout()?;
        let integrator = IntegratorConfig {
            method: self.net.method,
            steps: self.net.steps,
            horizon: self.net.horizon,
        };
        let layer = Layer::new(LayerDynamics::zeros(topo, self.net.kind, self.net.theta_cap)?, integrator)?;
        let layers = vec![layer; self.net.depth];
        let mut net = if self.task.is_flow() {
            KirchhoffNet::flow(layers)?
        } else {
            let inputs = self.net.input_nodes.clone().unwrap_or_else(|| (0..input_dim).collect());
            let readout = match &self.net.readout_nodes {
                Some(r) => r.clone(),
                None if projected > 0 => (n - projected..n).collect(),
                None => (n.saturating_sub(target_dim)..n).collect(),
            };
            KirchhoffNet::new(layers, inputs, readout)?
        };
        net.init_params(self.seed);
        Ok(net)
    }

    pub fn load_data(&self) -> Result<ExperimentData> {
        let seed = self.seed;
        match &self.data {
            DataConfig::Friedman { n_train, n_test, noise_sd } => Ok(ExperimentData::Split(data::friedman_split(
                *n_train,
                *n_test,
                *noise_sd,
                seed.wrapping_add(1),
            )?)),
            DataConfig::Toy2d { name, n_train, n_test } => {
                let kind: Toy2d = name.parse()?;
                Ok(ExperimentData::Split(Split {
                    train: data::gen2d(kind, *n_train, seed.wrapping_add(1))?,
                    test: data::gen2d(kind, *n_test, seed.wrapping_add(2))?,
                }))
            }
            DataConfig::Csv {
                train,
                test,
                n_train,
                target_column,
                standardize,
            } => {
                let column = target_column.as_deref();
                let all = data::load_csv(&self.resolve(train), column)?;
                let mut split = match (test, n_train) {
                    (Some(t), _) => Split {
                        train: all,
                        test: data::load_csv(&self.resolve(t), column)?,
                    },
                    (None, Some(n)) => all.split(*n, seed.wrapping_add(1))?,
                    (None, None) => return Err(bad("data.n_train", "needed to split the csv when no test file is given")),
                };
                if self.task == TaskKind::Classification {
                    split = Split {
                        train: split.train.into_labels()?,
                        test: split.test.into_labels()?,
                    };
                }
                if *standardize {
                    data::standardize(&mut split)?;
                }
                Ok(ExperimentData::Split(split))
            }
            DataConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                downsample,
            } => {
                let load = |img: &Path, lab: &Path| -> Result<Dataset> {
                    let d = data::load_idx(&self.resolve(img), &self.resolve(lab))?;
                    if *downsample > 1 {
                        data::downsample(&d, IDX_SIDE, *downsample)
                    } else {
                        Ok(d)
                    }
                };
                Ok(ExperimentData::Split(Split {
                    train: load(train_images, train_labels)?,
                    test: load(test_images, test_labels)?,
                }))
            }
            DataConfig::Target { name, eval_draws } => Ok(ExperimentData::Target {
                target: name.parse()?,
                eval_draws: *eval_draws,
            }),
        }
    }
}

pub enum ExperimentData {
    Split(Split),
    Target { target: NamedTarget, eval_draws: usize },
}

impl ExperimentData {
    pub fn task(&self, kind: TaskKind) -> Task<'_> {
        match (self, kind) {
            (ExperimentData::Target { target, eval_draws }, _) => Task::Density {
                target,
                eval_draws: *eval_draws,
            },
            (ExperimentData::Split(s), TaskKind::Regression) => Task::Regression {
                train: &s.train,
                test: Some(&s.test),
            },
            (ExperimentData::Split(s), TaskKind::Classification) => Task::Classification {
                train: &s.train,
                test: Some(&s.test),
            },
            (ExperimentData::Split(s), _) => Task::Generation {
                train: &s.train,
                test: Some(&s.test),
            },
        }
    }

    fn dims(&self) -> (usize, usize) {
        match self {
            ExperimentData::Split(s) => {
                let target = match &s.train.targets {
                    Targets::Values(v) => v.first().map_or(0, Vec::len),
                    Targets::Labels(_) => s.train.num_classes().max(s.test.num_classes()),
                    Targets::None => 0,
                };
                (s.train.dim(), target)
            }
            ExperimentData::Target { .. } => (2, 0),
        }
    }
}

/// Outcome of [`run_train`].
#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub task: TaskKind,
    pub num_params: usize,
    pub initial_metric: Option<f64>,
    pub best_metric: Option<f64>,
    pub best_epoch: usize,
    pub final_train_loss: Option<f64>,
    #[serde(skip)]
    pub outcome: TrainOutcome,
}

/// Build the data and the initial net for a config.
pub fn prepare(cfg: &ExperimentConfig) -> Result<(ExperimentData, KirchhoffNet)> {
    let data = cfg.load_data()?;
    let (input_dim, target_dim) = data.dims();
    if cfg.task == TaskKind::Classification {
        let readouts = match &cfg.net.readout_nodes {
            Some(r) => r.len(),
            None => cfg.node_layout()?.1,
        };
        if target_dim > readouts {
            return Err(bad("net.readout_nodes", format!("{readouts} logits for {target_dim} classes")));
        }
    }
    if let Some(inputs) = &cfg.net.input_nodes {
        if inputs.len() != input_dim {
            return Err(bad("net.input_nodes", format!("lists {} nodes for {input_dim} input features", inputs.len())));
        }
    }
    let net = cfg.build_net(input_dim, target_dim.max(1))?;
    if cfg.task.is_flow() && net.flow_dim()? != input_dim {
        return Err(bad("net.nodes", format!("a flow on {input_dim}-dimensional data needs exactly {input_dim} nodes")));
    }
    Ok((data, net))
}

/// Train from a config and write `config.json`, `checkpoint.json`,
/// `metrics.csv`, `summary.json` and, for flows, `samples.csv` under
/// `cfg.out_dir`.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    let (data, net) = prepare(cfg)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    log::info!("training {:?} net with {} parameters", cfg.task, net.num_params());
    let outcome = training::train(&net, data.task(cfg.task), &train_cfg)?;
    let report = TrainReport {
        task: cfg.task,
        num_params: net.num_params(),
        initial_metric: outcome.initial_metric,
        best_metric: outcome.best_metric(),
        best_epoch: outcome.best_epoch,
        final_train_loss: outcome.log.last().map(|r| r.train_loss),
        outcome,
    };
    let out = &cfg.out_dir;
    write_atomic(&out.join("config.json"), cfg.to_json().as_bytes())?;
    report.outcome.best.save_checkpoint(&out.join("checkpoint.json"))?;
    write_atomic(&out.join("metrics.csv"), metrics_csv(&report.outcome.log).as_bytes())?;
    let summary = serde_json::to_string_pretty(&report).expect("report serialization cannot fail");
    write_atomic(&out.join("summary.json"), summary.as_bytes())?;
    if cfg.task.is_flow() {
        let samples = report.outcome.best.sample_n(cfg.samples, cfg.seed.wrapping_add(3))?;
        data::save_samples(&out.join("samples.csv"), &samples)?;
    }
    Ok(report)
}

/// Test metric of a saved net on the config's data.
pub fn run_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Option<f64>> {
    let net = KirchhoffNet::load_checkpoint(checkpoint)?;
    let data = cfg.load_data()?;
    evaluate(&net, &data.task(cfg.task), cfg.seed ^ 0x5eed_e7a1)
}

/// Draw `n` samples from a saved flow into `out`.
pub fn run_sample(checkpoint: &Path, n: usize, seed: u64, out: &Path) -> Result<Vec<Vec<f64>>> {
    let net = KirchhoffNet::load_checkpoint(checkpoint)?;
    let samples = net.sample_n(n, seed)?;
    data::save_samples(out, &samples)?;
    Ok(samples)
}

/// `q(x)` of a saved 2-D flow on a `points × points` grid over
/// `[−half_width, half_width]²`, written as `x0,x1,logq` rows. Returns the
/// trapezoid-rule mass of the grid.
pub fn run_density_grid(checkpoint: &Path, points: usize, half_width: f64, out: &Path) -> Result<f64> {
    let net = KirchhoffNet::load_checkpoint(checkpoint)?;
    if net.flow_dim()? != 2 {
        return Err(Error::invalid("density grids need a 2-D flow"));
    }
    let (mass, rows) = density_grid(&net, points, half_width)?;
    let mut text = String::from("x0,x1,logq\n");
    for (x, logq) in rows {
        text.push_str(&format!("{},{},{}\n", x[0], x[1], logq));
    }
    write_atomic(out, text.as_bytes())?;
    Ok(mass)
}

/// Grid points with their log-density.
pub type DensityGrid = Vec<([f64; 2], f64)>;

/// Log-density on a square grid and its trapezoid-rule integral.
pub fn density_grid(net: &KirchhoffNet, points: usize, half_width: f64) -> Result<(f64, DensityGrid)> {
    use rayon::prelude::*;
    if points < 2 || !(half_width > 0.0) {
        return Err(Error::invalid("a density grid needs at least 2 points per side and a positive extent"));
    }
    let h = 2.0 * half_width / (points - 1) as f64;
    let coords: Vec<[f64; 2]> = (0..points)
        .flat_map(|i| (0..points).map(move |j| [-half_width + i as f64 * h, -half_width + j as f64 * h]))
        .collect();
    let logq = coords.par_iter().map(|x| net.forward_logdensity(x)).collect::<Result<Vec<f64>>>()?;
    let edge = |k: usize| if k == 0 || k == points - 1 { 0.5 } else { 1.0 };
    let mass = logq
        .iter()
        .enumerate()
        .map(|(idx, l)| edge(idx / points) * edge(idx % points) * l.exp())
        .sum::<f64>()
        * h
        * h;
    Ok((mass, coords.into_iter().zip(logq).collect()))
}
