//! Datasets: synthetic 2-D generation targets, Friedman regression, CSV and
//! IDX loaders, and closed-form density targets.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::std_normal_logpdf;
use crate::training::DensityTarget;

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    None,
    Values(Vec<Vec<f64>>),
    Labels(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub targets: Targets,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, targets: Targets) -> Result<Self> {
        let n = features.len();
        let dim = features.first().map_or(0, Vec::len);
        if features.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("feature rows differ in length"));
        }
        if features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("features must be finite"));
        }
        let ok = match &targets {
            Targets::None => true,
            Targets::Values(v) => v.len() == n && v.iter().flatten().all(|x| x.is_finite()),
            Targets::Labels(l) => l.len() == n,
        };
        if !ok {
            return Err(Error::invalid("targets do not match the features"));
        }
        Ok(Dataset { features, targets })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn num_classes(&self) -> usize {
        match &self.targets {
            Targets::Labels(l) => l.iter().max().map_or(0, |m| m + 1),
            _ => 0,
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            targets: match &self.targets {
                Targets::None => Targets::None,
                Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i].clone()).collect()),
                Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
            },
        }
    }

    /// Reinterpret scalar value targets as class labels. Every value must be
    /// a non-negative integer.
    pub fn into_labels(self) -> Result<Dataset> {
        let labels = match self.targets {
            Targets::Labels(l) => l,
            Targets::Values(v) => v
                .iter()
                .map(|t| match t.as_slice() {
                    [x] if *x >= 0.0 && x.fract() == 0.0 && *x < u32::MAX as f64 => Ok(*x as usize),
                    _ => Err(Error::invalid(format!("class labels must be non-negative integers, got {t:?}"))),
                })
                .collect::<Result<_>>()?,
            Targets::None => return Err(Error::invalid("dataset has no targets to use as labels")),
        };
        Ok(Dataset {
            features: self.features,
            targets: Targets::Labels(labels),
        })
    }

    /// Seeded shuffle, then the first `n_train` rows train and the rest test.
    pub fn split(&self, n_train: usize, seed: u64) -> Result<Split> {
        if n_train == 0 || n_train >= self.len() {
            return Err(Error::invalid(format!("cannot split {} rows with {n_train} for training", self.len())));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Split {
            train: self.subset(&idx[..n_train]),
            test: self.subset(&idx[n_train..]),
        })
    }
}

/// Per-column affine map to zero mean and unit variance.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len() as f64;
        let dim = rows.first().ok_or_else(|| Error::invalid("cannot standardize an empty set"))?.len();
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        // a constant column maps to zero
        let std = var.into_iter().map(|s| (s / n).sqrt()).map(|s| if s > 0.0 { s } else { 1.0 }).collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, rows: &mut [Vec<f64>]) {
        for r in rows {
            for ((x, m), s) in r.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
    }

    pub fn invert(&self, row: &mut [f64]) {
        for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *x = *x * s + m;
        }
    }
}

/// Standardize features and (if present) value targets on the train split,
/// applying the same maps to the test split.
pub fn standardize(split: &mut Split) -> Result<(Standardizer, Option<Standardizer>)> {
    let fx = Standardizer::fit(&split.train.features)?;
    fx.apply(&mut split.train.features);
    fx.apply(&mut split.test.features);
    let fy = match (&mut split.train.targets, &mut split.test.targets) {
        (Targets::Values(tr), Targets::Values(te)) => {
            let fy = Standardizer::fit(tr)?;
            fy.apply(tr);
            fy.apply(te);
            Some(fy)
        }
        _ => None,
    };
    Ok((fx, fy))
}

/// The 2-D generation benchmarks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Toy2d {
    Moons,
    TwoSpirals,
    Circles,
    EightGaussians,
    Pinwheel,
    Checkerboard,
}

impl Toy2d {
    pub const ALL: [Toy2d; 6] = [
        Toy2d::Moons,
        Toy2d::TwoSpirals,
        Toy2d::Circles,
        Toy2d::EightGaussians,
        Toy2d::Pinwheel,
        Toy2d::Checkerboard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Toy2d::Moons => "moons",
            Toy2d::TwoSpirals => "2spirals",
            Toy2d::Circles => "circles",
            Toy2d::EightGaussians => "8gaussians",
            Toy2d::Pinwheel => "pinwheel",
            Toy2d::Checkerboard => "checkerboard",
        }
    }
}

impl fmt::Display for Toy2d {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Toy2d {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Toy2d::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown 2-D dataset `{s}`")))
    }
}

pub const EIGHT_GAUSSIANS_RADIUS: f64 = 2.0;
pub const EIGHT_GAUSSIANS_STD: f64 = 0.25;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Draw `n` points from a 2-D benchmark distribution. Sample `i` comes from
/// component `i mod K` for the datasets made of K pieces.
///
/// * moons: upper arc `(cos t, sin t)` and lower arc `(1 − cos t, ½ − sin t)`
///   with `t ~ U[0, π]`, noise `N(0, 0.1²)`, then `2·p + (−1, −0.2)`.
/// * 2spirals: radius `r = √u · 3π`, point `(−r cos r, r sin r) + U[0, ½]²`,
///   the second arm mirrored through the origin, scaled by `1/3`, plus
///   `N(0, 0.1²)`.
/// * circles: radius 3 and 1.5 alternately, uniform angle, noise `N(0, 0.24²)`.
/// * 8gaussians: means at radius 2 on angles `kπ/4`, isotropic std 0.25.
/// * pinwheel: 5 arms, radial std 0.3, tangential std 0.1, twist rate 0.25,
///   scaled by 2.
/// * checkerboard: `x ~ U[−2, 2]`, `y` in the squares of opposite colour,
///   scaled by 2.
pub fn gen2d(kind: Toy2d, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("gen2d needs n >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let features = (0..n)
        .map(|i| match kind {
            Toy2d::Moons => {
                let t = rng.random_range(0.0..PI);
                let (x, y) = if i % 2 == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                vec![2.0 * (x + 0.1 * normal(rng)) - 1.0, 2.0 * (y + 0.1 * normal(rng)) - 0.2]
            }
            Toy2d::TwoSpirals => {
                let r = rng.random::<f64>().sqrt() * 3.0 * PI;
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                let x = sign * (-r.cos() * r + rng.random::<f64>() * 0.5);
                let y = sign * (r.sin() * r + rng.random::<f64>() * 0.5);
                vec![x / 3.0 + 0.1 * normal(rng), y / 3.0 + 0.1 * normal(rng)]
            }
            Toy2d::Circles => {
                let radius = if i % 2 == 0 { 3.0 } else { 1.5 };
                let a = rng.random_range(0.0..2.0 * PI);
                vec![radius * a.cos() + 0.24 * normal(rng), radius * a.sin() + 0.24 * normal(rng)]
            }
            Toy2d::EightGaussians => {
                let a = (i % 8) as f64 * PI / 4.0;
                vec![
                    EIGHT_GAUSSIANS_RADIUS * a.cos() + EIGHT_GAUSSIANS_STD * normal(rng),
                    EIGHT_GAUSSIANS_RADIUS * a.sin() + EIGHT_GAUSSIANS_STD * normal(rng),
                ]
            }
            Toy2d::Pinwheel => {
                let arm = (i % 5) as f64 * 2.0 * PI / 5.0;
                let radial = 0.3 * normal(rng) + 1.0;
                let tangential = 0.1 * normal(rng);
                let a = arm + 0.25 * radial.exp();
                let (s, c) = a.sin_cos();
                vec![2.0 * (c * radial - s * tangential), 2.0 * (s * radial + c * tangential)]
            }
            Toy2d::Checkerboard => {
                let x = rng.random::<f64>() * 4.0 - 2.0;
                let y = rng.random::<f64>() - if rng.random::<bool>() { 2.0 } else { 0.0 } + x.floor().rem_euclid(2.0);
                vec![2.0 * x, 2.0 * y]
            }
        })
        .collect();
    Dataset::new(features, Targets::None)
}

/// Noise-free Friedman response on the first five features.
pub fn friedman_response(x: &[f64]) -> f64 {
    10.0 * (PI * x[0] * x[1]).sin() + 20.0 * (x[2] - 0.5).powi(2) + 10.0 * x[3] + 5.0 * x[4]
}

/// `x ~ U[0,1]⁵`, `y = friedman_response(x) + N(0, noise_sd²)`, unstandardized.
pub fn gen_friedman(n: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("gen_friedman needs n >= 1"));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::invalid("noise_sd must be a finite non-negative number"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
        ys.push(vec![friedman_response(&x) + noise_sd * normal(&mut rng)]);
        xs.push(x);
    }
    Dataset::new(xs, Targets::Values(ys))
}

/// Friedman train/test split, standardized on the train split.
pub fn friedman_split(n_train: usize, n_test: usize, noise_sd: f64, seed: u64) -> Result<Split> {
    let all = gen_friedman(n_train + n_test, noise_sd, seed)?;
    let idx: Vec<usize> = (0..all.len()).collect();
    let mut split = Split {
        train: all.subset(&idx[..n_train]),
        test: all.subset(&idx[n_train..]),
    };
    standardize(&mut split)?;
    Ok(split)
}

fn csv_error(path: &Path, e: &csv::Error) -> Error {
    let location = match e.position() {
        Some(p) => format!("{}:{}", path.display(), p.line()),
        None => path.display().to_string(),
    };
    Error::parse(location, e.to_string())
}

/// Read a headed CSV of decimal fields. `target_column` names the target
/// column; `None` loads every column as a feature.
pub fn load_csv(path: &Path, target_column: Option<&str>) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, &e))?;
    let header = reader.headers().map_err(|e| csv_error(path, &e))?.clone();
    let target_idx = match target_column {
        Some(name) => Some(
            header
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::parse(format!("{}:1", path.display()), format!("no column named `{name}`")))?,
        ),
        None => None,
    };
    let mut features = Vec::new();
    let mut targets = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, &e))?;
        let line = record.position().map_or(0, |p| p.line());
        let mut row = Vec::with_capacity(record.len());
        let mut target = None;
        for (j, field) in record.iter().enumerate() {
            let value: f64 = field.trim().parse().map_err(|_| {
                Error::parse(format!("{}:{line}", path.display()), format!("column {} is not a number: `{field}`", j + 1))
            })?;
            if Some(j) == target_idx {
                target = Some(value);
            } else {
                row.push(value);
            }
        }
        features.push(row);
        if let Some(t) = target {
            targets.push(vec![t]);
        }
    }
    let data = Dataset::new(features, if target_idx.is_some() { Targets::Values(targets) } else { Targets::None })?;
    // a `label` column is what save_csv writes for class labels
    if target_column.map(str::trim) == Some("label") {
        data.into_labels()
    } else {
        Ok(data)
    }
}

/// Write features as `x0..` columns, followed by `y` (values) or `label`.
pub fn save_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("x{j}")).collect();
    match &data.targets {
        Targets::Values(_) => header.push("y".into()),
        Targets::Labels(_) => header.push("label".into()),
        Targets::None => {}
    }
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    writer.write_record(&header).map_err(io)?;
    for (i, row) in data.features.iter().enumerate() {
        let mut fields: Vec<String> = row.iter().map(f64::to_string).collect();
        match &data.targets {
            Targets::Values(v) => fields.push(v[i][0].to_string()),
            Targets::Labels(l) => fields.push(l[i].to_string()),
            Targets::None => {}
        }
        writer.write_record(&fields).map_err(io)?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    crate::io::write_atomic(path, &bytes)
}

/// Write rows of samples as CSV with `x0..` columns.
pub fn save_samples(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    save_csv(path, &Dataset::new(rows.to_vec(), Targets::None)?)
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    name: String,
}

impl IdxReader<'_> {
    fn u32_at(&self, offset: usize) -> Result<u32> {
        self.bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::parse(format!("{}@{offset}", self.name), "file ends inside the header"))
    }

    /// Check the magic for unsigned bytes with `ndims` dimensions and return
    /// the dimension sizes.
    fn header(&self, ndims: u8) -> Result<Vec<usize>> {
        let magic = self.u32_at(0)?;
        let expected = 0x0800 | u32::from(ndims);
        if magic != expected {
            return Err(Error::parse(
                format!("{}@0", self.name),
                format!("bad IDX magic {magic:#010x}, expected {expected:#010x}"),
            ));
        }
        let dims = (0..usize::from(ndims))
            .map(|k| self.u32_at(4 + 4 * k).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let body = 4 + 4 * usize::from(ndims);
        let size: usize = dims.iter().product();
        if self.bytes.len() != body + size {
            return Err(Error::parse(
                format!("{}@{body}", self.name),
                format!("expected {size} data bytes, found {}", self.bytes.len().saturating_sub(body)),
            ));
        }
        Ok(dims)
    }
}

/// Parse IDX image/label files (unsigned-byte type). Pixels are scaled to
/// `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let img = IdxReader {
        bytes: images,
        name: "images".into(),
    };
    let lab = IdxReader {
        bytes: labels,
        name: "labels".into(),
    };
    let dims = img.header(3)?;
    let n_labels = lab.header(1)?[0];
    let (n, pixels) = (dims[0], dims[1] * dims[2]);
    if n != n_labels {
        return Err(Error::parse("labels@4", format!("{n_labels} labels for {n} images")));
    }
    let features = images[16..].chunks_exact(pixels.max(1)).take(n).map(|c| c.iter().map(|&p| f64::from(p) / 255.0).collect()).collect();
    let labels = labels[8..].iter().map(|&l| usize::from(l)).collect();
    Dataset::new(features, Targets::Labels(labels))
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    parse_idx(&std::fs::read(images)?, &std::fs::read(labels)?)
}

/// Average-pool square `side × side` images by `factor` in each direction.
pub fn downsample(data: &Dataset, side: usize, factor: usize) -> Result<Dataset> {
    if factor == 0 || !side.is_multiple_of(factor) || data.dim() != side * side {
        return Err(Error::invalid(format!("cannot pool {}-pixel images of side {side} by {factor}", data.dim())));
    }
    let out = side / factor;
    let scale = 1.0 / (factor * factor) as f64;
    let features = data
        .features
        .iter()
        .map(|img| {
            let mut pooled = vec![0.0; out * out];
            for r in 0..side {
                for c in 0..side {
                    pooled[(r / factor) * out + c / factor] += img[r * side + c] * scale;
                }
            }
            pooled
        })
        .collect();
    Ok(Dataset {
        features,
        targets: data.targets.clone(),
    })
}

/// Closed-form 2-D density targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NamedTarget {
    /// Standard normal.
    Gaussian,
    /// Equal mixture of `N(±m, s²I)` with `m = (MIX_OFFSET, 0)`, `s = MIX_STD`.
    Mixture2,
    /// `u(z) = exp(−½((|z| − 2)/0.4)²) · (exp(−½((z₀ − 2)/0.6)²) + exp(−½((z₀ + 2)/0.6)²))`:
    /// a ring of radius 2 with two lobes on the horizontal axis, unnormalized.
    RingLike,
}

pub const MIX_OFFSET: f64 = 1.0;
pub const MIX_STD: f64 = 0.5;

impl NamedTarget {
    pub fn name(self) -> &'static str {
        match self {
            NamedTarget::Gaussian => "gaussian",
            NamedTarget::Mixture2 => "mixture2",
            NamedTarget::RingLike => "fig9-ring-like",
        }
    }
}

impl FromStr for NamedTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [NamedTarget::Gaussian, NamedTarget::Mixture2, NamedTarget::RingLike]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown density target `{s}`")))
    }
}

pub fn density_target(name: &str) -> Result<NamedTarget> {
    name.parse()
}

fn log_sum_exp2(a: f64, b: f64) -> (f64, f64, f64) {
    // returns (log(e^a + e^b), weight of a, weight of b)
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let s = ea + eb;
    (m + s.ln(), ea / s, eb / s)
}

impl DensityTarget for NamedTarget {
    fn log_u(&self, x: &[f64]) -> f64 {
        match self {
            NamedTarget::Gaussian => std_normal_logpdf(x),
            NamedTarget::Mixture2 => {
                let comp = |sign: f64| {
                    let dx = x[0] - sign * MIX_OFFSET;
                    -0.5 * (dx * dx + x[1] * x[1]) / (MIX_STD * MIX_STD) - (2.0 * PI * MIX_STD * MIX_STD).ln()
                };
                log_sum_exp2(comp(1.0), comp(-1.0)).0 - 2f64.ln()
            }
            NamedTarget::RingLike => {
                let r = x[0].hypot(x[1]);
                let ring = -0.5 * ((r - 2.0) / 0.4).powi(2);
                let a = -0.5 * ((x[0] - 2.0) / 0.6).powi(2);
                let b = -0.5 * ((x[0] + 2.0) / 0.6).powi(2);
                ring + log_sum_exp2(a, b).0
            }
        }
    }

    fn grad_log_u(&self, x: &[f64]) -> Vec<f64> {
        match self {
            NamedTarget::Gaussian => x.iter().map(|v| -v).collect(),
            NamedTarget::Mixture2 => {
                let s2 = MIX_STD * MIX_STD;
                let comp = |sign: f64| -0.5 * ((x[0] - sign * MIX_OFFSET).powi(2) + x[1] * x[1]) / s2;
                let (_, wp, wm) = log_sum_exp2(comp(1.0), comp(-1.0));
                let mean0 = (wp - wm) * MIX_OFFSET;
                vec![-(x[0] - mean0) / s2, -x[1] / s2]
            }
            NamedTarget::RingLike => {
                let r = x[0].hypot(x[1]);
                let dring = -(r - 2.0) / 0.16;
                let (ux, uy) = if r > 0.0 { (x[0] / r, x[1] / r) } else { (0.0, 0.0) };
                let a = -0.5 * ((x[0] - 2.0) / 0.6).powi(2);
                let b = -0.5 * ((x[0] + 2.0) / 0.6).powi(2);
                let (_, wa, wb) = log_sum_exp2(a, b);
                let dlobe = -(wa * (x[0] - 2.0) + wb * (x[0] + 2.0)) / 0.36;
                vec![dring * ux + dlobe, dring * uy]
            }
        }
    }

    fn log_normalizer(&self) -> f64 {
        match self {
            NamedTarget::Gaussian | NamedTarget::Mixture2 => 0.0,
            NamedTarget::RingLike => ring_log_normalizer(),
        }
    }
}

/// `log ∫ u` for the ring target by the midpoint rule on `[−6, 6]²`, where
/// the integrand is below `e^{−40}` outside.
fn ring_log_normalizer() -> f64 {
    static CACHE: std::sync::OnceLock<f64> = std::sync::OnceLock::new();
    *CACHE.get_or_init(|| {
        let n = 1200;
        let h = 12.0 / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let p = [-6.0 + (i as f64 + 0.5) * h, -6.0 + (j as f64 + 0.5) * h];
                total += NamedTarget::RingLike.log_u(&p).exp();
            }
        }
        (total * h * h).ln()
    })
}
