//! Tabular ingestion: CSV loading, median-anchored normalization and train/test splits.
//!
//! Every dataset that reaches the models is normalized so that the training median of
//! each feature sits at zero. That point is the anchor of the ANOVA decomposition.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalized (or raw) tabular observations with binary targets, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub feature_names: Vec<String>,
    features: Vec<f64>,
    targets: Vec<f64>,
    n_features: usize,
}

impl Dataset {
    /// Builds a dataset and checks its invariants: finite features, 0/1 targets,
    /// `d >= 1`, `N >= 2` and both classes present.
    pub fn new(
        name: impl Into<String>,
        feature_names: Vec<String>,
        features: Vec<f64>,
        targets: Vec<f64>,
    ) -> Result<Self> {
        let ds = Self::from_parts(name, feature_names, features, targets)?;
        if ds.len() < 2 {
            return Err(Error::TooFewRows(ds.len()));
        }
        if !ds.has_both_classes() {
            return Err(Error::SingleClass);
        }
        Ok(ds)
    }

    /// Like [`Dataset::new`] but allows single-class or tiny subsets (folds, test tails).
    pub fn from_parts(
        name: impl Into<String>,
        feature_names: Vec<String>,
        features: Vec<f64>,
        targets: Vec<f64>,
    ) -> Result<Self> {
        let d = feature_names.len();
        if d == 0 {
            return Err(Error::Config("dataset needs at least one feature".into()));
        }
        if features.len() != d * targets.len() {
            return Err(Error::Dimension {
                expected: d * targets.len(),
                got: features.len(),
            });
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse(format!(
                "non-finite feature value at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        if let Some(t) = targets.iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::TargetNotBinary(format!("target value {t}")));
        }
        Ok(Self {
            name: name.into(),
            feature_names,
            features,
            targets,
            n_features: d,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.features[m * self.n_features..(m + 1) * self.n_features]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.features.chunks_exact(self.n_features)
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.rows().map(|r| r[i]).collect()
    }

    pub fn prevalence(&self) -> f64 {
        self.targets.iter().sum::<f64>() / self.len() as f64
    }

    pub fn has_both_classes(&self) -> bool {
        self.targets.iter().any(|&t| t == 1.0) && self.targets.iter().any(|&t| t == 0.0)
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        let mut targets = Vec::with_capacity(indices.len());
        for &m in indices {
            features.extend_from_slice(self.row(m));
            targets.push(self.targets[m]);
        }
        Dataset {
            name: self.name.clone(),
            feature_names: self.feature_names.clone(),
            features,
            targets,
            n_features: self.n_features,
        }
    }
}

/// Which column of the CSV holds the class label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TargetColumn {
    Name(String),
    Index(usize),
}

impl FromStr for TargetColumn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Err(Error::Config("empty target column".into()));
        }
        Ok(TargetColumn::Name(s.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub target: TargetColumn,
    /// When set, targets are `1` for this label and `0` for every other value.
    pub positive_label: Option<f64>,
    /// Columns ignored entirely (identifiers and the like).
    pub exclude: Vec<String>,
}

impl LoadOptions {
    pub fn new(target: TargetColumn) -> Self {
        Self {
            target,
            positive_label: None,
            exclude: Vec::new(),
        }
    }
}

fn parse_cell(cell: &str) -> std::result::Result<Option<f64>, ()> {
    let c = cell.trim();
    if c.is_empty() || c == "NA" || c == "?" || c.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    c.parse::<f64>().map(Some).map_err(|_| ())
}

/// Loads a comma-delimited numeric table with a header row.
///
/// Rows with a missing cell in any used column are dropped and constant feature
/// columns are removed with a warning.
pub fn load_csv(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        .iter()
        .map(|h| h.trim_matches('"').to_string())
        .collect();

    let target_idx = match &opts.target {
        TargetColumn::Index(i) if *i < headers.len() => *i,
        TargetColumn::Index(i) => return Err(Error::MissingTarget(i.to_string())),
        TargetColumn::Name(name) => headers
            .iter()
            .position(|h| h == name)
            .or_else(|| name.parse::<usize>().ok().filter(|&i| i < headers.len()))
            .ok_or_else(|| Error::MissingTarget(name.clone()))?,
    };
    for ex in &opts.exclude {
        if !headers.contains(ex) {
            return Err(Error::Config(format!("excluded column `{ex}` not in header")));
        }
    }
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != target_idx && !opts.exclude.contains(&headers[c]))
        .collect();
    if feature_cols.is_empty() {
        return Err(Error::Config("no feature columns".into()));
    }

    let mut raw: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<f64> = Vec::new();
    let mut dropped = 0usize;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        if record.len() != headers.len() {
            return Err(Error::Parse(format!(
                "{}: row {} has {} cells, header has {}",
                path.display(),
                line + 2,
                record.len(),
                headers.len()
            )));
        }
        let cell = |c: usize| {
            parse_cell(&record[c]).map_err(|_| {
                Error::Parse(format!(
                    "{}: row {}, column `{}`: `{}` is not numeric",
                    path.display(),
                    line + 2,
                    headers[c],
                    &record[c]
                ))
            })
        };
        let label = cell(target_idx)?;
        let mut row = Vec::with_capacity(feature_cols.len());
        let mut missing = label.is_none();
        for &c in &feature_cols {
            match cell(c)? {
                Some(v) => row.push(v),
                None => missing = true,
            }
        }
        if missing {
            dropped += 1;
            continue;
        }
        raw.push(row);
        labels.push(label.unwrap());
    }
    if dropped > 0 {
        log::info!("{}: dropped {dropped} rows with missing values", path.display());
    }
    if raw.len() < 2 {
        return Err(Error::TooFewRows(raw.len()));
    }

    let targets = coerce_targets(&labels, opts.positive_label)?;

    let mut keep = Vec::new();
    for (k, &c) in feature_cols.iter().enumerate() {
        let first = raw[0][k];
        if raw.iter().all(|r| r[k] == first) {
            warn!(
                "{}: dropping constant feature column `{}`",
                path.display(),
                headers[c]
            );
        } else {
            keep.push(k);
        }
    }
    if keep.is_empty() {
        return Err(Error::Config("every feature column is constant".into()));
    }
    let feature_names = keep
        .iter()
        .map(|&k| headers[feature_cols[k]].clone())
        .collect();
    let features = raw
        .iter()
        .flat_map(|r| keep.iter().map(move |&k| r[k]))
        .collect();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, feature_names, features, targets)
}

fn coerce_targets(labels: &[f64], positive: Option<f64>) -> Result<Vec<f64>> {
    if let Some(p) = positive {
        let t: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l == p))).collect();
        if t.iter().all(|&v| v == t[0]) {
            return Err(Error::TargetNotBinary(format!(
                "positive label {p} does not split the rows into two classes"
            )));
        }
        return Ok(t);
    }
    let distinct: BTreeSet<u64> = labels.iter().map(|l| l.to_bits()).collect();
    let mut values: Vec<f64> = distinct.into_iter().map(f64::from_bits).collect();
    values.sort_by(f64::total_cmp);
    if values.len() != 2 {
        return Err(Error::TargetNotBinary(format!(
            "{} distinct target values",
            values.len()
        )));
    }
    Ok(labels
        .iter()
        .map(|&l| if l == values[1] { 1.0 } else { 0.0 })
        .collect())
}

/// Median with the even-length convention of averaging the two middle order statistics.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1.0).max(1.0)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormalizationMode {
    /// Unit sample standard deviation, median at zero.
    ZScoreMedian,
    /// Affine map onto [-1, 1] by the training range, then median at zero.
    RangeSymmetric,
    /// Affine map onto [0, 1] by the training range, then median at zero.
    RangeUnit,
}

impl FromStr for NormalizationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "zscore-median" | "zscore" => Ok(Self::ZScoreMedian),
            "range[-1,1]" | "range-symmetric" | "range-1-1" => Ok(Self::RangeSymmetric),
            "range[0,1]" | "range-unit" | "range01" => Ok(Self::RangeUnit),
            other => Err(Error::Config(format!("unknown normalization mode `{other}`"))),
        }
    }
}

impl fmt::Display for NormalizationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ZScoreMedian => "zscore-median",
            Self::RangeSymmetric => "range[-1,1]",
            Self::RangeUnit => "range[0,1]",
        })
    }
}

/// Per-feature affine transform `z = (x - center) / scale`.
///
/// `center` is the training median in original units for every mode, because an affine
/// map sends the median to the median.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub mode: NormalizationMode,
    pub feature_names: Vec<String>,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl NormalizationSpec {
    /// Fits the transform on `train`.
    pub fn fit(train: &Dataset, mode: NormalizationMode) -> Result<Self> {
        let d = train.n_features();
        let mut center = Vec::with_capacity(d);
        let mut scale = Vec::with_capacity(d);
        for i in 0..d {
            let col = train.column(i);
            let (lo, hi) = col
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let s = match mode {
                NormalizationMode::ZScoreMedian => sample_sd(&col),
                NormalizationMode::RangeSymmetric => (hi - lo) / 2.0,
                NormalizationMode::RangeUnit => hi - lo,
            };
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::ZeroVariance(train.feature_names[i].clone()));
            }
            center.push(median(&col));
            scale.push(s);
        }
        Ok(Self {
            mode,
            feature_names: train.feature_names.clone(),
            center,
            scale,
        })
    }

    pub fn n_features(&self) -> usize {
        self.center.len()
    }

    pub fn normalize_value(&self, i: usize, x: f64) -> f64 {
        (x - self.center[i]) / self.scale[i]
    }

    pub fn denormalize_value(&self, i: usize, z: f64) -> f64 {
        z * self.scale[i] + self.center[i]
    }

    pub fn normalize_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x.len())?;
        Ok(x.iter()
            .enumerate()
            .map(|(i, &v)| self.normalize_value(i, v))
            .collect())
    }

    pub fn denormalize_row(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_len(z.len())?;
        Ok(z.iter()
            .enumerate()
            .map(|(i, &v)| self.denormalize_value(i, v))
            .collect())
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        self.check_len(data.n_features())?;
        let d = data.n_features();
        let features = data
            .features()
            .iter()
            .enumerate()
            .map(|(k, &v)| self.normalize_value(k % d, v))
            .collect();
        Dataset::from_parts(
            data.name.clone(),
            data.feature_names.clone(),
            features,
            data.targets().to_vec(),
        )
    }

    fn check_len(&self, got: usize) -> Result<()> {
        if got != self.n_features() {
            return Err(Error::Dimension {
                expected: self.n_features(),
                got,
            });
        }
        Ok(())
    }
}

/// Fits a [`NormalizationSpec`] on `dataset` and returns the transformed copy.
pub fn normalize(dataset: &Dataset, mode: NormalizationMode) -> Result<(Dataset, NormalizationSpec)> {
    let spec = NormalizationSpec::fit(dataset, mode)?;
    let out = spec.apply(dataset)?;
    Ok((out, spec))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitStrategy {
    FirstK,
    SeededRandom,
}

impl FromStr for SplitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "first-k" | "first" => Ok(Self::FirstK),
            "seeded-random" | "random" => Ok(Self::SeededRandom),
            other => Err(Error::Config(format!("unknown split strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_size: usize,
    pub test_size: usize,
    pub strategy: SplitStrategy,
    pub seed: u64,
}

/// Train and test row indices for `spec` over `n` rows.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if spec.train_size + spec.test_size > n || spec.train_size == 0 {
        return Err(Error::InfeasibleSplit {
            train: spec.train_size,
            test: spec.test_size,
            available: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    if spec.strategy == SplitStrategy::SeededRandom {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        order.shuffle(&mut rng);
    }
    let train = order[..spec.train_size].to_vec();
    let test = order[spec.train_size..spec.train_size + spec.test_size].to_vec();
    Ok((train, test))
}

pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let (tr, te) = split_indices(dataset.len(), spec)?;
    Ok((dataset.subset(&tr), dataset.subset(&te)))
}

/// Dataset manifest: a key-value text file describing where a dataset lives and how
/// to prepare it.
///
/// ```text
/// name = pima
/// path = pima.csv
/// target = diabetic
/// normalization = zscore-median
/// split = seeded-random
/// train_size = 314
/// test_size = 218
/// split_seed = 1
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub name: String,
    pub path: PathBuf,
    pub target: TargetColumn,
    pub positive_label: Option<f64>,
    pub exclude: Vec<String>,
    pub normalization: NormalizationMode,
    pub split: SplitSpec,
    /// Re-randomize the split with each pipeline seed instead of using `split.seed`.
    pub resplit_per_seed: bool,
}

/// Normalized train/test data plus the transform fitted on the training rows.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub raw_train: Dataset,
    pub normalization: NormalizationSpec,
    /// Row indices into the loaded (post-filtering) dataset.
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

pub(crate) fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", n + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses manifest text; relative data paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let get = |k: &str| {
            kv.get(k)
                .cloned()
                .ok_or_else(|| Error::Config(format!("manifest missing `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("manifest `{k}` is not a count")))
        };
        let data_path = PathBuf::from(get("path")?);
        let path = if data_path.is_absolute() {
            data_path
        } else {
            base.join(data_path)
        };
        let positive_label = match kv.get("positive_label") {
            Some(v) => Some(
                v.parse()
                    .map_err(|_| Error::Config("positive_label must be numeric".into()))?,
            ),
            None => None,
        };
        let exclude = kv
            .get("exclude")
            .map(|v| {
                v.split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            })
            .unwrap_or_default();
        let seed = match kv.get("split_seed") {
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config("split_seed must be an integer".into()))?,
            None => 0,
        };
        let resplit_per_seed = matches!(
            kv.get("resplit_per_seed").map(|s| s.as_str()),
            Some("true" | "yes" | "1")
        );
        Ok(Self {
            name: kv.get("name").cloned().unwrap_or_else(|| {
                path.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            }),
            target: get("target")?.parse()?,
            positive_label,
            exclude,
            normalization: kv
                .get("normalization")
                .map(|s| s.parse())
                .transpose()?
                .unwrap_or(NormalizationMode::ZScoreMedian),
            split: SplitSpec {
                train_size: num("train_size")?,
                test_size: num("test_size")?,
                strategy: kv
                    .get("split")
                    .map(|s| s.parse())
                    .transpose()?
                    .unwrap_or(SplitStrategy::SeededRandom),
                seed,
            },
            resplit_per_seed,
            path,
        })
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            target: self.target.clone(),
            positive_label: self.positive_label,
            exclude: self.exclude.clone(),
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let mut ds = load_csv(&self.path, &self.load_options())?;
        ds.name = self.name.clone();
        Ok(ds)
    }

    /// Loads, splits and normalizes. `pipeline_seed` only matters when
    /// `resplit_per_seed` is set.
    pub fn prepare(&self, pipeline_seed: u64) -> Result<PreparedData> {
        let full = self.load_dataset()?;
        self.prepare_from(&full, pipeline_seed)
    }

    pub fn prepare_from(&self, full: &Dataset, pipeline_seed: u64) -> Result<PreparedData> {
        let mut spec = self.split.clone();
        if self.resplit_per_seed {
            spec.seed = spec.seed.wrapping_add(pipeline_seed);
        }
        let (train_rows, test_rows) = split_indices(full.len(), &spec)?;
        let raw_train = full.subset(&train_rows);
        let (train, normalization) = normalize(&raw_train, self.normalization)?;
        let test = normalization.apply(&full.subset(&test_rows))?;
        Ok(PreparedData {
            train,
            test,
            raw_train,
            normalization,
            train_rows,
            test_rows,
        })
    }
}
