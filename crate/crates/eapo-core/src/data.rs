//! Dataset representation, delimited-table ingestion with dry-matter-to-label
//! conversion, feature standardization, and a seeded synthetic generator for
//! long-tailed data under covariate shift.
//!
//! Tables are UTF-8 delimited text with a header row. A schema maps header
//! names to roles: `d` feature columns plus exactly one target column, either
//! a binary label or a nonnegative dry-matter (DM) amount. A positive DM
//! marks a fire event (label 1) and doubles as the event intensity.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{EapoError, Result};

/// One observation: feature vector, binary label, optional event intensity
/// (positive dry matter for label-1 records), and a stable index unique
/// within its dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub features: Vec<f64>,
    pub label: u8,
    pub intensity: Option<f64>,
    pub index: usize,
}

/// An immutable, validated collection of records sharing one feature
/// dimension. Indices are dense in `[0, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<Record>,
    dim: usize,
    positive_count: usize,
}

impl Dataset {
    pub fn new(dim: usize, mut records: Vec<Record>) -> Result<Self> {
        if dim == 0 {
            return Err(EapoError::InvalidConfig(
                "feature dimension must be positive".into(),
            ));
        }
        let mut positive_count = 0;
        for (pos, rec) in records.iter_mut().enumerate() {
            if rec.features.len() != dim {
                return Err(EapoError::DimensionMismatch {
                    expected: dim,
                    got: rec.features.len(),
                });
            }
            if let Some(bad) = rec.features.iter().find(|v| !v.is_finite()) {
                return Err(EapoError::NonFiniteInput(format!(
                    "record {pos} feature value {bad}"
                )));
            }
            if rec.label > 1 {
                return Err(EapoError::InvalidConfig(format!(
                    "record {pos} label {} is not binary",
                    rec.label
                )));
            }
            if rec.index != pos {
                return Err(EapoError::InvalidConfig(format!(
                    "record index {} at position {pos}; indices must be dense",
                    rec.index
                )));
            }
            match (rec.label, rec.intensity) {
                (1, Some(v)) if !(v.is_finite() && v > 0.0) => {
                    return Err(EapoError::MissingIntensity { index: pos });
                }
                (0, Some(v)) => {
                    if v == 0.0 {
                        rec.intensity = None;
                    } else {
                        return Err(EapoError::InvalidConfig(format!(
                            "record {pos} has label 0 but intensity {v}"
                        )));
                    }
                }
                _ => {}
            }
            positive_count += usize::from(rec.label == 1);
        }
        Ok(Self {
            records,
            dim,
            positive_count,
        })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn positive_count(&self) -> usize {
        self.positive_count
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.records[i].features
    }

    /// Write the dataset back out in the table format. Targets are exported
    /// as a DM column when intensities are present (all positives must carry
    /// one), otherwise as a label column. Returns the schema that re-loads
    /// the file.
    pub fn export_table(&self, path: &Path, delimiter: char) -> Result<TableSchema> {
        let has_intensity = self.records.iter().any(|r| r.intensity.is_some());
        if has_intensity {
            if let Some(r) = self
                .records
                .iter()
                .find(|r| r.label == 1 && r.intensity.is_none())
            {
                return Err(EapoError::Export(format!(
                    "record {} has label 1 without intensity; cannot export a DM column",
                    r.index
                )));
            }
        }
        let feature_columns: Vec<String> = (0..self.dim).map(|i| format!("f{i}")).collect();
        let target = if has_intensity {
            TargetColumn::DryMatter("dm".into())
        } else {
            TargetColumn::Label("label".into())
        };

        let mut out = String::new();
        for name in &feature_columns {
            out.push_str(name);
            out.push(delimiter);
        }
        out.push_str(target.name());
        out.push('\n');
        for rec in &self.records {
            for v in &rec.features {
                let _ = write!(out, "{v}");
                out.push(delimiter);
            }
            match target {
                TargetColumn::DryMatter(_) => {
                    let dm = rec.intensity.unwrap_or(0.0);
                    let _ = write!(out, "{dm}");
                }
                TargetColumn::Label(_) => {
                    let _ = write!(out, "{}", rec.label);
                }
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| EapoError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(TableSchema {
            feature_columns,
            target,
            delimiter,
        })
    }
}

/// Role of the target column: a ready-made binary label, or a nonnegative
/// dry-matter amount converted to `label = (dm > 0)` with `intensity = dm`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetColumn {
    Label(String),
    DryMatter(String),
}

impl TargetColumn {
    fn name(&self) -> &str {
        match self {
            TargetColumn::Label(n) | TargetColumn::DryMatter(n) => n,
        }
    }
}

/// Maps header names to roles for [`load_table`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSchema {
    pub feature_columns: Vec<String>,
    pub target: TargetColumn,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
}

fn default_delimiter() -> char {
    ','
}

impl TableSchema {
    pub fn validate(&self) -> Result<()> {
        if self.feature_columns.is_empty() {
            return Err(EapoError::InvalidConfig(
                "schema needs at least one feature column".into(),
            ));
        }
        let mut names: Vec<&str> = self.feature_columns.iter().map(String::as_str).collect();
        names.push(self.target.name());
        let mut sorted = names.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(EapoError::InvalidConfig(
                "schema column names must be distinct".into(),
            ));
        }
        Ok(())
    }
}

/// Load a delimited table. Data rows are numbered from 1 in error messages.
pub fn load_table(path: &Path, schema: &TableSchema) -> Result<Dataset> {
    schema.validate()?;
    let body = fs::read_to_string(path).map_err(|e| EapoError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut lines = body.lines();
    let header = lines.next().ok_or(EapoError::Parse {
        row: 0,
        message: "file has no header row".into(),
    })?;
    let names: Vec<&str> = header.split(schema.delimiter).map(str::trim).collect();
    let column_of = |wanted: &str| -> Result<usize> {
        let mut hits = names.iter().enumerate().filter(|(_, n)| **n == wanted);
        let first = hits.next().map(|(i, _)| i).ok_or_else(|| EapoError::Parse {
            row: 0,
            message: format!("column '{wanted}' not found in header"),
        })?;
        if hits.next().is_some() {
            return Err(EapoError::Parse {
                row: 0,
                message: format!("column '{wanted}' appears more than once"),
            });
        }
        Ok(first)
    };

    let feature_cols: Vec<usize> = schema
        .feature_columns
        .iter()
        .map(|n| column_of(n))
        .collect::<Result<_>>()?;
    let target_col = column_of(schema.target.name())?;
    let dim = feature_cols.len();

    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(schema.delimiter).map(str::trim).collect();
        if cells.len() != names.len() {
            return Err(EapoError::Parse {
                row,
                message: format!("expected {} cells, found {}", names.len(), cells.len()),
            });
        }
        let parse_cell = |col: usize| -> Result<f64> {
            let raw = cells[col];
            let v: f64 = raw.parse().map_err(|_| EapoError::Parse {
                row,
                message: format!("cell '{raw}' in column '{}' is not numeric", names[col]),
            })?;
            if !v.is_finite() {
                return Err(EapoError::Parse {
                    row,
                    message: format!("cell '{raw}' in column '{}' is not finite", names[col]),
                });
            }
            Ok(v)
        };
        let features: Vec<f64> = feature_cols
            .iter()
            .map(|&c| parse_cell(c))
            .collect::<Result<_>>()?;
        let (label, intensity) = match &schema.target {
            TargetColumn::Label(_) => {
                let v = parse_cell(target_col)?;
                if v != 0.0 && v != 1.0 {
                    return Err(EapoError::Parse {
                        row,
                        message: format!("label '{v}' is not 0 or 1"),
                    });
                }
                (v as u8, None)
            }
            TargetColumn::DryMatter(_) => {
                let dm = parse_cell(target_col)?;
                if dm < 0.0 {
                    return Err(EapoError::Parse {
                        row,
                        message: format!("negative dry matter {dm}"),
                    });
                }
                if dm > 0.0 {
                    (1, Some(dm))
                } else {
                    (0, None)
                }
            }
        };
        records.push(Record {
            features,
            label,
            intensity,
            index: records.len(),
        });
    }
    Dataset::new(dim, records)
}

/// Per-feature affine transform fitted on a training set: subtract the mean,
/// divide by the population standard deviation. Constant features (zero
/// train std) map to 0 so the Euclidean metric downstream stays defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    means: Vec<f64>,
    stds: Vec<f64>,
    constant_mask: Vec<bool>,
}

impl Standardizer {
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.is_empty() {
            return Err(EapoError::EmptyDataset);
        }
        let d = train.dim();
        let n = train.len() as f64;
        let mut means = vec![0.0; d];
        for rec in train.records() {
            for (m, v) in means.iter_mut().zip(&rec.features) {
                *m += v;
            }
        }
        for m in &mut means {
            *m /= n;
        }
        let mut vars = vec![0.0; d];
        for rec in train.records() {
            for ((s, v), m) in vars.iter_mut().zip(&rec.features).zip(&means) {
                let dv = v - m;
                *s += dv * dv;
            }
        }
        let stds: Vec<f64> = vars.iter().map(|v| (v / n).sqrt()).collect();
        let constant_mask: Vec<bool> = stds.iter().map(|&s| s == 0.0).collect();
        Ok(Self {
            means,
            stds,
            constant_mask,
        })
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }

    pub fn constant_mask(&self) -> &[bool] {
        &self.constant_mask
    }

    /// Transform one feature vector.
    pub fn apply_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(EapoError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(x.iter()
            .enumerate()
            .map(|(i, v)| {
                if self.constant_mask[i] {
                    0.0
                } else {
                    (v - self.means[i]) / self.stds[i]
                }
            })
            .collect())
    }

    /// Transform every record, preserving labels, intensities, and indices.
    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.dim() != self.dim() {
            return Err(EapoError::DimensionMismatch {
                expected: self.dim(),
                got: ds.dim(),
            });
        }
        let records = ds
            .records()
            .iter()
            .map(|rec| {
                Ok(Record {
                    features: self.apply_features(&rec.features)?,
                    ..rec.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(ds.dim(), records)
    }
}

/// Configuration of the synthetic long-tail covariate-shift benchmark.
///
/// Features are class-conditional isotropic Gaussians: negatives centered at
/// the origin, positives at distance `class_separation` along a fixed unit
/// direction. Test records are additionally translated by a fixed vector of
/// norm `shift_magnitude`, leaving label geometry relative to the class
/// means unchanged. Positive intensities are log-normal,
/// `exp(Normal(intensity_log_mean, intensity_log_std))`, with the normal
/// variate taken from the record's feature noise along the class direction
/// so that stronger events sit further into the positive region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub positive_rate: f64,
    pub shift_magnitude: f64,
    pub class_separation: f64,
    pub intensity_log_mean: f64,
    pub intensity_log_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            dim: 12,
            n_train: 20_000,
            n_test: 5_000,
            positive_rate: 0.05,
            shift_magnitude: 2.0,
            class_separation: 3.0,
            // Centered near 10^8 on the log10 scale, half a decade spread.
            intensity_log_mean: 8.0 * std::f64::consts::LN_10,
            intensity_log_std: 0.5 * std::f64::consts::LN_10,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(EapoError::InvalidConfig("dim must be positive".into()));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(EapoError::InvalidConfig(
                "n_train and n_test must be positive".into(),
            ));
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return Err(EapoError::InvalidConfig(format!(
                "positive_rate must lie strictly in (0, 1), got {}",
                self.positive_rate
            )));
        }
        if !(self.shift_magnitude.is_finite() && self.shift_magnitude >= 0.0) {
            return Err(EapoError::InvalidConfig(
                "shift_magnitude must be a nonnegative real".into(),
            ));
        }
        if !(self.class_separation.is_finite() && self.class_separation > 0.0) {
            return Err(EapoError::InvalidConfig(
                "class_separation must be positive".into(),
            ));
        }
        if !self.intensity_log_mean.is_finite()
            || !(self.intensity_log_std.is_finite() && self.intensity_log_std >= 0.0)
        {
            return Err(EapoError::InvalidConfig(
                "intensity parameters must be finite (std nonnegative)".into(),
            ));
        }
        Ok(())
    }
}

/// Unit direction from the negative to the positive class mean.
fn class_direction(dim: usize) -> Vec<f64> {
    let v = 1.0 / (dim as f64).sqrt();
    vec![v; dim]
}

/// Fixed unit direction of the test-time translation: along the class-mean
/// axis, so the test cloud slides into the region a model trained on the
/// historical distribution extrapolates worst while label geometry relative
/// to the class means stays intact.
fn shift_direction(dim: usize) -> Vec<f64> {
    class_direction(dim)
}

fn synth_split(
    rng: &mut ChaCha8Rng,
    cfg: &SyntheticConfig,
    n: usize,
    translation: &[f64],
) -> Result<Dataset> {
    let dir = class_direction(cfg.dim);
    let mut records = Vec::with_capacity(n);
    for index in 0..n {
        let label = u8::from(rng.random::<f64>() < cfg.positive_rate);
        let mut noise_along_class = 0.0;
        let mut features = Vec::with_capacity(cfg.dim);
        for j in 0..cfg.dim {
            let eps: f64 = rng.sample(StandardNormal);
            noise_along_class += dir[j] * eps;
            let class_mean = if label == 1 {
                cfg.class_separation * dir[j]
            } else {
                0.0
            };
            features.push(class_mean + eps + translation[j]);
        }
        let intensity = (label == 1)
            .then(|| (cfg.intensity_log_mean + cfg.intensity_log_std * noise_along_class).exp());
        records.push(Record {
            features,
            label,
            intensity,
            index,
        });
    }
    Dataset::new(cfg.dim, records)
}

/// Generate a (train, test) pair, fully determined by `cfg.seed`. The test
/// translation is applied after all random draws, so varying only
/// `shift_magnitude` changes test features by exactly a constant vector.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let zero = vec![0.0; cfg.dim];
    let train = synth_split(&mut rng, cfg, cfg.n_train, &zero)?;
    let shift: Vec<f64> = shift_direction(cfg.dim)
        .into_iter()
        .map(|v| v * cfg.shift_magnitude)
        .collect();
    let test = synth_split(&mut rng, cfg, cfg.n_test, &shift)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_temp(contents: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.csv");
        fs::write(&path, contents).unwrap();
        (dir, path)
    }

    fn dm_schema(features: &[&str]) -> TableSchema {
        TableSchema {
            feature_columns: features.iter().map(|s| s.to_string()).collect(),
            target: TargetColumn::DryMatter("dm".into()),
            delimiter: ',',
        }
    }

    #[test]
    fn load_dm_table() {
        let (_d, path) = write_temp("a,b,dm\n1.0,2.0,0.0\n3.0,4.0,3.5e8\n");
        let ds = load_table(&path, &dm_schema(&["a", "b"])).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.positive_count(), 1);
        assert_eq!(ds.records()[0].label, 0);
        assert_eq!(ds.records()[0].intensity, None);
        assert_eq!(ds.records()[1].label, 1);
        assert_eq!(ds.records()[1].intensity, Some(3.5e8));
    }

    #[test]
    fn load_reports_bad_rows() {
        let (_d, path) = write_temp("a,b,dm\n1.0,NaN,0.0\n");
        let err = load_table(&path, &dm_schema(&["a", "b"])).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");

        let (_d, path) = write_temp("a,b,dm\n1.0,2.0,0.0\n1.0,0.5,-3.0\n");
        let err = load_table(&path, &dm_schema(&["a", "b"])).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
        assert!(err.to_string().contains("negative dry matter"), "{err}");

        let (_d, path) = write_temp("a,b,dm\n1.0,2.0\n");
        let err = load_table(&path, &dm_schema(&["a", "b"])).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }

    #[test]
    fn load_rejects_duplicate_header_columns() {
        let (_d, path) = write_temp("a,a,dm\n1.0,2.0,0.0\n");
        let err = load_table(&path, &dm_schema(&["a", "b"])).unwrap_err();
        assert!(err.to_string().contains("more than once") || err.to_string().contains("not found"));
    }

    #[test]
    fn load_missing_file_is_io_error() {
        let schema = dm_schema(&["a"]);
        assert!(matches!(
            load_table(Path::new("/nonexistent/t.csv"), &schema),
            Err(EapoError::Io { .. })
        ));
    }

    #[test]
    fn label_table_rejects_non_binary() {
        let schema = TableSchema {
            feature_columns: vec!["a".into()],
            target: TargetColumn::Label("y".into()),
            delimiter: ',',
        };
        let (_d, path) = write_temp("a,y\n1.0,2\n");
        assert!(load_table(&path, &schema).is_err());
    }

    #[test]
    fn export_then_load_is_identity() {
        let cfg = SyntheticConfig {
            n_train: 80,
            n_test: 10,
            ..Default::default()
        };
        let (train, _) = generate_synthetic(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roundtrip.csv");
        let schema = train.export_table(&path, ',').unwrap();
        let reloaded = load_table(&path, &schema).unwrap();
        assert_eq!(train, reloaded);
    }

    #[test]
    fn export_label_mode_when_no_intensities() {
        let records = vec![
            Record {
                features: vec![1.0],
                label: 0,
                intensity: None,
                index: 0,
            },
            Record {
                features: vec![2.0],
                label: 1,
                intensity: None,
                index: 1,
            },
        ];
        let ds = Dataset::new(1, records).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        let schema = ds.export_table(&path, ',').unwrap();
        assert!(matches!(schema.target, TargetColumn::Label(_)));
        assert_eq!(load_table(&path, &schema).unwrap(), ds);
    }

    #[test]
    fn dataset_rejects_invalid_records() {
        // label 1 with nonpositive intensity
        let bad = vec![Record {
            features: vec![1.0],
            label: 1,
            intensity: Some(0.0),
            index: 0,
        }];
        assert!(Dataset::new(1, bad).is_err());
        // label 0 with positive intensity
        let bad = vec![Record {
            features: vec![1.0],
            label: 0,
            intensity: Some(2.0),
            index: 0,
        }];
        assert!(Dataset::new(1, bad).is_err());
        // sparse indices
        let bad = vec![Record {
            features: vec![1.0],
            label: 0,
            intensity: None,
            index: 5,
        }];
        assert!(Dataset::new(1, bad).is_err());
    }

    #[test]
    fn standardizer_single_record_is_all_constant() {
        let ds = Dataset::new(
            2,
            vec![Record {
                features: vec![3.0, -1.0],
                label: 0,
                intensity: None,
                index: 0,
            }],
        )
        .unwrap();
        let s = Standardizer::fit(&ds).unwrap();
        assert_eq!(s.stds(), &[0.0, 0.0]);
        assert_eq!(s.constant_mask(), &[true, true]);
        let out = s.apply(&ds).unwrap();
        assert_eq!(out.features(0), &[0.0, 0.0]);
    }

    #[test]
    fn standardizer_population_std() {
        let recs = [1.0, 3.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| Record {
                features: vec![v],
                label: 0,
                intensity: None,
                index: i,
            })
            .collect();
        let ds = Dataset::new(1, recs).unwrap();
        let s = Standardizer::fit(&ds).unwrap();
        assert_eq!(s.means(), &[2.0]);
        assert_eq!(s.stds(), &[1.0]);
        let s2 = Standardizer::fit(&ds).unwrap();
        assert_eq!(s, s2);
    }

    #[test]
    fn standardizer_direct_arithmetic() {
        let s = Standardizer {
            means: vec![2.0],
            stds: vec![1.0],
            constant_mask: vec![false],
        };
        assert_eq!(s.apply_features(&[5.0]).unwrap(), vec![3.0]);
        assert!(s.apply_features(&[5.0, 6.0]).is_err());
    }

    #[test]
    fn standardized_fit_set_has_zero_mean_unit_std() {
        let cfg = SyntheticConfig {
            n_train: 500,
            n_test: 10,
            seed: 3,
            ..Default::default()
        };
        let (train, _) = generate_synthetic(&cfg).unwrap();
        let s = Standardizer::fit(&train).unwrap();
        let z = s.apply(&train).unwrap();
        let refit = Standardizer::fit(&z).unwrap();
        for i in 0..z.dim() {
            assert!(refit.means()[i].abs() < 1e-9);
            assert!((refit.stds()[i] - 1.0).abs() < 1e-9);
        }
        // Labels, intensities, indices preserved.
        for (a, b) in train.records().iter().zip(z.records()) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.intensity, b.intensity);
            assert_eq!(a.index, b.index);
        }
    }

    #[test]
    fn fit_on_empty_dataset_fails() {
        let ds = Dataset::new(2, vec![]).unwrap();
        assert!(matches!(
            Standardizer::fit(&ds),
            Err(EapoError::EmptyDataset)
        ));
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let cfg = SyntheticConfig {
            n_train: 300,
            n_test: 100,
            ..Default::default()
        };
        let (a_train, a_test) = generate_synthetic(&cfg).unwrap();
        let (b_train, b_test) = generate_synthetic(&cfg).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);
    }

    #[test]
    fn synthetic_positive_fraction_concentrates() {
        let cfg = SyntheticConfig {
            n_train: 100_000,
            n_test: 10,
            ..Default::default()
        };
        let (train, _) = generate_synthetic(&cfg).unwrap();
        let frac = train.positive_count() as f64 / train.len() as f64;
        assert!((0.045..=0.055).contains(&frac), "fraction {frac}");
    }

    #[test]
    fn zero_shift_means_agree() {
        let cfg = SyntheticConfig {
            n_train: 5_000,
            n_test: 5_000,
            shift_magnitude: 0.0,
            seed: 11,
            ..Default::default()
        };
        let (train, test) = generate_synthetic(&cfg).unwrap();
        for j in 0..cfg.dim {
            let stats = |ds: &Dataset| {
                let n = ds.len() as f64;
                let mean = ds.records().iter().map(|r| r.features[j]).sum::<f64>() / n;
                let var = ds
                    .records()
                    .iter()
                    .map(|r| (r.features[j] - mean).powi(2))
                    .sum::<f64>()
                    / n;
                (mean, var, n)
            };
            let (m_tr, v_tr, n_tr) = stats(&train);
            let (m_te, v_te, n_te) = stats(&test);
            let se = (v_tr / n_tr + v_te / n_te).sqrt();
            assert!(
                (m_tr - m_te).abs() <= 4.0 * se,
                "feature {j}: {m_tr} vs {m_te}, se {se}"
            );
        }
    }

    #[test]
    fn shift_is_a_constant_translation() {
        let base = SyntheticConfig {
            n_train: 50,
            n_test: 50,
            shift_magnitude: 0.0,
            ..Default::default()
        };
        let shifted = SyntheticConfig {
            shift_magnitude: 2.5,
            ..base.clone()
        };
        let (_, test_a) = generate_synthetic(&base).unwrap();
        let (_, test_b) = generate_synthetic(&shifted).unwrap();
        let delta: Vec<f64> = test_b.features(0)
            .iter()
            .zip(test_a.features(0))
            .map(|(b, a)| b - a)
            .collect();
        let norm: f64 = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 2.5).abs() < 1e-9);
        for i in 1..test_a.len() {
            for (j, &dj) in delta.iter().enumerate() {
                let d = test_b.features(i)[j] - test_a.features(i)[j];
                assert!((d - dj).abs() < 1e-9);
            }
        }
        // Labels and intensities identical across the pair.
        for (a, b) in test_a.records().iter().zip(test_b.records()) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.intensity, b.intensity);
        }
    }

    #[test]
    fn label_intensity_invariant_holds() {
        let (train, test) = generate_synthetic(&SyntheticConfig {
            n_train: 2_000,
            n_test: 500,
            ..Default::default()
        })
        .unwrap();
        for rec in train.records().iter().chain(test.records()) {
            match rec.label {
                1 => assert!(rec.intensity.is_some_and(|v| v > 0.0)),
                _ => assert!(rec.intensity.is_none()),
            }
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = SyntheticConfig {
            positive_rate: 0.0,
            ..Default::default()
        };
        assert!(generate_synthetic(&bad).is_err());
        let bad = SyntheticConfig {
            positive_rate: 1.0,
            ..Default::default()
        };
        assert!(generate_synthetic(&bad).is_err());
    }
}
