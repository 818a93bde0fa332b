//! Tabular data plumbing: CSV ingestion with a column schema, random
//! train/validation/test partitions, one-hot expansion of categorical
//! features, and the prediction-interval protocol for real datasets.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::experiments::ScheduleSpec;
use crate::inference::{prediction_interval, sample_moments, IntervalRecord};
use crate::sampler::generate_with;
use crate::training::{train_with_validation, TrainConfig, TrainedModel};

/// Categorical columns may not have more distinct levels than this.
pub const MAX_LEVELS: usize = 64;

/// Column roles by name, as written in a config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaSpec {
    pub target: Vec<String>,
    #[serde(default)]
    pub categorical: Vec<String>,
}

/// Column roles resolved against a header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub names: Vec<String>,
    pub target_columns: Vec<usize>,
    pub categorical_columns: Vec<usize>,
}

impl ColumnSchema {
    pub fn resolve(names: &[String], spec: &SchemaSpec) -> Result<Self> {
        let index = |name: &String| {
            names.iter().position(|n| n == name).ok_or_else(|| Error::Ingestion {
                row: 1,
                column: name.clone(),
                message: "column not found in header".into(),
            })
        };
        let target_columns = spec.target.iter().map(index).collect::<Result<Vec<_>>>()?;
        let categorical_columns = spec.categorical.iter().map(index).collect::<Result<Vec<_>>>()?;
        let schema = ColumnSchema {
            names: names.to_vec(),
            target_columns,
            categorical_columns,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_columns.is_empty() {
            return Err(Error::Config("schema needs at least one target column".into()));
        }
        let mut seen = vec![false; self.names.len()];
        for &c in self.target_columns.iter().chain(&self.categorical_columns) {
            if c >= self.names.len() {
                return Err(Error::Config(format!("column index {c} is out of range")));
            }
            if std::mem::replace(&mut seen[c], true) {
                return Err(Error::Config(format!(
                    "column {:?} appears in more than one role",
                    self.names[c]
                )));
            }
        }
        Ok(())
    }

    /// Columns that are neither targets nor categorical, in file order.
    pub fn feature_columns(&self) -> Vec<usize> {
        (0..self.names.len())
            .filter(|c| !self.target_columns.contains(c) && !self.categorical_columns.contains(c))
            .collect()
    }

    /// Numeric features and categorical columns in file order (the covariate layout).
    fn covariate_columns(&self) -> Vec<usize> {
        (0..self.names.len()).filter(|c| !self.target_columns.contains(c)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
}

impl Column {
    fn select(&self, rows: &[usize]) -> Column {
        match self {
            Column::Numeric(v) => Column::Numeric(rows.iter().map(|&i| v[i]).collect()),
            Column::Categorical(v) => Column::Categorical(rows.iter().map(|&i| v[i].clone()).collect()),
        }
    }
}

/// Parsed CSV contents; categorical cells stay strings until [`one_hot`].
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub schema: ColumnSchema,
    pub columns: Vec<Column>,
    rows: usize,
}

impl Table {
    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn select(&self, rows: &[usize]) -> Table {
        Table {
            schema: self.schema.clone(),
            columns: self.columns.iter().map(|c| c.select(rows)).collect(),
            rows: rows.len(),
        }
    }
}

/// Reads a headered CSV. Rows are numbered from 1 with the header as row 1.
pub fn load_csv<R: Read>(reader: R, spec: &SchemaSpec) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let names: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if names.is_empty() || names.iter().all(String::is_empty) {
        return Err(Error::Data("CSV header is empty".into()));
    }
    let schema = ColumnSchema::resolve(&names, spec)?;
    let mut columns: Vec<Column> = (0..names.len())
        .map(|c| {
            if schema.categorical_columns.contains(&c) {
                Column::Categorical(Vec::new())
            } else {
                Column::Numeric(Vec::new())
            }
        })
        .collect();
    let mut rows = 0;
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 2;
        if record.len() != names.len() {
            return Err(Error::Ingestion {
                row,
                column: names.get(record.len()).cloned().unwrap_or_else(|| names[names.len() - 1].clone()),
                message: format!("row has {} fields, header has {}", record.len(), names.len()),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            if cell.is_empty() {
                return Err(Error::Ingestion {
                    row,
                    column: names[c].clone(),
                    message: "missing value".into(),
                });
            }
            match &mut columns[c] {
                Column::Categorical(v) => v.push(cell.to_string()),
                Column::Numeric(v) => match cell.parse::<f64>() {
                    Ok(x) if x.is_finite() => v.push(x),
                    _ => {
                        return Err(Error::Ingestion {
                            row,
                            column: names[c].clone(),
                            message: format!("cannot parse {cell:?} as a finite number"),
                        })
                    }
                },
            }
        }
        rows += 1;
    }
    Ok(Table { schema, columns, rows })
}

pub fn load_csv_path(path: &Path, spec: &SchemaSpec) -> Result<Table> {
    load_csv(fs::File::open(path)?, spec)
}

/// Level-to-column mapping of each categorical column, ordered by first appearance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OneHotMapping {
    pub columns: Vec<(String, Vec<String>)>,
}

impl OneHotMapping {
    fn levels(&self, column: &str) -> Option<&[String]> {
        self.columns.iter().find(|(c, _)| c == column).map(|(_, l)| l.as_slice())
    }
}

/// Converts a table to a numeric dataset, expanding each categorical column
/// in place into indicator columns `name=level`. With `mapping` given, its
/// levels are reused and an unseen level is an error; otherwise the mapping is
/// learned from `table`.
pub fn one_hot(table: &Table, mapping: Option<&OneHotMapping>) -> Result<(Dataset, OneHotMapping)> {
    let schema = &table.schema;
    for &c in &schema.target_columns {
        if !matches!(table.columns[c], Column::Numeric(_)) {
            return Err(Error::Config(format!("target column {:?} must be numeric", schema.names[c])));
        }
    }
    let mut learned = OneHotMapping::default();
    let mut x_cols: Vec<Vec<f64>> = Vec::new();
    let mut x_names = Vec::new();
    for c in schema.covariate_columns() {
        let name = &schema.names[c];
        match &table.columns[c] {
            Column::Numeric(v) => {
                x_cols.push(v.clone());
                x_names.push(name.clone());
            }
            Column::Categorical(v) => {
                let levels: Vec<String> = match mapping {
                    Some(m) => m
                        .levels(name)
                        .ok_or_else(|| Error::Config(format!("mapping has no entry for column {name:?}")))?
                        .to_vec(),
                    None => {
                        let mut levels: Vec<String> = Vec::new();
                        for cell in v {
                            if !levels.contains(cell) {
                                levels.push(cell.clone());
                            }
                        }
                        levels
                    }
                };
                if levels.len() > MAX_LEVELS {
                    return Err(Error::Data(format!(
                        "column {name:?} has {} levels, more than {MAX_LEVELS}",
                        levels.len()
                    )));
                }
                let lookup: HashMap<&str, usize> = levels.iter().enumerate().map(|(k, l)| (l.as_str(), k)).collect();
                let mut block = vec![vec![0.0; table.len()]; levels.len()];
                for (i, cell) in v.iter().enumerate() {
                    let k = *lookup.get(cell.as_str()).ok_or_else(|| Error::UnseenLevel {
                        column: name.clone(),
                        level: cell.clone(),
                    })?;
                    block[k][i] = 1.0;
                }
                for level in &levels {
                    x_names.push(format!("{name}={level}"));
                }
                x_cols.extend(block);
                learned.columns.push((name.clone(), levels));
            }
        }
    }
    let n = table.len();
    let x = Array2::from_shape_fn((n, x_cols.len()), |(i, k)| x_cols[k][i]);
    let y = Array2::from_shape_fn((n, schema.target_columns.len()), |(i, k)| {
        match &table.columns[schema.target_columns[k]] {
            Column::Numeric(v) => v[i],
            Column::Categorical(_) => unreachable!("targets checked numeric"),
        }
    });
    let y_names = schema.target_columns.iter().map(|&c| schema.names[c].clone()).collect();
    let dataset = Dataset::with_names(x, y, x_names, y_names)?;
    Ok((dataset, learned))
}

/// Writes covariates then responses with their names; `load_csv` reads it back exactly.
pub fn write_csv<W: Write>(writer: W, dataset: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(dataset.x_names.iter().chain(&dataset.y_names))?;
    for i in 0..dataset.len() {
        w.write_record(dataset.x_row(i).iter().chain(dataset.y_row(i).iter()).map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    #[serde(default)]
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config(format!("split fractions must lie in [0, 1], got {parts:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must sum to 1, got {parts:?}")));
        }
        if !(self.train > 0.0) {
            return Err(Error::Config("train fraction must be positive".into()));
        }
        Ok(())
    }
}

/// Row indices of (train, val, test). Validation and test sizes are floored;
/// the remainder goes to train.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    let n_val = (spec.val * n as f64).floor() as usize;
    let n_test = (spec.test * n as f64).floor() as usize;
    let n_train = n - n_val - n_test;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok((order, val, test))
}

pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = split_indices(dataset.len(), spec)?;
    Ok((dataset.select(&a), dataset.select(&b), dataset.select(&c)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealDataConfig {
    pub schema: SchemaSpec,
    pub split: SplitSpec,
    #[serde(default)]
    pub train_config: TrainConfig,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(rename = "M")]
    pub m: usize,
    pub alpha: f64,
    /// Seed for the sampling stage.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RealDataOutcome {
    pub intervals: Vec<IntervalRecord>,
    pub coverage: f64,
    /// Generated samples, one row per test point, `M` columns.
    pub pools: Array2<f64>,
    pub actual: Vec<f64>,
    pub model: TrainedModel,
    pub mapping: OneHotMapping,
}

/// Trains on the train split (monitoring the validation split), then for every
/// test row draws `M` samples, builds the t-based prediction interval and
/// records whether the observed response falls inside.
pub fn real_data_run(table: &Table, config: &RealDataConfig) -> Result<RealDataOutcome> {
    if config.m < 2 {
        return Err(Error::Argument(format!("M must be at least 2 for a prediction interval, got {}", config.m)));
    }
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", config.alpha)));
    }
    if table.schema.target_columns.len() != 1 {
        return Err(Error::Config("the prediction-interval protocol needs exactly one target column".into()));
    }
    config.train_config.validate()?;
    let schedule = config.schedule.build(&config.train_config)?;
    let (train_idx, val_idx, test_idx) = split_indices(table.len(), &config.split)?;
    if test_idx.is_empty() {
        return Err(Error::Config("test split is empty".into()));
    }
    let (train_set, mapping) = one_hot(&table.select(&train_idx), None)?;
    let (val_set, _) = one_hot(&table.select(&val_idx), Some(&mapping))?;
    let (test_set, _) = one_hot(&table.select(&test_idx), Some(&mapping))?;
    let model = train_with_validation(&train_set, Some(&val_set), &config.train_config)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pools = Array2::zeros((test_set.len(), config.m));
    let mut intervals = Vec::with_capacity(test_set.len());
    let mut actual = Vec::with_capacity(test_set.len());
    let mut hits = 0usize;
    for i in 0..test_set.len() {
        let x = test_set.x_row(i).to_vec();
        let samples = generate_with(&model, &x, &schedule, config.m, rng.random(), Default::default())?;
        let moments = sample_moments(samples.view())?;
        let interval = prediction_interval(&moments, config.alpha, 0)?;
        let y = test_set.y[[i, 0]];
        let covered = interval.contains(y);
        hits += covered as usize;
        pools.row_mut(i).assign(&samples.column(0));
        actual.push(y);
        intervals.push(IntervalRecord {
            point_id: i,
            interval,
            covered: Some(covered),
        });
    }
    Ok(RealDataOutcome {
        coverage: hits as f64 / test_set.len() as f64,
        intervals,
        pools,
        actual,
        model,
        mapping,
    })
}

/// Long format `point_id,sample,value` for external density plots.
pub fn write_pools_csv<W: Write>(writer: W, pools: &Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["point_id", "sample", "value"])?;
    for (i, row) in pools.rows().into_iter().enumerate() {
        for (k, v) in row.iter().enumerate() {
            w.write_record([i.to_string(), k.to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_responses_csv<W: Write>(writer: W, actual: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["point_id", "y"])?;
    for (i, v) in actual.iter().enumerate() {
        w.write_record([i.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `contents` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn target(name: &str) -> SchemaSpec {
        SchemaSpec {
            target: vec![name.into()],
            categorical: vec![],
        }
    }

    #[test]
    fn minimal_file() {
        let table = load_csv("a,b\n1,2\n3,4".as_bytes(), &target("b")).unwrap();
        let (data, _) = one_hot(&table, None).unwrap();
        assert_eq!(data.x, array![[1.0], [3.0]]);
        assert_eq!(data.y, array![[2.0], [4.0]]);
        assert_eq!(data.x_names, vec!["a"]);
    }

    #[test]
    fn bad_cell_names_row_and_column() {
        let err = load_csv("a,b\nabc,2\n".as_bytes(), &target("b")).unwrap_err();
        match err {
            Error::Ingestion { row, column, .. } => assert_eq!((row, column.as_str()), (2, "a")),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(load_csv("a,b\n1,2\n3\n".as_bytes(), &target("b")).unwrap_err().exit_code(), 3);
        assert!(matches!(load_csv("a,b\n1,\n".as_bytes(), &target("b")), Err(Error::Ingestion { row: 2, .. })));
        assert!(matches!(load_csv("a,b\n1,nan\n".as_bytes(), &target("b")), Err(Error::Ingestion { .. })));
        assert!(matches!(load_csv("a,b\n1,2\n".as_bytes(), &target("c")), Err(Error::Ingestion { row: 1, .. })));
    }

    #[test]
    fn line_endings_do_not_matter() {
        let lf = load_csv("a,b\n1,2\n3.5,4\n".as_bytes(), &target("b")).unwrap();
        let crlf = load_csv("a,b\r\n1,2\r\n3.5,4\r\n".as_bytes(), &target("b")).unwrap();
        assert_eq!(lf, crlf);
    }

    #[test]
    fn overlapping_roles_rejected() {
        let spec = SchemaSpec {
            target: vec!["b".into()],
            categorical: vec!["b".into()],
        };
        assert!(matches!(load_csv("a,b\n1,2\n".as_bytes(), &spec), Err(Error::Config(_))));
        assert!(ColumnSchema::resolve(&["a".into()], &SchemaSpec::default()).is_err());
    }

    fn abalone_toy() -> Table {
        let text = "sex,len,rings\nM,0.4,10\nF,0.5,11\nI,0.2,5\nM,0.45,9\nI,0.25,6\nF,0.55,12\n";
        let spec = SchemaSpec {
            target: vec!["rings".into()],
            categorical: vec!["sex".into()],
        };
        load_csv(text.as_bytes(), &spec).unwrap()
    }

    #[test]
    fn one_hot_by_first_appearance() {
        let table = abalone_toy();
        assert_eq!(table.schema.feature_columns(), vec![1]);
        let (data, mapping) = one_hot(&table, None).unwrap();
        assert_eq!(data.x_names, vec!["sex=M", "sex=F", "sex=I", "len"]);
        assert_eq!(mapping.columns[0].1, vec!["M", "F", "I"]);
        assert_eq!(data.x.row(1).to_vec(), vec![0.0, 1.0, 0.0, 0.5]);
        for i in 0..data.len() {
            assert_eq!(data.x.row(i).iter().take(3).sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn one_hot_single_level_and_unseen() {
        let spec = SchemaSpec {
            target: vec!["y".into()],
            categorical: vec!["g".into()],
        };
        let table = load_csv("g,y\nA,1\nA,2\n".as_bytes(), &spec).unwrap();
        let (data, mapping) = one_hot(&table, None).unwrap();
        assert_eq!(data.x, array![[1.0], [1.0]]);
        let other = load_csv("g,y\nB,1\n".as_bytes(), &spec).unwrap();
        assert!(matches!(one_hot(&other, Some(&mapping)), Err(Error::UnseenLevel { .. })));
    }

    #[test]
    fn too_many_levels() {
        let mut text = String::from("g,y\n");
        for i in 0..=MAX_LEVELS {
            text.push_str(&format!("L{i},1\n"));
        }
        let spec = SchemaSpec {
            target: vec!["y".into()],
            categorical: vec!["g".into()],
        };
        assert!(one_hot(&load_csv(text.as_bytes(), &spec).unwrap(), None).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let spec = SplitSpec {
            train: 0.85,
            val: 0.0,
            test: 0.15,
            seed: 4,
        };
        let (a, b, c) = split_indices(10, &spec).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (9, 0, 1));
        assert_eq!(split_indices(10, &spec).unwrap(), (a, b, c));
        let all = SplitSpec {
            train: 1.0,
            val: 0.0,
            test: 0.0,
            seed: 1,
        };
        assert_eq!(split_indices(7, &all).unwrap().0.len(), 7);
        assert!(matches!(split_indices(0, &all), Err(Error::Data(_))));
        let bad = SplitSpec { train: 0.5, ..all.clone() };
        assert!(matches!(split_indices(7, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn csv_round_trip() {
        let data = Dataset::new(array![[0.1, -3.25e-7], [1e10, 2.0 / 3.0]], array![[std::f64::consts::PI], [-0.0]]).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &data).unwrap();
        let table = load_csv(buf.as_slice(), &target("y1")).unwrap();
        let (back, _) = one_hot(&table, None).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn real_data_rejects_single_sample() {
        let table = abalone_toy();
        let config = RealDataConfig {
            schema: SchemaSpec::default(),
            split: SplitSpec {
                train: 0.5,
                val: 0.0,
                test: 0.5,
                seed: 0,
            },
            train_config: TrainConfig::default(),
            schedule: ScheduleSpec::default(),
            m: 1,
            alpha: 0.05,
            seed: 0,
        };
        assert!(matches!(real_data_run(&table, &config), Err(Error::Argument(_))));
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "second");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
