//! Footing load-test records, CSV exchange and the train/validation/test
//! protocols of both experiments.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const NUM_INPUTS: usize = 5;

pub const CSV_HEADER: [&str; 6] = [
    "B_m",
    "D_m",
    "L_over_B",
    "gamma_kN_m3",
    "phi_deg",
    "qu_kPa",
];

const FEATURE_NAMES: [&str; 6] = ["B", "D", "L/B", "gamma", "phi", "qu"];

/// One footing test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Footing width, m.
    pub b: f64,
    /// Embedment depth, m.
    pub d: f64,
    pub l_over_b: f64,
    /// Soil unit weight, kN/m³.
    pub unit_weight: f64,
    /// Internal friction angle, degrees.
    pub friction_angle: f64,
    /// Measured ultimate bearing capacity, kPa.
    pub qu: f64,
}

impl Sample {
    pub const fn new(
        b: f64,
        d: f64,
        l_over_b: f64,
        unit_weight: f64,
        friction_angle: f64,
        qu: f64,
    ) -> Self {
        Self {
            b,
            d,
            l_over_b,
            unit_weight,
            friction_angle,
            qu,
        }
    }

    pub fn inputs(&self) -> [f64; NUM_INPUTS] {
        [
            self.b,
            self.d,
            self.l_over_b,
            self.unit_weight,
            self.friction_angle,
        ]
    }

    fn fields(&self) -> [f64; 6] {
        [
            self.b,
            self.d,
            self.l_over_b,
            self.unit_weight,
            self.friction_angle,
            self.qu,
        ]
    }
}

// Gandhi (2003) model footing tests, in published order.
const GANDHI: [Sample; 50] = [
    Sample::new(0.0585, 0.029, 5.95, 15.7, 34.0, 58.5),
    Sample::new(0.0585, 0.058, 5.95, 17.1, 42.5, 211.0),
    Sample::new(0.094, 0.047, 6.0, 16.5, 39.5, 155.8),
    Sample::new(0.094, 0.094, 6.0, 17.1, 42.5, 279.6),
    Sample::new(0.152, 0.075, 5.95, 15.7, 34.0, 98.2),
    Sample::new(0.152, 0.15, 5.95, 17.1, 42.5, 400.6),
    Sample::new(0.094, 0.047, 1.0, 16.1, 37.0, 98.8),
    Sample::new(0.094, 0.094, 1.0, 17.1, 42.5, 295.6),
    Sample::new(0.152, 0.15, 1.0, 16.5, 39.5, 264.5),
    Sample::new(0.094, 0.047, 1.0, 15.7, 34.0, 67.7),
    Sample::new(0.152, 0.075, 5.95, 16.5, 39.5, 211.2),
    Sample::new(0.0585, 0.058, 5.95, 16.5, 39.5, 142.9),
    Sample::new(0.152, 0.15, 1.0, 17.1, 42.5, 423.6),
    Sample::new(0.152, 0.075, 1.0, 15.7, 34.0, 91.2),
    Sample::new(0.094, 0.047, 6.0, 16.1, 37.0, 104.8),
    Sample::new(0.0585, 0.029, 5.95, 16.1, 37.0, 82.5),
    Sample::new(0.094, 0.047, 6.0, 15.7, 34.0, 74.7),
    Sample::new(0.152, 0.15, 5.95, 16.8, 41.5, 342.5),
    Sample::new(0.094, 0.047, 6.0, 16.8, 41.5, 206.8),
    Sample::new(0.152, 0.075, 1.0, 16.1, 37.0, 135.2),
    Sample::new(0.094, 0.047, 1.0, 16.5, 39.5, 147.8),
    Sample::new(0.152, 0.15, 5.95, 16.1, 37.0, 176.4),
    Sample::new(0.0585, 0.029, 5.95, 16.8, 41.5, 157.5),
    Sample::new(0.152, 0.075, 1.0, 16.8, 41.5, 276.3),
    Sample::new(0.094, 0.094, 1.0, 16.8, 41.5, 253.6),
    Sample::new(0.0585, 0.029, 5.95, 16.5, 39.5, 121.5),
    Sample::new(0.094, 0.094, 6.0, 15.7, 34.0, 91.5),
    Sample::new(0.152, 0.15, 5.95, 15.7, 34.0, 122.3),
    Sample::new(0.094, 0.047, 1.0, 16.8, 41.5, 196.8),
    Sample::new(0.152, 0.075, 5.95, 16.8, 41.5, 285.3),
    Sample::new(0.094, 0.094, 6.0, 16.5, 39.5, 185.6),
    Sample::new(0.0585, 0.058, 5.95, 16.8, 41.5, 184.9),
    Sample::new(0.094, 0.094, 1.0, 15.7, 34.0, 90.5),
    Sample::new(0.152, 0.15, 1.0, 15.7, 34.0, 124.4),
    Sample::new(0.152, 0.15, 1.0, 16.8, 41.5, 361.5),
    Sample::new(0.0585, 0.058, 5.95, 15.7, 34.0, 70.91),
    Sample::new(0.152, 0.075, 5.95, 17.1, 42.5, 335.3),
    Sample::new(0.152, 0.15, 1.0, 16.1, 37.0, 182.4),
    Sample::new(0.094, 0.094, 1.0, 16.1, 37.0, 131.5),
    Sample::new(0.094, 0.094, 6.0, 16.8, 41.5, 244.6),
    Sample::new(0.0585, 0.029, 5.95, 17.1, 42.5, 180.5),
    Sample::new(0.094, 0.047, 6.0, 17.1, 42.5, 235.6),
    Sample::new(0.152, 0.15, 5.95, 16.5, 39.5, 254.5),
    Sample::new(0.094, 0.094, 1.0, 16.5, 39.5, 191.6),
    Sample::new(0.152, 0.075, 1.0, 16.5, 39.5, 201.2),
    Sample::new(0.0585, 0.058, 5.95, 16.1, 37.0, 98.93),
    Sample::new(0.094, 0.094, 6.0, 16.1, 37.0, 127.5),
    Sample::new(0.152, 0.075, 5.95, 16.1, 37.0, 143.3),
    Sample::new(0.094, 0.047, 1.0, 17.1, 42.5, 228.8),
    Sample::new(0.152, 0.075, 1.0, 17.1, 42.5, 325.3),
];

/// Zero-based positions (in `GANDHI`) of the six second-experiment
/// samples, in the order they are listed there. The last one is held out
/// for validation.
const EXPERIMENT2_ROWS: [usize; 6] = [0, 1, 3, 4, 8, 9];

/// Block sizes of the subsets A..F used by the first experiment.
pub const BLOCK_SIZES: [usize; 6] = [9, 9, 8, 8, 8, 8];
pub const BLOCK_LABELS: [char; 6] = ['A', 'B', 'C', 'D', 'E', 'F'];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            for (v, name) in s.fields().iter().zip(CSV_HEADER) {
                if !(v.is_finite() && *v > 0.0) {
                    return Err(Error::Parse {
                        path: "<memory>".into(),
                        row: i + 1,
                        column: name.into(),
                        message: format!("value {v} must be positive and finite"),
                    });
                }
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<Sample> {
        indices.iter().map(|&i| self.samples[i]).collect()
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for s in &self.samples {
            w.write_record(s.fields().iter().map(|v| v.to_string()))
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii csv")
    }

    /// Tab-separated rendering with shortest round-trip number formatting.
    pub fn to_table_string(&self) -> String {
        let mut out = CSV_HEADER.join("\t");
        out.push('\n');
        for s in &self.samples {
            let row: Vec<String> = s.fields().iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    /// Hex SHA-256 of the canonical CSV export.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_csv_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn embedded_gandhi() -> Dataset {
    Dataset {
        samples: GANDHI.to_vec(),
    }
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, &path.display().to_string())
}

/// Parses the dataset CSV schema. `source` labels errors.
pub fn parse_csv(text: &str, source: &str) -> Result<Dataset> {
    let rows = read_table(text, source, &CSV_HEADER)?;
    let samples = rows
        .into_iter()
        .map(|f| Sample::new(f[0], f[1], f[2], f[3], f[4], f[5]))
        .collect();
    let ds = Dataset::new(samples);
    ds.map_err(|e| match e {
        Error::Parse {
            row,
            column,
            message,
            ..
        } => Error::Parse {
            path: source.into(),
            row,
            column,
            message,
        },
        other => other,
    })
}

/// Reads feature rows for prediction. The target column is optional.
pub fn parse_feature_csv(text: &str, source: &str) -> Result<Vec<([f64; NUM_INPUTS], Option<f64>)>> {
    let with_target = text
        .lines()
        .next()
        .map(|h| h.trim_end_matches('\r').split(',').count() == CSV_HEADER.len())
        .unwrap_or(false);
    let header: &[&str] = if with_target {
        &CSV_HEADER
    } else {
        &CSV_HEADER[..NUM_INPUTS]
    };
    let rows = read_table(text, source, header)?;
    Ok(rows
        .into_iter()
        .map(|f| {
            let x = [f[0], f[1], f[2], f[3], f[4]];
            (x, with_target.then(|| f[5]))
        })
        .collect())
}

fn read_table(text: &str, source: &str, header: &[&str]) -> Result<Vec<Vec<f64>>> {
    let parse_err = |row: usize, column: &str, message: String| Error::Parse {
        path: source.into(),
        row,
        column: column.into(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let got = reader
        .headers()
        .map_err(|e| parse_err(0, "header", e.to_string()))?
        .clone();
    if got.iter().ne(header.iter().copied()) {
        return Err(parse_err(
            0,
            "header",
            format!("expected `{}`, found `{}`", header.join(","), got.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| parse_err(row, "*", e.to_string()))?;
        if record.len() != header.len() {
            return Err(parse_err(
                row,
                "*",
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        let mut values = Vec::with_capacity(header.len());
        for (field, name) in record.iter().zip(header) {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(row, name, format!("`{field}` is not a number")))?;
            if !(v.is_finite() && v > 0.0) {
                return Err(parse_err(row, name, format!("value {v} must be positive and finite")));
            }
            values.push(v);
        }
        out.push(values);
    }
    Ok(out)
}

/// Labeled contiguous blocks A..F.
#[derive(Debug, Clone, PartialEq)]
pub struct Blocks {
    pub blocks: [Vec<usize>; 6],
}

impl Blocks {
    pub fn block(&self, label: char) -> &[usize] {
        let i = BLOCK_LABELS
            .iter()
            .position(|&l| l == label)
            .expect("label in A..F");
        &self.blocks[i]
    }
}

pub fn partition_blocks(ds: &Dataset) -> Result<Blocks> {
    let expected: usize = BLOCK_SIZES.iter().sum();
    if ds.len() != expected {
        return Err(Error::Config(format!(
            "block partition needs {expected} samples, dataset has {}",
            ds.len()
        )));
    }
    let mut start = 0;
    let blocks = BLOCK_SIZES.map(|size| {
        let b: Vec<usize> = (start..start + size).collect();
        start += size;
        b
    });
    Ok(Blocks { blocks })
}

/// Disjoint index sets into a [`Dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitPlan {
    pub fn validate(&self, len: usize) -> Result<()> {
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::Config("split needs non-empty train and test sets".into()));
        }
        let mut seen = BTreeSet::new();
        for &i in self.train.iter().chain(&self.validation).chain(&self.test) {
            if i >= len || !seen.insert(i) {
                return Err(Error::Config(format!("index {i} out of range or repeated")));
            }
        }
        Ok(())
    }

    /// Training pool (train then validation), which the normalizer is fitted on.
    pub fn pool(&self) -> Vec<usize> {
        self.train.iter().chain(&self.validation).copied().collect()
    }
}

/// Number of blocks used for training in each first-experiment set; the
/// remaining blocks form the test set.
fn experiment1_training_blocks(set_number: usize) -> Result<usize> {
    match set_number {
        1..=5 => Ok(6 - set_number),
        _ => Err(Error::Config(format!("set number {set_number} not in 1..5"))),
    }
}

pub fn experiment1_split(ds: &Dataset, set_number: usize, seed: u64) -> Result<SplitPlan> {
    let n_train_blocks = experiment1_training_blocks(set_number)?;
    let blocks = partition_blocks(ds)?;
    let mut pool: Vec<usize> = blocks.blocks[..n_train_blocks].concat();
    let test: Vec<usize> = blocks.blocks[n_train_blocks..].concat();

    let n_val = ((0.2 * pool.len() as f64).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    let mut validation = pool[..n_val].to_vec();
    let mut train = pool[n_val..].to_vec();
    validation.sort_unstable();
    train.sort_unstable();
    Ok(SplitPlan {
        train,
        validation,
        test,
    })
}

pub fn experiment2_split(ds: &Dataset) -> Result<SplitPlan> {
    if ds.samples() != GANDHI {
        return Err(Error::Config(
            "the second-experiment split is defined on the embedded dataset only".into(),
        ));
    }
    let (train, validation) = EXPERIMENT2_ROWS.split_at(5);
    let test = (0..ds.len())
        .filter(|i| !EXPERIMENT2_ROWS.contains(i))
        .collect();
    Ok(SplitPlan {
        train: train.to_vec(),
        validation: validation.to_vec(),
        test,
    })
}

/// Per-feature min-max scaling to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub input_min: [f64; NUM_INPUTS],
    pub input_max: [f64; NUM_INPUTS],
    pub output_min: f64,
    pub output_max: f64,
}

impl Normalizer {
    pub fn fit(samples: &[Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("cannot fit a normalizer on no samples".into()));
        }
        let mut lo = [f64::INFINITY; 6];
        let mut hi = [f64::NEG_INFINITY; 6];
        for s in samples {
            for (k, v) in s.fields().into_iter().enumerate() {
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        for k in 0..6 {
            if !(hi[k] > lo[k]) {
                return Err(Error::DegenerateFeature(FEATURE_NAMES[k]));
            }
        }
        Ok(Self {
            input_min: [lo[0], lo[1], lo[2], lo[3], lo[4]],
            input_max: [hi[0], hi[1], hi[2], hi[3], hi[4]],
            output_min: lo[5],
            output_max: hi[5],
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self
            .input_min
            .iter()
            .zip(&self.input_max)
            .chain(std::iter::once((&self.output_min, &self.output_max)))
            .all(|(lo, hi)| lo.is_finite() && hi.is_finite() && hi > lo);
        if ok {
            Ok(())
        } else {
            Err(Error::Model("normalizer bounds must be finite with max > min".into()))
        }
    }

    pub fn transform_inputs(&self, x: &[f64; NUM_INPUTS]) -> [f64; NUM_INPUTS] {
        std::array::from_fn(|k| (x[k] - self.input_min[k]) / (self.input_max[k] - self.input_min[k]))
    }

    pub fn transform_output(&self, qu: f64) -> f64 {
        (qu - self.output_min) / (self.output_max - self.output_min)
    }

    pub fn inverse_output(&self, y_scaled: f64) -> f64 {
        self.output_min + y_scaled * (self.output_max - self.output_min)
    }

    /// Scaled `(inputs, target)` pair.
    pub fn transform(&self, s: &Sample) -> ([f64; NUM_INPUTS], f64) {
        (self.transform_inputs(&s.inputs()), self.transform_output(s.qu))
    }
}

pub fn fit_normalizer(ds: &Dataset) -> Result<Normalizer> {
    Normalizer::fit(ds.samples())
}
