//! Datasets: seeded synthetic generators and CSV ingestion.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{argument, Error, Result};
use crate::nn::Tensor;
use crate::rng::{self, Purpose};
use rand::seq::SliceRandom;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

/// Features, class labels and a fixed train/test assignment per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub split: Vec<Split>,
    pub classes: usize,
}

/// One split materialized as a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Subset {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Subset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn batch(&self, rows: &[usize]) -> Subset {
        Subset {
            x: self.x.select_rows(rows),
            y: rows.iter().map(|&r| self.y[r]).collect(),
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rows(&self, which: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == which).collect()
    }

    pub fn subset(&self, which: Split) -> Subset {
        let rows = self.rows(which);
        Subset {
            x: self.features.select_rows(&rows),
            y: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    pub fn train(&self) -> Subset {
        self.subset(Split::Train)
    }

    pub fn test(&self) -> Subset {
        self.subset(Split::Test)
    }

    /// Center every column and divide by its standard deviation, both taken
    /// over the training rows only. Zero-variance columns divide by 1.
    pub fn standardize(&mut self) {
        let cols = self.features.cols();
        let train = self.rows(Split::Train);
        if train.is_empty() {
            return;
        }
        let n = train.len() as f64;
        for c in 0..cols {
            let mean = train.iter().map(|&r| self.features.row(r)[c]).sum::<f64>() / n;
            let var = train
                .iter()
                .map(|&r| (self.features.row(r)[c] - mean).powi(2))
                .sum::<f64>()
                / n;
            let std = if var > 0.0 { var.sqrt() } else { 1.0 };
            let data = self.features.data_mut();
            for r in 0..self.labels.len() {
                let v = &mut data[r * cols + c];
                *v = (*v - mean) / std;
            }
        }
    }
}

/// Shuffle row indices with `seed` and mark the first `test_fraction` as test.
pub fn assign_split(n: usize, test_fraction: f64, seed: u64) -> Result<Vec<Split>> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(argument(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Data, 1));
    let n_test = (n as f64 * test_fraction).round() as usize;
    let mut split = vec![Split::Train; n];
    for &i in &order[..n_test] {
        split[i] = Split::Test;
    }
    Ok(split)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    /// Gaussian clusters centred on the unit circle.
    Blobs,
    /// Interleaved spiral arms with angular noise.
    Spirals,
}

impl SynthKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "blobs" => Some(SynthKind::Blobs),
            "spirals" => Some(SynthKind::Spirals),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Blobs => "blobs",
            SynthKind::Spirals => "spirals",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n: usize,
    pub classes: usize,
    /// Cluster standard deviation (blobs) or angular jitter in radians (spirals).
    pub noise: f64,
    /// Full turns of each spiral arm.
    pub turns: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn spirals(n: usize, classes: usize, noise: f64, seed: u64) -> Self {
        Self {
            kind: SynthKind::Spirals,
            n,
            classes,
            noise,
            turns: 1.0,
            test_fraction: 0.25,
            seed,
        }
    }

    pub fn blobs(n: usize, classes: usize, noise: f64, seed: u64) -> Self {
        Self {
            kind: SynthKind::Blobs,
            n,
            classes,
            noise,
            turns: 0.0,
            test_fraction: 0.25,
            seed,
        }
    }
}

/// Seeded synthetic 2-D classification data, labels assigned round-robin.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.n < spec.classes {
        return Err(argument(format!(
            "need at least one example per class ({} examples, {} classes)",
            spec.n, spec.classes
        )));
    }
    let mut r = rng::stream(spec.seed, Purpose::Data, 0);
    let tau = std::f64::consts::TAU;
    let k = spec.classes as f64;
    let mut data = Vec::with_capacity(spec.n * 2);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let c = i % spec.classes;
        let phase = tau * c as f64 / k;
        let (x, y) = match spec.kind {
            SynthKind::Blobs => (
                phase.cos() + spec.noise * rng::normal(&mut r),
                phase.sin() + spec.noise * rng::normal(&mut r),
            ),
            SynthKind::Spirals => {
                let t = rng::unit(&mut r);
                let radius = 0.1 + 0.9 * t;
                let angle = phase + tau * spec.turns * t + spec.noise * rng::normal(&mut r);
                (radius * angle.cos(), radius * angle.sin())
            }
        };
        data.push(x);
        data.push(y);
        labels.push(c);
    }
    let mut ds = Dataset {
        features: Tensor::matrix(spec.n, 2, data)?,
        labels,
        split: assign_split(spec.n, spec.test_fraction, spec.seed)?,
        classes: spec.classes,
    };
    ds.standardize();
    Ok(ds)
}

/// Load a headed CSV with numeric features and a label column.
///
/// Labels that are all non-negative integers are used as class indices;
/// otherwise the distinct label strings are numbered in sorted order. Rows in
/// errors are numbered from 1 for the first data row, columns from 1.
pub fn load_csv(path: &Path, label_column: &str, test_fraction: f64, seed: u64) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_error)?;
    let headers = reader.headers().map_err(csv_error)?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| argument(format!("label column '{label_column}' not found")))?;
    let width = headers.len() - 1;

    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| Error::Parse { row, column: 0, message: e.to_string() })?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row,
                column: record.len().min(headers.len()) + 1,
                message: format!("expected {} cells, found {}", headers.len(), record.len()),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            if c == label_idx {
                raw_labels.push(cell.to_string());
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: c + 1,
                message: format!("'{cell}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { row, column: c + 1, message: "non-finite value".into() });
            }
            features.push(v);
        }
    }
    if raw_labels.is_empty() {
        return Err(argument("CSV has no data rows"));
    }
    let (labels, classes) = encode_labels(&raw_labels);
    let n = labels.len();
    let mut ds = Dataset {
        features: Tensor::matrix(n, width, features)?,
        labels,
        split: assign_split(n, test_fraction, seed)?,
        classes,
    };
    ds.standardize();
    Ok(ds)
}

fn encode_labels(raw: &[String]) -> (Vec<usize>, usize) {
    if let Ok(ints) = raw.iter().map(|s| s.parse::<usize>()).collect::<Result<Vec<_>, _>>() {
        let classes = ints.iter().max().map_or(0, |m| m + 1);
        return (ints, classes);
    }
    let names: BTreeSet<&str> = raw.iter().map(String::as_str).collect();
    let names: Vec<&str> = names.into_iter().collect();
    let labels = raw
        .iter()
        .map(|s| names.binary_search(&s.as_str()).expect("label present"))
        .collect();
    (labels, names.len())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse { row: 0, column: 0, message: format!("{other:?}") },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_shape() {
        let f = write_tmp("a,b,label\n1,2,0\n3,4,1\n5,6,0\n");
        let ds = load_csv(f.path(), "label", 0.0, 1).unwrap();
        assert_eq!(ds.features.shape(), &[3, 2]);
        assert_eq!(ds.labels, vec![0, 1, 0]);
        assert_eq!(ds.classes, 2);
        // standardized over the (all-train) rows
        assert!((ds.features.row(1)[0]).abs() < 1e-12);
    }

    #[test]
    fn csv_bad_cell_names_row() {
        let f = write_tmp("a,b,label\n1,2,0\n3,x,1\n");
        match load_csv(f.path(), "label", 0.0, 1) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (2, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_missing_label_column() {
        let f = write_tmp("a,b\n1,2\n");
        assert!(matches!(load_csv(f.path(), "label", 0.0, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn csv_constant_column_stays_zero() {
        let f = write_tmp("a,b,label\n7,1,cat\n7,2,dog\n7,3,cat\n");
        let ds = load_csv(f.path(), "label", 0.0, 1).unwrap();
        assert!((0..3).all(|r| ds.features.row(r)[0] == 0.0));
        assert_eq!(ds.labels, vec![0, 1, 0]);
    }

    #[test]
    fn zero_noise_blobs_are_separable() {
        let ds = synth_dataset(&SynthSpec::blobs(300, 3, 0.0, 4)).unwrap();
        // every point sits exactly on its class centre
        for c in 0..3 {
            let pts: Vec<&[f64]> = (0..ds.len()).filter(|&i| ds.labels[i] == c).map(|i| ds.features.row(i)).collect();
            assert!(pts.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let s = SynthSpec::spirals(500, 2, 0.1, 9);
        assert_eq!(synth_dataset(&s).unwrap(), synth_dataset(&s).unwrap());
        let other = SynthSpec { seed: 10, ..s };
        assert_ne!(synth_dataset(&other).unwrap(), synth_dataset(&SynthSpec::spirals(500, 2, 0.1, 9)).unwrap());
    }

    #[test]
    fn split_fraction() {
        let ds = synth_dataset(&SynthSpec::spirals(1000, 2, 0.1, 1)).unwrap();
        assert_eq!(ds.test().len(), 250);
        assert_eq!(ds.train().len(), 750);
        assert!(synth_dataset(&SynthSpec::spirals(1, 2, 0.1, 1)).is_err());
    }
}
