//! Series ingestion, train/validation/test splitting and windowing.

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

/// Errors raised while loading or slicing series.
#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("column '{0}' not present in header")]
    ColumnMissing(String),
    #[error("row {0}: value is missing or not a finite number")]
    ParseError(usize),
    #[error("series is empty")]
    Empty,
    #[error("series contains a non-finite value at position {0}")]
    NonFinite(usize),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("{split} split has {len} points but a window needs {needed}")]
    SplitTooSmall {
        split: &'static str,
        len: usize,
        needed: usize,
    },
    #[error("series of length {len} is shorter than one window ({needed})")]
    SeriesTooShort { len: usize, needed: usize },
    #[error("window geometry must be positive (sl={sl}, fl={fl}, stride={stride})")]
    InvalidGeometry { sl: usize, fl: usize, stride: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// A univariate series in time order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub name: String,
    /// Informational only, e.g. "1 hour".
    pub resolution: String,
    values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Result<Self, DataError> {
        if values.is_empty() {
            return Err(DataError::Empty);
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite(pos));
        }
        Ok(Self {
            name: name.into(),
            resolution: String::new(),
            values,
        })
    }

    pub fn with_resolution(mut self, resolution: impl Into<String>) -> Self {
        self.resolution = resolution.into();
        self
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn slice(&self, range: std::ops::Range<usize>, suffix: &str) -> TimeSeries {
        TimeSeries {
            name: format!("{}/{}", self.name, suffix),
            resolution: self.resolution.clone(),
            values: self.values[range].to_vec(),
        }
    }
}

/// Reads one numeric column from a headered CSV file.
///
/// Row indices in [`DataError::ParseError`] count data rows from zero (the
/// header is not counted). Blank or non-numeric cells are errors.
pub fn load_series(path: impl AsRef<Path>, column: &str) -> Result<TimeSeries, DataError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(DataError::FileNotFound(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(File::open(path)?);
    let col = reader
        .headers()?
        .iter()
        .position(|h| h.trim() == column)
        .ok_or_else(|| DataError::ColumnMissing(column.to_string()))?;

    let mut values = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let value = record
            .get(col)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .and_then(|s| s.parse::<f64>().ok())
            .filter(|v| v.is_finite())
            .ok_or(DataError::ParseError(row))?;
        values.push(value);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    TimeSeries::new(format!("{name}:{column}"), values)
}

/// How a series is cut into train, validation and test parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitSpec {
    /// Each part receives `floor(fraction * len)` points; the test part takes
    /// whatever remains after train and validation.
    Fractions { train: f64, val: f64, test: f64 },
    /// Explicit boundaries: train is `[0, train_end)`, validation is
    /// `[train_end, val_end)` and test is `[val_end, len)`.
    Boundaries { train_end: usize, val_end: usize },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fractions {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitSpec {
    /// 12/4/4 months of hourly data.
    pub fn ett_hourly() -> Self {
        let month = 30 * 24;
        SplitSpec::Boundaries {
            train_end: 12 * month,
            val_end: 16 * month,
        }
    }

    /// 12/4/4 months of 15-minute data.
    pub fn ett_minutely() -> Self {
        let month = 30 * 24 * 4;
        SplitSpec::Boundaries {
            train_end: 12 * month,
            val_end: 16 * month,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        match *self {
            SplitSpec::Fractions { train, val, test } => {
                if [train, val, test]
                    .iter()
                    .any(|f| !f.is_finite() || !(0.0..=1.0).contains(f))
                {
                    return Err(DataError::InvalidSplit(
                        "fractions must lie in [0, 1]".into(),
                    ));
                }
                if (train + val + test - 1.0).abs() > 1e-9 {
                    return Err(DataError::InvalidSplit(format!(
                        "fractions sum to {}, expected 1",
                        train + val + test
                    )));
                }
            }
            SplitSpec::Boundaries { train_end, val_end } => {
                if train_end == 0 || val_end <= train_end {
                    return Err(DataError::InvalidSplit(format!(
                        "boundaries must be strictly increasing (0 < {train_end} < {val_end})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Realized `(train_end, val_end)` boundaries for a series of length `len`.
    pub fn boundaries(&self, len: usize) -> Result<(usize, usize), DataError> {
        self.validate()?;
        match *self {
            SplitSpec::Fractions { train, val, .. } => {
                let n_train = (train * len as f64).floor() as usize;
                let n_val = (val * len as f64).floor() as usize;
                Ok((n_train, (n_train + n_val).min(len)))
            }
            SplitSpec::Boundaries { train_end, val_end } => {
                if val_end >= len {
                    return Err(DataError::InvalidSplit(format!(
                        "validation boundary {val_end} leaves no test data in a series of length {len}"
                    )));
                }
                Ok((train_end, val_end))
            }
        }
    }
}

/// The three contiguous parts of a series.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: TimeSeries,
    pub val: TimeSeries,
    pub test: TimeSeries,
    pub train_end: usize,
    pub val_end: usize,
}

/// Cuts `ts` into train/validation/test slices, each of which must hold at
/// least one window of `window_len` points.
pub fn split_series(
    ts: &TimeSeries,
    spec: &SplitSpec,
    window_len: usize,
) -> Result<Splits, DataError> {
    let n = ts.len();
    let (train_end, val_end) = spec.boundaries(n)?;
    for (split, len) in [
        ("train", train_end),
        ("validation", val_end - train_end),
        ("test", n - val_end),
    ] {
        if len < window_len || len == 0 {
            return Err(DataError::SplitTooSmall {
                split,
                len,
                needed: window_len,
            });
        }
    }
    Ok(Splits {
        train: ts.slice(0..train_end, "train"),
        val: ts.slice(train_end..val_end, "val"),
        test: ts.slice(val_end..n, "test"),
        train_end,
        val_end,
    })
}

/// A borrowed (context, target) pair.
#[derive(Debug, Clone, Copy)]
pub struct Window<'a> {
    pub index: usize,
    pub start: usize,
    pub context: &'a [f64],
    pub target: &'a [f64],
}

/// Fixed-geometry windows over one split. Windows borrow from the owned
/// source values rather than copying them.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    source: Vec<f64>,
    sl: usize,
    fl: usize,
    stride: usize,
    count: usize,
}

impl WindowSet {
    pub fn sl(&self) -> usize {
        self.sl
    }

    pub fn fl(&self) -> usize {
        self.fl
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn source(&self) -> &[f64] {
        &self.source
    }

    pub fn start(&self, index: usize) -> usize {
        index * self.stride
    }

    pub fn get(&self, index: usize) -> Option<Window<'_>> {
        (index < self.count).then(|| {
            let start = self.start(index);
            let mid = start + self.sl;
            Window {
                index,
                start,
                context: &self.source[start..mid],
                target: &self.source[mid..mid + self.fl],
            }
        })
    }

    pub fn context(&self, index: usize) -> &[f64] {
        let start = self.start(index);
        &self.source[start..start + self.sl]
    }

    pub fn target(&self, index: usize) -> &[f64] {
        let start = self.start(index) + self.sl;
        &self.source[start..start + self.fl]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = Window<'_>> + '_ {
        (0..self.count).map(move |i| self.get(i).expect("index in range"))
    }
}

/// Slices `ts` into windows starting at `0, stride, 2*stride, ...`.
pub fn make_windows(
    ts: &TimeSeries,
    sl: usize,
    fl: usize,
    stride: usize,
) -> Result<WindowSet, DataError> {
    if sl == 0 || fl == 0 || stride == 0 {
        return Err(DataError::InvalidGeometry { sl, fl, stride });
    }
    let needed = sl + fl;
    if ts.len() < needed {
        return Err(DataError::SeriesTooShort {
            len: ts.len(),
            needed,
        });
    }
    Ok(WindowSet {
        source: ts.values().to_vec(),
        sl,
        fl,
        stride,
        count: (ts.len() - needed) / stride + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn series(values: Vec<f64>) -> TimeSeries {
        TimeSeries::new("t", values).unwrap()
    }

    fn write_csv(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_named_column() {
        let f = write_csv("date,OT,x\n2020,1.5,9\n2021,2.5,9\n2022,-3,9\n");
        let ts = load_series(f.path(), "OT").unwrap();
        assert_eq!(ts.values(), &[1.5, 2.5, -3.0]);
    }

    #[test]
    fn loads_single_row() {
        let f = write_csv("v\n5.0\n");
        assert_eq!(load_series(f.path(), "v").unwrap().values(), &[5.0]);
    }

    #[test]
    fn blank_cell_is_a_parse_error() {
        let mut body = String::from("a,v\n");
        for i in 0..10 {
            if i == 7 {
                body.push_str("x,\n");
            } else {
                body.push_str(&format!("x,{i}\n"));
            }
        }
        let f = write_csv(&body);
        assert!(matches!(
            load_series(f.path(), "v"),
            Err(DataError::ParseError(7))
        ));
    }

    #[test]
    fn missing_file_and_column() {
        assert!(matches!(
            load_series("/nonexistent/file.csv", "v"),
            Err(DataError::FileNotFound(_))
        ));
        let f = write_csv("a\n1\n");
        assert!(matches!(
            load_series(f.path(), "OT"),
            Err(DataError::ColumnMissing(_))
        ));
    }

    #[test]
    fn rejects_non_finite_values() {
        assert!(matches!(
            TimeSeries::new("x", vec![1.0, f64::NAN]),
            Err(DataError::NonFinite(1))
        ));
        assert!(matches!(
            TimeSeries::new("x", vec![]),
            Err(DataError::Empty)
        ));
    }

    #[test]
    fn split_exact_fractions() {
        let ts = series((0..100).map(f64::from).collect());
        let spec = SplitSpec::Fractions {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        };
        let s = split_series(&ts, &spec, 10).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (60, 20, 20));
    }

    #[test]
    fn split_etth1_length() {
        let ts = series(vec![0.0; 17420]);
        let spec = SplitSpec::Fractions {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        };
        let s = split_series(&ts, &spec, 608).unwrap();
        assert_eq!(
            (s.train.len(), s.val.len(), s.test.len()),
            (10452, 3484, 3484)
        );
    }

    #[test]
    fn degenerate_split_is_too_small() {
        let ts = series(vec![0.0; 10]);
        let spec = SplitSpec::Fractions {
            train: 1.0,
            val: 0.0,
            test: 0.0,
        };
        assert!(matches!(
            split_series(&ts, &spec, 2),
            Err(DataError::SplitTooSmall {
                split: "validation",
                ..
            })
        ));
    }

    #[test]
    fn invalid_split_specs() {
        let bad = SplitSpec::Fractions {
            train: 0.5,
            val: 0.2,
            test: 0.2,
        };
        assert!(bad.validate().is_err());
        let bad = SplitSpec::Boundaries {
            train_end: 10,
            val_end: 10,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn explicit_boundaries() {
        let ts = series((0..20_000).map(f64::from).collect());
        let s = split_series(&ts, &SplitSpec::ett_hourly(), 608).unwrap();
        assert_eq!((s.train_end, s.val_end), (8640, 11520));
        assert_eq!(s.test.values()[0], 11520.0);
    }

    #[test]
    fn window_count_boundaries() {
        let ts = series(vec![1.0; 608]);
        assert_eq!(make_windows(&ts, 512, 96, 1).unwrap().len(), 1);

        let ts = series((0..708).map(f64::from).collect());
        let w = make_windows(&ts, 512, 96, 50).unwrap();
        let starts: Vec<_> = w.iter().map(|w| w.start).collect();
        assert_eq!(starts, vec![0, 50, 100]);

        let ts = series(vec![1.0; 600]);
        assert!(matches!(
            make_windows(&ts, 512, 96, 1),
            Err(DataError::SeriesTooShort {
                len: 600,
                needed: 608
            })
        ));
    }

    proptest! {
        #[test]
        fn splits_concatenate_to_original(len in 30usize..400, tr in 0.2f64..0.6, va in 0.1f64..0.3) {
            let ts = series((0..len).map(|i| i as f64 * 0.5).collect());
            let spec = SplitSpec::Fractions { train: tr, val: va, test: 1.0 - tr - va };
            if let Ok(s) = split_series(&ts, &spec, 1) {
                let joined: Vec<f64> = s.train.values().iter()
                    .chain(s.val.values())
                    .chain(s.test.values())
                    .copied()
                    .collect();
                prop_assert_eq!(joined.as_slice(), ts.values());
            }
        }

        #[test]
        fn windows_match_source(len in 5usize..300, sl in 1usize..40, fl in 1usize..20, stride in 1usize..10) {
            prop_assume!(len >= sl + fl);
            let values: Vec<f64> = (0..len).map(|i| (i as f64).sin()).collect();
            let ts = series(values.clone());
            let w = make_windows(&ts, sl, fl, stride).unwrap();
            prop_assert_eq!(w.len(), (len - sl - fl) / stride + 1);
            for (i, win) in w.iter().enumerate() {
                prop_assert_eq!(win.index, i);
                prop_assert_eq!(win.start, i * stride);
                let joined: Vec<f64> = win.context.iter().chain(win.target).copied().collect();
                prop_assert_eq!(joined.as_slice(), &values[win.start..win.start + sl + fl]);
            }
        }
    }
}
