use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Matrix;
use crate::error::{Error, Result};

/// How a numeric CSV is split and scaled.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularOptions {
    pub has_header: bool,
    /// `(train, val, test)` fractions summing to 1.
    pub split: [f64; 3],
    pub standardize: bool,
    /// Seed of the row shuffle.
    pub seed: u64,
}

impl Default for TabularOptions {
    fn default() -> Self {
        Self {
            has_header: false,
            split: [0.8, 0.1, 0.1],
            standardize: true,
            seed: 0,
        }
    }
}

/// Train/validation/test matrices, standardized with train statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub train: Matrix,
    pub val: Matrix,
    pub test: Matrix,
    /// Per-column train mean (zeros when not standardized).
    pub mean: Vec<f64>,
    /// Per-column train population std (ones when not standardized; constant columns keep 1).
    pub std: Vec<f64>,
}

impl TabularDataset {
    pub fn dim(&self) -> usize {
        self.train.cols()
    }

    pub fn standardize(&self, x: &Matrix) -> Result<Matrix> {
        self.map_cols(x, |v, m, s| (v - m) / s)
    }

    pub fn destandardize(&self, x: &Matrix) -> Result<Matrix> {
        self.map_cols(x, |v, m, s| v * s + m)
    }

    fn map_cols(&self, x: &Matrix, f: impl Fn(f64, f64, f64) -> f64) -> Result<Matrix> {
        if x.cols() != self.dim() {
            return Err(Error::shape(format!("expected {} columns, got {}", self.dim(), x.cols())));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = f(*v, self.mean[c], self.std[c]);
            }
        }
        Ok(out)
    }
}

/// Parse a comma-separated numeric table. Lines starting with `#` are ignored.
pub fn read_csv_matrix<R: Read>(reader: R, has_header: bool) -> Result<Matrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            location: format!("record {}", i + 1),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(i as u64 + 1, |p| p.line());
        let mut row = Vec::with_capacity(rec.len());
        for (c, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                location: format!("line {line}, column {}", c + 1),
                message: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    location: format!("line {line}, column {}", c + 1),
                    message: format!("`{cell}` is not finite"),
                });
            }
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    location: format!("line {line}"),
                    message: format!("expected {} columns, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::config("data.path", "the CSV file has no data rows"));
    }
    Matrix::from_rows(&rows)
}

/// Row counts for `n` rows split by `fracs`; the test split takes the remainder.
pub fn split_counts(n: usize, fracs: [f64; 3]) -> Result<[usize; 3]> {
    if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config("data.split", format!("split fractions must sum to 1, got {fracs:?}")));
    }
    let train = (fracs[0] * n as f64).round() as usize;
    let val = ((fracs[1] * n as f64).round() as usize).min(n.saturating_sub(train));
    let counts = [train, val, n - train - val];
    if counts.contains(&0) {
        return Err(Error::config("data.split", format!("split {counts:?} of {n} rows leaves an empty part")));
    }
    Ok(counts)
}

/// Load, shuffle, split and optionally standardize a numeric CSV.
pub fn load_tabular(path: &Path, opts: &TabularOptions) -> Result<TabularDataset> {
    let file = std::fs::File::open(path)?;
    let all = read_csv_matrix(file, opts.has_header)?;
    split_matrix(&all, opts)
}

/// Shuffle, split and optionally standardize an in-memory table.
pub fn split_matrix(all: &Matrix, opts: &TabularOptions) -> Result<TabularDataset> {
    let [n_train, n_val, _] = split_counts(all.rows(), opts.split)?;
    let mut order: Vec<usize> = (0..all.rows()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    let train = all.select_rows(&order[..n_train]);
    let val = all.select_rows(&order[n_train..n_train + n_val]);
    let test = all.select_rows(&order[n_train + n_val..]);
    let d = all.cols();
    let (mean, std) = if opts.standardize {
        column_stats(&train)
    } else {
        (vec![0.0; d], vec![1.0; d])
    };
    let mut ds = TabularDataset {
        train,
        val,
        test,
        mean,
        std,
    };
    if opts.standardize {
        ds.train = ds.standardize(&ds.train)?;
        ds.val = ds.standardize(&ds.val)?;
        ds.test = ds.standardize(&ds.test)?;
    }
    Ok(ds)
}

fn column_stats(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows() as f64;
    let d = x.cols();
    let mut mean = vec![0.0; d];
    for row in x.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0; d];
    for row in x.iter_rows() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 0.0 { sd } else { 1.0 }
        })
        .collect();
    (mean, std)
}

/// Write rows as CSV with 17 significant digits. `preamble` lines are written
/// first, each prefixed with `# `.
pub fn write_csv_matrix<W: Write>(
    mut out: W,
    preamble: &[String],
    header: &[&str],
    x: &Matrix,
    extra: Option<&[usize]>,
) -> Result<()> {
    for line in preamble {
        writeln!(out, "# {line}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    if !header.is_empty() {
        w.write_record(header).map_err(csv_io)?;
    }
    for (i, row) in x.iter_rows().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        if let Some(ids) = extra {
            rec.push(ids[i].to_string());
        }
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
