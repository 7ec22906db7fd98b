//! Dense row-major matrices and the elementwise primitives the solvers build on.
//!
//! Object-scene data at the scale this crate targets (a few hundred objects by
//! tens of thousands of instances) fits comfortably in a dense `Vec<f64>`, and
//! the factor matrices are dense anyway, so there is no sparse storage. All
//! arithmetic is in `f64`.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::ops::{Index, IndexMut};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slope of the soft cap applied past saturation, chosen so the gradient never
/// dies entirely on saturated entries.
pub const SOFT_CAP_SLOPE: f64 = 0.01;

/// The crossover point of `min(x, 1 + SOFT_CAP_SLOPE * x)`: below it the
/// product passes through unchanged, above it only the residual slope remains.
pub fn soft_cap_kink() -> f64 {
    1.0 / (1.0 - SOFT_CAP_SLOPE)
}

/// Soft-capped value approximating Boolean saturation: `min(x, 1 + 0.01 x)`.
pub fn soft_cap(x: f64) -> f64 {
    x.min(1.0 + SOFT_CAP_SLOPE * x)
}

/// Derivative of [`soft_cap`]; the kink itself takes the left slope.
pub fn soft_cap_slope_at(x: f64) -> f64 {
    if x <= soft_cap_kink() {
        1.0
    } else {
        SOFT_CAP_SLOPE
    }
}

/// Dense real matrix in row-major order.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DenseMatrix({}x{})", self.rows, self.cols)?;
        if self.rows * self.cols <= 64 {
            for r in 0..self.rows {
                write!(f, "\n  {:?}", self.row(r))?;
            }
        }
        Ok(())
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(
                "DenseMatrix::from_vec",
                rows * cols,
                data.len(),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite matrix entry {bad}")));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(Error::invalid("ragged rows in matrix literal"));
        }
        Self::from_vec(n_rows, n_cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[f64]) {
        assert_eq!(values.len(), self.rows);
        for (r, v) in values.iter().enumerate() {
            self[(r, c)] = *v;
        }
    }

    /// Copies the given columns, in order, into a new matrix.
    pub fn select_columns(&self, indices: &[usize]) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, indices.len());
        for (dst, &src) in indices.iter().enumerate() {
            for r in 0..self.rows {
                out[(r, dst)] = self[(r, src)];
            }
        }
        out
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[(c, r)] = self[(r, c)];
            }
        }
        out
    }

    /// Standard real matrix product. Accumulation runs in a fixed i-k-j order
    /// per output row, so results do not depend on anything but the operands.
    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::dims("matmul", self.cols, rhs.rows));
        }
        let mut out = DenseMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let lhs_row = self.row(i);
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in lhs_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let rhs_row = rhs.row(k);
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    pub fn zip_map(&self, rhs: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> Result<DenseMatrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::dims(
                "zip_map",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", rhs.rows, rhs.cols),
            ));
        }
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sub(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_map(rhs, |a, b| a - b)
    }

    pub fn hadamard(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_map(rhs, |a, b| a * b)
    }

    /// Squared Frobenius norm.
    pub fn frob_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Sum of absolute values; for the nonnegative factors this is the L1
    /// penalty term.
    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// True when every entry lies in `[0, 1]`.
    pub fn in_unit_box(&self) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    /// True when every entry is exactly 0.0 or 1.0.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Writes one CSV line per matrix row, plain numbers, no header.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in 0..self.rows {
            let line = self
                .row(r)
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(",");
            writeln!(file, "{line}")?;
        }
        Ok(())
    }

    /// Reads a numeric CSV. A first row that fails to parse as numbers is
    /// treated as a header and skipped.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<DenseMatrix> {
        let file = BufReader::new(std::fs::File::open(path.as_ref())?);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (idx, line) in file.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|c| c.trim().parse::<f64>()).collect();
            match parsed {
                Ok(row) => rows.push(row),
                Err(e) if idx == 0 => {
                    // optional header row
                    let _ = e;
                }
                Err(e) => {
                    return Err(Error::MalformedRecord {
                        path: path.as_ref().display().to_string(),
                        line: idx + 1,
                        message: e.to_string(),
                    });
                }
            }
        }
        Self::from_rows(&rows)
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Product of `w` and `h` pushed through the soft cap, entrywise
/// `min((WH)_ij, 1 + 0.01 (WH)_ij)`.
pub fn pseudo_boolean_product(w: &DenseMatrix, h: &DenseMatrix) -> Result<DenseMatrix> {
    let mut out = w.matmul(h)?;
    out.map_inplace(soft_cap);
    Ok(out)
}

/// Projects every entry onto `[0, 1]`.
pub fn clip_unit(m: &DenseMatrix) -> DenseMatrix {
    m.map(|v| v.clamp(0.0, 1.0))
}

/// Binary objects-by-instances matrix with name registries for both axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSceneMatrix {
    matrix: DenseMatrix,
    object_names: Vec<String>,
    instance_ids: Vec<String>,
}

impl ObjectSceneMatrix {
    pub fn new(
        matrix: DenseMatrix,
        object_names: Vec<String>,
        instance_ids: Vec<String>,
    ) -> Result<Self> {
        if object_names.len() != matrix.rows() {
            return Err(Error::dims(
                "ObjectSceneMatrix object names",
                matrix.rows(),
                object_names.len(),
            ));
        }
        if instance_ids.len() != matrix.cols() {
            return Err(Error::dims(
                "ObjectSceneMatrix instance ids",
                matrix.cols(),
                instance_ids.len(),
            ));
        }
        if !matrix.is_binary() {
            return Err(Error::invalid("object-scene matrix entries must be 0 or 1"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in &object_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::invalid(format!("duplicate object name '{name}'")));
            }
        }
        Ok(ObjectSceneMatrix {
            matrix,
            object_names,
            instance_ids,
        })
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn object_names(&self) -> &[String] {
        &self.object_names
    }

    pub fn instance_ids(&self) -> &[String] {
        &self.instance_ids
    }

    pub fn n_objects(&self) -> usize {
        self.matrix.rows()
    }

    pub fn n_instances(&self) -> usize {
        self.matrix.cols()
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.object_names.iter().position(|n| n == name)
    }

    /// Number of instances containing object `i`.
    pub fn object_occurrences(&self, i: usize) -> usize {
        self.matrix.row(i).iter().filter(|&&v| v == 1.0).count()
    }

    pub fn select_instances(&self, indices: &[usize]) -> ObjectSceneMatrix {
        ObjectSceneMatrix {
            matrix: self.matrix.select_columns(indices),
            object_names: self.object_names.clone(),
            instance_ids: indices
                .iter()
                .map(|&i| self.instance_ids[i].clone())
                .collect(),
        }
    }

    /// CSV with object names as row labels and instance ids as column labels;
    /// the top-left header cell is empty.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        let mut header = vec![String::new()];
        header.extend(self.instance_ids.iter().cloned());
        writer.write_record(&header)?;
        for (r, name) in self.object_names.iter().enumerate() {
            let mut record = vec![name.clone()];
            record.extend(self.matrix.row(r).iter().map(f64::to_string));
            writer.write_record(&record)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<ObjectSceneMatrix> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(path.as_ref())?;
        let mut records = reader.records();
        let header = records
            .next()
            .transpose()?
            .ok_or_else(|| Error::invalid("empty object-scene CSV"))?;
        let instance_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut object_names = Vec::new();
        let mut rows = Vec::new();
        for record in records {
            let record = record?;
            let mut fields = record.iter();
            let name = fields
                .next()
                .ok_or_else(|| Error::invalid("missing row label"))?;
            object_names.push(name.to_string());
            let row: std::result::Result<Vec<f64>, _> =
                fields.map(|c| c.trim().parse::<f64>()).collect();
            rows.push(row.map_err(|e| Error::invalid(format!("row '{name}': {e}")))?);
        }
        ObjectSceneMatrix::new(DenseMatrix::from_rows(&rows)?, object_names, instance_ids)
    }
}
