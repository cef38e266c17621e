//! Core data types shared by every estimator.
//!
//! CSV columns are the features: the library never builds feature maps of its
//! own. A dataset row is `(z_1..z_dZ, x_1..x_dX, t, y[, u])`.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tabular samples of `(Z, X, T, Y)` with an optional latent label column.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n x d_Z` proxy features.
    pub z: DMatrix<f64>,
    /// `n x d_X` proxy features.
    pub x: DMatrix<f64>,
    /// Treatment indicator, expected in `{0, 1}`.
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    /// Ground-truth latent class, only present for synthetic data.
    pub u: Option<Vec<i64>>,
}

/// A single broken dataset invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    LengthMismatch {
        column: String,
        expected: usize,
        found: usize,
    },
    NonBinaryTreatment {
        row: usize,
    },
    NonFinite {
        column: String,
        row: usize,
    },
    NegativeLatent {
        row: usize,
    },
    EmptyArm {
        arm: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LengthMismatch {
                column,
                expected,
                found,
            } => write!(f, "column {column} has {found} rows, expected {expected}"),
            Violation::NonBinaryTreatment { row } => write!(f, "t not binary at row {row}"),
            Violation::NonFinite { column, row } => {
                write!(f, "{column} not finite at row {row}")
            }
            Violation::NegativeLatent { row } => write!(f, "u negative at row {row}"),
            Violation::EmptyArm { arm } => write!(f, "treatment arm {arm} empty"),
        }
    }
}

impl Dataset {
    pub fn new(
        z: DMatrix<f64>,
        x: DMatrix<f64>,
        t: Vec<f64>,
        y: Vec<f64>,
        u: Option<Vec<i64>>,
    ) -> Self {
        Self { z, x, t, y, u }
    }

    /// Sample count, taken from the treatment column.
    pub fn n(&self) -> usize {
        self.t.len()
    }

    pub fn d_z(&self) -> usize {
        self.z.ncols()
    }

    pub fn d_x(&self) -> usize {
        self.x.ncols()
    }

    /// Arm of row `i`, or `None` when the treatment value is not 0/1.
    pub fn arm(&self, i: usize) -> Option<usize> {
        match self.t[i] {
            v if v == 0.0 => Some(0),
            v if v == 1.0 => Some(1),
            _ => None,
        }
    }

    /// Number of rows in each arm `[n_0, n_1]`. Rows with a non-binary
    /// treatment are not counted.
    pub fn arm_counts(&self) -> [usize; 2] {
        let mut counts = [0usize; 2];
        for i in 0..self.n() {
            if let Some(a) = self.arm(i) {
                counts[a] += 1;
            }
        }
        counts
    }

    /// New dataset made of the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            z: self.z.select_rows(rows),
            x: self.x.select_rows(rows),
            t: rows.iter().map(|&i| self.t[i]).collect(),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            u: self
                .u
                .as_ref()
                .map(|u| rows.iter().map(|&i| u[i]).collect()),
        }
    }

    /// Row-wise concatenation. Both datasets must share feature widths.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.d_z() != other.d_z() || self.d_x() != other.d_x() {
            return Err(Error::DimensionMismatch(format!(
                "cannot concatenate ({}, {}) features with ({}, {})",
                self.d_z(),
                self.d_x(),
                other.d_z(),
                other.d_x()
            )));
        }
        let stack = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
            let mut m = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
            m.rows_mut(0, a.nrows()).copy_from(a);
            m.rows_mut(a.nrows(), b.nrows()).copy_from(b);
            m
        };
        let u = match (&self.u, &other.u) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        Ok(Dataset {
            z: stack(&self.z, &other.z),
            x: stack(&self.x, &other.x),
            t: self.t.iter().chain(&other.t).copied().collect(),
            y: self.y.iter().chain(&other.y).copied().collect(),
            u,
        })
    }

    /// Read the dataset CSV format: header `z1,..,zdZ,x1,..,xdX,t,y[,u]`.
    pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers()?.clone();
        let layout = CsvLayout::from_header(&header)?;

        let mut z = Vec::new();
        let mut x = Vec::new();
        let mut t = Vec::new();
        let mut y = Vec::new();
        let mut u = layout.u.map(|_| Vec::new());
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            let cell = |col: usize| -> Result<f64> {
                let raw = record.get(col).unwrap_or("");
                if raw.is_empty() {
                    return Err(Error::Csv(format!(
                        "missing value in column {} at row {row}",
                        &header[col]
                    )));
                }
                raw.parse::<f64>().map_err(|_| {
                    Error::Csv(format!(
                        "cannot parse {raw:?} in column {} at row {row}",
                        &header[col]
                    ))
                })
            };
            for &c in &layout.z {
                z.push(cell(c)?);
            }
            for &c in &layout.x {
                x.push(cell(c)?);
            }
            t.push(cell(layout.t)?);
            y.push(cell(layout.y)?);
            if let (Some(col), Some(u)) = (layout.u, u.as_mut()) {
                let v = cell(col)?;
                if v.fract() != 0.0 {
                    return Err(Error::Csv(format!("u not an integer at row {row}")));
                }
                u.push(v as i64);
            }
        }
        let n = t.len();
        Ok(Dataset {
            z: DMatrix::from_row_slice(n, layout.z.len(), &z),
            x: DMatrix::from_row_slice(n, layout.x.len(), &x),
            t,
            y,
            u,
        })
    }

    pub fn read_csv_path(path: impl AsRef<Path>) -> Result<Dataset> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (1..=self.d_z()).map(|i| format!("z{i}")).collect();
        header.extend((1..=self.d_x()).map(|i| format!("x{i}")));
        header.push("t".into());
        header.push("y".into());
        if self.u.is_some() {
            header.push("u".into());
        }
        w.write_record(&header)?;
        let mut row = Vec::with_capacity(header.len());
        for i in 0..self.n() {
            row.clear();
            row.extend(self.z.row(i).iter().map(|v| v.to_string()));
            row.extend(self.x.row(i).iter().map(|v| v.to_string()));
            row.push(self.t[i].to_string());
            row.push(self.y[i].to_string());
            if let Some(u) = &self.u {
                row.push(u[i].to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

struct CsvLayout {
    z: Vec<usize>,
    x: Vec<usize>,
    t: usize,
    y: usize,
    u: Option<usize>,
}

impl CsvLayout {
    fn from_header(header: &csv::StringRecord) -> Result<Self> {
        let mut z = Vec::new();
        let mut x = Vec::new();
        let (mut t, mut y, mut u) = (None, None, None);
        for (col, name) in header.iter().enumerate() {
            let indexed = |prefix: char| {
                name.strip_prefix(prefix)
                    .and_then(|rest| rest.parse::<usize>().ok())
            };
            if let Some(i) = indexed('z') {
                z.push((i, col));
            } else if let Some(i) = indexed('x') {
                x.push((i, col));
            } else {
                match name {
                    "t" => t = Some(col),
                    "y" => y = Some(col),
                    "u" => u = Some(col),
                    other => return Err(Error::Csv(format!("unexpected column {other:?}"))),
                }
            }
        }
        z.sort_unstable();
        x.sort_unstable();
        let missing = |c: &str| Error::Csv(format!("missing column {c:?}"));
        Ok(CsvLayout {
            z: z.into_iter().map(|(_, c)| c).collect(),
            x: x.into_iter().map(|(_, c)| c).collect(),
            t: t.ok_or_else(|| missing("t"))?,
            y: y.ok_or_else(|| missing("y"))?,
            u,
        })
    }
}

/// Check every dataset invariant. Empty result iff the dataset is well formed.
pub fn validate_dataset(d: &Dataset) -> Vec<Violation> {
    let n = d.n();
    let mut out = Vec::new();
    let mut check_len = |column: &str, found: usize| {
        if found != n {
            out.push(Violation::LengthMismatch {
                column: column.to_string(),
                expected: n,
                found,
            });
        }
    };
    check_len("z", d.z.nrows());
    check_len("x", d.x.nrows());
    check_len("y", d.y.len());
    if let Some(u) = &d.u {
        check_len("u", u.len());
    }
    if !out.is_empty() {
        return out;
    }

    for i in 0..n {
        if d.arm(i).is_none() {
            out.push(Violation::NonBinaryTreatment { row: i });
        }
    }
    for (name, m) in [("z", &d.z), ("x", &d.x)] {
        for i in 0..n {
            for j in 0..m.ncols() {
                if !m[(i, j)].is_finite() {
                    out.push(Violation::NonFinite {
                        column: format!("{name}{}", j + 1),
                        row: i,
                    });
                }
            }
        }
    }
    for (i, v) in d.y.iter().enumerate() {
        if !v.is_finite() {
            out.push(Violation::NonFinite {
                column: "y".into(),
                row: i,
            });
        }
    }
    if let Some(u) = &d.u {
        for (i, &v) in u.iter().enumerate() {
            if v < 0 {
                out.push(Violation::NegativeLatent { row: i });
            }
        }
    }
    let counts = d.arm_counts();
    for (arm, &c) in counts.iter().enumerate() {
        if c == 0 {
            out.push(Violation::EmptyArm { arm });
        }
    }
    out
}

/// Partition rows by treatment value, preserving row order within each arm.
pub fn split_by_treatment(d: &Dataset) -> Result<(Dataset, Dataset)> {
    let mut rows: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for i in 0..d.n() {
        match d.arm(i) {
            Some(a) => rows[a].push(i),
            None => return Err(Error::InvalidDataset(vec![Violation::NonBinaryTreatment { row: i }])),
        }
    }
    for (arm, r) in rows.iter().enumerate() {
        if r.is_empty() {
            return Err(Error::EmptyArm { arm });
        }
    }
    Ok((d.select_rows(&rows[0]), d.select_rows(&rows[1])))
}

/// Observable moments `M[X]`, `M[Z,X|t]`, `M[Z,Y|t]`, `M[Z,XY|t]`.
///
/// Arm-conditional objects hold within-arm averages `E[. | T=t]`.
/// Index 0 of each pair is the control arm, index 1 the treated arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentBundle {
    #[serde(with = "row_major::vector")]
    pub m_x: DVector<f64>,
    #[serde(with = "row_major::matrix_pair")]
    pub m_zx_t: [DMatrix<f64>; 2],
    #[serde(with = "row_major::vector_pair")]
    pub m_zy_t: [DVector<f64>; 2],
    #[serde(with = "row_major::matrix_pair")]
    pub m_zxy_t: [DMatrix<f64>; 2],
    pub n_t: [usize; 2],
    pub exact: bool,
}

impl MomentBundle {
    pub fn d_z(&self) -> usize {
        self.m_zx_t[0].nrows()
    }

    pub fn d_x(&self) -> usize {
        self.m_x.len()
    }

    /// Dimension and finiteness check.
    pub fn check(&self) -> Result<()> {
        let (dz, dx) = (self.d_z(), self.d_x());
        for t in 0..2 {
            if self.m_zx_t[t].shape() != (dz, dx)
                || self.m_zxy_t[t].shape() != (dz, dx)
                || self.m_zy_t[t].len() != dz
            {
                return Err(Error::DimensionMismatch(format!(
                    "arm {t} moments inconsistent with d_Z = {dz}, d_X = {dx}"
                )));
            }
        }
        let finite = self.m_x.iter().all(|v| v.is_finite())
            && self.m_zx_t.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && self.m_zxy_t.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && self.m_zy_t.iter().all(|m| m.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::DimensionMismatch("non-finite moment entry".into()));
        }
        Ok(())
    }

    /// Left-multiply every Z-indexed object by `a` (a change of Z basis).
    pub fn transform_z(&self, a: &DMatrix<f64>) -> MomentBundle {
        MomentBundle {
            m_x: self.m_x.clone(),
            m_zx_t: [a * &self.m_zx_t[0], a * &self.m_zx_t[1]],
            m_zy_t: [a * &self.m_zy_t[0], a * &self.m_zy_t[1]],
            m_zxy_t: [a * &self.m_zxy_t[0], a * &self.m_zxy_t[1]],
            n_t: self.n_t,
            exact: self.exact,
        }
    }
}

/// SPO coefficients of a given order; `gamma = alpha - beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpoCoefficients {
    pub order: usize,
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    pub gamma: DVector<f64>,
}

impl SpoCoefficients {
    pub fn new(order: usize, alpha: DVector<f64>, beta: DVector<f64>) -> Self {
        let gamma = &alpha - &beta;
        Self {
            order,
            alpha,
            beta,
            gamma,
        }
    }
}

/// Latent class weights `P[U]` with per-class effects `E[R|U]`.
///
/// Kept in canonical order: effects ascending, ties by descending weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureOfEffects {
    pub weights: Vec<f64>,
    pub effects: Vec<f64>,
}

impl MixtureOfEffects {
    /// Build a mixture and put it in canonical order.
    pub fn new(weights: Vec<f64>, effects: Vec<f64>) -> Result<Self> {
        if weights.len() != effects.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} effects",
                weights.len(),
                effects.len()
            )));
        }
        let mut pairs: Vec<(f64, f64)> = weights.into_iter().zip(effects).collect();
        pairs.sort_by(|a, b| a.1.total_cmp(&b.1).then(b.0.total_cmp(&a.0)));
        let (weights, effects) = pairs.into_iter().unzip();
        Ok(Self { weights, effects })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    /// `sum_j w_j e_j^l` for `l = 1..=2k-1`.
    pub fn moment_sequence(&self) -> MomentSequence {
        let k = self.k();
        let values = (1..2 * k)
            .map(|l| {
                self.weights
                    .iter()
                    .zip(&self.effects)
                    .map(|(w, e)| w * e.powi(l as i32))
                    .sum()
            })
            .collect();
        MomentSequence { k, values }
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.effects).map(|(w, e)| w * e).sum()
    }
}

/// Response moments `(nu_1, .., nu_{2k-1})`; `nu_0 = 1` is implicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSequence {
    pub k: usize,
    pub values: Vec<f64>,
}

impl MomentSequence {
    pub fn new(k: usize, values: Vec<f64>) -> Result<Self> {
        if k == 0 {
            return Err(Error::LengthMismatch {
                expected: 1,
                found: values.len(),
            });
        }
        if values.len() != 2 * k - 1 {
            return Err(Error::LengthMismatch {
                expected: 2 * k - 1,
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::DimensionMismatch("non-finite moment".into()));
        }
        Ok(Self { k, values })
    }

    /// `nu_l` with `nu_0 = 1`.
    pub fn nu(&self, l: usize) -> f64 {
        if l == 0 {
            1.0
        } else {
            self.values[l - 1]
        }
    }
}

/// Serde helpers writing matrices as row-major nested arrays.
pub(crate) mod row_major {
    use nalgebra::{DMatrix, DVector};
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub(crate) fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    pub(crate) fn from_rows<E: serde::de::Error>(rows: Vec<Vec<f64>>) -> Result<DMatrix<f64>, E> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(E::custom("ragged matrix rows"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Ok(DMatrix::from_row_slice(nrows, ncols, &flat))
    }

    pub mod vector {
        use super::*;

        pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
            v.as_slice().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
            Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
        }
    }

    pub mod vector_pair {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[DVector<f64>; 2], s: S) -> Result<S::Ok, S::Error> {
            [v[0].as_slice(), v[1].as_slice()].serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[DVector<f64>; 2], D::Error> {
            let [a, b] = <[Vec<f64>; 2]>::deserialize(d)?;
            Ok([DVector::from_vec(a), DVector::from_vec(b)])
        }
    }

    pub mod matrix {
        use super::*;

        pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
            to_rows(m).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
            from_rows(Vec::<Vec<f64>>::deserialize(d)?)
        }
    }

    pub mod matrix_pair {
        use super::*;

        pub fn serialize<S: Serializer>(m: &[DMatrix<f64>; 2], s: S) -> Result<S::Ok, S::Error> {
            [to_rows(&m[0]), to_rows(&m[1])].serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[DMatrix<f64>; 2], D::Error> {
            let [a, b] = <[Vec<Vec<f64>>; 2]>::deserialize(d)?;
            let a = from_rows(a)?;
            let b = from_rows(b)?;
            if a.shape() != b.shape() {
                return Err(D::Error::custom("arm matrices differ in shape"));
            }
            Ok([a, b])
        }
    }
}
