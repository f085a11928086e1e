//! Dense and low-rank matrix algebra for adapter residuals.
//!
//! A [`LowRankUpdate`] stores the factor pair of `ΔW = B·A` with
//! `B: d_out × r` and `A: r × d_in`. A [`WeightedUpdateSet`] pairs several
//! updates targeting the same base matrix with their fusion weights, and
//! [`fuse`] / [`fused_apply`] realise
//!
//! ```text
//! W* = W + scale · Σ_c w_c · B_c A_c
//! ```
//!
//! either by materialising `W*` or by applying it to a vector through the
//! factors, which costs `O(r·(d_in + d_out))` per adapter on top of `W·x`.
//! Entries are accumulated in ascending character-id order so results do
//! not depend on insertion order.

use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Row-major dense matrix of finite doubles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for DenseMatrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        DenseMatrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite matrix entry at index {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
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

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::invalid(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &lhs) in self.row(i).iter().enumerate() {
                if lhs == 0.0 {
                    continue;
                }
                for (o, &rhs) in out_row.iter_mut().zip(other.row(k)) {
                    *o += lhs * rhs;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::invalid(format!(
                "vector of length {} does not match {} columns",
                x.len(),
                self.cols
            )));
        }
        Ok(self.matvec_unchecked(x))
    }

    pub(crate) fn matvec_unchecked(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `Mᵀ·v` without materialising the transpose.
    pub(crate) fn tmatvec_unchecked(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            for (o, &m) in out.iter_mut().zip(self.row(r)) {
                *o += m * vr;
            }
        }
        out
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &DenseMatrix, scale: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::invalid("shape mismatch in add_scaled"));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Initialisation of a fresh adapter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    /// Standard deviation of the Gaussian used for `A`.
    pub a_std: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self { a_std: 0.02 }
    }
}

/// Factor pair of a rank-`r` residual `ΔW = B·A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawUpdate")]
pub struct LowRankUpdate {
    b: DenseMatrix,
    a: DenseMatrix,
}

#[derive(Deserialize)]
struct RawUpdate {
    b: DenseMatrix,
    a: DenseMatrix,
}

impl TryFrom<RawUpdate> for LowRankUpdate {
    type Error = Error;

    fn try_from(raw: RawUpdate) -> Result<Self> {
        LowRankUpdate::new(raw.b, raw.a)
    }
}

impl LowRankUpdate {
    pub fn new(b: DenseMatrix, a: DenseMatrix) -> Result<Self> {
        if b.cols() == 0 || b.cols() != a.rows() {
            return Err(Error::invalid(format!(
                "factor shapes {}x{} and {}x{} do not share a positive rank",
                b.rows(),
                b.cols(),
                a.rows(),
                a.cols()
            )));
        }
        if b.rows() == 0 || a.cols() == 0 {
            return Err(Error::invalid("zero-sized adapter factor"));
        }
        Ok(Self { b, a })
    }

    pub fn b_factor(&self) -> &DenseMatrix {
        &self.b
    }

    pub fn a_factor(&self) -> &DenseMatrix {
        &self.a
    }

    pub(crate) fn factors_mut(&mut self) -> (&mut DenseMatrix, &mut DenseMatrix) {
        (&mut self.b, &mut self.a)
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn param_count(&self) -> usize {
        self.b.data().len() + self.a.data().len()
    }
}

/// Fresh adapter: `B = 0`, `A ~ N(0, a_std²)` drawn from `seed`.
pub fn make_lowrank(
    d_out: usize,
    d_in: usize,
    rank: usize,
    init: &InitSpec,
    seed: u64,
) -> Result<LowRankUpdate> {
    if d_out == 0 || d_in == 0 {
        return Err(Error::invalid("adapter dimensions must be positive"));
    }
    if rank == 0 {
        return Err(Error::invalid("adapter rank must be at least 1"));
    }
    if !(init.a_std.is_finite() && init.a_std >= 0.0) {
        return Err(Error::invalid("init standard deviation must be finite and non-negative"));
    }
    let normal = Normal::new(0.0, init.a_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = seed::rng(seed);
    let a: Vec<f64> = (0..rank * d_in).map(|_| normal.sample(&mut rng)).collect();
    LowRankUpdate::new(DenseMatrix::zeros(d_out, rank), DenseMatrix::new(rank, d_in, a)?)
}

/// `B·A` as a dense `d_out × d_in` matrix.
pub fn materialize(u: &LowRankUpdate) -> DenseMatrix {
    u.b.matmul(&u.a).expect("factor shapes validated at construction")
}

/// One adapter contribution inside a [`WeightedUpdateSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedUpdate {
    pub character_id: String,
    pub update: Arc<LowRankUpdate>,
    pub weight: f64,
}

/// Weighted adapters targeting one base matrix, kept sorted by character id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightedUpdateSet {
    entries: Vec<WeightedUpdate>,
    scale: f64,
}

impl WeightedUpdateSet {
    pub fn empty() -> Self {
        Self { entries: Vec::new(), scale: 1.0 }
    }

    pub fn new(mut entries: Vec<WeightedUpdate>) -> Result<Self> {
        for e in &entries {
            if !(0.0..=1.0).contains(&e.weight) {
                return Err(Error::invalid(format!(
                    "weight {} for '{}' outside [0, 1]",
                    e.weight, e.character_id
                )));
            }
        }
        if let Some(first) = entries.first() {
            let shape = (first.update.d_out(), first.update.d_in());
            if let Some(bad) = entries
                .iter()
                .find(|e| (e.update.d_out(), e.update.d_in()) != shape)
            {
                return Err(Error::invalid(format!(
                    "update for '{}' has shape {}x{}, expected {}x{}",
                    bad.character_id,
                    bad.update.d_out(),
                    bad.update.d_in(),
                    shape.0,
                    shape.1
                )));
            }
        }
        entries.sort_by(|x, y| x.character_id.cmp(&y.character_id));
        if let Some(w) = entries.windows(2).find(|w| w[0].character_id == w[1].character_id) {
            return Err(Error::invalid(format!("duplicate character '{}'", w[0].character_id)));
        }
        Ok(Self { entries, scale: 1.0 })
    }

    /// Global multiplier on every residual (the usual `α/r` knob); 1 by default.
    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn entries(&self) -> &[WeightedUpdate] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    fn active(&self) -> impl Iterator<Item = (&LowRankUpdate, f64)> {
        let scale = self.scale;
        self.entries
            .iter()
            .filter(move |e| e.weight != 0.0 && scale != 0.0)
            .map(move |e| (e.update.as_ref(), e.weight * scale))
    }

    fn check_target(&self, rows: usize, cols: usize) -> Result<()> {
        match self.entries.iter().find(|e| e.update.d_out() != rows || e.update.d_in() != cols) {
            Some(e) => Err(Error::invalid(format!(
                "update for '{}' is {}x{} but the base matrix is {rows}x{cols}",
                e.character_id,
                e.update.d_out(),
                e.update.d_in()
            ))),
            None => Ok(()),
        }
    }
}

/// `W + scale · Σ w_c B_c A_c` as a new matrix; `base` is untouched.
pub fn fuse(base: &DenseMatrix, set: &WeightedUpdateSet) -> Result<DenseMatrix> {
    set.check_target(base.rows(), base.cols())?;
    let mut out = base.clone();
    for (u, w) in set.active() {
        out.add_scaled(&materialize(u), w)?;
    }
    Ok(out)
}

/// `fuse(base, set) · x` computed through the factors.
pub fn fused_apply(base: &DenseMatrix, set: &WeightedUpdateSet, x: &[f64]) -> Result<Vec<f64>> {
    set.check_target(base.rows(), base.cols())?;
    let mut y = base.matvec(x)?;
    for (u, w) in set.active() {
        let inner = u.a.matvec_unchecked(x);
        for (r, yr) in y.iter_mut().enumerate() {
            *yr += w * dot(u.b.row(r), &inner);
        }
    }
    Ok(y)
}
