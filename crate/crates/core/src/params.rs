//! Maps from unconstrained precursors to probability weights, increasing
//! quantiles and nonnegative factors, with their pullbacks.

use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Entries above this would overflow `exp`.
pub const MAX_EXP_PRECURSOR: f64 = 700.0;

/// Softmax of a precursor row.
pub fn weights_from_precursor(f: ArrayView1<f64>) -> Array1<f64> {
    let top = f.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
    let mut w = f.mapv(|v| (v - top).exp());
    let total = w.sum();
    w.mapv_inplace(|v| v / total);
    w
}

/// `cumsum(exp(r))`: positive, strictly increasing quantiles.
pub fn quantiles_free(r: ArrayView1<f64>) -> Result<Array1<f64>> {
    if let Some(v) = r.iter().find(|v| **v > MAX_EXP_PRECURSOR) {
        return Err(Error::Overflow(format!("quantile precursor {v} exceeds {MAX_EXP_PRECURSOR}")));
    }
    let mut q = r.mapv(f64::exp);
    q.accumulate_axis_inplace(Axis(0), |&prev, cur| *cur += prev);
    Ok(q)
}

/// `[s, s + (t - s) * cumsum(softmax(r))]`, with the endpoints set to exactly
/// `s` and `t`. `r` has one entry fewer than the output.
pub fn quantiles_pinned(r: ArrayView1<f64>, s: f64, t: f64) -> Result<Array1<f64>> {
    if !(s < t) {
        return Err(Error::InvalidRange { s, t });
    }
    let m = r.len() + 1;
    let mut q = Array1::zeros(m);
    q[0] = s;
    let w = weights_from_precursor(r);
    let mut acc = 0.0;
    for (j, wj) in w.iter().enumerate() {
        acc += wj;
        q[j + 1] = s + (t - s) * acc;
    }
    q[m - 1] = t;
    Ok(q)
}

/// Pullback of the softmax at output `w`.
pub fn vjp_weights(cot: ArrayView1<f64>, w: ArrayView1<f64>) -> Array1<f64> {
    let inner = cot.dot(&w);
    Zip::from(&cot).and(&w).map_collect(|&c, &wi| wi * (c - inner))
}

/// Pullback of [`quantiles_free`] at precursor `r`.
pub fn vjp_quantiles_free(cot: ArrayView1<f64>, r: ArrayView1<f64>) -> Array1<f64> {
    let mut tail = cot.to_owned();
    tail.invert_axis(Axis(0));
    tail.accumulate_axis_inplace(Axis(0), |&prev, cur| *cur += prev);
    tail.invert_axis(Axis(0));
    Zip::from(&mut tail).and(&r).for_each(|t, &ri| *t *= ri.exp());
    tail
}

/// Pullback of [`quantiles_pinned`] in its precursor `r` (the range is fixed).
pub fn vjp_quantiles_pinned(cot: ArrayView1<f64>, r: ArrayView1<f64>, s: f64, t: f64) -> Array1<f64> {
    let k = r.len();
    // weight k contributes to outputs k+1..=m-1
    let mut w_bar = cot.slice(s![1..]).to_owned();
    w_bar.invert_axis(Axis(0));
    w_bar.accumulate_axis_inplace(Axis(0), |&prev, cur| *cur += prev);
    w_bar.invert_axis(Axis(0));
    w_bar.mapv_inplace(|v| v * (t - s));
    debug_assert_eq!(w_bar.len(), k);
    let w = weights_from_precursor(r);
    vjp_weights(w_bar.view(), w.view())
}

/// Pullback of the elementwise `exp` at precursor output `u = exp(log_u)`.
pub fn vjp_factors(cot: &Array2<f64>, u: &Array2<f64>) -> Array2<f64> {
    cot * u
}

/// How the quantile precursors of a [`PrecursorSet`] are mapped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum QuantileMap {
    /// `d x (m-1)` precursors, quantiles pinned to `[s_i, t_i]`.
    Pinned { s: Array1<f64>, t: Array1<f64> },
    /// `d x m` precursors, quantiles `cumsum(exp(r))`.
    Free,
}

/// Weight and quantile precursors for all `d` features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecursorSet {
    pub weights: Array2<f64>,
    pub quantiles: Array2<f64>,
    pub map: QuantileMap,
}

impl PrecursorSet {
    /// Zero precursors: uniform weights and uniformly spaced pinned quantiles.
    /// Rows with `s_i == t_i` are allowed and treated as constant rows.
    pub fn pinned(s: Array1<f64>, t: Array1<f64>, m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::invalid("pinned quantiles need m >= 2"));
        }
        if s.len() != t.len() {
            return Err(Error::invalid("range vectors differ in length"));
        }
        if let Some(i) = (0..s.len()).find(|&i| !(s[i] <= t[i])) {
            return Err(Error::InvalidRange { s: s[i], t: t[i] }.at_row(i));
        }
        let d = s.len();
        Ok(Self {
            weights: Array2::zeros((d, m)),
            quantiles: Array2::zeros((d, m - 1)),
            map: QuantileMap::Pinned { s, t },
        })
    }

    /// Zero precursors with free quantiles `1, 2, ..., m`.
    pub fn free(d: usize, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("m must be positive"));
        }
        Ok(Self {
            weights: Array2::zeros((d, m)),
            quantiles: Array2::zeros((d, m)),
            map: QuantileMap::Free,
        })
    }

    pub fn rows(&self) -> usize {
        self.weights.nrows()
    }

    pub fn m(&self) -> usize {
        self.weights.ncols()
    }

    /// Whether row `i` has a collapsed pinned range.
    pub fn is_constant_row(&self, i: usize) -> bool {
        match &self.map {
            QuantileMap::Pinned { s, t } => s[i] == t[i],
            QuantileMap::Free => false,
        }
    }

    pub fn b_row(&self, i: usize) -> Array1<f64> {
        weights_from_precursor(self.weights.row(i))
    }

    pub fn q_row(&self, i: usize) -> Result<Array1<f64>> {
        match &self.map {
            QuantileMap::Pinned { s, t } => {
                if s[i] == t[i] {
                    Ok(Array1::from_elem(self.m(), s[i]))
                } else {
                    quantiles_pinned(self.quantiles.row(i), s[i], t[i])
                }
            }
            QuantileMap::Free => quantiles_free(self.quantiles.row(i)),
        }
    }

    /// Pullback of `q_row(i)` into the quantile precursors of row `i`.
    pub fn q_row_vjp(&self, i: usize, cot: ArrayView1<f64>) -> Array1<f64> {
        match &self.map {
            QuantileMap::Pinned { s, t } => {
                if s[i] == t[i] {
                    Array1::zeros(self.quantiles.ncols())
                } else {
                    vjp_quantiles_pinned(cot, self.quantiles.row(i), s[i], t[i])
                }
            }
            QuantileMap::Free => vjp_quantiles_free(cot, self.quantiles.row(i)),
        }
    }

    /// Row-stochastic weight matrix `B`.
    pub fn weight_matrix(&self) -> Array2<f64> {
        let mut out = Array2::zeros(self.weights.raw_dim());
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            row.assign(&self.b_row(i));
        }
        out
    }

    /// Row-increasing quantile matrix `Q` (`d x m`).
    pub fn quantile_matrix(&self) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((self.rows(), self.m()));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            row.assign(&self.q_row(i)?);
        }
        Ok(out)
    }
}

/// Log-factors; the factors themselves are `exp(log_u)` and `exp(log_v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorPrecursors {
    pub log_u: Array2<f64>,
    pub log_v: Array2<f64>,
}

impl FactorPrecursors {
    pub fn new(log_u: Array2<f64>, log_v: Array2<f64>) -> Result<Self> {
        if log_u.ncols() != log_v.nrows() {
            return Err(Error::invalid(format!(
                "inner dimensions differ: {} vs {}",
                log_u.ncols(),
                log_v.nrows()
            )));
        }
        Ok(Self { log_u, log_v })
    }

    pub fn u(&self) -> Array2<f64> {
        self.log_u.mapv(f64::exp)
    }

    pub fn v(&self) -> Array2<f64> {
        self.log_v.mapv(f64::exp)
    }

    pub fn rank(&self) -> usize {
        self.log_u.ncols()
    }
}
