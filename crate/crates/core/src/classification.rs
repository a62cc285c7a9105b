//! Exponential chi-square and linear kernels, an SMO solver for the binary
//! soft-margin SVM dual, one-vs-all multiclass and kernel averaging.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{Container, ModelKind};
use crate::error::{Error, Result};

pub const CHI2_EPS: f64 = 1e-10;
pub const KKT_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_C_GRID: [f64; 4] = [0.1, 1.0, 10.0, 100.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    Chi2Exp,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gamma {
    Auto,
    Fixed(f64),
}

/// Rows index the evaluated set, columns the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub values: Array2<f64>,
    pub kind: KernelKind,
    pub gamma: f64,
}

impl KernelMatrix {
    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    /// Sub-matrix on the given row and column indices.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> KernelMatrix {
        KernelMatrix {
            values: self.values.select(Axis(0), rows).select(Axis(1), cols).as_standard_layout().into_owned(),
            kind: self.kind,
            gamma: self.gamma,
        }
    }
}

#[inline]
pub fn chi2_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&a, &b)| {
            let s = a + b;
            if s == 0.0 {
                0.0
            } else {
                (a - b) * (a - b) / (s + CHI2_EPS)
            }
        })
        .sum()
}

fn check_nonnegative(x: ArrayView2<f64>) -> Result<()> {
    for ((row, col), &value) in x.indexed_iter() {
        if value < 0.0 || value.is_nan() {
            return Err(Error::NegativeFeature { row, col, value });
        }
    }
    Ok(())
}

fn pairwise(x: ArrayView2<f64>, y: ArrayView2<f64>, f: impl Fn(&[f64], &[f64]) -> f64 + Sync) -> Array2<f64> {
    let xs: Vec<Vec<f64>> = x.outer_iter().map(|r| r.to_vec()).collect();
    let rows: Vec<Vec<f64>> = y
        .outer_iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|yr| {
            let yr = yr.to_vec();
            xs.iter().map(|xr| f(&yr, xr)).collect()
        })
        .collect();
    Array2::from_shape_vec((y.nrows(), x.nrows()), rows.concat()).expect("rectangular")
}

/// Mean chi-square distance over distinct pairs of rows of `x`.
pub fn mean_chi2_distance(x: ArrayView2<f64>) -> Result<f64> {
    check_nonnegative(x)?;
    let n = x.nrows();
    if n < 2 {
        return Err(Error::EmptySet);
    }
    let d = pairwise(x, x, chi2_distance);
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += d[[i, j]];
        }
    }
    Ok(sum / (n * (n - 1) / 2) as f64)
}

/// `k(y, x) = exp(-gamma * chi2(y, x))` for rows `x` of the training set and
/// `y` of the evaluated set. `Gamma::Auto` uses the inverse mean pairwise
/// distance on `x`.
pub fn chi2_kernel(x: ArrayView2<f64>, y: ArrayView2<f64>, gamma: Gamma) -> Result<KernelMatrix> {
    check_nonnegative(x)?;
    check_nonnegative(y)?;
    if x.ncols() != y.ncols() {
        return Err(Error::DimMismatch {
            expected: x.ncols(),
            found: y.ncols(),
        });
    }
    let gamma = match gamma {
        Gamma::Fixed(g) => g,
        Gamma::Auto => {
            let mean = mean_chi2_distance(x)?;
            if mean > 0.0 {
                1.0 / mean
            } else {
                1.0
            }
        }
    };
    let mut values = pairwise(x, y, chi2_distance);
    values.mapv_inplace(|d| (-gamma * d).exp());
    Ok(KernelMatrix {
        values,
        kind: KernelKind::Chi2Exp,
        gamma,
    })
}

pub fn linear_kernel(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<KernelMatrix> {
    if x.ncols() != y.ncols() {
        return Err(Error::DimMismatch {
            expected: x.ncols(),
            found: y.ncols(),
        });
    }
    Ok(KernelMatrix {
        values: pairwise(x, y, |a, b| a.iter().zip(b).map(|(p, q)| p * q).sum()),
        kind: KernelKind::Linear,
        gamma: 0.0,
    })
}

/// Entrywise weighted mean; uniform weights when `weights` is `None`.
pub fn combine_kernels(kernels: &[&KernelMatrix], weights: Option<&[f64]>) -> Result<KernelMatrix> {
    let first = kernels.first().ok_or(Error::EmptySet)?;
    let uniform = vec![1.0; kernels.len()];
    let weights = weights.unwrap_or(&uniform);
    if weights.len() != kernels.len() {
        return Err(Error::DimMismatch {
            expected: kernels.len(),
            found: weights.len(),
        });
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|&w| w < 0.0) || total <= 0.0 {
        return Err(Error::InvalidArgument("kernel weights must be nonnegative and not all zero".into()));
    }
    let mut values = Array2::zeros(first.values.raw_dim());
    for (k, &w) in kernels.iter().zip(weights) {
        if k.values.dim() != first.values.dim() {
            return Err(Error::DimMismatch {
                expected: first.values.len(),
                found: k.values.len(),
            });
        }
        values.scaled_add(w / total, &k.values);
    }
    let kind = if kernels.iter().all(|k| k.kind == first.kind) {
        first.kind
    } else {
        KernelKind::Chi2Exp
    };
    Ok(KernelMatrix {
        values,
        kind,
        gamma: first.gamma,
    })
}

/// Binary kernel SVM over a fixed training set.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub alphas: Vec<f64>,
    pub labels: Vec<f64>,
    pub bias: f64,
    pub c: f64,
    pub support: Vec<usize>,
    /// Dual objective after each sweep of `N` pair updates, and at exit.
    pub dual_objective: Vec<f64>,
    pub iterations: usize,
}

impl SvmModel {
    /// `f(x) = sum_i alpha_i y_i k(x_i, x) + b` given the kernel row of `x`
    /// against the training set.
    pub fn decision(&self, kernel_row: &[f64]) -> f64 {
        self.support.iter().map(|&i| self.alphas[i] * self.labels[i] * kernel_row[i]).sum::<f64>() + self.bias
    }

    pub fn to_container(&self) -> Container {
        let n = self.alphas.len();
        let mut payload = vec![self.c, self.bias];
        payload.extend(&self.alphas);
        payload.extend(&self.labels);
        Container::new(ModelKind::Svm, n, 1, payload)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let n = c.k as usize;
        c.expect_len(2 + 2 * n)?;
        let alphas = c.payload[2..2 + n].to_vec();
        let labels = c.payload[2 + n..].to_vec();
        Ok(Self {
            support: (0..n).filter(|&i| alphas[i] > 0.0).collect(),
            alphas,
            labels,
            bias: c.payload[1],
            c: c.payload[0],
            dual_objective: Vec::new(),
            iterations: 0,
        })
    }
}

/// Soft-margin SVM dual by SMO with second-order working-set selection.
/// Stops when the maximal KKT violation falls below 1e-3 or after
/// `100 N + 100000` pair updates.
pub fn svm_train_binary(k: &KernelMatrix, y: &[f64], c: f64) -> Result<SvmModel> {
    let n = y.len();
    if k.rows() != n || k.cols() != n {
        return Err(Error::DimMismatch {
            expected: n,
            found: k.rows(),
        });
    }
    if !(y.iter().any(|&v| v > 0.0) && y.iter().any(|&v| v < 0.0)) {
        return Err(Error::SingleClass);
    }
    if c <= 0.0 {
        return Err(Error::InvalidArgument(format!("C must be positive, got {c}")));
    }
    let kv = &k.values;
    let q = |i: usize, j: usize| y[i] * y[j] * kv[[i, j]];
    let mut alpha = vec![0.0; n];
    // gradient of 0.5 a'Qa - e'a
    let mut grad = vec![-1.0; n];
    let is_up = |a: f64, yi: f64| (yi > 0.0 && a < c) || (yi < 0.0 && a > 0.0);
    let is_low = |a: f64, yi: f64| (yi > 0.0 && a > 0.0) || (yi < 0.0 && a < c);
    let dual = |alpha: &[f64], grad: &[f64]| -> f64 { -0.5 * alpha.iter().zip(grad).map(|(a, g)| a * (g - 1.0)).sum::<f64>() };
    let cap = 100 * n + 100_000;
    let mut trace = vec![0.0];
    let mut iterations = 0;
    while iterations < cap {
        let mut i = usize::MAX;
        let mut gmax = f64::NEG_INFINITY;
        for t in 0..n {
            if is_up(alpha[t], y[t]) && -y[t] * grad[t] > gmax {
                gmax = -y[t] * grad[t];
                i = t;
            }
        }
        let mut gmin = f64::INFINITY;
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..n {
            if !is_low(alpha[t], y[t]) {
                continue;
            }
            let v = -y[t] * grad[t];
            gmin = gmin.min(v);
            if i != usize::MAX && v < gmax {
                let b = gmax - v;
                let a = kv[[i, i]] + kv[[t, t]] - 2.0 * kv[[i, t]];
                let a = if a > 0.0 { a } else { 1e-12 };
                if -b * b / a < best {
                    best = -b * b / a;
                    j = t;
                }
            }
        }
        if gmax - gmin < KKT_TOLERANCE || i == usize::MAX || j == usize::MAX {
            break;
        }
        iterations += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let quad = (q(i, i) + q(j, j) + 2.0 * q(i, j)).max(1e-12);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (q(i, i) + q(j, j) - 2.0 * q(i, j)).max(1e-12);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += q(t, i) * di + q(t, j) * dj;
        }
        if iterations % n == 0 {
            let d = dual(&alpha, &grad);
            debug_assert!(d >= trace.last().unwrap() - 1e-9 * (1.0 + d.abs()), "dual objective decreased");
            trace.push(d);
        }
    }
    trace.push(dual(&alpha, &grad));

    // rho from free vectors, or the midpoint of the feasible interval
    let mut free_sum = 0.0;
    let mut free = 0usize;
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            free_sum += yg;
        }
    }
    let rho = if free > 0 { free_sum / free as f64 } else { (ub + lb) / 2.0 };
    Ok(SvmModel {
        support: (0..n).filter(|&t| alpha[t] > 0.0).collect(),
        alphas: alpha,
        labels: y.to_vec(),
        bias: -rho,
        c,
        dual_objective: trace,
        iterations,
    })
}

/// One binary model per class, class `i` against the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct OvaModel {
    pub models: Vec<SvmModel>,
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn ova_train(k: &KernelMatrix, labels: &[usize], classes: usize, c: f64) -> Result<OvaModel> {
    let mut present = vec![false; classes];
    for &l in labels {
        if l >= classes {
            return Err(Error::InvalidArgument(format!("label {l} outside {classes} classes")));
        }
        present[l] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::TooFewClasses);
    }
    let models = (0..classes)
        .into_par_iter()
        .map(|class| {
            let y: Vec<f64> = labels.iter().map(|&l| if l == class { 1.0 } else { -1.0 }).collect();
            svm_train_binary(k, &y, c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OvaModel { models })
}

impl OvaModel {
    pub fn classes(&self) -> usize {
        self.models.len()
    }

    pub fn decision_values(&self, kernel_row: &[f64]) -> Vec<f64> {
        self.models.iter().map(|m| m.decision(kernel_row)).collect()
    }

    pub fn predict(&self, kernel_row: &[f64]) -> usize {
        argmax(&self.decision_values(kernel_row))
    }

    /// Predictions for every row of a test-by-train kernel.
    pub fn predict_all(&self, k: &KernelMatrix) -> Vec<usize> {
        k.values
            .outer_iter()
            .map(|row| match row.as_slice() {
                Some(r) => self.predict(r),
                None => self.predict(&row.to_vec()),
            })
            .collect()
    }

    pub fn to_container(&self) -> Container {
        let n = self.models.first().map_or(0, |m| m.alphas.len());
        let mut payload = Vec::with_capacity(self.classes() * (2 + 2 * n));
        for m in &self.models {
            payload.push(m.c);
            payload.push(m.bias);
            payload.extend(&m.alphas);
            payload.extend(&m.labels);
        }
        Container::new(ModelKind::Ova, n, self.classes(), payload)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let (n, classes) = (c.k as usize, c.d as usize);
        c.expect_len(classes * (2 + 2 * n))?;
        let models = c
            .payload
            .chunks_exact(2 + 2 * n)
            .map(|chunk| SvmModel::from_container(&Container::new(ModelKind::Svm, n, 1, chunk.to_vec())))
            .collect::<Result<_>>()?;
        Ok(Self { models })
    }
}

/// Fraction of predictions equal to the truth.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::EmptyPredictions);
    }
    Ok(predicted.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / predicted.len() as f64)
}
