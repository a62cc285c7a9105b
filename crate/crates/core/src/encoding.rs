//! Quantizer training (k-means, diagonal GMM) and image-level encoders:
//! bag-of-words histograms and Fisher vectors with power + L2 normalization.

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Container, ModelKind};
use crate::descriptor::DescriptorSet;
use crate::error::{Error, Result};

/// Codebook size for color-name / DD bag-of-words.
pub const DEFAULT_BOW_CENTERS: usize = 512;
/// Mixture size for SIFT Fisher vectors.
pub const DEFAULT_GMM_COMPONENTS: usize = 128;
/// Posteriors below this are zeroed and the rest renormalized.
pub const POSTERIOR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodingKind {
    Bow,
    Fv,
    Ifv,
    Rcc,
    Dunnet,
}

/// Fixed-length image representation.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedVector {
    pub kind: EncodingKind,
    pub values: Vec<f64>,
}

impl EncodedVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansModel {
    pub centers: Array2<f64>,
    /// Sum of squared distances to the nearest center.
    pub inertia: f64,
}

/// A fitted k-means model plus the per-iteration objective trace.
#[derive(Debug, Clone)]
pub struct KmeansFit {
    pub model: KmeansModel,
    pub objective: Vec<f64>,
    pub iterations: usize,
}

impl KmeansModel {
    pub fn k(&self) -> usize {
        self.centers.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }

    /// Index of and squared distance to the nearest center (lowest index on ties).
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.centers.outer_iter().enumerate() {
            let d = sq_dist(x, c.as_slice().unwrap());
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    pub fn to_container(&self, kind: ModelKind) -> Container {
        let mut payload: Vec<f64> = self.centers.iter().copied().collect();
        payload.push(self.inertia);
        Container::new(kind, self.k(), self.dim(), payload)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let (k, d) = (c.k as usize, c.d as usize);
        c.expect_len(k * d + 1)?;
        Ok(Self {
            centers: Array2::from_shape_vec((k, d), c.payload[..k * d].to_vec()).unwrap(),
            inertia: c.payload[k * d],
        })
    }
}

fn assign(data: ArrayView2<f64>, centers: &Array2<f64>, labels: &mut [usize], dists: &mut [f64]) -> (f64, bool) {
    let mut total = 0.0;
    let mut changed = false;
    for (i, x) in data.outer_iter().enumerate() {
        let x = x.to_slice().expect("row-major data");
        let mut best = (0, f64::INFINITY);
        for (k, c) in centers.outer_iter().enumerate() {
            let d = sq_dist(x, c.as_slice().unwrap());
            if d < best.1 {
                best = (k, d);
            }
        }
        if labels[i] != best.0 {
            changed = true;
            labels[i] = best.0;
        }
        dists[i] = best.1;
        total += best.1;
    }
    (total, changed)
}

/// k-means++ seeding followed by Lloyd iterations.
///
/// Stops when assignments no longer change, when the relative objective
/// decrease falls below `tol`, or after `max_iter` updates. Empty clusters
/// are re-seeded to the point farthest from its center.
pub fn kmeans_fit(data: ArrayView2<f64>, k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KmeansFit> {
    let (n, d) = data.dim();
    if k == 0 || n < k {
        return Err(Error::TooFewPoints { points: n, required: k.max(1) });
    }
    let data = data.as_standard_layout();
    let data = data.view();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++
    let mut centers = Array2::zeros((k, d));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&data.row(first));
    let mut closest: Vec<f64> = data
        .outer_iter()
        .map(|x| sq_dist(x.to_slice().unwrap(), centers.row(0).as_slice().unwrap()))
        .collect();
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in closest.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            // land on a point with positive mass even under rounding
            if closest[chosen] == 0.0 {
                chosen = closest.iter().rposition(|&w| w > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&data.row(pick));
        let center = centers.row(c).to_owned();
        for (i, x) in data.outer_iter().enumerate() {
            closest[i] = closest[i].min(sq_dist(x.to_slice().unwrap(), center.as_slice().unwrap()));
        }
    }

    let mut labels = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let (mut objective, _) = assign(data, &centers, &mut labels, &mut dists);
    let mut trace = vec![objective];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        // update step
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, x) in data.outer_iter().enumerate() {
            sums.row_mut(labels[i]).scaled_add(1.0, &x);
            counts[labels[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mean = sums.row(c).mapv(|v| v / counts[c] as f64);
                centers.row_mut(c).assign(&mean);
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = dists
                    .iter()
                    .enumerate()
                    .fold((0, -1.0), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0;
                centers.row_mut(c).assign(&data.row(far));
                dists[far] = 0.0;
                labels[far] = c;
            }
        }
        let (next, changed) = assign(data, &centers, &mut labels, &mut dists);
        trace.push(next);
        let prev = objective;
        objective = next;
        if !changed || prev <= 0.0 || (prev - next) / prev < tol {
            break;
        }
    }
    Ok(KmeansFit {
        model: KmeansModel {
            centers,
            inertia: objective,
        },
        objective: trace,
        iterations,
    })
}

/// Hard-assignment histogram, L1 normalized. An empty set encodes to zeros.
pub fn bow_encode(desc: &DescriptorSet, model: &KmeansModel) -> Result<EncodedVector> {
    if desc.dim() != model.dim() {
        return Err(Error::DimMismatch {
            expected: model.dim(),
            found: desc.dim(),
        });
    }
    let mut hist = vec![0.0; model.k()];
    for row in desc.rows() {
        hist[model.nearest(row).0] += 1.0;
    }
    if !desc.is_empty() {
        let n = desc.len() as f64;
        hist.iter_mut().for_each(|v| *v /= n);
    }
    Ok(EncodedVector {
        kind: EncodingKind::Bow,
        values: hist,
    })
}

/// Diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Array2<f64>,
    pub variances: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Total data log-likelihood before the first M-step and after each one.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub variance_floor: f64,
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Per-component `ln w_k - 0.5 * sum_j ln(2 pi psi_kj)`.
    fn log_norms(&self) -> Vec<f64> {
        self.variances
            .outer_iter()
            .zip(&self.weights)
            .map(|(var, &w)| w.ln() - 0.5 * var.iter().map(|v| (std::f64::consts::TAU * v).ln()).sum::<f64>())
            .collect()
    }

    /// Posterior responsibilities of one sample, with small values floored.
    pub fn posteriors(&self, x: &[f64], mode: Posterior, out: &mut [f64]) {
        let norms = match mode {
            Posterior::Weighted => Some(self.log_norms()),
            Posterior::Printed => None,
        };
        self.posteriors_with(x, norms.as_deref(), out);
    }

    fn posteriors_with(&self, x: &[f64], norms: Option<&[f64]>, out: &mut [f64]) -> f64 {
        for k in 0..self.k() {
            let mu = self.means.row(k);
            let var = self.variances.row(k);
            let mut m = 0.0;
            for ((&xi, &mi), &vi) in x.iter().zip(mu.iter()).zip(var.iter()) {
                let d = xi - mi;
                m += d * d / vi;
            }
            out[k] = -0.5 * m + norms.map_or(0.0, |n| n[k]);
        }
        let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in out.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let lse = max + sum.ln();
        let mut kept = 0.0;
        for v in out.iter_mut() {
            *v /= sum;
            if *v < POSTERIOR_FLOOR {
                *v = 0.0;
            }
            kept += *v;
        }
        out.iter_mut().for_each(|v| *v /= kept);
        lse
    }

    pub fn to_container(&self) -> Container {
        let mut payload = self.weights.clone();
        payload.extend(self.means.iter());
        payload.extend(self.variances.iter());
        Container::new(ModelKind::Gmm, self.k(), self.dim(), payload)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let (k, d) = (c.k as usize, c.d as usize);
        c.expect_len(k + 2 * k * d)?;
        let p = &c.payload;
        Ok(Self {
            weights: p[..k].to_vec(),
            means: Array2::from_shape_vec((k, d), p[k..k + k * d].to_vec()).unwrap(),
            variances: Array2::from_shape_vec((k, d), p[k + k * d..].to_vec()).unwrap(),
        })
    }
}

/// Which posterior the Fisher encoder uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Posterior {
    /// Standard mixture posterior with weights and covariance determinants.
    #[default]
    Weighted,
    /// Softmax of the Mahalanobis terms only, without weights or normalizers.
    Printed,
}

/// EM for a diagonal GMM, initialized from k-means.
///
/// `variance_floor` defaults to `1e-4` times the mean per-dimension data
/// variance. Sufficient statistics are accumulated in a single pass so memory
/// stays `O(K D)`. Returns [`Error::LikelihoodDecreased`] if an EM step lowers
/// the likelihood by more than `1e-9` relative.
pub fn gmm_fit(
    data: ArrayView2<f64>,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
    variance_floor: Option<f64>,
) -> Result<GmmFit> {
    let (n, d) = data.dim();
    if k == 0 || n < 2 * k {
        return Err(Error::TooFewPoints { points: n, required: 2 * k.max(1) });
    }
    let data = data.as_standard_layout();
    let data = data.view();
    let var = data.var_axis(Axis(0), 0.0);
    if var.iter().all(|&v| v <= 0.0) {
        return Err(Error::DegenerateData);
    }
    let floor = variance_floor.unwrap_or(1e-4 * var.mean().unwrap());

    let km = kmeans_fit(data, k, seed, 50, 1e-6)?;
    let mut stats = Stats::new(k, d);
    for x in data.outer_iter() {
        let x = x.to_slice().unwrap();
        let (c, _) = km.model.nearest(x);
        stats.add(c, 1.0, x);
    }
    let mut model = stats.m_step(n, floor, None);

    let mut resp = vec![0.0; k];
    let e_step = |model: &GmmModel, resp: &mut [f64]| {
        let norms = model.log_norms();
        let mut stats = Stats::new(k, d);
        let mut ll = 0.0;
        for x in data.outer_iter() {
            let x = x.to_slice().unwrap();
            ll += model.posteriors_with(x, Some(&norms), resp);
            for (c, &q) in resp.iter().enumerate() {
                if q > 0.0 {
                    stats.add(c, q, x);
                }
            }
        }
        (stats, ll)
    };
    let (mut stats, mut ll) = e_step(&model, &mut resp);
    let mut trace = vec![ll];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        model = stats.m_step(n, floor, Some(&model));
        let (next_stats, next_ll) = e_step(&model, &mut resp);
        trace.push(next_ll);
        if next_ll < ll - 1e-9 * ll.abs() {
            return Err(Error::LikelihoodDecreased {
                iteration: iterations,
                previous: ll,
                current: next_ll,
            });
        }
        let gain = next_ll - ll;
        stats = next_stats;
        let prev = ll;
        ll = next_ll;
        if gain <= tol * prev.abs() {
            break;
        }
    }
    Ok(GmmFit {
        model,
        log_likelihood: trace,
        iterations,
        variance_floor: floor,
    })
}

struct Stats {
    mass: Vec<f64>,
    sum: Array2<f64>,
    sum_sq: Array2<f64>,
}

impl Stats {
    fn new(k: usize, d: usize) -> Self {
        Self {
            mass: vec![0.0; k],
            sum: Array2::zeros((k, d)),
            sum_sq: Array2::zeros((k, d)),
        }
    }

    #[inline]
    fn add(&mut self, c: usize, q: f64, x: &[f64]) {
        self.mass[c] += q;
        let mut s = self.sum.row_mut(c);
        let s = s.as_slice_mut().unwrap();
        let mut s2 = self.sum_sq.row_mut(c);
        let s2 = s2.as_slice_mut().unwrap();
        for ((a, b), &v) in s.iter_mut().zip(s2.iter_mut()).zip(x) {
            *a += q * v;
            *b += q * v * v;
        }
    }

    /// Weighted maximum-likelihood parameters; components without mass keep
    /// their previous mean and variance.
    fn m_step(&self, n: usize, floor: f64, previous: Option<&GmmModel>) -> GmmModel {
        let (k, d) = self.sum.dim();
        let mut weights = vec![0.0; k];
        let mut means = Array2::zeros((k, d));
        let mut variances = Array2::zeros((k, d));
        for c in 0..k {
            let m = self.mass[c];
            if m <= 1e-10 {
                if let Some(p) = previous {
                    means.row_mut(c).assign(&p.means.row(c));
                    variances.row_mut(c).assign(&p.variances.row(c));
                } else {
                    variances.row_mut(c).fill(floor.max(1.0));
                }
                weights[c] = 1e-10;
                continue;
            }
            weights[c] = m / n as f64;
            for j in 0..d {
                let mu = self.sum[[c, j]] / m;
                let v = self.sum_sq[[c, j]] / m - mu * mu;
                means[[c, j]] = mu;
                variances[[c, j]] = v.max(floor);
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        GmmModel {
            weights,
            means,
            variances,
        }
    }
}

/// Fisher vector: all mean-deviation blocks `u_k`, then all variance-deviation
/// blocks `v_k`, each averaged over the `N` descriptors. Dimension `2 K D`.
pub fn fisher_vector(desc: &DescriptorSet, gmm: &GmmModel, posterior: Posterior) -> Result<EncodedVector> {
    let (k, d) = (gmm.k(), gmm.dim());
    if desc.dim() != d {
        return Err(Error::DimMismatch {
            expected: d,
            found: desc.dim(),
        });
    }
    if desc.is_empty() {
        return Err(Error::EmptySet);
    }
    let norms = match posterior {
        Posterior::Weighted => Some(gmm.log_norms()),
        Posterior::Printed => None,
    };
    let inv_sigma = gmm.variances.mapv(|v| 1.0 / v.sqrt());
    let mut u = vec![0.0; k * d];
    let mut v = vec![0.0; k * d];
    let mut q = vec![0.0; k];
    for x in desc.rows() {
        gmm.posteriors_with(x, norms.as_deref(), &mut q);
        for c in 0..k {
            let qc = q[c];
            if qc == 0.0 {
                continue;
            }
            let mu = gmm.means.row(c);
            let is = inv_sigma.row(c);
            let ub = &mut u[c * d..(c + 1) * d];
            let vb = &mut v[c * d..(c + 1) * d];
            for j in 0..d {
                let z = (x[j] - mu[j]) * is[j];
                ub[j] += qc * z;
                vb[j] += qc * (z * z - 1.0);
            }
        }
    }
    let n = desc.len() as f64;
    for c in 0..k {
        let su = 1.0 / (n * gmm.weights[c].sqrt());
        let sv = 1.0 / (n * (2.0 * gmm.weights[c]).sqrt());
        u[c * d..(c + 1) * d].iter_mut().for_each(|x| *x *= su);
        v[c * d..(c + 1) * d].iter_mut().for_each(|x| *x *= sv);
    }
    u.extend(v);
    Ok(EncodedVector {
        kind: EncodingKind::Fv,
        values: u,
    })
}

/// Signed square root followed by L2 normalization; zero stays zero.
pub fn ifv_normalize(fv: &EncodedVector) -> EncodedVector {
    let mut values: Vec<f64> = fv.values.iter().map(|&z| z.signum() * z.abs().sqrt()).collect();
    // signum(0.0) is 1.0 but sqrt(0) keeps zeros at zero
    let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        values.iter_mut().for_each(|x| *x /= norm);
    }
    EncodedVector {
        kind: EncodingKind::Ifv,
        values,
    }
}

/// Uniform random subsample of at most `cap` rows, in original order.
pub fn subsample_rows(rows: usize, cap: usize, rng: &mut impl Rng) -> Vec<usize> {
    if rows <= cap {
        return (0..rows).collect();
    }
    let mut idx = rand::seq::index::sample(rng, rows, cap).into_vec();
    idx.sort_unstable();
    idx
}
