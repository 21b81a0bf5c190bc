//! Full-covariance Gaussians and Gaussian mixtures with exact marginals,
//! conditionals, sampling, moments, and KL divergences.
//!
//! Covariances are stored dense with a cached Cholesky factor; dimensions are
//! desk-scale, so O(n^3) factorization is fine. Distributions are immutable
//! after construction and all operations are pure.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patches::{Condition, PatchLayout};
use crate::rng::{NormalStream, SeedPath};

const LN_TAU: f64 = 1.837877066409345483560659472811; // ln(2*pi)

/// Relative asymmetry above which a covariance is rejected.
const SYMMETRY_TOL: f64 = 1e-9;

/// Responsibilities below this are flushed to zero to avoid underflow NaNs.
const RESP_FLUSH: f64 = 1e-300;

#[derive(Serialize, Deserialize)]
struct GaussianData {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

/// Nondegenerate multivariate normal with cached Cholesky factor and
/// log-determinant.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "GaussianData", into = "GaussianData")]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    logdet: f64,
}

impl PartialEq for Gaussian {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.cov == other.cov
    }
}

impl TryFrom<GaussianData> for Gaussian {
    type Error = Error;
    fn try_from(d: GaussianData) -> Result<Self> {
        let n = d.mean.len();
        if d.cov.len() != n || d.cov.iter().any(|row| row.len() != n) {
            return Err(Error::DimensionMismatch {
                what: "covariance",
                expected: n,
                got: d.cov.len(),
            });
        }
        let cov = DMatrix::from_fn(n, n, |i, j| d.cov[i][j]);
        Gaussian::new(DVector::from_vec(d.mean), cov)
    }
}

impl From<Gaussian> for GaussianData {
    fn from(g: Gaussian) -> Self {
        let n = g.dim();
        GaussianData {
            mean: g.mean.iter().copied().collect(),
            cov: (0..n)
                .map(|i| (0..n).map(|j| g.cov[(i, j)]).collect())
                .collect(),
        }
    }
}

impl Gaussian {
    /// Validates symmetry (to 1e-9 relative), symmetrizes, and factorizes.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::DimensionMismatch {
                what: "covariance",
                expected: n,
                got: cov.nrows(),
            });
        }
        if mean.iter().any(|v| !v.is_finite()) || cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "gaussian parameters",
            });
        }
        let scale = cov.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let mut max_asym = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                max_asym = max_asym.max((cov[(i, j)] - cov[(j, i)]).abs());
            }
        }
        if max_asym > SYMMETRY_TOL * scale {
            return Err(Error::NotSymmetric {
                max_asymmetry: max_asym / scale,
            });
        }
        let sym = (&cov + cov.transpose()) * 0.5;
        let chol = nalgebra::Cholesky::new(sym.clone()).ok_or(Error::NotPositiveDefinite)?;
        let logdet = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>();
        Ok(Self {
            mean,
            cov: sym,
            chol,
            logdet,
        })
    }

    pub fn standard(n: usize) -> Self {
        Self::new(DVector::zeros(n), DMatrix::identity(n, n)).expect("identity is PD")
    }

    pub fn scalar(mean: f64, var: f64) -> Result<Self> {
        Self::new(
            DVector::from_vec(vec![mean]),
            DMatrix::from_vec(1, 1, vec![var]),
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Lower-triangular Cholesky factor of the covariance.
    pub fn chol_lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "evaluation point",
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_dim(x)?;
        let d = x - &self.mean;
        let q = d.dot(&self.chol.solve(&d));
        Ok(-0.5 * (self.dim() as f64 * LN_TAU + self.logdet + q))
    }

    /// Gradient of the log-density: -Sigma^{-1}(x - mu).
    pub fn score(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(x)?;
        Ok(-self.chol.solve(&(x - &self.mean)))
    }

    /// Precision matrix Sigma^{-1}.
    pub fn precision(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// Largest eigenvalue of the precision, i.e. 1 / lambda_min(Sigma).
    /// This is the exact Hessian bound for a single Gaussian.
    pub fn precision_lmax(&self) -> f64 {
        let eig = nalgebra::SymmetricEigen::new(self.cov.clone());
        1.0 / eig.eigenvalues.iter().fold(f64::INFINITY, |m, &v| m.min(v))
    }

    pub fn sample_one(&self, stream: &mut NormalStream) -> DVector<f64> {
        let xi = stream.normal_vector(self.dim());
        &self.mean + self.chol.l_dirty().lower_triangle() * xi
    }

    /// E ||x||^2 = ||mu||^2 + tr(Sigma).
    pub fn second_moment(&self) -> f64 {
        self.mean.norm_squared() + self.cov.trace()
    }

    /// Restriction to a contiguous coordinate block.
    pub fn marginal_block(&self, range: std::ops::Range<usize>) -> Result<Gaussian> {
        if range.end > self.dim() || range.start >= range.end {
            return Err(Error::DimensionMismatch {
                what: "marginal block",
                expected: self.dim(),
                got: range.end,
            });
        }
        let len = range.len();
        let mean = self.mean.rows(range.start, len).into_owned();
        let cov = self
            .cov
            .view((range.start, range.start), (len, len))
            .into_owned();
        Gaussian::new(mean, cov)
    }

    /// Affine form of the conditional law of the trailing block given the
    /// first `prefix_dim` coordinates.
    pub fn conditional_affine(&self, prefix_dim: usize) -> Result<AffineConditional> {
        let n = self.dim();
        if prefix_dim == 0 || prefix_dim >= n {
            return Err(Error::DimensionMismatch {
                what: "conditioning prefix",
                expected: n,
                got: prefix_dim,
            });
        }
        let p = prefix_dim;
        let q = n - p;
        let sxx = self.cov.view((0, 0), (p, p)).into_owned();
        let sxy = self.cov.view((0, p), (p, q)).into_owned();
        let syy = self.cov.view((p, p), (q, q)).into_owned();
        let chol_xx = nalgebra::Cholesky::new(sxx).ok_or(Error::ConditioningFailed)?;
        // W = Sigma_xx^{-1} Sigma_xy, gain = W^T = Sigma_yx Sigma_xx^{-1}.
        let w = chol_xx.solve(&sxy);
        let gain = w.transpose();
        let mu_x = self.mean.rows(0, p).into_owned();
        let mu_y = self.mean.rows(p, q).into_owned();
        let offset = &mu_y - &gain * &mu_x;
        let cov = &syy - sxy.transpose() * &w;
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(AffineConditional { gain, offset, cov })
    }

    /// Conditional law given the first `prefix_dim` coordinates equal `x`,
    /// together with log N(x; mu_x, Sigma_xx) for mixture reweighting.
    pub fn condition_on_prefix(&self, x: &DVector<f64>) -> Result<(Gaussian, f64)> {
        let p = x.len();
        let affine = self.conditional_affine(p)?;
        let marg_x = self.marginal_block(0..p)?;
        let lw = marg_x.log_density(x)?;
        Ok((affine.at(x)?, lw))
    }
}

/// Conditional of a Gaussian as an affine map: y | x ~ N(offset + gain x, cov).
#[derive(Clone, Debug)]
pub struct AffineConditional {
    pub gain: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl AffineConditional {
    pub fn at(&self, x: &DVector<f64>) -> Result<Gaussian> {
        Gaussian::new(&self.offset + &self.gain * x, self.cov.clone())
    }

    /// E over x ~ N(mu_x, cov_x) of ||offset + gain x||^2 + tr(cov).
    pub fn expected_second_moment(&self, mu_x: &DVector<f64>, cov_x: &DMatrix<f64>) -> f64 {
        let m = &self.offset + &self.gain * mu_x;
        m.norm_squared() + (&self.gain * cov_x * self.gain.transpose()).trace() + self.cov.trace()
    }
}

/// Exact KL divergence between two Gaussians of equal dimension.
pub fn kl_divergence(p: &Gaussian, q: &Gaussian) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            what: "kl operands",
            expected: p.dim(),
            got: q.dim(),
        });
    }
    let n = p.dim() as f64;
    let tr = q.chol.solve(&p.cov).trace();
    let d = &q.mean - &p.mean;
    let quad = d.dot(&q.chol.solve(&d));
    Ok(0.5 * (tr + quad - n + q.logdet - p.logdet))
}

/// Weighted full-covariance Gaussian mixture over one coordinate block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureData", into = "MixtureData")]
pub struct GaussianMixture {
    weights: Vec<f64>,
    components: Vec<Gaussian>,
}

#[derive(Serialize, Deserialize)]
struct MixtureData {
    weights: Vec<f64>,
    components: Vec<Gaussian>,
}

impl TryFrom<MixtureData> for GaussianMixture {
    type Error = Error;
    fn try_from(d: MixtureData) -> Result<Self> {
        GaussianMixture::new(d.weights, d.components)
    }
}

impl From<GaussianMixture> for MixtureData {
    fn from(m: GaussianMixture) -> Self {
        MixtureData {
            weights: m.weights,
            components: m.components,
        }
    }
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(Error::InvalidWeights {
                why: format!(
                    "{} weights for {} components",
                    weights.len(),
                    components.len()
                ),
            });
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::InvalidWeights {
                why: "weights must be finite and nonnegative".into(),
            });
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidWeights {
                why: format!("weights sum to {sum}, expected 1"),
            });
        }
        let dim = components[0].dim();
        if components.iter().any(|c| c.dim() != dim) {
            return Err(Error::DimensionMismatch {
                what: "mixture components",
                expected: dim,
                got: 0,
            });
        }
        let weights = weights.iter().map(|w| w / sum).collect();
        Ok(Self {
            weights,
            components,
        })
    }

    pub fn single(g: Gaussian) -> Self {
        Self {
            weights: vec![1.0],
            components: vec![g],
        }
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn component_count(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    /// log sum_i w_i N(x; mu_i, Sigma_i) via max-shifted log-sum-exp.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        let lps = self.component_log_terms(x)?;
        let m = lps.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        if !m.is_finite() {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(m + lps.iter().map(|lp| (lp - m).exp()).sum::<f64>().ln())
    }

    fn component_log_terms(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        self.weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| {
                Ok(if *w == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    w.ln() + c.log_density(x)?
                })
            })
            .collect()
    }

    /// Posterior component probabilities at x. Entries below 1e-300 are
    /// flushed to zero.
    pub fn responsibilities(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        let lps = self.component_log_terms(x)?;
        let m = lps.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut r: Vec<f64> = lps
            .iter()
            .map(|lp| {
                let v = (lp - m).exp();
                if v < RESP_FLUSH {
                    0.0
                } else {
                    v
                }
            })
            .collect();
        let s: f64 = r.iter().sum();
        for v in &mut r {
            *v /= s;
        }
        Ok(r)
    }

    /// Gradient of the log-density: sum_i r_i(x) * (-Sigma_i^{-1}(x - mu_i)).
    pub fn score(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let r = self.responsibilities(x)?;
        let mut s = DVector::zeros(self.dim());
        for (ri, c) in r.iter().zip(&self.components) {
            if *ri > 0.0 {
                s += c.score(x)? * *ri;
            }
        }
        Ok(s)
    }

    /// Exact Hessian of the log-density:
    /// sum_i r_i (H_i + s_i s_i^T) - s s^T with H_i = -Sigma_i^{-1}.
    pub fn log_density_hessian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let r = self.responsibilities(x)?;
        let n = self.dim();
        let mut h = DMatrix::zeros(n, n);
        let mut s = DVector::zeros(n);
        for (ri, c) in r.iter().zip(&self.components) {
            if *ri > 0.0 {
                let si = c.score(x)?;
                h += (&si * si.transpose() - c.precision()) * *ri;
                s += si * *ri;
            }
        }
        h -= &s * s.transpose();
        Ok((&h + h.transpose()) * 0.5)
    }

    /// One draw from the mixture: component index from the weight CDF, then
    /// mu_i + L_i xi.
    pub fn sample_one(&self, stream: &mut NormalStream) -> DVector<f64> {
        let u = stream.next_uniform();
        let mut acc = 0.0;
        let mut idx = self.components.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                idx = i;
                break;
            }
        }
        self.components[idx].sample_one(stream)
    }

    /// Deterministic sampling; sample s uses the sub-stream `path.child(s)`.
    pub fn sample(&self, n_samples: usize, path: SeedPath) -> Vec<DVector<f64>> {
        (0..n_samples)
            .map(|s| self.sample_one(&mut NormalStream::new(path.child(s as u64))))
            .collect()
    }

    /// Restriction of every component to the coordinates of patches l..r.
    pub fn marginal(&self, layout: &PatchLayout, l: usize, r: usize) -> Result<GaussianMixture> {
        if layout.total_dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "layout",
                expected: self.dim(),
                got: layout.total_dim(),
            });
        }
        let range = layout.coord_range(l, r)?;
        let components = self
            .components
            .iter()
            .map(|c| c.marginal_block(range.clone()))
            .collect::<Result<Vec<_>>>()?;
        GaussianMixture::new(self.weights.clone(), components)
    }

    /// Conditional law of patch k given patches 1..k-1. Future patches are
    /// marginalized out; component weights are reweighted by the prefix
    /// likelihood and renormalized.
    pub fn conditional(
        &self,
        layout: &PatchLayout,
        k: usize,
        given: &Condition,
    ) -> Result<GaussianMixture> {
        if layout.total_dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "layout",
                expected: self.dim(),
                got: layout.total_dim(),
            });
        }
        let prefix = layout.prefix_dim(k)?;
        if given.dim() != prefix {
            return Err(Error::DimensionMismatch {
                what: "condition",
                expected: prefix,
                got: given.dim(),
            });
        }
        if prefix == 0 {
            return self.marginal(layout, 1, 1);
        }
        let x = given.as_vector().expect("nonempty prefix");
        let up_to_k = self.marginal(layout, 1, k)?;
        let mut log_w = Vec::with_capacity(self.component_count());
        let mut conds = Vec::with_capacity(self.component_count());
        for (w, c) in up_to_k.weights.iter().zip(&up_to_k.components) {
            let (cond, lw) = c.condition_on_prefix(x)?;
            log_w.push(if *w == 0.0 {
                f64::NEG_INFINITY
            } else {
                w.ln() + lw
            });
            conds.push(cond);
        }
        let m = log_w.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut weights: Vec<f64> = log_w.iter().map(|lw| (lw - m).exp()).collect();
        let s: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= s;
        }
        GaussianMixture::new(weights, conds)
    }

    /// sum_i w_i (||mu_i||^2 + tr Sigma_i), exact.
    pub fn second_moment(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| w * c.second_moment())
            .sum()
    }

    /// Moment and smoothness report. The Hessian bound is exact (certified)
    /// for a single Gaussian; for mixtures it is an empirical sup over
    /// samples and probe-box corners and is flagged as an estimate.
    pub fn moment_report(&self, probe_radius: f64) -> Result<MomentReport> {
        let certified = self.component_count() == 1;
        let base = self
            .components
            .iter()
            .map(|c| c.precision_lmax())
            .fold(0.0f64, f64::max);
        let probes = self.probe_points(probe_radius);
        let mut sup_hess = 0.0f64;
        let mut sup_grad = 0.0f64;
        for x in &probes {
            let g = self.score(x)?;
            sup_grad = sup_grad.max(g.norm());
            if !certified {
                let h = self.log_density_hessian(x)?;
                let eig = nalgebra::SymmetricEigen::new(h);
                let spec = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
                sup_hess = sup_hess.max(spec);
            }
        }
        Ok(MomentReport {
            second_moment: self.second_moment(),
            lipschitz_bound: if certified { base } else { base.max(sup_hess) },
            lipschitz_certified: certified,
            grad_bound: sup_grad,
        })
    }

    fn probe_points(&self, radius: f64) -> Vec<DVector<f64>> {
        let n = self.dim();
        let path = SeedPath::root(0x4d4f_4d45_4e54); // fixed: report is deterministic
        let mut pts = self.sample(6144, path.child(0));
        // probe-box corners (capped) plus uniform box fill
        let corners = 1usize << n.min(11);
        for c in 0..corners {
            let v = DVector::from_fn(n, |i, _| {
                if i < 11 && (c >> i) & 1 == 1 {
                    radius
                } else {
                    -radius
                }
            });
            pts.push(v);
        }
        let mut stream = NormalStream::new(path.child(1));
        for _ in 0..4096 {
            pts.push(DVector::from_fn(n, |_, _| {
                (2.0 * stream.next_uniform() - 1.0) * radius
            }));
        }
        pts
    }
}

/// Second moment plus empirical smoothness bounds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MomentReport {
    /// E ||x||^2, exact.
    pub second_moment: f64,
    /// sup ||Hessian of ln p||; exact for single Gaussians, empirical sup
    /// otherwise.
    pub lipschitz_bound: f64,
    pub lipschitz_certified: bool,
    /// Empirical sup of ||grad ln p|| over the probe set.
    pub grad_bound: f64,
}

/// Monte-Carlo KL estimate with jackknife standard error.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct KlEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

/// E_{x~p}[log p(x) - log q(x)] by Monte Carlo.
pub fn kl_mixture_mc(
    p: &GaussianMixture,
    q: &GaussianMixture,
    n_samples: usize,
    path: SeedPath,
) -> Result<KlEstimate> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            what: "kl operands",
            expected: p.dim(),
            got: q.dim(),
        });
    }
    if n_samples < 100 {
        return Err(Error::InvalidInput {
            what: "n_samples",
            why: format!("need at least 100, got {n_samples}"),
        });
    }
    let xs = p.sample(n_samples, path);
    let mut vals = Vec::with_capacity(n_samples);
    for x in &xs {
        vals.push(p.log_density(x)? - q.log_density(x)?);
    }
    let n = n_samples as f64;
    let mean = vals.iter().sum::<f64>() / n;
    // Jackknife over leave-one-out means; for the sample mean this reduces
    // to s/sqrt(n).
    let var_jack = vals
        .iter()
        .map(|v| {
            let loo = (mean * n - v) / (n - 1.0);
            (loo - mean) * (loo - mean)
        })
        .sum::<f64>()
        * (n - 1.0)
        / n;
    Ok(KlEstimate {
        estimate: mean,
        std_error: var_jack.sqrt(),
        n_samples,
    })
}
