//! Stand-alone verification suites: the Gaussian counterexample pair whose
//! joint KL is small while the conditional KL blows up, the
//! initialization-error bound along the forward flow, and the AR-vs-joint
//! conditional comparison on exactly solvable targets.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{kl_divergence, Gaussian, GaussianMixture};
use crate::oracle::diffuse;
use crate::patches::PatchLayout;
use crate::quad::expect_gaussian_1d;
use crate::sampler::{exact_pushforward, BiasSpec, DriftGain};
use crate::schedule::{init_error_bound, TimeSchedule};

/// Parameters of the counterexample pair. The joint is ordered (y, x) with
/// dim(y) <= dim(x) so the truncated identity satisfies I I^T = I.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CounterexampleSpec {
    pub eps: f64,
    /// The conditional-gap scale M.
    pub magnitude: f64,
    pub d_y: usize,
    pub d_x: usize,
}

impl CounterexampleSpec {
    fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps <= 0.5) {
            return Err(Error::InvalidInput {
                what: "counterexample eps",
                why: format!("must lie in (0, 1/2], got {}", self.eps),
            });
        }
        if self.d_y == 0 || self.d_y > self.d_x {
            return Err(Error::InvalidInput {
                what: "counterexample dims",
                why: format!("need 1 <= d_y <= d_x, got ({}, {})", self.d_y, self.d_x),
            });
        }
        if self.magnitude == 0.0 {
            return Err(Error::InvalidInput {
                what: "counterexample magnitude",
                why: "M must be nonzero".into(),
            });
        }
        Ok(())
    }

    pub fn total_dim(&self) -> usize {
        self.d_x + self.d_y
    }

    /// The off-diagonal coupling eps / (d M).
    fn coupling(&self) -> f64 {
        self.eps / (self.total_dim() as f64 * self.magnitude)
    }
}

/// The two joints plus their closed-form conditionals.
#[derive(Clone, Debug)]
pub struct CounterexamplePair {
    pub spec: CounterexampleSpec,
    /// p*: the (y, x) joint with the (1 + eps)-inflated x block.
    pub target: Gaussian,
    /// p-hat: the reference joint.
    pub approx: Gaussian,
}

fn truncated_identity(rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |i, j| if i == j { 1.0 } else { 0.0 })
}

fn counterexample_cov(spec: &CounterexampleSpec, inflate: bool) -> DMatrix<f64> {
    let (dy, dx) = (spec.d_y, spec.d_x);
    let n = dy + dx;
    let c = spec.coupling();
    let xx = 2.0 * c * c * if inflate { 1.0 + spec.eps } else { 1.0 };
    let mut cov = DMatrix::zeros(n, n);
    for i in 0..dy {
        cov[(i, i)] = 1.0;
    }
    for i in 0..dy {
        cov[(i, dy + i)] = c;
        cov[(dy + i, i)] = c;
    }
    for i in 0..dx {
        cov[(dy + i, dy + i)] = xx;
    }
    cov
}

/// Construct the pair. Both joints pass the positive-definiteness check: the
/// Schur complement on the x block is eps^2 (1 + 2 eps) / (d M)^2 on the
/// coupled coordinates and strictly positive on the rest.
pub fn build_counterexample(spec: &CounterexampleSpec) -> Result<CounterexamplePair> {
    spec.validate()?;
    let n = spec.total_dim();
    let target = Gaussian::new(DVector::zeros(n), counterexample_cov(spec, true))?;
    let approx = Gaussian::new(DVector::zeros(n), counterexample_cov(spec, false))?;
    Ok(CounterexamplePair {
        spec: *spec,
        target,
        approx,
    })
}

impl CounterexamplePair {
    fn check_probe(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.spec.d_x {
            return Err(Error::DimensionMismatch {
                what: "probe",
                expected: self.spec.d_x,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// p*(y | x) = N(dM/(2 eps (1+eps)) I x, (1 + eps/(1+eps))/2 I).
    pub fn target_conditional(&self, x: &DVector<f64>) -> Result<Gaussian> {
        self.check_probe(x)?;
        let s = &self.spec;
        let d = s.total_dim() as f64;
        let gain = d * s.magnitude / (2.0 * s.eps * (1.0 + s.eps));
        let var = 0.5 * (1.0 + s.eps / (1.0 + s.eps));
        let mean = truncated_identity(s.d_y, s.d_x) * x * gain;
        Gaussian::new(mean, DMatrix::identity(s.d_y, s.d_y) * var)
    }

    /// p-hat(y | x) = N(dM/(2 eps) I x, I/2).
    pub fn approx_conditional(&self, x: &DVector<f64>) -> Result<Gaussian> {
        self.check_probe(x)?;
        let s = &self.spec;
        let d = s.total_dim() as f64;
        let gain = d * s.magnitude / (2.0 * s.eps);
        let mean = truncated_identity(s.d_y, s.d_x) * x * gain;
        Gaussian::new(mean, DMatrix::identity(s.d_y, s.d_y) * 0.5)
    }

    /// The joint with blocks swapped to (x, y) order, for cross-checking the
    /// closed-form conditionals against generic prefix conditioning.
    pub fn permuted(&self, inflate: bool) -> Result<Gaussian> {
        let s = &self.spec;
        let src = if inflate { &self.target } else { &self.approx };
        let (dy, dx) = (s.d_y, s.d_x);
        let n = dy + dx;
        let perm = |i: usize| if i < dx { dy + i } else { i - dx };
        let cov = DMatrix::from_fn(n, n, |i, j| src.cov()[(perm(i), perm(j))]);
        Gaussian::new(DVector::zeros(n), cov)
    }
}

/// Exact joint and conditional KLs against their stated thresholds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CounterexampleReport {
    pub kl_joint: f64,
    pub kl_cond: f64,
    /// Mean-difference part of the conditional KL; grows exactly like M^2.
    pub kl_cond_mean_term: f64,
    /// Covariance part; independent of M and of the probe.
    pub kl_cond_cov_term: f64,
    /// eps * d, the lemma's rescaled joint threshold.
    pub joint_budget: f64,
    /// M^2 ||x restricted to the first d_y coordinates||^2, the literal floor.
    pub cond_floor: f64,
    pub passes_joint: bool,
    pub passes_cond: bool,
}

pub fn check_counterexample(
    spec: &CounterexampleSpec,
    x_probe: &DVector<f64>,
) -> Result<CounterexampleReport> {
    let pair = build_counterexample(spec)?;
    let kl_joint = kl_divergence(&pair.target, &pair.approx)?;
    let p = pair.target_conditional(x_probe)?;
    let q = pair.approx_conditional(x_probe)?;
    let kl_cond = kl_divergence(&p, &q)?;
    // with q-cov = I/2 the mean term is just ||dmu||^2
    let dmu = q.mean() - p.mean();
    let kl_cond_mean_term = dmu.norm_squared();
    let kl_cond_cov_term = kl_cond - kl_cond_mean_term;
    let d = spec.total_dim() as f64;
    let joint_budget = spec.eps * d;
    let probe_head = x_probe.rows(0, spec.d_y).norm_squared();
    let cond_floor = spec.magnitude * spec.magnitude * probe_head;
    Ok(CounterexampleReport {
        kl_joint,
        kl_cond,
        kl_cond_mean_term,
        kl_cond_cov_term,
        joint_budget,
        cond_floor,
        passes_joint: kl_joint <= joint_budget,
        passes_cond: kl_cond > cond_floor,
    })
}

/// One row of the initialization-error sweep.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct InitErrorRow {
    pub t: f64,
    pub exact_kl: f64,
    pub bound: f64,
    pub dominated: bool,
}

/// Exact KL(q_t || N(0, I)) against the budget e^{-2t}(2 L d + E||y||^2)
/// over a time grid, for a single-Gaussian conditional with certified L.
pub fn init_error_sweep(target: &Gaussian, l: f64, t_grid: &[f64]) -> Result<Vec<InitErrorRow>> {
    let d = target.dim();
    let m = target.second_moment();
    let standard = Gaussian::standard(d);
    let gm = GaussianMixture::single(target.clone());
    t_grid
        .iter()
        .map(|&t| {
            let law = diffuse(&gm, t)?;
            let exact_kl = kl_divergence(&law.law().components()[0], &standard)?;
            let bound = init_error_bound(l, d as f64, m, t);
            Ok(InitErrorRow {
                t,
                exact_kl,
                bound,
                dominated: exact_kl <= bound,
            })
        })
        .collect()
}

/// Prefix-averaged KL between the trailing-block conditionals of two joints,
/// in closed form (the prefix is averaged under `p_joint`).
pub fn avg_conditional_kl(p_joint: &Gaussian, q_joint: &Gaussian, prefix: usize) -> Result<f64> {
    if p_joint.dim() != q_joint.dim() {
        return Err(Error::DimensionMismatch {
            what: "joints",
            expected: p_joint.dim(),
            got: q_joint.dim(),
        });
    }
    let pc = p_joint.conditional_affine(prefix)?;
    let qc = q_joint.conditional_affine(prefix)?;
    let dk = p_joint.dim() - prefix;
    let q_cov = Gaussian::new(DVector::zeros(dk), qc.cov.clone())?;
    let p_cov = Gaussian::new(DVector::zeros(dk), pc.cov.clone())?;
    let base = kl_divergence(&p_cov, &q_cov)?; // trace + logdet part
    let px = p_joint.marginal_block(0..prefix)?;
    let dgain = &pc.gain - &qc.gain;
    let doff = &pc.offset - &qc.offset;
    let q_prec = q_cov.precision();
    let at_mean = &doff + &dgain * px.mean();
    let mean_term = (at_mean.transpose() * &q_prec * &at_mean)[(0, 0)];
    let spread_term = (&q_prec * &dgain * px.cov() * dgain.transpose()).trace();
    Ok(base + 0.5 * (mean_term + spread_term))
}

/// Same average by Gauss-Hermite over a one-dimensional prefix.
pub fn avg_conditional_kl_gh(p_joint: &Gaussian, q_joint: &Gaussian) -> Result<f64> {
    let pc = p_joint.conditional_affine(1)?;
    let qc = q_joint.conditional_affine(1)?;
    let px = p_joint.marginal_block(0..1)?;
    Ok(expect_gaussian_1d(
        px.mean()[0],
        px.cov()[(0, 0)].sqrt(),
        64,
        |x1| {
            let xv = DVector::from_vec(vec![x1]);
            kl_divergence(&pc.at(&xv).unwrap(), &qc.at(&xv).unwrap()).unwrap()
        },
    ))
}

/// Joint-path (single-stage) versus AR-path generation of the same target:
/// exact output laws, joint KLs, and prefix-averaged conditional KLs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArVsJointReport {
    pub joint_path_kl: f64,
    pub ar_path_kl: f64,
    pub joint_path_cond_kl: f64,
    pub ar_path_cond_kl: f64,
}

pub fn ar_vs_joint_conditional(
    target: &Gaussian,
    layout: &PatchLayout,
    schedule: &TimeSchedule,
    joint_bias: Option<BiasSpec>,
    ar_bias: Option<BiasSpec>,
    gain: DriftGain,
) -> Result<(ArVsJointReport, Gaussian, Gaussian)> {
    if layout.patch_count() != 2 {
        return Err(Error::InvalidInput {
            what: "layout",
            why: "the comparison needs exactly two patches".into(),
        });
    }
    let d = target.dim();
    let flat = PatchLayout::new(vec![d])?;
    let joint_push = exact_pushforward(target, &flat, schedule, joint_bias, gain)?;
    let ar_push = exact_pushforward(target, layout, schedule, ar_bias, gain)?;
    let prefix = layout.prefix_dim(2)?;
    let report = ArVsJointReport {
        joint_path_kl: joint_push.kl,
        ar_path_kl: ar_push.kl,
        joint_path_cond_kl: avg_conditional_kl(target, &joint_push.output, prefix)?,
        ar_path_cond_kl: avg_conditional_kl(target, &ar_push.output, prefix)?,
    };
    Ok((report, joint_push.output, ar_push.output))
}
