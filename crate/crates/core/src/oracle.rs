//! Closed-form forward OU diffusion of mixtures, exact scores and Hessians of
//! the diffused law, and the score-source abstraction consumed by the sampler
//! and the trainer.
//!
//! Under dy = -y dt + sqrt(2) dB the law at time t of a Gaussian component
//! N(mu, Sigma) is N(e^{-t} mu, e^{-2t} Sigma + (1 - e^{-2t}) I); mixtures
//! diffuse componentwise with unchanged weights.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gauss::{Gaussian, GaussianMixture};
use crate::patches::{Condition, PatchLayout};
use crate::rng::{NormalStream, SeedPath};

/// A mixture together with its law diffused to time t.
#[derive(Clone, Debug)]
pub struct DiffusedLaw {
    base: GaussianMixture,
    t: f64,
    diffused: GaussianMixture,
}

/// Forward OU diffusion of a mixture, exact.
pub fn diffuse(gm: &GaussianMixture, t: f64) -> Result<DiffusedLaw> {
    if t.is_nan() || t < 0.0 {
        return Err(Error::NegativeTime { t });
    }
    let diffused = if t == 0.0 {
        gm.clone()
    } else {
        let decay = (-t).exp();
        let var_mix = 1.0 - (-2.0 * t).exp();
        let n = gm.dim();
        let eye = DMatrix::<f64>::identity(n, n);
        let components = gm
            .components()
            .iter()
            .map(|c| Gaussian::new(c.mean() * decay, c.cov() * (decay * decay) + &eye * var_mix))
            .collect::<Result<Vec<_>>>()?;
        GaussianMixture::new(gm.weights().to_vec(), components)?
    };
    Ok(DiffusedLaw {
        base: gm.clone(),
        t,
        diffused,
    })
}

impl DiffusedLaw {
    pub fn base(&self) -> &GaussianMixture {
        &self.base
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn law(&self) -> &GaussianMixture {
        &self.diffused
    }

    /// grad ln q_t(y).
    pub fn score(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.diffused.score(y)
    }

    /// Exact Hessian of ln q_t(y).
    pub fn score_hessian(&self, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.diffused.log_density_hessian(y)
    }
}

/// Evaluable conditional score s(y | t, z).
pub trait ScoreSource: Send + Sync {
    /// Dimension of the patch this source scores.
    fn patch_dim(&self) -> usize;

    /// Score of the diffused conditional law at (y, t, z); t is the remaining
    /// forward time (strictly positive along any schedule).
    fn score(&self, y: &DVector<f64>, t: f64, z: &Condition) -> Result<DVector<f64>>;
}

/// Exact conditional score oracle for patch `stage` of a joint mixture.
///
/// The conditioning map is the identity: z is the raw generated prefix.
/// Conditioning results are memoized per z; the table is insert-once, so
/// concurrent readers are safe and writers serialize on first insertion.
pub struct ConditionalOracle {
    joint: GaussianMixture,
    layout: PatchLayout,
    stage: usize,
    cache: RwLock<HashMap<Vec<u64>, Arc<GaussianMixture>>>,
}

impl ConditionalOracle {
    pub fn new(joint: GaussianMixture, layout: PatchLayout, stage: usize) -> Result<Self> {
        if joint.dim() != layout.total_dim() {
            return Err(Error::DimensionMismatch {
                what: "layout",
                expected: joint.dim(),
                got: layout.total_dim(),
            });
        }
        layout.patch_dim(stage)?;
        Ok(Self {
            joint,
            layout,
            stage,
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn joint(&self) -> &GaussianMixture {
        &self.joint
    }

    /// The conditional mixture for a given prefix, memoized.
    pub fn conditional(&self, z: &Condition) -> Result<Arc<GaussianMixture>> {
        let key: Vec<u64> = match z {
            Condition::None => Vec::new(),
            Condition::Prefix(x) => x.iter().map(|v| v.to_bits()).collect(),
        };
        if let Some(hit) = self.cache.read().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let cond = Arc::new(self.joint.conditional(&self.layout, self.stage, z)?);
        let mut w = self.cache.write().expect("cache lock");
        Ok(w.entry(key).or_insert(cond).clone())
    }
}

impl ScoreSource for ConditionalOracle {
    fn patch_dim(&self) -> usize {
        self.layout.dims()[self.stage - 1]
    }

    fn score(&self, y: &DVector<f64>, t: f64, z: &Condition) -> Result<DVector<f64>> {
        let cond = self.conditional(z)?;
        diffuse(&cond, t)?.score(y)
    }
}

/// How a perturbed source deviates from its base.
#[derive(Clone, Copy, Debug)]
pub enum PerturbMode {
    /// s + eps * u with u a fixed unit vector per stage, drawn
    /// deterministically from the seed. The bias is state-independent, so
    /// E||s~ - s||^2 = eps^2 identically.
    ConstantBias { seed: u64 },
    /// The score rotated by a fixed angle in the (e1, e2) plane, with the
    /// perturbation rescaled so ||s~ - s|| = eps pointwise. Dims >= 2.
    Rotational { angle: f64 },
}

/// Deterministic unit bias direction for a stage.
pub fn bias_direction(seed: u64, stage: usize, dim: usize) -> DVector<f64> {
    let mut stream = NormalStream::new(SeedPath::root(seed).child(0xB1A5).child(stage as u64));
    loop {
        let v = stream.normal_vector(dim);
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// A score source with a prescribed score error of exactly `eps` (RMS).
pub struct PerturbedScore {
    base: Arc<dyn ScoreSource>,
    eps: f64,
    mode: PerturbMode,
    stage: usize,
}

impl PerturbedScore {
    pub fn new(
        base: Arc<dyn ScoreSource>,
        eps: f64,
        mode: PerturbMode,
        stage: usize,
    ) -> Result<Self> {
        if eps.is_nan() || eps < 0.0 {
            return Err(Error::NegativeEps { eps });
        }
        if matches!(mode, PerturbMode::Rotational { .. }) && base.patch_dim() < 2 {
            return Err(Error::InvalidInput {
                what: "perturbation mode",
                why: "rotational mode needs patch dim >= 2".into(),
            });
        }
        Ok(Self {
            base,
            eps,
            mode,
            stage,
        })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }
}

impl ScoreSource for PerturbedScore {
    fn patch_dim(&self) -> usize {
        self.base.patch_dim()
    }

    fn score(&self, y: &DVector<f64>, t: f64, z: &Condition) -> Result<DVector<f64>> {
        let s = self.base.score(y, t, z)?;
        if self.eps == 0.0 {
            return Ok(s);
        }
        match self.mode {
            PerturbMode::ConstantBias { seed } => {
                let u = bias_direction(seed, self.stage, s.len());
                Ok(s + u * self.eps)
            }
            PerturbMode::Rotational { angle } => {
                let mut rotated = s.clone();
                let (sin, cos) = angle.sin_cos();
                rotated[0] = cos * s[0] - sin * s[1];
                rotated[1] = sin * s[0] + cos * s[1];
                let delta = &rotated - &s;
                let n = delta.norm();
                if n < 1e-14 {
                    // zero score has no direction to rotate; fall back to e1
                    let mut u = DVector::zeros(s.len());
                    u[0] = 1.0;
                    Ok(s + u * self.eps)
                } else {
                    Ok(&s + delta * (self.eps / n))
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::{central_gradient, central_jacobian};
    use approx::assert_relative_eq;

    fn mixture_2d() -> GaussianMixture {
        GaussianMixture::new(
            vec![0.4, 0.6],
            vec![
                Gaussian::new(
                    DVector::from_vec(vec![1.0, -0.5]),
                    DMatrix::from_row_slice(2, 2, &[0.9, 0.2, 0.2, 1.1]),
                )
                .unwrap(),
                Gaussian::new(
                    DVector::from_vec(vec![-1.2, 0.8]),
                    DMatrix::from_row_slice(2, 2, &[1.3, -0.3, -0.3, 0.7]),
                )
                .unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn diffuse_zero_time_is_identity() {
        let gm = mixture_2d();
        let law = diffuse(&gm, 0.0).unwrap();
        assert_eq!(law.law(), &gm);
    }

    #[test]
    fn diffuse_long_time_is_stationary() {
        let gm = mixture_2d();
        let law = diffuse(&gm, 40.0).unwrap();
        for c in law.law().components() {
            assert!(c.mean().norm() < 1e-15);
            assert!((c.cov() - DMatrix::identity(2, 2)).norm() < 1e-15);
        }
    }

    #[test]
    fn diffuse_rejects_negative_time() {
        assert!(diffuse(&mixture_2d(), -0.1).is_err());
    }

    #[test]
    fn diffuse_matches_euler_maruyama() {
        // N(3, 0.25) at t = ln 2 -> N(1.5, 0.8125); forward simulation check
        let g = GaussianMixture::single(Gaussian::scalar(3.0, 0.25).unwrap());
        let t = std::f64::consts::LN_2;
        let law = diffuse(&g, t).unwrap();
        assert_relative_eq!(law.law().components()[0].mean()[0], 1.5, epsilon = 1e-12);
        assert_relative_eq!(
            law.law().components()[0].cov()[(0, 0)],
            0.8125,
            epsilon = 1e-12
        );

        let n = 1_000_000usize;
        let dt = 1e-3;
        let steps = (t / dt).ceil() as usize;
        let dt = t / steps as f64;
        let root = SeedPath::root(2024);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for s in 0..n {
            let mut stream = NormalStream::new(root.child(s as u64));
            let mut y = 3.0 + 0.5 * stream.next_normal();
            for _ in 0..steps {
                y += -y * dt + (2.0 * dt).sqrt() * stream.next_normal();
            }
            sum += y;
            sumsq += y * y;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let se_mean = (0.8125f64).sqrt() / (n as f64).sqrt();
        let se_var = 0.8125 * (2.0 / (n as f64 - 1.0)).sqrt();
        // 3 sigma plus a small allowance for the Euler discretization bias
        assert!((mean - 1.5).abs() < 3.0 * se_mean + 2e-3, "mean {mean}");
        assert!((var - 0.8125).abs() < 3.0 * se_var + 2e-3, "var {var}");
    }

    #[test]
    fn stationary_score_is_negative_identity() {
        let g = GaussianMixture::single(Gaussian::standard(2));
        for &t in &[0.0, 0.3, 2.0, 10.0] {
            let law = diffuse(&g, t).unwrap();
            let y = DVector::from_vec(vec![0.7, -1.4]);
            assert!((law.score(&y).unwrap() + &y).norm() < 1e-12);
        }
    }

    #[test]
    fn single_gaussian_score_closed_form() {
        // score = -Sigma_t^{-1}(y - e^{-t} mu); isotropic case matches the
        // sigma_t^{-2} form
        let mu = 2.0;
        let s2 = 0.49;
        let g = GaussianMixture::single(Gaussian::scalar(mu, s2).unwrap());
        let t = 0.8;
        let law = diffuse(&g, t).unwrap();
        let var_t = (-2.0 * t).exp() * s2 + 1.0 - (-2.0 * t).exp();
        let y = DVector::from_vec(vec![0.3]);
        let expect = -(y[0] - (-t).exp() * mu) / var_t;
        assert_relative_eq!(law.score(&y).unwrap()[0], expect, max_relative = 1e-12);

        let h = law.score_hessian(&y).unwrap();
        assert_relative_eq!(h[(0, 0)], -1.0 / var_t, max_relative = 1e-12);
    }

    #[test]
    fn mixture_score_and_hessian_match_finite_differences() {
        let gm = mixture_2d();
        let law = diffuse(&gm, 0.6).unwrap();
        let mut stream = NormalStream::new(SeedPath::root(4));
        let mut max_rel_score = 0.0f64;
        let mut max_rel_hess = 0.0f64;
        for _ in 0..200 {
            let y = DVector::from_fn(2, |_, _| 3.0 * stream.next_normal());
            let s = law.score(&y).unwrap();
            let fd = central_gradient(|v| law.law().log_density(v).unwrap(), &y, 1e-5);
            max_rel_score = max_rel_score.max((&s - &fd).norm() / fd.norm().max(1e-8));

            let h = law.score_hessian(&y).unwrap();
            assert!((&h - h.transpose()).norm() < 1e-10);
            let fd_h = central_jacobian(|v| law.score(v).unwrap(), &y, 1e-5);
            max_rel_hess = max_rel_hess.max((&h - &fd_h).norm() / fd_h.norm().max(1e-8));
        }
        assert!(max_rel_score < 1e-5, "score rel err {max_rel_score}");
        assert!(max_rel_hess < 1e-4, "hessian rel err {max_rel_hess}");
    }

    #[test]
    fn score_field_is_conservative() {
        // finite-difference curl in 2-D at random points
        let law = diffuse(&mixture_2d(), 0.4).unwrap();
        let mut stream = NormalStream::new(SeedPath::root(11));
        for _ in 0..50 {
            let y = DVector::from_fn(2, |_, _| 2.5 * stream.next_normal());
            let h = 1e-5;
            let mut yh = y.clone();
            yh[1] += h;
            let mut yl = y.clone();
            yl[1] -= h;
            let ds0_dy1 = (law.score(&yh).unwrap()[0] - law.score(&yl).unwrap()[0]) / (2.0 * h);
            let mut xh = y.clone();
            xh[0] += h;
            let mut xl = y.clone();
            xl[0] -= h;
            let ds1_dy0 = (law.score(&xh).unwrap()[1] - law.score(&xl).unwrap()[1]) / (2.0 * h);
            assert!((ds0_dy1 - ds1_dy0).abs() < 1e-4);
        }
    }

    #[test]
    fn conditional_oracle_block_diagonal_ignores_condition() {
        let layout = PatchLayout::new(vec![1, 1]).unwrap();
        let joint = GaussianMixture::single(
            Gaussian::new(
                DVector::from_vec(vec![0.5, -0.5]),
                DMatrix::from_row_slice(2, 2, &[1.5, 0.0, 0.0, 0.8]),
            )
            .unwrap(),
        );
        let oracle = ConditionalOracle::new(joint.clone(), layout.clone(), 2).unwrap();
        let uncond = joint.marginal(&layout, 2, 2).unwrap();
        let y = DVector::from_vec(vec![0.2]);
        for &c in &[-2.0, 0.0, 3.0] {
            let z = Condition::Prefix(DVector::from_vec(vec![c]));
            let s = oracle.score(&y, 0.5, &z).unwrap();
            let expect = diffuse(&uncond, 0.5).unwrap().score(&y).unwrap();
            assert_relative_eq!(s[0], expect[0], max_relative = 1e-12);
        }
    }

    #[test]
    fn conditional_oracle_causal_preset() {
        // joint cov [[1,1],[1,1+s2]]: patch-2 conditional is N(c, s2), so the
        // diffused conditional score is that of N(e^{-t} c, e^{-2t} s2 + 1 - e^{-2t})
        let s2 = 0.36;
        let layout = PatchLayout::new(vec![1, 1]).unwrap();
        let joint = GaussianMixture::single(
            Gaussian::new(
                DVector::zeros(2),
                DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 + s2]),
            )
            .unwrap(),
        );
        let oracle = ConditionalOracle::new(joint, layout, 2).unwrap();
        let c = -0.9;
        let t = 1.1f64;
        let z = Condition::Prefix(DVector::from_vec(vec![c]));
        let y = DVector::from_vec(vec![0.4]);
        let var_t = (-2.0 * t).exp() * s2 + 1.0 - (-2.0 * t).exp();
        let expect = -(y[0] - (-t).exp() * c) / var_t;
        assert_relative_eq!(
            oracle.score(&y, t, &z).unwrap()[0],
            expect,
            max_relative = 1e-12
        );
    }

    #[test]
    fn oracle_score_near_zero_time_approaches_conditional_score() {
        let layout = PatchLayout::new(vec![1, 1]).unwrap();
        let joint = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![
                Gaussian::new(
                    DVector::from_vec(vec![0.0, 1.0]),
                    DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.0]),
                )
                .unwrap(),
                Gaussian::new(
                    DVector::from_vec(vec![1.0, -1.0]),
                    DMatrix::from_row_slice(2, 2, &[0.8, -0.2, -0.2, 1.2]),
                )
                .unwrap(),
            ],
        )
        .unwrap();
        let oracle = ConditionalOracle::new(joint.clone(), layout.clone(), 2).unwrap();
        let z = Condition::Prefix(DVector::from_vec(vec![0.3]));
        let cond = joint.conditional(&layout, 2, &z).unwrap();
        let y = DVector::from_vec(vec![-0.5]);
        let s = oracle.score(&y, 1e-6, &z).unwrap();
        let s0 = cond.score(&y).unwrap();
        assert!((s[0] - s0[0]).abs() / s0[0].abs().max(1e-8) < 1e-3);
    }

    #[test]
    fn perturb_zero_eps_is_identity() {
        let layout = PatchLayout::new(vec![1, 1]).unwrap();
        let joint = GaussianMixture::single(Gaussian::standard(2));
        let base: Arc<dyn ScoreSource> =
            Arc::new(ConditionalOracle::new(joint, layout, 2).unwrap());
        let p = PerturbedScore::new(base.clone(), 0.0, PerturbMode::ConstantBias { seed: 1 }, 2)
            .unwrap();
        let z = Condition::Prefix(DVector::from_vec(vec![0.5]));
        let y = DVector::from_vec(vec![1.0]);
        assert_eq!(
            p.score(&y, 0.7, &z).unwrap(),
            base.score(&y, 0.7, &z).unwrap()
        );
    }

    #[test]
    fn constant_bias_error_is_exact() {
        // measured mean squared deviation equals eps^2 with zero variance
        let layout = PatchLayout::new(vec![1]).unwrap();
        let joint = GaussianMixture::single(Gaussian::scalar(0.0, 1.0).unwrap());
        let base: Arc<dyn ScoreSource> =
            Arc::new(ConditionalOracle::new(joint, layout, 1).unwrap());
        let p = PerturbedScore::new(base.clone(), 0.1, PerturbMode::ConstantBias { seed: 3 }, 1)
            .unwrap();
        let mut stream = NormalStream::new(SeedPath::root(6));
        for _ in 0..100 {
            let y = DVector::from_vec(vec![stream.next_normal()]);
            let d = p.score(&y, 0.9, &Condition::None).unwrap()
                - base.score(&y, 0.9, &Condition::None).unwrap();
            assert_relative_eq!(d.norm_squared(), 0.01, max_relative = 1e-12);
        }
    }

    #[test]
    fn rotational_error_is_exact_and_needs_2d() {
        let layout = PatchLayout::new(vec![2]).unwrap();
        let joint = GaussianMixture::single(Gaussian::standard(2));
        let base: Arc<dyn ScoreSource> =
            Arc::new(ConditionalOracle::new(joint.clone(), layout, 1).unwrap());
        let p = PerturbedScore::new(
            base.clone(),
            0.25,
            PerturbMode::Rotational { angle: 0.05 },
            1,
        )
        .unwrap();
        let y = DVector::from_vec(vec![1.0, -2.0]);
        let d = p.score(&y, 0.5, &Condition::None).unwrap()
            - base.score(&y, 0.5, &Condition::None).unwrap();
        assert_relative_eq!(d.norm(), 0.25, max_relative = 1e-12);

        let layout1 = PatchLayout::new(vec![1]).unwrap();
        let joint1 = GaussianMixture::single(Gaussian::scalar(0.0, 1.0).unwrap());
        let base1: Arc<dyn ScoreSource> =
            Arc::new(ConditionalOracle::new(joint1, layout1, 1).unwrap());
        assert!(
            PerturbedScore::new(base1, 0.1, PerturbMode::Rotational { angle: 0.05 }, 1).is_err()
        );
    }

    #[test]
    fn negative_eps_rejected() {
        let layout = PatchLayout::new(vec![1]).unwrap();
        let joint = GaussianMixture::single(Gaussian::scalar(0.0, 1.0).unwrap());
        let base: Arc<dyn ScoreSource> =
            Arc::new(ConditionalOracle::new(joint, layout, 1).unwrap());
        assert!(matches!(
            PerturbedScore::new(base, -0.1, PerturbMode::ConstantBias { seed: 0 }, 1),
            Err(Error::NegativeEps { .. })
        ));
    }
}
