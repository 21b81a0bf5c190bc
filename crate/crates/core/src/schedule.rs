//! Three-regime time grid for the reverse process and the error-budget
//! formulas attached to it.
//!
//! The grid covers [0, T]: uniform steps on [0, T-1], geometrically shrinking
//! remaining time on [T-1, T-delta'], and a uniform tail on [T-delta', T].
//! All bound evaluators use an implied constant of 1 and are budget values,
//! not certified constants; tests check domination and scaling, never
//! equality with a measured quantity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which of the three construction regimes a step belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Uniform,
    Geometric,
    Tail,
}

/// Ascending grid t_0 = 0 .. t_R = T with step sizes and regime boundaries.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimeSchedule {
    total_time: f64,
    max_step: f64,
    requested_tail: f64,
    achieved_tail: f64,
    times: Vec<f64>,
    steps: Vec<f64>,
    uniform_end: usize,
    geometric_end: usize,
}

/// Largest admissible tail width for smoothness constant L:
/// ln sqrt((4L)^{-2} + 1) + (4L)^{-1}.
pub fn tail_admissible_max(l: f64) -> f64 {
    let inv = 1.0 / (4.0 * l);
    (inv * inv + 1.0).sqrt().ln() + inv
}

/// The alternative tail constant used by the step-size argument:
/// ln((sqrt(1/(4L^2) + 4) + 1/(2L)) / 2).
pub fn appendix_tail_constant(l: f64) -> f64 {
    (((1.0 / (4.0 * l * l) + 4.0).sqrt() + 1.0 / (2.0 * l)) / 2.0).ln()
}

impl TimeSchedule {
    /// Builds the grid. The requested tail width is replaced downstream by
    /// the achieved geometric landing point delta'.
    pub fn build(total_time: f64, max_step: f64, tail: f64, l: f64) -> Result<Self> {
        if total_time.is_nan() || total_time <= 1.0 {
            return Err(Error::Horizon {
                t_total: total_time,
            });
        }
        if !(max_step > 0.0 && max_step <= 1.0) {
            return Err(Error::StepSize { eta: max_step });
        }
        let max_tail = tail_admissible_max(l);
        if !(tail > 0.0 && tail <= max_tail) {
            return Err(Error::TailWidth {
                delta: tail,
                max: max_tail,
            });
        }
        let t = total_time;
        let eta = max_step;

        // regime 1: uniform steps covering [0, T-1], step shrunk to fit
        let n1 = ((t - 1.0) / eta).ceil().max(1.0) as usize;
        let h1 = (t - 1.0) / n1 as f64;
        let mut times: Vec<f64> = (0..n1).map(|i| i as f64 * h1).collect();
        times.push(t - 1.0);

        // regime 2: remaining time decays by (1+eta) per step until <= tail
        let mut n2 = ((1.0 / tail).ln() / (1.0 + eta).ln()).ceil() as usize;
        n2 = n2.max(1);
        while (1.0 + eta).powi(-(n2 as i32)) > tail {
            n2 += 1;
        }
        for j in 1..=n2 {
            times.push(t - (1.0 + eta).powi(-(j as i32)));
        }
        let achieved_tail = (1.0 + eta).powi(-(n2 as i32));

        // regime 3: uniform steps covering [T-delta', T]
        let n3 = (achieved_tail / eta).ceil().max(1.0) as usize;
        let h3 = achieved_tail / n3 as f64;
        for i in 1..n3 {
            times.push(t - achieved_tail + i as f64 * h3);
        }
        times.push(t);

        let steps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
        if steps.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidInput {
                what: "schedule",
                why: "grid is not strictly increasing".into(),
            });
        }
        Ok(Self {
            total_time,
            max_step,
            requested_tail: tail,
            achieved_tail,
            times,
            steps,
            uniform_end: n1,
            geometric_end: n1 + n2,
        })
    }

    /// Degenerate schedule with no steps: the reverse process returns its
    /// standard-normal initialization unchanged. Fails `validate`.
    pub fn init_only() -> Self {
        Self {
            total_time: 0.0,
            max_step: 1.0,
            requested_tail: 1.0,
            achieved_tail: 1.0,
            times: vec![0.0],
            steps: Vec::new(),
            uniform_end: 0,
            geometric_end: 0,
        }
    }

    pub fn total_time(&self) -> f64 {
        self.total_time
    }

    pub fn max_step(&self) -> f64 {
        self.max_step
    }

    pub fn requested_tail(&self) -> f64 {
        self.requested_tail
    }

    /// The achieved tail width delta' = (1+eta)^{-n2}.
    pub fn achieved_tail(&self) -> f64 {
        self.achieved_tail
    }

    /// Grid points t_0 = 0 .. t_R = T.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Step sizes eta_r = t_{r+1} - t_r.
    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    /// Number of steps R.
    pub fn step_count(&self) -> usize {
        self.steps.len()
    }

    /// Index M where the geometric regime starts.
    pub fn uniform_end(&self) -> usize {
        self.uniform_end
    }

    /// Index N where the tail regime starts.
    pub fn geometric_end(&self) -> usize {
        self.geometric_end
    }

    pub fn regime(&self, r: usize) -> Regime {
        if r < self.uniform_end {
            Regime::Uniform
        } else if r < self.geometric_end {
            Regime::Geometric
        } else {
            Regime::Tail
        }
    }

    /// Remaining forward time T - t_r at the start of step r; this is the
    /// time the score is queried at.
    pub fn remaining(&self, r: usize) -> f64 {
        self.total_time - self.times[r]
    }

    /// Internal consistency: monotone grid, exact endpoints, max-step bound,
    /// geometric remainders, and the appendix step-size condition on the
    /// geometric regime.
    pub fn validate(&self) -> Result<()> {
        let r = self.step_count();
        if self.times[0] != 0.0 || self.times[r] != self.total_time {
            return Err(Error::InvalidInput {
                what: "schedule",
                why: "endpoints are not exact".into(),
            });
        }
        let max = self.steps.iter().fold(0.0f64, |m, &s| m.max(s));
        if max > self.max_step * (1.0 + 1e-12) {
            return Err(Error::InvalidInput {
                what: "schedule",
                why: format!("max step {max} exceeds eta {}", self.max_step),
            });
        }
        for j in 0..=(self.geometric_end - self.uniform_end) {
            let expect = (1.0 + self.max_step).powi(-(j as i32));
            let got = self.total_time - self.times[self.uniform_end + j];
            if (got - expect).abs() > 1e-12 * expect.max(1.0) {
                return Err(Error::InvalidInput {
                    what: "schedule",
                    why: format!("geometric remainder off at {j}: {got} vs {expect}"),
                });
            }
        }
        for r in self.uniform_end..self.geometric_end {
            let rem = self.total_time - self.times[r + 1];
            let cap = self.max_step * rem.min(1.0) * (1.0 + self.max_step) * (1.0 + 1e-12);
            if self.steps[r] > cap {
                return Err(Error::InvalidInput {
                    what: "schedule",
                    why: format!("step {r} violates the step-size condition"),
                });
            }
        }
        Ok(())
    }
}

/// Inputs for the error-budget formulas.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Smoothness constant L.
    pub smoothness: f64,
    /// Second moment m_0.
    pub second_moment: f64,
    /// Total dimension d.
    pub dim: f64,
    /// Patch count K.
    pub patch_count: usize,
    /// Average score-estimation error.
    pub eps_score: f64,
    /// Mixing time T.
    pub t_total: f64,
    /// Max step eta.
    pub eta: f64,
    /// Step count R.
    pub r_steps: usize,
}

impl BoundInputs {
    pub fn new(
        smoothness: f64,
        second_moment: f64,
        dim: usize,
        patch_count: usize,
        eps_score: f64,
        schedule: &TimeSchedule,
    ) -> Self {
        Self {
            smoothness,
            second_moment,
            dim: dim as f64,
            patch_count,
            eps_score,
            t_total: schedule.total_time(),
            eta: schedule.max_step(),
            r_steps: schedule.step_count(),
        }
    }
}

/// Order-level KL budget for the full AR generation:
/// 2 e^{-2T} L (m0 + d) + (L^2 R eta^2 + T eta) d + eta m0 + eta K R eps^2.
pub fn theorem1_bound(b: &BoundInputs) -> f64 {
    let l = b.smoothness;
    let r = b.r_steps as f64;
    2.0 * (-2.0 * b.t_total).exp() * l * (b.second_moment + b.dim)
        + (l * l * r * b.eta * b.eta + b.t_total * b.eta) * b.dim
        + b.eta * b.second_moment
        + b.eta * b.patch_count as f64 * r * b.eps_score * b.eps_score
}

/// Per-stage KL budget:
/// e^{-2T}(2 L d_k + E||y||^2) + eta * sum of per-step losses
/// + d_k L^2 R eta^2 + d_k T eta + eta E||y||^2.
pub fn stage_bound(
    b: &BoundInputs,
    patch_dim: f64,
    cond_second_moment: f64,
    loss_partial_sum: f64,
) -> f64 {
    let l = b.smoothness;
    let r = b.r_steps as f64;
    (-2.0 * b.t_total).exp() * (2.0 * l * patch_dim + cond_second_moment)
        + b.eta * loss_partial_sum
        + patch_dim * l * l * r * b.eta * b.eta
        + patch_dim * b.t_total * b.eta
        + b.eta * cond_second_moment
}

/// Initialization-error budget along the forward flow:
/// e^{-2t} (2 L d + E||y||^2).
pub fn init_error_bound(l: f64, dim: f64, second_moment: f64, t: f64) -> f64 {
    (-2.0 * t).exp() * (2.0 * l * dim + second_moment)
}

/// Hyperparameters solving the accuracy requirements for a target KL of
/// eps^2 (equivalently TV of eps).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct HyperParams {
    pub t_total: f64,
    pub r_eta: f64,
    pub eta: f64,
    pub r_steps: usize,
    pub eps_score_budget: f64,
    /// Total score evaluations K * R.
    pub gradient_count: f64,
}

pub fn hyperparams_for(eps: f64, l: f64, m0: f64, d: f64, k: usize) -> Result<HyperParams> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidInput {
            what: "eps",
            why: format!("must lie in (0,1), got {eps}"),
        });
    }
    if l < 1.0 {
        return Err(Error::InvalidInput {
            what: "smoothness",
            why: format!("formulas assume L >= 1, got {l}"),
        });
    }
    let t_total = (8.0 * l * (m0 + d) / (eps * eps)).ln();
    let c = appendix_tail_constant(l);
    let r_eta = t_total + (1.0 / c).ln();
    let eta = eps * eps / (4.0 * l * l * r_eta * d);
    let r_steps = (r_eta / eta).ceil() as usize;
    let eps_score_budget = eps / (2.0 * (k as f64 * r_eta).sqrt());
    Ok(HyperParams {
        t_total,
        r_eta,
        eta,
        r_steps,
        eps_score_budget,
        gradient_count: k as f64 * r_steps as f64,
    })
}

/// Gradient-complexity estimate with unit constant, plus the exact K*R
/// implied by `hyperparams_for`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GradientComplexity {
    pub formula: f64,
    pub exact_kr: f64,
}

pub fn gradient_complexity(
    k: usize,
    l: f64,
    d: f64,
    eps: f64,
    m0: f64,
) -> Result<GradientComplexity> {
    let formula = (k as f64 * l * l * d / (eps * eps)) * (l * (m0 + d) / eps).ln();
    let exact = hyperparams_for(eps, l, m0, d, k)?;
    Ok(GradientComplexity {
        formula,
        exact_kr: exact.gradient_count,
    })
}
