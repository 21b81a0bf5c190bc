//! Training side: denoising score matching (DSM), score matching (SM), the
//! reweighted time distribution, a small trainable score network, the
//! DSM/SM gradient-equivalence check, and loss-trace analysis.
//!
//! The network predicts the noise; the score it exposes is
//! s(y | t, z) = -(1 - e^{-2t})^{-1/2} * eps_hat(y | t, z), so the DSM loss
//! is exactly the noise-prediction objective and per time slice
//! DSM = (1 - e^{-2t}) (SM + C) with C independent of the parameters.

use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{Gaussian, GaussianMixture};
use crate::oracle::{ConditionalOracle, ScoreSource};
use crate::patches::{Condition, PatchLayout};
use crate::quad::{expect_gaussian_1d, expect_gaussian_2d};
use crate::rng::{NormalStream, SeedPath};
use crate::schedule::TimeSchedule;

const GH_NODES: usize = 64;

/// sigma_t^2 = 1 - e^{-2t}, the forward noise variance.
fn noise_var(t: f64) -> f64 {
    1.0 - (-2.0 * t).exp()
}

// ---------------------------------------------------------------------------
// score network
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ScoreNetData {
    y_dim: usize,
    cond_width: usize,
    hidden: Vec<usize>,
    params: Vec<f64>,
}

/// Small tanh MLP predicting the forward noise. Inputs are the noisy patch,
/// three time features (t, e^{-t}, 1 - e^{-2t}), and the condition
/// zero-padded to a fixed width; one shared network serves all stages.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "ScoreNetData", into = "ScoreNetData")]
pub struct ScoreNet {
    y_dim: usize,
    cond_width: usize,
    hidden: Vec<usize>,
    layer_dims: Vec<usize>,
    params: Vec<f64>,
}

impl TryFrom<ScoreNetData> for ScoreNet {
    type Error = Error;
    fn try_from(d: ScoreNetData) -> Result<Self> {
        let mut net = ScoreNet::new(d.y_dim, d.cond_width, &d.hidden, SeedPath::root(0));
        if d.params.len() != net.params.len() {
            return Err(Error::LengthMismatch {
                expected: net.params.len(),
                got: d.params.len(),
            });
        }
        net.params = d.params;
        Ok(net)
    }
}

impl From<ScoreNet> for ScoreNetData {
    fn from(n: ScoreNet) -> Self {
        ScoreNetData {
            y_dim: n.y_dim,
            cond_width: n.cond_width,
            hidden: n.hidden,
            params: n.params,
        }
    }
}

impl ScoreNet {
    pub fn new(y_dim: usize, cond_width: usize, hidden: &[usize], seed: SeedPath) -> Self {
        let input = y_dim + 3 + cond_width;
        let mut layer_dims = vec![input];
        layer_dims.extend_from_slice(hidden);
        layer_dims.push(y_dim);
        let count: usize = layer_dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum();
        let mut stream = NormalStream::new(seed);
        let mut params = vec![0.0; count];
        let mut at = 0;
        for w in layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[at..at + fan_in * fan_out] {
                *p = scale * stream.next_normal();
            }
            at += (fan_in + 1) * fan_out; // biases start at zero
        }
        Self {
            y_dim,
            cond_width,
            hidden: hidden.to_vec(),
            layer_dims,
            params,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn widths(&self) -> &[usize] {
        &self.hidden
    }

    pub fn y_dim(&self) -> usize {
        self.y_dim
    }

    pub fn cond_width(&self) -> usize {
        self.cond_width
    }

    pub fn model_id(&self) -> String {
        format!("mlp-{:?}-p{}", self.hidden, self.params.len())
    }

    fn features(&self, y: &DVector<f64>, t: f64, z: &Condition) -> Result<Vec<f64>> {
        if y.len() != self.y_dim {
            return Err(Error::DimensionMismatch {
                what: "network input",
                expected: self.y_dim,
                got: y.len(),
            });
        }
        if z.dim() > self.cond_width {
            return Err(Error::DimensionMismatch {
                what: "condition width",
                expected: self.cond_width,
                got: z.dim(),
            });
        }
        let mut x = Vec::with_capacity(self.layer_dims[0]);
        x.extend(y.iter().copied());
        x.push(t);
        x.push((-t).exp());
        x.push(noise_var(t));
        if let Some(v) = z.as_vector() {
            x.extend(v.iter().copied());
        }
        x.resize(self.layer_dims[0], 0.0);
        Ok(x)
    }

    /// Forward pass keeping per-layer activations for backprop.
    fn forward_cached(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![input.to_vec()];
        let mut at = 0;
        let last = self.layer_dims.len() - 2;
        for (li, w) in self.layer_dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let prev = acts.last().unwrap().clone();
            let mut out = vec![0.0; fan_out];
            for (o, slot) in out.iter_mut().enumerate() {
                let mut acc = self.params[at + fan_in * fan_out + o]; // bias
                let row = &self.params[at + o * fan_in..at + (o + 1) * fan_in];
                for (pi, xi) in row.iter().zip(&prev) {
                    acc += pi * xi;
                }
                *slot = if li == last { acc } else { acc.tanh() };
            }
            acts.push(out);
            at += (fan_in + 1) * fan_out;
        }
        acts
    }

    /// Noise prediction eps_hat(y | t, z).
    pub fn predict_noise(&self, y: &DVector<f64>, t: f64, z: &Condition) -> Result<DVector<f64>> {
        let input = self.features(y, t, z)?;
        let acts = self.forward_cached(&input);
        Ok(DVector::from_vec(acts.last().unwrap().clone()))
    }

    /// Backprop of dL/d(output) into the parameter gradient accumulator.
    fn backward(&self, acts: &[Vec<f64>], dout: &[f64], grad: &mut [f64]) {
        let mut offsets = Vec::with_capacity(self.layer_dims.len() - 1);
        let mut at = 0;
        for w in self.layer_dims.windows(2) {
            offsets.push(at);
            at += (w[0] + 1) * w[1];
        }
        let mut delta = dout.to_vec();
        for li in (0..self.layer_dims.len() - 1).rev() {
            let (fan_in, fan_out) = (self.layer_dims[li], self.layer_dims[li + 1]);
            let at = offsets[li];
            let input = &acts[li];
            let output = &acts[li + 1];
            let last = li == self.layer_dims.len() - 2;
            let dpre: Vec<f64> = if last {
                delta.clone()
            } else {
                delta
                    .iter()
                    .zip(output)
                    .map(|(d, a)| d * (1.0 - a * a))
                    .collect()
            };
            for (o, dp) in dpre.iter().enumerate() {
                grad[at + fan_in * fan_out + o] += dp;
                let row = &mut grad[at + o * fan_in..at + (o + 1) * fan_in];
                for (g, xi) in row.iter_mut().zip(input) {
                    *g += dp * xi;
                }
            }
            if li > 0 {
                let mut next = vec![0.0; fan_in];
                for (o, dp) in dpre.iter().enumerate() {
                    let row = &self.params[at + o * fan_in..at + (o + 1) * fan_in];
                    for (n, pi) in next.iter_mut().zip(row) {
                        *n += dp * pi;
                    }
                }
                delta = next;
            }
        }
    }
}

impl ScoreSource for ScoreNet {
    fn patch_dim(&self) -> usize {
        self.y_dim
    }

    fn score(&self, y: &DVector<f64>, t: f64, z: &Condition) -> Result<DVector<f64>> {
        let eps_hat = self.predict_noise(y, t, z)?;
        Ok(eps_hat * (-1.0 / noise_var(t).sqrt()))
    }
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Sampling probabilities over step indices r = 0..R-1 proportional to
/// 1 - e^{-2 (T - t_r)}; this cancels the score-matching time weight.
pub fn time_distribution(schedule: &TimeSchedule) -> Vec<f64> {
    let w: Vec<f64> = (0..schedule.step_count())
        .map(|r| noise_var(schedule.remaining(r)))
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn draw_index(stream: &mut NormalStream, probs: Option<&[f64]>, n: usize) -> usize {
    let u = stream.next_uniform();
    match probs {
        None => ((u * n as f64) as usize).min(n - 1),
        Some(p) => {
            let mut acc = 0.0;
            for (i, w) in p.iter().enumerate() {
                acc += w;
                if u < acc {
                    return i;
                }
            }
            n - 1
        }
    }
}

/// One DSM minibatch: Monte-Carlo loss and reverse-mode parameter gradient.
/// Stage and step indices are drawn per element (stage uniform; step uniform
/// or from `time_probs`).
fn dsm_batch(
    net: &ScoreNet,
    target: &GaussianMixture,
    layout: &PatchLayout,
    schedule: &TimeSchedule,
    batch: usize,
    path: SeedPath,
    time_probs: Option<&[f64]>,
) -> Result<(f64, Vec<f64>)> {
    let k_total = layout.patch_count();
    let r_total = schedule.step_count();
    let mut loss = 0.0;
    let mut grad = vec![0.0; net.param_count()];
    for b in 0..batch {
        let mut stream = NormalStream::new(path.child(b as u64));
        let k = 1 + draw_index(&mut stream, None, k_total);
        let r = draw_index(&mut stream, time_probs, r_total);
        let t_hat = schedule.remaining(r);
        let x = target.sample_one(&mut stream);
        let prefix = if k == 1 {
            Condition::None
        } else {
            Condition::Prefix(layout.slice(&x, 1, k - 1)?)
        };
        let y0 = layout.slice(&x, k, k)?;
        let dk = y0.len();
        let xi = stream.normal_vector(dk);
        let y = &y0 * (-t_hat).exp() + &xi * noise_var(t_hat).sqrt();

        let input = net.features(&y, t_hat, &prefix)?;
        let acts = net.forward_cached(&input);
        let out = acts.last().unwrap().clone();
        let mut dout = vec![0.0; dk];
        for i in 0..dk {
            let resid = out[i] - xi[i];
            loss += resid * resid;
            dout[i] = 2.0 * resid;
        }
        net.backward(&acts, &dout, &mut grad);
    }
    let inv = 1.0 / batch as f64;
    loss *= inv;
    for g in &mut grad {
        *g *= inv;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite { what: "dsm loss" });
    }
    Ok((loss, grad))
}

/// Monte-Carlo estimate of the global noise-prediction objective
/// (uniform over stages and steps) with its parameter gradient.
pub fn dsm_loss(
    net: &ScoreNet,
    target: &GaussianMixture,
    layout: &PatchLayout,
    schedule: &TimeSchedule,
    batch: usize,
    seed: SeedPath,
) -> Result<(f64, Vec<f64>)> {
    if batch == 0 {
        return Err(Error::InvalidInput {
            what: "batch",
            why: "need at least one element".into(),
        });
    }
    dsm_batch(net, target, layout, schedule, batch, seed, None)
}

/// Time weighting of the score-matching objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SmWeight {
    /// (1 - e^{-2(T - t_r)}) per term: the global score-matching objective.
    Matching,
    /// Unit weights: the plain average score error across stages and steps.
    Uniform,
}

/// Score-matching loss of `model` against the exact per-stage oracles,
/// averaged over the full (stage, step) grid with `batch` Monte-Carlo draws
/// per cell.
pub fn sm_loss(
    model: &dyn ScoreSource,
    oracles: &[Arc<ConditionalOracle>],
    layout: &PatchLayout,
    schedule: &TimeSchedule,
    batch: usize,
    seed: SeedPath,
    weight: SmWeight,
) -> Result<f64> {
    if oracles.len() != layout.patch_count() {
        return Err(Error::DimensionMismatch {
            what: "oracles",
            expected: layout.patch_count(),
            got: oracles.len(),
        });
    }
    if batch == 0 {
        return Err(Error::InvalidInput {
            what: "batch",
            why: "need at least one element".into(),
        });
    }
    let target = oracles[0].joint().clone();
    let r_total = schedule.step_count();
    let mut total = 0.0;
    for k in 1..=layout.patch_count() {
        for r in 0..r_total {
            let t_hat = schedule.remaining(r);
            let w = match weight {
                SmWeight::Matching => noise_var(t_hat),
                SmWeight::Uniform => 1.0,
            };
            let cell = seed.child(k as u64).child(r as u64);
            let mut acc = 0.0;
            for b in 0..batch {
                let mut stream = NormalStream::new(cell.child(b as u64));
                let x = target.sample_one(&mut stream);
                let prefix = if k == 1 {
                    Condition::None
                } else {
                    Condition::Prefix(layout.slice(&x, 1, k - 1)?)
                };
                let y0 = layout.slice(&x, k, k)?;
                let xi = stream.normal_vector(y0.len());
                let y = &y0 * (-t_hat).exp() + &xi * noise_var(t_hat).sqrt();
                let diff =
                    model.score(&y, t_hat, &prefix)? - oracles[k - 1].score(&y, t_hat, &prefix)?;
                acc += diff.norm_squared();
            }
            total += w * acc / batch as f64;
        }
    }
    let value = total / (layout.patch_count() * r_total) as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite { what: "sm loss" });
    }
    Ok(value)
}

// ---------------------------------------------------------------------------
// quadrature-exact losses for the linear family (1-D single Gaussian target)
// ---------------------------------------------------------------------------

/// Time-independent linear score s(y) = slope * y + intercept.
#[derive(Clone, Copy, Debug)]
pub struct LinearScore {
    pub slope: f64,
    pub intercept: f64,
}

fn check_scalar_target(target: &Gaussian) -> Result<(f64, f64)> {
    if target.dim() != 1 {
        return Err(Error::DimensionMismatch {
            what: "quadrature target",
            expected: 1,
            got: target.dim(),
        });
    }
    Ok((target.mean()[0], target.cov()[(0, 0)].sqrt()))
}

/// Global DSM loss of the linear family by 2-D Gauss-Hermite quadrature,
/// uniform over steps.
pub fn dsm_quadrature(
    theta: &LinearScore,
    target: &Gaussian,
    schedule: &TimeSchedule,
) -> Result<f64> {
    let (mu, sd) = check_scalar_target(target)?;
    let r_total = schedule.step_count();
    let mut total = 0.0;
    for r in 0..r_total {
        let t = schedule.remaining(r);
        let a = (-t).exp();
        let sig = noise_var(t).sqrt();
        total += expect_gaussian_2d(mu, sd, 0.0, 1.0, GH_NODES, |y0, xi| {
            let y = a * y0 + sig * xi;
            let resid = xi + sig * (theta.slope * y + theta.intercept);
            resid * resid
        });
    }
    Ok(total / r_total as f64)
}

/// Gradient of [`dsm_quadrature`] in (slope, intercept).
pub fn dsm_grad_quadrature(
    theta: &LinearScore,
    target: &Gaussian,
    schedule: &TimeSchedule,
) -> Result<[f64; 2]> {
    let (mu, sd) = check_scalar_target(target)?;
    let r_total = schedule.step_count();
    let mut g = [0.0, 0.0];
    for r in 0..r_total {
        let t = schedule.remaining(r);
        let a = (-t).exp();
        let sig = noise_var(t).sqrt();
        g[0] += expect_gaussian_2d(mu, sd, 0.0, 1.0, GH_NODES, |y0, xi| {
            let y = a * y0 + sig * xi;
            2.0 * (xi + sig * (theta.slope * y + theta.intercept)) * sig * y
        });
        g[1] += expect_gaussian_2d(mu, sd, 0.0, 1.0, GH_NODES, |y0, xi| {
            let y = a * y0 + sig * xi;
            2.0 * (xi + sig * (theta.slope * y + theta.intercept)) * sig
        });
    }
    Ok([g[0] / r_total as f64, g[1] / r_total as f64])
}

/// Per-step score-matching loss of the linear family by 1-D quadrature over
/// the diffused law.
fn sm_step_quadrature(theta: &LinearScore, mu: f64, sd: f64, t: f64) -> f64 {
    let a = (-t).exp();
    let m_t = a * mu;
    let v_t = a * a * sd * sd + noise_var(t);
    expect_gaussian_1d(m_t, v_t.sqrt(), GH_NODES, |y| {
        let oracle = -(y - m_t) / v_t;
        let diff = theta.slope * y + theta.intercept - oracle;
        diff * diff
    })
}

/// Global score-matching loss of the linear family with the matching weight.
pub fn sm_quadrature(
    theta: &LinearScore,
    target: &Gaussian,
    schedule: &TimeSchedule,
) -> Result<f64> {
    let (mu, sd) = check_scalar_target(target)?;
    let r_total = schedule.step_count();
    let mut total = 0.0;
    for r in 0..r_total {
        let t = schedule.remaining(r);
        total += noise_var(t) * sm_step_quadrature(theta, mu, sd, t);
    }
    Ok(total / r_total as f64)
}

/// Gradient of [`sm_quadrature`] in (slope, intercept).
pub fn sm_grad_quadrature(
    theta: &LinearScore,
    target: &Gaussian,
    schedule: &TimeSchedule,
) -> Result<[f64; 2]> {
    let (mu, sd) = check_scalar_target(target)?;
    let r_total = schedule.step_count();
    let mut g = [0.0, 0.0];
    for r in 0..r_total {
        let t = schedule.remaining(r);
        let a = (-t).exp();
        let m_t = a * mu;
        let v_t = a * a * sd * sd + noise_var(t);
        let w = noise_var(t);
        g[0] += w * expect_gaussian_1d(m_t, v_t.sqrt(), GH_NODES, |y| {
            let oracle = -(y - m_t) / v_t;
            2.0 * (theta.slope * y + theta.intercept - oracle) * y
        });
        g[1] += w * expect_gaussian_1d(m_t, v_t.sqrt(), GH_NODES, |y| {
            let oracle = -(y - m_t) / v_t;
            2.0 * (theta.slope * y + theta.intercept - oracle)
        });
    }
    Ok([g[0] / r_total as f64, g[1] / r_total as f64])
}

/// Gradient-equivalence report: the DSM and SM parameter gradients computed
/// by deterministic quadrature, and their largest difference.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GradEquivalence {
    pub dsm_grad: [f64; 2],
    pub sm_grad: [f64; 2],
    pub max_abs_diff: f64,
}

pub fn grad_equivalence_check(
    theta: &LinearScore,
    target: &Gaussian,
    schedule: &TimeSchedule,
) -> Result<GradEquivalence> {
    let dsm_grad = dsm_grad_quadrature(theta, target, schedule)?;
    let sm_grad = sm_grad_quadrature(theta, target, schedule)?;
    let max_abs_diff = dsm_grad
        .iter()
        .zip(&sm_grad)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    Ok(GradEquivalence {
        dsm_grad,
        sm_grad,
        max_abs_diff,
    })
}

/// The parameter-free part of the DSM loss for a 1-D Gaussian target:
/// the loss at the exact score, mean over steps of (1 - sigma_t^2 / v_t).
pub fn dsm_irreducible_1d(
    target: &Gaussian,
    schedule: &TimeSchedule,
    time_probs: Option<&[f64]>,
) -> Result<f64> {
    let (_, sd) = check_scalar_target(target)?;
    let r_total = schedule.step_count();
    let mut total = 0.0;
    for r in 0..r_total {
        let t = schedule.remaining(r);
        let a = (-t).exp();
        let s2 = noise_var(t);
        let v_t = a * a * sd * sd + s2;
        let p = match time_probs {
            None => 1.0 / r_total as f64,
            Some(probs) => probs[r],
        };
        total += p * (1.0 - s2 / v_t);
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

/// How the step index is sampled during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeSampling {
    Uniform,
    /// Pr(r) proportional to 1 - e^{-2(T - t_r)}.
    Reweighted,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub time_sampling: TimeSampling,
    pub task: String,
}

/// Per-step training losses plus run metadata.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossTrace {
    pub losses: Vec<f64>,
    pub model_id: String,
    pub patches: usize,
    pub task: String,
}

/// Adam-style training of the noise predictor on the DSM objective.
/// Deterministic for a fixed config; aborts (with the partial trace in the
/// error) if the loss exceeds 1e6.
pub fn train(
    net: &ScoreNet,
    target: &GaussianMixture,
    layout: &PatchLayout,
    schedule: &TimeSchedule,
    cfg: &TrainConfig,
) -> Result<(ScoreNet, LossTrace)> {
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(Error::InvalidInput {
            what: "train config",
            why: "steps and batch must be positive".into(),
        });
    }
    let probs = match cfg.time_sampling {
        TimeSampling::Uniform => None,
        TimeSampling::Reweighted => Some(time_distribution(schedule)),
    };
    let mut net = net.clone();
    let n = net.param_count();
    let mut m1 = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let root = SeedPath::root(cfg.seed).child(0x7261_494e);
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let (loss, grad) = dsm_batch(
            &net,
            target,
            layout,
            schedule,
            cfg.batch,
            root.child(step as u64),
            probs.as_deref(),
        )?;
        losses.push(loss);
        if loss > 1e6 {
            return Err(Error::TrainingDiverged {
                step,
                loss,
                trace: losses,
            });
        }
        let t = (step + 1) as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let params = net.params_mut();
        for i in 0..n {
            m1[i] = beta1 * m1[i] + (1.0 - beta1) * grad[i];
            m2[i] = beta2 * m2[i] + (1.0 - beta2) * grad[i] * grad[i];
            params[i] -= cfg.lr * (m1[i] / c1) / ((m2[i] / c2).sqrt() + eps);
        }
    }
    let trace = LossTrace {
        losses,
        model_id: net.model_id(),
        patches: layout.patch_count(),
        task: cfg.task.clone(),
    };
    Ok((net, trace))
}

// ---------------------------------------------------------------------------
// trace analysis
// ---------------------------------------------------------------------------

/// Loss constant recovered from a stable late-training window.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ConstantEstimate {
    /// Mean loss over the stable window (primary).
    pub mean: f64,
    /// Start index of the window.
    pub window_start: usize,
    /// Final-step loss, also reported.
    pub final_loss: f64,
}

/// Finds the latest window of the given length whose loss variance is at
/// most the threshold and returns its mean.
pub fn estimate_constant(
    trace: &LossTrace,
    window: usize,
    var_threshold: f64,
) -> Result<ConstantEstimate> {
    let s = trace.losses.len();
    if window == 0 || window > s {
        return Err(Error::InvalidInput {
            what: "window",
            why: format!("window {window} vs trace length {s}"),
        });
    }
    let mut min_var = f64::INFINITY;
    for start in (0..=s - window).rev() {
        let slice = &trace.losses[start..start + window];
        let mean = slice.iter().sum::<f64>() / window as f64;
        let var = if window == 1 {
            0.0
        } else {
            slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (window as f64 - 1.0)
        };
        min_var = min_var.min(var);
        if var <= var_threshold {
            return Ok(ConstantEstimate {
                mean,
                window_start: start,
                final_loss: trace.losses[s - 1],
            });
        }
    }
    Err(Error::NoStableWindow {
        min_variance: min_var,
    })
}

/// Per-step comparison of constant-corrected losses. The AR side carries the
/// patch-count correction factor; delta_s > 0 means the corrected AR loss is
/// below the corrected baseline loss at step s.
///
/// The constant subtraction only lower-bounds the score errors, so the delta
/// sequence is a heuristic ranking signal, not a certified comparison.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossComparison {
    pub delta: Vec<f64>,
    pub fraction_positive: f64,
}

pub fn compare_losses(
    trace_ar: &LossTrace,
    trace_ddpm: &LossTrace,
    k: usize,
    c_ar: f64,
    c_ddpm: f64,
) -> Result<LossComparison> {
    if trace_ar.patches != k {
        return Err(Error::MetadataMismatch {
            what: format!(
                "AR trace reports {} patches, correction factor is {k}",
                trace_ar.patches
            ),
        });
    }
    let len = trace_ar.losses.len().min(trace_ddpm.losses.len());
    if len == 0 {
        return Err(Error::InvalidInput {
            what: "traces",
            why: "empty trace".into(),
        });
    }
    let resample = |trace: &[f64], j: usize| {
        let idx = j * trace.len() / len;
        trace[idx.min(trace.len() - 1)]
    };
    let mut delta = Vec::with_capacity(len);
    let mut positive = 0usize;
    for j in 0..len {
        let ar = k as f64 * (resample(&trace_ar.losses, j) - c_ar.abs());
        let ddpm = resample(&trace_ddpm.losses, j) - c_ddpm.abs();
        let d = ddpm - ar;
        if d > 0.0 {
            positive += 1;
        }
        delta.push(d);
    }
    Ok(LossComparison {
        delta,
        fraction_positive: positive as f64 / len as f64,
    })
}
