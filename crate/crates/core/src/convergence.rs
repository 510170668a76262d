//! Empirical convergence-rate harness.
//!
//! The surrogate is L2-regularised multinomial logistic regression (a
//! single dense layer) where every device term is smooth and strongly
//! convex:
//!
//! ```text
//! F_k(w) = mean_j CE(w; x_j, y_j)            + mu/2 |w|^2
//! G_k(w) = mean_j KL(q_{y_j} || p(w; x_j))   + mu/2 |w|^2
//! Phi(w) = sum_k p_k (F_k(w) + G_k(w))
//! ```
//!
//! Soft targets `q` are frozen for the whole run. Devices run local SGD with
//! step `beta / (t + gamma)` and synchronise every `local_steps` steps; the
//! harness records `e_t = |w_bar_t - w*|^2` for the weighted average
//! `w_bar_t = sum_k p_k w_t^k` after every step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetStore, DeviceShard, PartitionScheme, PartitionSpec};
use crate::error::{Error, Result};
use crate::nn::{self, Gradient, LossWeights, ModelParams, Sample};
use crate::protocol::mix_seed;
use crate::soft_targets::{init_soft_targets, SoftTargetMatrix};

/// Fraction of the series, counted from the end, used for every tail fit.
pub const TAIL_FRACTION: f64 = 0.8;
/// Largest tolerated `e_t (gamma + t) / c` over the tail.
pub const ENVELOPE_MAX_RATIO: f64 = 3.0;
/// Required log-log decay over the tail.
pub const MAX_TAIL_SLOPE: f64 = -0.8;
/// Distances above this are treated as divergence.
const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "devices", rename_all = "snake_case")]
pub enum Participation {
    Full,
    /// `K` devices sampled with replacement in proportion to `p_k` at every
    /// synchronisation, averaged with equal weight.
    Partial(usize),
}

/// Knobs for building a synthetic convex task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvexTaskSettings {
    pub num_classes: usize,
    pub dim: usize,
    pub num_devices: usize,
    pub samples_per_device: usize,
    pub separation: f64,
    pub mu: f64,
    /// `beta = beta_factor / mu`; must exceed 1.
    pub beta_factor: f64,
    pub local_steps: usize,
    pub batch_size: usize,
    /// Independent runs whose distance series are averaged.
    pub replicates: usize,
    pub seed: u64,
}

impl Default for ConvexTaskSettings {
    fn default() -> Self {
        Self {
            num_classes: 3,
            dim: 4,
            num_devices: 10,
            samples_per_device: 40,
            separation: 2.0,
            mu: 0.2,
            beta_factor: 2.0,
            local_steps: 5,
            batch_size: 4,
            replicates: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvexTaskSpec {
    pub store: DatasetStore,
    pub shards: Vec<DeviceShard>,
    pub soft: SoftTargetMatrix,
    /// Device weights `|D_k| / sum |D_j|`.
    pub weights: Vec<f64>,
    pub mu: f64,
    /// Smoothness constant shared by every `F_k` and `G_k`.
    pub l_smooth: f64,
    pub beta: f64,
    pub gamma: f64,
    pub local_steps: usize,
    pub batch_size: usize,
    /// Independent runs averaged into the recorded distance series, which
    /// then estimates `E|w_bar_t - w*|^2`.
    pub replicates: usize,
    pub seed: u64,
}

impl ConvexTaskSpec {
    /// Gaussian classes split 80/20 across devices, uniform frozen soft
    /// targets, and the largest `gamma`-compatible step schedule:
    /// `gamma = 4 L beta - 1` so that `eta_1 = 1 / (4L)`.
    pub fn synthetic(s: &ConvexTaskSettings) -> Result<Self> {
        let per_class = s.samples_per_device * s.num_devices;
        let store = data::synth_gaussian(s.num_classes, s.dim, per_class, s.separation, s.seed)?;
        let shards = data::partition(
            &store,
            &PartitionSpec {
                scheme: PartitionScheme::NonIid80,
                num_devices: s.num_devices,
                samples_per_device: s.samples_per_device,
                seed: mix_seed(s.seed, 1, 0),
                allow_overlap: false,
            },
        )?;
        let soft = init_soft_targets(s.num_classes)?;
        let l_smooth = smoothness_bound(&store, s.mu);
        let beta = s.beta_factor / s.mu;
        let gamma = 4.0 * l_smooth * beta - 1.0;
        let mut task = Self::new(store, shards, soft, s.mu, l_smooth, beta, gamma, s.local_steps, s.batch_size, s.seed)?;
        task.replicates = s.replicates;
        task.validate()?;
        Ok(task)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: DatasetStore,
        shards: Vec<DeviceShard>,
        soft: SoftTargetMatrix,
        mu: f64,
        l_smooth: f64,
        beta: f64,
        gamma: f64,
        local_steps: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let total: usize = shards.iter().map(DeviceShard::size).sum();
        if shards.is_empty() || total == 0 || shards.iter().any(DeviceShard::is_empty) {
            return Err(Error::Validation("convex task needs nonempty device shards".into()));
        }
        let weights = shards.iter().map(|s| s.size() as f64 / total as f64).collect();
        let task = Self {
            store,
            shards,
            soft,
            weights,
            mu,
            l_smooth,
            beta,
            gamma,
            local_steps,
            batch_size,
            replicates: 1,
            seed,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.mu.is_nan() || self.mu <= 0.0 {
            return fail(format!("mu must be positive, got {}", self.mu));
        }
        if self.beta.is_nan() || self.beta <= 1.0 / self.mu {
            return fail(format!("beta = {} must exceed 1/mu = {}", self.beta, 1.0 / self.mu));
        }
        if self.gamma.is_nan() || self.gamma <= 0.0 {
            return fail(format!("gamma must be positive, got {}", self.gamma));
        }
        let eta1 = self.step_size(1);
        if eta1 > 1.0 / (4.0 * self.l_smooth) * (1.0 + 1e-12) {
            return fail(format!("eta_1 = {eta1} exceeds 1/(4L) = {}", 1.0 / (4.0 * self.l_smooth)));
        }
        if self.local_steps == 0 || self.batch_size == 0 || self.replicates == 0 {
            return fail("local_steps, batch_size and replicates must be positive".into());
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || self.weights.iter().any(|&p| p < 0.0) {
            return fail(format!("device weights must be a distribution, sum = {sum}"));
        }
        if self.soft.num_classes() != self.store.num_classes() {
            return fail("soft targets do not match the class count".into());
        }
        Ok(())
    }

    pub fn step_size(&self, t: usize) -> f64 {
        self.beta / (t as f64 + self.gamma)
    }

    pub fn dims(&self) -> [usize; 2] {
        [self.store.dim(), self.store.num_classes()]
    }

    pub fn num_devices(&self) -> usize {
        self.shards.len()
    }

    fn samples<'a>(&'a self, indices: &'a [usize]) -> impl Iterator<Item = Sample<'a>> + 'a {
        indices.iter().map(move |&i| {
            let label = self.store.label(i);
            Sample {
                input: self.store.input(i),
                label,
                soft: self.soft.row(label),
            }
        })
    }

    /// Value and gradient of one device term over `indices` (a mini-batch or
    /// the whole shard), including the L2 part.
    fn term(&self, w: &ModelParams, indices: &[usize], term: Term) -> Result<(f64, Gradient)> {
        let batch: Vec<Sample<'_>> = self.samples(indices).collect();
        let rho = match term {
            Term::CrossEntropy => 1.0,
            Term::Distillation => 0.0,
        };
        let (mut grad, loss) = nn::backward_with_loss(w, &batch, LossWeights::new(rho)?)?;
        grad.axpy(self.mu, w)?;
        Ok((loss + 0.5 * self.mu * w.squared_norm(), grad))
    }

    /// `F_k`, `G_k` or `Phi` and its gradient at `w`.
    pub fn objective(&self, w: &ModelParams, which: Objective) -> Result<(f64, Gradient)> {
        match which {
            Objective::DeviceCrossEntropy(k) => self.term(w, &self.shards[k].indices, Term::CrossEntropy),
            Objective::DeviceDistillation(k) => self.term(w, &self.shards[k].indices, Term::Distillation),
            Objective::Global => {
                let mut value = 0.0;
                let mut grad = ModelParams::zeros(w.dims())?;
                for (k, &p) in self.weights.iter().enumerate() {
                    for t in [Term::CrossEntropy, Term::Distillation] {
                        let (v, g) = self.term(w, &self.shards[k].indices, t)?;
                        value += p * v;
                        grad.axpy(p, &g)?;
                    }
                }
                Ok((value, grad))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Term {
    CrossEntropy,
    Distillation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    DeviceCrossEntropy(usize),
    DeviceDistillation(usize),
    Global,
}

/// `0.5 * max |x~|^2 + mu` with `x~ = (x, 1)`: the softmax cross-entropy
/// Hessian block is bounded by `0.5 * x~ x~^T`, and KL to a fixed target has
/// the same Hessian.
pub fn smoothness_bound(store: &DatasetStore, mu: f64) -> f64 {
    let max_sq = (0..store.len())
        .map(|i| 1.0 + store.input(i).iter().map(|v| v * v).sum::<f64>())
        .fold(0.0, f64::max);
    0.5 * max_sq + mu
}

/// Gradient descent with step `1 / lipschitz` until `|grad| <= tol`.
pub fn minimize_smooth<F>(start: ModelParams, lipschitz: f64, tol: f64, max_iter: usize, mut f: F) -> Result<ModelParams>
where
    F: FnMut(&ModelParams) -> Result<(f64, Gradient)>,
{
    let mut w = start;
    for _ in 0..max_iter {
        let (_, g) = f(&w)?;
        if g.squared_norm().sqrt() <= tol {
            return Ok(w);
        }
        w.axpy(-1.0 / lipschitz, &g)?;
    }
    let (_, g) = f(&w)?;
    let norm = g.squared_norm().sqrt();
    if norm <= tol {
        return Ok(w);
    }
    Err(Error::Diagnostic(format!(
        "minimiser stopped after {max_iter} iterations with gradient norm {norm:e}"
    )))
}

const REFERENCE_TOL: f64 = 1e-10;
const REFERENCE_MAX_ITER: usize = 1_000_000;

/// The unique minimiser of `Phi`.
pub fn solve_reference(task: &ConvexTaskSpec) -> Result<ModelParams> {
    solve(task, Objective::Global)
}

fn solve(task: &ConvexTaskSpec, which: Objective) -> Result<ModelParams> {
    let lipschitz = match which {
        Objective::Global => 2.0 * task.l_smooth,
        _ => task.l_smooth,
    };
    let start = ModelParams::zeros(&task.dims())?;
    minimize_smooth(start, lipschitz, REFERENCE_TOL, REFERENCE_MAX_ITER, |w| task.objective(w, which))
}

/// Measured quantities from one harness run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceDiagnostics {
    pub participation: Participation,
    pub local_steps: usize,
    pub mu: f64,
    pub l_smooth: f64,
    pub step_beta: f64,
    pub step_gamma: f64,
    pub device_weights: Vec<f64>,
    /// `e_t` for `t = 1..=T`.
    pub distances: Vec<f64>,
    /// Least-squares slope of `ln e_t` against `ln t` over the tail.
    pub tail_slope: f64,
    /// Largest observed `E|grad F_k(w, xi)|^2` and `E|grad G_k(w, xi)|^2`.
    pub g1_sq: f64,
    pub g2_sq: f64,
    /// Largest observed mini-batch gradient variance per device.
    pub ce_variance: Vec<f64>,
    pub kl_variance: Vec<f64>,
    pub phi_star: f64,
    /// `Phi* - sum p_k F_k* - sum p_k G_k*`.
    pub heterogeneity: f64,
}

impl ConvergenceDiagnostics {
    /// `32 (T-1)^2 (G1^2 + G2^2) sum p_k^2 (alpha_k^2 + beta_k^2) + 8 L Gamma`
    pub fn bound_constant(&self) -> f64 {
        let t1 = (self.local_steps as f64 - 1.0).powi(2);
        let spread: f64 = self
            .device_weights
            .iter()
            .zip(self.ce_variance.iter().zip(&self.kl_variance))
            .map(|(p, (a, b))| p * p * (a + b))
            .sum();
        32.0 * t1 * (self.g1_sq + self.g2_sq) * spread + 8.0 * self.l_smooth * self.heterogeneity
    }

    /// `max(beta^2 B / (2 beta mu - 1), (gamma + 1) e_1)`
    pub fn envelope_numerator(&self) -> f64 {
        let b = self.bound_constant();
        let first = self.distances.first().copied().unwrap_or(0.0);
        let noise = self.step_beta.powi(2) * b / (2.0 * self.step_beta * self.mu - 1.0);
        noise.max((self.step_gamma + 1.0) * first)
    }
}

fn tail_start(n: usize) -> usize {
    ((1.0 - TAIL_FRACTION) * n as f64).floor() as usize
}

/// Least-squares slope of `ln y` on `ln x` over the final 80% of `series`,
/// where `x_t = t + offset` and `t` starts at 1.
pub fn tail_log_slope(series: &[f64], offset: f64) -> f64 {
    let start = tail_start(series.len());
    let pts: Vec<(f64, f64)> = series[start..]
        .iter()
        .enumerate()
        .map(|(i, &e)| (((start + i + 1) as f64 + offset).ln(), e.max(f64::MIN_POSITIVE).ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Exact mean and variance of a with-replacement mini-batch gradient of one
/// device term at `w`: returns `(|full grad|^2, variance)`.
fn gradient_moments(task: &ConvexTaskSpec, w: &ModelParams, k: usize, term: Term) -> Result<(f64, f64)> {
    let indices = &task.shards[k].indices;
    let (_, full) = task.term(w, indices, term)?;
    let mut spread = 0.0;
    for i in indices {
        let (_, g) = task.term(w, std::slice::from_ref(i), term)?;
        spread += g
            .as_slice()
            .iter()
            .zip(full.as_slice())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
    }
    let variance = spread / indices.len() as f64 / task.batch_size as f64;
    Ok((full.squared_norm(), variance))
}

/// Runs `rounds * local_steps` SGD steps and records the distance of the
/// weighted parameter average to the reference optimum after every step.
pub fn run_virtual_sequence(
    task: &ConvexTaskSpec,
    rounds: usize,
    participation: Participation,
) -> Result<ConvergenceDiagnostics> {
    task.validate()?;
    if rounds == 0 {
        return Err(Error::Validation("need at least one round".into()));
    }
    if let Participation::Partial(k) = participation {
        if k == 0 {
            return Err(Error::Validation("partial participation needs K >= 1".into()));
        }
    }
    let w_star = solve_reference(task)?;
    let total_steps = rounds * task.local_steps;
    let mut stats = RunStats {
        distances: vec![0.0; total_steps],
        g1_sq: 0.0,
        g2_sq: 0.0,
        ce_variance: vec![0.0; task.num_devices()],
        kl_variance: vec![0.0; task.num_devices()],
    };
    for replicate in 0..task.replicates {
        simulate(task, &w_star, total_steps, participation, replicate as u64, &mut stats)?;
    }
    let scale = 1.0 / task.replicates as f64;
    stats.distances.iter_mut().for_each(|e| *e *= scale);
    let RunStats {
        distances,
        g1_sq,
        g2_sq,
        ce_variance,
        kl_variance,
    } = stats;

    let phi_star = task.objective(&w_star, Objective::Global)?.0;
    let mut heterogeneity = phi_star;
    for (k, &p) in task.weights.iter().enumerate() {
        let f = solve(task, Objective::DeviceCrossEntropy(k))?;
        let g = solve(task, Objective::DeviceDistillation(k))?;
        heterogeneity -= p * task.objective(&f, Objective::DeviceCrossEntropy(k))?.0;
        heterogeneity -= p * task.objective(&g, Objective::DeviceDistillation(k))?.0;
    }

    Ok(ConvergenceDiagnostics {
        participation,
        local_steps: task.local_steps,
        mu: task.mu,
        l_smooth: task.l_smooth,
        step_beta: task.beta,
        step_gamma: task.gamma,
        device_weights: task.weights.clone(),
        tail_slope: tail_log_slope(&distances, 0.0),
        distances,
        g1_sq,
        g2_sq,
        ce_variance,
        kl_variance,
        phi_star,
        heterogeneity,
    })
}

struct RunStats {
    /// Sum over replicates until the caller rescales it.
    distances: Vec<f64>,
    g1_sq: f64,
    g2_sq: f64,
    ce_variance: Vec<f64>,
    kl_variance: Vec<f64>,
}

fn simulate(
    task: &ConvexTaskSpec,
    w_star: &ModelParams,
    total_steps: usize,
    participation: Participation,
    replicate: u64,
    stats: &mut RunStats,
) -> Result<()> {
    let n = task.num_devices();
    let zero = ModelParams::zeros(&task.dims())?;
    let mut local: Vec<ModelParams> = vec![zero.clone(); n];
    let stream = mix_seed(task.seed, 0x5245_504c, replicate);
    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|k| ChaCha8Rng::seed_from_u64(mix_seed(stream, 0x4445_5649, k as u64)))
        .collect();
    let mut sync_rng = ChaCha8Rng::seed_from_u64(mix_seed(stream, 0x5359_4e43, 0));
    let mut batch = vec![0usize; task.batch_size];

    for t in 1..=total_steps {
        let eta = task.step_size(t);
        let sync = t % task.local_steps == 0;
        for k in 0..n {
            if (t - 1) % task.local_steps == 0 {
                let (f_norm, f_var) = gradient_moments(task, &local[k], k, Term::CrossEntropy)?;
                let (g_norm, g_var) = gradient_moments(task, &local[k], k, Term::Distillation)?;
                stats.g1_sq = stats.g1_sq.max(f_norm + f_var);
                stats.g2_sq = stats.g2_sq.max(g_norm + g_var);
                stats.ce_variance[k] = stats.ce_variance[k].max(f_var);
                stats.kl_variance[k] = stats.kl_variance[k].max(g_var);
            }
            let shard = &task.shards[k].indices;
            for slot in batch.iter_mut() {
                *slot = shard[rngs[k].random_range(0..shard.len())];
            }
            let (_, gf) = task.term(&local[k], &batch, Term::CrossEntropy)?;
            let (_, gg) = task.term(&local[k], &batch, Term::Distillation)?;
            local[k].axpy(-eta, &gf)?;
            local[k].axpy(-eta, &gg)?;
        }
        if sync {
            let merged = match participation {
                Participation::Full => weighted_average(&local, &task.weights)?,
                Participation::Partial(k) => {
                    let picks: Vec<usize> = (0..k).map(|_| sample_weighted(&task.weights, &mut sync_rng)).collect();
                    let mut avg = zero.clone();
                    for &i in &picks {
                        avg.axpy(1.0 / k as f64, &local[i])?;
                    }
                    avg
                }
            };
            for w in &mut local {
                w.clone_from(&merged);
            }
        }
        let mut avg = weighted_average(&local, &task.weights)?;
        avg.axpy(-1.0, w_star)?;
        let e = avg.squared_norm();
        if !e.is_finite() || e > DIVERGENCE_LIMIT {
            return Err(Error::Diagnostic(format!("distance diverged at step {t}: {e:e}")));
        }
        stats.distances[t - 1] += e;
    }
    Ok(())
}

fn weighted_average(models: &[ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let mut out = ModelParams::zeros(models[0].dims())?;
    for (m, &p) in models.iter().zip(weights) {
        out.axpy(p, m)?;
    }
    Ok(out)
}

fn sample_weighted(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in weights.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Outcome of fitting `e_t ~ c / (gamma + t)` over the tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub fitted_c: f64,
    /// Largest `e_t (gamma + t) / c` over the tail.
    pub max_ratio: f64,
    /// Slope of `ln e_t` against `ln(gamma + t)` over the tail.
    pub shifted_slope: f64,
    pub tail_slope: f64,
    pub bound_constant: f64,
    pub envelope_numerator: f64,
    /// Steps where `e_t` exceeded `v / (gamma + t)`.
    pub bound_exceedances: usize,
    pub passed: bool,
}

/// Passes when the tail stays within a factor [`ENVELOPE_MAX_RATIO`] of the
/// fitted `c / (gamma + t)` curve and decays at least as fast as
/// `(gamma + t)^-0.8`.
pub fn envelope_check(diag: &ConvergenceDiagnostics) -> EnvelopeReport {
    let gamma = diag.step_gamma;
    let e = &diag.distances;
    let start = tail_start(e.len());
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &v) in e.iter().enumerate().skip(start) {
        let u = 1.0 / (gamma + (i + 1) as f64);
        num += v * u;
        den += u * u;
    }
    let c = if den > 0.0 { num / den } else { 0.0 };
    let max_ratio = e
        .iter()
        .enumerate()
        .skip(start)
        .map(|(i, &v)| if c > 0.0 { v * (gamma + (i + 1) as f64) / c } else { f64::INFINITY })
        .fold(0.0, f64::max);
    let shifted_slope = tail_log_slope(e, gamma);
    let v = diag.envelope_numerator();
    let bound_exceedances = e
        .iter()
        .enumerate()
        .filter(|(i, &x)| x > v / (gamma + (*i + 1) as f64))
        .count();
    EnvelopeReport {
        fitted_c: c,
        max_ratio,
        shifted_slope,
        tail_slope: diag.tail_slope,
        bound_constant: diag.bound_constant(),
        envelope_numerator: v,
        bound_exceedances,
        passed: c > 0.0 && max_ratio <= ENVELOPE_MAX_RATIO && shifted_slope <= MAX_TAIL_SLOPE,
    }
}

/// Serialised form written by the `converge` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub diagnostics: ConvergenceDiagnostics,
    pub envelope: EnvelopeReport,
    pub passed: bool,
}

impl ConvergenceReport {
    pub fn new(diagnostics: ConvergenceDiagnostics) -> Self {
        let envelope = envelope_check(&diagnostics);
        let passed = envelope.passed && diagnostics.tail_slope <= MAX_TAIL_SLOPE;
        Self {
            diagnostics,
            envelope,
            passed,
        }
    }
}
