//! Full-batch trainers: Bayesian-regularized Levenberg-Marquardt, plain
//! Levenberg-Marquardt, gradient descent and BFGS quasi-Newton.
//!
//! All four share validation-based early stopping. Each trainer works on a
//! flat parameter vector through one of two problem traits, so the step
//! logic can be exercised on hand-built problems as well as on networks.
//!
//! Bayesian regularization minimizes `F = β·E_D + α·E_W`, where
//! `E_D = Σ eᵢ²` and `E_W = Σ wₖ²`. After every accepted LM step the
//! hyperparameters are re-estimated from the effective number of
//! parameters `γ = N − α·tr((β·JᵀJ + α·I)⁻¹)`:
//! `α = γ / (2·E_W)` and `β = (n − γ) / (2·E_D)`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Mlp;
use crate::numkernel::{dot, DampedNormal, Matrix};

/// Cap applied to α when the weights vanish.
pub const ALPHA_CAP: f64 = 1e10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerKind {
    BayesianRegularization,
    LevenbergMarquardt,
    GradientDescent,
    QuasiNewton,
}

impl TrainerKind {
    pub const ALL: [TrainerKind; 4] = [
        TrainerKind::LevenbergMarquardt,
        TrainerKind::GradientDescent,
        TrainerKind::QuasiNewton,
        TrainerKind::BayesianRegularization,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            TrainerKind::BayesianRegularization => "br",
            TrainerKind::LevenbergMarquardt => "lm",
            TrainerKind::GradientDescent => "gd",
            TrainerKind::QuasiNewton => "qn",
        }
    }
}

impl fmt::Display for TrainerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for TrainerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "br" => Ok(TrainerKind::BayesianRegularization),
            "lm" => Ok(TrainerKind::LevenbergMarquardt),
            "gd" => Ok(TrainerKind::GradientDescent),
            "qn" => Ok(TrainerKind::QuasiNewton),
            other => Err(Error::Config(format!(
                "unknown trainer `{other}` (expected br, lm, gd or qn)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub trainer: TrainerKind,
    pub max_epochs: usize,
    pub val_fail_limit: usize,
    /// Gradient-descent learning rate.
    pub eta: f64,
    pub mu0: f64,
    pub mu_inc: f64,
    pub mu_dec: f64,
    pub mu_max: f64,
    /// Gradient norm below which training stops with `GradientVanished`.
    pub min_grad: f64,
    /// Seed the harness uses to initialize the network being trained.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            trainer: TrainerKind::BayesianRegularization,
            max_epochs: 100,
            val_fail_limit: 10,
            eta: 0.5,
            mu0: 0.005,
            mu_inc: 10.0,
            mu_dec: 0.1,
            mu_max: 1e10,
            min_grad: 1e-10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn new(trainer: TrainerKind, seed: u64) -> Self {
        Self {
            trainer,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if !(self.eta > 0.0) {
            return Err(Error::Config("eta must be positive".into()));
        }
        if !(self.mu_dec > 0.0 && self.mu_dec < 1.0 && self.mu_inc > 1.0) {
            return Err(Error::Config("need 0 < mu_dec < 1 < mu_inc".into()));
        }
        if !(self.mu0 > 0.0 && self.mu_max >= self.mu0) {
            return Err(Error::Config("need 0 < mu0 <= mu_max".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StopReason {
    MaxEpochs,
    ValidationStreak,
    MuOverflow,
    GradientVanished,
}

/// State after one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub e_d: f64,
    pub e_w: f64,
    pub f: f64,
    pub val_mse: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: Option<f64>,
    pub mu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub history: Vec<EpochStats>,
    pub stop_reason: StopReason,
    /// Epoch whose weights were returned, when they were restored from the
    /// best-validation snapshot.
    pub restored_epoch: Option<usize>,
    /// LM/BR steps whose objective did not decrease. Always zero for a
    /// correct trainer; kept for auditing.
    pub rejected_accepts: usize,
}

impl TrainRecord {
    pub fn epochs(&self) -> usize {
        self.history.len()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Config(format!("writing train record: {e}"));
        w.write_record(["epoch", "E_D", "E_W", "F", "val_mse", "alpha", "beta", "gamma", "mu"])
            .map_err(io)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for s in &self.history {
            w.write_record([
                s.epoch.to_string(),
                s.e_d.to_string(),
                s.e_w.to_string(),
                s.f.to_string(),
                opt(s.val_mse),
                s.alpha.to_string(),
                s.beta.to_string(),
                opt(s.gamma),
                opt(s.mu),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::Config(format!("writing train record: {e}")))?;
        Ok(())
    }
}

/// A least-squares problem in the error convention `e = target − prediction`.
pub trait LeastSquares {
    fn num_params(&self) -> usize;
    fn num_residuals(&self) -> usize;
    fn errors(&self, w: &[f64]) -> Result<Vec<f64>>;
    /// `(∂e/∂w, e)` at `w`.
    fn jacobian(&self, w: &[f64]) -> Result<(Matrix, Vec<f64>)>;
}

/// A smooth objective for the first-order and quasi-Newton trainers.
pub trait Objective {
    fn dim(&self) -> usize;
    fn value(&self, w: &[f64]) -> Result<f64>;
    /// `(value, gradient)` at `w`.
    fn value_and_gradient(&self, w: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Mean squared error `E_D / n` of a least-squares problem.
pub struct MeanSquared<'a, P: LeastSquares>(pub &'a P);

impl<P: LeastSquares> Objective for MeanSquared<'_, P> {
    fn dim(&self) -> usize {
        self.0.num_params()
    }

    fn value(&self, w: &[f64]) -> Result<f64> {
        let e = self.0.errors(w)?;
        Ok(sum_sq(&e) / e.len() as f64)
    }

    fn value_and_gradient(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (j, e) = self.0.jacobian(w)?;
        let n = e.len() as f64;
        let mut g = j.tr_mul_vec(&e)?;
        g.iter_mut().for_each(|v| *v *= 2.0 / n);
        Ok((sum_sq(&e) / n, g))
    }
}

pub fn sum_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn norm(v: &[f64]) -> f64 {
    sum_sq(v).sqrt()
}

/// Scaled inputs and targets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainData {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl TrainData {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::Shape(format!(
                "{} inputs for {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// A network's fit to a data set, as a function of its parameter vector.
pub struct NetworkProblem<'a> {
    template: &'a Mlp,
    data: &'a TrainData,
}

impl<'a> NetworkProblem<'a> {
    pub fn new(template: &'a Mlp, data: &'a TrainData) -> Self {
        Self { template, data }
    }

    fn network(&self, w: &[f64]) -> Result<Mlp> {
        self.template.unflatten(w)
    }
}

impl LeastSquares for NetworkProblem<'_> {
    fn num_params(&self) -> usize {
        self.template.num_params()
    }

    fn num_residuals(&self) -> usize {
        self.data.len()
    }

    fn errors(&self, w: &[f64]) -> Result<Vec<f64>> {
        let net = self.network(w)?;
        self.data
            .inputs
            .iter()
            .zip(&self.data.targets)
            .map(|(x, t)| Ok(t - net.forward(x)?))
            .collect()
    }

    fn jacobian(&self, w: &[f64]) -> Result<(Matrix, Vec<f64>)> {
        self.network(w)?
            .error_jacobian(&self.data.inputs, &self.data.targets)
    }
}

pub fn mse(net: &Mlp, data: &TrainData) -> Result<f64> {
    let e = NetworkProblem::new(net, data).errors(net.params())?;
    Ok(sum_sq(&e) / e.len() as f64)
}

// ---------------------------------------------------------------------------
// Levenberg-Marquardt / Bayesian regularization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LmState {
    pub w: Vec<f64>,
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Effective parameter count; `None` until the first re-estimation.
    pub gamma: Option<f64>,
    pub e_d: f64,
    pub e_w: f64,
}

impl LmState {
    pub fn new(w: Vec<f64>, mu0: f64) -> Self {
        let e_w = sum_sq(&w);
        Self {
            w,
            mu: mu0,
            alpha: 0.0,
            beta: 1.0,
            gamma: None,
            e_d: f64::NAN,
            e_w,
        }
    }

    pub fn objective(&self) -> f64 {
        self.beta * self.e_d + self.alpha * self.e_w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LmOutcome {
    Accepted {
        f_before: f64,
        f_after: f64,
        /// Jacobian at the pre-step point, reused for the hyperparameter update.
        jacobian: Matrix,
    },
    MuOverflow,
    GradientVanished,
}

/// `Δw = −(β·JᵀJ + (α+μ)·I)⁻¹·(β·Jᵀe + α·w)`.
pub fn lm_step(j: &Matrix, e: &[f64], w: &[f64], alpha: f64, beta: f64, mu: f64) -> Result<Vec<f64>> {
    let c = alpha + mu;
    let sys = DampedNormal::new(j, beta, c)?;
    let mut step = sys.solve_jt(e)?;
    step.iter_mut().for_each(|v| *v *= -beta);
    if alpha > 0.0 {
        let hw = sys.solve(w)?;
        for (s, h) in step.iter_mut().zip(hw) {
            *s -= alpha * h;
        }
    }
    Ok(step)
}

/// One LM epoch: retry with growing μ until `F` decreases.
pub fn lm_epoch<P: LeastSquares>(problem: &P, state: &mut LmState, cfg: &TrainConfig) -> Result<LmOutcome> {
    let (j, e) = problem.jacobian(&state.w)?;
    state.e_d = sum_sq(&e);
    state.e_w = sum_sq(&state.w);
    let f_before = state.objective();
    if !f_before.is_finite() {
        return Err(Error::NonFinite(format!("objective {f_before}")));
    }

    let mut grad = j.tr_mul_vec(&e)?;
    for (g, w) in grad.iter_mut().zip(&state.w) {
        *g = state.beta * *g + state.alpha * w;
    }
    if norm(&grad) < cfg.min_grad {
        return Ok(LmOutcome::GradientVanished);
    }

    let mut trial = vec![0.0; state.w.len()];
    while state.mu <= cfg.mu_max {
        let accepted = match lm_step(&j, &e, &state.w, state.alpha, state.beta, state.mu) {
            Ok(step) => {
                for ((t, w), s) in trial.iter_mut().zip(&state.w).zip(&step) {
                    *t = w + s;
                }
                match problem.errors(&trial) {
                    Ok(e_new) => {
                        let e_d = sum_sq(&e_new);
                        let e_w = sum_sq(&trial);
                        let f = state.beta * e_d + state.alpha * e_w;
                        (f.is_finite() && f < f_before).then_some((e_d, e_w, f))
                    }
                    Err(Error::Numeric { .. }) | Err(Error::NonFinite(_)) => None,
                    Err(other) => return Err(other),
                }
            }
            Err(Error::NotPositiveDefinite { .. }) => None,
            Err(other) => return Err(other),
        };
        if let Some((e_d, e_w, f_after)) = accepted {
            state.w.copy_from_slice(&trial);
            state.e_d = e_d;
            state.e_w = e_w;
            state.mu *= cfg.mu_dec;
            return Ok(LmOutcome::Accepted {
                f_before,
                f_after,
                jacobian: j,
            });
        }
        state.mu *= cfg.mu_inc;
    }
    Ok(LmOutcome::MuOverflow)
}

/// Outcome of the evidence-framework re-estimation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HyperUpdate {
    Updated,
    /// `E_D` reached zero; training has converged.
    Converged,
}

/// Re-estimates `γ`, `α` and `β` from the Jacobian of the accepted step and
/// the post-step `E_D`, `E_W`.
///
/// `α = 0` gives `γ = N` without touching the Hessian. `E_W = 0` caps α at
/// [`ALPHA_CAP`]. A non-positive `β` estimate (more effective parameters
/// than residuals) keeps the previous β.
pub fn br_update_hyperparams(state: &mut LmState, jacobian: &Matrix, n_residuals: usize) -> Result<HyperUpdate> {
    let n_params = jacobian.cols() as f64;
    let gamma = if state.alpha == 0.0 {
        n_params
    } else {
        let sys = DampedNormal::new(jacobian, state.beta, state.alpha)?;
        (n_params - sys.trace_term()).clamp(0.0, n_params)
    };
    state.gamma = Some(gamma);
    if state.e_d == 0.0 {
        return Ok(HyperUpdate::Converged);
    }
    state.alpha = if state.e_w == 0.0 {
        ALPHA_CAP
    } else {
        (gamma / (2.0 * state.e_w)).min(ALPHA_CAP)
    };
    let beta = (n_residuals as f64 - gamma) / (2.0 * state.e_d);
    if beta > 0.0 && beta.is_finite() {
        state.beta = beta;
    }
    Ok(HyperUpdate::Updated)
}

// ---------------------------------------------------------------------------
// Gradient descent
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    /// Parameters moved; carries the objective before the step.
    Stepped { f_before: f64 },
    GradientVanished,
    /// No acceptable step was found; parameters unchanged.
    NoStep,
}

/// `w ← w − η·∇f(w)`.
pub fn gd_epoch<O: Objective>(obj: &O, w: &mut [f64], eta: f64, min_grad: f64) -> Result<StepOutcome> {
    let (f, g) = obj.value_and_gradient(w)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    if norm(&g) < min_grad {
        return Ok(StepOutcome::GradientVanished);
    }
    for (wi, gi) in w.iter_mut().zip(&g) {
        *wi -= eta * gi;
    }
    Ok(StepOutcome::Stepped { f_before: f })
}

// ---------------------------------------------------------------------------
// BFGS quasi-Newton
// ---------------------------------------------------------------------------

pub const ARMIJO_C: f64 = 1e-4;
pub const MAX_HALVINGS: usize = 30;

/// Dense inverse-Hessian approximation, initialized to the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct QnState {
    n: usize,
    h_inv: Vec<f64>,
    /// Curvature updates skipped because `sᵀy ≤ 0`.
    pub skipped_updates: usize,
}

impl QnState {
    pub fn new(n: usize) -> Self {
        let mut s = Self {
            n,
            h_inv: vec![0.0; n * n],
            skipped_updates: 0,
        };
        s.reset();
        s
    }

    pub fn reset(&mut self) {
        self.h_inv.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.n {
            self.h_inv[i * self.n + i] = 1.0;
        }
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.h_inv
            .chunks_exact(self.n)
            .map(|row| dot(row, v))
            .collect()
    }

    /// BFGS inverse update; returns `false` if skipped.
    pub fn update(&mut self, s: &[f64], y: &[f64]) -> bool {
        let sy = dot(s, y);
        if !(sy > 0.0) {
            self.skipped_updates += 1;
            return false;
        }
        let rho = 1.0 / sy;
        let hy = self.apply(y);
        let yhy = dot(y, &hy);
        let coef = rho * rho * yhy + rho;
        let n = self.n;
        for i in 0..n {
            let row = &mut self.h_inv[i * n..(i + 1) * n];
            for k in 0..n {
                row[k] += coef * s[i] * s[k] - rho * (s[i] * hy[k] + hy[i] * s[k]);
            }
        }
        true
    }
}

/// One BFGS iteration with an Armijo backtracking line search (halving from a
/// unit step), followed by a one-shot quadratic-interpolation refinement of
/// the accepted step length when it lowers the objective further.
pub fn qn_epoch<O: Objective>(obj: &O, w: &mut [f64], state: &mut QnState, min_grad: f64) -> Result<StepOutcome> {
    let (f0, g0) = obj.value_and_gradient(w)?;
    if !f0.is_finite() || g0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    if norm(&g0) < min_grad {
        return Ok(StepOutcome::GradientVanished);
    }
    let mut d: Vec<f64> = state.apply(&g0).into_iter().map(|v| -v).collect();
    let mut slope = dot(&g0, &d);
    if !(slope < 0.0) {
        state.reset();
        d = g0.iter().map(|v| -v).collect();
        slope = -sum_sq(&g0);
    }

    let eval = |t: f64| -> Result<Option<f64>> {
        let trial: Vec<f64> = w.iter().zip(&d).map(|(wi, di)| wi + t * di).collect();
        match obj.value(&trial) {
            Ok(f) if f.is_finite() => Ok(Some(f)),
            Ok(_) | Err(Error::Numeric { .. }) | Err(Error::NonFinite(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };

    let mut t = 1.0;
    let mut accepted = None;
    for _ in 0..=MAX_HALVINGS {
        if let Some(f) = eval(t)? {
            if f <= f0 + ARMIJO_C * t * slope {
                accepted = Some((t, f));
                break;
            }
        }
        t *= 0.5;
    }
    let Some((mut t, f_t)) = accepted else {
        state.reset();
        return Ok(StepOutcome::NoStep);
    };

    // Minimizer of the quadratic through f(0), f'(0) and f(t).
    let curvature = f_t - f0 - slope * t;
    if curvature > 0.0 {
        let t_star = -slope * t * t / (2.0 * curvature);
        if t_star.is_finite() && t_star > 0.0 && t_star != t {
            if let Some(f_star) = eval(t_star)? {
                if f_star < f_t {
                    t = t_star;
                }
            }
        }
    }

    let s: Vec<f64> = d.iter().map(|v| t * v).collect();
    for (wi, si) in w.iter_mut().zip(&s) {
        *wi += si;
    }
    let (_, g1) = obj.value_and_gradient(w)?;
    let y: Vec<f64> = g1.iter().zip(&g0).map(|(a, b)| a - b).collect();
    state.update(&s, &y);
    Ok(StepOutcome::Stepped { f_before: f0 })
}

// ---------------------------------------------------------------------------
// Early stopping
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopCheck {
    Continue,
    Stop(StopReason),
}

/// Counts consecutive strict increases of the validation error and tracks
/// the best-validation epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    limit: usize,
    max_epochs: usize,
    streak: usize,
    previous: Option<f64>,
    best: Option<(usize, f64)>,
}

impl EarlyStopping {
    pub fn new(val_fail_limit: usize, max_epochs: usize) -> Self {
        Self {
            limit: val_fail_limit,
            max_epochs,
            streak: 0,
            previous: None,
            best: None,
        }
    }

    pub fn streak(&self) -> usize {
        self.streak
    }

    /// Epoch with the lowest validation error seen so far.
    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }

    /// Feeds the validation error after `epoch` (1-based). `None` means no
    /// validation signal this epoch, which leaves the streak untouched.
    pub fn check(&mut self, epoch: usize, val_mse: Option<f64>) -> StopCheck {
        if let Some(v) = val_mse {
            match self.previous {
                Some(p) if v > p => self.streak += 1,
                _ => self.streak = 0,
            }
            self.previous = Some(v);
            if self.best.map_or(true, |(_, b)| v < b) {
                self.best = Some((epoch, v));
            }
            if self.limit > 0 && self.streak >= self.limit {
                return StopCheck::Stop(StopReason::ValidationStreak);
            }
        }
        if epoch >= self.max_epochs {
            StopCheck::Stop(StopReason::MaxEpochs)
        } else {
            StopCheck::Continue
        }
    }

    pub fn is_best(&self, epoch: usize) -> bool {
        self.best_epoch() == Some(epoch)
    }
}

// ---------------------------------------------------------------------------
// Training driver
// ---------------------------------------------------------------------------

/// Trains `mlp` on `train`, stopping early on `validation` (may be empty).
pub fn train(mlp: &Mlp, train: &TrainData, validation: &TrainData, cfg: &TrainConfig) -> Result<(Mlp, TrainRecord)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let problem = NetworkProblem::new(mlp, train);
    let n_train = train.len();
    let n_params = mlp.num_params();
    let mut net = mlp.clone();
    let mut stopper = EarlyStopping::new(cfg.val_fail_limit, cfg.max_epochs);
    let mut history = Vec::new();
    let mut snapshot: Option<Vec<f64>> = None;
    let mut rejected_accepts = 0;

    let mut lm = LmState::new(net.flatten(), cfg.mu0);
    let mut qn = (cfg.trainer == TrainerKind::QuasiNewton).then(|| QnState::new(n_params));
    let mut w = net.flatten();

    let fail = |epoch: usize, e: Error| Error::Training {
        epoch,
        message: e.to_string(),
    };

    let stop_reason = 'epochs: loop {
        let epoch = history.len() + 1;
        let mut validation_signal = true;
        let stats = match cfg.trainer {
            TrainerKind::BayesianRegularization | TrainerKind::LevenbergMarquardt => {
                let bayes = cfg.trainer == TrainerKind::BayesianRegularization;
                let outcome = lm_epoch(&problem, &mut lm, cfg).map_err(|e| fail(epoch, e))?;
                match outcome {
                    LmOutcome::Accepted {
                        f_before,
                        f_after,
                        jacobian,
                    } => {
                        if f_after >= f_before {
                            rejected_accepts += 1;
                        }
                        let scored = (lm.alpha, lm.beta);
                        let mut converged = false;
                        if bayes {
                            let upd = br_update_hyperparams(&mut lm, &jacobian, n_train)
                                .map_err(|e| fail(epoch, e))?;
                            converged = upd == HyperUpdate::Converged;
                        } else {
                            lm.gamma = Some(n_params as f64);
                        }
                        w.copy_from_slice(&lm.w);
                        let stats = EpochStats {
                            epoch,
                            e_d: lm.e_d,
                            e_w: lm.e_w,
                            f: scored.1 * lm.e_d + scored.0 * lm.e_w,
                            val_mse: None,
                            alpha: lm.alpha,
                            beta: lm.beta,
                            gamma: lm.gamma,
                            mu: Some(lm.mu),
                        };
                        if converged {
                            net.set_params(&w).map_err(|e| fail(epoch, e))?;
                            history.push(stats);
                            break 'epochs StopReason::GradientVanished;
                        }
                        stats
                    }
                    LmOutcome::MuOverflow => break 'epochs StopReason::MuOverflow,
                    LmOutcome::GradientVanished => break 'epochs StopReason::GradientVanished,
                }
            }
            TrainerKind::GradientDescent | TrainerKind::QuasiNewton => {
                let obj = MeanSquared(&problem);
                let outcome = match qn.as_mut() {
                    Some(state) => qn_epoch(&obj, &mut w, state, cfg.min_grad),
                    None => gd_epoch(&obj, &mut w, cfg.eta, cfg.min_grad),
                }
                .map_err(|e| fail(epoch, e))?;
                match outcome {
                    StepOutcome::GradientVanished => break 'epochs StopReason::GradientVanished,
                    StepOutcome::NoStep => validation_signal = false,
                    StepOutcome::Stepped { .. } => {}
                }
                let e = problem.errors(&w).map_err(|e| fail(epoch, e))?;
                let e_d = sum_sq(&e);
                if !e_d.is_finite() {
                    return Err(fail(epoch, Error::NonFinite(format!("E_D = {e_d}"))));
                }
                EpochStats {
                    epoch,
                    e_d,
                    e_w: sum_sq(&w),
                    f: e_d,
                    val_mse: None,
                    alpha: 0.0,
                    beta: 1.0,
                    gamma: None,
                    mu: None,
                }
            }
        };

        net.set_params(&w).map_err(|e| fail(epoch, e))?;
        let val_mse = if validation.is_empty() {
            None
        } else {
            Some(mse(&net, validation).map_err(|e| fail(epoch, e))?)
        };
        history.push(EpochStats { val_mse, ..stats });

        let check = stopper.check(epoch, val_mse.filter(|_| validation_signal));
        if stopper.is_best(epoch) {
            snapshot = Some(w.clone());
        }
        if let StopCheck::Stop(reason) = check {
            break reason;
        }
    };

    let mut restored_epoch = None;
    if stop_reason == StopReason::ValidationStreak {
        if let (Some(best), Some(epoch)) = (snapshot, stopper.best_epoch()) {
            net.set_params(&best)?;
            restored_epoch = Some(epoch);
        }
    }
    Ok((
        net,
        TrainRecord {
            history,
            stop_reason,
            restored_epoch,
            rejected_accepts,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `y = w·x` with no bias.
    struct LinearThroughOrigin {
        xs: Vec<f64>,
        ts: Vec<f64>,
    }

    impl LeastSquares for LinearThroughOrigin {
        fn num_params(&self) -> usize {
            1
        }
        fn num_residuals(&self) -> usize {
            self.xs.len()
        }
        fn errors(&self, w: &[f64]) -> Result<Vec<f64>> {
            Ok(self.xs.iter().zip(&self.ts).map(|(x, t)| t - w[0] * x).collect())
        }
        fn jacobian(&self, w: &[f64]) -> Result<(Matrix, Vec<f64>)> {
            let j = Matrix::new(self.xs.len(), 1, self.xs.iter().map(|x| -x).collect())?;
            Ok((j, self.errors(w)?))
        }
    }

    /// Random linear least squares `e = t − A·w`.
    struct RandomLinear {
        a: Matrix,
        t: Vec<f64>,
    }

    impl LeastSquares for RandomLinear {
        fn num_params(&self) -> usize {
            self.a.cols()
        }
        fn num_residuals(&self) -> usize {
            self.a.rows()
        }
        fn errors(&self, w: &[f64]) -> Result<Vec<f64>> {
            let p = self.a.mul_vec(w)?;
            Ok(self.t.iter().zip(p).map(|(t, p)| t - p).collect())
        }
        fn jacobian(&self, w: &[f64]) -> Result<(Matrix, Vec<f64>)> {
            let mut j = self.a.clone();
            j.scale(-1.0);
            Ok((j, self.errors(w)?))
        }
    }

    /// `½·(w − c)ᵀ·A·(w − c)`
    struct Quadratic {
        a: Matrix,
        c: Vec<f64>,
    }

    impl Objective for Quadratic {
        fn dim(&self) -> usize {
            self.c.len()
        }
        fn value(&self, w: &[f64]) -> Result<f64> {
            Ok(self.value_and_gradient(w)?.0)
        }
        fn value_and_gradient(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
            let d: Vec<f64> = w.iter().zip(&self.c).map(|(a, b)| a - b).collect();
            let g = self.a.mul_vec(&d)?;
            Ok((0.5 * dot(&d, &g), g))
        }
    }

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let b = Matrix::new(n, n, (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut a = crate::numkernel::matmul(&b.transpose(), &b).unwrap();
        a.add_diagonal(1.0);
        a
    }

    #[test]
    fn trainer_names_round_trip() {
        for k in TrainerKind::ALL {
            assert_eq!(k.short_name().parse::<TrainerKind>().unwrap(), k);
        }
        assert!("sgd".parse::<TrainerKind>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { max_epochs: 0, ..Default::default() },
            TrainConfig { eta: 0.0, ..Default::default() },
            TrainConfig { mu_dec: 1.0, ..Default::default() },
            TrainConfig { mu_inc: 0.5, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn lm_single_step_solves_linear_problem() {
        let p = LinearThroughOrigin { xs: vec![1.0, 2.0], ts: vec![1.0, 2.0] };
        let cfg = TrainConfig { mu0: 1e-9, ..TrainConfig::new(TrainerKind::LevenbergMarquardt, 0) };
        let mut st = LmState::new(vec![0.0], cfg.mu0);
        let out = lm_epoch(&p, &mut st, &cfg).unwrap();
        assert!(matches!(out, LmOutcome::Accepted { .. }));
        // normal equations: 5·w = 5
        assert!((st.w[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn lm_step_vanishes_as_mu_grows() {
        let p = LinearThroughOrigin { xs: vec![1.0, 2.0], ts: vec![1.0, 2.0] };
        let (j, e) = p.jacobian(&[0.0]).unwrap();
        let mut last = f64::INFINITY;
        for mu in [1.0, 1e2, 1e4, 1e8] {
            let step = lm_step(&j, &e, &[0.0], 0.0, 1.0, mu).unwrap();
            // gradient βJᵀe = −5, so Δw → 5/μ
            assert!((step[0] - 5.0 / (5.0 + mu)).abs() < 1e-12);
            assert!(step[0].abs() < last);
            last = step[0].abs();
        }
        assert!(last < 1e-7);
    }

    #[test]
    fn lm_reports_mu_overflow_when_no_step_helps() {
        // Errors that no parameter can reduce, with a fake nonzero Jacobian.
        struct Stuck;
        impl LeastSquares for Stuck {
            fn num_params(&self) -> usize { 1 }
            fn num_residuals(&self) -> usize { 1 }
            fn errors(&self, _: &[f64]) -> Result<Vec<f64>> { Ok(vec![1.0]) }
            fn jacobian(&self, _: &[f64]) -> Result<(Matrix, Vec<f64>)> {
                Ok((Matrix::new(1, 1, vec![1.0])?, vec![1.0]))
            }
        }
        let cfg = TrainConfig::new(TrainerKind::LevenbergMarquardt, 0);
        let mut st = LmState::new(vec![0.0], cfg.mu0);
        assert_eq!(lm_epoch(&Stuck, &mut st, &cfg).unwrap(), LmOutcome::MuOverflow);
        assert!(st.mu > cfg.mu_max);
    }

    #[test]
    fn br_with_zero_alpha_counts_every_parameter() {
        let j = Matrix::new(2, 3, vec![1.0, 0.0, 2.0, 0.5, 1.0, 0.0]).unwrap();
        let mut st = LmState::new(vec![0.1, 0.2, 0.3], 0.005);
        st.e_d = 0.7;
        br_update_hyperparams(&mut st, &j, 2).unwrap();
        assert_eq!(st.gamma, Some(3.0));
    }

    #[test]
    fn br_hand_arithmetic_on_single_parameter() {
        // J = [1], e = [0.5], w = 1, α = 0, β = 1: γ = 1, E_W = 1 so
        // α ← 1/2, and n − γ = 0 leaves β at its previous value.
        let j = Matrix::new(1, 1, vec![1.0]).unwrap();
        let mut st = LmState::new(vec![1.0], 0.005);
        st.e_d = 0.25;
        br_update_hyperparams(&mut st, &j, 1).unwrap();
        assert_eq!(st.gamma, Some(1.0));
        assert_eq!(st.alpha, 1.0 / (2.0 * 1.0));
        assert_eq!(st.beta, 1.0);

        // Second round with α > 0: H = β + α = 1.5, γ = 1 − 0.5/1.5.
        br_update_hyperparams(&mut st, &j, 1).unwrap();
        let gamma = 1.0 - 0.5 / 1.5;
        assert!((st.gamma.unwrap() - gamma).abs() < 1e-15);
        assert!((st.alpha - gamma / 2.0).abs() < 1e-15);
        assert!((st.beta - (1.0 - gamma) / 0.5).abs() < 1e-15);
    }

    #[test]
    fn br_edge_cases() {
        let j = Matrix::new(1, 2, vec![1.0, 1.0]).unwrap();
        let mut st = LmState::new(vec![0.0, 0.0], 0.005);
        st.e_d = 1.0;
        br_update_hyperparams(&mut st, &j, 1).unwrap();
        assert_eq!(st.alpha, ALPHA_CAP);

        let mut st = LmState::new(vec![1.0, 0.0], 0.005);
        st.e_d = 0.0;
        assert_eq!(br_update_hyperparams(&mut st, &j, 1).unwrap(), HyperUpdate::Converged);
    }

    #[test]
    fn gd_quadratic_hand_recurrence() {
        let q = Quadratic { a: Matrix::identity(1), c: vec![3.0] };
        let mut w = vec![0.0];
        gd_epoch(&q, &mut w, 0.5, 1e-12).unwrap();
        assert_eq!(w[0], 1.5);
        let mut w = vec![3.0];
        assert_eq!(gd_epoch(&q, &mut w, 0.5, 1e-12).unwrap(), StepOutcome::GradientVanished);
        assert_eq!(w[0], 3.0);
    }

    #[test]
    fn gd_monotone_below_stability_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random_spd(4, &mut rng);
        // λ_max ≤ trace for SPD, so η = 1.9/trace is below 2/λ_max
        let trace: f64 = (0..4).map(|i| a.get(i, i)).sum();
        let q = Quadratic { a, c: vec![1.0, -2.0, 0.5, 3.0] };
        let mut w = vec![0.0; 4];
        let mut last = q.value(&w).unwrap();
        for _ in 0..200 {
            gd_epoch(&q, &mut w, 1.9 / trace, 0.0).unwrap();
            let f = q.value(&w).unwrap();
            assert!(f <= last + 1e-15);
            last = f;
        }
    }

    #[test]
    fn gd_linear_model_follows_textbook_recurrence() {
        // MSE on {(1, 2)}: w ← w − η·2·(w − 2)
        let p = LinearThroughOrigin { xs: vec![1.0], ts: vec![2.0] };
        let obj = MeanSquared(&p);
        let mut w = vec![0.3];
        let mut oracle = 0.3;
        for _ in 0..5 {
            gd_epoch(&obj, &mut w, 0.25, 0.0).unwrap();
            oracle -= 0.25 * 2.0 * (oracle - 2.0);
            assert!((w[0] - oracle).abs() < 1e-15);
        }
        assert!((w[0] - 2.0).abs() < 0.1);
    }

    #[test]
    fn bfgs_terminates_on_quadratics() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for n in 1..=5 {
            for _ in 0..10 {
                let a = random_spd(n, &mut rng);
                let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let q = Quadratic { a, c };
                let mut w = vec![0.0; n];
                let mut st = QnState::new(n);
                let mut converged = false;
                for _ in 0..n + 2 {
                    qn_epoch(&q, &mut w, &mut st, 0.0).unwrap();
                    let (_, g) = q.value_and_gradient(&w).unwrap();
                    if norm(&g) < 1e-8 {
                        converged = true;
                        break;
                    }
                }
                assert!(converged, "n={n}");
            }
        }
    }

    #[test]
    fn bfgs_fixed_point_and_curvature_guard() {
        let q = Quadratic { a: Matrix::identity(2), c: vec![1.0, 1.0] };
        let mut w = vec![1.0, 1.0];
        let mut st = QnState::new(2);
        assert_eq!(qn_epoch(&q, &mut w, &mut st, 1e-12).unwrap(), StepOutcome::GradientVanished);
        assert_eq!(w, vec![1.0, 1.0]);

        let before = st.clone();
        assert!(!st.update(&[1.0, 0.0], &[-1.0, 0.0]));
        assert_eq!(st.h_inv, before.h_inv);
        assert_eq!(st.skipped_updates, 1);
    }

    #[test]
    fn early_stop_max_epochs_on_decreasing_validation() {
        let mut es = EarlyStopping::new(10, 100);
        for epoch in 1..=100 {
            let c = es.check(epoch, Some(1.0 / epoch as f64));
            if epoch < 100 {
                assert_eq!(c, StopCheck::Continue);
            } else {
                assert_eq!(c, StopCheck::Stop(StopReason::MaxEpochs));
            }
        }
    }

    #[test]
    fn early_stop_after_ten_increases() {
        let mut es = EarlyStopping::new(10, 100);
        assert_eq!(es.check(1, Some(1.0)), StopCheck::Continue);
        for epoch in 2..=10 {
            assert_eq!(es.check(epoch, Some(epoch as f64)), StopCheck::Continue);
        }
        assert_eq!(es.check(11, Some(11.0)), StopCheck::Stop(StopReason::ValidationStreak));
        assert_eq!(es.best_epoch(), Some(1));
    }

    #[test]
    fn early_stop_streak_resets() {
        let mut es = EarlyStopping::new(10, 100);
        es.check(1, Some(1.0));
        for epoch in 2..=10 {
            es.check(epoch, Some(epoch as f64));
        }
        assert_eq!(es.streak(), 9);
        es.check(11, Some(0.5));
        assert_eq!(es.streak(), 0);
        // equal values are not increases
        es.check(12, Some(0.5));
        assert_eq!(es.streak(), 0);
        // a missing signal leaves the count alone
        es.check(13, Some(0.6));
        es.check(14, None);
        assert_eq!(es.streak(), 1);
    }

    fn toy_data(n: usize, seed: u64) -> TrainData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..5).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let targets = inputs
            .iter()
            .map(|x| 0.3 * x[0] + 0.5 * x[1] * x[2] - 0.2 * x[4] + 0.1)
            .collect();
        TrainData::new(inputs, targets).unwrap()
    }

    #[test]
    fn perfect_fit_start_stops_immediately() {
        let net = Mlp::build(&[4], Activation::LogSigmoid, 5).unwrap();
        let mut data = toy_data(6, 1);
        data.targets = data.inputs.iter().map(|x| net.forward(x).unwrap()).collect();
        for kind in TrainerKind::ALL {
            let cfg = TrainConfig::new(kind, 0);
            let (out, rec) = train(&net, &data, &TrainData::default(), &cfg).unwrap();
            assert!(
                matches!(rec.stop_reason, StopReason::GradientVanished | StopReason::MaxEpochs),
                "{kind}: {:?}",
                rec.stop_reason
            );
            assert!(rec.history.iter().all(|s| s.e_d < 1e-20));
            assert_eq!(out.params(), net.params());
        }
    }

    #[test]
    fn gradient_descent_converges_on_single_point() {
        // y = w·x, data {(1, 2)}, η = 0.5: w ← w − 0.5·2·(w − 2)
        let p = LinearThroughOrigin { xs: vec![1.0], ts: vec![2.0] };
        let obj = MeanSquared(&p);
        let mut w = vec![0.0];
        let cfg = TrainConfig::new(TrainerKind::GradientDescent, 0);
        for _ in 0..3 {
            gd_epoch(&obj, &mut w, cfg.eta, cfg.min_grad).unwrap();
        }
        assert!((w[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_descent_trains_a_network_through_train() {
        let mut net = Mlp::zeros(1, &[1], Activation::Identity).unwrap();
        net.set_params(&[1.0, 0.0, 1.0, 0.0]).unwrap();
        let data = TrainData::new(vec![vec![1.0]], vec![2.0]).unwrap();
        let cfg = TrainConfig { eta: 0.05, ..TrainConfig::new(TrainerKind::GradientDescent, 0) };
        let (out, rec) = train(&net, &data, &TrainData::default(), &cfg).unwrap();
        assert!((out.forward(&[1.0]).unwrap() - 2.0).abs() < 1e-6);
        assert!(rec.epochs() <= cfg.max_epochs);
    }

    #[test]
    fn diverging_gradient_descent_reports_epoch() {
        let mut net = Mlp::zeros(1, &[1], Activation::Identity).unwrap();
        net.set_params(&[1.0, 0.0, 1.0, 0.0]).unwrap();
        let data = TrainData::new(vec![vec![1.0]], vec![2.0]).unwrap();
        let cfg = TrainConfig { eta: 5.0, ..TrainConfig::new(TrainerKind::GradientDescent, 0) };
        assert!(matches!(
            train(&net, &data, &TrainData::default(), &cfg),
            Err(Error::Training { .. })
        ));
    }

    #[test]
    fn every_trainer_reduces_training_error() {
        let data = toy_data(20, 3);
        let val = toy_data(5, 4);
        for kind in TrainerKind::ALL {
            let net = Mlp::build(&[6], Activation::LogSigmoid, 9).unwrap();
            let before = mse(&net, &data).unwrap();
            let mut cfg = TrainConfig::new(kind, 0);
            cfg.eta = 0.1;
            let (out, rec) = train(&net, &data, &val, &cfg).unwrap();
            let after = mse(&out, &data).unwrap();
            assert!(after < before, "{kind}: {before} -> {after}");
            assert!(rec.epochs() <= 100);
            assert_eq!(rec.rejected_accepts, 0);
        }
    }

    #[test]
    fn validation_streak_restores_best_weights() {
        // Validation targets that the fit moves away from.
        let data = toy_data(12, 5);
        let mut val = toy_data(4, 6);
        val.targets.iter_mut().for_each(|t| *t = -*t + 5.0);
        let net = Mlp::build(&[5], Activation::TanSigmoid, 1).unwrap();
        let cfg = TrainConfig::new(TrainerKind::LevenbergMarquardt, 0);
        let (out, rec) = train(&net, &data, &val, &cfg).unwrap();
        if rec.stop_reason == StopReason::ValidationStreak {
            let best = rec.restored_epoch.unwrap();
            let best_val = rec.history[best - 1].val_mse.unwrap();
            assert!((mse(&out, &val).unwrap() - best_val).abs() < 1e-12);
            assert!(rec.history.iter().all(|s| s.val_mse.unwrap() >= best_val));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_data(10, 8);
        let val = toy_data(3, 9);
        for kind in TrainerKind::ALL {
            let net = Mlp::build(&[5, 4], Activation::LogSigmoid, 2).unwrap();
            let cfg = TrainConfig::new(kind, 0);
            let a = train(&net, &data, &val, &cfg).unwrap();
            let b = train(&net, &data, &val, &cfg).unwrap();
            assert_eq!(a.0.params(), b.0.params());
            assert_eq!(a.1, b.1);
        }
    }

    #[test]
    fn record_csv_header() {
        let data = toy_data(6, 1);
        let net = Mlp::build(&[3], Activation::LogSigmoid, 0).unwrap();
        let cfg = TrainConfig { max_epochs: 3, ..TrainConfig::default() };
        let (_, rec) = train(&net, &data, &data, &cfg).unwrap();
        let mut buf = Vec::new();
        rec.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,E_D,E_W,F,val_mse,alpha,beta,gamma,mu\n"));
        assert_eq!(text.lines().count(), rec.epochs() + 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]

            #[test]
            fn accepted_lm_steps_decrease_objective(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (rows, cols) = (rng.gen_range(1..8), rng.gen_range(1..8));
                let a = Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
                let t = (0..rows).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let p = RandomLinear { a, t };
                let cfg = TrainConfig::default();
                let mut st = LmState::new((0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect(), cfg.mu0);
                st.alpha = rng.gen_range(0.0..1.0);
                st.beta = rng.gen_range(0.1..2.0);
                if let LmOutcome::Accepted { f_before, f_after, .. } = lm_epoch(&p, &mut st, &cfg).unwrap() {
                    prop_assert!(f_after < f_before);
                }
            }

            #[test]
            fn hyperparameters_stay_in_range(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (rows, cols) = (rng.gen_range(1..10), rng.gen_range(1..30));
                let j = Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
                let mut st = LmState::new((0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect(), 0.005);
                for _ in 0..3 {
                    st.e_d = rng.gen_range(1e-6..5.0);
                    br_update_hyperparams(&mut st, &j, rows).unwrap();
                    let g = st.gamma.unwrap();
                    prop_assert!((0.0..=cols as f64).contains(&g));
                    prop_assert!(st.alpha >= 0.0 && st.alpha.is_finite());
                    prop_assert!(st.beta >= 0.0 && st.beta.is_finite());
                }
            }
        }
    }
}
