//! The variational evolution engine: sequential Trotter steps, gradient
//! ascent of the step overlap density with ADAM on the unitary manifold,
//! the per-step environment refresh, the accumulated error monitor, and the
//! full simulation driver.

use ndarray::prelude::*;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::{Representation, SiteUnitary, StateUnitary};
use crate::gates::{pauli, Pauli};
use crate::tensor::{self, dagger, expm_hermitian, reunitarize, CMat, CVec};
use crate::transfer::{
    self, build_trotter_transfer, exact_environments, gradient_lambda, EnvForm, EnvSide,
    EnvironmentState, GateRef, PowerMethodOptions, TransferOperator, TrotterStepGates,
};
use crate::umps::{
    self, circuit_to_umps_any, entropy_of_spectrum, fidelity_density, itebd_evolve,
    local_expectation_mps, ItebdOptions, SpinHamiltonian, UniformMps,
};

#[derive(Debug, Error)]
pub enum EvolveError {
    #[error(
        "optimizer stalled with |lambda|^2 = {lambda_sq:.6} below the floor {floor}; \
         a smaller time step usually fixes this"
    )]
    StepFailure { lambda_sq: f64, floor: f64 },
    #[error("unsupported Trotter order {0}; use 1 or 2")]
    UnsupportedOrder(u32),
    #[error(transparent)]
    Transfer(#[from] transfer::TransferError),
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Umps(#[from] umps::UmpsError),
}

pub type Result<T> = std::result::Result<T, EvolveError>;

// ---------------------------------------------------------------------------
// Trotter step
// ---------------------------------------------------------------------------

/// One sequential Trotter step `u(dt) = prod_j exp(-i dt h_j)` with the bond
/// term `h_j = J X_j X_{j+1} + g Z_j + h X_j` (full on-site fields on the
/// left site, which keeps the sweep a single-site unit cell). Second order
/// runs a forward sweep at `dt/2` followed by the reversed sweep at `dt/2`.
#[derive(Debug, Clone)]
pub struct TrotterStep {
    pub dt: f64,
    pub order: u32,
    pub bond_hamiltonian: CMat,
    gates: TrotterStepGates,
}

impl TrotterStep {
    pub fn gates(&self) -> &TrotterStepGates {
        &self.gates
    }
}

pub fn build_trotter_step(ham: &SpinHamiltonian, dt: f64, order: u32) -> Result<TrotterStep> {
    let h = ham.bond_left_site();
    let gates = match order {
        1 => TrotterStepGates::Order1 { u: expm_hermitian(&h, C64::new(0.0, -dt))? },
        2 => TrotterStepGates::Order2 { u_half: expm_hermitian(&h, C64::new(0.0, -dt / 2.0))? },
        o => return Err(EvolveError::UnsupportedOrder(o)),
    };
    Ok(TrotterStep { dt, order, bond_hamiltonian: h, gates })
}

// ---------------------------------------------------------------------------
// Unitary-manifold optimizer pieces
// ---------------------------------------------------------------------------

/// Projects an ambient gradient onto the tangent space of the unitary
/// manifold at `u`: `D - 1/2 u (u^dag D + D^dag u)`. The result satisfies
/// `u^dag P` anti-Hermitian.
pub fn tangent_project(d: &CMat, u: &CMat) -> CMat {
    let ud = dagger(u).dot(d);
    let du = dagger(d).dot(u);
    d - &u.dot(&(&ud + &du)).mapv(|z| z * 0.5)
}

/// Bias-corrected ADAM ascent over a list of complex matrices, treating the
/// real and imaginary parts of every entry as independent parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<CMat>,
    v_re: Vec<Array2<f64>>,
    v_im: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&s| CMat::zeros(s)).collect(),
            v_re: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v_im: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }

    /// One ascent step; returns the updated parameter matrices.
    pub fn update(&mut self, params: &[CMat], grads: &[CMat]) -> Vec<CMat> {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut out = Vec::with_capacity(params.len());
        for k in 0..params.len() {
            let g = &grads[k];
            self.m[k] = self.m[k].mapv(|z| z * self.beta1) + g.mapv(|z| z * (1.0 - self.beta1));
            let gre = Array2::from_shape_fn(g.dim(), |ix| g[ix].re * g[ix].re);
            let gim = Array2::from_shape_fn(g.dim(), |ix| g[ix].im * g[ix].im);
            self.v_re[k] =
                self.v_re[k].mapv(|x| x * self.beta2) + gre.mapv(|x| x * (1.0 - self.beta2));
            self.v_im[k] =
                self.v_im[k].mapv(|x| x * self.beta2) + gim.mapv(|x| x * (1.0 - self.beta2));
            let mut p = params[k].clone();
            for ((i, j), val) in p.indexed_iter_mut() {
                let mh = self.m[k][(i, j)] / bc1;
                let vre = (self.v_re[k][(i, j)] / bc2).sqrt() + self.eps;
                let vim = (self.v_im[k][(i, j)] / bc2).sqrt() + self.eps;
                *val += C64::new(self.lr * mh.re / vre, self.lr * mh.im / vim);
            }
            out.push(p);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Evolution step
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    Even,
    Odd,
}

#[derive(Debug, Clone)]
pub enum EnvMode {
    /// Environments from Arnoldi on the full transfer operator.
    Exact,
    /// Layered sequential circuits updated by the modified power method.
    Layered { m_e: usize, power: PowerMethodOptions },
}

#[derive(Debug, Clone)]
pub struct EvolutionOptions {
    pub env_mode: EnvMode,
    /// Stop the inner loop when `|lambda|^2` changes by less than this.
    pub inner_tol: f64,
    pub max_inner_iters: usize,
    /// Exact mode refreshes environments every this many inner iterations.
    pub env_refresh_every: usize,
    pub adam_lr: f64,
    pub arnoldi_tol: f64,
    /// Abort when the converged `|lambda|^2` sits below this floor.
    pub lambda_floor: f64,
    /// When the best objective has not improved for this many iterations,
    /// the learning rate is scaled down by `lr_decay`.
    pub plateau_window: usize,
    pub lr_decay: f64,
    /// Give up decaying (and stop) once the learning rate falls below this.
    pub lr_floor: f64,
}

impl Default for EvolutionOptions {
    fn default() -> Self {
        Self {
            env_mode: EnvMode::Exact,
            inner_tol: 1e-12,
            max_inner_iters: 5000,
            env_refresh_every: 1,
            adam_lr: 3e-3,
            arnoldi_tol: 1e-12,
            lambda_floor: 0.9,
            plateau_window: 200,
            lr_decay: 0.3,
            lr_floor: 1e-9,
        }
    }
}

/// The environments carried between steps as warm starts, in the working
/// frame of the step that produced them.
#[derive(Debug, Clone)]
pub struct StepEnvironments {
    pub right: EnvironmentState,
    pub left: EnvironmentState,
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub lambda: C64,
    pub infidelity_step: f64,
    pub inner_iterations: usize,
    pub converged: bool,
    /// Norm distance of the layered environments to the exact ones,
    /// (right, left); layered mode only.
    pub env_fit_errors: Option<(f64, f64)>,
}

#[derive(Debug)]
pub struct StepOutcome {
    pub theta_next: StateUnitary,
    pub envs: StepEnvironments,
    pub record: StepRecord,
}

/// One variational time step: finds the circuit in the flipped
/// representation maximizing the overlap density with the Trotter-evolved
/// input state. Even steps map Left -> Right; odd steps are run through the
/// spatial mirror image of the same machinery.
pub fn evolution_step(
    theta_t: &StateUnitary,
    envs_prev: Option<&StepEnvironments>,
    trotter: &TrotterStep,
    opts: &EvolutionOptions,
) -> Result<StepOutcome> {
    match theta_t.representation {
        Representation::Left => evolution_step_even(theta_t, envs_prev, trotter.gates(), opts),
        Representation::Right => {
            // Mirror to the even geometry; the mirrored Trotter gates carry
            // the on-site fields on the other bond leg, an equally valid
            // splitting of the same order.
            let mirrored = theta_t.mirror();
            let gates = trotter.gates().mirror();
            let out = evolution_step_even(&mirrored, envs_prev, &gates, opts)?;
            Ok(StepOutcome {
                theta_next: out.theta_next.mirror(),
                envs: out.envs,
                record: out.record,
            })
        }
    }
}

fn evolution_step_even(
    theta_t: &StateUnitary,
    envs_prev: Option<&StepEnvironments>,
    gates: &TrotterStepGates,
    opts: &EvolutionOptions,
) -> Result<StepOutcome> {
    debug_assert_eq!(theta_t.representation, Representation::Left);
    let ul: SiteUnitary = theta_t.clone().into();
    let mut theta_next = StateUnitary {
        n_qubits: theta_t.n_qubits,
        representation: Representation::Right,
        layers: theta_t.layers.clone(),
    };
    let n_env = 2 * theta_t.n_qubits - 2 + gates.order() as usize;

    let wrt: Vec<GateRef> = (0..theta_next.m_u())
        .flat_map(|layer| {
            (0..theta_next.n_qubits - 1).map(move |index| GateRef { layer, index })
        })
        .collect();
    let shapes: Vec<(usize, usize)> = wrt.iter().map(|_| (4, 4)).collect();
    let mut adam = AdamState::new(&shapes, opts.adam_lr);

    let mut env_r: Option<EnvironmentState> = None;
    let mut env_l: Option<EnvironmentState> = None;
    if let Some(prev) = envs_prev {
        if prev.right.n_qubits() == n_env {
            env_r = Some(prev.right.clone());
            env_l = Some(prev.left.clone());
        }
    }

    let mut last_obj = f64::NAN;
    let mut best_obj = f64::NEG_INFINITY;
    let mut best_iter = 0usize;
    let mut converged = false;
    let mut iterations = 0usize;

    for iter in 0..opts.max_inner_iters {
        iterations = iter + 1;
        let t_op = build_trotter_transfer(&ul, &theta_next.clone().into(), gates, true)?;
        refresh_environments(&t_op, &mut env_r, &mut env_l, iter, opts)?;
        let (l, r) = (env_l.as_ref().unwrap().vector(), env_r.as_ref().unwrap().vector());

        let (lam, grads) = gradient_lambda(&t_op, &l, &r, &wrt)?;
        let obj = lam.norm_sqr();
        if (obj - last_obj).abs() < opts.inner_tol {
            // The change criterion at full rate can fire a decade short of
            // the optimum; take it as a cue to settle at a smaller rate and
            // only stop once the rate itself is small.
            if adam.lr <= 1e-4 {
                converged = true;
                break;
            }
            adam.lr *= opts.lr_decay;
            best_iter = iter;
        }
        last_obj = obj;
        if obj > best_obj + opts.inner_tol {
            best_obj = obj;
            best_iter = iter;
        } else if iter - best_iter > opts.plateau_window {
            // ADAM oscillates at a fixed step scale near an optimum;
            // shrinking the rate lets it settle.
            adam.lr *= opts.lr_decay;
            best_iter = iter;
            if adam.lr < opts.lr_floor {
                break;
            }
        }

        let params: Vec<CMat> = wrt
            .iter()
            .map(|gr| theta_next.layers[gr.layer][gr.index].matrix.clone())
            .collect();
        let projected: Vec<CMat> = wrt
            .iter()
            .zip(grads.iter())
            .map(|(gr, c)| {
                let d = c.mapv(|z| z * 2.0 * lam.conj());
                tangent_project(&d, &theta_next.layers[gr.layer][gr.index].matrix)
            })
            .collect();
        let updated = adam.update(&params, &projected);
        for (gr, new_m) in wrt.iter().zip(updated.into_iter()) {
            theta_next.layers[gr.layer][gr.index].matrix = reunitarize(&new_m)?;
        }
    }

    // Re-verify the converged overlap on fresh exact environments.
    let t_op = build_trotter_transfer(&ul, &theta_next.clone().into(), gates, false)?;
    let seed_r = env_r.as_ref().map(|e| e.vector());
    let seed_l = env_l.as_ref().map(|e| e.vector());
    let exact = exact_environments(&t_op, seed_r.as_ref(), seed_l.as_ref(), opts.arnoldi_tol)?;
    let lambda = exact.lambda;

    let (envs, env_fit_errors) = match &opts.env_mode {
        EnvMode::Exact => (
            StepEnvironments { right: exact.right, left: exact.left },
            None,
        ),
        EnvMode::Layered { .. } => {
            let (er, el) = (env_r.unwrap(), env_l.unwrap());
            let fit = match (&er.form, &el.form) {
                (EnvForm::Layered(cr), EnvForm::Layered(cl)) => Some((
                    transfer::env_distance(&exact.right.vector(), cr),
                    transfer::env_distance(&exact.left.vector(), cl),
                )),
                _ => None,
            };
            (StepEnvironments { right: er, left: el }, fit)
        }
    };

    let lambda_sq = lambda.norm_sqr();
    if lambda_sq < opts.lambda_floor {
        return Err(EvolveError::StepFailure { lambda_sq, floor: opts.lambda_floor });
    }
    if !converged {
        log::warn!(
            "inner loop hit the iteration cap ({}) with |lambda|^2 = {:.12}",
            opts.max_inner_iters,
            lambda_sq
        );
    }
    Ok(StepOutcome {
        theta_next,
        envs,
        record: StepRecord {
            lambda,
            infidelity_step: (1.0 - lambda_sq).max(0.0),
            inner_iterations: iterations,
            converged,
            env_fit_errors,
        },
    })
}

fn refresh_environments(
    t_op: &TransferOperator,
    env_r: &mut Option<EnvironmentState>,
    env_l: &mut Option<EnvironmentState>,
    iter: usize,
    opts: &EvolutionOptions,
) -> Result<()> {
    match &opts.env_mode {
        EnvMode::Exact => {
            let due = iter % opts.env_refresh_every.max(1) == 0;
            if due || env_r.is_none() {
                let seed_r = env_r.as_ref().map(|e| e.vector());
                let seed_l = env_l.as_ref().map(|e| e.vector());
                let exact = exact_environments(
                    t_op,
                    seed_r.as_ref(),
                    seed_l.as_ref(),
                    opts.arnoldi_tol,
                )?;
                *env_r = Some(exact.right);
                *env_l = Some(exact.left);
            }
        }
        EnvMode::Layered { m_e, power } => {
            let init_r = match env_r.as_ref().map(|e| &e.form) {
                Some(EnvForm::Layered(c)) => c.clone(),
                _ => StateUnitary::identity(t_op.n_env_qubits, *m_e, Representation::Right),
            };
            let init_l = match env_l.as_ref().map(|e| &e.form) {
                Some(EnvForm::Layered(c)) => c.clone(),
                _ => StateUnitary::identity(t_op.n_env_qubits, *m_e, Representation::Right),
            };
            let (cr, _) =
                transfer::power_method_environment(t_op, EnvSide::Right, &init_r, power)?;
            let (cl, _) =
                transfer::power_method_environment(t_op, EnvSide::Left, &init_l, power)?;
            *env_r = Some(EnvironmentState::layered(EnvSide::Right, cr));
            *env_l = Some(EnvironmentState::layered(EnvSide::Left, cl));
        }
    }
    Ok(())
}

/// `M(t) = 1 - prod_(i<t) |lambda_i|^2`, the accumulated-error monitor.
/// Entry `k` holds the value after `k + 1` steps; `M(0) = 0` is implicit.
pub fn accumulated_error(lambdas: &[C64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(lambdas.len());
    let mut prod = 1.0;
    for lam in lambdas {
        prod *= lam.norm_sqr().min(1.0);
        out.push(1.0 - prod);
    }
    out
}

// ---------------------------------------------------------------------------
// Simulation driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceConfig {
    pub chi_max: usize,
    pub dt: f64,
    pub order: u32,
    pub svd_cutoff: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self { chi_max: 64, dt: 1e-2, order: 4, svd_cutoff: 1e-12 }
    }
}

#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub ham: SpinHamiltonian,
    pub n_qubits: usize,
    pub m_u: usize,
    pub dt: f64,
    pub order: u32,
    pub t_max: f64,
    pub evolution: EvolutionOptions,
    pub reference: Option<ReferenceConfig>,
    /// Reachable-time threshold on the infidelity density vs the reference.
    pub fidelity_threshold: f64,
    /// A checkpoint is captured every this many steps (0 disables).
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvolutionRecord {
    pub step: usize,
    pub t: f64,
    pub parity: Parity,
    pub lambda_re: f64,
    pub lambda_im: f64,
    pub infidelity_step: f64,
    pub sz: f64,
    pub sx: f64,
    pub entropy: f64,
    pub m_accum: f64,
    pub ref_infidelity: Option<f64>,
    pub env_err_right: Option<f64>,
    pub env_err_left: Option<f64>,
    pub inner_iterations: usize,
}

/// Everything needed to resume analysis from a step: the state circuit and
/// its environments.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: usize,
    pub t: f64,
    pub theta: StateUnitary,
    pub env_right: EnvironmentState,
    pub env_left: EnvironmentState,
    /// Exact environment vectors of the step's transfer operator, kept for
    /// offline layered-fit studies.
    pub exact_env_right: CVec,
    pub exact_env_left: CVec,
}

#[derive(Debug)]
pub struct SimulationResult {
    pub records: Vec<EvolutionRecord>,
    pub checkpoints: Vec<Checkpoint>,
    /// First time where the infidelity density against the reference
    /// crossed the threshold; `None` when it never did (or no reference).
    pub reachable_time: Option<f64>,
    pub final_theta: StateUnitary,
}

/// Runs the quench: starts from identity circuits (the fully magnetized
/// product state), alternates even/odd steps flipping the representation,
/// and records observables, entropy, the error monitor and, when enabled,
/// the fidelity density against a concurrently evolved iTEBD reference.
pub fn run_simulation(config: &SimulationConfig) -> Result<SimulationResult> {
    let n_steps = (config.t_max / config.dt).round() as usize;
    let trotter = build_trotter_step(&config.ham, config.dt, config.order)?;
    let mut theta = StateUnitary::identity(config.n_qubits, config.m_u, Representation::Left);
    let mut envs: Option<StepEnvironments> = None;

    let mut reference = config.reference.as_ref().map(|r| ReferenceTrack {
        mps: UniformMps::product_state(C64::new(1.0, 0.0), C64::new(0.0, 0.0)),
        steps_done: 0,
        cfg: r.clone(),
        ham: config.ham,
    });

    let mut records = Vec::with_capacity(n_steps);
    let mut checkpoints = Vec::new();
    let mut lambdas = Vec::with_capacity(n_steps);
    let mut reachable_time = None;

    for step in 0..n_steps {
        let outcome = evolution_step(&theta, envs.as_ref(), &trotter, &config.evolution)?;
        theta = outcome.theta_next;
        envs = Some(outcome.envs);
        let t = (step + 1) as f64 * config.dt;
        lambdas.push(outcome.record.lambda);
        let m_accum = accumulated_error(&lambdas).last().copied().unwrap_or(0.0);

        let mps = circuit_to_umps_any(&theta.clone().into())?;
        let sz = local_expectation_mps(&mps, &pauli(Pauli::Z))?.re;
        let sx = local_expectation_mps(&mps, &pauli(Pauli::X))?.re;
        let entropy = entropy_of_spectrum(&mps.schmidt[0]);

        let ref_infidelity = match reference.as_mut() {
            Some(track) => track.infidelity_at(t, &mps)?,
            None => None,
        };
        if reachable_time.is_none() {
            if let Some(inf) = ref_infidelity {
                if inf > config.fidelity_threshold {
                    reachable_time = Some(t);
                }
            }
        }

        records.push(EvolutionRecord {
            step,
            t,
            parity: if step % 2 == 0 { Parity::Even } else { Parity::Odd },
            lambda_re: outcome.record.lambda.re,
            lambda_im: outcome.record.lambda.im,
            infidelity_step: outcome.record.infidelity_step,
            sz,
            sx,
            entropy,
            m_accum,
            ref_infidelity,
            env_err_right: outcome.record.env_fit_errors.map(|e| e.0),
            env_err_left: outcome.record.env_fit_errors.map(|e| e.1),
            inner_iterations: outcome.record.inner_iterations,
        });

        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
            let e = envs.as_ref().unwrap();
            let exact = step_exact_envs(&theta, &trotter, &config.evolution)?;
            checkpoints.push(Checkpoint {
                step,
                t,
                theta: theta.clone(),
                env_right: e.right.clone(),
                env_left: e.left.clone(),
                exact_env_right: exact.0,
                exact_env_left: exact.1,
            });
        }
    }

    Ok(SimulationResult { records, checkpoints, reachable_time, final_theta: theta })
}

/// Exact environments of the identity-step transfer at the current state,
/// i.e. of the operator whose fixed points the layered environments are
/// meant to approximate at this time.
fn step_exact_envs(
    theta: &StateUnitary,
    trotter: &TrotterStep,
    opts: &EvolutionOptions,
) -> Result<(CVec, CVec)> {
    let (theta_l, gates) = match theta.representation {
        Representation::Left => (theta.clone(), trotter.gates().clone()),
        Representation::Right => (theta.mirror(), trotter.gates().mirror()),
    };
    let theta_r = StateUnitary {
        n_qubits: theta_l.n_qubits,
        representation: Representation::Right,
        layers: theta_l.layers.clone(),
    };
    let t_op = build_trotter_transfer(&theta_l.into(), &theta_r.into(), &gates, false)?;
    let exact = exact_environments(&t_op, None, None, opts.arnoldi_tol)?;
    Ok((exact.right.vector(), exact.left.vector()))
}

struct ReferenceTrack {
    mps: UniformMps,
    steps_done: usize,
    cfg: ReferenceConfig,
    ham: SpinHamiltonian,
}

impl ReferenceTrack {
    /// Advances the reference to `t` when `t` sits on its grid and returns
    /// the infidelity density; `None` between grid points.
    fn infidelity_at(&mut self, t: f64, state: &UniformMps) -> Result<Option<f64>> {
        let target = t / self.cfg.dt;
        if (target - target.round()).abs() > 1e-9 {
            return Ok(None);
        }
        let target = target.round() as usize;
        if target > self.steps_done {
            self.mps = itebd_evolve(
                &self.mps,
                &self.ham,
                self.cfg.dt,
                target - self.steps_done,
                ItebdOptions {
                    chi_max: self.cfg.chi_max,
                    svd_cutoff: self.cfg.svd_cutoff,
                    order: self.cfg.order,
                },
            )?;
            self.steps_done = target;
        }
        let f = fidelity_density(state, &self.mps)?;
        Ok(Some((1.0 - f.per_site).max(0.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::pauli_pair;
    use crate::tensor::{frob_norm, identity, random_gaussian_matrix, random_unitary, vec_norm};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trotter_gates_are_unitary_and_identity_at_zero_dt() {
        let ham = SpinHamiltonian { j: 1.0, g: 0.7, h: 0.1 };
        for order in [1u32, 2] {
            let step = build_trotter_step(&ham, 0.0, order).unwrap();
            let g = match step.gates() {
                TrotterStepGates::Order1 { u } => u.clone(),
                TrotterStepGates::Order2 { u_half } => u_half.clone(),
            };
            assert!(frob_norm(&(&g - &identity(4))) < 1e-12);
            let step = build_trotter_step(&ham, 0.05, order).unwrap();
            let g = match step.gates() {
                TrotterStepGates::Order1 { u } => u.clone(),
                TrotterStepGates::Order2 { u_half } => u_half.clone(),
            };
            assert!(crate::tensor::unitarity_residual(&g) < 1e-12);
        }
    }

    #[test]
    fn pure_field_sequential_product_is_exact() {
        // J = 0: the bond terms commute, so the sweep is an exact
        // single-site rotation for any dt.
        let ham = SpinHamiltonian { j: 0.0, g: 0.9, h: 0.0 };
        let dt = 0.3;
        let step = build_trotter_step(&ham, dt, 1).unwrap();
        let u = match step.gates() {
            TrotterStepGates::Order1 { u } => u.clone(),
            _ => unreachable!(),
        };
        // On an open 4-site chain the sweep leaves the last site untouched.
        let n = 4;
        let mut psi = CVec::zeros(1 << n);
        psi[0] = C64::new(1.0, 0.0);
        let mut out = psi.clone();
        for j in (0..n - 1).rev() {
            out = crate::gates::apply_gate(&out, n, &[j, j + 1], &u);
        }
        let rot = expm_hermitian(&pauli(Pauli::Z), C64::new(0.0, -dt * 0.9)).unwrap();
        let mut want = psi;
        for j in 0..n - 1 {
            want = crate::gates::apply_gate(&want, n, &[j], &rot);
        }
        assert!(vec_norm(&(&out - &want)) < 1e-12);
    }

    #[test]
    fn order2_sweep_matches_dense_propagator_on_open_chain() {
        // 10-site open chain, one second-order step against the dense
        // matrix exponential of the same bond-term sum.
        let ham = SpinHamiltonian { j: 1.0, g: 1.0, h: 0.0 };
        let dt = 0.05;
        let n = 10;
        let step = build_trotter_step(&ham, dt, 2).unwrap();
        let u_half = match step.gates() {
            TrotterStepGates::Order2 { u_half } => u_half.clone(),
            _ => unreachable!(),
        };
        let mut psi = CVec::zeros(1 << n);
        psi[0] = C64::new(1.0, 0.0);
        // Forward sweep (descending bond index) then reversed sweep.
        let mut out = psi.clone();
        for j in (0..n - 1).rev() {
            out = crate::gates::apply_gate(&out, n, &[j, j + 1], &u_half);
        }
        for j in 0..n - 1 {
            out = crate::gates::apply_gate(&out, n, &[j, j + 1], &u_half);
        }
        // Krylov propagation oracle for exp(-i dt H) |psi>.
        let hbond = ham.bond_left_site();
        let apply_h = |v: &CVec| -> CVec {
            let mut acc = CVec::zeros(v.len());
            for j in 0..n - 1 {
                acc = &acc + &crate::gates::apply_gate(v, n, &[j, j + 1], &hbond);
            }
            acc
        };
        let want = krylov_propagate(&apply_h, &psi, dt, 30);
        // The splitting error is extensive in the chain length; the local
        // accuracy is what matters, so compare reduced states in the bulk.
        let err = bulk_error(&out, &want, n);
        assert!(err < 1.5e-4, "bulk reduced-state error {err:.2e}");
        // Third-order per-step scaling: halving dt cuts the one-step error
        // by ~8.
        let half = {
            let step = build_trotter_step(&ham, dt / 2.0, 2).unwrap();
            let u_half = match step.gates() {
                TrotterStepGates::Order2 { u_half } => u_half.clone(),
                _ => unreachable!(),
            };
            let mut out = psi.clone();
            for j in (0..n - 1).rev() {
                out = crate::gates::apply_gate(&out, n, &[j, j + 1], &u_half);
            }
            for j in 0..n - 1 {
                out = crate::gates::apply_gate(&out, n, &[j, j + 1], &u_half);
            }
            out
        };
        let want_half = krylov_propagate(&apply_h, &psi, dt / 2.0, 30);
        let err_half = bulk_error(&half, &want_half, n);
        let ratio = err / err_half.max(1e-300);
        assert!(ratio > 6.0, "per-step error ratio {ratio:.2} not third order");
    }

    fn bulk_error(a: &CVec, b: &CVec, n: usize) -> f64 {
        frob_norm(&(&two_site_rdm(a, n, 4) - &two_site_rdm(b, n, 4)))
    }

    /// Reduced density matrix of sites (k, k+1).
    fn two_site_rdm(psi: &CVec, n: usize, k: usize) -> CMat {
        let mut rho = CMat::zeros((4, 4));
        let dim = psi.len();
        for idx in 0..dim {
            let a = ((idx >> (n - 1 - k)) & 1) * 2 + ((idx >> (n - 2 - k)) & 1);
            for jdx in 0..dim {
                // Match all bits outside (k, k+1).
                let mask = !((1usize << (n - 1 - k)) | (1usize << (n - 2 - k)));
                if idx & mask != jdx & mask {
                    continue;
                }
                let b = ((jdx >> (n - 1 - k)) & 1) * 2 + ((jdx >> (n - 2 - k)) & 1);
                rho[(a, b)] += psi[idx] * psi[jdx].conj();
            }
        }
        rho
    }

    /// Lanczos propagation of exp(-i dt H)|psi| for Hermitian H.
    fn krylov_propagate<F: Fn(&CVec) -> CVec>(apply: &F, psi: &CVec, dt: f64, m: usize) -> CVec {
        let dim = psi.len();
        let mut basis: Vec<CVec> = vec![psi.clone()];
        let mut alphas = Vec::new();
        let mut betas = Vec::new();
        for j in 0..m {
            let mut w = apply(&basis[j]);
            let a = crate::tensor::inner(&basis[j], &w);
            alphas.push(a.re);
            w = &w - &basis[j].mapv(|z| z * a);
            if j > 0 {
                let b = betas[j - 1];
                w = &w - &basis[j - 1].mapv(|z: C64| z * b);
            }
            for b in &basis {
                let c = crate::tensor::inner(b, &w);
                w = &w - &b.mapv(|z| z * c);
            }
            let nb = vec_norm(&w);
            if nb < 1e-13 || j == m - 1 {
                break;
            }
            betas.push(nb);
            basis.push(w.mapv(|z| z / nb));
        }
        let k = basis.len();
        let mut h = CMat::zeros((k, k));
        for i in 0..k {
            h[(i, i)] = C64::new(alphas[i], 0.0);
            if i + 1 < k {
                h[(i, i + 1)] = C64::new(betas[i], 0.0);
                h[(i + 1, i)] = C64::new(betas[i], 0.0);
            }
        }
        let e = expm_hermitian(&h, C64::new(0.0, -dt)).unwrap();
        let mut out = CVec::zeros(dim);
        for (i, b) in basis.iter().enumerate() {
            out = &out + &b.mapv(|z| z * e[(i, 0)]);
        }
        out
    }

    #[test]
    fn tangent_projection_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..20 {
            let u = random_unitary(4, &mut rng);
            let d = random_gaussian_matrix(4, &mut rng);
            let p = tangent_project(&d, &u);
            // u^dag p is anti-Hermitian.
            let up = dagger(&u).dot(&p);
            assert!(frob_norm(&(&up + &dagger(&up))) < 1e-10);
            // Equivalent closed form for unitary u: (d - u d^dag u) / 2.
            let alt = (&d - &u.dot(&dagger(&d)).dot(&u)).mapv(|z| z * 0.5);
            assert!(frob_norm(&(&p - &alt)) < 1e-12);
        }
    }

    #[test]
    fn tangent_projection_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let u = random_unitary(4, &mut rng);
        // Anti-Hermitian directions pass through unchanged.
        let g = random_gaussian_matrix(4, &mut rng);
        let a = (&g - &dagger(&g)).mapv(|z| z * 0.5);
        let d = u.dot(&a);
        assert!(frob_norm(&(&tangent_project(&d, &u) - &d)) < 1e-12);
        // Hermitian (normal) directions are annihilated.
        let hmat = (&g + &dagger(&g)).mapv(|z| z * 0.5);
        let d = u.dot(&hmat);
        assert!(frob_norm(&tangent_project(&d, &u)) < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut adam = AdamState::new(&[(4, 4)], 3e-3);
        let p = vec![identity(4)];
        let g = vec![CMat::zeros((4, 4))];
        let out = adam.update(&p, &g);
        assert!(frob_norm(&(&out[0] - &p[0])) < 1e-15);
    }

    #[test]
    fn adam_first_step_is_sign_scaled() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let g = random_gaussian_matrix(4, &mut rng);
        let mut adam = AdamState::new(&[(4, 4)], 1e-2);
        let p = vec![CMat::zeros((4, 4))];
        let out = adam.update(&p, &[g.clone()]);
        // After bias correction the first step is lr * g / (|g| + eps')
        // componentwise, i.e. lr-sized with the gradient's sign.
        for ((i, j), val) in out[0].indexed_iter() {
            let want_re = 1e-2 * g[(i, j)].re.signum();
            let want_im = 1e-2 * g[(i, j)].im.signum();
            assert_abs_diff_eq!(val.re, want_re, epsilon = 1e-5);
            assert_abs_diff_eq!(val.im, want_im, epsilon = 1e-5);
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        let g = random_gaussian_matrix(4, &mut rng);
        let p = vec![random_unitary(4, &mut rng)];
        let run = || {
            let mut adam = AdamState::new(&[(4, 4)], 3e-3);
            let mut params = p.clone();
            for _ in 0..5 {
                params = adam.update(&params, &[g.clone()]);
            }
            params
        };
        let a = run();
        let b = run();
        assert!(frob_norm(&(&a[0] - &b[0])) < 1e-16);
    }

    #[test]
    fn accumulated_error_cases() {
        let one = C64::new(1.0, 0.0);
        assert!(accumulated_error(&[one, one, one]).iter().all(|&m| m.abs() < 1e-15));
        let lam = C64::new((1.0f64 - 1e-4).sqrt(), 0.0);
        let m = accumulated_error(&[lam]);
        assert_abs_diff_eq!(m[0], 1e-4, epsilon = 1e-12);
        // Small per-step losses accumulate additively to second order.
        let a: [f64; 3] = [3e-6, 5e-6, 2e-6];
        let lams: Vec<C64> = a.iter().map(|&x| C64::new((1.0 - x).sqrt(), 0.0)).collect();
        let m = accumulated_error(&lams);
        let want: f64 = a.iter().sum();
        assert_abs_diff_eq!(*m.last().unwrap(), want, epsilon = want * want);
        // Monotone non-decreasing.
        let mut rng = ChaCha8Rng::seed_from_u64(75);
        let lams: Vec<C64> = (0..20)
            .map(|_| {
                C64::from_polar(
                    1.0 - rand::Rng::gen_range(&mut rng, 0.0..1e-3),
                    rand::Rng::gen_range(&mut rng, -1.0..1.0),
                )
            })
            .collect();
        let m = accumulated_error(&lams);
        for w in m.windows(2) {
            assert!(w[1] >= w[0] - 1e-15);
        }
    }

    #[test]
    fn mirrored_trotter_gates_swap_onsite_terms() {
        let ham = SpinHamiltonian { j: 1.0, g: 0.5, h: 0.2 };
        let step = build_trotter_step(&ham, 0.1, 1).unwrap();
        let mirrored = step.gates().mirror();
        let h_right = pauli_pair(Pauli::X, Pauli::X).mapv(|z| z * ham.j)
            + crate::tensor::kron(&identity(2), &pauli(Pauli::Z)).mapv(|z| z * ham.g)
            + crate::tensor::kron(&identity(2), &pauli(Pauli::X)).mapv(|z| z * ham.h);
        let want = expm_hermitian(&h_right, C64::new(0.0, -0.1)).unwrap();
        let got = match mirrored {
            TrotterStepGates::Order1 { u } => u,
            _ => unreachable!(),
        };
        assert!(frob_norm(&(&got - &want)) < 1e-12);
    }
}
