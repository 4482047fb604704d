//! Mixed transfer operators between left- and right-represented states,
//! their exact (Arnoldi) and layered-circuit environments, the modified
//! power method, polar-sweep environment fitting, and mixed-representation
//! observables.
//!
//! The plain transfer operator acts on `2 N_q - 2` environment qubits laid
//! out as `[a-bond (N_q - 1), b-bond (N_q - 1)]` (ket-side bonds first). The
//! Trotter-augmented operator inserts the crossing legs of the evolution
//! sweeps in the middle: `[a, crossing legs, b]`, one leg per sweep.

use num_complex::Complex64 as C64;
use thiserror::Error;

use crate::circuit::{Representation, SiteUnitary, StateUnitary};
use crate::gates::{apply_gate, swap_gate};
use crate::tensor::{
    self, dagger, inner, leading_eigenpair, normalized, polar_optimal_unitary,
    reunitarize, vec_norm, ArnoldiOptions, CMat, CVec,
};

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("state unitaries disagree in size: {0} vs {1} qubits")]
    SizeMismatch(usize, usize),
    #[error("expected a {expected:?}-representation unitary")]
    WrongRepresentation { expected: Representation },
    #[error("overlap density |lambda| = {0:.3e} too small; mixed-representation observables are invalid")]
    StatesTooDifferent(f64),
    #[error("environment overlap <l|r> = {0:.3e} is ill-conditioned")]
    IllConditioned(f64),
    #[error("environment vector has wrong dimension: expected {expected}, got {got}")]
    EnvDimension { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, TransferError>;

/// Identifies one optimizable gate of the bra-side state unitary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GateRef {
    pub layer: usize,
    pub index: usize,
}

#[derive(Debug, Clone)]
enum StripOp {
    /// Tensor a fresh |0> in at the given wire position (dimension grows).
    Inject { at: usize },
    /// Contract <0| at the given wire position (dimension shrinks).
    Project { at: usize },
    Gate {
        wires: Vec<usize>,
        m: CMat,
        /// Present when the op realizes (the dagger of) an optimizable gate.
        tag: Option<GateTag>,
    },
}

#[derive(Debug, Clone, Copy)]
struct GateTag {
    gate: GateRef,
    /// True when the op matrix is the conjugate transpose of the gate.
    daggered: bool,
}

fn inject(v: &CVec, n_wires: usize, at: usize) -> CVec {
    let dim = v.len();
    let mut out = CVec::zeros(dim * 2);
    let pos = n_wires - at; // bit position of the new wire in the output
    let low_mask = (1usize << pos) - 1;
    for i in 0..dim {
        let idx = ((i >> pos) << (pos + 1)) | (i & low_mask);
        out[idx] = v[i];
    }
    out
}

fn project(v: &CVec, n_wires: usize, at: usize) -> CVec {
    let out_dim = v.len() / 2;
    let mut out = CVec::zeros(out_dim);
    let pos = n_wires - 1 - at;
    let low_mask = (1usize << pos) - 1;
    for i in 0..out_dim {
        let idx = ((i >> pos) << (pos + 1)) | (i & low_mask);
        out[i] = v[idx];
    }
    out
}

fn wires_of(op: &StripOp) -> usize {
    match op {
        StripOp::Inject { .. } => 1,
        StripOp::Project { .. } => 1,
        StripOp::Gate { wires, .. } => wires.len(),
    }
}
const _: fn(&StripOp) -> usize = wires_of;

fn apply_ops(ops: &[StripOp], v: &CVec, mut n_wires: usize) -> CVec {
    let mut state = v.clone();
    for op in ops {
        match op {
            StripOp::Inject { at } => {
                state = inject(&state, n_wires, *at);
                n_wires += 1;
            }
            StripOp::Project { at } => {
                state = project(&state, n_wires, *at);
                n_wires -= 1;
            }
            StripOp::Gate { wires, m, .. } => {
                state = apply_gate(&state, n_wires, wires, m);
            }
        }
    }
    state
}

fn apply_ops_adjoint(ops: &[StripOp], v: &CVec, n_wires_out: usize) -> CVec {
    let mut state = v.clone();
    let mut n_wires = n_wires_out;
    for op in ops.iter().rev() {
        match op {
            StripOp::Inject { at } => {
                // Adjoint of injection is projection.
                state = project(&state, n_wires, *at);
                n_wires -= 1;
            }
            StripOp::Project { at } => {
                state = inject(&state, n_wires, *at);
                n_wires += 1;
            }
            StripOp::Gate { wires, m, .. } => {
                state = apply_gate(&state, n_wires, wires, &dagger(m));
            }
        }
    }
    state
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferKind {
    PlainMixed,
    TrotterMixed { order: u32 },
}

/// Gates of one sequential Trotter sweep as consumed by the transfer
/// construction: the full-step gate for first order, the half-step gate
/// (used by both the forward and the reversed sweep) for second order.
#[derive(Debug, Clone)]
pub enum TrotterStepGates {
    Order1 { u: CMat },
    Order2 { u_half: CMat },
}

impl TrotterStepGates {
    pub fn order(&self) -> u32 {
        match self {
            TrotterStepGates::Order1 { .. } => 1,
            TrotterStepGates::Order2 { .. } => 2,
        }
    }

    /// Spatial reflection: each bond gate is swap-conjugated.
    pub fn mirror(&self) -> Self {
        let s = swap_gate();
        match self {
            TrotterStepGates::Order1 { u } => TrotterStepGates::Order1 { u: s.dot(u).dot(&s) },
            TrotterStepGates::Order2 { u_half } => {
                TrotterStepGates::Order2 { u_half: s.dot(u_half).dot(&s) }
            }
        }
    }
}

/// Linear map on the environment space of the repeating block of the
/// (possibly Trotter-augmented) mixed inner product. Immutable snapshot of
/// its constituent gates; applied matrix-free by threading through the
/// wires, with one ancilla prepared and one projected.
#[derive(Debug, Clone)]
pub struct TransferOperator {
    pub n_site_qubits: usize,
    pub n_env_qubits: usize,
    pub kind: TransferKind,
    ops: Vec<StripOp>,
}

impl TransferOperator {
    pub fn env_dim(&self) -> usize {
        1 << self.n_env_qubits
    }

    pub fn apply(&self, v: &CVec) -> CVec {
        assert_eq!(v.len(), self.env_dim());
        apply_ops(&self.ops, v, self.n_env_qubits)
    }

    pub fn apply_adjoint(&self, v: &CVec) -> CVec {
        assert_eq!(v.len(), self.env_dim());
        apply_ops_adjoint(&self.ops, v, self.n_env_qubits)
    }

    /// Materializes the operator column by column; oracle/test use only.
    pub fn to_dense(&self) -> CMat {
        let d = self.env_dim();
        let mut m = CMat::zeros((d, d));
        for j in 0..d {
            let mut e = CVec::zeros(d);
            e[j] = C64::new(1.0, 0.0);
            let col = self.apply(&e);
            for i in 0..d {
                m[(i, j)] = col[i];
            }
        }
        m
    }

    /// `<l| T |r>` together with, for every tagged gate `U_k`, the matrix
    /// `C_k` such that the value depends on the gate as
    /// `sum conj(U_k[a,b]) C_k[a,b]` (i.e. `C_k` is the Wirtinger derivative
    /// of the unnormalized value with respect to the conjugated gate).
    pub fn value_and_gate_envs(&self, l: &CVec, r: &CVec) -> (C64, Vec<(GateRef, CMat)>) {
        sandwich_value_and_envs(&self.ops, r, l, self.n_env_qubits)
            .map_envs_to_conj_gradients()
    }
}

struct SandwichResult {
    value: C64,
    envs: Vec<(GateTag, CMat)>,
}

impl SandwichResult {
    /// Converts raw op environments into derivatives with respect to the
    /// conjugated gate entries. For an op holding `U^dag`:
    /// `value = sum_(o,i) U^dag[o,i] E[o,i] = sum conj(U[i,o]) E[o,i]`,
    /// so `C = E^T`. Ops holding the plain gate are not expected here.
    fn map_envs_to_conj_gradients(self) -> (C64, Vec<(GateRef, CMat)>) {
        let envs = self
            .envs
            .into_iter()
            .map(|(tag, e)| {
                assert!(tag.daggered, "bra-side gradients expect daggered occurrences");
                (tag.gate, e.t().to_owned())
            })
            .collect();
        (self.value, envs)
    }
}

/// Computes `<bra| op_K ... op_1 |ket>` and the per-tagged-op environment
/// tensors `E` with `value = sum_(o,i) m_op[o,i] E[o,i]`.
fn sandwich_value_and_envs(
    ops: &[StripOp],
    ket: &CVec,
    bra: &CVec,
    n_wires_in: usize,
) -> SandwichResult {
    // Forward prefix states.
    let mut fwd: Vec<CVec> = Vec::with_capacity(ops.len() + 1);
    let mut wires_at: Vec<usize> = Vec::with_capacity(ops.len() + 1);
    fwd.push(ket.clone());
    wires_at.push(n_wires_in);
    {
        let mut n_wires = n_wires_in;
        let mut state = ket.clone();
        for op in ops {
            match op {
                StripOp::Inject { at } => {
                    state = inject(&state, n_wires, *at);
                    n_wires += 1;
                }
                StripOp::Project { at } => {
                    state = project(&state, n_wires, *at);
                    n_wires -= 1;
                }
                StripOp::Gate { wires, m, .. } => {
                    state = apply_gate(&state, n_wires, wires, m);
                }
            }
            fwd.push(state.clone());
            wires_at.push(n_wires);
        }
    }
    let value = inner(bra, fwd.last().unwrap());

    // Backward suffix bras and environments.
    let mut envs = Vec::new();
    let mut back = bra.clone();
    let mut n_wires = *wires_at.last().unwrap();
    for (k, op) in ops.iter().enumerate().rev() {
        if let StripOp::Gate { wires, m, tag } = op {
            if let Some(tag) = tag {
                let e = partial_env(&back, &fwd[k], n_wires, wires);
                envs.push((*tag, e));
            }
            back = apply_gate(&back, n_wires, wires, &dagger(m));
        } else {
            match op {
                StripOp::Inject { at } => {
                    back = project(&back, n_wires, *at);
                    n_wires -= 1;
                }
                StripOp::Project { at } => {
                    back = inject(&back, n_wires, *at);
                    n_wires += 1;
                }
                StripOp::Gate { .. } => unreachable!(),
            }
        }
    }
    envs.reverse();
    SandwichResult { value, envs }
}

/// `E[o,i] = sum_rest conj(phi)[o@wires, rest] psi[i@wires, rest]`.
fn partial_env(phi: &CVec, psi: &CVec, n_wires: usize, wires: &[usize]) -> CMat {
    let k = wires.len();
    let sub = 1usize << k;
    let pos: Vec<usize> = wires.iter().map(|&w| n_wires - 1 - w).collect();
    let mut sorted_pos = pos.clone();
    sorted_pos.sort_unstable_by(|a, b| b.cmp(a));
    let rest = phi.len() >> k;
    let mut e = CMat::zeros((sub, sub));
    for r in 0..rest {
        let mut base = r;
        for &p in sorted_pos.iter().rev() {
            let low = base & ((1usize << p) - 1);
            base = ((base >> p) << (p + 1)) | low;
        }
        let idx_of = |g: usize| {
            let mut idx = base;
            for (j, &p) in pos.iter().enumerate() {
                if (g >> (k - 1 - j)) & 1 == 1 {
                    idx |= 1 << p;
                }
            }
            idx
        };
        let phis: Vec<C64> = (0..sub).map(|g| phi[idx_of(g)].conj()).collect();
        let psis: Vec<C64> = (0..sub).map(|g| psi[idx_of(g)]).collect();
        for o in 0..sub {
            for i in 0..sub {
                e[(o, i)] += phis[o] * psis[i];
            }
        }
    }
    e
}

fn check_pair(ul: &SiteUnitary, ur: &SiteUnitary) -> Result<usize> {
    if ul.representation() != Representation::Left {
        return Err(TransferError::WrongRepresentation { expected: Representation::Left });
    }
    if ur.representation() != Representation::Right {
        return Err(TransferError::WrongRepresentation { expected: Representation::Right });
    }
    if ul.n_qubits() != ur.n_qubits() {
        return Err(TransferError::SizeMismatch(ul.n_qubits(), ur.n_qubits()));
    }
    Ok(ul.n_qubits())
}

/// Gate ops of a site unitary on the given wires, in temporal order, with
/// gradient tags for layered circuits.
fn site_ops(u: &SiteUnitary, wires: &[usize], tag_gates: bool, daggered: bool) -> Vec<StripOp> {
    match u {
        SiteUnitary::Layered(su) => {
            let mut ops: Vec<StripOp> = Vec::new();
            let n = su.n_qubits;
            for (layer_idx, layer) in su.layers.iter().enumerate() {
                let order: Vec<usize> = match su.representation {
                    Representation::Right => (0..n - 1).rev().collect(),
                    Representation::Left => (0..n - 1).collect(),
                };
                for k in order {
                    let tag = tag_gates.then_some(GateTag {
                        gate: GateRef { layer: layer_idx, index: k },
                        daggered,
                    });
                    ops.push(StripOp::Gate {
                        wires: vec![wires[k], wires[k + 1]],
                        m: layer[k].matrix.clone(),
                        tag,
                    });
                }
            }
            if daggered {
                ops.reverse();
                for op in ops.iter_mut() {
                    if let StripOp::Gate { m, .. } = op {
                        *m = dagger(m);
                    }
                }
            }
            ops
        }
        SiteUnitary::Dense(d) => {
            let m = if daggered { dagger(&d.matrix) } else { d.matrix.clone() };
            vec![StripOp::Gate { wires: wires.to_vec(), m, tag: None }]
        }
    }
}

/// Plain mixed transfer operator `T = <0_last| U_R^dag U_L |0_first>` on
/// `2 N_q - 2` qubits.
pub fn build_transfer(ul: &SiteUnitary, ur: &SiteUnitary) -> Result<TransferOperator> {
    build_transfer_with_insertion(ul, ur, None, false)
}

/// Plain transfer with a single-site operator inserted on the physical wire
/// between the ket and bra layers (the numerator of a local expectation).
pub fn build_transfer_with_observable(
    ul: &SiteUnitary,
    ur: &SiteUnitary,
    op: &CMat,
) -> Result<TransferOperator> {
    build_transfer_with_insertion(ul, ur, Some(op), false)
}

fn build_transfer_with_insertion(
    ul: &SiteUnitary,
    ur: &SiteUnitary,
    op: Option<&CMat>,
    tag_bra_gates: bool,
) -> Result<TransferOperator> {
    let n = check_pair(ul, ur)?;
    // Wires 0..=2n-2 during the block; fresh |0> on wire 0, the shared
    // physical wire is n-1, the projected output is wire 2n-2.
    let l_wires: Vec<usize> = (0..n).collect();
    let r_wires: Vec<usize> = (n - 1..2 * n - 1).collect();
    let mut ops = vec![StripOp::Inject { at: 0 }];
    ops.extend(site_ops(ul, &l_wires, false, false));
    if let Some(o) = op {
        ops.push(StripOp::Gate { wires: vec![n - 1], m: o.clone(), tag: None });
    }
    ops.extend(site_ops(ur, &r_wires, tag_bra_gates, true));
    ops.push(StripOp::Project { at: 2 * n - 2 });
    Ok(TransferOperator {
        n_site_qubits: n,
        n_env_qubits: 2 * n - 2,
        kind: TransferKind::PlainMixed,
        ops,
    })
}

/// Trotter-augmented mixed transfer operator between the state at time `t`
/// (ket, left representation) and the trial state at `t + dt` (bra, right
/// representation). The environment gains one crossing leg per sweep:
/// layout `[a (n-1), legs (order), b (n-1)]`.
///
/// Bra-side gates carry gradient tags for the evolution optimizer.
pub fn build_trotter_transfer(
    ul: &SiteUnitary,
    ur: &SiteUnitary,
    trotter: &TrotterStepGates,
    tag_bra_gates: bool,
) -> Result<TransferOperator> {
    let n = check_pair(ul, ur)?;
    let order = trotter.order();
    let n_env = 2 * n - 2 + order as usize;
    let l_wires: Vec<usize> = (0..n).collect();
    let mut ops = vec![StripOp::Inject { at: 0 }];
    ops.extend(site_ops(ul, &l_wires, false, false));
    match trotter {
        TrotterStepGates::Order1 { u } => {
            // Sweep gate couples the fresh physical wire to the crossing
            // leg; its right output becomes the bra-side physical input.
            ops.push(StripOp::Gate { wires: vec![n - 1, n], m: u.clone(), tag: None });
            let r_wires: Vec<usize> = (n..2 * n).collect();
            ops.extend(site_ops(ur, &r_wires, tag_bra_gates, true));
            ops.push(StripOp::Project { at: 2 * n - 1 });
        }
        TrotterStepGates::Order2 { u_half } => {
            // Forward sweep at dt/2.
            ops.push(StripOp::Gate { wires: vec![n - 1, n], m: u_half.clone(), tag: None });
            // Reversed sweep at dt/2 marches against the block order; its
            // crossing leg points backward. Relabeling that leg's in/out
            // pair turns the strip into an ordinary matrix on the enlarged
            // environment: g[(d,p),(q,v)] = u_half[(p,v),(d,q)].
            let mut g = CMat::zeros((4, 4));
            for d in 0..2 {
                for p in 0..2 {
                    for q in 0..2 {
                        for v in 0..2 {
                            g[(d * 2 + p, q * 2 + v)] = u_half[(p * 2 + v, d * 2 + q)];
                        }
                    }
                }
            }
            ops.push(StripOp::Gate { wires: vec![n, n + 1], m: g, tag: None });
            let r_wires: Vec<usize> = (n + 1..2 * n + 1).collect();
            ops.extend(site_ops(ur, &r_wires, tag_bra_gates, true));
            ops.push(StripOp::Project { at: 2 * n });
        }
    }
    Ok(TransferOperator {
        n_site_qubits: n,
        n_env_qubits: n_env,
        kind: TransferKind::TrotterMixed { order },
        ops,
    })
}

// ---------------------------------------------------------------------------
// Environments
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvSide {
    Left,
    Right,
}

/// A fixed-point environment: either the exact dominant eigenvector or a
/// layered sequential circuit whose action on |0...0> approximates it.
#[derive(Debug, Clone)]
pub enum EnvForm {
    Exact(CVec),
    Layered(StateUnitary),
}

#[derive(Debug, Clone)]
pub struct EnvironmentState {
    pub side: EnvSide,
    pub form: EnvForm,
}

impl EnvironmentState {
    pub fn exact(side: EnvSide, v: CVec) -> Self {
        Self { side, form: EnvForm::Exact(normalized(&v)) }
    }

    pub fn layered(side: EnvSide, circuit: StateUnitary) -> Self {
        Self { side, form: EnvForm::Layered(circuit) }
    }

    pub fn identity_layered(side: EnvSide, n_env_qubits: usize, m_e: usize) -> Self {
        Self::layered(
            side,
            StateUnitary::identity(n_env_qubits.max(2), m_e, Representation::Right),
        )
    }

    pub fn n_qubits(&self) -> usize {
        match &self.form {
            EnvForm::Exact(v) => v.len().trailing_zeros() as usize,
            EnvForm::Layered(c) => c.n_qubits,
        }
    }

    /// The environment as a vector; for the layered form, the circuit
    /// applied to |0...0>.
    pub fn vector(&self) -> CVec {
        match &self.form {
            EnvForm::Exact(v) => v.clone(),
            EnvForm::Layered(c) => circuit_state(c),
        }
    }
}

/// The state a layered circuit prepares from |0...0>.
pub fn circuit_state(c: &StateUnitary) -> CVec {
    let mut v = CVec::zeros(1 << c.n_qubits);
    v[0] = C64::new(1.0, 0.0);
    c.apply_to_state(&v).expect("dimension fixed by construction")
}

#[derive(Debug, Clone)]
pub struct ExactEnvironments {
    pub lambda: C64,
    pub right: EnvironmentState,
    pub left: EnvironmentState,
    pub degenerate: bool,
    pub residual_right: f64,
    pub residual_left: f64,
}

/// Leading eigenpairs of `T` and `T^dag`, phase-fixed and normalized.
/// Seeds default to deterministic pseudo-random vectors when not supplied.
pub fn exact_environments(
    t: &TransferOperator,
    seed_right: Option<&CVec>,
    seed_left: Option<&CVec>,
    tol: f64,
) -> Result<ExactEnvironments> {
    let dim = t.env_dim();
    let default_seed = || -> CVec {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
        tensor::random_vector(dim, &mut rng)
    };
    let sr = seed_right.cloned().unwrap_or_else(default_seed);
    let sl = seed_left.cloned().unwrap_or_else(default_seed);
    let opts = ArnoldiOptions::default();
    let right = leading_eigenpair(|v| t.apply(v), dim, &sr, tol, opts)?;
    let left = leading_eigenpair(|v| t.apply_adjoint(v), dim, &sl, tol, opts)?;
    if right.degenerate {
        log::warn!(
            "transfer operator has a degenerate leading eigenvalue (|lambda| = {:.6}); \
             the state is not injective",
            right.value.norm()
        );
    }
    Ok(ExactEnvironments {
        lambda: right.value,
        right: EnvironmentState::exact(EnvSide::Right, right.vector),
        left: EnvironmentState::exact(EnvSide::Left, left.vector),
        degenerate: right.degenerate || left.degenerate,
        residual_right: right.residual,
        residual_left: left.residual,
    })
}

/// `P(0) = ||T v||^2`: the probability of reading 0 on the projected wire
/// when the transfer block runs as a circuit on the input `v`.
pub fn post_selection_probability(t: &TransferOperator, v: &CVec) -> Result<f64> {
    if v.len() != t.env_dim() {
        return Err(TransferError::EnvDimension { expected: t.env_dim(), got: v.len() });
    }
    let w = t.apply(&normalized(v));
    Ok(vec_norm(&w).powi(2))
}

/// Mixed-representation expectation value of a single-site operator:
/// `<l, 0| U_R^dag O U_L |0, r> / (lambda <l|r>)`.
pub fn expectation_local(
    ul: &SiteUnitary,
    ur: &SiteUnitary,
    op: &CMat,
    l: &CVec,
    r: &CVec,
    lambda: C64,
) -> Result<C64> {
    if lambda.norm() <= 1e-6 {
        return Err(TransferError::StatesTooDifferent(lambda.norm()));
    }
    let lr = inner(l, r);
    if lr.norm() < 1e-8 {
        log::warn!("environment overlap <l|r> = {:.3e} is ill-conditioned", lr.norm());
    }
    let t_op = build_transfer_with_observable(ul, ur, op)?;
    let num = inner(l, &t_op.apply(r));
    Ok(num / (lambda * lr))
}

/// Two-point correlator `<A_i B_(i+delta)>` through `delta - 1` plain
/// transfer applications, normalized by `lambda^(delta+1) <l|r>`.
pub fn correlation(
    ul: &SiteUnitary,
    ur: &SiteUnitary,
    op_a: &CMat,
    op_b: &CMat,
    delta: usize,
    l: &CVec,
    r: &CVec,
    lambda: C64,
) -> Result<C64> {
    assert!(delta >= 1, "operators must sit on distinct sites");
    if lambda.norm() <= 1e-6 {
        return Err(TransferError::StatesTooDifferent(lambda.norm()));
    }
    let lr = inner(l, r);
    if lr.norm() < 1e-8 {
        log::warn!("environment overlap <l|r> = {:.3e} is ill-conditioned", lr.norm());
    }
    let t = build_transfer(ul, ur)?;
    let t_a = build_transfer_with_observable(ul, ur, op_a)?;
    let t_b = build_transfer_with_observable(ul, ur, op_b)?;
    let mut v = t_b.apply(r);
    for _ in 0..delta - 1 {
        v = t.apply(&v);
    }
    let num = inner(l, &t_a.apply(&v));
    Ok(num / (lambda.powu(delta as u32 + 1) * lr))
}

/// `grad lambda` with respect to the bra-side gates: for each requested
/// gate, the matrix `C_k` with `lambda = sum conj(U_k[a,b]) C_k[a,b] + const`
/// so that the ascent direction of `|lambda|^2` is `2 conj(lambda) C_k`.
/// Gates not present in the operator yield zero matrices.
pub fn gradient_lambda(
    t: &TransferOperator,
    l: &CVec,
    r: &CVec,
    wrt: &[GateRef],
) -> Result<(C64, Vec<CMat>)> {
    let lr = inner(l, r);
    if lr.norm() < 1e-8 {
        return Err(TransferError::IllConditioned(lr.norm()));
    }
    let (raw, envs) = t.value_and_gate_envs(l, r);
    let lambda = raw / lr;
    let grads = wrt
        .iter()
        .map(|want| {
            envs.iter()
                .find(|(gr, _)| gr == want)
                .map(|(_, c)| c.mapv(|z| z / lr))
                .unwrap_or_else(|| CMat::zeros((4, 4)))
        })
        .collect();
    Ok((lambda, grads))
}

// ---------------------------------------------------------------------------
// Modified power method (layered environments)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvObjective {
    /// Maximize `|<E(phi')0| T E(phi)0>|^2` (the overlap density route).
    OverlapDensity,
    /// Experimental: maximize the post-selection probability
    /// `||T E(phi)0||^2` instead.
    PostSelection,
}

#[derive(Debug, Clone, Copy)]
pub struct PowerMethodOptions {
    pub eta: f64,
    pub max_iters: usize,
    /// Stop when `|lambda|^2` changes less than this between iterations.
    pub tol: f64,
    pub objective: EnvObjective,
}

impl Default for PowerMethodOptions {
    fn default() -> Self {
        Self { eta: 1e-3, max_iters: 2000, tol: 1e-12, objective: EnvObjective::OverlapDensity }
    }
}

#[derive(Debug, Clone)]
pub struct PowerMethodReport {
    pub lambda: C64,
    pub iterations: usize,
    pub converged: bool,
    pub objective_history: Vec<f64>,
}

/// One environment update by the modified power method: repeated single
/// gradient-ascent steps on the bra-circuit parameters, copying them to the
/// ket circuit after each step.
pub fn power_method_environment(
    t: &TransferOperator,
    side: EnvSide,
    init: &StateUnitary,
    opts: &PowerMethodOptions,
) -> Result<(StateUnitary, PowerMethodReport)> {
    assert_eq!(init.n_qubits, t.n_env_qubits, "environment circuit size mismatch");
    let mut ket = init.clone();
    let mut bra = init.clone();
    let mut last_obj = f64::NAN;
    let mut history = Vec::new();
    let mut lambda = C64::new(0.0, 0.0);
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..opts.max_iters {
        iterations = it + 1;
        let ket_vec = circuit_state(&ket);
        let y = match side {
            EnvSide::Right => t.apply(&ket_vec),
            EnvSide::Left => t.apply_adjoint(&ket_vec),
        };
        let (obj, lam) = match opts.objective {
            EnvObjective::OverlapDensity => {
                let lam = inner(&circuit_state(&bra), &y);
                (lam.norm_sqr(), lam)
            }
            EnvObjective::PostSelection => {
                let p = vec_norm(&y).powi(2);
                (p, C64::new(p, 0.0))
            }
        };
        lambda = lam;
        history.push(obj);
        if (obj - last_obj).abs() < opts.tol {
            converged = true;
            break;
        }
        last_obj = obj;

        // Gradient of the objective with respect to the bra circuit, whose
        // gates appear conjugated: ascent matrix 2 conj(lam) C per gate
        // (for the post-selection objective the target vector already
        // carries the lambda factor).
        let target = match opts.objective {
            EnvObjective::OverlapDensity => y.clone(),
            EnvObjective::PostSelection => match side {
                EnvSide::Right => t.apply_adjoint(&y),
                EnvSide::Left => t.apply(&y),
            },
        };
        let grads = circuit_overlap_env_gradients(&bra, &target);
        let scale = match opts.objective {
            EnvObjective::OverlapDensity => 2.0 * lam.conj(),
            EnvObjective::PostSelection => C64::new(2.0, 0.0),
        };
        for (gr, c) in grads {
            let g = &bra.layers[gr.layer][gr.index].matrix;
            let d = c.mapv(|z| z * scale);
            let d = crate::evolve::tangent_project(&d, g);
            let updated = g + &d.mapv(|z| z * opts.eta);
            bra.layers[gr.layer][gr.index].matrix = reunitarize(&updated)?;
        }
        ket = bra.clone();
    }
    if !converged {
        log::warn!(
            "power method hit the iteration cap ({}); returning best-so-far environment",
            opts.max_iters
        );
    }
    Ok((bra, PowerMethodReport { lambda, iterations, converged, objective_history: history }))
}

/// For the network `z = <E(phi) 0bar | y>`: per-gate matrices `C` with
/// `z = sum conj(V[a,b]) C[a,b]`, i.e. the Wirtinger gradients of `z` with
/// respect to the conjugated circuit gates. This is the measurement the
/// power method needs per iteration.
pub fn circuit_overlap_env_gradients(circuit: &StateUnitary, y: &CVec) -> Vec<(GateRef, CMat)> {
    // z = <0bar| E^dag |y>: run the daggered circuit ops between ket = y and
    // bra = |0bar>.
    let n = circuit.n_qubits;
    let wires: Vec<usize> = (0..n).collect();
    let ops = site_ops(&SiteUnitary::Layered(circuit.clone()), &wires, true, true);
    let mut zero = CVec::zeros(1 << n);
    zero[0] = C64::new(1.0, 0.0);
    let res = sandwich_value_and_envs(&ops, y, &zero, n);
    let (_, grads) = res.map_envs_to_conj_gradients();
    grads
}

// ---------------------------------------------------------------------------
// Polar-sweep fitting of layered environments
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub max_sweeps: usize,
    /// Stop when the overlap of consecutive sweeps exceeds `1 - stop_tol`.
    pub stop_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_sweeps: 400, stop_tol: 1e-10 }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub circuit: StateUnitary,
    /// `|| |target> - e^{i mu} |fit> ||` after global-phase alignment.
    pub err: f64,
    pub sweeps: usize,
    pub overlap: f64,
}

/// Fits an `m_e`-layer sequential circuit to an exact environment vector by
/// sweeping over the gates and replacing each with the unitary polar factor
/// of its overlap environment, which maximizes `Re <target|E|0bar>`.
pub fn fit_layered_environment(target: &CVec, m_e: usize, opts: &FitOptions) -> Result<FitResult> {
    let n = target.len().trailing_zeros() as usize;
    assert!(n >= 2, "environment circuits need at least two wires");
    let target = normalized(target);
    let mut circuit = StateUnitary::identity(n, m_e, Representation::Right);
    let wires: Vec<usize> = (0..n).collect();
    let mut zero = CVec::zeros(1 << n);
    zero[0] = C64::new(1.0, 0.0);

    let mut prev_vec = circuit_state(&circuit);
    let mut sweeps = 0;
    for sweep in 0..opts.max_sweeps {
        sweeps = sweep + 1;
        for layer in 0..m_e {
            for index in 0..n - 1 {
                // xi = <target| E |0bar> = sum V[o,i] M[o,i] for the gate.
                let ops = site_ops(&SiteUnitary::Layered(circuit.clone()), &wires, true, false);
                let res = sandwich_value_and_envs(&ops, &zero, &target, n);
                let m = res
                    .envs
                    .iter()
                    .find(|(tag, _)| {
                        !tag.daggered && tag.gate == GateRef { layer, index }
                    })
                    .map(|(_, e)| e.clone())
                    .expect("every circuit gate appears once");
                // Re xi = Re Tr[V M^T] is maximized by the polar factor of
                // conj(M); gate environments touching the |0...0> boundary
                // are structurally rank-deficient, so use the completion
                // from the singular bases.
                circuit.layers[layer][index].matrix =
                    tensor::polar_factor_any(&m.mapv(|z| z.conj()))?;
            }
        }
        let cur = circuit_state(&circuit);
        let sweep_overlap = inner(&prev_vec, &cur).norm();
        prev_vec = cur;
        if sweep_overlap > 1.0 - opts.stop_tol {
            break;
        }
    }
    let fit_vec = circuit_state(&circuit);
    let ov = inner(&fit_vec, &target);
    let phase = if ov.norm() > 0.0 { ov / ov.norm() } else { C64::new(1.0, 0.0) };
    let aligned = fit_vec.mapv(|z| z * phase);
    let err = vec_norm(&(&target - &aligned));
    Ok(FitResult { circuit, err, sweeps, overlap: ov.norm() })
}

/// Norm distance between an exact environment and a layered one after
/// global-phase alignment.
pub fn env_distance(exact: &CVec, layered: &StateUnitary) -> f64 {
    let v = circuit_state(layered);
    let t = normalized(exact);
    let ov = inner(&v, &t);
    let phase = if ov.norm() > 0.0 { ov / ov.norm() } else { C64::new(1.0, 0.0) };
    vec_norm(&(&t - &v.mapv(|z| z * phase)))
}

/// Wire-reversal permutation of an n-qubit state vector, used to map
/// environments between a block and its spatial mirror image.
pub fn reverse_wires(v: &CVec, n_qubits: usize) -> CVec {
    let dim = 1usize << n_qubits;
    assert_eq!(v.len(), dim);
    let mut out = CVec::zeros(dim);
    for i in 0..dim {
        let mut j = 0usize;
        for b in 0..n_qubits {
            if (i >> b) & 1 == 1 {
                j |= 1 << (n_qubits - 1 - b);
            }
        }
        out[j] = v[i];
    }
    out
}
