//! Two-qubit gates: dense form, the 15-angle Pauli-product form, conversion
//! between the two, and application of small unitaries to state vectors on
//! arbitrary wire subsets.
//!
//! Bit convention used across the crate: qubit 0 is the most significant bit
//! of a basis index, so `|q0 q1 ... q_{n-1}>` reads as a binary number and
//! `kron(a_on_q0, b_on_q1) = a (x) b`.

use ndarray::prelude::*;
use ndarray_linalg::{Eigh, UPLO};
use num_complex::Complex64 as C64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{dagger, frob_norm, identity, kron, unitarity_residual, CMat, CVec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pauli {
    I,
    X,
    Y,
    Z,
}

pub fn pauli(p: Pauli) -> CMat {
    let o = C64::new(0.0, 0.0);
    let l = C64::new(1.0, 0.0);
    let i = C64::new(0.0, 1.0);
    match p {
        Pauli::I => array![[l, o], [o, l]],
        Pauli::X => array![[o, l], [l, o]],
        Pauli::Y => array![[o, -i], [i, o]],
        Pauli::Z => array![[l, o], [o, -l]],
    }
}

pub fn pauli_pair(a: Pauli, b: Pauli) -> CMat {
    kron(&pauli(a), &pauli(b))
}

pub fn swap_gate() -> CMat {
    let o = C64::new(0.0, 0.0);
    let l = C64::new(1.0, 0.0);
    array![
        [l, o, o, o],
        [o, o, l, o],
        [o, l, o, o],
        [o, o, o, l]
    ]
}

/// `exp(i alpha P)` for an involutory `P` (`P^2 = I`): `cos(a) I + i sin(a) P`.
pub fn exp_i_pauli(p: &CMat, alpha: f64) -> CMat {
    let n = p.nrows();
    identity(n).mapv(|z| z * alpha.cos()) + p.mapv(|z| z * C64::new(0.0, alpha.sin()))
}

/// Applies a `2^k x 2^k` matrix to the listed wires of an `n`-qubit state.
/// `wires[0]` is the most significant bit of the gate's own index space.
pub fn apply_gate(state: &CVec, n_qubits: usize, wires: &[usize], m: &CMat) -> CVec {
    let k = wires.len();
    let dim = 1usize << n_qubits;
    assert_eq!(state.len(), dim, "state dimension mismatch");
    assert_eq!(m.nrows(), 1 << k, "gate dimension mismatch");
    debug_assert!(wires.iter().all(|&w| w < n_qubits));

    // Bit positions (from the LSB) of each wire, gate-MSB first.
    let pos: Vec<usize> = wires.iter().map(|&w| n_qubits - 1 - w).collect();
    let mut sorted_pos = pos.clone();
    sorted_pos.sort_unstable_by(|a, b| b.cmp(a));

    let mut out = CVec::zeros(dim);
    let sub = 1usize << k;
    let rest = dim >> k;
    let mut amps = vec![C64::new(0.0, 0.0); sub];
    for r in 0..rest {
        // Expand r into a full index with zeros at the wire bit positions.
        let mut base = r;
        for &p in sorted_pos.iter().rev() {
            let low = base & ((1usize << p) - 1);
            base = ((base >> p) << (p + 1)) | low;
        }
        for g in 0..sub {
            let mut idx = base;
            for (j, &p) in pos.iter().enumerate() {
                if (g >> (k - 1 - j)) & 1 == 1 {
                    idx |= 1 << p;
                }
            }
            amps[g] = state[idx];
        }
        for go in 0..sub {
            let mut acc = C64::new(0.0, 0.0);
            for gi in 0..sub {
                acc += m[(go, gi)] * amps[gi];
            }
            let mut idx = base;
            for (j, &p) in pos.iter().enumerate() {
                if (go >> (k - 1 - j)) & 1 == 1 {
                    idx |= 1 << p;
                }
            }
            out[idx] = acc;
        }
    }
    out
}

/// Embeds a gate on adjacent wires `(w, w+1)` of an `n`-qubit register as a
/// dense matrix.
pub fn embed_adjacent(gate: &CMat, n_qubits: usize, w: usize) -> CMat {
    let left = identity(1 << w);
    let right = identity(1 << (n_qubits - w - 2));
    kron(&kron(&left, gate), &right)
}

/// The fixed order of the 15 Pauli-product factors. `gate_from_params`
/// applies them first-to-last, i.e. the matrix is the reversed product.
/// Order: single-qubit Euler triplets on both qubits, the commuting
/// two-qubit core, then the second single-qubit triplets.
pub const PARAM_FACTORS: [(Pauli, Pauli); 15] = [
    (Pauli::Z, Pauli::I),
    (Pauli::Y, Pauli::I),
    (Pauli::X, Pauli::I),
    (Pauli::I, Pauli::Z),
    (Pauli::I, Pauli::Y),
    (Pauli::I, Pauli::X),
    (Pauli::X, Pauli::X),
    (Pauli::Y, Pauli::Y),
    (Pauli::Z, Pauli::Z),
    (Pauli::Z, Pauli::I),
    (Pauli::Y, Pauli::I),
    (Pauli::X, Pauli::I),
    (Pauli::I, Pauli::Z),
    (Pauli::I, Pauli::Y),
    (Pauli::I, Pauli::X),
];

/// A two-qubit gate stored dense. The engine optimizes gates in this
/// redundant form and reunitarizes after every update.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoQubitGate {
    pub matrix: CMat,
}

/// The 15-angle form of a two-qubit gate plus the global phase needed to
/// reproduce the dense matrix exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PauliAngles {
    pub angles: [f64; 15],
    pub phase: f64,
}

impl TwoQubitGate {
    pub fn new(matrix: CMat) -> Self {
        debug_assert!(unitarity_residual(&matrix) < 1e-10, "gate is not unitary");
        Self { matrix }
    }

    pub fn identity() -> Self {
        Self { matrix: identity(4) }
    }

    pub fn random<R: Rng>(rng: &mut R) -> Self {
        Self { matrix: crate::tensor::random_unitary(4, rng) }
    }

    pub fn dagger(&self) -> Self {
        Self { matrix: dagger(&self.matrix) }
    }

    /// Product of the 15 factors `exp(i a_k P_k)` in [`PARAM_FACTORS`] order
    /// (index 0 applied first).
    pub fn from_params(angles: &[f64; 15]) -> Self {
        let mut m = identity(4);
        for (k, (a, b)) in PARAM_FACTORS.iter().enumerate() {
            let f = exp_i_pauli(&pauli_pair(*a, *b), angles[k]);
            m = f.dot(&m);
        }
        Self { matrix: m }
    }

    pub fn from_angles(p: &PauliAngles) -> Self {
        let g = Self::from_params(&p.angles);
        Self { matrix: g.matrix.mapv(|z| z * C64::from_polar(1.0, p.phase)) }
    }

    /// Inverse of [`Self::from_angles`] via the Cartan decomposition; the
    /// returned angles reproduce the dense matrix including its phase.
    pub fn to_angles(&self) -> PauliAngles {
        kak_angles(&self.matrix)
    }
}

// ---------------------------------------------------------------------------
// Cartan decomposition of a 4x4 unitary in the magic basis.
// ---------------------------------------------------------------------------

fn magic_basis() -> CMat {
    let s = 1.0 / 2.0_f64.sqrt();
    let o = C64::new(0.0, 0.0);
    let r = C64::new(s, 0.0);
    let i = C64::new(0.0, s);
    // Columns: phi+, i psi+, psi-, i phi-  (simultaneous eigenvectors of
    // XX, YY, ZZ with signs sx=(1,1,-1,-1), sy=(-1,1,-1,1), sz=(1,-1,-1,1)).
    array![
        [r, o, o, i],
        [o, i, r, o],
        [o, i, -r, o],
        [r, o, o, -i]
    ]
}

const KAK_SX: [f64; 4] = [1.0, 1.0, -1.0, -1.0];
const KAK_SY: [f64; 4] = [-1.0, 1.0, -1.0, 1.0];
const KAK_SZ: [f64; 4] = [1.0, -1.0, -1.0, 1.0];

fn det4(m: &CMat) -> C64 {
    // LU-free expansion is fine at this size; use the eigenvalue product.
    let (evals, _) = crate::tensor::dense_eig(m).expect("eig of 4x4");
    evals.iter().product()
}

fn det2(m: &CMat) -> C64 {
    m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]
}

/// Jointly diagonalizes the commuting real symmetric pair `(p, q)` with a
/// real orthogonal matrix.
fn joint_diagonalize(p: &Array2<f64>, q: &Array2<f64>, group_tol: f64) -> Array2<f64> {
    let (pe, pv) = p.eigh(UPLO::Lower).expect("eigh of real symmetric");
    let n = p.nrows();
    let mut o = pv;
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && (pe[end] - pe[start]).abs() < group_tol {
            end += 1;
        }
        if end - start > 1 {
            let block = o.slice(s![.., start..end]).to_owned();
            let q_sub = block.t().dot(q).dot(&block);
            let q_sym = (&q_sub + &q_sub.t()) / 2.0;
            let (_, qv) = q_sym.eigh(UPLO::Lower).expect("eigh of subblock");
            let rotated = block.dot(&qv);
            o.slice_mut(s![.., start..end]).assign(&rotated);
        }
        start = end;
    }
    o
}

fn det_real(m: &Array2<f64>) -> f64 {
    let c = m.mapv(|x| C64::new(x, 0.0));
    det4(&c).re
}

/// Full Cartan decomposition of a two-qubit unitary:
/// `U = e^{i phase} (A1 (x) A2) exp(i (cx XX + cy YY + cz ZZ)) (B1 (x) B2)`.
pub struct KakFactors {
    pub phase: f64,
    pub a1: CMat,
    pub a2: CMat,
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub b1: CMat,
    pub b2: CMat,
}

pub fn kak_decompose(u: &CMat) -> KakFactors {
    assert_eq!(u.dim(), (4, 4));
    let det = det4(u);
    let mut phase = det.arg() / 4.0;
    let u_su = u.mapv(|z| z * C64::from_polar(1.0, -phase));

    let mb = magic_basis();
    let mbd = dagger(&mb);
    let v = mbd.dot(&u_su).dot(&mb);
    let s_mat = v.t().dot(&v);

    let p = s_mat.mapv(|z| z.re);
    let q = s_mat.mapv(|z| z.im);
    let mut o = Array2::<f64>::zeros((4, 4));
    let mut ok = false;
    for tol in [1e-9, 1e-7, 1e-5, 1e-3] {
        o = joint_diagonalize(&p, &q, tol);
        let oc = o.mapv(|x| C64::new(x, 0.0));
        let d = oc.t().dot(&s_mat).dot(&oc);
        let mut off = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    off += d[(i, j)].norm_sqr();
                }
            }
        }
        if off.sqrt() < 1e-8 {
            ok = true;
            break;
        }
    }
    assert!(ok, "joint diagonalization failed");
    if det_real(&o) < 0.0 {
        for i in 0..4 {
            o[(i, 3)] = -o[(i, 3)];
        }
    }

    let oc = o.mapv(|x| C64::new(x, 0.0));
    let d = oc.t().dot(&s_mat).dot(&oc);
    let mut theta: Vec<f64> = (0..4).map(|k| d[(k, k)].arg() / 2.0).collect();

    let build_f = |theta: &[f64]| -> CMat {
        let mut e_inv = CMat::zeros((4, 4));
        for k in 0..4 {
            e_inv[(k, k)] = C64::from_polar(1.0, -theta[k]);
        }
        v.dot(&oc).dot(&e_inv)
    };
    let mut f = build_f(&theta);
    // f is orthogonal by construction; force det +1 by a pi shift that leaves
    // exp(2 i theta) untouched.
    if det4(&f).re < 0.0 {
        theta[0] += std::f64::consts::PI;
        f = build_f(&theta);
    }
    debug_assert!(f.iter().map(|z| z.im * z.im).sum::<f64>().sqrt() < 1e-7);

    // theta_k = cx sx_k + cy sy_k + cz sz_k + t; the sign vectors and the
    // all-ones vector are mutually orthogonal with norm^2 = 4.
    let cx = (0..4).map(|k| theta[k] * KAK_SX[k]).sum::<f64>() / 4.0;
    let cy = (0..4).map(|k| theta[k] * KAK_SY[k]).sum::<f64>() / 4.0;
    let cz = (0..4).map(|k| theta[k] * KAK_SZ[k]).sum::<f64>() / 4.0;
    let t = theta.iter().sum::<f64>() / 4.0;
    phase += t;

    let left = mb.dot(&f).dot(&mbd);
    let right = mb.dot(&oc.t().to_owned()).dot(&mbd);

    let (a1, a2, ph_l) = split_tensor_product(&left);
    let (b1, b2, ph_r) = split_tensor_product(&right);
    phase += ph_l + ph_r;

    KakFactors { phase, a1, a2, cx, cy, cz, b1, b2 }
}

/// Splits a unitary that is an exact tensor product into SU(2) factors and a
/// leftover phase.
fn split_tensor_product(m: &CMat) -> (CMat, CMat, f64) {
    // Rearranged view: rm[(i,j), (k,l)] = m[(i,k), (j,l)] is rank one.
    let mut rm = CMat::zeros((4, 4));
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    rm[(i * 2 + j, k * 2 + l)] = m[(i * 2 + k, j * 2 + l)];
                }
            }
        }
    }
    let (mut pi, mut pj) = (0, 0);
    let mut best = -1.0;
    for i in 0..4 {
        for j in 0..4 {
            if rm[(i, j)].norm() > best {
                best = rm[(i, j)].norm();
                pi = i;
                pj = j;
            }
        }
    }
    let mut a = CMat::zeros((2, 2));
    let mut b = CMat::zeros((2, 2));
    for i in 0..2 {
        for j in 0..2 {
            a[(i, j)] = rm[(i * 2 + j, pj)];
            b[(i, j)] = rm[(pi, i * 2 + j)] / rm[(pi, pj)];
        }
    }
    // Normalize both factors into SU(2), pushing scale and phase out.
    let da = det2(&a);
    let sa = da.sqrt();
    let a = a.mapv(|z| z / sa);
    let b = b.mapv(|z| z * sa);
    let db = det2(&b);
    let sb = db.sqrt();
    let b = b.mapv(|z| z / sb);
    (a, b, sb.arg())
}

/// XYZ Euler angles of an SU(2) element: `w = s * exp(i a X) exp(i b Y)
/// exp(i c Z)` with `s = +-1` returned as a phase of 0 or pi.
pub fn su2_euler_xyz(w: &CMat) -> (f64, f64, f64, f64) {
    // Rotation matrix R[j][k] = 1/2 Tr[sigma_j w sigma_k w^dag].
    let sig = [pauli(Pauli::X), pauli(Pauli::Y), pauli(Pauli::Z)];
    let wd = dagger(w);
    let mut r = [[0.0f64; 3]; 3];
    for j in 0..3 {
        for k in 0..3 {
            let m = sig[j].dot(w).dot(&sig[k]).dot(&wd);
            r[j][k] = 0.5 * (m[(0, 0)] + m[(1, 1)]).re;
        }
    }
    // R = Rx(alpha) Ry(beta) Rz(gamma) with exp(i a X) ~ Rx(-2a).
    let beta = r[0][2].clamp(-1.0, 1.0).asin();
    let (alpha, gamma) = if beta.cos().abs() > 1e-9 {
        (f64::atan2(-r[1][2], r[2][2]), f64::atan2(-r[0][1], r[0][0]))
    } else {
        let sb = if beta > 0.0 { 1.0 } else { -1.0 };
        (f64::atan2(r[1][0] * sb, r[1][1]), 0.0)
    };
    let (a, b, c) = (-alpha / 2.0, -beta / 2.0, -gamma / 2.0);
    let rec = exp_i_pauli(&pauli(Pauli::X), a)
        .dot(&exp_i_pauli(&pauli(Pauli::Y), b))
        .dot(&exp_i_pauli(&pauli(Pauli::Z), c));
    let diff_plus = frob_norm(&(&rec - w));
    let diff_minus = frob_norm(&(&rec + w));
    let phase = if diff_plus <= diff_minus { 0.0 } else { std::f64::consts::PI };
    debug_assert!(diff_plus.min(diff_minus) < 1e-8, "Euler extraction failed");
    (a, b, c, phase)
}

/// Packs the Cartan factors into the fixed 15-slot angle vector.
pub fn kak_angles(u: &CMat) -> PauliAngles {
    let k = kak_decompose(u);
    let (xa1, ya1, za1, p1) = su2_euler_xyz(&k.a1);
    let (xa2, ya2, za2, p2) = su2_euler_xyz(&k.a2);
    let (xb1, yb1, zb1, p3) = su2_euler_xyz(&k.b1);
    let (xb2, yb2, zb2, p4) = su2_euler_xyz(&k.b2);
    let phase = k.phase + p1 + p2 + p3 + p4;
    PauliAngles {
        angles: [
            zb1, yb1, xb1, zb2, yb2, xb2, k.cx, k.cy, k.cz, za1, ya1, xa1, za2, ya2, xa2,
        ],
        phase,
    }
}
