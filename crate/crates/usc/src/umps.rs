//! Uniform matrix-product-state machinery: the circuit <-> MPS
//! correspondence, entanglement entropy, fidelity density between infinite
//! states, and an iTEBD evolution engine used as the quasi-exact reference.

use ndarray::prelude::*;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::{DenseStateUnitary, Representation, SiteUnitary};
use crate::gates::{pauli, pauli_pair, Pauli};
use crate::tensor::{
    self, dagger, expm_hermitian, identity, inner, kron, leading_eigenpair, vec_norm,
    ArnoldiOptions, CMat, CVec,
};

#[derive(Debug, Error)]
pub enum UmpsError {
    #[error("operation requires canonical form with Schmidt data")]
    MissingCanonicalData,
    #[error("right canonical form residual {residual:.3e} exceeds {max:.3e}")]
    NotRightCanonical { residual: f64, max: f64 },
    #[error("bond dimension {chi} is not a power of two")]
    BondNotPowerOfTwo { chi: usize },
    #[error("unit cell size {0} is unsupported here")]
    UnsupportedCell(usize),
    #[error("state unitary must be in the right representation")]
    WrongRepresentation,
    #[error("Schmidt spectrum is rank-deficient; left-canonical conversion failed")]
    RankDeficient,
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, UmpsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CanonicalForm {
    RightCanonical,
    LeftCanonical,
    None,
}

/// Transverse-field Ising chain with a longitudinal field:
/// `H = J sum X_i X_{i+1} + g sum Z_i + h sum X_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpinHamiltonian {
    pub j: f64,
    pub g: f64,
    pub h: f64,
}

impl SpinHamiltonian {
    /// Two-site bond term with the on-site fields split symmetrically:
    /// `J XX + g/2 (ZI + IZ) + h/2 (XI + IX)`. Used by the iTEBD reference,
    /// whose two-site cell keeps inversion symmetry this way.
    pub fn bond_symmetric(&self) -> CMat {
        let xx = pauli_pair(Pauli::X, Pauli::X);
        let zi = kron(&pauli(Pauli::Z), &identity(2));
        let iz = kron(&identity(2), &pauli(Pauli::Z));
        let xi = kron(&pauli(Pauli::X), &identity(2));
        let ix = kron(&identity(2), &pauli(Pauli::X));
        xx.mapv(|z| z * self.j)
            + (zi + iz).mapv(|z| z * (self.g / 2.0))
            + (xi + ix).mapv(|z| z * (self.h / 2.0))
    }

    /// Bond term with the full on-site fields on the left site:
    /// `J XX + g ZI + h XI`. This keeps the sequential sweep a single-site
    /// unit cell.
    pub fn bond_left_site(&self) -> CMat {
        let xx = pauli_pair(Pauli::X, Pauli::X);
        let zi = kron(&pauli(Pauli::Z), &identity(2));
        let xi = kron(&pauli(Pauli::X), &identity(2));
        xx.mapv(|z| z * self.j) + zi.mapv(|z| z * self.g) + xi.mapv(|z| z * self.h)
    }
}

/// Uniform MPS with a one- or two-site unit cell.
///
/// Site tensors have shape `(physical=2, left bond, right bond)`.
/// `schmidt[k]` is the spectrum on the bond to the right of site `k`
/// (for a 2-site cell, `schmidt[1]` sits on the cell boundary).
#[derive(Debug, Clone)]
pub struct UniformMps {
    pub tensors: Vec<Array3<C64>>,
    pub schmidt: Vec<Vec<f64>>,
    pub canonical_form: CanonicalForm,
}

impl UniformMps {
    pub fn cell_size(&self) -> usize {
        self.tensors.len()
    }

    pub fn chi(&self, bond: usize) -> usize {
        self.tensors[bond].dim().2
    }

    /// Translation-invariant product state with local ket `(a|0> + b|1>)`.
    pub fn product_state(a: C64, b: C64) -> Self {
        let n = (a.norm_sqr() + b.norm_sqr()).sqrt();
        let mut t = Array3::zeros((2, 1, 1));
        t[(0, 0, 0)] = a / n;
        t[(1, 0, 0)] = b / n;
        UniformMps {
            tensors: vec![t],
            schmidt: vec![vec![1.0]],
            canonical_form: CanonicalForm::RightCanonical,
        }
    }

    /// Same state viewed with an n-fold blocked unit cell (contraction of
    /// consecutive tensors into one site of a 2^n-dimensional "physical"
    /// index is not needed here; blocking keeps sites separate).
    pub fn repeated(&self, times: usize) -> Self {
        let mut tensors = Vec::new();
        let mut schmidt = Vec::new();
        for _ in 0..times {
            tensors.extend(self.tensors.iter().cloned());
            schmidt.extend(self.schmidt.iter().cloned());
        }
        UniformMps { tensors, schmidt, canonical_form: self.canonical_form }
    }

    /// Max right-canonical-form residual over sites:
    /// `|| sum_{i,b} B^i_{a b} conj(B^i_{a' b}) - delta ||`.
    pub fn rcf_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for t in &self.tensors {
            let (_, chi_l, chi_r) = t.dim();
            let mut m = CMat::zeros((chi_l, chi_l));
            for i in 0..2 {
                for a in 0..chi_l {
                    for a2 in 0..chi_l {
                        for b in 0..chi_r {
                            m[(a, a2)] += t[(i, a, b)] * t[(i, a2, b)].conj();
                        }
                    }
                }
            }
            worst = worst.max(tensor::frob_norm(&(&m - &identity(chi_l))));
        }
        worst
    }
}

/// `S = -sum s_i^2 ln s_i^2` on the given bond, in natural-log units.
/// Terms below 1e-30 in weight are dropped.
pub fn entanglement_entropy(mps: &UniformMps, bond: usize) -> Result<f64> {
    let s = mps.schmidt.get(bond).ok_or(UmpsError::MissingCanonicalData)?;
    if s.is_empty() {
        return Err(UmpsError::MissingCanonicalData);
    }
    Ok(entropy_of_spectrum(s))
}

pub fn entropy_of_spectrum(s: &[f64]) -> f64 {
    s.iter()
        .map(|&x| x * x)
        .filter(|&p| p >= 1e-30)
        .map(|p| -p * p.ln())
        .sum()
}

/// Extracts the uniform MPS encoded by a right-representation state unitary.
/// The fresh |0> enters the unitary's last input wire and the physical index
/// leaves its first output wire; the remaining wires become the
/// `chi = 2^(N_q - 1)` bond. The result is right-canonical by construction.
pub fn circuit_to_umps(u: &SiteUnitary) -> Result<UniformMps> {
    if u.representation() != Representation::Right {
        return Err(UmpsError::WrongRepresentation);
    }
    let n = u.n_qubits();
    let chi = 1usize << (n - 1);
    let m = u.dense_matrix();
    let mut t = Array3::zeros((2, chi, chi));
    for i in 0..2 {
        for a in 0..chi {
            for b in 0..chi {
                t[(i, a, b)] = m[(i * chi + b, a * 2)];
            }
        }
    }
    let schmidt = schmidt_from_rcf_tensor(&t)?;
    Ok(UniformMps {
        tensors: vec![t],
        schmidt: vec![schmidt],
        canonical_form: CanonicalForm::RightCanonical,
    })
}

/// Extracts the uniform MPS encoded by a left-representation state unitary:
/// `A^i_{a b} = U_L[(a, i), (0, b)]`, left-canonical by construction.
pub fn circuit_to_umps_left(u: &SiteUnitary) -> Result<UniformMps> {
    if u.representation() != Representation::Left {
        return Err(UmpsError::WrongRepresentation);
    }
    let n = u.n_qubits();
    let chi = 1usize << (n - 1);
    let m = u.dense_matrix();
    let mut t = Array3::zeros((2, chi, chi));
    for i in 0..2 {
        for a in 0..chi {
            for b in 0..chi {
                t[(i, a, b)] = m[(a * 2 + i, b)];
            }
        }
    }
    let rho = right_fixed_point(std::slice::from_ref(&t))?;
    let (evals, _) = tensor::eigh_c(&rho)?;
    let mut s: Vec<f64> = evals.iter().map(|&x| x.max(0.0).sqrt()).collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let norm: f64 = s.iter().map(|x| x * x).sum::<f64>().sqrt();
    let schmidt = s.into_iter().map(|x| x / norm).collect();
    Ok(UniformMps {
        tensors: vec![t],
        schmidt: vec![schmidt],
        canonical_form: CanonicalForm::LeftCanonical,
    })
}

/// The uniform MPS of either representation of a state unitary.
pub fn circuit_to_umps_any(u: &SiteUnitary) -> Result<UniformMps> {
    match u.representation() {
        Representation::Right => circuit_to_umps(u),
        Representation::Left => circuit_to_umps_left(u),
    }
}

/// Left fixed point of the single-site transfer map of a right-canonical
/// tensor, returned as its (descending) singular spectrum: the Schmidt
/// coefficients of the infinite state.
fn schmidt_from_rcf_tensor(t: &Array3<C64>) -> Result<Vec<f64>> {
    let rho = left_fixed_point(std::slice::from_ref(t))?;
    let (evals, _) = tensor::eigh_c(&rho)?;
    let mut s: Vec<f64> = evals.iter().map(|&x| x.max(0.0).sqrt()).collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let norm: f64 = s.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(s.into_iter().map(|x| x / norm).collect())
}

/// Leading fixed point of `rho -> sum_i B^i ... rho ... B^i_dag` over one
/// unit cell (the mirror of [`left_fixed_point`]).
fn right_fixed_point(cell: &[Array3<C64>]) -> Result<CMat> {
    let chi = cell.last().unwrap().dim().2;
    let dim = chi * chi;
    let apply = |v: &CVec| -> CVec {
        let mut rho = CMat::zeros((chi, chi));
        for a in 0..chi {
            for b in 0..chi {
                rho[(a, b)] = v[a * chi + b];
            }
        }
        for t in cell.iter().rev() {
            let (_, cl, cr) = t.dim();
            let mut next = CMat::zeros((cl, cl));
            for i in 0..2 {
                let mut bi = CMat::zeros((cl, cr));
                for a in 0..cl {
                    for b in 0..cr {
                        bi[(a, b)] = t[(i, a, b)];
                    }
                }
                next = next + bi.dot(&rho).dot(&dagger(&bi));
            }
            rho = next;
        }
        let mut out = CVec::zeros(dim);
        for a in 0..chi {
            for b in 0..chi {
                out[a * chi + b] = rho[(a, b)];
            }
        }
        out
    };
    let mut seed = CVec::zeros(dim);
    for a in 0..chi {
        seed[a * chi + a] = C64::new(1.0, 0.0);
    }
    let pair = leading_eigenpair(apply, dim, &seed, 1e-12, ArnoldiOptions::default())?;
    let mut rho = CMat::zeros((chi, chi));
    for a in 0..chi {
        for b in 0..chi {
            rho[(a, b)] = pair.vector[a * chi + b];
        }
    }
    let rho = (&rho + &dagger(&rho)).mapv(|z| z * 0.5);
    let tr = rho.diag().sum();
    let sign = if tr.re >= 0.0 { 1.0 } else { -1.0 };
    let tr_abs = tr.re.abs().max(1e-300);
    Ok(rho.mapv(|z| z * (sign / tr_abs)))
}

/// Leading fixed point of `rho -> sum_i B^i_dag ... rho ... B^i` over one
/// unit cell, Hermitized and positive-normalized.
fn left_fixed_point(cell: &[Array3<C64>]) -> Result<CMat> {
    let chi = cell[0].dim().1;
    let dim = chi * chi;
    let apply = |v: &CVec| -> CVec {
        let mut rho = CMat::zeros((chi, chi));
        for a in 0..chi {
            for b in 0..chi {
                rho[(a, b)] = v[a * chi + b];
            }
        }
        for t in cell {
            let (_, cl, cr) = t.dim();
            let mut next = CMat::zeros((cr, cr));
            for i in 0..2 {
                // next += B^i_dag rho B^i
                let mut bi = CMat::zeros((cl, cr));
                for a in 0..cl {
                    for b in 0..cr {
                        bi[(a, b)] = t[(i, a, b)];
                    }
                }
                let tmp = dagger(&bi).dot(&rho).dot(&bi);
                next = next + tmp;
            }
            rho = next;
        }
        let mut out = CVec::zeros(dim);
        for a in 0..chi {
            for b in 0..chi {
                out[a * chi + b] = rho[(a, b)];
            }
        }
        out
    };
    // Hermitian-friendly seed: the identity matrix flattened.
    let mut seed = CVec::zeros(dim);
    for a in 0..chi {
        seed[a * chi + a] = C64::new(1.0, 0.0);
    }
    let pair = leading_eigenpair(apply, dim, &seed, 1e-12, ArnoldiOptions::default())?;
    let mut rho = CMat::zeros((chi, chi));
    for a in 0..chi {
        for b in 0..chi {
            rho[(a, b)] = pair.vector[a * chi + b];
        }
    }
    let rho = (&rho + &dagger(&rho)).mapv(|z| z * 0.5);
    let tr = rho.diag().sum();
    let sign = if tr.re >= 0.0 { 1.0 } else { -1.0 };
    let tr_abs = tr.re.abs().max(1e-300);
    Ok(rho.mapv(|z| z * (sign / tr_abs)))
}

/// Completion of a right-canonical cell-1 MPS into a state unitary: the
/// isometry columns are `B`, the remaining columns an orthonormal complement.
/// The complement gauge does not affect the encoded state.
pub fn umps_to_circuit(mps: &UniformMps) -> Result<DenseStateUnitary> {
    if mps.cell_size() != 1 {
        return Err(UmpsError::UnsupportedCell(mps.cell_size()));
    }
    let res = mps.rcf_residual();
    if res > 1e-8 {
        return Err(UmpsError::NotRightCanonical { residual: res, max: 1e-8 });
    }
    let t = &mps.tensors[0];
    let chi = t.dim().1;
    if !chi.is_power_of_two() {
        return Err(UmpsError::BondNotPowerOfTwo { chi });
    }
    let n_qubits = 1 + chi.trailing_zeros() as usize;
    let dim = 2 * chi;
    let mut u = CMat::zeros((dim, dim));
    // Column (a, last-bit 0) holds the isometry vector (i, b) -> B^i_{a b}.
    for a in 0..chi {
        for i in 0..2 {
            for b in 0..chi {
                u[(i * chi + b, a * 2)] = t[(i, a, b)];
            }
        }
    }
    // Orthonormal complement for columns (a, 1), deterministic Gram-Schmidt
    // over the standard basis.
    let mut have = chi;
    let mut cols: Vec<CVec> = (0..chi).map(|a| u.column(a * 2).to_owned()).collect();
    let mut slot = 0usize;
    for k in 0..dim {
        if have == dim {
            break;
        }
        let mut v = CVec::zeros(dim);
        v[k] = C64::new(1.0, 0.0);
        for c in &cols {
            let ov = inner(c, &v);
            v = &v - &c.mapv(|z| z * ov);
        }
        // Second pass for orthogonality at working precision.
        for c in &cols {
            let ov = inner(c, &v);
            v = &v - &c.mapv(|z| z * ov);
        }
        let n = vec_norm(&v);
        if n > 1e-7 {
            let v = v.mapv(|z| z / n);
            for r in 0..dim {
                u[(r, slot * 2 + 1)] = v[r];
            }
            cols.push(v);
            slot += 1;
            have += 1;
        }
    }
    debug_assert!(have == dim, "complement construction incomplete");
    debug_assert!(tensor::unitarity_residual(&u) < 1e-8);
    Ok(DenseStateUnitary { n_qubits, representation: Representation::Right, matrix: u })
}

/// Left-canonical tensors of the same state, via the left fixed point
/// `rho = W diag(s^2) W^dag`: `A^i = S W^dag B^i W S^{-1}`.
/// Errors when the Schmidt spectrum is numerically rank-deficient.
pub fn to_left_canonical(mps: &UniformMps) -> Result<UniformMps> {
    if mps.cell_size() != 1 {
        return Err(UmpsError::UnsupportedCell(mps.cell_size()));
    }
    let t = &mps.tensors[0];
    let chi = t.dim().1;
    let rho = left_fixed_point(std::slice::from_ref(t))?;
    let (evals, w) = tensor::eigh_c(&rho)?;
    // Ascending order from LAPACK; use descending.
    let order: Vec<usize> = {
        let mut idx: Vec<usize> = (0..chi).collect();
        idx.sort_by(|&a, &b| evals[b].partial_cmp(&evals[a]).unwrap());
        idx
    };
    let smax = evals[order[0]].max(0.0).sqrt();
    let mut s = Vec::with_capacity(chi);
    for &k in &order {
        let v = evals[k].max(0.0).sqrt();
        if v < 1e-9 * smax {
            return Err(UmpsError::RankDeficient);
        }
        s.push(v);
    }
    let mut wo = CMat::zeros((chi, chi));
    for (col, &k) in order.iter().enumerate() {
        for r in 0..chi {
            wo[(r, col)] = w[(r, k)];
        }
    }
    let wod = dagger(&wo);
    let mut a = Array3::zeros((2, chi, chi));
    for i in 0..2 {
        let mut bi = CMat::zeros((chi, chi));
        for p in 0..chi {
            for q in 0..chi {
                bi[(p, q)] = t[(i, p, q)];
            }
        }
        let m = wod.dot(&bi).dot(&wo);
        for p in 0..chi {
            for q in 0..chi {
                a[(i, p, q)] = m[(p, q)] * s[p] / s[q];
            }
        }
    }
    let norm: f64 = s.iter().map(|x| x * x).sum::<f64>().sqrt();
    let schmidt: Vec<f64> = s.iter().map(|x| x / norm).collect();
    Ok(UniformMps {
        tensors: vec![a],
        schmidt: vec![schmidt],
        canonical_form: CanonicalForm::LeftCanonical,
    })
}

/// Completion of a left-canonical cell-1 MPS into a left-representation
/// state unitary: `U_L[(a, i), (0, b)] = A^i_{a b}`, with the fresh input on
/// the first wire and the physical output on the last.
pub fn lcf_to_left_circuit(mps: &UniformMps) -> Result<DenseStateUnitary> {
    if mps.cell_size() != 1 {
        return Err(UmpsError::UnsupportedCell(mps.cell_size()));
    }
    if mps.canonical_form != CanonicalForm::LeftCanonical {
        return Err(UmpsError::WrongRepresentation);
    }
    let t = &mps.tensors[0];
    let chi = t.dim().1;
    if !chi.is_power_of_two() {
        return Err(UmpsError::BondNotPowerOfTwo { chi });
    }
    let n_qubits = 1 + chi.trailing_zeros() as usize;
    let dim = 2 * chi;
    let mut u = CMat::zeros((dim, dim));
    // Columns with MSB (first wire) = 0 hold the isometry (b -> (a, i)).
    for b in 0..chi {
        for i in 0..2 {
            for a in 0..chi {
                u[(a * 2 + i, b)] = t[(i, a, b)];
            }
        }
    }
    let mut cols: Vec<CVec> = (0..chi).map(|b| u.column(b).to_owned()).collect();
    let mut slot = 0usize;
    for k in 0..dim {
        if cols.len() == dim {
            break;
        }
        let mut v = CVec::zeros(dim);
        v[k] = C64::new(1.0, 0.0);
        for c in &cols {
            let ov = inner(c, &v);
            v = &v - &c.mapv(|z| z * ov);
        }
        for c in &cols {
            let ov = inner(c, &v);
            v = &v - &c.mapv(|z| z * ov);
        }
        let n = vec_norm(&v);
        if n > 1e-7 {
            let v = v.mapv(|z| z / n);
            for r in 0..dim {
                u[(r, chi + slot)] = v[r];
            }
            cols.push(v);
            slot += 1;
        }
    }
    debug_assert!(tensor::unitarity_residual(&u) < 1e-8);
    Ok(DenseStateUnitary { n_qubits, representation: Representation::Left, matrix: u })
}

/// Both representations of the state encoded by a right-representation
/// circuit, as dense unitaries. Fails when the state's Schmidt spectrum is
/// rank-deficient (the left construction needs the full bond).
pub fn both_representations(u: &SiteUnitary) -> Result<(DenseStateUnitary, DenseStateUnitary)> {
    let mps = circuit_to_umps(u)?;
    let right = umps_to_circuit(&mps)?;
    let left = lcf_to_left_circuit(&to_left_canonical(&mps)?)?;
    Ok((left, right))
}

#[derive(Debug, Clone)]
pub struct FidelityResult {
    /// Squared overlap per site, `|lambda|^(2/n)` for an n-site blocked cell.
    pub per_site: f64,
    /// Leading mixed transfer eigenvalue over the blocked cell.
    pub lambda: C64,
    /// Set when the leading eigenvalue magnitude is (numerically) degenerate.
    pub degenerate: bool,
}

/// Fidelity density between two injective uniform states. Cells are blocked
/// to their least common multiple so the result is cell-size independent.
pub fn fidelity_density(a: &UniformMps, b: &UniformMps) -> Result<FidelityResult> {
    let n = lcm(a.cell_size(), b.cell_size());
    let ac = a.repeated(n / a.cell_size());
    let bc = b.repeated(n / b.cell_size());
    let chi_a = ac.tensors[0].dim().1;
    let chi_b = bc.tensors[0].dim().1;
    let dim = chi_a * chi_b;
    let apply = |v: &CVec| -> CVec {
        let mut m = CMat::zeros((chi_a, chi_b));
        for p in 0..chi_a {
            for q in 0..chi_b {
                m[(p, q)] = v[p * chi_b + q];
            }
        }
        for k in 0..n {
            let ta = &ac.tensors[k];
            let tb = &bc.tensors[k];
            let (_, al, ar) = ta.dim();
            let (_, bl, br) = tb.dim();
            debug_assert_eq!(al, m.dim().0);
            debug_assert_eq!(bl, m.dim().1);
            let mut next = CMat::zeros((ar, br));
            for i in 0..2 {
                let mut ma = CMat::zeros((al, ar));
                let mut mb = CMat::zeros((bl, br));
                for p in 0..al {
                    for q in 0..ar {
                        ma[(p, q)] = ta[(i, p, q)];
                    }
                }
                for p in 0..bl {
                    for q in 0..br {
                        mb[(p, q)] = tb[(i, p, q)];
                    }
                }
                // next += A^i_dag m B^i  (map from left to right)
                next = next + dagger(&ma).dot(&m).dot(&mb);
            }
            m = next;
        }
        let mut out = CVec::zeros(dim);
        for p in 0..chi_a {
            for q in 0..chi_b {
                out[p * chi_b + q] = m[(p, q)];
            }
        }
        out
    };
    let mut seed = CVec::zeros(dim);
    for p in 0..chi_a.min(chi_b) {
        seed[p * chi_b + p] = C64::new(1.0, 0.0);
    }
    let pair = match leading_eigenpair(&apply, dim, &seed, 1e-10, ArnoldiOptions::default()) {
        Ok(p) => p,
        Err(tensor::TensorError::IterationLimit { .. }) => {
            // Retry from a generic seed; degenerate-magnitude spectra can
            // stall the symmetric one.
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
            let seed = tensor::random_vector(dim, &mut rng);
            leading_eigenpair(&apply, dim, &seed, 1e-10, ArnoldiOptions::default())?
        }
        Err(e) => return Err(e.into()),
    };
    let lam = pair.value.norm().min(1.0 + 1e-12);
    Ok(FidelityResult {
        per_site: lam.powf(2.0 / n as f64),
        lambda: pair.value,
        degenerate: pair.degenerate,
    })
}

fn lcm(a: usize, b: usize) -> usize {
    let gcd = |mut x: usize, mut y: usize| {
        while y != 0 {
            let t = x % y;
            x = y;
            y = t;
        }
        x
    };
    a / gcd(a, b) * b
}

/// Environment-contracted single-site expectation value. For a 2-site cell
/// the two site values are averaged.
pub fn local_expectation_mps(mps: &UniformMps, op: &CMat) -> Result<C64> {
    if mps.canonical_form == CanonicalForm::LeftCanonical {
        // Evaluate on the spatial reflection, which is right-canonical with
        // bond-transposed tensors; single-site expectations are unchanged.
        let tensors = mps
            .tensors
            .iter()
            .rev()
            .map(|t| {
                let (_, l, r) = t.dim();
                let mut out = Array3::zeros((2, r, l));
                for i in 0..2 {
                    for a in 0..l {
                        for b in 0..r {
                            out[(i, b, a)] = t[(i, a, b)];
                        }
                    }
                }
                out
            })
            .collect();
        let schmidt = mps.schmidt.iter().rev().cloned().collect();
        let reflected = UniformMps {
            tensors,
            schmidt,
            canonical_form: CanonicalForm::RightCanonical,
        };
        return local_expectation_mps(&reflected, op);
    }
    if mps.canonical_form != CanonicalForm::RightCanonical {
        return Err(UmpsError::MissingCanonicalData);
    }
    let cell = mps.cell_size();
    // Left fixed point on the cell boundary; right environments are the
    // identity for right-canonical tensors.
    let mut rho = left_fixed_point(&mps.tensors)?;
    let mut acc = C64::new(0.0, 0.0);
    for k in 0..cell {
        let t = &mps.tensors[k];
        let (_, chi_l, chi_r) = t.dim();
        debug_assert_eq!(rho.dim(), (chi_l, chi_l));
        let mut val = C64::new(0.0, 0.0);
        // <O>_k = sum_{i,j} O_{i j} Tr[rho B^j B^i_dag]
        for i in 0..2 {
            for j in 0..2 {
                let o = op[(i, j)];
                if o.norm() == 0.0 {
                    continue;
                }
                let mut tr = C64::new(0.0, 0.0);
                for a in 0..chi_l {
                    for a2 in 0..chi_l {
                        let w = rho[(a, a2)];
                        if w.norm() == 0.0 {
                            continue;
                        }
                        for b in 0..chi_r {
                            tr += w * t[(j, a2, b)] * t[(i, a, b)].conj();
                        }
                    }
                }
                val += o * tr;
            }
        }
        acc += val;
        if cell > 1 {
            // Propagate the environment one site to the right.
            let mut next = CMat::zeros((chi_r, chi_r));
            for i in 0..2 {
                let mut bi = CMat::zeros((chi_l, chi_r));
                for a in 0..chi_l {
                    for b in 0..chi_r {
                        bi[(a, b)] = t[(i, a, b)];
                    }
                }
                next = next + dagger(&bi).dot(&rho).dot(&bi);
            }
            rho = next;
        }
    }
    Ok(acc / cell as f64)
}

// ---------------------------------------------------------------------------
// iTEBD
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct ItebdOptions {
    pub chi_max: usize,
    pub svd_cutoff: f64,
    /// 2 or 4 (Suzuki composition of second-order steps).
    pub order: u32,
}

impl Default for ItebdOptions {
    fn default() -> Self {
        Self { chi_max: 64, svd_cutoff: 1e-12, order: 4 }
    }
}

/// Real-time iTEBD evolution of a two-site-cell uniform MPS under the
/// even/odd bond splitting of the symmetric bond Hamiltonian. A cell-1 input
/// is blocked to two sites first.
pub fn itebd_evolve(
    mps: &UniformMps,
    ham: &SpinHamiltonian,
    dt: f64,
    steps: usize,
    opts: ItebdOptions,
) -> Result<UniformMps> {
    let mut state = ItebdState::from_mps(mps)?;
    let h = ham.bond_symmetric();
    match opts.order {
        2 => {
            let gates = Order2Gates::build(&h, dt)?;
            for _ in 0..steps {
                state.step_order2(&gates, &opts)?;
            }
        }
        4 => {
            // Suzuki fractal composition: five second-order steps with
            // coefficients (p, p, 1 - 4p, p, p), p = 1/(4 - 4^(1/3)).
            let p = 1.0 / (4.0 - 4.0_f64.powf(1.0 / 3.0));
            let outer = Order2Gates::build(&h, p * dt)?;
            let middle = Order2Gates::build(&h, (1.0 - 4.0 * p) * dt)?;
            for _ in 0..steps {
                state.step_order2(&outer, &opts)?;
                state.step_order2(&outer, &opts)?;
                state.step_order2(&middle, &opts)?;
                state.step_order2(&outer, &opts)?;
                state.step_order2(&outer, &opts)?;
            }
        }
        o => panic!("unsupported Trotter order {o} for iTEBD"),
    }
    Ok(state.into_mps())
}

struct Order2Gates {
    half: CMat,
    full: CMat,
}

impl Order2Gates {
    fn build(h: &CMat, dt: f64) -> Result<Self> {
        Ok(Self {
            half: expm_hermitian(h, C64::new(0.0, -dt / 2.0))?,
            full: expm_hermitian(h, C64::new(0.0, -dt))?,
        })
    }
}

/// Working representation: right-canonical tensors `B0, B1` plus the Schmidt
/// vectors `lam[0]` (bond between sites 0 and 1) and `lam[1]` (cell boundary).
struct ItebdState {
    b: [Array3<C64>; 2],
    lam: [Vec<f64>; 2],
}

impl ItebdState {
    fn from_mps(mps: &UniformMps) -> Result<Self> {
        let two = match mps.cell_size() {
            2 => mps.clone(),
            1 => mps.repeated(2),
            c => return Err(UmpsError::UnsupportedCell(c)),
        };
        Ok(Self {
            b: [two.tensors[0].clone(), two.tensors[1].clone()],
            lam: [two.schmidt[0].clone(), two.schmidt[1].clone()],
        })
    }

    fn into_mps(self) -> UniformMps {
        UniformMps {
            tensors: vec![self.b[0].clone(), self.b[1].clone()],
            schmidt: vec![self.lam[0].clone(), self.lam[1].clone()],
            canonical_form: CanonicalForm::RightCanonical,
        }
    }

    /// even(dt/2) odd(dt) even(dt/2)
    fn step_order2(&mut self, g: &Order2Gates, opts: &ItebdOptions) -> Result<()> {
        self.apply_bond(0, &g.half, opts)?;
        self.apply_bond(1, &g.full, opts)?;
        self.apply_bond(0, &g.half, opts)?;
        Ok(())
    }

    /// Applies a two-site gate on the bond right of site `which` using the
    /// division-free update: the left tensor is rebuilt from the gate-applied
    /// pair contracted with the new right isometry.
    fn apply_bond(&mut self, which: usize, gate: &CMat, opts: &ItebdOptions) -> Result<()> {
        let l = which;
        let r = 1 - which;
        let bl = &self.b[l];
        let br = &self.b[r];
        let (_, chi_a, chi_m) = bl.dim();
        let (_, chi_m2, chi_c) = br.dim();
        debug_assert_eq!(chi_m, chi_m2);
        let lam_left = &self.lam[1 - which]; // bond to the left of site `l`
        debug_assert_eq!(lam_left.len(), chi_a);

        // c[(i j), (a c)] = sum_m B_l^i[a,m] B_r^j[m,c], then the gate.
        let mut cten = vec![C64::new(0.0, 0.0); 4 * chi_a * chi_c];
        let idx = |ij: usize, a: usize, cc: usize| (ij * chi_a + a) * chi_c + cc;
        for i in 0..2 {
            for j in 0..2 {
                for a in 0..chi_a {
                    for cc in 0..chi_c {
                        let mut acc = C64::new(0.0, 0.0);
                        for m in 0..chi_m {
                            acc += bl[(i, a, m)] * br[(j, m, cc)];
                        }
                        cten[idx(i * 2 + j, a, cc)] = acc;
                    }
                }
            }
        }
        let mut cg = vec![C64::new(0.0, 0.0); 4 * chi_a * chi_c];
        for out in 0..4 {
            for input in 0..4 {
                let g = gate[(out, input)];
                if g.norm() == 0.0 {
                    continue;
                }
                for a in 0..chi_a {
                    for cc in 0..chi_c {
                        cg[idx(out, a, cc)] += g * cten[idx(input, a, cc)];
                    }
                }
            }
        }

        // theta[(a i), (j c)] = lam_left[a] * cg[(i j), (a c)]
        let rows = chi_a * 2;
        let cols = 2 * chi_c;
        let mut theta = CMat::zeros((rows, cols));
        for i in 0..2 {
            for j in 0..2 {
                for a in 0..chi_a {
                    for cc in 0..chi_c {
                        theta[(a * 2 + i, j * chi_c + cc)] =
                            C64::new(lam_left[a], 0.0) * cg[idx(i * 2 + j, a, cc)];
                    }
                }
            }
        }

        use ndarray_linalg::SVD;
        let (u, s, vt) = theta
            .svd(true, true)
            .map_err(|e| UmpsError::Tensor(tensor::TensorError::Backend(e.to_string())))?;
        let _ = u;
        let vt = vt.expect("right singular vectors");
        let smax = s.iter().cloned().fold(0.0, f64::max);
        let mut keep = 0usize;
        for &x in s.iter() {
            if keep >= opts.chi_max || x < opts.svd_cutoff * smax {
                break;
            }
            keep += 1;
        }
        let keep = keep.max(1);
        let norm: f64 = s.iter().take(keep).map(|x| x * x).sum::<f64>().sqrt();
        let new_lam: Vec<f64> = s.iter().take(keep).map(|x| x / norm).collect();

        // New right tensor from the top rows of V^dag; new left tensor from
        // the gate-applied pair contracted with V (no Schmidt division).
        let mut new_br = Array3::zeros((2, keep, chi_c));
        for b in 0..keep {
            for j in 0..2 {
                for cc in 0..chi_c {
                    new_br[(j, b, cc)] = vt[(b, j * chi_c + cc)];
                }
            }
        }
        let mut new_bl = Array3::zeros((2, chi_a, keep));
        for i in 0..2 {
            for a in 0..chi_a {
                for b in 0..keep {
                    let mut acc = C64::new(0.0, 0.0);
                    for j in 0..2 {
                        for cc in 0..chi_c {
                            acc += cg[idx(i * 2 + j, a, cc)] * vt[(b, j * chi_c + cc)].conj();
                        }
                    }
                    new_bl[(i, a, b)] = acc;
                }
            }
        }

        self.b[l] = new_bl;
        self.b[r] = new_br;
        self.lam[which] = new_lam;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::StateUnitary;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn identity_circuit_gives_product_state() {
        for n in [2usize, 3] {
            let su = StateUnitary::identity(n, 1, Representation::Right);
            let mps = circuit_to_umps(&su.into()).unwrap();
            assert!(mps.rcf_residual() < 1e-12);
            let sz = local_expectation_mps(&mps, &pauli(Pauli::Z)).unwrap();
            assert_abs_diff_eq!(sz.re, 1.0, epsilon = 1e-10);
            let sx = local_expectation_mps(&mps, &pauli(Pauli::X)).unwrap();
            assert_abs_diff_eq!(sx.norm(), 0.0, epsilon = 1e-10);
            assert!(entanglement_entropy(&mps, 0).unwrap() < 1e-10);
        }
    }

    #[test]
    fn random_circuits_are_right_canonical() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for n in [2usize, 3, 4] {
            for _ in 0..5 {
                let su = StateUnitary::random(n, 1, Representation::Right, &mut rng);
                let mps = circuit_to_umps(&su.into()).unwrap();
                assert!(mps.rcf_residual() < 1e-10);
                let id = local_expectation_mps(&mps, &identity(2)).unwrap();
                assert_abs_diff_eq!(id.re, 1.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn entropy_formula_cases() {
        assert_abs_diff_eq!(entropy_of_spectrum(&[1.0]), 0.0, epsilon = 1e-15);
        let half = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(
            entropy_of_spectrum(&[half, half]),
            std::f64::consts::LN_2,
            epsilon = 1e-12
        );
        let s = [0.9, 0.19_f64.sqrt()];
        let want = -0.81 * 0.81_f64.ln() - 0.19 * 0.19_f64.ln();
        assert_abs_diff_eq!(entropy_of_spectrum(&s), want, epsilon = 1e-12);
    }

    #[test]
    fn round_trip_circuit_mps_circuit() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for n in [2usize, 3] {
            let su = StateUnitary::random(n, 1, Representation::Right, &mut rng);
            let mps = circuit_to_umps(&su.clone().into()).unwrap();
            let back = umps_to_circuit(&mps).unwrap();
            let mps2 = circuit_to_umps(&back.into()).unwrap();
            let f = fidelity_density(&mps, &mps2).unwrap();
            assert!(
                f.per_site >= 1.0 - 1e-10,
                "round-trip fidelity {:.12} at n={n}",
                f.per_site
            );
            let a = local_expectation_mps(&mps, &pauli(Pauli::Z)).unwrap();
            let b = local_expectation_mps(&mps2, &pauli(Pauli::Z)).unwrap();
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn complement_gauge_does_not_change_observables() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let su = StateUnitary::random(2, 1, Representation::Right, &mut rng);
        let mps = circuit_to_umps(&su.into()).unwrap();
        let u1 = umps_to_circuit(&mps).unwrap();
        // Rotate the complement columns by a random unitary: a different but
        // equally valid completion.
        let chi = 2;
        let mut u2 = u1.matrix.clone();
        let r = tensor::random_unitary(chi, &mut rng);
        let cols: Vec<usize> = (0..chi).map(|a| a * 2 + 1).collect();
        let old: Vec<CVec> = cols.iter().map(|&cc| u1.matrix.column(cc).to_owned()).collect();
        for (ci, &cc) in cols.iter().enumerate() {
            for row in 0..2 * chi {
                let mut acc = c(0.0, 0.0);
                for (cj, o) in old.iter().enumerate() {
                    acc += o[row] * r[(cj, ci)];
                }
                u2[(row, cc)] = acc;
            }
        }
        let d2 = DenseStateUnitary {
            n_qubits: u1.n_qubits,
            representation: Representation::Right,
            matrix: u2,
        };
        let m1 = circuit_to_umps(&u1.into()).unwrap();
        let m2 = circuit_to_umps(&d2.into()).unwrap();
        let a = local_expectation_mps(&m1, &pauli(Pauli::Z)).unwrap();
        let b = local_expectation_mps(&m2, &pauli(Pauli::Z)).unwrap();
        assert!((a - b).norm() < 1e-10);
    }

    #[test]
    fn fidelity_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let su = StateUnitary::random(3, 1, Representation::Right, &mut rng);
        let mps = circuit_to_umps(&su.into()).unwrap();
        let f = fidelity_density(&mps, &mps).unwrap();
        assert!((f.per_site - 1.0).abs() < 1e-10);

        let up = UniformMps::product_state(c(1.0, 0.0), c(0.0, 0.0));
        let down = UniformMps::product_state(c(0.0, 0.0), c(1.0, 0.0));
        let f0 = fidelity_density(&up, &down).unwrap();
        assert!(f0.per_site < 1e-12);

        let theta: f64 = 0.4;
        let tilted = UniformMps::product_state(c(theta.cos(), 0.0), c(theta.sin(), 0.0));
        let f2 = fidelity_density(&up, &tilted).unwrap();
        assert_abs_diff_eq!(f2.per_site, theta.cos().powi(2), epsilon = 1e-10);
    }

    #[test]
    fn fidelity_is_symmetric_and_cell_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let a = circuit_to_umps(
            &StateUnitary::random(2, 1, Representation::Right, &mut rng).into(),
        )
        .unwrap();
        let b = circuit_to_umps(
            &StateUnitary::random(2, 1, Representation::Right, &mut rng).into(),
        )
        .unwrap();
        let fab = fidelity_density(&a, &b).unwrap();
        let fba = fidelity_density(&b, &a).unwrap();
        assert_abs_diff_eq!(fab.per_site, fba.per_site, epsilon = 1e-10);
        let b2 = b.repeated(2);
        let fab2 = fidelity_density(&a, &b2).unwrap();
        assert_abs_diff_eq!(fab.per_site, fab2.per_site, epsilon = 1e-9);
    }

    #[test]
    fn left_canonical_conversion_preserves_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let su = StateUnitary::random(3, 1, Representation::Right, &mut rng);
        let mps = circuit_to_umps(&su.into()).unwrap();
        let lcf = to_left_canonical(&mps).unwrap();
        // LCF residual: sum_i A^i_dag A^i = I.
        let t = &lcf.tensors[0];
        let chi = t.dim().1;
        let mut m = CMat::zeros((chi, chi));
        for i in 0..2 {
            for b1 in 0..chi {
                for b2 in 0..chi {
                    for a in 0..chi {
                        m[(b1, b2)] += t[(i, a, b1)].conj() * t[(i, a, b2)];
                    }
                }
            }
        }
        assert!(tensor::frob_norm(&(&m - &identity(chi))) < 1e-9);
        let f = fidelity_density(&mps, &lcf).unwrap();
        assert!((f.per_site - 1.0).abs() < 1e-9);
    }

    #[test]
    fn itebd_pure_field_keeps_sigma_z() {
        // J = 0, g = 1: |...000...> is an eigenstate of the evolution.
        let ham = SpinHamiltonian { j: 0.0, g: 1.0, h: 0.0 };
        let mps = UniformMps::product_state(c(1.0, 0.0), c(0.0, 0.0));
        let out = itebd_evolve(
            &mps,
            &ham,
            0.05,
            40,
            ItebdOptions { chi_max: 16, svd_cutoff: 1e-12, order: 2 },
        )
        .unwrap();
        let sz = local_expectation_mps(&out, &pauli(Pauli::Z)).unwrap();
        assert_abs_diff_eq!(sz.re, 1.0, epsilon = 1e-8);
        let s = entanglement_entropy(&out, 0).unwrap();
        assert!(s < 1e-8);
    }

    #[test]
    fn itebd_fourth_order_richardson_ratio() {
        // Halving dt at fixed t reduces the step error by ~2^4.
        let ham = SpinHamiltonian { j: 1.0, g: 1.0, h: 0.0 };
        let mps = UniformMps::product_state(c(1.0, 0.0), c(0.0, 0.0));
        let opts = ItebdOptions { chi_max: 48, svd_cutoff: 1e-14, order: 4 };
        let t_total = 1.0;
        let sz = |dt: f64| -> f64 {
            let steps = (t_total / dt).round() as usize;
            let out = itebd_evolve(&mps, &ham, dt, steps, opts).unwrap();
            local_expectation_mps(&out, &pauli(Pauli::Z)).unwrap().re
        };
        let a = sz(0.04);
        let b = sz(0.02);
        let cc = sz(0.01);
        let ratio = (a - b).abs() / (b - cc).abs().max(1e-300);
        assert!(ratio >= 8.0, "Richardson ratio {ratio:.2} below 8");
    }
}
