//! Layered sequential state unitaries: the per-site building block of the
//! uniform circuit ansatz, in left and right representations, plus the dense
//! variant and circuit (de)serialization.

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gates::{apply_gate, embed_adjacent, swap_gate, PauliAngles, TwoQubitGate};
use crate::tensor::{dagger, identity, unitarity_residual, CMat, CVec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    Left,
    Right,
}

impl Representation {
    pub fn flipped(self) -> Self {
        match self {
            Representation::Left => Representation::Right,
            Representation::Right => Representation::Left,
        }
    }
}

#[derive(Debug, Error)]
pub enum CircuitError {
    #[error("state dimension {got} does not match 2^{n_qubits}")]
    DimensionMismatch { n_qubits: usize, got: usize },
    #[error("invalid circuit file: {0}")]
    InvalidFile(String),
}

/// One site's worth of the infinite state: `m_u` layers of sequential
/// two-qubit gates over `n_qubits` consecutive wires.
///
/// Gate `layers[l][k]` acts on wires `(k, k+1)`. Within a layer, gates are
/// applied in ascending `k` for the right representation and descending `k`
/// for the left one; layers apply in index order.
#[derive(Debug, Clone)]
pub struct StateUnitary {
    pub n_qubits: usize,
    pub representation: Representation,
    pub layers: Vec<Vec<TwoQubitGate>>,
}

/// A state unitary kept as one dense matrix over all `n_qubits` wires.
#[derive(Debug, Clone)]
pub struct DenseStateUnitary {
    pub n_qubits: usize,
    pub representation: Representation,
    pub matrix: CMat,
}

impl StateUnitary {
    pub fn identity(n_qubits: usize, m_u: usize, representation: Representation) -> Self {
        assert!(n_qubits >= 2 && m_u >= 1);
        let layers = (0..m_u)
            .map(|_| (0..n_qubits - 1).map(|_| TwoQubitGate::identity()).collect())
            .collect();
        Self { n_qubits, representation, layers }
    }

    pub fn random<R: rand::Rng>(
        n_qubits: usize,
        m_u: usize,
        representation: Representation,
        rng: &mut R,
    ) -> Self {
        let layers = (0..m_u)
            .map(|_| (0..n_qubits - 1).map(|_| TwoQubitGate::random(rng)).collect())
            .collect();
        Self { n_qubits, representation, layers }
    }

    pub fn m_u(&self) -> usize {
        self.layers.len()
    }

    /// Number of optimization angles, `15 (N_q - 1) M_U`.
    pub fn parameter_count(&self) -> usize {
        15 * (self.n_qubits - 1) * self.m_u()
    }

    /// Real numbers stored in the redundant dense-gate form,
    /// `32 (N_q - 1) M_U`.
    pub fn dense_parameter_count(&self) -> usize {
        32 * (self.n_qubits - 1) * self.m_u()
    }

    /// Gate applications in temporal order, as `(wire pair, matrix)` with the
    /// wire pair mapped through `wires`.
    ///
    /// Within a layer, the gate on the fresh-input side fires first so the
    /// new qubit entangles through the whole ladder: descending pair order
    /// for the right representation (fresh wire last), ascending for the
    /// left (fresh wire first). Layers apply in index order.
    pub fn op_sequence(&self, wires: &[usize]) -> Vec<([usize; 2], CMat)> {
        assert_eq!(wires.len(), self.n_qubits);
        let mut ops = Vec::with_capacity(self.m_u() * (self.n_qubits - 1));
        for layer in &self.layers {
            let idx: Vec<usize> = match self.representation {
                Representation::Right => (0..self.n_qubits - 1).rev().collect(),
                Representation::Left => (0..self.n_qubits - 1).collect(),
            };
            for k in idx {
                ops.push(([wires[k], wires[k + 1]], layer[k].matrix.clone()));
            }
        }
        ops
    }

    pub fn build_dense(&self) -> DenseStateUnitary {
        let n = self.n_qubits;
        let mut m = identity(1 << n);
        let wires: Vec<usize> = (0..n).collect();
        for (pair, g) in self.op_sequence(&wires) {
            m = embed_adjacent(&g, n, pair[0].min(pair[1])).dot(&m);
        }
        DenseStateUnitary { n_qubits: n, representation: self.representation, matrix: m }
    }

    /// Applies the circuit gate by gate, without materializing the dense
    /// matrix.
    pub fn apply_to_state(&self, psi: &CVec) -> Result<CVec, CircuitError> {
        let n = self.n_qubits;
        if psi.len() != 1 << n {
            return Err(CircuitError::DimensionMismatch { n_qubits: n, got: psi.len() });
        }
        let wires: Vec<usize> = (0..n).collect();
        let mut out = psi.clone();
        for (pair, g) in self.op_sequence(&wires) {
            out = apply_gate(&out, n, &pair, &g);
        }
        Ok(out)
    }

    /// Reversed gate order with each gate conjugate-transposed; the dense
    /// matrix of the result is the adjoint of the original.
    pub fn adjoint(&self) -> Self {
        // Reversing temporal order within a layer flips the sweep direction,
        // which the flipped representation tag encodes; layer order reverses
        // explicitly.
        let layers = self
            .layers
            .iter()
            .rev()
            .map(|layer| layer.iter().map(|g| g.dagger()).collect())
            .collect();
        Self {
            n_qubits: self.n_qubits,
            representation: self.representation.flipped(),
            layers,
        }
    }

    /// Spatial reflection: wire `w` maps to `n_qubits - 1 - w`. Flips the
    /// representation, reverses each layer and swap-conjugates every gate.
    /// The dense matrix transforms by bit-reversal conjugation.
    pub fn mirror(&self) -> Self {
        let s = swap_gate();
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .rev()
                    .map(|g| TwoQubitGate::new(s.dot(&g.matrix).dot(&s)))
                    .collect()
            })
            .collect();
        Self {
            n_qubits: self.n_qubits,
            representation: self.representation.flipped(),
            layers,
        }
    }

    pub fn max_unitarity_residual(&self) -> f64 {
        self.layers
            .iter()
            .flatten()
            .map(|g| unitarity_residual(&g.matrix))
            .fold(0.0, f64::max)
    }
}

impl DenseStateUnitary {
    pub fn adjoint(&self) -> Self {
        Self {
            n_qubits: self.n_qubits,
            representation: self.representation.flipped(),
            matrix: dagger(&self.matrix),
        }
    }
}

/// Either form of a site unitary, for code paths that accept both.
#[derive(Debug, Clone)]
pub enum SiteUnitary {
    Layered(StateUnitary),
    Dense(DenseStateUnitary),
}

impl SiteUnitary {
    pub fn n_qubits(&self) -> usize {
        match self {
            SiteUnitary::Layered(s) => s.n_qubits,
            SiteUnitary::Dense(d) => d.n_qubits,
        }
    }

    pub fn representation(&self) -> Representation {
        match self {
            SiteUnitary::Layered(s) => s.representation,
            SiteUnitary::Dense(d) => d.representation,
        }
    }

    pub fn dense_matrix(&self) -> CMat {
        match self {
            SiteUnitary::Layered(s) => s.build_dense().matrix,
            SiteUnitary::Dense(d) => d.matrix.clone(),
        }
    }
}

impl From<StateUnitary> for SiteUnitary {
    fn from(s: StateUnitary) -> Self {
        SiteUnitary::Layered(s)
    }
}

impl From<DenseStateUnitary> for SiteUnitary {
    fn from(d: DenseStateUnitary) -> Self {
        SiteUnitary::Dense(d)
    }
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

pub const CIRCUIT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GateData {
    /// 32 reals: the 16 entries row-major, (re, im) interleaved.
    Dense { dense: Vec<f64> },
    /// The 15-angle form plus its global phase.
    Angles { angles: Vec<f64>, phase: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CircuitFile {
    pub format_version: u32,
    pub n_qubits: usize,
    pub representation: Representation,
    pub layers: Vec<Vec<GateData>>,
}

impl CircuitFile {
    pub fn from_state_unitary(su: &StateUnitary) -> Self {
        let layers = su
            .layers
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|g| {
                        let mut dense = Vec::with_capacity(32);
                        for z in g.matrix.iter() {
                            dense.push(z.re);
                            dense.push(z.im);
                        }
                        GateData::Dense { dense }
                    })
                    .collect()
            })
            .collect();
        Self {
            format_version: CIRCUIT_FORMAT_VERSION,
            n_qubits: su.n_qubits,
            representation: su.representation,
            layers,
        }
    }

    pub fn to_state_unitary(&self) -> Result<StateUnitary, CircuitError> {
        if self.format_version != CIRCUIT_FORMAT_VERSION {
            return Err(CircuitError::InvalidFile(format!(
                "unsupported format version {}",
                self.format_version
            )));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            if layer.len() != self.n_qubits - 1 {
                return Err(CircuitError::InvalidFile(format!(
                    "layer has {} gates, expected {}",
                    layer.len(),
                    self.n_qubits - 1
                )));
            }
            let mut gates = Vec::with_capacity(layer.len());
            for g in layer {
                gates.push(gate_from_data(g)?);
            }
            layers.push(gates);
        }
        Ok(StateUnitary { n_qubits: self.n_qubits, representation: self.representation, layers })
    }
}

fn gate_from_data(g: &GateData) -> Result<TwoQubitGate, CircuitError> {
    match g {
        GateData::Dense { dense } => {
            if dense.len() != 32 {
                return Err(CircuitError::InvalidFile(format!(
                    "dense gate has {} reals, expected 32",
                    dense.len()
                )));
            }
            let mut m = CMat::zeros((4, 4));
            for i in 0..4 {
                for j in 0..4 {
                    let k = 2 * (4 * i + j);
                    m[(i, j)] = C64::new(dense[k], dense[k + 1]);
                }
            }
            Ok(TwoQubitGate { matrix: m })
        }
        GateData::Angles { angles, phase } => {
            if angles.len() != 15 {
                return Err(CircuitError::InvalidFile(format!(
                    "angle gate has {} angles, expected 15",
                    angles.len()
                )));
            }
            let mut a = [0.0; 15];
            a.copy_from_slice(angles);
            Ok(TwoQubitGate::from_angles(&PauliAngles { angles: a, phase: *phase }))
        }
    }
}

/// Bit-reversal permutation matrix on `n` qubits.
pub fn bit_reversal_matrix(n_qubits: usize) -> CMat {
    let dim = 1usize << n_qubits;
    let mut p = CMat::zeros((dim, dim));
    for i in 0..dim {
        let mut j = 0usize;
        for b in 0..n_qubits {
            if (i >> b) & 1 == 1 {
                j |= 1 << (n_qubits - 1 - b);
            }
        }
        p[(j, i)] = C64::new(1.0, 0.0);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::exp_i_pauli;
    use crate::gates::{pauli, pauli_pair, Pauli};
    use crate::tensor::{frob_norm, kron, random_vector, vec_norm};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_circuit_builds_identity() {
        for n in [2usize, 3, 4] {
            let su = StateUnitary::identity(n, 2, Representation::Right);
            let d = su.build_dense();
            assert!(frob_norm(&(&d.matrix - &identity(1 << n))) < 1e-14);
        }
    }

    #[test]
    fn two_qubit_single_gate_is_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = TwoQubitGate::random(&mut rng);
        let su = StateUnitary {
            n_qubits: 2,
            representation: Representation::Right,
            layers: vec![vec![g.clone()]],
        };
        assert!(frob_norm(&(&su.build_dense().matrix - &g.matrix)) < 1e-14);
    }

    #[test]
    fn right_representation_order_matches_kron_oracle() {
        // Right rep: the gate on the fresh wire (last pair) fires first, so
        // the dense matrix is (g01 on 0,1) . (g12 on 1,2); left rep mirrors.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let g01 = TwoQubitGate::random(&mut rng);
        let g12 = TwoQubitGate::random(&mut rng);
        let su = StateUnitary {
            n_qubits: 3,
            representation: Representation::Right,
            layers: vec![vec![g01.clone(), g12.clone()]],
        };
        let want = kron(&g01.matrix, &identity(2)).dot(&kron(&identity(2), &g12.matrix));
        assert!(frob_norm(&(&su.build_dense().matrix - &want)) < 1e-12);

        let su_left = StateUnitary { representation: Representation::Left, ..su };
        let want_left = kron(&identity(2), &g12.matrix).dot(&kron(&g01.matrix, &identity(2)));
        assert!(frob_norm(&(&su_left.build_dense().matrix - &want_left)) < 1e-12);
    }

    #[test]
    fn single_layer_three_qubit_circuit_reaches_full_bond_rank() {
        // The fresh wire passes through the whole gate ladder, so a generic
        // M_U = 1 circuit has full-rank Schmidt spectrum chi = 2^(N_q - 1).
        // This is what lets the ansatz entropy approach (N_q - 1) ln 2.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let su = StateUnitary::random(3, 1, Representation::Right, &mut rng);
        let mps = crate::umps::circuit_to_umps(&su.into()).unwrap();
        let min_schmidt = mps.schmidt[0].iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min_schmidt > 1e-6, "rank-deficient spectrum {:?}", mps.schmidt[0]);
    }

    #[test]
    fn apply_to_state_agrees_with_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [2usize, 3, 4, 5] {
            for rep in [Representation::Left, Representation::Right] {
                let su = StateUnitary::random(n, 2, rep, &mut rng);
                let psi = random_vector(1 << n, &mut rng);
                let via_gates = su.apply_to_state(&psi).unwrap();
                let via_dense = su.build_dense().matrix.dot(&psi);
                assert!(vec_norm(&(&via_gates - &via_dense)) < 1e-12);
            }
        }
    }

    #[test]
    fn apply_to_state_on_xx_rotation() {
        let alpha = std::f64::consts::FRAC_PI_4;
        let g = TwoQubitGate {
            matrix: exp_i_pauli(&pauli_pair(Pauli::X, Pauli::X), -alpha),
        };
        let su = StateUnitary {
            n_qubits: 2,
            representation: Representation::Right,
            layers: vec![vec![g]],
        };
        let mut psi = CVec::zeros(4);
        psi[0] = C64::new(1.0, 0.0);
        let out = su.apply_to_state(&psi).unwrap();
        assert!((out[0] - C64::new(alpha.cos(), 0.0)).norm() < 1e-12);
        assert!((out[3] - C64::new(0.0, -alpha.sin())).norm() < 1e-12);
        assert!((vec_norm(&out) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adjoint_inverts_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for rep in [Representation::Left, Representation::Right] {
            let su = StateUnitary::random(3, 2, rep, &mut rng);
            let prod = su.adjoint().build_dense().matrix.dot(&su.build_dense().matrix);
            assert!(frob_norm(&(&prod - &identity(8))) < 1e-12);
        }
    }

    #[test]
    fn parameter_counts_match_formula() {
        let cases = [(2usize, 1usize, 15usize), (6, 1, 75), (4, 3, 135)];
        for (n, m, want) in cases {
            let su = StateUnitary::identity(n, m, Representation::Right);
            assert_eq!(su.parameter_count(), want);
            assert_eq!(su.dense_parameter_count(), 32 * (n - 1) * m);
        }
    }

    #[test]
    fn mirror_is_bit_reversal_conjugation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for n in [2usize, 3, 4] {
            for rep in [Representation::Left, Representation::Right] {
                let su = StateUnitary::random(n, 2, rep, &mut rng);
                let m = su.mirror();
                assert_eq!(m.representation, rep.flipped());
                let p = bit_reversal_matrix(n);
                let want = p.dot(&su.build_dense().matrix).dot(&p);
                assert!(frob_norm(&(&m.build_dense().matrix - &want)) < 1e-12);
                // Mirroring twice is the identity map on circuits.
                let mm = m.mirror();
                assert!(frob_norm(
                    &(&mm.build_dense().matrix - &su.build_dense().matrix)
                ) < 1e-12);
            }
        }
    }

    #[test]
    fn left_of_symmetric_gates_is_reversal_of_right() {
        // Swap-symmetric gates: exp(i(a XX + b(ZI + IZ))) commutes with SWAP.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let n = 3;
        let mut layers = Vec::new();
        for _ in 0..2 {
            let mut layer = Vec::new();
            let symm = {
                let a: f64 = rng.gen_range(-1.0..1.0);
                let b: f64 = rng.gen_range(-1.0..1.0);
                let h = pauli_pair(Pauli::X, Pauli::X).mapv(|z| z * a)
                    + (kron(&pauli(Pauli::Z), &identity(2))
                        + kron(&identity(2), &pauli(Pauli::Z)))
                    .mapv(|z| z * b);
                crate::tensor::expm_hermitian(&h, C64::new(0.0, -1.0)).unwrap()
            };
            // Same gate on every pair keeps the set inversion symmetric.
            for _ in 0..n - 1 {
                layer.push(TwoQubitGate::new(symm.clone()));
            }
            layers.push(layer);
        }
        let right = StateUnitary { n_qubits: n, representation: Representation::Right, layers };
        let left = StateUnitary { representation: Representation::Left, ..right.clone() };
        let p = bit_reversal_matrix(n);
        let want = p.dot(&right.build_dense().matrix).dot(&p);
        assert!(frob_norm(&(&left.build_dense().matrix - &want)) < 1e-12);
    }

    #[test]
    fn circuit_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let su = StateUnitary::random(3, 2, Representation::Left, &mut rng);
        let file = CircuitFile::from_state_unitary(&su);
        let json = serde_json::to_string(&file).unwrap();
        let parsed: CircuitFile = serde_json::from_str(&json).unwrap();
        let su2 = parsed.to_state_unitary().unwrap();
        assert_eq!(su2.representation, su.representation);
        for (l1, l2) in su.layers.iter().zip(su2.layers.iter()) {
            for (g1, g2) in l1.iter().zip(l2.iter()) {
                assert!(frob_norm(&(&g1.matrix - &g2.matrix)) < 1e-12);
            }
        }
    }

    #[test]
    fn angle_gate_data_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let g = TwoQubitGate::random(&mut rng);
        let p = g.to_angles();
        let data = GateData::Angles { angles: p.angles.to_vec(), phase: p.phase };
        let back = gate_from_data(&data).unwrap();
        assert!(frob_norm(&(&back.matrix - &g.matrix)) < 1e-9);
    }
}
