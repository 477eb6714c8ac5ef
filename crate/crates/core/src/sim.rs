//! Dense statevector simulation.
//!
//! Amplitudes are stored as `Complex64` with qubit 0 as the least-significant
//! bit of the basis-state index.

use std::f64::consts::FRAC_1_SQRT_2;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const MAX_QUBITS: usize = 16;

/// Tolerance used when checking gate matrices for unitarity.
pub const UNITARY_TOL: f64 = 1e-10;

/// A 2×2 complex matrix in row-major order.
pub type Mat2 = [[Complex64; 2]; 2];

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Single-qubit gate matrices, half-angle convention.
pub mod gates {
    use super::*;

    pub fn rx(theta: f64) -> Mat2 {
        let (s, c) = (theta / 2.0).sin_cos();
        let mis = Complex64::new(0.0, -s);
        [[Complex64::new(c, 0.0), mis], [mis, Complex64::new(c, 0.0)]]
    }

    pub fn ry(theta: f64) -> Mat2 {
        let (s, c) = (theta / 2.0).sin_cos();
        [
            [Complex64::new(c, 0.0), Complex64::new(-s, 0.0)],
            [Complex64::new(s, 0.0), Complex64::new(c, 0.0)],
        ]
    }

    pub fn rz(theta: f64) -> Mat2 {
        let (s, c) = (theta / 2.0).sin_cos();
        [[Complex64::new(c, -s), ZERO], [ZERO, Complex64::new(c, s)]]
    }

    /// `RZ(omega) · RY(theta) · RZ(phi)`.
    pub fn rot(phi: f64, theta: f64, omega: f64) -> Mat2 {
        let (s, c) = (theta / 2.0).sin_cos();
        let plus = (phi + omega) / 2.0;
        let minus = (phi - omega) / 2.0;
        [
            [
                Complex64::from_polar(c, -plus),
                Complex64::from_polar(-s, minus),
            ],
            [
                Complex64::from_polar(s, -minus),
                Complex64::from_polar(c, plus),
            ],
        ]
    }

    pub fn hadamard() -> Mat2 {
        let h = Complex64::new(FRAC_1_SQRT_2, 0.0);
        [[h, h], [h, -h]]
    }

    pub fn s_dag() -> Mat2 {
        [[ONE, ZERO], [ZERO, Complex64::new(0.0, -1.0)]]
    }

    pub fn matmul(a: &Mat2, b: &Mat2) -> Mat2 {
        let mut out = [[ZERO; 2]; 2];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        out
    }

    /// `max |U†U − I|` entrywise is below `tol`.
    pub fn is_unitary(u: &Mat2, tol: f64) -> bool {
        for i in 0..2 {
            for j in 0..2 {
                let dot = u[0][i].conj() * u[0][j] + u[1][i].conj() * u[1][j];
                let target = if i == j { ONE } else { ZERO };
                if (dot - target).norm() > tol {
                    return false;
                }
            }
        }
        true
    }
}

/// Two-qubit controlled gates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ControlledGate {
    #[serde(rename = "CNOT")]
    Cnot,
    #[serde(rename = "CZ")]
    Cz,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pauli {
    X,
    Y,
    Z,
}

impl Pauli {
    pub const ALL: [Pauli; 3] = [Pauli::X, Pauli::Y, Pauli::Z];

    pub fn matrix(self) -> Mat2 {
        match self {
            Pauli::X => [[ZERO, ONE], [ONE, ZERO]],
            Pauli::Y => [
                [ZERO, Complex64::new(0.0, -1.0)],
                [Complex64::new(0.0, 1.0), ZERO],
            ],
            Pauli::Z => [[ONE, ZERO], [ZERO, -ONE]],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Pauli::X => "X",
            Pauli::Y => "Y",
            Pauli::Z => "Z",
        }
    }
}

impl std::fmt::Display for Pauli {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Pauli {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x" | "px" | "paulix" => Ok(Pauli::X),
            "y" | "py" | "pauliy" => Ok(Pauli::Y),
            "z" | "pz" | "pauliz" => Ok(Pauli::Z),
            _ => Err(Error::validation(format!("unknown observable {s:?}"))),
        }
    }
}

/// How expectation values are read out of a state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShotMode {
    Analytic,
    /// `stream` seeds the splitmix64 generator used to draw the shots.
    Sampled { shots: u32, stream: u64 },
}

impl ShotMode {
    pub fn is_sampled(&self) -> bool {
        matches!(self, ShotMode::Sampled { .. })
    }

    /// Same mode with the sampling stream replaced (no-op for analytic).
    pub fn with_stream(self, stream: u64) -> Self {
        match self {
            ShotMode::Analytic => ShotMode::Analytic,
            ShotMode::Sampled { shots, .. } => ShotMode::Sampled { shots, stream },
        }
    }
}

/// Amplitudes are kept as separate real and imaginary arrays so the gate
/// kernels vectorize.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    n_qubits: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl StateVector {
    /// The ground state `|0…0⟩`.
    pub fn zero(n_qubits: usize) -> Result<Self> {
        if n_qubits == 0 || n_qubits > MAX_QUBITS {
            return Err(Error::Capacity(n_qubits));
        }
        let mut re = vec![0.0; 1 << n_qubits];
        re[0] = 1.0;
        Ok(Self {
            n_qubits,
            im: vec![0.0; re.len()],
            re,
        })
    }

    /// Wraps raw amplitudes. The length must be a power of two; normalization
    /// is the caller's responsibility.
    pub fn from_amplitudes(amps: Vec<Complex64>) -> Result<Self> {
        let len = amps.len();
        if len < 2 || !len.is_power_of_two() {
            return Err(Error::validation(format!(
                "amplitude count {len} is not a power of two >= 2"
            )));
        }
        let n_qubits = len.trailing_zeros() as usize;
        if n_qubits > MAX_QUBITS {
            return Err(Error::Capacity(n_qubits));
        }
        Ok(Self {
            n_qubits,
            re: amps.iter().map(|a| a.re).collect(),
            im: amps.iter().map(|a| a.im).collect(),
        })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn amplitude(&self, index: usize) -> Complex64 {
        Complex64::new(self.re[index], self.im[index])
    }

    pub fn amplitudes(&self) -> Vec<Complex64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(&r, &i)| Complex64::new(r, i))
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.probability_iter().sum::<f64>().sqrt()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.probability_iter().collect()
    }

    fn probability_iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.re.iter().zip(&self.im).map(|(r, i)| r * r + i * i)
    }

    fn check_qubit(&self, index: usize) -> Result<()> {
        if index < self.n_qubits {
            Ok(())
        } else {
            Err(Error::QubitIndex {
                index,
                n_qubits: self.n_qubits,
            })
        }
    }

    /// Applies `u` to `target`. Unitarity is verified in debug builds only.
    pub fn apply_single(&mut self, u: &Mat2, target: usize) -> Result<()> {
        if cfg!(debug_assertions) && !gates::is_unitary(u, UNITARY_TOL) {
            return Err(Error::validation("gate matrix is not unitary"));
        }
        self.check_qubit(target)?;
        self.apply_single_unchecked(u, target);
        Ok(())
    }

    /// Like [`apply_single`](Self::apply_single) but always checks unitarity.
    pub fn apply_single_checked(&mut self, u: &Mat2, target: usize) -> Result<()> {
        if !gates::is_unitary(u, UNITARY_TOL) {
            return Err(Error::validation("gate matrix is not unitary"));
        }
        self.check_qubit(target)?;
        self.apply_single_unchecked(u, target);
        Ok(())
    }

    pub(crate) fn apply_single_unchecked(&mut self, u: &Mat2, target: usize) {
        single_kernel(&mut self.re, &mut self.im, u, target);
    }

    pub fn apply_controlled(
        &mut self,
        gate: ControlledGate,
        control: usize,
        target: usize,
    ) -> Result<()> {
        self.check_qubit(control)?;
        self.check_qubit(target)?;
        if control == target {
            return Err(Error::validation(format!(
                "control and target are both qubit {control}"
            )));
        }
        self.apply_controlled_unchecked(gate, control, target);
        Ok(())
    }

    pub(crate) fn apply_controlled_unchecked(
        &mut self,
        gate: ControlledGate,
        control: usize,
        target: usize,
    ) {
        controlled_kernel(&mut self.re, &mut self.im, gate, control, target);
    }

    /// Applies `ops` in order. Runs of ops that only touch wires below
    /// [`BLOCK_QUBITS`] are applied block by block so each block stays in
    /// L1 cache for the whole run. Wires are not checked.
    pub(crate) fn apply_ops(&mut self, ops: &[Op]) {
        let cnot_runs = cnot_run_lengths(ops);
        let local = |k: usize| ops[k].max_wire() < BLOCK_QUBITS && cnot_runs[k] < 2;
        let mut i = 0;
        while i < ops.len() {
            if cnot_runs[i] >= 2 {
                let end = i + cnot_runs[i];
                self.apply_cnot_run(&ops[i..end]);
                i = end;
                continue;
            }
            let mut j = i + 1;
            if self.n_qubits > BLOCK_QUBITS && local(i) {
                while j < ops.len() && local(j) {
                    j += 1;
                }
            }
            if j - i > 1 {
                let size = 1usize << BLOCK_QUBITS;
                for (re, im) in self
                    .re
                    .chunks_exact_mut(size)
                    .zip(self.im.chunks_exact_mut(size))
                {
                    for op in &ops[i..j] {
                        op.apply_to(re, im);
                    }
                }
            } else {
                ops[i].apply_to(&mut self.re, &mut self.im);
            }
            i = j;
        }
    }

    /// A run of CNOTs is a linear map on index bits, so the whole run is one
    /// gather: `new[y] = old[f⁻¹(y)]`, with `f⁻¹` tabulated per index byte.
    fn apply_cnot_run(&mut self, run: &[Op]) {
        let inverse = |mut y: usize| {
            // Each CNOT is its own inverse; undo them last to first.
            for op in run.iter().rev() {
                if let Op::Controlled { control, target, .. } = *op {
                    y ^= ((y >> control) & 1) << target;
                }
            }
            y
        };
        let low: Vec<usize> = (0..256).map(inverse).collect();
        let high: Vec<usize> = (0..256).map(|b| inverse(b << 8)).collect();
        SPARE.with_borrow_mut(|(spare_re, spare_im)| {
            let len = self.re.len();
            spare_re.resize(len, 0.0);
            spare_im.resize(len, 0.0);
            let low = &low[..len.min(256)];
            for (chunk, (out_re, out_im)) in spare_re
                .chunks_mut(256)
                .zip(spare_im.chunks_mut(256))
                .enumerate()
            {
                let h = high[chunk];
                for ((l, r), i) in low.iter().zip(out_re).zip(out_im) {
                    *r = self.re[l ^ h];
                    *i = self.im[l ^ h];
                }
            }
            std::mem::swap(&mut self.re, spare_re);
            std::mem::swap(&mut self.im, spare_im);
        });
    }

    /// Analytic `⟨ψ|P_qubit|ψ⟩`.
    pub fn expectation(&self, obs: Pauli, qubit: usize) -> Result<f64> {
        self.check_qubit(qubit)?;
        Ok(self.expectation_unchecked(obs, qubit))
    }

    fn expectation_unchecked(&self, obs: Pauli, qubit: usize) -> f64 {
        let stride = 1usize << qubit;
        let mut acc = 0.0;
        for (rb, ib) in self
            .re
            .chunks_exact(2 * stride)
            .zip(self.im.chunks_exact(2 * stride))
        {
            let (rl, rh) = rb.split_at(stride);
            let (il, ih) = ib.split_at(stride);
            let mut block = 0.0;
            for j in 0..stride {
                block += match obs {
                    Pauli::Z => rl[j] * rl[j] + il[j] * il[j] - rh[j] * rh[j] - ih[j] * ih[j],
                    Pauli::X => 2.0 * (rl[j] * rh[j] + il[j] * ih[j]),
                    Pauli::Y => 2.0 * (rl[j] * ih[j] - il[j] * rh[j]),
                };
            }
            acc += block;
        }
        acc.clamp(-1.0, 1.0)
    }

    /// Per-qubit expectations of `obs`, analytic or shot-sampled.
    pub fn expectation_all(&self, obs: Pauli, mode: ShotMode) -> Result<Vec<f64>> {
        match mode {
            ShotMode::Analytic => Ok((0..self.n_qubits)
                .map(|q| self.expectation_unchecked(obs, q))
                .collect()),
            ShotMode::Sampled { .. } => self.clone().into_expectations(obs, mode),
        }
    }

    /// Consuming variant of [`expectation_all`](Self::expectation_all) that
    /// rotates in place instead of cloning.
    pub fn into_expectations(mut self, obs: Pauli, mode: ShotMode) -> Result<Vec<f64>> {
        self.measure_destructive(obs, mode)
    }

    /// Reads out expectations, leaving `self` rotated into the measurement
    /// basis when sampling.
    pub(crate) fn measure_destructive(&mut self, obs: Pauli, mode: ShotMode) -> Result<Vec<f64>> {
        if !mode.is_sampled() {
            return self.expectation_all(obs, mode);
        }
        self.rotate_to_z_basis(obs);
        self.z_basis_readout(mode)
    }

    /// Per-qubit Z expectations, treating `self` as already rotated into the
    /// measurement basis.
    pub(crate) fn z_basis_readout(&self, mode: ShotMode) -> Result<Vec<f64>> {
        let (shots, stream) = match mode {
            ShotMode::Analytic => return self.expectation_all(Pauli::Z, mode),
            ShotMode::Sampled { shots, stream } => (shots, stream),
        };
        if shots == 0 {
            return Err(Error::validation("shot count must be positive"));
        }
        let mut rng = SplitMix64::new(stream);
        let samples = self.sample_indices(shots as usize, &mut rng);
        Ok(sampled_expectations(&samples, self.n_qubits, shots))
    }

    /// Overwrites the amplitudes with those of `other` without reallocating.
    pub(crate) fn copy_from(&mut self, other: &StateVector) {
        self.n_qubits = other.n_qubits;
        self.re.clear();
        self.re.extend_from_slice(&other.re);
        self.im.clear();
        self.im.extend_from_slice(&other.im);
    }

    /// Maps the eigenbasis of `obs` onto the computational basis on every
    /// qubit: H for X, S† then H for Y, nothing for Z.
    pub fn rotate_to_z_basis(&mut self, obs: Pauli) {
        let ops = basis_rotation_ops(obs, self.n_qubits);
        self.apply_ops(&ops);
    }

    /// Draws `shots` basis-state indices from the Born distribution.
    ///
    /// Each draw `u · total` maps to the first index whose cumulative
    /// probability exceeds it. Cumulative sums are formed per block of
    /// [`SAMPLE_BLOCK`] amplitudes, then within the block a draw lands in.
    /// Results come back in draw order.
    pub fn sample_indices(&self, shots: usize, rng: &mut SplitMix64) -> Vec<usize> {
        let prob = |i: usize| self.re[i] * self.re[i] + self.im[i] * self.im[i];
        let cdf = BlockCdf::new(self.len(), |start, end| (start..end).map(prob).sum());
        (0..shots).map(|_| cdf.draw(rng.next_f64(), prob)).collect()
    }
}

/// Per-qubit Z readouts of the two shifted states `(psi ∓ i·chi)/√2`, with
/// `psi` and `chi` already in the measurement basis. `modes[0]` reads the
/// `−i` combination, `modes[1]` the `+i` one.
///
/// `|psi ∓ i·chi|² / 2 = (|psi|² + |chi|² ± 2 Im(conj(psi)·chi)) / 2`, so the
/// combined states are never formed.
pub(crate) fn shifted_pair_readout(
    psi: &StateVector,
    chi: &StateVector,
    modes: [ShotMode; 2],
) -> Result<[Vec<f64>; 2]> {
    let n = psi.n_qubits;
    let base = |i: usize| {
        0.5 * (psi.re[i] * psi.re[i] + psi.im[i] * psi.im[i] + chi.re[i] * chi.re[i]
            + chi.im[i] * chi.im[i])
    };
    let cross = |i: usize| psi.re[i] * chi.im[i] - psi.im[i] * chi.re[i];
    let prob = |i: usize, sign: f64| base(i) + sign * cross(i);

    let mut out = [Vec::new(), Vec::new()];
    for ((slot, mode), sign) in out.iter_mut().zip(modes).zip([1.0, -1.0]) {
        *slot = match mode {
            ShotMode::Analytic => {
                let mut plus = vec![0.0; n];
                let mut total = 0.0;
                for i in 0..psi.len() {
                    let p = prob(i, sign);
                    total += p;
                    for (q, acc) in plus.iter_mut().enumerate() {
                        if (i >> q) & 1 == 0 {
                            *acc += p;
                        }
                    }
                }
                plus.iter()
                    .map(|&p0| (2.0 * p0 - total).clamp(-1.0, 1.0))
                    .collect()
            }
            ShotMode::Sampled { shots: 0, .. } => {
                return Err(Error::validation("shot count must be positive"))
            }
            ShotMode::Sampled { shots, stream } => {
                let cdf = BlockCdf::new(psi.len(), |start, end| {
                    (start..end).map(|i| prob(i, sign)).sum()
                });
                let mut rng = SplitMix64::new(stream);
                let samples: Vec<usize> = (0..shots)
                    .map(|_| cdf.draw(rng.next_f64(), |i| prob(i, sign)))
                    .collect();
                sampled_expectations(&samples, n, shots)
            }
        };
    }
    Ok(out)
}

/// `(shots − 2·ones_q) / shots` for every qubit `q`.
fn sampled_expectations(samples: &[usize], n_qubits: usize, shots: u32) -> Vec<f64> {
    let mut ones = vec![0u32; n_qubits];
    for idx in samples {
        for (q, count) in ones.iter_mut().enumerate() {
            *count += ((idx >> q) & 1) as u32;
        }
    }
    let shots_f = f64::from(shots);
    ones.into_iter()
        .map(|minus| (shots_f - 2.0 * f64::from(minus)) / shots_f)
        .collect()
}

/// Cumulative probability at the end of each block of [`SAMPLE_BLOCK`]
/// indices.
struct BlockCdf {
    len: usize,
    ends: Vec<f64>,
}

impl BlockCdf {
    fn new(len: usize, block_sum: impl Fn(usize, usize) -> f64) -> Self {
        let mut total = 0.0;
        let ends = (0..len)
            .step_by(SAMPLE_BLOCK)
            .map(|start| {
                total += block_sum(start, (start + SAMPLE_BLOCK).min(len));
                total
            })
            .collect();
        Self { len, ends }
    }

    /// Index for the uniform `unit ∈ [0, 1)`.
    fn draw(&self, unit: f64, prob: impl Fn(usize) -> f64) -> usize {
        let total = *self.ends.last().expect("state has amplitudes");
        let u = unit * total;
        let block = self.ends.partition_point(|&c| c <= u);
        if block >= self.ends.len() {
            return self.len - 1;
        }
        let start = block * SAMPLE_BLOCK;
        let end = (start + SAMPLE_BLOCK).min(self.len);
        let mut cumulative = if block == 0 { 0.0 } else { self.ends[block - 1] };
        for i in start..end {
            cumulative += prob(i);
            if u < cumulative {
                return i;
            }
        }
        // Rounding between the block sum and the running sum.
        end - 1
    }
}

thread_local! {
    /// Output buffers for out-of-place passes, reused across calls.
    static SPARE: std::cell::RefCell<(Vec<f64>, Vec<f64>)> = const {
        std::cell::RefCell::new((Vec::new(), Vec::new()))
    };
}

/// `runs[i]` counts the consecutive CNOTs starting at `ops[i]`.
fn cnot_run_lengths(ops: &[Op]) -> Vec<usize> {
    let mut runs = vec![0; ops.len() + 1];
    for i in (0..ops.len()).rev() {
        if let Op::Controlled {
            gate: ControlledGate::Cnot,
            ..
        } = ops[i]
        {
            runs[i] = runs[i + 1] + 1;
        }
    }
    runs.truncate(ops.len());
    runs
}

/// Blocks of `2^BLOCK_QUBITS` amplitudes (32 KiB as two `f64` arrays) fit in
/// L1 cache.
pub const BLOCK_QUBITS: usize = 11;

const SAMPLE_BLOCK: usize = 64;

/// A gate with its matrix already evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    Single { u: Mat2, wire: usize },
    Controlled {
        gate: ControlledGate,
        control: usize,
        target: usize,
    },
}

impl Op {
    pub fn max_wire(&self) -> usize {
        match *self {
            Op::Single { wire, .. } => wire,
            Op::Controlled {
                control, target, ..
            } => control.max(target),
        }
    }

    fn apply_to(&self, re: &mut [f64], im: &mut [f64]) {
        match *self {
            Op::Single { ref u, wire } => single_kernel(re, im, u, wire),
            Op::Controlled {
                gate,
                control,
                target,
            } => controlled_kernel(re, im, gate, control, target),
        }
    }
}

/// Per-qubit rotation into the eigenbasis of `obs`.
pub fn basis_rotation_ops(obs: Pauli, n_qubits: usize) -> Vec<Op> {
    let u = match obs {
        Pauli::Z => return Vec::new(),
        Pauli::X => gates::hadamard(),
        Pauli::Y => gates::matmul(&gates::hadamard(), &gates::s_dag()),
    };
    (0..n_qubits).map(|wire| Op::Single { u, wire }).collect()
}

fn single_kernel(re: &mut [f64], im: &mut [f64], u: &Mat2, target: usize) {
    let [[u00, u01], [u10, u11]] = *u;
    if target < 3 && re.len() >= 8 {
        let coeffs = LaneCoeffs::from_fn(|lane| {
            if lane & (1 << target) == 0 {
                (u00, u01)
            } else {
                (u11, u10)
            }
        });
        lane_kernel(re, im, target, &coeffs);
    } else if u01 == ZERO && u10 == ZERO {
        for_each_pair(re, im, target, |ar, br, ai, bi| {
            (*ar, *ai) = (u00.re * *ar - u00.im * *ai, u00.re * *ai + u00.im * *ar);
            (*br, *bi) = (u11.re * *br - u11.im * *bi, u11.re * *bi + u11.im * *br);
        });
    } else if [u00, u01, u10, u11].iter().all(|z| z.im == 0.0) {
        // Real matrices: RY, H.
        let (r00, r01, r10, r11) = (u00.re, u01.re, u10.re, u11.re);
        for_each_pair(re, im, target, |ar, br, ai, bi| {
            (*ar, *br) = (r00 * *ar + r01 * *br, r10 * *ar + r11 * *br);
            (*ai, *bi) = (r00 * *ai + r01 * *bi, r10 * *ai + r11 * *bi);
        });
    } else if u00.im == 0.0 && u11.im == 0.0 && u01.re == 0.0 && u10.re == 0.0 {
        // Real diagonal, imaginary off-diagonal: RX.
        let (d0, d1, o01, o10) = (u00.re, u11.re, u01.im, u10.im);
        for_each_pair(re, im, target, |ar, br, ai, bi| {
            let (xr, xi, yr, yi) = (*ar, *ai, *br, *bi);
            *ar = d0 * xr - o01 * yi;
            *ai = d0 * xi + o01 * yr;
            *br = d1 * yr - o10 * xi;
            *bi = d1 * yi + o10 * xr;
        });
    } else {
        for_each_pair(re, im, target, |ar, br, ai, bi| {
            let (xr, xi, yr, yi) = (*ar, *ai, *br, *bi);
            *ar = u00.re * xr - u00.im * xi + u01.re * yr - u01.im * yi;
            *ai = u00.re * xi + u00.im * xr + u01.re * yi + u01.im * yr;
            *br = u10.re * xr - u10.im * xi + u11.re * yr - u11.im * yi;
            *bi = u10.re * xi + u10.im * xr + u11.re * yi + u11.im * yr;
        });
    }
}

fn controlled_kernel(
    re: &mut [f64],
    im: &mut [f64],
    gate: ControlledGate,
    control: usize,
    target: usize,
) {
    if re.len() < 8 {
        controlled_kernel_scalar(re, im, gate, control, target);
        return;
    }
    let (low, high) = (control.min(target), control.max(target));
    match gate {
        ControlledGate::Cnot if target < 3 && control < 3 => {
            let coeffs = LaneCoeffs::from_fn(|lane| {
                if (lane >> control) & 1 == 1 {
                    (ZERO, ONE)
                } else {
                    (ONE, ZERO)
                }
            });
            lane_kernel(re, im, target, &coeffs);
        }
        ControlledGate::Cnot if target < 3 => {
            let coeffs = LaneCoeffs::from_fn(|_| (ZERO, ONE));
            for_each_run_with_bit(re, im, control, |r, i| lane_kernel(r, i, target, &coeffs));
        }
        ControlledGate::Cnot => {
            controlled_swap(re, control, target);
            controlled_swap(im, control, target);
        }
        ControlledGate::Cz if high < 3 => {
            let coeffs = LaneCoeffs::from_fn(|lane| {
                let sign = if (lane >> low) & (lane >> high) & 1 == 1 { -ONE } else { ONE };
                (sign, ZERO)
            });
            lane_kernel(re, im, 0, &coeffs);
        }
        ControlledGate::Cz if low < 3 => {
            let coeffs = LaneCoeffs::from_fn(|lane| {
                let sign = if (lane >> low) & 1 == 1 { -ONE } else { ONE };
                (sign, ZERO)
            });
            for_each_run_with_bit(re, im, high, |r, i| lane_kernel(r, i, 0, &coeffs));
        }
        ControlledGate::Cz => {
            for_each_run_with_bit(re, im, high, |r, i| {
                for_each_run_with_bit(r, i, low, |r, i| {
                    r.iter_mut().chain(i.iter_mut()).for_each(|v| *v = -*v);
                });
            });
        }
    }
}

/// Reference implementation by index arithmetic, for states too small for
/// the lane kernels.
fn controlled_kernel_scalar(
    re: &mut [f64],
    im: &mut [f64],
    gate: ControlledGate,
    control: usize,
    target: usize,
) {
    let (low, high) = (control.min(target), control.max(target));
    let (cbit, tbit) = (1usize << control, 1usize << target);
    for k in 0..re.len() >> 2 {
        // Insert zero bits at `low` then `high` to enumerate indices with
        // both bits clear.
        let i = insert_zero_bit(insert_zero_bit(k, low), high) | cbit;
        let j = i | tbit;
        match gate {
            ControlledGate::Cnot => {
                re.swap(i, j);
                im.swap(i, j);
            }
            ControlledGate::Cz => {
                re[j] = -re[j];
                im[j] = -im[j];
            }
        }
    }
}

/// Calls `f` on each maximal run of indices with bit `bit` set. Runs are
/// `2^bit` long.
fn for_each_run_with_bit(
    re: &mut [f64],
    im: &mut [f64],
    bit: usize,
    mut f: impl FnMut(&mut [f64], &mut [f64]),
) {
    let run = 1usize << bit;
    for (r, i) in re.chunks_exact_mut(2 * run).zip(im.chunks_exact_mut(2 * run)) {
        f(&mut r[run..], &mut i[run..]);
    }
}

/// Per-lane complex coefficients for `out[l] = d[l]·x[l] + o[l]·x[l ^ S]`
/// over chunks of 8 amplitudes.
struct LaneCoeffs {
    dr: [f64; 8],
    di: [f64; 8],
    or: [f64; 8],
    oi: [f64; 8],
}

impl LaneCoeffs {
    fn from_fn(f: impl Fn(usize) -> (Complex64, Complex64)) -> Self {
        let mut c = LaneCoeffs {
            dr: [0.0; 8],
            di: [0.0; 8],
            or: [0.0; 8],
            oi: [0.0; 8],
        };
        for lane in 0..8 {
            let (d, o) = f(lane);
            (c.dr[lane], c.di[lane], c.or[lane], c.oi[lane]) = (d.re, d.im, o.re, o.im);
        }
        c
    }
}

/// Applies [`LaneCoeffs`] with partner stride `2^bit`, `bit < 3`. Slice
/// lengths must be equal multiples of 8.
fn lane_kernel(re: &mut [f64], im: &mut [f64], bit: usize, c: &LaneCoeffs) {
    debug_assert!(bit < 3 && re.len() == im.len() && re.len() % 8 == 0);
    #[cfg(all(target_arch = "x86_64", target_feature = "avx2", target_feature = "fma"))]
    {
        // SAFETY: the required CPU features are enabled at compile time.
        unsafe { avx2::lane_kernel(re, im, bit, c) }
    }
    #[cfg(not(all(target_arch = "x86_64", target_feature = "avx2", target_feature = "fma")))]
    {
        let s = 1usize << bit;
        for (r, m) in re.chunks_exact_mut(8).zip(im.chunks_exact_mut(8)) {
            let (xr, xi): ([f64; 8], [f64; 8]) = ((&*r).try_into().unwrap(), (&*m).try_into().unwrap());
            for l in 0..8 {
                let (pr, pi) = (xr[l ^ s], xi[l ^ s]);
                r[l] = c.dr[l] * xr[l] - c.di[l] * xi[l] + c.or[l] * pr - c.oi[l] * pi;
                m[l] = c.dr[l] * xi[l] + c.di[l] * xr[l] + c.or[l] * pi + c.oi[l] * pr;
            }
        }
    }
}

#[cfg(all(target_arch = "x86_64", target_feature = "avx2", target_feature = "fma"))]
mod avx2 {
    use std::arch::x86_64::*;

    use super::LaneCoeffs;

    #[inline(always)]
    unsafe fn partner<const BIT: usize>(lo: __m256d, hi: __m256d) -> (__m256d, __m256d) {
        match BIT {
            0 => (_mm256_permute_pd::<0b0101>(lo), _mm256_permute_pd::<0b0101>(hi)),
            1 => (
                _mm256_permute2f128_pd::<0x01>(lo, lo),
                _mm256_permute2f128_pd::<0x01>(hi, hi),
            ),
            _ => (hi, lo),
        }
    }

    #[inline(always)]
    unsafe fn run<const BIT: usize>(re: &mut [f64], im: &mut [f64], c: &LaneCoeffs) {
        let load = |a: &[f64; 8]| (_mm256_loadu_pd(a.as_ptr()), _mm256_loadu_pd(a.as_ptr().add(4)));
        let (dr0, dr1) = load(&c.dr);
        let (di0, di1) = load(&c.di);
        let (or0, or1) = load(&c.or);
        let (oi0, oi1) = load(&c.oi);
        for (r, m) in re.chunks_exact_mut(8).zip(im.chunks_exact_mut(8)) {
            let (rp, mp) = (r.as_mut_ptr(), m.as_mut_ptr());
            let (xr0, xr1) = (_mm256_loadu_pd(rp), _mm256_loadu_pd(rp.add(4)));
            let (xi0, xi1) = (_mm256_loadu_pd(mp), _mm256_loadu_pd(mp.add(4)));
            let (pr0, pr1) = partner::<BIT>(xr0, xr1);
            let (pi0, pi1) = partner::<BIT>(xi0, xi1);
            let out_re = |dr, di, or, oi, xr, xi, pr, pi| {
                let t = _mm256_mul_pd(dr, xr);
                let t = _mm256_fnmadd_pd(di, xi, t);
                let t = _mm256_fmadd_pd(or, pr, t);
                _mm256_fnmadd_pd(oi, pi, t)
            };
            let out_im = |dr, di, or, oi, xr, xi, pr, pi| {
                let t = _mm256_mul_pd(dr, xi);
                let t = _mm256_fmadd_pd(di, xr, t);
                let t = _mm256_fmadd_pd(or, pi, t);
                _mm256_fmadd_pd(oi, pr, t)
            };
            _mm256_storeu_pd(rp, out_re(dr0, di0, or0, oi0, xr0, xi0, pr0, pi0));
            _mm256_storeu_pd(rp.add(4), out_re(dr1, di1, or1, oi1, xr1, xi1, pr1, pi1));
            _mm256_storeu_pd(mp, out_im(dr0, di0, or0, oi0, xr0, xi0, pr0, pi0));
            _mm256_storeu_pd(mp.add(4), out_im(dr1, di1, or1, oi1, xr1, xi1, pr1, pi1));
        }
    }

    pub(super) unsafe fn lane_kernel(re: &mut [f64], im: &mut [f64], bit: usize, c: &LaneCoeffs) {
        match bit {
            0 => run::<0>(re, im, c),
            1 => run::<1>(re, im, c),
            _ => run::<2>(re, im, c),
        }
    }
}

/// Calls `f(a_re, b_re, a_im, b_im)` on every amplitude pair differing only in
/// bit `target`, where `a` has the bit clear.
#[inline(always)]
fn for_each_pair(
    re: &mut [f64],
    im: &mut [f64],
    target: usize,
    mut f: impl FnMut(&mut f64, &mut f64, &mut f64, &mut f64),
) {
    let stride = 1usize << target;
    for (rb, ib) in re
        .chunks_exact_mut(2 * stride)
        .zip(im.chunks_exact_mut(2 * stride))
    {
        let (rl, rh) = rb.split_at_mut(stride);
        let (il, ih) = ib.split_at_mut(stride);
        let (rh, il, ih) = (&mut rh[..rl.len()], &mut il[..rl.len()], &mut ih[..rl.len()]);
        for j in 0..rl.len() {
            f(&mut rl[j], &mut rh[j], &mut il[j], &mut ih[j]);
        }
    }
}

/// Swaps the `target = 0` and `target = 1` entries of every index with the
/// `control` bit set, for one component array.
fn controlled_swap(data: &mut [f64], control: usize, target: usize) {
    let tstride = 1usize << target;
    let cstride = 1usize << control;
    if data.len() >= 8 && control < 3 {
        // Control varies inside each 8-wide chunk: blend the two halves.
        let select: [bool; 8] = std::array::from_fn(|lane| (lane >> control) & 1 == 1);
        for block in data.chunks_exact_mut(2 * tstride) {
            let (lo, hi) = block.split_at_mut(tstride);
            for (l, h) in lo.chunks_exact_mut(8).zip(hi.chunks_exact_mut(8)) {
                for lane in 0..8 {
                    let (a, b) = (l[lane], h[lane]);
                    l[lane] = if select[lane] { b } else { a };
                    h[lane] = if select[lane] { a } else { b };
                }
            }
        }
    } else if control > target {
        // Control is constant across each target block.
        let blocks_per_run = cstride / (2 * tstride);
        for (b, block) in data.chunks_exact_mut(2 * tstride).enumerate() {
            if (b / blocks_per_run) & 1 == 1 {
                let (lo, hi) = block.split_at_mut(tstride);
                lo.swap_with_slice(hi);
            }
        }
    } else {
        // Control varies inside each half in runs of `cstride`.
        for block in data.chunks_exact_mut(2 * tstride) {
            let (lo, hi) = block.split_at_mut(tstride);
            for (l, h) in lo
                .chunks_exact_mut(2 * cstride)
                .zip(hi.chunks_exact_mut(2 * cstride))
            {
                l[cstride..].swap_with_slice(&mut h[cstride..]);
            }
        }
    }
}

#[inline]
fn insert_zero_bit(value: usize, position: usize) -> usize {
    let low_mask = (1usize << position) - 1;
    ((value & !low_mask) << 1) | (value & low_mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    fn random_state(n: usize, seed: u64) -> StateVector {
        let mut rng = SplitMix64::new(seed);
        let mut amps: Vec<Complex64> = (0..1 << n)
            .map(|_| Complex64::new(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)))
            .collect();
        let norm = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        amps.iter_mut().for_each(|a| *a /= norm);
        StateVector::from_amplitudes(amps).unwrap()
    }

    #[test]
    fn zero_state_layout() {
        let s = StateVector::zero(2).unwrap();
        assert_eq!(s.amplitudes(), [ONE, ZERO, ZERO, ZERO]);
        let s = StateVector::zero(1).unwrap();
        assert_eq!(s.amplitudes(), [ONE, ZERO]);
        let s = StateVector::zero(4).unwrap();
        assert_eq!(s.amplitudes().len(), 16);
        assert_eq!(s.amplitudes()[0], ONE);
    }

    #[test]
    fn capacity_limits() {
        assert!(matches!(StateVector::zero(0), Err(Error::Capacity(0))));
        assert!(matches!(StateVector::zero(17), Err(Error::Capacity(17))));
        assert!(StateVector::zero(16).is_ok());
    }

    #[test]
    fn ry_examples() {
        let mut s = StateVector::zero(1).unwrap();
        s.apply_single(&gates::ry(PI), 0).unwrap();
        assert!(close(s.amplitudes()[0], ZERO, 1e-12));
        assert!(close(s.amplitudes()[1], ONE, 1e-12));

        let mut s = StateVector::zero(1).unwrap();
        s.apply_single(&gates::ry(PI / 2.0), 0).unwrap();
        for a in s.amplitudes() {
            assert!((a.re - 0.70711).abs() < 1e-5 && a.im == 0.0);
        }
    }

    #[test]
    fn hadamard_squared_is_identity() {
        let original = random_state(3, 11);
        let mut s = original.clone();
        for q in 0..3 {
            s.apply_single(&gates::hadamard(), q).unwrap();
            s.apply_single(&gates::hadamard(), q).unwrap();
        }
        for (a, b) in s.amplitudes().iter().zip(original.amplitudes()) {
            assert!(close(*a, b, 1e-12));
        }
    }

    #[test]
    fn rejects_non_unitary_and_bad_targets() {
        let mut s = StateVector::zero(2).unwrap();
        let bad = [[ONE, ONE], [ZERO, ONE]];
        assert!(matches!(
            s.apply_single_checked(&bad, 0),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            s.apply_single(&gates::hadamard(), 2),
            Err(Error::QubitIndex { index: 2, .. })
        ));
        assert!(s.apply_controlled(ControlledGate::Cnot, 1, 1).is_err());
        assert!(s.apply_controlled(ControlledGate::Cnot, 0, 5).is_err());
    }

    #[test]
    fn controlled_gate_examples() {
        // |10⟩ with qubit 0 set: index 1.
        let mut amps = vec![ZERO; 4];
        amps[1] = ONE;
        let mut s = StateVector::from_amplitudes(amps).unwrap();
        s.apply_controlled(ControlledGate::Cnot, 0, 1).unwrap();
        assert_eq!(s.amplitudes()[3], ONE);

        let mut s = StateVector::zero(2).unwrap();
        s.apply_controlled(ControlledGate::Cnot, 0, 1).unwrap();
        assert_eq!(s.amplitudes()[0], ONE);

        let mut amps = vec![ZERO; 4];
        amps[3] = ONE;
        let mut s = StateVector::from_amplitudes(amps).unwrap();
        s.apply_controlled(ControlledGate::Cz, 0, 1).unwrap();
        assert_eq!(s.amplitudes()[3], -ONE);
    }

    #[test]
    fn controlled_gates_match_index_definition() {
        let n = 5;
        let original = random_state(n, 5);
        let before = original.amplitudes();
        for c in 0..n {
            for t in (0..n).filter(|&t| t != c) {
                let mut s = original.clone();
                s.apply_controlled(ControlledGate::Cnot, c, t).unwrap();
                let after = s.amplitudes();
                for i in 0..1usize << n {
                    let src = if (i >> c) & 1 == 1 { i ^ (1 << t) } else { i };
                    assert_eq!(after[i], before[src], "CNOT({c},{t}) at {i}");
                }

                let mut s = original.clone();
                s.apply_controlled(ControlledGate::Cz, c, t).unwrap();
                let after = s.amplitudes();
                for i in 0..1usize << n {
                    let sign = if (i >> c) & (i >> t) & 1 == 1 { -1.0 } else { 1.0 };
                    assert_eq!(after[i], before[i] * sign, "CZ({c},{t}) at {i}");
                }
            }
        }
    }

    /// Textbook pairwise application, used as an oracle for the kernels.
    fn apply_reference(amps: &[Complex64], u: &Mat2, target: usize) -> Vec<Complex64> {
        let bit = 1usize << target;
        let mut out = amps.to_vec();
        for i in (0..amps.len()).filter(|i| i & bit == 0) {
            let (x, y) = (amps[i], amps[i | bit]);
            out[i] = u[0][0] * x + u[0][1] * y;
            out[i | bit] = u[1][0] * x + u[1][1] * y;
        }
        out
    }

    #[test]
    fn kernels_match_reference() {
        let n = 6;
        let original = random_state(n, 41);
        let matrices = [
            gates::rx(0.7),
            gates::ry(-1.3),
            gates::rz(2.1),
            gates::rot(0.4, 1.9, -0.8),
            gates::hadamard(),
            gates::s_dag(),
            Pauli::Y.matrix(),
        ];
        for u in &matrices {
            for t in 0..n {
                let mut s = original.clone();
                s.apply_single(u, t).unwrap();
                let expected = apply_reference(&original.amplitudes(), u, t);
                for (a, b) in s.amplitudes().iter().zip(&expected) {
                    assert!(close(*a, *b, 1e-14));
                }
            }
        }
    }

    #[test]
    fn expectation_examples() {
        let zero = StateVector::zero(1).unwrap();
        assert_eq!(zero.expectation(Pauli::Z, 0).unwrap(), 1.0);
        assert_eq!(zero.expectation(Pauli::Y, 0).unwrap(), 0.0);
        let mut plus = zero.clone();
        plus.apply_single(&gates::hadamard(), 0).unwrap();
        assert!((plus.expectation(Pauli::X, 0).unwrap() - 1.0).abs() < 1e-12);
        assert!(zero.expectation(Pauli::Z, 1).is_err());
    }

    #[test]
    fn expectation_matches_dense_operator() {
        let s = random_state(3, 99);
        for obs in Pauli::ALL {
            let m = obs.matrix();
            for q in 0..3 {
                let mut applied = s.clone();
                applied.apply_single(&m, q).unwrap();
                let direct: Complex64 = s
                    .amplitudes()
                    .iter()
                    .zip(applied.amplitudes())
                    .map(|(a, b)| a.conj() * b)
                    .sum();
                assert!(direct.im.abs() < 1e-10);
                let fast = s.expectation(obs, q).unwrap();
                assert!((direct.re - fast).abs() < 1e-12, "{obs} q{q}");
            }
        }
    }

    #[test]
    fn sampled_examples() {
        let mut plus = StateVector::zero(1).unwrap();
        plus.apply_single(&gates::hadamard(), 0).unwrap();
        let exact = plus.expectation_all(Pauli::Z, ShotMode::Analytic).unwrap();
        assert!(exact[0].abs() < 1e-12);

        let mode = ShotMode::Sampled {
            shots: 1024,
            stream: 3,
        };
        let v = plus.expectation_all(Pauli::Z, mode).unwrap()[0];
        assert!((-1.0..=1.0).contains(&v));
        assert_eq!((v * 1024.0).round() as i64 % 2, 0);

        let zero = StateVector::zero(4).unwrap();
        let mode = ShotMode::Sampled {
            shots: 100,
            stream: 1,
        };
        assert_eq!(zero.expectation_all(Pauli::Z, mode).unwrap(), vec![1.0; 4]);

        let mode = ShotMode::Sampled {
            shots: 0,
            stream: 1,
        };
        assert!(zero.expectation_all(Pauli::Z, mode).is_err());
    }

    #[test]
    fn sampler_matches_inverse_cdf() {
        // 8 qubits spans several sampling blocks.
        let s = random_state(8, 21);
        let mut rng = SplitMix64::new(8);
        let got = s.sample_indices(2000, &mut rng);

        let probs = s.probabilities();
        let mut cdf = Vec::new();
        let mut acc = 0.0;
        for p in &probs {
            acc += p;
            cdf.push(acc);
        }
        let mut rng = SplitMix64::new(8);
        for g in got {
            let u = rng.next_f64() * acc;
            let expected = cdf.partition_point(|&c| c <= u).min(probs.len() - 1);
            if g != expected {
                // Only a draw within rounding of a boundary may differ.
                let boundary = cdf[g.min(expected)];
                assert!((u - boundary).abs() < 1e-12, "draw {u}: {g} vs {expected}");
            }
        }
    }

    #[test]
    fn fused_cnot_runs_match_sequential_application() {
        for n in [2, 5, 9, 13] {
            let original = random_state(n, 3 + n as u64);
            let mut ops = vec![Op::Single { u: gates::ry(0.3), wire: 0 }];
            for r in 1..n.min(4) {
                for wire in 0..n {
                    ops.push(Op::Controlled {
                        gate: ControlledGate::Cnot,
                        control: wire,
                        target: (wire + r) % n,
                    });
                }
            }
            let mut fused = original.clone();
            fused.apply_ops(&ops);
            let mut sequential = original.clone();
            for op in &ops {
                sequential.apply_ops(std::slice::from_ref(op));
            }
            assert_eq!(fused, sequential, "{n} qubits");
        }
    }

    #[test]
    fn blocked_ops_match_sequential_application() {
        let n = BLOCK_QUBITS + 2;
        let original = random_state(n, 77);
        let mut ops = Vec::new();
        for wire in 0..n {
            ops.push(Op::Single { u: gates::rot(0.3 * wire as f64, 1.1, -0.4), wire });
            ops.push(Op::Controlled { gate: ControlledGate::Cnot, control: wire, target: (wire + 1) % n });
            ops.push(Op::Controlled { gate: ControlledGate::Cz, control: (wire + 3) % n, target: wire });
        }
        let mut blocked = original.clone();
        blocked.apply_ops(&ops);
        let mut sequential = original.clone();
        for op in &ops {
            match *op {
                Op::Single { ref u, wire } => sequential.apply_single(u, wire).unwrap(),
                Op::Controlled { gate, control, target } => {
                    sequential.apply_controlled(gate, control, target).unwrap()
                }
            }
        }
        assert_eq!(blocked, sequential);
    }

    #[test]
    fn y_basis_rotation_reads_plus_i_as_plus_one() {
        let mut s = StateVector::zero(1).unwrap();
        s.apply_single(&gates::hadamard(), 0).unwrap();
        s.apply_single(&[[ONE, ZERO], [ZERO, Complex64::new(0.0, 1.0)]], 0)
            .unwrap();
        let mode = ShotMode::Sampled {
            shots: 50,
            stream: 9,
        };
        assert_eq!(s.expectation_all(Pauli::Y, mode).unwrap(), vec![1.0]);
        assert!((s.expectation(Pauli::Y, 0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rot_is_rz_ry_rz_product() {
        let (phi, theta, omega) = (0.3, -1.1, 2.4);
        let expected = gates::matmul(
            &gates::rz(omega),
            &gates::matmul(&gates::ry(theta), &gates::rz(phi)),
        );
        let got = gates::rot(phi, theta, omega);
        for i in 0..2 {
            for j in 0..2 {
                assert!(close(got[i][j], expected[i][j], 1e-14));
            }
        }
        assert!(gates::is_unitary(&gates::rx(0.7), 1e-12));
    }
}
