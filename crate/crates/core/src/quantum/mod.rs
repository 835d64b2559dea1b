//! Exact statevector simulation of the patch circuit.
//!
//! Basis ordering: qubit 0 is the most significant bit, so `|1000>` is the
//! state with qubit 0 set (index 8 for four qubits).
//!
//! Circuit layout for `n` qubits and `L` variational layers:
//!
//! ```text
//! |0..0> -> RY(x_i) on every qubit i            (angle encoding)
//!        -> L x [ RY(theta_{l,i}) on every qubit i, CNOT ring i -> i+1 mod n ]
//!        -> <Z_q> on the observable qubit q
//! ```
//!
//! Every parameter (inputs and thetas) enters through exactly one RY gate,
//! so the two-term shift rule with shift pi/2 is exact for all of them.

pub mod reference;

use std::f64::consts::FRAC_PI_2;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_QUBITS: usize = 8;
const NORM_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    n_qubits: usize,
    amps: Vec<Complex64>,
}

impl StateVector {
    /// `|0...0>` on `n_qubits` qubits.
    pub fn zero(n_qubits: usize) -> Result<Self> {
        Self::basis(n_qubits, 0)
    }

    pub fn basis(n_qubits: usize, index: usize) -> Result<Self> {
        if n_qubits == 0 || n_qubits > MAX_QUBITS {
            return Err(Error::Config(format!("qubit count must be in 1..={MAX_QUBITS}, got {n_qubits}")));
        }
        let dim = 1usize << n_qubits;
        if index >= dim {
            return Err(Error::Index(format!("basis index {index} for {n_qubits} qubits")));
        }
        let mut amps = vec![Complex64::new(0.0, 0.0); dim];
        amps[index] = Complex64::new(1.0, 0.0);
        Ok(Self { n_qubits, amps })
    }

    pub fn from_amplitudes(amps: Vec<Complex64>) -> Result<Self> {
        let n = amps.len().trailing_zeros() as usize;
        if !amps.len().is_power_of_two() || n == 0 || n > MAX_QUBITS {
            return Err(Error::Dimension(format!("{} amplitudes is not a 2^n register", amps.len())));
        }
        Ok(Self { n_qubits: n, amps })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    fn mask(&self, qubit: usize) -> usize {
        1 << (self.n_qubits - 1 - qubit)
    }

    fn check_qubit(&self, qubit: usize) -> Result<()> {
        if qubit >= self.n_qubits {
            return Err(Error::Index(format!("qubit {qubit} on a {}-qubit register", self.n_qubits)));
        }
        Ok(())
    }

    /// `RY(theta) = [[cos t/2, -sin t/2], [sin t/2, cos t/2]]` on `qubit`.
    pub fn apply_ry(&mut self, qubit: usize, theta: f64) -> Result<()> {
        self.check_qubit(qubit)?;
        let (s, c) = (theta / 2.0).sin_cos();
        let m = self.mask(qubit);
        for i in 0..self.amps.len() {
            if i & m == 0 {
                let (a0, a1) = (self.amps[i], self.amps[i | m]);
                self.amps[i] = a0 * c - a1 * s;
                self.amps[i | m] = a0 * s + a1 * c;
            }
        }
        Ok(())
    }

    /// Flips `target` on basis states whose `control` bit is set.
    pub fn apply_cnot(&mut self, control: usize, target: usize) -> Result<()> {
        self.check_qubit(control)?;
        self.check_qubit(target)?;
        if control == target {
            return Err(Error::Contract(format!("CNOT control and target are both qubit {control}")));
        }
        let (cm, tm) = (self.mask(control), self.mask(target));
        for i in 0..self.amps.len() {
            if i & cm != 0 && i & tm == 0 {
                self.amps.swap(i, i | tm);
            }
        }
        Ok(())
    }

    /// Exact `<Z>` on `qubit`: `sum_i (+1 if bit clear else -1) |a_i|^2`.
    pub fn expectation_z(&self, qubit: usize) -> Result<f64> {
        self.check_qubit(qubit)?;
        let norm = self.norm_sqr();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::Contract(format!("expectation on an unnormalized state (norm^2 = {norm})")));
        }
        let m = self.mask(qubit);
        Ok(self
            .amps
            .iter()
            .enumerate()
            .map(|(i, a)| if i & m == 0 { a.norm_sqr() } else { -a.norm_sqr() })
            .sum())
    }
}

pub fn apply_ry(mut state: StateVector, qubit: usize, theta: f64) -> Result<StateVector> {
    state.apply_ry(qubit, theta)?;
    Ok(state)
}

pub fn apply_cnot(mut state: StateVector, control: usize, target: usize) -> Result<StateVector> {
    state.apply_cnot(control, target)?;
    Ok(state)
}

pub fn expectation_z0(state: &StateVector) -> Result<f64> {
    state.expectation_z(0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Entangler {
    /// CNOT i -> (i+1) mod n for every qubit i; nothing for one qubit.
    Ring,
    None,
}

/// Architecture of the patch circuit, without trainable values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircuitLayout {
    pub n_qubits: usize,
    pub n_layers: usize,
    pub entangler: Entangler,
    pub observable_qubit: usize,
}

impl Default for CircuitLayout {
    fn default() -> Self {
        Self {
            n_qubits: 4,
            n_layers: 2,
            entangler: Entangler::Ring,
            observable_qubit: 0,
        }
    }
}

impl CircuitLayout {
    pub fn n_theta(&self) -> usize {
        self.n_qubits * self.n_layers
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_qubits == 0 || self.n_qubits > MAX_QUBITS {
            return Err(Error::Config(format!("circuit.n_qubits must be in 1..={MAX_QUBITS}")));
        }
        if self.observable_qubit >= self.n_qubits {
            return Err(Error::Config(format!(
                "circuit.observable_qubit {} out of range for {} qubits",
                self.observable_qubit, self.n_qubits
            )));
        }
        Ok(())
    }

    fn cnot_pairs(&self) -> Vec<(usize, usize)> {
        match self.entangler {
            Entangler::Ring if self.n_qubits > 1 => (0..self.n_qubits).map(|i| (i, (i + 1) % self.n_qubits)).collect(),
            _ => Vec::new(),
        }
    }
}

/// A circuit layout together with its trainable angles (radians), ordered
/// layer-major: `theta[l * n_qubits + i]` rotates qubit `i` in layer `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct CircuitSpec {
    pub layout: CircuitLayout,
    pub theta: Vec<f64>,
}

impl CircuitSpec {
    pub fn new(layout: CircuitLayout, theta: Vec<f64>) -> Result<Self> {
        layout.validate()?;
        if theta.len() != layout.n_theta() {
            return Err(Error::Contract(format!(
                "circuit expects {} trainable angles, got {}",
                layout.n_theta(),
                theta.len()
            )));
        }
        if let Some(bad) = theta.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("circuit angle {bad}")));
        }
        Ok(Self { layout, theta })
    }

    /// Statevector after encoding `inputs` and applying every layer.
    pub fn run(&self, inputs: &[f64]) -> Result<StateVector> {
        let n = self.layout.n_qubits;
        if inputs.len() != n {
            return Err(Error::Contract(format!("circuit expects {n} input angles, got {}", inputs.len())));
        }
        if let Some(bad) = inputs.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("input angle {bad}")));
        }
        let mut state = StateVector::zero(n)?;
        for (q, &a) in inputs.iter().enumerate() {
            state.apply_ry(q, a)?;
        }
        let pairs = self.layout.cnot_pairs();
        for layer in self.theta.chunks(n) {
            for (q, &t) in layer.iter().enumerate() {
                state.apply_ry(q, t)?;
            }
            for &(c, t) in &pairs {
                state.apply_cnot(c, t)?;
            }
        }
        Ok(state)
    }

    /// `<Z>` on the observable qubit.
    pub fn expectation(&self, inputs: &[f64]) -> Result<f64> {
        self.run(inputs)?.expectation_z(self.layout.observable_qubit)
    }
}

pub fn run_circuit(spec: &CircuitSpec, inputs: &[f64]) -> Result<StateVector> {
    spec.run(inputs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftGradient {
    pub value: f64,
    pub d_inputs: Vec<f64>,
    pub d_theta: Vec<f64>,
    /// Circuit executions spent, including the unshifted one.
    pub evaluations: usize,
}

/// `d<Z>/d angle = (E(angle + pi/2) - E(angle - pi/2)) / 2` for every input
/// angle and every trainable angle.
pub fn parameter_shift_grad(spec: &CircuitSpec, inputs: &[f64]) -> Result<ShiftGradient> {
    let value = spec.expectation(inputs)?;
    let mut evaluations = 1;
    let mut shifted_inputs = inputs.to_vec();
    let mut d_inputs = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        shifted_inputs[i] = inputs[i] + FRAC_PI_2;
        let up = spec.expectation(&shifted_inputs)?;
        shifted_inputs[i] = inputs[i] - FRAC_PI_2;
        let down = spec.expectation(&shifted_inputs)?;
        shifted_inputs[i] = inputs[i];
        d_inputs.push((up - down) / 2.0);
        evaluations += 2;
    }
    let mut shifted = spec.clone();
    let mut d_theta = Vec::with_capacity(spec.theta.len());
    for i in 0..spec.theta.len() {
        shifted.theta[i] = spec.theta[i] + FRAC_PI_2;
        let up = shifted.expectation(inputs)?;
        shifted.theta[i] = spec.theta[i] - FRAC_PI_2;
        let down = shifted.expectation(inputs)?;
        shifted.theta[i] = spec.theta[i];
        d_theta.push((up - down) / 2.0);
        evaluations += 2;
    }
    Ok(ShiftGradient {
        value,
        d_inputs,
        d_theta,
        evaluations,
    })
}

#[cfg(test)]
mod tests;
