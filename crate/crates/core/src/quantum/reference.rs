//! Dense-matrix reference simulator used to verify the statevector path.
//!
//! Every gate is expanded to a full `2^n x 2^n` matrix by Kronecker products
//! of single-qubit factors (qubit 0 leftmost), the circuit unitary is the
//! ordered matrix product, and the state is its first column.

use num_complex::Complex64;

use super::{CircuitSpec, Entangler};
use crate::error::{Error, Result};

type Mat = Vec<Vec<Complex64>>;

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

fn identity(dim: usize) -> Mat {
    (0..dim)
        .map(|i| (0..dim).map(|j| if i == j { c(1.0) } else { c(0.0) }).collect())
        .collect()
}

fn kron(a: &Mat, b: &Mat) -> Mat {
    let (ra, rb) = (a.len(), b.len());
    let mut out = vec![vec![c(0.0); ra * rb]; ra * rb];
    for i in 0..ra {
        for j in 0..ra {
            for k in 0..rb {
                for l in 0..rb {
                    out[i * rb + k][j * rb + l] = a[i][j] * b[k][l];
                }
            }
        }
    }
    out
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = a.len();
    let mut out = vec![vec![c(0.0); n]; n];
    for i in 0..n {
        for k in 0..n {
            if a[i][k] == c(0.0) {
                continue;
            }
            for j in 0..n {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect())
        .collect()
}

/// Kronecker product of per-qubit 2x2 factors; missing qubits get identity.
fn embed(n: usize, factors: &[(usize, Mat)]) -> Mat {
    let mut out = vec![vec![c(1.0)]];
    for q in 0..n {
        let f = factors
            .iter()
            .find(|(k, _)| *k == q)
            .map(|(_, m)| m.clone())
            .unwrap_or_else(|| identity(2));
        out = kron(&out, &f);
    }
    out
}

pub fn ry_matrix(n: usize, qubit: usize, theta: f64) -> Mat {
    let (s, co) = (theta / 2.0).sin_cos();
    let ry = vec![vec![c(co), c(-s)], vec![c(s), c(co)]];
    embed(n, &[(qubit, ry)])
}

/// `|0><0|_c (x) I + |1><1|_c (x) X_t`
pub fn cnot_matrix(n: usize, control: usize, target: usize) -> Mat {
    let p0 = vec![vec![c(1.0), c(0.0)], vec![c(0.0), c(0.0)]];
    let p1 = vec![vec![c(0.0), c(0.0)], vec![c(0.0), c(1.0)]];
    let x = vec![vec![c(0.0), c(1.0)], vec![c(1.0), c(0.0)]];
    add(&embed(n, &[(control, p0)]), &embed(n, &[(control, p1), (target, x)]))
}

fn z_matrix(n: usize, qubit: usize) -> Mat {
    let z = vec![vec![c(1.0), c(0.0)], vec![c(0.0), c(-1.0)]];
    embed(n, &[(qubit, z)])
}

/// Full circuit unitary, gates applied in the same order as
/// [`CircuitSpec::run`].
pub fn circuit_unitary(spec: &CircuitSpec, inputs: &[f64]) -> Result<Mat> {
    let n = spec.layout.n_qubits;
    if inputs.len() != n {
        return Err(Error::Contract(format!("expected {n} inputs, got {}", inputs.len())));
    }
    let mut u = identity(1 << n);
    let mut apply = |g: Mat| u = matmul(&g, &u);
    for (q, &a) in inputs.iter().enumerate() {
        apply(ry_matrix(n, q, a));
    }
    for layer in spec.theta.chunks(n) {
        for (q, &t) in layer.iter().enumerate() {
            apply(ry_matrix(n, q, t));
        }
        if spec.layout.entangler == Entangler::Ring && n > 1 {
            for q in 0..n {
                apply(cnot_matrix(n, q, (q + 1) % n));
            }
        }
    }
    Ok(u)
}

/// Final amplitudes: the first column of the circuit unitary.
pub fn amplitudes(spec: &CircuitSpec, inputs: &[f64]) -> Result<Vec<Complex64>> {
    let u = circuit_unitary(spec, inputs)?;
    Ok(u.iter().map(|row| row[0]).collect())
}

/// `<psi| Z_q |psi>` with the observable as a dense matrix.
pub fn expectation(spec: &CircuitSpec, inputs: &[f64]) -> Result<f64> {
    let psi = amplitudes(spec, inputs)?;
    let z = z_matrix(spec.layout.n_qubits, spec.layout.observable_qubit);
    let mut acc = c(0.0);
    for (i, row) in z.iter().enumerate() {
        for (j, zij) in row.iter().enumerate() {
            acc += psi[i].conj() * zij * psi[j];
        }
    }
    Ok(acc.re)
}
