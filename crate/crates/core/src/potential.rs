//! The code potential energy
//!
//! ```text
//! h(x) = alpha * sum_j (x_j^2 - 1)^2 + beta * sum_i (Q_i - 1)^2,   Q_i = prod_{j in A(i)} x_j
//! ```
//!
//! which is nonnegative and vanishes exactly on bipolar codewords, together
//! with its gradient and Hessian-vector products.
//!
//! Two gradient routes are provided. [`grad_direct`] evaluates the
//! closed-form partial derivatives with leave-one-out products and is the
//! production path. [`grad_tensor`] evaluates the same vector using only
//! matrix-vector products with `H`, `H^T` and component-wise complex
//! `ln`/`exp`, which is the form suited to batched tensor hardware. The two
//! must agree to rounding on nonsingular inputs.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::code::ParityCheckMatrix;
use crate::error::{check_len, Error, Result};

/// Weights of the bipolar and parity terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PotentialParams {
    pub alpha: f64,
    pub beta: f64,
}

impl PotentialParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "potential weights must be nonnegative, got alpha={alpha}, beta={beta}"
            )));
        }
        Ok(PotentialParams { alpha, beta })
    }
}

impl Default for PotentialParams {
    fn default() -> Self {
        PotentialParams {
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

/// Row products `Q_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyndromeProducts(pub Vec<f64>);

/// Direct row products.
pub fn syndrome_products(x: &[f64], h: &ParityCheckMatrix) -> Result<SyndromeProducts> {
    check_len(h.n(), x.len())?;
    Ok(SyndromeProducts(
        h.rows()
            .iter()
            .map(|r| r.iter().map(|&j| x[j]).product())
            .collect(),
    ))
}

/// Row products through `exp(H ln x)` in complex arithmetic.
pub fn syndrome_products_log(x: &[f64], h: &ParityCheckMatrix) -> Result<SyndromeProducts> {
    check_len(h.n(), x.len())?;
    let z: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0).ln()).collect();
    Ok(SyndromeProducts(
        h.rows()
            .iter()
            .map(|r| r.iter().map(|&j| z[j]).sum::<Complex64>().exp().re)
            .collect(),
    ))
}

pub fn code_energy(x: &[f64], h: &ParityCheckMatrix, p: PotentialParams) -> Result<f64> {
    check_len(h.n(), x.len())?;
    let bipolar: f64 = x.iter().map(|&v| (v * v - 1.0).powi(2)).sum();
    let parity: f64 = h
        .rows()
        .iter()
        .map(|r| (r.iter().map(|&j| x[j]).product::<f64>() - 1.0).powi(2))
        .sum();
    Ok(p.alpha * bipolar + p.beta * parity)
}

/// Reusable buffer for leave-one-out products.
#[derive(Debug, Default, Clone)]
pub struct Scratch {
    vals: Vec<f64>,
    prefix: Vec<f64>,
    loo: Vec<f64>,
}

/// Fills `loo[t]` with the product of `vals` except position `t`,
/// returning the full product.
fn leave_one_out(vals: &[f64], prefix: &mut Vec<f64>, loo: &mut Vec<f64>) -> f64 {
    let d = vals.len();
    prefix.clear();
    loo.clear();
    let mut acc = 1.0;
    for &v in vals {
        prefix.push(acc);
        acc *= v;
    }
    loo.resize(d, 0.0);
    let mut suffix = 1.0;
    for t in (0..d).rev() {
        loo[t] = prefix[t] * suffix;
        suffix *= vals[t];
    }
    acc
}

/// Writes the two gradient components separately: `bipolar` gets
/// `4 x (x^2 - 1)` (weight one) and `parity` gets
/// `2 sum_{i in B(k)} (Q_i - 1) prod_{j in A(i)\k} x_j` (weight one).
pub fn grad_parts_into(
    x: &[f64],
    h: &ParityCheckMatrix,
    bipolar: &mut [f64],
    parity: &mut [f64],
    scratch: &mut Scratch,
) {
    debug_assert_eq!(x.len(), h.n());
    for (b, &v) in bipolar.iter_mut().zip(x) {
        *b = 4.0 * v * (v * v - 1.0);
    }
    parity.fill(0.0);
    for row in h.rows() {
        scratch.vals.clear();
        scratch.vals.extend(row.iter().map(|&j| x[j]));
        let q = leave_one_out(&scratch.vals, &mut scratch.prefix, &mut scratch.loo);
        let c = 2.0 * (q - 1.0);
        for (t, &j) in row.iter().enumerate() {
            parity[j] += c * scratch.loo[t];
        }
    }
}

/// Gradient into a caller-provided buffer; `tmp` must have length `n`.
pub fn grad_into(
    x: &[f64],
    h: &ParityCheckMatrix,
    p: PotentialParams,
    out: &mut [f64],
    tmp: &mut [f64],
    scratch: &mut Scratch,
) {
    grad_parts_into(x, h, out, tmp, scratch);
    for (o, &t) in out.iter_mut().zip(tmp.iter()) {
        *o = p.alpha * *o + p.beta * t;
    }
}

/// Closed-form gradient of the code potential energy.
pub fn grad_direct(x: &[f64], h: &ParityCheckMatrix, p: PotentialParams) -> Result<Vec<f64>> {
    check_len(h.n(), x.len())?;
    let mut out = vec![0.0; x.len()];
    let mut tmp = vec![0.0; x.len()];
    grad_into(x, h, p, &mut out, &mut tmp, &mut Scratch::default());
    Ok(out)
}

/// Hessian-vector products of the two potential components (weight one
/// each), written to `bipolar` and `parity`.
pub fn hessian_vec_parts_into(
    x: &[f64],
    v: &[f64],
    h: &ParityCheckMatrix,
    bipolar: &mut [f64],
    parity: &mut [f64],
    scratch: &mut Scratch,
) {
    for ((b, &xi), &vi) in bipolar.iter_mut().zip(x).zip(v) {
        *b = (12.0 * xi * xi - 4.0) * vi;
    }
    parity.fill(0.0);
    let mut vals = Vec::new();
    let mut rest = Vec::new();
    let mut rest_v = Vec::new();
    let mut prefix = Vec::new();
    let mut dloo = Vec::new();
    for row in h.rows() {
        vals.clear();
        vals.extend(row.iter().map(|&j| x[j]));
        let q = leave_one_out(&vals, &mut scratch.prefix, &mut scratch.loo);
        // directional derivative of Q_i along v
        let dq: f64 = row.iter().zip(&scratch.loo).map(|(&j, &l)| l * v[j]).sum();
        for (t, &jt) in row.iter().enumerate() {
            // directional derivative of the leave-t-out product along v
            rest.clear();
            rest_v.clear();
            for (s, &js) in row.iter().enumerate().filter(|&(s, _)| s != t) {
                rest.push(vals[s]);
                rest_v.push(v[js]);
            }
            leave_one_out(&rest, &mut prefix, &mut dloo);
            let dl: f64 = dloo.iter().zip(&rest_v).map(|(a, b)| a * b).sum();
            parity[jt] += 2.0 * (scratch.loo[t] * dq + (q - 1.0) * dl);
        }
    }
}

/// `(nabla^2 h) v`.
pub fn hessian_vec(
    x: &[f64],
    v: &[f64],
    h: &ParityCheckMatrix,
    p: PotentialParams,
) -> Result<Vec<f64>> {
    check_len(h.n(), x.len())?;
    check_len(h.n(), v.len())?;
    let mut b = vec![0.0; x.len()];
    let mut q = vec![0.0; x.len()];
    hessian_vec_parts_into(x, v, h, &mut b, &mut q, &mut Scratch::default());
    Ok(b.iter().zip(&q).map(|(b, q)| p.alpha * b + p.beta * q).collect())
}

/// Inputs within this distance of `0` or `+-1` take the direct route in
/// [`grad_tensor`].
pub const SINGULAR_GUARD: f64 = 1e-12;

/// Result of the log-domain gradient evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorGradient {
    pub grad: Vec<f64>,
    /// True when a singular input forced the direct formula.
    pub fallback: bool,
    /// Largest discarded imaginary magnitude.
    pub max_imag: f64,
}

fn is_singular(x: &[f64]) -> bool {
    x.iter().any(|&v| {
        v.abs() < SINGULAR_GUARD
            || (v - 1.0).abs() < SINGULAR_GUARD
            || (v + 1.0).abs() < SINGULAR_GUARD
    })
}

fn check_imag(grad_re: &[f64], max_imag: f64) -> Result<()> {
    let max_re = grad_re.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-8 * (1.0 + max_re);
    if max_imag < tol {
        Ok(())
    } else {
        Err(Error::ImaginaryResidual { imag: max_imag, tol })
    }
}

/// Gradient through `4a exp(z_- + z + z_+) + 2b exp(w - z)` with
/// `z = ln x`, `z_-+ = ln(x -+ 1)` and `w = ln(H^T (exp(2Hz) - exp(Hz)))`,
/// all in principal-branch complex arithmetic.
pub fn grad_tensor(x: &[f64], h: &ParityCheckMatrix, p: PotentialParams) -> Result<TensorGradient> {
    check_len(h.n(), x.len())?;
    if is_singular(x) {
        return Ok(TensorGradient {
            grad: grad_direct(x, h, p)?,
            fallback: true,
            max_imag: 0.0,
        });
    }
    let c = |v: f64| Complex64::new(v, 0.0);
    let z: Vec<Complex64> = x.iter().map(|&v| c(v).ln()).collect();
    let hz: Vec<Complex64> = h
        .rows()
        .iter()
        .map(|r| r.iter().map(|&j| z[j]).sum())
        .collect();
    let diff: Vec<Complex64> = hz.iter().map(|&s| (2.0 * s).exp() - s.exp()).collect();
    let mut grad = Vec::with_capacity(x.len());
    let mut max_imag = 0.0f64;
    for (k, &xk) in x.iter().enumerate() {
        let zm = c(xk - 1.0).ln();
        let zp = c(xk + 1.0).ln();
        let ht: Complex64 = h.col(k).iter().map(|&i| diff[i]).sum();
        let w = ht.ln();
        let g = 4.0 * p.alpha * (zm + z[k] + zp).exp() + 2.0 * p.beta * (w - z[k]).exp();
        max_imag = max_imag.max(g.im.abs());
        grad.push(g.re);
    }
    check_imag(&grad, max_imag)?;
    Ok(TensorGradient {
        grad,
        fallback: false,
        max_imag,
    })
}

/// Batched closed-form gradients, one state per column of `xs` (`n x D`).
pub fn grad_direct_batch(
    xs: &DMatrix<f64>,
    h: &ParityCheckMatrix,
    p: PotentialParams,
) -> Result<DMatrix<f64>> {
    check_len(h.n(), xs.nrows())?;
    let cols: Vec<Vec<f64>> = crate::par::map_collect((0..xs.ncols()).collect(), |&c| {
        let col: Vec<f64> = xs.column(c).iter().copied().collect();
        grad_direct(&col, h, p).expect("column length checked")
    });
    Ok(DMatrix::from_fn(xs.nrows(), xs.ncols(), |r, c| cols[c][r]))
}

/// Batched log-domain gradients with dense `H Z` and `H^T (...)` products,
/// one state per column of `xs`. Columns containing a singular entry are
/// evaluated with the direct formula; the returned flag lists them.
pub fn grad_tensor_batch(
    xs: &DMatrix<f64>,
    h: &ParityCheckMatrix,
    p: PotentialParams,
) -> Result<(DMatrix<f64>, Vec<bool>)> {
    check_len(h.n(), xs.nrows())?;
    let (n, d) = (xs.nrows(), xs.ncols());
    let hd = DMatrix::<Complex64>::from_fn(h.m(), n, |i, j| {
        Complex64::new(if h.row(i).binary_search(&j).is_ok() { 1.0 } else { 0.0 }, 0.0)
    });
    let fallback: Vec<bool> = (0..d)
        .map(|c| is_singular(xs.column(c).as_slice()))
        .collect();
    let z = xs.map(|v| Complex64::new(v, 0.0).ln());
    let hz = &hd * &z;
    let diff = hz.map(|s| (2.0 * s).exp() - s.exp());
    let w = (hd.transpose() * diff).map(|v| v.ln());
    let mut out = DMatrix::<f64>::zeros(n, d);
    let mut max_imag = 0.0f64;
    for c in 0..d {
        if fallback[c] {
            let col: Vec<f64> = xs.column(c).iter().copied().collect();
            out.set_column(c, &nalgebra::DVector::from_vec(grad_direct(&col, h, p)?));
            continue;
        }
        for r in 0..n {
            let xk = xs[(r, c)];
            let zm = Complex64::new(xk - 1.0, 0.0).ln();
            let zp = Complex64::new(xk + 1.0, 0.0).ln();
            let g = 4.0 * p.alpha * (zm + z[(r, c)] + zp).exp()
                + 2.0 * p.beta * (w[(r, c)] - z[(r, c)]).exp();
            max_imag = max_imag.max(g.im.abs());
            out[(r, c)] = g.re;
        }
    }
    check_imag(out.as_slice(), max_imag)?;
    Ok((out, fallback))
}
