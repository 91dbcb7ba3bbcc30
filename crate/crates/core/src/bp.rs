//! Belief-propagation baselines.
//!
//! [`bp_decode`] is a log-domain sum-product decoder over adjacency lists.
//! [`bp_tensor_decode`] runs the same flooding schedule written as dense
//! matrix products over the edge-incidence matrices `U` and `V`. Both use the
//! same message clamps, so their message arrays agree to rounding.
//!
//! LLRs are `log p(x=+1)/p(x=-1)`; positive means bit 0.

use nalgebra::{DMatrix, DVector};

use crate::channel::{mmse_estimate, MimoChannel};
use crate::code::{sign_decision, BipolarWord, ParityCheckMatrix};
use crate::error::{check_len, Error, Result};

/// Variable-to-check messages are clamped to this magnitude before `tanh`.
pub const MSG_CLAMP: f64 = 30.0;

/// `|tanh(beta/2)|` is kept inside `[TANH_EPS, 1 - TANH_EPS]`.
pub const TANH_EPS: f64 = 1e-12;

fn log_abs_tanh_half(b: f64) -> f64 {
    let t = (b.clamp(-MSG_CLAMP, MSG_CLAMP) / 2.0).tanh().abs();
    t.clamp(TANH_EPS, 1.0 - TANH_EPS).ln()
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `x - 2 floor(x / 2)`.
pub fn bmod(x: f64) -> f64 {
    x - 2.0 * (x / 2.0).floor()
}

/// `lambda = 2 y / sigma2`.
pub fn llr_awgn(y: &[f64], sigma2: f64) -> Result<Vec<f64>> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma2 must be positive, got {sigma2}")));
    }
    Ok(y.iter().map(|v| 2.0 * v / sigma2).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpResult {
    pub decision: BipolarWord,
    pub iterations: usize,
    /// Whether the decision satisfies every check.
    pub converged: bool,
    pub posterior: Vec<f64>,
}

/// Edge-indexed messages after one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct BpState {
    /// Check-to-variable.
    pub alpha: Vec<f64>,
    /// Variable-to-check.
    pub beta: Vec<f64>,
}

fn satisfied(x: &BipolarWord, h: &ParityCheckMatrix) -> bool {
    let s = x.as_slice();
    h.rows()
        .iter()
        .all(|row| row.iter().filter(|&&j| s[j] < 0.0).count() % 2 == 0)
}

struct BpRunner<'a> {
    h: &'a ParityCheckMatrix,
    lambda: &'a [f64],
    alpha: Vec<f64>,
    beta: Vec<f64>,
    logs: Vec<f64>,
}

impl<'a> BpRunner<'a> {
    fn new(h: &'a ParityCheckMatrix, lambda: &'a [f64]) -> Self {
        let e = h.num_edges();
        BpRunner {
            h,
            lambda,
            alpha: vec![0.0; e],
            beta: vec![0.0; e],
            logs: vec![0.0; e],
        }
    }

    fn iterate(&mut self) {
        let h = self.h;
        // variable nodes: lambda plus the other incoming check messages
        for j in 0..h.n() {
            let edges = h.col_edges(j);
            let total: f64 = self.lambda[j] + edges.iter().map(|&k| self.alpha[k]).sum::<f64>();
            for &k in edges {
                self.beta[k] = total - self.alpha[k];
            }
        }
        // check nodes: tanh rule, magnitude in the log domain
        for i in 0..h.m() {
            let r = h.row_edges(i);
            for k in r.clone() {
                self.logs[k] = log_abs_tanh_half(self.beta[k]);
            }
            for k in r.clone() {
                let mut mag = 0.0;
                let mut sign = 1.0;
                for k2 in r.clone().filter(|&k2| k2 != k) {
                    mag += self.logs[k2];
                    sign *= sign0(self.beta[k2]);
                }
                self.alpha[k] = sign * 2.0 * mag.exp().atanh();
            }
        }
    }

    fn posterior(&self) -> Vec<f64> {
        (0..self.h.n())
            .map(|j| self.lambda[j] + self.h.col_edges(j).iter().map(|&k| self.alpha[k]).sum::<f64>())
            .collect()
    }
}

/// Flooding sum-product decoding; stops once the hard decision is a
/// codeword.
pub fn bp_decode(lambda: &[f64], h: &ParityCheckMatrix, max_iter: usize) -> Result<BpResult> {
    check_len(h.n(), lambda.len())?;
    if max_iter == 0 {
        return Err(Error::InvalidParameter("max_iter must be at least 1".into()));
    }
    let mut bp = BpRunner::new(h, lambda);
    let mut post = lambda.to_vec();
    let mut decision = sign_decision(&post);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        bp.iterate();
        iterations += 1;
        post = bp.posterior();
        decision = sign_decision(&post);
        if satisfied(&decision, h) {
            converged = true;
            break;
        }
    }
    Ok(BpResult {
        decision,
        iterations,
        converged,
        posterior: post,
    })
}

/// Message arrays after each of `iters` iterations (no early stop).
pub fn bp_trace(lambda: &[f64], h: &ParityCheckMatrix, iters: usize) -> Result<Vec<BpState>> {
    check_len(h.n(), lambda.len())?;
    let mut bp = BpRunner::new(h, lambda);
    Ok((0..iters)
        .map(|_| {
            bp.iterate();
            BpState {
                alpha: bp.alpha.clone(),
                beta: bp.beta.clone(),
            }
        })
        .collect())
}

/// Dense edge-incidence matrices: `U` is `n x e` with `U[j,k] = 1` iff edge
/// `k` touches variable `j`; `V` is `m x e` with `V[i,k] = 1` iff edge `k`
/// touches check `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeIncidence {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    /// `U^T U - I`.
    pub uu: DMatrix<f64>,
    /// `V^T V - I`.
    pub vv: DMatrix<f64>,
}

pub fn build_uv(h: &ParityCheckMatrix) -> EdgeIncidence {
    let e = h.num_edges();
    let mut u = DMatrix::zeros(h.n(), e);
    let mut v = DMatrix::zeros(h.m(), e);
    for (k, &(i, j)) in h.edges().iter().enumerate() {
        u[(j, k)] = 1.0;
        v[(i, k)] = 1.0;
    }
    let eye = DMatrix::<f64>::identity(e, e);
    let uu = u.tr_mul(&u) - &eye;
    let vv = v.tr_mul(&v) - &eye;
    EdgeIncidence { u, v, uu, vv }
}

impl EdgeIncidence {
    pub fn n(&self) -> usize {
        self.u.nrows()
    }

    pub fn m(&self) -> usize {
        self.v.nrows()
    }

    pub fn e(&self) -> usize {
        self.u.ncols()
    }
}

struct TensorRunner<'a> {
    ei: &'a EdgeIncidence,
    lambda_e: DVector<f64>,
    alpha: DVector<f64>,
    beta: DVector<f64>,
}

impl<'a> TensorRunner<'a> {
    fn new(ei: &'a EdgeIncidence, lambda: &[f64]) -> Self {
        let lambda = DVector::from_column_slice(lambda);
        TensorRunner {
            ei,
            lambda_e: ei.u.tr_mul(&lambda),
            alpha: DVector::zeros(ei.e()),
            beta: DVector::zeros(ei.e()),
        }
    }

    fn iterate(&mut self) {
        let ei = self.ei;
        self.beta = &ei.uu * &self.alpha + &self.lambda_e;
        let logs = self.beta.map(log_abs_tanh_half);
        let abs = (&ei.vv * logs).map(|s| 2.0 * s.exp().atanh());
        let sgn = self.beta.map(sign0);
        let neg = &ei.v * sgn.map(|s| (1.0 - s) / 2.0);
        let parity = ei.v.tr_mul(&neg.map(bmod));
        let alpha_sign = parity.map(|p| 1.0 - 2.0 * p).component_mul(&sgn);
        self.alpha = alpha_sign.component_mul(&abs);
    }

    fn posterior(&self, lambda: &[f64]) -> DVector<f64> {
        &self.ei.u * &self.alpha + DVector::from_column_slice(lambda)
    }
}

fn tensor_satisfied(ei: &EdgeIncidence, x: &BipolarWord) -> bool {
    let bits = DVector::from_iterator(x.len(), x.as_slice().iter().map(|v| (1.0 - v) / 2.0));
    (&ei.v * ei.u.tr_mul(&bits)).iter().all(|&s| bmod(s) == 0.0)
}

/// Flooding BP as dense products over `U` and `V`.
pub fn bp_tensor_decode(lambda: &[f64], ei: &EdgeIncidence, max_iter: usize) -> Result<BpResult> {
    check_len(ei.n(), lambda.len())?;
    if max_iter == 0 {
        return Err(Error::InvalidParameter("max_iter must be at least 1".into()));
    }
    let mut run = TensorRunner::new(ei, lambda);
    let mut post = lambda.to_vec();
    let mut decision = sign_decision(&post);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        run.iterate();
        iterations += 1;
        post = run.posterior(lambda).as_slice().to_vec();
        decision = sign_decision(&post);
        if tensor_satisfied(ei, &decision) {
            converged = true;
            break;
        }
    }
    Ok(BpResult {
        decision,
        iterations,
        converged,
        posterior: post,
    })
}

pub fn bp_tensor_trace(lambda: &[f64], ei: &EdgeIncidence, iters: usize) -> Result<Vec<BpState>> {
    check_len(ei.n(), lambda.len())?;
    let mut run = TensorRunner::new(ei, lambda);
    Ok((0..iters)
        .map(|_| {
            run.iterate();
            BpState {
                alpha: run.alpha.as_slice().to_vec(),
                beta: run.beta.as_slice().to_vec(),
            }
        })
        .collect())
}

/// LLRs from the MMSE estimate, treating `xhat_j = g_j x_j + noise` with
/// noise variance `g_j (1 - g_j)`.
pub fn mmse_llr(ch: &MimoChannel, y: &[f64]) -> Result<Vec<f64>> {
    let (xhat, g) = mmse_estimate(ch, y)?;
    Ok(xhat
        .iter()
        .zip(&g)
        .map(|(x, g)| 2.0 * x / (1.0 - g).max(f64::MIN_POSITIVE))
        .collect())
}

/// MMSE detection followed by BP on the demapped LLRs.
pub fn mmse_bp_pipeline(
    ch: &MimoChannel,
    y: &[f64],
    h: &ParityCheckMatrix,
    max_iter: usize,
) -> Result<BpResult> {
    check_len(h.n(), ch.a.ncols())?;
    bp_decode(&mmse_llr(ch, y)?, h, max_iter)
}
