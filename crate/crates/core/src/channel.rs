//! Channel models and their negative log-likelihood gradients.
//!
//! Every channel a gradient-flow decoder can run on implements
//! [`ChannelGradient`], which supplies `grad L(x; y)` and, where known, the
//! value `L(x; y)`. The AWGN and MIMO likelihoods use the unscaled forms
//! `1/2 |x - y|^2` and `1/2 |y - A x|^2`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::code::BipolarWord;
use crate::error::{check_len, Error, Result};

/// Gradient of a channel's negative log-likelihood.
pub trait ChannelGradient: Send + Sync {
    /// Length of the decoder state `x`.
    fn input_dim(&self) -> usize;

    /// Length of the observation `y`.
    fn output_dim(&self) -> usize;

    /// Writes `grad_x L(x; y)` into `out`. Lengths are the caller's
    /// responsibility; see [`ChannelGradient::grad`] for a checked call.
    fn grad_into(&self, x: &[f64], y: &[f64], out: &mut [f64]);

    /// `L(x; y)` up to an additive constant, if the channel knows it.
    fn value(&self, x: &[f64], y: &[f64]) -> Option<f64>;

    /// Writes `J(x)^T v` where `J` is the Jacobian of `grad_x L(x; y)`.
    fn grad_vjp_into(&self, x: &[f64], y: &[f64], v: &[f64], out: &mut [f64]);

    fn check_dims(&self, x: &[f64], y: &[f64]) -> Result<()> {
        check_len(self.input_dim(), x.len())?;
        check_len(self.output_dim(), y.len())
    }

    fn grad(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(x, y)?;
        let mut out = vec![0.0; x.len()];
        self.grad_into(x, y, &mut out);
        Ok(out)
    }
}

/// Real AWGN channel with per-component noise variance `sigma2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AwgnChannel {
    pub n: usize,
    pub sigma2: f64,
}

impl AwgnChannel {
    pub fn new(n: usize, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0) {
            return Err(Error::InvalidParameter(format!("sigma2 must be positive, got {sigma2}")));
        }
        Ok(AwgnChannel { n, sigma2 })
    }

    pub fn transmit<R: Rng + ?Sized>(&self, x: &BipolarWord, rng: &mut R) -> Vec<f64> {
        awgn_transmit(x.as_slice(), self.sigma2, rng)
    }
}

/// `y = x + n` with `n ~ N(0, sigma2 I)`. `sigma2 = 0` returns `x`.
pub fn awgn_transmit<R: Rng + ?Sized>(x: &[f64], sigma2: f64, rng: &mut R) -> Vec<f64> {
    assert!(sigma2 >= 0.0, "negative noise variance");
    let sd = sigma2.sqrt();
    x.iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            v + sd * z
        })
        .collect()
}

/// `x - y`, the gradient of `1/2 |x - y|^2`.
pub fn awgn_grad(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    check_len(x.len(), y.len())?;
    Ok(x.iter().zip(y).map(|(a, b)| a - b).collect())
}

impl ChannelGradient for AwgnChannel {
    fn input_dim(&self) -> usize {
        self.n
    }

    fn output_dim(&self) -> usize {
        self.n
    }

    fn grad_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
            *o = a - b;
        }
    }

    fn value(&self, x: &[f64], y: &[f64]) -> Option<f64> {
        Some(0.5 * x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
    }

    fn grad_vjp_into(&self, _x: &[f64], _y: &[f64], v: &[f64], out: &mut [f64]) {
        out.copy_from_slice(v);
    }
}

/// Equivalent real model of a complex `mu x nu` Rayleigh MIMO channel.
///
/// `a` is the `2mu x 2nu` block matrix `[[Re A', -Im A'], [Im A', Re A']]`,
/// so QPSK symbols become a BPSK vector of length `2nu`.
#[derive(Debug, Clone, PartialEq)]
pub struct MimoChannel {
    pub a_complex: DMatrix<Complex64>,
    pub a: DMatrix<f64>,
    /// Total complex noise variance; each real component has half.
    pub sigma_w2: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// `2 / (lambda_min + lambda_max)` of `A^T A`.
    pub omega: f64,
}

impl MimoChannel {
    /// Builds the real model and step size from a complex channel matrix.
    pub fn from_complex(a_complex: DMatrix<Complex64>, sigma_w2: f64) -> Result<Self> {
        if !(sigma_w2 > 0.0) {
            return Err(Error::InvalidParameter(format!("sigma_w2 must be positive, got {sigma_w2}")));
        }
        let (mu, nu) = a_complex.shape();
        let a = DMatrix::from_fn(2 * mu, 2 * nu, |r, c| {
            let z = a_complex[(r % mu, c % nu)];
            match (r < mu, c < nu) {
                (true, true) | (false, false) => z.re,
                (true, false) => -z.im,
                (false, true) => z.im,
            }
        });
        let eig = a.tr_mul(&a).symmetric_eigenvalues();
        let lambda_min = eig.min().max(0.0);
        let lambda_max = eig.max();
        Ok(MimoChannel {
            a_complex,
            a,
            sigma_w2,
            lambda_min,
            lambda_max,
            omega: 2.0 / (lambda_min + lambda_max),
        })
    }

    pub fn mu(&self) -> usize {
        self.a_complex.nrows()
    }

    pub fn nu(&self) -> usize {
        self.a_complex.ncols()
    }

    /// `y = A x + w`, `w ~ N(0, sigma_w2/2 I)`.
    pub fn transmit<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        check_len(self.a.ncols(), x.len())?;
        let sd = (self.sigma_w2 / 2.0).sqrt();
        let ax = &self.a * DVector::from_column_slice(x);
        Ok(ax
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(rng);
                v + sd * z
            })
            .collect())
    }

    /// Writes the channel as little-endian binary: magic, `mu`, `nu`,
    /// `sigma_w2`, then `A'` row-major as (re, im) pairs.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHANNEL_MAGIC)?;
        w.write_all(&(self.mu() as u64).to_le_bytes())?;
        w.write_all(&(self.nu() as u64).to_le_bytes())?;
        w.write_all(&self.sigma_w2.to_le_bytes())?;
        for r in 0..self.mu() {
            for c in 0..self.nu() {
                let z = self.a_complex[(r, c)];
                w.write_all(&z.re.to_le_bytes())?;
                w.write_all(&z.im.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHANNEL_MAGIC {
            return Err(Error::Format("not a MIMO channel dump".into()));
        }
        let mut b8 = [0u8; 8];
        let mut next_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let mu = next_u64(&mut r)? as usize;
        let nu = next_u64(&mut r)? as usize;
        let sigma_w2 = f64::from_bits(next_u64(&mut r)?);
        let mut vals = Vec::with_capacity(mu * nu);
        for _ in 0..mu * nu {
            let re = f64::from_bits(next_u64(&mut r)?);
            let im = f64::from_bits(next_u64(&mut r)?);
            vals.push(Complex64::new(re, im));
        }
        Self::from_complex(DMatrix::from_row_slice(mu, nu, &vals), sigma_w2)
    }
}

const CHANNEL_MAGIC: &[u8; 8] = b"GFMIMO01";

/// Draws `A'` with i.i.d. `CN(0, 1)` entries and sets `sigma_w2 = N / snr`
/// for linear `snr`, `N = 2 mu`.
pub fn sample_mimo<R: Rng + ?Sized>(mu: usize, nu: usize, snr: f64, rng: &mut R) -> Result<MimoChannel> {
    if mu == 0 || nu == 0 {
        return Err(Error::InvalidParameter("antenna counts must be positive".into()));
    }
    let sigma_w2 = snr_convert(SnrMode::Mimo { receive_dim: 2 * mu }, snr)?;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let a_complex = DMatrix::from_fn(mu, nu, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        Complex64::new(s * re, s * im)
    });
    MimoChannel::from_complex(a_complex, sigma_w2)
}

/// `A^T (A x - y)`.
pub fn mimo_grad(ch: &MimoChannel, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    ch.grad(x, y)
}

impl ChannelGradient for MimoChannel {
    fn input_dim(&self) -> usize {
        self.a.ncols()
    }

    fn output_dim(&self) -> usize {
        self.a.nrows()
    }

    fn grad_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let mut r = &self.a * DVector::from_column_slice(x);
        r -= DVector::from_column_slice(y);
        let g = self.a.tr_mul(&r);
        out.copy_from_slice(g.as_slice());
    }

    fn value(&self, x: &[f64], y: &[f64]) -> Option<f64> {
        let r = &self.a * DVector::from_column_slice(x) - DVector::from_column_slice(y);
        Some(0.5 * r.norm_squared())
    }

    fn grad_vjp_into(&self, _x: &[f64], _y: &[f64], v: &[f64], out: &mut [f64]) {
        let av = &self.a * DVector::from_column_slice(v);
        out.copy_from_slice(self.a.tr_mul(&av).as_slice());
    }
}

fn regularized_gram(ch: &MimoChannel) -> DMatrix<f64> {
    let mut g = &ch.a * ch.a.transpose();
    for i in 0..g.nrows() {
        g[(i, i)] += ch.sigma_w2 / 2.0;
    }
    g
}

/// Linear MMSE estimate `A^T (A A^T + sigma_w2/2 I)^{-1} y`.
pub fn mmse_detect(ch: &MimoChannel, y: &[f64]) -> Result<Vec<f64>> {
    check_len(ch.output_dim(), y.len())?;
    let chol = regularized_gram(ch)
        .cholesky()
        .ok_or_else(|| Error::InvalidParameter("regularized Gram matrix not positive definite".into()))?;
    let u = chol.solve(&DVector::from_column_slice(y));
    Ok(ch.a.tr_mul(&u).as_slice().to_vec())
}

/// Diagonal of `A^T (A A^T + sigma_w2/2 I)^{-1} A`: the per-symbol gain of
/// the MMSE estimate.
pub fn mmse_gains(ch: &MimoChannel) -> Result<Vec<f64>> {
    let chol = regularized_gram(ch)
        .cholesky()
        .ok_or_else(|| Error::InvalidParameter("regularized Gram matrix not positive definite".into()))?;
    let w = chol.solve(&ch.a);
    Ok((0..ch.a.ncols())
        .map(|j| ch.a.column(j).dot(&w.column(j)))
        .collect())
}

/// MMSE estimate together with the per-symbol gains, sharing one
/// factorization.
pub fn mmse_estimate(ch: &MimoChannel, y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len(ch.output_dim(), y.len())?;
    let chol = regularized_gram(ch)
        .cholesky()
        .ok_or_else(|| Error::InvalidParameter("regularized Gram matrix not positive definite".into()))?;
    let u = chol.solve(&DVector::from_column_slice(y));
    let w = chol.solve(&ch.a);
    let x = ch.a.tr_mul(&u).as_slice().to_vec();
    let g = (0..ch.a.ncols()).map(|j| ch.a.column(j).dot(&w.column(j))).collect();
    Ok((x, g))
}

/// How an SNR value maps to a noise variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SnrMode {
    /// Linear SNR to total complex noise variance `N / snr`.
    Mimo { receive_dim: usize },
    /// `Eb/N0` in dB to per-component variance `1 / (2 R 10^(EbN0/10))`
    /// for unit-energy BPSK at code rate `R`.
    AwgnEbN0 { rate: f64 },
}

pub fn snr_convert(mode: SnrMode, value: f64) -> Result<f64> {
    match mode {
        SnrMode::Mimo { receive_dim } => {
            if receive_dim == 0 || !(value > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "MIMO SNR needs positive dimension and SNR, got N={receive_dim}, snr={value}"
                )));
            }
            Ok(receive_dim as f64 / value)
        }
        SnrMode::AwgnEbN0 { rate } => {
            if !(rate > 0.0) || !value.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "AWGN conversion needs positive rate and finite Eb/N0, got R={rate}, ebn0={value}"
                )));
            }
            Ok(1.0 / (2.0 * rate * 10f64.powf(value / 10.0)))
        }
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn central_diff<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
        let eps = 1e-6;
        (0..x.len())
            .map(|k| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[k] += eps;
                m[k] -= eps;
                (f(&p) - f(&m)) / (2.0 * eps)
            })
            .collect()
    }

    #[test]
    fn awgn_zero_noise_is_identity() {
        let x = [1.0, -1.0, 1.0];
        assert_eq!(awgn_transmit(&x, 0.0, &mut rng(1)), x.to_vec());
    }

    #[test]
    fn awgn_noise_statistics() {
        let sigma2 = 0.37;
        let x = vec![1.0; 100_000];
        let y = awgn_transmit(&x, sigma2, &mut rng(2));
        let d: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
        assert!((var - sigma2).abs() < 0.02 * sigma2, "var {var}");
        assert!(mean.abs() < 3.0 * (sigma2 / d.len() as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn awgn_gradient() {
        assert_eq!(awgn_grad(&[0.3, 0.2], &[0.3, 0.2]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(
            awgn_grad(&[0.0, 0.0], &[0.6027, 0.8244]).unwrap(),
            vec![-0.6027, -0.8244]
        );
        let y = [0.4, -1.1, 0.7];
        let x = [0.1, 0.5, -0.2];
        let ch = AwgnChannel::new(3, 1.0).unwrap();
        let fd = central_diff(|x| ch.value(x, &y).unwrap(), &x);
        for (a, b) in awgn_grad(&x, &y).unwrap().iter().zip(&fd) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(awgn_grad(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mimo_structure_and_step_size() {
        let ch = sample_mimo(3, 2, 2.0, &mut rng(3)).unwrap();
        assert_eq!(ch.a.shape(), (6, 4));
        assert_eq!(ch.sigma_w2, 3.0);
        for r in 0..3 {
            for c in 0..2 {
                let z = ch.a_complex[(r, c)];
                assert_eq!(ch.a[(r, c)], z.re);
                assert_eq!(ch.a[(r, c + 2)], -z.im);
                assert_eq!(ch.a[(r + 3, c)], z.im);
                assert_eq!(ch.a[(r + 3, c + 2)], z.re);
            }
        }
        assert!((ch.omega * (ch.lambda_min + ch.lambda_max) - 2.0).abs() < 1e-10);
        let ch4 = sample_mimo(2, 2, 2.0, &mut rng(4)).unwrap();
        assert_eq!(ch4.sigma_w2, 2.0);
    }

    fn identity_channel(n: usize, sigma_w2: f64) -> MimoChannel {
        // A' = I on a square channel gives a real identity of size 2n.
        MimoChannel::from_complex(DMatrix::identity(n, n), sigma_w2).unwrap()
    }

    #[test]
    fn mimo_gradient_cases() {
        let ch = identity_channel(2, 1.0);
        let x = [0.3, -0.2, 0.9, 1.1];
        let y = [1.0, 0.0, -1.0, 0.5];
        assert_eq!(mimo_grad(&ch, &x, &y).unwrap(), awgn_grad(&x, &y).unwrap());

        let ch = sample_mimo(3, 2, 5.0, &mut rng(5)).unwrap();
        let x = [0.2, -0.7, 1.3, 0.4];
        let y: Vec<f64> = (&ch.a * DVector::from_column_slice(&x)).as_slice().to_vec();
        for g in mimo_grad(&ch, &x, &y).unwrap() {
            assert!(g.abs() < 1e-12);
        }
        let y = [0.1, 0.5, -0.3, 0.8, -1.2, 0.0];
        let fd = central_diff(|x| ch.value(x, &y).unwrap(), &x);
        for (a, b) in mimo_grad(&ch, &x, &y).unwrap().iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()));
        }
        assert!(mimo_grad(&ch, &x[..3], &y).is_err());
    }

    #[test]
    fn mimo_grad_is_affine() {
        let ch = sample_mimo(4, 3, 3.0, &mut rng(6)).unwrap();
        let mut r = rng(7);
        let mut v = |n: usize| -> Vec<f64> { (0..n).map(|_| r.random_range(-1.0..1.0)).collect() };
        let (x1, x2, y1, y2) = (v(6), v(6), v(8), v(8));
        let g1 = mimo_grad(&ch, &x1, &y1).unwrap();
        let g2 = mimo_grad(&ch, &x2, &y2).unwrap();
        let xs: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a + b).collect();
        let ys: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| a + b).collect();
        let gs = mimo_grad(&ch, &xs, &ys).unwrap();
        for k in 0..6 {
            assert!((g1[k] + g2[k] - gs[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn omega_step_contracts() {
        let ch = sample_mimo(6, 3, 10.0, &mut rng(8)).unwrap();
        let gram = ch.a.tr_mul(&ch.a);
        let m = DMatrix::<f64>::identity(6, 6) - gram * ch.omega;
        let eig = m.symmetric_eigenvalues();
        let rho = eig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(rho < 1.0, "spectral radius {rho}");
    }

    #[test]
    fn mmse_cases() {
        let ch = identity_channel(2, 0.8);
        let y = [1.0, -0.5, 0.25, 2.0];
        let x = mmse_detect(&ch, &y).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b / 1.4).abs() < 1e-12);
        }

        let mut ch = sample_mimo(3, 3, 1.0, &mut rng(9)).unwrap();
        ch.sigma_w2 = 1e-8;
        let x_true = [0.5, -1.0, 1.0, 0.2, -0.3, 0.9];
        let y: Vec<f64> = (&ch.a * DVector::from_column_slice(&x_true)).as_slice().to_vec();
        let x = mmse_detect(&ch, &y).unwrap();
        for (a, b) in x.iter().zip(&x_true) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn mmse_is_ridge_solution_and_local_optimum() {
        let ch = sample_mimo(4, 3, 2.0, &mut rng(10)).unwrap();
        let y = [0.3, -1.2, 0.8, 0.1, 0.5, -0.4, 1.5, -0.9];
        let x = mmse_detect(&ch, &y).unwrap();
        let c = ch.sigma_w2 / 2.0;
        let mut lhs = ch.a.tr_mul(&ch.a);
        for i in 0..6 {
            lhs[(i, i)] += c;
        }
        let rhs = ch.a.tr_mul(&DVector::from_column_slice(&y));
        let ridge = lhs.lu().solve(&rhs).unwrap();
        for (a, b) in x.iter().zip(ridge.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
        let obj = |x: &[f64]| {
            let r = &ch.a * DVector::from_column_slice(x) - DVector::from_column_slice(&y);
            r.norm_squared() + c * x.iter().map(|v| v * v).sum::<f64>()
        };
        let base = obj(&x);
        let mut r = rng(11);
        for _ in 0..200 {
            let dir: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            for s in [1e-3, -1e-3] {
                let xp: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + s * d / norm).collect();
                assert!(obj(&xp) >= base);
            }
        }
    }

    #[test]
    fn snr_conversions() {
        assert_eq!(snr_convert(SnrMode::Mimo { receive_dim: 4 }, 2.0).unwrap(), 2.0);
        assert!((snr_convert(SnrMode::AwgnEbN0 { rate: 0.5 }, 0.0).unwrap() - 1.0).abs() < 1e-15);
        let s = snr_convert(SnrMode::AwgnEbN0 { rate: 0.5 }, 3.010).unwrap();
        assert!((s - 0.5).abs() < 1e-3);
        assert!(snr_convert(SnrMode::Mimo { receive_dim: 4 }, 0.0).is_err());
        assert!(snr_convert(SnrMode::AwgnEbN0 { rate: 0.0 }, 1.0).is_err());
    }

    #[test]
    fn channel_dump_round_trip() {
        let ch = sample_mimo(3, 2, 4.0, &mut rng(12)).unwrap();
        let mut buf = Vec::new();
        ch.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 8 + 8 + 8 + 3 * 2 * 16);
        let back = MimoChannel::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, ch);
        assert!(MimoChannel::read_from(&b"nonsense"[..]).is_err());
    }
}
