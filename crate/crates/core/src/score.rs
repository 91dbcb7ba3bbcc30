//! Score-based channel learning.
//!
//! A small MLP `s(e)` is fitted to the score `grad log q(e)` of a per-segment
//! error density by denoising score matching, then plugged into the decoder
//! as `grad L(x; y) = -s(x' - y')` per segment (or `-A^T s(A x' - y')` for a
//! segmented linear channel).

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use crate::channel::ChannelGradient;
use crate::error::{check_len, Error, Result};
use crate::optim::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// `act(W h + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub act: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNet {
    pub layers: Vec<Dense>,
}

struct Cache {
    /// Layer inputs `h_1 .. h_L` (the last is the output).
    h: Vec<DMatrix<f64>>,
}

impl ScoreNet {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.w.nrows() != l.b.len() {
                return Err(Error::InvalidParameter(format!("layer {i}: bias length mismatch")));
            }
            if i > 0 && layers[i - 1].w.nrows() != l.w.ncols() {
                return Err(Error::InvalidParameter(format!("layer {i}: input width mismatch")));
            }
        }
        let net = ScoreNet { layers };
        if net.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidParameter("non-finite parameter".into()));
        }
        Ok(net)
    }

    /// MLP with the given widths, ReLU on hidden layers and a linear output.
    /// Weights and biases start uniform in `+-1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidParameter(format!("bad layer widths {widths:?}")));
        }
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let mut u = || rng.random_range(-bound..bound);
                Dense {
                    w: DMatrix::from_fn(w[1], w[0], |_, _| u()),
                    b: DVector::from_fn(w[1], |_, _| u()),
                    act: if i == last {
                        Activation::Identity
                    } else {
                        Activation::Relu
                    },
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    /// `nu -> hidden -> hidden -> nu`.
    pub fn default_architecture<R: Rng + ?Sized>(nu: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Self::new(&[nu, hidden, hidden, nu], rng)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Flattened parameters: per layer, `W` column-major then `b`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.w.as_slice());
            out.extend_from_slice(l.b.as_slice());
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        check_len(self.num_params(), p.len())?;
        let mut o = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.as_mut_slice().copy_from_slice(&p[o..o + nw]);
            o += nw;
            let nb = l.b.len();
            l.b.as_mut_slice().copy_from_slice(&p[o..o + nb]);
            o += nb;
        }
        Ok(())
    }

    fn forward_cache(&self, x: DMatrix<f64>) -> Cache {
        let mut h = Vec::with_capacity(self.layers.len() + 1);
        h.push(x);
        for l in &self.layers {
            let mut z = &l.w * h.last().unwrap();
            for mut c in z.column_iter_mut() {
                c += &l.b;
            }
            if l.act == Activation::Relu {
                z.apply(|v| *v = v.max(0.0));
            }
            h.push(z);
        }
        Cache { h }
    }

    /// Backpropagates `d_out` (gradient w.r.t. the output batch). Returns the
    /// gradient w.r.t. the input batch and, if requested, accumulates the
    /// flat parameter gradient into `pgrad`.
    fn backward(&self, cache: &Cache, d_out: DMatrix<f64>, mut pgrad: Option<&mut [f64]>) -> DMatrix<f64> {
        let mut d = d_out;
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut o = 0;
        for l in &self.layers {
            offsets.push(o);
            o += l.w.len() + l.b.len();
        }
        for (li, l) in self.layers.iter().enumerate().rev() {
            if l.act == Activation::Relu {
                d.zip_apply(&cache.h[li + 1], |g, a| {
                    if a <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            if let Some(pg) = pgrad.as_deref_mut() {
                let gw = &d * cache.h[li].transpose();
                let o = offsets[li];
                for (t, v) in pg[o..o + gw.len()].iter_mut().zip(gw.as_slice()) {
                    *t += v;
                }
                let ob = o + gw.len();
                for (r, t) in pg[ob..ob + l.b.len()].iter_mut().enumerate() {
                    *t += d.row(r).sum();
                }
            }
            d = l.w.tr_mul(&d);
        }
        d
    }

    /// Applies the network column-wise to an `input_dim x D` batch.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_len(self.input_dim(), x.nrows())?;
        Ok(self.forward_cache(x.clone()).h.pop().unwrap())
    }

    pub fn forward(&self, e: &[f64]) -> Result<Vec<f64>> {
        let out = self.forward_batch(&DMatrix::from_column_slice(e.len(), 1, e))?;
        Ok(out.as_slice().to_vec())
    }

    /// Column-wise `J(x_d)^T u_d` where `J` is the input Jacobian.
    pub fn input_vjp_batch(&self, x: &DMatrix<f64>, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_len(self.input_dim(), x.nrows())?;
        check_len(self.output_dim(), u.nrows())?;
        check_len(x.ncols(), u.ncols())?;
        let cache = self.forward_cache(x.clone());
        Ok(self.backward(&cache, u.clone(), None))
    }

    /// Input Jacobian at `e` (`output_dim x input_dim`).
    pub fn jacobian(&self, e: &[f64]) -> Result<DMatrix<f64>> {
        let k = self.output_dim();
        let x = DMatrix::from_fn(e.len(), k, |r, _| e[r]);
        let jt = self.input_vjp_batch(&x, &DMatrix::identity(k, k))?;
        Ok(jt.transpose())
    }

    /// Text checkpoint: a version line, then per layer a header
    /// `layer <out> <in> <activation>`, a line of row-major weights and a
    /// line of biases.
    pub fn to_checkpoint(&self) -> String {
        let mut s = String::from("scorenet 1\n");
        for l in &self.layers {
            writeln!(s, "layer {} {} {}", l.w.nrows(), l.w.ncols(), l.act.name()).unwrap();
            let w: Vec<String> = (0..l.w.nrows())
                .flat_map(|r| (0..l.w.ncols()).map(move |c| (r, c)))
                .map(|rc| l.w[rc].to_string())
                .collect();
            writeln!(s, "{}", w.join(" ")).unwrap();
            let b: Vec<String> = l.b.iter().map(f64::to_string).collect();
            writeln!(s, "{}", b.join(" ")).unwrap();
        }
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let bad = |n: usize, m: &str| Error::Format(format!("checkpoint line {}: {m}", n + 1));
        match lines.next() {
            Some((_, l)) if l.trim() == "scorenet 1" => {}
            Some((n, _)) => return Err(bad(n, "expected `scorenet 1`")),
            None => return Err(Error::Format("empty checkpoint".into())),
        }
        let nums = |n: usize, l: &str, want: usize| -> Result<Vec<f64>> {
            let v = l
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| bad(n, &e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            if v.len() != want {
                return Err(bad(n, &format!("expected {want} values, got {}", v.len())));
            }
            Ok(v)
        };
        let mut layers = Vec::new();
        while let Some((n, head)) = lines.next() {
            let f: Vec<&str> = head.split_whitespace().collect();
            if f.len() != 4 || f[0] != "layer" {
                return Err(bad(n, "expected `layer <out> <in> <activation>`"));
            }
            let rows: usize = f[1].parse().map_err(|_| bad(n, "bad output width"))?;
            let cols: usize = f[2].parse().map_err(|_| bad(n, "bad input width"))?;
            let act = Activation::parse(f[3]).ok_or_else(|| bad(n, "unknown activation"))?;
            let (wn, wl) = lines.next().ok_or_else(|| bad(n, "missing weights"))?;
            let w = nums(wn, wl, rows * cols)?;
            let (bn, bl) = lines.next().ok_or_else(|| bad(wn, "missing biases"))?;
            let b = nums(bn, bl, rows)?;
            layers.push(Dense {
                w: DMatrix::from_row_slice(rows, cols, &w),
                b: DVector::from_vec(b),
                act,
            });
        }
        Self::from_layers(layers)
    }
}

/// `(1/D) sum_d |s(noisy_d) + (noisy_d - clean_d)/sigma^2|^2` over the
/// columns of the two batches.
pub fn dsm_loss(net: &ScoreNet, clean: &DMatrix<f64>, noisy: &DMatrix<f64>, sigma: f64) -> Result<f64> {
    let (loss, _) = dsm_loss_grad_impl(net, clean, noisy, sigma, false)?;
    Ok(loss)
}

/// Loss together with its gradient in [`ScoreNet::params`] order.
pub fn dsm_loss_grad(
    net: &ScoreNet,
    clean: &DMatrix<f64>,
    noisy: &DMatrix<f64>,
    sigma: f64,
) -> Result<(f64, Vec<f64>)> {
    dsm_loss_grad_impl(net, clean, noisy, sigma, true)
}

fn dsm_loss_grad_impl(
    net: &ScoreNet,
    clean: &DMatrix<f64>,
    noisy: &DMatrix<f64>,
    sigma: f64,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    check_len(net.input_dim(), clean.nrows())?;
    check_len(net.output_dim(), clean.nrows())?;
    check_len(clean.nrows(), noisy.nrows())?;
    check_len(clean.ncols(), noisy.ncols())?;
    let d = clean.ncols().max(1) as f64;
    let cache = net.forward_cache(noisy.clone());
    let resid = cache.h.last().unwrap() + (noisy - clean) / (sigma * sigma);
    let loss = resid.norm_squared() / d;
    let mut grad = Vec::new();
    if want_grad {
        grad = vec![0.0; net.num_params()];
        net.backward(&cache, resid * (2.0 / d), Some(&mut grad));
    }
    Ok((loss, grad))
}

/// Source of error segments for training.
pub trait ErrorSampler {
    fn dim(&self) -> usize;
    fn sample(&self, rng: &mut dyn RngCore, out: &mut [f64]);
}

/// `N(0, std^2 I)`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianSampler {
    pub dim: usize,
    pub std: f64,
}

impl ErrorSampler for GaussianSampler {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        for o in out {
            let z: f64 = StandardNormal.sample(rng);
            *o = self.std * z;
        }
    }
}

/// Uniform choice from a fixed candidate list.
#[derive(Debug, Clone)]
pub struct CandidateSampler {
    points: Vec<Vec<f64>>,
}

impl CandidateSampler {
    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn draw_index(&self, rng: &mut dyn RngCore) -> usize {
        rng.random_range(0..self.points.len())
    }
}

impl ErrorSampler for CandidateSampler {
    fn dim(&self) -> usize {
        self.points[0].len()
    }

    fn sample(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        out.copy_from_slice(&self.points[self.draw_index(rng)]);
    }
}

/// Sampler over a list of 2D error candidates.
pub fn correlated2d_sampler(points: Vec<[f64; 2]>) -> Result<CandidateSampler> {
    if points.is_empty() {
        return Err(Error::InvalidParameter("candidate list is empty".into()));
    }
    Ok(CandidateSampler {
        points: points.into_iter().map(|p| p.to_vec()).collect(),
    })
}

/// Builds a point-symmetric set of `count` (even) 2D candidates spread
/// along the diagonal: `t (1, 1) + w (1, -1)` with `t ~ N(0, spread^2)` and
/// `w ~ N(0, width^2)`, each point paired with its negation.
pub fn correlated_candidates<R: Rng + ?Sized>(count: usize, spread: f64, width: f64, rng: &mut R) -> Vec<[f64; 2]> {
    let mut pts = Vec::with_capacity(count);
    for _ in 0..count / 2 {
        let t: f64 = StandardNormal.sample(rng);
        let w: f64 = StandardNormal.sample(rng);
        let p = [spread * t + width * w, spread * t - width * w];
        pts.push(p);
        pts.push([-p[0], -p[1]]);
    }
    pts
}

/// Reads a two-column CSV of points; a non-numeric first line is taken as a
/// header.
pub fn load_candidates_csv(text: &str) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: Option<Vec<f64>> = f.iter().map(|t| t.parse().ok()).collect();
        match parsed {
            Some(v) if v.len() == 2 => out.push([v[0], v[1]]),
            None if n == 0 => continue,
            _ => return Err(Error::Format(format!("candidate line {}: expected two numbers", n + 1))),
        }
    }
    if out.is_empty() {
        return Err(Error::Format("no candidate points".into()));
    }
    Ok(out)
}

pub fn candidates_to_csv(points: &[[f64; 2]]) -> String {
    let mut s = String::from("e1,e2\n");
    for p in points {
        writeln!(s, "{},{}", p[0], p[1]).unwrap();
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub iterations: usize,
    pub sigma: f64,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 100,
            iterations: 10_000,
            sigma: 0.3,
            lr: 0.005,
        }
    }
}

/// Denoising score matching with Adam. Returns the loss of every iteration.
pub fn train_score(
    net: &mut ScoreNet,
    sampler: &dyn ErrorSampler,
    cfg: TrainConfig,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    if cfg.batch == 0 || !(cfg.sigma > 0.0) || !(cfg.lr > 0.0) {
        return Err(Error::InvalidParameter(format!("invalid training config {cfg:?}")));
    }
    let nu = net.input_dim();
    check_len(nu, sampler.dim())?;
    check_len(nu, net.output_dim())?;
    let mut params = net.params();
    let mut opt = Adam::new(params.len(), cfg.lr);
    let mut clean = DMatrix::zeros(nu, cfg.batch);
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut buf = vec![0.0; nu];
    for it in 0..cfg.iterations {
        for d in 0..cfg.batch {
            sampler.sample(rng, &mut buf);
            clean.column_mut(d).copy_from_slice(&buf);
        }
        let noisy = clean.map(|v| {
            let z: f64 = StandardNormal.sample(&mut *rng);
            v + cfg.sigma * z
        });
        let (loss, grad) = dsm_loss_grad(net, &clean, &noisy, cfg.sigma)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged { iteration: it + 1 });
        }
        losses.push(loss);
        opt.step(&mut params, &grad);
        net.set_params(&params)?;
    }
    Ok(losses)
}

/// Layout of a segmented channel: `n = nu * k` code bits, each segment
/// observed through an optional `segment_out x nu` linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedChannelSpec {
    pub nu: usize,
    pub segment_out: usize,
    pub k: usize,
    pub a_seg: Option<DMatrix<f64>>,
}

impl SegmentedChannelSpec {
    /// Additive per-segment errors, `y' = x' + e'`.
    pub fn additive(nu: usize, k: usize) -> Self {
        SegmentedChannelSpec {
            nu,
            segment_out: nu,
            k,
            a_seg: None,
        }
    }

    /// `y' = A x' + e'`.
    pub fn linear(a: DMatrix<f64>, k: usize) -> Self {
        SegmentedChannelSpec {
            nu: a.ncols(),
            segment_out: a.nrows(),
            k,
            a_seg: Some(a),
        }
    }

    pub fn n(&self) -> usize {
        self.nu * self.k
    }

    pub fn observation_len(&self) -> usize {
        self.segment_out * self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.nu == 0 || self.k == 0 {
            return Err(Error::InvalidParameter("segment size and count must be positive".into()));
        }
        match &self.a_seg {
            Some(a) if a.shape() != (self.segment_out, self.nu) => Err(Error::InvalidParameter(format!(
                "segment map is {:?}, expected {:?}",
                a.shape(),
                (self.segment_out, self.nu)
            ))),
            None if self.segment_out != self.nu => Err(Error::InvalidParameter(
                "segment_out must equal nu without a segment map".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Noiseless observation of `x`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n(), x.len())?;
        Ok(match &self.a_seg {
            None => x.to_vec(),
            Some(a) => {
                let xs = DMatrix::from_column_slice(self.nu, self.k, x);
                (a * xs).as_slice().to_vec()
            }
        })
    }

    /// `y = apply(x) + e` with per-segment errors from `sampler`.
    pub fn transmit(&self, x: &[f64], sampler: &dyn ErrorSampler, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        check_len(self.segment_out, sampler.dim())?;
        let mut y = self.apply(x)?;
        for seg in y.chunks_mut(self.segment_out) {
            let mut e = vec![0.0; self.segment_out];
            sampler.sample(rng, &mut e);
            for (v, e) in seg.iter_mut().zip(&e) {
                *v += e;
            }
        }
        Ok(y)
    }
}

/// Channel gradient backed by a trained score network.
#[derive(Debug, Clone)]
pub struct LearnedChannel {
    pub net: Arc<ScoreNet>,
    pub spec: SegmentedChannelSpec,
}

impl LearnedChannel {
    pub fn new(net: Arc<ScoreNet>, spec: SegmentedChannelSpec) -> Result<Self> {
        spec.validate()?;
        check_len(spec.segment_out, net.input_dim())?;
        check_len(spec.segment_out, net.output_dim())?;
        Ok(LearnedChannel { net, spec })
    }

    /// Per-segment residuals `A x' - y'` as columns.
    fn residuals(&self, x: &[f64], y: &[f64]) -> DMatrix<f64> {
        let s = &self.spec;
        let xs = DMatrix::from_column_slice(s.nu, s.k, x);
        let ys = DMatrix::from_column_slice(s.segment_out, s.k, y);
        match &s.a_seg {
            None => xs - ys,
            Some(a) => a * xs - ys,
        }
    }

    fn lift(&self, m: DMatrix<f64>, out: &mut [f64]) {
        let m = match &self.spec.a_seg {
            None => m,
            Some(a) => a.tr_mul(&m),
        };
        for (o, v) in out.iter_mut().zip(m.iter()) {
            *o = -v;
        }
    }
}

impl ChannelGradient for LearnedChannel {
    fn input_dim(&self) -> usize {
        self.spec.n()
    }

    fn output_dim(&self) -> usize {
        self.spec.observation_len()
    }

    fn grad_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let r = self.residuals(x, y);
        let s = self.net.forward_cache(r).h.pop().unwrap();
        self.lift(s, out);
    }

    fn value(&self, _x: &[f64], _y: &[f64]) -> Option<f64> {
        None
    }

    fn grad_vjp_into(&self, x: &[f64], y: &[f64], v: &[f64], out: &mut [f64]) {
        let s = &self.spec;
        let r = self.residuals(x, y);
        let vs = DMatrix::from_column_slice(s.nu, s.k, v);
        let av = match &s.a_seg {
            None => vs,
            Some(a) => a * vs,
        };
        let cache = self.net.forward_cache(r);
        let jt = self.net.backward(&cache, av, None);
        self.lift(jt, out);
    }
}

/// Stacked `-A^T s(A x'_k - y'_k)` for the given network and layout.
pub fn learned_grad(net: &ScoreNet, spec: &SegmentedChannelSpec, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    spec.validate()?;
    check_len(spec.n(), x.len())?;
    check_len(spec.observation_len(), y.len())?;
    check_len(spec.segment_out, net.input_dim())?;
    let ch = LearnedChannel {
        net: Arc::new(net.clone()),
        spec: spec.clone(),
    };
    let mut out = vec![0.0; x.len()];
    ch.grad_into(x, y, &mut out);
    Ok(out)
}
