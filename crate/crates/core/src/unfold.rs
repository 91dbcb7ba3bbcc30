//! Deep unfolding of the discretized decoder.
//!
//! The per-iteration parameters `(eta, gamma, alpha, beta)` are trained by
//! backpropagating the MSE `|s^(U) - x|^2` through the unrolled recursion.
//! The adjoint is derived by hand: for
//! `s' = s - eta (g(s) + gamma (alpha b(s) + beta p(s)))`
//! with `g` the channel gradient and `b`, `p` the two potential gradients,
//! `a <- a - eta (J_g^T a + gamma (alpha H_b a + beta H_p a))`.
//! Training runs unprojected unless a clamp is given; through the clamp
//! the adjoint is masked to the coordinates strictly inside the box.

use std::sync::Arc;

use rand::RngCore;

use crate::channel::ChannelGradient;
use crate::code::ParityCheckMatrix;
use crate::decoder::{gf_step, DecoderSchedule, StepParams, Workspace};
use crate::error::{check_len, Error, Result};
use crate::optim::Adam;
use crate::par::map_collect;
use crate::potential::{grad_parts_into, hessian_vec_parts_into, Scratch};

/// One training example: transmitted word, observation, start point and the
/// channel it went through.
#[derive(Clone)]
pub struct UnfoldSample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub x0: Vec<f64>,
    pub channel: Arc<dyn ChannelGradient>,
}

impl std::fmt::Debug for UnfoldSample {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UnfoldSample")
            .field("x", &self.x)
            .field("y", &self.y)
            .field("x0", &self.x0)
            .finish_non_exhaustive()
    }
}

/// Parameter families, in the order used by gradient arrays.
pub const FAMILIES: [&str; 4] = ["eta", "gamma", "alpha", "beta"];

fn to_array(s: &StepParams) -> [f64; 4] {
    [s.eta, s.gamma, s.alpha, s.beta]
}

fn from_array(a: [f64; 4]) -> StepParams {
    StepParams {
        eta: a[0],
        gamma: a[1],
        alpha: a[2],
        beta: a[3],
    }
}

pub fn softplus(u: f64) -> f64 {
    if u > 30.0 {
        u
    } else {
        u.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `p > 0`.
pub fn softplus_inv(p: f64) -> f64 {
    if p > 30.0 {
        p
    } else {
        p + (-(-p).exp()).ln_1p()
    }
}

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldedModel {
    /// Current parameters; `xi` and `project` apply at inference, training
    /// uses [`UnfoldTrainConfig::clamp`].
    pub schedule: DecoderSchedule,
    /// Per-family switch, in [`FAMILIES`] order.
    pub trainable: [bool; 4],
}

impl UnfoldedModel {
    pub fn new(schedule: DecoderSchedule) -> Result<Self> {
        schedule.validate()?;
        Ok(UnfoldedModel {
            schedule,
            trainable: [true; 4],
        })
    }

    pub fn depth(&self) -> usize {
        self.schedule.len()
    }
}

fn check_sample(h: &ParityCheckMatrix, s: &UnfoldSample) -> Result<()> {
    check_len(h.n(), s.channel.input_dim())?;
    check_len(h.n(), s.x.len())?;
    check_len(h.n(), s.x0.len())?;
    check_len(s.channel.output_dim(), s.y.len())
}

/// Forward pass; returns every state when `keep` is set, otherwise just
/// the last.
fn unroll(
    h: &ParityCheckMatrix,
    steps: &[StepParams],
    s: &UnfoldSample,
    clamp: Option<f64>,
    keep: bool,
) -> Result<Vec<Vec<f64>>> {
    let mut cur = s.x0.clone();
    let mut ws = Workspace::new(cur.len());
    let mut states = Vec::new();
    if keep {
        states.reserve(steps.len() + 1);
        states.push(cur.clone());
    }
    for (k, st) in steps.iter().enumerate() {
        gf_step(&mut cur, &s.y, s.channel.as_ref(), h, st, clamp, k, &mut ws)?;
        if keep {
            states.push(cur.clone());
        }
    }
    if !keep {
        states.push(cur);
    }
    Ok(states)
}

fn sq_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum()
}

/// `(1/D) sum_d |s^(U)(y_d) - x_d|^2`, projecting onto `[-xi, xi]` after
/// each step when `clamp` is `Some(xi)`. Steps are used as given, so zero
/// step sizes are allowed.
pub fn unfolded_loss(
    steps: &[StepParams],
    h: &ParityCheckMatrix,
    batch: &[UnfoldSample],
    clamp: Option<f64>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    for s in batch {
        check_sample(h, s)?;
    }
    let per = map_collect(batch.iter().collect(), |s| {
        unroll(h, steps, s, clamp, false).map(|st| sq_err(&st[0], &s.x))
    });
    let mut total = 0.0;
    for r in per {
        total += r?;
    }
    Ok(total / batch.len() as f64)
}

fn sample_grad(
    h: &ParityCheckMatrix,
    steps: &[StepParams],
    s: &UnfoldSample,
    clamp: Option<f64>,
    scale: f64,
) -> Result<(f64, Vec<[f64; 4]>)> {
    let states = unroll(h, steps, s, clamp, true)?;
    let n = s.x.len();
    let last = states.last().unwrap();
    let loss = sq_err(last, &s.x);
    let mut a: Vec<f64> = last.iter().zip(&s.x).map(|(u, v)| 2.0 * scale * (u - v)).collect();
    let mut grads = vec![[0.0; 4]; steps.len()];
    let (mut g, mut b, mut p) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let (mut jg, mut hb, mut hp) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut scratch = Scratch::default();
    for k in (0..steps.len()).rev() {
        let st = &steps[k];
        let sk = &states[k];
        if let Some(xi) = clamp {
            for (aj, v) in a.iter_mut().zip(&states[k + 1]) {
                if !(v.abs() < xi) {
                    *aj = 0.0;
                }
            }
        }
        s.channel.grad_into(sk, &s.y, &mut g);
        grad_parts_into(sk, h, &mut b, &mut p, &mut scratch);
        let (mut ag, mut ab, mut ap) = (0.0, 0.0, 0.0);
        for j in 0..n {
            ag += a[j] * g[j];
            ab += a[j] * b[j];
            ap += a[j] * p[j];
        }
        let pen = st.alpha * ab + st.beta * ap;
        grads[k] = [
            -(ag + st.gamma * pen),
            -st.eta * pen,
            -st.eta * st.gamma * ab,
            -st.eta * st.gamma * ap,
        ];
        s.channel.grad_vjp_into(sk, &s.y, &a, &mut jg);
        hessian_vec_parts_into(sk, &a, h, &mut hb, &mut hp, &mut scratch);
        for j in 0..n {
            a[j] -= st.eta * (jg[j] + st.gamma * (st.alpha * hb[j] + st.beta * hp[j]));
        }
    }
    Ok((loss * scale, grads))
}

/// Loss and its gradient with respect to every step parameter, as
/// `[d eta, d gamma, d alpha, d beta]` per iteration.
pub fn unfolded_loss_grad(
    steps: &[StepParams],
    h: &ParityCheckMatrix,
    batch: &[UnfoldSample],
    clamp: Option<f64>,
) -> Result<(f64, Vec<[f64; 4]>)> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    for s in batch {
        check_sample(h, s)?;
    }
    let scale = 1.0 / batch.len() as f64;
    let per = map_collect(batch.iter().collect(), |s| sample_grad(h, steps, s, clamp, scale));
    let mut loss = 0.0;
    let mut grads = vec![[0.0; 4]; steps.len()];
    for r in per {
        let (l, g) = r?;
        loss += l;
        for (acc, gk) in grads.iter_mut().zip(&g) {
            for f in 0..4 {
                acc[f] += gk[f];
            }
        }
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnfoldTrainConfig {
    pub lr: f64,
    /// Updates per stage; a stage is the whole model, or one added layer
    /// when `incremental` is set.
    pub iterations: usize,
    pub incremental: bool,
    /// Give up after this many learning-rate halvings.
    pub max_halvings: usize,
    /// Projection bound used during training; `None` trains unprojected.
    pub clamp: Option<f64>,
}

impl Default for UnfoldTrainConfig {
    fn default() -> Self {
        UnfoldTrainConfig {
            lr: 1e-3,
            iterations: 100,
            incremental: false,
            max_halvings: 8,
            clamp: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UnfoldReport {
    /// Loss before each update of the final stage.
    pub losses: Vec<f64>,
    /// Number of learning-rate halvings caused by divergence.
    pub halvings: usize,
    pub final_lr: f64,
}

/// Trains `model` on batches drawn from `next_batch`.
///
/// With `incremental`, layers `1..=t` are trained for `t = 1..U` in turn,
/// each stage on the loss of the truncated decoder. A diverging update is
/// rolled back and the learning rate halved.
pub fn train_unfolded(
    model: &mut UnfoldedModel,
    h: &ParityCheckMatrix,
    next_batch: &mut dyn FnMut(&mut dyn RngCore) -> Result<Vec<UnfoldSample>>,
    cfg: UnfoldTrainConfig,
    rng: &mut dyn RngCore,
) -> Result<UnfoldReport> {
    if !(cfg.lr > 0.0) {
        return Err(Error::InvalidParameter(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    let depth = model.depth();
    let mut raw: Vec<f64> = model
        .schedule
        .steps
        .iter()
        .flat_map(|s| to_array(s).map(softplus_inv))
        .collect();
    let mut report = UnfoldReport {
        final_lr: cfg.lr,
        ..Default::default()
    };
    let stages: Vec<usize> = if cfg.incremental {
        (1..=depth).collect()
    } else {
        vec![depth]
    };
    let mut total_iter = 0;
    for &t in &stages {
        let mut opt = Adam::new(4 * t, report.final_lr);
        report.losses.clear();
        let mut it = 0;
        while it < cfg.iterations {
            total_iter += 1;
            let batch = next_batch(rng)?;
            let steps = &model.schedule.steps[..t];
            let outcome = unfolded_loss_grad(steps, h, &batch, cfg.clamp);
            let (loss, grads) = match outcome {
                Ok((l, g)) if l.is_finite() => (l, g),
                Ok(_) | Err(Error::Divergence { .. }) => {
                    report.halvings += 1;
                    if report.halvings > cfg.max_halvings {
                        return Err(Error::TrainingDiverged { iteration: total_iter });
                    }
                    report.final_lr /= 2.0;
                    opt = Adam::new(4 * t, report.final_lr);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let mut flat = vec![0.0; 4 * t];
            for k in 0..t {
                for f in 0..4 {
                    if model.trainable[f] {
                        flat[4 * k + f] = grads[k][f] * sigmoid(raw[4 * k + f]);
                    }
                }
            }
            let before = raw[..4 * t].to_vec();
            opt.step(&mut raw[..4 * t], &flat);
            let mut bad = false;
            for k in 0..t {
                let mut vals = [0.0; 4];
                for f in 0..4 {
                    vals[f] = softplus(raw[4 * k + f]);
                    bad |= !(vals[f] > 0.0) || !vals[f].is_finite();
                }
                model.schedule.steps[k] = from_array(vals);
            }
            if bad {
                raw[..4 * t].copy_from_slice(&before);
                for k in 0..t {
                    model.schedule.steps[k] = from_array(std::array::from_fn(|f| softplus(raw[4 * k + f])));
                }
                report.halvings += 1;
                if report.halvings > cfg.max_halvings {
                    return Err(Error::TrainingDiverged { iteration: total_iter });
                }
                report.final_lr /= 2.0;
                opt = Adam::new(4 * t, report.final_lr);
                continue;
            }
            report.losses.push(loss);
            it += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::AwgnChannel;
    use crate::code::parse_alist;
    use crate::decoder::{gf_decode, DecodeOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn appendix() -> ParityCheckMatrix {
        parse_alist(include_str!("../../../codes/appendix_3x6.alist")).unwrap()
    }

    const CW: [f64; 6] = [1.0, -1.0, -1.0, -1.0, 1.0, -1.0];

    fn awgn_batch(r: &mut ChaCha8Rng, d: usize, noise: f64) -> Vec<UnfoldSample> {
        let ch: Arc<dyn ChannelGradient> = Arc::new(AwgnChannel::new(6, 1.0).unwrap());
        (0..d)
            .map(|_| UnfoldSample {
                x: CW.to_vec(),
                y: CW.iter().map(|v| v + noise * r.random_range(-1.0..1.0)).collect(),
                x0: (0..6).map(|_| 0.1 * r.random_range(-1.0..1.0)).collect(),
                channel: ch.clone(),
            })
            .collect()
    }

    fn step(eta: f64, gamma: f64, alpha: f64, beta: f64) -> StepParams {
        StepParams { eta, gamma, alpha, beta }
    }

    #[test]
    fn softplus_round_trip() {
        for p in [1e-4, 0.01, 0.5, 1.0, 7.0, 40.0] {
            assert!((softplus(softplus_inv(p)) - p).abs() < 1e-12 * (1.0 + p));
        }
    }

    #[test]
    fn noiseless_fixed_point_has_zero_loss() {
        let h = appendix();
        let ch: Arc<dyn ChannelGradient> = Arc::new(AwgnChannel::new(6, 1.0).unwrap());
        let s = UnfoldSample {
            x: CW.to_vec(),
            y: CW.to_vec(),
            x0: CW.to_vec(),
            channel: ch,
        };
        let steps = vec![step(0.1, 1.0, 1.0, 2.0), step(0.3, 0.5, 2.0, 1.0)];
        assert_eq!(unfolded_loss(&steps, &h, &[s], None).unwrap(), 0.0);
    }

    #[test]
    fn zero_steps_keep_x0() {
        let h = appendix();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let batch = awgn_batch(&mut r, 4, 0.5);
        let steps = vec![step(0.0, 1.0, 1.0, 1.0); 3];
        let want: f64 = batch.iter().map(|s| sq_err(&s.x0, &s.x)).sum::<f64>() / 4.0;
        assert!((unfolded_loss(&steps, &h, &batch, None).unwrap() - want).abs() < 1e-14);
    }

    fn check_adjoint(clamp: Option<f64>, seed: u64) {
        let h = appendix();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let batch = awgn_batch(&mut r, 3, 0.8);
        let steps: Vec<StepParams> = (0..5)
            .map(|_| {
                step(
                    r.random_range(0.05..0.2),
                    r.random_range(0.5..1.5),
                    r.random_range(0.5..1.5),
                    r.random_range(0.5..2.0),
                )
            })
            .collect();
        let (loss, g) = unfolded_loss_grad(&steps, &h, &batch, clamp).unwrap();
        assert!((loss - unfolded_loss(&steps, &h, &batch, clamp).unwrap()).abs() < 1e-12);
        for k in 0..5 {
            for f in 0..4 {
                let eps = 1e-6;
                let mut sp = steps.clone();
                let mut a = to_array(&sp[k]);
                a[f] += eps;
                sp[k] = from_array(a);
                let lp = unfolded_loss(&sp, &h, &batch, clamp).unwrap();
                a[f] -= 2.0 * eps;
                sp[k] = from_array(a);
                let lm = unfolded_loss(&sp, &h, &batch, clamp).unwrap();
                let fd = (lp - lm) / (2.0 * eps);
                assert!(
                    (fd - g[k][f]).abs() <= 1e-3 * fd.abs().max(1e-6),
                    "k={k} {}: {fd} vs {}",
                    FAMILIES[f],
                    g[k][f]
                );
            }
        }
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        check_adjoint(None, 2);
    }

    #[test]
    fn projected_adjoint_matches_finite_differences() {
        check_adjoint(Some(1.05), 12);
    }

    #[test]
    fn clamp_masks_saturated_coordinates() {
        // every state pinned at the bound: no parameter can move the output
        let h = appendix();
        let ch: Arc<dyn ChannelGradient> = Arc::new(AwgnChannel::new(6, 1.0).unwrap());
        let s = UnfoldSample {
            x: vec![0.0; 6],
            y: CW.iter().map(|v| 50.0 * v).collect(),
            x0: CW.iter().map(|v| 1.2 * v).collect(),
            channel: ch,
        };
        let steps = vec![step(0.1, 1.0, 1.0, 1.0); 3];
        let (_, g) = unfolded_loss_grad(&steps, &h, &[s], Some(1.2)).unwrap();
        assert!(g.iter().flatten().all(|v| *v == 0.0), "{g:?}");
    }

    #[test]
    fn untrained_model_reproduces_plain_decoder() {
        let h = appendix();
        let sched = DecoderSchedule::constant(20, step(0.1, 1.0, 1.0, 2.0), 1.5, true).unwrap();
        let model = UnfoldedModel::new(sched.clone()).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let s = &awgn_batch(&mut r, 1, 0.7)[0];
        let a = gf_decode(&s.y, s.channel.as_ref(), &h, &sched, &s.x0, DecodeOptions::default()).unwrap();
        let b = gf_decode(&s.y, s.channel.as_ref(), &h, &model.schedule, &s.x0, DecodeOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_reduces_loss_and_respects_freezing() {
        let h = appendix();
        let sched = DecoderSchedule::constant(8, step(0.05, 1.0, 1.0, 1.0), 1.5, true).unwrap();
        let mut model = UnfoldedModel::new(sched).unwrap();
        model.trainable = [true, true, false, true];
        let mut data = ChaCha8Rng::seed_from_u64(4);
        let mut next = |_: &mut dyn RngCore| Ok(awgn_batch(&mut data, 16, 0.6));
        let cfg = UnfoldTrainConfig {
            lr: 0.02,
            iterations: 150,
            ..Default::default()
        };
        let rep = train_unfolded(&mut model, &h, &mut next, cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let first: f64 = rep.losses[..15].iter().sum::<f64>() / 15.0;
        let last: f64 = rep.losses[135..].iter().sum::<f64>() / 15.0;
        assert!(last < first, "{first} -> {last}");
        assert!(model.schedule.steps.iter().all(|s| s.alpha == 1.0));
        assert!(model.schedule.steps.iter().any(|s| s.eta != 0.05));
    }

    #[test]
    fn incremental_training_runs_every_stage() {
        let h = appendix();
        let sched = DecoderSchedule::constant(3, step(0.05, 1.0, 1.0, 1.0), 1.5, true).unwrap();
        let mut model = UnfoldedModel::new(sched).unwrap();
        let mut data = ChaCha8Rng::seed_from_u64(6);
        let mut calls = 0;
        let mut next = |_: &mut dyn RngCore| {
            calls += 1;
            Ok(awgn_batch(&mut data, 4, 0.6))
        };
        let cfg = UnfoldTrainConfig {
            lr: 0.01,
            iterations: 5,
            incremental: true,
            ..Default::default()
        };
        let rep = train_unfolded(&mut model, &h, &mut next, cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(rep.losses.len(), 5);
        assert_eq!(calls, 15);
    }

    #[test]
    fn divergence_halves_learning_rate() {
        let h = appendix();
        let sched = DecoderSchedule::constant(4, step(0.05, 1.0, 1.0, 1.0), 1.5, true).unwrap();
        let mut model = UnfoldedModel::new(sched).unwrap();
        let mut data = ChaCha8Rng::seed_from_u64(8);
        let mut next = |_: &mut dyn RngCore| Ok(awgn_batch(&mut data, 4, 0.6));
        // a huge rate pushes eta far enough for the unroll to blow up
        let cfg = UnfoldTrainConfig {
            lr: 50.0,
            iterations: 20,
            ..Default::default()
        };
        match train_unfolded(&mut model, &h, &mut next, cfg, &mut ChaCha8Rng::seed_from_u64(9)) {
            Ok(rep) => assert!(rep.halvings > 0 && rep.final_lr < 50.0),
            Err(Error::TrainingDiverged { .. }) => {}
            Err(e) => panic!("unexpected error {e}"),
        }
    }
}
