//! Euler-discretized gradient-flow decoding.
//!
//! One iteration is
//! `s <- P(s - eta (grad L(s; y) + gamma grad h(s)))`
//! where `P` is the box projection onto `[-xi, xi]^n` (or the identity).

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::channel::ChannelGradient;
use crate::code::{check_parity, sign_decision, BipolarWord, ParityCheckMatrix};
use crate::error::{check_len, Error, Result};
use crate::potential::{code_energy, grad_parts_into, PotentialParams, Scratch};

/// States whose magnitude exceeds this abort the decode.
pub const DIVERGENCE_BOUND: f64 = 1e6;

/// Default box half-width for projected decoding.
pub const DEFAULT_XI: f64 = 1.5;

/// Parameters of one decoder iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepParams {
    pub eta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl StepParams {
    pub fn potential(&self) -> PotentialParams {
        PotentialParams {
            alpha: self.alpha,
            beta: self.beta,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderSchedule {
    pub steps: Vec<StepParams>,
    pub xi: f64,
    pub project: bool,
}

impl DecoderSchedule {
    /// `iters` copies of the same step.
    pub fn constant(iters: usize, step: StepParams, xi: f64, project: bool) -> Result<Self> {
        let s = DecoderSchedule {
            steps: vec![step; iters],
            xi,
            project,
        };
        s.validate()?;
        Ok(s)
    }

    /// Unprojected Euler integration of the flow with step `T/N`.
    pub fn euler(cfg: EulerConfig, gamma: f64, p: PotentialParams) -> Result<Self> {
        cfg.validate()?;
        Self::constant(
            cfg.bins,
            StepParams {
                eta: cfg.eta(),
                gamma,
                alpha: p.alpha,
                beta: p.beta,
            },
            DEFAULT_XI,
            false,
        )
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::InvalidParameter("schedule needs at least one iteration".into()));
        }
        for (k, s) in self.steps.iter().enumerate() {
            let ok = s.eta > 0.0 && s.gamma >= 0.0 && s.alpha >= 0.0 && s.beta >= 0.0;
            if !ok || !(s.eta + s.gamma + s.alpha + s.beta).is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "iteration {k}: need eta > 0 and gamma, alpha, beta >= 0, got {s:?}"
                )));
            }
        }
        if self.project && !(self.xi > 1.0) {
            return Err(Error::InvalidParameter(format!("xi must exceed 1, got {}", self.xi)));
        }
        Ok(())
    }

    /// Reads the `k,eta,gamma,alpha,beta` CSV used for trained schedules.
    pub fn from_csv(text: &str, xi: f64, project: bool) -> Result<Self> {
        let mut steps = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.starts_with('k')) {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(Error::Format(format!("schedule line {}: expected 5 fields", lineno + 1)));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::Format(format!("schedule line {}: {e}", lineno + 1)))
            };
            let k: usize = f[0]
                .parse()
                .map_err(|e| Error::Format(format!("schedule line {}: {e}", lineno + 1)))?;
            if k != steps.len() + 1 {
                return Err(Error::Format(format!(
                    "schedule line {}: iteration {k} out of order",
                    lineno + 1
                )));
            }
            steps.push(StepParams {
                eta: num(f[1])?,
                gamma: num(f[2])?,
                alpha: num(f[3])?,
                beta: num(f[4])?,
            });
        }
        let s = DecoderSchedule { steps, xi, project };
        s.validate()?;
        Ok(s)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,eta,gamma,alpha,beta\n");
        for (k, s) in self.steps.iter().enumerate() {
            out.push_str(&format!("{},{},{},{},{}\n", k + 1, s.eta, s.gamma, s.alpha, s.beta));
        }
        out
    }
}

/// Horizon `T` split into `N` uniform bins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerConfig {
    pub horizon: f64,
    pub bins: usize,
}

impl EulerConfig {
    pub fn new(horizon: f64, bins: usize) -> Result<Self> {
        let c = EulerConfig { horizon, bins };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) || self.bins == 0 {
            return Err(Error::InvalidParameter(format!(
                "need T > 0 and N >= 1, got T={}, N={}",
                self.horizon, self.bins
            )));
        }
        Ok(())
    }

    pub fn eta(&self) -> f64 {
        self.horizon / self.bins as f64
    }
}

impl Default for EulerConfig {
    fn default() -> Self {
        EulerConfig {
            horizon: 10.0,
            bins: 1000,
        }
    }
}

/// Starting point of the recursion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialPoint {
    Zero,
    Observation,
    Gaussian { std: f64 },
}

impl InitialPoint {
    /// `y` is only consulted for [`InitialPoint::Observation`], and must then
    /// have length `n`.
    pub fn draw<R: Rng + ?Sized>(&self, n: usize, y: &[f64], rng: &mut R) -> Vec<f64> {
        match *self {
            InitialPoint::Zero => vec![0.0; n],
            InitialPoint::Observation => y[..n].to_vec(),
            InitialPoint::Gaussian { std } => {
                let d = Normal::new(0.0, std).expect("nonnegative std");
                (0..n).map(|_| d.sample(rng)).collect()
            }
        }
    }
}

/// Objective value and whether the channel part was unavailable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub value: f64,
    /// True when the channel could not report `L`, so `value` holds only
    /// the penalty `gamma h`.
    pub partial: bool,
}

pub fn evaluate_objective(
    x: &[f64],
    y: &[f64],
    channel: &dyn ChannelGradient,
    h: &ParityCheckMatrix,
    gamma: f64,
    p: PotentialParams,
) -> Result<Objective> {
    channel.check_dims(x, y)?;
    let pen = gamma * code_energy(x, h, p)?;
    Ok(match channel.value(x, y) {
        Some(l) => Objective {
            value: l + pen,
            partial: false,
        },
        None => Objective {
            value: pen,
            partial: true,
        },
    })
}

pub fn project_box(x: &[f64], xi: f64) -> Vec<f64> {
    x.iter().map(|v| v.clamp(-xi, xi)).collect()
}

/// Buffers reused across iterations.
#[derive(Debug, Default, Clone)]
pub struct Workspace {
    g: Vec<f64>,
    b: Vec<f64>,
    p: Vec<f64>,
    scratch: Scratch,
}

impl Workspace {
    pub fn new(n: usize) -> Self {
        Workspace {
            g: vec![0.0; n],
            b: vec![0.0; n],
            p: vec![0.0; n],
            scratch: Scratch::default(),
        }
    }
}

/// Applies one iteration in place. `k` is only used for error reporting.
/// Dimensions are assumed checked.
#[allow(clippy::too_many_arguments)]
pub fn gf_step(
    s: &mut [f64],
    y: &[f64],
    channel: &dyn ChannelGradient,
    h: &ParityCheckMatrix,
    step: &StepParams,
    clamp: Option<f64>,
    k: usize,
    ws: &mut Workspace,
) -> Result<()> {
    channel.grad_into(s, y, &mut ws.g);
    grad_parts_into(s, h, &mut ws.b, &mut ws.p, &mut ws.scratch);
    let ga = step.gamma * step.alpha;
    let gb = step.gamma * step.beta;
    let mut bad = false;
    for j in 0..s.len() {
        let mut v = s[j] - step.eta * (ws.g[j] + ga * ws.b[j] + gb * ws.p[j]);
        if let Some(xi) = clamp {
            v = v.clamp(-xi, xi);
        }
        bad |= !(v.abs() <= DIVERGENCE_BOUND);
        s[j] = v;
    }
    if bad {
        return Err(Error::Divergence { iteration: k + 1 });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DecodeOptions {
    /// Stop as soon as the hard decision satisfies every check.
    pub early_stop: bool,
}

/// Final state of a decode without the trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutcome {
    pub state: Vec<f64>,
    pub decision: BipolarWord,
    pub iterations: usize,
}

fn check_inputs(
    y: &[f64],
    channel: &dyn ChannelGradient,
    h: &ParityCheckMatrix,
    schedule: &DecoderSchedule,
    x0: &[f64],
) -> Result<()> {
    schedule.validate()?;
    check_len(h.n(), channel.input_dim())?;
    channel.check_dims(x0, y)?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("x0 must be finite".into()));
    }
    Ok(())
}

fn parity_ok(s: &[f64], h: &ParityCheckMatrix) -> bool {
    h.rows()
        .iter()
        .all(|row| row.iter().filter(|&&j| s[j] < 0.0).count() % 2 == 0)
}

/// Runs the recursion and returns only the final state.
pub fn gf_decode(
    y: &[f64],
    channel: &dyn ChannelGradient,
    h: &ParityCheckMatrix,
    schedule: &DecoderSchedule,
    x0: &[f64],
    opts: DecodeOptions,
) -> Result<DecodeOutcome> {
    check_inputs(y, channel, h, schedule, x0)?;
    let clamp = schedule.project.then_some(schedule.xi);
    let mut s = x0.to_vec();
    let mut ws = Workspace::new(s.len());
    let mut iterations = 0;
    for (k, step) in schedule.steps.iter().enumerate() {
        if opts.early_stop && parity_ok(&s, h) && k > 0 {
            break;
        }
        gf_step(&mut s, y, channel, h, step, clamp, k, &mut ws)?;
        iterations = k + 1;
    }
    Ok(DecodeOutcome {
        decision: sign_decision(&s),
        state: s,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `s^(0), ..., s^(U)`.
    pub states: Vec<Vec<f64>>,
    /// Cumulative step size at each state.
    pub times: Vec<f64>,
    pub objective: Vec<f64>,
    /// Set when the channel has no likelihood value and `objective` is the
    /// penalty alone.
    pub objective_partial: bool,
    pub errors_vs_reference: Option<Vec<usize>>,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory holds at least x0")
    }

    pub fn decision(&self) -> BipolarWord {
        sign_decision(self.final_state())
    }

    /// Writes `iter,t,objective,bit_errors,s_1..s_n`. `bit_errors` is empty
    /// when no reference word was supplied.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.states.first().map_or(0, Vec::len);
        write!(w, "iter,t,objective,bit_errors")?;
        for j in 1..=n {
            write!(w, ",s_{j}")?;
        }
        writeln!(w)?;
        for (k, s) in self.states.iter().enumerate() {
            write!(w, "{},{},{}", k, self.times[k], self.objective[k])?;
            match &self.errors_vs_reference {
                Some(e) => write!(w, ",{}", e[k])?,
                None => write!(w, ",")?,
            }
            for v in s {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Runs the recursion and records every state.
///
/// When `reference` is given, the Hamming distance between the hard decision
/// and the reference is recorded per state.
#[allow(clippy::too_many_arguments)]
pub fn euler_decode(
    y: &[f64],
    channel: &dyn ChannelGradient,
    h: &ParityCheckMatrix,
    schedule: &DecoderSchedule,
    x0: &[f64],
    reference: Option<&BipolarWord>,
    opts: DecodeOptions,
) -> Result<Trajectory> {
    check_inputs(y, channel, h, schedule, x0)?;
    if let Some(r) = reference {
        check_len(h.n(), r.len())?;
    }
    let clamp = schedule.project.then_some(schedule.xi);
    let n = x0.len();
    let mut ws = Workspace::new(n);
    let mut s = x0.to_vec();
    let mut partial = false;
    let mut objective_at = |s: &[f64], k: usize| -> Result<f64> {
        let st = schedule.steps[k.min(schedule.len() - 1)];
        let o = evaluate_objective(s, y, channel, h, st.gamma, st.potential())?;
        partial |= o.partial;
        Ok(o.value)
    };
    let errors = |s: &[f64]| reference.map(|r| sign_decision(s).hamming_distance(r));

    let mut states = vec![s.clone()];
    let mut times = vec![0.0];
    let mut objective = vec![objective_at(&s, 0)?];
    let mut errs: Vec<usize> = errors(&s).into_iter().collect();
    let mut t = 0.0;
    for (k, step) in schedule.steps.iter().enumerate() {
        if opts.early_stop && k > 0 && parity_ok(&s, h) {
            break;
        }
        gf_step(&mut s, y, channel, h, step, clamp, k, &mut ws)?;
        t += step.eta;
        states.push(s.clone());
        times.push(t);
        objective.push(objective_at(&s, k + 1)?);
        errs.extend(errors(&s));
    }
    Ok(Trajectory {
        states,
        times,
        objective,
        objective_partial: partial,
        errors_vs_reference: reference.map(|_| errs),
    })
}

/// Euler integration of the flow with step `T/N`, sampled at the ticks
/// nearest to `sample_times`.
#[allow(clippy::too_many_arguments)]
pub fn continuous_solve(
    y: &[f64],
    channel: &dyn ChannelGradient,
    h: &ParityCheckMatrix,
    gamma: f64,
    p: PotentialParams,
    cfg: EulerConfig,
    x0: &[f64],
    sample_times: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let schedule = DecoderSchedule::euler(cfg, gamma, p)?;
    check_inputs(y, channel, h, &schedule, x0)?;
    let eta = cfg.eta();
    let mut ticks = Vec::with_capacity(sample_times.len());
    for &t in sample_times {
        if !(0.0..=cfg.horizon).contains(&t) {
            return Err(Error::InvalidParameter(format!(
                "sample time {t} outside [0, {}]",
                cfg.horizon
            )));
        }
        ticks.push(((t / eta).round() as usize).min(cfg.bins));
    }
    let last = ticks.iter().copied().max().unwrap_or(0);
    let mut at = vec![None; last + 1];
    let mut s = x0.to_vec();
    let mut ws = Workspace::new(s.len());
    let wanted = |k: usize| ticks.contains(&k);
    if wanted(0) {
        at[0] = Some(s.clone());
    }
    for k in 0..last {
        gf_step(&mut s, y, channel, h, &schedule.steps[k], None, k, &mut ws)?;
        if wanted(k + 1) {
            at[k + 1] = Some(s.clone());
        }
    }
    Ok(ticks
        .iter()
        .map(|&k| at[k].clone().expect("tick recorded"))
        .collect())
}

/// Whether the hard decision of `s` is a codeword.
pub fn decision_is_codeword(s: &[f64], h: &ParityCheckMatrix) -> Result<bool> {
    check_parity(&sign_decision(s), h)
}
