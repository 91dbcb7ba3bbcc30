//! Browser bindings for the interactive demo in `www/`.
//!
//! Every exported function has a plain-Rust twin returning `Result<_, String>`
//! so the logic can be tested natively.

use gfdecode::channel::{snr_convert, AwgnChannel, SnrMode};
use gfdecode::code::{gf2_nullspace, parse_alist, random_codeword, ParityCheckMatrix};
use gfdecode::decoder::{
    euler_decode, evaluate_objective, DecodeOptions, DecoderSchedule, EulerConfig, StepParams,
};
use gfdecode::potential::PotentialParams;
use gfdecode::score::{correlated2d_sampler, correlated_candidates, train_score, CandidateSampler, ScoreNet, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

const REPETITION: &str = include_str!("../../../codes/repetition2.alist");
const REG36: &str = include_str!("../../../codes/reg36_n204.alist");

fn code(text: &str) -> ParityCheckMatrix {
    parse_alist(text).expect("embedded code parses")
}

fn js(r: Result<Vec<f64>, String>) -> Result<Vec<f64>, JsError> {
    r.map_err(|e| JsError::new(&e))
}

/// Flow on the length-2 repetition code from `(x1, x2)` towards the
/// observation `(y1, y2)`. Returns the flattened states `[x1, x2, x1, x2, ...]`.
pub fn repetition_flow(
    y: [f64; 2],
    start: [f64; 2],
    gamma: f64,
    steps: usize,
    eta: f64,
    xi: Option<f64>,
) -> Result<Vec<f64>, String> {
    let h = code(REPETITION);
    let ch = AwgnChannel::new(2, 1.0).expect("unit variance is valid");
    let step = StepParams {
        eta,
        gamma,
        alpha: 1.0,
        beta: 1.0,
    };
    let sched = DecoderSchedule::constant(steps, step, xi.unwrap_or(1.5), xi.is_some()).map_err(|e| e.to_string())?;
    let tr = euler_decode(&y, &ch, &h, &sched, &start, None, DecodeOptions::default()).map_err(|e| e.to_string())?;
    Ok(tr.states.concat())
}

/// Objective `L + gamma h` on a `res x res` grid over `[lo, hi]^2`.
/// Row 0 is the top of the plot (`x2 = hi`), column 0 is `x1 = lo`.
pub fn repetition_energy(y: [f64; 2], gamma: f64, lo: f64, hi: f64, res: usize) -> Result<Vec<f64>, String> {
    if res < 2 || !(hi > lo) {
        return Err("grid needs res >= 2 and hi > lo".into());
    }
    let h = code(REPETITION);
    let ch = AwgnChannel::new(2, 1.0).expect("unit variance is valid");
    let d = (hi - lo) / (res - 1) as f64;
    let mut out = Vec::with_capacity(res * res);
    for r in 0..res {
        for c in 0..res {
            let x = [lo + c as f64 * d, hi - r as f64 * d];
            let o = evaluate_objective(&x, &y, &ch, &h, gamma, PotentialParams::default()).map_err(|e| e.to_string())?;
            out.push(o.value);
        }
    }
    Ok(out)
}

/// Sends a random codeword of the (3,6)-regular n=204 code over BPSK/AWGN
/// and decodes it with `bins` Euler steps over horizon 10. Returns
/// `[errors_0, objective_0, errors_1, objective_1, ...]`.
pub fn ldpc_run(ebn0_db: f64, seed: u64, bins: usize, gamma: f64, beta: f64) -> Result<Vec<f64>, String> {
    let h = code(REG36);
    let basis = gf2_nullspace(&h);
    let sigma2 = snr_convert(SnrMode::AwgnEbN0 { rate: h.design_rate() }, ebn0_db).map_err(|e| e.to_string())?;
    let ch = AwgnChannel::new(h.n(), sigma2).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_codeword(&basis, &mut rng);
    let y = ch.transmit(&x, &mut rng);
    let euler = EulerConfig::new(10.0, bins).map_err(|e| e.to_string())?;
    let p = PotentialParams::new(1.0, beta).map_err(|e| e.to_string())?;
    let sched = DecoderSchedule::euler(euler, gamma, p).map_err(|e| e.to_string())?;
    let x0 = vec![0.0; h.n()];
    let tr = euler_decode(&y, &ch, &h, &sched, &x0, Some(&x), DecodeOptions::default()).map_err(|e| e.to_string())?;
    let errs = tr.errors_vs_reference.expect("reference supplied");
    Ok(errs.iter().zip(&tr.objective).flat_map(|(&e, &o)| [e as f64, o]).collect())
}

#[wasm_bindgen(js_name = repetitionFlow)]
#[allow(clippy::too_many_arguments)]
pub fn repetition_flow_js(
    y1: f64,
    y2: f64,
    x1: f64,
    x2: f64,
    gamma: f64,
    steps: usize,
    eta: f64,
    xi: f64,
) -> Result<Vec<f64>, JsError> {
    // xi <= 0 turns the box projection off
    let xi = (xi > 0.0).then_some(xi);
    js(repetition_flow([y1, y2], [x1, x2], gamma, steps, eta, xi))
}

#[wasm_bindgen(js_name = repetitionEnergy)]
pub fn repetition_energy_js(y1: f64, y2: f64, gamma: f64, lo: f64, hi: f64, res: usize) -> Result<Vec<f64>, JsError> {
    js(repetition_energy([y1, y2], gamma, lo, hi, res))
}

#[wasm_bindgen(js_name = ldpcRun)]
pub fn ldpc_run_js(ebn0_db: f64, seed: u32, bins: usize, gamma: f64, beta: f64) -> Result<Vec<f64>, JsError> {
    js(ldpc_run(ebn0_db, seed.into(), bins, gamma, beta))
}

/// Score network trained in the page on correlated two-dimensional errors.
#[wasm_bindgen]
pub struct ScoreDemo {
    net: ScoreNet,
    sampler: CandidateSampler,
    points: Vec<[f64; 2]>,
    rng: ChaCha8Rng,
    sigma: f64,
}

impl ScoreDemo {
    pub fn create(seed: u64, hidden: usize, spread: f64, width: f64, sigma: f64) -> Result<ScoreDemo, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = correlated_candidates(200, spread, width, &mut rng);
        let sampler = correlated2d_sampler(points.clone()).map_err(|e| e.to_string())?;
        let net = ScoreNet::default_architecture(2, hidden, &mut rng).map_err(|e| e.to_string())?;
        Ok(ScoreDemo {
            net,
            sampler,
            points,
            rng,
            sigma,
        })
    }

    /// Runs `iterations` more training steps and returns their mean loss.
    pub fn step(&mut self, iterations: usize) -> Result<f64, String> {
        let cfg = TrainConfig {
            iterations,
            sigma: self.sigma,
            ..TrainConfig::default()
        };
        let losses = train_score(&mut self.net, &self.sampler, cfg, &mut self.rng).map_err(|e| e.to_string())?;
        Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
    }

    /// Network output on a `res x res` grid over `[lo, hi]^2`, same layout
    /// as `repetition_energy`, as `[e1, e2, s1, s2]` per cell.
    pub fn grid(&self, lo: f64, hi: f64, res: usize) -> Result<Vec<f64>, String> {
        if res < 2 || !(hi > lo) {
            return Err("grid needs res >= 2 and hi > lo".into());
        }
        let d = (hi - lo) / (res - 1) as f64;
        let mut out = Vec::with_capacity(4 * res * res);
        for r in 0..res {
            for c in 0..res {
                let e = [lo + c as f64 * d, hi - r as f64 * d];
                let s = self.net.forward(&e).map_err(|e| e.to_string())?;
                out.extend([e[0], e[1], s[0], s[1]]);
            }
        }
        Ok(out)
    }
}

#[wasm_bindgen]
impl ScoreDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, hidden: usize, spread: f64, width: f64, sigma: f64) -> Result<ScoreDemo, JsError> {
        Self::create(seed.into(), hidden, spread, width, sigma).map_err(|e| JsError::new(&e))
    }

    pub fn train(&mut self, iterations: usize) -> Result<f64, JsError> {
        self.step(iterations).map_err(|e| JsError::new(&e))
    }

    pub fn field(&self, lo: f64, hi: f64, res: usize) -> Result<Vec<f64>, JsError> {
        js(self.grid(lo, hi, res))
    }

    /// Candidate error points, flattened.
    pub fn candidates(&self) -> Vec<f64> {
        self.points.concat()
    }
}
