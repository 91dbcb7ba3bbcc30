//! Monte-Carlo BER experiments.
//!
//! A run sweeps an SNR grid. At each point, trials are drawn from
//! independent RNG substreams keyed by `(seed, point, trial)` and decoded in
//! fixed-size batches. Batches may run in parallel, but they are folded into
//! the counters in trial order and the stop rule is checked after every
//! trial. The output therefore depends only on the configuration.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bp::{bp_decode, bp_tensor_decode, build_uv, llr_awgn, mmse_bp_pipeline, EdgeIncidence};
use crate::channel::{
    awgn_transmit, db_to_linear, mmse_detect, sample_mimo, snr_convert, AwgnChannel, ChannelGradient,
    MimoChannel, SnrMode,
};
use crate::code::{gf2_nullspace, parse_alist, random_codeword, sign_decision, BipolarWord, GeneratorBasis, ParityCheckMatrix};
use crate::decoder::{gf_decode, DecodeOptions, DecoderSchedule, EulerConfig, InitialPoint, StepParams, DEFAULT_XI};
use crate::error::{Error, Result};
use crate::par::map_collect;
use crate::potential::PotentialParams;
use crate::score::{correlated2d_sampler, load_candidates_csv, CandidateSampler, LearnedChannel, ScoreNet, SegmentedChannelSpec};
use crate::unfold::UnfoldSample;

/// Observation model of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub enum ChannelSpec {
    Awgn,
    /// Complex `mu x nu` Rayleigh channel; `2 nu` must equal `n`.
    Mimo { mu: usize, nu: usize },
    /// Additive per-segment errors drawn from a candidate list, decoded with
    /// a trained score network.
    Learned { checkpoint: PathBuf, candidates: PathBuf },
}

/// Step size of the discretized decoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    Fixed(f64),
    /// `scale * omega` of each sampled MIMO channel.
    Omega { scale: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum DecoderSpec {
    /// Euler integration of the flow over `[0, T]` in `N` steps.
    Gf {
        euler: EulerConfig,
        gamma: f64,
        potential: PotentialParams,
        project: bool,
        xi: f64,
    },
    /// Constant-parameter discretized decoder.
    Dgf {
        iterations: usize,
        eta: StepSize,
        gamma: f64,
        potential: PotentialParams,
        project: bool,
        xi: f64,
    },
    /// Trained schedule read from a `k,eta,gamma,alpha,beta` CSV, truncated
    /// to `iterations` when given.
    DuDgf {
        schedule: PathBuf,
        iterations: Option<usize>,
        project: bool,
        xi: f64,
    },
    Bp { max_iter: usize },
    BpTensor { max_iter: usize },
    Mmse,
    MmseBp { max_iter: usize },
}

impl DecoderSpec {
    pub fn id(&self) -> &'static str {
        match self {
            DecoderSpec::Gf { .. } => "gf",
            DecoderSpec::Dgf { .. } => "dgf",
            DecoderSpec::DuDgf { .. } => "du-dgf",
            DecoderSpec::Bp { .. } => "bp",
            DecoderSpec::BpTensor { .. } => "bp-tensor",
            DecoderSpec::Mmse => "mmse",
            DecoderSpec::MmseBp { .. } => "mmse+bp",
        }
    }

    fn is_gradient_flow(&self) -> bool {
        matches!(self, DecoderSpec::Gf { .. } | DecoderSpec::Dgf { .. } | DecoderSpec::DuDgf { .. })
    }
}

/// How grid values are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnrConvention {
    /// `Eb/N0` in dB at the design rate (AWGN).
    EbN0,
    /// Linear SNR given in dB (MIMO).
    Snr,
    /// Grid values are labels only (learned channel).
    Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub code: PathBuf,
    pub channel: ChannelSpec,
    pub decoder: DecoderSpec,
    pub snr_db: Vec<f64>,
    pub convention: SnrConvention,
    pub max_blocks: u64,
    pub target_errors: u64,
    /// Trials decoded together; affects speed only.
    pub batch: usize,
    pub early_stop: bool,
    pub init: InitialPoint,
    pub seed: u64,
    pub output: Option<PathBuf>,
    /// Record wall-clock time; off keeps the CSV byte-reproducible.
    pub timing: bool,
}

/// Keys accepted by [`ExperimentConfig::parse`].
pub const EXPERIMENT_KEYS: &[&str] = &[
    "code.path",
    "channel.kind",
    "channel.mu",
    "channel.nu",
    "channel.checkpoint",
    "channel.candidates",
    "decoder.kind",
    "decoder.iterations",
    "decoder.horizon",
    "decoder.bins",
    "decoder.eta",
    "decoder.gamma",
    "decoder.alpha",
    "decoder.beta",
    "decoder.xi",
    "decoder.project",
    "decoder.schedule",
    "decoder.early_stop",
    "decoder.init",
    "decoder.init_std",
    "snr.grid",
    "snr.convention",
    "budget.max_blocks",
    "budget.target_errors",
    "budget.batch",
    "seed",
    "output.path",
    "output.timing",
];

/// Flat `key = value` text with `#` comments. Keys outside the allowed set
/// are rejected.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str, allowed: &[&str]) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), "expected `key = value`"))?;
            let (k, v) = (k.trim(), v.trim());
            if !allowed.contains(&k) {
                return Err(Error::config(k, "unknown key"));
            }
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::config(k, "given twice"));
            }
        }
        Ok(KeyValues { map })
    }

    pub fn str(&self, k: &str) -> Option<&str> {
        self.map.get(k).map(String::as_str)
    }

    pub fn req(&self, k: &str) -> Result<&str> {
        self.str(k).ok_or_else(|| Error::config(k, "required"))
    }

    pub fn num<T: std::str::FromStr>(&self, k: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.str(k) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| Error::config(k, format!("`{v}`: {e}"))),
        }
    }

    pub fn opt_num<T: std::str::FromStr>(&self, k: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.str(k)
            .map(|v| v.parse().map_err(|e| Error::config(k, format!("`{v}`: {e}"))))
            .transpose()
    }

    pub fn flag(&self, k: &str, default: bool) -> Result<bool> {
        match self.str(k) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(Error::config(k, format!("expected true or false, got `{v}`"))),
        }
    }

    pub fn positive(&self, k: &str, default: f64) -> Result<f64> {
        let v = self.num(k, default)?;
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(Error::config(k, "must be positive"))
        }
    }

    pub fn nonneg(&self, k: &str, default: f64) -> Result<f64> {
        let v = self.num(k, default)?;
        if v >= 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(Error::config(k, "must be nonnegative"))
        }
    }

    pub fn count(&self, k: &str, default: usize) -> Result<usize> {
        let v = self.num(k, default)?;
        if v == 0 {
            return Err(Error::config(k, "must be at least 1"));
        }
        Ok(v)
    }
}

impl ExperimentConfig {
    /// Parses the `key = value` format. Relative paths are resolved against
    /// `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        Self::from_fields(&KeyValues::parse(text, EXPERIMENT_KEYS)?, base)
    }

    /// Builds the config from already parsed fields, ignoring keys it does
    /// not know.
    pub fn from_fields(f: &KeyValues, base: &Path) -> Result<Self> {
        let path = |k: &str| -> Result<PathBuf> { Ok(base.join(f.req(k)?)) };

        let channel = match f.req("channel.kind")? {
            "awgn" => ChannelSpec::Awgn,
            "mimo" => {
                let nu: usize = f
                    .opt_num("channel.nu")?
                    .ok_or_else(|| Error::config("channel.nu", "required for mimo"))?;
                let mu = f.opt_num("channel.mu")?.unwrap_or(nu);
                if mu == 0 || nu == 0 {
                    return Err(Error::config("channel.nu", "dimensions must be at least 1"));
                }
                ChannelSpec::Mimo { mu, nu }
            }
            "learned" => ChannelSpec::Learned {
                checkpoint: path("channel.checkpoint")?,
                candidates: path("channel.candidates")?,
            },
            other => return Err(Error::config("channel.kind", format!("unknown channel `{other}`"))),
        };

        let potential = PotentialParams {
            alpha: f.nonneg("decoder.alpha", 1.0)?,
            beta: f.nonneg("decoder.beta", 1.0)?,
        };
        let gamma = f.nonneg("decoder.gamma", 1.0)?;
        let xi = f.num("decoder.xi", DEFAULT_XI)?;
        let kind = f.req("decoder.kind")?;
        let project_default = kind != "gf";
        let project = f.flag("decoder.project", project_default)?;
        if project && !(xi > 1.0) {
            return Err(Error::config("decoder.xi", "must exceed 1 when projecting"));
        }
        let decoder = match kind {
            "gf" => DecoderSpec::Gf {
                euler: EulerConfig {
                    horizon: f.positive("decoder.horizon", 10.0)?,
                    bins: f.count("decoder.bins", 1000)?,
                },
                gamma,
                potential,
                project,
                xi,
            },
            "dgf" => DecoderSpec::Dgf {
                iterations: f.count("decoder.iterations", 100)?,
                eta: match f.str("decoder.eta") {
                    None | Some("omega") => StepSize::Omega { scale: 1.0 },
                    Some(v) if v.ends_with("omega") => {
                        let s = v.trim_end_matches("omega").trim().trim_end_matches('*').trim();
                        let scale: f64 = s
                            .parse()
                            .map_err(|_| Error::config("decoder.eta", format!("bad step `{v}`")))?;
                        if !(scale > 0.0) {
                            return Err(Error::config("decoder.eta", "must be positive"));
                        }
                        StepSize::Omega { scale }
                    }
                    Some(_) => StepSize::Fixed(f.positive("decoder.eta", 0.0)?),
                },
                gamma,
                potential,
                project,
                xi,
            },
            "du-dgf" => DecoderSpec::DuDgf {
                schedule: path("decoder.schedule")?,
                iterations: f.opt_num("decoder.iterations")?,
                project,
                xi,
            },
            "bp" => DecoderSpec::Bp {
                max_iter: f.count("decoder.iterations", 100)?,
            },
            "bp-tensor" => DecoderSpec::BpTensor {
                max_iter: f.count("decoder.iterations", 100)?,
            },
            "mmse" => DecoderSpec::Mmse,
            "mmse+bp" => DecoderSpec::MmseBp {
                max_iter: f.count("decoder.iterations", 100)?,
            },
            other => return Err(Error::config("decoder.kind", format!("unknown decoder `{other}`"))),
        };

        match (&decoder, &channel) {
            (DecoderSpec::Bp { .. } | DecoderSpec::BpTensor { .. }, ChannelSpec::Awgn) => {}
            (DecoderSpec::Bp { .. } | DecoderSpec::BpTensor { .. }, _) => {
                return Err(Error::config("decoder.kind", "bp needs an awgn channel"))
            }
            (DecoderSpec::Mmse | DecoderSpec::MmseBp { .. }, ChannelSpec::Mimo { .. }) => {}
            (DecoderSpec::Mmse | DecoderSpec::MmseBp { .. }, _) => {
                return Err(Error::config("decoder.kind", "mmse needs a mimo channel"))
            }
            (DecoderSpec::Dgf { eta: StepSize::Omega { .. }, .. }, ChannelSpec::Mimo { .. }) => {}
            (DecoderSpec::Dgf { eta: StepSize::Omega { .. }, .. }, _) => {
                return Err(Error::config("decoder.eta", "omega step needs a mimo channel"))
            }
            _ => {}
        }

        let snr_db = f
            .req("snr.grid")?
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::config("snr.grid", format!("`{s}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if snr_db.is_empty() || snr_db.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("snr.grid", "needs finite values"));
        }
        let convention = match (f.str("snr.convention"), &channel) {
            (None, ChannelSpec::Awgn) | (Some("ebn0"), ChannelSpec::Awgn) => SnrConvention::EbN0,
            (None, ChannelSpec::Mimo { .. }) | (Some("snr"), ChannelSpec::Mimo { .. }) => SnrConvention::Snr,
            (None, ChannelSpec::Learned { .. }) | (Some("label"), ChannelSpec::Learned { .. }) => SnrConvention::Label,
            (Some(v), _) => {
                return Err(Error::config("snr.convention", format!("`{v}` does not fit the channel")))
            }
        };

        let init = match f.str("decoder.init") {
            None | Some("zero") => InitialPoint::Zero,
            Some("observation") => InitialPoint::Observation,
            Some("gaussian") => InitialPoint::Gaussian {
                std: f.positive("decoder.init_std", 0.1)?,
            },
            Some(v) => return Err(Error::config("decoder.init", format!("unknown init `{v}`"))),
        };

        Ok(ExperimentConfig {
            code: path("code.path")?,
            channel,
            decoder,
            snr_db,
            convention,
            max_blocks: f.count("budget.max_blocks", 10_000)? as u64,
            target_errors: f.count("budget.target_errors", 200)? as u64,
            batch: f.count("budget.batch", 64)?,
            early_stop: f.flag("decoder.early_stop", false)?,
            init,
            seed: f.num("seed", 1)?,
            output: f.str("output.path").map(|p| base.join(p)),
            timing: f.flag("output.timing", false)?,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }
}

/// One row of the results CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct BerRecord {
    pub snr_db: f64,
    pub blocks: u64,
    pub bits: u64,
    pub bit_errors: u64,
    pub block_errors: u64,
    pub ber: f64,
    pub bler: f64,
    pub decoder: String,
    pub seed: u64,
    pub wall_time_s: f64,
}

pub const CSV_HEADER: [&str; 10] = [
    "snr_db",
    "blocks",
    "bits",
    "bit_errors",
    "block_errors",
    "ber",
    "bler",
    "decoder",
    "seed",
    "wall_time_s",
];

/// Writes the records sorted by `snr_db`.
pub fn emit_csv<W: Write>(records: &[BerRecord], w: W) -> Result<()> {
    let mut sorted: Vec<&BerRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.snr_db.total_cmp(&b.snr_db));
    let mut out = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    out.write_record(CSV_HEADER).map_err(io)?;
    for r in sorted {
        out.write_record([
            r.snr_db.to_string(),
            r.blocks.to_string(),
            r.bits.to_string(),
            r.bit_errors.to_string(),
            r.block_errors.to_string(),
            r.ber.to_string(),
            r.bler.to_string(),
            r.decoder.clone(),
            r.seed.to_string(),
            r.wall_time_s.to_string(),
        ])
        .map_err(io)?;
    }
    out.flush()?;
    Ok(())
}

pub fn emit_csv_file(records: &[BerRecord], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    emit_csv(records, std::io::BufWriter::new(f))
}

/// Resources loaded once per experiment.
pub enum PreparedChannel {
    Awgn,
    Mimo { mu: usize, nu: usize },
    Learned { net: Arc<ScoreNet>, sampler: CandidateSampler },
}

pub enum PreparedDecoder {
    Flow {
        schedule: DecoderSchedule,
        /// Replace every step size by `scale * omega` of the block's channel.
        omega_scale: Option<f64>,
    },
    Bp { max_iter: usize },
    BpTensor { max_iter: usize, ei: Box<EdgeIncidence> },
    Mmse,
    MmseBp { max_iter: usize },
}

/// A loaded experiment ready to run.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub h: Arc<ParityCheckMatrix>,
    pub basis: GeneratorBasis,
    pub channel: PreparedChannel,
    pub decoder: PreparedDecoder,
}

fn flow_schedule(spec: &DecoderSpec) -> Result<Option<(DecoderSchedule, Option<f64>)>> {
    Ok(Some(match spec {
        DecoderSpec::Gf {
            euler,
            gamma,
            potential,
            project,
            xi,
        } => {
            let mut s = DecoderSchedule::euler(*euler, *gamma, *potential)?;
            s.project = *project;
            s.xi = *xi;
            (s, None)
        }
        DecoderSpec::Dgf {
            iterations,
            eta,
            gamma,
            potential,
            project,
            xi,
        } => {
            let (eta0, scale) = match *eta {
                StepSize::Fixed(e) => (e, None),
                StepSize::Omega { scale } => (1.0, Some(scale)),
            };
            let step = StepParams {
                eta: eta0,
                gamma: *gamma,
                alpha: potential.alpha,
                beta: potential.beta,
            };
            (DecoderSchedule::constant(*iterations, step, *xi, *project)?, scale)
        }
        DecoderSpec::DuDgf {
            schedule,
            iterations,
            project,
            xi,
        } => {
            let text = std::fs::read_to_string(schedule)?;
            let mut s = DecoderSchedule::from_csv(&text, *xi, *project)
                .map_err(|e| Error::config("decoder.schedule", e.to_string()))?;
            if let Some(u) = *iterations {
                if u == 0 || u > s.len() {
                    return Err(Error::config(
                        "decoder.iterations",
                        format!("must be in 1..={} for this schedule", s.len()),
                    ));
                }
                s.steps.truncate(u);
            }
            (s, None)
        }
        _ => return Ok(None),
    }))
}

impl Experiment {
    /// Loads the code and every referenced file.
    pub fn load(cfg: ExperimentConfig) -> Result<Self> {
        let text = std::fs::read_to_string(&cfg.code)?;
        let h = parse_alist(&text).map_err(|e| Error::config("code.path", e.to_string()))?;
        let channel = match &cfg.channel {
            ChannelSpec::Awgn => PreparedChannel::Awgn,
            ChannelSpec::Mimo { mu, nu } => PreparedChannel::Mimo { mu: *mu, nu: *nu },
            ChannelSpec::Learned { checkpoint, candidates } => {
                let net = ScoreNet::from_checkpoint(&std::fs::read_to_string(checkpoint)?)
                    .map_err(|e| Error::config("channel.checkpoint", e.to_string()))?;
                let pts = load_candidates_csv(&std::fs::read_to_string(candidates)?)
                    .map_err(|e| Error::config("channel.candidates", e.to_string()))?;
                PreparedChannel::Learned {
                    net: Arc::new(net),
                    sampler: correlated2d_sampler(pts)?,
                }
            }
        };
        Self::from_parts(cfg, h, channel)
    }

    /// Builds an experiment from an in-memory code and channel resources.
    /// File paths in `cfg` other than a `du-dgf` schedule are not read.
    pub fn from_parts(cfg: ExperimentConfig, h: ParityCheckMatrix, channel: PreparedChannel) -> Result<Self> {
        let n = h.n();
        match &channel {
            PreparedChannel::Mimo { nu, .. } if 2 * nu != n => {
                return Err(Error::config("channel.nu", format!("2 * nu must equal n = {n}")))
            }
            PreparedChannel::Learned { net, .. } if !n.is_multiple_of(net.input_dim()) => {
                return Err(Error::config(
                    "channel.checkpoint",
                    format!("segment size {} does not divide n = {n}", net.input_dim()),
                ))
            }
            _ => {}
        }
        let decoder = match flow_schedule(&cfg.decoder)? {
            Some((schedule, omega_scale)) => PreparedDecoder::Flow { schedule, omega_scale },
            None => match cfg.decoder {
                DecoderSpec::Bp { max_iter } => PreparedDecoder::Bp { max_iter },
                DecoderSpec::BpTensor { max_iter } => PreparedDecoder::BpTensor {
                    max_iter,
                    ei: Box::new(build_uv(&h)),
                },
                DecoderSpec::Mmse => PreparedDecoder::Mmse,
                DecoderSpec::MmseBp { max_iter } => PreparedDecoder::MmseBp { max_iter },
                _ => unreachable!("flow decoders handled above"),
            },
        };
        Ok(Experiment {
            basis: gf2_nullspace(&h),
            h: Arc::new(h),
            cfg,
            channel,
            decoder,
        })
    }

    /// Per-component noise variance (AWGN) or linear SNR (MIMO) at a grid
    /// point.
    fn noise_level(&self, snr_db: f64) -> Result<f64> {
        match self.cfg.convention {
            SnrConvention::EbN0 => snr_convert(
                SnrMode::AwgnEbN0 {
                    rate: self.h.design_rate(),
                },
                snr_db,
            ),
            SnrConvention::Snr => Ok(db_to_linear(snr_db)),
            SnrConvention::Label => Ok(0.0),
        }
    }
}

/// A transmitted block with everything needed to decode it.
pub struct Block {
    pub x: BipolarWord,
    pub y: Vec<f64>,
    pub channel: BlockChannel,
    pub x0: Vec<f64>,
}

pub enum BlockChannel {
    Awgn(AwgnChannel),
    Mimo(MimoChannel),
    Learned(Arc<LearnedChannel>),
}

impl BlockChannel {
    pub fn gradient(&self) -> &dyn ChannelGradient {
        match self {
            BlockChannel::Awgn(c) => c,
            BlockChannel::Mimo(c) => c,
            BlockChannel::Learned(c) => c.as_ref(),
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for one trial.
pub fn trial_rng(seed: u64, point: usize, trial: u64) -> ChaCha8Rng {
    let key = splitmix(splitmix(splitmix(seed) ^ point as u64) ^ trial);
    let mut s = [0u8; 32];
    s[..8].copy_from_slice(&key.to_le_bytes());
    s[8..16].copy_from_slice(&seed.to_le_bytes());
    s[16..24].copy_from_slice(&(point as u64).to_le_bytes());
    s[24..].copy_from_slice(&trial.to_le_bytes());
    ChaCha8Rng::from_seed(s)
}

impl Experiment {
    /// Draws the codeword, channel and observation for one trial.
    pub fn make_block(&self, point: usize, trial: u64) -> Result<Block> {
        let mut rng = trial_rng(self.cfg.seed, point, trial);
        self.draw_block(self.cfg.snr_db[point], &mut rng)
    }

    /// Draws a block at an arbitrary grid value from `rng`.
    pub fn draw_block(&self, snr_db: f64, rng: &mut dyn RngCore) -> Result<Block> {
        let level = self.noise_level(snr_db)?;
        let n = self.h.n();
        let x = random_codeword(&self.basis, rng);
        let (y, channel) = match &self.channel {
            PreparedChannel::Awgn => {
                let ch = AwgnChannel::new(n, level)?;
                (awgn_transmit(x.as_slice(), level, rng), BlockChannel::Awgn(ch))
            }
            PreparedChannel::Mimo { mu, nu } => {
                let ch = sample_mimo(*mu, *nu, level, rng)?;
                let y = ch.transmit(x.as_slice(), rng)?;
                (y, BlockChannel::Mimo(ch))
            }
            PreparedChannel::Learned { net, sampler } => {
                let spec = SegmentedChannelSpec::additive(net.input_dim(), n / net.input_dim());
                let y = spec.transmit(x.as_slice(), sampler, rng)?;
                let ch = LearnedChannel::new(net.clone(), spec)?;
                (y, BlockChannel::Learned(Arc::new(ch)))
            }
        };
        let x0 = self.cfg.init.draw(n, &y, rng);
        Ok(Block { x, y, channel, x0 })
    }

    /// The flow schedule with every step size fixed, as a starting point for
    /// unfolding. A step of `scale * omega` becomes `scale` times the mean
    /// `omega` of 20 sampled channels.
    pub fn base_schedule(&self, rng: &mut dyn RngCore) -> Result<DecoderSchedule> {
        let PreparedDecoder::Flow { schedule, omega_scale } = &self.decoder else {
            return Err(Error::config("decoder.kind", "unfolding needs gf, dgf or du-dgf"));
        };
        let mut s = schedule.clone();
        if let (Some(scale), PreparedChannel::Mimo { mu, nu }) = (omega_scale, &self.channel) {
            let mut sum = 0.0;
            for _ in 0..20 {
                sum += sample_mimo(*mu, *nu, 1.0, rng)?.omega;
            }
            for st in &mut s.steps {
                st.eta = scale * sum / 20.0;
            }
        }
        Ok(s)
    }

    /// Training examples for the unfolded decoder, drawn like trials at
    /// `snr_db`.
    pub fn unfold_samples(&self, snr_db: f64, count: usize, rng: &mut dyn RngCore) -> Result<Vec<UnfoldSample>> {
        (0..count)
            .map(|_| {
                let b = self.draw_block(snr_db, rng)?;
                let channel: Arc<dyn ChannelGradient> = match b.channel {
                    BlockChannel::Awgn(c) => Arc::new(c),
                    BlockChannel::Mimo(c) => Arc::new(c),
                    BlockChannel::Learned(c) => c,
                };
                Ok(UnfoldSample {
                    x: b.x.into_vec(),
                    y: b.y,
                    x0: b.x0,
                    channel,
                })
            })
            .collect()
    }

    /// Decodes one block. Divergence is returned as an error.
    pub fn decode(&self, b: &Block) -> Result<BipolarWord> {
        self.decode_observation(&b.y, &b.channel, &b.x0)
    }

    /// Schedule a flow decoder runs on `ch`, with `omega` steps resolved.
    /// `None` for the BP and MMSE decoders.
    pub fn flow_schedule(&self, ch: &BlockChannel) -> Option<Cow<'_, DecoderSchedule>> {
        let PreparedDecoder::Flow { schedule, omega_scale } = &self.decoder else {
            return None;
        };
        Some(match (omega_scale, ch) {
            (Some(scale), BlockChannel::Mimo(m)) => {
                let mut s = schedule.clone();
                for st in &mut s.steps {
                    st.eta = scale * m.omega;
                }
                Cow::Owned(s)
            }
            _ => Cow::Borrowed(schedule),
        })
    }

    pub fn decode_observation(&self, y: &[f64], ch: &BlockChannel, x0: &[f64]) -> Result<BipolarWord> {
        let h = self.h.as_ref();
        if let Some(sched) = self.flow_schedule(ch) {
            let opts = DecodeOptions {
                early_stop: self.cfg.early_stop,
            };
            return Ok(gf_decode(y, ch.gradient(), h, &sched, x0, opts)?.decision);
        }
        match (&self.decoder, ch) {
            (PreparedDecoder::Bp { max_iter }, BlockChannel::Awgn(c)) => {
                Ok(bp_decode(&llr_awgn(y, c.sigma2)?, h, *max_iter)?.decision)
            }
            (PreparedDecoder::BpTensor { max_iter, ei }, BlockChannel::Awgn(c)) => {
                Ok(bp_tensor_decode(&llr_awgn(y, c.sigma2)?, ei, *max_iter)?.decision)
            }
            (PreparedDecoder::Mmse, BlockChannel::Mimo(m)) => Ok(sign_decision(&mmse_detect(m, y)?)),
            (PreparedDecoder::MmseBp { max_iter }, BlockChannel::Mimo(m)) => {
                Ok(mmse_bp_pipeline(m, y, h, *max_iter)?.decision)
            }
            _ => Err(Error::InvalidParameter("decoder does not fit the channel".into())),
        }
    }

    /// Channel for decoding a stored observation at grid value `snr_db`.
    /// MIMO channels carry their matrix and must be supplied by the caller.
    pub fn observation_channel(&self, snr_db: f64) -> Result<BlockChannel> {
        let n = self.h.n();
        match &self.channel {
            PreparedChannel::Awgn => Ok(BlockChannel::Awgn(AwgnChannel::new(n, self.noise_level(snr_db)?)?)),
            PreparedChannel::Mimo { .. } => Err(Error::config("channel.kind", "mimo decoding needs a channel matrix")),
            PreparedChannel::Learned { net, .. } => {
                let spec = SegmentedChannelSpec::additive(net.input_dim(), n / net.input_dim());
                Ok(BlockChannel::Learned(Arc::new(LearnedChannel::new(net.clone(), spec)?)))
            }
        }
    }
}

/// Decodes every block, possibly in parallel. Results are in input order
/// and identical to decoding one at a time.
pub fn batch_decode(exp: &Experiment, blocks: &[Block]) -> Vec<Result<BipolarWord>> {
    map_collect(blocks.iter().collect::<Vec<_>>(), |b| exp.decode(b))
}

/// Bit errors of a decode; a diverged flow decoder counts as a block error
/// with half the bits wrong.
fn count_errors(exp: &Experiment, b: &Block, r: &Result<BipolarWord>) -> Result<u64> {
    match r {
        Ok(d) => Ok(d.hamming_distance(&b.x) as u64),
        Err(Error::Divergence { .. }) if exp.cfg.decoder.is_gradient_flow() => Ok((b.x.len() / 2).max(1) as u64),
        Err(e) => Err(Error::InvalidParameter(e.to_string())),
    }
}

/// Runs one grid point.
pub fn run_point(exp: &Experiment, point: usize) -> Result<BerRecord> {
    let start = Instant::now();
    let cfg = &exp.cfg;
    let n = exp.h.n() as u64;
    let (mut blocks, mut bit_errors, mut block_errors) = (0u64, 0u64, 0u64);
    'outer: while blocks < cfg.max_blocks {
        let take = (cfg.batch as u64).min(cfg.max_blocks - blocks);
        let trials: Vec<u64> = (blocks..blocks + take).collect();
        let built = map_collect(trials, |&t| exp.make_block(point, t));
        let batch = built.into_iter().collect::<Result<Vec<_>>>()?;
        let results = batch_decode(exp, &batch);
        for (b, r) in batch.iter().zip(&results) {
            let e = count_errors(exp, b, r)?;
            blocks += 1;
            bit_errors += e;
            block_errors += (e > 0) as u64;
            if bit_errors >= cfg.target_errors {
                break 'outer;
            }
        }
    }
    let bits = blocks * n;
    Ok(BerRecord {
        snr_db: cfg.snr_db[point],
        blocks,
        bits,
        bit_errors,
        block_errors,
        ber: bit_errors as f64 / bits as f64,
        bler: block_errors as f64 / blocks as f64,
        decoder: cfg.decoder.id().to_string(),
        seed: cfg.seed,
        wall_time_s: if cfg.timing {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        },
    })
}

/// Runs every grid point, calling `progress` after each.
pub fn run_loaded(exp: &Experiment, progress: &mut dyn FnMut(&BerRecord)) -> Result<Vec<BerRecord>> {
    let mut out = Vec::with_capacity(exp.cfg.snr_db.len());
    for p in 0..exp.cfg.snr_db.len() {
        let r = run_point(exp, p)?;
        progress(&r);
        out.push(r);
    }
    out.sort_by(|a, b| a.snr_db.total_cmp(&b.snr_db));
    Ok(out)
}

/// Loads, runs and (if configured) writes the CSV.
pub fn run_experiment(cfg: ExperimentConfig) -> Result<Vec<BerRecord>> {
    let exp = Experiment::load(cfg)?;
    let records = run_loaded(&exp, &mut |_| {})?;
    if let Some(p) = &exp.cfg.output {
        emit_csv_file(&records, p)?;
    }
    Ok(records)
}

pub fn summary_line(r: &BerRecord) -> String {
    format!(
        "{:>7.2} dB  {:<8} blocks={:<7} bit_errors={:<7} ber={:.3e} bler={:.3e}",
        r.snr_db, r.decoder, r.blocks, r.bit_errors, r.ber, r.bler
    )
}
