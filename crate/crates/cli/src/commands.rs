use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use gfdecode::channel::MimoChannel;
use gfdecode::code::{check_parity, gf2_nullspace, parse_alist, ParityCheckMatrix};
use gfdecode::decoder::{euler_decode, DecodeOptions};
use gfdecode::score::{
    candidates_to_csv, correlated2d_sampler, correlated_candidates, load_candidates_csv, train_score, ScoreNet,
    TrainConfig,
};
use gfdecode::sim::{
    emit_csv, emit_csv_file, run_loaded, summary_line, trial_rng, BlockChannel, Experiment, ExperimentConfig, KeyValues,
    EXPERIMENT_KEYS,
};
use gfdecode::unfold::{train_unfolded, UnfoldTrainConfig, UnfoldedModel, FAMILIES};
use gfdecode::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Cli, Command};

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 3,
        Error::Config { .. }
        | Error::InvalidParameter(_)
        | Error::Parse { .. }
        | Error::Format(_)
        | Error::LengthMismatch { .. } => 2,
        _ => 1,
    }
}

fn config_error(field: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        msg: msg.into(),
    }
}

fn with_path(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| with_path(path, e))
}

/// Config text and the directory relative paths resolve against.
fn read_config(path: Option<&Path>) -> Result<(String, PathBuf)> {
    let path = path.ok_or_else(|| config_error("--config", "this command needs a config file"))?;
    let text = read_file(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((text, base))
}

fn output_path(cli_out: &Option<PathBuf>, fields: &KeyValues, base: &Path) -> Option<PathBuf> {
    cli_out.clone().or_else(|| fields.str("output.path").map(|p| base.join(p)))
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(config_error("--threads", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| config_error("--threads", e.to_string()))?;
    }
    match &cli.command {
        Command::Ber => ber(&cli),
        Command::Decode {
            input,
            channel,
            trial,
            dump,
            snr,
        } => {
            let source = match (input, trial) {
                (Some(p), _) => Source::File {
                    input: p,
                    channel: channel.as_deref(),
                },
                (None, Some(t)) => Source::Trial {
                    trial: *t,
                    dump: dump.as_deref(),
                },
                (None, None) => return Err(config_error("--input", "either --input or --trial is needed")),
            };
            decode(&cli, source, *snr)
        }
        Command::TrainScore => train_score_cmd(&cli),
        Command::TrainUnfold => train_unfold_cmd(&cli),
        Command::InspectCode { path } => inspect(&cli, path.as_deref()),
    }
}

fn load_experiment(cli: &Cli, allowed: &[&str]) -> Result<(Experiment, KeyValues, PathBuf)> {
    let (text, base) = read_config(cli.config.as_deref())?;
    let fields = KeyValues::parse(&text, allowed)?;
    let mut cfg = ExperimentConfig::from_fields(&fields, &base)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output = Some(o.clone());
    }
    Ok((Experiment::load(cfg)?, fields, base))
}

fn ber(cli: &Cli) -> Result<()> {
    let (exp, _, _) = load_experiment(cli, EXPERIMENT_KEYS)?;
    let to_file = exp.cfg.output.is_some();
    let recs = run_loaded(&exp, &mut |r| {
        // with no output file the CSV owns stdout
        if to_file {
            println!("{}", summary_line(r));
        } else {
            eprintln!("{}", summary_line(r));
        }
    })?;
    match &exp.cfg.output {
        Some(p) => emit_csv_file(&recs, p),
        None => emit_csv(&recs, std::io::stdout().lock()),
    }
}

fn read_numbers(path: &Path) -> Result<Vec<f64>> {
    let text = read_file(path)?;
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Format(format!("{}: `{t}` is not a number", path.display())))
        })
        .collect()
}

enum Source<'a> {
    File { input: &'a Path, channel: Option<&'a Path> },
    Trial { trial: u64, dump: Option<&'a Path> },
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| with_path(path, e))
}

fn decode(cli: &Cli, source: Source, snr: Option<f64>) -> Result<()> {
    let (text, base) = read_config(cli.config.as_deref())?;
    let fields = KeyValues::parse(&text, EXPERIMENT_KEYS)?;
    let mut cfg = ExperimentConfig::from_fields(&fields, &base)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let exp = Experiment::load(cfg)?;
    let snr = snr.unwrap_or(exp.cfg.snr_db[0]);
    let (y, ch, x0, sent) = match source {
        Source::File { input, channel } => {
            let y = read_numbers(input)?;
            let ch = match channel {
                Some(p) => {
                    let file = std::fs::File::open(p).map_err(|e| with_path(p, e))?;
                    BlockChannel::Mimo(MimoChannel::read_from(std::io::BufReader::new(file))?)
                }
                None => exp.observation_channel(snr)?,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(exp.cfg.seed);
            let x0 = exp.cfg.init.draw(exp.h.n(), &y, &mut rng);
            (y, ch, x0, None)
        }
        Source::Trial { trial, dump } => {
            let mut rng = trial_rng(exp.cfg.seed, 0, trial);
            let b = exp.draw_block(snr, &mut rng)?;
            if let Some(prefix) = dump {
                let mut s = String::new();
                for v in &b.y {
                    writeln!(s, "{v}").unwrap();
                }
                write_file(&with_suffix(prefix, ".y.txt"), s.as_bytes())?;
                if let BlockChannel::Mimo(m) = &b.channel {
                    let mut bytes = Vec::new();
                    m.write_to(&mut bytes)?;
                    write_file(&with_suffix(prefix, ".channel.bin"), &bytes)?;
                }
            }
            (b.y, b.channel, b.x0, Some(b.x))
        }
    };
    let (decision, iterations) = match exp.flow_schedule(&ch) {
        Some(sched) => {
            let opts = DecodeOptions {
                early_stop: exp.cfg.early_stop,
            };
            let tr = euler_decode(&y, ch.gradient(), &exp.h, &sched, &x0, sent.as_ref(), opts)?;
            if let Some(p) = &cli.out {
                let file = std::fs::File::create(p).map_err(|e| with_path(p, e))?;
                tr.write_csv(std::io::BufWriter::new(file))?;
            }
            (tr.decision(), Some(tr.states.len() - 1))
        }
        None => (exp.decode_observation(&y, &ch, &x0)?, None),
    };
    let bits: String = decision.to_bits().iter().map(|b| char::from(b'0' + b)).collect();
    let mut out = std::io::stdout().lock();
    writeln!(out, "{bits}")?;
    let mut status = format!("decoder={}", exp.cfg.decoder.id());
    if let Some(k) = iterations {
        write!(status, " iterations={k}").unwrap();
    }
    write!(status, " codeword={}", check_parity(&decision, &exp.h)?).unwrap();
    if let Some(x) = &sent {
        let errors = x.to_bits().iter().zip(decision.to_bits()).filter(|(a, b)| **a != *b).count();
        write!(status, " bit_errors={errors}").unwrap();
    }
    writeln!(out, "{status}")?;
    Ok(())
}

const SCORE_KEYS: &[&str] = &[
    "score.candidates",
    "score.count",
    "score.spread",
    "score.width",
    "score.hidden",
    "train.batch",
    "train.iterations",
    "train.sigma",
    "train.lr",
    "seed",
    "output.path",
    "output.candidates",
    "output.losses",
];

fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let mut s = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(s, "{},{l}", i + 1).unwrap();
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn train_score_cmd(cli: &Cli) -> Result<()> {
    let (text, base) = read_config(cli.config.as_deref())?;
    let f = KeyValues::parse(&text, SCORE_KEYS)?;
    let out = output_path(&cli.out, &f, &base).ok_or_else(|| config_error("output.path", "required"))?;
    let seed = cli.seed.unwrap_or(f.num("seed", 1)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = match f.str("score.candidates") {
        Some(p) => {
            let path = base.join(p);
            load_candidates_csv(&read_file(&path)?)?
        }
        None => {
            let count = f.count("score.count", 1000)?;
            if count % 2 != 0 {
                return Err(config_error("score.count", "must be even"));
            }
            correlated_candidates(count, f.positive("score.spread", 0.5)?, f.nonneg("score.width", 0.05)?, &mut rng)
        }
    };
    if let Some(p) = f.str("output.candidates") {
        std::fs::write(base.join(p), candidates_to_csv(&points))?;
    }
    let sampler = correlated2d_sampler(points)?;
    let mut net = ScoreNet::default_architecture(2, f.count("score.hidden", 64)?, &mut rng)?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        batch: f.count("train.batch", d.batch)?,
        iterations: f.count("train.iterations", d.iterations)?,
        sigma: f.positive("train.sigma", d.sigma)?,
        lr: f.positive("train.lr", d.lr)?,
    };
    let losses = train_score(&mut net, &sampler, cfg, &mut rng)?;
    std::fs::write(&out, net.to_checkpoint())?;
    if let Some(p) = f.str("output.losses") {
        write_losses(&base.join(p), &losses)?;
    }
    let tail = &losses[losses.len().saturating_sub(100)..];
    println!(
        "trained {} parameters for {} iterations; mean loss over last {} = {:.4}",
        net.num_params(),
        losses.len(),
        tail.len(),
        tail.iter().sum::<f64>() / tail.len() as f64
    );
    Ok(())
}

const UNFOLD_KEYS: &[&str] = &[
    "unfold.snr",
    "unfold.batch",
    "unfold.iterations",
    "unfold.lr",
    "unfold.incremental",
    "unfold.clamp",
    "unfold.train",
    "unfold.max_halvings",
    "output.losses",
];

fn train_unfold_cmd(cli: &Cli) -> Result<()> {
    let allowed: Vec<&str> = EXPERIMENT_KEYS.iter().chain(UNFOLD_KEYS).copied().collect();
    let (exp, f, base) = load_experiment(cli, &allowed)?;
    let out = exp
        .cfg
        .output
        .clone()
        .ok_or_else(|| config_error("output.path", "required"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(exp.cfg.seed);
    let schedule = exp.base_schedule(&mut rng)?;
    let clamp = match f.str("unfold.clamp") {
        Some("none") => None,
        Some(_) => Some(f.positive("unfold.clamp", 0.0)?),
        None => schedule.project.then_some(schedule.xi),
    };
    if clamp.is_some_and(|c| c <= 1.0) {
        return Err(config_error("unfold.clamp", "must exceed 1"));
    }
    let mut model = UnfoldedModel::new(schedule)?;
    if let Some(list) = f.str("unfold.train") {
        model.trainable = [false; 4];
        for name in list.split(',').map(str::trim) {
            let i = FAMILIES
                .iter()
                .position(|&fam| fam == name)
                .ok_or_else(|| config_error("unfold.train", format!("unknown family `{name}`")))?;
            model.trainable[i] = true;
        }
    }
    let cfg = UnfoldTrainConfig {
        lr: f.positive("unfold.lr", 0.03)?,
        iterations: f.count("unfold.iterations", 200)?,
        incremental: f.flag("unfold.incremental", false)?,
        max_halvings: f.num("unfold.max_halvings", 8)?,
        clamp,
    };
    let snr = f.num("unfold.snr", exp.cfg.snr_db[0])?;
    let batch = f.count("unfold.batch", 16)?;
    let mut next = |r: &mut dyn rand::RngCore| exp.unfold_samples(snr, batch, r);
    let rep = train_unfolded(&mut model, &exp.h, &mut next, cfg, &mut rng)?;
    std::fs::write(&out, model.schedule.to_csv())?;
    if let Some(p) = f.str("output.losses") {
        write_losses(&base.join(p), &rep.losses)?;
    }
    println!(
        "trained depth {} schedule: loss {:.4} -> {:.4}, {} halvings, final lr {}",
        model.depth(),
        rep.losses.first().copied().unwrap_or(f64::NAN),
        rep.losses.last().copied().unwrap_or(f64::NAN),
        rep.halvings,
        rep.final_lr
    );
    Ok(())
}

fn describe(h: &ParityCheckMatrix) -> String {
    let (vars, checks) = h.degree_profile();
    let fmt = |d: &[(usize, usize)]| {
        d.iter()
            .map(|(deg, cnt)| format!("{deg}:{cnt}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let k = gf2_nullspace(h).k();
    format!(
        "n = {}\nm = {}\ne = {}\ndesign rate = {:.4}\ndimension k = {k}\nvariable degrees (degree:count) = {}\ncheck degrees (degree:count) = {}\n",
        h.n(),
        h.m(),
        h.num_edges(),
        h.design_rate(),
        fmt(&vars),
        fmt(&checks)
    )
}

fn inspect(cli: &Cli, path: Option<&Path>) -> Result<()> {
    let path = match path {
        Some(p) => p.to_path_buf(),
        None => {
            let (text, base) = read_config(cli.config.as_deref())?;
            let f = KeyValues::parse(&text, EXPERIMENT_KEYS)?;
            base.join(f.req("code.path")?)
        }
    };
    let h = parse_alist(&read_file(&path)?)?;
    let text = describe(&h);
    match &cli.out {
        Some(p) => std::fs::write(p, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}
