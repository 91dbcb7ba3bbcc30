use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn codes() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../codes").canonicalize().unwrap()
}

/// Fresh scratch directory per test.
fn scratch(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn gfd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gfd")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_cfg(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_AWGN: &str = "channel.kind = awgn\ndecoder.kind = gf\ndecoder.bins = 200\nsnr.grid = 3, 5\nbudget.max_blocks = 40\n";

#[test]
fn inspect_code_reports_profile() {
    let out = ok(&gfd(&["inspect-code", s(&codes().join("reg36_n204.alist"))]));
    for line in ["n = 204", "m = 102", "e = 612", "dimension k = 102", "variable degrees (degree:count) = 3:204"] {
        assert!(out.contains(line), "{out}");
    }
}

#[test]
fn inspect_code_reads_config_path() {
    let dir = scratch("inspect_cfg");
    let cfg = write_cfg(&dir, "c.cfg", &format!("code.path = {}\n", s(&codes().join("appendix_3x6.alist"))));
    let out = ok(&gfd(&["--config", &cfg, "inspect-code"]));
    assert!(out.contains("n = 6\n") && out.contains("m = 3\n"), "{out}");
}

#[test]
fn exit_codes() {
    let dir = scratch("exit_codes");
    assert_eq!(gfd(&["--config", s(&dir.join("absent.cfg")), "ber"]).status.code(), Some(3));
    assert_eq!(gfd(&["inspect-code", s(&dir.join("absent.alist"))]).status.code(), Some(3));
    assert_eq!(gfd(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(gfd(&["ber"]).status.code(), Some(2));

    let code = s(&codes().join("reg36_n204.alist")).to_string();
    let bad = [
        "decoder.kind = gf\n",
        "channel.kind = awgn\ndecoder.kind = nope\nsnr.grid = 1\n",
        "channel.kind = awgn\ndecoder.kind = gf\nsnr.grid = 1\nunknown.key = 3\n",
        "channel.kind = awgn\ndecoder.kind = gf\nsnr.grid = x\n",
        "channel.kind = awgn\ndecoder.kind = mmse\nsnr.grid = 1\n",
    ];
    for (i, body) in bad.iter().enumerate() {
        let cfg = write_cfg(&dir, &format!("bad{i}.cfg"), &format!("code.path = {code}\n{body}"));
        let out = gfd(&["--config", &cfg, "ber"]);
        assert_eq!(out.status.code(), Some(2), "{body}: {}", String::from_utf8_lossy(&out.stderr));
    }

    let cfg = write_cfg(&dir, "missing_code.cfg", &format!("code.path = absent.alist\n{SMALL_AWGN}"));
    assert_eq!(gfd(&["--config", &cfg, "ber"]).status.code(), Some(3));

    let cfg = write_cfg(&dir, "good.cfg", &format!("code.path = {code}\n{SMALL_AWGN}"));
    assert_eq!(gfd(&["--config", &cfg, "--threads", "0", "ber"]).status.code(), Some(2));
    let out = gfd(&["--config", &cfg, "--out", s(&dir.join("no/such/dir/x.csv")), "ber"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn ber_csv_goes_to_out_or_stdout() {
    let dir = scratch("ber_out");
    let code = s(&codes().join("reg36_n204.alist")).to_string();
    let cfg = write_cfg(&dir, "c.cfg", &format!("code.path = {code}\n{SMALL_AWGN}seed = 9\n"));

    let csv_stdout = ok(&gfd(&["--config", &cfg, "ber"]));
    let mut lines = csv_stdout.lines();
    assert_eq!(
        lines.next().unwrap(),
        "snr_db,blocks,bits,bit_errors,block_errors,ber,bler,decoder,seed,wall_time_s"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.contains(",gf,9,")), "{rows:?}");

    let out = dir.join("ber.csv");
    let summary = ok(&gfd(&["--config", &cfg, "--out", s(&out), "--seed", "9", "--threads", "1", "ber"]));
    assert_eq!(summary.lines().count(), 2);
    // thread count does not change results
    assert_eq!(std::fs::read_to_string(&out).unwrap(), csv_stdout);

    let other = ok(&gfd(&["--config", &cfg, "--seed", "10", "ber"]));
    assert!(other.contains(",gf,10,"));
}

#[test]
fn relative_paths_resolve_against_config_dir() {
    let dir = scratch("relative");
    std::fs::copy(codes().join("reg36_n204.alist"), dir.join("code.alist")).unwrap();
    let cfg = write_cfg(&dir, "c.cfg", &format!("code.path = code.alist\n{SMALL_AWGN}output.path = res.csv\n"));
    ok(&gfd(&["--config", &cfg, "ber"]));
    assert!(dir.join("res.csv").exists());
}

#[test]
fn mimo_dump_round_trips_through_decode() {
    let dir = scratch("mimo_dump");
    let code = s(&codes().join("reg36_n204.alist")).to_string();
    let body = format!(
        "code.path = {code}\nchannel.kind = mimo\nchannel.nu = 102\ndecoder.kind = dgf\ndecoder.iterations = 30\n\
         decoder.gamma = 32\ndecoder.alpha = 0.2\ndecoder.xi = 1.01\nsnr.grid = 8\n"
    );
    let cfg = write_cfg(&dir, "c.cfg", &body);
    let prefix = dir.join("blk");
    let traj = dir.join("traj.csv");
    let sim = ok(&gfd(&["--config", &cfg, "--out", s(&traj), "decode", "--trial", "2", "--dump", s(&prefix)]));
    let status = sim.lines().nth(1).unwrap();
    assert!(status.contains("iterations=30") && status.contains("bit_errors="), "{status}");

    let traj_text = std::fs::read_to_string(&traj).unwrap();
    assert_eq!(traj_text.lines().count(), 32);
    assert!(traj_text.starts_with("iter,"));

    let y = dir.join("blk.y.txt");
    let ch = dir.join("blk.channel.bin");
    let again = ok(&gfd(&["--config", &cfg, "decode", "--input", s(&y), "--channel", s(&ch)]));
    assert_eq!(again.lines().next(), sim.lines().next());

    // mimo without a channel matrix is a config error
    assert_eq!(gfd(&["--config", &cfg, "decode", "--input", s(&y)]).status.code(), Some(2));
    let short = write_cfg(&dir, "short.txt", "1 2 3");
    let out = gfd(&["--config", &cfg, "decode", "--input", &short, "--channel", s(&ch)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn awgn_decode_of_clean_word() {
    let dir = scratch("awgn_decode");
    let code = s(&codes().join("reg36_n204.alist")).to_string();
    let cfg = write_cfg(&dir, "c.cfg", &format!("code.path = {code}\n{SMALL_AWGN}"));
    let y: Vec<String> = (0..204).map(|i| if i % 17 == 0 { "-0.2" } else { "0.9" }.to_string()).collect();
    let input = write_cfg(&dir, "y.txt", &y.join(", "));
    let out = ok(&gfd(&["--config", &cfg, "decode", "--input", &input]));
    let mut lines = out.lines();
    assert_eq!(lines.next().unwrap(), "0".repeat(204));
    assert!(lines.next().unwrap().contains("codeword=true"));
}

#[test]
fn unfold_then_ber_with_trained_schedule() {
    let dir = scratch("unfold");
    let code = s(&codes().join("reg36_n204.alist")).to_string();
    let mimo = format!("code.path = {code}\nchannel.kind = mimo\nchannel.nu = 102\nsnr.grid = 6\nseed = 3\n");
    let cfg = write_cfg(
        &dir,
        "train.cfg",
        &format!(
            "{mimo}decoder.kind = dgf\ndecoder.iterations = 8\ndecoder.gamma = 32\ndecoder.alpha = 0.2\n\
             decoder.xi = 1.01\nunfold.batch = 4\nunfold.iterations = 3\nunfold.train = eta, gamma\n\
             output.path = sched.csv\noutput.losses = losses.csv\n"
        ),
    );
    let msg = ok(&gfd(&["--config", &cfg, "train-unfold"]));
    assert!(msg.starts_with("trained depth 8 schedule"), "{msg}");
    let sched = std::fs::read_to_string(dir.join("sched.csv")).unwrap();
    assert_eq!(sched.lines().count(), 9);
    assert_eq!(std::fs::read_to_string(dir.join("losses.csv")).unwrap().lines().count(), 4);
    // alpha and beta were frozen
    for row in sched.lines().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!((f[3], f[4]), ("0.2", "1"), "{row}");
    }

    let ber = write_cfg(
        &dir,
        "ber.cfg",
        &format!("{mimo}decoder.kind = du-dgf\ndecoder.schedule = sched.csv\ndecoder.xi = 1.01\nbudget.max_blocks = 5\n"),
    );
    let csv = ok(&gfd(&["--config", &ber, "ber"]));
    assert!(csv.lines().nth(1).unwrap().contains(",du-dgf,3,"), "{csv}");

    let bad = write_cfg(&dir, "bad.cfg", &format!("{mimo}decoder.kind = dgf\nunfold.train = eta, delta\noutput.path = x.csv\n"));
    assert_eq!(gfd(&["--config", &bad, "train-unfold"]).status.code(), Some(2));
}

#[test]
fn score_training_feeds_learned_channel() {
    let dir = scratch("learned");
    let cfg = write_cfg(
        &dir,
        "score.cfg",
        "seed = 5\nscore.count = 200\nscore.hidden = 16\ntrain.iterations = 200\ntrain.batch = 32\n\
         output.path = net.ckpt\noutput.candidates = cands.csv\noutput.losses = loss.csv\n",
    );
    let msg = ok(&gfd(&["--config", &cfg, "train-score"]));
    assert!(msg.contains("for 200 iterations"), "{msg}");
    assert_eq!(std::fs::read_to_string(dir.join("cands.csv")).unwrap().lines().count(), 201);
    assert_eq!(std::fs::read_to_string(dir.join("loss.csv")).unwrap().lines().count(), 201);

    let code = s(&codes().join("reg36_n204.alist")).to_string();
    let ber = write_cfg(
        &dir,
        "ber.cfg",
        &format!(
            "code.path = {code}\nchannel.kind = learned\nchannel.checkpoint = net.ckpt\nchannel.candidates = cands.csv\n\
             decoder.kind = dgf\ndecoder.iterations = 50\ndecoder.eta = 0.05\ndecoder.gamma = 1\ndecoder.project = false\n\
             decoder.init = gaussian\nsnr.grid = 0\nbudget.max_blocks = 4\n"
        ),
    );
    let csv = ok(&gfd(&["--config", &ber, "ber"]));
    let row = csv.lines().nth(1).unwrap();
    assert!(row.starts_with("0,4,816,"), "{row}");

    let odd = write_cfg(&dir, "odd.cfg", "score.count = 7\noutput.path = n.ckpt\n");
    assert_eq!(gfd(&["--config", &odd, "train-score"]).status.code(), Some(2));
    let no_out = write_cfg(&dir, "no_out.cfg", "score.count = 8\n");
    assert_eq!(gfd(&["--config", &no_out, "train-score"]).status.code(), Some(2));
}
