//! Command-line front end: key=value config resolution, subcommand dispatch
//! and CSV reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use clap::{Arg, ArgAction, Command};

use crate::data::{
    degrade, load_checkpoint, load_dataset, read_intensity, read_labels, save_checkpoint,
    save_dataset, write_volume, Checkpoint, Dataset, DatasetSplit, PhantomCfg, Volume,
};
use crate::engine::{ScheduleCfg, Shape5, Tensor5};
use crate::error::{Error, Result};
use crate::gradcheck::{check_op, GradcheckCfg, SUITE};
use crate::losses::{LnccCfg, LossWeights};
use crate::metrics::MetricReportRow;
use crate::regnet::{build_reg, rearrange_pair, RegConfig, RegModel};
use crate::rem::{build_rem, rem_param_count, RemConfig, RemModel, Variant};
use crate::resample::{warp_nearest, warp_trilinear_forward};
use crate::trainer::{
    evaluate_suite, train_cascade, train_rem, History, Method, SuiteModels, TrainCfg, TrainedCell,
};

pub const SUBCOMMANDS: [&str; 9] = [
    "synth",
    "degrade",
    "train-rem",
    "train-cascade",
    "infer-rem",
    "register",
    "evaluate",
    "paramcount",
    "gradcheck",
];

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Need {
    Default(&'static str),
    Required,
    Optional,
}

/// One accepted config key.
#[derive(Clone, Copy, Debug)]
pub struct KeySpec {
    pub name: &'static str,
    pub need: Need,
    pub help: &'static str,
}

const fn key(name: &'static str, need: Need, help: &'static str) -> KeySpec {
    KeySpec { name, need, help }
}

use Need::{Default as D, Optional as O, Required as R};

const SEED: KeySpec = key("seed", D("0"), "root of every random stream");

const TRAIN_COMMON: [KeySpec; 6] = [
    key("data_dir", R, "dataset directory written by synth"),
    key("out", R, "checkpoint file to write"),
    key("resume", O, "checkpoint to continue from"),
    key("history_csv", O, "per-epoch history CSV to write"),
    SEED,
    key("huber_delta", D("0.1"), "Huber threshold"),
];

/// Accepted keys of a subcommand, in help order.
pub fn keys_for(sub: &str) -> Vec<KeySpec> {
    let mut keys = match sub {
        "synth" => vec![
            key("out_dir", R, "directory for volumes and manifest.json"),
            SEED,
            key("count", D("12"), "number of phantoms"),
            key("dims", D("32x32x32"), "volume size, LxWxH or a single side"),
            key("num_labels", D("6"), "foreground labels per phantom"),
            key(
                "amplitude",
                D("4.0"),
                "largest displacement of the individualizing field, voxels",
            ),
            key(
                "smooth_sigma",
                D("8.0"),
                "smoothing width of that field, voxels",
            ),
            key(
                "jitter",
                D("0.03"),
                "half-width of per-region intensity jitter",
            ),
            key("train", O, "training samples (default: 30/4/6 proportions)"),
            key("val", O, "validation samples"),
            key("test", O, "test samples"),
        ],
        "degrade" => vec![
            key("input", R, "float RVOL volume"),
            key("scale", D("2"), "degradation factor, 2 or 4"),
            key("out_lr", R, "low-resolution output"),
            key("out_lr_up", R, "re-upsampled output"),
        ],
        "train-rem" => {
            let mut k = TRAIN_COMMON.to_vec();
            k.extend([
                key("variant", D("I"), "I, II or III"),
                key("k", D("8"), "filters per layer"),
                key("n", D("4"), "body depth"),
                key("scale", D("2"), "degradation factor, 2 or 4"),
                key("epochs", D("50"), "training epochs"),
                key("batch", D("2"), "crops per step"),
                key("patch", D("16"), "crop side"),
                key(
                    "patches_per_volume",
                    D("8"),
                    "crops per training volume per epoch",
                ),
                key("max_steps", D("2000"), "optimizer step cap, 0 for none"),
                key("lr0", D("0.001"), "initial learning rate"),
                key("lr_decay", D("0.95"), "learning-rate factor per period"),
                key("lr_period", D("200"), "steps per decay"),
                key("lr_floor", D("0.0001"), "smallest learning rate"),
            ]);
            k
        }
        "train-cascade" => {
            let mut k = TRAIN_COMMON.to_vec();
            k.extend([
                key(
                    "method",
                    D("rereg-down-up"),
                    "reg-down-up, rereg-down-up or reg-down",
                ),
                key("rem", O, "train-rem checkpoint, needed by rereg-down-up"),
                key("freeze_rem", D("true"), "keep enhancement weights fixed"),
                key("levels", D("3"), "encoder stages"),
                key("base_channels", D("8"), "channels of the first stage"),
                key("scale", D("4"), "degradation factor, 2 or 4"),
                key("epochs", D("10"), "passes over all ordered training pairs"),
                key("batch", D("1"), "pairs per step"),
                key("max_steps", D("2000"), "optimizer step cap, 0 for none"),
                key("lr0", D("0.002"), "initial learning rate"),
                key("lr_decay", D("0.9"), "learning-rate factor per period"),
                key("lr_period", D("1000"), "steps per decay"),
                key("lr_floor", D("0.0001"), "smallest learning rate"),
                key("lambda1", D("10"), "auxiliary loss weight"),
                key("lambda2", D("1e-8"), "smoothness weight"),
                key("lncc_window", D("5"), "LNCC window side"),
                key("lncc_eps", D("1e-5"), "LNCC denominator offset"),
            ]);
            k
        }
        "infer-rem" => vec![
            key("checkpoint", R, "train-rem checkpoint"),
            key("input", R, "upsampled low-resolution RVOL volume"),
            key("output", R, "enhanced volume to write"),
        ],
        "register" => vec![
            key("checkpoint", R, "train-cascade checkpoint"),
            key("fixed", R, "fixed volume on the method's input grid"),
            key("moving", R, "moving volume on the same grid"),
            key("out", R, "warped moving volume to write"),
            key("moving_labels", O, "label volume to warp alongside"),
            key("out_labels", O, "warped labels to write"),
        ],
        "evaluate" => vec![
            key("data_dir", R, "dataset directory written by synth"),
            key(
                "checkpoints",
                O,
                "comma-separated train-cascade checkpoints",
            ),
            key("scales", D("2,4"), "comma-separated scales to report"),
            key(
                "ablation",
                D("false"),
                "two-arm auxiliary-loss report from rereg-down-up checkpoints",
            ),
            key("out", R, "CSV report to write"),
        ],
        "paramcount" => vec![
            key("variant", D("I"), "I, II or III"),
            key("k", D("8"), "filters per layer"),
            key("n", D("4"), "body depth"),
        ],
        "gradcheck" => vec![
            SEED,
            key("instances", D("10"), "random instances per op"),
            key("h", D("1e-4"), "central-difference step"),
            key("rel_tol", D("1e-4"), "relative tolerance"),
            key(
                "abs_floor",
                D("1e-6"),
                "denominator floor of the relative error",
            ),
            key("ops", D("all"), "comma-separated ops or all"),
        ],
        _ => Vec::new(),
    };
    keys.dedup_by_key(|k| k.name);
    keys
}

/// Fully resolved key=value settings of one run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get_opt(key)?
            .ok_or_else(|| Error::Config(format!("missing required key {key}")))
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("cannot parse {key}={v}: {e}"))),
        }
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.raw(key) {
            Some("true" | "on" | "yes" | "1") => Ok(true),
            Some("false" | "off" | "no" | "0") => Ok(false),
            Some(v) => Err(Error::Config(format!(
                "cannot parse {key}={v} as a boolean"
            ))),
            None => Err(Error::Config(format!("missing required key {key}"))),
        }
    }

    /// `key=value` lines, sorted by key.
    pub fn render(&self) -> String {
        self.values.iter().fold(String::new(), |mut s, (k, v)| {
            let _ = writeln!(s, "{k}={v}");
            s
        })
    }
}

/// Parses `key=value` lines; `#` starts a comment.
fn parse_config_text(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "{origin}:{}: expected key=value, got {line:?}",
                no + 1
            ))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Resolves defaults, then the config file, then `overrides`; unknown keys
/// and missing required keys are rejected.
pub fn parse_config(
    file: Option<&Path>,
    overrides: &[(String, String)],
    keys: &[KeySpec],
) -> Result<RunConfig> {
    let mut values = BTreeMap::new();
    for k in keys {
        if let Need::Default(d) = k.need {
            values.insert(k.name.to_string(), d.to_string());
        }
    }
    let mut layers = Vec::new();
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        layers.extend(parse_config_text(&text, &path.display().to_string())?);
    }
    layers.extend(overrides.iter().cloned());
    for (k, v) in layers {
        if !keys.iter().any(|s| s.name == k) {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
        values.insert(k, v);
    }
    if let Some(missing) = keys
        .iter()
        .find(|k| k.need == Need::Required && !values.contains_key(k.name))
    {
        return Err(Error::Config(format!(
            "missing required key {}",
            missing.name
        )));
    }
    Ok(RunConfig { values })
}

/// Report row of the auxiliary-loss ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub aux_loss: bool,
    pub row: MetricReportRow,
}

const HEADER: &str = "scale,method,dice,ncc,psnr,ssim";
const ABLATION_HEADER: &str = "scale,method,aux_loss,dice,ncc,psnr,ssim";

fn metric_fields(r: &MetricReportRow) -> String {
    format!("{:.6},{:.6},{:.6},{:.6}", r.dice, r.ncc, r.psnr, r.ssim)
}

/// CSV text sorted by `(scale, method)`, six decimals per metric.
pub fn format_report(rows: &[MetricReportRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Config("report has no rows".into()));
    }
    let mut sorted: Vec<&MetricReportRow> = rows.iter().collect();
    sorted.sort_by(|a, b| (a.scale, &a.method).cmp(&(b.scale, &b.method)));
    let mut s = format!("{HEADER}\n");
    for r in sorted {
        let _ = writeln!(s, "{},{},{}", r.scale, r.method, metric_fields(r));
    }
    Ok(s)
}

/// Two-arm layout with an `aux_loss` column of `on`/`off`.
pub fn format_ablation(rows: &[AblationRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Config("report has no rows".into()));
    }
    let mut sorted: Vec<&AblationRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        (a.row.scale, &a.row.method, a.aux_loss).cmp(&(b.row.scale, &b.row.method, b.aux_loss))
    });
    let mut s = format!("{ABLATION_HEADER}\n");
    for a in sorted {
        let aux = if a.aux_loss { "on" } else { "off" };
        let _ = writeln!(
            s,
            "{},{},{aux},{}",
            a.row.scale,
            a.row.method,
            metric_fields(&a.row)
        );
    }
    Ok(s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn report_emit(rows: &[MetricReportRow], path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &format_report(rows)?)
}

pub fn ablation_emit(rows: &[AblationRow], path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &format_ablation(rows)?)
}

fn parse_f64(field: &str, line: usize) -> Result<f64> {
    field
        .parse()
        .map_err(|_| Error::Config(format!("report line {line}: bad number {field:?}")))
}

fn parse_rows(text: &str, header: &str) -> Result<Vec<(Vec<String>, MetricReportRow)>> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(Error::Config(format!("report header must be {header}")));
    }
    let width = header.split(',').count();
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != width {
                return Err(Error::Config(format!(
                    "report line {}: expected {width} fields",
                    i + 2
                )));
            }
            let n = f.len();
            let scale = f[0]
                .parse()
                .map_err(|_| Error::Config(format!("report line {}: bad scale", i + 2)))?;
            Ok((
                f[2..n - 4].iter().map(|s| s.to_string()).collect(),
                MetricReportRow {
                    method: f[1].to_string(),
                    scale,
                    dice: parse_f64(f[n - 4], i + 2)?,
                    ncc: parse_f64(f[n - 3], i + 2)?,
                    psnr: parse_f64(f[n - 2], i + 2)?,
                    ssim: parse_f64(f[n - 1], i + 2)?,
                },
            ))
        })
        .collect()
}

pub fn parse_report(text: &str) -> Result<Vec<MetricReportRow>> {
    Ok(parse_rows(text, HEADER)?
        .into_iter()
        .map(|(_, r)| r)
        .collect())
}

pub fn parse_ablation(text: &str) -> Result<Vec<AblationRow>> {
    parse_rows(text, ABLATION_HEADER)?
        .into_iter()
        .map(|(extra, row)| {
            let aux_loss = match extra[0].as_str() {
                "on" => true,
                "off" => false,
                other => {
                    return Err(Error::Config(format!(
                        "aux_loss must be on or off, got {other}"
                    )))
                }
            };
            Ok(AblationRow { aux_loss, row })
        })
        .collect()
}

fn usage() -> String {
    let mut s = String::from(
        "usage: remreg <subcommand> [--config FILE] [--key VALUE ...]\n\nsubcommands:\n",
    );
    for sub in SUBCOMMANDS {
        let _ = writeln!(s, "  {sub}");
    }
    s.push_str("\nrun `remreg <subcommand> --help` for its keys\n");
    s
}

fn build_command(sub: &'static str) -> Command {
    let mut cmd = Command::new(sub)
        .bin_name(format!("remreg {sub}"))
        .about("Keys resolve as defaults < --config file < command line.")
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key=value config file"),
        );
    for k in keys_for(sub) {
        let help = match k.need {
            Need::Default(d) => format!("{} [default: {d}]", k.help),
            Need::Required => format!("{} [required]", k.help),
            Need::Optional => k.help.to_string(),
        };
        cmd = cmd.arg(
            Arg::new(k.name)
                .long(k.name)
                .value_name("VALUE")
                .action(ArgAction::Set)
                .help(help),
        );
    }
    cmd
}

/// Caps rayon's pool from `REMREG_THREADS`.
fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("REMREG_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::Config(format!(
            "REMREG_THREADS must be a positive integer, got {v:?}"
        ))
    })?;
    // A pool built earlier in this process stays in place.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

/// Runs `argv` (program name first) and returns the process exit status.
pub fn run_command(argv: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let Some(first) = argv.get(1) else {
        let _ = write!(err, "{}", usage());
        return EXIT_USAGE;
    };
    if matches!(first.as_str(), "-h" | "--help" | "help") {
        let _ = write!(out, "{}", usage());
        return EXIT_OK;
    }
    let Some(&sub) = SUBCOMMANDS.iter().find(|s| **s == first) else {
        let _ = writeln!(err, "unknown subcommand {first:?}\n");
        let _ = write!(err, "{}", usage());
        return EXIT_USAGE;
    };
    let matches = match build_command(sub).try_get_matches_from(&argv[1..]) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    let keys = keys_for(sub);
    let overrides: Vec<(String, String)> = keys
        .iter()
        .filter_map(|k| {
            matches
                .get_one::<String>(k.name)
                .map(|v| (k.name.to_string(), v.clone()))
        })
        .collect();
    let file = matches.get_one::<String>("config").map(Path::new);
    let result = parse_config(file, &overrides, &keys).and_then(|cfg| {
        let _ = write!(err, "# {sub} resolved config\n{}", cfg.render());
        configure_threads()?;
        dispatch(sub, &cfg, out, err)
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

fn dispatch(sub: &str, cfg: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match sub {
        "synth" => cmd_synth(cfg, out),
        "degrade" => cmd_degrade(cfg),
        "train-rem" => cmd_train_rem(cfg, out),
        "train-cascade" => cmd_train_cascade(cfg, out),
        "infer-rem" => cmd_infer_rem(cfg),
        "register" => cmd_register(cfg, out),
        "evaluate" => cmd_evaluate(cfg, out),
        "paramcount" => cmd_paramcount(cfg, out),
        "gradcheck" => cmd_gradcheck(cfg, out, err),
        _ => unreachable!("validated subcommand"),
    }
}

fn io_out(r: std::io::Result<()>) -> Result<()> {
    r.map_err(|e| Error::io("<stdout>", e))
}

fn parse_dims(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split(['x', ','])
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("cannot parse dims {s:?}")))?;
    match parts[..] {
        [d] => Ok([d; 3]),
        [a, b, c] => Ok([a, b, c]),
        _ => Err(Error::Config(format!(
            "dims need one or three sides, got {s:?}"
        ))),
    }
}

fn cmd_synth(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let seed: u64 = cfg.get("seed")?;
    let count: usize = cfg.get("count")?;
    let phantom = PhantomCfg {
        dims: parse_dims(cfg.raw("dims").unwrap_or_default())?,
        num_labels: cfg.get("num_labels")?,
        amplitude: cfg.get("amplitude")?,
        smooth_sigma: cfg.get("smooth_sigma")?,
        jitter: cfg.get("jitter")?,
    };
    phantom.validate()?;
    let counts = (
        cfg.get_opt::<usize>("train")?,
        cfg.get_opt::<usize>("val")?,
        cfg.get_opt::<usize>("test")?,
    );
    let split = match counts {
        (None, None, None) => DatasetSplit::proportional(count)?,
        (Some(a), Some(b), Some(c)) if a + b + c == count => DatasetSplit::from_counts(a, b, c)?,
        _ => {
            return Err(Error::Config(
                "train, val and test must be given together and sum to count".into(),
            ))
        }
    };
    let ds = Dataset::new(crate::data::gen_dataset(seed, count, &phantom)?, split)?;
    let dir: String = cfg.get("out_dir")?;
    save_dataset(&dir, &ds, seed, &phantom)?;
    io_out(writeln!(
        out,
        "wrote {count} phantoms to {dir} (train {}, val {}, test {})",
        ds.split.train.len(),
        ds.split.val.len(),
        ds.split.test.len()
    ))
}

fn cmd_degrade(cfg: &RunConfig) -> Result<()> {
    let vol = read_intensity(cfg.get::<String>("input")?)?;
    let d = degrade(&vol, cfg.get("scale")?)?;
    write_volume(cfg.get::<String>("out_lr")?, &Volume::F32(d.lr))?;
    write_volume(cfg.get::<String>("out_lr_up")?, &Volume::F32(d.lr_up))
}

fn schedule(cfg: &RunConfig) -> Result<ScheduleCfg> {
    ScheduleCfg::new(
        cfg.get("lr0")?,
        cfg.get("lr_decay")?,
        cfg.get("lr_period")?,
        cfg.get("lr_floor")?,
    )
}

fn max_steps(cfg: &RunConfig) -> Result<Option<u64>> {
    Ok(Some(cfg.get::<u64>("max_steps")?).filter(|&m| m > 0))
}

fn resume(cfg: &RunConfig) -> Result<Option<Checkpoint>> {
    cfg.get_opt::<String>("resume")?
        .map(load_checkpoint)
        .transpose()
}

fn history_csv(history: &History) -> String {
    let keys: Vec<&String> =
        history
            .epochs
            .iter()
            .flat_map(|r| r.val.keys())
            .fold(Vec::new(), |mut acc, k| {
                if !acc.contains(&k) {
                    acc.push(k);
                }
                acc
            });
    let mut s = String::from("epoch,iteration,train_loss");
    for k in &keys {
        let _ = write!(s, ",{k}");
    }
    s.push('\n');
    for r in &history.epochs {
        let _ = write!(s, "{},{},", r.epoch, r.iteration);
        if let Some(l) = r.train_loss {
            let _ = write!(s, "{l:.6}");
        }
        for k in &keys {
            let _ = write!(
                s,
                ",{}",
                r.val.get(*k).map_or(String::new(), |v| format!("{v:.6}"))
            );
        }
        s.push('\n');
    }
    s
}

fn finish_training(
    cfg: &RunConfig,
    ck: &Checkpoint,
    history: &History,
    out: &mut dyn Write,
) -> Result<()> {
    for r in &history.epochs {
        let val: Vec<String> = r.val.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
        let loss = r.train_loss.map_or("-".to_string(), |l| format!("{l:.6}"));
        io_out(writeln!(
            out,
            "epoch {} iter {} loss {loss} {}",
            r.epoch,
            r.iteration,
            val.join(" ")
        ))?;
    }
    let path: String = cfg.get("out")?;
    save_checkpoint(&path, ck)?;
    if let Some(p) = cfg.get_opt::<String>("history_csv")? {
        write_text(Path::new(&p), &history_csv(history))?;
    }
    io_out(writeln!(out, "checkpoint written to {path}"))
}

fn cmd_train_rem(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let (ds, _) = load_dataset(cfg.get::<String>("data_dir")?)?;
    let rem_cfg = RemConfig::new(cfg.get("variant")?, cfg.get("k")?, cfg.get("n")?)?;
    let scale = cfg.get("scale")?;
    let seed = cfg.get("seed")?;
    let tc = TrainCfg {
        epochs: cfg.get("epochs")?,
        batch: cfg.get("batch")?,
        patch: Some(cfg.get("patch")?),
        schedule: schedule(cfg)?,
        patches_per_volume: cfg.get("patches_per_volume")?,
        max_steps: max_steps(cfg)?,
        huber_delta: cfg.get("huber_delta")?,
        ..TrainCfg::rem_desk(scale, seed)
    };
    let outcome = train_rem(&ds, rem_cfg, &tc, resume(cfg)?.as_ref())?;
    finish_training(cfg, &outcome.checkpoint, &outcome.history, out)
}

/// Best enhancement module stored in a train-rem or train-cascade checkpoint.
pub fn rem_from_checkpoint(ck: &Checkpoint) -> Result<RemModel<f32>> {
    let rc = ck
        .rem
        .ok_or_else(|| Error::Checkpoint("checkpoint holds no enhancement module".into()))?;
    let mut rem = build_rem(rc, 0)?;
    ck.load_params("best/rem", &mut rem.params)?;
    Ok(rem)
}

pub fn reg_from_checkpoint(ck: &Checkpoint) -> Result<RegModel<f32>> {
    let rc = ck
        .reg
        .ok_or_else(|| Error::Checkpoint("checkpoint holds no registration net".into()))?;
    let mut reg = build_reg(rc)?;
    ck.load_params("best/reg", &mut reg.params)?;
    Ok(reg)
}

fn cmd_train_cascade(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let (ds, _) = load_dataset(cfg.get::<String>("data_dir")?)?;
    let method: Method = cfg.get("method")?;
    let rem = match cfg.get_opt::<String>("rem")? {
        Some(p) => Some(rem_from_checkpoint(&load_checkpoint(p)?)?),
        None => None,
    };
    let seed = cfg.get("seed")?;
    let reg_cfg = RegConfig::new(cfg.get("levels")?, cfg.get("base_channels")?, seed)?;
    let tc = TrainCfg {
        epochs: cfg.get("epochs")?,
        batch: cfg.get("batch")?,
        schedule: schedule(cfg)?,
        weights: LossWeights::new(cfg.get("lambda1")?, cfg.get("lambda2")?)?,
        freeze_rem: cfg.flag("freeze_rem")?,
        max_steps: max_steps(cfg)?,
        huber_delta: cfg.get("huber_delta")?,
        lncc: LnccCfg::new(cfg.get("lncc_window")?, cfg.get("lncc_eps")?)?,
        ..TrainCfg::cascade_desk(cfg.get("scale")?, seed)
    };
    let outcome = train_cascade(
        &ds,
        method,
        rem.as_ref(),
        reg_cfg,
        &tc,
        resume(cfg)?.as_ref(),
    )?;
    finish_training(cfg, &outcome.checkpoint, &outcome.history, out)
}

fn cmd_infer_rem(cfg: &RunConfig) -> Result<()> {
    let rem = rem_from_checkpoint(&load_checkpoint(cfg.get::<String>("checkpoint")?)?)?;
    let x = read_intensity(cfg.get::<String>("input")?)?;
    write_volume(cfg.get::<String>("output")?, &Volume::F32(rem.apply(&x)?))
}

fn cascade_meta(ck: &Checkpoint) -> Result<(Method, TrainCfg)> {
    if ck.meta.get("trainer").and_then(|v| v.as_str()) != Some("cascade") {
        return Err(Error::Checkpoint("not a train-cascade checkpoint".into()));
    }
    let get = |k: &str| {
        ck.meta
            .get(k)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint meta lacks {k}")))
    };
    let method =
        serde_json::from_value(get("method")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let tc =
        serde_json::from_value(get("train_cfg")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((method, tc))
}

/// Method and best weights of a train-cascade checkpoint.
pub fn cascade_from_checkpoint(ck: &Checkpoint) -> Result<(Method, TrainedCell)> {
    let (method, _) = cascade_meta(ck)?;
    let rem = if method.uses_rem() {
        Some(rem_from_checkpoint(ck)?)
    } else {
        None
    };
    Ok((
        method,
        TrainedCell {
            rem,
            reg: reg_from_checkpoint(ck)?,
        },
    ))
}

/// DVF aligning `moving` to `fixed`, both on the method's input grid; the
/// enhancement module, when present, is applied to both first.
pub fn register_pair(
    cell: &TrainedCell,
    fixed: &Tensor5<f32>,
    moving: &Tensor5<f32>,
) -> Result<Tensor5<f32>> {
    let (fixed, moving) = match &cell.rem {
        Some(rem) => (rem.apply(fixed)?, rem.apply(moving)?),
        None => (fixed.clone(), moving.clone()),
    };
    let s = fixed.shape();
    if moving.shape() != s || s.batch() != 1 || s.channels() != 1 {
        return Err(Error::shape(
            "register_pair",
            format!(
                "need two (1,1,L,W,H) volumes, got {s} and {}",
                moving.shape()
            ),
        ));
    }
    let mut both = fixed.into_data();
    both.extend_from_slice(moving.data());
    let [l, w, h] = s.spatial();
    let pair = Tensor5::from_vec(Shape5::new(2, 1, l, w, h), both)?;
    cell.reg.apply(&rearrange_pair(&pair)?)
}

fn cmd_register(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let (method, cell) =
        cascade_from_checkpoint(&load_checkpoint(cfg.get::<String>("checkpoint")?)?)?;
    let fixed = read_intensity(cfg.get::<String>("fixed")?)?;
    let moving = read_intensity(cfg.get::<String>("moving")?)?;
    let dvf = register_pair(&cell, &fixed, &moving)?;
    write_volume(
        cfg.get::<String>("out")?,
        &Volume::F32(warp_trilinear_forward(&moving, &dvf)?),
    )?;
    match (
        cfg.get_opt::<String>("moving_labels")?,
        cfg.get_opt::<String>("out_labels")?,
    ) {
        (Some(src), Some(dst)) => {
            let warped = warp_nearest(&read_labels(src)?, &dvf)?;
            write_volume(dst, &Volume::Labels(warped))?;
        }
        (None, None) => {}
        _ => {
            return Err(Error::Config(
                "moving_labels and out_labels go together".into(),
            ))
        }
    }
    io_out(writeln!(
        out,
        "{method}: max |displacement| {:.4} voxels",
        dvf.max_abs()
    ))
}

fn cmd_evaluate(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let (ds, _) = load_dataset(cfg.get::<String>("data_dir")?)?;
    let scales: Vec<usize> = cfg
        .raw("scales")
        .unwrap_or_default()
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config("scales must be a comma-separated list".into()))?;
    let paths: Vec<String> = cfg
        .get_opt::<String>("checkpoints")?
        .map(|s| {
            s.split(',')
                .map(|p| p.trim().to_string())
                .filter(|p| !p.is_empty())
                .collect()
        })
        .unwrap_or_default();
    let mut cells = Vec::new();
    for p in &paths {
        let ck = load_checkpoint(p)?;
        let (method, tc) = cascade_meta(&ck)?;
        let cell = TrainedCell {
            rem: if ck.rem.is_some() {
                Some(rem_from_checkpoint(&ck)?)
            } else {
                None
            },
            reg: reg_from_checkpoint(&ck)?,
        };
        cells.push((tc.scale, method, tc.weights.lambda1 > 0.0, cell));
    }
    let test = &ds.split.test;
    let path: String = cfg.get("out")?;
    if cfg.flag("ablation")? {
        let mut rows = Vec::new();
        let mut seen = Vec::new();
        for (scale, method, aux, cell) in cells {
            if method != Method::ReRegDownUp {
                return Err(Error::Config(format!(
                    "ablation takes rereg-down-up checkpoints, got {method}"
                )));
            }
            if seen.contains(&(scale, aux)) {
                return Err(Error::Config(format!(
                    "two checkpoints for scale {scale} aux {aux}"
                )));
            }
            seen.push((scale, aux));
            let mut models = SuiteModels::default();
            models.insert(scale, method, cell);
            for row in evaluate_suite(&ds, test, &models, &[scale], &[method])? {
                rows.push(AblationRow { aux_loss: aux, row });
            }
        }
        let text = format_ablation(&rows)?;
        write_text(Path::new(&path), &text)?;
        return io_out(write!(out, "{text}"));
    }
    let mut models = SuiteModels::default();
    for (scale, method, _, cell) in cells {
        if models.cells.contains_key(&(scale, method)) {
            return Err(Error::Config(format!(
                "two checkpoints for {method} at scale {scale}"
            )));
        }
        models.insert(scale, method, cell);
    }
    let mut rows = Vec::new();
    for &scale in &scales {
        let methods: Vec<Method> = Method::ALL
            .into_iter()
            .filter(|m| *m == Method::Identity || models.cells.contains_key(&(scale, *m)))
            .collect();
        rows.extend(evaluate_suite(&ds, test, &models, &[scale], &methods)?);
    }
    let text = format_report(&rows)?;
    write_text(Path::new(&path), &text)?;
    io_out(write!(out, "{text}"))
}

fn cmd_paramcount(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let variant: Variant = cfg.get("variant")?;
    let rc = RemConfig::new(variant, cfg.get("k")?, cfg.get("n")?)?;
    io_out(writeln!(out, "{}", rem_param_count(&rc)))
}

fn cmd_gradcheck(cfg: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let gc = GradcheckCfg {
        h: cfg.get("h")?,
        rel_tol: cfg.get("rel_tol")?,
        abs_floor: cfg.get("abs_floor")?,
        instances: cfg.get("instances")?,
        seed: cfg.get("seed")?,
    };
    let ops_raw: String = cfg.get("ops")?;
    let ops: Vec<&str> = if ops_raw == "all" {
        SUITE.to_vec()
    } else {
        ops_raw.split(',').map(str::trim).collect()
    };
    let mut failed = Vec::new();
    for op in ops {
        let r = check_op(op, &gc)?;
        io_out(writeln!(
            out,
            "{:<16} instances {:>3} checked {:>6} skipped {:>4} max_rel_err {:.3e} {}",
            r.op,
            r.instances,
            r.checked,
            r.skipped,
            r.max_rel_err,
            if r.passed { "PASS" } else { "FAIL" }
        ))?;
        if !r.passed {
            failed.push(r.op);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        let _ = writeln!(err, "gradient check failed for {}", failed.join(", "));
        Err(Error::Gradient(format!(
            "{} op(s) out of tolerance",
            failed.len()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> (i32, String, String) {
        let argv: Vec<String> = std::iter::once("remreg")
            .chain(args.iter().copied())
            .map(String::from)
            .collect();
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run_command(&argv, &mut out, &mut err);
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn paramcount_prints_the_count() {
        let (code, out, _) = run(&["paramcount", "--variant", "I", "--k", "16", "--n", "8"]);
        assert_eq!(code, 0);
        assert_eq!(out.trim(), "56305");
    }

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        let (code, _, err) = run(&["frobnicate"]);
        assert_eq!(code, 2);
        assert!(err.contains("usage: remreg"));
        assert_eq!(run(&[]).0, 2);
        assert_eq!(run(&["paramcount", "--bogus", "1"]).0, 2);
        assert_eq!(run(&["paramcount", "--k", "zero"]).0, 2);
    }

    #[test]
    fn help_lists_every_key() {
        for sub in SUBCOMMANDS {
            let (code, out, _) = run(&[sub, "--help"]);
            assert_eq!(code, 0, "{sub}");
            for k in keys_for(sub) {
                assert!(
                    out.contains(&format!("--{}", k.name)),
                    "{sub} help lacks {}",
                    k.name
                );
            }
        }
    }

    #[test]
    fn precedence_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        fs::write(&file, "# comment\nk = 16\nn=8 # trailing\n").unwrap();
        let keys = keys_for("paramcount");
        let cfg = parse_config(Some(&file), &[("k".into(), "8".into())], &keys).unwrap();
        assert_eq!(cfg.get::<usize>("k").unwrap(), 8);
        assert_eq!(cfg.get::<usize>("n").unwrap(), 8);
        assert_eq!(cfg.raw("variant"), Some("I"));

        fs::write(&file, "foo=1\n").unwrap();
        let e = parse_config(Some(&file), &[], &keys)
            .unwrap_err()
            .to_string();
        assert!(e.contains("foo"), "{e}");
        fs::write(&file, "just words\n").unwrap();
        assert!(parse_config(Some(&file), &[], &keys).is_err());
        assert!(parse_config(None, &[], &keys_for("degrade")).is_err());

        let tc = parse_config(None, &[], &keys_for("train-cascade")[2..]).unwrap();
        assert_eq!(tc.get::<f64>("lambda1").unwrap(), 10.0);
    }

    fn row(scale: u32, method: &str, dice: f64) -> MetricReportRow {
        MetricReportRow {
            method: method.into(),
            scale,
            dice,
            ncc: 0.5,
            psnr: 20.0,
            ssim: 0.25,
        }
    }

    #[test]
    fn report_layout() {
        let one = format_report(&[row(2, "identity", 0.123456789)]).unwrap();
        assert_eq!(
            one,
            "scale,method,dice,ncc,psnr,ssim\n2,identity,0.123457,0.500000,20.000000,0.250000\n"
        );
        assert_eq!(one.lines().count(), 2);
        let rows = vec![
            row(4, "reg-down", 0.1),
            row(2, "reg-down-up", 0.2),
            row(2, "identity", 0.3),
        ];
        let text = format_report(&rows).unwrap();
        let methods: Vec<&str> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap())
            .collect();
        assert_eq!(methods, ["identity", "reg-down-up", "reg-down"]);
        let back = parse_report(&text).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(format_report(&back).unwrap(), text);
        assert!(format_report(&[]).is_err());

        let ab = format_ablation(&[
            AblationRow {
                aux_loss: true,
                row: row(4, "rereg-down-up", 0.7),
            },
            AblationRow {
                aux_loss: false,
                row: row(4, "rereg-down-up", 0.6),
            },
        ])
        .unwrap();
        assert!(ab.starts_with("scale,method,aux_loss,dice"));
        assert!(ab
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("4,rereg-down-up,off,"));
        assert_eq!(parse_ablation(&ab).unwrap().len(), 2);
        assert!(parse_report(&ab).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn report_parses_back_at_six_decimals(
            values in proptest::collection::vec((0u32..3, 0usize..4, -1e3f64..1e3, -1.0f64..1.0, 0.0f64..80.0, 0.0f64..1.0), 1..8)
        ) {
            let rows: Vec<MetricReportRow> = values
                .iter()
                .map(|&(s, m, dice, ncc, psnr, ssim)| MetricReportRow {
                    method: Method::ALL[m].to_string(),
                    scale: 2 << s,
                    dice,
                    ncc,
                    psnr,
                    ssim,
                })
                .collect();
            let text = format_report(&rows).unwrap();
            let back = parse_report(&text).unwrap();
            proptest::prop_assert_eq!(back.len(), rows.len());
            for b in &back {
                let close = |a: f64, b: f64| (a - b).abs() <= 5e-7 + 1e-12 * a.abs();
                proptest::prop_assert!(rows.iter().any(|r| r.method == b.method
                    && r.scale == b.scale
                    && close(r.dice, b.dice)
                    && close(r.ncc, b.ncc)
                    && close(r.psnr, b.psnr)
                    && close(r.ssim, b.ssim)));
            }
            proptest::prop_assert_eq!(format_report(&back).unwrap(), text);
        }
    }

    #[test]
    fn dims_parsing() {
        assert_eq!(parse_dims("32").unwrap(), [32; 3]);
        assert_eq!(parse_dims("16x24x32").unwrap(), [16, 24, 32]);
        assert!(parse_dims("16x24").is_err());
    }
}
