//! Acceptance gate: one PASS/FAIL line per criterion. Runs as a plain
//! binary (`harness = false`) so the lines reach the console; exits non-zero
//! when any hard criterion fails.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use remreg_core::cli::{format_ablation, format_report, AblationRow};
use remreg_core::data::{gen_dataset, Checkpoint, Dataset, DatasetSplit, PhantomCfg};
use remreg_core::engine::{Shape5, Tensor5};
use remreg_core::gradcheck::{run_suite, GradcheckCfg};
use remreg_core::labels::LabelVolume;
use remreg_core::losses::{lncc_value, smoothness_value, LnccCfg, LossWeights};
use remreg_core::metrics::{dice, ncc_global, psnr, ssim3d, MetricReportRow, SsimCfg};
use remreg_core::regnet::RegConfig;
use remreg_core::rem::{build_rem, rem_param_count, RemConfig, RemModel, Variant};
use remreg_core::trainer::{
    evaluate_suite, train_cascade, train_rem, CascadeOutcome, Method, SuiteModels, TrainCfg,
};

const SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Clone, Copy, PartialEq)]
enum Verdict {
    Pass,
    Fail,
    Warn,
}

struct Gate {
    failed: usize,
}

impl Gate {
    fn line(&mut self, id: u32, name: &str, verdict: Verdict, detail: String) {
        let tag = match verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Warn => "PASS (soft, warning)",
        };
        if verdict == Verdict::Fail {
            self.failed += 1;
        }
        println!("criterion {id} [{name}]: {tag}; {detail}");
    }

    fn check(&mut self, id: u32, name: &str, ok: bool, detail: String) {
        self.line(
            id,
            name,
            if ok { Verdict::Pass } else { Verdict::Fail },
            detail,
        );
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean with the n−1 sample deviation.
fn std_err(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (var / xs.len() as f64).sqrt()
}

fn progress(msg: &str, since: Instant) {
    eprintln!("[{:>7.1}s] {msg}", since.elapsed().as_secs_f64());
}

/// 16 phantoms per seed: 9 train, 1 validation, 6 test.
fn acceptance_dataset(seed: u64) -> Dataset {
    let samples = gen_dataset(seed, 16, &PhantomCfg::default()).expect("phantoms");
    Dataset::new(samples, DatasetSplit::from_counts(9, 1, 6).unwrap()).unwrap()
}

// ---------------------------------------------------------------------------
// criterion 1

fn parameter_counts(gate: &mut Gate) {
    let t = Instant::now();
    let table = [
        (8, 8, 14_329, "14.3"),
        (16, 8, 56_305, "56.3"),
        (16, 16, 111_729, "111.7"),
        (32, 8, 223_201, "223.2"),
        (32, 16, 444_641, "444.6"),
        (64, 8, 888_769, "888.8"),
        (64, 16, 1_774_017, "1774.0"),
    ];
    let mut wrong = Vec::new();
    for (k, n, exact, rounded) in table {
        let cfg = RemConfig::new(Variant::I, k, n).unwrap();
        let closed = rem_param_count(&cfg);
        let built = build_rem::<f32>(cfg, 0).unwrap().num_params();
        if closed != exact || built != exact || format!("{:.1}", closed as f64 / 1000.0) != rounded
        {
            wrong.push(format!(
                "k={k} n={n}: closed {closed}, built {built}, expected {exact}"
            ));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    gate.check(
        1,
        "parameter counts",
        wrong.is_empty() && secs < 1.0,
        format!(
            "{}/7 exact, {secs:.3} s (limit 1 s) {}",
            7 - wrong.len(),
            wrong.join("; ")
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 2

fn gradient_suite(gate: &mut Gate) {
    let t = Instant::now();
    let cfg = GradcheckCfg::default();
    let reports = run_suite(&cfg).expect("gradient suite runs");
    let secs = t.elapsed().as_secs_f64();
    let mut detail = String::new();
    for r in &reports {
        let _ = write!(
            detail,
            "{} {:.1e}{} ",
            r.op,
            r.max_rel_err,
            if r.passed { "" } else { " (failed)" }
        );
    }
    let ok = reports.iter().all(|r| r.passed && r.instances >= 10) && secs < 120.0;
    gate.check(
        2,
        "gradient suite",
        ok,
        format!(
            "{} ops, rel tol {:.0e}, {secs:.1} s (limit 120 s); max rel err: {detail}",
            reports.len(),
            cfg.rel_tol
        ),
    );
}

// ---------------------------------------------------------------------------
// criteria 3 and 4

struct RemScores {
    psnr: f64,
    ssim: f64,
    base_psnr: f64,
    base_ssim: f64,
}

fn score_rem(ds: &Dataset, rem: &RemModel<f32>, scale: usize) -> RemScores {
    let degraded = ds.degraded(scale).unwrap();
    let (mut p, mut s, mut bp, mut bs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let ssim_cfg = SsimCfg::default();
    for &i in &ds.split.test {
        let hr = &ds.samples[i].intensity;
        let up = &degraded[i].lr_up;
        let sr = rem.apply(up).unwrap();
        p.push(psnr(&sr, hr, 1.0).unwrap().value());
        s.push(ssim3d(&sr, hr, &ssim_cfg).unwrap());
        bp.push(psnr(up, hr, 1.0).unwrap().value());
        bs.push(ssim3d(up, hr, &ssim_cfg).unwrap());
    }
    RemScores {
        psnr: mean(&p),
        ssim: mean(&s),
        base_psnr: mean(&bp),
        base_ssim: mean(&bs),
    }
}

fn train_rem_model(
    ds: &Dataset,
    variant: Variant,
    scale: usize,
    seed: u64,
) -> (RemModel<f32>, f64) {
    let t = Instant::now();
    let cfg = TrainCfg::rem_desk(scale, seed);
    let out =
        train_rem(ds, RemConfig::new(variant, 8, 4).unwrap(), &cfg, None).expect("REM training");
    (out.best, t.elapsed().as_secs_f64())
}

// ---------------------------------------------------------------------------
// criteria 5 to 7

fn train_arm(
    ds: &Dataset,
    method: Method,
    rem: Option<&RemModel<f32>>,
    scale: usize,
    seed: u64,
    lambda1: f64,
) -> (CascadeOutcome, f64) {
    let t = Instant::now();
    let cfg = TrainCfg {
        weights: LossWeights {
            lambda1,
            ..LossWeights::default()
        },
        ..TrainCfg::cascade_desk(scale, seed)
    };
    let reg = RegConfig::new(3, 8, seed).unwrap();
    let out = train_cascade(ds, method, rem, reg, &cfg, None).expect("cascade training");
    (out, t.elapsed().as_secs_f64())
}

fn x4(r: &SeedResult) -> &Vec<MetricReportRow> {
    &r.x4
}

fn x2(r: &SeedResult) -> &Vec<MetricReportRow> {
    &r.x2
}

fn row<'a>(rows: &'a [MetricReportRow], method: Method) -> &'a MetricReportRow {
    let name = method.to_string();
    rows.iter().find(|r| r.method == name).expect("row present")
}

#[derive(Default)]
struct SeedResult {
    rem_i: Option<RemScores>,
    rem_iii: Option<RemScores>,
    rem_secs: f64,
    x4: Vec<MetricReportRow>,
    x4_no_aux: Option<MetricReportRow>,
    x2: Vec<MetricReportRow>,
    cascade_secs: f64,
}

fn run_seed(seed: u64, since: Instant) -> SeedResult {
    let ds = acceptance_dataset(seed);
    let mut r = SeedResult::default();

    let (rem2, secs) = train_rem_model(&ds, Variant::I, 2, seed);
    r.rem_secs += secs;
    r.rem_i = Some(score_rem(&ds, &rem2, 2));
    progress(
        &format!("seed {seed}: REM I at 2x trained in {secs:.0} s"),
        since,
    );
    let (rem2_iii, secs) = train_rem_model(&ds, Variant::III, 2, seed);
    r.rem_iii = Some(score_rem(&ds, &rem2_iii, 2));
    progress(
        &format!("seed {seed}: REM III at 2x trained in {secs:.0} s"),
        since,
    );

    let (rem4, secs) = train_rem_model(&ds, Variant::I, 4, seed);
    r.cascade_secs += secs;
    progress(
        &format!("seed {seed}: REM I at 4x trained in {secs:.0} s"),
        since,
    );

    let test = &ds.split.test;
    let mut models = SuiteModels::default();
    for (method, rem) in [
        (Method::ReRegDownUp, Some(&rem4)),
        (Method::RegDownUp, None),
        (Method::RegDown, None),
    ] {
        let (out, secs) = train_arm(&ds, method, rem, 4, seed, 10.0);
        r.cascade_secs += secs;
        progress(
            &format!("seed {seed}: {method} at 4x trained in {secs:.0} s"),
            since,
        );
        models.insert(4, method, (&out).into());
    }
    r.x4 = evaluate_suite(&ds, test, &models, &[4], &Method::ALL).unwrap();

    let (no_aux, secs) = train_arm(&ds, Method::ReRegDownUp, Some(&rem4), 4, seed, 0.0);
    progress(
        &format!("seed {seed}: rereg-down-up without aux loss trained in {secs:.0} s"),
        since,
    );
    let mut ablation = SuiteModels::default();
    ablation.insert(4, Method::ReRegDownUp, (&no_aux).into());
    r.x4_no_aux = Some(
        evaluate_suite(&ds, test, &ablation, &[4], &[Method::ReRegDownUp])
            .unwrap()
            .remove(0),
    );

    let mut models2 = SuiteModels::default();
    for (method, rem) in [
        (Method::ReRegDownUp, Some(&rem2)),
        (Method::RegDownUp, None),
    ] {
        let (out, secs) = train_arm(&ds, method, rem, 2, seed, 10.0);
        r.cascade_secs += secs;
        progress(
            &format!("seed {seed}: {method} at 2x trained in {secs:.0} s"),
            since,
        );
        models2.insert(2, method, (&out).into());
    }
    r.x2 = evaluate_suite(
        &ds,
        test,
        &models2,
        &[2],
        &[Method::RegDownUp, Method::ReRegDownUp],
    )
    .unwrap();
    for row in r.x4.iter().chain(&r.x2).chain(&r.x4_no_aux) {
        eprintln!(
            "    seed {seed} x{} {:<14} dice {:.4} ncc {:.4} psnr {:.3} ssim {:.4}",
            row.scale, row.method, row.dice, row.ncc, row.psnr, row.ssim
        );
    }
    r
}

fn learned_criteria(gate: &mut Gate, since: Instant) {
    let results: Vec<SeedResult> = SEEDS.iter().map(|&s| run_seed(s, since)).collect();

    // criterion 3
    let rem_i: Vec<&RemScores> = results.iter().map(|r| r.rem_i.as_ref().unwrap()).collect();
    let p = mean(&rem_i.iter().map(|s| s.psnr).collect::<Vec<_>>());
    let bp = mean(&rem_i.iter().map(|s| s.base_psnr).collect::<Vec<_>>());
    let s = mean(&rem_i.iter().map(|s| s.ssim).collect::<Vec<_>>());
    let bs = mean(&rem_i.iter().map(|s| s.base_ssim).collect::<Vec<_>>());
    let rem_secs: f64 = results.iter().map(|r| r.rem_secs).sum();
    gate.check(
        3,
        "REM efficacy",
        p >= bp + 1.0 && s >= bs && rem_secs <= 1800.0,
        format!(
            "PSNR {p:.3} dB vs trilinear {bp:.3} dB (gain {:.3}, need >= 1.0); SSIM {s:.4} vs {bs:.4}; {rem_secs:.0} s training (limit 1800 s)",
            p - bp
        ),
    );

    // criterion 4
    let p3 = mean(
        &results
            .iter()
            .map(|r| r.rem_iii.as_ref().unwrap().psnr)
            .collect::<Vec<_>>(),
    );
    gate.check(
        4,
        "variant ordering",
        p >= p3 - 0.2,
        format!("Variant I {p:.3} dB, Variant III {p3:.3} dB (need I >= III - 0.2)"),
    );

    // criterion 5
    let over = |rows: fn(&SeedResult) -> &Vec<MetricReportRow>,
                m: Method,
                f: fn(&MetricReportRow) -> f64| {
        results
            .iter()
            .map(|r| f(row(rows(r), m)))
            .collect::<Vec<f64>>()
    };
    let dice_of = |r: &MetricReportRow| r.dice;
    let ncc_of = |r: &MetricReportRow| r.ncc;
    let rereg = mean(&over(x4, Method::ReRegDownUp, dice_of));
    let regdu = mean(&over(x4, Method::RegDownUp, dice_of));
    let ident = mean(&over(x4, Method::Identity, dice_of));
    let ncc2_rereg = mean(&over(x2, Method::ReRegDownUp, ncc_of));
    let ncc2_regdu = mean(&over(x2, Method::RegDownUp, ncc_of));
    let cascade_secs: f64 = results.iter().map(|r| r.cascade_secs).sum();
    gate.check(
        5,
        "cascade efficacy",
        rereg > regdu
            && rereg >= ident + 0.05
            && regdu >= ident + 0.05
            && ncc2_rereg >= ncc2_regdu
            && cascade_secs <= 7200.0,
        format!(
            "4x Dice rereg-down-up {rereg:.4} vs reg-down-up {regdu:.4}, identity {ident:.4} (margins {:.4}, {:.4}; need >= 0.05); 2x NCC rereg-down-up {ncc2_rereg:.4} vs reg-down-up {ncc2_regdu:.4}; {cascade_secs:.0} s (limit 7200 s)",
            rereg - ident,
            regdu - ident
        ),
    );

    // criterion 6
    let regd = mean(&over(x4, Method::RegDown, dice_of));
    gate.check(
        6,
        "dimension effect",
        regdu > regd,
        format!("4x Dice reg-down-up {regdu:.4} vs reg-down {regd:.4}"),
    );

    // criterion 7
    let with: Vec<&MetricReportRow> = results
        .iter()
        .map(|r| row(&r.x4, Method::ReRegDownUp))
        .collect();
    let without: Vec<&MetricReportRow> = results
        .iter()
        .map(|r| r.x4_no_aux.as_ref().unwrap())
        .collect();
    let dd: Vec<f64> = with
        .iter()
        .zip(&without)
        .map(|(a, b)| a.dice - b.dice)
        .collect();
    let dn: Vec<f64> = with
        .iter()
        .zip(&without)
        .map(|(a, b)| a.ncc - b.ncc)
        .collect();
    let averaged = |rows: &[&MetricReportRow], aux_loss: bool| AblationRow {
        aux_loss,
        row: MetricReportRow {
            method: Method::ReRegDownUp.to_string(),
            scale: 4,
            dice: mean(&rows.iter().map(|r| r.dice).collect::<Vec<_>>()),
            ncc: mean(&rows.iter().map(|r| r.ncc).collect::<Vec<_>>()),
            psnr: mean(&rows.iter().map(|r| r.psnr).collect::<Vec<_>>()),
            ssim: mean(&rows.iter().map(|r| r.ssim).collect::<Vec<_>>()),
        },
    };
    let table = format_ablation(&[averaged(&without, false), averaged(&with, true)]).unwrap();
    print!("{table}");
    let verdict = if mean(&dd) >= 0.0 && mean(&dn) >= 0.0 {
        Verdict::Pass
    } else if (mean(&dd) >= 0.0 || -mean(&dd) <= std_err(&dd))
        && (mean(&dn) >= 0.0 || -mean(&dn) <= std_err(&dn))
    {
        Verdict::Warn
    } else {
        Verdict::Fail
    };
    gate.line(
        7,
        "auxiliary loss",
        verdict,
        format!(
            "Dice gain {:+.4} (SE {:.4}), NCC gain {:+.4} (SE {:.4}) with lambda1 = 10 over lambda1 = 0",
            mean(&dd),
            std_err(&dd),
            mean(&dn),
            std_err(&dn)
        ),
    );

    // Seed-averaged evaluation table.
    let mut table_rows = Vec::new();
    for rows_of in [x4 as fn(&SeedResult) -> &Vec<MetricReportRow>, x2] {
        for proto in rows_of(&results[0]) {
            let per_seed: Vec<&MetricReportRow> = results
                .iter()
                .map(|r| {
                    rows_of(r)
                        .iter()
                        .find(|x| x.method == proto.method)
                        .unwrap()
                })
                .collect();
            let mut avg = averaged(&per_seed, true).row;
            avg.method = proto.method.clone();
            avg.scale = proto.scale;
            table_rows.push(avg);
        }
    }
    print!("{}", format_report(&table_rows).unwrap());
}

// ---------------------------------------------------------------------------
// criterion 8

fn pipeline(seed: u64) -> (Vec<u8>, Vec<u8>, String, Checkpoint, Checkpoint) {
    let samples = gen_dataset(seed, 5, &PhantomCfg::default()).unwrap();
    let ds = Dataset::new(samples, DatasetSplit::from_counts(2, 1, 2).unwrap()).unwrap();
    let rem_cfg = TrainCfg {
        epochs: 2,
        patches_per_volume: 2,
        max_steps: Some(4),
        ..TrainCfg::rem_desk(2, seed)
    };
    let rem = train_rem(
        &ds,
        RemConfig::new(Variant::I, 4, 2).unwrap(),
        &rem_cfg,
        None,
    )
    .unwrap();
    let cascade_cfg = TrainCfg {
        epochs: 2,
        ..TrainCfg::cascade_desk(2, seed)
    };
    let reg = RegConfig::new(2, 4, seed).unwrap();
    let cascade = train_cascade(
        &ds,
        Method::ReRegDownUp,
        Some(&rem.best),
        reg,
        &cascade_cfg,
        None,
    )
    .unwrap();
    let mut models = SuiteModels::default();
    models.insert(2, Method::ReRegDownUp, (&cascade).into());
    let rows = evaluate_suite(
        &ds,
        &ds.split.test,
        &models,
        &[2],
        &[Method::Identity, Method::ReRegDownUp],
    )
    .unwrap();
    (
        rem.checkpoint.to_bytes().unwrap(),
        cascade.checkpoint.to_bytes().unwrap(),
        format_report(&rows).unwrap(),
        rem.checkpoint,
        cascade.checkpoint,
    )
}

fn determinism(gate: &mut Gate) {
    let t = Instant::now();
    let a = pipeline(21);
    let b = pipeline(21);
    let identical = a.0 == b.0 && a.1 == b.1 && a.2 == b.2;

    // Reload both checkpoints from bytes, then resume a one-epoch run.
    let samples = gen_dataset(21, 5, &PhantomCfg::default()).unwrap();
    let ds = Dataset::new(samples, DatasetSplit::from_counts(2, 1, 2).unwrap()).unwrap();
    let path = std::path::Path::new("in-memory");
    let rem_ck = Checkpoint::from_bytes(path, &a.0).unwrap();
    let reg_ck = Checkpoint::from_bytes(path, &a.1).unwrap();
    let roundtrip = rem_ck == a.3 && reg_ck == a.4;
    let reg = RegConfig::new(2, 4, 21).unwrap();
    let half = TrainCfg {
        epochs: 1,
        ..TrainCfg::cascade_desk(2, 21)
    };
    let full = TrainCfg {
        epochs: 2,
        ..TrainCfg::cascade_desk(2, 21)
    };
    let rem_cfg = TrainCfg {
        epochs: 2,
        patches_per_volume: 2,
        max_steps: Some(4),
        ..TrainCfg::rem_desk(2, 21)
    };
    let rem_half = TrainCfg {
        epochs: 1,
        ..rem_cfg
    };
    let rem_model = RemConfig::new(Variant::I, 4, 2).unwrap();
    let first_rem = train_rem(&ds, rem_model, &rem_half, None).unwrap();
    let first_rem =
        Checkpoint::from_bytes(path, &first_rem.checkpoint.to_bytes().unwrap()).unwrap();
    let resumed_rem = train_rem(&ds, rem_model, &rem_cfg, Some(&first_rem)).unwrap();
    let rem = remreg_core::cli::rem_from_checkpoint(&rem_ck).unwrap();
    let first = train_cascade(&ds, Method::ReRegDownUp, Some(&rem), reg, &half, None).unwrap();
    let first = Checkpoint::from_bytes(path, &first.checkpoint.to_bytes().unwrap()).unwrap();
    let resumed = train_cascade(
        &ds,
        Method::ReRegDownUp,
        Some(&rem),
        reg,
        &full,
        Some(&first),
    )
    .unwrap();
    let resume_rem_ok = resumed_rem.checkpoint.to_bytes().unwrap() == a.0;
    let resume_reg_ok = resumed.checkpoint.to_bytes().unwrap() == a.1;
    gate.check(
        8,
        "determinism and persistence",
        identical && roundtrip && resume_rem_ok && resume_reg_ok,
        format!(
            "repeat runs identical: {identical}; save/load round trip: {roundtrip}; resumed REM equals uninterrupted: {resume_rem_ok}; resumed cascade equals uninterrupted: {resume_reg_ok}; {:.1} s",
            t.elapsed().as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 9: brute-force oracles written from the metric definitions

fn random_dims(rng: &mut ChaCha8Rng) -> [usize; 3] {
    [
        rng.random_range(2..=5),
        rng.random_range(2..=5),
        rng.random_range(2..=5),
    ]
}

fn random_volume(rng: &mut ChaCha8Rng, channels: usize, dims: [usize; 3]) -> Tensor5<f64> {
    let shape = Shape5::new(1, channels, dims[0], dims[1], dims[2]);
    Tensor5::from_fn(shape, |_| rng.random_range(0.0..1.0))
}

fn coords(dims: [usize; 3]) -> impl Iterator<Item = [usize; 3]> {
    let [l, w, h] = dims;
    (0..l).flat_map(move |i| (0..w).flat_map(move |j| (0..h).map(move |k| [i, j, k])))
}

fn at(t: &Tensor5<f64>, c: usize, p: [usize; 3]) -> f64 {
    t.at([0, c, p[0], p[1], p[2]])
}

/// Voxels of the cube of half-width `r` around `p` that lie in the grid.
fn window(dims: [usize; 3], p: [usize; 3], r: usize) -> Vec<[usize; 3]> {
    coords(dims)
        .filter(|q| (0..3).all(|a| q[a].abs_diff(p[a]) <= r))
        .collect()
}

fn oracle_dice(a: &LabelVolume, b: &LabelVolume) -> Option<f64> {
    let labels: Vec<u16> = (1..=a.max_label().max(b.max_label()))
        .filter(|l| a.data().contains(l) || b.data().contains(l))
        .collect();
    if labels.is_empty() {
        return None;
    }
    let scores: Vec<f64> = labels
        .iter()
        .map(|&l| {
            let in_a = a.data().iter().filter(|&&x| x == l).count() as f64;
            let in_b = b.data().iter().filter(|&&x| x == l).count() as f64;
            let both = a
                .data()
                .iter()
                .zip(b.data())
                .filter(|(&x, &y)| x == l && y == l)
                .count() as f64;
            2.0 * both / (in_a + in_b)
        })
        .collect();
    Some(mean(&scores))
}

fn oracle_ncc(a: &Tensor5<f64>, b: &Tensor5<f64>) -> f64 {
    let (x, y) = (a.data(), b.data());
    let (mx, my) = (mean(x), mean(y));
    let cov: f64 = x.iter().zip(y).map(|(p, q)| (p - mx) * (q - my)).sum();
    let vx: f64 = x.iter().map(|p| (p - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|q| (q - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn oracle_psnr(a: &Tensor5<f64>, b: &Tensor5<f64>) -> f64 {
    let mse = mean(
        &a.data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p - q).powi(2))
            .collect::<Vec<_>>(),
    );
    -10.0 * mse.log10()
}

/// Per-window population statistics (means, variances, covariance).
fn window_moments(
    a: &Tensor5<f64>,
    b: &Tensor5<f64>,
    p: [usize; 3],
    r: usize,
) -> (f64, f64, f64, f64, f64) {
    let dims = a.shape().spatial();
    let w = window(dims, p, r);
    let xs: Vec<f64> = w.iter().map(|&q| at(a, 0, q)).collect();
    let ys: Vec<f64> = w.iter().map(|&q| at(b, 0, q)).collect();
    let (mx, my) = (mean(&xs), mean(&ys));
    let vx = mean(&xs.iter().map(|x| (x - mx).powi(2)).collect::<Vec<_>>());
    let vy = mean(&ys.iter().map(|y| (y - my).powi(2)).collect::<Vec<_>>());
    let cxy = mean(
        &xs.iter()
            .zip(&ys)
            .map(|(x, y)| (x - mx) * (y - my))
            .collect::<Vec<_>>(),
    );
    (mx, my, vx, vy, cxy)
}

fn oracle_ssim(a: &Tensor5<f64>, b: &Tensor5<f64>) -> f64 {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let dims = a.shape().spatial();
    let vals: Vec<f64> = coords(dims)
        .map(|p| {
            let (mx, my, vx, vy, cxy) = window_moments(a, b, p, 1);
            ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .collect();
    mean(&vals)
}

/// Squared correlation from window sums of centred values, offset by `eps`.
fn oracle_lncc(a: &Tensor5<f64>, b: &Tensor5<f64>, win: usize, eps: f64) -> f64 {
    let dims = a.shape().spatial();
    let vals: Vec<f64> = coords(dims)
        .map(|p| {
            let n = window(dims, p, win / 2).len() as f64;
            let (_, _, vx, vy, cxy) = window_moments(a, b, p, win / 2);
            let (sx, sy, sxy) = (vx * n, vy * n, cxy * n);
            sxy * sxy / (sx * sy + eps)
        })
        .collect();
    mean(&vals)
}

/// Sum over the seven non-zero shifts in {0, 1}³ of squared differences
/// between each voxel and its shifted neighbour, where the neighbour exists.
fn oracle_smoothness(z: &Tensor5<f64>) -> f64 {
    let dims = z.shape().spatial();
    let mut total = 0.0;
    for m in 1..8usize {
        let shift = [m >> 2 & 1, m >> 1 & 1, m & 1];
        for c in 0..3 {
            for p in coords(dims) {
                let q = [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]];
                if (0..3).all(|a| q[a] < dims[a]) {
                    total += (at(z, c, p) - at(z, c, q)).powi(2);
                }
            }
        }
    }
    total
}

fn metric_oracles(gate: &mut Gate) {
    const TOL: f64 = 1e-10;
    const INSTANCES: u64 = 25;
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, got: f64, want: f64| {
        let err = (got - want).abs() / want.abs().max(1.0);
        match worst.iter_mut().find(|(n, _)| *n == name) {
            Some(w) => w.1 = w.1.max(err),
            None => worst.push((name, err)),
        }
    };
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + i);
        let dims = random_dims(&mut rng);
        let n = dims.iter().product();
        let labels = |rng: &mut ChaCha8Rng| {
            LabelVolume::new(dims, (0..n).map(|_| rng.random_range(0..4u16)).collect()).unwrap()
        };
        let (la, lb) = (labels(&mut rng), labels(&mut rng));
        match (dice(&la, &lb, None).unwrap().mean, oracle_dice(&la, &lb)) {
            (Some(got), Some(want)) => record("dice", got, want),
            (None, None) => record("dice", 0.0, 0.0),
            _ => record("dice", f64::INFINITY, 0.0),
        }
        let a = random_volume(&mut rng, 1, dims);
        let b = random_volume(&mut rng, 1, dims);
        record(
            "ncc_global",
            ncc_global(&a, &b).unwrap().unwrap(),
            oracle_ncc(&a, &b),
        );
        record(
            "psnr",
            psnr(&a, &b, 1.0).unwrap().value(),
            oracle_psnr(&a, &b),
        );
        record(
            "ssim3d",
            ssim3d(&a, &b, &SsimCfg::default()).unwrap(),
            oracle_ssim(&a, &b),
        );
        for win in [3, 5] {
            let cfg = LnccCfg::new(win, 1e-5).unwrap();
            record(
                "lncc",
                lncc_value(&a, &b, &cfg).unwrap(),
                oracle_lncc(&a, &b, win, 1e-5),
            );
        }
        let z = random_volume(&mut rng, 3, dims).map(|v| 4.0 * v - 2.0);
        record(
            "smoothness",
            smoothness_value(&z).unwrap(),
            oracle_smoothness(&z),
        );
    }
    let ok = worst.len() == 6 && worst.iter().all(|(_, e)| *e <= TOL);
    let detail: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    gate.check(
        9,
        "metric oracles",
        ok,
        format!(
            "{INSTANCES} instances up to 5^3, tol {TOL:.0e}; worst error: {}",
            detail.join(", ")
        ),
    );
}

/// `ACCEPTANCE_CRITERIA=1,9` runs a subset; the rest are reported as skipped.
fn selected() -> Vec<u32> {
    match std::env::var("ACCEPTANCE_CRITERIA") {
        Ok(v) => v.split(',').filter_map(|c| c.trim().parse().ok()).collect(),
        Err(_) => (1..=9).collect(),
    }
}

fn main() {
    let since = Instant::now();
    let mut gate = Gate { failed: 0 };
    let want = selected();
    let on = |ids: &[u32]| ids.iter().any(|i| want.contains(i));
    let skip = |ids: &[u32]| {
        ids.iter()
            .for_each(|i| println!("criterion {i}: SKIPPED (not selected)"))
    };
    let stages: [(&[u32], &dyn Fn(&mut Gate)); 5] = [
        (&[1], &parameter_counts),
        (&[2], &gradient_suite),
        (&[3, 4, 5, 6, 7], &|g| learned_criteria(g, since)),
        (&[8], &determinism),
        (&[9], &metric_oracles),
    ];
    for (ids, stage) in stages {
        if on(ids) {
            stage(&mut gate);
        } else {
            skip(ids);
        }
    }
    println!(
        "acceptance: {} hard failure(s), {:.0} s total",
        gate.failed,
        since.elapsed().as_secs_f64()
    );
    if gate.failed > 0 {
        std::process::exit(1);
    }
}
