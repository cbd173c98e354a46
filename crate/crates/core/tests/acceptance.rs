//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line to stdout (bypassing output capture) and asserts the same outcome.
//! Tests take a shared lock so timings are not distorted by each other.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use transfact::dataset::{prepare, synthetic_splits, FeatureConfig, InputModality, PreparedData};
use transfact::eval::{metrics_report, predict, truncation_sweep, wilcoxon_signed_rank_exact};
use transfact::features::{read_features, write_features, FeatureSequence, Modality};
use transfact::losses::{
    assign, loss_cross_att, loss_frame, loss_trans, total_loss, video_terms, LossWeights,
    VideoTargets,
};
use transfact::matching::match_segments;
use transfact::mhi::{compute_mhi_sequence, GrayFrame};
use transfact::model::{forward, init_model, ModelConfig, Parameters};
use transfact::tensor::Matrix;
use transfact::trainer::{read_checkpoint, train, write_checkpoint, AdamW, Checkpoint, Sample, TrainConfig};
use transfact::videodata::{
    read_video, write_video, DatasetManifest, ManifestEntry, Split, StageLabel, TransferLabel,
    VideoRecord,
};
use transfact::autodiff::Tape;
use transfact::matching::Assignment;

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|p| p.into_inner())
}

fn report(n: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n}: {verdict} ({detail})");
    let _ = out.flush();
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

// ---------------------------------------------------------------- 1: MHI

/// Brute-force MHI at time `t`: the most recent change before or at `t`
/// decides the value; no change at all leaves zero.
fn mhi_unrolled(frames: &[GrayFrame], tau: u16, theta: u8, t: usize, x: usize, y: usize) -> u16 {
    let moved = |s: usize| {
        let a = i32::from(frames[s].get(x, y));
        let b = i32::from(frames[s - 1].get(x, y));
        (a - b).abs() > i32::from(theta)
    };
    match (1..=t).rev().find(|&s| moved(s)) {
        Some(s) => tau.saturating_sub((t - s) as u16),
        None => 0,
    }
}

#[test]
fn criterion_01_mhi_oracle() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut mismatches = 0usize;
    for _ in 0..100 {
        let tau: u16 = rng.gen_range(1..=20);
        let theta: u8 = rng.gen_range(0..=60);
        let frames: Vec<GrayFrame> = (0..10)
            .map(|_| GrayFrame::new(8, 8, (0..64).map(|_| rng.gen()).collect()).unwrap())
            .collect();
        let maps = compute_mhi_sequence(&frames, tau, theta).unwrap();
        assert_eq!(maps.len(), 10);
        for (t, map) in maps.iter().enumerate() {
            for y in 0..8 {
                for x in 0..8 {
                    if map.get(x, y) != mhi_unrolled(&frames, tau, theta, t, x, y) {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = mismatches == 0 && elapsed < Duration::from_secs(1);
    report(1, pass, &format!("100 videos, {mismatches} mismatching pixels, {}", secs(elapsed)));
    assert!(pass);
}

// ---------------------------------------------------- 2: gradient check

const FD_STEP: f64 = 1e-4;
const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor for relative errors, so entries whose true gradient
/// is numerically zero are compared on an absolute scale.
const FD_DENOM_FLOOR: f64 = 1e-6;
const FLOOR: f64 = 1e-12;
const CLAMP: f64 = 4.0;

struct FdVideo {
    frames: Matrix<f64>,
    mhi: Matrix<f64>,
    targets: VideoTargets,
}

/// Everything the plain-value objective holds fixed at the expansion point.
struct Frozen {
    assignment: Assignment,
    /// Per-block log-probabilities of the unperturbed forward pass.
    log_ref: Vec<Matrix<f64>>,
}

/// Plain-value evaluation of one video: the five loss terms, the ReLU side
/// pattern of the forward pass, and whether any probability floor or
/// smoothing clamp is active.
struct OracleEval {
    terms: [f64; 5],
    pattern: Vec<bool>,
    at_limit: bool,
}

fn oracle_terms(params: &Parameters<f64>, cfg: &ModelConfig, v: &FdVideo, fz: &Frozen) -> OracleEval {
    let graph = forward(params, cfg, &v.frames, Some(&v.mhi)).unwrap();
    let out = graph.output();
    let t_len = v.targets.labels.len() as f64;
    let segs = &v.targets.segments;
    let a = &fz.assignment;
    let mut terms = [0.0; 5];
    let floor_hit = std::cell::Cell::new(false);
    let ln = |x: f64| {
        floor_hit.set(floor_hit.get() || x <= FLOOR);
        x.max(FLOOR).ln()
    };
    let mut at_limit = false;
    for (b, blk) in out.blocks.iter().enumerate() {
        terms[0] -= ln(blk.trans_probs[(0, v.targets.transfer.index())]);
        for (t, l) in v.targets.labels.iter().enumerate() {
            terms[1] -= ln(blk.frame_probs[(t, l.index())]) / t_len;
        }
        let (m, classes) = blk.token_probs.shape();
        let mut s = 0.0;
        for &(n, tok) in &a.pairs {
            s += ln(blk.token_probs[(tok, segs[n].label.index())]);
        }
        for &tok in &a.unmatched_tokens {
            s += ln(blk.token_probs[(tok, classes - 1)]);
        }
        terms[2] -= s / m as f64;
        if b >= 1 {
            for &(n, tok) in &a.pairs {
                for t in segs[n].start..segs[n].end {
                    terms[3] -= (ln(blk.attn_s2f[(t, tok)]) + ln(blk.attn_f2s[(t, tok)])) / t_len;
                }
            }
        }
        let (rows, cols) = blk.frame_probs.shape();
        let norm = (out.blocks.len() * (rows - 1) * cols) as f64;
        for t in 1..rows {
            for c in 0..cols {
                let d = (ln(blk.frame_probs[(t, c)]) - fz.log_ref[b][(t - 1, c)]).abs();
                at_limit |= d >= CLAMP;
                terms[4] += d.min(CLAMP).powi(2) / norm;
            }
        }
    }
    OracleEval {
        terms,
        pattern: graph.tape.kink_pattern(),
        at_limit: at_limit || floor_hit.get(),
    }
}

fn weighted(terms: &[f64; 5], w: &LossWeights) -> f64 {
    let w = [w.trans, w.frame, w.stage, w.cross, w.smooth];
    terms.iter().zip(w).map(|(t, w)| t * w).sum()
}

const FD_LABELS: [&str; 6] = ["total", "trans", "frame", "stage", "cross", "smooth"];

struct FdReport {
    scalars: usize,
    worst: [f64; 6],
    worst_at: Vec<String>,
}

/// Compares analytic and central-difference gradients at the expansion
/// point drawn from `seed`. Returns `None` when a perturbation crosses a
/// non-differentiable point, where finite differences are meaningless.
fn gradient_check(seed: u64) -> Option<FdReport> {
    let cfg = ModelConfig {
        num_tokens: 3,
        num_stages: 4,
        hidden_dim: 8,
        heads: 2,
        use_mhi: true,
        frame_dim: 5,
        mhi_dim: 4,
        ..ModelConfig::default()
    };
    cfg.validate().unwrap();
    let mut params = init_model::<f64>(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let stage = |v: &[u8]| v.iter().map(|&i| StageLabel::new(i).unwrap()).collect::<Vec<_>>();
    let videos = vec![
        FdVideo {
            frames: normal(6, 5),
            mhi: normal(6, 4),
            targets: VideoTargets::new(stage(&[0, 0, 1, 1, 2, 2]), TransferLabel::Transferable).unwrap(),
        },
        FdVideo {
            frames: normal(6, 5),
            mhi: normal(6, 4),
            targets: VideoTargets::new(stage(&[0, 0, 0, 3, 3, 3]), TransferLabel::NotTransferable)
                .unwrap(),
        },
    ];
    let weights = LossWeights::default();
    let batch = videos.len() as f64;

    // Analytic gradients of the batch mean, for the total and each term.
    let mut analytic: Vec<Vec<Matrix<f64>>> = (0..6)
        .map(|_| params.values().iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect())
        .collect();
    let mut frozen = Vec::new();
    for v in &videos {
        let mut graph = forward(&params, &cfg, &v.frames, Some(&v.mhi)).unwrap();
        let assignment = assign(&graph, &v.targets).unwrap();
        let log_ref = graph
            .output()
            .blocks
            .iter()
            .map(|b| b.frame_probs.map(|x| x.max(FLOOR).ln()))
            .collect();
        let terms = video_terms(&mut graph, &v.targets, &assignment).unwrap();
        let (total, _) = total_loss(&mut graph.tape, &terms, &weights).unwrap();
        let roots = [total, terms.trans, terms.frame, terms.stage, terms.cross, terms.smooth];
        for (k, &root) in roots.iter().enumerate() {
            let mut gr = graph.tape.backward(root).unwrap();
            for (acc, &pv) in analytic[k].iter_mut().zip(&graph.param_vars) {
                if let Some(mut d) = gr.take(pv) {
                    d.scale_assign(1.0 / batch);
                    acc.add_assign(&d);
                }
            }
        }
        frozen.push(Frozen { assignment, log_ref });
    }

    let evaluate = |p: &Parameters<f64>| -> ([f64; 6], Vec<Vec<bool>>, bool) {
        let mut out = [0.0; 6];
        let mut patterns = Vec::new();
        let mut at_limit = false;
        for (v, fz) in videos.iter().zip(&frozen) {
            let e = oracle_terms(p, &cfg, v, fz);
            out[0] += weighted(&e.terms, &weights) / batch;
            for k in 0..5 {
                out[k + 1] += e.terms[k] / batch;
            }
            patterns.push(e.pattern);
            at_limit |= e.at_limit;
        }
        (out, patterns, at_limit)
    };
    let (_, base, at_limit) = evaluate(&params);
    if at_limit {
        return None;
    }

    let mut worst = [0.0f64; 6];
    let mut worst_at = vec![String::new(); 6];
    let names: Vec<String> = params.names().to_vec();
    let mut scalars = 0usize;
    for (pi, name) in names.iter().enumerate() {
        for e in 0..params.values()[pi].len() {
            scalars += 1;
            let orig = params.values()[pi].data()[e];
            params.values_mut()[pi].data_mut()[e] = orig + FD_STEP;
            let (up, up_pat, up_lim) = evaluate(&params);
            params.values_mut()[pi].data_mut()[e] = orig - FD_STEP;
            let (down, down_pat, down_lim) = evaluate(&params);
            params.values_mut()[pi].data_mut()[e] = orig;
            if up_pat != base || down_pat != base || up_lim || down_lim {
                return None;
            }
            for k in 0..6 {
                let fd = (up[k] - down[k]) / (2.0 * FD_STEP);
                let an = analytic[k][pi].data()[e];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(FD_DENOM_FLOOR);
                if rel > worst[k] {
                    worst[k] = rel;
                    worst_at[k] = format!("{name}[{e}] analytic {an:.3e} numeric {fd:.3e}");
                }
            }
        }
    }
    Some(FdReport {
        scalars,
        worst,
        worst_at,
    })
}

#[test]
fn criterion_02_gradient_check() {
    let _g = serial();
    let start = Instant::now();
    let mut rejected = Vec::new();
    let mut found = None;
    for seed in 0..20 {
        match gradient_check(seed) {
            Some(r) => {
                found = Some((seed, r));
                break;
            }
            None => rejected.push(seed),
        }
    }
    let elapsed = start.elapsed();
    let Some((seed, r)) = found else {
        report(2, false, &format!("no differentiable expansion point among seeds {rejected:?}"));
        panic!("every expansion point crossed a kink");
    };
    let summary: Vec<String> = FD_LABELS
        .iter()
        .zip(&r.worst)
        .map(|(l, w)| format!("{l} {w:.2e}"))
        .collect();
    for k in 0..6 {
        if r.worst[k] >= FD_TOLERANCE {
            eprintln!("worst {} entry: {}", FD_LABELS[k], r.worst_at[k]);
        }
    }
    let pass = r.worst.iter().all(|&w| w < FD_TOLERANCE) && elapsed < Duration::from_secs(120);
    report(
        2,
        pass,
        &format!(
            "seed {seed} (kink-crossing seeds skipped: {rejected:?}), {} parameters, max rel err: {}, {}",
            r.scalars,
            summary.join(", "),
            secs(elapsed)
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------- 3: matching

fn brute_force_min(cost: &[Vec<f64>], tokens: usize) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for m in 0..used.len() {
            if !used[m] {
                used[m] = true;
                go(cost, row + 1, used, acc + cost[row][m], best);
                used[m] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; tokens], 0.0, &mut best);
    best
}

#[test]
fn criterion_03_matching_optimality() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let start = Instant::now();
    let mut failures = 0;
    for _ in 0..200 {
        let tokens = rng.gen_range(1..=7);
        let segments = rng.gen_range(1..=tokens.min(5));
        let cost: Vec<Vec<f64>> = (0..segments)
            .map(|_| (0..tokens).map(|_| rng.gen_range(0.0..10.0)).collect())
            .collect();
        let a = match_segments(&cost, tokens).unwrap();
        let hungarian: f64 = a.pairs.iter().map(|&(n, m)| cost[n][m]).sum();
        let exhaustive = brute_force_min(&cost, tokens);
        if (hungarian - exhaustive).abs() > 1e-9 * exhaustive.abs().max(1.0) {
            failures += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = failures == 0 && elapsed < Duration::from_secs(5);
    report(3, pass, &format!("200 instances, {failures} suboptimal, {}", secs(elapsed)));
    assert!(pass);
}

// -------------------------------------------------------- 4: hand values

#[test]
fn criterion_04_loss_hand_values() {
    let _g = serial();
    let mut tape = Tape::<f64>::new();
    let sure: Vec<_> = (0..3)
        .map(|_| tape.constant(Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap()))
        .collect();
    let half: Vec<_> = (0..3)
        .map(|_| tape.constant(Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap()))
        .collect();
    let l_sure = loss_trans(&mut tape, &sure, TransferLabel::Transferable);
    let l_half = loss_trans(&mut tape, &half, TransferLabel::Transferable);
    let (b, t, s) = (3usize, 7usize, 11usize);
    let uniform: Vec<_> = (0..b)
        .map(|_| tape.constant(Matrix::filled(t, s, 1.0 / s as f64)))
        .collect();
    let labels: Vec<StageLabel> = (0..t).map(|i| StageLabel::new((i % s) as u8).unwrap()).collect();
    let l_frame = loss_frame(&mut tape, &uniform, &labels).unwrap();
    let segs = VideoTargets::new(labels.clone(), TransferLabel::Transferable).unwrap().segments;
    let pairs: Vec<(usize, usize)> = (0..segs.len()).map(|n| (n, n)).collect();
    let a = Assignment::from_pairs(pairs, segs.len()).unwrap();
    let wide = tape.constant(Matrix::filled(t, segs.len(), 0.25));
    let l_cross = loss_cross_att(&mut tape, &[wide], &[wide], &a, &segs).unwrap();

    let v = |x| tape.scalar_value(x);
    let half_value = v(l_half);
    let checks = [
        ("trans(1,1,1)", v(l_sure), 0.0),
        ("trans(.5,.5,.5)", half_value, 3.0 * 2f64.ln()),
        ("frame uniform", v(l_frame), b as f64 * (s as f64).ln()),
        ("cross B=1", v(l_cross), 0.0),
    ];
    let mut pass = format!("{half_value:.4}") == "2.0794";
    let mut detail = Vec::new();
    for (name, got, want) in checks {
        pass &= (got - want).abs() <= 1e-6;
        detail.push(format!("{name} = {got:.7}"));
    }
    report(4, pass, &detail.join(", "));
    assert!(pass);
}

// ------------------------------------------------------------ 5: Wilcoxon

#[test]
fn criterion_05_wilcoxon_exact() {
    let _g = serial();
    let cases: [(&[f64], f64, u64, f64); 3] = [
        (&[1.0, 2.0, 3.0, 4.0, 5.0], 0.0, 2, 0.0625),
        (&[-1.0, 2.0, 3.0, 4.0, 5.0], 1.0, 4, 0.125),
        (&[-2.0, 1.0, 3.0, 4.0, 5.0], 2.0, 6, 0.1875),
    ];
    let mut pass = true;
    let mut detail = Vec::new();
    for (diffs, against, extreme, p) in cases {
        let r = wilcoxon_signed_rank_exact(diffs, true).unwrap();
        let ok = r.n == 5 && r.w_minus == against && r.extreme == extreme && r.patterns == 32 && r.p_value == p;
        pass &= ok;
        detail.push(format!("W-={} p={}/{}={}", r.w_minus, r.extreme, r.patterns, r.p_value));
    }
    report(5, pass, &detail.join(", "));
    assert!(pass);
}

// ------------------------------------------------ 6-8: trained models

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const DATA_SEED: u64 = 1;
const FULL: usize = 60;

fn desk_model() -> ModelConfig {
    let mut m = ModelConfig {
        hidden_dim: 64,
        num_tokens: 20,
        ..ModelConfig::default()
    };
    InputModality::Frames.configure(&mut m, FeatureConfig::default().dim);
    m
}

fn desk_train(seed: u64, w_trans: f64) -> TrainConfig {
    let mut t = TrainConfig {
        learning_rate: 2e-3,
        warmup_steps: 20,
        epochs: 50,
        batch_size: 8,
        seed,
        ..TrainConfig::default()
    };
    t.weights.trans = w_trans;
    t
}

fn dataset(late: bool) -> &'static PreparedData<f32> {
    static PLAIN: OnceLock<PreparedData<f32>> = OnceLock::new();
    static LATE: OnceLock<PreparedData<f32>> = OnceLock::new();
    let cell = if late { &LATE } else { &PLAIN };
    cell.get_or_init(|| {
        let mut gen = transfact::videodata::GenConfig::default();
        assert_eq!((gen.frames, gen.p_anomaly), (FULL, 0.5));
        if late {
            gen = gen.late_anomaly();
        }
        let splits = synthetic_splits(&gen, [200, 30, 60], DATA_SEED).unwrap();
        prepare::<f32>(&splits, InputModality::Frames, &FeatureConfig::default()).unwrap()
    })
}

#[derive(Debug, Clone, Copy)]
struct RunResult {
    accuracy: f64,
    frame_accuracy: f64,
}

fn cut(v: &[Sample<f32>], len: usize) -> Vec<Sample<f32>> {
    v.iter().map(|s| s.truncated(len).unwrap()).collect()
}

/// Trains on the chosen variant and reports test metrics of the checkpoint
/// with the lowest validation loss. Results are cached across criteria.
fn desk_run(late: bool, w_trans: f64, length: usize, seed: u64) -> RunResult {
    static CACHE: OnceLock<Mutex<HashMap<(bool, u64, usize, u64), RunResult>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let key = (late, w_trans.to_bits(), length, seed);
    if let Some(r) = cache.lock().unwrap().get(&key) {
        return *r;
    }
    let d = dataset(late);
    let (tr, va, te) = (cut(&d.train, length), cut(&d.val, length), cut(&d.test, length));
    let model = desk_model();
    let out = train(&model, &desk_train(seed, w_trans), &tr, &va).unwrap();
    let m = metrics_report(&predict(&out.best.params, &model, &te).unwrap(), &te).unwrap();
    let r = RunResult {
        accuracy: m.accuracy,
        frame_accuracy: m.frame_accuracy,
    };
    eprintln!("run late={late} w_trans={w_trans} length={length} seed={seed}: {r:?}");
    cache.lock().unwrap().insert(key, r);
    r
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn fmt_all(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

#[test]
fn criterion_06_learnability() {
    let _g = serial();
    let start = Instant::now();
    let runs: Vec<RunResult> = SEEDS.iter().map(|&s| desk_run(false, 1.0, FULL, s)).collect();
    let elapsed = start.elapsed();
    let acc: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
    let facc: Vec<f64> = runs.iter().map(|r| r.frame_accuracy).collect();
    let pass = mean(&acc) >= 0.95 && mean(&facc) >= 0.85 && elapsed < Duration::from_secs(30 * 60);
    report(
        6,
        pass,
        &format!(
            "test accuracy mean {:.4} [{}], frame accuracy mean {:.4} [{}], {}",
            mean(&acc),
            fmt_all(&acc),
            mean(&facc),
            fmt_all(&facc),
            secs(elapsed)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_transfer_loss_ablation() {
    let _g = serial();
    let with: Vec<f64> = SEEDS.iter().map(|&s| desk_run(false, 1.0, FULL, s).accuracy).collect();
    let without: Vec<f64> = SEEDS.iter().map(|&s| desk_run(false, 0.0, FULL, s).accuracy).collect();
    let gap = mean(&with) - mean(&without);
    let pass = gap >= 0.10;
    report(
        7,
        pass,
        &format!(
            "w_trans=1 mean {:.4} [{}], w_trans=0 mean {:.4} [{}], gap {:.1} points",
            mean(&with),
            fmt_all(&with),
            mean(&without),
            fmt_all(&without),
            100.0 * gap
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_truncation_curve() {
    let _g = serial();
    let lengths = [FULL / 4, FULL / 2, FULL];
    let points = truncation_sweep(&lengths, FULL, &SEEDS, |len, seed| {
        Ok(desk_run(true, 1.0, len, seed).accuracy)
    })
    .unwrap();
    let means: Vec<f64> = points.iter().map(|p| p.mean).collect();
    let monotone = means.windows(2).all(|w| w[1] >= w[0]);
    let pass = monotone && means[2] >= 0.90 && means[0] <= 0.65;
    let detail: Vec<String> = points
        .iter()
        .map(|p| format!("T={} {:.4} [{}]", p.length, p.mean, fmt_all(&p.accuracies)))
        .collect();
    report(8, pass, &format!("{}, monotone {monotone}", detail.join(", ")));
    assert!(pass);
}

// -------------------------------------------------------- 9: determinism

fn cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_transfact"))
        .args(args)
        .env_remove("TRANSFACT_OUT_ROOT")
        .env_remove("TRANSFACT_JOBS")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "transfact {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn pipeline(root: &Path) -> Vec<u8> {
    let p = |s: &str| root.join(s).display().to_string();
    let config = p("run.toml");
    std::fs::write(
        &config,
        "seed = 3\nmodality = \"frames+mhi\"\n[data]\ncount = 24\n[data.generator]\nframes = 20\nsize = 32\n\
         [model]\nhidden_dim = 16\nnum_tokens = 12\nnum_blocks = 2\n[train]\nepochs = 2\nbatch_size = 4\nwarmup_steps = 2\nlearning_rate = 0.001\n",
    )
    .unwrap();
    let manifest = p("data/manifest.jsonl");
    cli(&["gen-data", "--config", &config, "--out", &p("data")]);
    cli(&["extract-features", "--config", &config, "--data", &manifest, "--out", &p("data/features")]);
    cli(&["train", "--config", &config, "--data", &manifest, "--out", &p("run")]);
    cli(&["eval", "--checkpoint", &p("run/best.ckpt"), "--data", &manifest, "--out", &p("eval")]);
    std::fs::read(root.join("eval/metrics.json")).unwrap()
}

#[test]
fn criterion_09_determinism() {
    let _g = serial();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = pipeline(a.path());
    let mb = pipeline(b.path());
    let pass = !ma.is_empty() && ma == mb;
    report(9, pass, &format!("metrics.json {} and {} bytes, identical {}", ma.len(), mb.len(), ma == mb));
    assert!(pass);
}

// ------------------------------------------------------ 10: round trips

fn random_video(rng: &mut ChaCha8Rng, i: usize) -> VideoRecord {
    let (w, h, t) = (rng.gen_range(1..12), rng.gen_range(1..12), rng.gen_range(1..8));
    let frames = (0..t)
        .map(|_| GrayFrame::new(w, h, (0..w * h).map(|_| rng.gen()).collect()).unwrap())
        .collect();
    let labels = (0..t).map(|_| StageLabel::new(rng.gen_range(0..11)).unwrap()).collect();
    let transfer = if rng.gen() { TransferLabel::Transferable } else { TransferLabel::NotTransferable };
    let id: String = (0..rng.gen_range(1..12))
        .map(|_| char::from(rng.gen_range(b'a'..=b'z')))
        .collect();
    VideoRecord::new(format!("{id}-{i}"), frames, labels, transfer).unwrap()
}

fn random_features(rng: &mut ChaCha8Rng) -> FeatureSequence {
    let (len, dim) = (rng.gen_range(0..9), rng.gen_range(1..9));
    let modality = if rng.gen() { Modality::Frame } else { Modality::Mhi };
    let values = (0..len * dim)
        .map(|_| f32::from_bits(rng.gen::<u32>() & 0xBF7F_FFFF))
        .collect();
    FeatureSequence::new(modality, len, dim, values).unwrap()
}

fn random_manifest(rng: &mut ChaCha8Rng) -> DatasetManifest {
    let n = rng.gen_range(0..10);
    let tagged = rng.gen::<bool>();
    let entries = (0..n)
        .map(|i| ManifestEntry {
            id: format!("v{i}-{}", rng.gen::<u32>()),
            path: format!("videos/ü {i}.tfv").into(),
            transfer: if rng.gen() { TransferLabel::Transferable } else { TransferLabel::NotTransferable },
            num_frames: rng.gen_range(1..500),
            split: tagged.then(|| [Split::Train, Split::Val, Split::Test][rng.gen_range(0..3)]),
        })
        .collect();
    DatasetManifest::new(entries).unwrap()
}

fn random_checkpoint(rng: &mut ChaCha8Rng) -> Checkpoint<f64> {
    let model = ModelConfig {
        num_blocks: rng.gen_range(1..3),
        num_tokens: rng.gen_range(1..4),
        num_stages: rng.gen_range(2..6),
        hidden_dim: 4,
        heads: rng.gen_range(1..3),
        dilations: vec![1, 2],
        frame_dim: rng.gen_range(1..4),
        mhi_dim: rng.gen_range(1..4),
        use_mhi: rng.gen(),
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        learning_rate: rng.gen_range(1e-5..1e-2),
        seed: rng.gen_range(0..1u64 << 62),
        ..TrainConfig::default()
    };
    let params = init_model::<f64>(&model, rng.gen()).unwrap();
    let mut optimizer = AdamW::new(&params, rng.gen_range(0.0..1e-2));
    optimizer.step = rng.gen_range(0..10_000);
    for m in optimizer.m.iter_mut().chain(optimizer.v.iter_mut()) {
        for x in m.data_mut() {
            *x = rng.sample(StandardNormal);
        }
    }
    Checkpoint {
        model,
        train,
        params,
        optimizer,
        epoch: rng.gen_range(0..100),
        val_loss: rng.gen_range(0.0..50.0),
    }
}

#[test]
fn criterion_10_round_trips() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let trials = 500;
    let mut failures = [0usize; 4];
    for i in 0..trials {
        let v = random_video(&mut rng, i);
        if read_video(&write_video(&v).unwrap()).ok().as_ref() != Some(&v) {
            failures[0] += 1;
        }
        let f = random_features(&mut rng);
        if read_features(&write_features(&f)).ok().as_ref() != Some(&f) {
            failures[1] += 1;
        }
        let m = random_manifest(&mut rng);
        if DatasetManifest::from_jsonl(&m.to_jsonl().unwrap()).ok().as_ref() != Some(&m) {
            failures[2] += 1;
        }
        let c = random_checkpoint(&mut rng);
        if read_checkpoint::<f64>(&write_checkpoint(&c).unwrap()).ok().as_ref() != Some(&c) {
            failures[3] += 1;
        }
    }
    let pass = failures.iter().all(|&f| f == 0);
    report(
        10,
        pass,
        &format!(
            "{trials} trials each, failures TFV1 {} TFF1 {} manifest {} checkpoint {}",
            failures[0], failures[1], failures[2], failures[3]
        ),
    );
    assert!(pass);
}
