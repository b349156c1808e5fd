//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skilledit_cli::pipeline::{
    self, read_clips, read_json, InfillerLog, MetricsReport, PairRecord, RunDir, SweepEntry,
};
use skilledit_cli::RunConfig;
use skilledit_core::alignment::{dtw_align, path_cost, validate_path};
use skilledit_core::fk::forward_kinematics;
use skilledit_core::kinematics::{make_span, span_length};
use skilledit_core::metrics::{
    fid_improvement, frechet_distance, improvement_percent, pa_frame_error, pa_mpjpe, pose_improvement_from_errors,
    procrustes_align, GaussianStats, Shrinkage,
};
use skilledit_core::rotation::{axis_angle_to_matrix, mat_vec, Quat, Vec3};
use skilledit_core::{MotionClip, PoseFrame, Skeleton};
use skilledit_model::tokenizer::reconstruction_error;
use skilledit_model::{Tokenizer, TokenizerEpoch};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Check = Result<Outcome, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    format!("{e:#}")
}

// 1

fn gradient_oracle() -> Check {
    let checks = skilledit_nn::gradcheck::check_all_ops(80, 2024).map_err(err)?;
    let mut ops: Vec<&str> = checks.iter().map(|c| c.op).collect();
    ops.sort_unstable();
    ops.dedup();
    let min_shapes = ops
        .iter()
        .map(|op| {
            let mut shapes: Vec<&str> = checks.iter().filter(|c| c.op == *op).map(|c| c.shape.as_str()).collect();
            shapes.sort_unstable();
            shapes.dedup();
            shapes.len()
        })
        .min()
        .unwrap_or(0);
    let trials_per_op = checks.len() / ops.len().max(1);
    let worst = checks.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).ok_or("no checks ran")?;
    Ok(outcome(
        worst.max_rel_err <= 1e-4 && min_shapes >= 20,
        format!(
            "{} ops x {trials_per_op} random draws, at least {min_shapes} distinct shapes per op, worst rel err {:.2e} ({} {})",
            ops.len(),
            worst.max_rel_err,
            worst.op,
            worst.shape
        ),
    ))
}

// 2

fn brute_force_min(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    fn go(a: &[Vec<f64>], b: &[Vec<f64>], i: usize, j: usize, acc: f64, best: &mut f64) {
        let c: f64 = a[i].iter().zip(&b[j]).map(|(x, y)| (x - y) * (x - y)).sum();
        let acc = acc + c;
        if (i, j) == (a.len() - 1, b.len() - 1) {
            *best = best.min(acc);
            return;
        }
        if i + 1 < a.len() {
            go(a, b, i + 1, j, acc, best);
        }
        if j + 1 < b.len() {
            go(a, b, i, j + 1, acc, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            go(a, b, i + 1, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    go(a, b, 0, 0, 0.0, &mut best);
    best
}

fn dtw_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..200 {
        let (n, m, d) = (rng.random_range(1..=5), rng.random_range(1..=5), rng.random_range(1..=3));
        // small integer features keep every cost exactly representable
        let mut seq = |len: usize| -> Vec<Vec<f64>> {
            (0..len).map(|_| (0..d).map(|_| f64::from(rng.random_range(-4i32..=4))).collect()).collect()
        };
        let (a, b) = (seq(n), seq(m));
        let dp = dtw_align(&a, &b).map_err(err)?;
        let ok = validate_path(&dp.path, n, m).is_ok()
            && path_cost(&a, &b, &dp.path) == dp.cost
            && brute_force_min(&a, &b) == dp.cost;
        mismatches += usize::from(!ok);
    }
    Ok(outcome(mismatches == 0, format!("200 random pairs up to 5x5, {mismatches} mismatches")))
}

// 3

fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let axis: Vec3<f64> = [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5];
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let angle = rng.random::<f64>() * 3.0;
    axis_angle_to_matrix(axis.map(|x| x / n * angle))
}

fn random_clip(rng: &mut ChaCha8Rng, frames: usize) -> MotionClip<f64> {
    let frames = (0..frames)
        .map(|_| {
            let mut f = PoseFrame::zeros(8);
            f.root_translation = [rng.random::<f64>(), 0.9 + rng.random::<f64>() * 0.2, rng.random::<f64>()];
            f.root_orientation = [0.0, rng.random::<f64>() - 0.5, 0.0];
            for x in f.joint_rotations.iter_mut() {
                *x = rng.random::<f64>() - 0.5;
            }
            f
        })
        .collect();
    MotionClip::new(30.0, 8, frames).expect("valid clip")
}

fn procrustes_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_residual: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(4..20);
        let src: Vec<Vec3<f64>> =
            (0..n).map(|_| [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5]).collect();
        let r = random_rotation(&mut rng);
        let s = 0.5 + 1.5 * rng.random::<f64>();
        let t = [rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>() * 4.0 - 2.0];
        let tgt: Vec<Vec3<f64>> = src
            .iter()
            .map(|p| {
                let q = mat_vec(&r, *p);
                std::array::from_fn(|i| s * q[i] + t[i] + 1e-9 * (rng.random::<f64>() * 2.0 - 1.0))
            })
            .collect();
        let fit = procrustes_align(&src, &tgt).map_err(err)?;
        worst_residual = worst_residual.max(fit.residual);
    }

    // a clip against a rigidly moved copy of itself, then per-frame similarity copies
    let sk = Skeleton::default_humanoid();
    let clip = random_clip(&mut rng, 12);
    let rv = [0.3, -1.1, 0.4];
    let (r, q) = (axis_angle_to_matrix(rv), Quat::from_axis_angle(rv));
    let shift = [1.5, -0.2, 3.0];
    let mut moved = clip.clone();
    for f in &mut moved.frames {
        let p = mat_vec(&r, f.root_translation);
        f.root_translation = std::array::from_fn(|i| p[i] + shift[i]);
        f.root_orientation = q.mul(Quat::from_axis_angle(f.root_orientation)).to_axis_angle();
    }
    let span = make_span(6, 12, 0.9).map_err(err)?;
    let rigid = pa_mpjpe(&moved, &clip, &sk, &span).map_err(err)?;
    let pos = forward_kinematics(&clip, &sk).map_err(err)?;
    let mut similar: f64 = 0.0;
    for t in 0..clip.len() {
        let tgt: Vec<Vec3<f64>> =
            pos.frame(t).iter().map(|p| std::array::from_fn(|i| 1.7 * mat_vec(&r, *p)[i] - shift[i])).collect();
        similar = similar.max(pa_frame_error(&tgt, pos.frame(t)).map_err(err)?);
    }
    Ok(outcome(
        worst_residual <= 1e-6 && rigid <= 1e-6 && similar <= 1e-6,
        format!(
            "100 point sets, worst residual {worst_residual:.2e}; self PA-MPJPE {rigid:.2e} (rigid clip), {similar:.2e} (scaled frames)"
        ),
    ))
}

// 4

fn stats(mean: Vec<f64>, cov: Vec<f64>) -> GaussianStats<f64> {
    GaussianStats { mean, cov }
}

fn frechet_sanity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 6;
    let samples: Vec<Vec<f64>> = (0..40).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect();
    let a = GaussianStats::from_samples(&samples, Shrinkage::Never).map_err(err)?;
    let self_fd = frechet_distance(&a, &a).map_err(err)?;
    let scalar = frechet_distance(&stats(vec![0.0], vec![1.0]), &stats(vec![1.0], vec![4.0])).map_err(err)?;
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 4] = 1.0;
    }
    let commuting =
        frechet_distance(&stats(vec![0.0; 3], eye.clone()), &stats(vec![1.0, 0.0, 0.0], eye)).map_err(err)?;
    Ok(outcome(
        self_fd.abs() <= 1e-6 && (scalar - 2.0).abs() <= 1e-9 && (commuting - 1.0).abs() <= 1e-9,
        format!("FD(A,A) = {self_fd:.2e}, 1-D case = {scalar} (want 2), identity covariances = {commuting} (want 1)"),
    ))
}

// 5

fn formula_fidelity() -> Check {
    let mut failures = Vec::new();
    let p = pose_improvement_from_errors(10.0, &[8.0, 6.0]).map_err(err)?.p_percent;
    if p != 40.0 {
        failures.push(format!("P for errors {{8, 6}} vs 10 is {p}"));
    }
    let same = pose_improvement_from_errors(10.0, &[10.0]).map_err(err)?.p_percent;
    let perfect = pose_improvement_from_errors(10.0, &[12.0, 0.0]).map_err(err)?.p_percent;
    if same != 0.0 || perfect != 100.0 {
        failures.push(format!("P edge cases gave {same} and {perfect}"));
    }
    let f = improvement_percent(10.0, 8.0).map_err(err)?;
    if f != 20.0 {
        failures.push(format!("F for FD 10 -> 8 is {f}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let set = |rng: &mut ChaCha8Rng, shift: f64| -> Vec<Vec<f64>> {
        (0..50).map(|_| (0..2).map(|_| rng.random::<f64>() + shift).collect()).collect()
    };
    let (novice, expert) = (set(&mut rng, 0.0), set(&mut rng, 3.0));
    let unchanged = fid_improvement(&novice, &novice, &expert, Shrinkage::Never).map_err(err)?.f_percent;
    let matched = fid_improvement(&novice, &expert, &expert, Shrinkage::Never).map_err(err)?.f_percent;
    if unchanged != 0.0 || (matched - 100.0).abs() > 1e-6 {
        failures.push(format!("F edge cases gave {unchanged} and {matched}"));
    }
    let table: [(f64, usize, usize); 10] = [
        (0.15, 120, 18),
        (0.05, 10, 2),
        (0.3, 64, 19),
        (0.15, 64, 9),
        (0.1, 30, 3),
        (0.5, 7, 3),
        (0.2, 100, 20),
        (0.01, 50, 2),
        (0.25, 9, 2),
        (0.9, 11, 9),
    ];
    for (alpha, t, want) in table {
        let got = span_length(alpha, t).map_err(err)?;
        if got != want {
            failures.push(format!("span length ({alpha}, {t}) = {got}, want {want}"));
        }
    }
    let s = make_span(60, 120, 0.15).map_err(err)?;
    if (s.lo, s.hi) != (51, 69) {
        failures.push(format!("span around 60 in 120 frames is [{}, {}]", s.lo, s.hi));
    }
    let edge = make_span(0, 64, 0.3).map_err(err)?;
    if (edge.lo, edge.hi) != (0, 9) {
        failures.push(format!("span at frame 0 is [{}, {}]", edge.lo, edge.hi));
    }
    Ok(if failures.is_empty() {
        outcome(true, "P and F worked examples exact; 10 span lengths match, (0.15, 120) -> 18")
    } else {
        outcome(false, failures.join("; "))
    })
}

// 6-10 drive the binary

struct Runs {
    root: tempfile::TempDir,
}

impl Runs {
    fn path(&self, name: &str) -> PathBuf {
        self.root.path().join(name)
    }

    fn invoke(&self, args: &[&str], out: &str) -> Result<f64, String> {
        let start = Instant::now();
        let status = Command::new(env!("CARGO_BIN_EXE_skilledit"))
            .args(args)
            .arg("--out")
            .arg(self.path(out))
            .env("RUST_LOG", "warn")
            .status()
            .map_err(err)?;
        if !status.success() {
            return Err(format!("skilledit {} exited with {status}", args.join(" ")));
        }
        Ok(start.elapsed().as_secs_f64())
    }
}

fn tokenizer_training(run: &Path, secs: f64) -> Check {
    let cfg = RunConfig::load(&run.join(pipeline::CONFIG)).map_err(err)?;
    let log: Vec<TokenizerEpoch> = read_json(&run.join(pipeline::TOKENIZER_LOG)).map_err(err)?;
    let (first, last) = (log.first().ok_or("empty log")?, log.last().ok_or("empty log")?);
    let ratio = last.recon / first.recon;
    let tok = Tokenizer::load(run.join(pipeline::TOKENIZER)).map_err(err)?;
    let experts = read_clips(&run.join(pipeline::EXPERTS)).map_err(err)?;
    let sk = cfg.load_skeleton().map_err(err)?;
    let mut sums = [0.0; 4];
    for clip in &experts {
        let r = reconstruction_error(&tok.reconstruct(clip).map_err(err)?, clip, &sk).map_err(err)?;
        for (acc, v) in sums.iter_mut().zip([r.mpjpe, r.global_mpjpe, r.step, r.local_step]) {
            *acc += v;
        }
    }
    let [mpjpe, global, step, local_step] = sums.map(|x| x / experts.len() as f64);
    let usage = log.last().map(|l| l.usage.clone()).unwrap_or_default();
    let min_usage = usage.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(outcome(
        experts.len() == 512 && ratio < 0.25 && mpjpe <= 0.1 * step && min_usage >= 0.5,
        format!(
            "{} clips: recon loss {:.3} -> {:.3} ({:.1}% of epoch 1); root-aligned MPJPE {:.4} = {:.1}% of mean joint step {:.4} \
             (global-position MPJPE {:.4}, root-relative step {:.4}); usage {:?}; run {secs:.0}s",
            experts.len(),
            first.recon,
            last.recon,
            100.0 * ratio,
            mpjpe,
            100.0 * mpjpe / step,
            step,
            global,
            local_step,
            usage
        ),
    ))
}

fn infiller_training(run: &Path) -> Check {
    let log: InfillerLog = read_json(&run.join(pipeline::INFILLER_LOG)).map_err(err)?;
    let floor = 5.0 * log.chance;
    let pass = !log.heldout_accuracy.is_empty() && log.heldout_accuracy.iter().all(|&a| a >= floor);
    Ok(outcome(
        pass,
        format!(
            "held-out masked top-1 accuracy per book {:?} vs 5x chance {floor:.4}",
            log.heldout_accuracy.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>()
        ),
    ))
}

fn benchmark(run: &Path) -> Check {
    let cfg = RunConfig::load(&run.join(pipeline::CONFIG)).map_err(err)?;
    let report: MetricsReport = read_json(&run.join(pipeline::METRICS)).map_err(err)?;
    let pairs: Vec<PairRecord> = read_json(&run.join(pipeline::PAIRS)).map_err(err)?;
    let novices = read_clips(&run.join(pipeline::NOVICES)).map_err(err)?;
    let dir = RunDir::new(run);
    let mut violations = 0usize;
    let mut edits_checked = 0usize;
    for rec in &pairs {
        let novice = &novices[rec.novice_index];
        for edit in pipeline::read_edits(&cfg, &dir, &rec.clip_id).map_err(err)? {
            edits_checked += 1;
            let bad = edit.len() != novice.len()
                || edit.frames.iter().zip(&novice.frames).enumerate().any(|(t, (a, b))| {
                    a.root_translation.map(f64::to_bits) != b.root_translation.map(f64::to_bits)
                        || a.root_orientation.map(f64::to_bits) != b.root_orientation.map(f64::to_bits)
                        || (!rec.span.contains(t)
                            && a.joint_rotations.iter().map(|x| x.to_bits()).ne(b.joint_rotations.iter().map(|x| x.to_bits())))
                });
            violations += usize::from(bad);
        }
    }
    let n = report.per_pair.len();
    Ok(outcome(
        report.p >= 20.0 && report.f >= 20.0 && n >= 100 && violations == 0 && edits_checked == n * cfg.m,
        format!(
            "P = {:.2}%, F = {:.2}% over {n} pairs; {edits_checked} edits checked, {violations} preservation violations",
            report.p, report.f
        ),
    ))
}

fn scaling_sweep(run: &Path, secs: f64) -> Check {
    let entries: Vec<SweepEntry> = read_json(&run.join("sweep.json")).map_err(err)?;
    let at = |f: f64| entries.iter().find(|e| (e.fraction - f).abs() < 1e-12).ok_or(format!("no entry for {f}"));
    let (low, full) = (at(0.3)?, at(1.0)?);
    Ok(outcome(
        full.p > low.p && full.f > low.f,
        format!(
            "fraction 0.3: P {:.2}%, F {:.2}%; fraction 1.0: P {:.2}%, F {:.2}%; sweep {secs:.0}s",
            low.p, low.f, full.p, full.f
        ),
    ))
}

fn determinism(a: &Path, b: &Path) -> Check {
    let x = fs::read(a.join(pipeline::METRICS)).map_err(err)?;
    let y = fs::read(b.join(pipeline::METRICS)).map_err(err)?;
    Ok(outcome(x == y, format!("metrics.json {} bytes, identical: {}", x.len(), x == y)))
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        // nothing to list for test runners probing the harness
        return;
    }
    let mut results: Vec<(usize, &str, Check)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &dyn Fn() -> Check| {
        let start = Instant::now();
        let r = f();
        eprintln!("criterion {n} finished in {:.1}s", start.elapsed().as_secs_f64());
        results.push((n, name, r));
    };
    record(1, "gradient oracle", &gradient_oracle);
    record(2, "DTW oracle", &dtw_oracle);
    record(3, "Procrustes oracle", &procrustes_oracle);
    record(4, "Frechet sanity", &frechet_sanity);
    record(5, "formula fidelity", &formula_fidelity);

    let runs = Runs { root: tempfile::tempdir().expect("temp dir") };
    let run_a = runs.invoke(&["run"], "a");
    let run_b = runs.invoke(&["run"], "b");
    let sweep = runs.invoke(&["sweep", "--fractions", "0.3,1.0"], "sweep");
    let (pa, pb, ps) = (runs.path("a"), runs.path("b"), runs.path("sweep"));
    record(6, "tokenizer training", &|| tokenizer_training(&pa, run_a.clone()?));
    record(7, "infiller training", &|| {
        run_a.clone()?;
        infiller_training(&pa)
    });
    record(8, "end-to-end benchmark", &|| {
        run_a.clone()?;
        benchmark(&pa)
    });
    record(9, "scaling sweep", &|| scaling_sweep(&ps, sweep.clone()?));
    record(10, "determinism", &|| {
        run_a.clone()?;
        run_b.clone()?;
        determinism(&pa, &pb)
    });

    let mut failed = 0;
    for (n, name, r) in &results {
        let (tag, detail) = match r {
            Ok(o) => (if o.pass { "PASS" } else { "FAIL" }, o.detail.as_str()),
            Err(e) => ("FAIL", e.as_str()),
        };
        failed += usize::from(tag == "FAIL");
        println!("{tag} criterion {n:>2} ({name}): {detail}");
    }
    if failed > 0 {
        println!("{failed} of {} acceptance criteria failed", results.len());
        std::process::exit(1);
    }
    println!("all {} acceptance criteria passed", results.len());
}
