//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Tolerances and recorded baselines are the constants
//! below; they are not tuned per run.

#![allow(clippy::needless_range_loop)]

use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use gpmatch::bench::{
    branch_rmse, procedural_textures, ransac_homography, run_benchmark, symmetric_transfer_error, synth_pair, toy_run, toy_sample, transition_width,
    value_noise_texture, BenchConfig, BenchPipeline, SynthPairConfig, ToyConfig,
};
use gpmatch::decode::{channel_decode, DecodeParams, Match};
use gpmatch::embedding::{empirical_kernel, gaussian_limit, sample_basis, BasisKind, EmbeddingBasis};
use gpmatch::geometry::{mat3_mul, rotation_from_axis_angle, to_cell, Homography, NormalizedGrid, WarpField};
use gpmatch::kernel::{eval_kernel, KernelSpec};
use gpmatch::linalg::Mat;
use gpmatch::metrics::{aepe, auc, map_at, pck, pose_error, rotation_error, translation_error, ErrorSample};
use gpmatch::pipeline::{PipelineConfig, RegressorKind};
use gpmatch::regress::{gp_posterior, RegressorOutput, SupportSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GP_TOL: f64 = 1e-6;
const GP_JITTER: f64 = 1e-3;
const INTERP_REL_TOL: f64 = 1e-3;
const LIMIT_TOL: f64 = 0.05;
const METRIC_TOL: f64 = 1e-6;
/// Seed-0 dense-region RMSE of the first verified toy run, and the slack.
const TOY_GP_RMSE: f64 = 0.089175;
const TOY_SMOOTHER_RMSE: f64 = 0.043901;
const TOY_SLACK: f64 = 1.05;
/// Inverse length used for the decode round trip.
const ROUND_TRIP_LENGTH: f64 = 5.0;
/// Median PCK@5px of the first verified benchmark run, and the tolerance.
const BENCH_PCK5_BASELINE: f64 = 0.773;
const BENCH_TOLERANCE: f64 = 0.02;
const BENCH_MIN_WINS: usize = 16;

type Outcome = Result<String, String>;

struct Suite {
    failed: usize,
}

impl Suite {
    /// Runs `f`; a `limit` turns overrunning it into a failure.
    fn check(&mut self, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let r = f();
        let el = t.elapsed();
        let r = match (r, limit) {
            (Ok(d), Some(l)) if el > l => Err(format!("{d}; took {:.1}s, limit {:.0}s", el.as_secs_f64(), l.as_secs_f64())),
            (r, _) => r,
        };
        match r {
            Ok(d) => println!("PASS {name}: {d} [{:.2}s]", el.as_secs_f64()),
            Err(d) => {
                self.failed += 1;
                println!("FAIL {name}: {d} [{:.2}s]", el.as_secs_f64());
            }
        }
    }
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat<f64> {
    Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// Gauss-Jordan inverse with partial pivoting.
fn invert(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, r)| r.iter().copied().chain((0..n).map(|j| f64::from(u8::from(i == j)))).collect())
        .collect();
    for col in 0..n {
        let p = (col..n).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs())).unwrap();
        m.swap(col, p);
        let d = m[col][col];
        m[col].iter_mut().for_each(|v| *v /= d);
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                for k in 0..2 * n {
                    m[r][k] -= f * m[col][k];
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

fn gp_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_m, mut worst_v) = (0.0f64, 0.0f64);
    let mut escalated = 0;
    for case in 0..50 {
        let spec = if case % 2 == 0 {
            KernelSpec::squared_exponential(rng.random_range(0.5..2.0)).unwrap()
        } else {
            KernelSpec::exp_cos_sim(rng.random_range(0.2..1.0), 1e-6).unwrap()
        };
        let (n, m, d, e) = (rng.random_range(1..=64), rng.random_range(1..=16), rng.random_range(2..=8), rng.random_range(1..=4));
        let (xs, ys, q) = (random_mat(&mut rng, n, d), random_mat(&mut rng, n, e), random_mat(&mut rng, m, d));
        let post = gp_posterior(&SupportSet::new(xs.clone(), ys.clone()).unwrap(), &q, &spec, GP_JITTER).map_err(|e| format!("case {case}: {e}"))?;
        // the eps-guarded cosine is indefinite for near-zero features; the
        // oracle uses whatever jitter the factorization settled on
        if post.least_squares {
            return Err(format!("case {case}: least-squares fallback"));
        }
        escalated += usize::from(post.jitter != GP_JITTER);
        let k = |a: &[f64], b: &[f64]| eval_kernel(&spec, a, b).unwrap();
        let kss: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| k(xs.row(i), xs.row(j)) + if i == j { post.jitter } else { 0.0 }).collect()).collect();
        let inv = invert(&kss);
        for a in 0..m {
            let kq: Vec<f64> = (0..n).map(|i| k(q.row(a), xs.row(i))).collect();
            let w: Vec<f64> = (0..n).map(|j| (0..n).map(|i| kq[i] * inv[i][j]).sum()).collect();
            for c in 0..e {
                let mean: f64 = (0..n).map(|j| w[j] * ys[(j, c)]).sum();
                worst_m = worst_m.max((post.mean[(a, c)] - mean).abs());
            }
            let var = k(q.row(a), q.row(a)) - (0..n).map(|j| w[j] * kq[j]).sum::<f64>();
            worst_v = worst_v.max((post.variance[a] - var.max(0.0)).abs());
        }
    }
    ensure(worst_m < GP_TOL && worst_v < GP_TOL, format!("50 cases ({escalated} with escalated jitter), max mean dev {worst_m:.2e}, max variance dev {worst_v:.2e}"))
}

fn noiseless_interpolation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let spec = if case % 2 == 0 { KernelSpec::squared_exponential(0.5).unwrap() } else { KernelSpec::exp_cos_sim(0.2, 1e-6).unwrap() };
        let (n, d) = (rng.random_range(2..=24), 8);
        let (xs, ys) = (random_mat(&mut rng, n, d), random_mat(&mut rng, n, 3));
        let post = gp_posterior(&SupportSet::new(xs.clone(), ys.clone()).unwrap(), &xs, &spec, 1e-8).map_err(|e| format!("case {case}: {e}"))?;
        let scale = ys.as_slice().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for i in 0..n {
            for c in 0..3 {
                worst = worst.max((post.mean[(i, c)] - ys[(i, c)]).abs() / scale);
            }
        }
    }
    ensure(worst < INTERP_REL_TOL, format!("20 cases, jitter 1e-8, max relative error {worst:.2e}"))
}

fn embedding_limit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = || [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let pairs: Vec<([f64; 2], [f64; 2])> = (0..100).map(|_| (p(), p())).collect();
    let dev = |b: &EmbeddingBasis<f64>| pairs.iter().map(|&(x, y)| (empirical_kernel(b, x, y) - gaussian_limit(1.0, x, y)).abs()).sum::<f64>() / 100.0;
    let sweep: Vec<f64> = [256, 1024, 4096, 8192, 16384]
        .iter()
        .map(|&d| (0..20).map(|s| dev(&sample_basis(BasisKind::Fourier, d, 1.0, s).unwrap())).sum::<f64>() / 20.0)
        .collect();
    let at8192 = sweep[3];
    let mono = [sweep[0], sweep[1], sweep[2], sweep[4]];
    let monotone = mono.windows(2).all(|w| w[1] < w[0]);
    ensure(
        at8192 < LIMIT_TOL && monotone,
        format!("D=8192 mean deviation {at8192:.4}; over D 256/1024/4096/16384: {:.4} {:.4} {:.4} {:.4}", mono[0], mono[1], mono[2], mono[3]),
    )
}

fn cell_dist(a: [f64; 2], b: [f64; 2], g: &NormalizedGrid<f64>) -> f64 {
    let dx = to_cell(a[0], g.width()) - to_cell(b[0], g.width());
    let dy = to_cell(a[1], g.height()) - to_cell(b[1], g.height());
    dx.hypot(dy)
}

fn prediction(rows: Vec<Vec<f64>>) -> RegressorOutput<f64> {
    RegressorOutput { embedding: Mat::from_rows(&rows).unwrap(), variance: None, neighbourhood: None, grid: None }
}

fn metamer() -> Outcome {
    let grid = NormalizedGrid::<f64>::new(64, 64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..20 {
        let angle = rng.random_range(0.0..PI);
        let c = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
        let h = [0.5 * angle.cos(), 0.5 * angle.sin()];
        let (x, y) = ([c[0] - h[0], c[1] - h[1]], [c[0] + h[0], c[1] + h[1]]);
        let basis = sample_basis::<f64>(BasisKind::Fourier, 4096, 10.0, seed).unwrap();
        let avg: Vec<f64> = basis.embed_point(x).iter().zip(basis.embed_point(y)).map(|(a, b)| 0.5 * (a + b)).collect();
        let out = channel_decode(&prediction(vec![avg]), &basis, &grid, &DecodeParams::default()).map_err(|e| e.to_string())?;
        let modes = &out.modes[0].modes;
        if modes.len() < 2 {
            return Err(format!("seed {seed}: {} mode(s)", modes.len()));
        }
        let (m0, m1) = (modes[0].coord, modes[1].coord);
        let hit = |p| cell_dist(m0, p, &grid) <= 1.0 || cell_dist(m1, p, &grid) <= 1.0;
        if !(hit(x) && hit(y)) {
            return Err(format!("seed {seed}: top modes {m0:?} {m1:?} for {x:?} {y:?}"));
        }
        if modes.iter().any(|m| cell_dist(m.coord, c, &grid) <= 1.0) {
            return Err(format!("seed {seed}: a mode sits at the midpoint"));
        }
    }
    Ok("20 seeds, both points recovered, midpoint rejected".into())
}

fn toy() -> Outcome {
    let cfg = ToyConfig::default();
    let c = toy_run(&toy_sample(&cfg).unwrap(), &cfg).map_err(|e| e.to_string())?;
    let again = toy_run(&toy_sample(&cfg).unwrap(), &cfg).map_err(|e| e.to_string())?;
    let (gw, aw) = (transition_width(&c.x, &c.gp_mean, 0.45), transition_width(&c.x, &c.attn, 0.45));
    let (gr, ar) = (branch_rmse(&c.x, &c.gp_mean, 0.0, 0.35), branch_rmse(&c.x, &c.attn, 0.0, 0.35));
    let identical = c.to_csv() == again.to_csv();
    ensure(
        gw <= aw && gr <= TOY_GP_RMSE * TOY_SLACK && ar <= TOY_SMOOTHER_RMSE * TOY_SLACK && identical,
        format!("width gp {gw:.4} vs smoother {aw:.4}; rmse gp {gr:.6} (bound {:.6}), smoother {ar:.6} (bound {:.6}); csv identical {identical}",
            TOY_GP_RMSE * TOY_SLACK, TOY_SMOOTHER_RMSE * TOY_SLACK),
    )
}

const DIMS: (usize, usize) = (100, 200);

fn offset_pair(offsets_px: &[[f64; 2]]) -> (WarpField<f64>, WarpField<f64>) {
    let n = offsets_px.len();
    let g = NormalizedGrid::<f64>::new(1, n).unwrap();
    let flow = g.coords().iter().zip(offsets_px).map(|(p, o)| [p[0] + o[0] * 2.0 / DIMS.1 as f64, p[1] + o[1] * 2.0 / DIMS.0 as f64]).collect();
    (WarpField::new(1, n, flow, vec![1.0; n]).unwrap(), WarpField::identity(&g))
}

fn riemann_auc(errors: &[f64], alpha: f64, steps: usize) -> f64 {
    let dt = alpha / steps as f64;
    (0..steps).map(|k| errors.iter().filter(|&&e| e < (k as f64 + 0.5) * dt).count() as f64 / errors.len() as f64).sum::<f64>() * dt / alpha
}

fn metric_oracles() -> Outcome {
    let mut dev = 0.0f64;
    let mut track = |got: f64, want: f64| dev = dev.max((got - want).abs());

    let (pred, reference) = offset_pair(&[[0.5, 0.0], [0.0, 2.0], [4.0, 0.0], [3.0, 4.0]]);
    let all = [true; 4];
    track(pck(&pred, &reference, &all, 1.0, DIMS).unwrap(), 0.25);
    track(pck(&pred, &reference, &all, 3.0, DIMS).unwrap(), 0.5);
    track(pck(&pred, &reference, &all, 5.0, DIMS).unwrap(), 0.75);
    track(aepe(&pred, &reference, &all, DIMS).unwrap(), (0.5 + 2.0 + 4.0 + 5.0) / 4.0);
    track(aepe(&pred, &reference, &[true, false, true, false], DIMS).unwrap(), 2.25);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let e: Vec<f64> = (0..30).map(|_| (rng.random_range(0.0..25.0f64) * 4.0).round() / 4.0).collect();
        let s = ErrorSample::new(e.clone()).unwrap();
        for alpha in [5.0, 10.0, 20.0] {
            track(auc(&s, alpha).unwrap(), riemann_auc(&e, alpha, 40_000));
        }
        let p = |t: f64| e.iter().filter(|&&v| v < t).count() as f64 / e.len() as f64;
        track(map_at(&s, 20.0).unwrap(), (p(5.0) + p(10.0) + p(20.0)) / 3.0);
        track(map_at(&s, 10.0).unwrap(), (p(5.0) + p(10.0)) / 2.0);
    }

    for _ in 0..20 {
        let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let base = rotation_from_axis_angle([rng.random_range(-1.0..1.0), 1.0, 0.2], rng.random_range(0.0..PI)).unwrap();
        let angle = rng.random_range(0.0..PI);
        let r_hat = mat3_mul(&base, &rotation_from_axis_angle(axis, angle).unwrap());
        track(rotation_error(&base, &r_hat).unwrap(), angle);
        let tw = rng.random_range(0.0..PI / 2.0);
        let t_hat = [tw.cos(), tw.sin(), 0.0];
        track(translation_error(&[1.0, 0.0, 0.0], &t_hat).unwrap(), tw);
        track(pose_error(&base, &[1.0, 0.0, 0.0], &r_hat, &t_hat).unwrap(), angle.max(tw));
    }
    // mAP >= AUC is only a tendency, so it is counted, not required
    let below = (0..100)
        .filter(|_| {
            let e: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..40.0f64)).collect();
            let s = ErrorSample::new(e).unwrap();
            map_at(&s, 20.0).unwrap() < auc(&s, 20.0).unwrap()
        })
        .count();
    ensure(dev < METRIC_TOL, format!("pck, aepe, auc, mAP and pose errors vs oracles, max deviation {dev:.2e}; mAP@20 < AUC@20 on {below}/100 random sets"))
}

fn round_trip() -> Outcome {
    let mut worst = 0.0f64;
    for kind in [BasisKind::Fourier, BasisKind::SquaredExponential, BasisKind::CosSq] {
        for (h, w) in [(8, 8), (32, 32), (48, 64)] {
            let grid = NormalizedGrid::<f64>::new(h, w).unwrap();
            let basis = sample_basis(kind, 256, ROUND_TRIP_LENGTH, 7).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64((h * w) as u64);
            let pts: Vec<[f64; 2]> = (0..100).map(|_| grid.coords()[rng.random_range(0..grid.len())]).collect();
            let out = channel_decode(&prediction(pts.iter().map(|&p| basis.embed_point(p)).collect()), &basis, &grid, &DecodeParams::default())
                .map_err(|e| e.to_string())?;
            for (f, p) in out.warp.flow.iter().zip(&pts) {
                let o = (to_cell(f[0], w) - to_cell(p[0], w)).abs().max((to_cell(f[1], h) - to_cell(p[1], h)).abs());
                worst = worst.max(o);
            }
        }
    }
    ensure(worst <= 0.5, format!("3 bases x 3 grids x 100 points, D=256, worst per-axis offset {worst:.3} cells"))
}

fn benchmark() -> Outcome {
    let imgs = procedural_textures(20, 256, 0).map_err(|e| e.to_string())?;
    let cfg = BenchConfig::default();
    let gp = run_benchmark(&imgs, &cfg, &BenchPipeline::Matcher(PipelineConfig::default())).map_err(|e| e.to_string())?;
    let nn_cfg = PipelineConfig { regressor: RegressorKind::Nn, ..PipelineConfig::default() };
    let nn = run_benchmark(&imgs, &cfg, &BenchPipeline::Matcher(nn_cfg)).map_err(|e| e.to_string())?;
    let wins = gp.pairs.iter().zip(&nn.pairs).filter(|(a, b)| a.pck[2] > b.pck[2]).count();
    let median = gp.pck(2).median;
    let bound = BENCH_PCK5_BASELINE - BENCH_TOLERANCE;
    ensure(
        median >= bound && wins >= BENCH_MIN_WINS && gp.failures() == 0,
        format!("median PCK@5 {median:.4} (bound {bound:.3}), nearest-neighbour {:.4}; wins {wins}/20; failures {}", nn.pck(2).median, gp.failures()),
    )
}

fn ransac() -> Outcome {
    let h = Homography::from_params(0.2, 1.1, 0.05, -0.08, 0.03, -0.02).unwrap();
    let exact = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Match<f64>> {
        (0..n)
            .map(|_| {
                let q = [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)];
                Match { query: q, support: h.apply(q).unwrap(), confidence: 1.0 }
            })
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = exact(20, &mut rng);
    let r = ransac_homography(&m, 100, 0.02, 0).map_err(|e| e.to_string())?;
    let inv = r.homography.inverse().unwrap();
    let ste = m.iter().map(|x| symmetric_transfer_error(&r.homography, &inv, x.query, x.support)).fold(0.0, f64::max);
    if r.inlier_count() != 20 || ste >= 1e-6 {
        return Err(format!("exact case: {} inliers, transfer error {ste:.2e}", r.inlier_count()));
    }
    let mut worst = 1.0f64;
    for seed in 0..5 {
        let mut m = exact(50, &mut rng);
        m.extend((0..50).map(|_| Match {
            query: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            support: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            confidence: 1.0,
        }));
        let r = ransac_homography(&m, 200, 0.02, seed).map_err(|e| e.to_string())?;
        worst = worst.min(r.inliers[..50].iter().filter(|&&b| b).count() as f64 / 50.0);
    }
    ensure(worst >= 0.95, format!("exact: 20/20 inliers, transfer error {ste:.1e}; 50% outliers: worst recall {worst:.2} over 5 seeds"))
}

fn run_cli(dir: &Path, threads: usize, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_gpmatch"))
        .current_dir(dir)
        .env_remove("DKM_THREADS")
        .arg("--threads")
        .arg(threads.to_string())
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} with {threads} threads: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let img = value_noise_texture(96, 128, 3).unwrap();
    img.save_pnm(dir.path().join("q.pgm")).unwrap();
    synth_pair(&img, &SynthPairConfig { seed: 5, ..SynthPairConfig::default() }).unwrap().support.save_pnm(dir.path().join("s.pgm")).unwrap();
    let runs: [(&str, Vec<&str>, Vec<&str>); 3] = [
        ("match", vec!["match", "q.pgm", "s.pgm", "--out", "w.dkwf", "--matches", "m.txt"], vec!["w.dkwf", "m.txt"]),
        ("eval", vec!["eval", "--out", "ev", "--pairs", "3", "--images", "2", "--size", "128"], vec!["ev/pairs.csv", "ev/summary.txt"]),
        ("toy", vec!["toy", "--seed", "0", "--out", "toy.csv"], vec!["toy.csv"]),
    ];
    let mut compared = 0;
    for (name, args, files) in &runs {
        let mut first: Option<Vec<Vec<u8>>> = None;
        for threads in [1, 4, 4] {
            run_cli(dir.path(), threads, args)?;
            let bytes: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(dir.path().join(f)).map_err(|e| format!("{f}: {e}"))).collect::<Result<_, _>>()?;
            match &first {
                None => first = Some(bytes),
                Some(b) if *b != bytes => return Err(format!("{name}: output differs with {threads} threads")),
                Some(_) => compared += 1,
            }
        }
    }
    Ok(format!("match, eval and toy byte-identical over {compared} repeat runs (threads 1 and 4)"))
}

fn main() {
    let mut s = Suite { failed: 0 };
    let secs = |n| Some(Duration::from_secs(n));
    s.check("gp posterior equals explicit-inverse oracle", secs(5), gp_oracle);
    s.check("noiseless interpolation at support inputs", None, noiseless_interpolation);
    s.check("fourier embedding kernel converges to the gaussian limit", secs(30), embedding_limit);
    s.check("averaged embedding decodes to both points", None, metamer);
    s.check("toy regression: sharper gp transition, pinned rmse, stable csv", secs(5), toy);
    s.check("metric oracles", secs(5), metric_oracles);
    s.check("embed-decode round trip within half a cell", None, round_trip);
    s.check("synthetic homography benchmark", secs(180), benchmark);
    s.check("ransac recovery", None, ransac);
    s.check("cli determinism across runs and thread counts", None, determinism);
    println!("{} criteria failed", s.failed);
    if s.failed > 0 {
        std::process::exit(1);
    }
}
