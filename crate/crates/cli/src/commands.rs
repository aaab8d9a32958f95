use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use gpmatch::bench::{branch_rmse, procedural_textures, run_benchmark, toy_run, toy_sample, transition_width, BenchConfig, BenchPipeline, SynthPairConfig, ToyConfig};
use gpmatch::decode::{format_sig9, save_matches, sparsify_topk};
use gpmatch::embedding::{empirical_kernel, limit_kernel, sample_basis};
use gpmatch::features::{extract_dense_descriptors, load_feature_file, load_image, save_feature_file};
use gpmatch::geometry::{clip_to_grid, WarpField};
use gpmatch::metrics::{auc, endpoint_errors, map_at, precision_at, ErrorSample};
use gpmatch::pipeline::{match_feature_maps, match_images, substream, MatchOutput};

use crate::{Cmd, EmbedBenchArgs, EvalArgs, EvalTarget, ExportArgs, FeaturesCmd, Failure, InspectArgs, MatchArgs, MetricsArgs, ToyArgs};

type Outcome = Result<(), Failure>;

pub fn run(cmd: Cmd) -> Outcome {
    match cmd {
        Cmd::Match(a) => cmd_match(&a),
        Cmd::Eval(a) => cmd_eval(&a),
        Cmd::Toy(a) => cmd_toy(&a),
        Cmd::EmbedBench(a) => cmd_embed_bench(&a),
        Cmd::Metrics(a) => cmd_metrics(&a),
        Cmd::Features(FeaturesCmd::Export(a)) => cmd_export(&a),
        Cmd::Features(FeaturesCmd::Inspect(a)) => cmd_inspect(&a),
    }
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn write_file(path: &Path, contents: &[u8]) -> Outcome {
    fs::write(path, contents).map_err(|e| Failure::runtime(format!("{}: {e}", show(path))))
}

/// CSV to `out`, or stdout.
fn emit(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(p) => write_file(p, text.as_bytes()),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| Failure::runtime(format!("stdout: {e}"))),
    }
}

fn is_feature_file(p: &Path) -> Result<bool, Failure> {
    let mut magic = [0u8; 4];
    let mut f = fs::File::open(p).map_err(|e| Failure::runtime(format!("{}: {e}", show(p))))?;
    Ok(std::io::Read::read(&mut f, &mut magic).map_err(|e| Failure::runtime(format!("{}: {e}", show(p))))? == 4 && &magic == b"DKFM")
}

fn cmd_match(a: &MatchArgs) -> Outcome {
    let cfg = a.pipeline.config()?;
    let (q_feat, s_feat) = (is_feature_file(&a.query)?, is_feature_file(&a.support)?);
    let out: MatchOutput<f64> = match (q_feat, s_feat) {
        (true, true) => {
            let qf = load_feature_file(&a.query).map_err(|e| Failure::from_lib(&show(&a.query), e))?;
            let sf = load_feature_file(&a.support).map_err(|e| Failure::from_lib(&show(&a.support), e))?;
            match_feature_maps(qf, sf, &cfg).map_err(|e| Failure::from_lib("match", e))?
        }
        (false, false) => {
            let qi = load_image(&a.query).map_err(|e| Failure::from_lib(&show(&a.query), e))?;
            let si = load_image(&a.support).map_err(|e| Failure::from_lib(&show(&a.support), e))?;
            match_images(&qi, &si, &cfg).map_err(|e| Failure::from_lib("match", e))?
        }
        _ => return Err(Failure::usage("query and support must both be images or both be feature files")),
    };
    let warp = if a.clip { clip_to_grid(&out.warp) } else { out.warp.clone() };
    warp.save(&a.out).map_err(|e| Failure::from_lib(&show(&a.out), e))?;

    let mut s = format!(
        "query = {}\nsupport = {}\nwarp = {}x{}\nmean_confidence = {}\n",
        show(&a.query),
        show(&a.support),
        warp.height(),
        warp.width(),
        format_sig9(out.mean_confidence())
    );
    for (i, l) in out.levels.iter().enumerate() {
        s.push_str(&format!(
            "level{i}_stride = {}\nlevel{i}_queries = {}\nlevel{i}_support = {}\nlevel{i}_mean_modes = {}\nlevel{i}_degenerate = {}\nlevel{i}_jitter = {}\nlevel{i}_least_squares = {}\n",
            l.stride,
            l.queries,
            l.support,
            format_sig9(l.mean_modes),
            l.degenerate,
            format_sig9(l.jitter),
            l.least_squares
        ));
    }
    if let Some(path) = &a.matches {
        let m = sparsify_topk(&warp, a.top_k).map_err(|e| Failure::from_lib("matches", e))?;
        save_matches(&m, path).map_err(|e| Failure::from_lib(&show(path), e))?;
        s.push_str(&format!("matches = {}\n", m.len()));
    }
    print!("{s}");
    Ok(())
}

fn symmetric(v: f64) -> (f64, f64) {
    (-v.abs(), v.abs())
}

fn cmd_eval(a: &EvalArgs) -> Outcome {
    let pc = a.pipeline.config()?;
    let [s_lo, s_hi] = a.scale.0[..] else {
        return Err(Failure::usage(format!("--scale takes two numbers, got '{}'", a.scale)));
    };
    let synth = SynthPairConfig {
        rotation_deg: symmetric(a.max_rotation),
        scale: (s_lo, s_hi),
        translation: symmetric(a.max_translation),
        perspective: symmetric(a.max_perspective),
        noise_std: a.noise,
        ..SynthPairConfig::default()
    };
    let cfg = BenchConfig {
        pairs: a.pairs,
        synth,
        top_k: a.top_k,
        ransac_iterations: a.ransac_iterations,
        ransac_threshold: a.ransac_threshold,
        seed: pc.seed,
    };
    let images = procedural_textures(a.images, a.size, pc.seed).map_err(|e| Failure::from_lib("textures", e))?;
    let pipeline = match a.target {
        EvalTarget::Matcher => BenchPipeline::Matcher(pc),
        EvalTarget::Oracle => BenchPipeline::Oracle,
        EvalTarget::Identity => BenchPipeline::Identity,
    };
    let report = run_benchmark(&images, &cfg, &pipeline).map_err(|e| Failure::from_lib("benchmark", e))?;
    fs::create_dir_all(&a.out).map_err(|e| Failure::runtime(format!("{}: {e}", show(&a.out))))?;
    // metrics are computed at the resolution the images were generated at
    let summary = format!("resolution = {0}x{0}\n{1}", a.size, report.summary());
    write_file(&a.out.join("pairs.csv"), report.to_csv().as_bytes())?;
    write_file(&a.out.join("summary.txt"), summary.as_bytes())?;
    print!("{summary}");
    if report.failures() == report.pairs.len() {
        return Err(Failure::runtime("every pair failed; see pairs.csv"));
    }
    Ok(())
}

fn cmd_toy(a: &ToyArgs) -> Outcome {
    let [w1, w2] = a.weights.0[..] else {
        return Err(Failure::usage(format!("--weights takes two numbers, got '{}'", a.weights)));
    };
    let cfg = ToyConfig {
        n: a.n,
        length: a.length,
        weights: (w1, w2),
        noise_variance: a.noise_variance,
        jitter: a.jitter,
        queries: a.queries,
        seed: a.seed,
    };
    let samples = toy_sample(&cfg).map_err(|e| Failure::from_lib("toy", e))?;
    let c = toy_run(&samples, &cfg).map_err(|e| Failure::from_lib("toy", e))?;
    emit(a.out.as_deref(), &c.to_csv())?;
    if a.out.is_some() {
        let (lo, hi) = (0.0, 0.35);
        println!("gp_rmse_dense = {}", format_sig9(branch_rmse(&c.x, &c.gp_mean, lo, hi)));
        println!("attn_rmse_dense = {}", format_sig9(branch_rmse(&c.x, &c.attn, lo, hi)));
        println!("nn_rmse_dense = {}", format_sig9(branch_rmse(&c.x, &c.nn, lo, hi)));
        println!("gp_transition_width = {}", format_sig9(transition_width(&c.x, &c.gp_mean, 0.45)));
        println!("attn_transition_width = {}", format_sig9(transition_width(&c.x, &c.attn, 0.45)));
    }
    Ok(())
}

fn cmd_embed_bench(a: &EmbedBenchArgs) -> Outcome {
    if a.dims.0.is_empty() || a.pairs == 0 || a.seeds == 0 {
        return Err(Failure::usage("need at least one dimension, pair and seed"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(substream(a.seed, "pairs"));
    let mut point = || [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let pairs: Vec<([f64; 2], [f64; 2])> = (0..a.pairs).map(|_| (point(), point())).collect();
    let mut csv = String::from("dim,mean_abs_deviation,std_over_seeds,max_abs_deviation\n");
    for &d in &a.dims.0 {
        let per_seed = (0..a.seeds)
            .into_par_iter()
            .map(|s| {
                let basis = sample_basis::<f64>(a.basis, d, a.inverse_length, substream(a.seed, &format!("basis{s}")))?;
                let devs: Vec<f64> = pairs
                    .iter()
                    .map(|&(x, y)| (empirical_kernel(&basis, x, y) - limit_kernel(a.basis, a.inverse_length, x, y)).abs())
                    .collect();
                Ok((devs.iter().sum::<f64>() / devs.len() as f64, devs.iter().copied().fold(0.0, f64::max)))
            })
            .collect::<gpmatch::Result<Vec<(f64, f64)>>>()
            .map_err(|e| Failure::from_lib("embed-bench", e))?;
        let n = per_seed.len() as f64;
        let mean = per_seed.iter().map(|p| p.0).sum::<f64>() / n;
        let std = (per_seed.iter().map(|p| (p.0 - mean).powi(2)).sum::<f64>() / n).sqrt();
        let max = per_seed.iter().map(|p| p.1).fold(0.0, f64::max);
        csv.push_str(&format!("{d},{},{},{}\n", format_sig9(mean), format_sig9(std), format_sig9(max)));
    }
    emit(a.out.as_deref(), &csv)
}

fn cmd_metrics(a: &MetricsArgs) -> Outcome {
    if let Some(path) = &a.pose_errors {
        return pose_metrics(path);
    }
    let (pred_path, ref_path) = (a.pred.as_ref().expect("clap requires pred"), a.reference.as_ref().expect("clap requires reference"));
    let pred = WarpField::<f64>::load(pred_path).map_err(|e| Failure::from_lib(&show(pred_path), e))?;
    let reference = WarpField::<f64>::load(ref_path).map_err(|e| Failure::from_lib(&show(ref_path), e))?;
    let dims = match &a.support_dims {
        Some(l) => match l.0[..] {
            [h, w] if h > 0 && w > 0 => (h, w),
            _ => return Err(Failure::usage(format!("--support-dims takes 'height,width', got '{l}'"))),
        },
        None => (reference.height(), reference.width()),
    };
    let mask: Vec<bool> = reference.confidence.iter().map(|&c| c > a.mask_threshold).collect();
    let sample = endpoint_errors(&pred, &reference, &mask, dims).map_err(|e| Failure::from_lib("metrics", e))?;
    let e = sample.valid_errors();
    if e.is_empty() {
        return Err(Failure::runtime("no reference pixel passes the mask threshold"));
    }
    let mut s = format!("pixels = {}\nvalid = {}\n", mask.len(), e.len());
    for t in [1.0, 3.0, 5.0] {
        s.push_str(&format!("pck@{t} = {}\n", format_sig9(precision_at(&e, t))));
    }
    s.push_str(&format!("aepe = {}\n", format_sig9(e.iter().sum::<f64>() / e.len() as f64)));
    print!("{s}");
    if let Some(path) = &a.csv {
        let mut csv = String::from("threshold_px,precision\n");
        for t in 1..=a.max_threshold {
            csv.push_str(&format!("{t},{}\n", format_sig9(precision_at(&e, t as f64))));
        }
        write_file(path, csv.as_bytes())?;
    }
    Ok(())
}

fn pose_metrics(path: &Path) -> Outcome {
    let text = fs::read_to_string(path).map_err(|e| Failure::runtime(format!("{}: {e}", show(path))))?;
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let v: f64 = t.parse().map_err(|_| Failure::usage(format!("{}:{}: not a number: '{t}'", show(path), i + 1)))?;
        errors.push(v);
    }
    let sample = ErrorSample::new(errors).map_err(|e| Failure::from_lib(&show(path), e))?;
    let mut s = format!("samples = {}\n", sample.errors.len());
    for alpha in [5.0, 10.0, 20.0] {
        let a = auc(&sample, alpha).map_err(|e| Failure::from_lib("auc", e))?;
        let m = map_at(&sample, alpha).map_err(|e| Failure::from_lib("map", e))?;
        s.push_str(&format!("auc@{alpha} = {}\nmap@{alpha} = {}\n", format_sig9(a), format_sig9(m)));
    }
    print!("{s}");
    Ok(())
}

fn cmd_export(a: &ExportArgs) -> Outcome {
    if a.strides.0.is_empty() || a.strides.0.contains(&0) {
        return Err(Failure::usage("--strides needs positive strides"));
    }
    fs::create_dir_all(&a.out).map_err(|e| Failure::runtime(format!("{}: {e}", show(&a.out))))?;
    let params = a.descriptor.params();
    for img_path in &a.images {
        let img = load_image::<f64>(img_path).map_err(|e| Failure::from_lib(&show(img_path), e))?;
        let stem = img_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
        for &st in &a.strides.0 {
            let fm = extract_dense_descriptors(&img, st, &params).map_err(|e| Failure::from_lib(&show(img_path), e))?;
            let out = a.out.join(format!("{stem}.s{st}.dkfm"));
            save_feature_file(&fm, &out).map_err(|e| Failure::from_lib(&show(&out), e))?;
            println!("{} = {}x{}x{} stride {st}", show(&out), fm.height_cells(), fm.width_cells(), fm.channels());
        }
    }
    Ok(())
}

fn cmd_inspect(a: &InspectArgs) -> Outcome {
    let fm = load_feature_file::<f64>(&a.file).map_err(|e| Failure::from_lib(&show(&a.file), e))?;
    let norms: Vec<f64> = (0..fm.height_cells())
        .flat_map(|r| (0..fm.width_cells()).map(move |c| (r, c)))
        .map(|(r, c)| fm.cell(r, c).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let zero = fm.zero_cells().iter().filter(|&&z| z).count();
    println!("height_cells = {}", fm.height_cells());
    println!("width_cells = {}", fm.width_cells());
    println!("channels = {}", fm.channels());
    println!("stride = {}", fm.stride());
    println!("normalized = {}", fm.is_normalized());
    println!("zero_cells = {zero}");
    println!("min_norm = {}", format_sig9(norms.iter().copied().fold(f64::INFINITY, f64::min)));
    println!("max_norm = {}", format_sig9(norms.iter().copied().fold(0.0, f64::max)));
    Ok(())
}
