//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. The desk denoiser is trained once, through
//! the CLI, and shared by the criteria that need a trained net.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use thermdiff::degrade::{gaussian_taps, LinearOperator, OperatorKind};
use thermdiff::denoiser::{Denoiser, DenoiserConfig, Tensor};
use thermdiff::diffusion::{predict_x0, q_sample, DiffusionSchedule, PAPER_BETA_END, PAPER_BETA_START};
use thermdiff::guidance::{guidance_bp, guidance_ls, guided_update};
use thermdiff::image::{normalize, upsample_bicubic, PatchRef, ValueDomain};
use thermdiff::metrics::{psnr, ssim};
use thermdiff::patch::{aggregate, seam_energy, GridParams, PatchGrid, WindowKind};
use thermdiff::{SeededRng, ThermalImage};
use thermdiff_cli::commands::{list_images, load_working_image};
use thermdiff_cli::config::Normalization;
use thermdiff_cli::records::{parse_records, Record};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn run_criterion(n: u32, name: &str, limit_s: Option<f64>, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let mut o = f();
    let secs = t0.elapsed().as_secs_f64();
    if let Some(limit) = limit_s {
        if secs >= limit {
            o.pass = false;
            o.detail.push_str(&format!("; over the {limit:.0} s limit"));
        }
    }
    println!(
        "criterion {n:>2} {}: {name}: {} ({secs:.1} s)",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    o.pass
}

fn run_invariant(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let o = f();
    println!("invariant    {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

// ---- dense oracle -------------------------------------------------------

fn explicit_matrix(op: &LinearOperator) -> DMatrix<f64> {
    let (w, h) = op.in_shape();
    let (ow, oh) = op.out_shape();
    let mut a = DMatrix::zeros(ow * oh, w * h);
    match op.kind() {
        OperatorKind::Identity => a.fill_with_identity(),
        OperatorKind::BoxDownsample { factor } => {
            let f = *factor;
            for y in 0..h {
                for x in 0..w {
                    a[((y / f) * ow + x / f, y * w + x)] = 1.0 / (f * f) as f64;
                }
            }
        }
        OperatorKind::GaussianBlur { taps } => {
            let r = (taps.len() / 2) as isize;
            let (w, h) = (w as isize, h as isize);
            for y in 0..h {
                for x in 0..w {
                    for sy in (y - r).max(0)..(y + r + 1).min(h) {
                        for sx in (x - r).max(0)..(x + r + 1).min(w) {
                            a[((y * w + x) as usize, (sy * w + sx) as usize)] =
                                taps[(sx - x + r) as usize] * taps[(sy - y + r) as usize];
                        }
                    }
                }
            }
        }
        OperatorKind::Composite(parts) => {
            a = DMatrix::identity(w * h, w * h);
            for p in parts {
                a = explicit_matrix(p) * a;
            }
        }
    }
    a
}

fn as_vec(img: &ThermalImage) -> DVector<f64> {
    DVector::from_column_slice(img.data())
}

fn max_abs_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn task_operators(w: usize, h: usize) -> Vec<LinearOperator> {
    let mut ops = vec![LinearOperator::identity((w, h))];
    if w % 2 == 0 && h % 2 == 0 {
        ops.push(LinearOperator::box_downsample((w, h), 2).unwrap());
    }
    if w % 4 == 0 && h % 4 == 0 {
        ops.push(LinearOperator::box_downsample((w, h), 4).unwrap());
    }
    ops.push(LinearOperator::gaussian_blur((w, h), gaussian_taps(1.2, 5).unwrap()).unwrap());
    ops
}

fn guidance_oracle() -> Outcome {
    let mut rng = SeededRng::new(101);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for w in 1..=8 {
        for h in 1..=8 {
            for op in task_operators(w, h) {
                let a = explicit_matrix(&op);
                let m = a.nrows();
                let (ow, oh) = op.out_shape();
                let etas: &[f64] = match op.kind() {
                    // The unregularized blur Gram matrix is too ill-conditioned
                    // for the dense reference itself to reach 1e-10.
                    OperatorKind::GaussianBlur { .. } => &[1e-3, 0.01, 0.5],
                    _ => &[0.0, 0.01, 0.5],
                };
                for &eta in etas {
                    for c in [0.3, 1.0] {
                        let x = rng.normal_image(w, h);
                        let y = rng.normal_image(ow, oh);
                        let resid = &a * as_vec(&x) - as_vec(&y);
                        let gram = &a * a.transpose() + DMatrix::identity(m, m) * eta;
                        let expect_bp = a.transpose() * gram.lu().solve(&resid).unwrap();
                        let expect_ls = a.transpose() * &resid * c;
                        let bp = guidance_bp(&x, &y, &op, eta).unwrap();
                        let ls = guidance_ls(&x, &y, &op, c).unwrap();
                        worst = worst
                            .max(max_abs_diff(&as_vec(&bp), &expect_bp))
                            .max(max_abs_diff(&as_vec(&ls), &expect_ls));
                        cases += 1;
                    }
                }
            }
        }
    }
    outcome(worst <= 1e-10, format!("{cases} cases up to 8x8, max abs error {worst:.2e} (limit 1e-10)"))
}

fn adjoint_identity() -> Outcome {
    let mut rng = SeededRng::new(202);
    let blur = || LinearOperator::gaussian_blur((16, 16), gaussian_taps(1.5, 7).unwrap()).unwrap();
    let ops = vec![
        LinearOperator::identity((16, 16)),
        LinearOperator::box_downsample((16, 16), 2).unwrap(),
        LinearOperator::box_downsample((16, 16), 4).unwrap(),
        blur(),
        LinearOperator::composite(vec![blur(), LinearOperator::box_downsample((16, 16), 2).unwrap()]).unwrap(),
    ];
    let mut worst: f64 = 0.0;
    for op in &ops {
        let (ow, oh) = op.out_shape();
        for _ in 0..1000 {
            let u = rng.normal_image(16, 16);
            let v = rng.normal_image(ow, oh);
            let lhs = op.forward(&u).unwrap().dot(&v).unwrap();
            let rhs = u.dot(&op.adjoint(&v).unwrap()).unwrap();
            worst = worst.max((lhs - rhs).abs());
        }
    }
    outcome(
        worst <= 1e-10,
        format!("{} operators x 1000 pairs, max |<Au,v> - <u,A^T v>| {worst:.2e}", ops.len()),
    )
}

fn aggregation_exactness() -> Outcome {
    let mut rng = SeededRng::new(303);
    let mut round_trip_ok = true;
    let mut bound_ok = true;
    for (extent, ps) in [((40, 28), 8), ((33, 47), 16), ((64, 64), 16)] {
        for window in [WindowKind::RaisedCosine, WindowKind::Flat] {
            let params = GridParams { patch_size: ps, stride: ps / 2, window };
            let grid = PatchGrid::new(extent, params, true).unwrap();
            let img = rng.normal_image(extent.0, extent.1);
            round_trip_ok &= aggregate(&grid.split(&img).unwrap(), &grid).unwrap() == img;
        }
    }
    let grid = PatchGrid::new((48, 40), GridParams::overlapping(16), true).unwrap();
    for _ in 0..100 {
        let preds: Vec<PatchRef> = grid
            .origins()
            .iter()
            .map(|&(ox, oy)| PatchRef {
                origin_x: ox,
                origin_y: oy,
                size: 16,
                data: (0..256).map(|_| 3.0 * rng.normal()).collect(),
            })
            .collect();
        let out = aggregate(&preds, &grid).unwrap();
        for y in 0..40 {
            for x in 0..48 {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for p in &preds {
                    let (dx, dy) = (x as isize - p.origin_x, y as isize - p.origin_y);
                    if (0..16).contains(&dx) && (0..16).contains(&dy) {
                        let v = p.data[dy as usize * 16 + dx as usize];
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                let v = out.get(x, y);
                bound_ok &= lo <= v && v <= hi;
            }
        }
    }
    outcome(
        round_trip_ok && bound_ok,
        format!("split/aggregate round trip exact: {round_trip_ok}; 100 random sets within per-pixel min/max: {bound_ok}"),
    )
}

fn gradient_check() -> Outcome {
    let mut rng = SeededRng::new(505);
    let mut net = Denoiser::new(DenoiserConfig::desk(), &mut rng).unwrap();
    let x = Tensor::from_vec([2, 1, 16, 16], rng.normal_vec(512));
    let target = Tensor::from_vec([2, 1, 16, 16], rng.normal_vec(512));
    let ts = [3, 811];
    let (_, grads) = net.loss_and_grad(&x, &ts, &target).unwrap();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let checks = 16;
    for _ in 0..checks {
        let pi = rng.below(net.params().len());
        let ei = rng.below(net.params().tensors[pi].len());
        let orig = net.params().tensors[pi].data[ei];
        net.params_mut().tensors[pi].data[ei] = orig + h;
        let up = net.loss(&x, &ts, &target).unwrap();
        net.params_mut().tensors[pi].data[ei] = orig - h;
        let down = net.loss(&x, &ts, &target).unwrap();
        net.params_mut().tensors[pi].data[ei] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[pi].data[ei];
        worst = worst.max((numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6));
    }
    outcome(worst <= 1e-3, format!("{checks} random weights, max relative error {worst:.2e} (limit 1e-3)"))
}

fn diffusion_round_trip() -> Outcome {
    let sched = DiffusionSchedule::paper();
    let mut rng = SeededRng::new(606);
    let x0 = rng.normal_image(8, 8).map(|v| v.clamp(-1.0, 1.0));
    let mut worst: f64 = 0.0;
    for t in 0..sched.steps() {
        let eps = rng.normal_image(8, 8);
        let xt = q_sample(&x0, t, &eps, &sched).unwrap();
        let back = predict_x0(&xt, &eps, t, &sched).unwrap();
        worst = worst.max(max_abs_diff(&as_vec(&back), &as_vec(&x0)));
    }
    let betas = sched.beta();
    let ends = betas[0] == PAPER_BETA_START
        && betas[betas.len() - 1] == PAPER_BETA_END
        && PAPER_BETA_START == 1e-4
        && PAPER_BETA_END == 0.02;
    outcome(
        worst <= 1e-12 && ends && sched.steps() == 1000,
        format!("max error over all 1000 t {worst:.2e}; beta endpoints exactly 1e-4 and 0.02: {ends}"),
    )
}

fn identity_collapse() -> Outcome {
    let mut rng = SeededRng::new(1010);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (w, h) = (1 + rng.below(16), 1 + rng.below(16));
        let op = LinearOperator::identity((w, h));
        let x = rng.normal_image(w, h);
        let y = rng.normal_image(w, h);
        let bp = guidance_bp(&x, &y, &op, 0.0).unwrap();
        let ls = guidance_ls(&x, &y, &op, 1.0).unwrap();
        let mu = 2.0 * rng.uniform();
        let base = guided_update(&x, &bp, &ls, mu, 0.0).unwrap();
        for delta in [0.1, 0.5, 0.9, 1.0, rng.uniform()] {
            let other = guided_update(&x, &bp, &ls, mu, delta).unwrap();
            worst = worst.max(max_abs_diff(&as_vec(&base), &as_vec(&other)));
        }
    }
    outcome(worst <= 1e-12, format!("200 random instances, max change across delta {worst:.2e}"))
}

// ---- end to end through the CLI ----------------------------------------

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Shipped config text with some keys replaced or added.
fn config_with(name: &str, overrides: &[(&str, String)]) -> String {
    let text = fs::read_to_string(configs_dir().join(name)).unwrap();
    let mut out: String = text
        .lines()
        .filter(|l| {
            let key = l.split('#').next().unwrap_or("").split('=').next().unwrap_or("").trim();
            !overrides.iter().any(|(k, _)| *k == key)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    for (k, v) in overrides {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

fn thermdiff(conf: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_thermdiff"))
        .arg("--config")
        .arg(conf)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("thermdiff {args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn unit(img: &ThermalImage) -> ThermalImage {
    normalize(&img.clamp_to(ValueDomain::Normalized), ValueDomain::Unit).unwrap()
}

fn load(path: &Path) -> ThermalImage {
    load_working_image(path, Normalization::Stretch).unwrap()
}

struct Scores {
    baseline_psnr: f64,
    baseline_ssim: f64,
    restored_psnr: f64,
    restored_ssim: f64,
}

/// Mean PSNR/SSIM of a baseline and of the restoration against the clean
/// references, over every restored image.
fn score(clean_dir: &Path, baseline: impl Fn(&Path) -> ThermalImage, restored_dir: &Path) -> Scores {
    let mut s = Scores { baseline_psnr: 0.0, baseline_ssim: 0.0, restored_psnr: 0.0, restored_ssim: 0.0 };
    let files = list_images(restored_dir).unwrap();
    for f in &files {
        let name = f.file_name().unwrap();
        let clean = unit(&load(&clean_dir.join(name)));
        let base = unit(&baseline(name.as_ref()));
        let out = unit(&load(f));
        s.baseline_psnr += psnr(&clean, &base, 1.0).unwrap();
        s.baseline_ssim += ssim(&clean, &base, 1.0).unwrap();
        s.restored_psnr += psnr(&clean, &out, 1.0).unwrap();
        s.restored_ssim += ssim(&clean, &out, 1.0).unwrap();
    }
    let n = files.len() as f64;
    s.baseline_psnr /= n;
    s.baseline_ssim /= n;
    s.restored_psnr /= n;
    s.restored_ssim /= n;
    s
}

struct Desk {
    root: PathBuf,
    train_seconds: f64,
}

fn train_desk(root: &Path) -> Result<Desk, String> {
    let conf = root.join("train.conf");
    fs::write(&conf, config_with("desk_denoise.conf", &[])).unwrap();
    thermdiff(&conf, &["gen-data"])?;
    let t0 = Instant::now();
    thermdiff(&conf, &["train"])?;
    Ok(Desk { root: root.to_path_buf(), train_seconds: t0.elapsed().as_secs_f64() })
}

/// Held-out scenes for one task, degraded and restored with the shipped config.
fn held_out_run(desk: &Desk, config: &str, tag: &str) -> Result<PathBuf, String> {
    let conf = desk.root.join(format!("{tag}.conf"));
    let text = config_with(
        config,
        &[
            ("seeds.data", "777001".into()),
            ("dataset.count", "8".into()),
            ("dataset.dir", "heldout/clean".into()),
            ("degrade.dir", format!("heldout/{tag}")),
            ("restore.input_dir", format!("heldout/{tag}")),
            ("restore.output_dir", format!("restored/{tag}")),
            ("train.checkpoint", "out/denoiser.ckpt".into()),
        ],
    );
    fs::write(&conf, text).unwrap();
    if !desk.root.join("heldout/clean").exists() {
        thermdiff(&conf, &["gen-data"])?;
    }
    thermdiff(&conf, &["degrade"])?;
    thermdiff(&conf, &["restore"])?;
    Ok(conf)
}

fn end_to_end(desk: &Result<Desk, String>) -> Outcome {
    let desk = match desk {
        Ok(d) => d,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let clean = desk.root.join("heldout/clean");
    let denoise = held_out_run(desk, "desk_denoise.conf", "denoise").map(|_| {
        score(&clean, |name| load(&desk.root.join("heldout/denoise").join(name)), &desk.root.join("restored/denoise"))
    });
    let sr = held_out_run(desk, "desk_sr.conf", "sr").map(|_| {
        score(
            &clean,
            |name| upsample_bicubic(&load(&desk.root.join("heldout/sr").join(name)), 2),
            &desk.root.join("restored/sr"),
        )
    });
    let (d, s) = match (denoise, sr) {
        (Ok(d), Ok(s)) => (d, s),
        (Err(e), _) | (_, Err(e)) => return outcome(false, e),
    };
    let train_ok = desk.train_seconds <= 900.0;
    let gain = d.restored_psnr - d.baseline_psnr;
    let denoise_ok = gain >= 2.0 && d.restored_ssim > d.baseline_ssim;
    let sr_ok = s.restored_psnr >= s.baseline_psnr;
    outcome(
        train_ok && denoise_ok && sr_ok,
        format!(
            "training {:.0} s (limit 900); denoise {:.2} dB/{:.4} -> {:.2} dB/{:.4} (gain {gain:+.2} dB, need +2); \
             2x SR bicubic {:.2} dB/{:.4} vs restored {:.2} dB/{:.4}",
            desk.train_seconds,
            d.baseline_psnr,
            d.baseline_ssim,
            d.restored_psnr,
            d.restored_ssim,
            s.baseline_psnr,
            s.baseline_ssim,
            s.restored_psnr,
            s.restored_ssim
        ),
    )
}

/// 100-step moving average of the training loss, sampled every 500 steps up
/// to step 2000, must fall at every sample.
fn loss_trend(desk: &Result<Desk, String>) -> Outcome {
    let desk = match desk {
        Ok(d) => d,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let log = fs::read_to_string(desk.root.join("out/loss.log")).unwrap();
    let losses: Vec<f64> = log
        .lines()
        .filter_map(|l| l.split_whitespace().nth(1)?.parse().ok())
        .collect();
    if losses.len() < 2000 {
        return outcome(false, format!("only {} logged steps", losses.len()));
    }
    let avg: Vec<f64> = [100, 500, 1000, 1500, 2000]
        .iter()
        .map(|&end| losses[end - 100..end].iter().sum::<f64>() / 100.0)
        .collect();
    outcome(
        avg.windows(2).all(|p| p[1] < p[0]),
        format!("moving average at steps 100/500/1000/1500/2000: {}", avg.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(" > ")),
    )
}

fn overlap_ablation(desk: &Result<Desk, String>) -> Outcome {
    let desk = match desk {
        Ok(d) => d,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let scene = desk.root.join("heldout/denoise/scene_0000.pgm");
    let input = desk.root.join("seam_input");
    fs::create_dir_all(&input).unwrap();
    fs::copy(&scene, input.join("scene_0000.pgm")).unwrap();
    fs::copy(format!("{}.meta", scene.display()), input.join("scene_0000.pgm.meta")).unwrap();
    let mut energy = Vec::new();
    for (tag, stride, window) in [("flat", 16, "flat"), ("overlap", 8, "raised_cosine")] {
        let conf = desk.root.join(format!("seam_{tag}.conf"));
        let text = config_with(
            "desk_denoise.conf",
            &[
                ("grid.stride", stride.to_string()),
                ("grid.window", window.into()),
                ("restore.input_dir", "seam_input".into()),
                ("restore.output_dir", format!("seam_{tag}")),
            ],
        );
        fs::write(&conf, text).unwrap();
        if let Err(e) = thermdiff(&conf, &["restore"]) {
            return outcome(false, e);
        }
        let out = load(&desk.root.join(format!("seam_{tag}/scene_0000.pgm")));
        let lines = PatchGrid::new(out.extent(), GridParams::non_overlapping(16), true).unwrap();
        energy.push(seam_energy(&out, &lines).unwrap());
    }
    // Seam energy is an excess over the off-boundary statistic, so a seam-free
    // result can sit slightly below zero; compare as flat >= 2 * overlap with
    // flat itself positive rather than as a ratio.
    let (flat, overlap) = (energy[0], energy[1]);
    outcome(
        flat > 0.0 && flat >= 2.0 * overlap,
        format!("seam energy flat/no-overlap {flat:.3e} vs 50% raised-cosine {overlap:.3e} (need flat > 0 and flat >= 2x overlap)"),
    )
}

fn determinism(desk: &Result<Desk, String>) -> Outcome {
    let desk = match desk {
        Ok(d) => d,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let input = desk.root.join("det_input");
    fs::create_dir_all(&input).unwrap();
    for name in ["scene_0001.pgm", "scene_0002.pgm"] {
        let src = desk.root.join("heldout/sr").join(name);
        fs::copy(&src, input.join(name)).unwrap();
        fs::copy(format!("{}.meta", src.display()), input.join(format!("{name}.meta"))).unwrap();
    }
    let mut runs = Vec::new();
    for threads in [1, 4] {
        let out = format!("det_{threads}");
        let conf = desk.root.join(format!("{out}.conf"));
        let text = config_with(
            "desk_sr.conf",
            &[("restore.input_dir", "det_input".into()), ("restore.output_dir", out.clone())],
        );
        fs::write(&conf, text).unwrap();
        if let Err(e) = thermdiff(&conf, &["--threads", &threads.to_string(), "restore"]) {
            return outcome(false, e);
        }
        let mut files: Vec<PathBuf> = fs::read_dir(desk.root.join(&out))
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| !p.to_string_lossy().ends_with(".run.json"))
            .collect();
        files.sort();
        runs.push(files.iter().map(|f| (f.file_name().unwrap().to_owned(), fs::read(f).unwrap())).collect::<Vec<_>>());
    }
    let same = runs[0] == runs[1];
    outcome(
        same && runs[0].len() == 4,
        format!("{} output files at --threads 1 and 4, byte-identical: {same}", runs[0].len()),
    )
}

fn timing_trend(root: &Path) -> Outcome {
    let conf = root.join("ablate.conf");
    let text = config_with(
        "desk_denoise.conf",
        &[
            ("dataset.count", "1".into()),
            ("dataset.width", "128".into()),
            ("dataset.height", "128".into()),
            ("dataset.dir", "ablate/clean".into()),
            ("degrade.dir", "ablate/noisy".into()),
            ("restore.input_dir", "ablate/noisy".into()),
            ("evaluate.reference_dir", "ablate/clean".into()),
            ("guidance.steps", "3".into()),
            ("ablate.patch_sizes", "16, 32, 64".into()),
            ("ablate.report", "ablate/report.jsonl".into()),
        ],
    );
    fs::write(&conf, text).unwrap();
    for cmd in ["gen-data", "degrade", "ablate"] {
        if let Err(e) = thermdiff(&conf, &[cmd]) {
            return outcome(false, e);
        }
    }
    let records = parse_records(&fs::read_to_string(root.join("ablate/report.jsonl")).unwrap()).unwrap();
    let mut ok = true;
    let mut detail = Vec::new();
    for want_overlap in [true, false] {
        let secs: Vec<(usize, f64)> = records
            .iter()
            .filter_map(|r| match r {
                Record::Ablation { patch_size, overlap, seconds, .. } if *overlap == want_overlap => Some((*patch_size, *seconds)),
                _ => None,
            })
            .collect();
        ok &= secs.len() == 3 && secs.windows(2).all(|p| p[0].0 < p[1].0 && p[0].1 < p[1].1);
        detail.push(format!(
            "overlap {want_overlap}: {}",
            secs.iter().map(|(p, s)| format!("ps{p} {s:.2}s")).collect::<Vec<_>>().join(" < ")
        ));
    }
    outcome(ok, format!("128x128, 3 steps; {}", detail.join("; ")))
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut all = true;
    all &= run_criterion(1, "guidance terms vs dense oracle", Some(10.0), guidance_oracle);
    all &= run_criterion(2, "adjoint identity", Some(5.0), adjoint_identity);
    all &= run_criterion(3, "aggregation exactness", Some(5.0), aggregation_exactness);
    all &= run_criterion(5, "denoiser gradient check", Some(120.0), gradient_check);
    all &= run_criterion(6, "diffusion round trip", Some(5.0), diffusion_round_trip);
    all &= run_criterion(10, "identity-task collapse", None, identity_collapse);

    println!("training the desk denoiser through the CLI ...");
    let desk = train_desk(root);
    all &= run_criterion(7, "end-to-end desk restoration", None, || end_to_end(&desk));
    all &= run_invariant("training loss decreases", || loss_trend(&desk));
    all &= run_criterion(4, "overlap ablation seams", Some(300.0), || overlap_ablation(&desk));
    all &= run_criterion(8, "restore determinism across threads", None, || determinism(&desk));
    all &= run_criterion(9, "ablation timing trend", None, || timing_trend(root));

    if !all {
        std::process::exit(1);
    }
}
