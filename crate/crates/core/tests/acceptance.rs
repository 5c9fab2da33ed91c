//! Acceptance gate: one PASS/FAIL line per criterion.

mod common;

use std::time::Instant;

use rand::Rng;
use tryon_core::attention::{
    enhance_contrast, masked_extended_attention, self_attention, AttentionBundle, AttentionMap, MeaStats, TokenMask,
    TokenOrigin,
};
use tryon_core::backend::{Conditioning, DenoiserBackend, PredictRequest, ToyBackend};
use tryon_core::correspondence::match_nn;
use tryon_core::geometry_warp::{apply_backward_warp, build_deformation_field, ControlPointSet, Point2};
use tryon_core::imageio::{load_rgb, save_rgb};
use tryon_core::inpaint::{cfg_combine, double_mask_inpaint, BackgroundTrajectory, GuidanceConfig, NoiseSchedule, StepTrace};
use tryon_core::pipeline::{register_with_control_points, run_try_on, TryOnJob};
use tryon_core::{BinaryMask, Tensor3};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mls_affine_reproduction() -> Outcome {
    let mut rng = common::rng(101);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < 20 {
        let m: [f64; 6] = std::array::from_fn(|i| if i < 4 { rng.gen_range(-1.5..1.5) } else { rng.gen_range(-8.0..8.0) });
        if (m[0] * m[3] - m[1] * m[2]).abs() < 0.3 {
            continue;
        }
        let src: Vec<Point2> = (0..6).map(|_| Point2::new(rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0))).collect();
        let dst: Vec<Point2> = src
            .iter()
            .map(|p| Point2::new(m[0] * p.x + m[1] * p.y + m[4], m[2] * p.x + m[3] * p.y + m[5]))
            .collect();
        let Ok(cps) = ControlPointSet::new(dst, src) else { continue };
        // The field is the inverse map, so build it from the swapped pairs
        // and compare with the forward affine.
        let field = build_deformation_field(&cps, 64, 64, 1.0).map_err(|e| e.to_string())?;
        for y in 0..64 {
            for x in 0..64 {
                let want = Point2::new(
                    m[0] * x as f64 + m[1] * y as f64 + m[4],
                    m[2] * x as f64 + m[3] * y as f64 + m[5],
                );
                worst = worst.max(field.location(x, y).dist(want));
            }
        }
        done += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst < 1e-4 && secs < 1.0, format!("max grid error {worst:.2e} px over 20 affines in {secs:.3} s"))
}

fn mls_oracle_agreement() -> Outcome {
    let mut rng = common::rng(202);
    let src: Vec<Point2> = (0..8).map(|_| Point2::new(rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0))).collect();
    let dst: Vec<Point2> = src
        .iter()
        .map(|p| Point2::new(p.x + rng.gen_range(-6.0..6.0), p.y + rng.gen_range(-6.0..6.0)))
        .collect();
    let cps = ControlPointSet::new(src.clone(), dst.clone()).map_err(|e| e.to_string())?;
    let field = build_deformation_field(&cps, 64, 64, 1.0).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for _ in 0..25 {
        let (x, y) = (rng.gen_range(0..64), rng.gen_range(0..64));
        let want = common::mls_oracle(Point2::new(x as f64, y as f64), &dst, &src, 1.0);
        worst = worst.max(field.location(x, y).dist(want));
    }
    check(worst < 1e-6, format!("max deviation {worst:.2e} px at 25 random points"))
}

fn correspondence_oracle() -> Outcome {
    let mut rng = common::rng(303);
    let mut matches = 0;
    for case in 0..200 {
        let (sh, sw, th, tw) = (rng.gen_range(1..=32), rng.gen_range(1..=32), rng.gen_range(1..=32), rng.gen_range(1..=32));
        let d = rng.gen_range(1..=16);
        let src = common::random_feature_map(&mut rng, sh, sw, d);
        let tgt = common::random_feature_map(&mut rng, th, tw, d);
        let mut sm = common::random_mask(&mut rng, sh, sw, 0.6);
        let mut tm = common::random_mask(&mut rng, th, tw, 0.6);
        sm.set(0, 0, true);
        tm.set(0, 0, true);
        let got: Vec<_> = match_nn(&src, &sm, &tgt, &tm)
            .map_err(|e| e.to_string())?
            .matches
            .iter()
            .map(|m| (m.source_cell, m.target_cell))
            .collect();
        if got != common::brute_force_mutual_nn(&src, &sm, &tgt, &tm) {
            return Err(format!("instance {case} differs from exhaustive search"));
        }
        matches += got.len();
    }
    Ok(format!("200 instances identical to exhaustive search ({matches} matches)"))
}

fn random_bundle(rng: &mut impl Rng, grid: (usize, usize)) -> AttentionBundle {
    let len = 2 * grid.0 * grid.1 * 4;
    let mut proj = || (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
    AttentionBundle::new(2, 4, grid, proj(), proj(), proj()).unwrap()
}

fn mea_leakage() -> Outcome {
    let mut rng = common::rng(404);
    let mut leaked: f64 = 0.0;
    let mut stock_diff: f64 = 0.0;
    for _ in 0..50 {
        let grid = (rng.gen_range(2..=8), rng.gen_range(2..=8));
        let target = random_bundle(&mut rng, grid);
        let reference = random_bundle(&mut rng, grid);
        let n = grid.0 * grid.1;
        let m_p = TokenMask::new(grid, TokenOrigin::Target, (0..n).map(|_| rng.gen_bool(0.5)).collect()).unwrap();
        let m_g = TokenMask::new(grid, TokenOrigin::Reference, (0..n).map(|_| rng.gen_bool(0.5)).collect()).unwrap();
        let (_, maps) = masked_extended_attention(&target, &reference, &m_p, &m_g, 1.5).map_err(|e| e.to_string())?;
        leaked = leaked.max(MeaStats::from_maps(&maps, &m_p, &m_g).leaked_mass);

        let (stock, _) = self_attention(&target);
        for (p, g) in [
            (TokenMask::empty(grid, TokenOrigin::Target), m_g.clone()),
            (m_p.clone(), TokenMask::empty(grid, TokenOrigin::Reference)),
        ] {
            let (out, _) = masked_extended_attention(&target, &reference, &p, &g, 1.5).map_err(|e| e.to_string())?;
            stock_diff = stock_diff.max(out.max_abs_diff(&stock));
        }
    }
    check(
        leaked == 0.0 && stock_diff < 1e-6,
        format!("max leaked mass {leaked:e}; empty-mask deviation from self-attention {stock_diff:.1e}"),
    )
}

fn enhance_operator() -> Outcome {
    let mut rng = common::rng(505);
    let rows = 64;
    let cols = 17;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let r: Vec<f64> = (0..cols).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s: f64 = r.iter().sum();
        data.extend(r.iter().map(|x| x / s));
    }
    let a = AttentionMap::new(rows, cols, data, true).map_err(|e| e.to_string())?;
    let identity = enhance_contrast(&a, 1.0).map_err(|e| e.to_string())? == a;
    let mut stochastic: f64 = 0.0;
    for beta in [0.0, 0.5, 1.5, 3.0, 10.0] {
        stochastic = stochastic.max(enhance_contrast(&a, beta).map_err(|e| e.to_string())?.max_row_sum_error());
    }
    let ex = AttentionMap::new(1, 2, vec![0.2, 0.8], true).map_err(|e| e.to_string())?;
    let ex = enhance_contrast(&ex, 1.5).map_err(|e| e.to_string())?;
    let example = (ex.row(0)[0] - 0.05).abs() < 1e-12 && (ex.row(0)[1] - 0.95).abs() < 1e-12;
    check(
        identity && example && stochastic < 1e-6,
        format!(
            "beta=1 identity {identity}; [0.2,0.8] -> [{:.4}, {:.4}]; max row-sum error {stochastic:.1e}",
            ex.row(0)[0],
            ex.row(0)[1]
        ),
    )
}

fn cfg_collapse_and_linearity() -> Outcome {
    let toy = ToyBackend::default();
    let z = Tensor3::from_fn(16, 16, 4, |y, x, c| ((y * 5 + x * 3 + c) as f64 * 0.21).sin());
    let uncond = Conditioning::Unconditional;
    let text = Conditioning::Prompt("a striped shirt".into());
    let base = toy.predict_noise(&PredictRequest::new(&z, 400, &uncond)).map_err(|e| e.to_string())?.eps;
    let eps_text = toy.predict_noise(&PredictRequest::new(&z, 400, &text)).map_err(|e| e.to_string())?.eps;
    let eps_mea = z.map(|v| 0.3 * v - 0.1);
    let g = |a_mea: f64, a_text: f64| GuidanceConfig {
        alpha_mea: a_mea,
        alpha_text: a_text,
        ..GuidanceConfig::default()
    };
    let combine = |a: f64, b: f64| cfg_combine(&base, &eps_mea, &eps_text, &g(a, b)).unwrap();
    let collapse = combine(0.0, 0.0) == base;
    let mut affine: f64 = 0.0;
    for &(a, b, lambda) in &[(15.0, 7.5, 0.3), (2.0, -1.0, 2.5), (0.5, 4.0, -1.0)] {
        let full = combine(a, b);
        let scaled = combine(lambda * a, lambda * b);
        let predicted = full.zip_map(&base, |f, b0| b0 + lambda * (f - b0)).unwrap();
        affine = affine.max(scaled.max_abs_diff(&predicted));
        let sum = combine(a, 0.0).zip_map(&combine(0.0, b), |p, q| p + q).unwrap();
        affine = affine.max(full.max_abs_diff(&sum.zip_map(&base, |s, b0| s - b0).unwrap()));
    }
    check(
        collapse && affine < 1e-7,
        format!("zero scales reproduce base bit-exactly: {collapse}; max affinity deviation {affine:.1e}"),
    )
}

fn double_mask_contract() -> Outcome {
    let toy = ToyBackend::default();
    let (person, m_p) = common::person_scene();
    let thin = m_p.and_not(&common::rect_mask(64, 20, 16, 44, 48));
    let dilated = thin.dilate(2);
    let sched = NoiseSchedule::new(&toy.describe().unwrap().schedule, 50).map_err(|e| e.to_string())?;
    let bg = BackgroundTrajectory::new(&toy, &person, 3).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    let mut observer = |t: &StepTrace<'_>| {
        steps += 1;
        let expected = bg.at(t.t, &sched).unwrap();
        let (h, w, c) = t.latent.shape();
        for y in 0..h {
            for x in 0..w {
                if !t.generated[y * w + x] {
                    for ch in 0..c {
                        worst = worst.max((t.latent.get(y, x, ch) - expected.get(y, x, ch)).abs());
                    }
                }
            }
        }
    };
    double_mask_inpaint(&toy, &bg, &thin, &dilated, "shirt", &sched, Some(&mut observer)).map_err(|e| e.to_string())?;
    check(
        steps == 50 && worst < 1e-6,
        format!("{steps} steps; max deviation from background trajectory {worst:.1e}"),
    )
}

fn texture_sticking_proxy() -> Outcome {
    let toy = ToyBackend::default();
    let case = common::rotation_case(30.0, 0.7);
    let mut job = TryOnJob::new(
        case.person.clone(),
        case.person_mask.clone(),
        case.reference.clone(),
        case.reference_mask.clone(),
        "textured shirt",
    );
    job.steps = 50;
    let sched = NoiseSchedule::new(&toy.describe().unwrap().schedule, job.steps).map_err(|e| e.to_string())?;
    let reg = register_with_control_points(&job, &case.oracle_cps, &toy, &sched, None).map_err(|e| e.to_string())?;
    let field = build_deformation_field(&reg.control_points, case.size, case.size, 1.0).map_err(|e| e.to_string())?;
    let (warped, _) = apply_backward_warp(&case.reference_landmarks, &BinaryMask::full(case.size, case.size), &field)
        .map_err(|e| e.to_string())?;
    let n = case.landmarks.len() as f64;
    let err = |t: &Tensor3| -> f64 {
        case.landmarks.iter().enumerate().map(|(k, l)| common::centroid(t, k).dist(*l)).sum::<f64>() / n
    };
    let registered = err(&warped);
    let unregistered = err(&case.reference_landmarks);
    check(
        registered < 2.0 && unregistered > 10.0,
        format!("landmark error {registered:.3} px registered vs {unregistered:.2} px unregistered"),
    )
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (person, m_p) = common::person_scene();
    let (garment, m_g) = common::garment_scene();
    let person_png = dir.path().join("person.png");
    save_rgb(&person_png, &person).map_err(|e| e.to_string())?;
    let person = load_rgb(&person_png).map_err(|e| e.to_string())?;

    let toy = ToyBackend::default();
    let mut job = TryOnJob::new(person.clone(), m_p.clone(), garment, m_g, "a red striped shirt");
    job.steps = 50;
    job.seed = 2024;
    let start = Instant::now();
    let mut files = Vec::new();
    for run in 0..2 {
        let out = run_try_on(&job, &toy).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("out{run}.png"));
        save_rgb(&path, &out.image).map_err(|e| e.to_string())?;
        files.push(std::fs::read(&path).map_err(|e| e.to_string())?);
    }
    let secs = start.elapsed().as_secs_f64() / 2.0;
    let identical = files[0] == files[1];
    let out = load_rgb(dir.path().join("out0.png")).map_err(|e| e.to_string())?;
    let mut outside_equal = true;
    for y in 0..64 {
        for x in 0..64 {
            if !m_p.get(y, x) && out.pixel(y, x) != person.pixel(y, x) {
                outside_equal = false;
            }
        }
    }
    check(
        identical && outside_equal && secs < 60.0,
        format!("byte-identical {identical}; outside M_p bit-equal {outside_equal}; {secs:.2} s per run"),
    )
}

fn main() {
    let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("MLS affine reproduction", mls_affine_reproduction),
        ("MLS oracle agreement", mls_oracle_agreement),
        ("correspondence oracle", correspondence_oracle),
        ("MEA leakage elimination", mea_leakage),
        ("enhance operator", enhance_operator),
        ("CFG collapse and linearity", cfg_collapse_and_linearity),
        ("double-mask contract", double_mask_contract),
        ("texture-sticking mitigation proxy", texture_sticking_proxy),
        ("end-to-end determinism and paste-back", end_to_end),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match run() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
