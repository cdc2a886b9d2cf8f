//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run a subset by number: `cargo test -p xbar-harness --test acceptance -- 3 7`.

#[path = "../../core/tests/common/layers.rs"]
mod layers;
#[path = "../../core/tests/common/oracle.rs"]
mod oracle;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::Rng;
use xbar_core::circuit::{
    ideal_mvm, solve_linear, solve_nonlinear, sweep_nf, CrossbarConfig, CrossbarState, SolverKind,
};
use xbar_core::datagen::{
    generate_samples, label_with_fr, label_with_scalers, slice_conductance, stream_voltage, SamplingSpec,
};
use xbar_core::fixedpoint::{rescale_round_even, slice_weight, stream_input, FxpFormat, SliceScheme};
use xbar_core::funcsim::{
    conv2d_mvm, conv_weight_matrix, linear_mvm, Accumulator, BackendKind, CrossbarBackend, LayerFormats, MvmArch,
    ProgrammedLayer,
};
use xbar_core::surrogate::{benchmark_rmse, train, SurrogateModel, TrainSpec};
use xbar_harness::cli::main_with;
use xbar_harness::experiment::{read_rows, Row};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration, detail: String) -> Outcome {
    check(
        elapsed < limit,
        format!(
            "{detail}; {:.1}s of {:.0}s allowed",
            elapsed.as_secs_f64(),
            limit.as_secs_f64()
        ),
    )
}

fn c1_solver_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = oracle::rng(1001);
    let (mut lin, mut non) = (0.0f64, 0.0f64);
    for rows in [1, 2, 4] {
        for cols in [1, 2, 4] {
            for _ in 0..100 {
                let cfg = oracle::random_config(&mut rng, rows, cols);
                let (g, v) = oracle::random_instance(&mut rng, &cfg);
                let got = solve_linear(&cfg, g.view(), &v).map_err(|e| e.to_string())?.i_out;
                lin = lin.max(oracle::rel_err(&got, &oracle::linear_currents(&cfg, g.view(), &v)));
                let state = CrossbarState::program(&cfg, g.view()).map_err(|e| e.to_string())?;
                let got = solve_nonlinear(&cfg, &state, &v).map_err(|e| e.to_string())?.i_out;
                non = non.max(oracle::rel_err(
                    &got,
                    &oracle::nonlinear_currents(&cfg, state.gaps.view(), &v),
                ));
            }
        }
    }
    let detail =
        format!("900 instances per solver, max rel err linear {lin:.2e} (<= 1e-9), nonlinear {non:.2e} (<= 1e-6)");
    if lin <= 1e-9 && non <= 1e-6 {
        within(start.elapsed(), Duration::from_secs(60), detail)
    } else {
        Err(detail)
    }
}

fn c2_ideality_limit() -> Outcome {
    let mut rng = oracle::rng(1002);
    let cfg = CrossbarConfig::square(64).without_parasitics();
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (g, v) = oracle::random_instance(&mut rng, &cfg);
        let got = solve_linear(&cfg, g.view(), &v).map_err(|e| e.to_string())?.i_out;
        let want = ideal_mvm(&v, g.view()).map_err(|e| e.to_string())?;
        worst = worst.max(oracle::rel_err(&got, &want));
    }
    check(
        worst <= 1e-10,
        format!("10 instances at 64x64, max rel err {worst:.2e} (<= 1e-10)"),
    )
}

fn medians(grid: &[CrossbarConfig]) -> Result<Vec<f64>, String> {
    sweep_nf(grid, 200, 3, SolverKind::Nonlinear)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|r| r.stats.map(|s| s.median).ok_or_else(|| "no NF values".to_string()))
        .collect()
}

fn strictly(values: &[f64], increasing: bool) -> bool {
    values
        .windows(2)
        .all(|w| if increasing { w[1] > w[0] } else { w[1] < w[0] })
}

fn c3_nf_trends() -> Outcome {
    let start = Instant::now();
    let base = CrossbarConfig::square(64);
    let by_size = medians(&[16, 32, 64].map(CrossbarConfig::square))?;
    let by_ron = medians(&[50e3, 100e3, 300e3].map(|r| base.clone().with_r_on(r)))?;
    let by_ratio = medians(&[2.0, 6.0, 10.0].map(|k| base.clone().with_on_off(k)))?;
    let ok = strictly(&by_size, true) && strictly(&by_ron, false) && strictly(&by_ratio, false);
    let detail = format!(
        "median NF by size 16/32/64 {:.4?}, by r_on 50k/100k/300k {:.4?}, by on/off 2/6/10 {:.4?}",
        by_size, by_ron, by_ratio
    );
    if ok {
        within(start.elapsed(), Duration::from_secs(600), detail)
    } else {
        Err(detail)
    }
}

/// Mean of `|I_nonlinear - I_linear| / I_linear` over all columns.
fn nonlinearity(cfg: &CrossbarConfig, samples: &[(Vec<f64>, Array2<f64>)]) -> Result<f64, String> {
    let (mut sum, mut count) = (0.0, 0usize);
    for (unit_v, g) in samples {
        let v: Vec<f64> = unit_v.iter().map(|x| x * cfg.v_supply).collect();
        let lin = solve_linear(cfg, g.view(), &v).map_err(|e| e.to_string())?.i_out;
        let state = CrossbarState::program(cfg, g.view()).map_err(|e| e.to_string())?;
        let non = solve_nonlinear(cfg, &state, &v).map_err(|e| e.to_string())?.i_out;
        for (a, b) in lin.iter().zip(&non) {
            if *a > 0.0 {
                sum += (b - a).abs() / a;
                count += 1;
            }
        }
    }
    Ok(sum / count as f64)
}

fn c4_nonlinearity_voltage() -> Outcome {
    let mut rng = oracle::rng(1004);
    let cfg = CrossbarConfig::square(32);
    let samples: Vec<(Vec<f64>, Array2<f64>)> = (0..100)
        .map(|_| {
            let v = (0..32).map(|_| rng.random_range(0.0..=1.0)).collect();
            let g = Array2::from_shape_simple_fn((32, 32), || rng.random_range(cfg.g_off()..=cfg.g_on()));
            (v, g)
        })
        .collect();
    let low = nonlinearity(&cfg.clone().with_supply(0.25), &samples)?;
    let high = nonlinearity(&cfg.with_supply(0.5), &samples)?;
    check(
        high > low,
        format!("mean linear vs nonlinear difference {low:.4e} at 0.25 V, {high:.4e} at 0.5 V"),
    )
}

fn surrogate_at(v_supply: f64) -> Result<(f64, f64, f64), String> {
    let cfg = CrossbarConfig::square(64).with_on_off(6.0).with_supply(v_supply);
    let err = |e: xbar_core::Error| e.to_string();
    let train_samples = generate_samples(&SamplingSpec::new(64, 800, 1), &cfg).map_err(err)?;
    let train_set = label_with_fr(&train_samples, &cfg, SolverKind::Nonlinear).map_err(err)?;
    let val_samples = generate_samples(&SamplingSpec::new(64, 20, 2), &cfg).map_err(err)?;
    let val = label_with_scalers(&val_samples, &cfg, SolverKind::Nonlinear, train_set.scalers).map_err(err)?;
    let spec = TrainSpec {
        hidden: 500,
        epochs: 30,
        learning_rate: 1e-3,
        lr_decay: 0.93,
        seed: 3,
        ..TrainSpec::default()
    };
    let (model, _) = train(&train_set, None, &spec).map_err(err)?;
    let report = benchmark_rmse(&model, &val, &cfg).map_err(err)?;
    Ok((report.rmse_surrogate, report.rmse_analytical, report.ratio))
}

fn c5_surrogate_quality() -> Outcome {
    let start = Instant::now();
    let (s_lo, a_lo, r_lo) = surrogate_at(0.25)?;
    let (s_hi, a_hi, r_hi) = surrogate_at(0.5)?;
    let ok = s_lo <= 0.5 && r_lo >= 3.0 && r_hi >= 3.0 && r_hi > r_lo;
    let detail = format!(
        "64x64 r_on 100k on/off 6: 0.25 V NF-RMSE surrogate {s_lo:.4} analytical {a_lo:.4} ({r_lo:.2}x); \
         0.5 V surrogate {s_hi:.4} analytical {a_hi:.4} ({r_hi:.2}x)"
    );
    if ok {
        within(start.elapsed(), Duration::from_secs(1800), detail)
    } else {
        Err(detail)
    }
}

fn c6_gradient_check() -> Outcome {
    let mut rng = oracle::rng(1006);
    let cfg = CrossbarConfig::square(4);
    let scalers = xbar_core::datagen::Scalers::fit(&cfg, [0.8, 1.5].into_iter());
    let model = SurrogateModel::he_init(4, 40, scalers, cfg.fingerprint(), 6);
    let rows = 24;
    let x = Array2::from_shape_simple_fn((rows, model.input_dim()), || rng.random_range(0.0..1.0));
    let t = Array2::from_shape_simple_fn((rows, 4), || rng.random_range(0.0..1.0));
    let w = Array2::from_shape_simple_fn((rows, 4), || if rng.random_bool(0.9) { 1.0 } else { 0.0 });
    let (_, grads) = model
        .gradients(x.view(), t.view(), w.view())
        .map_err(|e| e.to_string())?;
    let flat: Vec<f64> = [
        grads.w1.as_slice(),
        grads.b1.as_slice(),
        grads.w2.as_slice(),
        grads.b2.as_slice(),
    ]
    .into_iter()
    .flat_map(|s| s.unwrap().iter().copied())
    .collect();
    let (h, mut worst) = (1e-6, 0.0f64);
    for _ in 0..100 {
        let idx = rng.random_range(0..model.num_params());
        let mut probe = model.clone();
        let base = model.param(idx);
        probe.set_param(idx, base + h);
        let up = probe.loss(x.view(), t.view(), w.view()).map_err(|e| e.to_string())?;
        probe.set_param(idx, base - h);
        let down = probe.loss(x.view(), t.view(), w.view()).map_err(|e| e.to_string())?;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((fd - flat[idx]).abs() / flat[idx].abs().max(fd.abs()).max(1e-6));
    }
    check(
        worst <= 1e-5,
        format!("100 coordinates, max rel err {worst:.2e} (<= 1e-5)"),
    )
}

fn exact_arch(xbar: usize, scheme: SliceScheme) -> MvmArch {
    MvmArch::new(xbar, scheme)
        .with_adc_bits(0)
        .with_accumulator(Accumulator::Exact)
}

fn c7_funcsim_exactness() -> Outcome {
    let mut rng = oracle::rng(1007);
    let ideal = |n: usize| CrossbarBackend::ideal(CrossbarConfig::square(n)).unwrap();
    let mut variants = 0;
    for case_idx in 0..50 {
        let case = layers::random_conv(&mut rng);
        let fail = |what: &str| Err(format!("config {case_idx} ({what}): {:?}", case.params));
        let want = oracle::direct_conv(
            case.x.view(),
            case.w.view(),
            &case.params,
            &case.triple(),
            Some(&case.bias),
        );
        let m = conv_weight_matrix(case.w.view());
        let run = |xbar: usize, scheme: SliceScheme| {
            let layer = ProgrammedLayer::program(m.view(), exact_arch(xbar, scheme), ideal(xbar)).unwrap();
            conv2d_mvm(case.x.view(), &case.params, &layer, &case.formats, Some(&case.bias))
                .unwrap()
                .0
        };
        if run(case.xbar, case.scheme()) != want {
            return fail("conv");
        }
        for xbar in [8, 32] {
            let scheme = SliceScheme::new(
                case.formats.weight.total_bits,
                layers::divisor(&mut rng, case.formats.weight.total_bits),
                case.formats.input.total_bits,
                layers::divisor(&mut rng, case.formats.input.total_bits),
            )
            .unwrap();
            variants += 1;
            if run(xbar, scheme) != want {
                return fail("tiling/slicing variant");
            }
        }
        let (x, w, bias, mv) = layers::random_matvec(&mut rng);
        let layer = ProgrammedLayer::program(w.view(), exact_arch(mv.xbar, mv.scheme()), ideal(mv.xbar)).unwrap();
        let got = linear_mvm(x.view(), &layer, &mv.formats, Some(&bias)).unwrap().codes;
        if got != oracle::direct_matvec(x.view(), w.view(), &mv.triple(), Some(&bias)) {
            return fail("matvec");
        }
    }
    Ok(format!(
        "50 conv and 50 matvec configs bit-exact; {variants} size/width variants identical"
    ))
}

/// Untiled reference for one MVM: every (stream, slice, channel) partial
/// comes from a nonlinear solve of the whole matrix, optionally digitized
/// by a uniform ADC, then merged by shift-and-add into output codes.
fn untiled_nonlinear(
    cfg: &CrossbarConfig,
    arch: &MvmArch,
    f: &LayerFormats,
    x: &[i64],
    w: &Array2<i64>,
    adc_bits: u32,
) -> Vec<i64> {
    let sch = &arch.scheme;
    let (n, cols) = w.dim();
    let unit = arch.product_unit(cfg);
    let fs = arch.full_scale(cfg);
    let smax = sch.stream_max() as f64;
    let digitize = |i: f64| {
        if adc_bits == 0 {
            return i;
        }
        let lsb = fs / ((1u64 << adc_bits) - 1) as f64;
        (i / lsb).round_ties_even().clamp(0.0, ((1u64 << adc_bits) - 1) as f64) * lsb
    };
    let streams: Vec<Vec<u32>> = x.iter().map(|&c| stream_input(c, sch).unwrap()).collect();
    let slices: Vec<_> = w.iter().map(|&c| slice_weight(c, sch).unwrap()).collect();
    let mut passes: Vec<(Vec<f64>, i128, f64)> = (0..sch.n_streams())
        .map(|s| {
            let v = streams
                .iter()
                .map(|st| stream_voltage(cfg, st[s], sch.stream_width))
                .collect();
            (v, 1i128 << (s as u32 * sch.stream_width), 1.0)
        })
        .collect();
    if x.iter().any(|&c| c < 0) {
        let v = x.iter().map(|&c| if c < 0 { cfg.v_supply } else { 0.0 }).collect();
        passes.push((v, -(1i128 << sch.input_bits), smax));
    }
    let mut acc = vec![0.0f64; cols];
    for k in 0..sch.n_slices() {
        let mut states = Vec::new();
        for negative in [false, true] {
            let g = Array2::from_shape_fn((n, cols), |(i, j)| {
                let (p, q) = &slices[i * cols + j];
                let level = if negative { q.slices[k] } else { p.slices[k] };
                slice_conductance(cfg, level, sch.slice_width)
            });
            states.push(CrossbarState::program(cfg, g.view()).unwrap());
        }
        for (v, factor, div) in &passes {
            let ip = solve_nonlinear(cfg, &states[0], v).unwrap().i_out;
            let ineg = solve_nonlinear(cfg, &states[1], v).unwrap().i_out;
            for j in 0..cols {
                let d = (digitize(ip[j]) - digitize(ineg[j])) / unit / div;
                let d = if adc_bits == 0 { d } else { d.round_ties_even() };
                acc[j] += d * (*factor << (k as u32 * sch.slice_width)) as f64;
            }
        }
    }
    let prod_frac = f.input.frac_bits + f.weight.frac_bits;
    acc.iter()
        .map(|&a| {
            let code = if adc_bits == 0 {
                (a * (f.output.frac_bits as f64 - prod_frac as f64).exp2()).round_ties_even() as i128
            } else {
                rescale_round_even(a as i128, prod_frac, f.output.frac_bits)
            };
            f.output.saturate(code).0
        })
        .collect()
}

fn tiled_nonlinear(
    cfg: &CrossbarConfig,
    arch: MvmArch,
    f: &LayerFormats,
    x: &[i64],
    w: &Array2<i64>,
) -> Result<Vec<i64>, String> {
    let backend = CrossbarBackend::new(BackendKind::NonlinearOracle, cfg.clone()).map_err(|e| e.to_string())?;
    let layer = ProgrammedLayer::program(w.view(), arch, backend).map_err(|e| e.to_string())?;
    let xs = Array2::from_shape_vec((1, x.len()), x.to_vec()).unwrap();
    let out = linear_mvm(xs.view(), &layer, f, None).map_err(|e| e.to_string())?;
    if out.counters.adc_clips > 0 {
        return Err("unexpected ADC clipping".into());
    }
    Ok(out.codes.into_raw_vec_and_offset().0)
}

fn c8_tiled_vs_untiled() -> Outcome {
    let mut rng = oracle::rng(1008);
    let n = 16;
    let mut worst_pipeline = 0i64;
    let mut worst_steps = 0.0f64;
    let mut nonideal_gap = 0i64;
    for (round, v_supply) in [0.25, 0.5, 0.25, 0.5].into_iter().enumerate() {
        let cfg = CrossbarConfig::square(n).with_supply(v_supply);

        // Full 16-bit pipeline, ADC on both sides: must agree to one output code.
        let f16 = FxpFormat::q(16, 13);
        let formats = LayerFormats {
            input: f16,
            weight: f16,
            output: f16,
        };
        let arch = MvmArch::new(n, SliceScheme::new(16, 4, 16, 4).unwrap()).with_accumulator(Accumulator::Exact);
        let lo = if round % 2 == 0 { 0 } else { f16.min_code() };
        let x: Vec<i64> = (0..n).map(|_| rng.random_range(lo..=f16.max_code()) / 8).collect();
        let w = Array2::from_shape_simple_fn((n, n), || rng.random_range(-f16.max_code()..=f16.max_code()));
        let tiled = tiled_nonlinear(&cfg, arch, &formats, &x, &w)?;
        let untiled = untiled_nonlinear(&cfg, &arch, &formats, &x, &w, arch.adc_bits);
        let ideal = oracle::direct_matvec(
            Array2::from_shape_vec((1, n), x.clone()).unwrap().view(),
            w.view(),
            &oracle::FxpFormatTriple {
                inp: f16,
                w: f16,
                out: f16,
            },
            None,
        );
        for j in 0..n {
            worst_pipeline = worst_pipeline.max((tiled[j] - untiled[j]).abs());
            nonideal_gap = nonideal_gap.max((tiled[j] - ideal[[0, j]]).abs());
        }

        // One slice and one stream: each output is a single digitized partial,
        // compared with the analog untiled solve in ADC steps.
        let f4 = FxpFormat::q(4, 2);
        let out4 = FxpFormat::q(16, 4);
        let formats = LayerFormats {
            input: f4,
            weight: f4,
            output: out4,
        };
        let arch = MvmArch::new(n, SliceScheme::new(4, 4, 4, 4).unwrap()).with_accumulator(Accumulator::Exact);
        let x: Vec<i64> = (0..n).map(|_| rng.random_range(0..=f4.max_code())).collect();
        let w = Array2::from_shape_simple_fn((n, n), || rng.random_range(-f4.max_code()..=f4.max_code()));
        let tiled = tiled_nonlinear(&cfg, arch, &formats, &x, &w)?;
        let analog = untiled_nonlinear(&cfg, &arch, &formats, &x, &w, 0);
        let step = arch.full_scale(&cfg) / ((1u64 << arch.adc_bits) - 1) as f64 / arch.product_unit(&cfg);
        for j in 0..n {
            // Two channels each within half a step, plus rounding to whole product units.
            let allowed = step + 1.0;
            worst_steps = worst_steps.max((tiled[j] - analog[j]).abs() as f64 / allowed);
        }
    }
    check(
        worst_pipeline <= 1 && worst_steps <= 1.0,
        format!(
            "16x16 at 0.25 and 0.5 V: 16-bit pipeline max diff {worst_pipeline} code (<= 1; nonideal vs ideal gap {nonideal_gap} codes); \
             single-partial diff {worst_steps:.2} of the one-step budget"
        ),
    )
}

fn xbar(args: &[&str]) -> i32 {
    main_with(std::iter::once("xbar").chain(args.iter().copied()))
}

fn run(cmd: &str, cfg: &Path, out: &Path, seed: u64) -> Result<(), String> {
    let code = xbar(&[
        cmd,
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        &seed.to_string(),
        "--out",
        out.to_str().unwrap(),
    ]);
    check(code == 0, String::new())
        .map(|_| ())
        .map_err(|_| format!("`xbar {cmd}` exited with {code}"))
}

const EXPERIMENT: &str = "
[experiment]
model = \"model/model.xbmt\"
images = 1000
surrogates = [\"sur/surrogate.xbnn\"]
";

const SURROGATE_SETUP: &str = "
[dataset]
train_samples_per_level = 800
val_samples_per_level = 20

[train]
epochs = 30
lr_decay = 0.93

[surrogate]
train_data = \"data/train.xbds\"
val_data = \"data/val.xbds\"
model = \"sur/surrogate.xbnn\"
";

fn sweep(dir: &Path, name: &str, body: &str) -> Result<Vec<Row>, String> {
    let cfg = dir.join(format!("{name}.toml"));
    fs::write(&cfg, format!("{body}\n{EXPERIMENT}")).map_err(|e| e.to_string())?;
    run("sweep", &cfg, &dir.join(name), 0)?;
    let rows = read_rows(&dir.join(name).join("sweep.csv")).map_err(|e| e.to_string())?;
    if let Some(bad) = rows.iter().find(|r| !r.is_ok()) {
        return Err(format!("{name}: row {} {}", bad.backend, bad.status));
    }
    Ok(rows)
}

fn degradation(rows: &[Row], pick: impl Fn(&Row) -> bool) -> Result<f64, String> {
    rows.iter()
        .skip(1)
        .find(|r| pick(r))
        .and_then(|r| r.degradation)
        .ok_or_else(|| "missing sweep row".to_string())
}

fn c9_application_trends() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let d_body = format!("[crossbar]\nsize = 32\nr_on = 10e3\n{SURROGATE_SETUP}\n[sweep]\nbackend = [\"analytical_linear\", \"surrogate\"]\n");
    let d_cfg = dir.join("d.toml");
    fs::write(&d_cfg, format!("{d_body}\n{EXPERIMENT}")).map_err(|e| e.to_string())?;
    run("train-model", &d_cfg, &dir.join("model"), 0)?;
    run("gen-dataset", &d_cfg, &dir.join("data"), 1)?;
    run("train-surrogate", &d_cfg, &dir.join("sur"), 3)?;

    let a = sweep(dir, "a", "[crossbar]\nr_on = 10e3\n[sweep]\nsize = [16, 32, 64]\n")?;
    let sizes: Vec<f64> = [16, 32, 64]
        .iter()
        .map(|&n| degradation(&a, |r| r.size == n))
        .collect::<Result<_, _>>()?;
    let b = sweep(
        dir,
        "b",
        "[crossbar]\nsize = 64\nr_on = 20e3\n[sweep]\non_off = [2.0, 10.0]\n",
    )?;
    let (b2, b10) = (
        degradation(&b, |r| r.on_off == 2.0)?,
        degradation(&b, |r| r.on_off == 10.0)?,
    );
    let c = sweep(
        dir,
        "c",
        "[crossbar]\nsize = 64\nr_on = 20e3\n[sweep]\nprecision = [8, 16]\n",
    )?;
    let (c8, c16) = (
        degradation(&c, |r| r.precision == 8)?,
        degradation(&c, |r| r.precision == 16)?,
    );
    let d = sweep(dir, "d", &d_body)?;
    let (d_an, d_sur) = (
        degradation(&d, |r| r.backend == "analytical_linear")?,
        degradation(&d, |r| r.backend == "surrogate")?,
    );
    let checks = [
        sizes.windows(2).all(|w| w[1] >= w[0]),
        b2 > b10,
        c8 > c16,
        d_an >= d_sur,
    ];
    let verdict = |ok: bool| if ok { "ok" } else { "VIOLATED" };
    let detail = format!(
        "reference {:.1}%; (a) size 16/32/64 at r_on 10k: {:.1?} {}; (b) on/off 2 vs 10 at 64x64 r_on 20k: {b2:.1} vs {b10:.1} {}; \
         (c) 8 vs 16 bit at 64x64 r_on 20k: {c8:.1} vs {c16:.1} {}; (d) 32x32 r_on 10k analytical vs surrogate: {d_an:.1} vs {d_sur:.1} {}",
        a[0].accuracy.unwrap_or(f64::NAN),
        sizes,
        verdict(checks[0]),
        verdict(checks[1]),
        verdict(checks[2]),
        verdict(checks[3]),
    );
    if checks.iter().all(|&c| c) {
        within(start.elapsed(), Duration::from_secs(7200), detail)
    } else {
        Err(detail)
    }
}

const SMALL: &str = "
[crossbar]
size = 16
r_on = 20e3

[dataset]
train_samples_per_level = 2
val_samples_per_level = 1
sparsity_v = [0.0, 0.5]
sparsity_g = [0.0, 0.5]

[train]
hidden = 16
epochs = 2
batch_size = 4

[surrogate]
train_data = \"data/train.xbds\"
val_data = \"data/val.xbds\"
model = \"sur/surrogate.xbnn\"

[cnn]
train_images = 200
epochs = 1

[experiment]
model = \"model/model.xbmt\"
images = 12
surrogates = [\"sur/surrogate.xbnn\"]

[sweep]
backend = [\"ideal\", \"analytical_linear\", \"surrogate\"]
";

fn c10_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let cfg = dir.join("small.toml");
    fs::write(&cfg, SMALL).map_err(|e| e.to_string())?;
    run("train-model", &cfg, &dir.join("model"), 1)?;
    run("gen-dataset", &cfg, &dir.join("data"), 2)?;
    run("train-surrogate", &cfg, &dir.join("sur"), 3)?;
    let commands = [
        ("gen-dataset", vec!["dataset.csv", "train.xbds", "val.xbds"]),
        ("train-surrogate", vec!["history.csv", "surrogate.xbnn"]),
        ("bench-surrogate", vec!["bench.csv"]),
        ("train-model", vec!["history.csv", "model.xbmt", "summary.txt"]),
        ("eval", vec!["eval.csv", "summary.txt"]),
        ("sweep", vec!["sweep.csv", "summary.txt"]),
    ];
    let mut compared = 0;
    for (cmd, files) in &commands {
        let (a, b) = (dir.join(format!("{cmd}-a")), dir.join(format!("{cmd}-b")));
        run(cmd, &cfg, &a, 11)?;
        run(cmd, &cfg, &b, 11)?;
        for f in files {
            let (x, y) = (
                fs::read(a.join(f)).map_err(|e| e.to_string())?,
                fs::read(b.join(f)).map_err(|e| e.to_string())?,
            );
            if x != y {
                return Err(format!("`xbar {cmd}` wrote different {f} on identical runs"));
            }
            compared += 1;
        }
    }
    Ok(format!(
        "{} commands run twice, {compared} output files byte-identical",
        commands.len()
    ))
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    (1, "solver oracle equivalence", c1_solver_oracles),
    (2, "ideality limit", c2_ideality_limit),
    (3, "NF trend reproduction", c3_nf_trends),
    (4, "nonlinearity grows with supply voltage", c4_nonlinearity_voltage),
    (5, "surrogate quality", c5_surrogate_quality),
    (6, "surrogate gradient check", c6_gradient_check),
    (7, "functional simulator exactness", c7_funcsim_exactness),
    (8, "tiled vs untiled nonlinear MVM", c8_tiled_vs_untiled),
    (9, "application-level trends", c9_application_trends),
    (10, "CLI determinism", c10_determinism),
];

fn main() {
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, f) in CRITERIA {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {id:>2} {name} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {id:>2} {name} [{secs:.1}s]: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
