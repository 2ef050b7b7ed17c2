//! Acceptance criteria 1–8. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.
//!
//! Run a subset with `cargo test -p adderkit-cli --test acceptance -- 3 5`.
//! Oracles here are written independently of the library: brute-force
//! nested loops, hand-rolled finite differences and a scalar EMA.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use adderkit::checkpoint::Checkpoint;
use adderkit::grad::{adder_backward_input, adder_backward_weight, bn_backward, conv_backward, relu_backward, InputRule};
use adderkit::layers::{adder_forward, batchnorm_forward_cached, conv_forward, filter_forward};
use adderkit::necks::{build_neck, Neck, NeckConfig, NeckKind, NodeKind, Source};
use adderkit::profiler::{convert_to_adder, count_model, ComponentMask, LayerSpec, ModelSpec};
use adderkit::trainer::bnstats::bn_stat_variance_experiment;
use adderkit::trainer::classifier::{finetune_classifier, probe_batch, Arch, BnPolicy, ClassifierRun, Classifier};
use adderkit::trainer::{train_toy_detector, DetectorRun};
use adderkit::{BatchNormState, FilterBank, FilterKind, Shape4, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn assets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets")
}

// ---------------------------------------------------------------- oracles

/// Nested-loop filter with zero padding; `tap(x, w)` is summed over taps.
fn brute(x: &Tensor4<f64>, w: &Tensor4<f64>, stride: usize, pad: usize, tap: impl Fn(f64, f64) -> f64) -> Tensor4<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let ho = (xs.h + 2 * pad - ws.h) / stride + 1;
    let wo = (xs.w + 2 * pad - ws.w) / stride + 1;
    Tensor4::from_fn(Shape4::new(xs.n, ws.n, ho, wo), |n, o, oy, ox| {
        let mut acc = 0.0;
        for c in 0..xs.c {
            for i in 0..ws.h {
                for j in 0..ws.w {
                    let (y, xx) = ((oy * stride + i) as isize - pad as isize, (ox * stride + j) as isize - pad as isize);
                    let inside = y >= 0 && xx >= 0 && (y as usize) < xs.h && (xx as usize) < xs.w;
                    let v = if inside { x.at(n, c, y as usize, xx as usize) } else { 0.0 };
                    acc += tap(v, w.at(o, c, i, j));
                }
            }
        }
        acc
    })
}

fn conv_tap(x: f64, w: f64) -> f64 {
    x * w
}

fn adder_tap(x: f64, w: f64) -> f64 {
    -(x - w).abs()
}

fn l2_tap(x: f64, w: f64) -> f64 {
    -0.5 * (x - w) * (x - w)
}

/// Per-channel biased batch normalization, affine applied.
fn bn_oracle(x: &Tensor4<f64>, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor4<f64> {
    let s = x.shape();
    let count = (s.n * s.h * s.w) as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for c in 0..s.c {
        for n in 0..s.n {
            mean[c] += x.plane(n, c).iter().sum::<f64>() / count;
        }
        for n in 0..s.n {
            var[c] += x.plane(n, c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / count;
        }
    }
    Tensor4::from_fn(s, |n, c, y, xx| gamma[c] * (x.at(n, c, y, xx) - mean[c]) / (var[c] + eps).sqrt() + beta[c])
}

/// Central differences of `f` with respect to each element of `p`.
fn numeric_grad(p: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut q = p.to_vec();
    (0..p.len())
        .map(|i| {
            q[i] = p[i] + h;
            let up = f(&q);
            q[i] = p[i] - h;
            let down = f(&q);
            q[i] = p[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Worst `|a − n| / max(|a|, |n|)` over elements whose gradients are not
/// both below `floor`.
fn rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn dot(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn normal(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::<f32>::randn(shape, 1.0, rng).cast()
}

// ------------------------------------------------------------- criterion 1

fn oracle_energy_mj(spec: &ModelSpec, e_mul_pj: f64, e_add_pj: f64) -> f64 {
    let (mut muls, mut adds) = (0.0, 0.0);
    for l in &spec.layers {
        let p = (l.kh * l.kw * l.c_in * l.c_out * l.h_out * l.w_out) as f64;
        match l.kind {
            FilterKind::Conv => {
                muls += p;
                adds += p;
            }
            FilterKind::Adder => adds += 2.0 * p,
        }
    }
    (muls * e_mul_pj + adds * e_add_pj) * 1e-9
}

fn criterion_1() -> Outcome {
    let mut rows = 0;
    let mut misses = Vec::new();
    let mut int8 = 0;
    let mut int8_values = Vec::new();
    let mut entries: Vec<_> = std::fs::read_dir(assets().join("specs")).map_err(|e| e.to_string())?.collect();
    entries.sort_by_key(|e| e.as_ref().map(|e| e.path()).ok());
    for e in entries {
        let path = e.map_err(|e| e.to_string())?.path();
        let spec = ModelSpec::load(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let published = spec.published_energy_mj.ok_or_else(|| format!("{} has no published energy", spec.name))?;
        // Library and oracle must agree exactly before comparing to the tables.
        let counts = count_model(&spec).map_err(|e| e.to_string())?;
        let lib = adderkit::profiler::energy_mj(counts, &adderkit::profiler::EnergyModel::FP32);
        let ours = oracle_energy_mj(&spec, 3.7, 0.9);
        ensure((lib - ours).abs() < 1e-9, || format!("{}: library {lib} vs oracle {ours}", spec.name))?;
        rows += 1;
        if (ours - published).abs() > 0.5 {
            misses.push(format!("{} {ours:.2} vs {published}", spec.name));
        }
        if let Some(p8) = spec.published_int8_mj {
            int8 += 1;
            int8_values.push(p8);
            let e8 = oracle_energy_mj(&spec, 0.2, 0.03);
            if (e8 - p8).abs() > 0.05 {
                misses.push(format!("{} int8 {e8:.3} vs {p8}", spec.name));
            }
        }
    }
    for want in [49.38, 32.08] {
        ensure(int8_values.contains(&want), || format!("no int8 row publishes {want}"))?;
    }
    if misses.is_empty() {
        Ok(format!("{rows} rows within 0.5 mJ, {int8} int8 rows within 0.05 mJ"))
    } else {
        Err(format!("{} of {rows} rows outside tolerance: {}", misses.len(), misses.join("; ")))
    }
}

// ------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let comps = ["backbone", "neck", "head"];
    for trial in 0..200 {
        let layers: Vec<LayerSpec> = (0..rng.random_range(1..8))
            .map(|i| LayerSpec {
                name: format!("{}.l{i}", comps[rng.random_range(0..3)]),
                kind: if rng.random_bool(0.3) { FilterKind::Adder } else { FilterKind::Conv },
                kh: rng.random_range(1..8),
                kw: rng.random_range(1..8),
                c_in: rng.random_range(1..2048),
                c_out: rng.random_range(1..2048),
                h_out: rng.random_range(1..200),
                w_out: rng.random_range(1..200),
            })
            .collect();
        let spec = ModelSpec { name: format!("t{trial}"), input: None, published_energy_mj: None, published_int8_mj: None, layers };
        let mask: ComponentMask = ["backbone", "backbone+neck", "neck+head", "none"][trial % 4].parse().map_err(|e| format!("{e}"))?;
        let before = count_model(&spec).map_err(|e| e.to_string())?;
        let after = count_model(&convert_to_adder(&spec, &mask, trial % 3 == 0).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        ensure(before.muls + before.adds == after.muls + after.adds, || format!("trial {trial}: {before:?} -> {after:?}"))?;
    }
    let fcos = ModelSpec::load(assets().join("specs/fcos_r50_12e.spec")).map_err(|e| e.to_string())?;
    let c = count_model(&fcos).map_err(|e| e.to_string())?;
    let g = |x: u128| x as f64 / 1e9;
    ensure((c.muls, c.adds) == (214_700_000_000, 214_700_000_000), || format!("FCOS {} / {}", g(c.muls), g(c.adds)))?;
    let b = convert_to_adder(&fcos, &"backbone".parse().map_err(|e| format!("{e}"))?, false).map_err(|e| e.to_string())?;
    let a = count_model(&b).map_err(|e| e.to_string())?;
    ensure((a.muls, a.adds) == (129_900_000_000, 299_500_000_000), || format!("Adder FCOS (B) {} / {}", g(a.muls), g(a.adds)))?;
    Ok(format!("200 random specs conserve muls+adds; FCOS {:.1}/{:.1} -> {:.1}/{:.1} G", g(c.muls), g(c.adds), g(a.muls), g(a.adds)))
}

// ------------------------------------------------------------- criterion 3

#[derive(Debug, Clone, Copy)]
struct Case {
    n: usize,
    c_in: usize,
    c_out: usize,
    size: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let k = rng.random_range(1..=3);
    Case {
        n: rng.random_range(1..=2),
        c_in: rng.random_range(1..=3),
        c_out: rng.random_range(1..=3),
        size: rng.random_range(k.max(3)..=6),
        k,
        stride: rng.random_range(1..=2),
        pad: rng.random_range(0..k),
    }
}

/// Values `0.1·m`; with `shift` offset by `0.05`, so any shifted/unshifted
/// pair differs by at least `0.05`.
fn grid(shape: Shape4, shift: bool, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(-15i32..=15) as f64 * 0.1 + if shift { 0.05 } else { 0.0 })
}

fn criterion_3() -> Outcome {
    const TOL: f64 = 1e-3;
    const FLOOR: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = [0.0f64; 5];
    let names = ["conv", "bn", "relu", "adder input (sign) vs true forward", "adder weight vs l2 forward"];
    let cases = 60;
    for t in 0..cases {
        let c = random_case(&mut rng);
        let xs = Shape4::new(c.n, c.c_in, c.size, c.size);
        let ws = Shape4::new(c.c_out, c.c_in, c.k, c.k);
        let bank = |kind, w: &Tensor4<f64>, bias: Option<Vec<f64>>| FilterBank::new(kind, w.clone(), c.stride, c.pad, bias).unwrap();
        let err = |e: adderkit::Error| format!("case {t} {c:?}: {e}");

        // conv: input, weight, bias against the brute forward.
        let x = normal(xs, &mut rng);
        let w = normal(ws, &mut rng);
        let b: Vec<f64> = (0..c.c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = bank(FilterKind::Conv, &w, Some(b.clone()));
        let y = conv_forward(&x, &f).map_err(err)?;
        let probe = normal(y.shape(), &mut rng);
        let g = conv_backward(&x, &f, &probe).map_err(err)?;
        let obj = |x: &Tensor4<f64>, w: &Tensor4<f64>, b: &[f64]| {
            let y = brute(x, w, c.stride, c.pad, conv_tap);
            dot(&y, &probe) + (0..y.shape().c).map(|o| b[o] * (0..y.shape().n).map(|n| probe.plane(n, o).iter().sum::<f64>()).sum::<f64>()).sum::<f64>()
        };
        let nx = numeric_grad(x.data(), 1e-5, |p| obj(&Tensor4::from_vec(xs, p.to_vec()).unwrap(), &w, &b));
        let nw = numeric_grad(w.data(), 1e-5, |p| obj(&x, &Tensor4::from_vec(ws, p.to_vec()).unwrap(), &b));
        let nb = numeric_grad(&b, 1e-5, |p| obj(&x, &w, p));
        let e = rel_err(g.input.data(), &nx, FLOOR)
            .max(rel_err(g.weight.data(), &nw, FLOOR))
            .max(rel_err(&g.bias.unwrap(), &nb, FLOOR));
        worst[0] = worst[0].max(e);

        // batch norm in training mode: input, gamma, beta.
        let xb = normal(xs, &mut rng).map(|v| 2.0 * v + 0.5);
        let gamma: Vec<f64> = (0..c.c_in).map(|_| rng.random_range(0.5..1.5)).collect();
        let beta: Vec<f64> = (0..c.c_in).map(|_| rng.random_range(-0.5..0.5)).collect();
        let mut bn = BatchNormState::<f64>::new(c.c_in);
        bn.gamma = gamma.clone();
        bn.beta = beta.clone();
        if c.n * c.size * c.size >= 2 {
            let (yb, cache) = batchnorm_forward_cached(&xb, &mut bn, true).map_err(err)?;
            let pb = normal(yb.shape(), &mut rng);
            let gb = bn_backward(&cache, &bn, &pb).map_err(err)?;
            let eps = bn.eps;
            let nx = numeric_grad(xb.data(), 1e-5, |p| dot(&bn_oracle(&Tensor4::from_vec(xs, p.to_vec()).unwrap(), &gamma, &beta, eps), &pb));
            let ng = numeric_grad(&gamma, 1e-5, |p| dot(&bn_oracle(&xb, p, &beta, eps), &pb));
            let nbt = numeric_grad(&beta, 1e-5, |p| dot(&bn_oracle(&xb, &gamma, p, eps), &pb));
            let e = rel_err(gb.input.data(), &nx, FLOOR)
                .max(rel_err(&gb.gamma, &ng, FLOOR))
                .max(rel_err(&gb.beta, &nbt, FLOOR));
            worst[1] = worst[1].max(e);
        }

        // relu, away from zero.
        let xr = grid(xs, true, &mut rng);
        let pr = normal(xs, &mut rng);
        let gr = relu_backward(&xr, &pr).map_err(err)?;
        let nr = numeric_grad(xr.data(), 1e-4, |p| p.iter().zip(pr.data()).map(|(v, q)| v.max(0.0) * q).sum());
        worst[2] = worst[2].max(rel_err(gr.data(), &nr, FLOOR));

        // adder: kink-free input/filter values.
        let xa = grid(xs, true, &mut rng);
        let wa = grid(ws, false, &mut rng);
        let fa = bank(FilterKind::Adder, &wa, None);
        let ya = adder_forward(&xa, &fa).map_err(err)?;
        let pa = normal(ya.shape(), &mut rng);
        let gi = adder_backward_input(&xa, &fa, &pa, InputRule::Sign).map_err(err)?;
        let ni = numeric_grad(xa.data(), 1e-4, |p| dot(&brute(&Tensor4::from_vec(xs, p.to_vec()).unwrap(), &wa, c.stride, c.pad, adder_tap), &pa));
        worst[3] = worst[3].max(rel_err(gi.data(), &ni, FLOOR));
        let gw = adder_backward_weight(&xa, &fa, &pa).map_err(err)?;
        let nw = numeric_grad(wa.data(), 1e-4, |p| dot(&brute(&xa, &Tensor4::from_vec(ws, p.to_vec()).unwrap(), c.stride, c.pad, l2_tap), &pa));
        worst[4] = worst[4].max(rel_err(gw.data(), &nw, FLOOR));
    }
    let summary = names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.1e}")).collect::<Vec<_>>().join(", ");
    ensure(worst.iter().all(|&w| w <= TOL), || format!("worst relative errors over {cases} configs: {summary}"))?;
    Ok(format!("{cases} configs, worst relative errors: {summary}"))
}

// ------------------------------------------------------------- criterion 4

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let shapes = 50;
    for t in 0..shapes {
        let k = rng.random_range(1..=5);
        let (kh, kw) = (k, if rng.random_bool(0.2) { rng.random_range(1..=5) } else { k });
        let xs = Shape4::new(rng.random_range(1..=3), rng.random_range(1..=6), rng.random_range(kh.max(2)..=12), rng.random_range(kw.max(2)..=12));
        let ws = Shape4::new(rng.random_range(1..=6), xs.c, kh, kw);
        let stride = rng.random_range(1..=3);
        let pad = rng.random_range(0..kh.min(kw));
        let x32 = Tensor4::<f32>::rand_uniform(xs, -1.0, 1.0, &mut rng);
        let w32 = Tensor4::<f32>::rand_uniform(ws, -1.0, 1.0, &mut rng);
        let (x, w): (Tensor4<f64>, Tensor4<f64>) = (x32.cast(), w32.cast());
        for (kind, tap) in [(FilterKind::Adder, adder_tap as fn(f64, f64) -> f64), (FilterKind::Conv, conv_tap)] {
            let want = brute(&x, &w, stride, pad, tap);
            let f32_bank = FilterBank::new(kind, w32.clone(), stride, pad, None).map_err(|e| format!("{t}: {e}"))?;
            let f64_bank = FilterBank::new(kind, w.clone(), stride, pad, None).map_err(|e| format!("{t}: {e}"))?;
            let (y32, y64) = match kind {
                FilterKind::Adder => (adder_forward(&x32, &f32_bank), adder_forward(&x, &f64_bank)),
                FilterKind::Conv => (conv_forward(&x32, &f32_bank), conv_forward(&x, &f64_bank)),
            };
            let (y32, y64) = (y32.map_err(|e| e.to_string())?.cast::<f64>(), y64.map_err(|e| e.to_string())?);
            ensure(y32.shape() == want.shape() && y64.shape() == want.shape(), || format!("{t}: shape {} vs {}", y32.shape(), want.shape()))?;
            let e = y32.max_abs_diff(&want).map_err(|e| e.to_string())?.max(y64.max_abs_diff(&want).map_err(|e| e.to_string())?);
            worst = worst.max(e);
            if kind == FilterKind::Adder {
                ensure(y32.data().iter().chain(y64.data()).all(|&v| v <= 0.0), || format!("{t}: positive adder output"))?;
            }
        }
    }
    ensure(worst <= 1e-5, || format!("max abs error {worst:.2e} over {shapes} shapes"))?;
    Ok(format!("{shapes} shapes, f32 and f64, max abs error {worst:.1e}, adder outputs <= 0"))
}

// ------------------------------------------------------------- criterion 5

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = Shape4::new(8, 4, 5, 5);

    let mut bn = BatchNormState::<f32>::new(4);
    bn.running_mean = vec![0.3, -1.0, 2.0, 0.0];
    bn.running_var = vec![0.5, 2.0, 1.0, 3.0];
    bn.frozen = true;
    let bits = |bn: &BatchNormState<f32>| -> Vec<u32> { bn.running_mean.iter().chain(&bn.running_var).map(|v| v.to_bits()).collect() };
    let before = bits(&bn);
    for i in 0..100 {
        let x = Tensor4::<f32>::randn(s, 3.0, &mut rng);
        batchnorm_forward_cached(&x, &mut bn, i % 2 == 0).map_err(|e| e.to_string())?;
    }
    ensure(bits(&bn) == before, || "frozen running statistics changed".into())?;

    let mut bn = BatchNormState::<f32>::new(4);
    bn.gamma = vec![2.0, 0.5, 1.0, 3.0];
    bn.beta = vec![1.0, -1.0, 0.0, 0.2];
    let (mut worst_m, mut worst_v): (f64, f64) = (0.0, 0.0);
    let (mut rm, mut rv) = (vec![0.0f64; 4], vec![1.0f64; 4]);
    let mut worst_ema: f64 = 0.0;
    for _ in 0..10 {
        let x = Tensor4::<f32>::randn(s, 3.0, &mut rng).map(|v| v + 5.0);
        let (_, cache) = batchnorm_forward_cached(&x, &mut bn, true).map_err(|e| e.to_string())?;
        let count = (s.n * s.h * s.w) as f64;
        for c in 0..4 {
            let xh: Vec<f64> = (0..s.n).flat_map(|n| cache.x_hat.plane(n, c).to_vec()).collect();
            let m = xh.iter().sum::<f64>() / count;
            let v = xh.iter().map(|h| (h - m).powi(2)).sum::<f64>() / count;
            worst_m = worst_m.max(m.abs());
            worst_v = worst_v.max((v - 1.0).abs());
            // Scalar EMA oracle on the raw batch.
            let raw: Vec<f64> = (0..s.n).flat_map(|n| x.plane(n, c).iter().map(|&v| f64::from(v)).collect::<Vec<_>>()).collect();
            let bm = raw.iter().sum::<f64>() / count;
            let bv = raw.iter().map(|r| (r - bm).powi(2)).sum::<f64>() / count;
            rm[c] = 0.9 * rm[c] + 0.1 * bm;
            rv[c] = 0.9 * rv[c] + 0.1 * bv;
            worst_ema = worst_ema
                .max((f64::from(bn.running_mean[c]) - rm[c]).abs())
                .max((f64::from(bn.running_var[c]) - rv[c]).abs());
        }
    }
    ensure(worst_m <= 1e-4 && worst_v <= 1e-3, || format!("normalized mean {worst_m:.1e}, var error {worst_v:.1e}"))?;
    ensure(worst_ema <= 1e-6, || format!("EMA deviates by {worst_ema:.2e}"))?;
    Ok(format!("frozen stats bit-identical over 100 forwards; |mean| {worst_m:.1e}, |var-1| {worst_v:.1e}; EMA error {worst_ema:.1e}"))
}

// ------------------------------------------------------------- criterion 6

fn criterion_6() -> Outcome {
    let mut checked = 0;
    for kind in NeckKind::ALL {
        for levels in 2..=5 {
            let in_ch: Vec<usize> = (0..levels).map(|l| 4 << l).collect();
            let g = build_neck(&NeckConfig::new(kind, in_ch.clone(), 6, FilterKind::Adder)).map_err(|e| e.to_string())?;
            let tag = format!("{kind} L={levels}");
            // Ids are positions; every source exists.
            for (i, n) in g.nodes.iter().enumerate() {
                ensure(n.id == i, || format!("{tag}: node {i} has id {}", n.id))?;
                for s in &n.inputs {
                    match *s {
                        Source::Node(j) => ensure(j < g.nodes.len() && j != i, || format!("{tag}: node {i} reads {j}"))?,
                        Source::Backbone(l) => ensure(l < levels, || format!("{tag}: node {i} reads backbone {l}"))?,
                    }
                }
            }
            // Acyclic: Kahn's algorithm, written here.
            let mut indeg: Vec<usize> = g.nodes.iter().map(|n| n.inputs.iter().filter(|s| matches!(s, Source::Node(_))).count()).collect();
            let mut ready: Vec<usize> = (0..g.nodes.len()).filter(|&i| indeg[i] == 0).collect();
            let mut seen = 0;
            while let Some(i) = ready.pop() {
                seen += 1;
                for (j, n) in g.nodes.iter().enumerate() {
                    for s in &n.inputs {
                        if *s == Source::Node(i) {
                            indeg[j] -= 1;
                            if indeg[j] == 0 {
                                ready.push(j);
                            }
                        }
                    }
                }
            }
            ensure(seen == g.nodes.len(), || format!("{tag}: cycle"))?;
            // Single producer per output level.
            for l in 0..levels {
                let producers = g.nodes.iter().filter(|n| n.kind == NodeKind::Identity && n.level == l).count();
                ensure(producers == 1, || format!("{tag}: level {l} has {producers} producers"))?;
            }
            // The library's order must respect every edge.
            let order = g.topological_order().map_err(|e| e.to_string())?;
            let pos: Vec<usize> = {
                let mut p = vec![0; order.len()];
                for (k, &id) in order.iter().enumerate() {
                    p[id] = k;
                }
                p
            };
            for n in &g.nodes {
                for s in &n.inputs {
                    if let Source::Node(j) = *s {
                        ensure(pos[j] < pos[n.id], || format!("{tag}: order puts {} before {j}", n.id))?;
                    }
                }
            }
            if kind == NeckKind::Rpafpn {
                let last_down = order.iter().rposition(|&i| g.nodes[i].kind == NodeKind::DownsampleAdd);
                let first_up = order.iter().position(|&i| g.nodes[i].kind == NodeKind::UpsampleAdd);
                ensure(matches!((last_down, first_up), (Some(d), Some(u)) if d < u), || format!("{tag}: bottom-up after top-down"))?;
            }
            if kind.has_shortcuts() {
                ensure(g.nodes.iter().filter(|n| n.kind == NodeKind::Fuse3x3).all(|n| n.has_residual), || format!("{tag}: fuse without residual"))?;
            }
            // Shape contract through the built neck.
            let mut rng = ChaCha8Rng::seed_from_u64(levels as u64);
            for fk in [FilterKind::Adder, FilterKind::Conv] {
                let mut cfg = g.config.clone();
                cfg.filter_kind = fk;
                let mut neck = Neck::new(build_neck(&cfg).map_err(|e| e.to_string())?, &mut rng).map_err(|e| e.to_string())?;
                let pyramid: Vec<Tensor4> = in_ch
                    .iter()
                    .enumerate()
                    .map(|(l, &c)| Tensor4::randn(Shape4::new(2, c, 32 >> l, 32 >> l), 1.0, &mut rng))
                    .collect();
                let out = neck.forward(&pyramid, false).map_err(|e| e.to_string())?;
                ensure(out.len() == levels, || format!("{tag}: {} outputs", out.len()))?;
                for (l, o) in out.iter().enumerate() {
                    let want = Shape4::new(2, 6, 32 >> l, 32 >> l);
                    ensure(o.shape() == want, || format!("{tag} {fk}: level {l} {} vs {want}", o.shape()))?;
                }
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} graphs (4 kinds x 2-5 levels) acyclic, single-producer, ordered, shape contract holds"))
}

// ------------------------------------------------------------- criterion 7

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_7() -> Outcome {
    let mut notes = Vec::new();
    let mut failures = Vec::new();
    let probe = probe_batch(256).map_err(|e| e.to_string())?;

    // (a) and (c): fine-tuning from the bundled pretrained twins.
    let mut loss = std::collections::HashMap::new();
    let mut sparsity = std::collections::HashMap::new();
    for arch in [Arch::Adder, Arch::Conv] {
        let ckpt = Checkpoint::load(assets().join(format!("checkpoints/classifier_{arch}.ckpt"))).map_err(|e| e.to_string())?;
        for policy in [BnPolicy::Unfrozen, BnPolicy::Frozen] {
            let mut finals = Vec::new();
            for seed in SEEDS {
                let run = ClassifierRun::finetune_default(arch, 32, seed);
                let (mut model, record) = finetune_classifier(arch, policy, &ckpt, &run).map_err(|e| e.to_string())?;
                finals.push(record.final_loss(10).ok_or("empty record")?);
                if policy == BnPolicy::Unfrozen {
                    sparsity.entry(arch).or_insert_with(Vec::new).push(model.last_block_sparsity(&probe).map_err(|e| e.to_string())?);
                }
            }
            loss.insert((arch, policy), mean(&finals));
        }
    }
    let l = |a, p| loss[&(a, p)];
    let (au, af, cu, cf) = (l(Arch::Adder, BnPolicy::Unfrozen), l(Arch::Adder, BnPolicy::Frozen), l(Arch::Conv, BnPolicy::Unfrozen), l(Arch::Conv, BnPolicy::Frozen));
    let a_ok = au < af && (af - au) > (cf - cu);
    let a = format!("(a) adder loss unfrozen {au:.3} frozen {af:.3}, gap {:.3} vs conv gap {:.3}", af - au, cf - cu);
    if a_ok { notes.push(a) } else { failures.push(a) }

    let (sa, sc) = (mean(&sparsity[&Arch::Adder]), mean(&sparsity[&Arch::Conv]));
    let c = format!("(c) last-block sparsity adder {sa:.3} conv {sc:.3}");
    if sa >= sc { notes.push(c) } else { failures.push(c) }

    // (d): batch statistics of the adder twin's first adder filter.
    let ckpt = Checkpoint::load(assets().join("checkpoints/classifier_adder.ckpt")).map_err(|e| e.to_string())?;
    let mut model = Classifier::new(Arch::Adder, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| e.to_string())?;
    model.load(&ckpt).map_err(|e| e.to_string())?;
    let x = probe_batch(1024).map_err(|e| e.to_string())?;
    let stem = model.stem.forward(&x, false).map_err(|e| e.to_string())?;
    let pre_bn = filter_forward(&stem, &model.blocks[0].filter).map_err(|e| e.to_string())?;
    let mut d_ok = true;
    let mut stds = vec![Vec::new(); 3];
    for seed in SEEDS {
        let rows = bn_stat_variance_experiment(&pre_bn, &[2, 8, 32], seed).map_err(|e| e.to_string())?;
        d_ok &= rows.windows(2).all(|w| w[1].mean_std < w[0].mean_std && w[1].var_std < w[0].var_std);
        for (i, r) in rows.iter().enumerate() {
            stds[i].push(r.mean_std);
        }
    }
    let d = format!("(d) batch-mean std {:.3} > {:.3} > {:.3} for bs 2/8/32", mean(&stds[0]), mean(&stds[1]), mean(&stds[2]));
    if d_ok { notes.push(d) } else { failures.push(d) }

    // (b): adder backbone and neck detectors.
    let (mut fpn, mut rpa) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let run = DetectorRun::new(seed);
        fpn.push(train_toy_detector(NeckKind::Fpn, Arch::Adder, &run).map_err(|e| e.to_string())?.f1);
        rpa.push(train_toy_detector(NeckKind::Rpafpn, Arch::Adder, &run).map_err(|e| e.to_string())?.f1);
    }
    let b = format!("(b) detection F1 rpafpn {:.3} fpn {:.3}", mean(&rpa), mean(&fpn));
    if mean(&rpa) >= mean(&fpn) { notes.push(b) } else { failures.push(b) }

    if failures.is_empty() {
        Ok(notes.join("; "))
    } else {
        Err(format!("{} | passing: {}", failures.join("; "), notes.join("; ")))
    }
}

// ------------------------------------------------------------- criterion 8

fn adderkit(args: &[&str]) -> Result<(Vec<u8>, i32), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_adderkit"))
        .args(args)
        .env_remove("ADDERKIT_THREADS")
        .output()
        .map_err(|e| e.to_string())?;
    Ok((o.stdout, o.status.code().unwrap_or(-1)))
}

fn criterion_8() -> Outcome {
    let dir = std::env::temp_dir().join(format!("adderkit-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let csv = dir.join("out.csv");
    let ckpt = dir.join("w.ckpt");
    let (c, k) = (csv.to_str().unwrap(), ckpt.to_str().unwrap());
    let matrix: Vec<(Vec<&str>, Vec<&Path>)> = vec![
        (vec!["gradcheck", "--cases", "10", "--seed", "8", "--csv", c], vec![&csv]),
        (vec!["energy", "--spec", "fcos_r50", "--precision", "int8", "--csv", c], vec![&csv]),
        (vec!["energy", "--spec", "retinanet_ms640_r50_50e", "--convert", "backbone+neck+head"], vec![]),
        (vec!["train", "--task", "pretrain", "--arch", "adder", "--steps", "8", "--seed", "11", "--save", k, "--csv", c], vec![&csv, &ckpt]),
        (vec!["train", "--task", "classify", "--arch", "conv", "--bn-policy", "frozen", "--steps", "6", "--seed", "11", "--csv", c], vec![&csv]),
        (vec!["train", "--task", "detect", "--arch", "adder", "--neck", "pafpn-shortcut", "--steps", "4", "--seed", "11", "--csv", c], vec![&csv]),
        (vec!["sparsity", "--checkpoint", "classifier_conv", "--input", "cluster_batch", "--arch", "conv"], vec![]),
        (vec!["export-graph", "--neck", "rpafpn", "--extra-levels", "2"], vec![]),
    ];
    for (args, files) in &matrix {
        let full: Vec<&str> = ["--threads", "1"].iter().copied().chain(args.iter().copied()).collect();
        let mut runs = Vec::new();
        for _ in 0..2 {
            let (out, code) = adderkit(&full)?;
            ensure(code == 0, || format!("{args:?} exited {code}"))?;
            let contents: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap_or_default()).collect();
            runs.push((out, contents));
        }
        ensure(runs[0] == runs[1], || format!("{args:?} differs between runs"))?;
    }
    let _ = std::fs::remove_dir_all(&dir);
    Ok(format!("{} invocations byte-identical across two runs", matrix.len()))
}

fn main() -> ExitCode {
    let criteria: [(usize, &str, fn() -> Outcome); 8] = [
        (1, "energy golden tables", criterion_1),
        (2, "op-count conversion law", criterion_2),
        (3, "gradient oracle suite", criterion_3),
        (4, "forward oracle suite", criterion_4),
        (5, "batch-norm state machine", criterion_5),
        (6, "neck structure", criterion_6),
        (7, "directional properties over 5 seeds", criterion_7),
        (8, "CLI determinism", criterion_8),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n} PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
