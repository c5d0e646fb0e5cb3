//! End-to-end acceptance checks. Runs without the libtest harness so the
//! per-criterion lines are always printed; exits non-zero if any fails.

use std::process::{Command, ExitCode};
use std::time::Instant;

use lkca_core::autodiff::{grad_check, GradCheckTarget, GradientMap, ParamMap, Tape};
use lkca_core::error::IdxErrorKind;
use lkca_core::lkca::{
    self, kernel_extent, unroll_kernel_to_attention, LkcaKernel, LkcaLayer, ValueProjection, View,
};
use lkca_core::model::{count_model_params, record_lkca, ModelConfig, ModelLossTarget, VisionModel};
use lkca_core::tensor::{self, rand_normal};
use lkca_core::train::idx::{encode_idx, idx_images, idx_labels, parse_idx};
use lkca_core::train::{self, DataSpec, StripesSplit, TrainConfig};
use lkca_core::{Error, MacCounter, Result, Scalar, SeededRng, Tensor};

type Check = fn() -> Result<Verdict>;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        passed,
        detail: detail.into(),
    })
}

fn random_layer<T: Scalar>(rng: &mut SeededRng, gh: usize, gw: usize, d: usize, view: View) -> Result<LkcaLayer<T>> {
    let (kh, kw) = kernel_extent(gh, gw);
    let kernel = LkcaKernel::new(gh, gw, rand_normal(rng, [kh, kw], 0.0, 1.0)?)?;
    let value = ValueProjection::new(
        rand_normal(rng, [d, d], 0.0, 1.0 / (d as f64).sqrt())?,
        rand_normal(rng, [d], 0.0, 0.1)?,
    )?;
    Ok(LkcaLayer::new(kernel, value, view))
}

fn tiny_config() -> ModelConfig {
    ModelConfig::default()
}

// 1
fn view_equivalence() -> Result<Verdict> {
    let mut rng = SeededRng::new(101);
    let mut worst = [0.0f64; 3]; // f32 conv, f64 conv, spectral (ratio to bound)
    let mut failures = 0;
    for _ in 0..200 {
        let gh = 1 + rng.below(16);
        let gw = 1 + rng.below(16);
        let d = 1 + rng.below(64);
        let b = 1 + rng.below(4);
        let layer = random_layer::<f64>(&mut rng, gh, gw, d, View::Attention)?;
        let x = rand_normal::<f64>(&mut rng, [b, gh * gw, d], 0.0, 1.0)?;

        let l32 = LkcaLayer::<f32>::new(
            LkcaKernel::new(gh, gw, layer.kernel.weights().cast())?,
            ValueProjection::new(layer.value.weight.cast(), layer.value.bias.cast())?,
            View::Attention,
        );
        let x32 = x.cast::<f32>();
        let a32 = l32.forward(&x32)?;
        let c32 = l32.clone().with_view(View::Convolution).forward(&x32)?;
        let bound = 1e-5 * (1.0 + a32.max_abs() as f64);
        let dev = a32.max_abs_diff(&c32)? as f64;
        worst[0] = worst[0].max(dev / bound);

        let a64 = layer.forward(&x)?;
        let c64 = layer.clone().with_view(View::Convolution).forward(&x)?;
        let dev64 = a64.max_abs_diff(&c64)?;
        worst[1] = worst[1].max(dev64 / 1e-10);
        failures += usize::from(dev > bound) + usize::from(dev64 > 1e-10);

        if View::Spectral.is_available() {
            let s64 = layer.clone().with_view(View::Spectral).forward(&x)?;
            let devs = a64.max_abs_diff(&s64)?;
            worst[2] = worst[2].max(devs / 1e-4);
            failures += usize::from(devs > 1e-4);
        }
    }
    verdict(
        failures == 0,
        format!(
            "200 cases, worst deviation/bound: f32 {:.2e}, f64 {:.2e}, spectral {:.2e}",
            worst[0], worst[1], worst[2]
        ),
    )
}

// 2
fn toeplitz_structure() -> Result<Verdict> {
    let mut rng = SeededRng::new(202);
    let mut mismatches = 0usize;
    for _ in 0..20 {
        let gh = 1 + rng.below(12);
        let gw = 1 + rng.below(12);
        let (kh, kw) = kernel_extent(gh, gw);
        let k = LkcaKernel::new(gh, gw, rand_normal::<f32>(&mut rng, [kh, kw], 0.0, 1.0)?)?;
        let s = unroll_kernel_to_attention(&k).scores;
        let w = k.weights();
        for i in 0..gh {
            for j in 0..gw {
                for p in 0..gh {
                    for q in 0..gw {
                        let got = s.at(&[i * gw + j, p * gw + q]);
                        let want = w.at(&[gh - 1 - i + p, gw - 1 - j + q]);
                        mismatches += usize::from(got.to_bits() != want.to_bits());
                    }
                }
            }
        }
    }
    verdict(mismatches == 0, format!("20 kernels, {mismatches} mismatched entries"))
}

// 3
fn identity_cases() -> Result<Verdict> {
    let mut rng = SeededRng::new(303);
    let mut ok = true;
    for &(gh, gw, d) in &[(1, 1, 3), (3, 5, 4), (8, 8, 6), (4, 2, 1)] {
        let delta = LkcaKernel::<f32>::centered_delta(gh, gw)?;
        ok &= unroll_kernel_to_attention(&delta).scores == Tensor::eye(gh * gw);
        let x = rand_normal::<f32>(&mut rng, [2, gh * gw, d], 0.0, 1.0)?;
        let zero = LkcaKernel::<f32>::zeros(gh, gw)?;
        for view in View::ALL.into_iter().filter(|v| v.is_available() && *v != View::Spectral) {
            let id = LkcaLayer::new(delta.clone(), ValueProjection::identity(d), view);
            ok &= id.forward(&x)? == x;
            let z = LkcaLayer::new(zero.clone(), ValueProjection::identity(d), view);
            ok &= z.forward(&x)?.data().iter().all(|&v| v == 0.0);
        }
    }
    verdict(ok, "delta kernel gives identity scores and output; zero kernel gives zeros")
}

// 4
fn translation_equivariance() -> Result<Verdict> {
    let (g, d) = (8usize, 3usize);
    let mut rng = SeededRng::new(404);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let view = if case % 2 == 0 { View::Attention } else { View::Convolution };
        let (kh, kw) = kernel_extent(g, g);
        let layer = LkcaLayer::new(
            LkcaKernel::new(g, g, rand_normal::<f64>(&mut rng, [kh, kw], 0.0, 1.0)?)?,
            ValueProjection::identity(d),
            view,
        );
        let sh = rng.below(7) as isize - 3;
        let sw = rng.below(7) as isize - 3;
        let inside = |i: isize, j: isize| (0..g as isize).contains(&i) && (0..g as isize).contains(&j);
        // content that stays on the grid after the shift
        let mut x = rand_normal::<f64>(&mut rng, [1, g * g, d], 0.0, 1.0)?;
        for i in 0..g as isize {
            for j in 0..g as isize {
                if !inside(i + sh, j + sw) {
                    for c in 0..d {
                        x.set(&[0, (i as usize) * g + j as usize, c], 0.0);
                    }
                }
            }
        }
        let mut shifted = Tensor::<f64>::zeros([1, g * g, d]);
        for i in 0..g as isize {
            for j in 0..g as isize {
                if inside(i + sh, j + sw) {
                    for c in 0..d {
                        let v = x.at(&[0, (i as usize) * g + j as usize, c]);
                        shifted.set(&[0, ((i + sh) as usize) * g + (j + sw) as usize, c], v);
                    }
                }
            }
        }
        let y = layer.forward(&x)?;
        let ys = layer.forward(&shifted)?;
        for i in 0..g as isize {
            for j in 0..g as isize {
                if inside(i - sh, j - sw) {
                    for c in 0..d {
                        let a = ys.at(&[0, (i as usize) * g + j as usize, c]);
                        let b = y.at(&[0, ((i - sh) as usize) * g + (j - sw) as usize, c]);
                        worst = worst.max((a - b).abs());
                    }
                }
            }
        }
    }
    verdict(worst <= 1e-6, format!("50 shifts on 8x8, max deviation {worst:.2e}"))
}

/// `loss = Σ out ⊙ r` for one LKCA layer; `x` is checked as a parameter.
struct LayerTarget {
    layer: LkcaLayer<f64>,
    x: Tensor<f64>,
    r: Tensor<f64>,
    analytic: bool,
}

impl LayerTarget {
    fn rebuild(&self, p: &ParamMap) -> Result<(LkcaLayer<f64>, Tensor<f64>)> {
        let (gh, gw) = self.layer.kernel.grid();
        let layer = LkcaLayer::new(
            LkcaKernel::new(gh, gw, p["kernel"].clone())?,
            ValueProjection::new(p["value.weight"].clone(), p["value.bias"].clone())?,
            self.layer.view,
        );
        Ok((layer, p["x"].clone()))
    }
}

impl GradCheckTarget for LayerTarget {
    fn parameters(&self) -> ParamMap {
        [
            ("kernel", self.layer.kernel.weights().clone()),
            ("value.weight", self.layer.value.weight.clone()),
            ("value.bias", self.layer.value.bias.clone()),
            ("x", self.x.clone()),
        ]
        .into_iter()
        .map(|(n, t)| (n.to_string(), t))
        .collect()
    }

    fn loss(&self, p: &ParamMap) -> Result<f64> {
        let (layer, x) = self.rebuild(p)?;
        Ok(tensor::mul(&layer.forward(&x)?, &self.r)?.sum())
    }

    fn gradients(&self, p: &ParamMap) -> Result<GradientMap<f64>> {
        let (layer, x) = self.rebuild(p)?;
        let mut out = GradientMap::new();
        if self.analytic {
            let g = lkca::backward(&x, &layer, &self.r)?;
            out.insert("kernel".into(), g.kernel);
            out.insert("value.weight".into(), g.value_weight);
            out.insert("value.bias".into(), g.value_bias);
            out.insert("x".into(), g.x);
            return Ok(out);
        }
        let mut tape = Tape::new();
        let xv = tape.param("x", x)?;
        let y = record_lkca(&mut tape, &layer, "lkca", xv)?;
        let r = tape.input(self.r.clone());
        let prod = tape.mul(y, r)?;
        let loss = tape.sum(prod)?;
        let grads = tape.backward(loss)?;
        for (name, t) in grads.into_map() {
            out.insert(name.strip_prefix("lkca.").unwrap_or(&name).to_string(), t);
        }
        Ok(out)
    }
}

// 5
fn gradient_checks() -> Result<Verdict> {
    let mut rng = SeededRng::new(505);
    let mut lines = Vec::new();
    let mut ok = true;
    for view in [View::Attention, View::Convolution] {
        for analytic in [true, false] {
            let layer = random_layer::<f64>(&mut rng, 3, 3, 4, view)?;
            let target = LayerTarget {
                x: rand_normal(&mut rng, [2, 9, 4], 0.0, 1.0)?,
                r: rand_normal(&mut rng, [2, 9, 4], 0.0, 1.0)?,
                layer,
                analytic,
            };
            let rep = grad_check(&target, 1e-6)?;
            ok &= rep.passed();
            lines.push(format!(
                "{}/{} {:.1e}",
                if analytic { "analytic" } else { "tape" },
                view.as_str(),
                rep.max_rel_error()
            ));
        }
    }
    let cfg = ModelConfig {
        patch_size: 4,
        dim: 8,
        depth: 2,
        block_pattern: "LL".into(),
        kernel_init: lkca::KernelInit::TruncNormal,
        ..tiny_config()
    };
    let data = train::gen_stripes::<f64>(2, 8, 7)?;
    let (images, labels) = data.batch(&[0, 1]);
    let target = ModelLossTarget {
        model: VisionModel::<f64>::init(&cfg, 9)?,
        images,
        labels,
        smoothing: 0.1,
        fault: None,
    };
    let rep = grad_check(&target, 1e-5)?;
    ok &= rep.passed();
    lines.push(format!("tiny model {:.1e}", rep.max_rel_error()));
    verdict(ok, lines.join(", "))
}

// 6
fn adjoint_equivalence() -> Result<Verdict> {
    let mut rng = SeededRng::new(606);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let gh = 1 + rng.below(6);
        let gw = 1 + rng.below(6);
        let d = 1 + rng.below(8);
        let layer = random_layer::<f64>(&mut rng, gh, gw, d, View::Attention)?;
        let x = rand_normal::<f64>(&mut rng, [2, gh * gw, d], 0.0, 1.0)?;
        let r = rand_normal::<f64>(&mut rng, [2, gh * gw, d], 0.0, 1.0)?;
        let mut grads = Vec::new();
        for view in [View::Attention, View::Convolution] {
            let target = LayerTarget {
                layer: layer.clone().with_view(view),
                x: x.clone(),
                r: r.clone(),
                analytic: false,
            };
            grads.push(target.gradients(&target.parameters())?["kernel"].clone());
        }
        worst = worst.max(grads[0].max_abs_diff(&grads[1])?);
    }
    verdict(worst <= 1e-10, format!("10 cases, max kernel-gradient difference {worst:.2e}"))
}

fn stripes_config(steps: usize, split: StripesSplit, train_samples: usize, test_samples: usize) -> TrainConfig {
    TrainConfig {
        model: tiny_config(),
        total_steps: steps,
        eval_every: 10,
        data: DataSpec::Stripes {
            train_samples,
            test_samples,
            split,
        },
        ..TrainConfig::default()
    }
}

// 7
fn lockstep_training() -> Result<Verdict> {
    let base = stripes_config(100, StripesSplit::All, 64, 64);
    let mut losses = Vec::new();
    for view in [View::Attention, View::Convolution] {
        let mut cfg = base.clone();
        cfg.model.view = view;
        cfg.eval_every = 0;
        let (tr, te) = cfg.datasets::<f32>()?;
        losses.push(train::train_on(&cfg, &tr, &te, |_| {})?.history.losses());
    }
    let worst = losses[0]
        .iter()
        .zip(&losses[1])
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    verdict(worst <= 1e-4, format!("100 steps, max relative loss difference {worst:.2e}"))
}

// 8
fn overfit_smoke() -> Result<Verdict> {
    let cfg = stripes_config(500, StripesSplit::All, 64, 64);
    let (tr, te) = cfg.datasets::<f32>()?;
    let started = Instant::now();
    let mut first = None;
    train::train_on(&cfg, &tr, &te, |m| {
        if first.is_none() && m.train_acc == Some(1.0) {
            first = Some(m.step);
        }
    })?;
    let secs = started.elapsed().as_secs_f64();
    let detail = match first {
        Some(s) => format!("100% train accuracy at step {s}"),
        None => format!("never reached 100% train accuracy in {secs:.0}s"),
    };
    verdict(first.is_some() && secs < 120.0, detail)
}

// 9
fn generalization_smoke() -> Result<Verdict> {
    let cfg = stripes_config(1000, StripesSplit::EvenOdd, 64, 256);
    let (tr, te) = cfg.datasets::<f32>()?;
    let mut best = (0.0, 0);
    let outcome = train::train_on(&cfg, &tr, &te, |m| {
        if let Some(a) = m.test_acc {
            if a > best.0 {
                best = (a, m.step);
            }
        }
    })?;
    let last = outcome.history.last_eval().and_then(|m| m.test_acc).unwrap_or(0.0);
    verdict(
        last >= 0.85,
        format!(
            "held-out offsets: final {:.1}%, best {:.1}% at step {}",
            100.0 * last,
            100.0 * best.0,
            best.1
        ),
    )
}

// 10
fn accounting() -> Result<Verdict> {
    let cfg = ModelConfig {
        image_h: 16,
        image_w: 16,
        patch_size: 4,
        dim: 8,
        depth: 1,
        block_pattern: "L".into(),
        ..ModelConfig::default()
    };
    let model = VisionModel::<f32>::init(&cfg, 0)?;
    let enumerated: u64 = model.registry().iter().map(|(_, t)| t.len() as u64).sum();
    let mut ok = enumerated == 723 && cfg.param_count()? == 723 && count_model_params(&model) == 723;

    let mut rng = SeededRng::new(1010);
    let mut mismatches = 0;
    for _ in 0..10 {
        let gh = 1 + rng.below(10);
        let gw = 1 + rng.below(10);
        let d = 1 + rng.below(16);
        let b = 1 + rng.below(3);
        let layer = random_layer::<f32>(&mut rng, gh, gw, d, View::Attention)?;
        let x = rand_normal::<f32>(&mut rng, [b, gh * gw, d], 0.0, 1.0)?;
        for view in [View::Attention, View::Convolution] {
            let counter = MacCounter::enabled();
            layer.clone().with_view(view).forward_counted(&x, &counter)?;
            mismatches += usize::from(counter.macs() != lkca::count_flops(&layer, b) / 2);
        }
    }
    ok &= mismatches == 0;
    verdict(
        ok,
        format!("registry total {enumerated}, {mismatches} MAC mismatches over 10 cases x 2 views"),
    )
}

// 11
fn determinism() -> Result<Verdict> {
    let dir = tempfile::tempdir().map_err(|e| Error::io("<tempdir>", e))?;
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "total_steps = 30\neval_every = 10\nseed = 3\n").map_err(|e| Error::io(&cfg, e))?;
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_lkca"))
            .args(["train", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| Error::io("lkca", e))?;
        if !status.status.success() {
            return verdict(false, format!("train run {run} failed: {}", String::from_utf8_lossy(&status.stderr)));
        }
        let p = out.join("metrics.csv");
        csvs.push(std::fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    verdict(
        csvs[0] == csvs[1] && !csvs[0].is_empty(),
        format!("two CLI runs, {} bytes each, identical: {}", csvs[0].len(), csvs[0] == csvs[1]),
    )
}

// 12
fn idx_round_trip() -> Result<Verdict> {
    let mut ok = true;
    let bytes = encode_idx(&[2, 2, 3], &[0, 51, 102, 153, 204, 255, 255, 0, 0, 0, 0, 255]);
    let arr = parse_idx(&bytes)?;
    let imgs: Tensor<f32> = idx_images(&arr)?;
    ok &= imgs.shape() == [2, 2, 3, 1];
    ok &= imgs.data() == [0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
    let labels = idx_labels(&parse_idx(&[0, 0, 8, 1, 0, 0, 0, 3, 1, 0, 1])?)?;
    ok &= labels == [1, 0, 1];

    let kinds: Vec<Option<IdxErrorKind>> = [
        vec![1, 0, 8, 1, 0, 0, 0, 1, 7],
        vec![0, 0, 0x0d, 1, 0, 0, 0, 1, 7],
        vec![0, 0, 8, 2, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2, 3],
    ]
    .iter()
    .map(|b| match parse_idx(b) {
        Err(Error::Idx { kind, .. }) => Some(kind),
        _ => None,
    })
    .collect();
    ok &= matches!(kinds[0], Some(IdxErrorKind::BadMagic));
    ok &= matches!(kinds[1], Some(IdxErrorKind::UnsupportedType(0x0d)));
    ok &= matches!(kinds[2], Some(IdxErrorKind::Truncated { needed: 16, available: 15 }));
    verdict(ok, format!("fixtures parsed; malformed kinds {kinds:?}"))
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters from the harness-less runner
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let only: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();

    let criteria: [(&str, Check); 12] = [
        ("view equivalence fuzz", view_equivalence),
        ("toeplitz structure", toeplitz_structure),
        ("identity and zero kernels", identity_cases),
        ("translation equivariance", translation_equivariance),
        ("gradient checks", gradient_checks),
        ("adjoint equivalence", adjoint_equivalence),
        ("lockstep training", lockstep_training),
        ("overfit smoke", overfit_smoke),
        ("generalization smoke", generalization_smoke),
        ("parameter and MAC accounting", accounting),
        ("determinism", determinism),
        ("IDX round trip", idx_round_trip),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let (tag, detail) = match check() {
            Ok(v) if v.passed => ("PASS", v.detail),
            Ok(v) => ("FAIL", v.detail),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        failed += usize::from(tag == "FAIL");
        println!(
            "[{tag}] {n:>2}. {name}: {detail} ({:.1}s)",
            started.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
