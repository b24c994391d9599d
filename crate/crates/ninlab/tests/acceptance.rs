//! Acceptance suite: one test per release criterion, each printing a
//! single PASS/FAIL line. Tolerances are pinned in the assertions.
//!
//! The robustness criteria (9, 10, 11) share one set of trained models,
//! built lazily on first use.

use once_cell::sync::Lazy;

use ninlab::dataio::Dataset;
use ninlab::diagnostics::{classify_phase, estimate_r1, estimate_r2, Phase, PhaseThresholds};
use ninlab::lineartoy::{toy_phase_boundary, toy_vs_network_crosscheck, LinearToyState, PhiMode};
use ninlab::manifest::RunManifest;
use ninlab::network::{accuracy, backward, forward, forward_with_noise, loss_eval, Activation,
    LayerSpec, LossKind, Mode, NetworkSpec, NinConfig, NinResample, NinTopology, Params};
use ninlab::noise::NoiseDistribution;
use ninlab::presets::{build_network, build_train_config, make_datasets, resolve_preset};
use ninlab::rng::RngStream;
use ninlab::robustness::{corrupt_inputs, corruption_curve, fgsm_attack, pgd_attack};
use ninlab::tensor::Tensor;
use ninlab::training::{evaluate, init_params, train};

fn report(criterion: &str, pass: bool, detail: &str) {
    println!("criterion {criterion}: {} — {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {criterion} failed: {detail}");
}

// ---------------------------------------------------------------------------
// Criterion 1: reverse-mode gradients match central finite differences.
// ---------------------------------------------------------------------------

/// Loss as a pure function of the parameters: the fixed RNG seed pins the
/// noise draws and dropout masks across perturbed evaluations.
fn loss_at(spec: &NetworkSpec, params: &Params, batch: &Tensor, labels: &Tensor) -> f64 {
    let mut rng = RngStream::new(9);
    let (out, _) = forward(spec, params, batch, &mut rng, Mode::Train).unwrap();
    loss_eval(&out, labels, spec.loss).unwrap()
}

fn max_gradcheck_error(spec: &NetworkSpec, batch: &Tensor, labels: &Tensor, seed: u64) -> f64 {
    let params = init_params(spec, &mut RngStream::new(seed)).unwrap();
    let mut rng = RngStream::new(9);
    let (_, cache) = forward(spec, &params, batch, &mut rng, Mode::Train).unwrap();
    let analytic = backward(spec, &params, &cache, labels).unwrap().grads;

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut names = Vec::new();
    params.for_each_named(|name, t| names.push((name.to_string(), t.len())));
    for (name, len) in names {
        for idx in 0..len {
            let probe = |delta: f64| -> f64 {
                let mut p = params.clone();
                p.for_each_named_mut(|n, t| {
                    if n == name {
                        t.data_mut()[idx] += delta;
                    }
                });
                loss_at(spec, &p, batch, labels)
            };
            let fd = (probe(h) - probe(-h)) / (2.0 * h);
            let mut g = 0.0;
            analytic.for_each_named(|n, t| {
                if n == name {
                    g = t.data()[idx];
                }
            });
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

fn fc_nin(sigma: f64, topology: NinTopology) -> Option<NinConfig> {
    Some(NinConfig {
        topology,
        dist: NoiseDistribution::normal(sigma),
        resample: NinResample::PerSamplePerEpoch,
        shared_eps: false,
    })
}

#[test]
fn criterion_01_gradient_correctness() {
    let mut rng = RngStream::new(3);
    let rand = |shape: &[usize], rng: &mut RngStream| {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.next_standard_normal()).collect()).unwrap()
    };
    let labels_idx =
        |n: usize, k: usize, rng: &mut RngStream| {
            Tensor::from_vec(&[n], (0..n).map(|_| rng.next_index(k) as f64).collect()).unwrap()
        };

    let mut worst = 0.0f64;

    // Dense + dropout, MSE, input-only NIN.
    let spec = NetworkSpec {
        input_shape: vec![6],
        layers: vec![
            LayerSpec::Dense { d_in: 6, d_out: 5, activation: Activation::Relu },
            LayerSpec::Dropout { p_drop: 0.25 },
            LayerSpec::Dense { d_in: 5, d_out: 3, activation: Activation::Linear },
        ],
        loss: LossKind::Mse,
        nin: fc_nin(0.7, NinTopology::InputOnly),
    };
    let x = rand(&[8, 6], &mut rng);
    let y = rand(&[8, 3], &mut rng);
    worst = worst.max(max_gradcheck_error(&spec, &x, &y, 11));

    // Dense stack, cross-entropy, NIN at every dense layer.
    let spec = NetworkSpec {
        input_shape: vec![6],
        layers: vec![
            LayerSpec::Dense { d_in: 6, d_out: 5, activation: Activation::Elu },
            LayerSpec::Dense { d_in: 5, d_out: 4, activation: Activation::Linear },
        ],
        loss: LossKind::CrossEntropy,
        nin: fc_nin(0.5, NinTopology::Full),
    };
    let x = rand(&[8, 6], &mut rng);
    let y = labels_idx(8, 4, &mut rng);
    worst = worst.max(max_gradcheck_error(&spec, &x, &y, 12));

    // Conv + batchnorm + maxpool + flatten, MSE, conv-attached NIN.
    let spec = NetworkSpec {
        input_shape: vec![1, 5, 5],
        layers: vec![
            LayerSpec::Conv2d { in_ch: 1, out_ch: 2, kernel_h: 2, kernel_w: 2, activation: Activation::Elu },
            LayerSpec::Batchnorm { channels: 2 },
            LayerSpec::Maxpool { h: 2, w: 2 },
            LayerSpec::Flatten,
        ],
        loss: LossKind::Mse,
        nin: fc_nin(0.4, NinTopology::InputOnly),
    };
    let x = rand(&[8, 1, 5, 5], &mut rng);
    let y = rand(&[8, 8], &mut rng);
    worst = worst.max(max_gradcheck_error(&spec, &x, &y, 13));

    // Conv → dense, cross-entropy, NIN on both the conv input and the dense
    // pre-activation.
    let spec = NetworkSpec {
        input_shape: vec![1, 6, 6],
        layers: vec![
            LayerSpec::Conv2d { in_ch: 1, out_ch: 2, kernel_h: 3, kernel_w: 3, activation: Activation::Relu },
            LayerSpec::Flatten,
            LayerSpec::Dense { d_in: 32, d_out: 4, activation: Activation::Linear },
        ],
        loss: LossKind::CrossEntropy,
        nin: fc_nin(0.6, NinTopology::Full),
    };
    let x = rand(&[8, 1, 6, 6], &mut rng);
    let y = labels_idx(8, 4, &mut rng);
    worst = worst.max(max_gradcheck_error(&spec, &x, &y, 14));

    report("01 gradient-correctness", worst <= 1e-5, &format!("max relative error {worst:.3e}"));
}

// ---------------------------------------------------------------------------
// Criterion 2: toy map ≡ full-network SGD recursion.
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_toy_oracle_exactness() {
    let base = LinearToyState {
        w0: 0.8,
        w1: 1.2,
        w_ni: 1.0,
        m: 1.0,
        sigma_x: 1.0,
        sigma_eps: 0.0,
        eta: 0.05,
        phi_mode: PhiMode::Drop,
    };
    let dev0 = toy_vs_network_crosscheck(&base, 100, 2, &mut RngStream::new(21)).unwrap();
    let noisy = LinearToyState { sigma_eps: 0.3, ..base };
    let dev1 = toy_vs_network_crosscheck(&noisy, 100, 1_000_000, &mut RngStream::new(22)).unwrap();
    report(
        "02 toy-oracle-exactness",
        dev0 <= 1e-12 && dev1 <= 1e-2,
        &format!("max relative deviation: {dev0:.3e} at sigma_eps=0, {dev1:.3e} with 1e6-sample batches"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: exponential decay law of the noise weights.
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_decay_law() {
    // 1-input/1-hidden/1-output linear net with w1 held frozen. The batch is
    // the deterministic grid {±σx}×{±σ_ε}, whose sample moments are exact, so
    // each measured per-step ratio must equal 1 − η·σ_ε²·w1² to fp accuracy.
    let (w0, w1, mut w_ni) = (0.7, 1.3, 0.9);
    let (sigma_x, sigma_eps, eta, m) = (1.0, 0.8, 0.03, 1.5);
    let spec = NetworkSpec {
        input_shape: vec![1],
        layers: vec![
            LayerSpec::Dense { d_in: 1, d_out: 1, activation: Activation::Linear },
            LayerSpec::Dense { d_in: 1, d_out: 1, activation: Activation::Linear },
        ],
        loss: LossKind::Mse,
        nin: fc_nin(sigma_eps, NinTopology::InputOnly),
    };
    let mut params = init_params(&spec, &mut RngStream::new(0)).unwrap();
    params.for_each_named_mut(|name, t| match name {
        "layer0.w" => t.data_mut()[0] = w0,
        "layer1.w" => t.data_mut()[0] = w1,
        "nin0.w_ni" => t.data_mut()[0] = w_ni,
        _ => {}
    });
    let xs = [sigma_x, sigma_x, -sigma_x, -sigma_x];
    let eps = vec![sigma_eps, -sigma_eps, sigma_eps, -sigma_eps];
    let x = Tensor::from_vec(&[4, 1], xs.to_vec()).unwrap();
    let y = Tensor::from_vec(&[4, 1], xs.iter().map(|v| m * v).collect()).unwrap();
    let expected = 1.0 - eta * sigma_eps * sigma_eps * w1 * w1;

    let mut worst = 0.0f64;
    let mut scratch = RngStream::new(0);
    for _ in 0..50 {
        let (_, cache) =
            forward_with_noise(&spec, &params, &x, &[eps.clone()], &mut scratch, Mode::Train)
                .unwrap();
        let g = backward(&spec, &params, &cache, &y).unwrap().grads.nins[0].w_ni.data()[0];
        let next = w_ni - eta * g;
        worst = worst.max((next / w_ni - expected).abs());
        w_ni = next;
        params.for_each_named_mut(|name, t| {
            if name == "nin0.w_ni" {
                t.data_mut()[0] = w_ni;
            }
        });
    }
    report("03 decay-law", worst <= 1e-12, &format!("max ratio deviation {worst:.3e}"));
}

// ---------------------------------------------------------------------------
// Criterion 4: catapult/divergence boundary of the pure-noise regime.
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_divergence_boundary() {
    // Pure-noise regime: no signal path (w0 = 0, M = 0, σx negligible),
    // symmetric weights w1 = w_ni = 0.8; the discrete map destabilizes at
    // σ_ε²* = 2/(η·w₀²) with w₀ the common initial weight.
    let s = |eta: f64| LinearToyState {
        w0: 0.0,
        w1: 0.8,
        w_ni: 0.8,
        m: 0.0,
        sigma_x: 1e-6,
        sigma_eps: 1.0,
        eta,
        phi_mode: PhiMode::Drop,
    };
    let b1 = toy_phase_boundary(&s(0.05), 4000, 1e9).unwrap();
    let b2 = toy_phase_boundary(&s(0.10), 4000, 1e9).unwrap();
    let predict = 2.0 / (0.05 * 0.8 * 0.8);
    let ok1 = (b1 - predict).abs() / predict <= 0.10;
    let ok2 = (b2 - b1 / 2.0).abs() / (b1 / 2.0) <= 0.10;
    report(
        "04 divergence-boundary",
        ok1 && ok2,
        &format!("located {b1:.2} vs predicted {predict:.2}; doubling eta gave {b2:.2} vs {:.2}", b1 / 2.0),
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: exactness and positive semi-definiteness of estimate_r2.
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_r2_exactness() {
    // Exactness on the linear net: r2 = ½·w1²·w_ni²·σ_ε².
    let (w0, w1, w_ni, sigma_eps) = (2.0, 1.7, 0.6, 1.3);
    let spec = NetworkSpec {
        input_shape: vec![1],
        layers: vec![
            LayerSpec::Dense { d_in: 1, d_out: 1, activation: Activation::Linear },
            LayerSpec::Dense { d_in: 1, d_out: 1, activation: Activation::Linear },
        ],
        loss: LossKind::Mse,
        nin: fc_nin(sigma_eps, NinTopology::InputOnly),
    };
    let mut params = init_params(&spec, &mut RngStream::new(0)).unwrap();
    params.for_each_named_mut(|name, t| match name {
        "layer0.w" => t.data_mut()[0] = w0,
        "layer1.w" => t.data_mut()[0] = w1,
        "nin0.w_ni" => t.data_mut()[0] = w_ni,
        _ => {}
    });
    let mut rng = RngStream::new(5);
    let x = Tensor::from_vec(&[16, 1], (0..16).map(|_| rng.next_standard_normal()).collect())
        .unwrap();
    let y = Tensor::from_vec(&[16, 1], x.data().iter().map(|v| 0.5 * v).collect()).unwrap();
    let est = estimate_r2(&spec, &params, &x, &y, sigma_eps).unwrap().r2;
    let exact = 0.5 * w1 * w1 * w_ni * w_ni * sigma_eps * sigma_eps;
    let err = (est - exact).abs();

    // PSD property over 100 random linear/MSE configurations.
    let mut min_r2 = f64::INFINITY;
    for trial in 0..100u64 {
        let mut trng = RngStream::new(1000 + trial);
        let depth = 1 + trng.next_index(3);
        let mut dims = vec![3 + trng.next_index(4)];
        for _ in 0..depth {
            dims.push(2 + trng.next_index(4));
        }
        let layers = dims
            .windows(2)
            .map(|w| LayerSpec::Dense { d_in: w[0], d_out: w[1], activation: Activation::Linear })
            .collect::<Vec<_>>();
        let sigma = 0.2 + 2.0 * trng.next_uniform();
        let spec = NetworkSpec {
            input_shape: vec![dims[0]],
            layers,
            loss: LossKind::Mse,
            nin: fc_nin(sigma, NinTopology::InputOnly),
        };
        let params = init_params(&spec, &mut trng.fork("init")).unwrap();
        let n = 8;
        let d_in = dims[0];
        let d_out = *dims.last().unwrap();
        let draw = |shape: &[usize], r: &mut RngStream| {
            let k: usize = shape.iter().product();
            Tensor::from_vec(shape, (0..k).map(|_| r.next_standard_normal()).collect()).unwrap()
        };
        let x = draw(&[n, d_in], &mut trng);
        let y = draw(&[n, d_out], &mut trng);
        min_r2 = min_r2.min(estimate_r2(&spec, &params, &x, &y, sigma).unwrap().r2);
    }
    report(
        "05 r2-exactness",
        err <= 1e-8 && min_r2 >= -1e-10,
        &format!("linear-net error {err:.3e}; min r2 over 100 random configs {min_r2:.3e}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: 1/√|B| suppression of estimate_r1.
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_r1_scaling() {
    let (w0, w1, w_ni, m) = (0.0, 1.0, 1.0, 1.0);
    let spec = NetworkSpec {
        input_shape: vec![1],
        layers: vec![
            LayerSpec::Dense { d_in: 1, d_out: 1, activation: Activation::Linear },
            LayerSpec::Dense { d_in: 1, d_out: 1, activation: Activation::Linear },
        ],
        loss: LossKind::Mse,
        nin: fc_nin(1.0, NinTopology::InputOnly),
    };
    let mut params = init_params(&spec, &mut RngStream::new(0)).unwrap();
    params.for_each_named_mut(|name, t| match name {
        "layer0.w" => t.data_mut()[0] = w0,
        "layer1.w" => t.data_mut()[0] = w1,
        "nin0.w_ni" => t.data_mut()[0] = w_ni,
        _ => {}
    });
    let dist = NoiseDistribution::normal(1.0);
    let mut rng = RngStream::new(6);
    let repeats = 100;
    let mut pts = Vec::new();
    for &b in &[100usize, 1_000, 10_000, 100_000] {
        let mut sq = 0.0;
        for _ in 0..repeats {
            let x = Tensor::from_vec(&[b, 1], (0..b).map(|_| rng.next_standard_normal()).collect())
                .unwrap();
            let y = Tensor::from_vec(&[b, 1], x.data().iter().map(|v| m * v).collect()).unwrap();
            let r1 = estimate_r1(&spec, &params, &x, &y, &dist, &mut rng).unwrap().r1;
            sq += r1 * r1;
        }
        pts.push(((b as f64).ln(), (sq / repeats as f64).sqrt().ln()));
    }
    // Least-squares slope of ln|r1| against ln|B|.
    let n = pts.len() as f64;
    let (sx, sy): (f64, f64) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let sxx: f64 = pts.iter().map(|(x, _)| (x - sx / n).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|(x, y)| (x - sx / n) * (y - sy / n)).sum();
    let slope = sxy / sxx;
    report(
        "06 r1-scaling",
        (slope + 0.5).abs() <= 0.05,
        &format!("log-log slope {slope:.4} (want -0.5 ± 0.05)"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: the σ_ε² ladder lands in the four phases, in order.
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_phase_ladder() {
    let rungs = ["fc-fmnist-decoupled", "fc-fmnist-decay", "fc-fmnist-catapult", "fc-fmnist-divergent"];
    let want = [Phase::Decoupled, Phase::Decay, Phase::Catapult, Phase::Divergent];
    let mut good = 0;
    let mut detail = String::new();
    for seed in 1..=5u64 {
        let mut labels = Vec::new();
        for name in &rungs {
            let cfg = resolve_preset(name).unwrap();
            let spec = build_network(&cfg).unwrap();
            let data = make_datasets(&cfg, 1234).unwrap();
            let tc = build_train_config(&cfg, seed).unwrap();
            let (_, trace) =
                train(&spec, &data.train, &data.eval, &tc, &RngStream::new(seed)).unwrap();
            labels.push(classify_phase(&trace, &PhaseThresholds::default()).unwrap().phase);
        }
        let ok = labels == want;
        good += ok as usize;
        detail.push_str(&format!(
            "seed {seed}: [{}]{} ",
            labels.iter().map(|p| p.as_str()).collect::<Vec<_>>().join(","),
            if ok { "" } else { " <- off" }
        ));
    }
    report("07 phase-ladder", good >= 4, &format!("{good}/5 seeds in order; {detail}"));
}

// ---------------------------------------------------------------------------
// Criterion 8: corruption identity and variance preservation.
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_corruption_identity() {
    // σ = 0 is bit-identical to clean evaluation.
    let cfg = {
        let mut c = resolve_preset("robust-fc-base").unwrap();
        c.n_train = 300;
        c.n_test = 200;
        c
    };
    let spec = build_network(&cfg).unwrap();
    let data = make_datasets(&cfg, 1234).unwrap();
    let params = init_params(&spec, &mut RngStream::new(8)).unwrap();
    let report8 =
        corruption_curve(&spec, &params, &data.test, &[0.0], 1, &RngStream::new(1)).unwrap();
    let (_, clean_acc) = evaluate(&spec, &params, &data.test).unwrap();
    let identical = report8.points[0].acc_mean.to_bits() == clean_acc.to_bits()
        && report8.points[0].acc_2std == 0.0;

    // Variance preservation of the corruption map on standardized data.
    let n = 100_000;
    let mut rng = RngStream::new(88);
    let x =
        Tensor::from_vec(&[n, 1], (0..n).map(|_| rng.next_standard_normal()).collect()).unwrap();
    let corrupted = corrupt_inputs(&x, 0.6, &mut rng).unwrap();
    let var = |t: &Tensor| {
        let mean: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t.len() as f64
    };
    let (v_in, v_out) = (var(&x), var(&corrupted));
    let var_ok = (v_out - v_in).abs() / v_in <= 0.02;
    report(
        "08 corruption-identity",
        identical && var_ok,
        &format!("sigma=0 bit-identical: {identical}; variance {v_in:.4} -> {v_out:.4}"),
    );
}

// ---------------------------------------------------------------------------
// Criteria 9–11 share one set of trained desk-scale models.
// ---------------------------------------------------------------------------

struct TrainedFamily {
    spec: NetworkSpec,
    models: Vec<Params>,
    clean_accs: Vec<f64>,
}

struct RobustnessModels {
    test: Dataset,
    base: TrainedFamily,
    ninr: TrainedFamily,
    cdt: TrainedFamily,
}

fn train_family(preset: &str, seeds: &[u64]) -> (TrainedFamily, Dataset) {
    let cfg = resolve_preset(preset).unwrap();
    let spec = build_network(&cfg).unwrap();
    let data = make_datasets(&cfg, 1234).unwrap();
    let mut models = Vec::new();
    let mut clean_accs = Vec::new();
    for &seed in seeds {
        let tc = build_train_config(&cfg, seed).unwrap();
        let (params, _) = train(&spec, &data.train, &data.eval, &tc, &RngStream::new(seed)).unwrap();
        let (_, acc) = evaluate(&spec, &params, &data.test).unwrap();
        models.push(params);
        clean_accs.push(acc);
    }
    (TrainedFamily { spec, models, clean_accs }, data.test)
}

static MODELS: Lazy<RobustnessModels> = Lazy::new(|| {
    let seeds = [1u64, 2, 3, 4, 5];
    let (base, test) = train_family("robust-fc-base", &seeds);
    let (ninr, _) = train_family("robust-fc-ninr", &seeds);
    let (cdt, _) = train_family("robust-fc-cdt", &seeds);
    RobustnessModels { test, base, ninr, cdt }
});

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn corrupted_acc(family: &TrainedFamily, test: &Dataset, sigma: f64) -> Vec<f64> {
    family
        .models
        .iter()
        .map(|params| {
            corruption_curve(&family.spec, params, test, &[sigma], 5, &RngStream::new(71))
                .unwrap()
                .points[0]
                .acc_mean
        })
        .collect()
}

#[test]
fn criterion_09_robustness_direction() {
    let m = &*MODELS;
    let base_corr = mean(&corrupted_acc(&m.base, &m.test, 0.4));
    let ninr_corr = mean(&corrupted_acc(&m.ninr, &m.test, 0.4));
    let base_clean = mean(&m.base.clean_accs);
    let ninr_clean = mean(&m.ninr.clean_accs);
    let gap = ninr_corr - base_corr;
    let clean_ok = ninr_clean >= base_clean - 0.02;
    report(
        "09 robustness-direction",
        gap >= 0.05 && clean_ok,
        &format!(
            "corrupted(0.4): base {base_corr:.4} vs nin {ninr_corr:.4} (gap {gap:+.4}); clean: base {base_clean:.4} vs nin {ninr_clean:.4}"
        ),
    );
}

#[test]
fn criterion_10_attack_consistency() {
    let m = &*MODELS;
    let family = &m.ninr;
    let params = &family.models[0];
    let delta = 0.1;
    let x = &m.test.images;
    let y = &m.test.labels;

    let f = fgsm_attack(&family.spec, params, x, y, delta, None).unwrap();
    let p1 = pgd_attack(&family.spec, params, x, y, 1, delta, None).unwrap();
    let bit_exact = f.data().iter().zip(p1.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    let acc_of = |adv: &Tensor| {
        let mut scratch = RngStream::new(0);
        let (out, _) = forward(&family.spec, params, adv, &mut scratch, Mode::Eval).unwrap();
        accuracy(&out, y).unwrap()
    };
    let acc_fgsm = acc_of(&f);
    let acc_pgd5 = acc_of(&pgd_attack(&family.spec, params, x, y, 5, delta, None).unwrap());
    report(
        "10 attack-consistency",
        bit_exact && acc_pgd5 <= acc_fgsm + 0.01,
        &format!("pgd(k=1) == fgsm: {bit_exact}; acc fgsm {acc_fgsm:.4}, pgd(k=5) {acc_pgd5:.4}"),
    );
}

#[test]
fn criterion_11_cdt_contrast() {
    let m = &*MODELS;
    let cdt_clean = mean(&m.cdt.clean_accs);
    let ninr_clean = mean(&m.ninr.clean_accs);
    report(
        "11 cdt-contrast",
        cdt_clean < ninr_clean,
        &format!("clean accuracy: cdt-trained {cdt_clean:.4} < nin-trained {ninr_clean:.4}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 12: byte-identical reruns from the manifest.
// ---------------------------------------------------------------------------

#[test]
fn criterion_12_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = resolve_preset("robust-fc-base").unwrap();
    cfg.n_train = 300;
    cfg.n_test = 100;
    cfg.epochs = 3;
    cfg.seeds = vec![7];
    cfg.threads = 1;

    let run = |out: &str| {
        let mut c = cfg.clone();
        c.out_dir = tmp.path().join(out).to_string_lossy().into_owned();
        ninlab::runner::cmd_train(&c).unwrap()
    };
    let m1 = run("a");
    let _ = run("b");

    // Third run straight from the first run's manifest snapshot.
    let mut replay = RunManifest::load(&m1).unwrap().config;
    replay.out_dir = tmp.path().join("c").to_string_lossy().into_owned();
    ninlab::runner::cmd_train(&replay).unwrap();

    let bytes = |dir: &str, file: &str| {
        std::fs::read(tmp.path().join(dir).join("robust-fc-base").join(file)).unwrap()
    };
    let mut same = true;
    for file in ["trace_seed7.csv", "checkpoint_seed7.json"] {
        let a = bytes("a", file);
        same &= a == bytes("b", file) && a == bytes("c", file);
    }
    report("12 determinism", same, "rerun and manifest-replay outputs byte-identical");
}
