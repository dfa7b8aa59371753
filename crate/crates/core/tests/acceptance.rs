//! Acceptance checks. Each test prints one `PASS`/`FAIL` line to stdout
//! (bypassing the harness capture) before asserting.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use texfv::autoencoder::{AutoencoderConfig, AutoencoderModel};
use texfv::classifier::{bhattacharyya, phi_transform};
use texfv::features::{LocalDescriptorSet, PcaModel, Reduction, TapConfig, DescriptorReducer};
use texfv::fisher::{encode, fuse, l2_normalize, power_normalize, FisherVector, Variant};
use texfv::gmm::{fit_em, EmConfig, GaussianMixture};
use texfv::io::tfv::{self, Record};
use texfv::io::Bundle;
use texfv::classifier::LinearSvmModel;
use texfv::pipeline::synthetic::{generate, SyntheticSpec};
use texfv::pipeline::{make_splits, run_on_dataset, ColorMode, NoObserver, PipelineConfig, SplitKind, SplitProtocol};
use texfv::tensor::{conv2d, mse, ConvSpec, Tensor};

fn criterion(n: u32, name: &str, check: impl FnOnce()) {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(check));
    let status = if outcome.is_ok() { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n:>2} {status}  {name} ({:.1?})", start.elapsed());
    let _ = out.flush();
    drop(out);
    if let Err(e) = outcome {
        std::panic::resume_unwind(e);
    }
}

fn within(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= rel * b.abs() + abs
}

fn random_mixture(rng: &mut ChaCha8Rng, k: usize, d: usize) -> GaussianMixture {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let s: f64 = raw.iter().sum();
    GaussianMixture::new(
        raw.iter().map(|w| w / s).collect(),
        (0..k * d).map(|_| rng.random_range(-1.5..1.5)).collect(),
        (0..k * d).map(|_| rng.random_range(0.4..2.0)).collect(),
    )
    .unwrap()
}

fn random_rows(rng: &mut ChaCha8Rng, t: usize, d: usize, spread: f32) -> LocalDescriptorSet {
    let rows: Vec<Vec<f32>> = (0..t).map(|_| (0..d).map(|_| rng.random_range(-spread..spread)).collect()).collect();
    LocalDescriptorSet::from_rows(&rows).unwrap()
}

/// Central differences of the log-likelihood scaled by the diagonal Fisher
/// normaliser. Weights are perturbed through softmax logits, deviations as
/// standard deviations.
fn fd_fisher(gmm: &GaussianMixture, x: &LocalDescriptorSet, h: f64) -> Vec<f64> {
    let (k, d, t) = (gmm.components(), gmm.dim(), x.len() as f64);
    let alpha: Vec<f64> = gmm.weights().iter().map(|w| w.ln()).collect();
    let mu = gmm.means().to_vec();
    let sd: Vec<f64> = gmm.variances().iter().map(|v| v.sqrt()).collect();
    let ll = |a: &[f64], m: &[f64], s: &[f64]| {
        let z: f64 = a.iter().map(|v| v.exp()).sum();
        let g = GaussianMixture::new(
            a.iter().map(|v| v.exp() / z).collect(),
            m.to_vec(),
            s.iter().map(|v| v * v).collect(),
        )
        .unwrap();
        g.log_likelihood(x).unwrap()
    };
    let bump = |v: &[f64], i: usize, e: f64| {
        let mut c = v.to_vec();
        c[i] += e;
        c
    };
    let mut out = vec![0.0; k * (2 * d + 1)];
    for i in 0..k {
        let w = gmm.weights()[i];
        out[i] = (ll(&bump(&alpha, i, h), &mu, &sd) - ll(&bump(&alpha, i, -h), &mu, &sd)) / (2.0 * h) / (t * w.sqrt());
        for j in 0..d {
            let p = i * d + j;
            let dmu = (ll(&alpha, &bump(&mu, p, h), &sd) - ll(&alpha, &bump(&mu, p, -h), &sd)) / (2.0 * h);
            let dsd = (ll(&alpha, &mu, &bump(&sd, p, h)) - ll(&alpha, &mu, &bump(&sd, p, -h))) / (2.0 * h);
            out[k + p] = sd[p] / (t * w.sqrt()) * dmu;
            out[k + k * d + p] = sd[p] / (t * (2.0 * w).sqrt()) * dsd;
        }
    }
    out
}

#[test]
fn c01_fisher_vector_matches_gradient_oracle() {
    criterion(1, "FV equals scaled finite-difference gradient (50 instances)", || {
        let start = Instant::now();
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let k = rng.random_range(1..=4);
            let d = rng.random_range(1..=3);
            let t = rng.random_range(1..=50);
            let gmm = random_mixture(&mut rng, k, d);
            let x = random_rows(&mut rng, t, d, 2.5);
            let fv = encode(&gmm, &x).unwrap();
            let oracle = fd_fisher(&gmm, &x, 1e-4);
            assert_eq!(fv.len(), oracle.len());
            for (i, (a, b)) in fv.values.iter().zip(&oracle).enumerate() {
                assert!(within(*a, *b, 1e-3, 0.0), "seed {seed} entry {i}: {a} vs {b}");
            }
        }
        assert!(start.elapsed() < Duration::from_secs(30), "took {:?}", start.elapsed());
    });
}

#[test]
fn c02_em_is_monotone_and_recovers_planted_mixture() {
    criterion(2, "EM monotone on 100 runs; planted 2-component mixture recovered within 10%", || {
        let start = Instant::now();
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.random_range(1..=5);
            let d = rng.random_range(1..=3);
            let t = rng.random_range(60..=300);
            let truth = random_mixture(&mut rng, k, d);
            let rows: Vec<Vec<f32>> = (0..t)
                .map(|_| {
                    let c = rng.random_range(0..k);
                    (0..d)
                        .map(|j| {
                            let z: f64 = rng.sample(StandardNormal);
                            (truth.mean(c)[j] * 3.0 + z * truth.variance(c)[j].sqrt()) as f32
                        })
                        .collect()
                })
                .collect();
            let x = LocalDescriptorSet::from_rows(&rows).unwrap();
            let fit = fit_em(&x, &EmConfig { components: k, seed, ..Default::default() }).unwrap();
            for (i, w) in fit.loglik_history.windows(2).enumerate() {
                assert!(w[1] >= w[0] - 1e-9, "seed {seed} iteration {i}: {} -> {}", w[0], w[1]);
            }
        }

        let weights = [0.3, 0.7];
        let means = [[-4.0, 2.0], [3.0, 6.0]];
        let vars = [[1.0, 0.5], [2.0, 1.5]];
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let rows: Vec<Vec<f32>> = (0..5000)
            .map(|_| {
                let c = usize::from(rng.random::<f64>() >= weights[0]);
                (0..2)
                    .map(|j| {
                        let z: f64 = rng.sample(StandardNormal);
                        (means[c][j] + z * f64::sqrt(vars[c][j])) as f32
                    })
                    .collect()
            })
            .collect();
        let x = LocalDescriptorSet::from_rows(&rows).unwrap();
        let g = fit_em(&x, &EmConfig { components: 2, seed: 3, ..Default::default() }).unwrap().mixture;
        let order = if (g.mean(0)[0] - means[0][0]).abs() < (g.mean(1)[0] - means[0][0]).abs() { [0, 1] } else { [1, 0] };
        for (c, &i) in order.iter().enumerate() {
            assert!(within(g.weights()[i], weights[c], 0.1, 0.0), "weight {c}: {}", g.weights()[i]);
            for j in 0..2 {
                assert!(within(g.mean(i)[j], means[c][j], 0.1, 0.0), "mean {c},{j}: {}", g.mean(i)[j]);
                assert!(within(g.variance(i)[j], vars[c][j], 0.1, 0.0), "variance {c},{j}: {}", g.variance(i)[j]);
            }
        }
        assert!(start.elapsed() < Duration::from_secs(60), "took {:?}", start.elapsed());
    });
}

#[test]
fn c03_kernel_identity() {
    criterion(3, "dot(phi(x), phi(y)) equals the Bhattacharyya kernel on 1000 pairs", || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in 0..1000 {
            let n = rng.random_range(1..=512);
            let scale = 10f64.powi(rng.random_range(-3..=3));
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
            let k = bhattacharyya(&x, &y).unwrap();
            let dot = phi_transform(&x).dot(&phi_transform(&y));
            assert!((dot - k).abs() <= 1e-10, "pair {p}: {dot} vs {k}");
        }
    });
}

fn naive_conv(x: &Tensor, k: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Vec<f32> {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let m = spec.kernel_size;
    let ho = (h + 2 * spec.padding - m) / spec.stride + 1;
    let wo = (w + 2 * spec.padding - m) / spec.stride + 1;
    let mut out = vec![0.0f32; spec.out_channels * ho * wo];
    for o in 0..spec.out_channels {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = b.map_or(0.0, |b| b.data()[o] as f64);
                for c in 0..c_in {
                    for a in 0..m {
                        for bb in 0..m {
                            let y = (i * spec.stride + a) as isize - spec.padding as isize;
                            let z = (j * spec.stride + bb) as isize - spec.padding as isize;
                            if y < 0 || z < 0 || y >= h as isize || z >= w as isize {
                                continue;
                            }
                            let xv = x.data()[(c * h + y as usize) * w + z as usize] as f64;
                            let kv = k.data()[((o * c_in + c) * m + a) * m + bb] as f64;
                            acc += xv * kv;
                        }
                    }
                }
                out[(o * ho + i) * wo + j] = acc as f32;
            }
        }
    }
    out
}

#[test]
fn c04_convolution_matches_naive_loops() {
    criterion(4, "conv2d equals the naive loop reference on 100 random shapes", || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut done = 0;
        while done < 100 {
            let c_in = rng.random_range(1..=8);
            let c_out = rng.random_range(1..=8);
            let h = rng.random_range(1..=16);
            let w = rng.random_range(1..=16);
            let m = rng.random_range(1..=5);
            let stride = rng.random_range(1..=2);
            let padding = rng.random_range(0..=2);
            if h + 2 * padding < m || w + 2 * padding < m {
                continue;
            }
            let spec = ConvSpec { kernel_size: m, stride, padding, in_channels: c_in, out_channels: c_out };
            let x = Tensor::new(vec![c_in, h, w], (0..c_in * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let k = Tensor::new(vec![c_out, c_in, m, m], (0..c_out * c_in * m * m).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
            let b = Tensor::from_vec((0..c_out).map(|_| rng.random_range(-1.0..1.0)).collect());
            let bias = if rng.random::<bool>() { Some(&b) } else { None };
            let got = conv2d(&x, &k, bias, &spec).unwrap();
            let expect = naive_conv(&x, &k, bias, &spec);
            assert_eq!(got.len(), expect.len());
            for (a, e) in got.data().iter().zip(&expect) {
                assert!((a - e).abs() <= 1e-5, "{spec:?}: {a} vs {e}");
            }
            done += 1;
        }
    });
}

fn nudged(model: &AutoencoderModel, p: usize, e: usize, h: f32) -> (AutoencoderModel, AutoencoderModel) {
    let mut plus = model.clone();
    plus.params_mut()[p].data_mut()[e] += h;
    let mut minus = model.clone();
    minus.params_mut()[p].data_mut()[e] -= h;
    (plus, minus)
}

fn each_perturbation(model: &AutoencoderModel, h: f32, ok: impl Fn(&AutoencoderModel) -> bool) -> bool {
    (0..model.params().len()).all(|p| {
        (0..model.params()[p].len()).all(|e| {
            let (plus, minus) = nudged(model, p, e, h);
            ok(&plus) && ok(&minus)
        })
    })
}

/// Forward pass assembled from the public tensor operations. Also returns
/// every ReLU sign and max-pool choice.
fn reference_forward(m: &AutoencoderModel, x: &Tensor) -> (Tensor, Vec<u32>) {
    use texfv::autoencoder::{Conv, DoubleConv};
    use texfv::tensor::{concat_channels, maxpool2, relu, upsample2};
    let mut pattern = Vec::new();
    let conv = |c: &Conv, x: &Tensor| conv2d(x, &c.weight, c.bias.as_ref(), &c.spec).unwrap();
    let act = |pre: Tensor, pattern: &mut Vec<u32>| {
        pattern.extend(pre.data().iter().map(|&v| u32::from(v > 0.0)));
        relu(&pre)
    };
    let double = |b: &DoubleConv, x: &Tensor, pattern: &mut Vec<u32>| {
        let a = act(conv(&b.first, x), pattern);
        act(conv(&b.second, &a), pattern)
    };
    let mut skips = Vec::new();
    let mut cur = x.clone();
    for block in &m.encoder {
        let e = double(block, &cur, &mut pattern);
        let (pooled, idx) = maxpool2(&e).unwrap();
        pattern.extend(&idx.argmax);
        skips.push(e);
        cur = pooled;
    }
    cur = double(&m.bottleneck, &cur, &mut pattern);
    for block in &m.decoder {
        let up = conv(&block.up, &upsample2(&cur).unwrap());
        let merged = concat_channels(&skips.pop().unwrap(), &up).unwrap();
        cur = double(&block.convs, &merged, &mut pattern);
    }
    (conv(&m.head, &cur), pattern)
}

#[test]
fn c05_autoencoder_gradients_and_training() {
    criterion(5, "autoencoder gradients match finite differences; training halves MSE in 30 epochs", || {
        let start = Instant::now();
        let h = 1e-3f32;
        let cfg = AutoencoderConfig { in_channels: 2, levels: 1, base_channels: 2, seed: 5, ..Default::default() };
        let base = AutoencoderModel::new(cfg).unwrap();
        let names = base.param_names();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::new(vec![2, 8, 8], (0..128).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();

        // Draw biases until no single ±h step moves any ReLU or max-pool
        // decision, so the central difference sees a smooth loss.
        let mut draws = 0;
        let model = loop {
            draws += 1;
            assert!(draws <= 2000, "no kink-free test point found");
            let mut model = base.clone();
            for (p, name) in model.params_mut().into_iter().zip(&names) {
                if name.contains(".b") {
                    p.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
                }
            }
            let (_, pattern) = reference_forward(&model, &x);
            if each_perturbation(&model, h, |m| reference_forward(m, &x).1 == pattern) {
                break model;
            }
        };
        let (reference, _) = reference_forward(&model, &x);
        let out = model.forward(&x).unwrap().reconstruction;
        for (a, b) in out.data().iter().zip(reference.data()) {
            assert!((a - b).abs() <= 1e-6, "forward pass {a} vs reference {b}");
        }

        let loss = |m: &AutoencoderModel| mse(&m.forward(&x).unwrap().reconstruction, &x).unwrap();
        let (_, grads) = model.loss_and_gradients(&x, &x).unwrap();
        let mut checked = 0;
        for (p, name) in names.iter().enumerate() {
            for e in 0..model.params()[p].len() {
                let (plus, minus) = nudged(&model, p, e, h);
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h as f64);
                let an = grads.params()[p].data()[e] as f64;
                let tol = f64::max(1e-2 * an.abs().max(fd.abs()), 1e-4);
                assert!((an - fd).abs() <= tol, "{name}[{e}]: analytic {an} vs numeric {fd}");
                checked += 1;
            }
        }
        assert_eq!(checked, model.param_count());

        let ds = generate(&SyntheticSpec { per_class: 5, size: 32, seed: 11, ..Default::default() }).unwrap();
        let images: Vec<Tensor> = ds.records.iter().map(|r| r.image.clone()).collect();
        assert_eq!(images.len(), 20);
        let cfg = AutoencoderConfig { in_channels: 1, epochs: 30, seed: 5, ..Default::default() };
        let mut model = AutoencoderModel::new(cfg).unwrap();
        let eval = |m: &AutoencoderModel| {
            images.iter().map(|i| mse(&m.forward(i).unwrap().reconstruction, i).unwrap()).sum::<f64>() / images.len() as f64
        };
        let before = eval(&model);
        let report = model.train(&images).unwrap();
        let after = eval(&model);
        assert_eq!(report.loss_history.len(), 30);
        assert!(report.loss_history[..5].windows(2).all(|w| w[1] < w[0]), "{:?}", &report.loss_history[..5]);
        assert!(after <= 0.5 * before, "MSE {before} -> {after}");
        assert!(start.elapsed() < Duration::from_secs(120), "took {:?}", start.elapsed());
    });
}

#[test]
fn c06_normalization_contract() {
    criterion(6, "power + L2 normalisation gives unit norm; zero passes through", || {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for i in 0..1000 {
            let n = rng.random_range(1..=1000);
            let scale = 10f64.powi(rng.random_range(-6..=6));
            let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
            if v.iter().all(|&x| x == 0.0) {
                v[0] = scale;
            }
            let out = l2_normalize(&power_normalize(&v));
            let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-10, "input {i}: norm {norm}");
        }
        let zero = vec![0.0; 17];
        assert_eq!(l2_normalize(&power_normalize(&zero)), zero);
        let fv = FisherVector { values: zero.clone(), components: 1, dim: 8 };
        assert_eq!(fv.normalized().values, zero);
    });
}

fn synthetic_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.dataset.color = ColorMode::Gray;
    cfg.dataset.resize_width = 64;
    cfg.variant = Variant::FvAe;
    cfg.protocol = SplitProtocol { kind: SplitKind::HalfRandom, rounds: 5, seed: 7, split_dir: None };
    cfg.autoencoder = AutoencoderConfig { in_channels: 1, levels: 2, base_channels: 8, epochs: 5, seed: 7, ..Default::default() };
    cfg.taps = TapConfig::deepest(2, Reduction::Pca, 8);
    cfg.em = EmConfig { components: 4, seed: 7, ..Default::default() };
    cfg.svm.seed = 7;
    cfg
}

#[test]
fn c07_end_to_end_synthetic_benchmark() {
    criterion(7, "synthetic 4-class corpus, FVAE, K=4, 5 half-random rounds: accuracy >= 0.90, bitwise reruns", || {
        let ds = generate(&SyntheticSpec { per_class: 40, size: 64, seed: 7, ..Default::default() }).unwrap();
        assert_eq!(ds.len(), 160);
        let cfg = synthetic_config();
        let start = Instant::now();
        let (report, bundle) = run_on_dataset(&cfg, &ds, &NoObserver).unwrap();
        let elapsed = start.elapsed();
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "    {} in {elapsed:.1?}", report.summary());
        drop(out);
        assert!(elapsed < Duration::from_secs(600), "took {elapsed:?}");
        assert_eq!(report.rounds.len(), 5);
        assert!(report.accuracy.mean >= 0.90, "accuracy {}", report.accuracy.mean);
        let (again, bundle2) = run_on_dataset(&cfg, &ds, &NoObserver).unwrap();
        assert_eq!(report.to_tsv(), again.to_tsv());
        for (a, b) in report.rounds.iter().zip(&again.rounds) {
            assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
            assert_eq!(a.f1.to_bits(), b.f1.to_bits());
        }
        assert_eq!(bundle.to_bytes().unwrap(), bundle2.to_bytes().unwrap());
    });
}

#[test]
fn c08_descriptor_lengths() {
    criterion(8, "FV length K(2D+1) including K=16; FVAE = FV + SSL", || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for k in [1, 2, 3, 4, 8, 16] {
            for d in [1, 2, 3, 8, 64] {
                let gmm = random_mixture(&mut rng, k, d);
                let x = random_rows(&mut rng, 20, d, 2.0);
                let fv = encode(&gmm, &x).unwrap().normalized();
                assert_eq!(fv.len(), k * (2 * d + 1), "K={k} D={d}");
                for ssl_len in [8usize, 128] {
                    let ssl = vec![0.25f32; ssl_len];
                    let fused = fuse(&fv, Some(&ssl), None, Variant::FvAe).unwrap();
                    assert_eq!(fused.len(), fv.len() + ssl_len);
                }
            }
        }
        let fv = FisherVector { values: vec![0.0; 16 * (2 * 4 + 1)], components: 16, dim: 4 };
        assert_eq!(fv.len(), 144);
        assert_eq!(fuse(&fv, Some(&[1.0; 128]), None, Variant::FvAe).unwrap().len(), 272);
    });
}

#[test]
fn c09_protocol_fidelity() {
    criterion(9, "sample holdout: 4 groups give 4 rounds, each tested once; half-random is 50/50 per class", || {
        let ds = generate(&SyntheticSpec { per_class: 12, size: 8, groups: 4, seed: 9, ..Default::default() }).unwrap();
        let holdout = SplitProtocol { kind: SplitKind::SampleHoldout, rounds: 10, seed: 0, split_dir: None };
        let splits = make_splits(&ds, &holdout).unwrap();
        assert_eq!(splits.len(), 4);
        let mut tested = std::collections::BTreeMap::new();
        for s in &splits {
            let groups: std::collections::BTreeSet<_> = s.test.iter().map(|&i| ds.records[i].group.clone().unwrap()).collect();
            assert_eq!(groups.len(), 1);
            *tested.entry(groups.into_iter().next().unwrap()).or_insert(0) += 1;
            assert!(s.train.iter().all(|&i| !s.test.contains(&i)));
            assert_eq!(s.train.len() + s.test.len(), ds.len());
        }
        assert_eq!(tested.len(), 4);
        assert!(tested.values().all(|&n| n == 1));

        let half = SplitProtocol { kind: SplitKind::HalfRandom, rounds: 10, seed: 1, split_dir: None };
        let splits = make_splits(&ds, &half).unwrap();
        assert_eq!(splits.len(), 10);
        for s in &splits {
            for c in 0..4u32 {
                let tr = s.train.iter().filter(|&&i| ds.records[i].label == c).count();
                let te = s.test.iter().filter(|&&i| ds.records[i].label == c).count();
                assert_eq!((tr, te), (6, 6));
            }
        }
        assert_ne!(splits[0], splits[1]);
    });
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| f32::from_bits(rng.random::<u32>())).collect()).unwrap()
}

fn finite_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| f32::from_bits(rng.random::<u32>() & 0xff7f_ffff)).collect();
    Tensor::new(shape, data).unwrap()
}

fn random_bundle(rng: &mut ChaCha8Rng) -> Bundle {
    let cfg = AutoencoderConfig {
        in_channels: rng.random_range(1..=3),
        levels: rng.random_range(1..=2),
        base_channels: rng.random_range(1..=3),
        denoising: rng.random(),
        noise_sigma: rng.random(),
        learning_rate: rng.random(),
        epochs: rng.random_range(0..100),
        batch_size: rng.random_range(1..16),
        seed: rng.random(),
        ..Default::default()
    };
    let mut ae = AutoencoderModel::new(cfg).unwrap();
    for p in ae.params_mut() {
        for v in p.data_mut() {
            *v = f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff) * if rng.random() { 1.0 } else { -1.0 };
        }
    }
    let d_in = rng.random_range(1..6);
    let d = rng.random_range(1..=d_in);
    let pca = PcaModel {
        mean: (0..d_in).map(|_| rng.random()).collect(),
        components: finite_tensor(rng, vec![d_in, d]),
        explained_variance: (0..d).map(|_| rng.random()).collect(),
    };
    let k = rng.random_range(1..5);
    let dim = rng.random_range(1..4);
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let gmm = GaussianMixture::new(
        raw.iter().map(|w| w / s).collect(),
        (0..k * dim).map(|_| rng.sample::<f64, _>(StandardNormal) * 1e-200).collect(),
        (0..k * dim).map(|_| rng.random_range(1e-4..1e30)).collect(),
    )
    .unwrap();
    let classes = rng.random_range(2..5);
    let sdim = rng.random_range(0..4);
    let svm = LinearSvmModel::new(
        (0..classes as u32).map(|c| c * 3).collect(),
        (0..classes * sdim).map(|i| if i % 3 == 0 { -0.0 } else { rng.sample(StandardNormal) }).collect(),
        (0..classes).map(|_| rng.random_range(-1e-300..1e-300)).collect(),
        rng.random_range(0.01..10.0),
    )
    .unwrap();
    let mut b = Bundle {
        autoencoder: Some(ae),
        reducer: Some(DescriptorReducer {
            config: TapConfig { taps: vec![0, 1, 7], reduction: Reduction::MaxPool, target_dim: d },
            pcas: vec![(1, pca)],
        }),
        gmm: Some(gmm),
        svm: Some(svm),
        variant: Some([Variant::Fv, Variant::FvFc, Variant::FvAe, Variant::FcFvAe][rng.random_range(0..4)]),
        class_names: vec!["a".into(), "βeta".into(), String::new()],
    };
    // Drop a random subset of stages.
    if rng.random_bool(0.3) {
        b.svm = None;
    }
    if rng.random_bool(0.3) {
        b.gmm = None;
    }
    if rng.random_bool(0.3) {
        b.autoencoder = None;
    }
    if rng.random_bool(0.3) {
        b.class_names.clear();
    }
    b
}

#[test]
fn c10_serialization_round_trips() {
    criterion(10, "TFV1 and bundle formats round-trip bit-exactly", || {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..200 {
            let n = rng.random_range(0..6);
            let mut records: Vec<Record> = (0..n)
                .map(|_| {
                    let rank = rng.random_range(0..4);
                    let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(0..5)).collect();
                    Record::new(rng.random(), random_tensor(&mut rng, shape))
                })
                .collect();
            records.push(Record::new(0, Tensor::new(vec![0], vec![]).unwrap()));
            records.push(Record::new(1, Tensor::new(vec![1], vec![f32::from_bits(rng.random())]).unwrap()));
            records.push(Record::new(2, Tensor::new(vec![], vec![-0.0]).unwrap()));
            let bytes = tfv::encode(&records);
            let back = tfv::decode(&bytes).unwrap();
            assert_eq!(back.len(), records.len());
            for (a, b) in records.iter().zip(&back) {
                assert_eq!(a.tap, b.tap);
                assert_eq!(a.array.shape(), b.array.shape());
                let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&a.array), bits(&b.array));
            }
            assert_eq!(tfv::encode(&back), bytes);
        }
        assert!(tfv::decode(&tfv::encode(&[])).unwrap().is_empty());

        for _ in 0..50 {
            let bundle = random_bundle(&mut rng);
            let bytes = bundle.to_bytes().unwrap();
            let back = Bundle::from_bytes(&bytes).unwrap();
            assert_eq!(back, bundle);
            assert_eq!(back.to_bytes().unwrap(), bytes);
            if let (Some(a), Some(b)) = (&back.svm, &bundle.svm) {
                for (x, y) in a.weights.iter().chain(&a.biases).zip(b.weights.iter().chain(&b.biases)) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
            if let (Some(a), Some(b)) = (&back.gmm, &bundle.gmm) {
                for (x, y) in a.means().iter().chain(a.variances()).zip(b.means().iter().chain(b.variances())) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
        let empty = Bundle::default();
        assert_eq!(Bundle::from_bytes(&empty.to_bytes().unwrap()).unwrap(), empty);
    });
}
