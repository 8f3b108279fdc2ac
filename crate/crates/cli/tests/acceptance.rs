//! Acceptance criteria. Each prints one PASS/FAIL line; the process exits
//! non-zero when any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::Rng;

use brainage_core::analysis::{
    assign_folds, sensitivity_change_matrix, sensitivity_pca, tsne_embed, AgePredictor,
    AnalysisError, ChangeMatrix, TsneConfig,
};
use brainage_core::baselines::{fit_lasso, flatten_fc, lambda_max};
use brainage_core::cnn::{AgeCnn, NetworkConfig};
use brainage_core::fc::{fc_image, inter_icn_fc, FcOrder};
use brainage_core::icn::{nmf_group, NmfParams};
use brainage_core::ops::*;
use brainage_core::pipeline::{
    icn_features, results_table, run_experiment, FeatureKind, FoldFeatures, FoldInput, ModelKind,
    PipelineConfig,
};
use brainage_core::synth::{generate_subject, subject_id, Anatomy};
use brainage_core::{rng, FcImage, IcnSet, Mask, Real, Tensor, Volume4D};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn uniform<T: Real>(shape: &[usize], seed: u64, stream: u64) -> Tensor<T> {
    let mut r = rng::stream(seed, stream);
    Tensor::from_fn(shape, |_| T::of(r.random::<f64>() * 2.0 - 1.0))
}

// ---------------------------------------------------------------- 1

fn numeric(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
    const H: f64 = 1e-6;
    (0..x.len())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += H;
            let mut m = x.clone();
            m.data_mut()[i] -= H;
            (f(&p) - f(&m)) / (2.0 * H)
        })
        .collect()
}

/// `max |a - n|` over the larger max-norm of the two.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

fn probe(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

struct GradLog {
    worst: f64,
    failures: Vec<String>,
}

impl GradLog {
    fn record(&mut self, name: &str, analytic: &[f64], numeric: &[f64]) {
        let e = rel_err(analytic, numeric);
        self.worst = self.worst.max(e);
        if !(e < 1e-5) {
            self.failures.push(format!("{name} {e:.2e}"));
        }
    }
}

fn layer_gradients(log: &mut GradLog) {
    // conv3d
    let x: Tensor<f64> = uniform(&[2, 2, 3, 4, 3], 1, 0);
    let w: Tensor<f64> = uniform(&[3, 2, 3, 3, 3], 2, 0);
    let b: Tensor<f64> = uniform(&[3], 3, 0);
    let conv = LayerParams::new(w.clone(), Some(b.clone()));
    let y = conv3d_forward(&x, &conv).unwrap();
    let r: Tensor<f64> = uniform(y.shape(), 4, 0);
    let g = conv3d_backward(&x, &conv, &r).unwrap();
    let n = numeric(&x, |x| probe(&conv3d_forward(x, &conv).unwrap(), &r));
    log.record("conv3d input", g.input.data(), &n);
    let n = numeric(&w, |w| {
        probe(
            &conv3d_forward(&x, &LayerParams::new(w.clone(), Some(b.clone()))).unwrap(),
            &r,
        )
    });
    log.record("conv3d weights", g.weights.data(), &n);
    let n = numeric(&b, |b| {
        probe(
            &conv3d_forward(&x, &LayerParams::new(w.clone(), Some(b.clone()))).unwrap(),
            &r,
        )
    });
    log.record("conv3d bias", g.bias.data(), &n);

    // batch norm, training mode
    let x: Tensor<f64> = uniform(&[2, 2, 2, 2, 2], 5, 0);
    let mut base = LayerParams::<f64>::batchnorm(2);
    base.weights = uniform(&[2], 6, 0);
    base.bias = Some(uniform(&[2], 7, 0));
    let run = |x: &Tensor<f64>, p: &LayerParams<f64>| {
        let mut p = p.clone();
        batchnorm_forward(x, &mut p, Mode::Train).unwrap().0
    };
    let mut bn = base.clone();
    let (y, cache) = batchnorm_forward(&x, &mut bn, Mode::Train).unwrap();
    let r: Tensor<f64> = uniform(y.shape(), 8, 0);
    bn.zero_grad();
    let gx = batchnorm_backward(&r, &mut bn, &cache).unwrap();
    log.record(
        "bn input",
        gx.data(),
        &numeric(&x, |x| probe(&run(x, &base), &r)),
    );
    let n = numeric(&base.weights, |g| {
        let mut p = base.clone();
        p.weights = g.clone();
        probe(&run(&x, &p), &r)
    });
    log.record("bn gamma", bn.grad_weights.data(), &n);
    let n = numeric(base.bias.as_ref().unwrap(), |b| {
        let mut p = base.clone();
        p.bias = Some(b.clone());
        probe(&run(&x, &p), &r)
    });
    log.record("bn beta", bn.grad_bias.as_ref().unwrap().data(), &n);

    // ReLU and dropout with a fixed mask, on inputs away from the kink
    let mut rr = rng::stream(9, 0);
    let x = Tensor::<f64>::from_fn(&[2, 3, 2, 2, 3], |_| {
        let m = 0.2 + 0.8 * rr.random::<f64>();
        if rr.random::<bool>() {
            m
        } else {
            -m
        }
    });
    let r: Tensor<f64> = uniform(x.shape(), 10, 0);
    let n = numeric(&x, |x| probe(&relu(x), &r));
    log.record("relu", relu_backward(&x, &r).unwrap().data(), &n);
    let mask = dropout_mask::<f64>(x.shape(), 0.5, 11, 0);
    let n = numeric(&x, |x| probe(&dropout_forward(x, &mask).unwrap(), &r));
    log.record("dropout", dropout_backward(&r, &mask).unwrap().data(), &n);

    // max pooling on pairwise-distinct inputs
    let len = 2 * 2 * 3 * 4 * 5;
    let mut order: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        order.swap(i, rr.random_range(0..=i));
    }
    let x = Tensor::<f64>::from_fn(&[2, 2, 3, 4, 5], |i| order[i] as f64 * 0.05);
    let (y, cache) = maxpool3d(&x).unwrap();
    let r: Tensor<f64> = uniform(y.shape(), 12, 0);
    let n = numeric(&x, |x| probe(&maxpool3d(x).unwrap().0, &r));
    log.record(
        "maxpool",
        maxpool3d_backward(&r, &cache).unwrap().data(),
        &n,
    );

    // fully connected
    let x: Tensor<f64> = uniform(&[3, 5], 13, 0);
    let w: Tensor<f64> = uniform(&[4, 5], 14, 0);
    let b: Tensor<f64> = uniform(&[4], 15, 0);
    let fc = LayerParams::new(w.clone(), Some(b.clone()));
    let y = fully_connected(&x, &fc).unwrap();
    let r: Tensor<f64> = uniform(y.shape(), 16, 0);
    let g = fully_connected_backward(&x, &fc, &r).unwrap();
    log.record(
        "fc input",
        g.input.data(),
        &numeric(&x, |x| probe(&fully_connected(x, &fc).unwrap(), &r)),
    );
    let n = numeric(&w, |w| {
        probe(
            &fully_connected(&x, &LayerParams::new(w.clone(), Some(b.clone()))).unwrap(),
            &r,
        )
    });
    log.record("fc weights", g.weights.data(), &n);
    let n = numeric(&b, |b| {
        probe(
            &fully_connected(&x, &LayerParams::new(w.clone(), Some(b.clone()))).unwrap(),
            &r,
        )
    });
    log.record("fc bias", g.bias.data(), &n);

    // Euclidean loss
    let pred: Tensor<f64> = uniform(&[6], 17, 0);
    let target: Vec<f64> = (0..6).map(|i| i as f64 * 0.3).collect();
    let (_, g) = euclidean_loss(pred.data(), &target).unwrap();
    let n = numeric(&pred, |p| euclidean_loss(p.data(), &target).unwrap().0);
    log.record("euclidean loss", &g, &n);
}

fn set_param(net: &mut AgeCnn<f64>, layer: usize, bias: bool, j: usize, value: f64) -> f64 {
    let p = net.layers_mut().swap_remove(layer);
    let t = if bias {
        p.bias.as_mut().expect("bias")
    } else {
        &mut p.weights
    };
    std::mem::replace(&mut t.data_mut()[j], value)
}

fn network_gradients(log: &mut GradLog, filters: [usize; 3]) {
    let cfg = NetworkConfig {
        in_channels: 2,
        conv1_filters: 4,
        resblock_filters: filters,
        fc1_units: 8,
        dropout_p: 0.5,
        input_grid: [8, 8, 8],
        pool_stages: 2,
        init_seed: 3,
    };
    let mut net = AgeCnn::<f64>::new(&cfg).unwrap();
    let x: Tensor<f64> = uniform(&net.input_shape(2), 18, 0);
    let target = [0.7, -1.3];
    let loss = |net: &AgeCnn<f64>| {
        let fwd = net.forward(&x, Mode::Train, 17).unwrap();
        euclidean_loss(&fwd.output, &target).unwrap().0
    };
    let fwd = net.forward(&x, Mode::Train, 17).unwrap();
    let (_, grad) = euclidean_loss(&fwd.output, &target).unwrap();
    net.zero_grad();
    net.backward(&fwd, &grad).unwrap();
    let layers: Vec<(String, Vec<f64>, Option<Vec<f64>>)> = net
        .layers()
        .iter()
        .map(|(name, p)| {
            (
                name.clone(),
                p.grad_weights.data().to_vec(),
                p.grad_bias.as_ref().map(|g| g.data().to_vec()),
            )
        })
        .collect();
    const H: f64 = 1e-6;
    for (li, (name, gw, gb)) in layers.iter().enumerate() {
        for (bias, analytic) in [(false, Some(gw)), (true, gb.as_ref())] {
            let Some(analytic) = analytic else { continue };
            let n: Vec<f64> = (0..analytic.len())
                .map(|j| {
                    let orig = set_param(&mut net, li, bias, j, 0.0);
                    set_param(&mut net, li, bias, j, orig + H);
                    let up = loss(&net);
                    set_param(&mut net, li, bias, j, orig - H);
                    let down = loss(&net);
                    set_param(&mut net, li, bias, j, orig);
                    (up - down) / (2.0 * H)
                })
                .collect();
            let what = if bias { "bias" } else { "weights" };
            log.record(&format!("network {filters:?} {name} {what}"), analytic, &n);
        }
    }
}

fn criterion_1() -> Check {
    let t = Instant::now();
    let mut log = GradLog {
        worst: 0.0,
        failures: Vec::new(),
    };
    layer_gradients(&mut log);
    network_gradients(&mut log, [4, 4, 4]);
    network_gradients(&mut log, [4, 6, 5]);
    let secs = t.elapsed().as_secs_f64();
    ensure(log.failures.is_empty(), || log.failures.join("; "))?;
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("max relative error {:.1e}, {secs:.1} s", log.worst))
}

// ---------------------------------------------------------------- 2

fn fc_case(seed: u64) -> Result<f64, String> {
    let (grid, t, k) = ([4, 4, 4], 50, 3);
    let mut r = rng::stream(seed, 40);
    let vol = Volume4D::new(Tensor::from_fn(&[t, 4, 4, 4], |_| r.random::<f32>())).unwrap();
    let inside: Vec<bool> = (0..64).map(|_| r.random::<f64>() < 0.8).collect();
    let mask = Mask::from_bools(grid, inside).unwrap();
    let mut tc = Array2::from_shape_fn((k, t), |_| r.random::<f64>() - 0.5);
    for mut row in tc.rows_mut() {
        let m = row.mean().unwrap();
        row.mapv_inplace(|v| v - m);
    }
    let icns = IcnSet {
        spatial: Array2::from_shape_fn((k, mask.count()), |_| r.random::<f64>()),
        timecourses: tc.clone(),
        mask: mask.clone(),
    };
    let img =
        fc_image(&vol, &icns, [1, 1, 1], FcOrder::FcThenDownsample).map_err(|e| e.to_string())?;
    ensure(img.data.shape() == [k, 4, 4, 4], || {
        format!("shape {:?}", img.data.shape())
    })?;
    let mut worst: f64 = 0.0;
    for c in 0..k {
        let a: Vec<f64> = tc.row(c).to_vec();
        for v in 0..64 {
            let want = if mask.contains(v) {
                let b = vol.series(v);
                let (ma, mb) = (
                    a.iter().sum::<f64>() / t as f64,
                    b.iter().sum::<f64>() / t as f64,
                );
                let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
                for (x, y) in a.iter().zip(&b) {
                    sab += (x - ma) * (y - mb);
                    saa += (x - ma) * (x - ma);
                    sbb += (y - mb) * (y - mb);
                }
                (sab / (saa * sbb).sqrt()).atanh()
            } else {
                0.0
            };
            worst = worst.max((img.data.data()[c * 64 + v] as f64 - want).abs());
        }
    }
    Ok(worst)
}

fn criterion_2() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..16 {
        let e = fc_case(seed)?;
        ensure(e < 1e-6, || format!("seed {seed}: deviation {e:.2e}"))?;
        worst = worst.max(e);
    }
    Ok(format!("16 random cases, max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- 3

fn nonneg(rows: usize, cols: usize, r: &mut rng::StreamRng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| r.random::<f64>())
}

fn criterion_3() -> Check {
    for seed in 0..20 {
        let mut r = rng::stream(seed, 50);
        let data: Vec<Array2<f64>> = (0..2)
            .map(|_| {
                nonneg(30, 4, &mut r).dot(&nonneg(4, 40, &mut r)) + nonneg(30, 40, &mut r) * 0.1
            })
            .collect();
        let fit = nmf_group(
            &data,
            &NmfParams {
                k: 4,
                sparsity: 0.1,
                iters: 60,
                seed,
            },
        )
        .map_err(|e| e.to_string())?;
        for (i, w) in fit.objective.windows(2).enumerate() {
            // Rounding slack only: 1e-12 of the objective's magnitude.
            ensure(w[1] <= w[0] * (1.0 + 1e-12), || {
                format!(
                    "seed {seed}: objective rose at iteration {}: {} -> {}",
                    i + 1,
                    w[0],
                    w[1]
                )
            })?;
        }
    }
    let mut r = rng::stream(99, 50);
    let x = nonneg(30, 3, &mut r).dot(&nonneg(3, 40, &mut r));
    let fit = nmf_group(
        std::slice::from_ref(&x),
        &NmfParams {
            k: 3,
            sparsity: 0.0,
            iters: 3000,
            seed: 11,
        },
    )
    .map_err(|e| e.to_string())?;
    let resid = &x - &fit.w[0].dot(&fit.h);
    let err =
        (resid.iter().map(|e| e * e).sum::<f64>() / x.iter().map(|e| e * e).sum::<f64>()).sqrt();
    ensure(err < 1e-3, || {
        format!("planted factorization error {err:.2e}")
    })?;
    Ok(format!("monotone on 20 seeds, planted error {err:.1e}"))
}

// ---------------------------------------------------------------- 4

fn gaussian(n: usize, p: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::stream(seed, 60);
    // Box-Muller keeps the dev-dependency list short.
    Array2::from_shape_fn((n, p), |_| {
        let (u, v): (f64, f64) = (r.random::<f64>().max(1e-300), r.random());
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    })
}

fn criterion_4() -> Check {
    let mut ols_worst: f64 = 0.0;
    let mut tried = 0;
    let mut seed = 0;
    while tried < 20 {
        seed += 1;
        let x = gaussian(5, 3, seed);
        let mut d = DMatrix::from_element(5, 4, 1.0);
        for i in 0..5 {
            for j in 0..3 {
                d[(i, j + 1)] = x[[i, j]];
            }
        }
        let sv = d.clone().svd(false, false).singular_values;
        if sv.max() / sv.min() > 50.0 {
            continue;
        }
        tried += 1;
        let y: Vec<f64> = gaussian(5, 1, seed + 1000).column(0).to_vec();
        let beta = (d.transpose() * &d)
            .lu()
            .solve(&(d.transpose() * DVector::from_vec(y.clone())))
            .ok_or("singular normal equations")?;
        let rows: Vec<usize> = (0..5).collect();
        let fit = fit_lasso(x.view(), &y, &rows, &[0, 1, 2], 0.0, 1e-14, 1_000_000)
            .map_err(|e| e.to_string())?;
        let m = &fit.model;
        let mut coef = [m.intercept, 0.0, 0.0, 0.0];
        for (k, &j) in m.feature_index.iter().enumerate() {
            coef[j + 1] = m.weights[k];
        }
        for (a, b) in coef.iter().zip(beta.iter()) {
            ols_worst = ols_worst.max((a - b).abs());
        }
        ensure(ols_worst < 1e-6, || {
            format!("seed {seed}: deviation {ols_worst:.2e}")
        })?;
    }

    let mut kkt_worst: f64 = f64::NEG_INFINITY;
    for seed in 0..10u64 {
        let (n, p) = (50, 200);
        let x = gaussian(n, p, 500 + seed);
        let e = gaussian(n, 1, 900 + seed);
        let y: Vec<f64> = (0..n)
            .map(|i| x[[i, 0]] - 0.5 * x[[i, 1]] + 0.3 * e[[i, 0]])
            .collect();
        let rows: Vec<usize> = (0..n).collect();
        let cols: Vec<usize> = (0..p).collect();
        let lambda = (0.05 + 0.1 * seed as f64)
            * lambda_max(x.view(), &y, &rows, &cols).map_err(|e| e.to_string())?;
        let fit = fit_lasso(x.view(), &y, &rows, &cols, lambda, 1e-10, 1_000_000)
            .map_err(|e| e.to_string())?;
        let m = &fit.model;
        let pred = m.predict(x.view(), &rows);
        let resid: Vec<f64> = y.iter().zip(&pred).map(|(a, b)| a - b).collect();
        let std_w = m.standardized_weights();
        for (k, &j) in m.feature_index.iter().enumerate() {
            let c = x.column(j);
            let mean = c.sum() / n as f64;
            let sd = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            let g = c
                .iter()
                .zip(&resid)
                .map(|(v, e)| (v - mean) / sd * e)
                .sum::<f64>()
                / n as f64;
            let excess = if std_w[k] == 0.0 {
                g.abs() - lambda
            } else {
                (g - lambda * std_w[k].signum()).abs()
            };
            kkt_worst = kkt_worst.max(excess);
            ensure(excess <= 1e-6, || {
                format!("seed {seed}, feature {j}: KKT excess {excess:.2e}")
            })?;
        }
    }
    Ok(format!(
        "normal equations within {ols_worst:.1e}; KKT excess at most {kkt_worst:.1e}"
    ))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Check {
    const BUDGET: Duration = Duration::from_secs(30 * 60);
    let t = Instant::now();
    let cfg = PipelineConfig::default();
    let anat = Anatomy::build(&cfg.synth);
    let n = cfg.synth.n_subjects;
    let subjects: Vec<_> = (0..n)
        .map(|i| generate_subject(&cfg.synth, &anat, i))
        .collect();
    let ages: Vec<f64> = subjects.iter().map(|s| s.age_years).collect();
    let ids: Vec<String> = (0..n).map(subject_id).collect();
    let vols: Vec<&Volume4D> = subjects.iter().map(|s| &s.volume).collect();
    let folds = assign_folds(&ages, cfg.cv.folds, cfg.cv.seed).map_err(|e| e.to_string())?;
    let mut features = Vec::with_capacity(folds.k);
    for f in 0..folds.k {
        let train = folds.train_indices(f);
        let mask = Mask::from_volumes(train.iter().map(|&i| vols[i])).ok_or("empty fold")?;
        features.push(icn_features(&ids, &vols, &mask, &train, &cfg).map_err(|e| e.to_string())?);
    }
    drop(vols);
    drop(subjects);

    let mut results = Vec::new();
    for (feature, model) in [
        (FeatureKind::InterIcn, ModelKind::Lasso),
        (FeatureKind::WholeBrain, ModelKind::Lasso),
        (FeatureKind::WholeBrain, ModelKind::Cnn),
    ] {
        let mut load = |f: usize| {
            let feats = &features[f];
            Ok(FoldInput {
                features: match feature {
                    FeatureKind::WholeBrain => FoldFeatures::WholeBrain(feats.whole_brain.clone()),
                    FeatureKind::InterIcn => FoldFeatures::InterIcn(feats.inter_icn.clone()),
                },
                icn_trained_on: feats.icn_trained_on.clone(),
            })
        };
        results.push(
            run_experiment(&ids, &ages, &folds, feature, model, &cfg, &mut load)
                .map_err(|e| e.to_string())?,
        );
    }
    let elapsed = t.elapsed();
    let table = results_table(&results.iter().collect::<Vec<_>>());
    for line in table.lines() {
        println!("    {line}");
    }
    let r = |i: usize| results[i].aggregate.r_mean;
    let (inter, wb_lasso, cnn) = (r(0), r(1), r(2));
    let summary = format!(
        "r(cnn) {cnn:.3}, r(whole-brain lasso) {wb_lasso:.3}, r(inter-ICN lasso) {inter:.3}, {:.0} s on {} threads",
        elapsed.as_secs_f64(),
        rayon::current_num_threads()
    );
    ensure(cnn > wb_lasso && wb_lasso > inter, || {
        format!("ordering violated: {summary}")
    })?;
    ensure(cnn >= 0.8, || format!("r(cnn) below 0.8: {summary}"))?;
    ensure(elapsed < BUDGET, || {
        format!("over the 30 minute budget: {summary}")
    })?;
    Ok(summary)
}

// ---------------------------------------------------------------- 6

struct Linear {
    w: Vec<f64>,
    b: f64,
}

impl AgePredictor for Linear {
    fn predict_images(&self, images: &[&Tensor<f32>]) -> Result<Vec<f64>, AnalysisError> {
        Ok(images
            .iter()
            .map(|im| {
                self.b
                    + im.data()
                        .iter()
                        .zip(&self.w)
                        .map(|(&x, w)| x as f64 * w)
                        .sum::<f64>()
            })
            .collect())
    }
}

fn random_images(n: usize, k: usize, grid: usize, seed: u64) -> Vec<FcImage> {
    (0..n)
        .map(|s| FcImage::from_tensor(uniform(&[k, grid, grid, grid], seed, s as u64)).unwrap())
        .collect()
}

fn criterion_6() -> Check {
    // Shape and dead channels on a CNN whose input filters ignore channel 1.
    let (k, n) = (3, 7);
    let cfg = NetworkConfig {
        in_channels: k,
        conv1_filters: 4,
        resblock_filters: [4, 4, 4],
        fc1_units: 8,
        dropout_p: 0.5,
        input_grid: [8, 8, 8],
        pool_stages: 3,
        init_seed: 1,
    };
    let mut net = AgeCnn::<f32>::new(&cfg).unwrap();
    let warm: Tensor<f32> = uniform(&net.input_shape(4), 70, 0);
    let fwd = net.forward(&warm, Mode::Train, 0).unwrap();
    net.commit_bn(&fwd.bn_stats).unwrap();
    {
        let conv1 = &mut net.layers_mut()[0].weights;
        let per_filter = k * 27;
        for f in 0..cfg.conv1_filters {
            conv1.data_mut()[f * per_filter + 27..f * per_filter + 54].fill(0.0);
        }
    }
    let images = random_images(n, k, 8, 71);
    let refs: Vec<&FcImage> = images.iter().collect();
    let cm = sensitivity_change_matrix(&net, &refs).map_err(|e| e.to_string())?;
    ensure(cm.values.dim() == (k, n), || {
        format!("shape {:?}, want ({k}, {n})", cm.values.dim())
    })?;
    ensure(cm.values.row(1).iter().all(|&v| v == 0.0), || {
        "dead channel row is not zero".into()
    })?;
    ensure(cm.values.row(0).iter().any(|&v| v != 0.0), || {
        "live channel row is zero".into()
    })?;
    let shape = format!("{k}x{n}");

    // Linear surrogate: the change is the channel's own contribution.
    let (k, g, n) = (4, 3, 6);
    let images = random_images(n, k, g, 72);
    let vox = g * g * g;
    let mut r = rng::stream(73, 0);
    let model = Linear {
        w: (0..k * vox).map(|_| r.random::<f64>() - 0.5).collect(),
        b: 12.0,
    };
    let cm = sensitivity_change_matrix(&model, &images.iter().collect::<Vec<_>>())
        .map_err(|e| e.to_string())?;
    let mut surrogate: f64 = 0.0;
    for i in 0..k {
        for (s, im) in images.iter().enumerate() {
            let want: f64 = (0..vox)
                .map(|v| im.data.data()[i * vox + v] as f64 * model.w[i * vox + v])
                .sum();
            surrogate = surrogate.max((cm.values[[i, s]] - want).abs());
        }
    }
    ensure(surrogate < 1e-8, || {
        format!("surrogate deviation {surrogate:.2e}")
    })?;

    // PC1 against an SVD of the row-centered matrix.
    let mut r = rng::stream(74, 0);
    let values = Array2::from_shape_fn((5, 9), |_| r.random::<f64>() * 4.0 - 2.0);
    let pca = sensitivity_pca(
        &ChangeMatrix {
            values: values.clone(),
        },
        5,
    )
    .map_err(|e| e.to_string())?;
    let centered = DMatrix::from_fn(5, 9, |i, j| values[[i, j]] - values.row(i).mean().unwrap());
    let svd = centered.svd(true, false);
    let best = svd.singular_values.imax();
    let u = svd.u.unwrap();
    let dot: f64 = (0..5).map(|i| u[(i, best)] * pca.pc1_loadings[i]).sum();
    let sign = dot.signum();
    let pc1 = (0..5)
        .map(|i| (sign * u[(i, best)] - pca.pc1_loadings[i]).abs())
        .fold(0.0, f64::max);
    ensure(pc1 < 1e-8, || format!("PC1 deviation {pc1:.2e}"))?;
    Ok(format!(
        "shape {shape} ok, surrogate {surrogate:.1e}, PC1 {pc1:.1e}"
    ))
}

// ---------------------------------------------------------------- 7

fn silhouette(points: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = points.nrows();
    let d = |a: usize, b: usize| {
        let (p, q) = (points.row(a), points.row(b));
        p.iter()
            .zip(q.iter())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let groups = labels.iter().max().map_or(0, |m| m + 1);
    let total: f64 = (0..n)
        .map(|i| {
            let mut sum = vec![0.0; groups];
            let mut cnt = vec![0usize; groups];
            for j in (0..n).filter(|&j| j != i) {
                sum[labels[j]] += d(i, j);
                cnt[labels[j]] += 1;
            }
            let a = sum[labels[i]] / cnt[labels[i]] as f64;
            let b = (0..groups)
                .filter(|&g| g != labels[i] && cnt[g] > 0)
                .map(|g| sum[g] / cnt[g] as f64)
                .fold(f64::INFINITY, f64::min);
            (b - a) / a.max(b)
        })
        .sum();
    total / n as f64
}

fn criterion_7() -> Check {
    let (per, dim) = (30, 10);
    let noise = gaussian(3 * per, dim, 80);
    let labels: Vec<usize> = (0..3 * per).map(|i| i / per).collect();
    let x = Array2::from_shape_fn((3 * per, dim), |(i, j)| {
        noise[[i, j]] + if j == labels[i] { 8.0 } else { 0.0 }
    });
    let cfg = TsneConfig {
        perplexity: 10.0,
        iters: 1000,
        seed: 5,
    };
    let a = tsne_embed(&x, &cfg).map_err(|e| e.to_string())?;
    let b = tsne_embed(&x, &cfg).map_err(|e| e.to_string())?;
    ensure(a.coords == b.coords, || {
        "two runs with the same seed differ".into()
    })?;
    let s = silhouette(&a.coords, &labels);
    ensure(s > 0.5, || format!("silhouette {s:.3}"))?;
    Ok(format!("silhouette {s:.3}, repeat run identical"))
}

// ---------------------------------------------------------------- 8

fn snapshot(dir: &Path, base: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            snapshot(&p, base, out);
        } else {
            let rel = p.strip_prefix(base).unwrap().display().to_string();
            out.insert(rel, fs::read(&p).unwrap());
        }
    }
}

fn criterion_8() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let work = dir.path().join("w");
    let config = common::write_config(dir.path(), &common::tiny_config(&work));
    let mut runs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        common::run_pipeline(
            &config,
            &["--deterministic", "--out", out.to_str().unwrap()],
        );
        let mut files = BTreeMap::new();
        snapshot(&out.join("results"), &out, &mut files);
        snapshot(&out.join("models"), &out, &mut files);
        runs.push(files);
    }
    ensure(runs[0].len() > 10, || {
        format!("only {} artifacts", runs[0].len())
    })?;
    ensure(runs[0].keys().eq(runs[1].keys()), || {
        "artifact lists differ".into()
    })?;
    let differing: Vec<&String> = runs[0]
        .iter()
        .filter(|(k, v)| runs[1][*k] != **v)
        .map(|(k, _)| k)
        .collect();
    ensure(differing.is_empty(), || {
        format!("differing artifacts: {differing:?}")
    })?;
    Ok(format!("{} artifacts byte-identical", runs[0].len()))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Check {
    let mut r = rng::stream(90, 0);
    let ages: Vec<f64> = (0..983).map(|_| 8.0 + 14.0 * r.random::<f64>()).collect();
    let folds = assign_folds(&ages, 5, 0).map_err(|e| e.to_string())?;
    let mut sizes = folds.sizes();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    ensure(sizes == [197, 197, 197, 196, 196], || {
        format!("fold sizes {sizes:?}")
    })?;

    let k = 56;
    let t = 20;
    let tc = Array2::from_shape_fn((k, t), |_| r.random::<f64>() - 0.5);
    // A grid holding an 8850-voxel brain mask.
    let grid = [25, 25, 25];
    let inside: Vec<bool> = (0..25 * 25 * 25).map(|v| v < 8850).collect();
    let mask = Mask::from_bools(grid, inside).unwrap();
    let icns = IcnSet {
        spatial: Array2::from_elem((k, mask.count()), 1.0),
        timecourses: tc,
        mask: mask.clone(),
    };
    let inter = inter_icn_fc(&icns).map_err(|e| e.to_string())?.values.len();
    ensure(inter == 1540, || format!("inter-ICN length {inter}"))?;
    let vol = Volume4D::new(Tensor::from_fn(&[t, 25, 25, 25], |_| r.random::<f32>())).unwrap();
    let img =
        fc_image(&vol, &icns, [1, 1, 1], FcOrder::FcThenDownsample).map_err(|e| e.to_string())?;
    let flat = flatten_fc(&img);
    let in_brain = (0..k)
        .flat_map(|c| mask.indices().iter().map(move |&v| c * 25 * 25 * 25 + v))
        .filter(|&i| flat[i] != 0.0)
        .count();
    ensure(in_brain == 495_600, || {
        format!("in-brain whole-brain features {in_brain}")
    })?;
    Ok(format!(
        "folds {sizes:?}, inter-ICN {inter}, whole-brain {in_brain}"
    ))
}

// ----------------------------------------------------------------

fn main() {
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let criteria: [(u8, &str, fn() -> Check); 9] = [
        (1, "gradient fidelity", criterion_1),
        (2, "FC oracle equivalence", criterion_2),
        (3, "NMF monotone objective and recovery", criterion_3),
        (4, "lasso normal equations and KKT", criterion_4),
        (5, "desk-scale model ordering", criterion_5),
        (6, "sensitivity analysis", criterion_6),
        (7, "t-SNE clusters and determinism", criterion_7),
        (8, "deterministic pipeline reruns", criterion_8),
        (9, "fold and feature arithmetic", criterion_9),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        let key = format!("criterion_{id}");
        if !filter.is_empty() && !filter.iter().any(|f| key.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id} ({name}): PASS [{detail}] ({secs:.1} s)"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id} ({name}): FAIL [{detail}] ({secs:.1} s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
