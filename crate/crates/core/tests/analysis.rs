use brainage_core::analysis::*;
use brainage_core::cnn::{AgeCnn, NetworkConfig};
use brainage_core::ops::Mode;
use brainage_core::{rng, FcImage, Tensor};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn image(k: usize, grid: [usize; 3], seed: u64) -> FcImage {
    let mut r = rng::stream(seed, 31);
    let shape = [k, grid[0], grid[1], grid[2]];
    FcImage::from_tensor(Tensor::from_fn(&shape, |_| r.random::<f32>() * 2.0 - 1.0)).unwrap()
}

/// One linear layer on the flattened image: `b + Σ_i w_iᵀ x_i`.
struct Linear {
    w: Vec<f32>,
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
                        .map(|(&x, &w)| x as f64 * w as f64)
                        .sum::<f64>()
            })
            .collect())
    }
}

#[test]
fn linear_surrogate_matches_closed_form() {
    let (k, grid) = (3, [2, 2, 2]);
    let images: Vec<FcImage> = (0..4).map(|s| image(k, grid, s)).collect();
    let mut r = rng::stream(9, 0);
    let model = Linear {
        w: (0..k * 8).map(|_| r.random::<f32>() - 0.5).collect(),
        b: 14.0,
    };
    let cm = sensitivity_change_matrix(&model, &images.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(cm.values.dim(), (3, 4));
    for i in 0..k {
        for (s, im) in images.iter().enumerate() {
            let want: f64 = (0..8)
                .map(|v| im.data.data()[i * 8 + v] as f64 * model.w[i * 8 + v] as f64)
                .sum();
            assert!((cm.values[[i, s]] - want).abs() < 1e-9);
        }
    }
}

#[test]
fn dead_channel_row_is_zero() {
    let (k, grid) = (3, [2, 2, 2]);
    let images: Vec<FcImage> = (0..5).map(|s| image(k, grid, s + 10)).collect();
    let mut w: Vec<f32> = (0..k * 8).map(|i| (i as f32 * 0.37).sin()).collect();
    w[8..16].fill(0.0);
    let cm = sensitivity_change_matrix(&Linear { w, b: 0.0 }, &images.iter().collect::<Vec<_>>())
        .unwrap();
    assert!(cm.values.row(1).iter().all(|&v| v == 0.0));
    assert!(cm.values.row(0).iter().any(|&v| v != 0.0));
}

fn trained_tiny(k: usize) -> AgeCnn<f32> {
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
    let x = Tensor::from_fn(&net.input_shape(4), |i| ((i * 31) % 17) as f32 / 17.0);
    let fwd = net.forward(&x, Mode::Train, 0).unwrap();
    net.commit_bn(&fwd.bn_stats).unwrap();
    net
}

#[test]
fn single_channel_ablation_equals_zero_input() {
    let net = trained_tiny(1);
    let images: Vec<FcImage> = (0..3).map(|s| image(1, [8, 8, 8], s)).collect();
    let cm = sensitivity_change_matrix(&net, &images.iter().collect::<Vec<_>>()).unwrap();
    let full = net
        .predict_images(&images.iter().map(|i| &i.data).collect::<Vec<_>>())
        .unwrap();
    let zero = net
        .predict_images(&[&Tensor::zeros(&[1, 8, 8, 8])])
        .unwrap()[0];
    for s in 0..3 {
        assert!((cm.values[[0, s]] - (full[s] - zero)).abs() < 1e-12);
    }
}

#[test]
fn input_blind_cnn_gives_zero_matrix() {
    let mut net = trained_tiny(3);
    net.layers_mut()[0].weights.fill(0.0);
    let images: Vec<FcImage> = (0..3).map(|s| image(3, [8, 8, 8], s)).collect();
    let cm = sensitivity_change_matrix(&net, &images.iter().collect::<Vec<_>>()).unwrap();
    assert!(cm.values.iter().all(|&v| v == 0.0));
}

#[test]
fn untrained_cnn_is_rejected() {
    let cfg = NetworkConfig {
        in_channels: 2,
        input_grid: [8, 8, 8],
        pool_stages: 3,
        ..Default::default()
    };
    let net = AgeCnn::<f32>::new(&cfg).unwrap();
    let images = [image(2, [8, 8, 8], 0)];
    assert!(matches!(
        sensitivity_change_matrix(&net, &images.iter().collect::<Vec<_>>()),
        Err(AnalysisError::Untrained)
    ));
}

#[test]
fn pc1_matches_svd_of_centered_matrix() {
    let mut r = rng::stream(5, 0);
    let values = Array2::from_shape_fn((4, 6), |_| r.random::<f64>() * 4.0 - 2.0);
    let pca = sensitivity_pca(
        &ChangeMatrix {
            values: values.clone(),
        },
        4,
    )
    .unwrap();

    let centered =
        nalgebra::DMatrix::from_fn(4, 6, |i, j| values[[i, j]] - values.row(i).sum() / 6.0);
    let svd = centered.svd(true, false);
    let (best, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold(
            (0, -1.0),
            |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc },
        );
    let u = svd.u.unwrap();
    let oracle: Vec<f64> = (0..4).map(|i| u[(i, best)]).collect();
    let sign = if oracle
        .iter()
        .zip(&pca.pc1_loadings)
        .map(|(a, b)| a * b)
        .sum::<f64>()
        < 0.0
    {
        -1.0
    } else {
        1.0
    };
    for (a, b) in oracle.iter().zip(&pca.pc1_loadings) {
        assert!((sign * a - b).abs() < 1e-8, "{a} vs {b}");
    }
    let s1 = svd.singular_values[best];
    assert!((pca.explained_variance[0] - s1 * s1 / 5.0).abs() < 1e-8);
}

#[test]
fn loadings_are_orthonormal_and_variances_sorted() {
    let mut r = rng::stream(6, 0);
    let values = Array2::from_shape_fn((7, 20), |_| r.random::<f64>());
    let pca = sensitivity_pca(&ChangeMatrix { values }, 5).unwrap();
    let n = pca.components.len();
    for a in 0..n {
        for b in 0..n {
            let dot: f64 = pca.components[a]
                .iter()
                .zip(&pca.components[b])
                .map(|(x, y)| x * y)
                .sum();
            assert!((dot - if a == b { 1.0 } else { 0.0 }).abs() < 1e-10);
        }
    }
    assert!(pca.explained_variance.iter().all(|&v| v >= 0.0));
    assert!(pca.explained_variance.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(pca.ranking.len(), 5);
}

fn clusters(seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut r = rng::stream(seed, 0);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut labels = Vec::new();
    let x = Array2::from_shape_fn((150, 10), |(i, j)| {
        let c = i / 50;
        let center = if j == c { 10.0 } else { 0.0 };
        center + noise.sample(&mut r)
    });
    for i in 0..150 {
        labels.push(i / 50);
    }
    (x, labels)
}

#[test]
fn tsne_separates_clusters() {
    let (x, labels) = clusters(1);
    let cfg = TsneConfig {
        seed: 3,
        ..Default::default()
    };
    let out = tsne_embed(&x, &cfg).unwrap();
    assert_eq!(out.coords.dim(), (150, 2));
    let s = silhouette(&out.coords, &labels);
    assert!(s > 0.5, "silhouette {s}");
    let kl300 = out.kl_trace.iter().find(|(i, _)| *i == 300).unwrap().1;
    let kl_end = out.kl_trace.last().unwrap().1;
    assert!(kl_end < kl300, "{kl_end} vs {kl300}");

    let again = tsne_embed(&x, &cfg).unwrap();
    assert_eq!(out.coords, again.coords);
}

#[test]
fn tsne_handles_duplicates_and_checks_size() {
    let mut x = Array2::zeros((30, 3));
    for i in 0..30 {
        x[[i, 0]] = (i % 3) as f64;
    }
    let cfg = TsneConfig {
        perplexity: 5.0,
        iters: 300,
        seed: 1,
    };
    let out = tsne_embed(&x, &cfg).unwrap();
    assert!(out.coords.iter().all(|v| v.is_finite()));
    let small = TsneConfig {
        perplexity: 30.0,
        ..cfg
    };
    assert!(tsne_embed(&x, &small).is_err());
}
