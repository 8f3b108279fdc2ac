//! Fixtures shared by the criterion benchmarks in `benches/`.

use ndarray::Array2;

use brainage_core::baselines::feature_matrix;
use brainage_core::icn::{fit_group_icns, fit_subject_icns};
use brainage_core::ops::LayerParams;
use brainage_core::pipeline::{nmf_params, PipelineConfig};
use brainage_core::synth::{generate_subject, Anatomy};
use brainage_core::{IcnSet, Mask, Tensor, Volume4D};

/// Cheap deterministic values in [-1, 1).
pub fn hash_values(n: usize, salt: u64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let x = (i as u64 ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15)) as f64;
            ((x * 12.9898).sin() * 43_758.545_3).fract()
        })
        .collect()
}

pub fn tensor(shape: &[usize], salt: u64) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        hash_values(n, salt).into_iter().map(|v| v as f32).collect(),
    )
    .expect("sized")
}

/// 3x3x3 conv layer from `c_in` to `c_out` channels.
pub fn conv_layer(c_in: usize, c_out: usize) -> LayerParams<f32> {
    LayerParams::new(
        tensor(&[c_out, c_in, 3, 3, 3], 1),
        Some(Tensor::zeros(&[c_out])),
    )
}

/// One synthetic subject at the default desk scale with refined ICNs.
pub fn fc_fixture() -> (Volume4D, IcnSet) {
    let cfg = PipelineConfig::default();
    let anat = Anatomy::build(&cfg.synth);
    let vols: Vec<Volume4D> = (0..4)
        .map(|i| generate_subject(&cfg.synth, &anat, i).volume)
        .collect();
    let mask = Mask::from_volumes(vols.iter()).expect("non-empty");
    let mut params = nmf_params(&cfg);
    params.iters = 10;
    let refs: Vec<&Volume4D> = vols.iter().collect();
    let group = fit_group_icns(&refs, &mask, &params).expect("group fit");
    let (icns, _) =
        fit_subject_icns(&vols[0], &mask, &group.maps, cfg.icn.sparsity, 10).expect("subject fit");
    (vols.into_iter().next().expect("one volume"), icns)
}

/// `n x p` design whose target depends on the first five columns.
pub fn lasso_fixture(n: usize, p: usize) -> (Array2<f64>, Vec<f64>) {
    let rows: Vec<Vec<f64>> = (0..n).map(|i| hash_values(p, i as u64 + 1)).collect();
    let noise = hash_values(n, 999);
    let y = rows
        .iter()
        .zip(&noise)
        .map(|(r, e)| r[..5].iter().sum::<f64>() + 0.1 * e)
        .collect();
    (feature_matrix(&rows).expect("rectangular"), y)
}
