use rayon::prelude::*;

use super::config::PipelineConfig;
use super::experiment::ExperimentError;
use crate::fc::{fc_image, inter_icn_fc, FcImage};
use crate::icn::{fit_group_icns, fit_subject_icns, GroupIcns, IcnSet, NmfParams};
use crate::volume::{Mask, Volume4D};

/// Everything derived from one group ICN fit.
#[derive(Debug, Clone)]
pub struct IcnFeatures {
    pub group: GroupIcns,
    pub icn_trained_on: Vec<String>,
    pub subjects: Vec<IcnSet>,
    pub whole_brain: Vec<FcImage>,
    pub inter_icn: Vec<Vec<f64>>,
}

pub fn nmf_params(cfg: &PipelineConfig) -> NmfParams {
    NmfParams {
        k: cfg.icn.k,
        sparsity: cfg.icn.sparsity,
        iters: cfg.icn.group_iters,
        seed: cfg.icn.seed,
    }
}

/// Fits group maps on `group_rows`, refines them on every subject and
/// computes both feature kinds for every subject.
pub fn icn_features(
    ids: &[String],
    volumes: &[&Volume4D],
    mask: &Mask,
    group_rows: &[usize],
    cfg: &PipelineConfig,
) -> Result<IcnFeatures, ExperimentError> {
    let fail =
        |stage: &str, e: &dyn std::fmt::Display| ExperimentError::Input(format!("{stage}: {e}"));
    let group_vols: Vec<&Volume4D> = group_rows.iter().map(|&i| volumes[i]).collect();
    let group =
        fit_group_icns(&group_vols, mask, &nmf_params(cfg)).map_err(|e| fail("group ICNs", &e))?;
    let per_subject: Vec<Result<(IcnSet, FcImage, Vec<f64>), ExperimentError>> = volumes
        .par_iter()
        .zip(ids.par_iter())
        .map(|(vol, id)| {
            let (icns, _) = fit_subject_icns(
                vol,
                mask,
                &group.maps,
                cfg.icn.sparsity,
                cfg.icn.subject_iters,
            )
            .map_err(|e| fail(&format!("subject ICNs for {id}"), &e))?;
            let img = fc_image(vol, &icns, cfg.fc.downsample, cfg.fc.order)
                .map_err(|e| fail(&format!("FC image for {id}"), &e))?;
            let inter =
                inter_icn_fc(&icns).map_err(|e| fail(&format!("inter-ICN FC for {id}"), &e))?;
            Ok((icns, img, inter.values))
        })
        .collect();
    let mut out = IcnFeatures {
        group,
        icn_trained_on: group_rows.iter().map(|&i| ids[i].clone()).collect(),
        subjects: Vec::with_capacity(ids.len()),
        whole_brain: Vec::with_capacity(ids.len()),
        inter_icn: Vec::with_capacity(ids.len()),
    };
    for r in per_subject {
        let (icns, img, inter) = r?;
        out.subjects.push(icns);
        out.whole_brain.push(img);
        out.inter_icn.push(inter);
    }
    Ok(out)
}
