//! One function per command. Stages talk to each other only through files
//! under the work directory.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use brainage_core::analysis::{
    assign_folds, sensitivity_change_matrix, sensitivity_pca, tsne_embed, AgePredictor,
    ChangeMatrix, FoldAssignment,
};
use brainage_core::baselines::{screen_features, LassoModel};
use brainage_core::cnn::{write_trace, AgeCnn};
use brainage_core::fc::{fc_image, inter_icn_fc, FcImage, InterIcnVector};
use brainage_core::icn::{
    fit_group_icns, fit_subject_icns, read_group, read_icnset, write_group, write_icnset,
    IcnSidecar,
};
use brainage_core::pipeline::{
    aggregate, nmf_params, results_table, run_fold, write_predictions_csv, write_results_csv,
    ExperimentResult, FeatureKind, FittedModel, FoldFeatures, FoldInput, IcnScope, ModelKind,
    PipelineConfig, Provenance,
};
use brainage_core::synth::generate_cohort;
use brainage_core::volume_io::{self, read_manifest, resolve_volume_path};
use brainage_core::{Mask, Tensor, Volume4D};

use crate::layout::{create_dir, require, Layout};
use crate::StageError;

/// Settings for one command invocation.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub cfg: PipelineConfig,
    pub layout: Layout,
    pub feature: Option<FeatureKind>,
    pub model: Option<ModelKind>,
    pub fold: Option<usize>,
}

/// Paths a stage consumed and produced, for the reproducibility record.
#[derive(Debug, Default)]
pub struct Report {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub summary: String,
}

/// Cohort order is manifest order everywhere.
struct Cohort {
    ids: Vec<String>,
    ages: Vec<f64>,
}

fn read_cohort(layout: &Layout) -> Result<Cohort, StageError> {
    let path = layout.manifest();
    require(&path, "synth")?;
    let m = read_manifest(&path)?;
    Ok(Cohort {
        ids: m.records.iter().map(|r| r.subject_id.clone()).collect(),
        ages: m.ages(),
    })
}

fn read_volumes(layout: &Layout) -> Result<Vec<Volume4D>, StageError> {
    let path = layout.manifest();
    let m = read_manifest(&path)?;
    m.records
        .par_iter()
        .map(|r| {
            let p = resolve_volume_path(&path, r);
            require(&p, "synth")?;
            let t = volume_io::read_bvol(&p)?;
            Volume4D::new(t).map_err(|e| StageError::Other(format!("{}: {e}", p.display())))
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct FoldsFile {
    subject_ids: Vec<String>,
    #[serde(flatten)]
    folds: FoldAssignment,
}

fn read_folds(layout: &Layout, cohort: &Cohort) -> Result<FoldAssignment, StageError> {
    let path = layout.folds();
    require(&path, "decompose")?;
    let f: FoldsFile = read_json(&path)?;
    if f.subject_ids != cohort.ids {
        return Err(StageError::Other(format!(
            "{} does not match the cohort manifest; rerun `decompose`",
            path.display()
        )));
    }
    Ok(f.folds)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, StageError> {
    let text = fs::read_to_string(path).map_err(|e| StageError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| StageError::Other(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StageError> {
    let text = serde_json::to_string_pretty(value).expect("plain data");
    fs::write(path, text + "\n").map_err(|e| StageError::io(path, e))
}

/// ICN/FC units and the folds each one serves.
fn units(cfg: &PipelineConfig) -> Vec<(String, Option<usize>)> {
    match cfg.icn.scope {
        IcnScope::TrainingFold => (0..cfg.cv.folds)
            .map(|f| (Layout::unit(cfg.icn.scope, f), Some(f)))
            .collect(),
        IcnScope::WholeCohort => vec![(Layout::unit(cfg.icn.scope, 0), None)],
    }
}

pub fn synth(ctx: &Ctx) -> Result<Report, StageError> {
    let dir = ctx.layout.cohort();
    let manifest = generate_cohort(&ctx.cfg.synth, &dir)?;
    Ok(Report {
        inputs: vec![],
        outputs: vec![dir],
        summary: format!("wrote {} subjects", manifest.len()),
    })
}

pub fn decompose(ctx: &Ctx) -> Result<Report, StageError> {
    let cfg = &ctx.cfg;
    let cohort = read_cohort(&ctx.layout)?;
    let volumes = read_volumes(&ctx.layout)?;
    let folds = assign_folds(&cohort.ages, cfg.cv.folds, cfg.cv.seed)?;
    write_json(
        &ctx.layout.folds(),
        &FoldsFile {
            subject_ids: cohort.ids.clone(),
            folds: folds.clone(),
        },
    )?;
    let mut outputs = vec![ctx.layout.folds()];
    for (unit, fold) in units(cfg) {
        let rows: Vec<usize> = match fold {
            Some(f) => folds.train_indices(f),
            None => (0..cohort.ids.len()).collect(),
        };
        let group_vols: Vec<&Volume4D> = rows.iter().map(|&i| &volumes[i]).collect();
        let mask = Mask::from_volumes(group_vols.iter().copied())
            .ok_or_else(|| StageError::Other("no voxel varies over time".into()))?;
        let params = nmf_params(cfg);
        let group = fit_group_icns(&group_vols, &mask, &params)?;
        let dir = ctx.layout.icn(&unit);
        create_dir(&dir)?;
        let trained_on: Vec<String> = rows.iter().map(|&i| cohort.ids[i].clone()).collect();
        write_group(
            &dir,
            &group,
            &IcnSidecar {
                k: params.k,
                sparsity: params.sparsity,
                seed: params.seed,
                iterations: params.iters,
                final_objective: group.objective.last().copied(),
                trained_on,
            },
        )?;
        volumes.par_iter().zip(cohort.ids.par_iter()).try_for_each(
            |(vol, id)| -> Result<(), StageError> {
                let (icns, objective) = fit_subject_icns(
                    vol,
                    &mask,
                    &group.maps,
                    cfg.icn.sparsity,
                    cfg.icn.subject_iters,
                )?;
                let sidecar = IcnSidecar {
                    k: params.k,
                    sparsity: params.sparsity,
                    seed: params.seed,
                    iterations: cfg.icn.subject_iters,
                    final_objective: Some(objective),
                    trained_on: vec![id.clone()],
                };
                write_icnset(&dir, id, &icns, &sidecar)?;
                Ok(())
            },
        )?;
        outputs.push(dir);
    }
    Ok(Report {
        inputs: vec![ctx.layout.cohort()],
        outputs,
        summary: format!(
            "{} ICN unit(s), K = {}, fold sizes {:?}",
            units(cfg).len(),
            cfg.icn.k,
            folds.sizes()
        ),
    })
}

pub fn fcmap(ctx: &Ctx) -> Result<Report, StageError> {
    let cfg = &ctx.cfg;
    let cohort = read_cohort(&ctx.layout)?;
    let volumes = read_volumes(&ctx.layout)?;
    let mut inputs = vec![ctx.layout.cohort()];
    let mut outputs = Vec::new();
    for (unit, _) in units(cfg) {
        let icn_dir = ctx.layout.icn(&unit);
        require(&icn_dir, "decompose")?;
        let (_, mask, _) = read_group(&icn_dir)?;
        let out = ctx.layout.fc(&unit);
        create_dir(&out)?;
        volumes.par_iter().zip(cohort.ids.par_iter()).try_for_each(
            |(vol, id)| -> Result<(), StageError> {
                let (icns, _) = read_icnset(&icn_dir, id, &mask)?;
                let img = fc_image(vol, &icns, cfg.fc.downsample, cfg.fc.order)?;
                volume_io::write_bvol(ctx.layout.fc_image(&unit, id), &img.data)?;
                let inter = inter_icn_fc(&icns)?;
                volume_io::write_bvol(ctx.layout.inter_icn(&unit, id), &inter.to_tensor())?;
                Ok(())
            },
        )?;
        inputs.push(icn_dir);
        outputs.push(out);
    }
    Ok(Report {
        inputs,
        outputs,
        summary: format!(
            "FC images on grid {:?} for {} subjects",
            cfg.fc_grid(),
            cohort.ids.len()
        ),
    })
}

fn load_fold_input(
    ctx: &Ctx,
    cohort: &Cohort,
    fold: usize,
    feature: FeatureKind,
) -> Result<FoldInput, StageError> {
    let unit = Layout::unit(ctx.cfg.icn.scope, fold);
    let dir = ctx.layout.fc(&unit);
    require(&dir, "fcmap")?;
    let (_, _, sidecar) = read_group(&ctx.layout.icn(&unit))?;
    let features = match feature {
        FeatureKind::WholeBrain => FoldFeatures::WholeBrain(
            cohort
                .ids
                .par_iter()
                .map(|id| {
                    let p = ctx.layout.fc_image(&unit, id);
                    require(&p, "fcmap")?;
                    Ok(FcImage::from_tensor(volume_io::read_bvol(&p)?)?)
                })
                .collect::<Result<_, StageError>>()?,
        ),
        FeatureKind::InterIcn => FoldFeatures::InterIcn(
            cohort
                .ids
                .iter()
                .map(|id| {
                    let p = ctx.layout.inter_icn(&unit, id);
                    require(&p, "fcmap")?;
                    Ok(InterIcnVector::from_tensor(&volume_io::read_bvol(&p)?)?.values)
                })
                .collect::<Result<_, StageError>>()?,
        ),
    };
    Ok(FoldInput {
        features,
        icn_trained_on: sidecar.trained_on,
    })
}

fn fc_inputs(ctx: &Ctx) -> Vec<PathBuf> {
    let mut v = vec![ctx.layout.folds()];
    for (unit, _) in units(&ctx.cfg) {
        v.push(
            ctx.layout
                .icn(&unit)
                .join(brainage_core::icn::GROUP_SIDECAR),
        );
        v.push(ctx.layout.fc(&unit));
    }
    v
}

fn save_model(
    dir: &Path,
    model: &FittedModel,
    provenance: &[Provenance],
) -> Result<(), StageError> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| StageError::io(dir, e))?;
    }
    create_dir(dir)?;
    match model {
        FittedModel::Lasso { model, selection } => {
            model.save(&dir.join("lasso.json"))?;
            write_json(&dir.join("lambda_selection.json"), selection)?;
        }
        FittedModel::Cnn { net, trace } => {
            net.save(dir)?;
            let p = dir.join("trace.csv");
            write_trace(&p, trace).map_err(|e| StageError::io(&p, e))?;
        }
    }
    write_json(&dir.join("provenance.json"), &provenance)
}

enum Loaded {
    Lasso(LassoModel),
    Cnn(Box<AgeCnn<f32>>),
}

fn load_model(
    ctx: &Ctx,
    feature: FeatureKind,
    model: ModelKind,
    fold: usize,
) -> Result<Loaded, StageError> {
    let dir = ctx.layout.model(feature, model, fold);
    require(&dir, "train` or `evaluate")?;
    Ok(match model {
        ModelKind::Lasso => Loaded::Lasso(LassoModel::load(&dir.join("lasso.json"))?),
        ModelKind::Cnn => Loaded::Cnn(Box::new(AgeCnn::<f32>::load(&dir)?)),
    })
}

fn kinds(ctx: &Ctx) -> (FeatureKind, ModelKind) {
    (
        ctx.feature.unwrap_or(FeatureKind::WholeBrain),
        ctx.model.unwrap_or(ModelKind::Cnn),
    )
}

pub fn train(ctx: &Ctx) -> Result<Report, StageError> {
    let (feature, model) = kinds(ctx);
    let fold = ctx.fold.unwrap_or(0);
    let cohort = read_cohort(&ctx.layout)?;
    let folds = read_folds(&ctx.layout, &cohort)?;
    let input = load_fold_input(ctx, &cohort, fold, feature)?;
    let outcome = run_fold(
        &cohort.ids,
        &cohort.ages,
        &folds,
        fold,
        feature,
        model,
        &ctx.cfg,
        &input,
    )?;
    let dir = ctx.layout.model(feature, model, fold);
    save_model(&dir, &outcome.model, &outcome.provenance)?;
    Ok(Report {
        inputs: fc_inputs(ctx),
        outputs: vec![dir],
        summary: format!(
            "{feature} {model} fold {fold}: held-out r = {:.3}, MAE = {:.3}",
            outcome.metrics.r, outcome.metrics.mae
        ),
    })
}

pub fn predict(ctx: &Ctx) -> Result<Report, StageError> {
    let (feature, model) = kinds(ctx);
    let fold = ctx.fold.unwrap_or(0);
    let cohort = read_cohort(&ctx.layout)?;
    let folds = read_folds(&ctx.layout, &cohort)?;
    let loaded = load_model(ctx, feature, model, fold)?;
    let input = load_fold_input(ctx, &cohort, fold, feature)?;
    let rows = folds.test_indices(fold);
    let predicted = match (&loaded, &input.features) {
        (Loaded::Lasso(m), f) => m.predict(f.matrix().view(), &rows),
        (Loaded::Cnn(net), FoldFeatures::WholeBrain(images)) => {
            let x: Vec<&Tensor<f32>> = rows.iter().map(|&i| &images[i].data).collect();
            net.predict_images(&x)?
        }
        (Loaded::Cnn(_), FoldFeatures::InterIcn(_)) => {
            return Err(StageError::Other(
                "cnn on inter_icn features is not supported".into(),
            ))
        }
    };
    let out_dir = ctx.layout.results();
    create_dir(&out_dir)?;
    let path = out_dir.join(format!("{feature}_{model}_fold{fold}_predictions.csv"));
    let mut w = csv::Writer::from_path(&path).map_err(|e| StageError::csv(&path, e))?;
    w.write_record(["subject_id", "fold", "age", "predicted"])
        .map_err(|e| StageError::csv(&path, e))?;
    for (&i, p) in rows.iter().zip(&predicted) {
        w.write_record([
            cohort.ids[i].clone(),
            fold.to_string(),
            cohort.ages[i].to_string(),
            p.to_string(),
        ])
        .map_err(|e| StageError::csv(&path, e))?;
    }
    w.flush().map_err(|e| StageError::io(&path, e))?;
    let mut inputs = fc_inputs(ctx);
    inputs.push(ctx.layout.model(feature, model, fold));
    Ok(Report {
        inputs,
        outputs: vec![path],
        summary: format!("{} predictions for fold {fold}", predicted.len()),
    })
}

/// The three supported rows of the comparison table.
pub const ALL_EXPERIMENTS: [(FeatureKind, ModelKind); 3] = [
    (FeatureKind::WholeBrain, ModelKind::Cnn),
    (FeatureKind::WholeBrain, ModelKind::Lasso),
    (FeatureKind::InterIcn, ModelKind::Lasso),
];

pub fn evaluate(ctx: &Ctx) -> Result<Report, StageError> {
    let cohort = read_cohort(&ctx.layout)?;
    let folds = read_folds(&ctx.layout, &cohort)?;
    let plan: Vec<(FeatureKind, ModelKind)> = match (ctx.feature, ctx.model) {
        (None, None) => ALL_EXPERIMENTS.to_vec(),
        (f, m) => vec![(
            f.unwrap_or(FeatureKind::WholeBrain),
            m.unwrap_or(if f == Some(FeatureKind::InterIcn) {
                ModelKind::Lasso
            } else {
                ModelKind::Cnn
            }),
        )],
    };
    let out_dir = ctx.layout.results();
    create_dir(&out_dir)?;
    let mut results: Vec<ExperimentResult> = Vec::new();
    let mut outputs = Vec::new();
    for &(feature, model) in &plan {
        if feature == FeatureKind::InterIcn && model == ModelKind::Cnn {
            return Err(StageError::Other(
                "cnn on inter_icn features is not supported".into(),
            ));
        }
        let mut outcomes = Vec::with_capacity(folds.k);
        for f in 0..folds.k {
            let input = load_fold_input(ctx, &cohort, f, feature)?;
            let o = run_fold(
                &cohort.ids,
                &cohort.ages,
                &folds,
                f,
                feature,
                model,
                &ctx.cfg,
                &input,
            )?;
            let dir = ctx.layout.model(feature, model, f);
            save_model(&dir, &o.model, &o.provenance)?;
            outputs.push(dir);
            // Fitted models are on disk; keep only what the table needs.
            outcomes.push(o);
        }
        let res = aggregate(feature, model, outcomes);
        let csv = out_dir.join(format!("{feature}_{model}.csv"));
        write_results_csv(&csv, &[&res])?;
        let preds = out_dir.join(format!("{feature}_{model}_predictions.csv"));
        write_predictions_csv(&preds, &cohort.ids, &res)?;
        outputs.extend([csv, preds]);
        results.push(res);
    }
    let refs: Vec<&ExperimentResult> = results.iter().collect();
    let table = results_table(&refs);
    if plan.len() > 1 {
        let csv = out_dir.join("results.csv");
        write_results_csv(&csv, &refs)?;
        let txt = out_dir.join("results.txt");
        fs::write(&txt, &table).map_err(|e| StageError::io(&txt, e))?;
        outputs.extend([csv, txt]);
    }
    Ok(Report {
        inputs: fc_inputs(ctx),
        outputs,
        summary: table,
    })
}

/// Held-out CNN of every fold, loaded from `evaluate` output.
fn fold_cnns(ctx: &Ctx, k: usize) -> Result<Vec<AgeCnn<f32>>, StageError> {
    (0..k)
        .map(
            |f| match load_model(ctx, FeatureKind::WholeBrain, ModelKind::Cnn, f)? {
                Loaded::Cnn(net) => Ok(*net),
                Loaded::Lasso(_) => unreachable!("cnn requested"),
            },
        )
        .collect()
}

fn cnn_inputs(ctx: &Ctx, k: usize) -> Vec<PathBuf> {
    let mut v = fc_inputs(ctx);
    v.extend((0..k).map(|f| ctx.layout.model(FeatureKind::WholeBrain, ModelKind::Cnn, f)));
    v
}

#[derive(Serialize)]
struct SensitivityFile<'a> {
    subjects: usize,
    channels: usize,
    #[serde(flatten)]
    pca: &'a brainage_core::analysis::SensitivityPca,
}

pub fn sensitivity(ctx: &Ctx) -> Result<Report, StageError> {
    let cohort = read_cohort(&ctx.layout)?;
    let folds = read_folds(&ctx.layout, &cohort)?;
    let nets = fold_cnns(ctx, folds.k)?;
    let n = ctx.cfg.icn.k;
    let mut values = Array2::zeros((n, cohort.ids.len()));
    for (f, net) in nets.iter().enumerate() {
        let FoldFeatures::WholeBrain(images) =
            load_fold_input(ctx, &cohort, f, FeatureKind::WholeBrain)?.features
        else {
            unreachable!("whole-brain features requested")
        };
        let rows = folds.test_indices(f);
        let test: Vec<&FcImage> = rows.iter().map(|&i| &images[i]).collect();
        let cm = sensitivity_change_matrix(net, &test)?;
        for (col, &i) in rows.iter().enumerate() {
            values.column_mut(i).assign(&cm.values.column(col));
        }
    }
    let cm = ChangeMatrix { values };
    let pca = sensitivity_pca(&cm, ctx.cfg.sensitivity.top_k)?;
    let out_dir = ctx.layout.results();
    create_dir(&out_dir)?;
    let json = out_dir.join("sensitivity.json");
    write_json(
        &json,
        &SensitivityFile {
            subjects: cohort.ids.len(),
            channels: n,
            pca: &pca,
        },
    )?;
    let csv_path = out_dir.join("change_matrix.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| StageError::csv(&csv_path, e))?;
    let mut header = vec!["channel".to_string()];
    header.extend(cohort.ids.iter().cloned());
    w.write_record(&header)
        .map_err(|e| StageError::csv(&csv_path, e))?;
    for (c, row) in cm.values.rows().into_iter().enumerate() {
        let mut rec = vec![c.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)
            .map_err(|e| StageError::csv(&csv_path, e))?;
    }
    w.flush().map_err(|e| StageError::io(&csv_path, e))?;
    Ok(Report {
        inputs: cnn_inputs(ctx, folds.k),
        outputs: vec![json, csv_path],
        summary: format!("top channels by |PC1 loading|: {:?}", pca.ranking),
    })
}

fn write_embedding(path: &Path, cohort: &Cohort, coords: &Array2<f64>) -> Result<(), StageError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| StageError::csv(path, e))?;
    w.write_record(["subject_id", "x", "y", "age"])
        .map_err(|e| StageError::csv(path, e))?;
    for (i, id) in cohort.ids.iter().enumerate() {
        w.write_record([
            id.clone(),
            coords[[i, 0]].to_string(),
            coords[[i, 1]].to_string(),
            cohort.ages[i].to_string(),
        ])
        .map_err(|e| StageError::csv(path, e))?;
    }
    w.flush().map_err(|e| StageError::io(path, e))
}

/// Embeds the learned FC1 features (each subject through the CNN that held
/// it out) and the screened whole-brain FC features.
pub fn embed(ctx: &Ctx) -> Result<Report, StageError> {
    let cohort = read_cohort(&ctx.layout)?;
    let folds = read_folds(&ctx.layout, &cohort)?;
    let nets = fold_cnns(ctx, folds.k)?;
    let n = cohort.ids.len();
    let units = ctx.cfg.network.fc1_units;
    let mut learned = Array2::zeros((n, units));
    let mut raw: Vec<Vec<f64>> = vec![Vec::new(); n];
    for (f, net) in nets.iter().enumerate() {
        let FoldFeatures::WholeBrain(images) =
            load_fold_input(ctx, &cohort, f, FeatureKind::WholeBrain)?.features
        else {
            unreachable!("whole-brain features requested")
        };
        let rows = folds.test_indices(f);
        for chunk in rows.chunks(16) {
            let x: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &images[i].data).collect();
            let feats = net.features(&brainage_core::cnn::stack(&x))?;
            for (j, &i) in chunk.iter().enumerate() {
                for (u, v) in feats.outer(j).iter().enumerate() {
                    learned[[i, u]] = *v as f64;
                }
            }
        }
        for &i in &rows {
            raw[i] = brainage_core::baselines::flatten_fc(&images[i]);
        }
    }
    let raw = brainage_core::baselines::feature_matrix(&raw)?;
    let all: Vec<usize> = (0..n).collect();
    let keep = screen_features(raw.view(), &cohort.ages, &all, ctx.cfg.lasso.alpha)?;
    let screened = Array2::from_shape_fn((n, keep.len().max(1)), |(i, j)| {
        keep.get(j).map_or(0.0, |&c| raw[[i, c]])
    });

    let out_dir = ctx.layout.results();
    create_dir(&out_dir)?;
    let mut outputs = Vec::new();
    for (name, x) in [
        ("embedding_cnn.csv", &learned),
        ("embedding_fc.csv", &screened),
    ] {
        let res = tsne_embed(x, &ctx.cfg.tsne)?;
        let path = out_dir.join(name);
        write_embedding(&path, &cohort, &res.coords)?;
        outputs.push(path);
    }
    Ok(Report {
        inputs: cnn_inputs(ctx, folds.k),
        outputs,
        summary: format!(
            "embedded {n} subjects ({units} learned features, {} screened FC features)",
            keep.len()
        ),
    })
}
