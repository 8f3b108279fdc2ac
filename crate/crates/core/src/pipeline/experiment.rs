use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::config::{IcnScope, PipelineConfig};
use crate::analysis::{mean_std, metrics, AgePredictor, AnalysisError, FoldAssignment, Metrics};
use crate::baselines::{
    feature_matrix, fit_lasso, flatten_fc, screen_features, select_lambda_nested, LambdaSelection,
    LassoError, LassoModel, Stopping,
};
use crate::cnn::{train, AgeCnn, NetError, Sample, TraceRow, TrainError};
use crate::fc::FcImage;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    InterIcn,
    WholeBrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Lasso,
    Cnn,
}

macro_rules! text_enum {
    ($t:ty, $($v:ident => $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($s => Ok(Self::$v),)+
                    _ => Err(format!("unknown value {s:?}")),
                }
            }
        }
    };
}

text_enum!(FeatureKind, InterIcn => "inter_icn", WholeBrain => "whole_brain");
text_enum!(ModelKind, Lasso => "lasso", Cnn => "cnn");

/// Per-subject features computed with one fold's ICN maps, in cohort order.
#[derive(Debug, Clone)]
pub enum FoldFeatures {
    WholeBrain(Vec<FcImage>),
    InterIcn(Vec<Vec<f64>>),
}

impl FoldFeatures {
    pub fn len(&self) -> usize {
        match self {
            Self::WholeBrain(v) => v.len(),
            Self::InterIcn(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> FeatureKind {
        match self {
            Self::WholeBrain(_) => FeatureKind::WholeBrain,
            Self::InterIcn(_) => FeatureKind::InterIcn,
        }
    }

    /// `subjects × features` design matrix.
    pub fn matrix(&self) -> Array2<f64> {
        let rows: Vec<Vec<f64>> = match self {
            Self::WholeBrain(v) => v.iter().map(flatten_fc).collect(),
            Self::InterIcn(v) => v.clone(),
        };
        feature_matrix(&rows).expect("subjects share a feature length")
    }
}

#[derive(Debug, Clone)]
pub struct FoldInput {
    pub features: FoldFeatures,
    /// Subjects the group ICN maps behind `features` were fit on.
    pub icn_trained_on: Vec<String>,
}

/// Which subjects shaped a fitted object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub trained_on: Vec<String>,
}

impl Provenance {
    fn new(stage: &str, ids: &[String], rows: &[usize]) -> Self {
        Self {
            stage: stage.to_string(),
            trained_on: rows.iter().map(|&i| ids[i].clone()).collect(),
        }
    }

    /// Errors if any held-out subject shaped this object.
    pub fn check_disjoint(&self, held_out: &[String]) -> Result<(), ExperimentError> {
        match held_out.iter().find(|id| self.trained_on.contains(id)) {
            Some(id) => Err(ExperimentError::Leakage {
                stage: self.stage.clone(),
                subject: id.clone(),
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("{model} on {feature} features is not supported")]
    Unsupported {
        feature: FeatureKind,
        model: ModelKind,
    },
    #[error("ages have zero variance")]
    ZeroVarianceTarget,
    #[error("{0}")]
    Input(String),
    #[error("test subject {subject} influenced the {stage} fit")]
    Leakage { stage: String, subject: String },
    #[error(transparent)]
    Lasso(#[from] LassoError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
}

#[derive(Debug, Clone)]
pub enum FittedModel {
    Lasso {
        model: LassoModel,
        selection: LambdaSelection,
    },
    Cnn {
        net: Box<AgeCnn<f32>>,
        trace: Vec<TraceRow>,
    },
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    /// Cohort indices of the held-out subjects.
    pub test_index: Vec<usize>,
    pub predicted: Vec<f64>,
    pub truth: Vec<f64>,
    pub metrics: Metrics,
    /// Std of per-subject absolute errors within the fold.
    pub abs_err_std: f64,
    pub model: FittedModel,
    pub provenance: Vec<Provenance>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub r_mean: f64,
    pub r_std: f64,
    /// Mean and std of the per-fold MAEs.
    pub mae_mean: f64,
    pub mae_std: f64,
    /// Mean and std over every subject's absolute error.
    pub abs_err_mean: f64,
    pub abs_err_std: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub feature: FeatureKind,
    pub model: ModelKind,
    pub folds: Vec<FoldOutcome>,
    pub aggregate: Aggregate,
}

fn abs_errors(pred: &[f64], truth: &[f64]) -> Vec<f64> {
    pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).collect()
}

fn check_inputs(
    ids: &[String],
    ages: &[f64],
    folds: &FoldAssignment,
    feature: FeatureKind,
    model: ModelKind,
) -> Result<(), ExperimentError> {
    if feature == FeatureKind::InterIcn && model == ModelKind::Cnn {
        return Err(ExperimentError::Unsupported { feature, model });
    }
    if ids.len() != ages.len() || folds.fold_of.len() != ids.len() {
        return Err(ExperimentError::Input(format!(
            "{} ids, {} ages, {} fold labels",
            ids.len(),
            ages.len(),
            folds.fold_of.len()
        )));
    }
    if ages.iter().any(|a| !a.is_finite()) {
        return Err(ExperimentError::Input("non-finite age".into()));
    }
    if ages.iter().all(|&a| a == ages[0]) {
        return Err(ExperimentError::ZeroVarianceTarget);
    }
    Ok(())
}

/// Trains on every fold but `fold` and predicts the held-out subjects.
#[allow(clippy::too_many_arguments)]
pub fn run_fold(
    ids: &[String],
    ages: &[f64],
    folds: &FoldAssignment,
    fold: usize,
    feature: FeatureKind,
    model: ModelKind,
    cfg: &PipelineConfig,
    input: &FoldInput,
) -> Result<FoldOutcome, ExperimentError> {
    check_inputs(ids, ages, folds, feature, model)?;
    if fold >= folds.k {
        return Err(ExperimentError::Input(format!(
            "fold {fold} out of range (k = {})",
            folds.k
        )));
    }
    if input.features.kind() != feature || input.features.len() != ids.len() {
        return Err(ExperimentError::Input(format!(
            "fold {fold}: expected {} {feature} feature sets, got {} {}",
            ids.len(),
            input.features.len(),
            input.features.kind()
        )));
    }
    let train_rows = folds.train_indices(fold);
    let test_rows = folds.test_indices(fold);
    let held_out: Vec<String> = test_rows.iter().map(|&i| ids[i].clone()).collect();

    let mut provenance = Vec::new();
    if cfg.icn.scope == IcnScope::TrainingFold {
        let icn = Provenance {
            stage: "icn_group".into(),
            trained_on: input.icn_trained_on.clone(),
        };
        icn.check_disjoint(&held_out)?;
        provenance.push(icn);
    }

    let (fitted, predicted) = match (model, &input.features) {
        (ModelKind::Lasso, features) => fit_lasso_fold(
            ids,
            ages,
            features,
            &train_rows,
            &test_rows,
            fold,
            cfg,
            &mut provenance,
        )?,
        (ModelKind::Cnn, FoldFeatures::WholeBrain(images)) => fit_cnn_fold(
            ids,
            ages,
            images,
            &train_rows,
            &test_rows,
            fold,
            cfg,
            &mut provenance,
        )?,
        (ModelKind::Cnn, FoldFeatures::InterIcn(_)) => unreachable!("rejected by check_inputs"),
    };
    for p in &provenance {
        p.check_disjoint(&held_out)?;
    }
    let truth: Vec<f64> = test_rows.iter().map(|&i| ages[i]).collect();
    let m = metrics(&predicted, &truth)?;
    let (_, abs_err_std) = mean_std(&abs_errors(&predicted, &truth));
    Ok(FoldOutcome {
        fold,
        test_index: test_rows,
        predicted,
        truth,
        metrics: m,
        abs_err_std,
        model: fitted,
        provenance,
    })
}

/// Folds combined in fold order.
pub fn aggregate(
    feature: FeatureKind,
    model: ModelKind,
    folds: Vec<FoldOutcome>,
) -> ExperimentResult {
    let rs: Vec<f64> = folds.iter().map(|o| o.metrics.r).collect();
    let maes: Vec<f64> = folds.iter().map(|o| o.metrics.mae).collect();
    let errs: Vec<f64> = folds
        .iter()
        .flat_map(|o| abs_errors(&o.predicted, &o.truth))
        .collect();
    let (r_mean, r_std) = mean_std(&rs);
    let (mae_mean, mae_std) = mean_std(&maes);
    let (abs_err_mean, abs_err_std) = mean_std(&errs);
    ExperimentResult {
        feature,
        model,
        folds,
        aggregate: Aggregate {
            n: errs.len(),
            r_mean,
            r_std,
            mae_mean,
            mae_std,
            abs_err_mean,
            abs_err_std,
        },
    }
}

/// Outer k-fold evaluation. `load(f)` supplies the features computed with
/// fold `f`'s ICN maps; every fitted object is checked against the fold's
/// held-out subjects before it is used to predict.
pub fn run_experiment(
    ids: &[String],
    ages: &[f64],
    folds: &FoldAssignment,
    feature: FeatureKind,
    model: ModelKind,
    cfg: &PipelineConfig,
    load: &mut dyn FnMut(usize) -> Result<FoldInput, ExperimentError>,
) -> Result<ExperimentResult, ExperimentError> {
    check_inputs(ids, ages, folds, feature, model)?;
    let mut outcomes = Vec::with_capacity(folds.k);
    for f in 0..folds.k {
        let input = load(f)?;
        outcomes.push(run_fold(ids, ages, folds, f, feature, model, cfg, &input)?);
    }
    Ok(aggregate(feature, model, outcomes))
}

#[allow(clippy::too_many_arguments)]
fn fit_lasso_fold(
    ids: &[String],
    ages: &[f64],
    features: &FoldFeatures,
    train_rows: &[usize],
    test_rows: &[usize],
    fold: usize,
    cfg: &PipelineConfig,
    provenance: &mut Vec<Provenance>,
) -> Result<(FittedModel, Vec<f64>), ExperimentError> {
    let x = features.matrix();
    let l = &cfg.lasso;
    let inner_seed = rng::stream_seed(cfg.cv.seed, rng::tag("inner_folds") ^ fold as u64);
    let selection = select_lambda_nested(
        x.view(),
        ages,
        train_rows,
        l.inner_folds,
        l.alpha,
        Stopping {
            tol: l.tol,
            max_passes: l.max_passes,
        },
        inner_seed,
    )?;
    provenance.push(Provenance::new("lambda_selection", ids, train_rows));
    let cols = screen_features(x.view(), ages, train_rows, l.alpha)?;
    provenance.push(Provenance::new("screening", ids, train_rows));
    let fit = fit_lasso(
        x.view(),
        ages,
        train_rows,
        &cols,
        selection.lambda,
        l.tol,
        l.max_passes,
    )?;
    provenance.push(Provenance::new("lasso", ids, train_rows));
    let predicted = fit.model.predict(x.view(), test_rows);
    Ok((
        FittedModel::Lasso {
            model: fit.model,
            selection,
        },
        predicted,
    ))
}

#[allow(clippy::too_many_arguments)]
fn fit_cnn_fold(
    ids: &[String],
    ages: &[f64],
    images: &[FcImage],
    train_rows: &[usize],
    test_rows: &[usize],
    fold: usize,
    cfg: &PipelineConfig,
    provenance: &mut Vec<Provenance>,
) -> Result<(FittedModel, Vec<f64>), ExperimentError> {
    let mut net_cfg = cfg.network.clone();
    net_cfg.init_seed = rng::stream_seed(cfg.network.init_seed, fold as u64);
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = rng::stream_seed(cfg.train.seed, fold as u64);
    let mut net = AgeCnn::<f32>::new(&net_cfg)?;
    let samples: Vec<Sample<'_>> = train_rows
        .iter()
        .map(|&i| Sample {
            id: &ids[i],
            image: &images[i].data,
            age: ages[i],
        })
        .collect();
    let trace = train(&mut net, &samples, &train_cfg)?;
    // Weights and batch-norm statistics both come from these rows only.
    provenance.push(Provenance::new("cnn", ids, train_rows));
    let test_images: Vec<_> = test_rows.iter().map(|&i| &images[i].data).collect();
    let predicted = net.predict_images(&test_images)?;
    Ok((
        FittedModel::Cnn {
            net: Box::new(net),
            trace,
        },
        predicted,
    ))
}

pub const RESULTS_HEADER: [&str; 10] = [
    "feature_kind",
    "model_kind",
    "fold",
    "n_test",
    "r",
    "r_std",
    "mae",
    "mae_std",
    "abs_err_mean",
    "abs_err_std",
];

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::Csv {
        path: path.display().to_string(),
        source: e,
    }
}

/// One row per fold plus an `all` row. Per-fold rows leave the across-fold
/// spreads empty.
pub fn write_results_csv(
    path: &Path,
    results: &[&ExperimentResult],
) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(RESULTS_HEADER).map_err(csv_err(path))?;
    for res in results {
        let (fk, mk) = (res.feature.to_string(), res.model.to_string());
        for o in &res.folds {
            w.write_record([
                fk.clone(),
                mk.clone(),
                o.fold.to_string(),
                o.truth.len().to_string(),
                o.metrics.r.to_string(),
                String::new(),
                o.metrics.mae.to_string(),
                String::new(),
                o.metrics.mae.to_string(),
                o.abs_err_std.to_string(),
            ])
            .map_err(csv_err(path))?;
        }
        let a = &res.aggregate;
        w.write_record([
            fk,
            mk,
            "all".to_string(),
            a.n.to_string(),
            a.r_mean.to_string(),
            a.r_std.to_string(),
            a.mae_mean.to_string(),
            a.mae_std.to_string(),
            a.abs_err_mean.to_string(),
            a.abs_err_std.to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| ExperimentError::Csv {
        path: path.display().to_string(),
        source: e.into(),
    })
}

/// `subject_id,fold,age,predicted` in cohort order.
pub fn write_predictions_csv(
    path: &Path,
    ids: &[String],
    result: &ExperimentResult,
) -> Result<(), ExperimentError> {
    let mut rows: Vec<(usize, usize, f64, f64)> = result
        .folds
        .iter()
        .flat_map(|o| {
            o.test_index
                .iter()
                .zip(o.truth.iter().zip(&o.predicted))
                .map(move |(&i, (&t, &p))| (i, o.fold, t, p))
        })
        .collect();
    rows.sort_by_key(|r| r.0);
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["subject_id", "fold", "age", "predicted"])
        .map_err(csv_err(path))?;
    for (i, f, t, p) in rows {
        w.write_record([ids[i].clone(), f.to_string(), t.to_string(), p.to_string()])
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| ExperimentError::Csv {
        path: path.display().to_string(),
        source: e.into(),
    })
}

/// Human-readable summary table, one line per experiment.
pub fn results_table(results: &[&ExperimentResult]) -> String {
    let mut out = format!(
        "{:<12} {:<6} {:>17} {:>17} {:>17}\n",
        "features", "model", "r (folds)", "MAE (folds)", "MAE (subjects)"
    );
    for res in results {
        let a = &res.aggregate;
        out.push_str(&format!(
            "{:<12} {:<6} {:>8.3} ± {:<6.3} {:>8.3} ± {:<6.3} {:>8.3} ± {:<6.3}\n",
            res.feature.to_string(),
            res.model.to_string(),
            a.r_mean,
            a.r_std,
            a.mae_mean,
            a.mae_std,
            a.abs_err_mean,
            a.abs_err_std
        ));
    }
    out
}
