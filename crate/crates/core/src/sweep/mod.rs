//! Layer×module probing study: extract features at every tap, fit one probe
//! per tap, and reduce the accuracies to depth profiles and per-module bests.

mod plot;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrupt::CorruptionSpec;
use crate::data::{load_dataset, preprocess_eval, Dataset};
use crate::error::{Error, Result};
use crate::io::{load_features, load_weights, save_features};
use crate::probe::{evaluate_accuracy, fit_probe, FeatureSet, FitConfig, Termination};
use crate::tensor::Tensor;
use crate::vit::{forward_collect, ModelConfig, ModelWeights, Module, TapId};

pub use plot::depth_profile_svg;
pub use report::{
    best_per_module_table, read_report_csv, write_best_table_csv, write_report_csv, BestRow,
    ReportRow,
};

/// Default gap threshold of [`ood_signature`].
pub const OOD_TAU: f64 = 0.02;

/// Images per forward chunk during extraction.
const EXTRACT_CHUNK: usize = 256;

/// Inputs of a full sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub weights: PathBuf,
    pub train_data: PathBuf,
    pub test_data: PathBuf,
    /// `None` selects all `8·L` taps.
    pub taps: Option<Vec<TapId>>,
    pub fit: FitConfig,
    pub seed: u64,
    /// Directory the extracted features are spilled to before fitting.
    pub feature_dir: Option<PathBuf>,
}

/// Test accuracy per (layer, module), with the depth axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    /// `entries[layer][module.index()]`
    pub entries: Vec<[Option<f64>; 8]>,
    pub depth_pct: Vec<f64>,
}

impl AccuracyMatrix {
    pub fn new(num_layers: usize) -> Self {
        Self {
            entries: vec![[None; 8]; num_layers],
            depth_pct: (0..num_layers)
                .map(|l| 100.0 * (l + 1) as f64 / num_layers as f64)
                .collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, layer: usize, module: Module) -> Option<f64> {
        self.entries.get(layer)?[module.index()]
    }

    pub fn set(&mut self, tap: TapId, accuracy: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::Evaluation(format!(
                "accuracy {accuracy} for {tap} is outside [0, 1]"
            )));
        }
        let row = self.entries.get_mut(tap.block).ok_or_else(|| {
            Error::Tap(format!("{tap} is beyond the matrix depth"))
        })?;
        row[tap.module.index()] = Some(accuracy);
        Ok(())
    }

    /// Accuracy over layers for one module, if every layer has an entry.
    pub fn profile(&self, module: Module) -> Option<Vec<f64>> {
        self.entries.iter().map(|r| r[module.index()]).collect()
    }

    /// Modules with at least one entry, in dataflow order.
    pub fn modules(&self) -> Vec<Module> {
        Module::ALL
            .into_iter()
            .filter(|m| self.entries.iter().any(|r| r[m.index()].is_some()))
            .collect()
    }
}

/// Maximum over layers per module; ties go to the earliest layer. Modules
/// without a complete profile are left out.
pub fn best_per_module(matrix: &AccuracyMatrix) -> BTreeMap<Module, (f64, usize)> {
    let mut out = BTreeMap::new();
    for m in Module::ALL {
        if let Some(p) = matrix.profile(m) {
            let mut best = (p[0], 0);
            for (l, &a) in p.iter().enumerate().skip(1) {
                if a > best.0 {
                    best = (a, l);
                }
            }
            out.insert(m, best);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    IdLike,
    OodLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodSignature {
    pub verdict: Verdict,
    /// Best accuracy over layers minus the final layer's.
    pub gap: f64,
    pub best_layer: usize,
}

/// Descriptive heuristic: a profile that peaks before the final layer by more
/// than `tau` looks out-of-distribution.
pub fn ood_signature(matrix: &AccuracyMatrix, module: Module, tau: f64) -> Option<OodSignature> {
    let profile = matrix.profile(module)?;
    let (best, best_layer) = *best_per_module(matrix).get(&module)?;
    let gap = best - profile[profile.len() - 1];
    Some(OodSignature {
        verdict: if gap > tau {
            Verdict::OodLike
        } else {
            Verdict::IdLike
        },
        gap,
        best_layer,
    })
}

/// Outcome of one probe fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapResult {
    pub tap: TapId,
    pub accuracy: f64,
    pub converged: bool,
    pub iterations: usize,
    pub final_loss: f64,
    pub termination: Option<Termination>,
    /// Set when the fit itself errored.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub matrix: AccuracyMatrix,
    pub dataset: String,
    pub corruption: Option<CorruptionSpec>,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    /// One entry per tap, in tap order.
    pub fits: Vec<TapResult>,
    pub wall_clock_seconds: f64,
}

impl SweepReport {
    /// CSV rows in tap order.
    pub fn rows(&self) -> Vec<ReportRow> {
        let (kind, severity) = match &self.corruption {
            Some(c) => (c.kind.name().to_string(), c.severity),
            None => ("none".to_string(), 0),
        };
        self.fits
            .iter()
            .map(|f| ReportRow {
                dataset: self.dataset.clone(),
                corruption_kind: kind.clone(),
                severity,
                layer: f.tap.block,
                module: f.tap.module,
                depth_pct: self.matrix.depth_pct[f.tap.block],
                accuracy: f.accuracy,
                n_train: self.n_train,
                n_test: self.n_test,
                converged: f.converged,
                seed: self.seed,
            })
            .collect()
    }
}

/// CLS features of a dataset at the given taps, captured in one pass over
/// eval-preprocessed images.
pub fn extract_features(
    data: &Dataset,
    w: &ModelWeights<f32>,
    cfg: &ModelConfig,
    taps: &[TapId],
) -> Result<FeatureSet> {
    if data.batch.image_size() != cfg.image_size {
        return Err(Error::Data(format!(
            "images are {}px, the model expects {}px",
            data.batch.image_size(),
            cfg.image_size
        )));
    }
    let images = preprocess_eval(data.images())?;
    let len = cfg.image_len();
    let mut columns: BTreeMap<TapId, Vec<f32>> = taps.iter().map(|&t| (t, Vec::new())).collect();
    for chunk in images.data().chunks(EXTRACT_CHUNK * len) {
        let n = chunk.len() / len;
        let batch = Tensor::new(
            vec![n, cfg.channels, cfg.image_size, cfg.image_size],
            chunk.to_vec(),
        )?;
        let collected = forward_collect(&batch, w, cfg, taps)?;
        for (tap, f) in collected.features {
            columns.get_mut(&tap).expect("requested tap").extend(f.data());
        }
    }
    let n = data.len();
    let features = columns
        .into_iter()
        .map(|(tap, v)| Ok((tap, Tensor::new(vec![n, tap.width(cfg)], v)?)))
        .collect::<Result<_>>()?;
    FeatureSet::new(features, data.labels().to_vec(), data.num_classes())
}

/// Fits and evaluates one probe per tap, in parallel over taps.
///
/// A fit that errors is recorded as not converged, with the accuracy of the
/// all-zero starting probe (which predicts class 0).
pub fn probe_taps(
    train: &FeatureSet,
    test: &FeatureSet,
    taps: &[TapId],
    fit: &FitConfig,
) -> Result<Vec<TapResult>> {
    fit.validate()?;
    if train.num_classes != test.num_classes {
        return Err(Error::Data(format!(
            "train has {} classes, test has {}",
            train.num_classes, test.num_classes
        )));
    }
    taps.par_iter()
        .map(|&tap| {
            let tr = train.matrix(&tap)?;
            let te = test.matrix(&tap)?;
            match fit_probe(&tr, fit) {
                Ok(model) => Ok(TapResult {
                    tap,
                    accuracy: evaluate_accuracy(&model, &te)?,
                    converged: model.meta.converged,
                    iterations: model.meta.iterations,
                    final_loss: model.meta.final_loss,
                    termination: Some(model.meta.termination),
                    error: None,
                }),
                Err(e @ (Error::Fit(_) | Error::Numeric(_))) => {
                    if te.is_empty() {
                        return Err(Error::Evaluation("empty test set".into()));
                    }
                    let zeros = te.labels.iter().filter(|&&l| l == 0).count();
                    Ok(TapResult {
                        tap,
                        accuracy: zeros as f64 / te.len() as f64,
                        converged: false,
                        iterations: 0,
                        final_loss: f64::NAN,
                        termination: None,
                        error: Some(e.to_string()),
                    })
                }
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Sweep over in-memory weights and datasets. The dataset name and corruption
/// recorded in the report come from the test split.
pub fn sweep_datasets(
    w: &ModelWeights<f32>,
    cfg: &ModelConfig,
    train: &Dataset,
    test: &Dataset,
    taps: &[TapId],
    fit: &FitConfig,
    seed: u64,
    feature_dir: Option<&Path>,
) -> Result<SweepReport> {
    let start = Instant::now();
    for t in taps {
        t.validate(cfg)?;
    }
    let mut taps = taps.to_vec();
    taps.sort();
    taps.dedup();
    let train_fs = extract_features(train, w, cfg, &taps)?;
    let test_fs = extract_features(test, w, cfg, &taps)?;
    let (train_fs, test_fs) = match feature_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
            let (a, b) = (dir.join("train.vitf"), dir.join("test.vitf"));
            save_features(&a, &train_fs, serde_json::json!({"split": "train"}))?;
            save_features(&b, &test_fs, serde_json::json!({"split": "test"}))?;
            (load_features(&a)?, load_features(&b)?)
        }
        None => (train_fs, test_fs),
    };
    log::info!("fitting {} probes on {} train / {} test samples", taps.len(), train.len(), test.len());
    let fits = probe_taps(&train_fs, &test_fs, &taps, fit)?;
    for f in fits.iter().filter(|f| !f.converged) {
        log::debug!("{} not converged after {} iterations: {:?}", f.tap, f.iterations, f.termination);
    }
    let mut matrix = AccuracyMatrix::new(cfg.num_blocks);
    for f in &fits {
        matrix.set(f.tap, f.accuracy)?;
    }
    Ok(SweepReport {
        matrix,
        dataset: test.manifest.name.clone(),
        corruption: test.manifest.corruption,
        n_train: train.len(),
        n_test: test.len(),
        seed,
        fits,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Loads the model and both splits named by the plan and runs the sweep.
pub fn run_sweep(plan: &SweepPlan) -> Result<SweepReport> {
    let (w, cfg) = load_weights(&plan.weights)?;
    let train = load_dataset(&plan.train_data)?;
    let test = load_dataset(&plan.test_data)?;
    let taps = plan.taps.clone().unwrap_or_else(|| TapId::all(&cfg));
    sweep_datasets(
        &w,
        &cfg,
        &train,
        &test,
        &taps,
        &plan.fit,
        plan.seed,
        plan.feature_dir.as_deref(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix_from(profile: &[f64], module: Module) -> AccuracyMatrix {
        let mut m = AccuracyMatrix::new(profile.len());
        for (l, &a) in profile.iter().enumerate() {
            m.set(TapId::new(l, module), a).unwrap();
        }
        m
    }

    #[test]
    fn best_and_ties() {
        let m = matrix_from(&[0.1, 0.9, 0.5], Module::FC1);
        assert_eq!(best_per_module(&m)[&Module::FC1], (0.9, 1));
        assert_eq!(best_per_module(&m).len(), 1);

        let mut c = AccuracyMatrix::new(4);
        for t in TapId::all(&ModelConfig {
            num_blocks: 4,
            ..ModelConfig::toy()
        }) {
            c.set(t, 0.7).unwrap();
        }
        let best = best_per_module(&c);
        assert_eq!(best.len(), 8);
        assert!(best.values().all(|&b| b == (0.7, 0)));
    }

    #[test]
    fn signature_examples() {
        let m = matrix_from(&[0.2, 0.4, 0.6, 0.9], Module::RC2);
        let s = ood_signature(&m, Module::RC2, OOD_TAU).unwrap();
        assert_eq!((s.verdict, s.gap), (Verdict::IdLike, 0.0));

        let m = matrix_from(&[0.5, 0.8, 0.75, 0.7], Module::RC2);
        let s = ood_signature(&m, Module::RC2, OOD_TAU).unwrap();
        assert_eq!(s.verdict, Verdict::OodLike);
        assert!((s.gap - 0.1).abs() < 1e-12);
        assert_eq!(s.best_layer, 1);
        assert!(ood_signature(&m, Module::FC2, OOD_TAU).is_none());
    }

    #[test]
    fn depth_axis() {
        let m = AccuracyMatrix::new(6);
        assert!(m.depth_pct.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(*m.depth_pct.last().unwrap(), 100.0);
        assert!(AccuracyMatrix::new(2).set(TapId::new(0, Module::LN1), 1.5).is_err());
        assert!(AccuracyMatrix::new(2).set(TapId::new(2, Module::LN1), 0.5).is_err());
    }
}
