use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::TapId;

use super::lbfgs::{lbfgs_minimize, LbfgsConfig, Termination};

/// Floor applied to per-dimension standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// Probe-training design matrix: `N × D` features with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub features: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub tap: Option<TapId>,
}

impl FeatureMatrix {
    pub fn new(
        features: Tensor<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        tap: Option<TapId>,
    ) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "features {:?} do not match {} labels",
                features.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if !features.is_finite() {
            return Err(Error::Numeric("feature matrix contains NaN or Inf".into()));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            tap,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Features for several taps of the same samples.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: BTreeMap<TapId, Tensor<f32>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl FeatureSet {
    pub fn new(
        features: BTreeMap<TapId, Tensor<f32>>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        for (tap, f) in &features {
            if f.shape().len() != 2 || f.rows() != labels.len() {
                return Err(Error::Dimension(format!(
                    "{tap}: {:?} features for {} labels",
                    f.shape(),
                    labels.len()
                )));
            }
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn matrix(&self, tap: &TapId) -> Result<FeatureMatrix> {
        let f = self
            .features
            .get(tap)
            .ok_or_else(|| Error::Tap(format!("no features stored for {tap}")))?;
        FeatureMatrix::new(f.clone(), self.labels.clone(), self.num_classes, Some(*tap))
    }
}

/// Per-dimension affine standardization fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor<f32>) -> Self {
        let (n, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, &v) in mean.iter_mut().zip(x.row(r)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, &v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                let c = v as f64 - m;
                *s += c * c;
            }
        }
        let std = var
            .into_iter()
            .map(|v| (v / n as f64).sqrt().max(STD_FLOOR))
            .collect();
        Self { mean, std }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    /// Standardized copy in double precision.
    pub fn apply(&self, x: &Tensor<f32>) -> Tensor<f64> {
        let d = x.cols();
        let mut out = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            for j in 0..d {
                out.push((x.row(r)[j] as f64 - self.mean[j]) / self.std[j]);
            }
        }
        Tensor::new(x.shape().to_vec(), out).expect("same shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// L2 penalty on the weights (bias unpenalized).
    pub l2: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub history: usize,
    pub c1: f64,
    pub c2: f64,
    /// Standardize features with training statistics before fitting.
    pub standardize: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            tol: 1e-5,
            max_iter: 200,
            history: 10,
            c1: 1e-4,
            c2: 0.9,
            standardize: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2 >= 0.0) {
            return Err(Error::Config(format!("l2 must be >= 0, got {}", self.l2)));
        }
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::Config(format!(
                "line search constants need 0 < c1 < c2 < 1, got c1={} c2={}",
                self.c1, self.c2
            )));
        }
        if self.max_iter == 0 || self.history == 0 {
            return Err(Error::Config(
                "max_iter and history must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn lbfgs(&self) -> LbfgsConfig {
        LbfgsConfig {
            tol: self.tol,
            max_iter: self.max_iter,
            history: self.history,
            c1: self.c1,
            c2: self.c2,
            ..LbfgsConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub final_loss: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    pub termination: Termination,
}

/// Fitted multinomial logistic-regression probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    /// `D × C`
    pub weight: Tensor<f64>,
    pub bias: Vec<f64>,
    pub standardizer: Standardizer,
    pub tap: Option<TapId>,
    pub meta: FitMeta,
}

/// Mean softmax cross-entropy plus `(λ/2)·‖W‖²_F`, with its gradient.
///
/// `w` is `D × C`, `x` is `N × D`.
pub fn softmax_xent_loss_grad(
    w: &[f64],
    b: &[f64],
    x: &[f64],
    y: &[usize],
    l2: f64,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) -> f64 {
    let c = b.len();
    let n = y.len();
    let d = w.len() / c;
    grad_w.iter_mut().for_each(|v| *v = 0.0);
    grad_b.iter_mut().for_each(|v| *v = 0.0);
    let mut z = vec![0.0; c];
    let mut loss = 0.0;
    for (i, &label) in y.iter().enumerate() {
        let xr = &x[i * d..(i + 1) * d];
        z.copy_from_slice(b);
        for (k, &xv) in xr.iter().enumerate() {
            if xv != 0.0 {
                let wr = &w[k * c..(k + 1) * c];
                for (zj, &wv) in z.iter_mut().zip(wr) {
                    *zj += xv * wv;
                }
            }
        }
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for zj in z.iter_mut() {
            *zj = (*zj - max).exp();
            sum += *zj;
        }
        loss += sum.ln() + max - (max + (z[label]).ln());
        // z now holds exp(z - max); turn it into p - onehot.
        for zj in z.iter_mut() {
            *zj /= sum;
        }
        z[label] -= 1.0;
        for (gb, &dz) in grad_b.iter_mut().zip(&z) {
            *gb += dz;
        }
        for (k, &xv) in xr.iter().enumerate() {
            if xv != 0.0 {
                let gr = &mut grad_w[k * c..(k + 1) * c];
                for (g, &dz) in gr.iter_mut().zip(&z) {
                    *g += xv * dz;
                }
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    loss *= inv_n;
    grad_b.iter_mut().for_each(|v| *v *= inv_n);
    let mut sq = 0.0;
    for (g, &wv) in grad_w.iter_mut().zip(w) {
        *g = *g * inv_n + l2 * wv;
        sq += wv * wv;
    }
    loss + 0.5 * l2 * sq
}

/// Tensor-level wrapper: returns `(loss, ∇W, ∇b)`.
pub fn softmax_xent(
    w: &Tensor<f64>,
    b: &[f64],
    x: &Tensor<f64>,
    y: &[usize],
    l2: f64,
) -> Result<(f64, Tensor<f64>, Vec<f64>)> {
    if w.shape().len() != 2
        || w.shape()[1] != b.len()
        || x.cols() != w.shape()[0]
        || x.rows() != y.len()
    {
        return Err(Error::Dimension(format!(
            "W {:?}, b [{}], X {:?}, {} labels",
            w.shape(),
            b.len(),
            x.shape(),
            y.len()
        )));
    }
    if let Some(&l) = y.iter().find(|&&l| l >= b.len()) {
        return Err(Error::Data(format!("label {l} out of range")));
    }
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; b.len()];
    let loss = softmax_xent_loss_grad(w.data(), b, x.data(), y, l2, &mut gw, &mut gb);
    Ok((loss, Tensor::new(w.shape().to_vec(), gw)?, gb))
}

/// Fits a probe from `W = 0, b = 0`.
pub fn fit_probe(train: &FeatureMatrix, cfg: &FitConfig) -> Result<ProbeModel> {
    let d = train.dim();
    let c = train.num_classes;
    fit_probe_from(train, cfg, &vec![0.0; d * c + c])
}

/// Fits a probe starting from the flattened parameter vector `[W (D×C, row-major), b (C)]`.
pub fn fit_probe_from(train: &FeatureMatrix, cfg: &FitConfig, init: &[f64]) -> Result<ProbeModel> {
    cfg.validate()?;
    let d = train.dim();
    let c = train.num_classes;
    if init.len() != d * c + c {
        return Err(Error::Dimension(format!(
            "initial parameters have length {}, expected {}",
            init.len(),
            d * c + c
        )));
    }
    let mut present = vec![false; c];
    train.labels.iter().for_each(|&l| present[l] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::Fit(
            "training labels contain fewer than two classes".into(),
        ));
    }
    let standardizer = if cfg.standardize {
        Standardizer::fit(&train.features)
    } else {
        Standardizer::identity(d)
    };
    let x = standardizer.apply(&train.features);
    let y = &train.labels;
    let l2 = cfg.l2;
    let res = lbfgs_minimize(
        |theta, grad| {
            let (w, b) = theta.split_at(d * c);
            let (gw, gb) = grad.split_at_mut(d * c);
            softmax_xent_loss_grad(w, b, x.data(), y, l2, gw, gb)
        },
        init,
        &cfg.lbfgs(),
    );
    if !res.f.is_finite() {
        return Err(Error::Numeric(format!(
            "probe objective diverged for {:?}",
            train.tap
        )));
    }
    let (w, b) = res.x.split_at(d * c);
    Ok(ProbeModel {
        weight: Tensor::new(vec![d, c], w.to_vec())?,
        bias: b.to_vec(),
        standardizer,
        tap: train.tap,
        meta: FitMeta {
            final_loss: res.f,
            iterations: res.iterations,
            converged: res.converged,
            grad_norm: res.grad_norm,
            termination: res.termination,
        },
    })
}

impl ProbeModel {
    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Logits for raw (unstandardized) feature rows.
    pub fn logits(&self, features: &Tensor<f32>) -> Result<Tensor<f64>> {
        if features.cols() != self.dim() {
            return Err(Error::Evaluation(format!(
                "features have width {}, probe expects {}",
                features.cols(),
                self.dim()
            )));
        }
        let x = self.standardizer.apply(features);
        let c = self.num_classes();
        let mut out = Vec::with_capacity(x.rows() * c);
        for r in 0..x.rows() {
            let mut z = self.bias.clone();
            for (k, &xv) in x.row(r).iter().enumerate() {
                for (zj, &wv) in z.iter_mut().zip(self.weight.row(k)) {
                    *zj += xv * wv;
                }
            }
            out.extend(z);
        }
        Tensor::new(vec![x.rows(), c], out)
    }

    /// Argmax predictions; ties go to the lowest class index.
    pub fn predict(&self, features: &Tensor<f32>) -> Result<Vec<usize>> {
        let logits = self.logits(features)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }
}

/// Index of the first maximal entry.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of test rows whose argmax prediction equals the label.
pub fn evaluate_accuracy(model: &ProbeModel, test: &FeatureMatrix) -> Result<f64> {
    if test.num_classes != model.num_classes() {
        return Err(Error::Evaluation(format!(
            "test set has {} classes, probe has {}",
            test.num_classes,
            model.num_classes()
        )));
    }
    if test.is_empty() {
        return Err(Error::Evaluation("empty test set".into()));
    }
    let pred = model.predict(&test.features)?;
    let correct = pred
        .iter()
        .zip(&test.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(rows: &[[f32; 2]], labels: &[usize], c: usize) -> FeatureMatrix {
        let data = rows.iter().flatten().copied().collect();
        FeatureMatrix::new(
            Tensor::new(vec![rows.len(), 2], data).unwrap(),
            labels.to_vec(),
            c,
            None,
        )
        .unwrap()
    }

    #[test]
    fn zero_model_loss_is_log_c() {
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap();
        let w = Tensor::zeros(&[2, 4]);
        let (loss, _, _) = softmax_xent(&w, &[0.0; 4], &x, &[0, 3, 1], 0.3).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn l2_term_is_additive() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let w = Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 0.5, 0.0, -0.4]).unwrap();
        let b = [0.1, 0.0, -0.1];
        let (l1, _, _) = softmax_xent(&w, &b, &x, &[0, 2], 0.01).unwrap();
        let (l2, _, _) = softmax_xent(&w, &b, &x, &[0, 2], 0.02).unwrap();
        let sq: f64 = w.data().iter().map(|v| v * v).sum();
        assert!(((l2 - l1) - 0.005 * sq).abs() < 1e-15);
    }

    #[test]
    fn single_class_is_rejected() {
        let train = fm(&[[0.0, 1.0], [1.0, 0.0]], &[1, 1], 3);
        assert!(matches!(
            fit_probe(&train, &FitConfig::default()),
            Err(Error::Fit(_))
        ));
    }

    #[test]
    fn evaluation_hand_cases() {
        // W picks out the first coordinate for class 0, second for class 1.
        let model = ProbeModel {
            weight: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: vec![0.0, 0.0],
            standardizer: Standardizer::identity(2),
            tap: None,
            meta: FitMeta {
                final_loss: 0.0,
                iterations: 0,
                converged: true,
                grad_norm: 0.0,
                termination: Termination::GradientTolerance,
            },
        };
        // rows: (3,1) -> 0, (0,2) -> 1, (1,1) -> tie -> 0
        let test = fm(&[[3.0, 1.0], [0.0, 2.0], [1.0, 1.0]], &[0, 1, 1], 2);
        assert_eq!(model.predict(&test.features).unwrap(), vec![0, 1, 0]);
        assert!((evaluate_accuracy(&model, &test).unwrap() - 2.0 / 3.0).abs() < 1e-15);

        let mut zero = model.clone();
        zero.weight.fill(0.0);
        let balanced = fm(
            &[[1.0, 0.0], [0.0, 1.0], [2.0, 2.0], [5.0, 1.0]],
            &[0, 1, 0, 1],
            2,
        );
        assert_eq!(evaluate_accuracy(&zero, &balanced).unwrap(), 0.5);

        let wide = FeatureMatrix::new(Tensor::zeros(&[1, 3]), vec![0], 2, None).unwrap();
        assert!(matches!(
            evaluate_accuracy(&model, &wide),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn feature_matrix_validation() {
        assert!(FeatureMatrix::new(Tensor::zeros(&[2, 2]), vec![0], 2, None).is_err());
        assert!(FeatureMatrix::new(Tensor::zeros(&[1, 2]), vec![5], 2, None).is_err());
        let nan = Tensor::new(vec![1, 1], vec![f32::NAN]).unwrap();
        assert!(FeatureMatrix::new(nan, vec![0], 2, None).is_err());
    }
}
