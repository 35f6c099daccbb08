//! L2-regularized multinomial logistic regression.
//!
//! Objective: mean softmax cross-entropy + (lambda/2)·‖W‖², bias unregularized.
//! Minimized full-batch with L-BFGS and a halving Armijo line search, so every
//! accepted step decreases the objective. The problem is strictly convex in W
//! for lambda > 0, so the solution does not depend on the starting point.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LogRegError {
    #[error("class {0} has no training examples")]
    MissingClass(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite feature at row {row}, column {col}")]
    NonFiniteFeature { row: usize, col: usize },
    #[error("feature dimension {found} does not match model dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{0}")]
    BadInput(String),
}

/// Dense row-major matrix of f64 features.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Features {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LogRegError> {
        if data.len() != rows * cols {
            return Err(LogRegError::BadInput(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Features { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, LogRegError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.as_ref().len() != cols {
                return Err(LogRegError::DimensionMismatch {
                    expected: cols,
                    found: r.as_ref().len(),
                });
            }
            data.extend_from_slice(r.as_ref());
        }
        Ok(Features {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// New matrix made of the given rows, in order.
    pub fn select(&self, idx: &[usize]) -> Features {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Features {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRegModel {
    /// `classes x dim`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub classes: usize,
    pub dim: usize,
    pub lambda: f64,
}

impl LogRegModel {
    pub fn zeros(classes: usize, dim: usize, lambda: f64) -> Self {
        LogRegModel {
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
            classes,
            dim,
            lambda,
        }
    }

    fn from_params(params: &[f64], classes: usize, dim: usize, lambda: f64) -> Self {
        LogRegModel {
            weights: params[..classes * dim].to_vec(),
            bias: params[classes * dim..].to_vec(),
            classes,
            dim,
            lambda,
        }
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.weights.clone();
        p.extend_from_slice(&self.bias);
        p
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        logits(&self.weights, &self.bias, self.dim, x)
    }

    fn check_dim(&self, x: &Features) -> Result<(), LogRegError> {
        if x.cols() != self.dim {
            return Err(LogRegError::DimensionMismatch {
                expected: self.dim,
                found: x.cols(),
            });
        }
        Ok(())
    }

    /// Argmax class per row; ties go to the lowest class id.
    pub fn predict(&self, x: &Features) -> Result<Vec<usize>, LogRegError> {
        self.check_dim(x)?;
        Ok((0..x.rows()).map(|i| argmax(&self.logits(x.row(i)))).collect())
    }

    pub fn predict_proba(&self, x: &Features) -> Result<Vec<Vec<f64>>, LogRegError> {
        self.check_dim(x)?;
        Ok((0..x.rows()).map(|i| softmax(&self.logits(x.row(i)))).collect())
    }

    /// Regularized training objective of this model on `(x, y)`.
    pub fn objective(&self, x: &Features, y: &[usize]) -> f64 {
        objective_and_gradient(x, y, self.classes, &self.params(), self.lambda).0
    }
}

fn logits(weights: &[f64], bias: &[f64], dim: usize, x: &[f64]) -> Vec<f64> {
    bias.iter()
        .enumerate()
        .map(|(c, b)| b + dot(&weights[c * dim..(c + 1) * dim], x))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Objective and its gradient at `params = [W (row-major) | b]`.
pub fn objective_and_gradient(
    x: &Features,
    y: &[usize],
    classes: usize,
    params: &[f64],
    lambda: f64,
) -> (f64, Vec<f64>) {
    let d = x.cols();
    let n = x.rows() as f64;
    let (w, b) = params.split_at(classes * d);
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for i in 0..x.rows() {
        let xi = x.row(i);
        let z = logits(w, b, d, xi);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - z[y[i]];
        for c in 0..classes {
            let r = (z[c] - lse).exp() - if c == y[i] { 1.0 } else { 0.0 };
            if r == 0.0 {
                continue;
            }
            let gw = &mut grad[c * d..(c + 1) * d];
            for (g, &v) in gw.iter_mut().zip(xi) {
                *g += r * v;
            }
            grad[classes * d + c] += r;
        }
    }
    let mut obj = loss / n;
    for g in grad.iter_mut() {
        *g /= n;
    }
    let mut reg = 0.0;
    for (g, &wv) in grad[..classes * d].iter_mut().zip(w) {
        *g += lambda * wv;
        reg += wv * wv;
    }
    obj += 0.5 * lambda * reg;
    (obj, grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub max_iter: usize,
    /// Stop once the gradient's max-abs entry falls below this.
    pub grad_tol: f64,
    pub history: usize,
    pub armijo: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            max_iter: 1000,
            grad_tol: 1e-5,
            history: 10,
            armijo: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: LogRegModel,
    pub objective: f64,
    pub grad_inf_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every accepted step, starting with the initial point.
    pub trace: Vec<f64>,
}

fn validate(x: &Features, y: &[usize], classes: usize) -> Result<(), LogRegError> {
    if x.rows() != y.len() {
        return Err(LogRegError::BadInput(format!(
            "{} feature rows but {} labels",
            x.rows(),
            y.len()
        )));
    }
    if classes < 2 {
        return Err(LogRegError::BadInput("need at least two classes".into()));
    }
    let mut seen = vec![false; classes];
    for &label in y {
        if label >= classes {
            return Err(LogRegError::LabelOutOfRange { label, classes });
        }
        seen[label] = true;
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(LogRegError::MissingClass(c));
    }
    for i in 0..x.rows() {
        if let Some(col) = x.row(i).iter().position(|v| !v.is_finite()) {
            return Err(LogRegError::NonFiniteFeature { row: i, col });
        }
    }
    Ok(())
}

pub fn train_logreg(x: &Features, y: &[usize], classes: usize, lambda: f64) -> Result<LogRegModel, LogRegError> {
    Ok(train_from(
        x,
        y,
        LogRegModel::zeros(classes, x.cols(), lambda),
        TrainOptions::default(),
    )?
    .model)
}

/// Trains starting from `init` (its `lambda` is the regularization used).
pub fn train_from(
    x: &Features,
    y: &[usize],
    init: LogRegModel,
    opts: TrainOptions,
) -> Result<TrainOutcome, LogRegError> {
    let classes = init.classes;
    let lambda = init.lambda;
    validate(x, y, classes)?;
    if init.dim != x.cols() {
        return Err(LogRegError::DimensionMismatch {
            expected: init.dim,
            found: x.cols(),
        });
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(LogRegError::BadInput(format!("lambda must be positive, got {lambda}")));
    }
    let eval = |p: &[f64]| objective_and_gradient(x, y, classes, p, lambda);

    let mut params = init.params();
    let (mut f, mut g) = eval(&params);
    let mut trace = vec![f];
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut iterations = 0;
    let inf_norm = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));

    while iterations < opts.max_iter && inf_norm(&g) >= opts.grad_tol {
        let mut dir = two_loop(&g, &s_hist, &y_hist);
        let mut slope = dot(&g, &dir);
        if slope.is_nan() || slope >= 0.0 {
            s_hist.clear();
            y_hist.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&g, &dir);
        }
        let mut step = if s_hist.is_empty() {
            1.0f64.min(1.0 / inf_norm(&g))
        } else {
            1.0
        };
        let accepted = loop {
            let trial: Vec<f64> = params.iter().zip(&dir).map(|(p, d)| p + step * d).collect();
            let (ft, gt) = eval(&trial);
            if ft.is_finite() && ft <= f + opts.armijo * step * slope {
                break Some((trial, ft, gt));
            }
            step *= 0.5;
            if step < 1e-20 {
                break None;
            }
        };
        let Some((next, f_next, g_next)) = accepted else {
            if s_hist.is_empty() {
                // steepest descent cannot make progress: numerically converged
                break;
            }
            s_hist.clear();
            y_hist.clear();
            continue;
        };
        let s: Vec<f64> = next.iter().zip(&params).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = g_next.iter().zip(&g).map(|(a, b)| a - b).collect();
        if dot(&s, &yv) > 1e-12 * dot(&yv, &yv).max(f64::MIN_POSITIVE) {
            if s_hist.len() == opts.history {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(yv);
        }
        params = next;
        f = f_next;
        g = g_next;
        trace.push(f);
        iterations += 1;
    }

    let grad_inf_norm = inf_norm(&g);
    Ok(TrainOutcome {
        model: LogRegModel::from_params(&params, classes, x.cols(), lambda),
        objective: f,
        grad_inf_norm,
        iterations,
        converged: grad_inf_norm < opts.grad_tol,
        trace,
    })
}

/// L-BFGS two-loop recursion: returns `-H g`.
fn two_loop(g: &[f64], s_hist: &[Vec<f64>], y_hist: &[Vec<f64>]) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = vec![0.0; s_hist.len()];
    for i in (0..s_hist.len()).rev() {
        let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
        alphas[i] = rho * dot(&s_hist[i], &q);
        for (qv, yv) in q.iter_mut().zip(&y_hist[i]) {
            *qv -= alphas[i] * yv;
        }
    }
    if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
        let gamma = dot(s, y) / dot(y, y);
        for qv in q.iter_mut() {
            *qv *= gamma;
        }
    }
    for i in 0..s_hist.len() {
        let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
        let beta = rho * dot(&y_hist[i], &q);
        for (qv, sv) in q.iter_mut().zip(&s_hist[i]) {
            *qv += (alphas[i] - beta) * sv;
        }
    }
    q.into_iter().map(|v| -v).collect()
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}
