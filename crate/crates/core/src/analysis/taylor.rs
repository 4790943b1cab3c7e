use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::RngStream;

/// Tiny scalar-output regression models with hand-written gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionNet {
    /// `f = wᵀx`
    Linear,
    /// `f = v·tanh(uᵀx + b) + c`, parameters `[u…, b, v, c]`.
    TanhUnit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SquaredError,
    SoftmaxCrossEntropy,
}

impl RegressionNet {
    pub fn param_count(&self, inputs: usize) -> usize {
        match self {
            RegressionNet::Linear => inputs,
            RegressionNet::TanhUnit => inputs + 3,
        }
    }

    pub fn predict(&self, w: &[f64], x: &[f64]) -> f64 {
        match self {
            RegressionNet::Linear => w.iter().zip(x).map(|(a, b)| a * b).sum(),
            RegressionNet::TanhUnit => {
                let k = x.len();
                let z: f64 = w[..k].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[k];
                w[k + 1] * z.tanh() + w[k + 2]
            }
        }
    }

    /// `∇_w f(x)`
    pub fn grad(&self, w: &[f64], x: &[f64], out: &mut [f64]) {
        match self {
            RegressionNet::Linear => out.copy_from_slice(x),
            RegressionNet::TanhUnit => {
                let k = x.len();
                let z: f64 = w[..k].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[k];
                let a = z.tanh();
                let vs = w[k + 1] * (1.0 - a * a);
                for (o, xi) in out[..k].iter_mut().zip(x) {
                    *o = vs * xi;
                }
                out[k] = vs;
                out[k + 1] = a;
                out[k + 2] = 1.0;
            }
        }
    }
}

/// Regression data plus the weights the expansion is taken around.
#[derive(Clone, Debug)]
pub struct TaylorProblem {
    pub net: RegressionNet,
    pub loss: LossKind,
    pub w: Vec<f64>,
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<f64>,
}

/// How `tr ∇²f` is obtained from finite differences of gradients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum TraceMethod {
    /// One central difference per coordinate.
    Exact,
    /// Rademacher probes `rᵀ(∇f(w + hr) − ∇f(w − hr))/2h`.
    Hutchinson { probes: usize },
}

pub const DEFAULT_PROBES: usize = 16;
const FD_STEP: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorCheck {
    pub eta: f64,
    /// Monte-Carlo mean of `L(w + ε) − L(w)`.
    pub empirical: f64,
    /// Standard error of `empirical`.
    pub std_error: f64,
    /// `η·E[(f − y)·tr ∇²f] + η·E‖∇f‖²`
    pub predicted: f64,
    pub curvature_term: f64,
    pub gradient_term: f64,
}

impl TaylorCheck {
    pub fn gap(&self) -> f64 {
        self.empirical - self.predicted
    }
}

impl TaylorProblem {
    fn validate(&self) -> Result<usize> {
        if self.loss != LossKind::SquaredError {
            return Err(Error::Unsupported(
                "the noise expansion is derived for squared-error regression only".into(),
            ));
        }
        if self.xs.is_empty() || self.xs.len() != self.ys.len() {
            return Err(Error::dim("need matching, non-empty inputs and targets"));
        }
        let k = self.xs[0].len();
        if self.xs.iter().any(|x| x.len() != k) || self.w.len() != self.net.param_count(k) {
            return Err(Error::dim("inconsistent input or parameter sizes"));
        }
        Ok(k)
    }

    /// `E(f(x) − y)²` over the data.
    pub fn loss_at(&self, w: &[f64]) -> f64 {
        self.xs
            .iter()
            .zip(&self.ys)
            .map(|(x, y)| (self.net.predict(w, x) - y).powi(2))
            .sum::<f64>()
            / self.xs.len() as f64
    }

    fn hessian_trace(&self, x: &[f64], method: TraceMethod, rng: &mut RngStream) -> f64 {
        let p = self.w.len();
        let mut gp = vec![0.0; p];
        let mut gm = vec![0.0; p];
        let mut wp = self.w.clone();
        let mut wm = self.w.clone();
        match method {
            TraceMethod::Exact => (0..p)
                .map(|i| {
                    wp[i] += FD_STEP;
                    wm[i] -= FD_STEP;
                    self.net.grad(&wp, x, &mut gp);
                    self.net.grad(&wm, x, &mut gm);
                    wp[i] = self.w[i];
                    wm[i] = self.w[i];
                    (gp[i] - gm[i]) / (2.0 * FD_STEP)
                })
                .sum(),
            TraceMethod::Hutchinson { probes } => {
                let mut total = 0.0;
                for _ in 0..probes {
                    let r: Vec<f64> = (0..p)
                        .map(|_| if rng.next_u64() & 1 == 1 { 1.0 } else { -1.0 })
                        .collect();
                    for i in 0..p {
                        wp[i] = self.w[i] + FD_STEP * r[i];
                        wm[i] = self.w[i] - FD_STEP * r[i];
                    }
                    self.net.grad(&wp, x, &mut gp);
                    self.net.grad(&wm, x, &mut gm);
                    total += (0..p).map(|i| r[i] * (gp[i] - gm[i])).sum::<f64>() / (2.0 * FD_STEP);
                }
                total / probes.max(1) as f64
            }
        }
    }

    /// `(η·E[(f − y)·tr ∇²f], η·E‖∇f‖²)`
    pub fn predicted_terms(
        &self,
        eta: f64,
        method: TraceMethod,
        rng: &mut RngStream,
    ) -> Result<(f64, f64)> {
        self.validate()?;
        let p = self.w.len();
        let mut g = vec![0.0; p];
        let (mut curv, mut grad) = (0.0, 0.0);
        for (x, y) in self.xs.iter().zip(&self.ys) {
            let r = self.net.predict(&self.w, x) - y;
            curv += r * self.hessian_trace(x, method, rng);
            self.net.grad(&self.w, x, &mut g);
            grad += g.iter().map(|v| v * v).sum::<f64>();
        }
        let n = self.xs.len() as f64;
        Ok((eta * curv / n, eta * grad / n))
    }
}

/// Compares the Monte-Carlo loss increase under `ε ~ N(0, ηI)` with the
/// second-order prediction. Samples come in antithetic pairs `±ε`; the
/// same `rng` state gives the same standard-normal draws for any `η`.
pub fn taylor_noise_check(
    problem: &TaylorProblem,
    eta: f64,
    n_pairs: usize,
    method: TraceMethod,
    rng: &RngStream,
) -> Result<TaylorCheck> {
    problem.validate()?;
    if !(eta >= 0.0) || n_pairs == 0 {
        return Err(Error::param("need eta >= 0 and at least one sample pair"));
    }
    let (curvature_term, gradient_term) =
        problem.predicted_terms(eta, method, &mut rng.derive(1))?;
    let base = problem.loss_at(&problem.w);
    let p = problem.w.len();
    let mut draws = rng.derive(0);
    let sd = eta.sqrt();
    let (mut wp, mut wm) = (problem.w.clone(), problem.w.clone());
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_pairs {
        for i in 0..p {
            let e = sd * draws.standard_normal();
            wp[i] = problem.w[i] + e;
            wm[i] = problem.w[i] - e;
        }
        let d = 0.5 * (problem.loss_at(&wp) + problem.loss_at(&wm)) - base;
        sum += d;
        sum_sq += d * d;
    }
    let n = n_pairs as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    Ok(TaylorCheck {
        eta,
        empirical: mean,
        std_error: (var / n).sqrt(),
        predicted: curvature_term + gradient_term,
        curvature_term,
        gradient_term,
    })
}

/// `gap(η) / gap(η/2)` with common random numbers; ≈ 4 when the gap is O(η²).
pub fn gap_ratio(
    problem: &TaylorProblem,
    eta: f64,
    n_pairs: usize,
    method: TraceMethod,
    rng: &RngStream,
) -> Result<f64> {
    let a = taylor_noise_check(problem, eta, n_pairs, method, rng)?;
    let b = taylor_noise_check(problem, eta / 2.0, n_pairs, method, rng)?;
    Ok(a.gap() / b.gap())
}

/// Random problem with Gaussian inputs, targets from a perturbed teacher.
pub fn synthetic_problem(
    net: RegressionNet,
    inputs: usize,
    samples: usize,
    rng: &mut RngStream,
) -> TaylorProblem {
    let p = net.param_count(inputs);
    let teacher: Vec<f64> = (0..p).map(|_| rng.standard_normal()).collect();
    let w: Vec<f64> = teacher
        .iter()
        .map(|t| t + 0.5 * rng.standard_normal())
        .collect();
    let xs: Vec<Vec<f64>> = (0..samples)
        .map(|_| (0..inputs).map(|_| rng.standard_normal()).collect())
        .collect();
    let ys = xs
        .iter()
        .map(|x| net.predict(&teacher, x) + 0.1 * rng.standard_normal())
        .collect();
    TaylorProblem {
        net,
        loss: LossKind::SquaredError,
        w,
        xs,
        ys,
    }
}
