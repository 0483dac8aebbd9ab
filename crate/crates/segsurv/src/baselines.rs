//! Tabular-only survival baselines: Cox proportional hazards, linear
//! discrete-time (MTLR) regression, and its one-hidden-layer neural variant.
//! All three see only the encoded health record, never the images.

use crate::autodiff::{Scalar, Tape, Tensor, TensorRef};
use crate::error::SurvivalError;
use crate::mtlr::{self, MtlrConfig, MtlrLabel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fitted Cox proportional hazards model. Features are standardized
/// internally at fit time; `risk` applies the same transform, so risk
/// rankings are invariant to affine rescaling of any input column.
#[derive(Clone, Debug)]
pub struct CoxModel {
    /// Coefficients on the standardized feature scale.
    pub coefficients: Vec<f64>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct CoxOptions {
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for CoxOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            tolerance: 1e-7,
        }
    }
}

impl CoxModel {
    /// Linear risk score `w^T x_standardized`; higher means earlier event.
    pub fn risk(&self, x: &[f64]) -> f64 {
        self.coefficients
            .iter()
            .zip(x)
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|((&w, &v), (&m, &s))| w * ((v - m) / s))
            .sum()
    }
}

/// Maximizes the Breslow partial log-likelihood by gradient ascent with
/// backtracking line search.
pub fn coxph_fit(
    features: &[Vec<f64>],
    times: &[f64],
    events: &[u8],
    opts: &CoxOptions,
) -> Result<CoxModel, SurvivalError> {
    let n = features.len();
    if n < 2 {
        return Err(SurvivalError::TooFewSubjects(n));
    }
    if times.len() != n || events.len() != n {
        return Err(SurvivalError::RaggedFeatures);
    }
    let p = features[0].len();
    if features.iter().any(|f| f.len() != p) {
        return Err(SurvivalError::RaggedFeatures);
    }
    if events.iter().all(|&e| e == 0) {
        return Err(SurvivalError::NoEvents);
    }

    // Standardize columns; constant columns stay centered at zero.
    let mut mean = vec![0.0; p];
    let mut std = vec![1.0; p];
    for j in 0..p {
        let m = features.iter().map(|f| f[j]).sum::<f64>() / n as f64;
        let var = features.iter().map(|f| (f[j] - m).powi(2)).sum::<f64>() / n as f64;
        mean[j] = m;
        std[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }
    let x: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            f.iter()
                .zip(mean.iter().zip(&std))
                .map(|(&v, (&m, &s))| (v - m) / s)
                .collect()
        })
        .collect();

    // Subjects sorted by descending time so the risk set of an event at
    // time t is a prefix; Breslow handles ties by sharing the full set.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].partial_cmp(&times[a]).expect("finite times"));

    let log_lik_and_grad = |beta: &[f64]| -> (f64, Vec<f64>) {
        let eta: Vec<f64> = x
            .iter()
            .map(|row| row.iter().zip(beta).map(|(xi, bi)| xi * bi).sum())
            .collect();
        let mut ll = 0.0;
        let mut grad = vec![0.0; p];
        let mut denom = 0.0;
        let mut weighted = vec![0.0; p];
        let mut at = 0;
        while at < n {
            // Extend the risk set with every subject tied at this time.
            let t = times[order[at]];
            let mut end = at;
            while end < n && times[order[end]] == t {
                let i = order[end];
                let e = eta[i].exp();
                denom += e;
                for j in 0..p {
                    weighted[j] += e * x[i][j];
                }
                end += 1;
            }
            for &i in &order[at..end] {
                if events[i] == 1 {
                    ll += eta[i] - denom.ln();
                    for j in 0..p {
                        grad[j] += x[i][j] - weighted[j] / denom;
                    }
                }
            }
            at = end;
        }
        (ll, grad)
    };

    let mut beta = vec![0.0; p];
    let mut converged = false;
    let mut iterations = 0;
    let (mut ll, mut grad) = log_lik_and_grad(&beta);
    for it in 0..opts.max_iterations {
        iterations = it + 1;
        let gmax = grad.iter().fold(0.0f64, |a, &g| a.max(g.abs()));
        if gmax < opts.tolerance {
            converged = true;
            break;
        }
        // Backtracking ascent step.
        let mut step = 1.0 / (1.0 + gmax);
        let mut advanced = false;
        for _ in 0..40 {
            let cand: Vec<f64> = beta.iter().zip(&grad).map(|(b, g)| b + step * g).collect();
            let (cand_ll, cand_grad) = log_lik_and_grad(&cand);
            if cand_ll > ll {
                beta = cand;
                ll = cand_ll;
                grad = cand_grad;
                advanced = true;
                break;
            }
            step *= 0.5;
        }
        if !advanced {
            converged = true; // no ascent direction left at fp resolution
            break;
        }
    }

    Ok(CoxModel {
        coefficients: beta,
        feature_mean: mean,
        feature_std: std,
        converged,
        iterations,
    })
}

/// Linear discrete-time survival baseline: edge scores are an affine map of
/// the features.
#[derive(Clone, Debug)]
pub struct MtlrBaseline {
    pub mtlr: MtlrConfig,
    pub weights: Tensor<f64>,
    pub bias: Tensor<f64>,
}

/// Neural variant: one hidden ReLU layer feeding the same score map.
#[derive(Clone, Debug)]
pub struct DeepMtlrBaseline {
    pub mtlr: MtlrConfig,
    pub hidden_w: Tensor<f64>,
    pub hidden_b: Tensor<f64>,
    pub out_w: Tensor<f64>,
    pub out_b: Tensor<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct BaselineTrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for BaselineTrainOptions {
    fn default() -> Self {
        Self {
            epochs: 400,
            lr: 0.1,
            weight_decay: 1e-4,
            hidden: 128,
            seed: 0,
        }
    }
}

fn features_tensor(features: &[Vec<f64>]) -> Result<Tensor<f64>, SurvivalError> {
    let n = features.len();
    let p = features.first().map(|f| f.len()).unwrap_or(0);
    if n == 0 || p == 0 || features.iter().any(|f| f.len() != p) {
        return Err(SurvivalError::RaggedFeatures);
    }
    let flat: Vec<f64> = features.iter().flatten().copied().collect();
    Ok(Tensor::new(vec![n, p], flat).map_err(SurvivalError::Diff)?)
}

impl MtlrBaseline {
    pub fn fit(
        features: &[Vec<f64>],
        labels: &[MtlrLabel],
        mtlr: MtlrConfig,
        opts: &BaselineTrainOptions,
    ) -> Result<Self, SurvivalError> {
        let x = features_tensor(features)?;
        let p = x.shape()[1];
        let km1 = mtlr.bins() - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut weights = Tensor::trunc_normal(vec![p, km1], 0.02, &mut rng);
        let mut bias = Tensor::<f64>::zeros(vec![km1]);

        for _ in 0..opts.epochs {
            let mut tape = Tape::new();
            let w = tape.param(weights.clone());
            let b = tape.param(bias.clone());
            let xs = tape.constant(x.clone());
            let scores = tape.matmul(xs, w)?;
            let scores = tape.add_bias(scores, b)?;
            let loss = crate::losses::mtlr_nll(&mut tape, scores, labels)?;
            tape.backward(loss)?;
            sgd_step(&mut weights, &tape.leaf_grad(w), opts.lr, opts.weight_decay);
            sgd_step(&mut bias, &tape.leaf_grad(b), opts.lr, 0.0);
        }
        Ok(Self {
            mtlr,
            weights,
            bias,
        })
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let km1 = self.bias.numel();
        let p = x.len();
        let w = self.weights.data();
        (0..km1)
            .map(|k| {
                self.bias.data()[k] + (0..p).map(|j| x[j] * w[j * km1 + k]).sum::<f64>()
            })
            .collect()
    }

    pub fn pmf(&self, x: &[f64]) -> Result<Vec<f64>, SurvivalError> {
        mtlr::survival_pmf(&self.scores(x))
    }

    pub fn risk(&self, x: &[f64]) -> Result<f64, SurvivalError> {
        mtlr::risk_score(&self.pmf(x)?, &self.mtlr.edges)
    }
}

impl DeepMtlrBaseline {
    pub fn fit(
        features: &[Vec<f64>],
        labels: &[MtlrLabel],
        mtlr: MtlrConfig,
        opts: &BaselineTrainOptions,
    ) -> Result<Self, SurvivalError> {
        let x = features_tensor(features)?;
        let p = x.shape()[1];
        let km1 = mtlr.bins() - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut hidden_w = Tensor::trunc_normal(vec![p, opts.hidden], 0.2, &mut rng);
        let mut hidden_b = Tensor::<f64>::zeros(vec![opts.hidden]);
        let mut out_w = Tensor::trunc_normal(vec![opts.hidden, km1], 0.2, &mut rng);
        let mut out_b = Tensor::<f64>::zeros(vec![km1]);

        for _ in 0..opts.epochs {
            let mut tape = Tape::new();
            let hw = tape.param(hidden_w.clone());
            let hb = tape.param(hidden_b.clone());
            let ow = tape.param(out_w.clone());
            let ob = tape.param(out_b.clone());
            let xs = tape.constant(x.clone());
            let scores = Self::forward(&mut tape, xs, hw, hb, ow, ob)?;
            let loss = crate::losses::mtlr_nll(&mut tape, scores, labels)?;
            tape.backward(loss)?;
            sgd_step(&mut hidden_w, &tape.leaf_grad(hw), opts.lr, opts.weight_decay);
            sgd_step(&mut hidden_b, &tape.leaf_grad(hb), opts.lr, 0.0);
            sgd_step(&mut out_w, &tape.leaf_grad(ow), opts.lr, opts.weight_decay);
            sgd_step(&mut out_b, &tape.leaf_grad(ob), opts.lr, 0.0);
        }
        Ok(Self {
            mtlr,
            hidden_w,
            hidden_b,
            out_w,
            out_b,
        })
    }

    fn forward(
        tape: &mut Tape<f64>,
        x: TensorRef,
        hw: TensorRef,
        hb: TensorRef,
        ow: TensorRef,
        ob: TensorRef,
    ) -> Result<TensorRef, SurvivalError> {
        let hidden = tape.matmul(x, hw)?;
        let hidden = tape.add_bias(hidden, hb)?;
        let hidden = tape.relu(hidden)?;
        let scores = tape.matmul(hidden, ow)?;
        Ok(tape.add_bias(scores, ob)?)
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = (0..self.hidden_b.numel())
            .map(|u| {
                let w = self.hidden_w.data();
                let pre = self.hidden_b.data()[u]
                    + x.iter()
                        .enumerate()
                        .map(|(j, &v)| v * w[j * self.hidden_b.numel() + u])
                        .sum::<f64>();
                pre.max(0.0)
            })
            .collect();
        let km1 = self.out_b.numel();
        (0..km1)
            .map(|k| {
                self.out_b.data()[k]
                    + hidden
                        .iter()
                        .enumerate()
                        .map(|(u, &h)| h * self.out_w.data()[u * km1 + k])
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn pmf(&self, x: &[f64]) -> Result<Vec<f64>, SurvivalError> {
        mtlr::survival_pmf(&self.scores(x))
    }

    pub fn risk(&self, x: &[f64]) -> Result<f64, SurvivalError> {
        mtlr::risk_score(&self.pmf(x)?, &self.mtlr.edges)
    }

    /// Mean NLL on a held-out set.
    pub fn nll(&self, features: &[Vec<f64>], labels: &[MtlrLabel]) -> Result<f64, SurvivalError> {
        let scores: Vec<Vec<f64>> = features.iter().map(|f| self.scores(f)).collect();
        mtlr::nll_value(&scores, labels)
    }
}

impl MtlrBaseline {
    /// Mean NLL on a held-out set.
    pub fn nll(&self, features: &[Vec<f64>], labels: &[MtlrLabel]) -> Result<f64, SurvivalError> {
        let scores: Vec<Vec<f64>> = features.iter().map(|f| self.scores(f)).collect();
        mtlr::nll_value(&scores, labels)
    }
}

fn sgd_step<T: Scalar>(param: &mut Tensor<T>, grad: &Tensor<T>, lr: f64, weight_decay: f64) {
    let lr = T::from_f64(lr);
    let wd = T::from_f64(weight_decay);
    for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p = *p - lr * (g + wd * *p);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cox_recovers_positive_coefficient_from_perfect_ordering() {
        // Higher covariate, earlier event.
        let features: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let times: Vec<f64> = (0..20).map(|i| (20 - i) as f64).collect();
        let events = vec![1u8; 20];
        let model = coxph_fit(&features, &times, &events, &CoxOptions::default()).unwrap();
        assert!(model.coefficients[0] > 0.0);
        // Risk ordering matches the covariate ordering.
        assert!(model.risk(&[19.0]) > model.risk(&[0.0]));
    }

    #[test]
    fn cox_zero_covariates_stay_zero() {
        let features: Vec<Vec<f64>> = (0..10).map(|_| vec![0.0, 0.0]).collect();
        let times: Vec<f64> = (0..10).map(|i| (i + 1) as f64).collect();
        let events = vec![1u8; 10];
        let model = coxph_fit(&features, &times, &events, &CoxOptions::default()).unwrap();
        assert_eq!(model.coefficients, vec![0.0, 0.0]);
        assert!(model.converged);
    }

    #[test]
    fn cox_requires_an_event() {
        let features = vec![vec![1.0], vec![2.0]];
        let times = vec![1.0, 2.0];
        assert!(matches!(
            coxph_fit(&features, &times, &[0, 0], &CoxOptions::default()),
            Err(SurvivalError::NoEvents)
        ));
    }

    #[test]
    fn cox_ranking_invariant_to_column_rescaling() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 40;
        let features: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let times: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..100.0)).collect();
        let events: Vec<u8> = (0..n).map(|i| u8::from(i % 3 != 0)).collect();

        let m1 = coxph_fit(&features, &times, &events, &CoxOptions::default()).unwrap();
        let scaled: Vec<Vec<f64>> = features
            .iter()
            .map(|f| vec![f[0] * 1000.0, f[1]])
            .collect();
        let m2 = coxph_fit(&scaled, &times, &events, &CoxOptions::default()).unwrap();

        let r1: Vec<f64> = features.iter().map(|f| m1.risk(f)).collect();
        let r2: Vec<f64> = scaled.iter().map(|f| m2.risk(f)).collect();
        let argsort = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
            idx
        };
        assert_eq!(argsort(&r1), argsort(&r2));
    }

    #[test]
    fn deep_mtlr_zero_hidden_weights_give_uniform_pmf() {
        let mtlr = MtlrConfig::new(vec![1.0, 2.0, 3.0]).unwrap();
        let model = DeepMtlrBaseline {
            mtlr,
            hidden_w: Tensor::zeros(vec![3, 8]),
            hidden_b: Tensor::zeros(vec![8]),
            out_w: Tensor::zeros(vec![8, 3]),
            out_b: Tensor::zeros(vec![3]),
        };
        let pmf = model.pmf(&[0.3, -0.4, 2.0]).unwrap();
        for p in pmf {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn deep_mtlr_with_identity_hidden_layer_reduces_to_linear() {
        // Nonnegative features pass through ReLU(I x) untouched.
        let mtlr = MtlrConfig::new(vec![1.0, 2.0]).unwrap();
        let p = 3;
        let mut eye = Tensor::zeros(vec![p, p]);
        for i in 0..p {
            eye.data_mut()[i * p + i] = 1.0;
        }
        let w = Tensor::new(vec![p, 2], vec![0.5, -0.3, 0.2, 0.9, -1.0, 0.1]).unwrap();
        let b = Tensor::new(vec![2], vec![0.05, -0.02]).unwrap();
        let linear = MtlrBaseline {
            mtlr: mtlr.clone(),
            weights: w.clone(),
            bias: b.clone(),
        };
        let deep = DeepMtlrBaseline {
            mtlr,
            hidden_w: eye,
            hidden_b: Tensor::zeros(vec![p]),
            out_w: w,
            out_b: b,
        };
        let x = [0.7, 0.1, 1.3];
        let a = linear.scores(&x);
        let c = deep.scores(&x);
        for (u, v) in a.iter().zip(&c) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
