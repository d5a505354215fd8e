//! Loss terms and the latent Gaussian, evaluated directly on tensors.
//!
//! Training records the same quantities on a [`Graph`](crate::numkit::Graph)
//! (reconstruction in logit space); these plain versions are the reference
//! definitions and are what tests compare the graph against.

use crate::numkit::{NumError, Tensor};

use super::ModelError;

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Per-sample diagonal Gaussian `N(mu, exp(log_var))` over the latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    pub mu: Tensor,
    pub log_var: Tensor,
}

impl LatentGaussian {
    pub fn new(mu: Tensor, log_var: Tensor) -> Result<Self, ModelError> {
        if mu.shape() != log_var.shape() || mu.rank() != 2 {
            return Err(NumError::Shape {
                op: "LatentGaussian",
                left: mu.shape().to_vec(),
                right: log_var.shape().to_vec(),
            }
            .into());
        }
        if !mu.is_finite() || !log_var.is_finite() {
            return Err(NumError::NonFinite { op: "LatentGaussian" }.into());
        }
        let log_var = log_var.map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX));
        Ok(Self { mu, log_var })
    }

    pub fn batch(&self) -> usize {
        self.mu.rows()
    }

    pub fn dim(&self) -> usize {
        self.mu.cols()
    }
}

/// `z = mu + exp(log_var / 2) ⊙ noise`.
pub fn reparameterize(g: &LatentGaussian, noise: &Tensor) -> Result<Tensor, ModelError> {
    if noise.shape() != g.mu.shape() {
        return Err(NumError::Shape {
            op: "reparameterize",
            left: g.mu.shape().to_vec(),
            right: noise.shape().to_vec(),
        }
        .into());
    }
    let data = g
        .mu
        .data()
        .iter()
        .zip(g.log_var.data())
        .zip(noise.data())
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect();
    Ok(Tensor::new(g.mu.shape().to_vec(), data)?)
}

/// Batch mean of `½ Σ_j (μ_j² + e^{ℓ_j} − 1 − ℓ_j)`, the KL divergence to `N(0, I)`.
pub fn kl_divergence(g: &LatentGaussian) -> f64 {
    let batch = g.batch().max(1) as f64;
    let total: f64 = g
        .mu
        .data()
        .iter()
        .zip(g.log_var.data())
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum();
    total / batch
}

/// Batch mean of the per-pixel binary cross-entropy summed over each row.
pub fn reconstruction_loss(x: &Tensor, x_hat: &Tensor) -> Result<f64, ModelError> {
    if x.shape() != x_hat.shape() {
        return Err(NumError::Shape {
            op: "reconstruction_loss",
            left: x.shape().to_vec(),
            right: x_hat.shape().to_vec(),
        }
        .into());
    }
    if let Some(bad) = x_hat.data().iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
        return Err(ModelError::NumericGuard(format!(
            "reconstruction value {bad} outside the open interval (0, 1)"
        )));
    }
    let batch = x.rows().max(1) as f64;
    let total: f64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&t, &p)| {
            let pos = if t == 0.0 { 0.0 } else { t * p.ln() };
            let neg = if t == 1.0 { 0.0 } else { (1.0 - t) * (1.0 - p).ln() };
            -(pos + neg)
        })
        .sum();
    Ok(total / batch)
}

/// Mean negative log-probability of the true class.
pub fn classification_loss(probabilities: &Tensor, labels: &[usize]) -> Result<f64, ModelError> {
    let (batch, classes) = probabilities.dims2()?;
    if labels.len() != batch {
        return Err(NumError::Shape {
            op: "classification_loss",
            left: probabilities.shape().to_vec(),
            right: vec![labels.len()],
        }
        .into());
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(NumError::Label { label, classes }.into());
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &c)| -probabilities.get2(i, c).ln())
        .sum();
    Ok(total / batch.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::rng::{seeded, standard_normal};
    use crate::numkit::softmax_rows;
    use rand::Rng;

    fn gaussian(mu: Vec<f64>, log_var: Vec<f64>) -> LatentGaussian {
        let d = mu.len();
        LatentGaussian::new(
            Tensor::new(vec![1, d], mu).unwrap(),
            Tensor::new(vec![1, d], log_var).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn reparameterize_cases() {
        let g = gaussian(vec![0.5, -1.0], vec![0.3, 2.0]);
        let z = reparameterize(&g, &Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(z, g.mu);
        let g = gaussian(vec![0.5, -1.0], vec![0.0, 0.0]);
        let e = Tensor::new(vec![1, 2], vec![0.25, 3.0]).unwrap();
        let z = reparameterize(&g, &e).unwrap();
        assert_eq!(z.data(), &[0.75, 2.0]);
        assert!(reparameterize(&g, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn reparameterize_moments_monte_carlo() {
        let n = 100_000;
        let g = LatentGaussian::new(Tensor::full(&[n, 1], 1.0), Tensor::full(&[n, 1], 4f64.ln())).unwrap();
        let mut rng = seeded(11);
        let z = reparameterize(&g, &standard_normal(&mut rng, &[n, 1])).unwrap();
        let mean = z.sum() / n as f64;
        let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
        assert!((var - 4.0).abs() < 0.2, "var {var}");
    }

    #[test]
    fn log_var_is_clamped() {
        let g = gaussian(vec![0.0, 0.0], vec![-50.0, 50.0]);
        assert_eq!(g.log_var.data(), &[LOG_VAR_MIN, LOG_VAR_MAX]);
    }

    #[test]
    fn kl_closed_form_cases() {
        assert_eq!(kl_divergence(&gaussian(vec![0.0; 3], vec![0.0; 3])), 0.0);
        assert_eq!(kl_divergence(&gaussian(vec![1.0], vec![0.0])), 0.5);
    }

    /// `E_q[log q(z) − log p(z)]` with `z = μ + σ·ε`; the `−½ln 2π` terms cancel.
    fn kl_monte_carlo(mu: &[f64], log_var: &[f64], draws: usize, seed: u64) -> f64 {
        let mut rng = seeded(seed);
        let mut acc = 0.0;
        for _ in 0..draws {
            let mut term = 0.0;
            for (&m, &lv) in mu.iter().zip(log_var) {
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                let z = m + (0.5 * lv).exp() * e;
                term += -0.5 * lv - 0.5 * e * e + 0.5 * z * z;
            }
            acc += term;
        }
        acc / draws as f64
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = seeded(41);
        let mu: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
        let lv: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
        let exact = kl_divergence(&gaussian(mu.clone(), lv.clone()));
        let mc = kl_monte_carlo(&mu, &lv, 1_000_000, 42);
        assert!((mc - exact).abs() <= 0.02 * exact, "{mc} vs {exact}");
    }

    proptest::proptest! {
        #[test]
        fn kl_is_nonnegative(pairs in proptest::collection::vec((-5.0f64..5.0, -10.0f64..10.0), 1..8)) {
            let (mu, lv): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let away = mu.iter().chain(&lv).any(|&v| v.abs() > 1e-3);
            let kl = kl_divergence(&gaussian(mu, lv));
            proptest::prop_assert!(kl >= 0.0);
            if away {
                proptest::prop_assert!(kl > 0.0);
            }
        }
    }

    #[test]
    fn reconstruction_loss_half_everywhere() {
        let x = Tensor::full(&[1, 784], 0.5);
        let loss = reconstruction_loss(&x, &x).unwrap();
        assert!((loss - 784.0 * std::f64::consts::LN_2).abs() < 1e-9);
        assert!((loss - 543.43).abs() < 0.01);
    }

    #[test]
    fn reconstruction_loss_perfect_limit_and_guard() {
        let x = Tensor::zeros(&[2, 10]);
        let x_hat = Tensor::full(&[2, 10], 1e-300);
        assert!(reconstruction_loss(&x, &x_hat).unwrap() < 1e-290);
        assert!(matches!(
            reconstruction_loss(&x, &Tensor::zeros(&[2, 10])),
            Err(ModelError::NumericGuard(_))
        ));
        assert!(reconstruction_loss(&x, &Tensor::full(&[2, 10], 1.0)).is_err());
    }

    #[test]
    fn reconstruction_loss_matches_direct_sum() {
        let mut rng = seeded(5);
        let (b, d) = (3, 17);
        let x = Tensor::new(vec![b, d], (0..b * d).map(|_| rng.random::<f64>()).collect()).unwrap();
        let p = Tensor::new(vec![b, d], (0..b * d).map(|_| rng.random_range(0.01..0.99)).collect()).unwrap();
        let mut oracle = 0.0;
        for i in 0..b {
            for j in 0..d {
                let (t, q) = (x.get2(i, j), p.get2(i, j));
                oracle -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
            }
        }
        oracle /= b as f64;
        assert!((reconstruction_loss(&x, &p).unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn classification_loss_cases() {
        let uniform = Tensor::full(&[4, 10], 0.1);
        let l = classification_loss(&uniform, &[0, 3, 9, 5]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        let sure = Tensor::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(classification_loss(&sure, &[1]).unwrap(), 0.0);
        assert!(matches!(
            classification_loss(&sure, &[3]),
            Err(ModelError::Num(NumError::Label { label: 3, classes: 3 }))
        ));
    }

    #[test]
    fn classification_loss_matches_log_softmax() {
        let mut rng = seeded(9);
        let logits = standard_normal(&mut rng, &[5, 4]).map(|v| 3.0 * v);
        let labels = [0, 1, 2, 3, 1];
        let p = softmax_rows(&logits);
        let mut oracle = 0.0;
        for (i, &c) in labels.iter().enumerate() {
            let row = logits.row(i);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            oracle += lse - row[c];
        }
        oracle /= labels.len() as f64;
        assert!((classification_loss(&p, &labels).unwrap() - oracle).abs() < 1e-12);
    }
}
