//! Exact divergence and information quantities on finite distributions.
//!
//! These closed-form references anchor the variational estimator: the
//! divergence bound evaluated at any test function must stay below the exact
//! divergence and touches it at the log-ratio function. All values are nats.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

const PROB_SUM_TOL: f64 = 1e-9;

/// Probability table over a finite state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbTable {
    probs: Vec<f64>,
}

impl ProbTable {
    /// Entries must be non-negative and sum to one within 1e-9; the stored
    /// table is renormalized to sum exactly.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(CoreError::InvalidArgument("empty probability table".into()));
        }
        if probs.iter().any(|&p| !(p.is_finite() && p >= 0.0)) {
            return Err(CoreError::InvalidArgument(
                "probabilities must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(CoreError::InvalidArgument(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self {
            probs: probs.iter().map(|p| p / sum).collect(),
        })
    }

    /// Normalize arbitrary non-negative weights into a table.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum.is_finite() && sum > 0.0) || weights.iter().any(|&w| !(w.is_finite() && w >= 0.0)) {
            return Err(CoreError::InvalidArgument(
                "weights must be non-negative with positive sum".into(),
            ));
        }
        Self::new(weights.iter().map(|w| w / sum).collect())
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// `KL(mu || lam)` in nats, with `0 log 0 = 0`. Errors when `mu` puts mass
/// where `lam` has none (the divergence is infinite there).
pub fn kl_discrete(mu: &ProbTable, lam: &ProbTable) -> Result<f64> {
    if mu.len() != lam.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "tables of {} and {} states",
            mu.len(),
            lam.len()
        )));
    }
    let mut kl = 0.0;
    for (i, (&m, &l)) in mu.probs().iter().zip(lam.probs()).enumerate() {
        if m == 0.0 {
            continue;
        }
        if l == 0.0 {
            return Err(CoreError::DegenerateInput(format!(
                "state {i}: mu has mass where lam has none"
            )));
        }
        kl += m * (m / l).ln();
    }
    Ok(kl)
}

/// Variational lower bound `E_mu[phi] - log E_lam[exp(phi)]` for any test
/// function `phi` given by its values per state. Entries of `phi` may be
/// `-inf` (contributing zero mass under `exp`); states with `mu == 0` do not
/// contribute to the first term.
pub fn dv_bound_discrete(mu: &ProbTable, lam: &ProbTable, phi: &[f64]) -> Result<f64> {
    if mu.len() != lam.len() || phi.len() != mu.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "mu {}, lam {}, phi {}",
            mu.len(),
            lam.len(),
            phi.len()
        )));
    }
    if phi.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(CoreError::InvalidArgument(
            "phi must be finite or -inf".into(),
        ));
    }
    let mean: f64 = mu
        .probs()
        .iter()
        .zip(phi)
        .filter(|(&m, _)| m > 0.0)
        .map(|(&m, &f)| m * f)
        .sum();
    let mass: f64 = lam
        .probs()
        .iter()
        .zip(phi)
        .map(|(&l, &f)| l * f.exp())
        .sum();
    if !(mass.is_finite() && mass > 0.0) {
        return Err(CoreError::DegenerateInput(
            "exp(phi) has zero mass under lam".into(),
        ));
    }
    Ok(mean - mass.ln())
}

/// The maximizing test function `log(mu/lam)` per state (`-inf` off the
/// support of `mu`, zero where both vanish). The bound at this function
/// equals `kl_discrete(mu, lam)` exactly.
pub fn dv_optimal_phi(mu: &ProbTable, lam: &ProbTable) -> Result<Vec<f64>> {
    if mu.len() != lam.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "tables of {} and {} states",
            mu.len(),
            lam.len()
        )));
    }
    mu.probs()
        .iter()
        .zip(lam.probs())
        .enumerate()
        .map(|(i, (&m, &l))| {
            if m == 0.0 {
                Ok(f64::NEG_INFINITY)
            } else if l == 0.0 {
                Err(CoreError::DegenerateInput(format!(
                    "state {i}: mu has mass where lam has none"
                )))
            } else {
                Ok((m / l).ln())
            }
        })
        .collect()
}

/// Joint probability table over a product of two finite spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTable {
    rows: usize,
    cols: usize,
    p: Vec<f64>,
}

impl JointTable {
    pub fn new(rows: usize, cols: usize, p: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || p.len() != rows * cols {
            return Err(CoreError::ShapeMismatch(format!(
                "{rows}x{cols} joint with {} entries",
                p.len()
            )));
        }
        if p.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
            return Err(CoreError::InvalidArgument(
                "joint probabilities must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(CoreError::InvalidArgument(format!(
                "joint sums to {sum}, expected 1"
            )));
        }
        Ok(Self {
            rows,
            cols,
            p: p.iter().map(|v| v / sum).collect(),
        })
    }

    pub fn from_counts(rows: usize, cols: usize, counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(CoreError::DegenerateInput("empty joint histogram".into()));
        }
        Self::new(
            rows,
            cols,
            counts.iter().map(|&c| c as f64 / total as f64).collect(),
        )
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    pub fn row_marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.rows];
        for (i, mi) in m.iter_mut().enumerate() {
            for j in 0..self.cols {
                *mi += self.p[i * self.cols + j];
            }
        }
        m
    }

    pub fn col_marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (j, mj) in m.iter_mut().enumerate() {
                *mj += self.p[i * self.cols + j];
            }
        }
        m
    }
}

/// Mutual information of a joint table in nats: the divergence of the joint
/// from the product of its marginals, with `0 log 0 = 0`.
pub fn mi_discrete(joint: &JointTable) -> f64 {
    let pa = joint.row_marginal();
    let pb = joint.col_marginal();
    let mut mi = 0.0;
    for (i, &pai) in pa.iter().enumerate() {
        for (j, &pbj) in pb.iter().enumerate() {
            let p = joint.probs()[i * joint.cols() + j];
            if p > 0.0 {
                mi += p * (p / (pai * pbj)).ln();
            }
        }
    }
    mi
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kl_of_identical_tables_is_zero() {
        let p = ProbTable::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert_abs_diff_eq!(kl_discrete(&p, &p).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn kl_binary_closed_form() {
        // KL((1/2,1/2) || (1/4,3/4)) = 0.5 ln 2 + 0.5 ln(2/3)
        let mu = ProbTable::new(vec![0.5, 0.5]).unwrap();
        let lam = ProbTable::new(vec![0.25, 0.75]).unwrap();
        let expect = 0.5 * 2.0f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert_abs_diff_eq!(kl_discrete(&mu, &lam).unwrap(), expect, epsilon = 1e-15);
        assert_abs_diff_eq!(expect, 0.143841036225890, epsilon = 1e-12);
    }

    #[test]
    fn kl_is_asymmetric() {
        let mu = ProbTable::new(vec![0.9, 0.1]).unwrap();
        let lam = ProbTable::new(vec![0.5, 0.5]).unwrap();
        let ab = kl_discrete(&mu, &lam).unwrap();
        let ba = kl_discrete(&lam, &mu).unwrap();
        assert!((ab - ba).abs() > 1e-3);
    }

    #[test]
    fn absolute_continuity_violation_errors() {
        let mu = ProbTable::new(vec![0.5, 0.5]).unwrap();
        let lam = ProbTable::new(vec![1.0, 0.0]).unwrap();
        assert!(kl_discrete(&mu, &lam).is_err());
        // but mass vanishing together is fine
        let mu2 = ProbTable::new(vec![1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(kl_discrete(&mu2, &lam).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn bound_touches_divergence_at_log_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let n = rng.random_range(2..=8);
            let mu = ProbTable::from_weights(
                &(0..n).map(|_| rng.random_range(0.01..1.0)).collect::<Vec<_>>(),
            )
            .unwrap();
            let lam = ProbTable::from_weights(
                &(0..n).map(|_| rng.random_range(0.01..1.0)).collect::<Vec<_>>(),
            )
            .unwrap();
            let kl = kl_discrete(&mu, &lam).unwrap();
            let phi = dv_optimal_phi(&mu, &lam).unwrap();
            let bound = dv_bound_discrete(&mu, &lam, &phi).unwrap();
            assert_abs_diff_eq!(bound, kl, epsilon = 1e-12);
        }
    }

    #[test]
    fn bound_is_shift_invariant() {
        let mu = ProbTable::new(vec![0.3, 0.7]).unwrap();
        let lam = ProbTable::new(vec![0.6, 0.4]).unwrap();
        let phi = vec![0.2, -1.3];
        let shifted: Vec<f64> = phi.iter().map(|v| v + 5.0).collect();
        let b0 = dv_bound_discrete(&mu, &lam, &phi).unwrap();
        let b1 = dv_bound_discrete(&mu, &lam, &shifted).unwrap();
        assert_abs_diff_eq!(b0, b1, epsilon = 1e-12);
    }

    #[test]
    fn mi_of_independent_joint_is_zero() {
        // outer product of (0.3, 0.7) and (0.4, 0.6)
        let j = JointTable::new(2, 2, vec![0.12, 0.18, 0.28, 0.42]).unwrap();
        assert_abs_diff_eq!(mi_discrete(&j), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn mi_of_identity_coupling_is_entropy() {
        let j = JointTable::new(2, 2, vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        assert_abs_diff_eq!(mi_discrete(&j), 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn mi_equals_kl_from_product_of_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let p: Vec<f64> = (0..12).map(|_| rng.random_range(0.01..1.0)).collect();
            let sum: f64 = p.iter().sum();
            let j = JointTable::new(3, 4, p.iter().map(|v| v / sum).collect()).unwrap();
            let pa = j.row_marginal();
            let pb = j.col_marginal();
            let mut product = Vec::with_capacity(12);
            for i in 0..3 {
                for jj in 0..4 {
                    product.push(pa[i] * pb[jj]);
                }
            }
            let mu = ProbTable::new(j.probs().to_vec()).unwrap();
            let lam = ProbTable::new(product).unwrap();
            assert_abs_diff_eq!(
                mi_discrete(&j),
                kl_discrete(&mu, &lam).unwrap(),
                epsilon = 1e-12
            );
        }
    }

    proptest! {
        /// Any test function's bound stays at or below the exact divergence.
        #[test]
        fn bound_never_exceeds_divergence(
            wm in proptest::collection::vec(0.01f64..1.0, 2..=8),
            wl_seed in 0u64..1000,
            phi_scale in 0.1f64..5.0,
        ) {
            let n = wm.len();
            let mut rng = ChaCha8Rng::seed_from_u64(wl_seed);
            let wl: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let mu = ProbTable::from_weights(&wm).unwrap();
            let lam = ProbTable::from_weights(&wl).unwrap();
            let phi: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * phi_scale).collect();
            let kl = kl_discrete(&mu, &lam).unwrap();
            let bound = dv_bound_discrete(&mu, &lam, &phi).unwrap();
            prop_assert!(bound <= kl + 1e-10, "bound {} above divergence {}", bound, kl);
        }

        /// The divergence itself is never negative.
        #[test]
        fn divergence_nonnegative(
            wm in proptest::collection::vec(0.01f64..1.0, 2..=8),
            wl_seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(wl_seed);
            let wl: Vec<f64> = (0..wm.len()).map(|_| rng.random_range(0.01..1.0)).collect();
            let mu = ProbTable::from_weights(&wm).unwrap();
            let lam = ProbTable::from_weights(&wl).unwrap();
            prop_assert!(kl_discrete(&mu, &lam).unwrap() >= -1e-15);
        }
    }
}
