//! L2-regularized logistic regression fitted by Newton's method.

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug, PartialEq)]
pub struct Logistic {
    /// Feature weights followed by the intercept.
    pub weights: Vec<f64>,
}

impl Logistic {
    /// Fits `P(y=1 | x) = sigmoid(w.x + b)`. The intercept is not penalized.
    /// Returns `None` when the rows are empty or ragged.
    pub fn fit(rows: &[Vec<f64>], y: &[bool], l2: f64, iterations: usize) -> Option<Self> {
        let n = rows.len();
        if n == 0 || y.len() != n {
            return None;
        }
        let f = rows[0].len();
        if rows.iter().any(|r| r.len() != f) {
            return None;
        }
        let p = f + 1;
        let x = DMatrix::from_fn(n, p, |i, j| if j < f { rows[i][j] } else { 1.0 });
        let t = DVector::from_fn(n, |i, _| if y[i] { 1.0 } else { 0.0 });
        let mut w = DVector::<f64>::zeros(p);
        let mut penalty = DMatrix::<f64>::identity(p, p) * l2;
        penalty[(f, f)] = 0.0;
        for _ in 0..iterations {
            let z = &x * &w;
            let mu = z.map(crate::objectives::sigmoid);
            let mut grad = x.transpose() * (&mu - &t);
            grad += &penalty * &w;
            let s = mu.map(|m| (m * (1.0 - m)).max(1e-12));
            let mut xs = x.clone();
            for (i, mut row) in xs.row_iter_mut().enumerate() {
                row *= s[i];
            }
            let hess = x.transpose() * xs + &penalty + DMatrix::<f64>::identity(p, p) * 1e-9;
            let step = match hess.cholesky() {
                Some(c) => c.solve(&grad),
                None => break,
            };
            w -= &step;
            if step.norm() < 1e-10 {
                break;
            }
        }
        Some(Self {
            weights: w.iter().copied().collect(),
        })
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        let f = self.weights.len() - 1;
        x.iter().zip(&self.weights[..f]).map(|(a, b)| a * b).sum::<f64>() + self.weights[f]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recovers_planted_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, b) = ([1.5, -2.0], 0.5);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for _ in 0..20000 {
            let x = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let p = crate::objectives::sigmoid(w[0] * x[0] + w[1] * x[1] + b);
            y.push(rng.random_bool(p));
            rows.push(x);
        }
        let m = Logistic::fit(&rows, &y, 0.0, 50).unwrap();
        assert!((m.weights[0] - 1.5).abs() < 0.15, "{:?}", m.weights);
        assert!((m.weights[1] + 2.0).abs() < 0.15, "{:?}", m.weights);
        assert!((m.weights[2] - 0.5).abs() < 0.1, "{:?}", m.weights);
    }

    #[test]
    fn separable_data_stays_finite_with_penalty() {
        let rows = vec![vec![-1.0], vec![1.0]];
        let m = Logistic::fit(&rows, &[false, true], 1e-2, 100).unwrap();
        assert!(m.weights.iter().all(|w| w.is_finite()));
        assert!(m.logit(&[1.0]) > 0.0 && m.logit(&[-1.0]) < 0.0);
    }

    #[test]
    fn empty_or_ragged_is_rejected() {
        assert!(Logistic::fit(&[], &[], 0.0, 5).is_none());
        assert!(Logistic::fit(&[vec![1.0], vec![1.0, 2.0]], &[true, false], 0.0, 5).is_none());
    }
}
