//! Noise schedules and transition-matrix algebra for the absorbing-state
//! chain. Per step t a token keeps its state with probability alpha_t, moves
//! to a uniformly random other codebook token with total probability
//! C*beta_t, and falls into MASK with probability gamma_t; MASK is absorbing.
//! Cumulative quantities give the t-step transition in closed form.

use crate::error::{Error, Result};

/// Per-timestep transition coefficients plus 64-bit cumulative products.
/// Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    c: usize,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    gamma: Vec<f64>,
    /// prod_alpha[t] = prod_{i<=t} alpha_i, prod_alpha[0] = 1.
    prod_alpha: Vec<f64>,
    /// prod_keep[t] = prod_{i<=t} (1 - gamma_i), prod_keep[0] = 1.
    prod_keep: Vec<f64>,
}

impl NoiseSchedule {
    /// Build from explicit per-step coefficients. Each step must satisfy
    /// alpha + C*beta + gamma = 1 within 1e-12 with entries in [0, 1], and
    /// the final step must be fully absorbing (gamma_T = 1) so that the
    /// fully-corrupted latent equals the masked latent exactly.
    pub fn from_raw(alpha: Vec<f64>, beta: Vec<f64>, gamma: Vec<f64>, c: usize) -> Result<Self> {
        let t_max = alpha.len();
        if t_max == 0 || beta.len() != t_max || gamma.len() != t_max {
            return Err(Error::contract("schedule arrays must be equal, nonempty"));
        }
        if c < 2 {
            return Err(Error::contract("codebook size must be at least 2"));
        }
        for t in 0..t_max {
            let (a, b, g) = (alpha[t], beta[t], gamma[t]);
            let col = a + c as f64 * b + g;
            if !(0.0..=1.0).contains(&a)
                || !(0.0..=1.0).contains(&b)
                || !(0.0..=1.0).contains(&g)
                || (col - 1.0).abs() > 1e-12
            {
                return Err(Error::contract(format!(
                    "step {}: alpha={a} beta={b} gamma={g} column sum {col}",
                    t + 1
                )));
            }
        }
        if gamma[t_max - 1] != 1.0 {
            return Err(Error::contract(
                "final step must be fully absorbing (gamma_T = 1)",
            ));
        }
        let mut prod_alpha = vec![1.0; t_max + 1];
        let mut prod_keep = vec![1.0; t_max + 1];
        for t in 1..=t_max {
            prod_alpha[t] = prod_alpha[t - 1] * alpha[t - 1];
            prod_keep[t] = prod_keep[t - 1] * (1.0 - gamma[t - 1]);
        }
        Ok(NoiseSchedule {
            t_max,
            c,
            alpha,
            beta,
            gamma,
            prod_alpha,
            prod_keep,
        })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn c(&self) -> usize {
        self.c
    }

    /// MASK id (= C).
    pub fn mask_id(&self) -> usize {
        self.c
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.prod_alpha[t]
    }

    pub fn gamma_bar(&self, t: usize) -> f64 {
        1.0 - self.prod_keep[t]
    }

    pub fn beta_bar(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t) - self.gamma_bar(t)) / self.c as f64
    }

    /// Coefficients of the s->t jump (0 <= s < t <= T): the composed
    /// transition over steps s+1..=t has the same algebraic shape as a
    /// single step, with (a, b, g) returned here.
    pub fn range_coeffs(&self, s: usize, t: usize) -> (f64, f64, f64) {
        debug_assert!(s < t && t <= self.t_max);
        let mut a = 1.0;
        let mut keep = 1.0;
        for i in (s + 1)..=t {
            a *= self.alpha[i - 1];
            keep *= 1.0 - self.gamma[i - 1];
        }
        let g = 1.0 - keep;
        let b = (1.0 - a - g) / self.c as f64;
        (a, b, g)
    }
}

const DEFAULT_ETA: f64 = 0.05;

/// Schedule family with gamma_t = 1/(T-t+1) (so the cumulative mask
/// probability is exactly t/T and reaches 1 at T), a constant uniform-leak
/// fraction eta, and alpha_t = (1-gamma_t)(1-eta).
pub fn make_schedule(t_max: usize, c: usize, eta: f64) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::contract("T must be at least 1"));
    }
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::contract(format!("eta {eta} out of [0, 1)")));
    }
    let mut alpha = Vec::with_capacity(t_max);
    let mut beta = Vec::with_capacity(t_max);
    let mut gamma = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let g = 1.0 / (t_max - t + 1) as f64;
        let leak = eta * (1.0 - g);
        gamma.push(g);
        beta.push(leak / c as f64);
        alpha.push((1.0 - g) - leak);
    }
    NoiseSchedule::from_raw(alpha, beta, gamma, c)
}

pub fn default_eta() -> f64 {
    DEFAULT_ETA
}

/// Column j of the one-step transition matrix Q_t: the distribution of z_t
/// given z_{t-1} = j. Codebook tokens keep their id with probability
/// alpha+beta, move to each other codebook id with beta, and mask with
/// gamma; MASK is absorbing.
pub fn transition_column(j: usize, t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if t < 1 || t > sched.t_max() {
        return Err(Error::contract(format!("t={t} out of 1..={}", sched.t_max())));
    }
    let c = sched.c();
    if j > c {
        return Err(Error::contract(format!("token id {j} out of 0..={c}")));
    }
    let mut col = vec![0.0; c + 1];
    if j == c {
        col[c] = 1.0;
    } else {
        let (a, b, g) = (sched.alpha(t), sched.beta(t), sched.gamma(t));
        for slot in col.iter_mut().take(c) {
            *slot = b;
        }
        col[j] = a + b;
        col[c] = g;
    }
    Ok(col)
}

/// Column j of the cumulative matrix: the distribution of z_t given
/// z_0 = j (j must be a codebook token; clean latents contain no MASK).
pub fn cumulative_column(j: usize, t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if t < 1 || t > sched.t_max() {
        return Err(Error::contract(format!("t={t} out of 1..={}", sched.t_max())));
    }
    let c = sched.c();
    if j >= c {
        return Err(Error::contract(format!(
            "cumulative_column: z_0 id {j} must be a codebook token < {c}"
        )));
    }
    let (a, b, g) = (sched.alpha_bar(t), sched.beta_bar(t), sched.gamma_bar(t));
    let mut col = vec![b; c + 1];
    col[j] = a + b;
    col[c] = g;
    Ok(col)
}

/// Column j of the s->t jump transition (distribution of z_t given z_s = j).
pub fn range_column(j: usize, s: usize, t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if s >= t || t > sched.t_max() {
        return Err(Error::contract(format!("range {s}->{t} invalid")));
    }
    let c = sched.c();
    if j > c {
        return Err(Error::contract(format!("token id {j} out of 0..={c}")));
    }
    let mut col = vec![0.0; c + 1];
    if j == c {
        col[c] = 1.0;
    } else {
        let (a, b, g) = sched.range_coeffs(s, t);
        for slot in col.iter_mut().take(c) {
            *slot = b;
        }
        col[j] = a + b;
        col[c] = g;
    }
    Ok(col)
}

/// Materialize Q_t (or cumulative Q-bar_t) as a dense (C+1)x(C+1) row-major
/// matrix M with M[i][j] = P(next = i | prev = j). Test-side oracle support.
pub fn as_dense_matrix(t: usize, sched: &NoiseSchedule, cumulative: bool) -> Result<Vec<Vec<f64>>> {
    let c = sched.c();
    let mut m = vec![vec![0.0; c + 1]; c + 1];
    for j in 0..=c {
        let col = if cumulative {
            if j == c {
                // Q-bar keeps MASK absorbing; materialize the identity column.
                let mut col = vec![0.0; c + 1];
                col[c] = 1.0;
                col
            } else {
                cumulative_column(j, t, sched)?
            }
        } else {
            transition_column(j, t, sched)?
        };
        for i in 0..=c {
            m[i][j] = col[i];
        }
    }
    Ok(m)
}

/// CSV with one row per timestep: t, alpha, beta, gamma, alpha_bar,
/// beta_bar, gamma_bar.
pub fn schedule_csv(sched: &NoiseSchedule) -> String {
    let mut out = String::from("t,alpha,beta,gamma,alpha_bar,beta_bar,gamma_bar\n");
    for t in 1..=sched.t_max() {
        out.push_str(&format!(
            "{},{:.17},{:.17},{:.17},{:.17},{:.17},{:.17}\n",
            t,
            sched.alpha(t),
            sched.beta(t),
            sched.gamma(t),
            sched.alpha_bar(t),
            sched.beta_bar(t),
            sched.gamma_bar(t)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::Rng;

    fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        let mut out = vec![vec![0.0; n]; n];
        for i in 0..n {
            for k in 0..n {
                for j in 0..n {
                    out[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        out
    }

    #[test]
    fn gamma_telescopes_to_t_over_t() {
        let s = make_schedule(4, 8, 0.05).unwrap();
        let want_g = [0.25, 1.0 / 3.0, 0.5, 1.0];
        let want_gbar = [0.25, 0.5, 0.75, 1.0];
        for t in 1..=4 {
            assert!((s.gamma(t) - want_g[t - 1]).abs() < 1e-15);
            assert!((s.gamma_bar(t) - want_gbar[t - 1]).abs() < 1e-12);
        }
        assert_eq!(s.gamma_bar(4), 1.0, "gamma_bar at T must be exactly 1");
    }

    #[test]
    fn eta_zero_is_pure_absorbing() {
        let s = make_schedule(10, 4, 0.0).unwrap();
        for t in 1..=10 {
            assert_eq!(s.beta(t), 0.0);
        }
    }

    #[test]
    fn column_sum_constraint() {
        for (t_max, c, eta) in [(1, 2, 0.0), (7, 3, 0.1), (50, 64, 0.05), (100, 16, 0.3)] {
            let s = make_schedule(t_max, c, eta).unwrap();
            for t in 1..=t_max {
                let sum = s.alpha(t) + c as f64 * s.beta(t) + s.gamma(t);
                assert!((sum - 1.0).abs() < 1e-12, "t={t} sum={sum}");
            }
        }
    }

    #[test]
    fn transition_column_values() {
        // C=2 with alpha=0.7, beta=0.1, gamma=0.1: column 0 is (0.8, 0.1, 0.1)
        let s = NoiseSchedule::from_raw(vec![0.7, 0.0], vec![0.1, 0.0], vec![0.1, 1.0], 2).unwrap();
        let col = transition_column(0, 1, &s).unwrap();
        assert!((col[0] - 0.8).abs() < 1e-15);
        assert!((col[1] - 0.1).abs() < 1e-15);
        assert!((col[2] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn mask_column_is_one_hot() {
        let s = make_schedule(5, 6, 0.05).unwrap();
        for t in 1..=5 {
            let col = transition_column(6, t, &s).unwrap();
            assert_eq!(col[6], 1.0);
            assert!(col[..6].iter().all(|&p| p == 0.0));
        }
    }

    #[test]
    fn columns_are_stochastic() {
        let s = make_schedule(20, 5, 0.07).unwrap();
        for t in 1..=20 {
            for j in 0..=5 {
                let col = transition_column(j, t, &s).unwrap();
                assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            for j in 0..5 {
                let col = cumulative_column(j, t, &s).unwrap();
                assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cumulative_at_t_max_is_mask() {
        let s = make_schedule(13, 4, 0.05).unwrap();
        for j in 0..4 {
            let col = cumulative_column(j, 13, &s).unwrap();
            assert_eq!(col[4], 1.0);
            assert!(col[..4].iter().all(|&p| p == 0.0));
        }
    }

    #[test]
    fn cumulative_t1_equals_transition() {
        let s = make_schedule(9, 7, 0.11).unwrap();
        for j in 0..7 {
            let a = cumulative_column(j, 1, &s).unwrap();
            let b = transition_column(j, 1, &s).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cumulative_rejects_mask_input() {
        let s = make_schedule(4, 3, 0.0).unwrap();
        assert!(cumulative_column(3, 2, &s).is_err());
    }

    #[test]
    fn closed_form_matches_dense_product() {
        let mut rng = Rng::new(17, 0);
        for _ in 0..30 {
            let t_max = 1 + rng.below(40) as usize;
            let c = 2 + rng.below(8) as usize;
            let eta = rng.next_f64() * (1.0 / (1.0 + c as f64));
            let s = make_schedule(t_max, c, eta).unwrap();

            // Explicit product oracle: prod_{i=t}^{1} Q_i applied column by column.
            let mut prod = as_dense_matrix(1, &s, false).unwrap();
            for t in 1..=t_max {
                if t > 1 {
                    let q_t = as_dense_matrix(t, &s, false).unwrap();
                    prod = matmul(&q_t, &prod);
                }
                for j in 0..c {
                    let closed = cumulative_column(j, t, &s).unwrap();
                    for i in 0..=c {
                        assert!(
                            (closed[i] - prod[i][j]).abs() < 1e-10,
                            "T={t_max} C={c} t={t} i={i} j={j}: {} vs {}",
                            closed[i],
                            prod[i][j]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn dense_recursion() {
        let s = make_schedule(12, 5, 0.09).unwrap();
        for t in 2..=12 {
            let lhs = as_dense_matrix(t, &s, true).unwrap();
            let rhs = matmul(
                &as_dense_matrix(t, &s, false).unwrap(),
                &as_dense_matrix(t - 1, &s, true).unwrap(),
            );
            for i in 0..=5 {
                for j in 0..=5 {
                    assert!((lhs[i][j] - rhs[i][j]).abs() < 1e-10);
                }
            }
        }
        let final_dense = as_dense_matrix(12, &s, true).unwrap();
        for j in 0..5 {
            assert_eq!(final_dense[5][j], 1.0, "MASK row of dense cumulative at T");
        }
    }

    #[test]
    fn range_column_composes() {
        let s = make_schedule(20, 4, 0.08).unwrap();
        // s->t jump equals the product of per-step matrices over (s, t].
        let (lo, hi) = (3usize, 11usize);
        let mut prod = as_dense_matrix(lo + 1, &s, false).unwrap();
        for t in (lo + 2)..=hi {
            prod = matmul(&as_dense_matrix(t, &s, false).unwrap(), &prod);
        }
        for j in 0..=4 {
            let col = range_column(j, lo, hi, &s).unwrap();
            for i in 0..=4 {
                assert!((col[i] - prod[i][j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn monotone_cumulative_quantities() {
        let s = make_schedule(50, 64, 0.05).unwrap();
        for t in 2..=50 {
            assert!(s.gamma_bar(t) > s.gamma_bar(t - 1));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn parameter_validation() {
        assert!(make_schedule(0, 4, 0.0).is_err());
        assert!(make_schedule(4, 1, 0.0).is_err());
        assert!(make_schedule(4, 4, 1.0).is_err());
        assert!(make_schedule(4, 4, -0.1).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let s = make_schedule(3, 4, 0.05).unwrap();
        let csv = schedule_csv(&s);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "t,alpha,beta,gamma,alpha_bar,beta_bar,gamma_bar");
    }
}
