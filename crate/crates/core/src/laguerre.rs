//! Discrete-time Laguerre basis used to parameterize MPC input sequences.
//!
//! The basis matrix `L` (N×M) is built once from the pole `alpha` and reused;
//! column `rho` holds the `rho`-th orthonormal Laguerre function evaluated over
//! the horizon, and row `i` is the vector `L_i` mapping coefficients to the
//! input at prediction step `i`.

use num_traits::Float;

use crate::error::{Error, Result};

/// Discrete-time Laguerre basis over a horizon of `n` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LaguerreBasis<S> {
    alpha: S,
    beta: S,
    m: usize,
    n: usize,
    /// Row-major N×M; row i is `L_i^T`.
    rows: Vec<S>,
}

fn check_pole<S: Float>(alpha: S) -> Result<()> {
    if !(alpha >= S::zero() && alpha < S::one()) {
        return Err(Error::InvalidParameter(
            "laguerre pole alpha must lie in [0, 1)".into(),
        ));
    }
    Ok(())
}

/// Build the Laguerre state matrix `A_L` (M×M, row-major, lower triangular).
///
/// Diagonal entries are `alpha`; entry (i, j) below the diagonal is
/// `(-alpha)^(i-j-1) * beta` with `beta = 1 - alpha^2`.
pub fn build_al<S: Float>(alpha: S, m: usize) -> Result<Vec<S>> {
    check_pole(alpha)?;
    if m < 1 {
        return Err(Error::InvalidParameter("laguerre size M must be >= 1".into()));
    }
    let beta = S::one() - alpha * alpha;
    let mut a = vec![S::zero(); m * m];
    for i in 0..m {
        a[i * m + i] = alpha;
        for j in 0..i {
            a[i * m + j] = (-alpha).powi((i - j - 1) as i32) * beta;
        }
    }
    Ok(a)
}

impl<S: Float> LaguerreBasis<S> {
    /// Construct the basis by iterating the row recursion `L_{i+1} = A_L L_i`
    /// from the closed-form first row.
    pub fn new(alpha: S, m: usize, n: usize) -> Result<Self> {
        check_pole(alpha)?;
        if m < 1 {
            return Err(Error::InvalidParameter("laguerre size M must be >= 1".into()));
        }
        if m > n {
            return Err(Error::InvalidParameter(format!(
                "laguerre size M ({m}) must not exceed the horizon N ({n})"
            )));
        }
        let beta = S::one() - alpha * alpha;
        let a_l = build_al(alpha, m)?;
        let mut rows = vec![S::zero(); n * m];
        // L_0 = sqrt(beta) [1, -alpha, alpha^2, ..., (-alpha)^(M-1)]
        let sqrt_beta = beta.sqrt();
        for j in 0..m {
            rows[j] = sqrt_beta * (-alpha).powi(j as i32);
        }
        for i in 1..n {
            for r in 0..m {
                let mut acc = S::zero();
                for c in 0..m {
                    acc = acc + a_l[r * m + c] * rows[(i - 1) * m + c];
                }
                rows[i * m + r] = acc;
            }
        }
        Ok(Self {
            alpha,
            beta,
            m,
            n,
            rows,
        })
    }

    pub fn alpha(&self) -> S {
        self.alpha
    }

    pub fn beta(&self) -> S {
        self.beta
    }

    /// Basis function count M.
    pub fn size(&self) -> usize {
        self.m
    }

    /// Horizon N.
    pub fn horizon(&self) -> usize {
        self.n
    }

    /// Row `i` of L, i.e. `L_i^T`.
    pub fn row(&self, i: usize) -> &[S] {
        &self.rows[i * self.m..(i + 1) * self.m]
    }

    /// The full N×M matrix in row-major order.
    pub fn matrix(&self) -> &[S] {
        &self.rows
    }

    /// Inner product `L_i^T eta`.
    pub fn row_dot(&self, i: usize, eta: &[S]) -> S {
        self.row(i)
            .iter()
            .zip(eta)
            .fold(S::zero(), |acc, (&l, &e)| acc + l * e)
    }

    fn check_eta(&self, eta: &[S]) -> Result<()> {
        if eta.len() != self.m {
            return Err(Error::DimensionMismatch {
                expected: self.m,
                got: eta.len(),
            });
        }
        Ok(())
    }

    /// Recover the full input sequence `U = L eta + u_ss 1_N`.
    pub fn reconstruct_sequence(&self, eta: &[S], u_ss: S) -> Result<Vec<S>> {
        self.check_eta(eta)?;
        Ok((0..self.n).map(|i| self.row_dot(i, eta) + u_ss).collect())
    }

    /// First element of the reconstructed sequence, `L_0^T eta + u_ss`.
    pub fn first_input(&self, eta: &[S], u_ss: S) -> Result<S> {
        self.check_eta(eta)?;
        Ok(self.row_dot(0, eta) + u_ss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn al_alpha_09() {
        let a = build_al(0.9_f64, 3).unwrap();
        let expected = [0.9, 0.0, 0.0, 0.19, 0.9, 0.0, -0.171, 0.19, 0.9];
        for (got, want) in a.iter().zip(expected) {
            assert_abs_diff_eq!(got, &want, epsilon = 1e-15);
        }
    }

    #[test]
    fn al_alpha_zero_is_shift() {
        let a = build_al(0.0_f64, 3).unwrap();
        assert_eq!(a, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn al_alpha_half() {
        let a = build_al(0.5_f64, 2).unwrap();
        assert_eq!(a, vec![0.5, 0.0, 0.75, 0.5]);
    }

    #[test]
    fn al_rejects_bad_args() {
        assert!(build_al(1.0_f64, 3).is_err());
        assert!(build_al(-0.1_f64, 3).is_err());
        assert!(build_al(0.5_f64, 0).is_err());
    }

    #[test]
    fn basis_alpha_zero_is_identity() {
        let b = LaguerreBasis::new(0.0_f64, 4, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_eq!(b.row(i)[j], want);
            }
        }
    }

    #[test]
    fn basis_first_row_alpha_09() {
        let b = LaguerreBasis::new(0.9_f64, 4, 20).unwrap();
        let expected = [0.435890, -0.392301, 0.353071, -0.317764];
        for (got, want) in b.row(0).iter().zip(expected) {
            assert_abs_diff_eq!(got, &want, epsilon = 1e-6);
        }
    }

    #[test]
    fn basis_orthonormal_at_large_n() {
        let b = LaguerreBasis::new(0.9_f64, 4, 2000).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let dot: f64 = (0..2000).map(|i| b.row(i)[r] * b.row(i)[c]).sum();
                let want = if r == c { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(dot, want, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn basis_rejects_overcomplete() {
        assert!(LaguerreBasis::new(0.5_f64, 5, 4).is_err());
    }

    #[test]
    fn reconstruct_zero_eta_recovers_steady_input() {
        let b = LaguerreBasis::new(0.9_f64, 4, 20).unwrap();
        let u = b.reconstruct_sequence(&[0.0; 4], 0.4).unwrap();
        assert_eq!(u.len(), 20);
        for v in u {
            assert_eq!(v, 0.4);
        }
    }

    #[test]
    fn reconstruct_identity_basis() {
        let b = LaguerreBasis::new(0.0_f64, 3, 3).unwrap();
        let u = b.reconstruct_sequence(&[1.0, -2.0, 3.0], 0.0).unwrap();
        assert_eq!(u, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn reconstruct_single_column() {
        let b = LaguerreBasis::new(0.9_f64, 1, 2).unwrap();
        let u = b.reconstruct_sequence(&[1.0], 0.0).unwrap();
        assert_abs_diff_eq!(u[0], 0.435890, epsilon = 1e-6);
        assert_abs_diff_eq!(u[1], 0.392301, epsilon = 1e-6);
    }

    #[test]
    fn first_input_examples() {
        let b = LaguerreBasis::new(0.9_f64, 4, 20).unwrap();
        assert_eq!(b.first_input(&[0.0; 4], 0.4).unwrap(), 0.4);
        let sum = b.first_input(&[1.0, 1.0, 1.0, 1.0], 0.0).unwrap();
        assert_abs_diff_eq!(sum, 0.078896, epsilon = 1e-6);

        let ident = LaguerreBasis::new(0.0_f64, 3, 3).unwrap();
        assert_eq!(ident.first_input(&[0.7, 0.1, 0.2], 0.0).unwrap(), 0.7);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let b = LaguerreBasis::new(0.9_f64, 4, 20).unwrap();
        assert!(b.reconstruct_sequence(&[0.0; 3], 0.0).is_err());
        assert!(b.first_input(&[0.0; 5], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn recursion_consistency(alpha in 0.0_f64..0.99, m in 1_usize..20, extra in 0_usize..30) {
            let n = m + extra;
            let b = LaguerreBasis::new(alpha, m, n).unwrap();
            let a_l = build_al(alpha, m).unwrap();
            for i in 0..n.saturating_sub(1) {
                for r in 0..m {
                    let mut acc = 0.0;
                    for c in 0..m {
                        acc += a_l[r * m + c] * b.row(i)[c];
                    }
                    prop_assert!((b.row(i + 1)[r] - acc).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn first_input_matches_sequence_head(alpha in 0.0_f64..0.99, u_ss in -1.0_f64..1.0) {
            let b = LaguerreBasis::new(alpha, 4, 12).unwrap();
            let eta = [0.3, -0.5, 0.2, 0.9];
            let seq = b.reconstruct_sequence(&eta, u_ss).unwrap();
            prop_assert_eq!(b.first_input(&eta, u_ss).unwrap(), seq[0]);
        }

        #[test]
        fn asymptotic_orthonormality(alpha in 0.0_f64..0.95) {
            let n = ((100.0 / (1.0 - alpha)).ceil() as usize).max(4);
            let b = LaguerreBasis::new(alpha, 4, n).unwrap();
            for r in 0..4 {
                for c in 0..4 {
                    let dot: f64 = (0..n).map(|i| b.row(i)[r] * b.row(i)[c]).sum();
                    let want = if r == c { 1.0 } else { 0.0 };
                    prop_assert!((dot - want).abs() <= 1e-4);
                }
            }
        }
    }
}
