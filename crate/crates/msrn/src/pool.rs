//! Mean-shifted second-order pooling with power normalization.
//!
//! A feature map's spatial positions become columns of a d x N matrix; the
//! pooled representation is the power-normalized scaled outer product
//! G((1/N) X X^T), which factors out the spatial mode entirely: its size
//! depends only on the channel count, never on the resolution.
//!
//! `poly_kernel_oracle` is the independent brute-force check: for degree 2,
//! no mean shift and no normalization, the double sum over column inner
//! products must equal the Frobenius pairing of the pooled matrices.

use crate::tape::{Result, Tape, TapeError, Var};
use crate::tensor::Tensor;

/// Power-normalization settings: slope of the squashing function and the
/// fraction of the feature mean subtracted before pooling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PnConfig {
    pub sigma: f64,
    pub beta_shift: f64,
}

impl Default for PnConfig {
    fn default() -> Self {
        // Negative slope makes the squashing increase with co-occurrence
        // strength; the shift splits the difference on negative evidence.
        PnConfig { sigma: -5.0, beta_shift: 0.5 }
    }
}

impl PnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta_shift) {
            return Err(TapeError::Contract(format!(
                "beta_shift must lie in [0, 1], got {}",
                self.beta_shift
            )));
        }
        if !self.sigma.is_finite() {
            return Err(TapeError::Contract("sigma must be finite".into()));
        }
        Ok(())
    }
}

/// Subtracts `beta` times the column mean from every column of a d x N
/// matrix.
pub fn mean_shift(tape: &mut Tape, phi: Var, beta: f64) -> Result<Var> {
    let shape = tape.value(phi).shape().to_vec();
    if shape.len() != 2 {
        return Err(TapeError::Shape { op: "mean_shift", detail: format!("{shape:?}") });
    }
    let (d, n) = (shape[0], shape[1]);
    let ones_col = tape.constant(Tensor::full(&[n], 1.0));
    let col_sum = tape.matmul(phi, ones_col)?; // [d]
    let mu = tape.scalar_mul(col_sum, 1.0 / n as f64)?;
    let mu_col = tape.reshape(mu, &[d, 1])?;
    let ones_row = tape.constant(Tensor::full(&[1, n], 1.0));
    let mu_mat = tape.matmul(mu_col, ones_row)?; // [d, n], column mean in every column
    let shift = tape.scalar_mul(mu_mat, beta)?;
    tape.sub(phi, shift)
}

/// (1/N) X X^T for a d x N matrix; symmetric, and positive semidefinite when
/// no mean shift was applied.
pub fn sop(tape: &mut Tape, phi: Var) -> Result<Var> {
    let shape = tape.value(phi).shape().to_vec();
    if shape.len() != 2 {
        return Err(TapeError::Shape { op: "sop", detail: format!("{shape:?}") });
    }
    let n = shape[1];
    let phi_t = tape.transpose(phi)?;
    let outer = tape.matmul(phi, phi_t)?;
    tape.scalar_mul(outer, 1.0 / n as f64)
}

/// Elementwise (1 - exp(sigma x)) / (1 + exp(sigma x)); zero-centered and
/// bounded in (-1, 1). Equal to tanh(-sigma x / 2).
pub fn power_norm(tape: &mut Tape, x: Var, sigma: f64) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let ones = tape.constant(Tensor::full(&shape, 1.0));
    let scaled = tape.scalar_mul(x, sigma)?;
    let e = tape.exp(scaled)?;
    let num = tape.sub(ones, e)?;
    let den = tape.add(ones, e)?;
    let inv = tape.reciprocal(den)?;
    tape.mul(num, inv)
}

/// Full pooling pipeline for one feature map [d, h, w]:
/// flatten -> mean shift -> scaled outer product -> power normalization.
/// Differentiable end to end; output is [d, d].
pub fn pool_features(tape: &mut Tape, fm: Var, cfg: &PnConfig) -> Result<Var> {
    cfg.validate()?;
    let shape = tape.value(fm).shape().to_vec();
    if shape.len() != 3 {
        return Err(TapeError::Shape { op: "pool_features", detail: format!("{shape:?}") });
    }
    let (d, n) = (shape[0], shape[1] * shape[2]);
    let flat = tape.reshape(fm, &[d, n])?;
    let shifted = mean_shift(tape, flat, cfg.beta_shift)?;
    let pooled = sop(tape, shifted)?;
    power_norm(tape, pooled, cfg.sigma)
}

/// Brute-force sum of polynomial kernels of degree r between the columns of
/// two d x N matrices:
///
/// ```text
/// K = (1 / (N N*)) sum_n sum_n' <a_n, b_n'>^r
/// ```
///
/// For r = 2 this must match `frobenius(sop(A), sop(B))`; the double sum is
/// the test oracle for the pooled route.
pub fn poly_kernel_oracle(a: &Tensor, b: &Tensor, r: u32) -> f64 {
    assert!(r >= 1, "kernel degree must be at least 1");
    assert_eq!(a.rank(), 2);
    assert_eq!(b.rank(), 2);
    assert_eq!(a.shape()[0], b.shape()[0], "feature dimension must agree");
    let d = a.shape()[0];
    let (na, nb) = (a.shape()[1], b.shape()[1]);
    let mut total = 0.0;
    for n in 0..na {
        for m in 0..nb {
            let mut ip = 0.0;
            for i in 0..d {
                ip += a.data()[i * na + n] * b.data()[i * nb + m];
            }
            total += ip.powi(r as i32);
        }
    }
    total / (na as f64 * nb as f64)
}

/// Frobenius inner product of two equally shaped matrices.
pub fn frobenius(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    crate::kernels::dot(a.data(), b.data())
}

/// Plain (tape-free) pooled matrix (1/N) X X^T, for oracle comparisons.
pub fn sop_value(phi: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.leaf(phi.clone(), false);
    let out = sop(&mut tape, v).expect("sop on a finite matrix");
    tape.value(out).clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::Rng;

    fn on_tape(t: Tensor, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Tensor {
        let mut tape = Tape::new();
        let v = tape.leaf(t, false);
        let out = f(&mut tape, v).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn mean_shift_with_zero_beta_is_identity() {
        let phi = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = on_tape(phi.clone(), |t, v| mean_shift(t, v, 0.0));
        assert!(out.max_abs_diff(&phi) < 1e-15);
    }

    #[test]
    fn mean_shift_with_full_beta_zeroes_equal_columns() {
        let phi = Tensor::new(vec![2, 3], vec![4.0, 4.0, 4.0, -1.0, -1.0, -1.0]);
        let out = on_tape(phi, |t, v| mean_shift(t, v, 1.0));
        assert!(out.max_abs() < 1e-15);
    }

    #[test]
    fn mean_shift_half_beta_hand_value() {
        // columns [2,0] and [0,2]; mean [1,1]; half shift gives
        // [1.5,-0.5] and [-0.5,1.5]
        let phi = Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 2.0]);
        let out = on_tape(phi, |t, v| mean_shift(t, v, 0.5));
        let want = Tensor::new(vec![2, 2], vec![1.5, -0.5, -0.5, 1.5]);
        assert!(out.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn sop_of_unit_column_is_rank_one() {
        let phi = Tensor::new(vec![3, 1], vec![1.0, 0.0, 0.0]);
        let out = on_tape(phi, |t, v| sop(t, v));
        assert_eq!(out.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn sop_hand_value_is_identity() {
        // (1/2) [[1,1],[1,-1]] [[1,1],[1,-1]]^T = I
        let phi = Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, -1.0]);
        let out = on_tape(phi, |t, v| sop(t, v));
        let want = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        assert!(out.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn sop_output_size_is_channel_count() {
        let mut rng = Rng::new(8);
        let phi = Tensor::from_fn(&[64, 256], |_| rng.uniform(-1.0, 1.0));
        let out = on_tape(phi, |t, v| sop(t, v));
        assert_eq!(out.shape(), &[64, 64]);
    }

    #[test]
    fn power_norm_is_zero_centered_bounded_and_odd() {
        assert_eq!(on_tape(Tensor::scalar(0.0), |t, v| power_norm(t, v, -3.0)).item(), 0.0);
        // sigma = -2 at x = 1 equals tanh(1)
        let v = on_tape(Tensor::scalar(1.0), |t, v| power_norm(t, v, -2.0)).item();
        assert!((v - 0.761594).abs() < 1e-6);
        assert!((v - 1.0f64.tanh()).abs() < 1e-12);
        let vn = on_tape(Tensor::scalar(-1.0), |t, v| power_norm(t, v, -2.0)).item();
        assert!((vn + 0.761594).abs() < 1e-6);
        // |sigma * x| kept below ~36 so the bound stays strict in f64
        let mut rng = Rng::new(9);
        let x = Tensor::from_fn(&[5, 5], |_| rng.uniform(-5.0, 5.0));
        let pos = on_tape(x.clone(), |t, v| power_norm(t, v, -5.0));
        let neg_in = Tensor::new(vec![5, 5], x.data().iter().map(|v| -v).collect());
        let neg = on_tape(neg_in, |t, v| power_norm(t, v, -5.0));
        for (p, n) in pos.data().iter().zip(neg.data()) {
            assert!((p + n).abs() < 1e-15, "odd symmetry");
            assert!(p.abs() < 1.0, "bounded");
        }
    }

    #[test]
    fn pool_features_of_zero_map_is_zero() {
        let fm = Tensor::zeros(&[4, 3, 3]);
        let out = on_tape(fm, |t, v| pool_features(t, v, &PnConfig::default()));
        assert!(out.max_abs() < 1e-15);
        assert_eq!(out.shape(), &[4, 4]);
    }

    #[test]
    fn pooled_matrix_ignores_nearest_duplication_of_columns() {
        // nearest upsampling duplicates spatial positions, which leaves the
        // normalized outer product unchanged
        let mut rng = Rng::new(10);
        let fm = Tensor::from_fn(&[6, 4, 4], |_| rng.uniform(-1.0, 1.0));
        let cfg = PnConfig::default();
        let mut tape = Tape::new();
        let small = tape.leaf(fm.clone(), false);
        let pooled_small = pool_features(&mut tape, small, &cfg).unwrap();
        let big = tape.upsample_nearest(small, 2).unwrap();
        let pooled_big = pool_features(&mut tape, big, &cfg).unwrap();
        let diff = tape.value(pooled_small).max_abs_diff(tape.value(pooled_big));
        assert!(diff < 1e-12, "diff {diff}");
    }

    #[test]
    fn pooled_matrix_is_symmetric_to_machine_precision() {
        let mut rng = Rng::new(11);
        let fm = Tensor::from_fn(&[8, 5, 5], |_| rng.uniform(-1.0, 1.0));
        let out = on_tape(fm, |t, v| pool_features(t, v, &PnConfig::default()));
        let d = out.shape()[0];
        for i in 0..d {
            for j in 0..d {
                assert!((out.at2(i, j) - out.at2(j, i)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn flattening_order_does_not_change_the_pooled_value() {
        // the outer product is permutation-invariant over columns
        let mut rng = Rng::new(12);
        let d = 5;
        let n = 7;
        let phi = Tensor::from_fn(&[d, n], |_| rng.uniform(-1.0, 1.0));
        let perm = rng.choose_distinct(n, n);
        let permuted = Tensor::from_fn(&[d, n], |flat| {
            let (i, j) = (flat / n, flat % n);
            phi.at2(i, perm[j])
        });
        let a = sop_value(&phi);
        let b = sop_value(&permuted);
        assert!(a.max_abs_diff(&b) < 1e-14);
    }

    #[test]
    fn kernel_oracle_on_unit_vectors() {
        let e1 = Tensor::new(vec![3, 1], vec![1.0, 0.0, 0.0]);
        let e2 = Tensor::new(vec![3, 1], vec![0.0, 1.0, 0.0]);
        assert_eq!(poly_kernel_oracle(&e1, &e1, 2), 1.0);
        assert_eq!(poly_kernel_oracle(&e1, &e2, 2), 0.0);
        let s1 = sop_value(&e1);
        assert_eq!(frobenius(&s1, &s1), 1.0);
    }

    #[test]
    fn degree_two_oracle_matches_frobenius_pairing_of_pooled_matrices() {
        let mut rng = Rng::new(13);
        for _ in 0..25 {
            let d = 1 + rng.below(8);
            let na = 1 + rng.below(12);
            let nb = 1 + rng.below(12);
            let a = Tensor::from_fn(&[d, na], |_| rng.uniform(-1.0, 1.0));
            let b = Tensor::from_fn(&[d, nb], |_| rng.uniform(-1.0, 1.0));
            let k = poly_kernel_oracle(&a, &b, 2);
            let pairing = frobenius(&sop_value(&a), &sop_value(&b));
            assert!((k - pairing).abs() < 1e-9, "d={d} na={na} nb={nb}");
        }
    }

    #[test]
    fn degree_three_oracle_runs_standalone() {
        let mut rng = Rng::new(14);
        let a = Tensor::from_fn(&[4, 5], |_| rng.uniform(-1.0, 1.0));
        let k = poly_kernel_oracle(&a, &a, 3);
        assert!(k.is_finite());
    }

    #[test]
    fn pool_features_gradient_checks() {
        let mut rng = Rng::new(15);
        let fm = Tensor::from_fn(&[4, 3, 3], |_| rng.uniform(-1.0, 1.0));
        let err = grad_check(
            |tape, v| {
                let pooled = pool_features(tape, v, &PnConfig::default())?;
                tape.sum(pooled)
            },
            &fm,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn beta_outside_unit_interval_is_rejected() {
        let fm = Tensor::zeros(&[2, 2, 2]);
        let mut tape = Tape::new();
        let v = tape.leaf(fm, false);
        let bad = PnConfig { sigma: -5.0, beta_shift: 1.5 };
        assert!(pool_features(&mut tape, v, &bad).is_err());
    }
}
