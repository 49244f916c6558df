//! Tokenization math: instance and reversible instance normalization,
//! channel independence, patching, and shifted next-patch targets.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Added to the population variance before the square root.
pub const NORM_EPS: f64 = 1e-5;

/// Smallest |gamma| for which the RevIN affine is treated as invertible.
pub const MIN_REVIN_GAMMA: f64 = 1e-8;

/// Per-window, per-channel statistics captured during normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats<T> {
    pub mean: Array1<T>,
    /// `sqrt(var + NORM_EPS)`, population variance.
    pub std: Array1<T>,
}

impl<T: Scalar> NormStats<T> {
    pub fn of(x: ArrayView2<'_, T>) -> Self {
        let n = T::of(x.nrows() as f64);
        let mean = x.sum_axis(Axis(0)) / n;
        let var = x
            .axis_iter(Axis(1))
            .zip(mean.iter())
            .map(|(col, &m)| col.iter().map(|&v| (v - m) * (v - m)).fold(T::zero(), |a, b| a + b) / n)
            .collect::<Array1<T>>();
        let std = var.mapv(|v| (v + T::of(NORM_EPS)).sqrt());
        Self { mean, std }
    }

    /// `(x - mean) / std`, column-wise.
    pub fn standardize(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        (&x - &self.mean) / &self.std
    }
}

/// Affine-free instance normalization (alignment stage).
pub fn instance_normalize<T: Scalar>(x_in: ArrayView2<'_, T>) -> Result<(Array2<T>, NormStats<T>)> {
    if x_in.nrows() < 2 {
        return Err(Error::TooShort {
            needed: 2,
            available: x_in.nrows(),
        });
    }
    let stats = NormStats::of(x_in);
    Ok((stats.standardize(x_in), stats))
}

/// Trainable per-channel affine shared by RevIN's two directions.
#[derive(Debug, Clone, PartialEq)]
pub struct RevInParams<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub trainable: bool,
}

impl<T: Scalar> RevInParams<T> {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            trainable: true,
        }
    }
}

/// Standardize with instance statistics, then apply `gamma * z + beta`.
pub fn revin_normalize<T: Scalar>(
    x_in: ArrayView2<'_, T>,
    gamma: ArrayView1<'_, T>,
    beta: ArrayView1<'_, T>,
) -> Result<(Array2<T>, NormStats<T>)> {
    if gamma.len() != x_in.ncols() || beta.len() != x_in.ncols() {
        return Err(Error::shape("RevIN channels", x_in.ncols(), gamma.len()));
    }
    let (z, stats) = instance_normalize(x_in)?;
    Ok((z * gamma + beta, stats))
}

/// `(y - beta) / gamma * std + mean`, column-wise.
pub fn revin_denormalize<T: Scalar>(
    y: ArrayView2<'_, T>,
    stats: &NormStats<T>,
    gamma: ArrayView1<'_, T>,
    beta: ArrayView1<'_, T>,
) -> Result<Array2<T>> {
    if gamma.len() != y.ncols() || stats.mean.len() != y.ncols() {
        return Err(Error::shape("RevIN channels", y.ncols(), gamma.len()));
    }
    if let Some((c, g)) = gamma.iter().enumerate().find(|(_, g)| g.abs() < T::of(MIN_REVIN_GAMMA)) {
        return Err(Error::SingularAffine(g.as_f64(), c));
    }
    Ok((&y - &beta) / gamma * &stats.std + &stats.mean)
}

/// Splits a `T x C` matrix into `C` univariate series.
pub fn channel_independence<T: Scalar>(x: ArrayView2<'_, T>) -> Vec<Array1<T>> {
    x.axis_iter(Axis(1)).map(|col| col.to_owned()).collect()
}

/// `floor((t_in - patch_len) / stride) + 1`, or `None` when no patch fits.
pub fn patch_count(t_in: usize, patch_len: usize, stride: usize) -> Option<usize> {
    if stride == 0 || patch_len == 0 || t_in < patch_len {
        return None;
    }
    Some((t_in - patch_len) / stride + 1)
}

/// Overlapping patches of one univariate channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid<T> {
    /// `T_p x P`; row `j` is the source slice `[j*S, j*S + P)`.
    pub patches: Array2<T>,
    pub patch_start_timestamps: Vec<i64>,
    pub patch_len: usize,
    pub stride: usize,
}

impl<T> PatchGrid<T> {
    pub fn num_patches(&self) -> usize {
        self.patches.nrows()
    }
}

/// Cuts a series into patches. Samples after the last full patch are dropped.
pub fn patchify<T: Scalar>(
    series: ArrayView1<'_, T>,
    patch_len: usize,
    stride: usize,
    timestamps: &[i64],
) -> Result<PatchGrid<T>> {
    if timestamps.len() != series.len() {
        return Err(Error::shape("patchify timestamps", series.len(), timestamps.len()));
    }
    if stride == 0 {
        return Err(Error::Config("patch stride must be at least 1".into()));
    }
    let num = patch_count(series.len(), patch_len, stride).ok_or(Error::TooShort {
        needed: patch_len,
        available: series.len(),
    })?;
    let patches = Array2::from_shape_fn((num, patch_len), |(j, i)| series[j * stride + i]);
    Ok(PatchGrid {
        patches,
        patch_start_timestamps: (0..num).map(|j| timestamps[j * stride]).collect(),
        patch_len,
        stride,
    })
}

/// Next-patch training pair: row `j` of `targets` is patch `j + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedPair<T> {
    pub inputs: Array2<T>,
    pub targets: Array2<T>,
}

pub fn make_shift_targets<T: Scalar>(grid: &PatchGrid<T>) -> Result<ShiftedPair<T>> {
    let n = grid.num_patches();
    if n < 2 {
        return Err(Error::TooShort {
            needed: 2,
            available: n,
        });
    }
    Ok(ShiftedPair {
        inputs: grid.patches.slice(s![..n - 1, ..]).to_owned(),
        targets: grid.patches.slice(s![1.., ..]).to_owned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Independent two-pass mean/std; no shared code with NormStats.
    fn oracle_standardize(xs: &[f64]) -> Vec<f64> {
        let n = xs.len() as f64;
        let mut mean = 0.0;
        for x in xs {
            mean += x;
        }
        mean /= n;
        let mut ss = 0.0;
        for x in xs {
            ss += (x - mean) * (x - mean);
        }
        let sd = (ss / n + NORM_EPS).sqrt();
        xs.iter().map(|x| (x - mean) / sd).collect()
    }

    fn timestamps(n: usize) -> Vec<i64> {
        (0..n as i64).map(|t| 1000 + 60 * t).collect()
    }

    #[test]
    fn instance_normalize_hand_example() {
        let (z, stats) = instance_normalize(array![[1.0f64], [2.0], [3.0]].view()).unwrap();
        let expected = [-1.22474, 0.0, 1.22474];
        for (got, want) in z.column(0).iter().zip(expected) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-5);
        }
        for (got, want) in z.column(0).iter().zip(oracle_standardize(&[1.0, 2.0, 3.0])) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(stats.mean[0], 2.0);
    }

    #[test]
    fn instance_normalize_constant_channel() {
        let (z, _) = instance_normalize(array![[5.0f32], [5.0], [5.0], [5.0]].view()).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_normalize_needs_two_rows() {
        assert!(instance_normalize(array![[1.0f64]].view()).is_err());
    }

    #[test]
    fn revin_identity_and_affine() {
        let x = array![[1.0f64, 10.0], [4.0, -3.0], [2.0, 7.5]];
        let id = RevInParams::identity(2);
        let (xn, stats) = revin_normalize(x.view(), id.gamma.view(), id.beta.view()).unwrap();
        let back = revin_denormalize(xn.view(), &stats, id.gamma.view(), id.beta.view()).unwrap();
        assert!((&back - &x).iter().all(|d| d.abs() < 1e-5));

        let gamma = array![2.0, 2.0];
        let beta = array![1.0, 1.0];
        let (xa, _) = revin_normalize(x.view(), gamma.view(), beta.view()).unwrap();
        let z = stats.standardize(x.view());
        assert_eq!(xa, z * 2.0 + 1.0);
    }

    #[test]
    fn revin_rejects_singular_gamma() {
        let x = array![[1.0f64], [2.0]];
        let (xn, stats) = instance_normalize(x.view()).unwrap();
        let err = revin_denormalize(xn.view(), &stats, array![1e-9].view(), array![0.0].view()).unwrap_err();
        assert!(matches!(err, Error::SingularAffine(_, 0)));
    }

    #[test]
    fn channel_independence_splits_columns() {
        let x = Array2::from_shape_fn((4, 3), |(t, c)| (t * 3 + c) as f64);
        let parts = channel_independence(x.view());
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[1], x.column(1));
        let restacked = ndarray::stack(Axis(1), &parts.iter().map(|p| p.view()).collect::<Vec<_>>()).unwrap();
        assert_eq!(restacked, x);
        let single = array![[1.0f64], [2.0]];
        assert_eq!(channel_independence(single.view())[0], array![1.0, 2.0]);
    }

    #[test]
    fn patch_counts_for_reference_settings() {
        assert_eq!(patch_count(512, 16, 8), Some(63));
        assert_eq!(patch_count(336, 16, 8), Some(41));
        assert_eq!(patch_count(512, 12, 12), Some(42));
        assert_eq!(patch_count(7, 8, 4), None);
    }

    #[test]
    fn patchify_drops_trailing_samples() {
        let series = Array1::from_iter((0..11).map(|v| v as f64));
        let grid = patchify(series.view(), 4, 3, &timestamps(11)).unwrap();
        // starts 0, 3, 6; sample 10 is dropped
        assert_eq!(grid.num_patches(), 3);
        assert_eq!(grid.patches.row(2), array![6.0, 7.0, 8.0, 9.0]);
        assert_eq!(grid.patch_start_timestamps, vec![1000, 1180, 1360]);
        assert!(patchify(series.view(), 12, 1, &timestamps(11)).is_err());
    }

    #[test]
    fn shift_targets_definition() {
        let grid = PatchGrid {
            patches: array![[1.0f64, 1.0], [2.0, 2.0], [3.0, 3.0]],
            patch_start_timestamps: vec![0, 1, 2],
            patch_len: 2,
            stride: 2,
        };
        let pair = make_shift_targets(&grid).unwrap();
        assert_eq!(pair.inputs, array![[1.0, 1.0], [2.0, 2.0]]);
        assert_eq!(pair.targets, array![[2.0, 2.0], [3.0, 3.0]]);
        let single = PatchGrid {
            patches: array![[1.0f64, 2.0]],
            ..grid
        };
        assert!(make_shift_targets(&single).is_err());
    }

    #[test]
    fn overlapping_targets_share_values_with_inputs() {
        let (t_in, p, s) = (40, 8, 3);
        let series = Array1::from_iter((0..t_in).map(|v| (v as f64).sin()));
        let grid = patchify(series.view(), p, s, &timestamps(t_in)).unwrap();
        let pair = make_shift_targets(&grid).unwrap();
        for j in 0..pair.targets.nrows() {
            for i in 0..p {
                // direct slice oracle
                assert_eq!(pair.targets[[j, i]], series[(j + 1) * s + i]);
            }
            for i in 0..p - s {
                assert_eq!(pair.targets[[j, i]], pair.inputs[[j, i + s]]);
            }
        }
    }

    #[test]
    fn revin_round_trip_random_affines() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = Array2::from_shape_fn((24, 3), |_| rng.random_range(-50.0..50.0f64));
            let gamma = Array1::from_shape_fn(3, |_| {
                let g: f64 = rng.random_range(1e-3..3.0);
                if rng.random_bool(0.5) {
                    -g
                } else {
                    g
                }
            });
            let beta = Array1::from_shape_fn(3, |_| rng.random_range(-2.0..2.0));
            let (xn, stats) = revin_normalize(x.view(), gamma.view(), beta.view()).unwrap();
            let back = revin_denormalize(xn.view(), &stats, gamma.view(), beta.view()).unwrap();
            let err = (&back - &x).iter().fold(0.0f64, |m, d| m.max(d.abs()));
            assert!(err < 1e-5, "round trip error {err}");
        }
    }

    proptest! {
        #[test]
        fn patchify_matches_slice_oracle(t_in in 1usize..=1024, p in 1usize..=64, s in 1usize..=32) {
            prop_assume!(p <= t_in);
            let series = Array1::from_iter((0..t_in).map(|v| v as f64 * 0.5 - 3.0));
            let grid = patchify(series.view(), p, s, &timestamps(t_in)).unwrap();
            let mut naive = Vec::new();
            let mut start = 0;
            while start + p <= t_in {
                let mut row = Vec::with_capacity(p);
                for i in start..start + p {
                    row.push(series[i]);
                }
                naive.push(row);
                start += s;
            }
            prop_assert_eq!(grid.num_patches(), (t_in - p) / s + 1);
            prop_assert_eq!(grid.num_patches(), naive.len());
            for (j, row) in naive.iter().enumerate() {
                prop_assert_eq!(grid.patches.row(j).to_vec(), row.clone());
            }
        }

        #[test]
        fn instance_normalize_moments(values in proptest::collection::vec(-100.0f64..100.0, 8..64)) {
            let n = values.len();
            let spread = values.iter().cloned().fold(f64::MIN, f64::max) - values.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 10.0);
            let x = Array2::from_shape_vec((n, 1), values).unwrap();
            let (z, _) = instance_normalize(x.view()).unwrap();
            let m = z.sum() / n as f64;
            let sd = (z.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            prop_assert!(m.abs() < 1e-6);
            prop_assert!((sd - 1.0).abs() < 1e-4);
        }
    }
}
