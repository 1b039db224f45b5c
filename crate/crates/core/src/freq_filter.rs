//! FFT band masks and band filtering of activation sequences and spatiotemporal
//! feature maps.
//!
//! Bins are classified with a Chebyshev rule: along every filtered axis of
//! length `n` the bin `k` has normalized frequency `min(k, n - k) / floor(n / 2)`
//! (zero for `n == 1`), and a bin is low-band iff the largest of those values is
//! at most `cutoff_rho`. The mask keeps its own band at 1.0 and scales the other
//! band by `attenuation_gamma`. Because `min(k, n - k)` is symmetric under
//! `k -> n - k`, every mask is conjugate symmetric and filtering a real input
//! stays real.
//!
//! Forward transforms are unnormalized; inverse transforms divide by the number
//! of bins.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CUTOFF_RHO: f64 = 0.25;
pub const DEFAULT_ATTENUATION_GAMMA: f64 = 0.2;

/// Largest element count the naive DFT oracle accepts.
pub const ORACLE_MAX_ELEMENTS: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Low,
    High,
}

impl Band {
    pub fn as_str(self) -> &'static str {
        match self {
            Band::Low => "low",
            Band::High => "high",
        }
    }
}

impl std::str::FromStr for Band {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "low" | "lpf" => Ok(Band::Low),
            "high" | "hpf" => Ok(Band::High),
            other => Err(Error::invalid(format!("unknown band '{other}'"))),
        }
    }
}

/// Filter parameters as they appear in the `[filters]` config section.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterParams {
    pub cutoff_rho: f64,
    pub attenuation_gamma: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            cutoff_rho: DEFAULT_CUTOFF_RHO,
            attenuation_gamma: DEFAULT_ATTENUATION_GAMMA,
        }
    }
}

/// Normalized frequency of bin `k` on an axis of length `n`, in `[0, 1]`.
pub fn normalized_frequency(k: usize, n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let folded = k.min(n - k);
    folded as f64 / (n / 2) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyMask {
    band: Band,
    cutoff_rho: f64,
    attenuation_gamma: f64,
    grid_shape: Vec<usize>,
    values: Vec<f64>,
}

impl FrequencyMask {
    pub fn build(
        grid_shape: &[usize],
        band: Band,
        cutoff_rho: f64,
        attenuation_gamma: f64,
    ) -> Result<Self> {
        if grid_shape.is_empty() || grid_shape.len() > 3 {
            return Err(Error::invalid(format!(
                "mask grid must have 1 to 3 axes, got {}",
                grid_shape.len()
            )));
        }
        if grid_shape.contains(&0) {
            return Err(Error::invalid("mask axis lengths must be at least 1"));
        }
        if !(cutoff_rho > 0.0 && cutoff_rho < 1.0) {
            return Err(Error::invalid(format!(
                "cutoff_rho must lie in (0, 1), got {cutoff_rho}"
            )));
        }
        if !(0.0..=1.0).contains(&attenuation_gamma) {
            return Err(Error::invalid(format!(
                "attenuation_gamma must lie in [0, 1], got {attenuation_gamma}"
            )));
        }
        let total: usize = grid_shape.iter().product();
        let mut values = Vec::with_capacity(total);
        let mut index = vec![0usize; grid_shape.len()];
        for _ in 0..total {
            let nu = index
                .iter()
                .zip(grid_shape)
                .map(|(&k, &n)| normalized_frequency(k, n))
                .fold(0.0f64, f64::max);
            let is_low = nu <= cutoff_rho;
            let passed = match band {
                Band::Low => is_low,
                Band::High => !is_low,
            };
            values.push(if passed { 1.0 } else { attenuation_gamma });
            increment(&mut index, grid_shape);
        }
        Ok(Self {
            band,
            cutoff_rho,
            attenuation_gamma,
            grid_shape: grid_shape.to_vec(),
            values,
        })
    }

    pub fn from_params(grid_shape: &[usize], band: Band, params: FilterParams) -> Result<Self> {
        Self::build(grid_shape, band, params.cutoff_rho, params.attenuation_gamma)
    }

    pub fn band(&self) -> Band {
        self.band
    }

    pub fn cutoff_rho(&self) -> f64 {
        self.cutoff_rho
    }

    pub fn attenuation_gamma(&self) -> f64 {
        self.attenuation_gamma
    }

    pub fn grid_shape(&self) -> &[usize] {
        &self.grid_shape
    }

    /// Mask values in row-major order over the grid.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// True when every bin passes unchanged, so filtering is the identity.
    pub fn is_all_pass(&self) -> bool {
        self.values.iter().all(|&v| v == 1.0)
    }

    pub fn value_at(&self, bin: &[usize]) -> f64 {
        let mut flat = 0;
        for (k, n) in bin.iter().zip(&self.grid_shape) {
            flat = flat * n + (k % n);
        }
        self.values[flat]
    }
}

fn increment(index: &mut [usize], shape: &[usize]) {
    for axis in (0..shape.len()).rev() {
        index[axis] += 1;
        if index[axis] < shape[axis] {
            return;
        }
        index[axis] = 0;
    }
}

/// A real feature tensor: a `[T, d]` sequence filtered along `T`, or a
/// `[C, D, H, W]` map filtered along `(D, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    data: ArrayD<f64>,
}

impl FeatureTensor {
    pub fn new(data: ArrayD<f64>) -> Result<Self> {
        match data.ndim() {
            2 | 4 => {}
            r => {
                return Err(Error::invalid(format!(
                    "feature tensors have rank 2 or 4, got rank {r}"
                )))
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature tensor".into()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &ArrayD<f64> {
        &self.data
    }

    pub fn into_data(self) -> ArrayD<f64> {
        self.data
    }

    pub fn fft_axes(&self) -> Vec<usize> {
        if self.data.ndim() == 2 {
            vec![0]
        } else {
            vec![1, 2, 3]
        }
    }

    pub fn grid_shape(&self) -> Vec<usize> {
        self.fft_axes().iter().map(|&a| self.data.shape()[a]).collect()
    }
}

/// FFT-based band filter of a feature tensor.
pub fn apply_filter(x: &FeatureTensor, mask: &FrequencyMask, residual: bool) -> Result<FeatureTensor> {
    let (out, imag) = filter_with_residue(x.data(), &x.fft_axes(), mask, residual)?;
    let scale = x.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if imag > 1e-5 * scale {
        return Err(Error::invalid(format!(
            "imaginary residue {imag:e} after inverse FFT; mask is not conjugate symmetric"
        )));
    }
    Ok(FeatureTensor { data: out })
}

/// Filters `data` along `axes` and also reports the largest imaginary component
/// discarded by the real-part projection.
pub fn filter_with_residue(
    data: &ArrayD<f64>,
    axes: &[usize],
    mask: &FrequencyMask,
    residual: bool,
) -> Result<(ArrayD<f64>, f64)> {
    let grid: Vec<usize> = axes.iter().map(|&a| data.shape().get(a).copied().unwrap_or(0)).collect();
    if grid != mask.grid_shape {
        return Err(Error::ShapeMismatch {
            expected: mask.grid_shape.clone(),
            actual: grid,
        });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("filter input".into()));
    }
    // An all-pass mask is the identity; skip the FFT round trip so the
    // result is exact rather than accurate to round-off.
    if mask.is_all_pass() {
        let out = if residual { data + data } else { data.clone() };
        return Ok((out, 0.0));
    }
    let shape = data.shape().to_vec();
    let standard = data.as_standard_layout();
    let mut buf: Vec<Complex64> = standard.iter().map(|&v| Complex64::new(v, 0.0)).collect();

    let mut planner = FftPlanner::<f64>::new();
    for &axis in axes {
        let fft = planner.plan_fft_forward(shape[axis]);
        transform_axis(&mut buf, &shape, axis, &fft);
    }
    let mask_index = MaskIndexer::new(&shape, axes, &mask.grid_shape);
    for (i, c) in buf.iter_mut().enumerate() {
        *c *= mask.values[mask_index.index(i)];
    }
    for &axis in axes {
        let fft = planner.plan_fft_inverse(shape[axis]);
        transform_axis(&mut buf, &shape, axis, &fft);
    }
    let norm = 1.0 / grid.iter().product::<usize>() as f64;
    let mut imag = 0.0f64;
    let out: Vec<f64> = buf
        .iter()
        .zip(standard.iter())
        .map(|(c, &x)| {
            imag = imag.max((c.im * norm).abs());
            let y = c.re * norm;
            if residual {
                y + x
            } else {
                y
            }
        })
        .collect();
    Ok((ArrayD::from_shape_vec(IxDyn(&shape), out).expect("shape preserved"), imag))
}

/// Filters `data` along `axes`; the mask must already match those axes.
pub fn filter_array(
    data: &ArrayD<f64>,
    axes: &[usize],
    mask: &FrequencyMask,
    residual: bool,
) -> Result<ArrayD<f64>> {
    filter_with_residue(data, axes, mask, residual).map(|(out, _)| out)
}

/// Unnormalized forward spectrum of a feature tensor over its FFT axes.
pub fn spectrum(x: &FeatureTensor) -> ArrayD<Complex64> {
    let shape = x.data.shape().to_vec();
    let mut buf: Vec<Complex64> = x
        .data
        .as_standard_layout()
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    for axis in x.fft_axes() {
        let fft = planner.plan_fft_forward(shape[axis]);
        transform_axis(&mut buf, &shape, axis, &fft);
    }
    ArrayD::from_shape_vec(IxDyn(&shape), buf).expect("shape preserved")
}

fn transform_axis(buf: &mut [Complex64], shape: &[usize], axis: usize, fft: &Arc<dyn Fft<f64>>) {
    let n = shape[axis];
    if n == 1 {
        return;
    }
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut lane = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for (k, slot) in lane.iter_mut().enumerate() {
                *slot = buf[base + k * inner];
            }
            fft.process_with_scratch(&mut lane, &mut scratch);
            for (k, v) in lane.iter().enumerate() {
                buf[base + k * inner] = *v;
            }
        }
    }
}

/// Maps a flat row-major tensor index to the flat index of its mask bin.
struct MaskIndexer {
    strides: Vec<usize>,
    lens: Vec<usize>,
    mask_strides: Vec<usize>,
}

impl MaskIndexer {
    fn new(shape: &[usize], axes: &[usize], grid: &[usize]) -> Self {
        let strides = axes.iter().map(|&a| shape[a + 1..].iter().product()).collect();
        let mask_strides = (0..grid.len()).map(|i| grid[i + 1..].iter().product()).collect();
        Self {
            strides,
            lens: axes.iter().map(|&a| shape[a]).collect(),
            mask_strides,
        }
    }

    fn index(&self, flat: usize) -> usize {
        let mut m = 0;
        for i in 0..self.strides.len() {
            m += ((flat / self.strides[i]) % self.lens[i]) * self.mask_strides[i];
        }
        m
    }
}

/// Reference implementation of [`apply_filter`] by explicit per-axis DFT sums.
/// Used only to check the FFT path; quadratic per axis.
pub fn naive_dft_oracle(
    x: &FeatureTensor,
    mask: &FrequencyMask,
    residual: bool,
) -> Result<FeatureTensor> {
    if x.data.len() > ORACLE_MAX_ELEMENTS {
        return Err(Error::invalid(format!(
            "oracle accepts at most {ORACLE_MAX_ELEMENTS} elements, got {}",
            x.data.len()
        )));
    }
    let axes = x.fft_axes();
    if x.grid_shape() != mask.grid_shape {
        return Err(Error::ShapeMismatch {
            expected: mask.grid_shape.clone(),
            actual: x.grid_shape(),
        });
    }
    let shape = x.data.shape().to_vec();
    let mut buf: Vec<Complex64> = x
        .data
        .as_standard_layout()
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    for &axis in &axes {
        buf = naive_axis(&buf, &shape, axis, false);
    }
    let indexer = MaskIndexer::new(&shape, &axes, &mask.grid_shape);
    for (i, c) in buf.iter_mut().enumerate() {
        *c *= mask.values[indexer.index(i)];
    }
    for &axis in &axes {
        buf = naive_axis(&buf, &shape, axis, true);
    }
    let norm = 1.0 / x.grid_shape().iter().product::<usize>() as f64;
    let out: Vec<f64> = buf
        .iter()
        .zip(x.data.as_standard_layout().iter())
        .map(|(c, &v)| if residual { c.re * norm + v } else { c.re * norm })
        .collect();
    Ok(FeatureTensor {
        data: ArrayD::from_shape_vec(IxDyn(&shape), out).expect("shape preserved"),
    })
}

fn naive_axis(buf: &[Complex64], shape: &[usize], axis: usize, inverse: bool) -> Vec<Complex64> {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let sign = if inverse { 1.0 } else { -1.0 };
    let twiddles: Vec<Complex64> = (0..n).map(|m| exact_twiddle(m, n, sign)).collect();
    let mut out = vec![Complex64::new(0.0, 0.0); buf.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for k in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for j in 0..n {
                    acc += buf[base + j * inner] * twiddles[(j * k) % n];
                }
                out[base + k * inner] = acc;
            }
        }
    }
    out
}

/// `exp(sign * 2πi * m / n)` with exact values on the quarter turns.
fn exact_twiddle(m: usize, n: usize, sign: f64) -> Complex64 {
    if (4 * m) % n == 0 {
        return match (4 * m / n) % 4 {
            0 => Complex64::new(1.0, 0.0),
            1 => Complex64::new(0.0, sign),
            2 => Complex64::new(-1.0, 0.0),
            _ => Complex64::new(0.0, -sign),
        };
    }
    let theta = sign * 2.0 * PI * m as f64 / n as f64;
    Complex64::new(theta.cos(), theta.sin())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array2};

    #[test]
    fn low_mask_on_eight_bins() {
        let m = FrequencyMask::build(&[8], Band::Low, 0.25, 0.2).unwrap();
        let expected = [1.0, 1.0, 0.2, 0.2, 0.2, 0.2, 0.2, 1.0];
        assert_eq!(m.values(), &expected);
    }

    #[test]
    fn unit_gamma_is_all_pass() {
        for band in [Band::Low, Band::High] {
            let m = FrequencyMask::build(&[3, 5, 4], band, 0.4, 1.0).unwrap();
            assert!(m.values().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn dc_is_low() {
        let low = FrequencyMask::build(&[4, 4], Band::Low, 0.01, 0.0).unwrap();
        let high = FrequencyMask::build(&[4, 4], Band::High, 0.01, 0.0).unwrap();
        assert_eq!(low.value_at(&[0, 0]), 1.0);
        assert_eq!(high.value_at(&[0, 0]), 0.0);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(FrequencyMask::build(&[], Band::Low, 0.25, 0.2).is_err());
        assert!(FrequencyMask::build(&[4], Band::Low, 0.0, 0.2).is_err());
        assert!(FrequencyMask::build(&[4], Band::Low, 1.0, 0.2).is_err());
        assert!(FrequencyMask::build(&[4], Band::Low, 0.5, 1.5).is_err());
        assert!(FrequencyMask::build(&[4], Band::Low, 0.5, -0.1).is_err());
        assert!(FrequencyMask::build(&[4, 0], Band::Low, 0.5, 0.2).is_err());
    }

    #[test]
    fn impulse_matches_oracle() {
        let x = FeatureTensor::new(arr1(&[1.0, 0.0, 0.0, 0.0]).into_dyn().insert_axis(ndarray::Axis(1))).unwrap();
        let m = FrequencyMask::build(&[4], Band::Low, 0.25, 0.2).unwrap();
        let fast = apply_filter(&x, &m, false).unwrap();
        let slow = naive_dft_oracle(&x, &m, false).unwrap();
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        // only DC passes: x = (1 + 0.2 * (sum of the other three bins)) / 4
        assert!((fast.data()[[0, 0]] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn oracle_rejects_large_inputs() {
        let x = FeatureTensor::new(Array2::<f64>::zeros((4097, 1)).into_dyn()).unwrap();
        let m = FrequencyMask::build(&[4097], Band::Low, 0.25, 0.2).unwrap();
        assert!(naive_dft_oracle(&x, &m, false).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let x = FeatureTensor::new(Array2::<f64>::zeros((8, 3)).into_dyn()).unwrap();
        let m = FrequencyMask::build(&[4], Band::Low, 0.25, 0.2).unwrap();
        assert!(matches!(apply_filter(&x, &m, false), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut a = Array2::<f64>::zeros((4, 1));
        a[[1, 0]] = f64::NAN;
        assert!(FeatureTensor::new(a.into_dyn()).is_err());
    }

    #[test]
    fn band_parse() {
        assert_eq!("HIGH".parse::<Band>().unwrap(), Band::High);
        assert_eq!("lpf".parse::<Band>().unwrap(), Band::Low);
        assert!("mid".parse::<Band>().is_err());
    }
}
