//! Physical forward model: anisotropic Gaussian kernels, blur plus strided
//! downsampling with its exact adjoint, additive white Gaussian noise, and
//! bicubic upsampling used for initialization.

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cube::{Cube, Kernel};
use crate::error::{KanoError, Result};
use crate::linops;

/// Default kernel size for a downsampling scale.
pub fn default_kernel_size(scale: usize) -> usize {
    match scale {
        2 => 11,
        3 => 15,
        _ => 21, // x4 and x8 share the largest size
    }
}

/// One sampled degradation: scale, kernel geometry, noise level, seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub scale: usize,
    pub kernel_size: usize,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub theta: f64,
    pub noise_level: f64,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale, 1 | 2 | 3 | 4 | 8) {
            return Err(KanoError::Invalid(format!("unsupported scale {}", self.scale)));
        }
        if self.kernel_size % 2 == 0 {
            return Err(KanoError::Invalid("kernel size must be odd".into()));
        }
        if self.sigma_x <= 0.0 || self.sigma_y <= 0.0 {
            return Err(KanoError::Invalid("sigma must be positive".into()));
        }
        if self.noise_level < 0.0 {
            return Err(KanoError::Invalid("noise level must be >= 0".into()));
        }
        Ok(())
    }
}

/// Anisotropic Gaussian kernel: density of `N(0, R(theta) diag(sx^2, sy^2) R^T)`
/// sampled on the integer offset grid and normalized to sum 1.
pub fn gaussian_kernel(size: usize, sigma_x: f64, sigma_y: f64, theta: f64) -> Result<Kernel> {
    if size % 2 == 0 || size == 0 {
        return Err(KanoError::Invalid(format!("kernel size must be odd, got {size}")));
    }
    if sigma_x <= 0.0 || sigma_y <= 0.0 {
        return Err(KanoError::Invalid("sigma must be positive".into()));
    }
    let c = (size / 2) as f64;
    let (sin, cos) = theta.sin_cos();
    // inverse covariance: R diag(1/sx^2, 1/sy^2) R^T
    let (ix, iy) = (1.0 / (sigma_x * sigma_x), 1.0 / (sigma_y * sigma_y));
    let a = cos * cos * ix + sin * sin * iy;
    let b = sin * cos * (ix - iy);
    let d = sin * sin * ix + cos * cos * iy;
    let mut values = Array2::zeros((size, size));
    for i in 0..size {
        for j in 0..size {
            let dy = i as f64 - c;
            let dx = j as f64 - c;
            let q = a * dx * dx + 2.0 * b * dx * dy + d * dy * dy;
            values[[i, j]] = (-0.5 * q).exp();
        }
    }
    let sum: f64 = values.iter().sum();
    values /= sum;
    Kernel::new(values)
}

/// Rank-1 initialization kernel: outer product of two unit-variance 1D
/// Gaussians of length `k`, normalized to sum 1.
pub fn gaussian_sep_init(k: usize) -> Result<Kernel> {
    if k % 2 == 0 || k == 0 {
        return Err(KanoError::Invalid(format!("kernel size must be odd, got {k}")));
    }
    let c = (k / 2) as f64;
    let g: Array1<f64> = Array1::from_iter((0..k).map(|i| {
        let d = i as f64 - c;
        (-0.5 * d * d).exp()
    }));
    let mut values = Array2::zeros((k, k));
    for i in 0..k {
        for j in 0..k {
            values[[i, j]] = g[i] * g[j];
        }
    }
    let sum: f64 = values.iter().sum();
    values /= sum;
    Kernel::new(values)
}

/// Blur with `kernel` (correlation, replicate padding) and subsample at
/// stride `scale` with offset 0.
pub fn conv_down(x: &Cube, kernel: &Kernel, scale: usize) -> Result<Cube> {
    let (_, h, w) = x.dim();
    if h % scale != 0 || w % scale != 0 {
        return Err(KanoError::shape(
            "conv_down",
            format!("dims {h}x{w} not divisible by scale {scale}"),
        ));
    }
    Ok(Cube {
        data: linops::blur_down_core(&x.data, kernel.values(), scale),
    })
}

/// Exact linear adjoint of `conv_down`.
pub fn conv_up_transpose(r: &Cube, kernel: &Kernel, scale: usize) -> Result<Cube> {
    let (_, ho, wo) = r.dim();
    Ok(Cube {
        data: linops::blur_down_adjoint_core(
            &r.data,
            kernel.values(),
            scale,
            ho * scale,
            wo * scale,
        ),
    })
}

/// Additive white Gaussian noise, i.i.d. `N(0, level^2)` per element,
/// deterministic for a given seed. No clipping.
pub fn awgn(x: &Cube, level: f64, seed: u64) -> Result<Cube> {
    if level < 0.0 {
        return Err(KanoError::Invalid("noise level must be >= 0".into()));
    }
    if level == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, level).expect("valid normal");
    let data = x.data.mapv(|v| v + dist.sample(&mut rng));
    Ok(Cube { data })
}

/// Full degradation `Y = awgn(conv_down(X, K, s))`; returns the ground-truth
/// kernel alongside the observation.
pub fn degrade(x: &Cube, spec: &DegradationSpec) -> Result<(Cube, Kernel)> {
    spec.validate()?;
    let kernel = gaussian_kernel(spec.kernel_size, spec.sigma_x, spec.sigma_y, spec.theta)?;
    let down = conv_down(x, &kernel, spec.scale)?;
    let y = awgn(&down, spec.noise_level, spec.seed)?;
    Ok((y, kernel))
}

/// Keys cubic-convolution weight with a = -0.5.
fn cubic_weight(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

fn resample_axis_weights(n_in: usize, scale: usize) -> Vec<(isize, [f64; 4])> {
    let _ = n_in;
    (0..scale)
        .map(|r| {
            // output pixel i_out = i_in * scale + r maps to source coordinate
            // (i_out + 0.5)/scale - 0.5 (center alignment)
            let src = (r as f64 + 0.5) / scale as f64 - 0.5;
            let base = src.floor() as isize;
            let frac = src - base as f64;
            let mut w = [0.0; 4];
            for (k, wk) in w.iter_mut().enumerate() {
                *wk = cubic_weight(frac - (k as f64 - 1.0));
            }
            (base, w)
        })
        .collect()
}

/// Separable cubic-convolution upsampling by an integer factor with
/// replicate boundary handling; exact on constants, identity for `scale = 1`.
pub fn bicubic_upsample(y: &Cube, scale: usize) -> Result<Cube> {
    if scale == 0 {
        return Err(KanoError::Invalid("scale must be >= 1".into()));
    }
    if scale == 1 {
        return Ok(y.clone());
    }
    let (c, h, w) = y.dim();
    let phases_h = resample_axis_weights(h, scale);
    let phases_w = resample_axis_weights(w, scale);
    // rows first
    let mut tmp = Array3::zeros((c, h * scale, w));
    for ci in 0..c {
        for io in 0..h * scale {
            let (base, wts) = phases_h[io % scale];
            let ib = (io / scale) as isize + base;
            for j in 0..w {
                let mut acc = 0.0;
                for (k, wk) in wts.iter().enumerate() {
                    let ii = (ib + k as isize - 1).clamp(0, h as isize - 1) as usize;
                    acc += wk * y.data[[ci, ii, j]];
                }
                tmp[[ci, io, j]] = acc;
            }
        }
    }
    let mut out = Array3::zeros((c, h * scale, w * scale));
    for ci in 0..c {
        for i in 0..h * scale {
            for jo in 0..w * scale {
                let (base, wts) = phases_w[jo % scale];
                let jb = (jo / scale) as isize + base;
                let mut acc = 0.0;
                for (k, wk) in wts.iter().enumerate() {
                    let jj = (jb + k as isize - 1).clamp(0, w as isize - 1) as usize;
                    acc += wk * tmp[[ci, i, jj]];
                }
                out[[ci, i, jo]] = acc;
            }
        }
    }
    Ok(Cube { data: out })
}
