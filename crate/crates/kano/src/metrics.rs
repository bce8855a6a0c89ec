//! Reconstruction quality metrics: PSNR, SSIM, and the spectral family
//! (SAM, RMSE, ERGAS, cross-correlation), plus MSE maps for diagnostics.
//!
//! Conventions: PSNR peak defaults to 1.0 for float imagery (255 available
//! for 8-bit workflows); SSIM uses an 11x11 Gaussian window with sigma 1.5,
//! C1 = (0.01 peak)^2, C2 = (0.03 peak)^2, computed per channel over valid
//! windows and averaged. Identical inputs give the infinity PSNR sentinel,
//! serialized as "inf" in CSV output.

use ndarray::{Array1, Array2, Array3};
use serde::Serialize;

use crate::cube::Cube;
use crate::error::{KanoError, Result};

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub sam: f64,
    pub rmse: f64,
    pub ergas: f64,
    pub cc: f64,
}

impl MetricReport {
    pub fn csv_header() -> &'static str {
        "psnr,ssim,sam,rmse,ergas,cc"
    }

    pub fn csv_row(&self) -> String {
        let p = if self.psnr.is_infinite() {
            "inf".to_string()
        } else {
            format!("{}", self.psnr)
        };
        format!(
            "{p},{},{},{},{},{}",
            self.ssim, self.sam, self.rmse, self.ergas, self.cc
        )
    }
}

fn check_shapes(ctx: &'static str, a: &Cube, b: &Cube) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(KanoError::shape(
            ctx,
            format!("{:?} vs {:?}", a.dim(), b.dim()),
        ));
    }
    Ok(())
}

/// `10 log10(peak^2 / MSE)`; infinity when the cubes are identical.
pub fn psnr(a: &Cube, b: &Cube, peak: f64) -> Result<f64> {
    check_shapes("psnr", a, b)?;
    if peak <= 0.0 {
        return Err(KanoError::Invalid("psnr peak must be > 0".into()));
    }
    let n = a.data.len() as f64;
    let mse = (&a.data - &b.data).mapv(|v| v * v).sum() / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_window() -> Array2<f64> {
    let sigma = 1.5;
    let mut w = Array2::zeros((11, 11));
    for i in 0..11 {
        for j in 0..11 {
            let di = i as f64 - 5.0;
            let dj = j as f64 - 5.0;
            w[[i, j]] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let s = w.sum();
    w / s
}

/// Mean SSIM over all valid 11x11 windows of every channel.
pub fn ssim(a: &Cube, b: &Cube, peak: f64) -> Result<f64> {
    check_shapes("ssim", a, b)?;
    let (c, h, w) = a.dim();
    if h < 11 || w < 11 {
        return Err(KanoError::Invalid(format!(
            "ssim needs dims >= 11, got {h}x{w}"
        )));
    }
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let win = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa = a.data.index_axis(ndarray::Axis(0), ch);
        let pb = b.data.index_axis(ndarray::Axis(0), ch);
        for i in 0..=h - 11 {
            for j in 0..=w - 11 {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                for p in 0..11 {
                    for q in 0..11 {
                        mu_a += win[[p, q]] * pa[[i + p, j + q]];
                        mu_b += win[[p, q]] * pb[[i + p, j + q]];
                    }
                }
                let mut va = 0.0;
                let mut vb = 0.0;
                let mut cov = 0.0;
                for p in 0..11 {
                    for q in 0..11 {
                        let da = pa[[i + p, j + q]] - mu_a;
                        let db = pb[[i + p, j + q]] - mu_b;
                        va += win[[p, q]] * da * da;
                        vb += win[[p, q]] * db * db;
                        cov += win[[p, q]] * da * db;
                    }
                }
                let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// SAM (radians), global RMSE, ERGAS at scale `s`, and mean per-band
/// Pearson correlation. All-zero spectra are skipped for SAM; the skip
/// count comes back alongside the values.
pub struct SpectralMetrics {
    pub sam: f64,
    pub rmse: f64,
    pub ergas: f64,
    pub cc: f64,
    pub sam_skipped: usize,
    /// zero-mean reference bands excluded from the ERGAS average
    pub ergas_skipped: usize,
}

pub fn spectral_metrics(a: &Cube, b: &Cube, scale: usize) -> Result<SpectralMetrics> {
    check_shapes("spectral_metrics", a, b)?;
    if scale == 0 {
        return Err(KanoError::Invalid("scale must be >= 1".into()));
    }
    let (c, h, w) = a.dim();
    let n = (h * w) as f64;

    // SAM: mean arccos of the per-pixel spectral angle
    let mut sam_sum = 0.0;
    let mut sam_n = 0usize;
    let mut skipped = 0usize;
    for i in 0..h {
        for j in 0..w {
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for ch in 0..c {
                let x = a.data[[ch, i, j]];
                let y = b.data[[ch, i, j]];
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na == 0.0 || nb == 0.0 {
                skipped += 1;
                continue;
            }
            // exact-zero angle when the spectra are parallel, so identical
            // inputs report sam = 0 without rounding residue
            if dot >= 0.0 && dot * dot >= na * nb {
                sam_n += 1;
                continue;
            }
            let cos = (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
            sam_sum += cos.acos();
            sam_n += 1;
        }
    }
    let sam = if sam_n > 0 { sam_sum / sam_n as f64 } else { 0.0 };

    // global RMSE and per-band quantities
    let mut sq_total = 0.0;
    let mut ergas_acc = 0.0;
    let mut ergas_bands = 0usize;
    let mut ergas_skipped = 0usize;
    let mut cc_acc = 0.0;
    for ch in 0..c {
        let pa = a.data.index_axis(ndarray::Axis(0), ch);
        let pb = b.data.index_axis(ndarray::Axis(0), ch);
        let sq_band: f64 = pa
            .iter()
            .zip(pb.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        sq_total += sq_band;
        let rmse_band = (sq_band / n).sqrt();
        let mu_a: f64 = pa.sum() / n;
        if mu_a == 0.0 {
            ergas_skipped += 1;
        } else {
            ergas_acc += (rmse_band / mu_a) * (rmse_band / mu_a);
            ergas_bands += 1;
        }

        let mu_b: f64 = pb.sum() / n;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (x, y) in pa.iter().zip(pb.iter()) {
            cov += (x - mu_a) * (y - mu_b);
            va += (x - mu_a) * (x - mu_a);
            vb += (y - mu_b) * (y - mu_b);
        }
        let denom = (va * vb).sqrt();
        cc_acc += if denom == 0.0 {
            if va == 0.0 && vb == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            cov / denom
        };
    }
    let rmse = (sq_total / (c as f64 * n)).sqrt();
    let ergas = if ergas_bands == 0 {
        0.0
    } else {
        100.0 / scale as f64 * (ergas_acc / ergas_bands as f64).sqrt()
    };
    let cc = cc_acc / c as f64;
    Ok(SpectralMetrics {
        sam,
        rmse,
        ergas,
        cc,
        sam_skipped: skipped,
        ergas_skipped,
    })
}

/// Per-band RMSE vector, for spectral-error plots.
pub fn per_band_rmse(a: &Cube, b: &Cube) -> Result<Array1<f64>> {
    check_shapes("per_band_rmse", a, b)?;
    let (c, h, w) = a.dim();
    let n = (h * w) as f64;
    Ok(Array1::from_iter((0..c).map(|ch| {
        let pa = a.data.index_axis(ndarray::Axis(0), ch);
        let pb = b.data.index_axis(ndarray::Axis(0), ch);
        (pa.iter()
            .zip(pb.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n)
            .sqrt()
    })))
}

/// Reduction axis for [`mse_map`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapAxis {
    /// one MSE value per band (reduce over space)
    PerBand,
    /// one MSE value per pixel (reduce over bands)
    PerPixel,
}

pub enum MseMap {
    PerBand(Array1<f64>),
    PerPixel(Array2<f64>),
}

pub fn mse_map(a: &Cube, b: &Cube, axis: MapAxis) -> Result<MseMap> {
    check_shapes("mse_map", a, b)?;
    let (c, h, w) = a.dim();
    let sq: Array3<f64> = (&a.data - &b.data).mapv(|v| v * v);
    match axis {
        MapAxis::PerBand => {
            let n = (h * w) as f64;
            Ok(MseMap::PerBand(Array1::from_iter((0..c).map(|ch| {
                sq.index_axis(ndarray::Axis(0), ch).sum() / n
            }))))
        }
        MapAxis::PerPixel => {
            let mut out = Array2::zeros((h, w));
            for ch in 0..c {
                out += &sq.index_axis(ndarray::Axis(0), ch);
            }
            Ok(MseMap::PerPixel(out / c as f64))
        }
    }
}

/// All six metrics in one report.
pub fn full_report(a: &Cube, b: &Cube, peak: f64, scale: usize) -> Result<MetricReport> {
    let sp = spectral_metrics(a, b, scale)?;
    Ok(MetricReport {
        psnr: psnr(a, b, peak)?,
        ssim: ssim(a, b, peak)?,
        sam: sp.sam,
        rmse: sp.rmse,
        ergas: sp.ergas,
        cc: sp.cc,
    })
}
