//! Persistence: the KANC cube container, 8-bit PNG ingestion, JSON model
//! checkpoints, and kernel CSVs. Every write lands in a temp file first
//! and is renamed into place, so readers never observe partial output.
//!
//! KANC layout: magic `KANC`, version u8 = 1, dtype u8 = 0 (float32
//! little-endian), reserved u16 = 0, then C, H, W as u32 little-endian and
//! the payload with index `(c*H + h)*W + w`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::cube::{Cube, Kernel};
use crate::error::{KanoError, Result};
use crate::unfold::KanoModel;

const MAGIC: &[u8; 4] = b"KANC";
const VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Write bytes atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_cube(path: &Path, cube: &Cube) -> Result<()> {
    let (c, h, w) = cube.dim();
    let mut buf = Vec::with_capacity(16 + 4 * c * h * w);
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(DTYPE_F32);
    buf.extend_from_slice(&0u16.to_le_bytes());
    for d in [c, h, w] {
        let v = u32::try_from(d)
            .map_err(|_| KanoError::Format(format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in cube.data.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    write_atomic(path, &buf)
}

pub fn read_cube(path: &Path) -> Result<Cube> {
    let bytes = fs::read(path)?;
    if bytes.len() < 20 {
        return Err(KanoError::Format("truncated KANC header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(KanoError::Format("bad magic (expected KANC)".into()));
    }
    if bytes[4] != VERSION {
        return Err(KanoError::Format(format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(KanoError::Format(format!("unsupported dtype {}", bytes[5])));
    }
    let dim = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(8), dim(12), dim(16));
    let n = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| KanoError::Format("dimension overflow".into()))?;
    if bytes.len() != 20 + 4 * n {
        return Err(KanoError::Format(format!(
            "truncated payload: header says {} values, file holds {} bytes",
            n,
            bytes.len() - 20
        )));
    }
    let mut data = Array3::zeros((c, h, w));
    for (i, v) in data.iter_mut().enumerate() {
        let o = 20 + 4 * i;
        let x = f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
        if !x.is_finite() {
            return Err(KanoError::Format("non-finite value in payload".into()));
        }
        *v = x;
    }
    Cube::new(data)
}

/// 8-bit grayscale or RGB PNG to a cube in `[0,1]`.
pub fn read_png(path: &Path) -> Result<Cube> {
    let img = image::open(path).map_err(|e| KanoError::Format(format!("png read: {e}")))?;
    let cube = match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            let mut data = Array3::zeros((1, h as usize, w as usize));
            for (x, y, p) in g.enumerate_pixels() {
                data[[0, y as usize, x as usize]] = p.0[0] as f64 / 255.0;
            }
            Cube { data }
        }
        image::DynamicImage::ImageRgb8(rgb) => {
            let (w, h) = rgb.dimensions();
            let mut data = Array3::zeros((3, h as usize, w as usize));
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    data[[c, y as usize, x as usize]] = p.0[c] as f64 / 255.0;
                }
            }
            Cube { data }
        }
        other => {
            return Err(KanoError::Format(format!(
                "unsupported PNG layout {:?}: only 8-bit gray and RGB",
                other.color()
            )))
        }
    };
    Ok(cube)
}

/// Clamp to `[0,1]`, round half-up to 8 bits, write gray or RGB PNG.
pub fn write_png(path: &Path, cube: &Cube) -> Result<()> {
    let (c, h, w) = cube.dim();
    let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8;
    let tmp = tmp_path(path);
    match c {
        1 => {
            let mut img = image::GrayImage::new(w as u32, h as u32);
            for (x, y, p) in img.enumerate_pixels_mut() {
                p.0[0] = quant(cube.data[[0, y as usize, x as usize]]);
            }
            img.save_with_format(&tmp, image::ImageFormat::Png)
                .map_err(|e| KanoError::Format(format!("png write: {e}")))?;
        }
        3 => {
            let mut img = image::RgbImage::new(w as u32, h as u32);
            for (x, y, p) in img.enumerate_pixels_mut() {
                for ch in 0..3 {
                    p.0[ch] = quant(cube.data[[ch, y as usize, x as usize]]);
                }
            }
            img.save_with_format(&tmp, image::ImageFormat::Png)
                .map_err(|e| KanoError::Format(format!("png write: {e}")))?;
        }
        _ => {
            return Err(KanoError::Format(format!(
                "png export needs 1 or 3 channels, cube has {c}"
            )))
        }
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Versioned checkpoint wrapper; JSON keeps every f64 bit-exact via the
/// shortest-round-trip float formatting of serde_json.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: KanoModel,
}

pub fn save_checkpoint(path: &Path, model: &KanoModel) -> Result<()> {
    let ck = Checkpoint {
        format_version: 1,
        model: model.clone(),
    };
    let json = serde_json::to_vec_pretty(&ck)
        .map_err(|e| KanoError::Format(format!("checkpoint encode: {e}")))?;
    write_atomic(path, &json)
}

pub fn load_checkpoint(path: &Path) -> Result<KanoModel> {
    let bytes = fs::read(path)?;
    let ck: Checkpoint = serde_json::from_slice(&bytes)
        .map_err(|e| KanoError::Format(format!("checkpoint decode: {e}")))?;
    if ck.format_version != 1 {
        return Err(KanoError::Format(format!(
            "unsupported checkpoint version {}",
            ck.format_version
        )));
    }
    ck.model.config.validate()?;
    Ok(ck.model)
}

/// k rows of k comma-separated decimals, row-major.
pub fn write_kernel_csv(path: &Path, kernel: &Kernel) -> Result<()> {
    let mut out = String::new();
    for row in kernel.values().rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_kernel_csv(path: &Path) -> Result<Kernel> {
    let text = fs::read_to_string(path)?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|c| {
                    c.trim()
                        .parse::<f64>()
                        .map_err(|e| KanoError::Format(format!("kernel csv: {e}")))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let k = rows.len();
    if k == 0 || rows.iter().any(|r| r.len() != k) {
        return Err(KanoError::Format("kernel csv must be square".into()));
    }
    let mut values = Array2::zeros((k, k));
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            values[[i, j]] = *v;
        }
    }
    Kernel::new(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unfold::ModelConfig;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cube_round_trip_is_bit_identical_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.kanc");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // store f32-representable values so the round trip is exact
        let cube = Cube {
            data: Array3::from_shape_fn((3, 5, 7), |_| rng.gen_range(0.0f32..1.0) as f64),
        };
        write_cube(&p, &cube).unwrap();
        let back = read_cube(&p).unwrap();
        assert_eq!(back.dim(), (3, 5, 7));
        for (a, b) in cube.data.iter().zip(back.data.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn corrupted_magic_and_truncation_are_typed_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.kanc");
        let cube = Cube::zeros(1, 2, 2);
        write_cube(&p, &cube).unwrap();

        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        let err = read_cube(&p).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");

        write_cube(&p, &cube).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, &bytes).unwrap();
        let err = read_cube(&p).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn non_finite_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nan.kanc");
        write_cube(&p, &Cube::zeros(1, 1, 1)).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        assert!(read_cube(&p).is_err());
    }

    #[test]
    fn png_gray_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let cube = Cube {
            data: Array3::from_elem((1, 4, 4), 128.0 / 255.0),
        };
        write_png(&p, &cube).unwrap();
        let back = read_png(&p).unwrap();
        assert_eq!(back.dim(), (1, 4, 4));
        for v in back.data.iter() {
            assert_eq!(*v, 128.0 / 255.0);
        }
    }

    #[test]
    fn png_rgb_write_read_pixel_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cube = Cube {
            data: Array3::from_shape_fn((3, 6, 5), |_| {
                rng.gen_range(0u8..=255) as f64 / 255.0
            }),
        };
        write_png(&p, &cube).unwrap();
        let back = read_png(&p).unwrap();
        for (a, b) in cube.data.iter().zip(back.data.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn sixteen_bit_png_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deep.png");
        let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(4, 4);
        img.save_with_format(&p, image::ImageFormat::Png).unwrap();
        assert!(read_png(&p).is_err());
    }

    #[test]
    fn checkpoint_round_trip_reproduces_inference_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let model = KanoModel::init(ModelConfig::new(2, 2, 3, 2), 3).unwrap();
        save_checkpoint(&p, &model).unwrap();
        let loaded = load_checkpoint(&p).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = Cube {
            data: Array3::from_shape_fn((2, 6, 6), |_| rng.gen_range(0.0..1.0)),
        };
        let a = crate::unfold::run_unfolding(&y, &model).unwrap();
        let b = crate::unfold::run_unfolding(&y, &loaded).unwrap();
        for (s1, s2) in a.iter().zip(b.iter()) {
            assert_eq!(s1.x.max_abs_diff(&s2.x), 0.0);
            assert_eq!(s1.k.l1_distance(&s2.k), 0.0);
        }
    }

    #[test]
    fn kernel_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.csv");
        let k = crate::degrade::gaussian_kernel(5, 1.5, 0.8, 0.3).unwrap();
        write_kernel_csv(&p, &k).unwrap();
        let back = read_kernel_csv(&p).unwrap();
        assert_eq!(k.l1_distance(&back), 0.0);
    }

    #[test]
    fn atomic_write_leaves_no_tmp_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_atomic(&p, b"hello").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"hello");
        assert!(!tmp_path(&p).exists());
    }
}
