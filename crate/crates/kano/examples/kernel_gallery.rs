//! Render a small gallery of anisotropic Gaussian blur kernels as ASCII
//! density plots, sweeping the two axis widths and the rotation angle.

use kano::degrade::gaussian_kernel;
use kano::Result;

fn main() -> Result<()> {
    let shades = [' ', '.', ':', '+', '*', '#', '@'];
    let cases = [
        (1.0, 1.0, 0.0, "isotropic, sigma 1"),
        (3.0, 0.8, 0.0, "anisotropic, axis-aligned"),
        (3.0, 0.8, std::f64::consts::FRAC_PI_4, "anisotropic, rotated 45 deg"),
        (4.5, 1.5, -1.0, "wide, rotated -1 rad"),
    ];
    for (sx, sy, theta, label) in cases {
        let k = gaussian_kernel(15, sx, sy, theta)?;
        let peak = k.values().iter().cloned().fold(0.0f64, f64::max);
        println!("{label} (sigma_x {sx}, sigma_y {sy}, theta {theta}):");
        for row in k.values().rows() {
            let line: String = row
                .iter()
                .map(|v| {
                    let idx = (v / peak * (shades.len() - 1) as f64).round() as usize;
                    shades[idx.min(shades.len() - 1)]
                })
                .collect();
            println!("  {line}");
        }
        println!("  sum = {:.12}\n", k.values().sum());
    }
    Ok(())
}
