//! Compute the full quality report (PSNR, SSIM, SAM, RMSE, ERGAS, CC)
//! between a clean cube and two degraded versions of it, showing how each
//! metric responds to blur versus noise.

use kano::degrade::{degrade, DegradationSpec};
use kano::metrics::full_report;
use kano::train::gen_image;
use kano::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = gen_image(&mut rng, 3, 32, 32);

    let blur_only = DegradationSpec {
        scale: 1,
        kernel_size: 11,
        sigma_x: 2.5,
        sigma_y: 1.0,
        theta: 0.5,
        noise_level: 0.0,
        seed: 1,
    };
    let noise_only = DegradationSpec {
        sigma_x: 0.2,
        sigma_y: 0.2,
        theta: 0.0,
        noise_level: 15.0 / 255.0,
        ..blur_only
    };

    println!("{:12} {}", "variant", kano::metrics::MetricReport::csv_header());
    for (label, spec) in [("blur", blur_only), ("noise", noise_only)] {
        let (y, _) = degrade(&x, &spec)?;
        let rep = full_report(&y, &x, 1.0, 1)?;
        println!("{label:12} {}", rep.csv_row());
    }
    let identity = full_report(&x, &x, 1.0, 1)?;
    println!("{:12} {}", "identity", identity.csv_row());
    Ok(())
}
