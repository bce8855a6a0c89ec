//! Round trip through the whole pipeline: synthesize a clean image, degrade
//! it with a random anisotropic blur plus noise, train a small model for a
//! few hundred steps, and compare the restoration against the bicubic
//! baseline on PSNR/SSIM and kernel error.

use kano::degrade::bicubic_upsample;
use kano::metrics::{psnr, ssim};
use kano::train::{synth_dataset, train_on, TrainConfig};
use kano::unfold::run_unfolding;
use kano::Result;

fn main() -> Result<()> {
    let config = TrainConfig {
        patch: 16,
        batch: 2,
        steps: 300,
        n_images: 16,
        image_size: 48,
        stages: 3,
        kernel_size: 11,
        ..TrainConfig::default()
    };
    println!(
        "training: {} steps, batch {}, {} stages, x{} upscaling",
        config.steps, config.batch, config.stages, config.scale
    );
    let (model, log) = train_on(&config, None)?;
    let first = &log.rows[0];
    let last = log.rows.last().unwrap();
    println!(
        "loss {:.3} -> {:.3} in {:.0}s",
        first.loss, last.loss, last.seconds
    );

    // held-out pair the training corpus never saw
    let held = synth_dataset(1, &config, 424_242)?;
    let pair = &held[0];
    let stages = run_unfolding(&pair.y, &model)?;
    let restored = stages.last().unwrap().x.clamped_to_unit();
    let baseline = bicubic_upsample(&pair.y, config.scale)?.clamped_to_unit();

    println!("\nheld-out image ({}x{} observed):", pair.y.height(), pair.y.width());
    println!(
        "  bicubic : PSNR {:.2} dB, SSIM {:.4}",
        psnr(&baseline, &pair.x_gt, 1.0)?,
        ssim(&baseline, &pair.x_gt, 1.0)?
    );
    println!(
        "  restored: PSNR {:.2} dB, SSIM {:.4}",
        psnr(&restored, &pair.x_gt, 1.0)?,
        ssim(&restored, &pair.x_gt, 1.0)?
    );
    for (t, s) in stages.iter().enumerate() {
        println!("  stage {}: kernel MSE {:.3e}", t + 1, s.k.mse(&pair.k_gt));
    }
    Ok(())
}
