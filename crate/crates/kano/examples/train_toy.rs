//! Short end-to-end training run on the procedural corpus, printing the
//! loss trajectory and writing the trained model to a JSON checkpoint.

use kano::io::save_checkpoint;
use kano::train::{train, TrainConfig};
use kano::Result;

fn main() -> Result<()> {
    let config = TrainConfig {
        steps: 120,
        n_images: 16,
        patch: 16,
        batch: 2,
        ..TrainConfig::default()
    };
    let (model, log) = train(&config)?;
    for row in log.rows.iter().step_by(20) {
        println!(
            "step {:4}  loss {:8.3}  (K {:7.4}, X {:7.3})  lr {}",
            row.step, row.loss, row.loss_k, row.loss_x, row.lr
        );
    }
    let last = log.rows.last().unwrap();
    println!(
        "finished {} steps in {:.1}s ({:.0} ms/step), {} parameters",
        last.step,
        last.seconds,
        1000.0 * last.seconds / last.step as f64,
        model.param_count()
    );

    let path = std::env::temp_dir().join("kano_toy_model.json");
    save_checkpoint(&path, &model)?;
    println!("checkpoint written to {}", path.display());
    Ok(())
}
