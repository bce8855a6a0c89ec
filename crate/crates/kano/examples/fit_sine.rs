//! Fit a single KAN layer (one learnable spline edge) to sin(pi x) with
//! Adam, reporting the RMSE every 50 steps. Demonstrates how far a single
//! B-spline edge function gets on a smooth 1-d target.

use kano::kan::{kan_layer_graph, KanLayerVars};
use kano::spline::GridSpec;
use kano::tape::{Tape, Var};
use kano::train::{adam_step, AdamState};
use kano::Result;
use ndarray::{Array2, ArrayD};

fn main() -> Result<()> {
    let grid = GridSpec::uniform(-1.0, 1.0, 8, 3)?;
    let n = 256;
    let xs = Array2::from_shape_fn((n, 1), |(i, _)| -1.0 + 2.0 * i as f64 / (n - 1) as f64);
    let ts = xs.mapv(|x| (std::f64::consts::PI * x).sin());

    let mut params: Vec<ArrayD<f64>> = vec![
        Array2::from_elem((1, 1), 1.0).into_dyn(), // SiLU mixing weight
        Array2::from_elem((1, 1), 1.0).into_dyn(), // spline mixing weight
        Array2::zeros((grid.n_basis(), 1)).into_dyn(), // spline coefficients
    ];
    let mut adam = AdamState::new(&params);

    for step in 1..=500 {
        let tape = Tape::new(0);
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let layer = KanLayerVars {
            grid,
            wb: vars[0].clone(),
            ws: vars[1].clone(),
            coef: vars[2].clone(),
        };
        let x = tape.leaf(xs.clone().into_dyn());
        let t = tape.leaf(ts.clone().into_dyn());
        let err = kan_layer_graph(&x, &layer).sub(&t);
        let loss = err.mul(&err).mean();
        let mse = tape.forward(&loss)?;
        tape.backward(&loss)?;
        let grads: Vec<ArrayD<f64>> = vars.iter().map(Var::grad).collect();
        adam_step(&mut params, &grads, &mut adam, 0.1, 0.9, 0.999, 1e-8)?;
        if step % 50 == 0 {
            println!("step {step:4}  RMSE {:.5}", mse.sqrt());
        }
    }
    Ok(())
}
