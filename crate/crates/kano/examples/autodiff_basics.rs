//! Minimal tour of the reverse-mode tape: build a small scalar graph,
//! differentiate it, and confirm the analytic gradient against central
//! differences.

use kano::tape::{finite_diff_check, Tape, Var};
use kano::Result;
use ndarray::arr2;

fn main() -> Result<()> {
    // f(a, b) = sum(silu(a matmul b)^2)
    let tape = Tape::new(0);
    let a = tape.leaf(arr2(&[[0.5, -1.2], [2.0, 0.3]]).into_dyn());
    let b = tape.leaf(arr2(&[[1.0, 0.4], [-0.7, 0.9]]).into_dyn());
    let h = a.matmul(&b).silu();
    let loss = h.mul(&h).sum();

    let value = tape.forward(&loss)?;
    tape.backward(&loss)?;
    println!("loss = {value:.6}");
    println!("d loss / d a =\n{:6.3}", a.grad());
    println!("d loss / d b =\n{:6.3}", b.grad());

    // the same graph as a closure, checked coordinate by coordinate
    let build = |_t: &Tape, vars: &[Var]| -> Result<Var> {
        let h = vars[0].matmul(&vars[1]).silu();
        Ok(h.mul(&h).sum())
    };
    let leaves = vec![a.value(), b.value()];
    let err = finite_diff_check(build, &leaves, 1e-6)?;
    println!("max relative error vs central differences: {err:.2e}");
    Ok(())
}
