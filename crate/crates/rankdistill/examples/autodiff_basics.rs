//! Record a small computation on the tape, pull gradients back through it,
//! and cross-check them against central finite differences.

use rankdistill::tensor::gradcheck::check_gradients;
use rankdistill::{Result, Tape, Tensor};

fn main() -> Result<()> {
    let tape = Tape::new();
    let x = tape.watch(&Tensor::from_vec(vec![1, 3], vec![0.5, -1.0, 2.0])?);
    let w = tape.watch(&Tensor::from_vec(
        vec![3, 2],
        vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6],
    )?);
    let target = Tensor::from_vec(vec![1, 2], vec![0.25, -0.75])?;

    // loss = MSE(tanh(x W), target), a scalar.
    let loss = x.matmul(&w)?.tanh().mse(&target)?;
    println!("loss = {:.6}", loss.item()?);

    loss.backward()?;
    println!("dloss/dx = {:?}", x.grad().unwrap().data());
    println!("dloss/dw = {:?}", w.grad().unwrap().data());

    // The same function handed to the finite-difference checker, which
    // watches the inputs itself and probes at h = 1e-5.
    let f = |inputs: &[Tensor]| inputs[0].matmul(&inputs[1])?.tanh().mse(&target);
    let report = check_gradients(&f, &[x.detach(), w.detach()], 1e-5)?;
    println!(
        "finite-difference check: {} probes, max relative error {:.2e}",
        report.probes, report.max_rel_err
    );
    Ok(())
}
