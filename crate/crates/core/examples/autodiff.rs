//! The gradient tape on its own: a small convolution + batch-norm graph,
//! its gradients, and a finite-difference spot check.

use metaperturb::tensor::{BatchNormStats, Mode, Tape, Tensor};
use metaperturb::Result;

fn loss_of(x: &Tensor<f64>, w: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let (x, w) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv2d(x, w, 1, 1)?;
    let y = tape.relu(y)?;
    let loss = tape.mean(y)?;
    Ok(tape.value(loss).data()[0])
}

fn main() -> Result<()> {
    let x = Tensor::from_fn(vec![2, 1, 4, 4], |i| ((i * 7) % 11) as f64 / 11.0 - 0.4);
    let w = Tensor::from_fn(vec![3, 1, 3, 3], |i| ((i * 5) % 9) as f64 / 9.0 - 0.5);

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.param(w.clone());
    let y = tape.conv2d(xv, wv, 1, 1)?;
    let y = tape.relu(y)?;
    let loss = tape.mean(y)?;
    println!("loss {:.6}, tape holds {} nodes", tape.value(loss).data()[0], tape.len());
    let grads = tape.backward(loss)?;
    let g = grads.get(wv).expect("weight gradient");

    let h = 1e-5;
    for j in [0, 4, 13, 26] {
        let (mut plus, mut minus) = (w.clone(), w.clone());
        plus.data_mut()[j] += h;
        minus.data_mut()[j] -= h;
        let numeric = (loss_of(&x, &plus)? - loss_of(&x, &minus)?) / (2.0 * h);
        println!("dL/dw[{j:>2}]  analytic {:+.8}  central difference {:+.8}", g.data()[j], numeric);
    }

    // Batch norm keeps running statistics in train mode and uses them in eval mode.
    let mut stats = BatchNormStats::new(1);
    for _ in 0..3 {
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let gamma = tape.constant(Tensor::ones(vec![1]));
        let beta = tape.constant(Tensor::zeros(vec![1]));
        tape.batch_norm(xv, gamma, beta, &mut stats, Mode::Train, true)?;
    }
    println!("running mean {:.4}, running var {:.4}", stats.running_mean[0], stats.running_var[0]);
    Ok(())
}
