//! The teacher transform and the distance on a handful of numbers, and the
//! gradient the student receives.
//!
//!     cargo run --release --example partial_l2

use margin_distill::distill::{margin_relu, partial_l2, partial_l2_mask};
use margin_distill::tensor::{Graph, Tensor};

fn main() -> margin_distill::Result<()> {
    // one channel with margin -0.5
    let teacher = Tensor::new(&[1, 1, 1, 6], vec![-2.0, -0.7, -0.3, 0.0, 0.4, 1.5])?;
    let target = margin_relu(&teacher, &[-0.5])?;
    let student = Tensor::new(&[1, 1, 1, 6], vec![-1.0, 0.1, -0.6, -0.2, 0.9, 1.0])?;

    let mut g = Graph::new();
    let s = g.param(student.clone())?;
    let loss = partial_l2(&mut g, &target, s)?;
    let grads = g.backward(loss)?;
    let grad = grads.get(s).expect("student is trainable");
    let active = partial_l2_mask(target.data(), student.data());

    println!("{:>8} {:>8} {:>8} {:>7} {:>8}", "teacher", "target", "student", "counts", "grad");
    for i in 0..6 {
        println!(
            "{:>8.2} {:>8.2} {:>8.2} {:>7} {:>8.2}",
            teacher.data()[i],
            target.data()[i],
            student.data()[i],
            active[i],
            grad.data()[i]
        );
    }
    println!("loss = {:.4}", g.value(loss).item()?);
    Ok(())
}
