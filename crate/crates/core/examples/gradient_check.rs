//! Finite-difference check of every differentiable operation, then a check
//! of a small composite by hand.
//!
//!     cargo run --release --example gradient_check

use margin_distill::cli::verify_gradients;
use margin_distill::tensor::{grad_check, Tensor};

fn main() -> margin_distill::Result<()> {
    let report = verify_gradients(0)?;
    print!("{report}");
    println!("all passed: {}\n", report.passed());

    // conv → relu → global pool, differentiated with respect to the input
    let weight = Tensor::randn(&[4, 3, 3, 3], 0.5, &mut margin_distill::seeded_rng(1))?;
    let point = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut margin_distill::seeded_rng(2))?;
    let r = grad_check(
        |g, x| {
            let w = g.constant(weight.clone())?;
            let y = g.conv2d(x, w, None, 1, 1)?;
            let y = g.relu(y)?;
            let y = g.global_avg_pool(y)?;
            g.sum(y)
        },
        &point,
        1e-5,
    )?;
    println!(
        "composite: max relative error {:.2e}, kink distance {:.2e}{}",
        r.max_rel_error,
        r.kink_distance,
        if r.near_kink() { " (too close to a kink to count)" } else { "" }
    );
    Ok(())
}
