//! Build a small computation on the tape, backpropagate, and compare the
//! analytic gradient with the finite-difference oracle.

use duocontrast::numcore::{grad_check, randn_init, Graph, Rng, DEFAULT_STEP};

fn main() -> duocontrast::Result<()> {
    let mut rng = Rng::new(7);
    let a = randn_init(&mut rng, &[3, 4], 1.0)?;
    let b = randn_init(&mut rng, &[4, 2], 1.0)?;

    let mut g = Graph::new();
    let av = g.param(&a);
    let bv = g.constant(b.clone());
    let prod = g.matmul(av, bv)?;
    let lse = g.log_sum_exp_rows(prod)?;
    let loss = g.mean(lse)?;
    let grads = g.backward(loss)?;
    println!("loss = {:.6}", g.value(loss).data()[0]);
    println!("dloss/da = {:?}", grads.get(av).unwrap());

    let worst = grad_check(
        |g, x| {
            let bv = g.constant(b.clone());
            let y = g.matmul(x, bv)?;
            let y = g.log_sum_exp_rows(y)?;
            g.mean(y)
        },
        &a,
        DEFAULT_STEP,
    )?;
    println!("max relative gradient error = {worst:.2e}");
    Ok(())
}
