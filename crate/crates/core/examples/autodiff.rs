//! Builds a small graph by hand, backpropagates, and checks the result
//! against central differences.

use std::sync::Arc;

use canonedit::tensor::{grad_check, softmax_cross_entropy, GradCheckOptions, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
    let w = Tensor::randn(&[6, 5], 0.5, &mut rng);
    let b = Tensor::randn(&[1, 5], 0.1, &mut rng);

    // Mean cross-entropy of a GELU layer against fixed targets.
    let targets = [0usize, 3, 1, 4];
    let loss = |g: &mut Graph, v: &[canonedit::tensor::Var]| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.add_row(h, v[2])?;
        let h = g.gelu(h);
        let mut total = None;
        for (r, &t) in targets.iter().enumerate() {
            let row = g.select(h, &(r * 5..r * 5 + 5).collect::<Vec<_>>())?;
            let ce = softmax_cross_entropy(g, row, t)?;
            total = Some(match total {
                Some(acc) => g.add(acc, ce)?,
                None => ce,
            });
        }
        Ok(g.scale(total.expect("non-empty"), 1.0 / targets.len() as f64))
    };

    let mut g = Graph::new();
    let vars: Vec<_> = [&x, &w, &b].iter().map(|t| g.param(Arc::new((*t).clone()))).collect();
    let out = loss(&mut g, &vars)?;
    let grads = g.backward(out)?;
    println!("loss {:.6}, graph of {} nodes", g.value(out).item(), g.len());
    println!("|dL/dW|^2 = {:.6e}", grads.get(vars[1]).map_or(0.0, Tensor::norm_sq));

    let report = grad_check(loss, &[x, w, b], 1e-6, &GradCheckOptions::default())?;
    println!(
        "gradient check over {} coordinates: max relative error {:.2e} ({})",
        report.coords_checked,
        report.max_rel_error,
        if report.passed { "ok" } else { "FAILED" }
    );
    Ok(())
}
