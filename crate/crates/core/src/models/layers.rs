//! Pre-norm causal Transformer blocks shared by the host LM and the
//! Backpack contextualizer.

use rand::Rng;

use super::params::{Bound, ParamSet};
use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

pub(crate) const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
pub(crate) struct StackShape {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
}

pub fn mlp_up_name(prefix: &str, layer: usize) -> String {
    format!("{prefix}layers.{layer}.mlp.up.weight")
}

pub fn mlp_down_name(prefix: &str, layer: usize) -> String {
    format!("{prefix}layers.{layer}.mlp.down.weight")
}

pub(crate) fn init_stack<R: Rng + ?Sized>(
    params: &mut ParamSet,
    prefix: &str,
    shape: StackShape,
    rng: &mut R,
) {
    let StackShape { layers, dim, mlp_dim, .. } = shape;
    for i in 0..layers {
        let p = format!("{prefix}layers.{i}.");
        params.insert(format!("{p}ln1.gain"), Tensor::full(&[dim], 1.0));
        params.insert(format!("{p}ln1.bias"), Tensor::zeros(&[dim]));
        params.insert(format!("{p}attn.qkv.weight"), Tensor::randn(&[dim, 3 * dim], INIT_STD, rng));
        params.insert(format!("{p}attn.qkv.bias"), Tensor::zeros(&[3 * dim]));
        params.insert(format!("{p}attn.proj.weight"), Tensor::randn(&[dim, dim], INIT_STD, rng));
        params.insert(format!("{p}attn.proj.bias"), Tensor::zeros(&[dim]));
        params.insert(format!("{p}ln2.gain"), Tensor::full(&[dim], 1.0));
        params.insert(format!("{p}ln2.bias"), Tensor::zeros(&[dim]));
        params.insert(mlp_up_name(prefix, i), Tensor::randn(&[dim, mlp_dim], INIT_STD, rng));
        params.insert(format!("{p}mlp.up.bias"), Tensor::zeros(&[mlp_dim]));
        params.insert(mlp_down_name(prefix, i), Tensor::randn(&[mlp_dim, dim], INIT_STD, rng));
        params.insert(format!("{p}mlp.down.bias"), Tensor::zeros(&[dim]));
    }
    params.insert(format!("{prefix}ln_f.gain"), Tensor::full(&[dim], 1.0));
    params.insert(format!("{prefix}ln_f.bias"), Tensor::zeros(&[dim]));
}

/// `x·W + bias`, plus `(x·Q)·R` when an adapter is attached to `W`.
pub(crate) fn linear(g: &mut Graph, b: &Bound, x: Var, weight: &str, bias: &str) -> Result<Var> {
    let w = b.var(weight)?;
    let mut y = g.matmul(x, w)?;
    if let Some(ad) = b.adapter(weight) {
        let xq = g.matmul(x, ad.q)?;
        let low = g.matmul(xq, ad.r)?;
        y = g.add(y, low)?;
    }
    let bv = b.var(bias)?;
    g.add_row(y, bv)
}

fn attention(g: &mut Graph, b: &Bound, p: &str, x: Var, shape: StackShape) -> Result<Var> {
    let d = shape.dim;
    let dh = d / shape.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qkv = linear(g, b, x, &format!("{p}attn.qkv.weight"), &format!("{p}attn.qkv.bias"))?;
    let mut heads = Vec::with_capacity(shape.heads);
    for h in 0..shape.heads {
        let q = g.slice_cols(qkv, h * dh, dh)?;
        let k = g.slice_cols(qkv, d + h * dh, dh)?;
        let v = g.slice_cols(qkv, 2 * d + h * dh, dh)?;
        let scores = g.matmul_bt(q, k)?;
        let scores = g.scale(scores, scale);
        let att = g.causal_softmax(scores)?;
        heads.push(g.matmul(att, v)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    linear(g, b, merged, &format!("{p}attn.proj.weight"), &format!("{p}attn.proj.bias"))
}

/// Runs every block then the final layer norm. `x` is `T×dim`.
pub(crate) fn stack_forward(
    g: &mut Graph,
    b: &Bound,
    prefix: &str,
    shape: StackShape,
    mut x: Var,
) -> Result<Var> {
    for i in 0..shape.layers {
        let p = format!("{prefix}layers.{i}.");
        let n1 = g.layer_norm(x, b.var(&format!("{p}ln1.gain"))?, b.var(&format!("{p}ln1.bias"))?)?;
        let a = attention(g, b, &p, n1, shape)?;
        x = g.add(x, a)?;
        let n2 = g.layer_norm(x, b.var(&format!("{p}ln2.gain"))?, b.var(&format!("{p}ln2.bias"))?)?;
        let up = linear(g, b, n2, &mlp_up_name(prefix, i), &format!("{p}mlp.up.bias"))?;
        let act = g.gelu(up);
        let down = linear(g, b, act, &mlp_down_name(prefix, i), &format!("{p}mlp.down.bias"))?;
        x = g.add(x, down)?;
    }
    g.layer_norm(
        x,
        b.var(&format!("{prefix}ln_f.gain"))?,
        b.var(&format!("{prefix}ln_f.bias"))?,
    )
}

/// Token embedding plus learned absolute position embedding.
pub(crate) fn embed(g: &mut Graph, b: &Bound, table: &str, pos: &str, tokens: &[usize]) -> Result<Var> {
    let idx: Vec<Option<usize>> = tokens.iter().map(|&t| Some(t)).collect();
    let tok = g.gather_rows(b.var(table)?, &idx)?;
    let pidx: Vec<Option<usize>> = (0..tokens.len()).map(Some).collect();
    let p = g.gather_rows(b.var(pos)?, &pidx)?;
    g.add(tok, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax_row;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Multi-head causal self-attention written as explicit loops.
    fn naive_attention(params: &ParamSet, p: &str, x: &Tensor, shape: StackShape) -> Tensor {
        let (n, d, h) = (x.rows(), shape.dim, shape.heads);
        let dh = d / h;
        let w = params.get(&format!("{p}attn.qkv.weight")).unwrap();
        let bias = params.get(&format!("{p}attn.qkv.bias")).unwrap();
        let qkv: Vec<Vec<f64>> = (0..n)
            .map(|t| (0..3 * d).map(|c| bias.data()[c] + (0..d).map(|i| x.at(t, i) * w.at(i, c)).sum::<f64>()).collect())
            .collect();
        let mut merged = vec![vec![0.0; d]; n];
        for head in 0..h {
            for t in 0..n {
                let scores: Vec<f64> = (0..=t)
                    .map(|s| {
                        (0..dh).map(|i| qkv[t][head * dh + i] * qkv[s][d + head * dh + i]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let att = softmax_row(&scores);
                for i in 0..dh {
                    merged[t][head * dh + i] = (0..=t).map(|s| att[s] * qkv[s][2 * d + head * dh + i]).sum();
                }
            }
        }
        let pw = params.get(&format!("{p}attn.proj.weight")).unwrap();
        let pb = params.get(&format!("{p}attn.proj.bias")).unwrap();
        let rows: Vec<Vec<f64>> = merged
            .iter()
            .map(|m| (0..d).map(|c| pb.data()[c] + (0..d).map(|i| m[i] * pw.at(i, c)).sum::<f64>()).collect())
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn attention_matches_brute_force_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = StackShape {
            layers: 1,
            dim: 6,
            heads: 3,
            mlp_dim: 4,
        };
        let mut params = ParamSet::new();
        init_stack(&mut params, "", shape, &mut rng);
        let names: Vec<String> = params.names().map(String::from).collect();
        for name in names {
            let t = params.get(&name).unwrap();
            let noisy = Tensor::randn(t.shape(), 0.5, &mut rng);
            params.set(&name, noisy).unwrap();
        }
        let x = Tensor::randn(&[5, 6], 1.0, &mut rng);
        let mut g = Graph::new();
        let b = Bound::constants(&mut g, &params);
        let xv = g.constant(std::sync::Arc::new(x.clone()));
        let out = attention(&mut g, &b, "layers.0.", xv, shape).unwrap();
        let want = naive_attention(&params, "layers.0.", &x, shape);
        assert!(g.value(out).max_abs_diff(&want).unwrap() < 1e-12);
    }
}
