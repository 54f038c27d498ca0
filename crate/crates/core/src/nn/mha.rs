//! Multi-head scaled dot-product attention with key padding, composed from
//! tape primitives so the backward pass comes from the tape itself.

use super::graph::{Graph, NnError, TensorId};

/// Projection weights of one attention block.
#[derive(Clone, Copy)]
pub struct MhaParams {
    pub wq: TensorId,
    pub bq: TensorId,
    pub wk: TensorId,
    pub bk: TensorId,
    pub wv: TensorId,
    pub bv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
}

/// Attention over `tokens` [batch, n, d]. Keys at positions where
/// `key_mask[b*n + j]` is false receive exactly zero attention weight.
/// Returns the projected output and the per-head attention matrices
/// ([batch, n, n] each), which stay readable on the graph for analysis.
pub fn mha_forward(
    g: &mut Graph,
    tokens: TensorId,
    key_mask: &[bool],
    p: &MhaParams,
    heads: usize,
) -> Result<(TensorId, Vec<TensorId>), NnError> {
    let shape = g.value(tokens).shape.clone();
    if shape.len() != 3 {
        return Err(NnError::Shape(format!(
            "mha expects [batch, n, d] tokens, got {shape:?}"
        )));
    }
    let (bsz, n, d) = (shape[0], shape[1], shape[2]);
    if d % heads != 0 {
        return Err(NnError::Shape(format!(
            "model width {d} not divisible by {heads} heads"
        )));
    }
    if key_mask.len() != bsz * n {
        return Err(NnError::Shape(format!(
            "key mask length {} != batch*n {}",
            key_mask.len(),
            bsz * n
        )));
    }
    for bi in 0..bsz {
        if !key_mask[bi * n..(bi + 1) * n].iter().any(|m| *m) {
            return Err(NnError::AllKeysMasked(bi));
        }
    }

    let q = g.linear(tokens, p.wq, p.bq);
    let k = g.linear(tokens, p.wk, p.bk);
    let v = g.linear(tokens, p.wv, p.bv);

    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    let mut attentions = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_last(q, h * dh, (h + 1) * dh),
                g.slice_last(k, h * dh, (h + 1) * dh),
                g.slice_last(v, h * dh, (h + 1) * dh),
            )
        };
        let scores = g.bmm_nt(qh, kh);
        let scores = g.scale(scores, scale);
        let attn = g.masked_softmax(scores, key_mask);
        attentions.push(attn);
        head_outs.push(g.bmm(attn, vh));
    }
    let mut merged = head_outs[0];
    for h in head_outs.into_iter().skip(1) {
        merged = g.concat_last(merged, h);
    }
    let out = g.linear(merged, p.wo, p.bo);
    Ok((out, attentions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;
    use crate::rng::stream;

    fn params(g: &mut Graph, d: usize, rng: &mut rand_chacha::ChaCha8Rng) -> MhaParams {
        let bound = 1.0 / (d as f64).sqrt();
        MhaParams {
            wq: g.leaf(Tensor::uniform(&[d, d], bound, rng)),
            bq: g.leaf(Tensor::zeros(&[d])),
            wk: g.leaf(Tensor::uniform(&[d, d], bound, rng)),
            bk: g.leaf(Tensor::zeros(&[d])),
            wv: g.leaf(Tensor::uniform(&[d, d], bound, rng)),
            bv: g.leaf(Tensor::zeros(&[d])),
            wo: g.leaf(Tensor::uniform(&[d, d], bound, rng)),
            bo: g.leaf(Tensor::zeros(&[d])),
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut g = Graph::new();
        let mut rng = stream(0, "mha", 0);
        let p = params(&mut g, 4, &mut rng);
        let x = g.leaf(Tensor::gaussian(&[1, 1, 4], 1.0, &mut rng));
        let (_, attn) = mha_forward(&mut g, x, &[true], &p, 1).unwrap();
        assert_eq!(g.value(attn[0]).data, vec![1.0]);
    }

    #[test]
    fn padded_key_column_is_zero() {
        let mut g = Graph::new();
        let mut rng = stream(1, "mha", 0);
        let p = params(&mut g, 4, &mut rng);
        let x = g.leaf(Tensor::gaussian(&[1, 3, 4], 1.0, &mut rng));
        let (_, attn) = mha_forward(&mut g, x, &[true, true, false], &p, 1).unwrap();
        let a = g.value(attn[0]);
        for r in 0..3 {
            assert_eq!(a.data[r * 3 + 2], 0.0);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut g = Graph::new();
        let mut rng = stream(2, "mha", 0);
        let p = params(&mut g, 8, &mut rng);
        let x = g.leaf(Tensor::gaussian(&[1, 4, 8], 1.0, &mut rng));
        let (_, attn) = mha_forward(&mut g, x, &[true; 4], &p, 2).unwrap();
        for a in attn {
            let av = g.value(a);
            for r in 0..4 {
                let s: f64 = av.data[r * 4..(r + 1) * 4].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_keys_masked_is_an_error() {
        let mut g = Graph::new();
        let mut rng = stream(3, "mha", 0);
        let p = params(&mut g, 4, &mut rng);
        let x = g.leaf(Tensor::gaussian(&[1, 2, 4], 1.0, &mut rng));
        assert!(matches!(
            mha_forward(&mut g, x, &[false, false], &p, 1),
            Err(NnError::AllKeysMasked(0))
        ));
    }
}
