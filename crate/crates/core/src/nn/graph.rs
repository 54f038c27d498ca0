//! Reverse-mode tape over a fixed op set.
//!
//! A [`Graph`] records every forward op; [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients. The op set is exactly what the policy
//! and critic networks plus the PPO loss need — no general broadcasting, no
//! views. All math is f64. Matrix products go through `matrixmultiply`, with
//! large row counts split into fixed-size chunks processed in parallel;
//! chunk boundaries depend only on the data, so results are bit-identical
//! regardless of thread count.

use super::tensor::Tensor;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("backward already ran on this graph")]
    DoubleBackward,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor id {0} does not belong to this graph")]
    UnknownId(usize),
    #[error("gradient for {0} is not finite")]
    NonFiniteGrad(String),
    #[error("attention row {0} has every key masked")]
    AllKeysMasked(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Handle to a tensor recorded on a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub usize);

const PAR_CHUNK: usize = 2048;
/// Batched-matmul slices processed per parallel task; fixed so results do
/// not depend on thread count.
const SLICE_CHUNK: usize = 128;

pub(crate) const LN_EPS: f64 = 1e-5;

/// C[m,n] (+)= alpha * A[m,k] * B[k,n], row-major, optional transposes on the
/// stored operands.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Uninitialized f64 buffer for gemm outputs written with beta = 0 (every
/// element is stored before being read).
fn uninit_vec(len: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(len);
    #[allow(clippy::uninit_vec)]
    unsafe {
        v.set_len(len);
    }
    v
}

/// out[r,m] = a[r,k] * b[k,m], rows split across threads.
fn matmul_rows_par(a: &[f64], b: &[f64], r: usize, k: usize, m: usize, out: &mut [f64]) {
    if r <= PAR_CHUNK {
        gemm(r, k, m, 1.0, a, false, b, false, 0.0, out);
        return;
    }
    out.par_chunks_mut(PAR_CHUNK * m)
        .zip(a.par_chunks(PAR_CHUNK * k))
        .for_each(|(oc, ac)| {
            let rows = ac.len() / k;
            gemm(rows, k, m, 1.0, ac, false, b, false, 0.0, oc);
        });
}

/// out[k,m] = a[r,k]^T * g[r,m]; the row reduction runs in fixed chunk order
/// so the float accumulation is deterministic.
fn matmul_tn(a: &[f64], g: &[f64], r: usize, k: usize, m: usize, out: &mut [f64]) {
    if r <= PAR_CHUNK {
        gemm(k, r, m, 1.0, a, true, g, false, 0.0, out);
        return;
    }
    let partials: Vec<Vec<f64>> = a
        .par_chunks(PAR_CHUNK * k)
        .zip(g.par_chunks(PAR_CHUNK * m))
        .map(|(ac, gc)| {
            let rows = ac.len() / k;
            let mut p = uninit_vec(k * m);
            gemm(k, rows, m, 1.0, ac, true, gc, false, 0.0, &mut p);
            p
        })
        .collect();
    out.copy_from_slice(&partials[0]);
    for p in &partials[1..] {
        for (o, x) in out.iter_mut().zip(p) {
            *o += x;
        }
    }
}

/// out[r,k] = g[r,m] * b[k,m]^T, rows split across threads.
fn matmul_nt_par(g: &[f64], b: &[f64], r: usize, m: usize, k: usize, out: &mut [f64]) {
    if r <= PAR_CHUNK {
        gemm(r, m, k, 1.0, g, false, b, true, 0.0, out);
        return;
    }
    out.par_chunks_mut(PAR_CHUNK * k)
        .zip(g.par_chunks(PAR_CHUNK * m))
        .for_each(|(oc, gc)| {
            let rows = gc.len() / m;
            gemm(rows, m, k, 1.0, gc, false, b, true, 0.0, oc);
        });
}

enum Op {
    Leaf,
    /// x[..,k] * w[k,m]
    Matmul { x: usize, w: usize },
    /// x[..,k] * w[k,m] + bias[m]
    Linear { x: usize, w: usize, b: usize },
    /// per-slice a[b,n,k] * b[b,k,m]
    Bmm { a: usize, b: usize },
    /// per-slice a[b,n,k] * b[b,m,k]^T
    BmmNt { a: usize, b: usize },
    AddBias { x: usize, b: usize },
    Add { a: usize, b: usize },
    /// x[b,n,d] + w[n,d] broadcast over the batch
    AddRows { x: usize, w: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    MulMask { x: usize, mask: Tensor },
    Scale { x: usize, c: f64 },
    AddConst { x: usize },
    Relu { x: usize },
    Exp { x: usize },
    Clamp { x: usize, lo: f64, hi: f64 },
    LayerNorm { x: usize, gain: usize, bias: usize },
    Dropout { x: usize, keep: Vec<f64> },
    /// softmax over the last dim with masked keys excluded; mask is indexed
    /// [batch, key] and shared by every query row of a batch element
    MaskedSoftmax { x: usize, mask: Vec<bool> },
    ConcatLast { a: usize, b: usize },
    /// g[b,gdim] -> [b,n,gdim]
    BroadcastTokens { g: usize, n: usize },
    SliceLast { x: usize, lo: usize, hi: usize },
    Sum { x: usize },
    Mean { x: usize },
    /// [b,n,(s)] -> [b], summing everything but the batch dim
    SumTokens { x: usize },
    /// [b,n] means over mask-true tokens -> [b]
    MaskedMeanTokens { x: usize, mask: Vec<bool> },
    EMin { a: usize, b: usize },
    EMax { a: usize, b: usize },
    Reshape { x: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A recording of one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> TensorId {
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the loss w.r.t. this node; zero until backward runs.
    pub fn grad(&self, id: TensorId) -> Tensor {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.nodes[id.0].value.shape))
    }

    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Leaf)
    }

    fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    // -- forward ops --------------------------------------------------------

    /// x[.., k] * w[k, m]: the shared linear map applied to every row.
    pub fn matmul(&mut self, x: TensorId, w: TensorId) -> TensorId {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(ws.len(), 2, "matmul weight must be 2-d");
        let k = *xs.last().expect("matmul input needs a last dim");
        assert_eq!(k, ws[0], "matmul inner dims {k} vs {}", ws[0]);
        let r = self.nodes[x.0].value.leading();
        let m = ws[1];
        let mut out = uninit_vec(r * m);
        matmul_rows_par(
            &self.nodes[x.0].value.data,
            &self.nodes[w.0].value.data,
            r,
            k,
            m,
            &mut out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = m;
        self.push(Tensor::new(shape, out), Op::Matmul { x: x.0, w: w.0 })
    }

    /// Fused x[.., k] * w[k, m] + bias[m].
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(ws.len(), 2, "linear weight must be 2-d");
        let k = *xs.last().expect("linear input needs a last dim");
        assert_eq!(k, ws[0], "linear inner dims {k} vs {}", ws[0]);
        let m = ws[1];
        assert_eq!(self.shape(b), &[m], "linear bias width");
        let r = self.nodes[x.0].value.leading();
        let mut out = uninit_vec(r * m);
        matmul_rows_par(
            &self.nodes[x.0].value.data,
            &self.nodes[w.0].value.data,
            r,
            k,
            m,
            &mut out,
        );
        let bv = &self.nodes[b.0].value.data;
        for row in out.chunks_mut(m) {
            for (o, bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = m;
        self.push(
            Tensor::new(shape, out),
            Op::Linear { x: x.0, w: w.0, b: b.0 },
        )
    }

    /// Per-slice product [b,n,k] x [b,k,m] -> [b,n,m].
    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), 3, "bmm lhs must be 3-d");
        assert_eq!(sb.len(), 3, "bmm rhs must be 3-d");
        assert_eq!(sa[0], sb[0], "bmm batch dims");
        assert_eq!(sa[2], sb[1], "bmm inner dims");
        let (bsz, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = uninit_vec(bsz * n * m);
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        out.par_chunks_mut(SLICE_CHUNK * n * m)
            .enumerate()
            .for_each(|(ci, oc)| {
                for (j, slice) in oc.chunks_mut(n * m).enumerate() {
                    let i = ci * SLICE_CHUNK + j;
                    gemm(
                        n,
                        k,
                        m,
                        1.0,
                        &av[i * n * k..(i + 1) * n * k],
                        false,
                        &bv[i * k * m..(i + 1) * k * m],
                        false,
                        0.0,
                        slice,
                    );
                }
            });
        self.push(
            Tensor::new(vec![bsz, n, m], out),
            Op::Bmm { a: a.0, b: b.0 },
        )
    }

    /// Per-slice product against the transposed rhs: [b,n,k] x [b,m,k] -> [b,n,m].
    pub fn bmm_nt(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), 3);
        assert_eq!(sb.len(), 3);
        assert_eq!(sa[0], sb[0], "bmm_nt batch dims");
        assert_eq!(sa[2], sb[2], "bmm_nt inner dims");
        let (bsz, n, k, m) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = uninit_vec(bsz * n * m);
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        out.par_chunks_mut(SLICE_CHUNK * n * m)
            .enumerate()
            .for_each(|(ci, oc)| {
                for (j, slice) in oc.chunks_mut(n * m).enumerate() {
                    let i = ci * SLICE_CHUNK + j;
                    gemm(
                        n,
                        k,
                        m,
                        1.0,
                        &av[i * n * k..(i + 1) * n * k],
                        false,
                        &bv[i * m * k..(i + 1) * m * k],
                        true,
                        0.0,
                        slice,
                    );
                }
            });
        self.push(
            Tensor::new(vec![bsz, n, m], out),
            Op::BmmNt { a: a.0, b: b.0 },
        )
    }

    /// x[.., m] + b[m].
    pub fn add_bias(&mut self, x: TensorId, b: TensorId) -> TensorId {
        let m = self.shape(x).last().copied().unwrap();
        assert_eq!(self.shape(b), &[m], "bias width");
        let xb = &self.nodes[x.0].value;
        let bv = &self.nodes[b.0].value.data;
        let mut out = xb.data.clone();
        for row in out.chunks_mut(m) {
            for (o, bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        self.push(
            Tensor::new(xb.shape.clone(), out),
            Op::AddBias { x: x.0, b: b.0 },
        )
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x + y)
            .collect();
        self.push(
            Tensor::new(self.shape(a).to_vec(), out),
            Op::Add { a: a.0, b: b.0 },
        )
    }

    /// x[b,n,d] + w[n,d], broadcast over the leading batch dim.
    pub fn add_rows(&mut self, x: TensorId, w: TensorId) -> TensorId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3);
        assert_eq!(&xs[1..], &ws[..], "add_rows trailing shapes");
        let block = ws.iter().product::<usize>();
        let wv = &self.nodes[w.0].value.data;
        let mut out = self.nodes[x.0].value.data.clone();
        for chunk in out.chunks_mut(block) {
            for (o, v) in chunk.iter_mut().zip(wv) {
                *o += v;
            }
        }
        self.push(Tensor::new(xs, out), Op::AddRows { x: x.0, w: w.0 })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "sub shapes");
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x - y)
            .collect();
        self.push(
            Tensor::new(self.shape(a).to_vec(), out),
            Op::Sub { a: a.0, b: b.0 },
        )
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x * y)
            .collect();
        self.push(
            Tensor::new(self.shape(a).to_vec(), out),
            Op::Mul { a: a.0, b: b.0 },
        )
    }

    /// Elementwise product with a constant mask (no gradient to the mask).
    pub fn mul_mask(&mut self, x: TensorId, mask: Tensor) -> TensorId {
        assert_eq!(self.shape(x), &mask.shape[..], "mask shape");
        let out: Vec<f64> = self.nodes[x.0]
            .value
            .data
            .iter()
            .zip(&mask.data)
            .map(|(a, m)| a * m)
            .collect();
        self.push(
            Tensor::new(mask.shape.clone(), out),
            Op::MulMask { x: x.0, mask },
        )
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let out: Vec<f64> = self.nodes[x.0].value.data.iter().map(|v| v * c).collect();
        self.push(
            Tensor::new(self.shape(x).to_vec(), out),
            Op::Scale { x: x.0, c },
        )
    }

    /// x + constant tensor (no gradient to the constant).
    pub fn add_const(&mut self, x: TensorId, t: &Tensor) -> TensorId {
        assert_eq!(self.shape(x), &t.shape[..], "add_const shape");
        let out: Vec<f64> = self.nodes[x.0]
            .value
            .data
            .iter()
            .zip(&t.data)
            .map(|(a, b)| a + b)
            .collect();
        self.push(Tensor::new(t.shape.clone(), out), Op::AddConst { x: x.0 })
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.nodes[x.0]
            .value
            .data
            .iter()
            .map(|v| v.max(0.0))
            .collect();
        self.push(Tensor::new(self.shape(x).to_vec(), out), Op::Relu { x: x.0 })
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.nodes[x.0].value.data.iter().map(|v| v.exp()).collect();
        self.push(Tensor::new(self.shape(x).to_vec(), out), Op::Exp { x: x.0 })
    }

    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> TensorId {
        let out: Vec<f64> = self.nodes[x.0]
            .value
            .data
            .iter()
            .map(|v| v.clamp(lo, hi))
            .collect();
        self.push(
            Tensor::new(self.shape(x).to_vec(), out),
            Op::Clamp { x: x.0, lo, hi },
        )
    }

    /// Layer norm over the last dimension with learned gain and bias.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> TensorId {
        let d = self.shape(x).last().copied().unwrap();
        assert_eq!(self.shape(gain), &[d], "layer_norm gain width");
        assert_eq!(self.shape(bias), &[d], "layer_norm bias width");
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value.data;
        let b = &self.nodes[bias.0].value.data;
        let mut out = vec![0.0; xv.data.len()];
        for (row, orow) in xv.data.chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for i in 0..d {
                orow[i] = (row[i] - mean) * rstd * g[i] + b[i];
            }
        }
        self.push(
            Tensor::new(xv.shape.clone(), out),
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
            },
        )
    }

    /// Inverted dropout: in training, zero with probability p and scale the
    /// rest by 1/(1-p); identity in eval mode.
    pub fn dropout(&mut self, x: TensorId, p: f64, train: bool, rng: &mut impl Rng) -> TensorId {
        if !train || p == 0.0 {
            return x;
        }
        assert!((0.0..1.0).contains(&p), "dropout probability");
        let scale = 1.0 / (1.0 - p);
        let keep: Vec<f64> = (0..self.nodes[x.0].value.len())
            .map(|_| if rng.gen_range(0.0..1.0) < p { 0.0 } else { scale })
            .collect();
        let out: Vec<f64> = self.nodes[x.0]
            .value
            .data
            .iter()
            .zip(&keep)
            .map(|(v, k)| v * k)
            .collect();
        self.push(
            Tensor::new(self.shape(x).to_vec(), out),
            Op::Dropout { x: x.0, keep },
        )
    }

    /// Softmax over the last dim of [b, r, n] (or [r, n]) scores, with key j
    /// of batch b excluded wherever mask[b*n + j] is false. Masked keys get
    /// exactly zero weight; every row must keep at least one valid key.
    pub fn masked_softmax(&mut self, x: TensorId, mask: &[bool]) -> TensorId {
        let xs = self.shape(x).to_vec();
        let n = *xs.last().expect("softmax needs a last dim");
        let bsz = if xs.len() == 3 { xs[0] } else { 1 };
        assert_eq!(mask.len(), bsz * n, "key mask length");
        let rows_per_batch = self.nodes[x.0].value.len() / (bsz * n);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; xv.data.len()];
        for bi in 0..bsz {
            let bmask = &mask[bi * n..(bi + 1) * n];
            assert!(
                bmask.iter().any(|m| *m),
                "masked_softmax: every key masked in batch element {bi}"
            );
            for r in 0..rows_per_batch {
                let base = (bi * rows_per_batch + r) * n;
                let row = &xv.data[base..base + n];
                let mut mx = f64::NEG_INFINITY;
                for (j, v) in row.iter().enumerate() {
                    if bmask[j] && *v > mx {
                        mx = *v;
                    }
                }
                let mut sum = 0.0;
                let orow = &mut out[base..base + n];
                for j in 0..n {
                    if bmask[j] {
                        orow[j] = (row[j] - mx).exp();
                        sum += orow[j];
                    }
                }
                for o in orow.iter_mut() {
                    *o /= sum;
                }
            }
        }
        self.push(
            Tensor::new(xs, out),
            Op::MaskedSoftmax {
                x: x.0,
                mask: mask.to_vec(),
            },
        )
    }

    /// Concatenate along the last dimension.
    pub fn concat_last(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa[..sa.len() - 1], sb[..sb.len() - 1], "concat leading dims");
        let (da, db) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = self.nodes[a.0].value.leading();
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut out = Vec::with_capacity(rows * (da + db));
        for rix in 0..rows {
            out.extend_from_slice(&av[rix * da..(rix + 1) * da]);
            out.extend_from_slice(&bv[rix * db..(rix + 1) * db]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = da + db;
        self.push(Tensor::new(shape, out), Op::ConcatLast { a: a.0, b: b.0 })
    }

    /// g[b, gdim] -> [b, n, gdim], repeating per token.
    pub fn broadcast_tokens(&mut self, g: TensorId, n: usize) -> TensorId {
        let gs = self.shape(g).to_vec();
        assert_eq!(gs.len(), 2, "broadcast_tokens expects [batch, dim]");
        let (bsz, gd) = (gs[0], gs[1]);
        let gv = &self.nodes[g.0].value.data;
        let mut out = Vec::with_capacity(bsz * n * gd);
        for bi in 0..bsz {
            for _ in 0..n {
                out.extend_from_slice(&gv[bi * gd..(bi + 1) * gd]);
            }
        }
        self.push(
            Tensor::new(vec![bsz, n, gd], out),
            Op::BroadcastTokens { g: g.0, n },
        )
    }

    /// Columns lo..hi of the last dimension.
    pub fn slice_last(&mut self, x: TensorId, lo: usize, hi: usize) -> TensorId {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap();
        assert!(lo < hi && hi <= d, "slice bounds {lo}..{hi} of {d}");
        let rows = self.nodes[x.0].value.leading();
        let xv = &self.nodes[x.0].value.data;
        let w = hi - lo;
        let mut out = Vec::with_capacity(rows * w);
        for rix in 0..rows {
            out.extend_from_slice(&xv[rix * d + lo..rix * d + hi]);
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = w;
        self.push(Tensor::new(shape, out), Op::SliceLast { x: x.0, lo, hi })
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s = self.nodes[x.0].value.data.iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum { x: x.0 })
    }

    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let v = &self.nodes[x.0].value;
        let s = v.data.iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean { x: x.0 })
    }

    /// Sum everything except the batch dim: [b, ...] -> [b].
    pub fn sum_tokens(&mut self, x: TensorId) -> TensorId {
        let xs = self.shape(x).to_vec();
        assert!(xs.len() >= 2, "sum_tokens expects a batch dim");
        let bsz = xs[0];
        let block = xs[1..].iter().product::<usize>();
        let xv = &self.nodes[x.0].value.data;
        let out: Vec<f64> = (0..bsz)
            .map(|bi| xv[bi * block..(bi + 1) * block].iter().sum())
            .collect();
        self.push(Tensor::new(vec![bsz], out), Op::SumTokens { x: x.0 })
    }

    /// Mean over mask-true tokens per batch element: [b, n] -> [b].
    pub fn masked_mean_tokens(&mut self, x: TensorId, mask: &[bool]) -> TensorId {
        let xs = self.shape(x).to_vec();
        let (bsz, n) = match xs.len() {
            2 => (xs[0], xs[1]),
            3 => {
                assert_eq!(xs[2], 1, "masked_mean_tokens expects width-1 values");
                (xs[0], xs[1])
            }
            r => panic!("masked_mean_tokens on rank {r}"),
        };
        assert_eq!(mask.len(), bsz * n, "token mask length");
        let xv = &self.nodes[x.0].value.data;
        let out: Vec<f64> = (0..bsz)
            .map(|bi| {
                let mut s = 0.0;
                let mut c = 0usize;
                for t in 0..n {
                    if mask[bi * n + t] {
                        s += xv[bi * n + t];
                        c += 1;
                    }
                }
                assert!(c > 0, "batch element {bi} has no live tokens");
                s / c as f64
            })
            .collect();
        self.push(
            Tensor::new(vec![bsz], out),
            Op::MaskedMeanTokens {
                x: x.0,
                mask: mask.to_vec(),
            },
        )
    }

    pub fn emin(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "emin shapes");
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x.min(*y))
            .collect();
        self.push(
            Tensor::new(self.shape(a).to_vec(), out),
            Op::EMin { a: a.0, b: b.0 },
        )
    }

    pub fn emax(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "emax shapes");
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x.max(*y))
            .collect();
        self.push(
            Tensor::new(self.shape(a).to_vec(), out),
            Op::EMax { a: a.0, b: b.0 },
        )
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> TensorId {
        let v = self.nodes[x.0].value.clone().reshaped(shape);
        self.push(v, Op::Reshape { x: x.0 })
    }

    // -- backward -----------------------------------------------------------

    /// Accumulate a gradient contribution; the first contribution is moved
    /// in without a zero-fill pass.
    fn set_or_add(&mut self, i: usize, delta: Vec<f64>) {
        debug_assert_eq!(self.nodes[i].value.len(), delta.len());
        match &mut self.grads[i] {
            None => {
                self.grads[i] = Some(Tensor {
                    shape: self.nodes[i].value.shape.clone(),
                    data: delta,
                });
            }
            Some(g) => {
                for (o, d) in g.data.iter_mut().zip(delta) {
                    *o += d;
                }
            }
        }
    }

    fn add_slice_to_grad(&mut self, i: usize, delta: &[f64]) {
        match &mut self.grads[i] {
            None => {
                self.grads[i] = Some(Tensor {
                    shape: self.nodes[i].value.shape.clone(),
                    data: delta.to_vec(),
                });
            }
            Some(g) => {
                for (o, d) in g.data.iter_mut().zip(delta) {
                    *o += d;
                }
            }
        }
    }

    /// Reverse pass from a scalar loss. Gradients for every node become
    /// available through [`Graph::grad`]. Running backward twice on one
    /// recording is an error.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), NnError> {
        if self.backward_done {
            return Err(NnError::DoubleBackward);
        }
        if loss.0 >= self.nodes.len() {
            return Err(NnError::UnknownId(loss.0));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NnError::NonScalarLoss(
                self.nodes[loss.0].value.shape.clone(),
            ));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(Tensor::new(
            self.nodes[loss.0].value.shape.clone(),
            vec![1.0],
        ));

        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].is_none() {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            self.dispatch_backward(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn dispatch_backward(&mut self, i: usize, g: &Tensor) {
        // Ops only reference earlier nodes, so reading values while writing
        // grads is safe; values are cloned where the borrow checker needs it.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { x, w } => {
                let (x, w) = (*x, *w);
                let k = self.nodes[x].value.last_dim();
                let r = self.nodes[x].value.leading();
                let m = self.nodes[w].value.shape[1];
                let mut dx = uninit_vec(r * k);
                matmul_nt_par(&g.data, &self.nodes[w].value.data, r, m, k, &mut dx);
                self.set_or_add(x, dx);
                let mut dw = uninit_vec(k * m);
                matmul_tn(&self.nodes[x].value.data, &g.data, r, k, m, &mut dw);
                self.set_or_add(w, dw);
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let k = self.nodes[x].value.last_dim();
                let r = self.nodes[x].value.leading();
                let m = self.nodes[w].value.shape[1];
                let mut dx = uninit_vec(r * k);
                matmul_nt_par(&g.data, &self.nodes[w].value.data, r, m, k, &mut dx);
                self.set_or_add(x, dx);
                let mut dw = uninit_vec(k * m);
                matmul_tn(&self.nodes[x].value.data, &g.data, r, k, m, &mut dw);
                self.set_or_add(w, dw);
                let mut db = vec![0.0; m];
                for row in g.data.chunks(m) {
                    for (o, v) in db.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                self.set_or_add(b, db);
            }
            Op::Bmm { a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.nodes[a].value.shape.clone();
                let sb = self.nodes[b].value.shape.clone();
                let (n, k, m) = (sa[1], sa[2], sb[2]);
                let av = &self.nodes[a].value.data;
                let bv = &self.nodes[b].value.data;
                let mut da = uninit_vec(av.len());
                let mut db = uninit_vec(bv.len());
                da.par_chunks_mut(SLICE_CHUNK * n * k)
                    .zip(db.par_chunks_mut(SLICE_CHUNK * k * m))
                    .enumerate()
                    .for_each(|(ci, (dac, dbc))| {
                        for (j, (das, dbs)) in
                            dac.chunks_mut(n * k).zip(dbc.chunks_mut(k * m)).enumerate()
                        {
                            let s = ci * SLICE_CHUNK + j;
                            let gs = &g.data[s * n * m..(s + 1) * n * m];
                            let asl = &av[s * n * k..(s + 1) * n * k];
                            let bsl = &bv[s * k * m..(s + 1) * k * m];
                            gemm(n, m, k, 1.0, gs, false, bsl, true, 0.0, das);
                            gemm(k, n, m, 1.0, asl, true, gs, false, 0.0, dbs);
                        }
                    });
                self.set_or_add(a, da);
                self.set_or_add(b, db);
            }
            Op::BmmNt { a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.nodes[a].value.shape.clone();
                let sb = self.nodes[b].value.shape.clone();
                let (bsz_, n, k, m) = (sa[0], sa[1], sa[2], sb[1]);
                let _ = bsz_;
                let av = &self.nodes[a].value.data;
                let bv = &self.nodes[b].value.data;
                let mut da = uninit_vec(av.len());
                let mut db = uninit_vec(bv.len());
                da.par_chunks_mut(SLICE_CHUNK * n * k)
                    .zip(db.par_chunks_mut(SLICE_CHUNK * m * k))
                    .enumerate()
                    .for_each(|(ci, (dac, dbc))| {
                        for (j, (das, dbs)) in
                            dac.chunks_mut(n * k).zip(dbc.chunks_mut(m * k)).enumerate()
                        {
                            let s = ci * SLICE_CHUNK + j;
                            let gs = &g.data[s * n * m..(s + 1) * n * m];
                            let asl = &av[s * n * k..(s + 1) * n * k];
                            let bsl = &bv[s * m * k..(s + 1) * m * k];
                            // C = A B^T: dA = dC B, dB = dC^T A
                            gemm(n, m, k, 1.0, gs, false, bsl, false, 0.0, das);
                            gemm(m, n, k, 1.0, gs, true, asl, false, 0.0, dbs);
                        }
                    });
                self.set_or_add(a, da);
                self.set_or_add(b, db);
            }
            Op::AddBias { x, b } => {
                let (x, b) = (*x, *b);
                let m = self.nodes[b].value.len();
                let mut db = vec![0.0; m];
                for row in g.data.chunks(m) {
                    for (o, v) in db.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                self.add_slice_to_grad(x, &g.data);
                self.set_or_add(b, db);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.add_slice_to_grad(a, &g.data);
                self.add_slice_to_grad(b, &g.data);
            }
            Op::AddRows { x, w } => {
                let (x, w) = (*x, *w);
                let block = self.nodes[w].value.len();
                let mut dw = vec![0.0; block];
                for chunk in g.data.chunks(block) {
                    for (o, v) in dw.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                self.add_slice_to_grad(x, &g.data);
                self.set_or_add(w, dw);
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.add_slice_to_grad(a, &g.data);
                let neg: Vec<f64> = g.data.iter().map(|v| -v).collect();
                self.set_or_add(b, neg);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da: Vec<f64> = g
                    .data
                    .iter()
                    .zip(&self.nodes[b].value.data)
                    .map(|(gv, bv)| gv * bv)
                    .collect();
                let db: Vec<f64> = g
                    .data
                    .iter()
                    .zip(&self.nodes[a].value.data)
                    .map(|(gv, av)| gv * av)
                    .collect();
                self.set_or_add(a, da);
                self.set_or_add(b, db);
            }
            Op::MulMask { x, mask } => {
                let x = *x;
                let dx: Vec<f64> = g.data.iter().zip(&mask.data).map(|(gv, m)| gv * m).collect();
                self.set_or_add(x, dx);
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                let dx: Vec<f64> = g.data.iter().map(|v| v * c).collect();
                self.set_or_add(x, dx);
            }
            Op::AddConst { x } => {
                let x = *x;
                self.add_slice_to_grad(x, &g.data);
            }
            Op::Relu { x } => {
                let x = *x;
                let dx: Vec<f64> = g
                    .data
                    .iter()
                    .zip(&self.nodes[x].value.data)
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.set_or_add(x, dx);
            }
            Op::Exp { x } => {
                let x = *x;
                let dx: Vec<f64> = g
                    .data
                    .iter()
                    .zip(&self.nodes[i].value.data)
                    .map(|(gv, yv)| gv * yv)
                    .collect();
                self.set_or_add(x, dx);
            }
            Op::Clamp { x, lo, hi } => {
                let (x, lo, hi) = (*x, *lo, *hi);
                let dx: Vec<f64> = g
                    .data
                    .iter()
                    .zip(&self.nodes[x].value.data)
                    .map(|(gv, xv)| if *xv >= lo && *xv <= hi { *gv } else { 0.0 })
                    .collect();
                self.set_or_add(x, dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = self.nodes[x].value.last_dim();
                let xv = self.nodes[x].value.data.clone();
                let gv = self.nodes[gain].value.data.clone();
                let mut dx = uninit_vec(xv.len());
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for (row_i, (row, grow)) in xv.chunks(d).zip(g.data.chunks(d)).enumerate() {
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let rstd = 1.0 / (var + LN_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * rstd).collect();
                    let mut m1 = 0.0; // mean(dy * gain)
                    let mut m2 = 0.0; // mean(dy * gain * xhat)
                    for j in 0..d {
                        let dyg = grow[j] * gv[j];
                        m1 += dyg;
                        m2 += dyg * xhat[j];
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    let base = row_i * d;
                    for j in 0..d {
                        let dyg = grow[j] * gv[j];
                        dx[base + j] = rstd * (dyg - m1 - xhat[j] * m2);
                    }
                }
                self.set_or_add(x, dx);
                self.set_or_add(gain, dgain);
                self.set_or_add(bias, dbias);
            }
            Op::Dropout { x, keep } => {
                let x = *x;
                let dx: Vec<f64> = g.data.iter().zip(keep).map(|(gv, k)| gv * k).collect();
                self.set_or_add(x, dx);
            }
            Op::MaskedSoftmax { x, mask } => {
                let x = *x;
                let n = self.nodes[i].value.last_dim();
                let bsz = mask.len() / n;
                let rows_per_batch = self.nodes[i].value.len() / (bsz * n);
                let p = &self.nodes[i].value.data;
                let mut dx = vec![0.0; p.len()];
                for bi in 0..bsz {
                    let bmask = &mask[bi * n..(bi + 1) * n];
                    for r in 0..rows_per_batch {
                        let base = (bi * rows_per_batch + r) * n;
                        let mut dot = 0.0;
                        for j in 0..n {
                            if bmask[j] {
                                dot += p[base + j] * g.data[base + j];
                            }
                        }
                        for j in 0..n {
                            if bmask[j] {
                                dx[base + j] = p[base + j] * (g.data[base + j] - dot);
                            }
                        }
                    }
                }
                self.set_or_add(x, dx);
            }
            Op::ConcatLast { a, b } => {
                let (a, b) = (*a, *b);
                let da_w = self.nodes[a].value.last_dim();
                let db_w = self.nodes[b].value.last_dim();
                let rows = self.nodes[a].value.leading();
                let mut da = uninit_vec(rows * da_w);
                let mut db = uninit_vec(rows * db_w);
                for rix in 0..rows {
                    let grow = &g.data[rix * (da_w + db_w)..(rix + 1) * (da_w + db_w)];
                    da[rix * da_w..(rix + 1) * da_w].copy_from_slice(&grow[..da_w]);
                    db[rix * db_w..(rix + 1) * db_w].copy_from_slice(&grow[da_w..]);
                }
                self.set_or_add(a, da);
                self.set_or_add(b, db);
            }
            Op::BroadcastTokens { g: gid, n } => {
                let (gid, n) = (*gid, *n);
                let gd = self.nodes[gid].value.last_dim();
                let bsz = self.nodes[gid].value.leading();
                let mut dg = vec![0.0; bsz * gd];
                for bi in 0..bsz {
                    for t in 0..n {
                        let base = (bi * n + t) * gd;
                        for j in 0..gd {
                            dg[bi * gd + j] += g.data[base + j];
                        }
                    }
                }
                self.set_or_add(gid, dg);
            }
            Op::SliceLast { x, lo, hi } => {
                let (x, lo, hi) = (*x, *lo, *hi);
                let d = self.nodes[x].value.last_dim();
                let rows = self.nodes[x].value.leading();
                let w = hi - lo;
                let mut dx = vec![0.0; rows * d];
                for rix in 0..rows {
                    dx[rix * d + lo..rix * d + hi]
                        .copy_from_slice(&g.data[rix * w..(rix + 1) * w]);
                }
                self.set_or_add(x, dx);
            }
            Op::Sum { x } => {
                let x = *x;
                let dx = vec![g.data[0]; self.nodes[x].value.len()];
                self.set_or_add(x, dx);
            }
            Op::Mean { x } => {
                let x = *x;
                let len = self.nodes[x].value.len();
                let dx = vec![g.data[0] / len as f64; len];
                self.set_or_add(x, dx);
            }
            Op::SumTokens { x } => {
                let x = *x;
                let bsz = self.nodes[x].value.shape[0];
                let block = self.nodes[x].value.len() / bsz;
                let mut dx = uninit_vec(self.nodes[x].value.len());
                for bi in 0..bsz {
                    for j in 0..block {
                        dx[bi * block + j] = g.data[bi];
                    }
                }
                self.set_or_add(x, dx);
            }
            Op::MaskedMeanTokens { x, mask } => {
                let x = *x;
                let bsz = self.nodes[i].value.len();
                let n = mask.len() / bsz;
                let mut dx = vec![0.0; self.nodes[x].value.len()];
                for bi in 0..bsz {
                    let count = mask[bi * n..(bi + 1) * n].iter().filter(|m| **m).count();
                    for t in 0..n {
                        if mask[bi * n + t] {
                            dx[bi * n + t] = g.data[bi] / count as f64;
                        }
                    }
                }
                self.set_or_add(x, dx);
            }
            Op::EMin { a, b } => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a].value.data.clone();
                let bv = self.nodes[b].value.data.clone();
                let da: Vec<f64> = g
                    .data
                    .iter()
                    .zip(av.iter().zip(&bv))
                    .map(|(gv, (x, y))| if x <= y { *gv } else { 0.0 })
                    .collect();
                let db: Vec<f64> = g
                    .data
                    .iter()
                    .zip(av.iter().zip(&bv))
                    .map(|(gv, (x, y))| if x <= y { 0.0 } else { *gv })
                    .collect();
                self.set_or_add(a, da);
                self.set_or_add(b, db);
            }
            Op::EMax { a, b } => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a].value.data.clone();
                let bv = self.nodes[b].value.data.clone();
                let da: Vec<f64> = g
                    .data
                    .iter()
                    .zip(av.iter().zip(&bv))
                    .map(|(gv, (x, y))| if x >= y { *gv } else { 0.0 })
                    .collect();
                let db: Vec<f64> = g
                    .data
                    .iter()
                    .zip(av.iter().zip(&bv))
                    .map(|(gv, (x, y))| if x >= y { 0.0 } else { *gv })
                    .collect();
                self.set_or_add(a, da);
                self.set_or_add(b, db);
            }
            Op::Reshape { x } => {
                let x = *x;
                self.add_slice_to_grad(x, &g.data);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn linear_identity() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let eye = g.leaf(Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        ));
        let b = g.leaf(Tensor::zeros(&[3]));
        let y = g.matmul(x, eye);
        let y = g.add_bias(y, b);
        assert_eq!(g.value(y).data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_bias() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 4], vec![5.0; 4]));
        let gain = g.leaf(Tensor::new(vec![4], vec![1.0; 4]));
        let bias = g.leaf(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gain, bias);
        for v in &g.value(y).data {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let mut rng = stream(0, "drop", 0);
        let y = g.dropout(x, 0.1, false, &mut rng);
        assert_eq!(g.value(y).data, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn dropout_train_scales_survivors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0; 1000]));
        let mut rng = stream(1, "drop", 0);
        let y = g.dropout(x, 0.25, true, &mut rng);
        let kept: Vec<f64> = g.value(y).data.iter().cloned().filter(|v| *v != 0.0).collect();
        let frac = kept.len() as f64 / 1000.0;
        assert!((frac - 0.75).abs() < 0.05);
        for v in kept {
            assert!((v - 1.0 / 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_over_real_keys() {
        let mut g = Graph::new();
        let mut rng = stream(2, "sm", 0);
        let x = g.leaf(Tensor::gaussian(&[1, 4, 4], 1.0, &mut rng));
        let mask = vec![true, true, true, false];
        let p = g.masked_softmax(x, &mask);
        let pv = g.value(p);
        for r in 0..4 {
            let row = &pv.data[r * 4..(r + 1) * 4];
            assert_eq!(row[3], 0.0, "masked key weight");
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
        }
    }

    #[test]
    #[should_panic(expected = "every key masked")]
    fn masked_softmax_rejects_fully_masked_batch() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 2, 2]));
        g.masked_softmax(x, &[false, false]);
    }

    #[test]
    fn backward_of_linear_sum_is_input_outer() {
        // loss = sum(x W): dL/dW[i][j] = sum_r x[r][i]
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let w = g.leaf(Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]));
        let y = g.matmul(x, w);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        let dw = g.grad(w);
        assert_eq!(dw.data, vec![4.0, 4.0, 6.0, 6.0]);
        let dx = g.grad(x);
        // dL/dx = row sums of W
        assert!((dx.data[0] - 0.3).abs() < 1e-15);
        assert!((dx.data[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn unused_leaf_has_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let unused = g.leaf(Tensor::from_vec(vec![3.0]));
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(unused).data, vec![0.0]);
    }

    #[test]
    fn double_backward_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0]));
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(NnError::DoubleBackward)));
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(NnError::NonScalarLoss(_))));
    }
}
