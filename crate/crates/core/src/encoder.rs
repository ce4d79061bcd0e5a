//! Global-view encoder: coordinate embedding followed by one multi-head
//! region-average linear attention (RALA) block and a feed-forward block.
//!
//! RALA replaces the `n × n` attention map with `m` regional proxies, the
//! mean query of the nodes in each cell of an `m_r × m_c` grid. Nodes attend
//! to proxies and proxies attend to nodes, so a layer costs `O(nmh)` time
//! and never materialises an `n × n` matrix.

use crate::error::{GeldError, Result};
use crate::model::vars::{AttentionVars, EncoderVars, FeedForwardVars};
use crate::model::{AttentionParams, FeedForwardParams, ModelParams};
use crate::numeric::{self, matmul, matmul_t, rms_norm, softmax_in_place, softmax_rows, Scalar, Tape, Tensor, Var};
use crate::tsp::{assign_regions, normalize_coords, Point, RegionAssignment, TspInstance};

/// Per-node embeddings of one (sub-)instance.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeEmbeddings<T> {
    pub emb: Tensor<T>,
    /// FNV-1a digest of the normalised coordinates that produced `emb`.
    pub source_hash: u64,
}

impl<T: Scalar> NodeEmbeddings<T> {
    pub fn len(&self) -> usize {
        self.emb.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.emb.rows() == 0
    }
}

pub(crate) fn coords_hash(coords: &[Point]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in coords {
        for v in p {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

pub(crate) fn coords_tensor<T: Scalar>(coords: &[Point]) -> Tensor<T> {
    let data = coords.iter().flat_map(|p| [T::of(p[0]), T::of(p[1])]).collect();
    Tensor::matrix(coords.len(), 2, data).expect("n×2")
}

/// `E = φ(x)·W + b`.
pub fn embed_nodes<T: Scalar>(norm_coords: &[Point], w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    numeric::linear_forward(&coords_tensor(norm_coords), w, b)
}

/// Mean query row per region; empty regions give the zero row.
pub fn region_proxies<T: Scalar>(q: &Tensor<T>, regions: &RegionAssignment) -> Result<Tensor<T>> {
    if q.rows() != regions.region_of.len() {
        return Err(GeldError::Shape(format!(
            "{} query rows for {} region ids",
            q.rows(),
            regions.region_of.len()
        )));
    }
    let d = q.cols();
    let m = regions.num_regions();
    let mut p = Tensor::zeros(vec![m, d]);
    for (i, &r) in regions.region_of.iter().enumerate() {
        for (acc, &v) in p.row_mut(r).iter_mut().zip(q.row(i)) {
            *acc = *acc + v;
        }
    }
    for (r, &c) in regions.counts.iter().enumerate() {
        if c > 0 {
            let inv = T::of(1.0 / c as f64);
            for v in p.row_mut(r) {
                *v = *v * inv;
            }
        }
    }
    Ok(p)
}

/// Single-head RALA: `softmax(Q·Pᵀ) · (softmax(P·Kᵀ) · V)`, evaluated right
/// to left so the largest intermediate is `m × n`.
pub fn rala_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    regions: &RegionAssignment,
) -> Result<Tensor<T>> {
    if k.rows() != q.rows() || v.rows() != q.rows() {
        return Err(GeldError::Shape("Q, K and V row counts differ".into()));
    }
    let p = region_proxies(q, regions)?;
    let q_w = softmax_rows(&matmul_t(q, &p)?)?;
    let k_w = softmax_rows(&matmul_t(&p, k)?)?;
    let kv = matmul(&k_w, v)?;
    matmul(&q_w, &kv)
}

/// Plain `softmax(Q·Kᵀ)·V`, computed one query row at a time. Quadratic in
/// `n`; kept as the scaling reference for RALA.
pub fn dense_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = (q.rows(), v.cols());
    if k.rows() != v.rows() || q.cols() != k.cols() {
        return Err(GeldError::Shape("dense attention operands".into()));
    }
    let mut out = Tensor::zeros(vec![n, d]);
    let mut logits = vec![T::zero(); k.rows()];
    for i in 0..n {
        let qi = q.row(i);
        for (j, l) in logits.iter_mut().enumerate() {
            *l = qi.iter().zip(k.row(j)).map(|(&a, &b)| a * b).sum();
        }
        softmax_in_place(&mut logits);
        let orow = out.row_mut(i);
        for (j, &w) in logits.iter().enumerate() {
            for (o, &x) in orow.iter_mut().zip(v.row(j)) {
                *o = *o + w * x;
            }
        }
    }
    Ok(out)
}

fn head_slice<T: Scalar>(x: &Tensor<T>, head: usize, dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(x.rows() * dim);
    for r in 0..x.rows() {
        data.extend_from_slice(&x.row(r)[head * dim..(head + 1) * dim]);
    }
    Tensor::matrix(x.rows(), dim, data).expect("slice shape")
}

fn write_head<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>, head: usize, dim: usize) {
    for r in 0..src.rows() {
        dst.row_mut(r)[head * dim..(head + 1) * dim].copy_from_slice(src.row(r));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    RegionAverage,
    Dense,
}

fn multi_head<T: Scalar>(
    x: &Tensor<T>,
    attn: &AttentionParams<T>,
    heads: usize,
    regions: &RegionAssignment,
    kind: AttentionKind,
) -> Result<Tensor<T>> {
    let q = matmul(x, &attn.wq)?;
    let k = matmul(x, &attn.wk)?;
    let v = matmul(x, &attn.wv)?;
    let dim = x.cols() / heads;
    let mut cat = Tensor::zeros(vec![x.rows(), x.cols()]);
    for head in 0..heads {
        let (qh, kh, vh) = (head_slice(&q, head, dim), head_slice(&k, head, dim), head_slice(&v, head, dim));
        let o = match kind {
            AttentionKind::RegionAverage => rala_attention(&qh, &kh, &vh, regions)?,
            AttentionKind::Dense => dense_attention(&qh, &kh, &vh)?,
        };
        write_head(&mut cat, &o, head, dim);
    }
    matmul(&cat, &attn.wo)
}

pub(crate) fn feed_forward<T: Scalar>(x: &Tensor<T>, ffn: &FeedForwardParams<T>) -> Result<Tensor<T>> {
    let mut hidden = numeric::linear_forward(x, &ffn.w1, &ffn.b1)?;
    numeric::relu_in_place(&mut hidden);
    numeric::linear_forward(&hidden, &ffn.w2, &ffn.b2)
}

pub(crate) fn add_assign<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>) {
    for (a, &b) in dst.data_mut().iter_mut().zip(src.data()) {
        *a = *a + b;
    }
}

/// Encoder forward on coordinates that are already normalised.
pub fn encode_normalized<T: Scalar>(norm_coords: &[Point], params: &ModelParams<T>) -> Result<NodeEmbeddings<T>> {
    encode_with(norm_coords, params, AttentionKind::RegionAverage)
}

/// Encoder forward with the attention kind selectable; `Dense` is the
/// quadratic reference used for scaling comparisons.
pub fn encode_with<T: Scalar>(
    norm_coords: &[Point],
    params: &ModelParams<T>,
    kind: AttentionKind,
) -> Result<NodeEmbeddings<T>> {
    let cfg = &params.config;
    let enc = &params.encoder;
    let regions = assign_regions(norm_coords, cfg.region_rows, cfg.region_cols)?;
    let mut e = embed_nodes(norm_coords, &enc.embed_w, &enc.embed_b)?;
    let a = multi_head(&rms_norm(&e, &enc.attn_norm), &enc.attn, cfg.heads, &regions, kind)?;
    add_assign(&mut e, &a);
    let f = feed_forward(&rms_norm(&e, &enc.ffn_norm), &enc.ffn)?;
    add_assign(&mut e, &f);
    if !e.is_finite() {
        return Err(GeldError::NonFinite("encoder output".into()));
    }
    Ok(NodeEmbeddings { emb: e, source_hash: coords_hash(norm_coords) })
}

/// Normalise, embed and run the encoder block.
pub fn encode<T: Scalar>(inst: &TspInstance, params: &ModelParams<T>) -> Result<NodeEmbeddings<T>> {
    if inst.len() < 4 {
        return Err(GeldError::Precondition(format!("encoder needs n ≥ 4, got {}", inst.len())));
    }
    let norm = normalize_coords(inst.coords())?;
    encode_normalized(&norm, params)
}

pub(crate) fn multi_head_rala_on_tape(
    tape: &mut Tape<'_>,
    x: Var,
    attn: &AttentionVars,
    heads: usize,
    regions: &RegionAssignment,
) -> Result<Var> {
    let q = tape.matmul(x, attn.wq)?;
    let k = tape.matmul(x, attn.wk)?;
    let v = tape.matmul(x, attn.wv)?;
    let dim = tape.value(x).cols() / heads;
    let m = regions.num_regions();
    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = tape.slice_cols(q, head * dim, dim)?;
        let kh = tape.slice_cols(k, head * dim, dim)?;
        let vh = tape.slice_cols(v, head * dim, dim)?;
        let p = tape.group_mean(qh, &regions.region_of, m)?;
        let qp = tape.matmul_t(qh, p)?;
        let q_w = tape.softmax_rows(qp)?;
        let pk = tape.matmul_t(p, kh)?;
        let k_w = tape.softmax_rows(pk)?;
        let kv = tape.matmul(k_w, vh)?;
        outs.push(tape.matmul(q_w, kv)?);
    }
    let cat = tape.concat_cols(&outs)?;
    tape.matmul(cat, attn.wo)
}

pub(crate) fn feed_forward_on_tape(tape: &mut Tape<'_>, x: Var, ffn: &FeedForwardVars) -> Result<Var> {
    let h = tape.linear(x, ffn.w1, ffn.b1)?;
    let h = tape.relu(h);
    tape.linear(h, ffn.w2, ffn.b2)
}

/// Differentiable twin of [`encode_normalized`].
pub(crate) fn encode_on_tape(
    tape: &mut Tape<'_>,
    vars: &EncoderVars,
    norm_coords: &[Point],
    heads: usize,
    regions: &RegionAssignment,
) -> Result<Var> {
    let x = tape.constant(coords_tensor(norm_coords));
    let e = tape.linear(x, vars.embed_w, vars.embed_b)?;
    let a_in = tape.rms_norm(e, vars.attn_norm);
    let a = multi_head_rala_on_tape(tape, a_in, &vars.attn, heads, regions)?;
    let e = tape.add(e, a)?;
    let f_in = tape.rms_norm(e, vars.ffn_norm);
    let f = feed_forward_on_tape(tape, f_in, &vars.ffn)?;
    tape.add(e, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::model::vars::ModelVars;
    use crate::tsp::MetricMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rand_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
        (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect()
    }

    #[test]
    fn embed_degenerate_and_identity() {
        let pts = vec![[0.1, 0.2], [0.9, 0.4], [0.0, 1.0]];
        let w = Tensor::<f64>::zeros(vec![2, 4]);
        let b = Tensor::vector(vec![0.5, -1.0, 2.0, 0.0]);
        let e = embed_nodes(&pts, &w, &b).unwrap();
        for r in 0..3 {
            assert_eq!(e.row(r), b.data());
        }
        let mut w = Tensor::<f64>::zeros(vec![2, 4]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[5] = 1.0;
        let e = embed_nodes(&pts, &w, &Tensor::zeros(vec![4])).unwrap();
        for (r, p) in pts.iter().enumerate() {
            assert_eq!(&e.row(r)[..2], p);
        }
    }

    #[test]
    fn single_region_rows_are_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 16;
        let pts = rand_points(n, &mut rng);
        let regions = assign_regions(&pts, 1, 1).unwrap();
        let (q, k, v) = (rand_mat(n, 4, &mut rng), rand_mat(n, 4, &mut rng), rand_mat(n, 4, &mut rng));
        let out = rala_attention(&q, &k, &v, &regions).unwrap();
        for r in 1..n {
            assert_eq!(out.row(r), out.row(0));
        }
    }

    #[test]
    fn one_node_per_region_proxies_are_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = vec![[0.1, 0.1], [0.9, 0.1], [0.1, 0.9], [0.5, 0.5]];
        let regions = assign_regions(&pts, 3, 3).unwrap();
        let q = rand_mat(4, 3, &mut rng);
        let p = region_proxies(&q, &regions).unwrap();
        for (i, &r) in regions.region_of.iter().enumerate() {
            assert_eq!(p.row(r), q.row(i));
        }
        assert!(p.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn region_mismatch_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let regions = assign_regions(&rand_points(5, &mut rng), 2, 2).unwrap();
        let q = rand_mat(4, 2, &mut rng);
        assert!(matches!(rala_attention(&q, &q, &q, &regions), Err(GeldError::Shape(_))));
    }

    #[test]
    fn encode_is_deterministic_and_normalisation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = ModelParams::<f64>::init(ModelConfig::desk(), 5).unwrap();
        let pts = rand_points(30, &mut rng);
        let inst = TspInstance::new("a", pts.clone(), MetricMode::ContinuousEuclid).unwrap();
        let a = encode(&inst, &params).unwrap();
        let b = encode(&inst, &params).unwrap();
        assert_eq!(a, b);
        // scale by a power of two keeps normalisation exact
        let moved: Vec<Point> = pts.iter().map(|p| [p[0] * 8.0 + 3.0, p[1] * 8.0 - 5.0]).collect();
        let inst2 = TspInstance::new("b", moved, MetricMode::ContinuousEuclid).unwrap();
        let c = encode(&inst2, &params).unwrap();
        assert!(a.emb.max_abs_diff(&c.emb) < 1e-12);
    }

    #[test]
    fn tape_encoder_matches_inference_encoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = ModelParams::<f64>::init(ModelConfig::desk(), 9).unwrap();
        let pts = normalize_coords(&rand_points(25, &mut rng)).unwrap();
        let fast = encode_normalized(&pts, &params).unwrap();
        let mut tape = Tape::new();
        let vars = ModelVars::register(&mut tape, &params);
        let regions = assign_regions(&pts, 3, 3).unwrap();
        let e = encode_on_tape(&mut tape, &vars.encoder, &pts, params.config.heads, &regions).unwrap();
        assert!(tape.value(e).max_abs_diff(&fast.emb) < 1e-12);
    }

    #[test]
    fn dense_reference_differs_but_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = ModelParams::<f32>::init(ModelConfig::desk(), 1).unwrap();
        let pts = normalize_coords(&rand_points(40, &mut rng)).unwrap();
        let dense = encode_with(&pts, &params, AttentionKind::Dense).unwrap();
        assert!(dense.emb.is_finite());
    }
}
