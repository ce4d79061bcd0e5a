//! Local-view decoder: at each construction step the previous node, its k
//! nearest unvisited neighbours and the destination node are refined by a
//! stack of distance-aware self-attention layers, then the candidates are
//! scored.
//!
//! Attention logits per head are `Q_h·K_hᵀ/√d_h − softplus(λ_h)·A`, where
//! `A` holds the pairwise distances of the step's nodes in normalised
//! coordinates and `λ_h` is learnt.

use crate::encoder::{add_assign, feed_forward, feed_forward_on_tape, NodeEmbeddings};
use crate::error::{GeldError, Result};
use crate::model::vars::{DecoderLayerVars, DecoderVars};
use crate::model::{DecoderLayerParams, DecoderParams};
use crate::numeric::{matmul, rms_norm, softmax_in_place, softplus, Scalar, Tape, Tensor, Var};
use crate::tsp::{distance_matrix, Point};

/// Decoder input for one construction step. Row 0 is the previous node,
/// rows `1..=k` the candidates and row `k+1` the destination.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStep<T> {
    pub prev: usize,
    pub dest: usize,
    pub candidates: Vec<usize>,
    pub input: Tensor<T>,
    pub dist: Tensor<T>,
}

impl<T: Scalar> DecoderStep<T> {
    pub fn k(&self) -> usize {
        self.candidates.len()
    }
}

pub(crate) fn step_rows(prev: usize, dest: usize, candidates: &[usize]) -> Vec<usize> {
    let mut rows = Vec::with_capacity(candidates.len() + 2);
    rows.push(prev);
    rows.extend_from_slice(candidates);
    rows.push(dest);
    rows
}

pub fn build_decoder_input<T: Scalar>(
    emb: &NodeEmbeddings<T>,
    prev: usize,
    dest: usize,
    candidates: &[usize],
    norm_coords: &[Point],
) -> Result<DecoderStep<T>> {
    if candidates.is_empty() {
        return Err(GeldError::Exhausted);
    }
    let rows = step_rows(prev, dest, candidates);
    let h = emb.emb.cols();
    let mut data = Vec::with_capacity(rows.len() * h);
    for &r in &rows {
        if r >= emb.len() {
            return Err(GeldError::Index { index: r, len: emb.len() });
        }
        data.extend_from_slice(emb.emb.row(r));
    }
    Ok(DecoderStep {
        prev,
        dest,
        candidates: candidates.to_vec(),
        input: Tensor::matrix(rows.len(), h, data)?,
        dist: distance_matrix(norm_coords, &rows)?.cast(),
    })
}

/// One pre-norm attention + feed-forward layer with the distance bias.
pub fn decoder_layer<T: Scalar>(
    d: &Tensor<T>,
    dist: &Tensor<T>,
    layer: &DecoderLayerParams<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    let rows = d.rows();
    if dist.rows() != rows || dist.cols() != rows {
        return Err(GeldError::Shape(format!("distance matrix {:?} for {rows} rows", dist.shape())));
    }
    let x = rms_norm(d, &layer.attn_norm);
    let q = matmul(&x, &layer.attn.wq)?;
    let k = matmul(&x, &layer.attn.wk)?;
    let v = matmul(&x, &layer.attn.wv)?;
    let h = d.cols();
    let dim = h / heads;
    let scale = T::of(1.0 / (dim as f64).sqrt());
    let mut cat = Tensor::zeros(vec![rows, h]);
    let mut logits = vec![T::zero(); rows];
    for head in 0..heads {
        let pen = softplus(layer.dist_scale.data()[head]);
        let cols = head * dim..(head + 1) * dim;
        for i in 0..rows {
            let qi = &q.row(i)[cols.clone()];
            for (j, l) in logits.iter_mut().enumerate() {
                let mut s = T::zero();
                for (&a, &b) in qi.iter().zip(&k.row(j)[cols.clone()]) {
                    s = s + a * b;
                }
                *l = s * scale - pen * dist.get(i, j);
            }
            softmax_in_place(&mut logits);
            let mut acc = vec![T::zero(); dim];
            for (j, &w) in logits.iter().enumerate() {
                for (o, &vv) in acc.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o = *o + w * vv;
                }
            }
            cat.row_mut(i)[cols.clone()].copy_from_slice(&acc);
        }
    }
    let mut out = d.clone();
    add_assign(&mut out, &matmul(&cat, &layer.attn.wo)?);
    let f = feed_forward(&rms_norm(&out, &layer.ffn_norm), &layer.ffn)?;
    add_assign(&mut out, &f);
    Ok(out)
}

/// Role vectors, all layers and the scoring projection: one logit per row.
pub fn decoder_logits<T: Scalar>(step: &DecoderStep<T>, params: &DecoderParams<T>, heads: usize) -> Result<Vec<T>> {
    let mut d = step.input.clone();
    let last = d.rows() - 1;
    for (a, &b) in d.row_mut(0).iter_mut().zip(params.role_prev.data()) {
        *a = *a + b;
    }
    for (a, &b) in d.row_mut(last).iter_mut().zip(params.role_dest.data()) {
        *a = *a + b;
    }
    for layer in &params.layers {
        d = decoder_layer(&d, &step.dist, layer, heads)?;
    }
    Ok(matmul(&d, &params.w_out)?.into_data())
}

/// Probability of each candidate, in candidate order. The previous and
/// destination rows are masked with `-inf` before the softmax.
pub fn next_node_distribution<T: Scalar>(
    step: &DecoderStep<T>,
    params: &DecoderParams<T>,
    heads: usize,
) -> Result<Vec<T>> {
    let mut logits = decoder_logits(step, params, heads)?;
    let last = logits.len() - 1;
    logits[0] = T::neg_infinity();
    logits[last] = T::neg_infinity();
    if !softmax_in_place(&mut logits) {
        return Err(GeldError::FullyMasked { row: 0 });
    }
    if logits.iter().any(|p| !p.is_finite()) {
        return Err(GeldError::NonFinite("next-node distribution".into()));
    }
    Ok(logits[1..=last - 1].to_vec())
}

/// Differentiable twin of [`decoder_logits`]; `emb` is the encoder output
/// on the same tape and `rows` the step's node indices.
pub(crate) fn decoder_logits_on_tape(
    tape: &mut Tape<'_>,
    vars: &DecoderVars,
    emb: Var,
    rows: &[usize],
    dist: Tensor<f64>,
    heads: usize,
) -> Result<Var> {
    let d = tape.gather_rows(emb, rows)?;
    let d = tape.add_to_row(d, 0, vars.role_prev)?;
    let mut d = tape.add_to_row(d, rows.len() - 1, vars.role_dest)?;
    for layer in &vars.layers {
        d = decoder_layer_on_tape(tape, d, &dist, layer, heads)?;
    }
    tape.matmul(d, vars.w_out)
}

fn decoder_layer_on_tape(
    tape: &mut Tape<'_>,
    d: Var,
    dist: &Tensor<f64>,
    layer: &DecoderLayerVars,
    heads: usize,
) -> Result<Var> {
    let x = tape.rms_norm(d, layer.attn_norm);
    let q = tape.matmul(x, layer.attn.wq)?;
    let k = tape.matmul(x, layer.attn.wk)?;
    let v = tape.matmul(x, layer.attn.wv)?;
    let h = tape.value(d).cols();
    let dim = h / heads;
    let scale = 1.0 / (dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = tape.slice_cols(q, head * dim, dim)?;
        let kh = tape.slice_cols(k, head * dim, dim)?;
        let vh = tape.slice_cols(v, head * dim, dim)?;
        let logits = tape.matmul_t(qh, kh)?;
        let logits = tape.scale(logits, scale);
        let logits = tape.distance_bias(logits, layer.dist_scale, head, dist.clone())?;
        let w = tape.softmax_rows(logits)?;
        outs.push(tape.matmul(w, vh)?);
    }
    let cat = tape.concat_cols(&outs)?;
    let a = tape.matmul(cat, layer.attn.wo)?;
    let d = tape.add(d, a)?;
    let f_in = tape.rms_norm(d, layer.ffn_norm);
    let f = feed_forward_on_tape(tape, f_in, &layer.ffn)?;
    tape.add(d, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::encode_normalized;
    use crate::model::vars::ModelVars;
    use crate::model::{ModelConfig, ModelParams};
    use crate::numeric::{matmul_t, softmax_rows};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize, seed: u64) -> (Vec<Point>, ModelParams<f64>, NodeEmbeddings<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Point> = (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
        let pts = crate::tsp::normalize_coords(&pts).unwrap();
        let cfg = ModelConfig { decoder_layers: 3, ..ModelConfig::desk() };
        let params = ModelParams::<f64>::init(cfg, seed).unwrap();
        let emb = encode_normalized(&pts, &params).unwrap();
        (pts, params, emb)
    }

    #[test]
    fn input_placement() {
        let (pts, _, emb) = setup(12, 1);
        let s = build_decoder_input(&emb, 3, 7, &[5], &pts).unwrap();
        assert_eq!(s.input.shape(), &[3, 32]);
        assert_eq!(s.input.row(1), emb.emb.row(5));
        let s = build_decoder_input(&emb, 3, 7, &[0, 1, 2, 4, 5], &pts).unwrap();
        assert_eq!(s.input.row(0), emb.emb.row(3));
        assert_eq!(s.input.row(6), emb.emb.row(7));
        let oracle = distance_matrix(&pts, &[3, 0, 1, 2, 4, 5, 7]).unwrap();
        assert_eq!(s.dist, oracle);
        assert!(matches!(build_decoder_input(&emb, 3, 7, &[], &pts), Err(GeldError::Exhausted)));
    }

    #[test]
    fn bias_off_reduces_to_plain_attention() {
        let (pts, params, emb) = setup(10, 2);
        let step = build_decoder_input(&emb, 0, 1, &[2, 3, 4, 5], &pts).unwrap();
        let mut layer = params.decoder.layers[0].clone();
        layer.dist_scale = Tensor::filled(vec![8], -800.0);
        let with_dist = decoder_layer(&step.input, &step.dist, &layer, 8).unwrap();
        let zero = Tensor::zeros(vec![6, 6]);
        let without = decoder_layer(&step.input, &zero, &layer, 8).unwrap();
        assert!(with_dist.max_abs_diff(&without) < 1e-12);
    }

    #[test]
    fn identical_rows_split_attention_evenly() {
        let (_, params, _) = setup(10, 3);
        let row: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let d = Tensor::from_rows(&[row.clone(), row]).unwrap();
        let layer = &params.decoder.layers[0];
        let x = rms_norm(&d, &layer.attn_norm);
        let q = matmul(&x, &layer.attn.wq).unwrap();
        let k = matmul(&x, &layer.attn.wk).unwrap();
        let w = softmax_rows(&matmul_t(&q, &k).unwrap()).unwrap();
        assert_eq!(w.data(), &[0.5; 4]);
        // and the layer keeps the two rows equal
        let out = decoder_layer(&d, &Tensor::zeros(vec![2, 2]), layer, 8).unwrap();
        assert_eq!(out.row(0), out.row(1));
    }

    /// Dense loop evaluation of one layer, written without the kernel helpers.
    fn oracle_layer(d: &Tensor<f64>, dist: &Tensor<f64>, p: &DecoderLayerParams<f64>, heads: usize) -> Tensor<f64> {
        let (r, h) = (d.rows(), d.cols());
        let dim = h / heads;
        let norm = |x: &Tensor<f64>, g: &Tensor<f64>| {
            let mut out = vec![0.0; r * h];
            for i in 0..r {
                let ms: f64 = (0..h).map(|j| x.get(i, j).powi(2)).sum::<f64>() / h as f64;
                for j in 0..h {
                    out[i * h + j] = x.get(i, j) / (ms + 1e-6).sqrt() * g.data()[j];
                }
            }
            out
        };
        let proj = |x: &[f64], w: &Tensor<f64>| {
            let c = w.cols();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] = (0..w.rows()).map(|t| x[i * w.rows() + t] * w.get(t, j)).sum();
                }
            }
            out
        };
        let x = norm(d, &p.attn_norm);
        let (q, k, v) = (proj(&x, &p.attn.wq), proj(&x, &p.attn.wk), proj(&x, &p.attn.wv));
        let mut cat = vec![0.0; r * h];
        for hd in 0..heads {
            let lam = p.dist_scale.data()[hd];
            let pen = (1.0 + lam.exp()).ln();
            for i in 0..r {
                let logits: Vec<f64> = (0..r)
                    .map(|j| {
                        let s: f64 = (0..dim).map(|t| q[i * h + hd * dim + t] * k[j * h + hd * dim + t]).sum();
                        s / (dim as f64).sqrt() - pen * dist.get(i, j)
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                for t in 0..dim {
                    cat[i * h + hd * dim + t] =
                        (0..r).map(|j| (logits[j] - mx).exp() / z * v[j * h + hd * dim + t]).sum();
                }
            }
        }
        let o = proj(&cat, &p.attn.wo);
        let mid: Vec<f64> = d.data().iter().zip(&o).map(|(a, b)| a + b).collect();
        let mid_t = Tensor::matrix(r, h, mid.clone()).unwrap();
        let f_in = norm(&mid_t, &p.ffn_norm);
        let hid: Vec<f64> = proj(&f_in, &p.ffn.w1)
            .chunks(p.ffn.w1.cols())
            .flat_map(|row| row.iter().zip(p.ffn.b1.data()).map(|(a, b)| (a + b).max(0.0)).collect::<Vec<_>>())
            .collect();
        let hid_r = hid.len() / r;
        let mut out = mid;
        for i in 0..r {
            for j in 0..h {
                let s: f64 = (0..hid_r).map(|t| hid[i * hid_r + t] * p.ffn.w2.get(t, j)).sum();
                out[i * h + j] += s + p.ffn.b2.data()[j];
            }
        }
        Tensor::matrix(r, h, out).unwrap()
    }

    #[test]
    fn layer_matches_loop_oracle() {
        let (pts, mut params, emb) = setup(12, 4);
        params.decoder.layers[1].dist_scale = Tensor::vector(vec![0.3, -0.2, 1.0, 0.0, 2.0, -1.0, 0.5, 0.1]);
        let step = build_decoder_input(&emb, 2, 9, &[0, 1, 3, 4, 5, 6], &pts).unwrap();
        let layer = &params.decoder.layers[1];
        let got = decoder_layer(&step.input, &step.dist, layer, 8).unwrap();
        let expect = oracle_layer(&step.input, &step.dist, layer, 8);
        assert!(got.max_abs_diff(&expect) < 1e-10);
    }

    #[test]
    fn distribution_properties() {
        let (pts, params, emb) = setup(15, 5);
        let step = build_decoder_input(&emb, 0, 1, &[4], &pts).unwrap();
        assert_eq!(next_node_distribution(&step, &params.decoder, 8).unwrap(), vec![1.0]);
        let step = build_decoder_input(&emb, 0, 1, &[2, 3, 5, 8, 13], &pts).unwrap();
        let p = next_node_distribution(&step, &params.decoder, 8).unwrap();
        assert_eq!(p.len(), 5);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let again = next_node_distribution(&step, &params.decoder, 8).unwrap();
        assert_eq!(p, again);
        // argmax against an explicit mask vector over all k+2 logits
        let logits = decoder_logits(&step, &params.decoder, 8).unwrap();
        let mask = [f64::NEG_INFINITY, 1.0, 1.0, 1.0, 1.0, 1.0, f64::NEG_INFINITY];
        let masked: Vec<f64> = logits.iter().zip(mask).map(|(l, m)| if m < 0.0 { m } else { *l }).collect();
        let best = (0..7).max_by(|&a, &b| masked[a].partial_cmp(&masked[b]).unwrap()).unwrap();
        let best_p = (0..5).max_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap()).unwrap();
        assert_eq!(best, best_p + 1);
    }

    #[test]
    fn identical_candidates_get_equal_mass() {
        let (mut pts, params, _) = setup(10, 6);
        pts[4] = pts[3];
        let emb = encode_normalized(&pts, &params).unwrap();
        let step = build_decoder_input(&emb, 0, 1, &[3, 4], &pts).unwrap();
        let p = next_node_distribution(&step, &params.decoder, 8).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn candidate_permutation_equivariance() {
        let (pts, params, emb) = setup(14, 7);
        let cands = [2, 5, 6, 9, 11];
        let perm = [9, 2, 11, 6, 5];
        let a = next_node_distribution(&build_decoder_input(&emb, 0, 1, &cands, &pts).unwrap(), &params.decoder, 8)
            .unwrap();
        let b = next_node_distribution(&build_decoder_input(&emb, 0, 1, &perm, &pts).unwrap(), &params.decoder, 8)
            .unwrap();
        for (i, c) in perm.iter().enumerate() {
            let j = cands.iter().position(|x| x == c).unwrap();
            assert!((b[i] - a[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_logits_match_inference() {
        let (pts, params, emb) = setup(11, 8);
        let rows = step_rows(4, 0, &[1, 2, 3, 7]);
        let step = build_decoder_input(&emb, 4, 0, &[1, 2, 3, 7], &pts).unwrap();
        let fast = decoder_logits(&step, &params.decoder, 8).unwrap();
        let mut tape = Tape::new();
        let vars = ModelVars::register(&mut tape, &params);
        let regions = crate::tsp::assign_regions(&pts, 3, 3).unwrap();
        let e = crate::encoder::encode_on_tape(&mut tape, &vars.encoder, &pts, 8, &regions).unwrap();
        let l = decoder_logits_on_tape(&mut tape, &vars.decoder, e, &rows, step.dist.clone(), 8).unwrap();
        for (a, b) in tape.value(l).data().iter().zip(&fast) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
