//! Model configuration and the learnable parameter set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GeldError, Result};
use crate::numeric::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding width `h`.
    pub hidden: usize,
    pub heads: usize,
    pub decoder_layers: usize,
    /// Feed-forward expansion factor.
    pub ffn_mult: usize,
    /// Region grid rows `m_r` and columns `m_c`.
    pub region_rows: usize,
    pub region_cols: usize,
    /// Maximum candidate window `k_m`.
    pub k_max: usize,
}

impl ModelConfig {
    /// Full-size settings: h = 128, 8 heads, 6 decoder layers, 3×3 regions, k_m = 100.
    pub fn full() -> Self {
        Self { hidden: 128, heads: 8, decoder_layers: 6, ffn_mult: 4, region_rows: 3, region_cols: 3, k_max: 100 }
    }

    /// Small CPU-trainable settings.
    pub fn desk() -> Self {
        Self { hidden: 32, heads: 8, decoder_layers: 2, ffn_mult: 4, region_rows: 3, region_cols: 3, k_max: 20 }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn num_regions(&self) -> usize {
        self.region_rows * self.region_cols
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(GeldError::Argument(format!(
                "hidden width {} must be a positive multiple of the head count {}",
                self.hidden, self.heads
            )));
        }
        if self.decoder_layers == 0 || self.ffn_mult == 0 || self.k_max == 0 {
            return Err(GeldError::Argument("decoder layers, ffn multiplier and k_max must be positive".into()));
        }
        if self.region_rows == 0 || self.region_cols == 0 {
            return Err(GeldError::Argument("region grid must be at least 1×1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardParams<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub embed_w: Tensor<T>,
    pub embed_b: Tensor<T>,
    pub attn_norm: Tensor<T>,
    pub attn: AttentionParams<T>,
    pub ffn_norm: Tensor<T>,
    pub ffn: FeedForwardParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayerParams<T> {
    pub attn_norm: Tensor<T>,
    pub attn: AttentionParams<T>,
    /// Per-head distance penalty `λ`; the bias applied is `−softplus(λ)·A`.
    pub dist_scale: Tensor<T>,
    pub ffn_norm: Tensor<T>,
    pub ffn: FeedForwardParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T> {
    /// Added to the previous-node row before the first layer.
    pub role_prev: Tensor<T>,
    /// Added to the destination row before the first layer.
    pub role_dest: Tensor<T>,
    pub layers: Vec<DecoderLayerParams<T>>,
    /// Scoring projection, `h × 1`.
    pub w_out: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub config: ModelConfig,
    pub encoder: EncoderParams<T>,
    pub decoder: DecoderParams<T>,
}

struct Init {
    rng: Option<ChaCha8Rng>,
}

impl Init {
    /// Uniform in ±sqrt(1/fan_in).
    fn uniform<T: Scalar>(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
        let Some(rng) = self.rng.as_mut() else {
            return Tensor::zeros(shape);
        };
        let bound = (1.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
        Tensor::new(shape, data).expect("shape matches")
    }

    fn attention<T: Scalar>(&mut self, h: usize) -> AttentionParams<T> {
        AttentionParams {
            wq: self.uniform(vec![h, h], h),
            wk: self.uniform(vec![h, h], h),
            wv: self.uniform(vec![h, h], h),
            wo: self.uniform(vec![h, h], h),
        }
    }

    fn ffn<T: Scalar>(&mut self, h: usize, mult: usize) -> FeedForwardParams<T> {
        FeedForwardParams {
            w1: self.uniform(vec![h, h * mult], h),
            b1: self.uniform(vec![h * mult], h),
            w2: self.uniform(vec![h * mult, h], h * mult),
            b2: self.uniform(vec![h], h * mult),
        }
    }
}

fn ones<T: Scalar>(h: usize) -> Tensor<T> {
    Tensor::filled(vec![h], T::one())
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, Some(ChaCha8Rng::seed_from_u64(seed)))
    }

    /// Correct shapes, zero weights (gains still one); filled in by the caller.
    fn skeleton(config: ModelConfig) -> Result<Self> {
        Self::build(config, None)
    }

    fn build(config: ModelConfig, rng: Option<ChaCha8Rng>) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let mut init = Init { rng };
        let encoder = EncoderParams {
            embed_w: init.uniform(vec![2, h], 2),
            embed_b: init.uniform(vec![h], 2),
            attn_norm: ones(h),
            attn: init.attention(h),
            ffn_norm: ones(h),
            ffn: init.ffn(h, config.ffn_mult),
        };
        let layers = (0..config.decoder_layers)
            .map(|_| DecoderLayerParams {
                attn_norm: ones(h),
                attn: init.attention(h),
                dist_scale: Tensor::zeros(vec![config.heads]),
                ffn_norm: ones(h),
                ffn: init.ffn(h, config.ffn_mult),
            })
            .collect();
        let decoder = DecoderParams {
            role_prev: init.uniform(vec![h], h),
            role_dest: init.uniform(vec![h], h),
            layers,
            w_out: init.uniform(vec![h, 1], h),
        };
        Ok(Self { config, encoder, decoder })
    }

    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        let e = &self.encoder;
        out.push(("encoder.embed_w".to_string(), &e.embed_w));
        out.push(("encoder.embed_b".to_string(), &e.embed_b));
        push_block(&mut out, "encoder", &e.attn_norm, &e.attn, None, &e.ffn_norm, &e.ffn);
        let d = &self.decoder;
        out.push(("decoder.role_prev".to_string(), &d.role_prev));
        out.push(("decoder.role_dest".to_string(), &d.role_dest));
        for (i, l) in d.layers.iter().enumerate() {
            let p = format!("decoder.{i}");
            push_block(&mut out, &p, &l.attn_norm, &l.attn, Some(&l.dist_scale), &l.ffn_norm, &l.ffn);
        }
        out.push(("decoder.w_out".to_string(), &d.w_out));
        out
    }

    /// Mutable views in the same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        let e = &mut self.encoder;
        out.push(&mut e.embed_w);
        out.push(&mut e.embed_b);
        push_block_mut(&mut out, &mut e.attn_norm, &mut e.attn, None, &mut e.ffn_norm, &mut e.ffn);
        let d = &mut self.decoder;
        out.push(&mut d.role_prev);
        out.push(&mut d.role_dest);
        for l in &mut d.layers {
            push_block_mut(&mut out, &mut l.attn_norm, &mut l.attn, Some(&mut l.dist_scale), &mut l.ffn_norm, &mut l.ffn);
        }
        out.push(&mut d.w_out);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.named_tensors().into_iter().map(|(n, _)| n).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::skeleton(self.config.clone()).expect("config already validated");
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }

    /// Rebuilds a parameter set from flat tensors in
    /// [`named_tensors`](Self::named_tensors) order; shapes must match.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let mut out = Self::skeleton(config)?;
        let slots = out.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(GeldError::Shape(format!("expected {} tensors, got {}", slots.len(), tensors.len())));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(GeldError::Shape(format!("tensor shape {:?} vs expected {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

fn push_block<'a, T>(
    out: &mut Vec<(String, &'a Tensor<T>)>,
    prefix: &str,
    attn_norm: &'a Tensor<T>,
    attn: &'a AttentionParams<T>,
    dist_scale: Option<&'a Tensor<T>>,
    ffn_norm: &'a Tensor<T>,
    ffn: &'a FeedForwardParams<T>,
) {
    out.push((format!("{prefix}.attn_norm"), attn_norm));
    out.push((format!("{prefix}.wq"), &attn.wq));
    out.push((format!("{prefix}.wk"), &attn.wk));
    out.push((format!("{prefix}.wv"), &attn.wv));
    out.push((format!("{prefix}.wo"), &attn.wo));
    if let Some(d) = dist_scale {
        out.push((format!("{prefix}.dist_scale"), d));
    }
    out.push((format!("{prefix}.ffn_norm"), ffn_norm));
    out.push((format!("{prefix}.ffn_w1"), &ffn.w1));
    out.push((format!("{prefix}.ffn_b1"), &ffn.b1));
    out.push((format!("{prefix}.ffn_w2"), &ffn.w2));
    out.push((format!("{prefix}.ffn_b2"), &ffn.b2));
}

fn push_block_mut<'a, T>(
    out: &mut Vec<&'a mut Tensor<T>>,
    attn_norm: &'a mut Tensor<T>,
    attn: &'a mut AttentionParams<T>,
    dist_scale: Option<&'a mut Tensor<T>>,
    ffn_norm: &'a mut Tensor<T>,
    ffn: &'a mut FeedForwardParams<T>,
) {
    out.push(attn_norm);
    out.push(&mut attn.wq);
    out.push(&mut attn.wk);
    out.push(&mut attn.wv);
    out.push(&mut attn.wo);
    if let Some(d) = dist_scale {
        out.push(d);
    }
    out.push(ffn_norm);
    out.push(&mut ffn.w1);
    out.push(&mut ffn.b1);
    out.push(&mut ffn.w2);
    out.push(&mut ffn.b2);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_and_mut_views_line_up() {
        let mut p = ModelParams::<f64>::init(ModelConfig::desk(), 1).unwrap();
        let shapes: Vec<Vec<usize>> = p.tensors().iter().map(|t| t.shape().to_vec()).collect();
        let mut_shapes: Vec<Vec<usize>> = p.tensors_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, mut_shapes);
        let names = p.names();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert_eq!(names.len(), 2 + 10 + 2 + 2 * 11 + 1);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ModelParams::<f64>::init(ModelConfig::desk(), 7).unwrap();
        let b = ModelParams::<f64>::init(ModelConfig::desk(), 7).unwrap();
        let c = ModelParams::<f64>::init(ModelConfig::desk(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = (1.0f64 / 32.0).sqrt();
        assert!(a.decoder.layers[0].attn.wq.data().iter().all(|v| v.abs() <= bound));
        assert!(a.decoder.layers[1].dist_scale.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_head_split() {
        let cfg = ModelConfig { hidden: 30, ..ModelConfig::desk() };
        assert!(ModelParams::<f32>::init(cfg, 0).is_err());
    }

    #[test]
    fn cast_round_trip() {
        let a = ModelParams::<f64>::init(ModelConfig::desk(), 3).unwrap();
        let f: ModelParams<f32> = a.cast();
        let back: ModelParams<f64> = f.cast();
        assert_eq!(f, back.cast::<f32>());
    }
}

pub(crate) mod vars {
    use super::ModelParams;
    use crate::numeric::{Tape, Var};

    pub(crate) struct AttentionVars {
        pub wq: Var,
        pub wk: Var,
        pub wv: Var,
        pub wo: Var,
    }

    pub(crate) struct FeedForwardVars {
        pub w1: Var,
        pub b1: Var,
        pub w2: Var,
        pub b2: Var,
    }

    pub(crate) struct EncoderVars {
        pub embed_w: Var,
        pub embed_b: Var,
        pub attn_norm: Var,
        pub attn: AttentionVars,
        pub ffn_norm: Var,
        pub ffn: FeedForwardVars,
    }

    pub(crate) struct DecoderLayerVars {
        pub attn_norm: Var,
        pub attn: AttentionVars,
        pub dist_scale: Var,
        pub ffn_norm: Var,
        pub ffn: FeedForwardVars,
    }

    pub(crate) struct DecoderVars {
        pub role_prev: Var,
        pub role_dest: Var,
        pub layers: Vec<DecoderLayerVars>,
        pub w_out: Var,
    }

    /// Tape leaves for every parameter, plus the flat list in
    /// `ModelParams::named_tensors` order.
    pub(crate) struct ModelVars {
        pub encoder: EncoderVars,
        pub decoder: DecoderVars,
        pub all: Vec<Var>,
    }

    impl ModelVars {
        pub(crate) fn register<'p>(tape: &mut Tape<'p>, params: &'p ModelParams<f64>) -> Self {
            let all: Vec<Var> = params.tensors().into_iter().map(|t| tape.param(t)).collect();
            let mut it = all.iter().copied();
            let mut next = || it.next().expect("parameter count");
            let embed_w = next();
            let embed_b = next();
            let attn_norm = next();
            let attn = AttentionVars { wq: next(), wk: next(), wv: next(), wo: next() };
            let ffn_norm = next();
            let ffn = FeedForwardVars { w1: next(), b1: next(), w2: next(), b2: next() };
            let encoder = EncoderVars { embed_w, embed_b, attn_norm, attn, ffn_norm, ffn };
            let role_prev = next();
            let role_dest = next();
            let layers = (0..params.decoder.layers.len())
                .map(|_| {
                    let attn_norm = next();
                    let attn = AttentionVars { wq: next(), wk: next(), wv: next(), wo: next() };
                    let dist_scale = next();
                    let ffn_norm = next();
                    let ffn = FeedForwardVars { w1: next(), b1: next(), w2: next(), b2: next() };
                    DecoderLayerVars { attn_norm, attn, dist_scale, ffn_norm, ffn }
                })
                .collect();
            let w_out = next();
            let decoder = DecoderVars { role_prev, role_dest, layers, w_out };
            Self { encoder, decoder, all }
        }
    }
}
