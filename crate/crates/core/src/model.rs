//! Skeleton-sequence classifier: embedding, residual MHSA blocks, temporal
//! mean-pool and a linear head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::Tensor;
use crate::data::SkeletonSample;
use crate::error::{shape_err, Error, Result};
use crate::layers::{AttentionHead, DenseLinear, GradTape, Linear, LinearCache, LowRankLinear, MhsaBlock, MhsaCache};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub joints: usize,
    pub frames: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { joints: 8, frames: 16, d_model: 32, heads: 4, blocks: 2, classes: 8, seed: 1 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("joints", self.joints),
            ("frames", self.frames),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        3 * self.joints
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonModel {
    pub config: ModelConfig,
    pub embed: Linear,
    pub blocks: Vec<MhsaBlock>,
    pub head: Linear,
}

/// Which compressible family a linear layer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerGroup {
    Q,
    K,
    V,
    O,
    Embed,
    Head,
}

impl LayerGroup {
    pub const ALL: [LayerGroup; 6] =
        [LayerGroup::Q, LayerGroup::K, LayerGroup::V, LayerGroup::O, LayerGroup::Embed, LayerGroup::Head];

    pub fn name(self) -> &'static str {
        match self {
            LayerGroup::Q => "q",
            LayerGroup::K => "k",
            LayerGroup::V => "v",
            LayerGroup::O => "o",
            LayerGroup::Embed => "embed",
            LayerGroup::Head => "head",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Linear {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w = Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-a..a));
    Linear::Dense(DenseLinear { weight: w, bias: Some(vec![0.0; fan_out]) })
}

/// Weights drawn from `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`,
/// biases zero. Draw order: embed, each block (heads' q, k, v; then o), head.
pub fn build_model(cfg: &ModelConfig) -> Result<SkeletonModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.d_model;
    let dk = cfg.head_dim();
    let embed = glorot(&mut rng, cfg.input_dim(), d);
    let blocks = (0..cfg.blocks)
        .map(|_| {
            let heads = (0..cfg.heads)
                .map(|_| AttentionHead {
                    wq: glorot(&mut rng, d, dk),
                    wk: glorot(&mut rng, d, dk),
                    wv: glorot(&mut rng, d, dk),
                })
                .collect();
            MhsaBlock::new(heads, glorot(&mut rng, cfg.heads * dk, d))
        })
        .collect::<Result<Vec<_>>>()?;
    let head = glorot(&mut rng, d, cfg.classes);
    Ok(SkeletonModel { config: *cfg, embed, blocks, head })
}

pub struct SampleTape {
    embed: GradTape<LinearCache>,
    blocks: Vec<GradTape<MhsaCache>>,
    head: GradTape<LinearCache>,
    frames: usize,
}

/// Forward state for a whole batch.
pub struct ModelTape {
    samples: Option<Vec<SampleTape>>,
}

/// A named reference to one linear layer of the model.
pub struct LayerRef<'a> {
    pub name: String,
    pub group: LayerGroup,
    pub layer: &'a Linear,
}

impl SkeletonModel {
    fn check_sample(&self, s: &SkeletonSample) -> Result<()> {
        if s.frames != self.config.frames || s.joints != self.config.joints {
            return Err(shape_err(
                "model_forward",
                format!(
                    "sample is {}x{} (frames x joints), model expects {}x{}",
                    s.frames, s.joints, self.config.frames, self.config.joints
                ),
            ));
        }
        Ok(())
    }

    pub fn forward_sample(&self, s: &SkeletonSample) -> Result<Vec<f64>> {
        self.check_sample(s)?;
        let mut x = self.embed.forward(&s.to_matrix())?;
        for b in &self.blocks {
            x = x.add(&b.forward(&x)?)?;
        }
        Ok(self.head.forward(&mean_rows(&x))?.into_data())
    }

    /// Logits, one row per sample.
    pub fn forward(&self, batch: &[SkeletonSample]) -> Result<Matrix> {
        let rows = batch.par_iter().map(|s| self.forward_sample(s)).collect::<Result<Vec<_>>>()?;
        Ok(Matrix::from_raw(batch.len(), self.config.classes, rows.concat()))
    }

    fn forward_sample_taped(&self, s: &SkeletonSample) -> Result<(Vec<f64>, SampleTape)> {
        self.check_sample(s)?;
        let (mut x, embed) = self.embed.forward_taped(&s.to_matrix())?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, t) = b.forward_taped(&x)?;
            x = x.add(&y)?;
            blocks.push(t);
        }
        let (logits, head) = self.head.forward_taped(&mean_rows(&x))?;
        Ok((logits.into_data(), SampleTape { embed, blocks, head, frames: s.frames }))
    }

    pub fn forward_taped(&self, batch: &[SkeletonSample]) -> Result<(Matrix, ModelTape)> {
        let results = batch.par_iter().map(|s| self.forward_sample_taped(s)).collect::<Result<Vec<_>>>()?;
        let mut logits = Vec::with_capacity(batch.len() * self.config.classes);
        let mut samples = Vec::with_capacity(batch.len());
        for (l, t) in results {
            logits.extend(l);
            samples.push(t);
        }
        Ok((Matrix::from_raw(batch.len(), self.config.classes, logits), ModelTape { samples: Some(samples) }))
    }

    fn backward_sample(&self, tape: &mut SampleTape, grad_logits: &[f64]) -> Result<Vec<Matrix>> {
        let g = Matrix::from_raw(1, grad_logits.len(), grad_logits.to_vec());
        let head = self.head.backward(&mut tape.head, &g)?;
        let t = tape.frames;
        let pooled = head.input.scale(1.0 / t as f64);
        let mut grad_x = Matrix::vstack(&vec![pooled; t])?;
        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (b, bt) in self.blocks.iter().zip(tape.blocks.iter_mut()).rev() {
            let gb = b.backward(bt, &grad_x)?;
            grad_x.add_assign(&gb.input);
            block_grads.push(gb.params);
        }
        let embed = self.embed.backward(&mut tape.embed, &grad_x)?;
        let mut params = embed.params;
        for gb in block_grads.into_iter().rev() {
            params.extend(gb);
        }
        params.extend(head.params);
        Ok(params)
    }

    /// Parameter gradients summed over the batch, aligned with [`Self::params`].
    /// Samples are reduced in batch order.
    pub fn backward(&self, tape: &mut ModelTape, grad_logits: &Matrix) -> Result<Vec<Matrix>> {
        let samples = tape.samples.take().ok_or(Error::TapeReused)?;
        if samples.is_empty() || grad_logits.shape() != (samples.len(), self.config.classes) {
            return Err(shape_err("model_backward", format!("grad shape {:?}", grad_logits.shape())));
        }
        let per_sample = samples
            .into_par_iter()
            .enumerate()
            .map(|(i, mut st)| self.backward_sample(&mut st, grad_logits.row(i)))
            .collect::<Result<Vec<_>>>()?;
        let mut iter = per_sample.into_iter();
        let mut total = iter.next().expect("non-empty batch");
        for g in iter {
            for (acc, gi) in total.iter_mut().zip(&g) {
                acc.add_assign(gi);
            }
        }
        Ok(total)
    }

    /// Every linear layer with its canonical name, in parameter order.
    pub fn layers(&self) -> Vec<LayerRef<'_>> {
        let mut out = vec![LayerRef { name: "embed".into(), group: LayerGroup::Embed, layer: &self.embed }];
        for (bi, b) in self.blocks.iter().enumerate() {
            for (hi, h) in b.heads.iter().enumerate() {
                for (group, layer) in [(LayerGroup::Q, &h.wq), (LayerGroup::K, &h.wk), (LayerGroup::V, &h.wv)] {
                    out.push(LayerRef { name: format!("blocks.{bi}.heads.{hi}.{}", group.name()), group, layer });
                }
            }
            out.push(LayerRef { name: format!("blocks.{bi}.o"), group: LayerGroup::O, layer: &b.wo });
        }
        out.push(LayerRef { name: "head".into(), group: LayerGroup::Head, layer: &self.head });
        out
    }

    /// Mutable access to every linear layer in the same order as [`Self::layers`].
    pub fn layers_mut(&mut self) -> Vec<&mut Linear> {
        let mut out = vec![&mut self.embed];
        for b in &mut self.blocks {
            for h in &mut b.heads {
                out.extend(h.projections_mut());
            }
            out.push(&mut b.wo);
        }
        out.push(&mut self.head);
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers().into_iter().flat_map(|l| l.layer.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut().into_iter().flat_map(|l| l.params_mut()).collect()
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let c = &self.config;
        let config = vec![
            c.joints as f64,
            c.frames as f64,
            c.d_model as f64,
            c.heads as f64,
            c.blocks as f64,
            c.classes as f64,
            (c.seed >> 32) as f64,
            (c.seed & 0xFFFF_FFFF) as f64,
        ];
        let mut out = vec![Tensor::new("config", vec![config.len() as u32], config)];
        for l in self.layers() {
            let matrix = |suffix: &str, m: &Matrix| {
                Tensor::new(format!("{}.{suffix}", l.name), vec![m.rows() as u32, m.cols() as u32], m.data().to_vec())
            };
            match l.layer {
                Linear::Dense(d) => out.push(matrix("weight", &d.weight)),
                Linear::LowRank(lr) => {
                    out.push(matrix("w1", &lr.w1));
                    out.push(matrix("w2", &lr.w2));
                }
            }
            if let Some(b) = l.layer.bias() {
                out.push(Tensor::new(format!("{}.bias", l.name), vec![b.len() as u32], b.clone()));
            }
        }
        out
    }

    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self> {
        let corrupt = |msg: String| Error::Corrupt(msg);
        let find = |name: &str| tensors.iter().find(|t| t.name == name);
        let cfg_t = find("config").ok_or_else(|| corrupt("missing config tensor".into()))?;
        if cfg_t.data.len() != 8 || cfg_t.data.iter().any(|v| v.fract() != 0.0 || *v < 0.0 || *v > u32::MAX as f64) {
            return Err(corrupt("malformed config tensor".into()));
        }
        let v: Vec<u64> = cfg_t.data.iter().map(|&x| x as u64).collect();
        let config = ModelConfig {
            joints: v[0] as usize,
            frames: v[1] as usize,
            d_model: v[2] as usize,
            heads: v[3] as usize,
            blocks: v[4] as usize,
            classes: v[5] as usize,
            seed: (v[6] << 32) | v[7],
        };
        config.validate().map_err(|e| corrupt(format!("config: {e}")))?;

        let matrix = |t: &Tensor| -> Result<Matrix> {
            if t.dims.len() != 2 {
                return Err(corrupt(format!("{} is not a matrix", t.name)));
            }
            Matrix::new(t.dims[0] as usize, t.dims[1] as usize, t.data.clone())
                .map_err(|e| corrupt(format!("{}: {e}", t.name)))
        };
        let load = |name: &str| -> Result<Linear> {
            let bias = find(&format!("{name}.bias")).map(|t| t.data.clone());
            let layer = if let Some(w) = find(&format!("{name}.weight")) {
                DenseLinear::new(matrix(w)?, bias).map(Linear::Dense)
            } else {
                let w1 = find(&format!("{name}.w1")).ok_or_else(|| corrupt(format!("missing weights for {name}")))?;
                let w2 = find(&format!("{name}.w2")).ok_or_else(|| corrupt(format!("missing {name}.w2")))?;
                LowRankLinear::new(matrix(w1)?, matrix(w2)?, bias).map(Linear::LowRank)
            };
            layer.map_err(|e| corrupt(format!("{name}: {e}")))
        };

        let embed = load("embed")?;
        let blocks = (0..config.blocks)
            .map(|bi| {
                let heads = (0..config.heads)
                    .map(|hi| {
                        let p = format!("blocks.{bi}.heads.{hi}");
                        Ok(AttentionHead {
                            wq: load(&format!("{p}.q"))?,
                            wk: load(&format!("{p}.k"))?,
                            wv: load(&format!("{p}.v"))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                MhsaBlock::new(heads, load(&format!("blocks.{bi}.o"))?).map_err(|e| corrupt(format!("block {bi}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let head = load("head")?;
        let model = SkeletonModel { config, embed, blocks, head };
        model.check_shapes().map_err(|e| corrupt(e.to_string()))?;
        if model.to_tensors().len() != tensors.len() {
            return Err(corrupt("unexpected extra tensors".into()));
        }
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let ok = self.embed.in_dim() == c.input_dim()
            && self.embed.out_dim() == c.d_model
            && self.head.in_dim() == c.d_model
            && self.head.out_dim() == c.classes
            && self
                .blocks
                .iter()
                .all(|b| b.d_model() == c.d_model && b.wo.out_dim() == c.d_model && b.heads.len() == c.heads);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("layer shapes disagree with model config".into()))
        }
    }
}

fn mean_rows(x: &Matrix) -> Matrix {
    let mut out = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (o, v) in out.iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    let n = x.rows() as f64;
    Matrix::from_raw(1, x.cols(), out.into_iter().map(|v| v / n).collect())
}

pub fn save_model(path: impl AsRef<std::path::Path>, m: &SkeletonModel) -> Result<()> {
    crate::container::save_tensors(path, &m.to_tensors())
}

pub fn load_model(path: impl AsRef<std::path::Path>) -> Result<SkeletonModel> {
    SkeletonModel::from_tensors(&crate::container::load_tensors(path)?)
}

/// Mean cross-entropy over the batch and its gradient `(softmax - onehot) / B`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (b, classes) = logits.shape();
    if labels.len() != b {
        return Err(shape_err("cross_entropy", format!("{} labels for {b} rows", labels.len())));
    }
    if b == 0 {
        return Err(shape_err("cross_entropy", "empty batch"));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let mut grad = Matrix::zeros(b, classes);
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        for (c, g) in grad.row_mut(r).iter_mut().enumerate() {
            let p = (row[c] - log_z).exp();
            *g = (p - if c == label { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, grad))
}

pub fn count_params(m: &SkeletonModel) -> usize {
    m.layers().iter().map(|l| l.layer.param_count()).sum()
}

/// Forward FLOPs for one sequence of `frames` frames: linear maps at two
/// per multiply-accumulate, attention products and softmax per
/// [`MhsaBlock::flops`], head applied once to the pooled vector. Bias,
/// residual and pooling additions are not counted.
pub fn count_flops(m: &SkeletonModel, frames: usize) -> usize {
    m.embed.flops(frames) + m.blocks.iter().map(|b| b.flops(frames)).sum::<usize>() + m.head.flops(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetSpec};
    use crate::layers::attention_forward;
    use crate::linalg::{svd_default, truncate_to_factors};

    fn toy() -> ModelConfig {
        ModelConfig { joints: 8, frames: 16, d_model: 32, heads: 4, blocks: 2, classes: 8, seed: 3 }
    }

    fn samples(cfg: &ModelConfig, n: usize) -> Vec<SkeletonSample> {
        let spec = DatasetSpec {
            classes: cfg.classes,
            train_per_class: n,
            test_per_class: 1,
            frames: cfg.frames,
            joints: cfg.joints,
            noise_sigma: 0.1,
            seed: 5,
        };
        generate_dataset(&spec).unwrap().train
    }

    #[test]
    fn param_count_matches_closed_form() {
        // embed 24·32+32, per block 4 heads × 3 × (32·8+8) + (32·32+32), head 32·8+8
        let expected = (24 * 32 + 32) + 2 * (4 * 3 * (32 * 8 + 8) + (32 * 32 + 32)) + (32 * 8 + 8);
        assert_eq!(expected, 9_512);
        let m = build_model(&toy()).unwrap();
        assert_eq!(count_params(&m), expected);
        assert_eq!(m.params().iter().map(|p| p.len()).sum::<usize>(), expected);
    }

    #[test]
    fn flop_count_matches_closed_form() {
        let (t, d, dk, h, j, c) = (16, 32, 8, 4, 8, 8);
        let per_head = 3 * 2 * t * d * dk + 2 * t * t * dk + 2 * t * t * dk + 5 * t * t;
        let expected = 2 * t * 3 * j * d + 2 * (h * per_head + 2 * t * d * d) + 2 * d * c;
        let m = build_model(&toy()).unwrap();
        assert_eq!(count_flops(&m, t), expected);
    }

    #[test]
    fn build_is_deterministic_and_validated() {
        assert_eq!(build_model(&toy()).unwrap(), build_model(&toy()).unwrap());
        assert_ne!(build_model(&toy()).unwrap(), build_model(&ModelConfig { seed: 4, ..toy() }).unwrap());
        assert!(build_model(&ModelConfig { d_model: 30, ..toy() }).is_err());
        assert!(build_model(&ModelConfig { classes: 0, ..toy() }).is_err());
    }

    #[test]
    fn zero_blocks_still_classifies() {
        let cfg = ModelConfig { blocks: 0, ..toy() };
        let m = build_model(&cfg).unwrap();
        let logits = m.forward(&samples(&cfg, 1)).unwrap();
        assert_eq!(logits.shape(), (8, 8));
        assert_eq!(count_params(&m), (24 * 32 + 32) + (32 * 8 + 8));
    }

    #[test]
    fn zero_input_gives_uniform_logits() {
        let cfg = toy();
        let m = build_model(&cfg).unwrap();
        let zero = SkeletonSample::new(16, 8, vec![0.0; 16 * 24], 0).unwrap();
        let logits = m.forward_sample(&zero).unwrap();
        assert!(logits.iter().all(|&l| l == logits[0]));
    }

    #[test]
    fn batch_rows_match_single_calls() {
        let cfg = toy();
        let m = build_model(&cfg).unwrap();
        let s = samples(&cfg, 1);
        let batch = m.forward(&s[..2]).unwrap();
        assert_eq!(batch.row(0), m.forward_sample(&s[0]).unwrap().as_slice());
        assert_eq!(batch.row(1), m.forward_sample(&s[1]).unwrap().as_slice());
    }

    #[test]
    fn forward_matches_manual_composition() {
        let cfg = toy();
        let m = build_model(&cfg).unwrap();
        let s = &samples(&cfg, 1)[3];
        let mut x = m.embed.forward(&s.to_matrix()).unwrap();
        for b in &m.blocks {
            let heads: Vec<Matrix> = b
                .heads
                .iter()
                .map(|h| {
                    attention_forward(
                        &h.wq.forward(&x).unwrap(),
                        &h.wk.forward(&x).unwrap(),
                        &h.wv.forward(&x).unwrap(),
                    )
                    .unwrap()
                })
                .collect();
            let y = b.wo.forward(&Matrix::hstack(&heads).unwrap()).unwrap();
            x = x.add(&y).unwrap();
        }
        let pooled = Matrix::from_fn(1, 32, |_, c| (0..16).map(|r| x.get(r, c)).sum::<f64>() / 16.0);
        let expected = m.head.forward(&pooled).unwrap();
        let got = m.forward_sample(s).unwrap();
        assert!(got.iter().all(|v| v.is_finite()));
        for (a, b) in got.iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_mismatched_sample() {
        let m = build_model(&toy()).unwrap();
        let s = SkeletonSample::new(4, 8, vec![0.0; 4 * 24], 0).unwrap();
        assert!(matches!(m.forward(&[s]), Err(Error::Shape { .. })));
    }

    #[test]
    fn cross_entropy_examples() {
        let (loss, _) = cross_entropy(&Matrix::zeros(2, 5), &[0, 3]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);
        let sharp = Matrix::from_rows(&[&[1000.0, 0.0, 0.0]]).unwrap();
        let (loss, _) = cross_entropy(&sharp, &[0]).unwrap();
        assert!(loss.abs() < 1e-300);
        assert!(matches!(cross_entropy(&sharp, &[3]), Err(Error::LabelOutOfRange { label: 3, classes: 3 })));

        let logits = Matrix::from_fn(3, 4, |r, c| ((r * 4 + c) as f64 * 0.7).sin() * 2.0);
        let labels = [1, 0, 3];
        let (_, grad) = cross_entropy(&logits, &labels).unwrap();
        let h = 1e-5;
        for i in 0..12 {
            let mut p = logits.clone();
            p.data_mut()[i] += h;
            let mut m = logits.clone();
            m.data_mut()[i] -= h;
            let num = (cross_entropy(&p, &labels).unwrap().0 - cross_entropy(&m, &labels).unwrap().0) / (2.0 * h);
            let a = grad.data()[i];
            assert!((a - num).abs() / a.abs().max(num.abs()).max(1e-4) < 1e-6, "{a} vs {num}");
        }
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let cfg = ModelConfig { joints: 2, frames: 3, d_model: 4, heads: 2, blocks: 2, classes: 3, seed: 9 };
        let m = build_model(&cfg).unwrap();
        let batch = samples(&cfg, 1);
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let (logits, mut tape) = m.forward_taped(&batch).unwrap();
        let (_, g) = cross_entropy(&logits, &labels).unwrap();
        let grads = m.backward(&mut tape, &g).unwrap();
        assert!(matches!(m.backward(&mut tape, &g), Err(Error::TapeReused)));
        let loss = |m: &SkeletonModel| cross_entropy(&m.forward(&batch).unwrap(), &labels).unwrap().0;
        let h = 1e-5;
        let sizes: Vec<usize> = m.params().iter().map(|p| p.len()).collect();
        assert_eq!(sizes.len(), grads.len());
        for (s, &n) in sizes.iter().enumerate() {
            for i in 0..n {
                let mut plus = m.clone();
                plus.params_mut()[s][i] += h;
                let mut minus = m.clone();
                minus.params_mut()[s][i] -= h;
                let num = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let a = grads[s].data()[i];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-4);
                assert!(rel < 1e-4, "param {s}[{i}]: {a} vs {num}");
            }
        }
    }

    #[test]
    fn full_rank_compression_preserves_logits() {
        let cfg = toy();
        let m = build_model(&cfg).unwrap();
        let mut c = m.clone();
        for l in c.layers_mut() {
            let w = l.effective_weight();
            let k = w.rows().min(w.cols());
            let f = truncate_to_factors(&svd_default(&w).unwrap(), k).unwrap();
            *l = LowRankLinear::from_factors(f, l.bias().cloned()).unwrap().into();
        }
        let s = samples(&cfg, 2);
        let diff = m.forward(&s).unwrap().sub(&c.forward(&s).unwrap()).unwrap();
        assert!(diff.max_abs() < 1e-8);
    }

    #[test]
    fn weights_round_trip() {
        let m = build_model(&toy()).unwrap();
        let mut c = m.clone();
        let w = c.blocks[1].heads[2].wv.effective_weight();
        c.blocks[1].heads[2].wv =
            LowRankLinear::from_factors(truncate_to_factors(&svd_default(&w).unwrap(), 2).unwrap(), None)
                .unwrap()
                .into();
        for model in [m, c] {
            let tensors = model.to_tensors();
            let back = SkeletonModel::from_tensors(&tensors).unwrap();
            assert_eq!(back, model);
        }
        let mut t = build_model(&toy()).unwrap().to_tensors();
        t.retain(|t| t.name != "head.weight");
        assert!(matches!(SkeletonModel::from_tensors(&t), Err(Error::Corrupt(_))));
    }

    #[test]
    fn compression_break_even_is_exact() {
        for (cin, cout) in [(216usize, 216usize), (24, 32), (32, 8), (7, 3)] {
            let dense = cin * cout;
            for k in 1..=cin.min(cout) {
                let low = k * (cin + cout);
                // k < cin·cout/(cin+cout)  <=>  k·(cin+cout) < cin·cout
                assert_eq!(low < dense, (k as f64) < (cin * cout) as f64 / (cin + cout) as f64);
            }
        }
    }
}
