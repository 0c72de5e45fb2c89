//! Toy DETR-style detector: strided conv stem, sine positional encoding,
//! post-norm transformer encoder/decoder with learned object queries, and
//! three MLP heads (class logit, box, projection).

mod params;

use std::f64::consts::PI;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use params::{BoundParams, ParamStore};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::image::ImageTensor;
use crate::numcore::{Scalar, Tape, Tensor, Var, GATHER_ZERO};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub stem_stride: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub queries: usize,
    pub proj_dim: usize,
    pub ffn_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            stem_stride: 8,
            d_model: 32,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            queries: 16,
            proj_dim: 32,
            ffn_hidden: 64,
        }
    }
}

impl ModelConfig {
    /// The configuration used for end-to-end gradient checks.
    pub fn gradcheck() -> Self {
        Self {
            image_size: 32,
            d_model: 16,
            heads: 4,
            enc_layers: 1,
            dec_layers: 1,
            queries: 4,
            proj_dim: 8,
            ffn_hidden: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_stride != 8 {
            return Err(Error::Config("stem_stride must be 8".into()));
        }
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return Err(Error::Config("image_size must be a positive multiple of 8".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 || self.d_model % 4 != 0 {
            return Err(Error::Config(
                "d_model must be divisible by heads and by 4".into(),
            ));
        }
        if self.queries == 0 || self.proj_dim == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("queries, proj_dim, ffn_hidden must be positive".into()));
        }
        Ok(())
    }

    /// Side length of the token grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.stem_stride
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    fn stem_channels(&self) -> usize {
        self.d_model / 2
    }
}

/// Per-image decoder output, as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct SequencePrediction {
    /// One foreground logit per query.
    pub class_logits: Vec<f64>,
    pub boxes: Vec<BoundingBox>,
    pub projections: Vec<Vec<f64>>,
}

impl SequencePrediction {
    pub fn len(&self) -> usize {
        self.class_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_logits.is_empty()
    }

    pub fn fg_prob(&self, i: usize) -> f64 {
        1.0 / (1.0 + (-self.class_logits[i]).exp())
    }

    pub fn all_finite(&self) -> bool {
        self.class_logits.iter().all(|v| v.is_finite())
            && self.boxes.iter().all(|b| b.to_array().iter().all(|v| v.is_finite()))
            && self.projections.iter().flatten().all(|v| v.is_finite())
    }
}

/// Head outputs living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    /// `[n]`
    pub logits: Var,
    /// `[n, 4]`, sigmoid-squashed center form.
    pub boxes: Var,
    /// `[n, proj_dim]`
    pub projections: Var,
}

impl PredictionVars {
    pub fn to_prediction<T: Scalar>(&self, tape: &Tape<T>) -> SequencePrediction {
        let logits = tape.value(self.logits).to_f64_vec();
        let boxes = tape.value(self.boxes).to_f64_vec();
        let proj = tape.value(self.projections);
        let d = *proj.shape().last().unwrap();
        let proj = proj.to_f64_vec();
        SequencePrediction {
            boxes: boxes
                .chunks(4)
                .map(|b| BoundingBox::new(b[0], b[1], b[2], b[3]))
                .collect(),
            projections: proj.chunks(d).map(<[f64]>::to_vec).collect(),
            class_logits: logits,
        }
    }
}

fn xavier<T: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| {
        <T as Scalar>::from_f64(rng.gen_range(-limit..limit))
    })
}

/// Deterministic initialization: Xavier-uniform weights, zero biases,
/// layer-norm gains at one (stored as offsets from one), query embeddings from `N(0, 0.02)`.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let d = cfg.d_model;
    let h = cfg.ffn_hidden;
    let c1 = cfg.stem_channels();
    let zeros = |n: usize| Tensor::<T>::zeros(&[n]);

    let linear = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize| -> Result<()> {
        store.insert(format!("{name}.weight"), xavier(rng, i, o))?;
        store.insert(format!("{name}.bias"), zeros(o))
    };
    let norm = |store: &mut ParamStore<T>, name: &str| -> Result<()> {
        store.insert(format!("{name}.gain"), zeros(d))?;
        store.insert(format!("{name}.bias"), zeros(d))
    };

    linear(&mut store, &mut rng, "stem.conv1", 9 * 3, c1)?;
    linear(&mut store, &mut rng, "stem.conv2", 9 * c1, d)?;
    linear(&mut store, &mut rng, "stem.proj", d, d)?;
    for l in 0..cfg.enc_layers {
        let p = format!("encoder.{l}");
        for part in ["q", "k", "v", "o"] {
            linear(&mut store, &mut rng, &format!("{p}.attn.{part}"), d, d)?;
        }
        linear(&mut store, &mut rng, &format!("{p}.ffn.fc1"), d, h)?;
        linear(&mut store, &mut rng, &format!("{p}.ffn.fc2"), h, d)?;
        norm(&mut store, &format!("{p}.norm1"))?;
        norm(&mut store, &format!("{p}.norm2"))?;
    }
    for l in 0..cfg.dec_layers {
        let p = format!("decoder.{l}");
        for attn in ["self_attn", "cross_attn"] {
            for part in ["q", "k", "v", "o"] {
                linear(&mut store, &mut rng, &format!("{p}.{attn}.{part}"), d, d)?;
            }
        }
        linear(&mut store, &mut rng, &format!("{p}.ffn.fc1"), d, h)?;
        linear(&mut store, &mut rng, &format!("{p}.ffn.fc2"), h, d)?;
        for n in 1..=3 {
            norm(&mut store, &format!("{p}.norm{n}"))?;
        }
    }
    norm(&mut store, "decoder.norm")?;
    for (head, out) in [("class", 1), ("box", 4), ("proj", cfg.proj_dim)] {
        linear(&mut store, &mut rng, &format!("head.{head}.fc1"), d, h)?;
        linear(&mut store, &mut rng, &format!("head.{head}.fc2"), h, h)?;
        linear(&mut store, &mut rng, &format!("head.{head}.fc3"), h, out)?;
    }
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    store.insert(
        "query_embed",
        Tensor::from_fn(&[cfg.queries, 2 * d], |_| {
            <T as Scalar>::from_f64(normal.sample(&mut rng))
        }),
    )?;
    Ok(store)
}

/// Im2col gather map for a 3x3, stride-2, pad-1 convolution over a
/// `[h * w, c]` pixel-major input.
fn conv_index(h: usize, w: usize, c: usize) -> (Vec<usize>, usize, usize) {
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut idx = Vec::with_capacity(ho * wo * 9 * c);
    for oy in 0..ho {
        for ox in 0..wo {
            for ky in 0..3 {
                for kx in 0..3 {
                    let y = (oy * 2 + ky) as isize - 1;
                    let x = (ox * 2 + kx) as isize - 1;
                    let inside = y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
                    for ch in 0..c {
                        idx.push(if inside {
                            (y as usize * w + x as usize) * c + ch
                        } else {
                            GATHER_ZERO
                        });
                    }
                }
            }
        }
    }
    (idx, ho, wo)
}

/// DETR sine positional encoding for a `grid x grid` token map: `[tokens, d]`.
pub fn sine_position_encoding(grid: usize, d: usize) -> Vec<f64> {
    let feats = d / 2;
    let scale = 2.0 * PI;
    let dim_t: Vec<f64> = (0..feats)
        .map(|i| 10000f64.powf(2.0 * (i / 2) as f64 / feats as f64))
        .collect();
    let mut out = Vec::with_capacity(grid * grid * d);
    for y in 0..grid {
        for x in 0..grid {
            let ye = (y + 1) as f64 / (grid as f64 + 1e-6) * scale;
            let xe = (x + 1) as f64 / (grid as f64 + 1e-6) * scale;
            for embed in [ye, xe] {
                for (i, t) in dim_t.iter().enumerate() {
                    let v = embed / t;
                    out.push(if i % 2 == 0 { v.sin() } else { v.cos() });
                }
            }
        }
    }
    out
}

struct Net<'a, T: Scalar> {
    tape: &'a Tape<T>,
    params: &'a BoundParams,
    cfg: &'a ModelConfig,
}

impl<T: Scalar> Net<'_, T> {
    fn p(&self, name: &str) -> Result<Var> {
        self.params.var(name)
    }

    fn linear(&self, x: Var, name: &str) -> Result<Var> {
        let y = self.tape.matmul(x, self.p(&format!("{name}.weight"))?)?;
        self.tape.add(y, self.p(&format!("{name}.bias"))?)
    }

    fn norm(&self, x: Var, name: &str) -> Result<Var> {
        let t = self.tape;
        let gain = t.affine(self.p(&format!("{name}.gain"))?, 1.0, 1.0);
        let y = t.mul(t.layer_norm(x, LN_EPS), gain)?;
        t.add(y, self.p(&format!("{name}.bias"))?)
    }

    fn ffn(&self, x: Var, name: &str) -> Result<Var> {
        let h = self.tape.relu(self.linear(x, &format!("{name}.fc1"))?);
        self.linear(h, &format!("{name}.fc2"))
    }

    fn attention(&self, q_in: Var, k_in: Var, v_in: Var, name: &str) -> Result<Var> {
        let t = self.tape;
        let q = self.linear(q_in, &format!("{name}.q"))?;
        let k = self.linear(k_in, &format!("{name}.k"))?;
        let v = self.linear(v_in, &format!("{name}.v"))?;
        let dh = self.cfg.d_model / self.cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = t.slice_last(q, h * dh, dh)?;
            let kh = t.slice_last(k, h * dh, dh)?;
            let vh = t.slice_last(v, h * dh, dh)?;
            let scores = t.scale(t.matmul(qh, t.transpose(kh)?)?, scale);
            outs.push(t.matmul(t.softmax(scores), vh)?);
        }
        let cat = t.concat_last(&outs)?;
        self.linear(cat, &format!("{name}.o"))
    }

    fn conv(&self, x: Var, h: usize, w: usize, c: usize, name: &str) -> Result<(Var, usize, usize)> {
        let (idx, ho, wo) = conv_index(h, w, c);
        let cols = self.tape.gather(x, Rc::new(idx), &[ho * wo, 9 * c])?;
        let y = self.tape.relu(self.linear(cols, name)?);
        Ok((y, ho, wo))
    }

    fn avg_pool(&self, x: Var, h: usize, w: usize, c: usize) -> Result<Var> {
        let t = self.tape;
        let (ho, wo) = (h / 2, w / 2);
        let mut acc: Option<Var> = None;
        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let mut idx = Vec::with_capacity(ho * wo * c);
            for oy in 0..ho {
                for ox in 0..wo {
                    let p = (oy * 2 + dy) * w + ox * 2 + dx;
                    idx.extend((0..c).map(|ch| p * c + ch));
                }
            }
            let g = t.gather(x, Rc::new(idx), &[ho * wo, c])?;
            acc = Some(match acc {
                None => g,
                Some(a) => t.add(a, g)?,
            });
        }
        Ok(t.scale(acc.expect("four taps"), 0.25))
    }

    fn backbone(&self, img: &ImageTensor) -> Result<Var> {
        let s = self.cfg.image_size;
        let input: Vec<T> = img
            .to_hwc()
            .into_iter()
            .map(|v| <T as Scalar>::from_f64(v as f64))
            .collect();
        let x = self.tape.constant(Tensor::new(vec![s * s, 3], input)?);
        let (x, h, w) = self.conv(x, s, s, 3, "stem.conv1")?;
        let (x, h, w) = self.conv(x, h, w, self.cfg.stem_channels(), "stem.conv2")?;
        let x = self.avg_pool(x, h, w, self.cfg.d_model)?;
        self.linear(x, "stem.proj")
    }

    fn forward(&self, img: &ImageTensor) -> Result<PredictionVars> {
        let t = self.tape;
        let cfg = self.cfg;
        let d = cfg.d_model;
        let pos = t.constant(Tensor::from_f64_slice(
            &[cfg.tokens(), d],
            &sine_position_encoding(cfg.grid(), d),
        )?);
        let mut memory = self.backbone(img)?;
        for l in 0..cfg.enc_layers {
            let p = format!("encoder.{l}");
            let qk = t.add(memory, pos)?;
            let a = self.attention(qk, qk, memory, &format!("{p}.attn"))?;
            memory = self.norm(t.add(memory, a)?, &format!("{p}.norm1"))?;
            let f = self.ffn(memory, &format!("{p}.ffn"))?;
            memory = self.norm(t.add(memory, f)?, &format!("{p}.norm2"))?;
        }
        let queries = self.p("query_embed")?;
        let query_pos = t.slice_last(queries, 0, d)?;
        let mut tgt = t.slice_last(queries, d, d)?;
        let memory_pos = t.add(memory, pos)?;
        for l in 0..cfg.dec_layers {
            let p = format!("decoder.{l}");
            let qk = t.add(tgt, query_pos)?;
            let a = self.attention(qk, qk, tgt, &format!("{p}.self_attn"))?;
            tgt = self.norm(t.add(tgt, a)?, &format!("{p}.norm1"))?;
            let q = t.add(tgt, query_pos)?;
            let a = self.attention(q, memory_pos, memory, &format!("{p}.cross_attn"))?;
            tgt = self.norm(t.add(tgt, a)?, &format!("{p}.norm2"))?;
            let f = self.ffn(tgt, &format!("{p}.ffn"))?;
            tgt = self.norm(t.add(tgt, f)?, &format!("{p}.norm3"))?;
        }
        let tgt = self.norm(tgt, "decoder.norm")?;
        self.heads(tgt)
    }

    fn mlp3(&self, x: Var, name: &str) -> Result<Var> {
        let t = self.tape;
        let h = t.relu(self.linear(x, &format!("{name}.fc1"))?);
        let h = t.relu(self.linear(h, &format!("{name}.fc2"))?);
        self.linear(h, &format!("{name}.fc3"))
    }

    fn heads(&self, seq: Var) -> Result<PredictionVars> {
        let t = self.tape;
        let n = t.shape(seq)[0];
        let logits = t.reshape(self.mlp3(seq, "head.class")?, &[n])?;
        let boxes = t.sigmoid(self.mlp3(seq, "head.box")?);
        let projections = self.mlp3(seq, "head.proj")?;
        Ok(PredictionVars {
            logits,
            boxes,
            projections,
        })
    }
}

/// Full forward pass of one image through bound parameters.
pub fn forward<T: Scalar>(
    tape: &Tape<T>,
    params: &BoundParams,
    cfg: &ModelConfig,
    img: &ImageTensor,
) -> Result<PredictionVars> {
    if img.height() != cfg.image_size || img.width() != cfg.image_size {
        return Err(Error::Shape {
            op: "forward",
            lhs: vec![3, img.height(), img.width()],
            rhs: vec![3, cfg.image_size, cfg.image_size],
        });
    }
    Net { tape, params, cfg }.forward(img)
}

/// The three prediction heads applied to a `[n, d_model]` decoder output.
pub fn heads<T: Scalar>(
    tape: &Tape<T>,
    params: &BoundParams,
    cfg: &ModelConfig,
    decoder_seq: Var,
) -> Result<PredictionVars> {
    Net { tape, params, cfg }.heads(decoder_seq)
}

/// Forward pass without gradient tracking, returning plain values.
pub fn predict<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    img: &ImageTensor,
) -> Result<SequencePrediction> {
    let tape = Tape::new();
    let _guard = tape.no_grad();
    let bound = store.bind(&tape, false);
    Ok(forward(&tape, &bound, cfg, img)?.to_prediction(&tape))
}
