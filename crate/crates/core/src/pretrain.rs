//! The pre-training loop: two-view construction, dual forward passes,
//! both matchings, the combined loss, a clipped Adam step on the online
//! parameters, and the momentum update.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{make_views, map_boxes, AugmentConfig};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::image::ImageTensor;
use crate::matching::{build_branch_cost, build_rps_cost, hungarian, MatchStrategy};
use crate::model::{forward, init_params, predict, ModelConfig, ParamStore};
use crate::numcore::{Tape, Tensor};
use crate::objective::{ema_update, total_loss, EmaConfig, LossWeights, ObjectiveConfig, SimilarityKind};
use crate::par::{self, Execution};
use crate::proposals::{cached_proposals, proposal_source, ProposalConfig, ProposalMode};
use crate::seeds;
use crate::synth::{generate_scene, list_images, read_annotation, SceneConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; zero disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub similarity: SimilarityKind,
    pub branch_matching: MatchStrategy,
    pub ema: EmaConfig,
    pub augment: AugmentConfig,
    pub proposals: ProposalConfig,
    pub optimizer: OptimizerConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub execution: Execution,
    /// Directory of `*.ppm` images with optional `<stem>.gt.json` sidecars.
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Save a checkpoint every this many steps; zero saves only at the end.
    pub checkpoint_every: u64,
    pub metrics: Option<PathBuf>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            similarity: SimilarityKind::L2,
            branch_matching: MatchStrategy::Hungarian,
            ema: EmaConfig::default(),
            augment: AugmentConfig::default(),
            proposals: ProposalConfig::default(),
            optimizer: OptimizerConfig::default(),
            steps: 300,
            batch_size: 32,
            seed: 0,
            execution: Execution::Parallel,
            dataset: None,
            checkpoint: None,
            checkpoint_every: 0,
            metrics: None,
        }
    }
}

impl PretrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            weights: self.weights,
            similarity: self.similarity,
            branch_matching: self.branch_matching,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.ema.validate()?;
        self.augment.validate()?;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be at least 1".into()));
        }
        if self.augment.output_size != self.model.image_size {
            return Err(Error::Config(format!(
                "augment.output_size {} must equal model.image_size {}",
                self.augment.output_size, self.model.image_size
            )));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0 && o.grad_clip >= 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        Ok(())
    }

    /// Check that the dataset exists and output directories are present.
    pub fn check_paths(&self) -> Result<()> {
        if let Some(d) = &self.dataset {
            if !d.is_dir() {
                return Err(Error::Config(format!("dataset directory {} not found", d.display())));
            }
        }
        for p in [&self.checkpoint, &self.metrics].into_iter().flatten() {
            let parent = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            if !parent.is_dir() {
                return Err(Error::Config(format!("output directory {} not found", parent.display())));
            }
        }
        Ok(())
    }
}

/// One training image with its proposals in source coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub image: ImageTensor,
    pub gt: Option<Vec<BoundingBox>>,
    pub proposals: Vec<BoundingBox>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Generate scenes in memory and compute their proposals.
    pub fn synthetic(count: usize, seed: u64, scene: &SceneConfig, proposals: &ProposalConfig, exec: Execution) -> Result<Self> {
        let samples = par::map_range(exec, count, |i| {
            let s = generate_scene(scene, seeds::mix(seed, i as u64));
            let props = proposal_source(&s.image, Some(&s.gt_boxes), proposals, seeds::mix_all(seed, &[i as u64, 1]))?;
            Ok(Sample {
                id: i as u64,
                image: s.image,
                gt: Some(s.gt_boxes),
                proposals: props.into_iter().map(|p| p.bbox).collect(),
            })
        });
        Ok(Self {
            samples: samples.into_iter().collect::<Result<_>>()?,
        })
    }

    /// Read every `*.ppm` in `dir`, using or refreshing proposal sidecars.
    pub fn load(dir: &Path, proposals: &ProposalConfig, seed: u64, exec: Execution) -> Result<Self> {
        let paths = list_images(dir)?;
        let samples = par::map_range(exec, paths.len(), |i| {
            let path = &paths[i];
            let image = ImageTensor::read_ppm(path)?;
            let gt = match read_annotation(path) {
                Ok(a) => Some(a.boxes),
                Err(Error::Io { .. }) if proposals.mode != ProposalMode::GroundTruth => None,
                Err(e) => return Err(e),
            };
            let props = cached_proposals(path, gt.as_deref(), proposals, seeds::mix_all(seed, &[i as u64, 1]))?;
            Ok(Sample {
                id: i as u64,
                image,
                gt,
                proposals: props,
            })
        });
        Ok(Self {
            samples: samples.into_iter().collect::<Result<_>>()?,
        })
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub online: ParamStore<f32>,
    pub momentum: ParamStore<f32>,
    pub adam_m: ParamStore<f32>,
    pub adam_v: ParamStore<f32>,
    /// Completed optimizer steps.
    pub step: u64,
}

const GROUPS: [&str; 4] = ["online", "momentum", "adam_m", "adam_v"];

impl TrainState {
    /// Fresh online parameters with the momentum branch as an exact copy.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let online: ParamStore<f32> = init_params(cfg, seed)?;
        Ok(Self {
            momentum: online.clone(),
            adam_m: online.zeros_like(),
            adam_v: online.zeros_like(),
            online,
            step: 0,
        })
    }

    fn stores(&self) -> [&ParamStore<f32>; 4] {
        [&self.online, &self.momentum, &self.adam_m, &self.adam_v]
    }

    /// The step counter is split into four 16-bit chunks, each exact in f32.
    fn step_tensor(&self) -> Tensor<f32> {
        let chunks = (0..4).map(|k| ((self.step >> (16 * k)) & 0xffff) as f32).collect();
        Tensor::new(vec![4], chunks).expect("4 chunks")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut named: Vec<(String, Tensor<f32>)> = Vec::new();
        for (group, store) in GROUPS.iter().zip(self.stores()) {
            for (name, t) in store.iter() {
                named.push((format!("{group}/{name}"), t.clone()));
            }
        }
        named.push(("step".into(), self.step_tensor()));
        checkpoint::encode(named.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut stores: [ParamStore<f32>; 4] = Default::default();
        let mut step = None;
        for (name, t) in checkpoint::decode(bytes)? {
            if name == "step" {
                if t.len() != 4 || t.data().iter().any(|v| v.fract() != 0.0 || *v < 0.0 || *v > 65535.0) {
                    return Err(Error::StoreMismatch("malformed step counter".into()));
                }
                step = Some(t.data().iter().enumerate().fold(0u64, |acc, (k, v)| acc | ((*v as u64) << (16 * k))));
                continue;
            }
            let (group, rest) = name
                .split_once('/')
                .ok_or_else(|| Error::StoreMismatch(format!("unexpected tensor {name}")))?;
            let slot = GROUPS
                .iter()
                .position(|g| *g == group)
                .ok_or_else(|| Error::StoreMismatch(format!("unknown group {group}")))?;
            stores[slot].insert(rest, t)?;
        }
        let step = step.ok_or_else(|| Error::StoreMismatch("missing step counter".into()))?;
        let [online, momentum, adam_m, adam_v] = stores;
        for other in [&momentum, &adam_m, &adam_v] {
            online.check_same_layout(other)?;
        }
        Ok(Self {
            online,
            momentum,
            adam_m,
            adam_v,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// One NDJSON line per optimizer step.
///
/// `loss_focal` and `loss_box` are unweighted; `loss_rps` and `loss_ssl` are
/// the weighted terms, and `loss_total = loss_rps + loss_ssl`. Losses are
/// batch means; `n_matched` is summed over the batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss_total: f64,
    pub loss_focal: f64,
    pub loss_box: f64,
    pub loss_rps: f64,
    pub loss_ssl: f64,
    pub n_matched: usize,
    pub projection_variance: f64,
    pub grad_norm: f64,
}

/// Augmentation seed for one image at one step.
pub fn sample_seed(global: u64, step: u64, image_id: u64) -> u64 {
    seeds::mix_all(global, &[step, image_id])
}

/// Dataset indices for the batch of `step` (1-based).
pub fn batch_indices(seed: u64, step: u64, batch: usize, len: usize) -> Vec<usize> {
    (0..batch)
        .map(|b| (seeds::mix_all(seed, &[0x5eed, step, b as u64]) % len as u64) as usize)
        .collect()
}

struct SampleResult {
    grads: Vec<f32>,
    breakdown: crate::objective::LossBreakdown,
}

fn sample_gradients(state: &TrainState, cfg: &PretrainConfig, sample: &Sample, seed: u64) -> Result<SampleResult> {
    let views = make_views(&sample.image, &cfg.augment, seed)?;
    let mut targets = map_boxes(&sample.proposals, &views.geometry, cfg.augment.min_visible);
    targets.truncate(cfg.model.queries);

    let tape: Tape<f32> = Tape::new();
    let momentum_params = state.momentum.bind(&tape, true);
    let momentum = {
        let _guard = tape.no_grad();
        forward(&tape, &momentum_params, &cfg.model, &views.view1)?
    };
    let online_params = state.online.bind(&tape, true);
    let online = forward(&tape, &online_params, &cfg.model, &views.view2)?;
    let (loss, breakdown) = total_loss(&tape, &online, &momentum, &targets, &cfg.objective())?;
    let grads = tape.backward(loss.total)?;
    let mut flat = Vec::with_capacity(state.online.num_scalars());
    for (_, var) in online_params.iter() {
        flat.extend_from_slice(grads.get_or_zeros(var).data());
    }
    Ok(SampleResult { grads: flat, breakdown })
}

/// Run one optimizer step on the batch chosen for step `state.step + 1`.
///
/// On a non-finite loss or gradient the state is left untouched.
pub fn train_step(state: &mut TrainState, dataset: &Dataset, cfg: &PretrainConfig) -> Result<MetricsRecord> {
    if dataset.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let step = state.step + 1;
    let indices = batch_indices(cfg.seed, step, cfg.batch_size, dataset.len());
    let results = par::map(cfg.execution, &indices, |&i| {
        let sample = &dataset.samples[i];
        sample_gradients(state, cfg, sample, sample_seed(cfg.seed, step, sample.id))
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let b = results.len() as f64;
    let mean = |f: fn(&crate::objective::LossBreakdown) -> f64| results.iter().map(|r| f(&r.breakdown)).sum::<f64>() / b;
    let loss_total = mean(|d| d.total);
    let n = state.online.num_scalars();
    let mut grad = vec![0.0f64; n];
    for r in &results {
        for (g, v) in grad.iter_mut().zip(&r.grads) {
            *g += *v as f64;
        }
    }
    grad.iter_mut().for_each(|g| *g /= b);
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !loss_total.is_finite() || !grad_norm.is_finite() {
        log::error!("step {step}: non-finite loss {loss_total} or gradient norm {grad_norm}");
        return Err(Error::NonFiniteLoss { step });
    }
    let clip = cfg.optimizer.grad_clip;
    if clip > 0.0 && grad_norm > clip {
        let s = clip / grad_norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    adam_update(state, &grad, &cfg.optimizer, step)?;
    ema_update(&mut state.momentum, &state.online, cfg.ema.beta)?;
    state.step = step;

    Ok(MetricsRecord {
        step,
        loss_total,
        loss_focal: mean(|d| d.focal),
        loss_box: mean(|d| d.boxes),
        loss_rps: mean(|d| d.rps),
        loss_ssl: mean(|d| d.ssl),
        n_matched: results.iter().map(|r| r.breakdown.n_matched).sum(),
        projection_variance: mean(|d| d.projection_variance),
        grad_norm,
    })
}

fn adam_update(state: &mut TrainState, grad: &[f64], o: &OptimizerConfig, t: u64) -> Result<()> {
    let mut params = state.online.flatten();
    let mut m = state.adam_m.flatten();
    let mut v = state.adam_v.flatten();
    let c1 = 1.0 - o.beta1.powf(t as f64);
    let c2 = 1.0 - o.beta2.powf(t as f64);
    for i in 0..params.len() {
        let mi = o.beta1 * m[i] as f64 + (1.0 - o.beta1) * grad[i];
        let vi = o.beta2 * v[i] as f64 + (1.0 - o.beta2) * grad[i] * grad[i];
        m[i] = mi as f32;
        v[i] = vi as f32;
        let update = o.lr * (mi / c1) / ((vi / c2).sqrt() + o.eps);
        params[i] = (params[i] as f64 - update) as f32;
    }
    state.online.assign_flat(&params)?;
    state.adam_m.assign_flat(&m)?;
    state.adam_v.assign_flat(&v)?;
    Ok(())
}

/// Train until `state.step == cfg.steps`, handing each record to `sink` and
/// checkpointing as configured.
pub fn run(
    state: &mut TrainState,
    dataset: &Dataset,
    cfg: &PretrainConfig,
    mut sink: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<()> {
    while state.step < cfg.steps {
        let record = train_step(state, dataset, cfg)?;
        log::debug!("step {} loss {:.5}", record.step, record.loss_total);
        if record.step % 50 == 0 {
            log::info!(
                "step {} total {:.4} rps {:.4} ssl {:.4}",
                record.step,
                record.loss_total,
                record.loss_rps,
                record.loss_ssl
            );
        }
        sink(&record)?;
        if let Some(path) = &cfg.checkpoint {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                state.save(path)?;
            }
        }
    }
    if let Some(path) = &cfg.checkpoint {
        state.save(path)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub id: u64,
    pub gt_boxes: usize,
    pub recall: f64,
    pub mean_matched_iou: f64,
    pub mean_pair_l2: f64,
    pub mean_matched_fg_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchingReport {
    pub scenes: usize,
    /// Fraction of ground-truth boxes whose matched online query has
    /// IoU at least 0.5.
    pub recall_at_05: f64,
    pub mean_matched_iou: f64,
    /// Mean Euclidean distance between branch-matched projections.
    pub mean_pair_l2: f64,
    pub mean_matched_fg_prob: f64,
    pub per_scene: Vec<SceneReport>,
}

/// Match online predictions to ground truth and the two branches to each
/// other on every scene.
pub fn evaluate_matching(state: &TrainState, dataset: &Dataset, cfg: &PretrainConfig) -> Result<MatchingReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let weights = cfg.weights.match_weights();
    let per = par::map(cfg.execution, &dataset.samples, |sample| -> Result<SceneReport> {
        let views = make_views(&sample.image, &cfg.augment, sample_seed(cfg.seed, u64::MAX, sample.id))?;
        let online = predict(&state.online, &cfg.model, &views.view2)?;
        let momentum = predict(&state.momentum, &cfg.model, &views.view1)?;
        let mut gt = map_boxes(sample.gt.as_deref().unwrap_or(&sample.proposals), &views.geometry, cfg.augment.min_visible);
        gt.truncate(online.len());
        let (mut hits, mut iou_sum, mut fg_sum) = (0usize, 0.0, 0.0);
        if !gt.is_empty() {
            let assign = hungarian(&build_rps_cost(&online, &gt, weights)?)?;
            for (t, q) in assign.pairs() {
                let v = iou(online.boxes[q], gt[t]);
                hits += usize::from(v >= 0.5);
                iou_sum += v;
                fg_sum += online.fg_prob(q);
            }
        }
        let branch = hungarian(&build_branch_cost(&online, &momentum, weights)?)?;
        let l2 = branch
            .pairs()
            .map(|(j, i)| {
                momentum.projections[j]
                    .iter()
                    .zip(&online.projections[i])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / branch.len() as f64;
        let k = gt.len().max(1) as f64;
        Ok(SceneReport {
            id: sample.id,
            gt_boxes: gt.len(),
            recall: if gt.is_empty() { 1.0 } else { hits as f64 / k },
            mean_matched_iou: iou_sum / k,
            mean_pair_l2: l2,
            mean_matched_fg_prob: fg_sum / k,
        })
    });
    let per_scene = per.into_iter().collect::<Result<Vec<_>>>()?;
    let total_gt: usize = per_scene.iter().map(|s| s.gt_boxes).sum();
    let weighted = |f: fn(&SceneReport) -> f64| {
        per_scene.iter().map(|s| f(s) * s.gt_boxes as f64).sum::<f64>() / total_gt.max(1) as f64
    };
    let n = per_scene.len() as f64;
    Ok(MatchingReport {
        scenes: per_scene.len(),
        recall_at_05: weighted(|s| s.recall),
        mean_matched_iou: weighted(|s| s.mean_matched_iou),
        mean_pair_l2: per_scene.iter().map(|s| s.mean_pair_l2).sum::<f64>() / n,
        mean_matched_fg_prob: weighted(|s| s.mean_matched_fg_prob),
        per_scene,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::PhotometricConfig;
    use crate::masking::MaskConfig;

    fn tiny_cfg() -> PretrainConfig {
        PretrainConfig {
            model: ModelConfig {
                image_size: 32,
                d_model: 16,
                heads: 2,
                enc_layers: 1,
                dec_layers: 1,
                queries: 6,
                proj_dim: 8,
                ffn_hidden: 16,
                ..ModelConfig::default()
            },
            augment: AugmentConfig {
                output_size: 32,
                resize_range: [24, 48],
                ..AugmentConfig::default()
            },
            proposals: ProposalConfig {
                mode: ProposalMode::GroundTruth,
                ..ProposalConfig::default()
            },
            steps: 6,
            batch_size: 2,
            ..PretrainConfig::default()
        }
    }

    fn tiny_data(n: usize) -> Dataset {
        let scene = SceneConfig {
            size: 32,
            side: [6, 14],
            ..SceneConfig::default()
        };
        let props = ProposalConfig {
            mode: ProposalMode::GroundTruth,
            ..ProposalConfig::default()
        };
        Dataset::synthetic(n, 1, &scene, &props, Execution::Sequential).unwrap()
    }

    #[test]
    fn config_json_defaults_and_unknown_keys() {
        let cfg = PretrainConfig::from_json("{}").unwrap();
        assert_eq!(cfg, PretrainConfig::default());
        assert!(PretrainConfig::from_json(r#"{"stepz": 3}"#).is_err());
        assert!(PretrainConfig::from_json(r#"{"steps": 0}"#).is_err());
        let round = serde_json::to_string(&cfg).unwrap();
        assert_eq!(PretrainConfig::from_json(&round).unwrap(), cfg);
    }

    #[test]
    fn state_round_trip_and_truncation() {
        let mut state = TrainState::new(&tiny_cfg().model, 3).unwrap();
        state.step = 70_000;
        state.adam_v.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v = 0.5));
        let bytes = state.to_bytes();
        assert_eq!(TrainState::from_bytes(&bytes).unwrap(), state);
        assert!(TrainState::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn steps_are_deterministic_across_execution_modes() {
        let data = tiny_data(4);
        let cfg = tiny_cfg();
        let run_with = |exec| {
            let cfg = PretrainConfig { execution: exec, ..cfg.clone() };
            let mut state = TrainState::new(&cfg.model, cfg.seed).unwrap();
            let mut records = Vec::new();
            run(&mut state, &data, &cfg, |r| {
                records.push(r.clone());
                Ok(())
            })
            .unwrap();
            (state, records)
        };
        let (s1, r1) = run_with(Execution::Sequential);
        let (s2, r2) = run_with(Execution::Parallel);
        assert_eq!(r1, r2);
        assert_eq!(s1, s2);
        assert_eq!(r1.len(), 6);
        assert!(r1.iter().all(|r| r.loss_total.is_finite()));
    }

    #[test]
    fn beta_one_freezes_momentum_and_lag_holds_otherwise() {
        let data = tiny_data(3);
        let frozen = PretrainConfig {
            ema: EmaConfig { beta: 1.0 },
            steps: 2,
            ..tiny_cfg()
        };
        let mut state = TrainState::new(&frozen.model, 0).unwrap();
        let before = state.momentum.clone();
        run(&mut state, &data, &frozen, |_| Ok(())).unwrap();
        assert_eq!(state.momentum, before);
        assert_ne!(state.online, before);

        let cfg = PretrainConfig {
            ema: EmaConfig { beta: 0.5 },
            steps: 1,
            ..tiny_cfg()
        };
        let mut state = TrainState::new(&cfg.model, 0).unwrap();
        run(&mut state, &data, &cfg, |_| Ok(())).unwrap();
        let prev = state.momentum.flatten();
        let cfg2 = PretrainConfig { steps: 2, ..cfg };
        run(&mut state, &data, &cfg2, |_| Ok(())).unwrap();
        for ((p, m), o) in prev.iter().zip(state.momentum.flatten()).zip(state.online.flatten()) {
            if p != &o {
                let (lo, hi) = if *p < o { (*p, o) } else { (o, *p) };
                assert!(m >= lo && m <= hi);
            }
        }
    }

    #[test]
    fn evaluation_report_is_finite_and_zero_for_identical_branches() {
        let data = tiny_data(3);
        let mut cfg = tiny_cfg();
        let state = TrainState::new(&cfg.model, 0).unwrap();
        let report = evaluate_matching(&state, &data, &cfg).unwrap();
        assert_eq!(report.scenes, 3);
        assert!(report.recall_at_05.is_finite() && report.mean_pair_l2.is_finite());
        cfg.augment = AugmentConfig {
            photometric: PhotometricConfig {
                enabled: false,
                ..PhotometricConfig::default()
            },
            mask: MaskConfig::disabled(),
            ..cfg.augment
        };
        let report = evaluate_matching(&state, &data, &cfg).unwrap();
        assert_eq!(report.mean_pair_l2, 0.0);
        assert!(evaluate_matching(&state, &Dataset::default(), &cfg).is_err());
    }

    #[test]
    fn batch_indices_depend_only_on_seed_and_step() {
        assert_eq!(batch_indices(1, 5, 4, 10), batch_indices(1, 5, 4, 10));
        assert_ne!(batch_indices(1, 5, 4, 1000), batch_indices(1, 6, 4, 1000));
        assert!(batch_indices(2, 1, 50, 7).iter().all(|i| *i < 7));
    }
}
