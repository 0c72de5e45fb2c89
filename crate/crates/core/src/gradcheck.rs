//! End-to-end gradient check of the combined objective in 64-bit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{make_views, map_boxes, AugmentConfig};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::model::{forward, init_params, ModelConfig, ParamStore};
use crate::numcore::{finite_difference, max_relative_error, Tape};
use crate::objective::{loss_with_assignments, total_loss, ObjectiveConfig};
use crate::seeds;
use crate::synth::{generate_scene, SceneConfig};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub proposals: usize,
    pub step: f64,
    /// Half-width of the uniform noise added to every initialized parameter.
    pub perturb: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::gradcheck(),
            objective: ObjectiveConfig::default(),
            proposals: 2,
            step: 1e-6,
            perturb: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub parameters: usize,
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub loss: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn perturbed(cfg: &ModelConfig, seed: u64, width: f64) -> Result<ParamStore<f64>> {
    let mut store = init_params::<f64>(cfg, seed)?;
    let mut rng = seeds::rng(seeds::mix(seed, 1));
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-width..=width);
        }
    }
    Ok(store)
}

/// Compare analytic and central-difference gradients of the full loss with
/// respect to every online parameter.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let size = cfg.model.image_size;
    let scene = generate_scene(
        &SceneConfig {
            size,
            min_objects: cfg.proposals,
            max_objects: cfg.proposals,
            side: [size / 5, size / 2],
            max_pair_iou: 0.3,
        },
        seeds::mix(cfg.seed, 2),
    );
    let augment = AugmentConfig {
        output_size: size,
        resize_range: [size * 3 / 4, size * 3 / 2],
        ..AugmentConfig::default()
    };
    let views = make_views(&scene.image, &augment, seeds::mix(cfg.seed, 3))?;
    let mut targets: Vec<BoundingBox> = map_boxes(&scene.gt_boxes, &views.geometry, 0.0);
    if targets.len() < cfg.proposals {
        targets = scene.gt_boxes.clone();
    }
    targets.truncate(cfg.proposals);

    let online = perturbed(&cfg.model, cfg.seed, cfg.perturb)?;
    let momentum = perturbed(&cfg.model, seeds::mix(cfg.seed, 4), cfg.perturb)?;

    let tape: Tape<f64> = Tape::new();
    let momentum_vars = momentum.bind(&tape, false);
    let m_pred = forward(&tape, &momentum_vars, &cfg.model, &views.view1)?;
    let online_vars = online.bind(&tape, true);
    let o_pred = forward(&tape, &online_vars, &cfg.model, &views.view2)?;
    let (loss, breakdown) = total_loss(&tape, &o_pred, &m_pred, &targets, &cfg.objective)?;
    let grads = tape.backward(loss.total)?;
    let mut analytic = Vec::new();
    let mut owner = Vec::new();
    for (name, var) in online_vars.iter() {
        let g = grads.get_or_zeros(var);
        owner.extend(std::iter::repeat(name.to_string()).take(g.len()));
        analytic.extend_from_slice(g.data());
    }

    let eval = |flat: &[f64]| -> Result<f64> {
        let mut store = online.clone();
        store.assign_flat(flat)?;
        let tape: Tape<f64> = Tape::new();
        let mv = momentum.bind(&tape, false);
        let m = forward(&tape, &mv, &cfg.model, &views.view1)?;
        let ov = store.bind(&tape, false);
        let o = forward(&tape, &ov, &cfg.model, &views.view2)?;
        let l = loss_with_assignments(
            &tape,
            &o,
            &m,
            &targets,
            &cfg.objective,
            &breakdown.rps_assignment,
            &breakdown.branch_assignment,
        )?;
        Ok(tape.value(l.total).item())
    };
    let mut failure = None;
    let numeric = finite_difference(&online.flatten(), cfg.step, |x| match eval(x) {
        Ok(v) => v,
        Err(e) => {
            failure.get_or_insert(e);
            f64::NAN
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if analytic.len() != numeric.len() {
        return Err(Error::StoreMismatch("gradient and parameter counts differ".into()));
    }

    let mut worst = (0.0, 0);
    for i in 0..analytic.len() {
        let e = max_relative_error(&analytic[i..=i], &numeric[i..=i]);
        if !(e <= worst.0) {
            worst = (e, i);
        }
    }
    Ok(GradcheckReport {
        parameters: analytic.len(),
        max_relative_error: worst.0,
        worst_parameter: owner.get(worst.1).cloned().unwrap_or_default(),
        loss: breakdown.total,
        tolerance: TOLERANCE,
        passed: worst.0 <= TOLERANCE,
    })
}
