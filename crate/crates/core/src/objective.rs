//! Training losses, the combined objective, and the momentum update.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_distance_rows, boxes_tensor, BoundingBox, GIOU_WEIGHT};
use crate::matching::{build_branch_cost, build_rps_cost, hungarian, one_by_one, Assignment, MatchStrategy, MatchWeights};
use crate::model::{ParamStore, PredictionVars, SequencePrediction};
use crate::numcore::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_f: f64,
    pub lambda_b: f64,
    pub lambda_e: f64,
    pub lambda_cm: f64,
    pub lambda_bm: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub giou_sub_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_f: 2.0,
            lambda_b: 5.0,
            lambda_e: 10.0,
            lambda_cm: 2.0,
            lambda_bm: 5.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            giou_sub_weight: GIOU_WEIGHT,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_f,
            self.lambda_b,
            self.lambda_e,
            self.lambda_cm,
            self.lambda_bm,
            self.focal_alpha,
            self.focal_gamma,
            self.giou_sub_weight,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.focal_alpha > 1.0 {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }

    pub fn match_weights(&self) -> MatchWeights {
        MatchWeights {
            class: self.lambda_cm,
            bbox: self.lambda_bm,
            giou: self.giou_sub_weight,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmaConfig {
    pub beta: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self { beta: 0.996 }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("ema beta {} outside [0, 1]", self.beta)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    #[default]
    L2,
    L1,
}

/// Loss weights plus the ablation switches of the sequence term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub similarity: SimilarityKind,
    pub branch_matching: MatchStrategy,
}

fn constant<T: Scalar>(tape: &Tape<T>, shape: &[usize], values: &[f64]) -> Result<Var> {
    Ok(tape.constant(Tensor::from_f64_slice(shape, values)?))
}

/// Sigmoid focal loss over `[n]` logits, normalized by the positive count.
///
/// `alpha = None` drops the class-balance factor.
pub fn focal_loss<T: Scalar>(tape: &Tape<T>, logits: Var, positive: &[bool], alpha: Option<f64>, gamma: f64) -> Result<Var> {
    let n = positive.len();
    if tape.shape(logits) != [n] {
        return Err(Error::Shape {
            op: "focal_loss",
            lhs: tape.shape(logits),
            rhs: vec![n],
        });
    }
    let sign: Vec<f64> = positive.iter().map(|p| if *p { 1.0 } else { -1.0 }).collect();
    // With s = ±logit, p_t = sigmoid(s) and 1 - p_t = sigmoid(-s).
    let s = tape.mul(logits, constant(tape, &[n], &sign)?)?;
    let mut per = tape.neg(tape.log_sigmoid(s));
    if gamma != 0.0 {
        let modulator = tape.power(tape.sigmoid(tape.neg(s)), gamma);
        per = tape.mul(per, modulator)?;
    }
    if let Some(a) = alpha {
        let at: Vec<f64> = positive.iter().map(|p| if *p { a } else { 1.0 - a }).collect();
        per = tape.mul(per, constant(tape, &[n], &at)?)?;
    }
    let n_pos = positive.iter().filter(|p| **p).count().max(1);
    Ok(tape.scale(tape.sum(per), 1.0 / n_pos as f64))
}

/// Mean box distance over matched `(target, query)` pairs; zero without
/// matches.
pub fn box_loss<T: Scalar>(
    tape: &Tape<T>,
    pred_boxes: Var,
    targets: &[BoundingBox],
    matched: &Assignment,
    giou_weight: f64,
) -> Result<Var> {
    if matched.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    if matched.len() != targets.len() {
        return Err(Error::Shape {
            op: "box_loss",
            lhs: vec![matched.len()],
            rhs: vec![targets.len()],
        });
    }
    let picked = tape.select_rows(pred_boxes, &matched.query_for_target)?;
    let target = tape.constant(boxes_tensor(targets));
    Ok(tape.mean(box_distance_rows(tape, picked, target, giou_weight)?))
}

/// Distance between momentum sequence `j` and online sequence `σ(j)`,
/// summed over features and averaged over pairs.
///
/// The momentum side is detached, so gradients reach only `z_online`.
pub fn similarity_loss<T: Scalar>(
    tape: &Tape<T>,
    z_momentum: Var,
    z_online: Var,
    assignment: &Assignment,
    kind: SimilarityKind,
) -> Result<Var> {
    let (sm, so) = (tape.shape(z_momentum), tape.shape(z_online));
    if sm != so || sm.len() != 2 {
        return Err(Error::Shape {
            op: "similarity_loss",
            lhs: sm,
            rhs: so,
        });
    }
    let n = sm[0];
    if assignment.len() != n || !assignment.is_injective() || assignment.query_for_target.iter().any(|q| *q >= n) {
        return Err(Error::invalid(format!(
            "similarity loss needs a full permutation over {n} sequences, got {:?}",
            assignment.query_for_target
        )));
    }
    let target = tape.constant(tape.value(z_momentum));
    let picked = tape.gather(
        z_online,
        Rc::new(
            assignment
                .query_for_target
                .iter()
                .flat_map(|q| (q * sm[1])..(q + 1) * sm[1])
                .collect(),
        ),
        &sm,
    )?;
    let diff = tape.sub(target, picked)?;
    let per = match kind {
        SimilarityKind::L2 => tape.mul(diff, diff)?,
        SimilarityKind::L1 => tape.abs(diff),
    };
    Ok(tape.mean(tape.sum_last(per)))
}

/// Loss components and the matchings behind them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub focal: f64,
    pub boxes: f64,
    pub similarity: f64,
    /// `λ_f · focal + λ_b · box`
    pub rps: f64,
    /// `λ_e · similarity`
    pub ssl: f64,
    pub n_matched: usize,
    pub rps_assignment: Assignment,
    pub branch_assignment: Assignment,
    /// Branch matching cost of the chosen assignment.
    pub branch_cost: f64,
    /// Mean per-feature variance of the online projections across queries.
    pub projection_variance: f64,
}

/// Variables of the combined objective on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub focal: Var,
    pub boxes: Var,
    pub similarity: Var,
}

fn projection_variance(pred: &SequencePrediction) -> f64 {
    let n = pred.projections.len();
    let d = pred.projections.first().map_or(0, Vec::len);
    if n == 0 || d == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for k in 0..d {
        let mean = pred.projections.iter().map(|z| z[k]).sum::<f64>() / n as f64;
        total += pred.projections.iter().map(|z| (z[k] - mean).powi(2)).sum::<f64>() / n as f64;
    }
    total / d as f64
}

/// Proposal-supervised detection loss plus the weighted sequence
/// similarity between branches.
pub fn total_loss<T: Scalar>(
    tape: &Tape<T>,
    online: &PredictionVars,
    momentum: &PredictionVars,
    proposals: &[BoundingBox],
    cfg: &ObjectiveConfig,
) -> Result<(LossVars, LossBreakdown)> {
    let w = &cfg.weights;
    let online_pred = online.to_prediction(tape);
    let momentum_pred = momentum.to_prediction(tape);
    let n = online_pred.len();

    let rps_assignment = if proposals.is_empty() {
        Assignment {
            query_for_target: Vec::new(),
        }
    } else {
        hungarian(&build_rps_cost(&online_pred, proposals, w.match_weights())?)?
    };
    let branch_cost = build_branch_cost(&online_pred, &momentum_pred, w.match_weights())?;
    let branch_assignment = match cfg.branch_matching {
        MatchStrategy::Hungarian => hungarian(&branch_cost)?,
        MatchStrategy::OneByOne => one_by_one(n),
    };

    let vars = loss_with_assignments(tape, online, momentum, proposals, cfg, &rps_assignment, &branch_assignment)?;
    let item = |v: Var| Scalar::to_f64(tape.value(v).item());
    let focal = item(vars.focal);
    let boxes = item(vars.boxes);
    let similarity = item(vars.similarity);
    let breakdown = LossBreakdown {
        total: item(vars.total),
        focal,
        boxes,
        similarity,
        rps: w.lambda_f * focal + w.lambda_b * boxes,
        ssl: w.lambda_e * similarity,
        n_matched: rps_assignment.len(),
        branch_cost: branch_assignment.cost(&branch_cost),
        projection_variance: projection_variance(&online_pred),
        rps_assignment,
        branch_assignment,
    };
    Ok((vars, breakdown))
}

/// The combined objective under fixed matchings.
///
/// Matching is piecewise constant in the predictions, so this is the
/// function whose gradient [`total_loss`] differentiates.
pub fn loss_with_assignments<T: Scalar>(
    tape: &Tape<T>,
    online: &PredictionVars,
    momentum: &PredictionVars,
    proposals: &[BoundingBox],
    cfg: &ObjectiveConfig,
    rps_assignment: &Assignment,
    branch_assignment: &Assignment,
) -> Result<LossVars> {
    let w = &cfg.weights;
    let n = tape.shape(online.logits)[0];
    let positive = rps_assignment.matched_queries(n);
    let focal = focal_loss(tape, online.logits, &positive, Some(w.focal_alpha), w.focal_gamma)?;
    let boxes = box_loss(tape, online.boxes, proposals, rps_assignment, w.giou_sub_weight)?;
    let similarity = similarity_loss(tape, momentum.projections, online.projections, branch_assignment, cfg.similarity)?;
    let rps = tape.add(tape.scale(focal, w.lambda_f), tape.scale(boxes, w.lambda_b))?;
    let total = tape.add(rps, tape.scale(similarity, w.lambda_e))?;
    Ok(LossVars {
        total,
        focal,
        boxes,
        similarity,
    })
}

/// `θ_m ← β θ_m + (1 − β) θ_o`, evaluated in 64-bit and rounded once to
/// the store's precision.
pub fn ema_update<T: Scalar>(momentum: &mut ParamStore<T>, online: &ParamStore<T>, beta: f64) -> Result<()> {
    EmaConfig { beta }.validate()?;
    momentum.check_same_layout(online)?;
    let rest = 1.0 - beta;
    for ((_, m), (_, o)) in momentum.iter_mut().zip(online.iter()) {
        for (mv, ov) in m.data_mut().iter_mut().zip(o.data()) {
            *mv = <T as Scalar>::from_f64(beta * Scalar::to_f64(*mv) + rest * Scalar::to_f64(*ov));
        }
    }
    Ok(())
}
