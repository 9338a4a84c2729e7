//! Sequence classification loss, KL divergence to the subject-independent
//! posteriors, and the KL-regularized personalization loss, both as graph
//! builders (for training and gradient checks) and as plain functions of
//! posteriors.

use std::collections::BTreeMap;

use seqsleep_autodiff::{AutodiffError, Graph, NodeId, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_io::{SleepStage, NUM_STAGES};
use crate::model::{
    batch_images, forward_batch, select_groups, BuiltModel, ModelError, ModelParams, Modes, PosteriorSequence, Strategy,
    INPUT_IMAGES,
};
use crate::preprocessing::EpochImage;

/// Guard inside every logarithm of a probability.
pub const EPS_LOG: f64 = 1e-12;

pub const INPUT_LABELS: &str = "input.labels";
pub const INPUT_SI_PROBS: &str = "input.si_probs";

#[derive(Debug, Error)]
pub enum LossError {
    #[error("{0}")]
    Shape(String),
    #[error("{name} = {value} is outside [{lo}, {hi}]")]
    OutOfRange { name: &'static str, value: f64, lo: f64, hi: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// ℓ2 coefficient λ.
    pub lambda: f64,
    /// KL coefficient α.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 1e-4, alpha: 0.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(LossError::OutOfRange { name: "lambda", value: self.lambda, lo: 0.0, hi: f64::INFINITY });
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(LossError::OutOfRange { name: "alpha", value: self.alpha, lo: 0.0, hi: 1.0 });
        }
        Ok(())
    }
}

/// How the KL regularizer enters the personalization loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlForm {
    /// Cross-entropy from the SI posteriors, `−Σ Q log P`. The SI entropy is
    /// dropped because it does not depend on the personalized model.
    CrossEntropy,
    /// Full divergence, `Σ Q (log Q − log P)`.
    Divergence,
}

/// `−(1/L) Σ Y ⊙ log(P + ε)` over every row of `probs` (all sequences of the
/// batch are summed).
pub fn ce_node(g: &mut Graph, probs: NodeId, seq_len: usize) -> NodeId {
    let labels = g.input(INPUT_LABELS);
    let logp = g.log(probs, EPS_LOG);
    let picked = g.mul(labels, logp);
    let total = g.sum(picked);
    g.scale(total, -1.0 / seq_len as f64)
}

/// `(λ/2) Σ ‖θ‖²` over the named parameters; `None` when λ = 0 or the list
/// is empty.
pub fn l2_node(g: &mut Graph, params: &[&str], lambda: f64) -> Option<NodeId> {
    if lambda == 0.0 || params.is_empty() {
        return None;
    }
    let mut acc: Option<NodeId> = None;
    for name in params {
        let p = g.param(name);
        let sq = g.square(p);
        let s = g.sum(sq);
        acc = Some(match acc {
            Some(a) => g.add(a, s),
            None => s,
        });
    }
    acc.map(|a| g.scale(a, lambda / 2.0))
}

/// KL term scaled by `1/L`, in either form, against the constant SI
/// posteriors fed as [`INPUT_SI_PROBS`].
pub fn kl_node(g: &mut Graph, probs: NodeId, seq_len: usize, form: KlForm) -> NodeId {
    let q = g.input(INPUT_SI_PROBS);
    let logp = g.log(probs, EPS_LOG);
    let inner = match form {
        KlForm::CrossEntropy => g.scale(logp, -1.0),
        KlForm::Divergence => {
            let logq = g.log(q, EPS_LOG);
            g.sub(logq, logp)
        }
    };
    let weighted = g.mul(q, inner);
    let total = g.sum(weighted);
    g.scale(total, 1.0 / seq_len as f64)
}

/// Sequence classification loss on top of a posterior node.
pub fn sequence_ce_graph(g: &mut Graph, probs: NodeId, seq_len: usize, trainable: &[&str], lambda: f64) -> NodeId {
    let ce = ce_node(g, probs, seq_len);
    match l2_node(g, trainable, lambda) {
        Some(l2) => g.add(ce, l2),
        None => ce,
    }
}

/// Personalization loss `(1−α)·CE + (λ/2)‖Θᵖ‖² + α·KL` on top of a
/// posterior node. With α = 0 the graph is exactly the sequence
/// classification loss (no KL branch is built).
pub fn personalization_graph(
    g: &mut Graph,
    probs: NodeId,
    seq_len: usize,
    trainable: &[&str],
    cfg: &LossConfig,
    form: KlForm,
) -> NodeId {
    if cfg.alpha == 0.0 {
        return sequence_ce_graph(g, probs, seq_len, trainable, cfg.lambda);
    }
    let ce = ce_node(g, probs, seq_len);
    let mut loss = g.scale(ce, 1.0 - cfg.alpha);
    if let Some(l2) = l2_node(g, trainable, cfg.lambda) {
        loss = g.add(loss, l2);
    }
    let kl = kl_node(g, probs, seq_len, form);
    let kl = g.scale(kl, cfg.alpha);
    g.add(loss, kl)
}

fn check_pair(a: &PosteriorSequence, b_len: usize, what: &str) -> Result<(), LossError> {
    if a.len() != b_len {
        return Err(LossError::Shape(format!("{what}: {} posterior rows vs {b_len}", a.len())));
    }
    Ok(())
}

fn l2_value<'a>(params: &ModelParams, trainable: impl IntoIterator<Item = &'a str>) -> Result<f64, LossError> {
    let mut total = 0.0;
    for name in trainable {
        let t = params
            .tensors
            .get(name)
            .ok_or_else(|| LossError::Shape(format!("unknown parameter `{name}`")))?;
        total += t.sq_norm();
    }
    Ok(total)
}

fn ce_value(posteriors: &[PosteriorSequence], labels: &[Vec<SleepStage>]) -> Result<f64, LossError> {
    if posteriors.len() != labels.len() {
        return Err(LossError::Shape(format!(
            "{} posterior sequences vs {} label sequences",
            posteriors.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (p, y) in posteriors.iter().zip(labels) {
        check_pair(p, y.len(), "labels")?;
        let s: f64 = p.probs.iter().zip(y).map(|(row, stage)| (row[stage.index()] + EPS_LOG).ln()).sum();
        total += -s / p.len() as f64;
    }
    Ok(total)
}

/// Sequence classification loss: `−(1/L) Σₙ Σₗ log P(yₙₗ) + (λ/2)‖Θ‖²`,
/// with the ℓ2 term over the `trainable` parameters only.
pub fn sequence_ce_loss<'a>(
    posteriors: &[PosteriorSequence],
    labels: &[Vec<SleepStage>],
    params: &ModelParams,
    trainable: impl IntoIterator<Item = &'a str>,
    lambda: f64,
) -> Result<f64, LossError> {
    let ce = ce_value(posteriors, labels)?;
    Ok(ce + lambda / 2.0 * l2_value(params, trainable)?)
}

/// `(1/L) Σₗ Σ_c Q log(Q / P)` between SI posteriors `Q` and personalized
/// posteriors `P`.
pub fn kl_divergence(si: &PosteriorSequence, personalized: &PosteriorSequence) -> Result<f64, LossError> {
    check_pair(si, personalized.len(), "kl_divergence")?;
    let total: f64 = si
        .probs
        .iter()
        .zip(&personalized.probs)
        .map(|(q, p)| (0..NUM_STAGES).map(|c| q[c] * ((q[c] + EPS_LOG).ln() - (p[c] + EPS_LOG).ln())).sum::<f64>())
        .sum();
    Ok(total / si.len() as f64)
}

/// `−(1/L) Σ Q log P`, the part of the KL divergence that depends on `P`.
pub fn kl_cross_entropy(si: &PosteriorSequence, personalized: &PosteriorSequence) -> Result<f64, LossError> {
    check_pair(si, personalized.len(), "kl_cross_entropy")?;
    let total: f64 = si
        .probs
        .iter()
        .zip(&personalized.probs)
        .map(|(q, p)| (0..NUM_STAGES).map(|c| q[c] * (p[c] + EPS_LOG).ln()).sum::<f64>())
        .sum();
    Ok(-total / si.len() as f64)
}

/// Personalization loss over a batch, in the chosen KL form.
pub fn personalization_loss<'a>(
    si: &[PosteriorSequence],
    personalized: &[PosteriorSequence],
    labels: &[Vec<SleepStage>],
    params: &ModelParams,
    trainable: impl IntoIterator<Item = &'a str>,
    cfg: &LossConfig,
    form: KlForm,
) -> Result<f64, LossError> {
    cfg.validate()?;
    if cfg.alpha == 0.0 {
        return sequence_ce_loss(personalized, labels, params, trainable, cfg.lambda);
    }
    if si.len() != personalized.len() {
        return Err(LossError::Shape(format!("{} SI vs {} personalized sequences", si.len(), personalized.len())));
    }
    let ce = ce_value(personalized, labels)?;
    let mut kl = 0.0;
    for (q, p) in si.iter().zip(personalized) {
        kl += match form {
            KlForm::CrossEntropy => kl_cross_entropy(q, p)?,
            KlForm::Divergence => kl_divergence(q, p)?,
        };
    }
    Ok((1.0 - cfg.alpha) * ce + cfg.lambda / 2.0 * l2_value(params, trainable)? + cfg.alpha * kl)
}

/// `α (1/L) Σ Q log Q` summed over the batch: the gap between the full-KL and
/// cross-entropy forms of the personalization loss.
pub fn si_entropy_gap(si: &[PosteriorSequence], alpha: f64) -> f64 {
    si.iter()
        .map(|q| {
            let s: f64 = q.probs.iter().flatten().map(|&v| v * (v + EPS_LOG).ln()).sum();
            s / q.len() as f64
        })
        .sum::<f64>()
        * alpha
}

/// Interleaves `B` per-sequence row lists into the batched `[L·B, C]` row
/// order `l·B + b`.
pub fn interleave_rows<const C: usize>(seqs: &[&[[f64; C]]]) -> Tensor {
    let batch = seqs.len();
    let len = seqs.first().map_or(0, |s| s.len());
    let mut data = vec![0.0; len * batch * C];
    for (b, rows) in seqs.iter().enumerate() {
        for (l, row) in rows.iter().enumerate() {
            data[(l * batch + b) * C..(l * batch + b + 1) * C].copy_from_slice(row);
        }
    }
    Tensor::new(vec![len * batch, C], data)
}

/// One-hot label matrix in batched row order.
pub fn label_tensor(labels: &[&[SleepStage]]) -> Tensor {
    let rows: Vec<Vec<[f64; NUM_STAGES]>> = labels.iter().map(|s| s.iter().map(|y| y.one_hot()).collect()).collect();
    let refs: Vec<&[[f64; NUM_STAGES]]> = rows.iter().map(Vec::as_slice).collect();
    interleave_rows(&refs)
}

/// SI posterior matrix in batched row order.
pub fn posterior_tensor(posteriors: &[&PosteriorSequence]) -> Tensor {
    let refs: Vec<&[[f64; NUM_STAGES]]> = posteriors.iter().map(|p| p.probs.as_slice()).collect();
    interleave_rows(&refs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub alpha: f64,
    /// Largest elementwise gradient difference between the two forms.
    pub max_grad_diff: f64,
    /// Full-KL loss minus cross-entropy loss.
    pub value_gap: f64,
    /// The SI entropy term the gap should equal.
    pub expected_gap: f64,
    pub tolerance: f64,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.max_grad_diff <= self.tolerance && (self.value_gap - self.expected_gap).abs() <= self.tolerance
    }
}

/// Evaluates the personalization loss in its full-KL and cross-entropy forms
/// on one batch and compares gradients (w.r.t. the parameters `strategy`
/// trains) and values.
pub fn loss_equivalence_check(
    personalized: &ModelParams,
    si: &ModelParams,
    seqs: &[&[EpochImage]],
    labels: &[&[SleepStage]],
    cfg: &LossConfig,
    strategy: Strategy,
) -> Result<EquivalenceReport, LossError> {
    cfg.validate()?;
    let tolerance = 1e-9;
    let seq_len = personalized.config.seq_len;
    let si_post = forward_batch(si, seqs)?;
    let si_refs: Vec<&PosteriorSequence> = si_post.iter().collect();
    let mut feed_inputs = BTreeMap::new();
    feed_inputs.insert(INPUT_IMAGES.to_string(), batch_images(personalized, seqs)?);
    feed_inputs.insert(INPUT_LABELS.to_string(), label_tensor(labels));
    feed_inputs.insert(INPUT_SI_PROBS.to_string(), posterior_tensor(&si_refs));
    let (trainable, _) = select_groups(personalized, strategy);
    let names: Vec<&str> = trainable.iter().map(String::as_str).collect();

    let mut results = Vec::new();
    for form in [KlForm::Divergence, KlForm::CrossEntropy] {
        let mut built = BuiltModel::new(&personalized.config, seqs.len(), Modes::EVAL);
        let loss = personalization_graph(&mut built.graph, built.probs, seq_len, &names, cfg, form);
        let aux = built.auxiliary_inputs(personalized)?;
        let feed = (&personalized.tensors, (&aux, &feed_inputs));
        let eval = built.graph.evaluate(&feed)?;
        let grads = built.graph.backprop_wrt(&eval, loss, &names)?;
        results.push((eval.value(loss).item(), grads));
    }
    let max_grad_diff = results[0]
        .1
        .iter()
        .map(|(name, g)| g.max_abs_diff(results[1].1.get(name).expect("same parameter set")))
        .fold(0.0, f64::max);
    let expected_gap = if cfg.alpha == 0.0 { 0.0 } else { si_entropy_gap(&si_post, cfg.alpha) };
    Ok(EquivalenceReport {
        alpha: cfg.alpha,
        max_grad_diff,
        value_gap: results[0].0 - results[1].0,
        expected_gap,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rows: &[[f64; 5]]) -> PosteriorSequence {
        PosteriorSequence { probs: rows.to_vec() }
    }

    #[test]
    fn kl_closed_forms() {
        let p = seq(&[[0.1, 0.2, 0.3, 0.25, 0.15]]);
        assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-9);
        let one_hot = seq(&[[1.0, 0.0, 0.0, 0.0, 0.0]]);
        let uniform = seq(&[[0.2; 5]]);
        assert!((kl_divergence(&one_hot, &uniform).unwrap() - 5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn ce_closed_form() {
        let p = seq(&[[0.5, 0.5, 0.0, 0.0, 0.0], [0.5, 0.5, 0.0, 0.0, 0.0]]);
        let v = ce_value(&[p], &[vec![SleepStage::W, SleepStage::N1]]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-9);
        let perfect = seq(&[[0.0, 0.0, 1.0, 0.0, 0.0]]);
        assert!(ce_value(&[perfect], &[vec![SleepStage::N2]]).unwrap().abs() < 1e-9);
    }

    #[test]
    fn config_ranges() {
        assert!(LossConfig { alpha: 1.2, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { lambda: -1.0, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { alpha: 1.0, lambda: 0.0 }.validate().is_ok());
    }
}
