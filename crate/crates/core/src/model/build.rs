//! Batched computation graph of the network.
//!
//! A batch of `B` sequences of `L` epochs is fed as one matrix
//! [`INPUT_IMAGES`] of shape `[T·L·B, F]`, where row `(t·L + l)·B + b` holds
//! spectral column `t` of epoch `l` of sequence `b`. Every recurrent step then
//! works on a contiguous row block, and epoch-level outputs come out in row
//! order `l·B + b`.

use std::collections::BTreeMap;

use seqsleep_autodiff::{column_moments, AutodiffError, Evaluation, Graph, NodeId, Tensor};

use super::{Group, ModelConfig, ModelError, ModelParams, Strategy};

pub const INPUT_IMAGES: &str = "input.images";

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for recurrent batch normalization.
    Train,
    /// Running statistics for recurrent batch normalization.
    Eval,
}

/// Batch-normalization mode of each recurrent block. Only matters when the
/// model uses recurrent batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Modes {
    pub epb: Mode,
    pub spb: Mode,
}

impl Modes {
    pub const EVAL: Modes = Modes { epb: Mode::Eval, spb: Mode::Eval };
    pub const TRAIN: Modes = Modes { epb: Mode::Train, spb: Mode::Train };

    /// Trainable blocks use batch statistics, frozen ones running statistics.
    pub fn for_strategy(strategy: Strategy) -> Modes {
        let pick = |g| if strategy.trains(g) { Mode::Train } else { Mode::Eval };
        Modes { epb: pick(Group::Epb), spb: pick(Group::Spb) }
    }
}

#[derive(Debug, Clone)]
pub struct BuiltModel {
    pub graph: Graph,
    /// `[L·B, 5]` posteriors, row `l·B + b`.
    pub probs: NodeId,
    /// `[L·B, 2·epb_hidden]` attention-pooled epoch vectors.
    pub epoch_vectors: NodeId,
    /// `[T, L·B]` attention weights.
    pub attention: NodeId,
    pub batch: usize,
    pub seq_len: usize,
    modes: Modes,
    batch_norm: bool,
    /// First node of each recurrent step, for locating non-finite values.
    steps: Vec<(usize, &'static str, usize)>,
    /// Un-normalized gate pre-activations per batch-normalized cell.
    bn_inputs: Vec<(String, Vec<NodeId>)>,
}

struct Builder<'a> {
    g: &'a mut Graph,
    modes: Modes,
    batch_norm: bool,
    steps: Vec<(usize, &'static str, usize)>,
    bn_inputs: Vec<(String, Vec<NodeId>)>,
}

impl Builder<'_> {
    /// One LSTM direction over `steps` row blocks of `n` rows each. Returns
    /// the hidden state for every step in input order.
    fn lstm(
        &mut self,
        block: &'static str,
        cell: &str,
        xs: NodeId,
        steps: usize,
        n: usize,
        hidden: usize,
        reverse: bool,
    ) -> Vec<NodeId> {
        let mode = if block == "EPB" { self.modes.epb } else { self.modes.spb };
        let g = &mut *self.g;
        let wx = g.param(&format!("{cell}.wx"));
        let wh = g.param(&format!("{cell}.wh"));
        let b = g.param(&format!("{cell}.b"));
        let norm = if self.batch_norm {
            let gamma = g.param(&format!("{cell}.gamma"));
            let running = match mode {
                Mode::Train => None,
                Mode::Eval => Some((g.input(&format!("{cell}.bn_scale")), g.input(&format!("{cell}.bn_shift")))),
            };
            Some((gamma, running))
        } else {
            None
        };
        let mut xw = g.matmul(xs, wx);
        if norm.is_none() {
            xw = g.add_row(xw, b);
        }
        let mut pre = Vec::new();
        let mut out = vec![None; steps];
        let mut state: Option<(NodeId, NodeId)> = None;
        let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
        for s in order {
            self.steps.push((self.g.len(), block, s));
            let g = &mut *self.g;
            let mut z = g.slice(xw, 0, s * n, (s + 1) * n);
            if let Some((h, _)) = state {
                let hw = g.matmul(h, wh);
                z = g.add(z, hw);
            }
            if let Some((gamma, running)) = norm {
                pre.push(z);
                z = match running {
                    None => g.batch_norm_cols(z, BN_EPS),
                    Some((scale, shift)) => {
                        let scaled = g.mul_row(z, scale);
                        g.add_row(scaled, shift)
                    }
                };
                z = g.mul_row(z, gamma);
                z = g.add_row(z, b);
            }
            let i = g.slice(z, 1, 0, hidden);
            let i = g.sigmoid(i);
            let cand = g.slice(z, 1, 2 * hidden, 3 * hidden);
            let cand = g.tanh(cand);
            let o = g.slice(z, 1, 3 * hidden, 4 * hidden);
            let o = g.sigmoid(o);
            let mut c = g.mul(i, cand);
            if let Some((_, c_prev)) = state {
                let f = g.slice(z, 1, hidden, 2 * hidden);
                let f = g.sigmoid(f);
                let kept = g.mul(f, c_prev);
                c = g.add(kept, c);
            }
            let tc = g.tanh(c);
            let h = g.mul(o, tc);
            state = Some((h, c));
            out[s] = Some(h);
        }
        if !pre.is_empty() && mode == Mode::Train {
            self.bn_inputs.push((cell.to_string(), pre));
        }
        out.into_iter().map(Option::unwrap).collect()
    }

    /// Bidirectional pass; returns `[steps·n, 2·hidden]` with forward states
    /// in the first half of each row.
    fn bilstm(&mut self, block: &'static str, prefix: &str, xs: NodeId, steps: usize, n: usize, hidden: usize) -> NodeId {
        let fw = self.lstm(block, &format!("{prefix}.fw"), xs, steps, n, hidden, false);
        let bw = self.lstm(block, &format!("{prefix}.bw"), xs, steps, n, hidden, true);
        let g = &mut *self.g;
        let fw = g.concat(&fw, 0);
        let bw = g.concat(&bw, 0);
        g.concat(&[fw, bw], 1)
    }

    /// Epoch block from filtered features `[T·n, M]` to epoch vectors
    /// `[n, 2h]` and attention weights `[T, n]`.
    fn epoch_block(&mut self, features: NodeId, frames: usize, n: usize, cfg: &ModelConfig) -> (NodeId, NodeId) {
        let a = self.bilstm("EPB", "epb.rnn", features, frames, n, cfg.epb_hidden);
        let width = 2 * cfg.epb_hidden;
        let g = &mut *self.g;
        let w = g.param("epb.attn.w");
        let b = g.param("epb.attn.b");
        let v = g.param("epb.attn.v");
        let proj = g.matmul(a, w);
        let proj = g.add_row(proj, b);
        let proj = g.tanh(proj);
        let scores = g.matmul(proj, v);
        let scores = g.reshape(scores, &[frames, n]);
        let scores = g.transpose(scores);
        let weights = g.softmax(scores);
        let weights = g.transpose(weights);
        let wcol = g.reshape(weights, &[frames * n, 1]);
        let weighted = g.mul_col(a, wcol);
        let weighted = g.reshape(weighted, &[frames, n * width]);
        let pooled = g.sum_rows(weighted);
        let pooled = g.reshape(pooled, &[n, width]);
        (pooled, weights)
    }

    fn filterbank(&mut self, images: NodeId) -> NodeId {
        let raw = self.g.param("epb.filterbank");
        let fb = self.g.square(raw);
        self.g.matmul(images, fb)
    }

    fn sequence_block(&mut self, vectors: NodeId, seq_len: usize, batch: usize, cfg: &ModelConfig) -> NodeId {
        self.bilstm("SPB", "spb.rnn", vectors, seq_len, batch, cfg.spb_hidden)
    }

    fn head(&mut self, outputs: NodeId) -> NodeId {
        let g = &mut *self.g;
        let w = g.param("softmax.w");
        let b = g.param("softmax.b");
        let logits = g.matmul(outputs, w);
        let logits = g.add_row(logits, b);
        g.softmax(logits)
    }
}

/// Which part of the network a partial graph covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Part {
    Full,
    /// Epoch vectors out, from filtered features `[T·n, M]` or, with
    /// `from_images`, from images `[T·n, F]`.
    EpochBlock { frames: usize, from_images: bool },
    /// Epoch vectors `[L·B, 2h]` in, sequence outputs out.
    SequenceBlock,
    /// Epoch vectors in, posteriors out; used when the epoch block is frozen.
    FromVectors,
    /// Sequence outputs in, posteriors out; used when only the softmax layer
    /// trains.
    FromOutputs,
}

pub(crate) const INPUT_FEATURES: &str = "input.features";
pub(crate) const INPUT_VECTORS: &str = "input.vectors";
pub(crate) const INPUT_OUTPUTS: &str = "input.spb_outputs";

impl BuiltModel {
    /// Graph for `batch` sequences of `cfg.seq_len` epochs.
    pub fn new(cfg: &ModelConfig, batch: usize, modes: Modes) -> Self {
        Self::build(cfg, batch, cfg.seq_len, modes, Part::Full)
    }

    pub(crate) fn build(cfg: &ModelConfig, batch: usize, seq_len: usize, modes: Modes, part: Part) -> Self {
        let mut graph = Graph::new();
        let mut b = Builder {
            g: &mut graph,
            modes,
            batch_norm: cfg.recurrent_batch_norm,
            steps: Vec::new(),
            bn_inputs: Vec::new(),
        };
        let n = seq_len * batch;
        let (probs, vectors, attention) = match part {
            Part::Full => {
                let images = b.g.input(INPUT_IMAGES);
                let features = b.filterbank(images);
                let (vectors, attention) = b.epoch_block(features, cfg.frames, n, cfg);
                let outputs = b.sequence_block(vectors, seq_len, batch, cfg);
                b.g.set_name(outputs, "spb_outputs");
                (b.head(outputs), vectors, attention)
            }
            Part::EpochBlock { frames, from_images } => {
                let features = if from_images {
                    let images = b.g.input(INPUT_IMAGES);
                    b.filterbank(images)
                } else {
                    b.g.input(INPUT_FEATURES)
                };
                let (vectors, attention) = b.epoch_block(features, frames, n, cfg);
                (vectors, vectors, attention)
            }
            Part::SequenceBlock => {
                let vectors = b.g.input(INPUT_VECTORS);
                let outputs = b.sequence_block(vectors, seq_len, batch, cfg);
                (outputs, vectors, vectors)
            }
            Part::FromVectors => {
                let vectors = b.g.input(INPUT_VECTORS);
                let outputs = b.sequence_block(vectors, seq_len, batch, cfg);
                (b.head(outputs), vectors, vectors)
            }
            Part::FromOutputs => {
                let outputs = b.g.input(INPUT_OUTPUTS);
                (b.head(outputs), outputs, outputs)
            }
        };
        let (steps, bn_inputs) = (b.steps, b.bn_inputs);
        graph.set_name(probs, "probs");
        graph.set_name(vectors, "epoch_vectors");
        graph.set_name(attention, "attention");
        BuiltModel {
            graph,
            probs,
            epoch_vectors: vectors,
            attention,
            batch,
            seq_len,
            modes,
            batch_norm: cfg.recurrent_batch_norm,
            steps,
            bn_inputs,
        }
    }

    pub fn modes(&self) -> Modes {
        self.modes
    }

    /// Extra inputs the graph needs besides parameters and images: the
    /// running-statistics affine maps of batch-normalized cells in eval mode.
    pub fn auxiliary_inputs(&self, params: &ModelParams) -> Result<BTreeMap<String, Tensor>, ModelError> {
        let mut aux = BTreeMap::new();
        if !self.batch_norm {
            return Ok(aux);
        }
        for (name, mean) in &params.buffers {
            let Some(cell) = name.strip_suffix(".bn_mean") else { continue };
            let mode = if cell.starts_with("epb") { self.modes.epb } else { self.modes.spb };
            if mode == Mode::Train {
                continue;
            }
            let var = params
                .buffers
                .get(&format!("{cell}.bn_var"))
                .ok_or_else(|| ModelError::ParamMismatch(format!("missing buffer `{cell}.bn_var`")))?;
            let scale: Vec<f64> = var.data().iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let shift: Vec<f64> = mean.data().iter().zip(&scale).map(|(m, s)| -m * s).collect();
            aux.insert(format!("{cell}.bn_scale"), Tensor::new(mean.shape().to_vec(), scale));
            aux.insert(format!("{cell}.bn_shift"), Tensor::new(mean.shape().to_vec(), shift));
        }
        Ok(aux)
    }

    /// Translates engine errors into model errors that name the recurrent
    /// block and step where a non-finite value first appeared.
    pub fn map_error(&self, err: AutodiffError) -> ModelError {
        if let AutodiffError::NonFinite { node, .. } = err {
            if let Some(&(_, block, step)) = self.steps.iter().rev().find(|(start, _, _)| *start <= node) {
                return ModelError::NonFinite { block, step };
            }
        }
        ModelError::Autodiff(err)
    }

    /// Updated running batch-norm statistics for the cells whose names
    /// satisfy `update`, from a training-mode evaluation, as
    /// `(buffer name, new value)` pairs. Statistics are shared across
    /// recurrent steps: the batch moments of all steps are averaged before the
    /// exponential moving update.
    pub fn running_stat_updates(
        &self,
        eval: &Evaluation<'_>,
        params: &ModelParams,
        update: impl Fn(&str) -> bool,
    ) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (cell, nodes) in &self.bn_inputs {
            if !update(cell) {
                continue;
            }
            let width = eval.value(nodes[0]).cols();
            let mut mean = vec![0.0; width];
            let mut var = vec![0.0; width];
            for &node in nodes {
                let z = eval.value(node);
                let (m, v) = column_moments(z.data(), z.rows(), z.cols());
                mean.iter_mut().zip(&m).for_each(|(a, b)| *a += b / nodes.len() as f64);
                var.iter_mut().zip(&v).for_each(|(a, b)| *a += b / nodes.len() as f64);
            }
            for (key, batch) in [("bn_mean", mean), ("bn_var", var)] {
                let name = format!("{cell}.{key}");
                if let Some(buf) = params.buffers.get(&name) {
                    let data = buf
                        .data()
                        .iter()
                        .zip(&batch)
                        .map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b)
                        .collect();
                    out.push((name, Tensor::new(buf.shape().to_vec(), data)));
                }
            }
        }
        out
    }
}
