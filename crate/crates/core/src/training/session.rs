//! Shared minibatch machinery of pretraining and personalization.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use seqsleep_autodiff::{AutodiffError, NodeId, Tensor};

use super::{AdamState, TrainingError};
use crate::data_io::SleepStage;
use crate::losses::{label_tensor, personalization_graph, posterior_tensor, KlForm, LossConfig, INPUT_LABELS, INPUT_SI_PROBS};
use crate::model::{
    batch_images, encode_epochs, BuiltModel, Group, Modes, ModelParams, Part, PosteriorSequence, INPUT_IMAGES,
    INPUT_OUTPUTS, INPUT_VECTORS,
};
use crate::preprocessing::{EpochImage, PreparedNight};

/// A training sequence: `seq_len` epochs of night `night` from `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct SeqRef {
    pub night: usize,
    pub start: usize,
}

/// What the training graph consumes. Frozen leading blocks are evaluated
/// once up front; the results are identical to recomputing them per batch
/// because every row of the batched graph is computed independently.
pub(crate) enum Source {
    Images,
    /// Epoch vectors per night, `[epochs, 2·epb_hidden]`.
    Vectors(Vec<Tensor>),
    /// Sequence-block outputs per sequence, `[L, 2·spb_hidden]`.
    Outputs(Vec<Tensor>),
}

pub(crate) struct Session<'a> {
    pub nights: &'a [PreparedNight],
    pub seqs: Vec<SeqRef>,
    pub seq_len: usize,
    source: Source,
    /// SI posteriors aligned with `seqs`, present when the KL term is active.
    si: Option<Vec<PosteriorSequence>>,
    trainable: Vec<String>,
    trainable_groups: BTreeSet<Group>,
    modes: Modes,
    loss: LossConfig,
    graphs: HashMap<usize, (BuiltModel, NodeId)>,
}

impl<'a> Session<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &ModelParams,
        nights: &'a [PreparedNight],
        seqs: Vec<SeqRef>,
        trainable: &BTreeSet<String>,
        modes: Modes,
        loss: LossConfig,
        si: Option<Vec<PosteriorSequence>>,
        precompute_frozen: bool,
    ) -> Result<Self, TrainingError> {
        let trainable_groups: BTreeSet<Group> = trainable.iter().filter_map(|n| Group::of(n)).collect();
        let seq_len = params.config.seq_len;
        let source = if !precompute_frozen || trainable_groups.contains(&Group::Epb) {
            Source::Images
        } else {
            let vectors = nights
                .iter()
                .map(|n| encode_epochs(params, &n.images))
                .collect::<Result<Vec<_>, _>>()?;
            if trainable_groups.contains(&Group::Spb) {
                Source::Vectors(vectors)
            } else {
                let outputs = sequence_outputs(params, &vectors, &seqs, seq_len)?;
                Source::Outputs(outputs)
            }
        };
        Ok(Self {
            nights,
            seqs,
            seq_len,
            source,
            si,
            trainable: trainable.iter().cloned().collect(),
            trainable_groups,
            modes,
            loss,
            graphs: HashMap::new(),
        })
    }

    fn images(&self, s: SeqRef) -> &'a [EpochImage] {
        &self.nights[s.night].images[s.start..s.start + self.seq_len]
    }

    fn labels(&self, s: SeqRef) -> &'a [SleepStage] {
        &self.nights[s.night].labels[s.start..s.start + self.seq_len]
    }

    fn part(&self) -> Part {
        match self.source {
            Source::Images => Part::Full,
            Source::Vectors(_) => Part::FromVectors,
            Source::Outputs(_) => Part::FromOutputs,
        }
    }

    fn inputs(&self, params: &ModelParams, batch: &[usize]) -> Result<BTreeMap<String, Tensor>, TrainingError> {
        let refs: Vec<SeqRef> = batch.iter().map(|&i| self.seqs[i]).collect();
        let mut inputs = BTreeMap::new();
        match &self.source {
            Source::Images => {
                let seqs: Vec<&[EpochImage]> = refs.iter().map(|&s| self.images(s)).collect();
                inputs.insert(INPUT_IMAGES.to_string(), batch_images(params, &seqs)?);
            }
            Source::Vectors(per_night) => {
                let rows: Vec<Vec<&[f64]>> = refs
                    .iter()
                    .map(|s| (0..self.seq_len).map(|l| per_night[s.night].row(s.start + l)).collect())
                    .collect();
                inputs.insert(INPUT_VECTORS.to_string(), interleave(&rows));
            }
            Source::Outputs(per_seq) => {
                let rows: Vec<Vec<&[f64]>> = batch
                    .iter()
                    .map(|&i| (0..self.seq_len).map(|l| per_seq[i].row(l)).collect())
                    .collect();
                inputs.insert(INPUT_OUTPUTS.to_string(), interleave(&rows));
            }
        }
        let labels: Vec<&[SleepStage]> = refs.iter().map(|&s| self.labels(s)).collect();
        inputs.insert(INPUT_LABELS.to_string(), label_tensor(&labels));
        if let Some(si) = &self.si {
            let posts: Vec<&PosteriorSequence> = batch.iter().map(|&i| &si[i]).collect();
            inputs.insert(INPUT_SI_PROBS.to_string(), posterior_tensor(&posts));
        }
        Ok(inputs)
    }

    /// Forward, backward and one Adam update on the sequences `batch`
    /// (indices into `seqs`). Returns the batch loss, or `None` without
    /// touching the parameters when the loss is not finite.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        adam: &mut AdamState,
        batch: &[usize],
        lr: f64,
    ) -> Result<Option<f64>, TrainingError> {
        let inputs = self.inputs(params, batch)?;
        let part = self.part();
        let (built, loss) = self.graphs.entry(batch.len()).or_insert_with(|| {
            let mut built = BuiltModel::build(&params.config, batch.len(), self.seq_len, self.modes, part);
            let names: Vec<&str> = self.trainable.iter().map(String::as_str).collect();
            let loss = personalization_graph(
                &mut built.graph,
                built.probs,
                self.seq_len,
                &names,
                &self.loss,
                KlForm::CrossEntropy,
            );
            (built, loss)
        });
        let aux = built.auxiliary_inputs(params)?;
        let (value, grads, stats) = {
            let feed = (&params.tensors, (&aux, &inputs));
            let eval = match built.graph.evaluate(&feed) {
                Ok(eval) => eval,
                Err(AutodiffError::NonFinite { .. }) => return Ok(None),
                Err(e) => return Err(built.map_error(e).into()),
            };
            let value = eval.value(*loss).item();
            if !value.is_finite() {
                return Ok(None);
            }
            let names: Vec<&str> = self.trainable.iter().map(String::as_str).collect();
            let grads = built.graph.backprop_wrt(&eval, *loss, &names)?.into_map();
            let groups = &self.trainable_groups;
            let stats = built.running_stat_updates(&eval, params, |cell| {
                Group::of(cell).is_some_and(|g| groups.contains(&g))
            });
            (value, grads, stats)
        };
        adam.update(params, &grads, lr)?;
        for (name, t) in stats {
            params.buffers.insert(name, t);
        }
        Ok(Some(value))
    }
}

fn interleave(rows: &[Vec<&[f64]>]) -> Tensor {
    let batch = rows.len();
    let len = rows[0].len();
    let width = rows[0][0].len();
    let mut data = vec![0.0; len * batch * width];
    for (b, seq) in rows.iter().enumerate() {
        for (l, row) in seq.iter().enumerate() {
            let at = (l * batch + b) * width;
            data[at..at + width].copy_from_slice(row);
        }
    }
    Tensor::new(vec![len * batch, width], data)
}

fn sequence_outputs(
    params: &ModelParams,
    vectors: &[Tensor],
    seqs: &[SeqRef],
    seq_len: usize,
) -> Result<Vec<Tensor>, TrainingError> {
    let built = BuiltModel::build(&params.config, 1, seq_len, Modes::EVAL, Part::SequenceBlock);
    let aux = built.auxiliary_inputs(params)?;
    let mut out = Vec::with_capacity(seqs.len());
    for s in seqs {
        let rows: Vec<Vec<f64>> = (0..seq_len).map(|l| vectors[s.night].row(s.start + l).to_vec()).collect();
        let inputs = [(INPUT_VECTORS, Tensor::from_rows(&rows))];
        let feed = (&params.tensors, (&aux, &inputs));
        let eval = built.graph.evaluate(&feed).map_err(|e| built.map_error(e))?;
        out.push(eval.value(built.probs).clone());
    }
    Ok(out)
}
