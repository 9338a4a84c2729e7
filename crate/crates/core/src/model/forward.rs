use seqsleep_autodiff::{Feed, Tensor};

use super::build::{Part, INPUT_FEATURES, INPUT_VECTORS};
use super::{BuiltModel, Modes, ModelError, ModelParams, INPUT_IMAGES};
use crate::data_io::{SleepStage, NUM_STAGES};
use crate::preprocessing::{EpochImage, SequenceSample};

/// Sequences per graph evaluation when scoring many sequences.
const EVAL_CHUNK: usize = 16;

/// Stage posteriors of the `L` epochs of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSequence {
    pub probs: Vec<[f64; NUM_STAGES]>,
}

impl PosteriorSequence {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Most probable stage per epoch; ties go to the earlier stage.
    pub fn predictions(&self) -> Vec<SleepStage> {
        self.probs.iter().map(argmax_stage).collect()
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), NUM_STAGES], self.probs.iter().flatten().copied().collect())
    }
}

pub(crate) fn argmax_stage(p: &[f64; NUM_STAGES]) -> SleepStage {
    let mut best = 0;
    for c in 1..NUM_STAGES {
        if p[c] > p[best] {
            best = c;
        }
    }
    SleepStage::from_index(best).expect("class index in range")
}

/// Stacks `B` sequences of `L` images into the `[T·L·B, F]` input layout.
pub fn batch_images(params: &ModelParams, seqs: &[&[EpochImage]]) -> Result<Tensor, ModelError> {
    let cfg = &params.config;
    let (bins, frames) = (cfg.freq_bins, cfg.frames);
    let batch = seqs.len();
    let len = seqs.first().map_or(0, |s| s.len());
    if batch == 0 || len == 0 {
        return Err(ModelError::Shape("empty batch".into()));
    }
    let mut data = vec![0.0; frames * len * batch * bins];
    for (b, seq) in seqs.iter().enumerate() {
        if seq.len() != len {
            return Err(ModelError::Shape(format!("sequence {b} has {} epochs, expected {len}", seq.len())));
        }
        for (l, im) in seq.iter().enumerate() {
            if im.freq_bins() != bins || im.frames() != frames {
                return Err(ModelError::Shape(format!(
                    "image is {}x{}, model expects {bins}x{frames}",
                    im.freq_bins(),
                    im.frames()
                )));
            }
            for f in 0..bins {
                for (t, &v) in im.row(f).iter().enumerate() {
                    data[((t * len + l) * batch + b) * bins + f] = v;
                }
            }
        }
    }
    Ok(Tensor::new(vec![frames * len * batch, bins], data))
}

fn run(built: &BuiltModel, params: &ModelParams, input: (&str, Tensor)) -> Result<(Tensor, Tensor), ModelError> {
    let aux = built.auxiliary_inputs(params)?;
    let inputs = [input];
    let feed = (&params.tensors, (&aux, &inputs));
    evaluate_pair(built, &feed)
}

fn evaluate_pair<F: Feed>(built: &BuiltModel, feed: &F) -> Result<(Tensor, Tensor), ModelError> {
    let eval = built.graph.evaluate(feed).map_err(|e| built.map_error(e))?;
    Ok((eval.value(built.probs).clone(), eval.value(built.attention).clone()))
}

fn split_posteriors(probs: &Tensor, seq_len: usize, batch: usize) -> Vec<PosteriorSequence> {
    (0..batch)
        .map(|b| PosteriorSequence {
            probs: (0..seq_len)
                .map(|l| {
                    let mut row = [0.0; NUM_STAGES];
                    row.copy_from_slice(probs.row(l * batch + b));
                    row
                })
                .collect(),
        })
        .collect()
}

/// Posteriors for many image sequences, evaluated in chunks.
pub fn forward_batch(params: &ModelParams, seqs: &[&[EpochImage]]) -> Result<Vec<PosteriorSequence>, ModelError> {
    let mut out = Vec::with_capacity(seqs.len());
    let mut cached: Option<BuiltModel> = None;
    for chunk in seqs.chunks(EVAL_CHUNK) {
        let seq_len = chunk[0].len();
        let built = match cached.take() {
            Some(b) if b.batch == chunk.len() && b.seq_len == seq_len => b,
            _ => BuiltModel::build(&params.config, chunk.len(), seq_len, Modes::EVAL, Part::Full),
        };
        let images = batch_images(params, chunk)?;
        let (probs, _) = run(&built, params, (INPUT_IMAGES, images))?;
        out.extend(split_posteriors(&probs, seq_len, chunk.len()));
        cached = Some(built);
    }
    Ok(out)
}

/// Posteriors of one sequence.
pub fn forward(sample: &SequenceSample<'_>, params: &ModelParams) -> Result<PosteriorSequence, ModelError> {
    Ok(forward_batch(params, &[sample.images()])?.remove(0))
}

/// Filtered features of one epoch, `[T, M]`: column `t` of the image mapped
/// through the effective (squared) filterbank.
pub fn filterbank_forward(image: &EpochImage, params: &ModelParams) -> Result<Tensor, ModelError> {
    let fb = params.effective_filterbank()?;
    let (bins, filters) = (fb.rows(), fb.cols());
    if image.freq_bins() != bins {
        return Err(ModelError::Shape(format!(
            "image has {} bins, filterbank expects {bins}",
            image.freq_bins()
        )));
    }
    let mut g = seqsleep_autodiff::Graph::new();
    let x = g.input(INPUT_IMAGES);
    let raw = g.param("epb.filterbank");
    let w = g.square(raw);
    let y = g.matmul(x, w);
    let columns: Vec<Vec<f64>> = (0..image.frames()).map(|t| image.column(t)).collect();
    let inputs = [(INPUT_IMAGES, Tensor::from_rows(&columns))];
    let feed = (&params.tensors, &inputs);
    let eval = g.evaluate(&feed)?;
    let out = eval.value(y).clone();
    debug_assert_eq!(out.cols(), filters);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochEncoding {
    /// Attention-pooled vector, length `2·epb_hidden`.
    pub vector: Vec<f64>,
    /// Attention weights over the `T` columns.
    pub weights: Vec<f64>,
}

/// Epoch-level recurrent pass and attention pooling of filtered features
/// `[T, M]`.
pub fn epoch_encode(features: &Tensor, params: &ModelParams) -> Result<EpochEncoding, ModelError> {
    let cfg = &params.config;
    if features.shape().len() != 2 || features.cols() != cfg.filters {
        return Err(ModelError::Shape(format!(
            "features of shape {:?}, expected [T, {}]",
            features.shape(),
            cfg.filters
        )));
    }
    let frames = features.rows();
    let built = BuiltModel::build(cfg, 1, 1, Modes::EVAL, Part::EpochBlock { frames, from_images: false });
    let (vector, weights) = run(&built, params, (INPUT_FEATURES, features.clone()))?;
    Ok(EpochEncoding { vector: vector.into_data(), weights: weights.into_data() })
}

/// Epoch vectors `[n, 2·epb_hidden]` for many images, evaluated in chunks.
pub fn encode_epochs(params: &ModelParams, images: &[EpochImage]) -> Result<Tensor, ModelError> {
    let cfg = &params.config;
    let width = 2 * cfg.epb_hidden;
    let mut data = Vec::with_capacity(images.len() * width);
    let mut cached: Option<BuiltModel> = None;
    for chunk in images.chunks(4 * EVAL_CHUNK) {
        let built = match cached.take() {
            Some(b) if b.batch == chunk.len() => b,
            _ => BuiltModel::build(cfg, chunk.len(), 1, Modes::EVAL, Part::EpochBlock { frames: cfg.frames, from_images: true }),
        };
        let seqs: Vec<&[EpochImage]> = chunk.chunks(1).collect();
        let stacked = batch_images(params, &seqs)?;
        let (vectors, _) = run(&built, params, (INPUT_IMAGES, stacked))?;
        data.extend_from_slice(vectors.data());
        cached = Some(built);
    }
    if images.is_empty() {
        return Err(ModelError::Shape("no images".into()));
    }
    Ok(Tensor::new(vec![images.len(), width], data))
}

/// Sequence-level recurrent pass over epoch vectors `[L, 2·epb_hidden]`;
/// returns `[L, 2·spb_hidden]`.
pub fn sequence_encode(vectors: &Tensor, params: &ModelParams) -> Result<Tensor, ModelError> {
    let cfg = &params.config;
    if vectors.shape().len() != 2 || vectors.cols() != 2 * cfg.epb_hidden {
        return Err(ModelError::Shape(format!(
            "epoch vectors of shape {:?}, expected [L, {}]",
            vectors.shape(),
            2 * cfg.epb_hidden
        )));
    }
    let built = BuiltModel::build(cfg, 1, vectors.rows(), Modes::EVAL, Part::SequenceBlock);
    Ok(run(&built, params, (INPUT_VECTORS, vectors.clone()))?.0)
}
