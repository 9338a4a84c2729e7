use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqsleep_autodiff::Tensor;

use super::{Group, ModelConfig, ModelError, Strategy};
use crate::data_io::NUM_STAGES;

/// Initial gain of the batch-normalized gate pre-activations.
const BN_GAMMA_INIT: f64 = 0.1;
/// Share of each initial filter spread uniformly over all bins, so that no
/// raw filterbank weight starts at exactly zero (its gradient would vanish).
const FILTER_FLOOR: f64 = 1e-3;

/// Trainable tensors plus non-trainable buffers (batch-norm running
/// statistics), keyed by dotted names whose first segment is the group.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::ParamMismatch(format!("missing parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Effective (non-negative) filterbank, the elementwise square of the raw
    /// weights.
    pub fn effective_filterbank(&self) -> Result<Tensor, ModelError> {
        Ok(self.get("epb.filterbank")?.map(|w| w * w))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Names of every tensor in `group`.
    pub fn group_names(&self, group: Group) -> Vec<&str> {
        self.names().filter(|n| Group::of(n) == Some(group)).collect()
    }

    /// Checks that names and shapes match a fresh initialization of `config`.
    pub fn check_layout(&self) -> Result<(), ModelError> {
        let reference = init_params(&self.config, 0)?;
        for (map, want, kind) in [
            (&self.tensors, &reference.tensors, "parameter"),
            (&self.buffers, &reference.buffers, "buffer"),
        ] {
            for (name, t) in want {
                match map.get(name) {
                    None => return Err(ModelError::ParamMismatch(format!("missing {kind} `{name}`"))),
                    Some(got) if got.shape() != t.shape() => {
                        return Err(ModelError::ParamMismatch(format!(
                            "{kind} `{name}` has shape {:?}, expected {:?}",
                            got.shape(),
                            t.shape()
                        )))
                    }
                    _ => {}
                }
            }
            if let Some(extra) = map.keys().find(|k| !want.contains_key(*k)) {
                return Err(ModelError::ParamMismatch(format!("unexpected {kind} `{extra}`")));
            }
        }
        Ok(())
    }

    /// Rounds every value to the nearest 32-bit float, the precision at which
    /// checkpoints are stored.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut().chain(self.buffers.values_mut()) {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let r = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-r..r)).collect())
}

/// `M` triangular filters with linearly spaced centres over the `F` bins
/// (0 to 50 Hz at the default resolution), each normalized to sum to one.
pub fn triangular_filterbank(freq_bins: usize, filters: usize) -> Tensor {
    let span = (freq_bins - 1) as f64;
    let spacing = span / (filters + 1) as f64;
    let mut data = vec![0.0; freq_bins * filters];
    for m in 0..filters {
        let centre = spacing * (m + 1) as f64;
        let column: Vec<f64> = (0..freq_bins)
            .map(|f| (1.0 - (f as f64 - centre).abs() / spacing).max(0.0))
            .collect();
        let total: f64 = column.iter().sum();
        for (f, v) in column.iter().enumerate() {
            data[f * filters + m] = (1.0 - FILTER_FLOOR) * v / total + FILTER_FLOOR / freq_bins as f64;
        }
    }
    Tensor::new(vec![freq_bins, filters], data)
}

fn lstm(
    rng: &mut ChaCha8Rng,
    tensors: &mut BTreeMap<String, Tensor>,
    buffers: &mut BTreeMap<String, Tensor>,
    prefix: &str,
    input: usize,
    hidden: usize,
    batch_norm: bool,
) {
    for dir in ["fw", "bw"] {
        let p = format!("{prefix}.{dir}");
        tensors.insert(format!("{p}.wx"), glorot(rng, input, 4 * hidden));
        tensors.insert(format!("{p}.wh"), glorot(rng, hidden, 4 * hidden));
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].fill(1.0);
        tensors.insert(format!("{p}.b"), Tensor::new(vec![1, 4 * hidden], b));
        if batch_norm {
            tensors.insert(format!("{p}.gamma"), Tensor::full(&[1, 4 * hidden], BN_GAMMA_INIT));
            buffers.insert(format!("{p}.bn_mean"), Tensor::zeros(&[1, 4 * hidden]));
            buffers.insert(format!("{p}.bn_var"), Tensor::ones(&[1, 4 * hidden]));
        }
    }
}

/// Deterministic initialization from `seed`. Values are rounded to 32-bit
/// precision so a freshly initialized model survives a checkpoint round trip
/// unchanged.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    let c = config;
    let raw_fb = triangular_filterbank(c.freq_bins, c.filters).map(f64::sqrt);
    tensors.insert("epb.filterbank".to_string(), raw_fb);
    lstm(&mut rng, &mut tensors, &mut buffers, "epb.rnn", c.filters, c.epb_hidden, c.recurrent_batch_norm);
    tensors.insert("epb.attn.w".into(), glorot(&mut rng, 2 * c.epb_hidden, c.attention_size));
    tensors.insert("epb.attn.b".into(), Tensor::zeros(&[1, c.attention_size]));
    tensors.insert("epb.attn.v".into(), glorot(&mut rng, c.attention_size, 1));
    lstm(&mut rng, &mut tensors, &mut buffers, "spb.rnn", 2 * c.epb_hidden, c.spb_hidden, c.recurrent_batch_norm);
    tensors.insert("softmax.w".into(), glorot(&mut rng, 2 * c.spb_hidden, NUM_STAGES));
    tensors.insert("softmax.b".into(), Tensor::zeros(&[1, NUM_STAGES]));
    let mut params = ModelParams { config: config.clone(), tensors, buffers };
    params.round_to_f32();
    Ok(params)
}

/// Splits parameter names into (trainable, frozen) for a strategy.
pub fn select_groups(params: &ModelParams, strategy: Strategy) -> (BTreeSet<String>, BTreeSet<String>) {
    params
        .names()
        .map(str::to_string)
        .partition(|n| Group::of(n).is_some_and(|g| strategy.trains(g)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_filters_are_normalized() {
        let cfg = ModelConfig::default();
        let a = init_params(&cfg, 7).unwrap();
        assert_eq!(a, init_params(&cfg, 7).unwrap());
        assert_ne!(a, init_params(&cfg, 8).unwrap());
        let fb = a.effective_filterbank().unwrap();
        assert_eq!(fb.shape(), &[129, 32]);
        for m in 0..32 {
            let s: f64 = (0..129).map(|f| fb.get2(f, m)).sum();
            assert!((s - 1.0).abs() < 1e-6, "filter {m} sums to {s}");
        }
        assert!(fb.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn forget_bias_is_one() {
        let p = init_params(&ModelConfig::default(), 1).unwrap();
        let b = p.get("spb.rnn.bw.b").unwrap();
        assert!(b.data()[..64].iter().all(|&v| v == 0.0));
        assert!(b.data()[64..128].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn glorot_bound_holds() {
        let p = init_params(&ModelConfig::default(), 3).unwrap();
        let w = p.get("epb.rnn.fw.wx").unwrap();
        let r = (6.0f64 / (32 + 256) as f64).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= r));
    }

    #[test]
    fn strategies_partition_params() {
        let p = init_params(&ModelConfig { recurrent_batch_norm: true, ..ModelConfig::default() }, 0).unwrap();
        let all: BTreeSet<String> = p.names().map(str::to_string).collect();
        for s in Strategy::ALL {
            let (train, frozen) = select_groups(&p, s);
            assert!(train.is_disjoint(&frozen));
            assert_eq!(&train | &frozen, all);
        }
        let (train, frozen) = select_groups(&p, Strategy::Softmax);
        assert_eq!(train.into_iter().collect::<Vec<_>>(), ["softmax.b", "softmax.w"]);
        assert!(frozen.contains("epb.filterbank") && frozen.contains("epb.attn.v") && frozen.contains("spb.rnn.fw.wh"));
        assert!(select_groups(&p, Strategy::All).1.is_empty());
    }
}
