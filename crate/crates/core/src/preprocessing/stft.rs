use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{EpochImage, PreprocessError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrogramParams {
    pub sample_rate: f64,
    pub epoch_sec: f64,
    pub frame_sec: f64,
    pub hop_sec: f64,
    pub fft_size: usize,
    /// Added to the amplitude before the logarithm.
    pub eps_spec: f64,
}

impl Default for SpectrogramParams {
    fn default() -> Self {
        Self {
            sample_rate: 100.0,
            epoch_sec: 30.0,
            frame_sec: 2.0,
            hop_sec: 1.0,
            fft_size: 256,
            eps_spec: 1e-6,
        }
    }
}

impl SpectrogramParams {
    pub fn epoch_len(&self) -> usize {
        (self.epoch_sec * self.sample_rate).round() as usize
    }

    pub fn frame_len(&self) -> usize {
        (self.frame_sec * self.sample_rate).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.hop_sec * self.sample_rate).round() as usize
    }

    /// Number of frequency bins `F` of the one-sided spectrum.
    pub fn freq_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of spectral columns `T`.
    pub fn frames(&self) -> usize {
        (self.epoch_len() - self.frame_len()) / self.hop_len() + 1
    }

    pub fn bin_hz(&self) -> f64 {
        self.sample_rate / self.fft_size as f64
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        let ok = self.sample_rate > 0.0
            && self.frame_len() >= 2
            && self.hop_len() >= 1
            && self.frame_len() <= self.fft_size
            && self.frame_len() <= self.epoch_len()
            && self.eps_spec > 0.0;
        if ok {
            Ok(())
        } else {
            Err(PreprocessError::InvalidParams(format!("{self:?}")))
        }
    }
}

/// Symmetric Hamming taper, `0.54 - 0.46 cos(2πn / (N - 1))`.
pub fn hamming(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Reusable transform state for many epochs with the same parameters.
pub struct Spectrogram {
    params: SpectrogramParams,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Spectrogram {
    pub fn new(params: SpectrogramParams) -> Result<Self, PreprocessError> {
        params.validate()?;
        let window = hamming(params.frame_len());
        let fft = FftPlanner::new().plan_fft_forward(params.fft_size);
        Ok(Self { params, window, fft })
    }

    pub fn params(&self) -> &SpectrogramParams {
        &self.params
    }

    /// Log-amplitude time-frequency image of one epoch.
    pub fn epoch_image(&self, samples: &[f64]) -> Result<EpochImage, PreprocessError> {
        let p = &self.params;
        if samples.len() != p.epoch_len() {
            return Err(PreprocessError::WindowLength { expected: p.epoch_len(), actual: samples.len() });
        }
        let (bins, frames) = (p.freq_bins(), p.frames());
        let (frame_len, hop) = (p.frame_len(), p.hop_len());
        let mut values = vec![0.0; bins * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); p.fft_size];
        for t in 0..frames {
            let frame = &samples[t * hop..t * hop + frame_len];
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (c, (x, w)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                c.re = x * w;
            }
            self.fft.process(&mut buf);
            for f in 0..bins {
                values[f * frames + t] = (buf[f].norm() + p.eps_spec).ln();
            }
        }
        Ok(EpochImage::new(bins, frames, values))
    }
}

pub fn stft_epoch(window: &[f64], params: &SpectrogramParams) -> Result<EpochImage, PreprocessError> {
    Spectrogram::new(params.clone())?.epoch_image(window)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let p = SpectrogramParams::default();
        assert_eq!((p.epoch_len(), p.frame_len(), p.hop_len()), (3000, 200, 100));
        assert_eq!((p.freq_bins(), p.frames()), (129, 29));
        assert_eq!(p.bin_hz(), 0.390625);
    }

    #[test]
    fn hamming_is_symmetric_with_expected_ends() {
        let w = hamming(200);
        assert!((w[0] - 0.08).abs() < 1e-12);
        for n in 0..100 {
            assert!((w[n] - w[199 - n]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_window_gives_constant_log_eps() {
        let p = SpectrogramParams::default();
        let img = stft_epoch(&vec![0.0; 3000], &p).unwrap();
        assert!(img.values().iter().all(|&v| v == p.eps_spec.ln()));
    }

    #[test]
    fn wrong_length_is_rejected() {
        let err = stft_epoch(&[0.0; 2999], &SpectrogramParams::default()).unwrap_err();
        assert!(matches!(err, PreprocessError::WindowLength { expected: 3000, actual: 2999 }));
    }
}
