//! Synthetic single-channel sleep cohorts.
//!
//! Each night is a bout-structured hypnogram drawn from a fixed stage
//! transition chain. Every epoch is band-limited noise whose amplitude
//! spectrum is a background slope plus stage-specific Gaussian peaks. A
//! subject draws one frequency shift, one overall gain and one gain per
//! spectral peak, shared by all of its nights; nights and bouts add smaller
//! perturbations on top.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::recording::{Annotation, NightRecording, EPOCH_SEC};
use super::stage::{SleepStage, NUM_STAGES};
use super::DataError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralPeak {
    pub freq_hz: f64,
    pub width_hz: f64,
    /// Per-bin amplitude at the peak centre (µV).
    pub amplitude: f64,
}

impl SpectralPeak {
    pub const fn new(freq_hz: f64, width_hz: f64, amplitude: f64) -> Self {
        Self { freq_hz, width_hz, amplitude }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageTemplates {
    pub w: Vec<SpectralPeak>,
    pub n1: Vec<SpectralPeak>,
    pub n2: Vec<SpectralPeak>,
    pub n3: Vec<SpectralPeak>,
    pub rem: Vec<SpectralPeak>,
}

impl StageTemplates {
    pub fn get(&self, stage: SleepStage) -> &[SpectralPeak] {
        match stage {
            SleepStage::W => &self.w,
            SleepStage::N1 => &self.n1,
            SleepStage::N2 => &self.n2,
            SleepStage::N3 => &self.n3,
            SleepStage::Rem => &self.rem,
        }
    }
}

impl Default for StageTemplates {
    /// Alpha-dominated wake, theta in N1 and REM, spindles over delta in N2,
    /// high-amplitude slow waves in N3.
    fn default() -> Self {
        Self {
            w: vec![SpectralPeak::new(10.0, 1.0, 1.6), SpectralPeak::new(20.0, 3.0, 0.5)],
            n1: vec![SpectralPeak::new(6.0, 1.5, 1.0), SpectralPeak::new(9.5, 1.0, 0.4)],
            n2: vec![
                SpectralPeak::new(13.0, 0.8, 1.2),
                SpectralPeak::new(2.0, 0.8, 1.0),
                SpectralPeak::new(6.0, 1.5, 0.5),
            ],
            n3: vec![SpectralPeak::new(1.5, 0.5, 3.0), SpectralPeak::new(3.0, 1.0, 0.8)],
            rem: vec![
                SpectralPeak::new(5.0, 1.5, 0.8),
                SpectralPeak::new(3.0, 0.8, 0.5),
                SpectralPeak::new(18.0, 3.0, 0.4),
            ],
        }
    }
}

/// Between-subject variation, drawn once per subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubjectVariation {
    /// Standard deviation of the additive shift applied to every peak frequency.
    pub freq_shift_sd_hz: f64,
    /// Added to the magnitude of the drawn shift, keeping its sign, so every
    /// subject is shifted by at least this much.
    pub freq_shift_floor_hz: f64,
    /// Standard deviation of the log overall gain.
    pub gain_log_sd: f64,
    /// Standard deviation of the log gain of each individual peak.
    pub peak_gain_log_sd: f64,
}

impl Default for SubjectVariation {
    fn default() -> Self {
        Self { freq_shift_sd_hz: 0.5, freq_shift_floor_hz: 0.0, gain_log_sd: 0.3, peak_gain_log_sd: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSpec {
    pub subjects: usize,
    pub nights_per_subject: usize,
    pub epochs_per_night: usize,
    /// Sequences of this many epochs must fit in a night.
    pub seq_len: usize,
    pub sample_rate: f64,
    pub templates: StageTemplates,
    /// Per-bin amplitude of the `1 / (1 + f / 2 Hz)` background at DC (µV).
    pub background: f64,
    pub subject_variation: SubjectVariation,
    /// Standard deviation of the extra per-night frequency shift.
    pub night_jitter_hz: f64,
    /// Standard deviation of the log gain drawn per peak at each new bout.
    pub bout_gain_log_sd: f64,
    /// Probability that an epoch's annotation is replaced by a neighbouring stage.
    pub label_noise: f64,
    pub self_transition: f64,
    /// Scales every transition into REM on the first night; the removed
    /// mass stays in the current stage. Models a reduced first-night REM.
    pub first_night_rem_scale: f64,
    pub subject_prefix: String,
    /// Index of the first generated subject, so several cohorts can share a namespace.
    pub first_subject: usize,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            subjects: 10,
            nights_per_subject: 2,
            epochs_per_night: 200,
            seq_len: 20,
            sample_rate: 100.0,
            templates: StageTemplates::default(),
            background: 0.4,
            subject_variation: SubjectVariation::default(),
            night_jitter_hz: 0.15,
            bout_gain_log_sd: 0.15,
            label_noise: 0.0,
            self_transition: 0.85,
            first_night_rem_scale: 1.0,
            subject_prefix: "syn".into(),
            first_subject: 0,
        }
    }
}

/// Stages reachable in one transition, besides staying put.
pub fn neighbours(stage: SleepStage) -> &'static [SleepStage] {
    use SleepStage::*;
    match stage {
        W => &[N1],
        N1 => &[W, N2, Rem],
        N2 => &[N1, N3, Rem],
        N3 => &[N2],
        Rem => &[W, N1, N2],
    }
}

/// Row-stochastic transition matrix: `self_transition` on the diagonal, the
/// rest split evenly over [`neighbours`].
pub fn transition_matrix(self_transition: f64) -> [[f64; NUM_STAGES]; NUM_STAGES] {
    let mut m = [[0.0; NUM_STAGES]; NUM_STAGES];
    for s in SleepStage::ALL {
        m[s.index()][s.index()] = self_transition;
        let next = neighbours(s);
        for n in next {
            m[s.index()][n.index()] = (1.0 - self_transition) / next.len() as f64;
        }
    }
    m
}

struct SubjectProfile {
    shift_hz: f64,
    gain: f64,
    peak_gains: Vec<Vec<f64>>,
}

fn normal(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    if sd > 0.0 {
        Normal::new(0.0, sd).unwrap().sample(rng)
    } else {
        0.0
    }
}

fn sample_stage(rng: &mut ChaCha8Rng, row: &[f64; NUM_STAGES]) -> SleepStage {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return SleepStage::ALL[i];
        }
    }
    SleepStage::ALL[NUM_STAGES - 1]
}

/// Generates `spec.subjects * spec.nights_per_subject` recordings, ordered by
/// subject then night. Output depends only on `(spec, seed)`.
pub fn generate_synthetic_cohort(spec: &CohortSpec, seed: u64) -> Result<Vec<NightRecording>, DataError> {
    if spec.epochs_per_night < spec.seq_len {
        return Err(DataError::InvalidCohort(format!(
            "{} epochs per night cannot hold a sequence of {}",
            spec.epochs_per_night, spec.seq_len
        )));
    }
    if spec.nights_per_subject < 2 {
        return Err(DataError::InvalidCohort("at least two nights per subject are required".into()));
    }
    if !(spec.sample_rate > 0.0) || (spec.sample_rate * EPOCH_SEC).fract() != 0.0 {
        return Err(DataError::InvalidCohort(format!("sample rate {}", spec.sample_rate)));
    }
    if ![spec.self_transition, spec.label_noise, spec.first_night_rem_scale].iter().all(|p| (0.0..=1.0).contains(p)) {
        return Err(DataError::InvalidCohort("probabilities must lie in [0, 1]".into()));
    }

    let epoch_len = (spec.sample_rate * EPOCH_SEC) as usize;
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(epoch_len);
    let transitions = transition_matrix(spec.self_transition);
    let mut first_night = transitions;
    for (i, row) in first_night.iter_mut().enumerate() {
        if i != SleepStage::Rem.index() {
            let removed = row[SleepStage::Rem.index()] * (1.0 - spec.first_night_rem_scale);
            row[SleepStage::Rem.index()] -= removed;
            row[i] += removed;
        }
    }

    let mut out = Vec::with_capacity(spec.subjects * spec.nights_per_subject);
    for s in 0..spec.subjects {
        let subject_number = spec.first_subject + s;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(subject_number as u64);
        let var = &spec.subject_variation;
        let profile = SubjectProfile {
            shift_hz: {
                let z = normal(&mut rng, var.freq_shift_sd_hz);
                z + var.freq_shift_floor_hz.copysign(z)
            },
            gain: normal(&mut rng, var.gain_log_sd).exp(),
            peak_gains: SleepStage::ALL
                .iter()
                .map(|&st| {
                    spec.templates
                        .get(st)
                        .iter()
                        .map(|_| normal(&mut rng, var.peak_gain_log_sd).exp())
                        .collect()
                })
                .collect(),
        };

        for night in 1..=spec.nights_per_subject {
            let night_shift = profile.shift_hz + normal(&mut rng, spec.night_jitter_hz);
            let transitions = if night == 1 { &first_night } else { &transitions };
            let mut stage = SleepStage::W;
            let mut bout_gains = draw_bout_gains(&mut rng, spec, stage);
            let mut signal = Vec::with_capacity(epoch_len * spec.epochs_per_night);
            let mut labels = Vec::with_capacity(spec.epochs_per_night);
            for e in 0..spec.epochs_per_night {
                if e > 0 {
                    let next = sample_stage(&mut rng, &transitions[stage.index()]);
                    if next != stage {
                        stage = next;
                        bout_gains = draw_bout_gains(&mut rng, spec, stage);
                    }
                }
                let amplitude = |f: f64| -> f64 {
                    let peaks = spec.templates.get(stage);
                    let gains = &profile.peak_gains[stage.index()];
                    let mut a = spec.background / (1.0 + f / 2.0);
                    for (k, p) in peaks.iter().enumerate() {
                        let centre = (p.freq_hz + night_shift).max(0.5);
                        let z = (f - centre) / p.width_hz;
                        a += p.amplitude * gains[k] * bout_gains[k] * (-0.5 * z * z).exp();
                    }
                    profile.gain * a
                };
                signal.extend(band_limited_noise(&mut rng, &*ifft, epoch_len, spec.sample_rate, amplitude));

                let noisy = if spec.label_noise > 0.0 && rng.gen::<f64>() < spec.label_noise {
                    let n = neighbours(stage);
                    n[rng.gen_range(0..n.len())]
                } else {
                    stage
                };
                labels.push(noisy);
            }
            let duration = spec.epochs_per_night as f64 * EPOCH_SEC;
            out.push(NightRecording {
                subject_id: format!("{}{:03}", spec.subject_prefix, subject_number),
                night_index: night as u32,
                signal,
                sample_rate: spec.sample_rate,
                annotations: hypnogram_to_annotations(&labels),
                lights_off: 0.0,
                lights_on: duration,
            });
        }
    }
    Ok(out)
}

fn draw_bout_gains(rng: &mut ChaCha8Rng, spec: &CohortSpec, stage: SleepStage) -> Vec<f64> {
    spec.templates
        .get(stage)
        .iter()
        .map(|_| normal(rng, spec.bout_gain_log_sd).exp())
        .collect()
}

/// Real noise with the given per-bin amplitude spectrum and random phases.
fn band_limited_noise(
    rng: &mut ChaCha8Rng,
    ifft: &dyn rustfft::Fft<f64>,
    n: usize,
    sample_rate: f64,
    amplitude: impl Fn(f64) -> f64,
) -> Vec<f64> {
    let mut spectrum = vec![Complex::new(0.0, 0.0); n];
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    for j in 1..n.div_ceil(2) {
        let f = j as f64 * sample_rate / n as f64;
        let a = amplitude(f);
        let c = Complex::new(std_normal.sample(rng), std_normal.sample(rng)) * a;
        spectrum[j] = c;
        spectrum[n - j] = c.conj();
    }
    ifft.process(&mut spectrum);
    spectrum.into_iter().map(|c| c.re).collect()
}

/// Run-length encodes per-epoch labels into annotation bouts.
pub fn hypnogram_to_annotations(labels: &[SleepStage]) -> Vec<Annotation> {
    let mut out: Vec<Annotation> = Vec::new();
    for (i, stage) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(last) if last.label == stage.name() => last.duration_sec += EPOCH_SEC,
            _ => out.push(Annotation {
                onset_sec: i as f64 * EPOCH_SEC,
                duration_sec: EPOCH_SEC,
                label: stage.name().to_string(),
            }),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transition_rows_are_stochastic() {
        for row in transition_matrix(0.85) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cohort_size_and_duration() {
        let spec = CohortSpec { subjects: 10, epochs_per_night: 200, ..CohortSpec::default() };
        let cohort = generate_synthetic_cohort(&spec, 3).unwrap();
        assert_eq!(cohort.len(), 20);
        for rec in &cohort {
            assert_eq!(rec.duration_sec(), 6000.0);
            let covered: f64 = rec.annotations.iter().map(|a| a.duration_sec).sum();
            assert_eq!(covered, 6000.0);
        }
    }

    #[test]
    fn same_seed_same_cohort() {
        let spec = CohortSpec { subjects: 2, epochs_per_night: 30, ..CohortSpec::default() };
        assert_eq!(generate_synthetic_cohort(&spec, 9).unwrap(), generate_synthetic_cohort(&spec, 9).unwrap());
        assert_ne!(generate_synthetic_cohort(&spec, 9).unwrap(), generate_synthetic_cohort(&spec, 10).unwrap());
    }

    #[test]
    fn too_short_night_is_rejected() {
        let spec = CohortSpec { epochs_per_night: 19, seq_len: 20, ..CohortSpec::default() };
        assert!(matches!(generate_synthetic_cohort(&spec, 0), Err(DataError::InvalidCohort(_))));
    }

    #[test]
    fn annotations_run_length_encode() {
        use SleepStage::*;
        let ann = hypnogram_to_annotations(&[W, W, N1, N1, N1, W]);
        assert_eq!(ann.len(), 3);
        assert_eq!((ann[1].onset_sec, ann[1].duration_sec), (60.0, 90.0));
    }
}
