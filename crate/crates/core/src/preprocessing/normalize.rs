use serde::{Deserialize, Serialize};

use super::{EpochImage, PreprocessError};

/// Which statistics standardize a night.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormAxis {
    /// One mean/std pair per frequency bin.
    #[default]
    PerBin,
    /// A single mean/std pair for the whole night.
    Global,
}

/// Statistics used to standardize one night.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub axis: NormAxis,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Standardizes a night's images by that night's own mean and (population)
/// standard deviation, computed over every column of every epoch.
pub fn per_night_normalize(
    images: &[EpochImage],
    axis: NormAxis,
) -> Result<(Vec<EpochImage>, NormStats), PreprocessError> {
    if images.len() < 2 {
        return Err(PreprocessError::TooFewEpochs { needed: 2, found: images.len() });
    }
    let (bins, frames) = (images[0].freq_bins(), images[0].frames());
    if let Some(bad) = images.iter().find(|im| im.freq_bins() != bins || im.frames() != frames) {
        return Err(PreprocessError::ImageShape {
            expected: (bins, frames),
            actual: (bad.freq_bins(), bad.frames()),
        });
    }
    let groups = match axis {
        NormAxis::PerBin => bins,
        NormAxis::Global => 1,
    };
    let group_of = |f: usize| if groups == 1 { 0 } else { f };
    let per_group = (images.len() * frames * bins / groups) as f64;

    let mut mean = vec![0.0; groups];
    for im in images {
        for f in 0..bins {
            mean[group_of(f)] += im.row(f).iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= per_group);

    let mut var = vec![0.0; groups];
    for im in images {
        for f in 0..bins {
            let m = mean[group_of(f)];
            var[group_of(f)] += im.row(f).iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / per_group).sqrt()).collect();
    if let Some(bin) = std.iter().position(|&s| !(s > 0.0)) {
        return Err(PreprocessError::ZeroStd { bin });
    }

    let normalized = images
        .iter()
        .map(|im| {
            let mut out = im.clone();
            for f in 0..bins {
                let (m, s) = (mean[group_of(f)], std[group_of(f)]);
                out.row_mut(f).iter_mut().for_each(|v| *v = (*v - m) / s);
            }
            out
        })
        .collect();
    Ok((normalized, NormStats { axis, mean, std }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_bin_is_a_zero_std_error() {
        let mk = |x: f64| EpochImage::new(2, 3, vec![x, x + 1.0, x - 1.0, 5.0, 5.0, 5.0]);
        let err = per_night_normalize(&[mk(0.0), mk(2.0)], NormAxis::PerBin).unwrap_err();
        assert!(matches!(err, PreprocessError::ZeroStd { bin: 1 }));
        // A global pair still has spread.
        assert!(per_night_normalize(&[mk(0.0), mk(2.0)], NormAxis::Global).is_ok());
    }

    #[test]
    fn single_epoch_is_rejected() {
        let im = EpochImage::new(1, 2, vec![0.0, 1.0]);
        assert!(per_night_normalize(&[im], NormAxis::PerBin).is_err());
    }
}
