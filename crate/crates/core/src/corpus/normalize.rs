use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FeatureMatrix;
use crate::error::{Error, Result};

/// Per-dimension mean and scale estimated on a training corpus.
///
/// Normalization is `(x - mean) / scale`; applying it twice is not the
/// identity, so stats are fitted once and reused at inference time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl NormStats {
    pub fn fit<'a>(features: impl IntoIterator<Item = &'a FeatureMatrix>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for f in features {
            if sum.is_empty() {
                sum = vec![0.0; f.dim()];
                sq = vec![0.0; f.dim()];
            }
            for row in f.frames.rows() {
                for (j, &x) in row.iter().enumerate() {
                    let x = x as f64;
                    sum[j] += x;
                    sq[j] += x * x;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::EmptyInput("no frames to estimate normalization".into()));
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let scale = sq
            .iter()
            .zip(&mean)
            .enumerate()
            .map(|(j, (q, m))| {
                let var = (q / nf - m * m).max(0.0);
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    log::warn!("feature dimension {j} has zero variance; using unit scale");
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    fn check(&self, f: &FeatureMatrix) -> Result<()> {
        if f.dim() != self.mean.len() {
            return Err(Error::Contract(format!(
                "normalization stats have dim {}, features have {}",
                self.mean.len(),
                f.dim()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, f: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.check(f)?;
        let mut out = f.frames.clone();
        for mut row in out.rows_mut() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = ((*x as f64 - self.mean[j]) / self.scale[j]) as f32;
            }
        }
        Ok(FeatureMatrix { frames: out })
    }

    pub fn denormalize(&self, f: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.check(f)?;
        let mut out = f.frames.clone();
        for mut row in out.rows_mut() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = (*x as f64 * self.scale[j] + self.mean[j]) as f32;
            }
        }
        Ok(FeatureMatrix { frames: out })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(Error::at_path(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::at_path(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Normalize every utterance, fitting stats on `features` unless `stats` is
/// given. Returns the stats that were applied.
pub fn normalize_corpus(
    features: &mut BTreeMap<String, FeatureMatrix>,
    stats: Option<&NormStats>,
) -> Result<NormStats> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => NormStats::fit(features.values())?,
    };
    for f in features.values_mut() {
        *f = stats.normalize(f)?;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn constant_dimension_normalizes_to_zero() {
        let f = FeatureMatrix::new(Array2::from_shape_fn((10, 2), |(i, j)| if j == 0 { 3.0 } else { i as f32 }))
            .unwrap();
        let stats = NormStats::fit([&f]).unwrap();
        assert_eq!(stats.scale[0], 1.0);
        let n = stats.normalize(&f).unwrap();
        assert!(n.frames.column(0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn moments_after_normalization() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let dist = Normal::new(5.0, 2.0).unwrap();
        let f = FeatureMatrix::new(Array2::from_shape_simple_fn((10_000, 1), || dist.sample(&mut rng) as f32))
            .unwrap();
        let mut map = BTreeMap::from([("u".to_string(), f)]);
        normalize_corpus(&mut map, None).unwrap();
        let col: Vec<f64> = map["u"].frames.iter().map(|&x| x as f64).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(mean.abs() < 0.05);
        assert!((var - 1.0).abs() < 0.05);
    }

    #[test]
    fn denormalize_inverts() {
        let f = FeatureMatrix::new(Array2::from_shape_fn((50, 3), |(i, j)| ((i * 7 + j * 3) % 11) as f32 - 4.5))
            .unwrap();
        let stats = NormStats::fit([&f]).unwrap();
        let back = stats.denormalize(&stats.normalize(&f).unwrap()).unwrap();
        for (a, b) in f.frames.iter().zip(back.frames.iter()) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()), "{a} vs {b}");
        }
        let twice = stats.normalize(&stats.normalize(&f).unwrap()).unwrap();
        assert_ne!(twice, stats.normalize(&f).unwrap());
    }
}
