use ndarray::Array2;

use super::PolicyError;
use crate::nn::checkpoint::NamedTensor;

const CLIP: f64 = 5.0;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(width: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; width],
            m2: vec![0.0; width],
        }
    }

    /// Merge a batch of rows (Chan et al. parallel update).
    fn merge(&mut self, rows: &[&[f64]]) {
        if rows.is_empty() {
            return;
        }
        let nb = rows.len() as f64;
        let w = self.mean.len();
        let mut bmean = vec![0.0; w];
        for r in rows {
            for (m, v) in bmean.iter_mut().zip(r.iter()) {
                *m += v / nb;
            }
        }
        let mut bm2 = vec![0.0; w];
        for r in rows {
            for ((s, v), m) in bm2.iter_mut().zip(r.iter()).zip(&bmean) {
                *s += (v - m) * (v - m);
            }
        }
        let total = self.count + nb;
        for d in 0..w {
            let delta = bmean[d] - self.mean[d];
            self.mean[d] += delta * nb / total;
            self.m2[d] += bm2[d] + delta * delta * self.count * nb / total;
        }
        self.count = total;
    }

    fn apply(&self, x: f64, d: usize) -> f64 {
        if self.count < 2.0 {
            return x;
        }
        let var = self.m2[d] / self.count;
        ((x - self.mean[d]) / (var + EPS).sqrt()).clamp(-CLIP, CLIP)
    }

    fn to_array(&self) -> Array2<f64> {
        let w = self.mean.len();
        Array2::from_shape_fn((3, w), |(r, c)| match r {
            0 => self.count,
            1 => self.mean[c],
            _ => self.m2[c],
        })
    }

    fn from_array(a: &Array2<f64>) -> Self {
        Self {
            count: a[[0, 0]],
            mean: a.row(1).to_vec(),
            m2: a.row(2).to_vec(),
        }
    }
}

/// Running observation statistics, kept separately for root rows (which
/// carry extra entries) and for all other joint rows.
///
/// Statistics change only when [`ObsNormalizer::update`] is called between
/// batches, so collection within a batch sees a fixed transform.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsNormalizer {
    width: usize,
    root: Moments,
    rest: Moments,
}

impl ObsNormalizer {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            root: Moments::new(width),
            rest: Moments::new(width),
        }
    }

    pub fn count(&self) -> f64 {
        self.root.count
    }

    /// Add every observation (row-major `n_joints x width`) to the statistics.
    pub fn update<'a>(&mut self, observations: impl IntoIterator<Item = &'a [f64]>) {
        let mut roots = Vec::new();
        let mut rest = Vec::new();
        for obs in observations {
            for (i, row) in obs.chunks_exact(self.width).enumerate() {
                if i == 0 {
                    roots.push(row);
                } else {
                    rest.push(row);
                }
            }
        }
        self.root.merge(&roots);
        self.rest.merge(&rest);
    }

    pub fn normalize(&self, obs: &[f64], n_joints: usize) -> Vec<f64> {
        let w = self.width;
        let mut out = obs.to_vec();
        for i in 0..n_joints {
            let m = if i == 0 { &self.root } else { &self.rest };
            for d in 0..w {
                out[i * w + d] = m.apply(obs[i * w + d], d);
            }
        }
        out
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        vec![
            NamedTensor {
                name: "obs_norm.root".into(),
                value: self.root.to_array(),
            },
            NamedTensor {
                name: "obs_norm.rest".into(),
                value: self.rest.to_array(),
            },
        ]
    }

    /// Returns `Ok(true)` if the tensor belonged to the normalizer.
    pub fn load_tensor(&mut self, t: &NamedTensor) -> Result<bool, PolicyError> {
        let slot = match t.name.as_str() {
            "obs_norm.root" => &mut self.root,
            "obs_norm.rest" => &mut self.rest,
            _ => return Ok(false),
        };
        if t.value.dim() != (3, self.width) {
            return Err(PolicyError::Checkpoint(format!("{} has shape {:?}", t.name, t.value.dim())));
        }
        *slot = Moments::from_array(&t.value);
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merged_moments_match_two_pass() {
        let data: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64 * 0.3, (i as f64).sin()]).collect();
        let mut m = Moments::new(2);
        let rows: Vec<&[f64]> = data.iter().map(|r| r.as_slice()).collect();
        m.merge(&rows[..13]);
        m.merge(&rows[13..]);
        let mean0 = data.iter().map(|r| r[0]).sum::<f64>() / 40.0;
        let var0 = data.iter().map(|r| (r[0] - mean0).powi(2)).sum::<f64>() / 40.0;
        assert!((m.mean[0] - mean0).abs() < 1e-12);
        assert!((m.m2[0] / m.count - var0).abs() < 1e-10);
    }

    #[test]
    fn fresh_normalizer_is_identity() {
        let n = ObsNormalizer::new(2);
        assert_eq!(n.normalize(&[3.0, -2.0, 1.0, 0.5], 2), vec![3.0, -2.0, 1.0, 0.5]);
    }
}
