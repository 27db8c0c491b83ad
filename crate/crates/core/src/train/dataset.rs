//! Synthetic CTR-style datasets with a planted logistic ground truth.
//!
//! File layout (little-endian): magic `SKVDATA1`, `m: u32`, `m` cardinalities
//! as `u64`, `dim: u32`, `dense_dim: u32`, `count: u64`, `holdout: u64`, then
//! `count` fixed-width rows of `m` global feature ids (`u64`), `dense_dim`
//! values (`f32`) and a label byte. The last `holdout` rows form the holdout.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bench::zipf::Zipfian;
use crate::error::{Error, Result};
use crate::store::layout::{record_size, MAX_DIM};
use crate::tables::FEATURE_MASK;

const MAGIC: &[u8; 8] = b"SKVDATA1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    /// Cardinality of each categorical field; one id is drawn per field.
    pub cardinalities: Vec<u64>,
    pub dim: usize,
    pub dense_dim: usize,
    /// Zipfian exponent of feature popularity within a field, in `[0, 1)`.
    pub skew: f64,
    /// Training samples.
    pub num_samples: usize,
    /// Holdout samples appended after the training samples.
    pub holdout: usize,
    /// Standard deviation of the Gaussian noise added to the planted logit.
    pub noise: f64,
}

impl SyntheticTaskSpec {
    pub fn new(cardinalities: Vec<u64>, dim: usize, num_samples: usize) -> Self {
        SyntheticTaskSpec {
            cardinalities,
            dim,
            dense_dim: 4,
            skew: 0.9,
            num_samples,
            holdout: num_samples / 10,
            noise: 0.5,
        }
    }

    pub fn fields(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn total_features(&self) -> u64 {
        self.cardinalities.iter().sum()
    }

    /// Bytes needed to hold every embedding record of the task.
    pub fn embedding_bytes(&self) -> u64 {
        self.total_features() * record_size(self.dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.cardinalities.is_empty() || self.cardinalities.contains(&0) {
            return bad("every field needs at least one value");
        }
        if self.total_features() > FEATURE_MASK {
            return bad("total feature count exceeds 48 bits");
        }
        if self.dim == 0 || self.dim > MAX_DIM {
            return bad("embedding dimension out of range");
        }
        if !(0.0..1.0).contains(&self.skew) {
            return bad("skew must be in [0, 1)");
        }
        if self.num_samples == 0 {
            return bad("need at least one training sample");
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            return bad("noise must be non-negative");
        }
        Ok(())
    }
}

/// Ground truth used to label samples: one scalar per feature and a dense
/// weight vector.
#[derive(Debug, Clone)]
pub struct PlantedModel {
    pub feature_weights: Vec<f64>,
    pub dense_weights: Vec<f64>,
}

impl PlantedModel {
    pub fn new(spec: &SyntheticTaskSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_9a17_ed00_0001);
        let feature_weights = (0..spec.total_features())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let scale = 1.0 / (spec.dense_dim.max(1) as f64).sqrt();
        let dense_weights = (0..spec.dense_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        PlantedModel {
            feature_weights,
            dense_weights,
        }
    }

    pub fn logit(&self, ids: &[u64], dense: &[f32]) -> f64 {
        let s: f64 = ids.iter().map(|&i| self.feature_weights[i as usize]).sum();
        let d: f64 = dense.iter().zip(&self.dense_weights).map(|(&x, w)| x as f64 * w).sum();
        s + d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub cardinalities: Vec<u64>,
    pub dim: usize,
    pub dense_dim: usize,
    /// Row-major `len x fields` global feature ids.
    pub ids: Vec<u64>,
    /// Row-major `len x dense_dim`.
    pub dense: Vec<f32>,
    pub labels: Vec<u8>,
    pub holdout: usize,
}

impl Dataset {
    pub fn fields(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn train_len(&self) -> usize {
        self.len() - self.holdout
    }

    pub fn ids_of(&self, i: usize) -> &[u64] {
        let m = self.fields();
        &self.ids[i * m..(i + 1) * m]
    }

    pub fn dense_of(&self, i: usize) -> &[f32] {
        &self.dense[i * self.dense_dim..(i + 1) * self.dense_dim]
    }

    pub fn holdout_range(&self) -> std::ops::Range<usize> {
        self.train_len()..self.len()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(self.fields() as u32).to_le_bytes())?;
        for c in &self.cardinalities {
            w.write_all(&c.to_le_bytes())?;
        }
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.dense_dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.holdout as u64).to_le_bytes())?;
        for i in 0..self.len() {
            for id in self.ids_of(i) {
                w.write_all(&id.to_le_bytes())?;
            }
            for x in self.dense_of(i) {
                w.write_all(&x.to_le_bytes())?;
            }
            w.write_all(&[self.labels[i]])?;
        }
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Dataset> {
        let bytes = fs::read(path)?;
        let mut r = Reader { b: &bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Dataset("bad magic".into()));
        }
        let m = r.u32()? as usize;
        let cardinalities = (0..m).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let dim = r.u32()? as usize;
        let dense_dim = r.u32()? as usize;
        let count = r.u64()? as usize;
        let holdout = r.u64()? as usize;
        if holdout > count {
            return Err(Error::Dataset("holdout larger than dataset".into()));
        }
        let row = m * 8 + dense_dim * 4 + 1;
        if bytes.len() - r.at != count * row {
            return Err(Error::Dataset(format!(
                "expected {} row bytes, found {}",
                count * row,
                bytes.len() - r.at
            )));
        }
        let total: u64 = cardinalities.iter().sum();
        let mut ids = Vec::with_capacity(count * m);
        let mut dense = Vec::with_capacity(count * dense_dim);
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            for _ in 0..m {
                let id = r.u64()?;
                if id >= total {
                    return Err(Error::Dataset(format!("feature id {id} out of range")));
                }
                ids.push(id);
            }
            for _ in 0..dense_dim {
                dense.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()));
            }
            let y = r.take(1)?[0];
            if y > 1 {
                return Err(Error::Dataset(format!("label {y} is not 0 or 1")));
            }
            labels.push(y);
        }
        Ok(Dataset {
            cardinalities,
            dim,
            dense_dim,
            ids,
            dense,
            labels,
            holdout,
        })
    }
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .b
            .get(self.at..self.at + n)
            .ok_or_else(|| Error::Dataset("truncated file".into()))?;
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Deterministic in `(spec, seed)`.
pub fn synthesize(spec: &SyntheticTaskSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let planted = PlantedModel::new(spec, seed);
    let zipfs: Vec<Zipfian> = spec.cardinalities.iter().map(|&n| Zipfian::new(n, spec.skew)).collect();
    let offsets: Vec<u64> = spec
        .cardinalities
        .iter()
        .scan(0u64, |acc, &n| {
            let o = *acc;
            *acc += n;
            Some(o)
        })
        .collect();
    let count = spec.num_samples + spec.holdout;
    let m = spec.fields();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::with_capacity(count * m);
    let mut dense = Vec::with_capacity(count * spec.dense_dim);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let start = ids.len();
        for (z, off) in zipfs.iter().zip(&offsets) {
            ids.push(off + z.next(&mut rng));
        }
        let dstart = dense.len();
        for _ in 0..spec.dense_dim {
            dense.push(rng.sample::<f64, _>(StandardNormal) as f32);
        }
        let eps: f64 = rng.sample(StandardNormal);
        let z = planted.logit(&ids[start..], &dense[dstart..]) + spec.noise * eps;
        labels.push(u8::from(z > 0.0));
    }
    Ok(Dataset {
        cardinalities: spec.cardinalities.clone(),
        dim: spec.dim,
        dense_dim: spec.dense_dim,
        ids,
        dense,
        labels,
        holdout: spec.holdout,
    })
}

/// Generates the dataset and writes it to `path`.
pub fn generate_dataset(spec: &SyntheticTaskSpec, seed: u64, path: &Path) -> Result<Dataset> {
    let d = synthesize(spec, seed)?;
    d.write(path)?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::eval::auc;

    fn spec() -> SyntheticTaskSpec {
        SyntheticTaskSpec::new(vec![50, 20, 7], 4, 2000)
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        generate_dataset(&spec(), 11, &a).unwrap();
        generate_dataset(&spec(), 11, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let back = Dataset::read(&a).unwrap();
        assert_eq!(back, synthesize(&spec(), 11).unwrap());
    }

    #[test]
    fn zero_skew_is_uniform() {
        let mut s = SyntheticTaskSpec::new(vec![20], 2, 100_000);
        s.skew = 0.0;
        s.holdout = 0;
        let d = synthesize(&s, 1).unwrap();
        let mut c = [0f64; 20];
        for &id in &d.ids {
            c[id as usize] += 1.0;
        }
        let e = d.len() as f64 / 20.0;
        let sigma = (e * (1.0 - 1.0 / 20.0)).sqrt();
        for (i, k) in c.iter().enumerate() {
            assert!((k - e).abs() < 3.0 * sigma, "value {i}: {k} vs {e}");
        }
        let chi2: f64 = c.iter().map(|k| (k - e).powi(2) / e).sum();
        // 99.9th percentile of chi-square with 19 degrees of freedom.
        assert!(chi2 < 43.8, "chi2 = {chi2}");
    }

    #[test]
    fn planted_model_is_bayes_optimal_without_noise() {
        let mut s = spec();
        s.noise = 0.0;
        let d = synthesize(&s, 5).unwrap();
        let p = PlantedModel::new(&s, 5);
        let r = d.holdout_range();
        let scores: Vec<f64> = r.clone().map(|i| p.logit(d.ids_of(i), d.dense_of(i))).collect();
        let a = auc(&scores, &d.labels[r]).unwrap();
        assert!(a > 0.999, "auc {a}");
    }

    #[test]
    fn rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d");
        generate_dataset(&spec(), 1, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(Dataset::read(&p), Err(Error::Dataset(_))));
        fs::write(&p, b"nope").unwrap();
        assert!(matches!(Dataset::read(&p), Err(Error::Dataset(_))));
    }

    #[test]
    fn invalid_specs() {
        let mut s = spec();
        s.cardinalities.push(0);
        assert!(s.validate().is_err());
        let mut s = spec();
        s.skew = 1.0;
        assert!(s.validate().is_err());
    }
}
