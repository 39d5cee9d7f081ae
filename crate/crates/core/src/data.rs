//! Deterministic synthetic sequence datasets.
//!
//! Tokens combine a class prototype (a fixed orthonormal vector), a few
//! low-frequency sinusoids shared across dimensions, and Gaussian noise.
//! Whole-period integer frequencies cancel exactly in the token mean, so the
//! label stays linearly recoverable from global pooling, while neighboring
//! tokens remain strongly correlated for masked reconstruction.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{Matrix, Scalar};

fn default_components() -> usize {
    4
}
fn default_max_freq() -> usize {
    3
}

/// Generation parameters for one synthetic distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Tokens per sequence.
    pub seq_len: usize,
    /// Token dimensionality.
    pub patch_dim: usize,
    /// Class count.
    pub num_classes: usize,
    /// Sinusoidal components per sequence.
    #[serde(default = "default_components")]
    pub components: usize,
    /// Highest frequency in cycles per sequence.
    #[serde(default = "default_max_freq")]
    pub max_freq: usize,
    /// Additive noise standard deviation.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 4 {
            return Err(Error::InvalidConfig("seq_len must be >= 4".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be >= 2".into()));
        }
        if self.max_freq * 2 >= self.seq_len {
            return Err(Error::InvalidConfig(
                "max_freq must stay below seq_len / 2".into(),
            ));
        }
        if self.components < 1 {
            return Err(Error::InvalidConfig("components must be >= 1".into()));
        }
        if self.num_classes > self.patch_dim {
            return Err(Error::InvalidConfig(
                "orthogonal prototypes need num_classes <= patch_dim".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// A generated dataset: sequences, labels, and the prototypes behind them.
#[derive(Debug, Clone)]
pub struct Dataset<S> {
    pub spec: SyntheticSpec,
    pub sequences: Vec<Matrix<S>>,
    pub labels: Vec<usize>,
    /// `num_classes x patch_dim`, orthonormal rows.
    pub prototypes: Matrix<f64>,
}

impl<S: Scalar> Dataset<S> {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// First `fraction` of the stream for training, the rest held out.
    pub fn split(&self, fraction: f64) -> (Dataset<S>, Dataset<S>) {
        let cut = ((self.len() as f64) * fraction).round() as usize;
        let cut = cut.min(self.len());
        let head = Dataset {
            spec: self.spec.clone(),
            sequences: self.sequences[..cut].to_vec(),
            labels: self.labels[..cut].to_vec(),
            prototypes: self.prototypes.clone(),
        };
        let tail = Dataset {
            spec: self.spec.clone(),
            sequences: self.sequences[cut..].to_vec(),
            labels: self.labels[cut..].to_vec(),
            prototypes: self.prototypes.clone(),
        };
        (head, tail)
    }
}

/// Orthonormal class prototypes, fixed by the spec seed: a seeded Gaussian
/// matrix run through Gram-Schmidt.
pub fn prototypes(spec: &SyntheticSpec) -> Result<Matrix<f64>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.num_classes;
    let p = spec.patch_dim;
    let normal = rand_distr::StandardNormal;
    let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(c);
    loop {
        ortho.clear();
        let raw: Vec<Vec<f64>> = (0..c)
            .map(|_| (0..p).map(|_| rng.sample(normal)).collect())
            .collect();
        if gram_schmidt(&raw, &mut ortho) {
            break;
        }
        // Degenerate draw (vanishing residual); resample.
    }
    let mut out = Matrix::zeros(c, p);
    for (r, row) in ortho.iter().enumerate() {
        out.row_mut(r).copy_from_slice(row);
    }
    Ok(out)
}

fn gram_schmidt(raw: &[Vec<f64>], out: &mut Vec<Vec<f64>>) -> bool {
    for v in raw {
        let mut u = v.clone();
        for prev in out.iter() {
            let dot: f64 = u.iter().zip(prev.iter()).map(|(a, b)| a * b).sum();
            for (ui, pi) in u.iter_mut().zip(prev.iter()) {
                *ui -= dot * pi;
            }
        }
        let norm: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            return false;
        }
        for ui in u.iter_mut() {
            *ui /= norm;
        }
        out.push(u);
    }
    true
}

/// Generates `n` labeled sequences, a pure function of `(spec, n)`.
pub fn generate<S: Scalar>(spec: &SyntheticSpec, n: usize) -> Result<Dataset<S>> {
    spec.validate()?;
    if n < 1 {
        return Err(Error::InvalidArgument("need at least one sequence".into()));
    }
    let protos = prototypes(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x5EED_DA7A));
    let normal = rand_distr::StandardNormal;
    let t = spec.seq_len;
    let p = spec.patch_dim;

    let mut sequences = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.random_range(0..spec.num_classes);
        // Integer frequencies complete whole periods over the sequence, so
        // the oscillation sums to exactly zero across t.
        let waves: Vec<(f64, f64, f64)> = (0..spec.components)
            .map(|_| {
                let freq = rng.random_range(1..=spec.max_freq) as f64;
                let amp = 0.3 + 0.7 * rng.random::<f64>();
                let phase = rng.random::<f64>() * std::f64::consts::TAU;
                (freq, amp, phase)
            })
            .collect();
        let proto = protos.row(class);
        let mut tokens = Matrix::<S>::zeros(t, p);
        for ti in 0..t {
            let mut s = 0.0;
            for &(freq, amp, phase) in &waves {
                s += amp * (std::f64::consts::TAU * freq * ti as f64 / t as f64 + phase).sin();
            }
            for (j, v) in tokens.row_mut(ti).iter_mut().enumerate() {
                let noise: f64 = rng.sample(normal);
                *v = S::from_f64(proto[j] + s + spec.noise_sigma * noise);
            }
        }
        sequences.push(tokens);
        labels.push(class);
    }
    Ok(Dataset {
        spec: spec.clone(),
        sequences,
        labels,
        prototypes: protos,
    })
}

/// Nearest-prototype classification of the token mean; ties break to the
/// lowest class index.
pub fn oracle_label<S: Scalar>(tokens: &Matrix<S>, prototypes: &Matrix<f64>) -> usize {
    let t = tokens.rows();
    let p = tokens.cols();
    let mut mean = vec![0.0f64; p];
    for r in 0..t {
        for (m, v) in mean.iter_mut().zip(tokens.row(r).iter()) {
            *m += v.as_f64();
        }
    }
    for m in mean.iter_mut() {
        *m /= t as f64;
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for c in 0..prototypes.rows() {
        let score: f64 = mean
            .iter()
            .zip(prototypes.row(c).iter())
            .map(|(a, b)| a * b)
            .sum();
        if score > best_score {
            best_score = score;
            best = c;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Binary dump: header (T, p, C, n) as u32 LE, then per sequence T*p f32
// tokens and one u32 label.
// ---------------------------------------------------------------------------

impl<S: Scalar> Dataset<S> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        for v in [
            self.spec.seq_len,
            self.spec.patch_dim,
            self.spec.num_classes,
            self.len(),
        ] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for (tokens, &label) in self.sequences.iter().zip(self.labels.iter()) {
            for v in tokens.data() {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
            buf.extend_from_slice(&(label as u32).to_le_bytes());
        }
        buf
    }

    pub fn dump(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }
}

/// Raw contents of a dataset dump.
pub struct DatasetFile<S> {
    pub seq_len: usize,
    pub patch_dim: usize,
    pub num_classes: usize,
    pub sequences: Vec<Matrix<S>>,
    pub labels: Vec<usize>,
}

pub fn load_dataset_file<S: Scalar>(path: &Path) -> Result<DatasetFile<S>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cursor = &bytes[..];
    let mut take = |n: usize| -> Result<&[u8]> {
        if cursor.len() < n {
            return Err(Error::Parse("truncated dataset file".into()));
        }
        let (head, rest) = cursor.split_at(n);
        cursor = rest;
        Ok(head)
    };
    let mut header = [0usize; 4];
    for h in &mut header {
        *h = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    }
    let [seq_len, patch_dim, num_classes, n] = header;
    let mut sequences = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut data = Vec::with_capacity(seq_len * patch_dim);
        for _ in 0..seq_len * patch_dim {
            data.push(S::from_f64(
                f32::from_le_bytes(take(4)?.try_into().unwrap()) as f64,
            ));
        }
        sequences.push(Matrix::from_vec(seq_len, patch_dim, data)?);
        labels.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
    }
    Ok(DatasetFile {
        seq_len,
        patch_dim,
        num_classes,
        sequences,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            seq_len: 32,
            patch_dim: 16,
            num_classes: 4,
            components: 4,
            max_freq: 3,
            noise_sigma: noise,
            seed: 77,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(0.1);
        let a = generate::<f32>(&s, 20).unwrap();
        let b = generate::<f32>(&s, 20).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn prototypes_are_orthonormal() {
        let protos = prototypes(&spec(0.0)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = protos
                    .row(i)
                    .iter()
                    .zip(protos.row(j).iter())
                    .map(|(a, b)| a * b)
                    .sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10, "dot({i},{j}) = {dot}");
            }
        }
    }

    #[test]
    fn oracle_is_perfect_at_zero_noise() {
        let data = generate::<f64>(&spec(0.0), 200).unwrap();
        for (tokens, &label) in data.sequences.iter().zip(data.labels.iter()) {
            assert_eq!(oracle_label(tokens, &data.prototypes), label);
        }
    }

    #[test]
    fn oracle_stays_strong_at_mild_noise() {
        let data = generate::<f64>(&spec(0.1), 500).unwrap();
        let correct = data
            .sequences
            .iter()
            .zip(data.labels.iter())
            .filter(|(t, &l)| oracle_label(*t, &data.prototypes) == l)
            .count();
        assert!(
            correct as f64 / 500.0 >= 0.9,
            "oracle accuracy {}",
            correct as f64 / 500.0
        );
    }

    #[test]
    fn oracle_examples() {
        let data = generate::<f64>(&spec(0.0), 1).unwrap();
        // A sequence that is exactly a repeated prototype classifies as it.
        for c in 0..4 {
            let mut tokens = Matrix::<f64>::zeros(32, 16);
            for r in 0..32 {
                tokens.row_mut(r).copy_from_slice(data.prototypes.row(c));
            }
            assert_eq!(oracle_label(&tokens, &data.prototypes), c);
        }
        // All-zero tokens tie on every class; lowest index wins.
        let zeros = Matrix::<f64>::zeros(32, 16);
        assert_eq!(oracle_label(&zeros, &data.prototypes), 0);
    }

    #[test]
    fn neighboring_tokens_are_correlated() {
        // Mean lag-1 autocorrelation across dims at the default spec.
        let data = generate::<f64>(&spec(0.1), 50).unwrap();
        let t = 32;
        let mut acc = 0.0;
        let mut count = 0usize;
        for tokens in &data.sequences {
            for j in 0..16 {
                let col: Vec<f64> = (0..t).map(|r| tokens.get(r, j)).collect();
                let mean = col.iter().sum::<f64>() / t as f64;
                let var: f64 = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
                if var < 1e-12 {
                    continue;
                }
                let cov: f64 = (0..t - 1)
                    .map(|r| (col[r] - mean) * (col[r + 1] - mean))
                    .sum();
                acc += cov / var;
                count += 1;
            }
        }
        let lag1 = acc / count as f64;
        assert!(lag1 > 0.5, "lag-1 autocorrelation {lag1}");
    }

    #[test]
    fn interpolation_beats_constant_prediction() {
        // Predicting a token as the mean of its two neighbors must beat the
        // per-sequence constant-mean predictor by at least 30% MSE.
        let data = generate::<f64>(&spec(0.1), 100).unwrap();
        let t = 32;
        let p = 16;
        let mut mse_interp = 0.0;
        let mut mse_const = 0.0;
        let mut n = 0usize;
        for tokens in &data.sequences {
            let mut mean = vec![0.0f64; p];
            for r in 0..t {
                for (m, v) in mean.iter_mut().zip(tokens.row(r).iter()) {
                    *m += *v / t as f64;
                }
            }
            for r in 1..t - 1 {
                for j in 0..p {
                    let interp = 0.5 * (tokens.get(r - 1, j) + tokens.get(r + 1, j));
                    mse_interp += (tokens.get(r, j) - interp).powi(2);
                    mse_const += (tokens.get(r, j) - mean[j]).powi(2);
                    n += 1;
                }
            }
        }
        mse_interp /= n as f64;
        mse_const /= n as f64;
        assert!(
            mse_interp < 0.7 * mse_const,
            "interp {mse_interp} vs const {mse_const}"
        );
    }

    #[test]
    fn dump_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.bin");
        let data = generate::<f32>(&spec(0.2), 12).unwrap();
        data.dump(&path).unwrap();
        let loaded = load_dataset_file::<f32>(&path).unwrap();
        assert_eq!(loaded.seq_len, 32);
        assert_eq!(loaded.patch_dim, 16);
        assert_eq!(loaded.num_classes, 4);
        assert_eq!(loaded.sequences, data.sequences);
        assert_eq!(loaded.labels, data.labels);
    }

    #[test]
    fn split_is_first_fraction_then_rest() {
        let data = generate::<f32>(&spec(0.1), 10).unwrap();
        let (train, test) = data.split(0.8);
        assert_eq!(train.len(), 8);
        assert_eq!(test.len(), 2);
        assert_eq!(train.sequences[0], data.sequences[0]);
        assert_eq!(test.sequences[0], data.sequences[8]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec(0.1);
        s.seq_len = 3;
        assert!(generate::<f32>(&s, 1).is_err());
        let mut s = spec(0.1);
        s.max_freq = 16;
        assert!(generate::<f32>(&s, 1).is_err());
        let mut s = spec(0.1);
        s.num_classes = 17;
        assert!(generate::<f32>(&s, 1).is_err());
    }
}
