//! Synthetic skeleton-action dataset.
//!
//! Each class `c` has a fixed amplitude and phase per joint and axis, drawn
//! once from the seeded generator, and oscillates at `1 + c` cycles per
//! sequence:
//!
//! ```text
//! coords[t, j, a] = A[c, j, a] · sin(2π (1 + c) t / T + φ[c, j, a]) + ε,   ε ~ N(0, σ²)
//! ```
//!
//! The train stream is seeded with `seed` (class parameters are drawn from it
//! first), the test stream with `seed ^ TEST_SEED_XOR`.
//!
//! Files use the `LRSK` container: the common header followed by, per sample,
//! `label u32 | T u32 | J u32 | f64 × T·J·3` with coordinates in
//! frame-major, then joint, then axis order.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::container::{count_u32, Reader, Writer, DATASET_MAGIC};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const TEST_SEED_XOR: u64 = 0x9E37_79B9_7F4A_7C15;

pub const AMPLITUDE_RANGE: (f64, f64) = (0.5, 1.5);

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSample {
    pub frames: usize,
    pub joints: usize,
    /// `frames × joints × 3`, frame-major.
    pub coords: Vec<f64>,
    pub label: usize,
}

impl SkeletonSample {
    pub fn new(frames: usize, joints: usize, coords: Vec<f64>, label: usize) -> Result<Self> {
        if coords.len() != frames * joints * 3 {
            return Err(Error::Shape {
                op: "SkeletonSample::new",
                detail: format!("{} coords for {frames} frames × {joints} joints", coords.len()),
            });
        }
        if let Some(index) = coords.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { frames, joints, coords, label })
    }

    pub fn coord(&self, t: usize, j: usize, axis: usize) -> f64 {
        self.coords[(t * self.joints + j) * 3 + axis]
    }

    /// The sequence as a `T × 3J` matrix, one frame per row.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_raw(self.frames, self.joints * 3, self.coords.clone())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub frames: usize,
    pub joints: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { classes: 8, train_per_class: 250, test_per_class: 60, frames: 16, joints: 8, noise_sigma: 0.05, seed: 7 }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("classes", self.classes),
            ("train_per_class", self.train_per_class),
            ("test_per_class", self.test_per_class),
            ("frames", self.frames),
            ("joints", self.joints),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }

    pub fn train_seed(&self) -> u64 {
        self.seed
    }

    pub fn test_seed(&self) -> u64 {
        self.seed ^ TEST_SEED_XOR
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<SkeletonSample>,
    pub test: Vec<SkeletonSample>,
}

/// Per-class amplitude and phase for every joint/axis trace.
struct ClassMotion {
    amplitude: Vec<f64>,
    phase: Vec<f64>,
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let traces = spec.joints * 3;
    let mut train_rng = ChaCha8Rng::seed_from_u64(spec.train_seed());
    let motions: Vec<ClassMotion> = (0..spec.classes)
        .map(|_| ClassMotion {
            amplitude: (0..traces).map(|_| train_rng.random_range(AMPLITUDE_RANGE.0..AMPLITUDE_RANGE.1)).collect(),
            phase: (0..traces).map(|_| train_rng.random_range(0.0..TAU)).collect(),
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;

    let draw = |rng: &mut ChaCha8Rng, per_class: usize| -> Vec<SkeletonSample> {
        let mut out = Vec::with_capacity(per_class * spec.classes);
        for (label, motion) in motions.iter().enumerate() {
            let freq = (1 + label) as f64;
            for _ in 0..per_class {
                let mut coords = Vec::with_capacity(spec.frames * traces);
                for t in 0..spec.frames {
                    let angle = TAU * freq * t as f64 / spec.frames as f64;
                    for i in 0..traces {
                        let clean = motion.amplitude[i] * (angle + motion.phase[i]).sin();
                        coords.push(clean + noise.sample(rng));
                    }
                }
                out.push(SkeletonSample { frames: spec.frames, joints: spec.joints, coords, label });
            }
        }
        out
    };
    let train = draw(&mut train_rng, spec.train_per_class);
    let mut test_rng = ChaCha8Rng::seed_from_u64(spec.test_seed());
    let test = draw(&mut test_rng, spec.test_per_class);
    Ok(Dataset { train, test })
}

pub fn encode_samples(samples: &[SkeletonSample]) -> Result<Vec<u8>> {
    let mut w = Writer::header(DATASET_MAGIC, count_u32(samples.len())?);
    for s in samples {
        w.u32(count_u32(s.label)?);
        w.u32(count_u32(s.frames)?);
        w.u32(count_u32(s.joints)?);
        w.f64s(&s.coords);
    }
    Ok(w.finish())
}

pub fn decode_samples(bytes: &[u8]) -> Result<Vec<SkeletonSample>> {
    let (mut r, count) = Reader::open(bytes, DATASET_MAGIC)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let label = r.u32()? as usize;
        let frames = r.u32()? as usize;
        let joints = r.u32()? as usize;
        let n = frames
            .checked_mul(joints)
            .and_then(|v| v.checked_mul(3))
            .ok_or_else(|| Error::Corrupt("sample dimensions overflow".into()))?;
        let coords = r.f64s(n)?;
        out.push(SkeletonSample { frames, joints, coords, label });
    }
    r.finish()?;
    Ok(out)
}

pub fn save_dataset(path: impl AsRef<Path>, samples: &[SkeletonSample]) -> Result<()> {
    fs::write(path, encode_samples(samples)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<SkeletonSample>> {
    decode_samples(&fs::read(path)?)
}
