//! Synthetic temporal-action datasets: Gaussian background with class
//! signatures planted under a ramped envelope.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::array::{read_array, write_array, DenseArray};
use crate::error::{Error, Result};
use crate::liquid::DEFAULT_DT;
use crate::pyramid::ActionSegment;
use crate::seed::derive_seed;

const SIGNATURE_SALT: u64 = 0x5167_u64;
const DURATION_RETRIES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Total videos, test split included.
    pub num_videos: usize,
    /// The last `test_videos` videos form the test split.
    pub test_videos: usize,
    pub seq_len: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub min_segments: usize,
    pub max_segments: usize,
    /// Segment lengths in tokens, inclusive.
    pub min_duration: usize,
    pub max_duration: usize,
    pub noise_sigma: f64,
    pub base_dt: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_videos: 250,
            test_videos: 50,
            seq_len: 256,
            feature_dim: 32,
            num_classes: 5,
            min_segments: 1,
            max_segments: 3,
            min_duration: 8,
            max_duration: 48,
            noise_sigma: 0.25,
            base_dt: DEFAULT_DT,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_videos == 0 || self.test_videos > self.num_videos {
            return fail(format!(
                "need num_videos >= 1 and test_videos <= num_videos (got {} / {})",
                self.num_videos, self.test_videos
            ));
        }
        if self.seq_len == 0 || self.feature_dim == 0 || self.num_classes == 0 {
            return fail("seq_len, feature_dim and num_classes must be positive".into());
        }
        if self.min_segments > self.max_segments {
            return fail("min_segments > max_segments".into());
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return fail("duration range must satisfy 1 <= min <= max".into());
        }
        if self.max_duration >= self.seq_len {
            return fail(format!(
                "max_duration {} must be shorter than seq_len {}",
                self.max_duration, self.seq_len
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail("noise_sigma must be finite and >= 0".into());
        }
        if !(self.base_dt > 0.0) {
            return fail("base_dt must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub id: String,
    pub split: Split,
    /// `T × feature_dim`
    pub features: DenseArray<f32>,
    /// Sorted by start, scores fixed at 1.
    pub segments: Vec<ActionSegment>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub base_dt: f64,
    /// Unit-norm direction per class.
    pub signatures: Vec<Vec<f64>>,
    pub videos: Vec<Video>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Video> {
        self.videos.iter().filter(move |v| v.split == split)
    }
}

/// Attack/decay envelope of a segment of `len` tokens: linear ramps over
/// `max(1, round(len / 10))` tokens at each end, 1 in between.
pub fn envelope(len: usize) -> Vec<f64> {
    let ramp = ((len as f64 * 0.1).round() as usize).max(1) as f64;
    (0..len)
        .map(|j| {
            let up = (j + 1) as f64 / ramp;
            let down = (len - j) as f64 / ramp;
            up.min(down).min(1.0)
        })
        .collect()
}

fn signatures(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, SIGNATURE_SALT));
    (0..spec.num_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..spec.feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// Non-overlapping placement: `(start, len)` pairs sorted by start.
fn place_segments(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize)>> {
    let n = rng.random_range(spec.min_segments..=spec.max_segments);
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut lens = Vec::new();
    for _ in 0..DURATION_RETRIES {
        lens = (0..n)
            .map(|_| rng.random_range(spec.min_duration..=spec.max_duration))
            .collect::<Vec<_>>();
        if lens.iter().sum::<usize>() <= spec.seq_len {
            break;
        }
        lens.clear();
    }
    if lens.is_empty() {
        return Err(Error::Infeasible(format!(
            "{n} segments of {}..={} tokens do not fit in {} tokens",
            spec.min_duration, spec.max_duration, spec.seq_len
        )));
    }
    // Distribute the free tokens over the n + 1 gaps.
    let free = spec.seq_len - lens.iter().sum::<usize>();
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    lens.shuffle(rng);
    let mut out = Vec::with_capacity(n);
    let (mut used, mut prev_cut) = (0, 0);
    for (cut, len) in cuts.into_iter().zip(lens) {
        let start = used + (cut - prev_cut);
        out.push((start, len));
        used = start + len;
        prev_cut = cut;
    }
    Ok(out)
}

/// Deterministic in `spec.seed`; each video draws from its own derived
/// stream so generation order does not matter.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    if spec.min_segments * spec.min_duration > spec.seq_len {
        return Err(Error::Infeasible(format!(
            "{} segments of at least {} tokens cannot fit in {} tokens",
            spec.min_segments, spec.min_duration, spec.seq_len
        )));
    }
    let sigs = signatures(spec);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let (t, c) = (spec.seq_len, spec.feature_dim);
    let first_test = spec.num_videos - spec.test_videos;

    let mut videos = Vec::with_capacity(spec.num_videos);
    for i in 0..spec.num_videos {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, i as u64 + 1));
        let placed = place_segments(spec, &mut rng)?;
        let mut data = vec![0.0f64; t * c];
        let mut segments = Vec::with_capacity(placed.len());
        for &(start, len) in &placed {
            let class_id = rng.random_range(0..spec.num_classes);
            for (j, e) in envelope(len).into_iter().enumerate() {
                let row = &mut data[(start + j) * c..(start + j + 1) * c];
                for (x, s) in row.iter_mut().zip(&sigs[class_id]) {
                    *x = e * s;
                }
            }
            segments.push(ActionSegment::new(
                start as f64 * spec.base_dt,
                (start + len) as f64 * spec.base_dt,
                class_id,
                1.0,
            )?);
        }
        if spec.noise_sigma > 0.0 {
            for x in data.iter_mut() {
                *x += noise.sample(&mut rng);
            }
        }
        let features = DenseArray::new(vec![t, c], data.into_iter().map(|x| x as f32).collect())?;
        videos.push(Video {
            id: format!("video_{i:04}"),
            split: if i >= first_test { Split::Test } else { Split::Train },
            features,
            segments,
        });
    }
    Ok(Dataset {
        num_classes: spec.num_classes,
        feature_dim: c,
        base_dt: spec.base_dt,
        signatures: sigs,
        videos,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    num_classes: usize,
    feature_dim: usize,
    base_dt: f64,
    signatures: Vec<Vec<f64>>,
    videos: Vec<ManifestVideo>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestVideo {
    id: String,
    split: Split,
    num_tokens: usize,
    segments: Vec<ActionSegment>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FEATURE_DIR: &str = "features";

/// Writes `manifest.json` and `features/<video_id>.lqt` under `dir`.
pub fn save(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join(FEATURE_DIR))?;
    let manifest = Manifest {
        num_classes: dataset.num_classes,
        feature_dim: dataset.feature_dim,
        base_dt: dataset.base_dt,
        signatures: dataset.signatures.clone(),
        videos: dataset
            .videos
            .iter()
            .map(|v| ManifestVideo {
                id: v.id.clone(),
                split: v.split,
                num_tokens: v.features.shape()[0],
                segments: v.segments.clone(),
            })
            .collect(),
    };
    for v in &dataset.videos {
        write_array(&dir.join(FEATURE_DIR).join(format!("{}.lqt", v.id)), &v.features)?;
    }
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?).map_err(|e| Error::Corrupt {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for mv in manifest.videos {
        let path = dir.join(FEATURE_DIR).join(format!("{}.lqt", mv.id));
        let features = read_array::<f32>(&path)?;
        if features.shape() != [mv.num_tokens, manifest.feature_dim] {
            return Err(Error::Mismatch(format!(
                "{}: header shape {:?}, manifest says [{}, {}]",
                path.display(),
                features.shape(),
                mv.num_tokens,
                manifest.feature_dim
            )));
        }
        for s in &mv.segments {
            s.validate()?;
        }
        videos.push(Video {
            id: mv.id,
            split: mv.split,
            features,
            segments: mv.segments,
        });
    }
    Ok(Dataset {
        num_classes: manifest.num_classes,
        feature_dim: manifest.feature_dim,
        base_dt: manifest.base_dt,
        signatures: manifest.signatures,
        videos,
    })
}
