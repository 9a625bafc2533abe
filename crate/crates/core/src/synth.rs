//! Synthetic cross-pose data oracle.
//!
//! Each identity is a unit-norm latent vector. An observation of that
//! identity under a pose is the latent pushed through a pose-dependent
//! distortion: planar rotations over fixed coordinate pairs (geometric
//! distortion) followed by a yaw-driven occlusion mask, plus Gaussian
//! noise. Pose embeddings are a tanh lift of the normalized angles through
//! a fixed seeded matrix, standing in for an external pose estimator.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const FRONTAL_MAX_ANGLE: f64 = 10.0;
pub const PROFILE_MIN_ANGLE: f64 = 40.0;
pub const POSE_NOISE_SIGMA: f64 = 0.02;

// seed-derivation tags
const TAG_IDENTITY: u64 = 0x11;
const TAG_LATENT_BASIS: u64 = 0x12;

/// Dimension of the shared identity subspace (see `identity_latent`).
const IDENTITY_SUBSPACE_DIM: usize = 24;
const TAG_POSE_DRAW: u64 = 0x22;
const TAG_OBS_NOISE: u64 = 0x33;
const TAG_WORLD_PLANES: u64 = 0x44;
const TAG_WORLD_OCCLUSION: u64 = 0x45;
const TAG_WORLD_POSE_MATRIX: u64 = 0x46;
const TAG_POSE_EMBED_NOISE: u64 = 0x47;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl Pose {
    pub fn new(yaw: f64, pitch: f64, roll: f64) -> Result<Self> {
        for a in [yaw, pitch, roll] {
            if !(-90.0..=90.0).contains(&a) {
                return Err(Error::Contract(format!("pose angle {a} outside [-90, 90]")));
            }
        }
        Ok(Pose { yaw, pitch, roll })
    }

    pub fn frontal() -> Self {
        Pose { yaw: 0.0, pitch: 0.0, roll: 0.0 }
    }

    pub fn max_abs(&self) -> f64 {
        self.yaw.abs().max(self.pitch.abs()).max(self.roll.abs())
    }

    pub fn is_frontal(&self) -> bool {
        self.max_abs() <= FRONTAL_MAX_ANGLE
    }

    pub fn is_profile_eligible(&self) -> bool {
        self.max_abs() >= PROFILE_MIN_ANGLE
    }
}

#[derive(Debug, Clone)]
pub struct PoseEmbedding {
    pub angles: Pose,
    pub feature: Tensor,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub observation: Tensor,
    pub identity: usize,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub frontal_fraction: f64,
    pub observation_dim: usize,
    pub pose_dim: usize,
    pub noise_sigma: f64,
    pub occlusion_strength: f64,
    pub seed: u64,
    /// Seed for the observation model itself (plane assignment, occlusion
    /// order, pose-embedding matrix). Defaults to `seed`; a held-out
    /// evaluation set uses a fresh `seed` but the training run's world seed
    /// so both sets live in the same world.
    pub world_seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0 || self.samples_per_identity == 0 {
            return Err(Error::Config("dataset counts must be positive".into()));
        }
        if self.observation_dim < 2 || self.pose_dim == 0 {
            return Err(Error::Config("dataset dims must be positive (D >= 2)".into()));
        }
        if !(self.frontal_fraction > 0.0 && self.frontal_fraction < 1.0) {
            return Err(Error::Config(format!(
                "frontal_fraction must be in (0,1), got {}",
                self.frontal_fraction
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_strength) {
            return Err(Error::Config("occlusion_strength must be in [0,1]".into()));
        }
        Ok(())
    }
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_identities: 200,
            samples_per_identity: 6,
            frontal_fraction: 0.5,
            observation_dim: 96,
            pose_dim: 16,
            noise_sigma: 0.05,
            occlusion_strength: 0.3,
            seed: 42,
            world_seed: 42,
        }
    }
}

/// The deterministic observation model shared by every sample drawn from
/// one world seed.
#[derive(Debug, Clone)]
pub struct World {
    dim: usize,
    pose_dim: usize,
    /// coordinate pairs per axis (yaw, pitch, roll)
    planes: [Vec<(usize, usize)>; 3],
    occlusion_order: Vec<usize>,
    /// pose_dim x 3 projection for the pose embedding
    pose_matrix: Vec<f64>,
}

impl World {
    pub fn new(dim: usize, pose_dim: usize, world_seed: u64) -> Self {
        let mut order: Vec<usize> = (0..dim).collect();
        let mut r = rng::stream(world_seed, TAG_WORLD_PLANES);
        rng::shuffle(&mut r, &mut order);
        let mut planes: [Vec<(usize, usize)>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for (t, pair) in order.chunks_exact(2).enumerate() {
            planes[t % 3].push((pair[0], pair[1]));
        }
        let mut occlusion_order: Vec<usize> = (0..dim).collect();
        let mut r = rng::stream(world_seed, TAG_WORLD_OCCLUSION);
        rng::shuffle(&mut r, &mut occlusion_order);
        let mut r = rng::stream(world_seed, TAG_WORLD_POSE_MATRIX);
        let pose_matrix: Vec<f64> = (0..pose_dim * 3).map(|_| rng::gauss(&mut r)).collect();
        World { dim, pose_dim, planes, occlusion_order, pose_matrix }
    }

    pub fn for_spec(spec: &DatasetSpec) -> Self {
        World::new(spec.observation_dim, spec.pose_dim, spec.world_seed)
    }

    fn rotate(&self, z: &[f64], pose: &Pose) -> Vec<f64> {
        let mut out = z.to_vec();
        for (axis, angle) in [(0, pose.yaw), (1, pose.pitch), (2, pose.roll)] {
            let rad = angle.to_radians();
            let (sin, cos) = rad.sin_cos();
            for &(i, j) in &self.planes[axis] {
                let (a, b) = (out[i], out[j]);
                out[i] = a * cos - b * sin;
                out[j] = a * sin + b * cos;
            }
        }
        out
    }

    pub fn occluded_count(&self, pose: &Pose, occlusion_strength: f64) -> usize {
        let s = pose.yaw.abs().to_radians().sin();
        (occlusion_strength * self.dim as f64 * s).ceil() as usize
    }

    /// Observation of identity latent `z` under `pose`.
    pub fn observe(
        &self,
        z: &Tensor,
        pose: &Pose,
        occlusion_strength: f64,
        noise_sigma: f64,
        noise_seed: u64,
    ) -> Result<Tensor> {
        if (z.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "observe: identity latent must be unit norm, got {}",
                z.norm()
            )));
        }
        let mut out = self.rotate(z.data(), pose);
        let k = self.occluded_count(pose, occlusion_strength).min(self.dim);
        for &i in self.occlusion_order.iter().take(k) {
            out[i] = 0.0;
        }
        if noise_sigma > 0.0 {
            let mut r = rng::stream(noise_seed, TAG_OBS_NOISE);
            for v in out.iter_mut() {
                *v += noise_sigma * rng::gauss(&mut r);
            }
        }
        Ok(Tensor::vector(out))
    }

    /// tanh lift of the normalized angles through the fixed projection,
    /// plus seeded noise. The noise seed derives from the angle bits so the
    /// embedding is a deterministic function of the pose.
    pub fn pose_embed(&self, pose: &Pose, sigma: f64) -> PoseEmbedding {
        let a = [pose.yaw / 90.0, pose.pitch / 90.0, pose.roll / 90.0];
        let mut feature = vec![0.0; self.pose_dim];
        for (i, f) in feature.iter_mut().enumerate() {
            let lin: f64 = (0..3).map(|j| self.pose_matrix[i * 3 + j] * a[j]).sum();
            *f = lin.tanh();
        }
        if sigma > 0.0 {
            let tag = pose
                .yaw
                .to_bits()
                .wrapping_mul(3)
                .wrapping_add(pose.pitch.to_bits().rotate_left(17))
                .wrapping_add(pose.roll.to_bits().rotate_left(39));
            let mut r = rng::stream(rng::mix(tag, TAG_POSE_EMBED_NOISE), 0);
            for f in feature.iter_mut() {
                *f += sigma * rng::gauss(&mut r);
            }
        }
        PoseEmbedding { angles: *pose, feature: Tensor::vector(feature) }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn world(&self) -> World {
        World::for_spec(&self.spec)
    }

    /// Dataset restricted to frontal samples (identity labels kept).
    pub fn frontal_only(&self) -> Dataset {
        Dataset {
            spec: self.spec.clone(),
            samples: self.samples.iter().filter(|s| s.pose.is_frontal()).cloned().collect(),
        }
    }
}

fn draw_pose(r: &mut rand_chacha::ChaCha8Rng, frontal_fraction: f64) -> Pose {
    let frontal = r.random::<f64>() < frontal_fraction;
    let mut angle = |frontal: bool| -> f64 {
        if frontal {
            r.random_range(-FRONTAL_MAX_ANGLE..=FRONTAL_MAX_ANGLE)
        } else {
            let mag = r.random_range(FRONTAL_MAX_ANGLE..=90.0);
            if r.random::<bool>() {
                mag
            } else {
                -mag
            }
        }
    };
    Pose { yaw: angle(frontal), pitch: angle(frontal), roll: angle(frontal) }
}

/// Unit-norm latent vector for one identity under this spec's seed.
/// Identities share a world-fixed random subspace of the observation
/// space, so impostors are correlated and separating them requires a
/// discriminative extractor rather than raw-coordinate luck.
pub fn identity_latent(spec: &DatasetSpec, identity: usize) -> Tensor {
    let d = spec.observation_dim;
    let k = IDENTITY_SUBSPACE_DIM.min(d);
    let mut br = rng::stream(spec.world_seed, TAG_LATENT_BASIS);
    let basis: Vec<f64> = (0..k * d).map(|_| rng::gauss(&mut br)).collect();
    let mut idr = rng::stream(spec.seed, rng::mix(TAG_IDENTITY, identity as u64));
    let coeffs: Vec<f64> = (0..k).map(|_| rng::gauss(&mut idr)).collect();
    let mut z = vec![0.0; d];
    for (j, c) in coeffs.iter().enumerate() {
        for (i, zi) in z.iter_mut().enumerate() {
            *zi += c * basis[j * d + i];
        }
    }
    let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    Tensor::vector(z.into_iter().map(|v| v / n).collect())
}

pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let world = World::for_spec(spec);
    let mut samples = Vec::with_capacity(spec.num_identities * spec.samples_per_identity);
    for identity in 0..spec.num_identities {
        let z = identity_latent(spec, identity);
        for s in 0..spec.samples_per_identity {
            let index = (identity * spec.samples_per_identity + s) as u64;
            let mut pr = rng::stream(spec.seed, rng::mix(TAG_POSE_DRAW, index));
            let pose = draw_pose(&mut pr, spec.frontal_fraction);
            let observation = world.observe(
                &z,
                &pose,
                spec.occlusion_strength,
                spec.noise_sigma,
                rng::mix(spec.seed, index),
            )?;
            samples.push(Sample { observation, identity, pose });
        }
    }
    Ok(Dataset { spec: spec.clone(), samples })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairKind {
    Verification,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    FrontalFrontal,
    CrossPose,
}

/// Indices into a dataset's sample list. For fine-tune pairs, `a` is the
/// frontal side and `b` the profile side, and `genuine` is always true.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub genuine: bool,
}

#[derive(Debug, Clone)]
pub struct PairSet {
    pub kind: PairKind,
    pub pairs: Vec<Pair>,
}

/// All (frontal, profile) combinations per identity whose profile side is
/// at or beyond `min_angle` on its largest axis.
pub fn make_finetune_pairs(dataset: &Dataset, min_angle: f64) -> Result<PairSet> {
    let mut pairs = Vec::new();
    for identity in 0..dataset.spec.num_identities {
        let idxs: Vec<usize> = (0..dataset.samples.len())
            .filter(|&i| dataset.samples[i].identity == identity)
            .collect();
        for &a in idxs.iter().filter(|&&i| dataset.samples[i].pose.is_frontal()) {
            for &b in idxs.iter().filter(|&&i| {
                let p = &dataset.samples[i].pose;
                p.is_profile_eligible() && p.max_abs() >= min_angle
            }) {
                pairs.push(Pair { a, b, genuine: true });
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Contract("no eligible (frontal, profile) pairs".into()));
    }
    Ok(PairSet { kind: PairKind::Finetune, pairs })
}

/// Balanced genuine/impostor verification pairs. The cross-pose split
/// pairs exactly one frontal with one profile-eligible sample.
pub fn make_verification_pairs(
    dataset: &Dataset,
    split: Split,
    n_pairs: usize,
    seed: u64,
) -> Result<PairSet> {
    if dataset.spec.num_identities < 2 {
        return Err(Error::Contract("need at least 2 identities for verification pairs".into()));
    }
    let eligible_a: Vec<usize>;
    let eligible_b: Vec<usize>;
    match split {
        Split::FrontalFrontal => {
            eligible_a = (0..dataset.samples.len())
                .filter(|&i| dataset.samples[i].pose.is_frontal())
                .collect();
            eligible_b = eligible_a.clone();
        }
        Split::CrossPose => {
            eligible_a = (0..dataset.samples.len())
                .filter(|&i| dataset.samples[i].pose.is_frontal())
                .collect();
            eligible_b = (0..dataset.samples.len())
                .filter(|&i| dataset.samples[i].pose.is_profile_eligible())
                .collect();
        }
    }
    if eligible_a.is_empty() || eligible_b.is_empty() {
        return Err(Error::Contract("insufficient eligible samples for the requested split".into()));
    }
    let n_genuine = n_pairs / 2;
    let n_impostor = n_pairs - n_genuine;
    let mut r = rng::stream(seed, 0x5150);
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut seen = std::collections::HashSet::new();
    let mut push_pairs = |want_genuine: bool,
                          count: usize,
                          pairs: &mut Vec<Pair>,
                          r: &mut rand_chacha::ChaCha8Rng|
     -> Result<()> {
        let mut attempts = 0usize;
        let mut made = 0usize;
        let budget = count.saturating_mul(200) + 1000;
        while made < count {
            attempts += 1;
            if attempts > budget {
                return Err(Error::Contract(format!(
                    "could not assemble {count} {} pairs from the eligible samples",
                    if want_genuine { "genuine" } else { "impostor" }
                )));
            }
            let a = eligible_a[r.random_range(0..eligible_a.len())];
            let b = eligible_b[r.random_range(0..eligible_b.len())];
            if a == b {
                continue;
            }
            let same = dataset.samples[a].identity == dataset.samples[b].identity;
            if same != want_genuine {
                continue;
            }
            let key = (a.min(b), a.max(b));
            if !seen.insert(key) {
                continue;
            }
            pairs.push(Pair { a, b, genuine: want_genuine });
            made += 1;
        }
        Ok(())
    };
    push_pairs(true, n_genuine, &mut pairs, &mut r)?;
    push_pairs(false, n_impostor, &mut pairs, &mut r)?;
    Ok(PairSet { kind: PairKind::Verification, pairs })
}

const DATA_MAGIC: &str = "FSPFM-DATA";
const DATA_VERSION: u32 = 1;

/// Flat binary export: textual header, then per sample the identity label
/// (u64 LE), pose angles and observation values as little-endian doubles.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let spec = &dataset.spec;
    let mut header = String::new();
    let _ = writeln!(header, "{DATA_MAGIC}");
    let _ = writeln!(header, "version {DATA_VERSION}");
    let _ = writeln!(header, "num_identities {}", spec.num_identities);
    let _ = writeln!(header, "samples_per_identity {}", spec.samples_per_identity);
    let _ = writeln!(header, "frontal_fraction {}", spec.frontal_fraction);
    let _ = writeln!(header, "observation_dim {}", spec.observation_dim);
    let _ = writeln!(header, "pose_dim {}", spec.pose_dim);
    let _ = writeln!(header, "noise_sigma {}", spec.noise_sigma);
    let _ = writeln!(header, "occlusion_strength {}", spec.occlusion_strength);
    let _ = writeln!(header, "seed {}", spec.seed);
    let _ = writeln!(header, "world_seed {}", spec.world_seed);
    let _ = writeln!(header, "count {}", dataset.samples.len());
    let _ = writeln!(header, "end");
    let mut buf: Vec<u8> = header.into_bytes();
    for s in &dataset.samples {
        buf.extend_from_slice(&(s.identity as u64).to_le_bytes());
        for a in [s.pose.yaw, s.pose.pitch, s.pose.roll] {
            buf.extend_from_slice(&a.to_le_bytes());
        }
        for v in s.observation.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::manifest::write_atomic(path, &buf)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Dependency(format!("cannot open dataset {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    // header ends at the line "end"
    let mut offset = 0usize;
    let mut lines = Vec::new();
    loop {
        let nl = bytes[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("dataset header truncated".into()))?;
        let line = std::str::from_utf8(&bytes[offset..offset + nl])
            .map_err(|_| Error::Format("dataset header is not utf-8".into()))?
            .to_string();
        offset += nl + 1;
        if line == "end" {
            break;
        }
        lines.push(line);
    }
    if lines.is_empty() || lines[0] != DATA_MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    let mut kv = std::collections::HashMap::new();
    for line in &lines[1..] {
        let (k, v) = line
            .split_once(' ')
            .ok_or_else(|| Error::Format(format!("bad dataset header line: {line}")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let field = |k: &str| -> Result<String> {
        kv.get(k)
            .cloned()
            .ok_or_else(|| Error::Format(format!("dataset header missing {k}")))
    };
    let version: u32 = field("version")?
        .parse()
        .map_err(|_| Error::Format("bad version".into()))?;
    if version != DATA_VERSION {
        return Err(Error::Format(format!(
            "dataset version {version} unsupported (expected {DATA_VERSION})"
        )));
    }
    let parse_u = |k: &str| -> Result<usize> {
        field(k)?.parse().map_err(|_| Error::Format(format!("bad {k}")))
    };
    let parse_f = |k: &str| -> Result<f64> {
        field(k)?.parse().map_err(|_| Error::Format(format!("bad {k}")))
    };
    let spec = DatasetSpec {
        num_identities: parse_u("num_identities")?,
        samples_per_identity: parse_u("samples_per_identity")?,
        frontal_fraction: parse_f("frontal_fraction")?,
        observation_dim: parse_u("observation_dim")?,
        pose_dim: parse_u("pose_dim")?,
        noise_sigma: parse_f("noise_sigma")?,
        occlusion_strength: parse_f("occlusion_strength")?,
        seed: field("seed")?.parse().map_err(|_| Error::Format("bad seed".into()))?,
        world_seed: field("world_seed")?
            .parse()
            .map_err(|_| Error::Format("bad world_seed".into()))?,
    };
    let count = parse_u("count")?;
    let d = spec.observation_dim;
    let record = 8 + 3 * 8 + d * 8;
    if bytes.len() - offset != count * record {
        return Err(Error::Format(format!(
            "dataset truncated: expected {} payload bytes, got {}",
            count * record,
            bytes.len() - offset
        )));
    }
    let mut samples = Vec::with_capacity(count);
    let read_f64 = |offset: &mut usize| -> f64 {
        let v = f64::from_le_bytes(bytes[*offset..*offset + 8].try_into().unwrap());
        *offset += 8;
        v
    };
    for _ in 0..count {
        let identity = u64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap()) as usize;
        offset += 8;
        let yaw = read_f64(&mut offset);
        let pitch = read_f64(&mut offset);
        let roll = read_f64(&mut offset);
        let obs: Vec<f64> = (0..d).map(|_| read_f64(&mut offset)).collect();
        samples.push(Sample {
            observation: Tensor::vector(obs),
            identity,
            pose: Pose { yaw, pitch, roll },
        });
    }
    Ok(Dataset { spec, samples })
}

#[allow(unused)]
fn write_all(path: &Path, buf: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_counts_and_labels() {
        let spec = DatasetSpec {
            num_identities: 2,
            samples_per_identity: 3,
            ..Default::default()
        };
        let ds = make_dataset(&spec).unwrap();
        assert_eq!(ds.samples.len(), 6);
        let labels: Vec<usize> = ds.samples.iter().map(|s| s.identity).collect();
        assert_eq!(labels, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn dataset_is_deterministic() {
        let spec = DatasetSpec {
            num_identities: 3,
            samples_per_identity: 4,
            ..Default::default()
        };
        let a = make_dataset(&spec).unwrap();
        let b = make_dataset(&spec).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.observation.data(), y.observation.data());
            assert_eq!(x.pose, y.pose);
        }
    }

    #[test]
    fn frontal_share_matches_fraction() {
        let spec = DatasetSpec {
            num_identities: 100,
            samples_per_identity: 100,
            frontal_fraction: 0.5,
            ..Default::default()
        };
        let ds = make_dataset(&spec).unwrap();
        let share = ds.samples.iter().filter(|s| s.pose.is_frontal()).count() as f64
            / ds.samples.len() as f64;
        assert!((share - 0.5).abs() <= 0.02, "frontal share {share}");
    }

    #[test]
    fn observe_identity_pose_is_identity() {
        let world = World::new(16, 4, 7);
        let mut r = rng::stream(1, 1);
        let z = Tensor::vector(rng::unit_vector(&mut r, 16));
        let out = world.observe(&z, &Pose::frontal(), 0.9, 0.0, 0).unwrap();
        for (a, b) in z.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn observe_rotation_is_isometry() {
        let world = World::new(32, 4, 9);
        let mut r = rng::stream(2, 2);
        let z = Tensor::vector(rng::unit_vector(&mut r, 32));
        for pose in [
            Pose { yaw: 45.0, pitch: -30.0, roll: 12.0 },
            Pose { yaw: 90.0, pitch: 90.0, roll: -90.0 },
        ] {
            let out = world.observe(&z, &pose, 0.0, 0.0, 0).unwrap();
            assert!((out.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn occlusion_norm_budget() {
        // norm^2 of occluded observation = 1 - sum of squares of the zeroed
        // coordinates of the rotated latent
        let world = World::new(24, 4, 11);
        let mut r = rng::stream(3, 3);
        let z = Tensor::vector(rng::unit_vector(&mut r, 24));
        let pose = Pose { yaw: 90.0, pitch: 0.0, roll: 0.0 };
        let rotated = world.rotate(z.data(), &pose);
        let k = world.occluded_count(&pose, 0.3);
        let zeroed_mass: f64 = world
            .occlusion_order
            .iter()
            .take(k)
            .map(|&i| rotated[i] * rotated[i])
            .sum();
        let out = world.observe(&z, &pose, 0.3, 0.0, 0).unwrap();
        let n2 = out.data().iter().map(|v| v * v).sum::<f64>();
        assert!((n2 - (1.0 - zeroed_mass)).abs() < 1e-12);
    }

    #[test]
    fn observe_rejects_non_unit_latent() {
        let world = World::new(8, 4, 1);
        let z = Tensor::vector(vec![2.0; 8]);
        assert!(world.observe(&z, &Pose::frontal(), 0.0, 0.0, 0).is_err());
    }

    #[test]
    fn pose_embed_zero_angles_zero_noise() {
        let world = World::new(8, 16, 5);
        let e = world.pose_embed(&Pose::frontal(), 0.0);
        assert!(e.feature.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pose_embed_deterministic_and_pose_sensitive() {
        let world = World::new(8, 16, 5);
        let p = Pose { yaw: 33.0, pitch: -7.0, roll: 2.0 };
        let a = world.pose_embed(&p, POSE_NOISE_SIGMA);
        let b = world.pose_embed(&p, POSE_NOISE_SIGMA);
        assert_eq!(a.feature.data(), b.feature.data());
        let frontal = world.pose_embed(&Pose::frontal(), POSE_NOISE_SIGMA);
        let yaw90 = world.pose_embed(&Pose { yaw: 90.0, pitch: 0.0, roll: 0.0 }, POSE_NOISE_SIGMA);
        let dist: f64 = frontal
            .feature
            .data()
            .iter()
            .zip(yaw90.feature.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 0.0);
    }

    #[test]
    fn finetune_pairs_counting_and_threshold() {
        // hand-built dataset: one identity, 1 frontal + profiles at 39 / 40 / 80 degrees
        let spec = DatasetSpec { num_identities: 1, samples_per_identity: 4, ..Default::default() };
        let obs = || Tensor::vector(vec![0.0; spec.observation_dim]);
        let mk = |yaw: f64| Sample {
            observation: obs(),
            identity: 0,
            pose: Pose { yaw, pitch: 0.0, roll: 0.0 },
        };
        let ds = Dataset {
            spec: spec.clone(),
            samples: vec![mk(0.0), mk(39.0), mk(40.0), mk(80.0)],
        };
        let ps = make_finetune_pairs(&ds, PROFILE_MIN_ANGLE).unwrap();
        // 39 degrees is below the eligibility floor; 40 and 80 qualify
        assert_eq!(ps.pairs.len(), 2);
        assert!(ps.pairs.iter().all(|p| p.a == 0));
    }

    #[test]
    fn finetune_pairs_error_when_no_profiles() {
        let spec = DatasetSpec { num_identities: 1, samples_per_identity: 2, ..Default::default() };
        let mk = |yaw: f64| Sample {
            observation: Tensor::vector(vec![0.0; spec.observation_dim]),
            identity: 0,
            pose: Pose { yaw, pitch: 0.0, roll: 0.0 },
        };
        let ds = Dataset { spec: spec.clone(), samples: vec![mk(0.0), mk(5.0)] };
        assert!(make_finetune_pairs(&ds, PROFILE_MIN_ANGLE).is_err());
    }

    #[test]
    fn verification_pairs_balanced_and_deterministic() {
        let spec = DatasetSpec {
            num_identities: 10,
            samples_per_identity: 10,
            ..Default::default()
        };
        let ds = make_dataset(&spec).unwrap();
        let ps = make_verification_pairs(&ds, Split::CrossPose, 10, 99).unwrap();
        assert_eq!(ps.pairs.len(), 10);
        assert_eq!(ps.pairs.iter().filter(|p| p.genuine).count(), 5);
        for p in &ps.pairs {
            let fa = ds.samples[p.a].pose.is_frontal();
            let eb = ds.samples[p.b].pose.is_profile_eligible();
            assert!(fa && eb, "cross-pose pair must be frontal x profile");
        }
        let ps2 = make_verification_pairs(&ds, Split::CrossPose, 10, 99).unwrap();
        assert_eq!(ps.pairs, ps2.pairs);
    }

    #[test]
    fn genuine_pairs_correlate_more_than_impostors() {
        let spec = DatasetSpec {
            num_identities: 50,
            samples_per_identity: 10,
            ..Default::default()
        };
        let ds = make_dataset(&spec).unwrap();
        let ps = make_verification_pairs(&ds, Split::CrossPose, 1000, 5).unwrap();
        let cos = |a: &Tensor, b: &Tensor| a.dot(b).unwrap() / (a.norm() * b.norm());
        let mut gen_sum = 0.0;
        let mut gen_n = 0.0;
        let mut imp_sum = 0.0;
        let mut imp_n = 0.0;
        for p in &ps.pairs {
            let c = cos(&ds.samples[p.a].observation, &ds.samples[p.b].observation);
            if p.genuine {
                gen_sum += c;
                gen_n += 1.0;
            } else {
                imp_sum += c;
                imp_n += 1.0;
            }
        }
        let (gen_mean, imp_mean) = (gen_sum / gen_n, imp_sum / imp_n);
        assert!(
            gen_mean > imp_mean + 0.1,
            "genuine mean {gen_mean} vs impostor mean {imp_mean}"
        );
    }

    #[test]
    fn dataset_roundtrip_bit_exact() {
        let dir = std::env::temp_dir().join(format!("fspfm-data-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let spec = DatasetSpec { num_identities: 3, samples_per_identity: 2, ..Default::default() };
        let ds = make_dataset(&spec).unwrap();
        let path = dir.join("ds.fspfm-data");
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.spec, ds.spec);
        for (a, b) in ds.samples.iter().zip(&loaded.samples) {
            assert_eq!(a.identity, b.identity);
            assert_eq!(a.pose, b.pose);
            assert!(a
                .observation
                .data()
                .iter()
                .zip(b.observation.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        save_dataset(&loaded, &path).unwrap();
        let again = std::fs::read(&path).unwrap();
        save_dataset(&ds, &path).unwrap();
        assert_eq!(again, std::fs::read(&path).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }
}
