//! Training corpora: joint-angle grids rendered with the agent's own arm.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::env::{EnvConfig, Image, JointAngles, JointLimits};
use crate::error::{Error, Result};

const DATASET_MAGIC: &[u8; 4] = b"RHID";
const DATASET_VERSION: u32 = 1;

/// Affine map from joint limits to `[−1, 1]` per joint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalizer {
    pub center: [f64; 2],
    pub half_range: [f64; 2],
}

impl Normalizer {
    pub fn from_limits(limits: &JointLimits) -> Self {
        let c = limits.center();
        Normalizer {
            center: [c.shoulder, c.elbow],
            half_range: limits.half_range(),
        }
    }

    pub fn normalize(&self, q: JointAngles) -> [f64; 2] {
        let a = q.to_array();
        [0, 1].map(|i| (a[i] - self.center[i]) / self.half_range[i])
    }

    pub fn denormalize(&self, z: [f64; 2]) -> JointAngles {
        JointAngles::from_array([0, 1].map(|i| self.center[i] + z[i] * self.half_range[i]))
    }

    /// d(normalized)/d(angle) per joint.
    pub fn chain_factor(&self) -> [f64; 2] {
        self.half_range.map(|h| 1.0 / h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Joint angles mapped to `[−1, 1]`.
    pub z: [f64; 2],
    pub image: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub resolution: usize,
    /// Samples per joint (shoulder, elbow).
    pub grid: [usize; 2],
    /// Whether the grid sits half a cell inside the limits.
    pub staggered: bool,
    pub offset_dx: f64,
    pub samples: Vec<Sample>,
}

fn grid_values(lo: f64, hi: f64, n: usize, staggered: bool) -> Vec<f64> {
    if staggered {
        let step = (hi - lo) / (n - 1) as f64;
        (0..n - 1).map(|i| lo + (i as f64 + 0.5) * step).collect()
    } else {
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }
}

impl Dataset {
    /// Renders a uniform `grid[0] × grid[1]` lattice spanning the joint
    /// limits, shoulder-major. With `staggered`, the `(n−1)` cell midpoints
    /// are used instead, which gives a held-out set disjoint from the grid.
    pub fn generate(grid: [usize; 2], env: &EnvConfig, staggered: bool) -> Result<Self> {
        if grid.iter().any(|&n| n < 2) {
            return Err(Error::Config(format!("grid needs at least 2 samples per joint, got {grid:?}")));
        }
        env.validate()?;
        let norm = Normalizer::from_limits(&env.limits);
        let lim = &env.limits;
        let shoulders = grid_values(lim.shoulder.0, lim.shoulder.1, grid[0], staggered);
        let elbows = grid_values(lim.elbow.0, lim.elbow.1, grid[1], staggered);
        let mut samples = Vec::with_capacity(shoulders.len() * elbows.len());
        for &s in &shoulders {
            for &e in &elbows {
                let q = JointAngles::new(s, e);
                let img = env.render(lim.clamp(q), 0.0)?;
                samples.push(Sample {
                    z: norm.normalize(q).map(|v| v.clamp(-1.0, 1.0)),
                    image: img.into_pixels(),
                });
            }
        }
        Ok(Dataset {
            resolution: env.resolution(),
            grid,
            staggered,
            offset_dx: 0.0,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn image(&self, i: usize) -> Result<Image> {
        Image::new(self.resolution, self.resolution, self.samples[i].image.clone())
    }

    /// Number of distinct image buffers (bitwise).
    pub fn distinct_images(&self) -> usize {
        let set: HashSet<Vec<u64>> = self
            .samples
            .iter()
            .map(|s| s.image.iter().map(|v| v.to_bits()).collect())
            .collect();
        set.len()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        for v in [self.resolution, self.grid[0], self.grid[1], self.staggered as usize, self.samples.len()] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&self.offset_dx.to_le_bytes())?;
        for s in &self.samples {
            for v in s.z.iter().chain(&s.image) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::format("dataset", "truncated header"))?;
        if &magic != DATASET_MAGIC {
            return Err(Error::format("dataset", "bad magic"));
        }
        let mut u = || -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| Error::format("dataset", "truncated header"))?;
            Ok(u32::from_le_bytes(b))
        };
        let version = u()?;
        if version != DATASET_VERSION {
            return Err(Error::format("dataset", format!("unsupported version {version}")));
        }
        let (res, g0, g1, stag, n) = (u()? as usize, u()? as usize, u()? as usize, u()?, u()? as usize);
        if res == 0 || stag > 1 {
            return Err(Error::format("dataset", "invalid header fields"));
        }
        let mut f = || -> Result<f64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| Error::format("dataset", "truncated body"))?;
            let v = f64::from_le_bytes(b);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::format("dataset", "non-finite value"))
            }
        };
        let offset_dx = f()?;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let z = [f()?, f()?];
            let image = (0..res * res).map(|_| f()).collect::<Result<Vec<_>>>()?;
            samples.push(Sample { z, image });
        }
        Ok(Dataset {
            resolution: res,
            grid: [g0, g1],
            staggered: stag == 1,
            offset_dx,
            samples,
        })
    }

    /// SHA-256 of the serialized dataset, lowercase hex.
    pub fn content_hash(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
