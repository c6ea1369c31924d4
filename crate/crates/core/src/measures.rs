//! Empirical measures and their on-disk formats.
//!
//! A [`PointCloud`] is the uniform empirical measure over its rows. Clouds are
//! stored in the `.m2m` binary layout:
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | 0..4         | magic `M2M\0`                             |
//! | 4..8         | format version, `u32` LE (currently 1)    |
//! | 8..12        | row count `N`, `u32` LE                   |
//! | 12..16       | dimension `d`, `u32` LE                   |
//! | 16..16+8Nd   | coordinates, `f64` LE, row-major          |
//!
//! Datasets of measure pairs are described by a JSON manifest that points at
//! `.m2m` files (see [`Manifest`]).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"M2M\0";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// N particles in R^d; the empirical measure (1/N) sum delta_{x_j}.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Array2<f64>,
}

impl PointCloud {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        let (n, d) = points.dim();
        if n == 0 || d == 0 {
            return Err(Error::InvalidArgument(format!(
                "point cloud must have at least one row and column, got {n}x{d}"
            )));
        }
        if let Some((idx, _)) = points.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!("point cloud entry {idx:?}")));
        }
        Ok(Self { points })
    }

    /// Builds a cloud from row vectors.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let points = Array2::from_shape_vec((n, d), flat)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Self::new(points)
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn into_points(self) -> Array2<f64> {
        self.points
    }

    /// Number of particles.
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    /// Always false; kept for clippy's `len_without_is_empty`.
    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    /// Rows reordered as `out[j] = self[order[j]]`.
    pub fn select_rows(&self, order: &[usize]) -> Result<Self> {
        select_rows(&self.points, order).and_then(Self::new)
    }
}

pub(crate) fn select_rows(points: &Array2<f64>, order: &[usize]) -> Result<Array2<f64>> {
    let d = points.ncols();
    let mut out = Array2::zeros((order.len(), d));
    for (j, &src) in order.iter().enumerate() {
        if src >= points.nrows() {
            return Err(Error::InvalidArgument(format!(
                "row index {src} out of range for {} rows",
                points.nrows()
            )));
        }
        out.row_mut(j).assign(&points.row(src));
    }
    Ok(out)
}

/// A (source, target) observation. Cardinalities may differ.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurePair {
    pub source: PointCloud,
    pub target: PointCloud,
    pub tag: Option<String>,
}

impl MeasurePair {
    pub fn new(source: PointCloud, target: PointCloud, tag: Option<String>) -> Result<Self> {
        if source.dim() != target.dim() {
            return Err(Error::DimensionMismatch(format!(
                "source has d={} but target has d={}",
                source.dim(),
                target.dim()
            )));
        }
        Ok(Self {
            source,
            target,
            tag,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pairs: Vec<MeasurePair>,
    ambient_dim: usize,
}

impl Dataset {
    pub fn new(pairs: Vec<MeasurePair>) -> Result<Self> {
        let ambient_dim = pairs
            .first()
            .ok_or_else(|| Error::InvalidArgument("dataset has no pairs".into()))?
            .source
            .dim();
        for (i, pair) in pairs.iter().enumerate() {
            if pair.source.dim() != ambient_dim || pair.target.dim() != ambient_dim {
                return Err(Error::DimensionMismatch(format!(
                    "pair {i} does not have dimension {ambient_dim}"
                )));
            }
        }
        Ok(Self { pairs, ambient_dim })
    }

    pub fn pairs(&self) -> &[MeasurePair] {
        &self.pairs
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Splits off the last `ceil(fraction * n)` pairs as a held-out set.
    /// Returns `(train, None)` when the split would leave either side empty.
    pub fn split_tail(&self, fraction: f64) -> (Dataset, Option<Dataset>) {
        let n = self.pairs.len();
        let held = ((n as f64) * fraction).ceil() as usize;
        if held == 0 || held >= n {
            return (self.clone(), None);
        }
        let train = Dataset {
            pairs: self.pairs[..n - held].to_vec(),
            ambient_dim: self.ambient_dim,
        };
        let eval = Dataset {
            pairs: self.pairs[n - held..].to_vec(),
            ambient_dim: self.ambient_dim,
        };
        (train, Some(eval))
    }
}

/// Ordered marginals of one simulated system.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    marginals: Vec<PointCloud>,
    times: Vec<f64>,
}

impl Trajectory {
    pub fn new(marginals: Vec<PointCloud>, times: Vec<f64>) -> Result<Self> {
        if marginals.is_empty() || marginals.len() != times.len() {
            return Err(Error::InvalidArgument(format!(
                "trajectory needs matching non-empty marginals/times, got {} and {}",
                marginals.len(),
                times.len()
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "trajectory times must be strictly increasing".into(),
            ));
        }
        let (n, d) = (marginals[0].len(), marginals[0].dim());
        if let Some(k) = marginals
            .iter()
            .position(|m| m.len() != n || m.dim() != d)
        {
            return Err(Error::DimensionMismatch(format!(
                "marginal {k} does not have shape {n}x{d}"
            )));
        }
        Ok(Self { marginals, times })
    }

    pub fn marginals(&self) -> &[PointCloud] {
        &self.marginals
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.marginals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marginals.is_empty()
    }
}

/// Encodes a cloud into the `.m2m` byte layout.
pub fn encode_pointcloud(pc: &PointCloud) -> Vec<u8> {
    let (n, d) = pc.points.dim();
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * n * d);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for v in pc.points.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Decodes the `.m2m` byte layout.
pub fn decode_pointcloud(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let (n, d) = (word(8) as usize, word(12) as usize);
    let expected = HEADER_LEN + 8 * n * d;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let values: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let points =
        Array2::from_shape_vec((n, d), values).map_err(|e| Error::Format(e.to_string()))?;
    PointCloud::new(points)
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".partial");
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn save_pointcloud(pc: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_pointcloud(pc))
}

pub fn load_pointcloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pointcloud(&bytes)
}

/// Draws `m` rows: without replacement when `m <= N`, with replacement otherwise.
pub fn subsample<R: Rng + ?Sized>(pc: &PointCloud, m: usize, rng: &mut R) -> Result<PointCloud> {
    subsample_points(pc.points(), m, rng).and_then(PointCloud::new)
}

pub(crate) fn subsample_points<R: Rng + ?Sized>(
    points: &Array2<f64>,
    m: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if m == 0 {
        return Err(Error::InvalidArgument("subsample size must be >= 1".into()));
    }
    let n = points.nrows();
    let order: Vec<usize> = if m <= n {
        rand::seq::index::sample(rng, n, m).into_vec()
    } else {
        (0..m).map(|_| rng.random_range(0..n)).collect()
    };
    select_rows(points, &order)
}

/// One entry of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub source: PathBuf,
    pub target: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

/// Marginal files of one simulated system, listed so rollouts can be evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub system: usize,
    pub times: Vec<f64>,
    pub marginals: Vec<PathBuf>,
}

/// `dataset.json`: `{"ambient_dim": d, "pairs": [{"source", "target", "tag"?}], "trajectories"?}`.
/// Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub ambient_dim: usize,
    pub pairs: Vec<PairEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trajectories: Vec<TrajectoryEntry>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path.as_ref(), text.as_bytes())
    }

    fn resolve(base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }

    /// Loads every referenced trajectory.
    pub fn load_trajectories(&self, manifest_path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
        let base = manifest_path
            .as_ref()
            .parent()
            .unwrap_or_else(|| Path::new("."));
        self.trajectories
            .iter()
            .map(|t| {
                let marginals = t
                    .marginals
                    .iter()
                    .map(|p| load_pointcloud(Self::resolve(base, p)))
                    .collect::<Result<Vec<_>>>()?;
                Trajectory::new(marginals, t.times.clone())
            })
            .collect()
    }
}

pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest = Manifest::read(manifest_path)?;
    if manifest.pairs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "manifest {} lists no pairs",
            manifest_path.display()
        )));
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let d = manifest.ambient_dim;
    let mut pairs = Vec::with_capacity(manifest.pairs.len());
    for (i, entry) in manifest.pairs.iter().enumerate() {
        let source = load_pointcloud(Manifest::resolve(base, &entry.source))?;
        let target = load_pointcloud(Manifest::resolve(base, &entry.target))?;
        if source.dim() != d || target.dim() != d {
            return Err(Error::DimensionMismatch(format!(
                "pair {i}: source d={}, target d={}, manifest ambient_dim={d}",
                source.dim(),
                target.dim()
            )));
        }
        pairs.push(MeasurePair::new(source, target, entry.tag.clone())?);
    }
    Dataset::new(pairs)
}
