//! Multi-modal volume data model.
//!
//! A [`MultiModalVolume`] is a `C × H × W × D` grid of intensities in
//! `[0, 1]`. The synthetic generator produces low-diversity datasets: every
//! sample is the same smooth per-modality template plus a small per-sample
//! perturbation whose magnitude is the diversity knob `δ`, optionally plus a
//! random lesion blob. Low `δ` is what makes reconstruction pretraining
//! collapse-prone, so the knob places the dataset's masked-view variance
//! above or below any loss threshold at will.
//!
//! Volumes serialize to the `MMV1` binary format and datasets to a directory
//! of volume files plus a `manifest.txt` of `key=value` lines.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array3, Array4};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::derive_rng;

/// Magic bytes of the volume file format.
pub const VOLUME_MAGIC: &[u8; 4] = b"MMV1";
/// Dataset manifest file name.
pub const MANIFEST_NAME: &str = "manifest.txt";

/// Amplitude of the radial "anatomy" bump added on top of each modality's
/// base intensity.
const ANATOMY_GAIN: f64 = 0.3;
/// Edge length of the cubic cells on which the per-sample perturbation is
/// constant. Matches the default patch size, so a masked patch never leaks
/// its own perturbation value through a neighbouring patch.
const PERTURBATION_CELL: usize = 4;
/// Peak added intensity of a lesion blob.
const LESION_GAIN: f64 = 0.4;

/// A `C`-modality volume of intensities in `[0, 1]`, indexed `(c, x, y, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalVolume {
    data: Array4<f32>,
}

impl MultiModalVolume {
    /// Wraps a raw tensor, validating finiteness and the `[0, 1]` range.
    pub fn new(data: Array4<f32>) -> Result<Self> {
        let (c, h, w, d) = data.dim();
        if c == 0 || h == 0 || w == 0 || d == 0 {
            return Err(Error::Config(format!(
                "volume dimensions must all be >= 1, got {c}x{h}x{w}x{d}"
            )));
        }
        for (idx, &v) in data.indexed_iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::IntensityRange {
                    context: format!("voxel {idx:?}"),
                    value: v as f64,
                });
            }
        }
        Ok(Self { data })
    }

    pub fn num_modalities(&self) -> usize {
        self.data.dim().0
    }

    /// Spatial extents `(H, W, D)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let (_, h, w, d) = self.data.dim();
        (h, w, d)
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn to_f64(&self) -> Array4<f64> {
        self.data.mapv(|v| v as f64)
    }

    /// Writes the volume in the `MMV1` format (little-endian).
    pub fn save(&self, path: &Path) -> Result<()> {
        let (c, h, w, d) = self.data.dim();
        let mut bytes = Vec::with_capacity(4 + 16 + self.data.len() * 4);
        bytes.extend_from_slice(VOLUME_MAGIC);
        for dim in [c, h, w, d] {
            bytes.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in self.data.as_slice().expect("volume is standard layout") {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    /// Reads a volume written by [`MultiModalVolume::save`]. Bit-exact round
    /// trip; bad magic, dimension overflow and truncation are distinct errors.
    pub fn load(path: &Path) -> Result<Self> {
        let mut file = fs::File::open(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingInput(path.to_path_buf())
            } else {
                Error::Io(e)
            }
        })?;
        let mut header = [0u8; 20];
        file.read_exact(&mut header).map_err(|_| Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected: 20,
            found: fs::metadata(path).map(|m| m.len()).unwrap_or(0),
        })?;
        if &header[..4] != VOLUME_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "MMV1",
            });
        }
        let mut dims = [0usize; 4];
        for (i, dim) in dims.iter_mut().enumerate() {
            let off = 4 + 4 * i;
            *dim = u32::from_le_bytes(header[off..off + 4].try_into().unwrap()) as usize;
        }
        let [c, h, w, d] = dims;
        let voxels = (c as u128) * (h as u128) * (w as u128) * (d as u128);
        let payload = voxels.checked_mul(4).filter(|&b| b <= usize::MAX as u128);
        let Some(payload) = payload else {
            return Err(Error::DimensionOverflow {
                path: path.to_path_buf(),
            });
        };
        let mut raw = Vec::new();
        file.read_to_end(&mut raw)?;
        if raw.len() as u128 != payload {
            return Err(Error::TruncatedPayload {
                path: path.to_path_buf(),
                expected: payload as u64,
                found: raw.len() as u64,
            });
        }
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let data = Array4::from_shape_vec((c, h, w, d), values)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Self::new(data)
    }
}

/// Configuration of the synthetic low-diversity dataset generator.
///
/// Identical configurations (including `seed`) produce bit-identical
/// datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDatasetConfig {
    pub num_samples: usize,
    pub num_modalities: usize,
    /// Spatial extents `(H, W, D)`.
    pub dims: (usize, usize, usize),
    /// Inter-sample variation `δ ≥ 0`; the standard deviation of the
    /// per-sample perturbation field.
    pub diversity: f64,
    /// Base intensity per modality, each in `[0, 1]`.
    pub modality_offsets: Vec<f64>,
    /// Fraction of voxels covered by one random lesion blob; `0` disables it.
    pub lesion_fraction: f64,
    pub seed: u64,
}

impl SyntheticDatasetConfig {
    /// Evenly spaced base intensities for `c` modalities, kept low enough
    /// that template-plus-anatomy stays inside `[0, 1]`.
    pub fn default_offsets(c: usize) -> Vec<f64> {
        if c == 1 {
            return vec![0.36];
        }
        (0..c)
            .map(|i| 0.12 + 0.48 * i as f64 / (c - 1) as f64)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, d) = self.dims;
        if self.num_samples == 0 {
            return Err(Error::Config("num_samples must be >= 1".into()));
        }
        if self.num_modalities == 0 || h == 0 || w == 0 || d == 0 {
            return Err(Error::Config(format!(
                "dimensions must all be >= 1, got {}x{h}x{w}x{d}",
                self.num_modalities
            )));
        }
        if !self.diversity.is_finite() || self.diversity < 0.0 {
            return Err(Error::Config(format!(
                "diversity must be >= 0, got {}",
                self.diversity
            )));
        }
        if !(0.0..=1.0).contains(&self.lesion_fraction) {
            return Err(Error::Config(format!(
                "lesion_fraction must be in [0, 1], got {}",
                self.lesion_fraction
            )));
        }
        if self.modality_offsets.len() != self.num_modalities {
            return Err(Error::Config(format!(
                "expected {} modality offsets, got {}",
                self.num_modalities,
                self.modality_offsets.len()
            )));
        }
        if let Some(o) = self
            .modality_offsets
            .iter()
            .find(|o| !o.is_finite() || !(0.0..=1.0).contains(*o))
        {
            return Err(Error::Config(format!(
                "modality offsets must be in [0, 1], got {o}"
            )));
        }
        Ok(())
    }
}

impl Default for SyntheticDatasetConfig {
    fn default() -> Self {
        Self {
            num_samples: 64,
            num_modalities: 4,
            dims: (16, 16, 16),
            diversity: 0.05,
            modality_offsets: Self::default_offsets(4),
            lesion_fraction: 0.0,
            seed: 7,
        }
    }
}

/// The shared anatomy bump: a smooth radial falloff from the volume centre,
/// 1 at the centre and near 0 at the corners.
fn anatomy(x: usize, y: usize, z: usize, dims: (usize, usize, usize)) -> f64 {
    let norm = |i: usize, n: usize| ((i as f64 + 0.5) / n as f64) * 2.0 - 1.0;
    let (h, w, d) = dims;
    let (u, v, t) = (norm(x, h), norm(y, w), norm(z, d));
    (-2.0 * (u * u + v * v + t * t)).exp()
}

/// Generates one sample. `stream` indexes the per-sample rng stream.
fn generate_volume(config: &SyntheticDatasetConfig, stream: u64) -> MultiModalVolume {
    let (h, w, d) = config.dims;
    let c_count = config.num_modalities;
    let mut rng = derive_rng(config.seed, stream);

    // Per-sample perturbation: one standard-normal value per coarse cell,
    // shared by every modality. Within a sample the field is unpredictable
    // across cells, but a cell's value can be read off any visible modality,
    // which is exactly the cross-modal structure hybrid masking exposes.
    let cells = |n: usize| n.div_ceil(PERTURBATION_CELL);
    let mut field = Array3::<f64>::zeros((cells(h), cells(w), cells(d)));
    for v in field.iter_mut() {
        *v = rng.sample(StandardNormal);
    }

    // One spherical lesion with a soft edge, in all modalities.
    let lesion = if config.lesion_fraction > 0.0 {
        let target = config.lesion_fraction * (h * w * d) as f64;
        let radius = (3.0 * target / (4.0 * std::f64::consts::PI)).cbrt();
        let cx = rng.random_range(0.0..h as f64);
        let cy = rng.random_range(0.0..w as f64);
        let cz = rng.random_range(0.0..d as f64);
        Some((cx, cy, cz, radius))
    } else {
        None
    };

    let mut data = Array4::<f32>::zeros((c_count, h, w, d));
    for c in 0..c_count {
        for x in 0..h {
            for y in 0..w {
                for z in 0..d {
                    let mut v = config.modality_offsets[c]
                        + ANATOMY_GAIN * anatomy(x, y, z, config.dims)
                        + config.diversity
                            * field[(
                                x / PERTURBATION_CELL,
                                y / PERTURBATION_CELL,
                                z / PERTURBATION_CELL,
                            )];
                    if let Some((cx, cy, cz, radius)) = lesion {
                        let dist = ((x as f64 + 0.5 - cx).powi(2)
                            + (y as f64 + 0.5 - cy).powi(2)
                            + (z as f64 + 0.5 - cz).powi(2))
                        .sqrt();
                        v += LESION_GAIN / (1.0 + ((dist - radius) / 0.75).exp());
                    }
                    data[(c, x, y, z)] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    MultiModalVolume { data }
}

/// Generates the full dataset; parallel over samples, bit-deterministic for
/// any thread count.
pub fn generate_dataset(config: &SyntheticDatasetConfig) -> Result<Vec<MultiModalVolume>> {
    config.validate()?;
    Ok((0..config.num_samples as u64)
        .into_par_iter()
        .map(|i| generate_volume(config, i))
        .collect())
}

/// Per-voxel mean field over a set of equally shaped volumes.
pub fn mean_field(volumes: &[MultiModalVolume]) -> Result<Array4<f64>> {
    let first = volumes.first().ok_or(Error::EmptyDataset)?;
    let mut acc = Array4::<f64>::zeros(first.data.dim());
    for vol in volumes {
        if vol.data.dim() != first.data.dim() {
            return Err(Error::ShapeMismatch(
                "volumes in a dataset must share one shape".into(),
            ));
        }
        acc.zip_mut_with(&vol.data, |a, &b| *a += b as f64);
    }
    acc /= volumes.len() as f64;
    Ok(acc)
}

/// Mean over voxels of the per-voxel population variance across volumes.
pub fn per_voxel_variance(volumes: &[MultiModalVolume]) -> Result<f64> {
    let mean = mean_field(volumes)?;
    let mut acc = 0.0;
    for vol in volumes {
        for (v, m) in vol.data.iter().zip(mean.iter()) {
            let dev = *v as f64 - m;
            acc += dev * dev;
        }
    }
    Ok(acc / (volumes.len() * mean.len()) as f64)
}

/// A volume cut into non-overlapping patches.
///
/// Position `i` runs row-major over the patch grid `(gx, gy, gz)`; each
/// position carries one block per modality.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    patch_size: (usize, usize, usize),
    grid: (usize, usize, usize),
    num_modalities: usize,
    /// `blocks[position * C + modality]`, each `ph × pw × pd`.
    blocks: Vec<Array3<f32>>,
}

impl PatchGrid {
    pub fn patch_size(&self) -> (usize, usize, usize) {
        self.patch_size
    }

    /// Patch-grid extents `(gx, gy, gz)`.
    pub fn grid_dims(&self) -> (usize, usize, usize) {
        self.grid
    }

    pub fn num_positions(&self) -> usize {
        self.grid.0 * self.grid.1 * self.grid.2
    }

    pub fn num_modalities(&self) -> usize {
        self.num_modalities
    }

    /// Voxels per (position, modality) block.
    pub fn block_len(&self) -> usize {
        self.patch_size.0 * self.patch_size.1 * self.patch_size.2
    }

    pub fn block(&self, position: usize, modality: usize) -> &Array3<f32> {
        &self.blocks[position * self.num_modalities + modality]
    }

    /// Grid coordinates of a position index.
    pub fn position_coords(&self, position: usize) -> (usize, usize, usize) {
        let (_, gy, gz) = self.grid;
        let bz = position % gz;
        let by = (position / gz) % gy;
        let bx = position / (gz * gy);
        (bx, by, bz)
    }

    /// Reassembles the source volume exactly.
    pub fn reassemble(&self) -> MultiModalVolume {
        let (ph, pw, pd) = self.patch_size;
        let (gx, gy, gz) = self.grid;
        let mut data = Array4::<f32>::zeros((self.num_modalities, gx * ph, gy * pw, gz * pd));
        for pos in 0..self.num_positions() {
            let (bx, by, bz) = self.position_coords(pos);
            for c in 0..self.num_modalities {
                let block = self.block(pos, c);
                data.slice_mut(s![
                    c,
                    bx * ph..(bx + 1) * ph,
                    by * pw..(by + 1) * pw,
                    bz * pd..(bz + 1) * pd
                ])
                .assign(block);
            }
        }
        MultiModalVolume { data }
    }
}

/// Cuts `volume` into patches of `patch_size`, failing on a non-divisible
/// axis with the offending axis named.
pub fn partition(volume: &MultiModalVolume, patch_size: (usize, usize, usize)) -> Result<PatchGrid> {
    let (h, w, d) = volume.dims();
    let (ph, pw, pd) = patch_size;
    for (axis, extent, patch) in [('H', h, ph), ('W', w, pw), ('D', d, pd)] {
        if patch == 0 || extent % patch != 0 {
            return Err(Error::NonDivisible {
                axis,
                extent,
                patch,
            });
        }
    }
    let grid = (h / ph, w / pw, d / pd);
    let c_count = volume.num_modalities();
    let mut blocks = Vec::with_capacity(grid.0 * grid.1 * grid.2 * c_count);
    for bx in 0..grid.0 {
        for by in 0..grid.1 {
            for bz in 0..grid.2 {
                for c in 0..c_count {
                    blocks.push(
                        volume
                            .data
                            .slice(s![
                                c,
                                bx * ph..(bx + 1) * ph,
                                by * pw..(by + 1) * pw,
                                bz * pd..(bz + 1) * pd
                            ])
                            .to_owned(),
                    );
                }
            }
        }
    }
    Ok(PatchGrid {
        patch_size,
        grid,
        num_modalities: c_count,
        blocks,
    })
}

/// A generated dataset together with the configuration that produced it.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub volumes: Vec<MultiModalVolume>,
    pub config: SyntheticDatasetConfig,
}

impl Dataset {
    pub fn generate(config: SyntheticDatasetConfig) -> Result<Self> {
        let volumes = generate_dataset(&config)?;
        Ok(Self { volumes, config })
    }

    /// Writes one `MMV1` file per volume plus `manifest.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        let c = &self.config;
        manifest.push_str(&format!("num_samples={}\n", c.num_samples));
        manifest.push_str(&format!("num_modalities={}\n", c.num_modalities));
        manifest.push_str(&format!("dim_h={}\n", c.dims.0));
        manifest.push_str(&format!("dim_w={}\n", c.dims.1));
        manifest.push_str(&format!("dim_d={}\n", c.dims.2));
        manifest.push_str(&format!("diversity={}\n", c.diversity));
        let offsets: Vec<String> = c.modality_offsets.iter().map(|o| o.to_string()).collect();
        manifest.push_str(&format!("modality_offsets={}\n", offsets.join(",")));
        manifest.push_str(&format!("lesion_fraction={}\n", c.lesion_fraction));
        manifest.push_str(&format!("seed={}\n", c.seed));
        for (i, vol) in self.volumes.iter().enumerate() {
            let name = format!("vol_{i:04}.mmv");
            vol.save(&dir.join(&name))?;
            manifest.push_str(&format!("file={name}\n"));
        }
        let mut f = fs::File::create(dir.join(MANIFEST_NAME))?;
        f.write_all(manifest.as_bytes())?;
        Ok(())
    }

    /// Loads a dataset directory written by [`Dataset::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_NAME);
        if !manifest_path.exists() {
            return Err(Error::MissingInput(manifest_path));
        }
        let text = fs::read_to_string(&manifest_path)?;
        let mut fields = std::collections::HashMap::new();
        let mut files = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("manifest line `{line}` is not key=value")))?;
            if key == "file" {
                files.push(value.to_string());
            } else {
                fields.insert(key.to_string(), value.to_string());
            }
        }
        let get = |k: &str| {
            fields
                .get(k)
                .ok_or_else(|| Error::Config(format!("manifest missing key `{k}`")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("manifest key `{k}` is not an integer")))
        };
        let parse_f64 = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("manifest key `{k}` is not a number")))
        };
        let offsets: Vec<f64> = get("modality_offsets")?
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config("bad modality_offsets entry".into()))
            })
            .collect::<Result<_>>()?;
        let config = SyntheticDatasetConfig {
            num_samples: parse_usize("num_samples")?,
            num_modalities: parse_usize("num_modalities")?,
            dims: (parse_usize("dim_h")?, parse_usize("dim_w")?, parse_usize("dim_d")?),
            diversity: parse_f64("diversity")?,
            modality_offsets: offsets,
            lesion_fraction: parse_f64("lesion_fraction")?,
            seed: get("seed")?
                .parse()
                .map_err(|_| Error::Config("manifest key `seed` is not an integer".into()))?,
        };
        let volumes: Vec<MultiModalVolume> = files
            .iter()
            .map(|name| MultiModalVolume::load(&dir.join(name)))
            .collect::<Result<_>>()?;
        if volumes.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { volumes, config })
    }

    pub fn mean_field(&self) -> Array4<f64> {
        mean_field(&self.volumes).expect("dataset is non-empty")
    }
}
