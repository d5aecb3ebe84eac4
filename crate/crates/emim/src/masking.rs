//! Masking strategies for multi-modal patch grids.
//!
//! A mask is a boolean matrix over `(modality, position)` cells. The random
//! baseline removes whole positions: every modality at a selected position is
//! masked together, mirroring how single-view masked-image pretraining treats
//! a multi-modal patch as one unit. The hybrid pattern refines that with
//! three consecutive phases applied to still-unmasked cells:
//!
//! 1. **Modal** — one modality, chosen uniformly, is masked everywhere.
//! 2. **Position** — a fraction of positions is masked across all modalities.
//! 3. **Patch** — at a fraction of the remaining positions, a strict
//!    non-empty subset of the visible modalities is masked, so the masked and
//!    visible modalities complement each other at that position.
//!
//! Each set bit records the phase that produced it, so phase-level properties
//! stay testable after composition.

use ndarray::Array2;
use rand::seq::index::sample as index_sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::volume::{MultiModalVolume, PatchGrid};

/// Which generator phase set a bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskPhase {
    Modal,
    Position,
    Patch,
    Random,
}

/// Identifies a mask generator family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Random,
    Hmp,
}

impl std::fmt::Display for MaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MaskKind::Random => write!(f, "random"),
            MaskKind::Hmp => write!(f, "hmp"),
        }
    }
}

/// A per-`(modality, position)` boolean mask; `true` means masked.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    /// `(C, n)`, true = masked.
    bits: Array2<bool>,
    /// The generator's realized target fraction of masked cells.
    mask_ratio: f64,
    /// Phase attribution for every set bit.
    phase_log: Array2<Option<MaskPhase>>,
}

impl BinaryMask {
    fn empty(num_modalities: usize, num_positions: usize) -> Self {
        Self {
            bits: Array2::from_elem((num_modalities, num_positions), false),
            mask_ratio: 0.0,
            phase_log: Array2::from_elem((num_modalities, num_positions), None),
        }
    }

    /// Sets a cell if still clear; earlier phases keep attribution.
    fn set(&mut self, modality: usize, position: usize, phase: MaskPhase) {
        if !self.bits[(modality, position)] {
            self.bits[(modality, position)] = true;
            self.phase_log[(modality, position)] = Some(phase);
        }
    }

    pub fn num_modalities(&self) -> usize {
        self.bits.dim().0
    }

    pub fn num_positions(&self) -> usize {
        self.bits.dim().1
    }

    pub fn is_masked(&self, modality: usize, position: usize) -> bool {
        self.bits[(modality, position)]
    }

    pub fn phase(&self, modality: usize, position: usize) -> Option<MaskPhase> {
        self.phase_log[(modality, position)]
    }

    pub fn masked_cell_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Fraction of masked cells actually realized.
    pub fn realized_fraction(&self) -> f64 {
        self.masked_cell_count() as f64 / self.bits.len() as f64
    }

    /// The generator's realized target fraction (see the per-generator docs).
    pub fn mask_ratio(&self) -> f64 {
        self.mask_ratio
    }

    /// Masked cells in `(modality, position)` order.
    pub fn iter_masked(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .indexed_iter()
            .filter(|(_, &b)| b)
            .map(|((c, i), _)| (c, i))
    }

    /// Number of visible (unmasked) modalities at `position`.
    pub fn visible_modalities(&self, position: usize) -> usize {
        (0..self.num_modalities())
            .filter(|&c| !self.bits[(c, position)])
            .count()
    }

    /// Text serialization: header `C n ρ seed`, then one `c,i` line per
    /// masked cell in `(c, i)` order.
    pub fn to_text(&self, seed: u64) -> String {
        let mut out = format!(
            "{} {} {} {}\n",
            self.num_modalities(),
            self.num_positions(),
            self.mask_ratio,
            seed
        );
        for (c, i) in self.iter_masked() {
            out.push_str(&format!("{c},{i}\n"));
        }
        out
    }

    /// Parses the [`BinaryMask::to_text`] format; phase attribution is not
    /// part of the wire format, so restored bits read as `Random`.
    pub fn from_text(text: &str) -> Result<(Self, u64)> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Config("empty mask text".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(Error::Config("mask header must be `C n rho seed`".into()));
        }
        let c_count: usize = parts[0].parse().map_err(|_| Error::Config("bad C".into()))?;
        let n: usize = parts[1].parse().map_err(|_| Error::Config("bad n".into()))?;
        let ratio: f64 = parts[2].parse().map_err(|_| Error::Config("bad rho".into()))?;
        let seed: u64 = parts[3].parse().map_err(|_| Error::Config("bad seed".into()))?;
        let mut mask = Self::empty(c_count, n);
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (c, i) = line
                .split_once(',')
                .ok_or_else(|| Error::Config(format!("bad mask line `{line}`")))?;
            let c: usize = c.parse().map_err(|_| Error::Config("bad modality index".into()))?;
            let i: usize = i.parse().map_err(|_| Error::Config("bad position index".into()))?;
            if c >= c_count || i >= n {
                return Err(Error::Config(format!("mask cell ({c},{i}) out of range")));
            }
            mask.set(c, i, MaskPhase::Random);
        }
        mask.mask_ratio = ratio;
        Ok((mask, seed))
    }
}

/// Configuration of the hybrid mask pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct HmpConfig {
    pub modal_enabled: bool,
    pub position_enabled: bool,
    pub patch_enabled: bool,
    /// Fraction of positions removed by the position phase.
    pub position_ratio: f64,
    /// Fraction of positions visited by the patch phase.
    pub patch_positions_ratio: f64,
    /// Minimum modalities the patch phase must leave visible at a position.
    pub patch_min_visible: usize,
}

impl Default for HmpConfig {
    fn default() -> Self {
        Self {
            modal_enabled: true,
            position_enabled: true,
            patch_enabled: true,
            position_ratio: 0.5,
            patch_positions_ratio: 0.25,
            patch_min_visible: 1,
        }
    }
}

impl HmpConfig {
    pub fn validate(&self, num_modalities: usize) -> Result<()> {
        if !self.modal_enabled && !self.position_enabled && !self.patch_enabled {
            return Err(Error::Config("at least one HMP phase must be enabled".into()));
        }
        for (name, r) in [
            ("position_ratio", self.position_ratio),
            ("patch_positions_ratio", self.patch_positions_ratio),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {r}")));
            }
        }
        if self.patch_min_visible == 0 {
            return Err(Error::Config("patch_min_visible must be >= 1".into()));
        }
        if (self.modal_enabled || self.patch_enabled) && num_modalities < 2 {
            return Err(Error::Config(
                "modal and patch phases need at least 2 modalities".into(),
            ));
        }
        if self.patch_enabled && num_modalities <= self.patch_min_visible {
            return Err(Error::Config(format!(
                "patch phase infeasible: {} modalities cannot keep {} visible and mask one",
                num_modalities, self.patch_min_visible
            )));
        }
        Ok(())
    }
}

/// Exact number of positions a ratio selects out of `n`.
fn rounded_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64).round() as usize
}

/// Baseline mask: exactly `round(ρ·n)` positions drawn uniformly without
/// replacement, with all `C` modalities masked at each.
pub fn random_mask(
    num_positions: usize,
    num_modalities: usize,
    ratio: f64,
    rng: &mut impl Rng,
) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio must be in [0, 1], got {ratio}")));
    }
    let k = rounded_count(ratio, num_positions);
    let mut mask = BinaryMask::empty(num_modalities, num_positions);
    for i in index_sample(rng, num_positions, k) {
        for c in 0..num_modalities {
            mask.set(c, i, MaskPhase::Random);
        }
    }
    mask.mask_ratio = k as f64 / num_positions as f64;
    Ok(mask)
}

/// Uniformly draws a subset of `pool` whose size lies in `[1, max_take]`,
/// uniform over all admissible subsets (sizes weighted binomially).
fn uniform_bounded_subset(pool: &[usize], max_take: usize, rng: &mut impl Rng) -> Vec<usize> {
    let binom = |n: u64, k: u64| -> u64 {
        let k = k.min(n - k);
        let mut acc = 1u64;
        for i in 0..k {
            acc = acc * (n - i) / (i + 1);
        }
        acc
    };
    let total: u64 = (1..=max_take as u64).map(|s| binom(pool.len() as u64, s)).sum();
    let mut pick = rng.random_range(0..total);
    let mut size = 1;
    for s in 1..=max_take as u64 {
        let count = binom(pool.len() as u64, s);
        if pick < count {
            size = s as usize;
            break;
        }
        pick -= count;
    }
    index_sample(rng, pool.len(), size)
        .iter()
        .map(|i| pool[i])
        .collect()
}

/// The hybrid mask pattern: modal, position, and patch phases applied in
/// order on still-unmasked cells. Overlaps keep the earliest attribution.
pub fn hmp_mask(
    num_positions: usize,
    num_modalities: usize,
    config: &HmpConfig,
    rng: &mut impl Rng,
) -> Result<BinaryMask> {
    config.validate(num_modalities)?;
    let mut mask = BinaryMask::empty(num_modalities, num_positions);

    if config.modal_enabled {
        let star = rng.random_range(0..num_modalities);
        for i in 0..num_positions {
            mask.set(star, i, MaskPhase::Modal);
        }
    }

    if config.position_enabled {
        let k = rounded_count(config.position_ratio, num_positions);
        for i in index_sample(rng, num_positions, k) {
            for c in 0..num_modalities {
                mask.set(c, i, MaskPhase::Position);
            }
        }
    }

    if config.patch_enabled {
        // Candidates must admit a complementary split: at least one maskable
        // modality on top of the required visible ones.
        let eligible: Vec<usize> = (0..num_positions)
            .filter(|&i| mask.visible_modalities(i) > config.patch_min_visible)
            .collect();
        let k = rounded_count(config.patch_positions_ratio, num_positions).min(eligible.len());
        for idx in index_sample(rng, eligible.len(), k) {
            let position = eligible[idx];
            let visible: Vec<usize> = (0..num_modalities)
                .filter(|&c| !mask.is_masked(c, position))
                .collect();
            let max_take = visible.len() - config.patch_min_visible;
            for c in uniform_bounded_subset(&visible, max_take, rng) {
                mask.set(c, position, MaskPhase::Patch);
            }
        }
    }

    mask.mask_ratio = mask.realized_fraction();
    Ok(mask)
}

/// A mask generator: the baseline or the hybrid pattern.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskStrategy {
    Random { ratio: f64 },
    Hmp(HmpConfig),
}

impl MaskStrategy {
    pub fn generate(
        &self,
        num_positions: usize,
        num_modalities: usize,
        rng: &mut impl Rng,
    ) -> Result<BinaryMask> {
        match self {
            MaskStrategy::Random { ratio } => {
                random_mask(num_positions, num_modalities, *ratio, rng)
            }
            MaskStrategy::Hmp(config) => hmp_mask(num_positions, num_modalities, config, rng),
        }
    }

    pub fn kind(&self) -> MaskKind {
        match self {
            MaskStrategy::Random { .. } => MaskKind::Random,
            MaskStrategy::Hmp(_) => MaskKind::Hmp,
        }
    }
}

/// One patch of a masked or unmasked view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPatch {
    pub position: usize,
    pub modality: usize,
    pub block: ndarray::Array3<f32>,
}

/// The complementary views induced by a mask: `unmasked ∪ masked` covers all
/// patches, the intersection is empty, and both keep position indices.
#[derive(Debug, Clone)]
pub struct MaskedViews {
    pub unmasked: Vec<ViewPatch>,
    pub masked: Vec<ViewPatch>,
    pub mask: BinaryMask,
}

/// Splits the grid's patches by mask bit, preserving `(position, modality)`
/// order in both views.
pub fn apply_mask(grid: &PatchGrid, mask: &BinaryMask) -> Result<MaskedViews> {
    if grid.num_modalities() != mask.num_modalities()
        || grid.num_positions() != mask.num_positions()
    {
        return Err(Error::ShapeMismatch(format!(
            "grid is {}x{}, mask is {}x{}",
            grid.num_modalities(),
            grid.num_positions(),
            mask.num_modalities(),
            mask.num_positions()
        )));
    }
    let mut unmasked = Vec::new();
    let mut masked = Vec::new();
    for position in 0..grid.num_positions() {
        for modality in 0..grid.num_modalities() {
            let patch = ViewPatch {
                position,
                modality,
                block: grid.block(position, modality).clone(),
            };
            if mask.is_masked(modality, position) {
                masked.push(patch);
            } else {
                unmasked.push(patch);
            }
        }
    }
    Ok(MaskedViews {
        unmasked,
        masked,
        mask: mask.clone(),
    })
}

/// Replaces every voxel of each masked `(modality, position)` block with
/// `fill_value`; visible voxels are bit-identical to the input.
pub fn masked_fill(
    volume: &MultiModalVolume,
    mask: &BinaryMask,
    patch_size: (usize, usize, usize),
    fill_value: f32,
) -> Result<MultiModalVolume> {
    let grid = crate::volume::partition(volume, patch_size)?;
    if grid.num_modalities() != mask.num_modalities()
        || grid.num_positions() != mask.num_positions()
    {
        return Err(Error::ShapeMismatch(format!(
            "volume partitions into {}x{}, mask is {}x{}",
            grid.num_modalities(),
            grid.num_positions(),
            mask.num_modalities(),
            mask.num_positions()
        )));
    }
    let (ph, pw, pd) = patch_size;
    let mut data = volume.data().clone();
    for (c, i) in mask.iter_masked() {
        let (bx, by, bz) = grid.position_coords(i);
        data.slice_mut(ndarray::s![
            c,
            bx * ph..(bx + 1) * ph,
            by * pw..(by + 1) * pw,
            bz * pd..(bz + 1) * pd
        ])
        .fill(fill_value);
    }
    MultiModalVolume::new(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use crate::volume::{generate_dataset, partition, SyntheticDatasetConfig};

    const N: usize = 64;
    const C: usize = 4;

    #[test]
    fn random_mask_edge_ratios() {
        let mut rng = derive_rng(1, 0);
        let empty = random_mask(N, C, 0.0, &mut rng).unwrap();
        assert_eq!(empty.masked_cell_count(), 0);
        let full = random_mask(N, C, 1.0, &mut rng).unwrap();
        assert_eq!(full.masked_cell_count(), N * C);
    }

    #[test]
    fn random_mask_exact_counts() {
        let mut rng = derive_rng(2, 0);
        let mask = random_mask(N, C, 0.75, &mut rng).unwrap();
        let positions: Vec<usize> = (0..N).filter(|&i| mask.is_masked(0, i)).collect();
        assert_eq!(positions.len(), 48);
        assert_eq!(mask.masked_cell_count(), 192);
        // Whole positions: all modalities agree.
        for i in 0..N {
            let first = mask.is_masked(0, i);
            for c in 1..C {
                assert_eq!(mask.is_masked(c, i), first);
            }
        }
    }

    #[test]
    fn random_mask_marginal_frequency() {
        let trials = 10_000;
        let ratio = 0.5;
        let mut hits = vec![0usize; N];
        for t in 0..trials {
            let mut rng = derive_rng(4, t as u64);
            let mask = random_mask(N, C, ratio, &mut rng).unwrap();
            for (i, hit) in hits.iter_mut().enumerate() {
                if mask.is_masked(0, i) {
                    *hit += 1;
                }
            }
        }
        let se = (ratio * (1.0 - ratio) / trials as f64).sqrt();
        for hit in hits {
            let freq = hit as f64 / trials as f64;
            assert!((freq - ratio).abs() <= 3.0 * se, "freq {freq} vs {ratio}");
        }
    }

    #[test]
    fn modal_only_masks_exactly_one_modality() {
        let config = HmpConfig {
            modal_enabled: true,
            position_enabled: false,
            patch_enabled: false,
            ..HmpConfig::default()
        };
        let mut rng = derive_rng(4, 0);
        let mask = hmp_mask(N, C, &config, &mut rng).unwrap();
        let full: Vec<usize> = (0..C)
            .filter(|&c| (0..N).all(|i| mask.is_masked(c, i)))
            .collect();
        assert_eq!(full.len(), 1);
        assert_eq!(mask.masked_cell_count(), N);
    }

    #[test]
    fn modal_choice_is_uniform() {
        let trials = 10_000;
        let config = HmpConfig {
            modal_enabled: true,
            position_enabled: false,
            patch_enabled: false,
            ..HmpConfig::default()
        };
        let mut counts = vec![0usize; C];
        for t in 0..trials {
            let mut rng = derive_rng(5, t as u64);
            let mask = hmp_mask(N, C, &config, &mut rng).unwrap();
            let star = (0..C).find(|&c| mask.is_masked(c, 0)).unwrap();
            counts[star] += 1;
        }
        let p = 1.0 / C as f64;
        let se = (p * (1.0 - p) / trials as f64).sqrt();
        for count in counts {
            let freq = count as f64 / trials as f64;
            assert!((freq - p).abs() <= 3.0 * se, "freq {freq} vs {p}");
        }
    }

    #[test]
    fn position_only_masks_whole_positions() {
        let config = HmpConfig {
            modal_enabled: false,
            position_enabled: true,
            patch_enabled: false,
            position_ratio: 0.5,
            ..HmpConfig::default()
        };
        let mut rng = derive_rng(6, 0);
        let mask = hmp_mask(N, C, &config, &mut rng).unwrap();
        let masked_positions: Vec<usize> = (0..N)
            .filter(|&i| (0..C).all(|c| mask.is_masked(c, i)))
            .collect();
        assert_eq!(masked_positions.len(), 32);
        assert_eq!(mask.masked_cell_count(), 32 * C);
    }

    #[test]
    fn patch_only_keeps_complementary_split() {
        let config = HmpConfig {
            modal_enabled: false,
            position_enabled: false,
            patch_enabled: true,
            patch_positions_ratio: 0.5,
            patch_min_visible: 1,
            ..HmpConfig::default()
        };
        for t in 0..1000 {
            let mut rng = derive_rng(7, t);
            let mask = hmp_mask(N, C, &config, &mut rng).unwrap();
            for i in 0..N {
                let masked = (0..C).filter(|&c| mask.is_masked(c, i)).count();
                if masked > 0 {
                    assert!(masked >= 1 && C - masked >= config.patch_min_visible);
                }
            }
        }
    }

    #[test]
    fn phase_log_covers_exactly_the_set_bits() {
        let mut rng = derive_rng(8, 0);
        let mask = hmp_mask(N, C, &HmpConfig::default(), &mut rng).unwrap();
        for c in 0..C {
            for i in 0..N {
                assert_eq!(mask.is_masked(c, i), mask.phase(c, i).is_some());
            }
        }
        assert!((mask.realized_fraction() - mask.mask_ratio()).abs() <= 1.0 / (C * N) as f64);
    }

    #[test]
    fn patch_phase_never_fully_masks_alone() {
        let config = HmpConfig {
            modal_enabled: false,
            position_enabled: false,
            patch_enabled: true,
            patch_positions_ratio: 1.0,
            patch_min_visible: 1,
            ..HmpConfig::default()
        };
        for t in 0..200 {
            let mut rng = derive_rng(9, t);
            let mask = hmp_mask(N, C, &config, &mut rng).unwrap();
            for i in 0..N {
                assert!(mask.visible_modalities(i) >= 1);
            }
        }
    }

    #[test]
    fn infeasible_patch_phase_is_a_config_error() {
        let config = HmpConfig {
            patch_min_visible: C,
            ..HmpConfig::default()
        };
        let mut rng = derive_rng(10, 0);
        assert!(hmp_mask(N, C, &config, &mut rng).is_err());
    }

    fn test_grid() -> crate::volume::PatchGrid {
        let config = SyntheticDatasetConfig {
            num_samples: 1,
            num_modalities: C,
            dims: (16, 16, 16),
            diversity: 0.1,
            modality_offsets: SyntheticDatasetConfig::default_offsets(C),
            lesion_fraction: 0.0,
            seed: 3,
        };
        let vol = generate_dataset(&config).unwrap().remove(0);
        partition(&vol, (4, 4, 4)).unwrap()
    }

    #[test]
    fn apply_mask_partitions_patches() {
        let grid = test_grid();
        let mut rng = derive_rng(11, 0);
        let mask = random_mask(N, C, 0.5, &mut rng).unwrap();
        let views = apply_mask(&grid, &mask).unwrap();
        assert_eq!(views.masked.len() + views.unmasked.len(), N * C);
        // Each (position, modality) lands in exactly one view.
        for patch in &views.masked {
            assert!(mask.is_masked(patch.modality, patch.position));
        }
        for patch in &views.unmasked {
            assert!(!mask.is_masked(patch.modality, patch.position));
        }

        let empty = random_mask(N, C, 0.0, &mut rng).unwrap();
        let views = apply_mask(&grid, &empty).unwrap();
        assert!(views.masked.is_empty());
        assert_eq!(views.unmasked.len(), N * C);

        let full = random_mask(N, C, 1.0, &mut rng).unwrap();
        let views = apply_mask(&grid, &full).unwrap();
        assert!(views.unmasked.is_empty());
    }

    #[test]
    fn masked_fill_replaces_only_masked_blocks() {
        let grid = test_grid();
        let volume = grid.reassemble();
        let mut rng = derive_rng(12, 0);

        let empty = random_mask(N, C, 0.0, &mut rng).unwrap();
        assert_eq!(masked_fill(&volume, &empty, (4, 4, 4), 0.0).unwrap(), volume);

        let full = random_mask(N, C, 1.0, &mut rng).unwrap();
        let zeroed = masked_fill(&volume, &full, (4, 4, 4), 0.0).unwrap();
        assert!(zeroed.data().iter().all(|&v| v == 0.0));

        let half = random_mask(N, C, 0.5, &mut rng).unwrap();
        let filled = masked_fill(&volume, &half, (4, 4, 4), 0.25).unwrap();
        let filled_grid = partition(&filled, (4, 4, 4)).unwrap();
        for i in 0..N {
            for c in 0..C {
                if half.is_masked(c, i) {
                    assert!(filled_grid.block(i, c).iter().all(|&v| v == 0.25));
                } else {
                    assert_eq!(filled_grid.block(i, c), grid.block(i, c));
                }
            }
        }
    }

    #[test]
    fn text_roundtrip() {
        let mut rng = derive_rng(13, 0);
        let mask = hmp_mask(8, 3, &HmpConfig::default(), &mut rng).unwrap();
        let text = mask.to_text(13);
        let (parsed, seed) = BinaryMask::from_text(&text).unwrap();
        assert_eq!(seed, 13);
        assert_eq!(parsed.masked_cell_count(), mask.masked_cell_count());
        for c in 0..3 {
            for i in 0..8 {
                assert_eq!(parsed.is_masked(c, i), mask.is_masked(c, i));
            }
        }
    }
}
