//! Grid-aligned binary masks: random training masks, checkerboard pairs for
//! score initialization, nearest-neighbour resampling and application.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, MaskPlane};
use crate::rng;

/// Default per-cell masking probability.
pub const DEFAULT_P_MASK: f64 = 0.5;

/// A `cell × cell` grid tiling an `height × width` image exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridSpec {
    cell: usize,
    height: usize,
    width: usize,
}

impl GridSpec {
    pub fn new(cell: usize, height: usize, width: usize) -> Result<Self> {
        if cell == 0 || height == 0 || width == 0 || height % cell != 0 || width % cell != 0 {
            return Err(Error::InvalidGrid {
                cell,
                height,
                width,
            });
        }
        Ok(Self {
            cell,
            height,
            width,
        })
    }

    pub fn cell(&self) -> usize {
        self.cell
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rows(&self) -> usize {
        self.height / self.cell
    }

    pub fn cols(&self) -> usize {
        self.width / self.cell
    }

    /// Number of cells `N_k`.
    pub fn cell_count(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Expands a per-cell predicate into a full-resolution mask.
    pub fn expand(&self, mut visible: impl FnMut(usize, usize) -> bool) -> MaskPlane {
        let cells: Vec<bool> = (0..self.rows())
            .flat_map(|r| (0..self.cols()).map(move |c| (r, c)))
            .map(|(r, c)| visible(r, c))
            .collect();
        let cols = self.cols();
        MaskPlane::from_fn(self.height, self.width, |y, x| {
            cells[(y / self.cell) * cols + x / self.cell]
        })
    }
}

/// Ordered set of distinct grid sizes used for training and inference.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ScaleSet(Vec<usize>);

impl ScaleSet {
    /// Sorts the sizes ascending; rejects empty sets, zero and duplicates.
    pub fn new(mut scales: Vec<usize>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::InvalidScales("scale set is empty".into()));
        }
        if scales.contains(&0) {
            return Err(Error::InvalidScales("grid size 0".into()));
        }
        scales.sort_unstable();
        if scales.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidScales(format!(
                "duplicate grid size in {scales:?}"
            )));
        }
        Ok(Self(scales))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    /// Checks that every scale tiles `height × width`.
    pub fn validate_for(&self, height: usize, width: usize) -> Result<()> {
        for k in self.iter() {
            GridSpec::new(k, height, width)?;
        }
        Ok(())
    }
}

impl Default for ScaleSet {
    fn default() -> Self {
        Self(vec![4, 8, 16])
    }
}

impl TryFrom<Vec<usize>> for ScaleSet {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ScaleSet> for Vec<usize> {
    fn from(s: ScaleSet) -> Self {
        s.0
    }
}

impl std::str::FromStr for ScaleSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let scales = s
            .split(',')
            .map(|t| t.trim())
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| Error::InvalidScales(format!("bad grid size {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(scales)
    }
}

fn check_probability(p_mask: f64) -> Result<()> {
    if !(p_mask > 0.0 && p_mask < 1.0) {
        return Err(Error::Precondition(format!(
            "masking probability {p_mask} outside (0, 1)"
        )));
    }
    Ok(())
}

/// Random grid mask: each cell is masked (0) independently with probability
/// `p_mask`. Deterministic in `(seed, grid, p_mask)`.
pub fn sample_random_mask(seed: u64, grid: GridSpec, p_mask: f64) -> Result<MaskPlane> {
    check_probability(p_mask)?;
    let mut rng = rng::stream(
        seed,
        &[grid.cell as u64, grid.height as u64, grid.width as u64],
    );
    let cells: Vec<bool> = (0..grid.cell_count())
        .map(|_| rng.random::<f64>() >= p_mask)
        .collect();
    let cols = grid.cols();
    Ok(grid.expand(|r, c| cells[r * cols + c]))
}

/// Complementary checkerboard masks; the first keeps cells with even `row + col`.
pub fn make_checkerboard_pair(grid: GridSpec) -> (MaskPlane, MaskPlane) {
    let a = grid.expand(|r, c| (r + c) % 2 == 0);
    let b = a.complement();
    (a, b)
}

/// Nearest-neighbour resampling to an exact divisor resolution. Output
/// pixel `(r, c)` samples source `(r·H/h, c·W/w)`.
pub fn downsample_mask_nearest(
    mask: &MaskPlane,
    target_h: usize,
    target_w: usize,
) -> Result<MaskPlane> {
    let (h, w) = (mask.height(), mask.width());
    if target_h == 0 || target_w == 0 || h % target_h != 0 || w % target_w != 0 {
        return Err(Error::Precondition(format!(
            "{target_h}x{target_w} does not evenly divide {h}x{w}"
        )));
    }
    let (sy, sx) = (h / target_h, w / target_w);
    Ok(MaskPlane::from_fn(target_h, target_w, |r, c| {
        mask.is_visible(r * sy, c * sx)
    }))
}

/// Element-wise product of every channel with the mask.
pub fn apply_mask(image: &Image, mask: &MaskPlane) -> Result<Image> {
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(Error::shape(
            format!("{}x{}", image.height(), image.width()),
            format!("{}x{}", mask.height(), mask.width()),
        ));
    }
    let n = image.pixels();
    let mut out = image.clone();
    for c in 0..image.channels() {
        for (v, &m) in out.channel_mut(c).iter_mut().zip(mask.data()) {
            *v *= m as f64;
        }
    }
    debug_assert_eq!(out.data().len(), n * image.channels());
    Ok(out)
}

/// `<masked image, mask, image>` training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub masked: Image,
    pub mask: MaskPlane,
    pub image: Image,
    /// Grid size the mask was drawn at.
    pub cell: usize,
}

/// Draws a grid size uniformly from `scales`, samples a fresh mask at that
/// size and masks the image.
pub fn make_training_triplet(
    image: &Image,
    scales: &ScaleSet,
    seed: u64,
    p_mask: f64,
) -> Result<Triplet> {
    check_probability(p_mask)?;
    let mut rng = rng::stream(seed, &[0x5ca1e]);
    let cell = scales.as_slice()[rng.random_range(0..scales.len())];
    let grid = GridSpec::new(cell, image.height(), image.width())?;
    let mask = sample_random_mask(rng::derive_seed(seed, &[0x3a5c]), grid, p_mask)?;
    let masked = apply_mask(image, &mask)?;
    Ok(Triplet {
        masked,
        mask,
        image: image.clone(),
        cell,
    })
}
