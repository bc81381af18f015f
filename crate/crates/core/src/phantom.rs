//! Synthetic vessel phantoms: branching trees of thick line segments on a
//! bright, noisy background, with exact binary ground truth.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure, Error, Result};
use crate::imgproc::{gaussian_smooth, ImageGrid, MaskGrid};
use crate::par;
use crate::rng::{derive_seed, rng_from_seed, Rng};

pub const MIN_FOREGROUND: f64 = 0.01;
pub const MAX_FOREGROUND: f64 = 0.40;
pub const MAX_ATTEMPTS: u64 = 100;
pub const DEFAULT_SPLIT_RATIO: f64 = 0.776;
const MAX_BRANCH_ANGLE: f64 = PI / 3.0;
const EDGE_SIGMA: f64 = 1.0;
const STREAM_SAMPLE: u64 = 11;
const STREAM_SPLIT: u64 = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub size: usize,
    pub n_trees: usize,
    pub branch_depth: usize,
    /// Root segment width in pixels.
    pub width_root: f64,
    /// Width multiplier applied at each branching level.
    pub width_decay: f64,
    pub noise_std: f64,
    pub background_level: f64,
    pub vessel_contrast: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            size: 64,
            n_trees: 2,
            branch_depth: 3,
            width_root: 3.0,
            width_decay: 0.75,
            noise_std: 0.03,
            background_level: 0.8,
            vessel_contrast: 0.35,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.size >= 8, InvalidParameter, "phantom size {} is below 8", self.size);
        ensure!(self.n_trees >= 1, InvalidParameter, "need at least one tree");
        ensure!(self.width_root >= 1.0, InvalidParameter, "width_root must be >= 1");
        ensure!(
            self.width_decay > 0.0 && self.width_decay <= 1.0,
            InvalidParameter,
            "width_decay must lie in (0, 1]"
        );
        ensure!(self.noise_std >= 0.0, InvalidParameter, "noise_std must be >= 0");
        ensure!(
            (0.0..=1.0).contains(&self.background_level) && (0.0..=1.0).contains(&self.vessel_contrast),
            InvalidParameter,
            "background_level and vessel_contrast must lie in [0, 1]"
        );
        Ok(())
    }

    /// True when noise could swamp the vessels.
    pub fn low_contrast_warning(&self) -> bool {
        self.vessel_contrast <= self.noise_std
    }
}

/// Marks every pixel whose centre lies within `width / 2` of the segment.
fn draw_segment(mask: &mut [u8], size: usize, a: (f64, f64), b: (f64, f64), width: f64) {
    let r = width / 2.0;
    let (y0, x0) = a;
    let (y1, x1) = b;
    let lo_y = (y0.min(y1) - r).floor().max(0.0) as usize;
    let hi_y = ((y0.max(y1) + r).ceil().max(0.0) as usize).min(size - 1);
    let lo_x = (x0.min(x1) - r).floor().max(0.0) as usize;
    let hi_x = ((x0.max(x1) + r).ceil().max(0.0) as usize).min(size - 1);
    let (dy, dx) = (y1 - y0, x1 - x0);
    let len2 = dy * dy + dx * dx;
    for y in lo_y..=hi_y {
        for x in lo_x..=hi_x {
            let (py, px) = (y as f64 - y0, x as f64 - x0);
            let t = if len2 > 0.0 { ((py * dy + px * dx) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let (ey, ex) = (py - t * dy, px - t * dx);
            if ey * ey + ex * ex <= r * r {
                mask[y * size + x] = 1;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn grow(
    mask: &mut [u8],
    cfg: &PhantomConfig,
    rng: &mut Rng,
    start: (f64, f64),
    angle: f64,
    length: f64,
    width: f64,
    level: usize,
) {
    let end = (start.0 + length * angle.sin(), start.1 + length * angle.cos());
    draw_segment(mask, cfg.size, start, end, width.max(1.0));
    if level >= cfg.branch_depth {
        return;
    }
    for _ in 0..2 {
        let turn = rng.random_range(-MAX_BRANCH_ANGLE..=MAX_BRANCH_ANGLE);
        let shrink = rng.random_range(0.6..0.85);
        grow(mask, cfg, rng, end, angle + turn, length * shrink, width * cfg.width_decay, level + 1);
    }
}

fn render(cfg: &PhantomConfig, seed: u64) -> (ImageGrid, MaskGrid) {
    let n = cfg.size;
    let s = n as f64;
    let mut rng = rng_from_seed(seed);
    let mut mask = vec![0u8; n * n];
    for _ in 0..cfg.n_trees {
        let start = (rng.random_range(0.15 * s..0.85 * s), rng.random_range(0.15 * s..0.85 * s));
        let angle = rng.random_range(-PI..PI);
        let length = rng.random_range(0.25 * s..0.4 * s);
        grow(&mut mask, cfg, &mut rng, start, angle, length, cfg.width_root, 0);
    }
    let soft = gaussian_smooth(&mask.iter().map(|&m| m as f64).collect::<Vec<_>>(), n, n, EDGE_SIGMA);
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
    let data = soft
        .iter()
        .map(|&v| {
            let eps = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (cfg.background_level - cfg.vessel_contrast * v + eps).clamp(0.0, 1.0)
        })
        .collect();
    (ImageGrid::from_parts(n, n, data, false), MaskGrid::from_parts(n, n, mask))
}

/// Renders one phantom; if the foreground fraction falls outside
/// `[MIN_FOREGROUND, MAX_FOREGROUND]`, retries with derived seeds.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<(ImageGrid, MaskGrid)> {
    cfg.validate()?;
    for attempt in 0..MAX_ATTEMPTS {
        let seed = if attempt == 0 { cfg.seed } else { derive_seed(cfg.seed, &[attempt]) };
        let (image, mask) = render(cfg, seed);
        let f = mask.foreground_fraction();
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&f) {
            return Ok((image, mask));
        }
    }
    Err(Error::InvalidParameter(format!(
        "no phantom with foreground fraction in [{MIN_FOREGROUND}, {MAX_FOREGROUND}] after {MAX_ATTEMPTS} attempts"
    )))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidParameter(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSample {
    pub index: usize,
    pub seed: u64,
    pub split: Split,
    pub image: ImageGrid,
    pub mask: MaskGrid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomDataset {
    pub template: PhantomConfig,
    pub seed: u64,
    pub split_ratio: f64,
    pub samples: Vec<PhantomSample>,
}

impl PhantomDataset {
    pub fn split(&self, which: Split) -> impl Iterator<Item = &PhantomSample> {
        self.samples.iter().filter(move |s| s.split == which)
    }

    pub fn count(&self, which: Split) -> usize {
        self.split(which).count()
    }
}

/// Sizes of (train, val, test) for `n` samples: train gets
/// `round(n * ratio)`, the remainder is halved with val taking the odd one.
pub fn split_sizes(n: usize, ratio: f64) -> Result<(usize, usize, usize)> {
    ensure!(ratio > 0.0 && ratio < 1.0, InvalidParameter, "split ratio {ratio} outside (0, 1)");
    let train = (n as f64 * ratio).round() as usize;
    let rest = n.saturating_sub(train);
    let val = rest.div_ceil(2);
    let test = rest - val;
    ensure!(
        train > 0 && val > 0 && test > 0,
        InvalidParameter,
        "{n} samples at ratio {ratio} leave an empty split ({train}/{val}/{test})"
    );
    Ok((train, val, test))
}

/// Seed of sample `index` in a dataset generated from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, &[STREAM_SAMPLE, index as u64])
}

/// Split assignment for every index, in index order.
pub fn assign_splits(n: usize, ratio: f64, seed: u64) -> Result<Vec<Split>> {
    let (train, val, _) = split_sizes(n, ratio)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(derive_seed(seed, &[STREAM_SPLIT])));
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < train {
            splits[i] = Split::Train;
        } else if rank < train + val {
            splits[i] = Split::Val;
        }
    }
    Ok(splits)
}

pub fn make_dataset(n: usize, template: &PhantomConfig, split_ratio: f64, seed: u64) -> Result<PhantomDataset> {
    ensure!(n >= 3, InvalidParameter, "need at least 3 phantoms so that no split is empty, got {n}");
    template.validate()?;
    let splits = assign_splits(n, split_ratio, seed)?;
    let samples = par::map_range(n, |i| -> Result<PhantomSample> {
        let s = sample_seed(seed, i);
        let (image, mask) = generate_phantom(&PhantomConfig { seed: s, ..template.clone() })?;
        Ok(PhantomSample { index: i, seed: s, split: splits[i], image, mask })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(PhantomDataset { template: template.clone(), seed, split_ratio, samples })
}
