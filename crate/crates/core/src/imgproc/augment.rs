use super::geometric::elastic_with_rng;
use super::{check_pair, clahe, flip_pair, gamma_correct, normalize, rotate_pair, ImageGrid, MaskGrid};
use crate::error::{ensure, Result};
use crate::rng::rng_from_seed;
use rand::Rng as _;

/// Parameters of the training-time augmentation pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub rotation_range_deg: f64,
    pub gamma_range: (f64, f64),
    pub elastic_prob: f64,
    /// Displacement magnitude in pixels at `elastic_reference_size`.
    pub elastic_alpha: f64,
    /// Smoothing scale in pixels at `elastic_reference_size`.
    pub elastic_sigma: f64,
    /// Image side the elastic parameters are quoted for; they scale linearly
    /// with the actual image side.
    pub elastic_reference_size: f64,
    pub clahe_clip: f64,
    pub clahe_tiles: usize,
    pub norm_mean: f64,
    pub norm_std: f64,
    /// Replace `norm_mean`/`norm_std` with training-split statistics.
    pub norm_auto: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rotation_range_deg: 15.0,
            gamma_range: (0.8, 1.2),
            elastic_prob: 0.3,
            elastic_alpha: 34.0,
            elastic_sigma: 4.0,
            elastic_reference_size: 512.0,
            clahe_clip: 2.0,
            clahe_tiles: 8,
            norm_mean: 0.5,
            norm_std: 0.25,
            norm_auto: true,
        }
    }
}

impl AugmentConfig {
    /// Photometric preprocessing only: no flips, rotation, gamma or elastic.
    pub fn without_random(&self) -> Self {
        Self {
            flip_prob: 0.0,
            rotation_range_deg: 0.0,
            gamma_range: (1.0, 1.0),
            elastic_prob: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        ensure!(prob(self.flip_prob), InvalidParameter, "flip_prob {} not in [0, 1]", self.flip_prob);
        ensure!(prob(self.elastic_prob), InvalidParameter, "elastic_prob {} not in [0, 1]", self.elastic_prob);
        ensure!(
            self.rotation_range_deg >= 0.0 && self.rotation_range_deg.is_finite(),
            InvalidParameter,
            "rotation range must be a finite non-negative bound"
        );
        let (lo, hi) = self.gamma_range;
        ensure!(
            lo > 0.0 && lo <= hi && hi.is_finite(),
            InvalidParameter,
            "gamma range ({lo}, {hi}) must satisfy 0 < lo <= hi"
        );
        ensure!(self.clahe_tiles >= 1, InvalidParameter, "clahe_tiles must be >= 1");
        ensure!(self.clahe_clip > 0.0, InvalidParameter, "clahe_clip must be > 0");
        ensure!(self.norm_std > 0.0, InvalidParameter, "norm_std must be > 0");
        ensure!(self.elastic_alpha >= 0.0, InvalidParameter, "elastic_alpha must be >= 0");
        ensure!(self.elastic_sigma > 0.0, InvalidParameter, "elastic_sigma must be > 0");
        ensure!(self.elastic_reference_size > 0.0, InvalidParameter, "elastic_reference_size must be > 0");
        Ok(())
    }

    /// Elastic `(alpha, sigma)` scaled to an image of the given side.
    pub fn elastic_params_for(&self, side: usize) -> (f64, f64) {
        let s = side as f64 / self.elastic_reference_size;
        (self.elastic_alpha * s, self.elastic_sigma * s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentOutcome {
    pub image: ImageGrid,
    pub mask: MaskGrid,
    /// Whether any geometric transform touched the mask.
    pub geometric: bool,
}

/// Deterministic preprocessing used at evaluation time: CLAHE then normalisation.
pub fn preprocess(image: &ImageGrid, config: &AugmentConfig) -> Result<ImageGrid> {
    let eq = clahe(image, config.clahe_clip, config.clahe_tiles)?;
    normalize(&eq, config.norm_mean, config.norm_std)
}

/// Runs the augmentation pipeline, reporting whether the mask geometry changed.
///
/// Fixed order: flips, rotation, CLAHE, gamma, elastic, normalisation. All
/// draws come from one generator seeded by `seed`.
pub fn augment_with_outcome(
    image: &ImageGrid,
    mask: &MaskGrid,
    config: &AugmentConfig,
    seed: u64,
) -> Result<AugmentOutcome> {
    config.validate()?;
    check_pair(image, mask)?;
    let mut rng = rng_from_seed(seed);
    let mut geometric = false;

    let hflip = rng.random::<f64>() < config.flip_prob;
    let vflip = rng.random::<f64>() < config.flip_prob;
    let (mut img, mut msk) = if hflip || vflip {
        geometric = true;
        flip_pair(image, mask, hflip, vflip)?
    } else {
        (image.clone(), mask.clone())
    };

    let r = config.rotation_range_deg;
    let angle = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    if angle != 0.0 {
        geometric = true;
        (img, msk) = rotate_pair(&img, &msk, angle)?;
    }

    img = clahe(&img, config.clahe_clip, config.clahe_tiles)?;

    let (glo, ghi) = config.gamma_range;
    let gamma = if ghi > glo { rng.random_range(glo..=ghi) } else { glo };
    img = gamma_correct(&img, gamma)?;

    if rng.random::<f64>() < config.elastic_prob {
        let (alpha, sigma) = config.elastic_params_for(img.width().max(img.height()));
        if alpha > 0.0 {
            geometric = true;
        }
        (img, msk) = elastic_with_rng(&img, &msk, alpha, sigma, &mut rng)?;
    }

    let image = normalize(&img, config.norm_mean, config.norm_std)?;
    Ok(AugmentOutcome { image, mask: msk, geometric })
}

pub fn apply_augmentations(
    image: &ImageGrid,
    mask: &MaskGrid,
    config: &AugmentConfig,
    seed: u64,
) -> Result<(ImageGrid, MaskGrid)> {
    let out = augment_with_outcome(image, mask, config, seed)?;
    Ok((out.image, out.mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn random_pair(seed: u64) -> (ImageGrid, MaskGrid) {
        let mut rng = rng_from_seed(seed);
        let img = (0..32 * 32).map(|_| rng.random::<f64>()).collect();
        let msk = (0..32 * 32).map(|_| u8::from(rng.random::<f64>() < 0.2)).collect();
        (ImageGrid::new(32, 32, img).unwrap(), MaskGrid::new(32, 32, msk).unwrap())
    }

    #[test]
    fn no_randomness_reduces_to_global_equalisation_and_normalisation() {
        let (img, msk) = random_pair(1);
        let cfg = AugmentConfig {
            clahe_clip: f64::INFINITY,
            clahe_tiles: 1,
            ..AugmentConfig::default().without_random()
        };
        let (i, m) = apply_augmentations(&img, &msk, &cfg, 99).unwrap();
        let expect = normalize(&clahe(&img, f64::INFINITY, 1).unwrap(), cfg.norm_mean, cfg.norm_std).unwrap();
        assert_eq!(i, expect);
        assert_eq!(m, msk);
        assert_eq!(preprocess(&img, &cfg).unwrap(), expect);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let (img, msk) = random_pair(2);
        let cfg = AugmentConfig { elastic_prob: 1.0, ..AugmentConfig::default() };
        let a = apply_augmentations(&img, &msk, &cfg, 5).unwrap();
        let b = apply_augmentations(&img, &msk, &cfg, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn masks_stay_binary() {
        let (img, msk) = random_pair(3);
        let cfg = AugmentConfig { elastic_prob: 1.0, ..AugmentConfig::default() };
        for seed in 0..20 {
            let (_, m) = apply_augmentations(&img, &msk, &cfg, seed).unwrap();
            assert!(m.data().iter().all(|&v| v <= 1));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            AugmentConfig { flip_prob: 1.5, ..Default::default() },
            AugmentConfig { gamma_range: (1.2, 0.8), ..Default::default() },
            AugmentConfig { gamma_range: (0.0, 1.0), ..Default::default() },
            AugmentConfig { clahe_tiles: 0, ..Default::default() },
            AugmentConfig { norm_std: 0.0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn elastic_parameters_scale_with_side() {
        let cfg = AugmentConfig::default();
        assert_eq!(cfg.elastic_params_for(512), (34.0, 4.0));
        assert_eq!(cfg.elastic_params_for(64), (4.25, 0.5));
    }
}
