use super::ImageGrid;
use crate::error::{ensure, Result};

/// `(v - mean) / std` per pixel. The result is flagged as normalised.
pub fn normalize(image: &ImageGrid, mean: f64, std: f64) -> Result<ImageGrid> {
    ensure!(std > 0.0 && std.is_finite(), InvalidParameter, "std must be positive, got {std}");
    ensure!(mean.is_finite(), InvalidParameter, "mean must be finite, got {mean}");
    let data = image.data().iter().map(|v| (v - mean) / std).collect();
    Ok(ImageGrid::from_parts(image.height(), image.width(), data, true))
}

/// Elementwise power map `v^gamma`.
pub fn gamma_correct(image: &ImageGrid, gamma: f64) -> Result<ImageGrid> {
    ensure!(gamma > 0.0 && gamma.is_finite(), InvalidParameter, "gamma must be positive, got {gamma}");
    ensure!(!image.is_normalized(), InvalidParameter, "gamma correction needs a [0, 1] image");
    if gamma == 1.0 {
        return Ok(image.clone());
    }
    let data = image.data().iter().map(|v| v.powf(gamma)).collect();
    Ok(ImageGrid::from_parts(image.height(), image.width(), data, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    #[test]
    fn normalize_constant_image_to_zero() {
        let img = ImageGrid::filled(3, 3, 0.3).unwrap();
        let out = normalize(&img, 0.3, 1.0).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(out.is_normalized());
    }

    #[test]
    fn normalize_analytic_values() {
        let img = ImageGrid::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        let out = normalize(&img, 0.5, 0.5).unwrap();
        assert_eq!(out.data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn normalize_by_own_statistics_standardises() {
        let mut rng = rng_from_seed(3);
        let vals: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let img = ImageGrid::new(8, 8, vals.clone()).unwrap();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let out = normalize(&img, mean, std).unwrap();
        let m2 = out.data().iter().sum::<f64>() / n;
        let s2 = (out.data().iter().map(|v| (v - m2).powi(2)).sum::<f64>() / n).sqrt();
        assert!(m2.abs() < 1e-12);
        assert!((s2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_rejects_bad_std() {
        let img = ImageGrid::filled(2, 2, 0.5).unwrap();
        assert!(normalize(&img, 0.0, 0.0).is_err());
        assert!(normalize(&img, 0.0, -1.0).is_err());
    }

    #[test]
    fn gamma_cases() {
        let img = ImageGrid::new(1, 4, vec![0.0, 0.25, 0.7, 1.0]).unwrap();
        assert_eq!(gamma_correct(&img, 1.0).unwrap(), img);
        let out = gamma_correct(&img, 0.5).unwrap();
        assert_eq!(out.data()[1], 0.5);
        for g in [0.8, 0.9, 1.1, 1.2] {
            let o = gamma_correct(&img, g).unwrap();
            assert_eq!(o.data()[0], 0.0);
            assert_eq!(o.data()[3], 1.0);
        }
        assert!(gamma_correct(&img, 0.0).is_err());
        assert!(gamma_correct(&img, -0.5).is_err());
    }
}
