//! Geometric transforms applied identically to image and mask.
//!
//! Images are resampled bilinearly, masks by nearest neighbour, and source
//! positions falling outside the grid read as 0.

use super::{check_pair, ImageGrid, MaskGrid};
use crate::error::{ensure, Result};
use crate::rng::{rng_from_seed, Rng};
use rand::Rng as _;

pub fn flip_pair(
    image: &ImageGrid,
    mask: &MaskGrid,
    horizontal: bool,
    vertical: bool,
) -> Result<(ImageGrid, MaskGrid)> {
    check_pair(image, mask)?;
    let (h, w) = image.dims();
    let src = |y: usize, x: usize| {
        let sy = if vertical { h - 1 - y } else { y };
        let sx = if horizontal { w - 1 - x } else { x };
        sy * w + sx
    };
    let mut img = Vec::with_capacity(h * w);
    let mut msk = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let i = src(y, x);
            img.push(image.data()[i]);
            msk.push(mask.data()[i]);
        }
    }
    Ok((
        ImageGrid::from_parts(h, w, img, image.is_normalized()),
        MaskGrid::from_parts(h, w, msk),
    ))
}

fn bilinear(data: &[f64], h: usize, w: usize, sy: f64, sx: f64) -> f64 {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let fy = sy - y0;
    let fx = sx - x0;
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            data[yy as usize * w + xx as usize]
        }
    };
    let v00 = at(y0, x0);
    let v01 = at(y0, x0 + 1.0);
    let v10 = at(y0 + 1.0, x0);
    let v11 = at(y0 + 1.0, x0 + 1.0);
    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
}

fn nearest(data: &[u8], h: usize, w: usize, sy: f64, sx: f64) -> u8 {
    let yy = sy.round();
    let xx = sx.round();
    if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
        0
    } else {
        data[yy as usize * w + xx as usize]
    }
}

/// Resamples both grids at per-pixel source coordinates given by `source`.
pub fn warp_pair<F>(image: &ImageGrid, mask: &MaskGrid, source: F) -> Result<(ImageGrid, MaskGrid)>
where
    F: Fn(usize, usize) -> (f64, f64),
{
    check_pair(image, mask)?;
    let (h, w) = image.dims();
    let mut img = Vec::with_capacity(h * w);
    let mut msk = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = source(y, x);
            img.push(bilinear(image.data(), h, w, sy, sx));
            msk.push(nearest(mask.data(), h, w, sy, sx));
        }
    }
    Ok((
        ImageGrid::from_parts(h, w, img, image.is_normalized()),
        MaskGrid::from_parts(h, w, msk),
    ))
}

/// Rotates both grids by `angle_deg` about the grid centre. Positive angles
/// turn content counter-clockwise in (x right, y up) coordinates, i.e.
/// clockwise as displayed with rows running downward.
pub fn rotate_pair(image: &ImageGrid, mask: &MaskGrid, angle_deg: f64) -> Result<(ImageGrid, MaskGrid)> {
    check_pair(image, mask)?;
    ensure!(angle_deg.is_finite(), InvalidParameter, "angle must be finite");
    if angle_deg == 0.0 {
        return Ok((image.clone(), mask.clone()));
    }
    let (h, w) = image.dims();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    warp_pair(image, mask, |y, x| {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        (cy - sin * dx + cos * dy, cx + cos * dx + sin * dy)
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur; truncated kernels are renormalised at borders so
/// every output is a convex combination of inputs.
pub(crate) fn gaussian_smooth(data: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let pass = |src: &[f64], along_x: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (pos, len) = if along_x { (x as isize, w as isize) } else { (y as isize, h as isize) };
                let mut acc = 0.0;
                let mut norm = 0.0;
                for (ki, kv) in k.iter().enumerate() {
                    let p = pos + ki as isize - r;
                    if p < 0 || p >= len {
                        continue;
                    }
                    let idx = if along_x { y * w + p as usize } else { p as usize * w + x };
                    acc += kv * src[idx];
                    norm += kv;
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    let tmp = pass(data, true);
    pass(&tmp, false)
}

/// Per-axis displacement fields `alpha * smooth(U[-1, 1], sigma)`, drawn
/// x-field first then y-field.
pub fn displacement_field(h: usize, w: usize, alpha: f64, sigma: f64, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    let mut draw = || {
        let noise: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..=1.0)).collect();
        gaussian_smooth(&noise, h, w, sigma).into_iter().map(|v| alpha * v).collect::<Vec<f64>>()
    };
    let dx = draw();
    let dy = draw();
    (dx, dy)
}

pub fn elastic_deform(
    image: &ImageGrid,
    mask: &MaskGrid,
    alpha: f64,
    sigma: f64,
    seed: u64,
) -> Result<(ImageGrid, MaskGrid)> {
    let mut rng = rng_from_seed(seed);
    elastic_with_rng(image, mask, alpha, sigma, &mut rng)
}

pub(crate) fn elastic_with_rng(
    image: &ImageGrid,
    mask: &MaskGrid,
    alpha: f64,
    sigma: f64,
    rng: &mut Rng,
) -> Result<(ImageGrid, MaskGrid)> {
    check_pair(image, mask)?;
    ensure!(alpha >= 0.0 && alpha.is_finite(), InvalidParameter, "alpha must be >= 0, got {alpha}");
    ensure!(sigma > 0.0 && sigma.is_finite(), InvalidParameter, "sigma must be > 0, got {sigma}");
    let (h, w) = image.dims();
    let (dx, dy) = displacement_field(h, w, alpha, sigma, rng);
    if alpha == 0.0 {
        return Ok((image.clone(), mask.clone()));
    }
    warp_pair(image, mask, |y, x| {
        let i = y * w + x;
        (y as f64 + dy[i], x as f64 + dx[i])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_pair(h: usize, w: usize, seed: u64) -> (ImageGrid, MaskGrid) {
        let mut rng = rng_from_seed(seed);
        let img = (0..h * w).map(|_| rng.random::<f64>()).collect();
        let msk = (0..h * w).map(|_| u8::from(rng.random::<f64>() < 0.3)).collect();
        (ImageGrid::new(h, w, img).unwrap(), MaskGrid::new(h, w, msk).unwrap())
    }

    #[test]
    fn flip_index_arithmetic() {
        let img = ImageGrid::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let msk = MaskGrid::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        let (i, m) = flip_pair(&img, &msk, true, false).unwrap();
        assert_eq!(i.data(), &[0.2, 0.1, 0.4, 0.3]);
        assert_eq!(m.data(), &[0, 1, 0, 0]);
        let (i, m) = flip_pair(&img, &msk, false, false).unwrap();
        assert_eq!((i, m), (img.clone(), msk.clone()));
        let (i, _) = flip_pair(&img, &msk, false, true).unwrap();
        assert_eq!(i.data(), &[0.3, 0.4, 0.1, 0.2]);
    }

    #[test]
    fn rotate_zero_is_identity() {
        let (img, msk) = random_pair(9, 7, 1);
        let (i, m) = rotate_pair(&img, &msk, 0.0).unwrap();
        assert_eq!(i, img);
        assert_eq!(m, msk);
    }

    #[test]
    fn rotate_keeps_centre_pixel() {
        let mut data = vec![0u8; 81];
        data[40] = 1;
        let msk = MaskGrid::new(9, 9, data).unwrap();
        let img = ImageGrid::filled(9, 9, 0.5).unwrap();
        for angle in [-15.0, -7.3, 3.0, 15.0, 45.0] {
            let (_, m) = rotate_pair(&img, &msk, angle).unwrap();
            assert_eq!(m.get(4, 4), 1);
            assert_eq!(m.foreground_count(), 1);
        }
    }

    #[test]
    fn rotate_ninety_matches_index_permutation() {
        let (img, msk) = random_pair(12, 12, 4);
        let (i, m) = rotate_pair(&img, &msk, 90.0).unwrap();
        let n = 12;
        for y in 0..n {
            for x in 0..n {
                // Output (y, x) reads source (row = n-1-x, col = y).
                let expect = img.get(n - 1 - x, y);
                assert!((i.get(y, x) - expect).abs() < 1e-12);
                assert_eq!(m.get(y, x), msk.get(n - 1 - x, y));
            }
        }
    }

    #[test]
    fn rotate_rejects_mismatch() {
        let (img, _) = random_pair(4, 4, 1);
        let (_, msk) = random_pair(4, 5, 1);
        assert!(rotate_pair(&img, &msk, 5.0).is_err());
        assert!(flip_pair(&img, &msk, true, true).is_err());
    }

    #[test]
    fn elastic_alpha_zero_identity_and_determinism() {
        let (img, msk) = random_pair(16, 16, 9);
        let (i, m) = elastic_deform(&img, &msk, 0.0, 4.0, 3).unwrap();
        assert_eq!((i, m), (img.clone(), msk.clone()));
        let a = elastic_deform(&img, &msk, 5.0, 2.0, 77).unwrap();
        let b = elastic_deform(&img, &msk, 5.0, 2.0, 77).unwrap();
        assert_eq!(a, b);
        assert!(elastic_deform(&img, &msk, -1.0, 2.0, 1).is_err());
        assert!(elastic_deform(&img, &msk, 1.0, 0.0, 1).is_err());
    }

    #[test]
    fn displacement_bounded_by_alpha() {
        let mut rng = rng_from_seed(12);
        let alpha = 34.0;
        let (dx, dy) = displacement_field(64, 64, alpha, 4.0, &mut rng);
        for (a, b) in dx.iter().zip(&dy) {
            assert!(a.abs() <= alpha && b.abs() <= alpha);
            assert!(a.hypot(*b) <= alpha);
        }
    }

    proptest! {
        #[test]
        fn flips_are_involutions(h in 1usize..9, w in 1usize..9, seed: u64, hf: bool, vf: bool) {
            let (img, msk) = random_pair(h, w, seed);
            let (i1, m1) = flip_pair(&img, &msk, hf, vf).unwrap();
            let (i2, m2) = flip_pair(&i1, &m1, hf, vf).unwrap();
            prop_assert_eq!(i2, img);
            prop_assert_eq!(m2, msk);
        }

        #[test]
        fn geometric_ops_keep_masks_binary(angle in -15.0f64..15.0, seed: u64) {
            let (img, msk) = random_pair(12, 10, seed);
            let (_, m) = rotate_pair(&img, &msk, angle).unwrap();
            prop_assert!(m.data().iter().all(|&v| v <= 1));
            let (_, m) = elastic_deform(&img, &msk, 3.0, 1.5, seed).unwrap();
            prop_assert!(m.data().iter().all(|&v| v <= 1));
        }
    }
}
