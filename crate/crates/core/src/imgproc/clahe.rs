//! Contrast-limited adaptive histogram equalisation.
//!
//! The image is quantised to 256 levels and split into a `tiles x tiles`
//! grid (edge tiles absorb remainder pixels). Each tile histogram is clipped
//! at `clip * tile_pixels / 256` counts, the excess is poured back into the
//! bins that still have room, and the resulting CDF becomes the tile's
//! mapping. Output pixels blend the four surrounding tile mappings
//! bilinearly between tile centres.

use super::ImageGrid;
use crate::error::{ensure, Result};

pub const CLAHE_BINS: usize = 256;

fn quantise(v: f64) -> usize {
    ((v.clamp(0.0, 1.0) * 255.0).round() as usize).min(CLAHE_BINS - 1)
}

/// `[start, end)` bounds of each tile along one axis.
fn tile_bounds(len: usize, tiles: usize) -> Vec<(usize, usize)> {
    (0..tiles).map(|i| (i * len / tiles, (i + 1) * len / tiles)).collect()
}

fn validate(image: &ImageGrid, clip: f64, tiles: usize) -> Result<()> {
    ensure!(!image.is_normalized(), InvalidParameter, "CLAHE needs a [0, 1] image");
    ensure!(tiles >= 1, InvalidParameter, "tiles must be at least 1");
    ensure!(
        tiles <= image.height() && tiles <= image.width(),
        InvalidParameter,
        "{tiles} tiles exceed image dimensions {:?}",
        image.dims()
    );
    ensure!(clip > 0.0 && !clip.is_nan(), InvalidParameter, "clip must be positive, got {clip}");
    Ok(())
}

fn clip_histogram(hist: &mut [u64; CLAHE_BINS], clip: f64, pixels: u64) {
    if clip.is_infinite() {
        return;
    }
    let limit = ((clip * pixels as f64 / CLAHE_BINS as f64).floor() as u64).max(1);
    let mut excess = 0u64;
    for h in hist.iter_mut() {
        if *h > limit {
            excess += *h - limit;
            *h = limit;
        }
    }
    // Pour the excess into bins with room, never pushing a bin past `limit`.
    while excess > 0 {
        let room: Vec<usize> = (0..CLAHE_BINS).filter(|&b| hist[b] < limit).collect();
        if room.is_empty() {
            break;
        }
        let per = excess / room.len() as u64;
        if per == 0 {
            let stride = room.len() / excess as usize;
            for &b in room.iter().step_by(stride.max(1)).take(excess as usize) {
                hist[b] += 1;
            }
            excess = 0;
        } else {
            for &b in &room {
                let add = per.min(limit - hist[b]);
                hist[b] += add;
                excess -= add;
            }
        }
    }
    // Only reachable when 256 * limit < pixels: spread the residue evenly.
    if excess > 0 {
        let per = excess / CLAHE_BINS as u64;
        let residual = (excess % CLAHE_BINS as u64) as usize;
        for h in hist.iter_mut() {
            *h += per;
        }
        if residual > 0 {
            let stride = CLAHE_BINS / residual;
            for b in (0..CLAHE_BINS).step_by(stride).take(residual) {
                hist[b] += 1;
            }
        }
    }
}

struct TileGrid {
    rows: Vec<(usize, usize)>,
    cols: Vec<(usize, usize)>,
    hists: Vec<[u64; CLAHE_BINS]>,
}

fn tile_histograms(image: &ImageGrid, clip: f64, tiles: usize) -> TileGrid {
    let rows = tile_bounds(image.height(), tiles);
    let cols = tile_bounds(image.width(), tiles);
    let mut hists = Vec::with_capacity(tiles * tiles);
    for &(y0, y1) in &rows {
        for &(x0, x1) in &cols {
            let mut h = [0u64; CLAHE_BINS];
            for y in y0..y1 {
                for x in x0..x1 {
                    h[quantise(image.get(y, x))] += 1;
                }
            }
            let pixels = ((y1 - y0) * (x1 - x0)) as u64;
            clip_histogram(&mut h, clip, pixels);
            hists.push(h);
        }
    }
    TileGrid { rows, cols, hists }
}

/// Post-clip histograms of every tile, row-major over the tile grid.
pub fn clahe_clipped_histograms(image: &ImageGrid, clip: f64, tiles: usize) -> Result<Vec<Vec<u64>>> {
    validate(image, clip, tiles)?;
    Ok(tile_histograms(image, clip, tiles).hists.iter().map(|h| h.to_vec()).collect())
}

/// Index pair and blend weight locating `pos` between tile centres.
fn locate(pos: f64, centres: &[f64]) -> (usize, usize, f64) {
    let last = centres.len() - 1;
    if pos <= centres[0] {
        return (0, 0, 0.0);
    }
    if pos >= centres[last] {
        return (last, last, 0.0);
    }
    let j = centres.partition_point(|&c| c <= pos) - 1;
    let w = (pos - centres[j]) / (centres[j + 1] - centres[j]);
    (j, j + 1, w)
}

pub fn clahe(image: &ImageGrid, clip: f64, tiles: usize) -> Result<ImageGrid> {
    validate(image, clip, tiles)?;
    let grid = tile_histograms(image, clip, tiles);
    let luts: Vec<[f64; CLAHE_BINS]> = grid
        .hists
        .iter()
        .map(|h| {
            let total: u64 = h.iter().sum();
            let mut lut = [0.0; CLAHE_BINS];
            let mut acc = 0u64;
            for (b, &c) in h.iter().enumerate() {
                acc += c;
                lut[b] = acc as f64 / total as f64;
            }
            lut
        })
        .collect();
    let centre = |&(a, b): &(usize, usize)| (a + b - 1) as f64 / 2.0;
    let row_centres: Vec<f64> = grid.rows.iter().map(centre).collect();
    let col_centres: Vec<f64> = grid.cols.iter().map(centre).collect();
    let col_locs: Vec<_> = (0..image.width()).map(|x| locate(x as f64, &col_centres)).collect();

    let (h, w) = image.dims();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (r0, r1, wy) = locate(y as f64, &row_centres);
        for x in 0..w {
            let (c0, c1, wx) = col_locs[x];
            let b = quantise(image.get(y, x));
            let v00 = luts[r0 * tiles + c0][b];
            let v01 = luts[r0 * tiles + c1][b];
            let v10 = luts[r1 * tiles + c0][b];
            let v11 = luts[r1 * tiles + c1][b];
            let top = v00 + wx * (v01 - v00);
            let bottom = v10 + wx * (v11 - v10);
            out[y * w + x] = (top + wy * (bottom - top)).clamp(0.0, 1.0);
        }
    }
    Ok(ImageGrid::from_parts(h, w, out, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageGrid {
        let mut rng = rng_from_seed(seed);
        ImageGrid::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = ImageGrid::filled(32, 32, 0.4).unwrap();
        for (clip, tiles) in [(2.0, 8), (f64::INFINITY, 1), (1.0, 4)] {
            let out = clahe(&img, clip, tiles).unwrap();
            let first = out.data()[0];
            assert!(out.data().iter().all(|&v| v == first));
        }
    }

    #[test]
    fn unclipped_single_tile_is_global_equalisation() {
        let img = random_image(32, 32, 11);
        let out = clahe(&img, f64::INFINITY, 1).unwrap();
        // Direct CDF mapping oracle.
        let n = img.len() as f64;
        for (i, &v) in img.data().iter().enumerate() {
            let level = (v * 255.0).round();
            let below = img.data().iter().filter(|&&u| (u * 255.0).round() <= level).count() as f64;
            assert!((out.data()[i] - below / n).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn clip_bound_holds_by_recount() {
        let img = random_image(64, 64, 5);
        // Low-entropy image to force heavy clipping.
        let skewed = ImageGrid::new(64, 64, img.data().iter().map(|v| v * v * v * 0.2).collect()).unwrap();
        for im in [&img, &skewed] {
            let hists = clahe_clipped_histograms(im, 2.0, 8).unwrap();
            for h in hists {
                let bound = 2.0 * 64.0 / 256.0 + 1.0;
                assert!(h.iter().all(|&c| c as f64 <= bound), "{h:?}");
                assert_eq!(h.iter().sum::<u64>(), 64);
            }
        }
    }

    #[test]
    fn remainder_pixels_absorbed_by_edge_tiles() {
        let img = random_image(30, 37, 2);
        let hists = clahe_clipped_histograms(&img, 3.0, 4).unwrap();
        let total: u64 = hists.iter().map(|h| h.iter().sum::<u64>()).sum();
        assert_eq!(total, 30 * 37);
        let out = clahe(&img, 3.0, 4).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn too_many_tiles_rejected() {
        let img = random_image(4, 4, 1);
        assert!(clahe(&img, 2.0, 5).is_err());
        assert!(clahe(&img, 2.0, 0).is_err());
    }
}
