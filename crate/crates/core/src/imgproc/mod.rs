//! Grayscale grids and the augmentation suite.

mod augment;
mod clahe;
mod geometric;
mod photometric;

pub use augment::{apply_augmentations, augment_with_outcome, preprocess, AugmentConfig, AugmentOutcome};
pub use clahe::{clahe, clahe_clipped_histograms, CLAHE_BINS};
pub use geometric::{displacement_field, elastic_deform, flip_pair, rotate_pair, warp_pair};
pub use photometric::{gamma_correct, normalize};

pub(crate) use geometric::gaussian_smooth;

use crate::error::{ensure, Result};

/// Row-major grayscale intensity field.
///
/// Raw images live in `[0, 1]`. After [`normalize`] the grid carries the
/// `normalized` flag and is exempt from the range check.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    data: Vec<f64>,
    normalized: bool,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(height * width > 0, InvalidParameter, "empty image {height}x{width}");
        ensure!(
            data.len() == height * width,
            DimensionMismatch,
            "{} values for a {height}x{width} image",
            data.len()
        );
        ensure!(
            data.iter().all(|v| (0.0..=1.0).contains(v)),
            InvalidParameter,
            "image values must lie in [0, 1]"
        );
        Ok(Self { height, width, data, normalized: false })
    }

    /// Builds a grid with values outside `[0, 1]` allowed.
    pub fn new_normalized(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(height * width > 0, InvalidParameter, "empty image {height}x{width}");
        ensure!(
            data.len() == height * width,
            DimensionMismatch,
            "{} values for a {height}x{width} image",
            data.len()
        );
        Ok(Self { height, width, data, normalized: true })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub(crate) fn from_parts(height: usize, width: usize, data: Vec<f64>, normalized: bool) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self { height, width, data, normalized }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Row-major binary label field, 1 = vessel.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskGrid {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl MaskGrid {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        ensure!(height * width > 0, InvalidParameter, "empty mask {height}x{width}");
        ensure!(
            data.len() == height * width,
            DimensionMismatch,
            "{} labels for a {height}x{width} mask",
            data.len()
        );
        ensure!(data.iter().all(|&v| v <= 1), InvalidParameter, "mask labels must be 0 or 1");
        Ok(Self { height, width, data })
    }

    pub(crate) fn from_parts(height: usize, width: usize, data: Vec<u8>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground_count() as f64 / self.len() as f64
    }

    /// Both classes present.
    pub fn is_non_degenerate(&self) -> bool {
        let fg = self.foreground_count();
        fg > 0 && fg < self.len()
    }

    pub fn complement(&self) -> MaskGrid {
        MaskGrid::from_parts(self.height, self.width, self.data.iter().map(|&v| 1 - v).collect())
    }

    /// Mask labels as 0.0/1.0 floats.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

pub(crate) fn check_pair(image: &ImageGrid, mask: &MaskGrid) -> Result<()> {
    ensure!(
        image.dims() == mask.dims(),
        DimensionMismatch,
        "image {:?} vs mask {:?}",
        image.dims(),
        mask.dims()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_values() {
        assert!(ImageGrid::new(1, 2, vec![0.0, 1.5]).is_err());
        assert!(ImageGrid::new_normalized(1, 2, vec![0.0, 1.5]).is_ok());
        assert!(MaskGrid::new(1, 2, vec![0, 2]).is_err());
        assert!(ImageGrid::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn complement_flips_labels() {
        let m = MaskGrid::new(1, 3, vec![0, 1, 0]).unwrap();
        assert_eq!(m.complement().data(), &[1, 0, 1]);
        assert!(m.is_non_degenerate());
        assert!(!MaskGrid::new(1, 2, vec![1, 1]).unwrap().is_non_degenerate());
    }
}
