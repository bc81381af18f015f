//! Exact signed Euclidean distance maps and the boundary loss.
//!
//! Distances are computed on squared integers with the two-pass lower
//! envelope method (column pass, then a row pass over the column result), so
//! the squared distances are exact and independent of thread count.

use std::fmt;
use std::str::FromStr;

use crate::error::{ensure, Error, Result};
use crate::imgproc::{ImageGrid, MaskGrid};
use crate::par;

const INF: i64 = i64::MAX / 4;

/// Signed distance field: negative inside the foreground, positive outside.
#[derive(Clone, Debug, PartialEq)]
pub struct SignedDistanceMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SignedDistanceMap {
    pub fn from_values(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == height * width && !data.is_empty(),
            DimensionMismatch,
            "{} values for a {height}x{width} map",
            data.len()
        );
        Ok(Self { height, width, data })
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// How the distance map weights the soft prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum BoundaryLossMode {
    /// `mean(phi * pred)`; rewards foreground mass inside the vessel.
    #[default]
    Signed,
    /// `mean(|phi * pred|)`.
    Absolute,
}

impl fmt::Display for BoundaryLossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoundaryLossMode::Signed => "signed",
            BoundaryLossMode::Absolute => "absolute",
        })
    }
}

impl FromStr for BoundaryLossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "signed" => Ok(BoundaryLossMode::Signed),
            "absolute" | "abs" => Ok(BoundaryLossMode::Absolute),
            other => Err(Error::InvalidParameter(format!(
                "unknown boundary mode `{other}` (expected signed or absolute)"
            ))),
        }
    }
}

/// 1-D squared distance transform of a sampled function (`INF` = no site).
fn envelope_1d(f: &[i64], out: &mut [i64]) {
    let n = f.len();
    let mut v = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if f[q] >= INF {
            continue;
        }
        let fq = f[q] + (q * q) as i64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let fp = f[p] + (p * p) as i64;
                    let s = (fq - fp) as f64 / (2 * (q - p)) as f64;
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(INF);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as i64 - v[k] as i64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest pixel
/// labelled `target`.
pub fn edt_squared(mask: &MaskGrid, target: u8) -> Result<Vec<u64>> {
    let (h, w) = mask.dims();
    ensure!(
        mask.data().contains(&target),
        DegenerateMask,
        "no pixel of class {target} in {h}x{w} mask"
    );
    // Column pass, stored column-major.
    let cols: Vec<Vec<i64>> = par::map_range(w, |x| {
        let f: Vec<i64> = (0..h).map(|y| if mask.get(y, x) == target { 0 } else { INF }).collect();
        let mut g = vec![0; h];
        envelope_1d(&f, &mut g);
        g
    });
    let mut out = vec![0i64; h * w];
    par::for_each_chunk_mut(&mut out, w, |y, row| {
        let f: Vec<i64> = (0..w).map(|x| cols[x][y]).collect();
        envelope_1d(&f, row);
    });
    Ok(out.into_iter().map(|d| d as u64).collect())
}

/// Exhaustive O(N·M) nearest-pixel search, squared distances.
pub fn brute_force_edt_squared(mask: &MaskGrid, target: u8) -> Result<Vec<u64>> {
    let (h, w) = mask.dims();
    let sites: Vec<(i64, i64)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| mask.get(y, x) == target)
        .map(|(y, x)| (y as i64, x as i64))
        .collect();
    ensure!(!sites.is_empty(), DegenerateMask, "no pixel of class {target} in {h}x{w} mask");
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let best = sites
                .iter()
                .map(|&(sy, sx)| ((sy - y) * (sy - y) + (sx - x) * (sx - x)) as u64)
                .min()
                .unwrap();
            out.push(best);
        }
    }
    Ok(out)
}

/// Exhaustive Euclidean distance to the nearest pixel of `target`.
pub fn brute_force_edt(mask: &MaskGrid, target: u8) -> Result<Vec<f64>> {
    Ok(brute_force_edt_squared(mask, target)?
        .into_iter()
        .map(|d| (d as f64).sqrt())
        .collect())
}

pub fn signed_distance_map(mask: &MaskGrid) -> Result<SignedDistanceMap> {
    ensure!(
        mask.is_non_degenerate(),
        DegenerateMask,
        "signed distance map needs both classes ({} of {} pixels foreground)",
        mask.foreground_count(),
        mask.len()
    );
    let to_fg = edt_squared(mask, 1)?;
    let to_bg = edt_squared(mask, 0)?;
    let data = mask
        .data()
        .iter()
        .zip(to_fg.iter().zip(&to_bg))
        .map(|(&m, (&dfg, &dbg))| if m == 1 { -(dbg as f64).sqrt() } else { (dfg as f64).sqrt() })
        .collect();
    Ok(SignedDistanceMap { height: mask.height(), width: mask.width(), data })
}

pub(crate) fn boundary_loss_raw(pred: &[f64], sdm: &[f64], mode: BoundaryLossMode) -> f64 {
    let n = sdm.len() as f64;
    let sum: f64 = match mode {
        BoundaryLossMode::Signed => pred.iter().zip(sdm).map(|(p, s)| p * s).sum(),
        BoundaryLossMode::Absolute => pred.iter().zip(sdm).map(|(p, s)| (p * s).abs()).sum(),
    };
    sum / n
}

pub(crate) fn boundary_loss_grad_raw(pred: &[f64], sdm: &[f64], mode: BoundaryLossMode) -> Vec<f64> {
    let n = sdm.len() as f64;
    match mode {
        BoundaryLossMode::Signed => sdm.iter().map(|s| s / n).collect(),
        BoundaryLossMode::Absolute => pred
            .iter()
            .zip(sdm)
            .map(|(p, s)| {
                let prod = p * s;
                if prod == 0.0 {
                    0.0
                } else {
                    s * prod.signum() / n
                }
            })
            .collect(),
    }
}

fn check_dims(pred: &ImageGrid, sdm: &SignedDistanceMap) -> Result<()> {
    ensure!(
        pred.dims() == sdm.dims(),
        DimensionMismatch,
        "prediction {:?} vs distance map {:?}",
        pred.dims(),
        sdm.dims()
    );
    Ok(())
}

/// Mean of `phi * pred` (signed) or `|phi * pred|` (absolute) over the grid.
pub fn boundary_loss(pred: &ImageGrid, sdm: &SignedDistanceMap, mode: BoundaryLossMode) -> Result<f64> {
    check_dims(pred, sdm)?;
    Ok(boundary_loss_raw(pred.data(), sdm.data(), mode))
}

/// Gradient of [`boundary_loss`] with respect to the prediction. In
/// absolute mode the subgradient 0 is taken where `phi * pred == 0`.
pub fn boundary_loss_grad(pred: &ImageGrid, sdm: &SignedDistanceMap, mode: BoundaryLossMode) -> Result<Vec<f64>> {
    check_dims(pred, sdm)?;
    Ok(boundary_loss_grad_raw(pred.data(), sdm.data(), mode))
}
