use crate::error::{ensure, Result};
use crate::imgproc::{ImageGrid, MaskGrid};
use crate::sdt::{boundary_loss_grad_raw, boundary_loss_raw, BoundaryLossMode, SignedDistanceMap};

/// How the boundary weight evolves over epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaSchedule {
    Constant,
    /// Linear ramp from `lambda / epochs` at the first epoch up to `lambda`
    /// at epoch `epochs` and after.
    Ramp { epochs: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub boundary_mode: BoundaryLossMode,
    pub ce_epsilon: f64,
    pub schedule: LambdaSchedule,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            boundary_mode: BoundaryLossMode::Signed,
            ce_epsilon: 1e-7,
            schedule: LambdaSchedule::Constant,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lambda >= 0.0 && self.lambda.is_finite(),
            InvalidParameter,
            "lambda must be finite and >= 0, got {}",
            self.lambda
        );
        ensure!(
            self.ce_epsilon > 0.0 && self.ce_epsilon < 0.5,
            InvalidParameter,
            "ce_epsilon must lie in (0, 0.5), got {}",
            self.ce_epsilon
        );
        if let LambdaSchedule::Ramp { epochs } = self.schedule {
            ensure!(epochs >= 1, InvalidParameter, "lambda ramp needs at least one epoch");
        }
        Ok(())
    }

    /// Boundary weight in effect during 0-based `epoch`.
    pub fn lambda_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LambdaSchedule::Constant => self.lambda,
            LambdaSchedule::Ramp { epochs } => self.lambda * ((epoch + 1) as f64 / epochs as f64).min(1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub ce: f64,
    pub boundary: f64,
    pub total: f64,
}

fn check(pred: &ImageGrid, gt: &MaskGrid) -> Result<()> {
    ensure!(
        pred.dims() == gt.dims(),
        DimensionMismatch,
        "prediction {:?} vs ground truth {:?}",
        pred.dims(),
        gt.dims()
    );
    Ok(())
}

pub(crate) fn ce_raw(pred: &[f64], gt: &[u8], eps: f64) -> f64 {
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(&p, &y)| {
            let p = p.clamp(eps, 1.0 - eps);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    sum / pred.len() as f64
}

/// d CE / d pred; zero where the clamp is active.
fn ce_grad_raw(pred: &[f64], gt: &[u8], eps: f64) -> Vec<f64> {
    let n = pred.len() as f64;
    pred.iter()
        .zip(gt)
        .map(|(&p, &y)| {
            if p < eps || p > 1.0 - eps {
                0.0
            } else if y == 1 {
                -1.0 / (p * n)
            } else {
                1.0 / ((1.0 - p) * n)
            }
        })
        .collect()
}

/// Mean binary cross-entropy with predictions clamped to `[eps, 1 - eps]`.
pub fn ce_loss(pred: &ImageGrid, gt: &MaskGrid, eps: f64) -> Result<f64> {
    check(pred, gt)?;
    ensure!(eps > 0.0 && eps < 0.5, InvalidParameter, "eps must lie in (0, 0.5)");
    Ok(ce_raw(pred.data(), gt.data(), eps))
}

/// `CE + lambda * boundary`.
pub fn total_loss(pred: &ImageGrid, gt: &MaskGrid, sdm: &SignedDistanceMap, config: &LossConfig) -> Result<f64> {
    check(pred, gt)?;
    config.validate()?;
    ensure!(pred.dims() == sdm.dims(), DimensionMismatch, "prediction vs distance map dimensions");
    Ok(loss_and_grad(pred.data(), gt.data(), Some(sdm.data()), config.lambda, config.boundary_mode, config.ce_epsilon).0.total)
}

/// Loss value and its gradient with respect to the prediction. With
/// `lambda == 0` (or no distance map) the boundary term is skipped outright,
/// so results equal plain cross-entropy bit for bit.
pub fn loss_and_grad(
    pred: &[f64],
    gt: &[u8],
    sdm: Option<&[f64]>,
    lambda: f64,
    mode: BoundaryLossMode,
    eps: f64,
) -> (LossParts, Vec<f64>) {
    let ce = ce_raw(pred, gt, eps);
    let mut grad = ce_grad_raw(pred, gt, eps);
    match sdm {
        Some(phi) if lambda != 0.0 => {
            let b = boundary_loss_raw(pred, phi, mode);
            for (g, bg) in grad.iter_mut().zip(boundary_loss_grad_raw(pred, phi, mode)) {
                *g += lambda * bg;
            }
            (LossParts { ce, boundary: b, total: ce + lambda * b }, grad)
        }
        _ => (LossParts { ce, boundary: 0.0, total: ce }, grad),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::sdt::signed_distance_map;
    use rand::Rng;

    fn random_pair(seed: u64) -> (ImageGrid, MaskGrid) {
        let mut rng = rng_from_seed(seed);
        let p = (0..64).map(|_| rng.random::<f64>()).collect();
        let mut m: Vec<u8> = (0..64).map(|_| u8::from(rng.random::<f64>() < 0.3)).collect();
        m[0] = 1;
        m[1] = 0;
        (ImageGrid::new(8, 8, p).unwrap(), MaskGrid::new(8, 8, m).unwrap())
    }

    #[test]
    fn ce_fixtures() {
        let gt = MaskGrid::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let exact = ImageGrid::new(2, 2, gt.to_f64()).unwrap();
        let eps = 1e-7;
        assert!((ce_loss(&exact, &gt, eps).unwrap() + (1.0 - eps).ln()).abs() < 1e-18);
        let half = ImageGrid::filled(2, 2, 0.5).unwrap();
        assert!((ce_loss(&half, &gt, eps).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ce_matches_loop_oracle() {
        let (pred, gt) = random_pair(1);
        let mut acc = 0.0;
        for i in 0..64 {
            let p = pred.data()[i].clamp(1e-7, 1.0 - 1e-7);
            let y = f64::from(gt.data()[i]);
            acc += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        }
        assert!((ce_loss(&pred, &gt, 1e-7).unwrap() - acc / 64.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_cases() {
        let (pred, gt) = random_pair(2);
        let sdm = signed_distance_map(&gt).unwrap();
        let base = LossConfig { lambda: 0.0, ..Default::default() };
        assert_eq!(total_loss(&pred, &gt, &sdm, &base).unwrap(), ce_loss(&pred, &gt, 1e-7).unwrap());
        let zero = ImageGrid::filled(8, 8, 0.0).unwrap();
        let one = LossConfig { lambda: 1.0, ..Default::default() };
        assert_eq!(total_loss(&zero, &gt, &sdm, &one).unwrap(), ce_loss(&zero, &gt, 1e-7).unwrap());
        let at = |l: f64| total_loss(&pred, &gt, &sdm, &LossConfig { lambda: l, ..Default::default() }).unwrap();
        assert!((at(0.3) + at(1.1) - 2.0 * at(0.7)).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_gradient_is_ce_gradient() {
        let (pred, gt) = random_pair(3);
        let sdm = signed_distance_map(&gt).unwrap();
        let a = loss_and_grad(pred.data(), gt.data(), Some(sdm.data()), 0.0, BoundaryLossMode::Signed, 1e-7);
        let b = loss_and_grad(pred.data(), gt.data(), None, 0.5, BoundaryLossMode::Signed, 1e-7);
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_loss_config() {
        assert!(LossConfig { lambda: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { ce_epsilon: 0.5, ..Default::default() }.validate().is_err());
        let ramp = LossConfig { lambda: 1.0, schedule: LambdaSchedule::Ramp { epochs: 4 }, ..Default::default() };
        assert_eq!(ramp.lambda_at(0), 0.25);
        assert_eq!(ramp.lambda_at(10), 1.0);
    }
}
