//! Regularized least-squares RTI: `argmin |W r - dg|^2 + lambda |r|^2`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::geometry::WeightMatrix;
use crate::image::ReconImage;
use crate::simulator::RssFrame;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TikhonovConfig {
    pub reg_lambda: f64,
    pub reference_frames: usize,
}

impl Default for TikhonovConfig {
    fn default() -> Self {
        Self {
            reg_lambda: 1.0,
            reference_frames: 10,
        }
    }
}

impl TikhonovConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.reg_lambda > 0.0) || !self.reg_lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "reg_lambda must be positive, got {}",
                self.reg_lambda
            )));
        }
        if self.reference_frames == 0 {
            return Err(Error::InvalidArgument("reference_frames must be >= 1".into()));
        }
        Ok(())
    }
}

/// Factored normal equations `(W^T W + lambda I)`, reusable across many
/// right-hand sides.
pub struct TikhonovSolver {
    weights: WeightMatrix,
    side: usize,
    factor: Cholesky<f64, Dyn>,
}

impl TikhonovSolver {
    pub fn new(weights: &WeightMatrix, reg_lambda: f64) -> Result<Self> {
        if !(reg_lambda > 0.0) || !reg_lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("reg_lambda must be positive, got {reg_lambda}")));
        }
        let side = (weights.cols() as f64).sqrt().round() as usize;
        Error::check_dim("square pixel grid", side * side, weights.cols())?;
        let w = DMatrix::from_row_slice(weights.rows(), weights.cols(), weights.entries());
        let mut normal = w.tr_mul(&w);
        for i in 0..normal.nrows() {
            normal[(i, i)] += reg_lambda;
        }
        let factor = Cholesky::new(normal)
            .ok_or_else(|| Error::Solver("normal matrix is not positive definite".into()))?;
        Ok(Self {
            weights: weights.clone(),
            side,
            factor,
        })
    }

    pub fn solve(&self, delta_g: &[f64]) -> Result<ReconImage> {
        let rhs = DVector::from_vec(self.weights.apply_transpose(delta_g)?);
        let sol = self.factor.solve(&rhs);
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver("non-finite solution".into()));
        }
        ReconImage::new(self.side, sol.as_slice().to_vec())
    }
}

/// One-off reconstruction; prefer [`TikhonovSolver`] for repeated solves.
pub fn rti_reconstruct(weights: &WeightMatrix, delta_g: &[f64], config: &TikhonovConfig) -> Result<ReconImage> {
    config.validate()?;
    TikhonovSolver::new(weights, config.reg_lambda)?.solve(delta_g)
}

/// Empty-scene RSS per (link, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRss {
    pub links: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl ReferenceRss {
    /// Per-entry mean of the first `reference_frames` complete frames.
    pub fn from_frames(frames: &[RssFrame], reference_frames: usize) -> Result<Self> {
        if reference_frames == 0 {
            return Err(Error::InvalidArgument("reference_frames must be >= 1".into()));
        }
        let used = &frames[..reference_frames.min(frames.len())];
        let first = used
            .first()
            .ok_or_else(|| Error::InsufficientData("empty reference recording".into()))?;
        let mut values = vec![0.0; first.links * first.channels];
        for f in used {
            f.check_shape(first.links, first.channels)?;
            for (acc, v) in values.iter_mut().zip(f.dense()?) {
                *acc += v;
            }
        }
        values.iter_mut().for_each(|v| *v /= used.len() as f64);
        Ok(Self {
            links: first.links,
            channels: first.channels,
            values,
        })
    }
}

/// Per-link attenuation `mean_c(reference - frame)`.
pub fn attenuation_vector(frame: &RssFrame, reference: &ReferenceRss) -> Result<Vec<f64>> {
    frame.check_shape(reference.links, reference.channels)?;
    let dense = frame.dense()?;
    Ok(dense
        .chunks(reference.channels)
        .zip(reference.values.chunks(reference.channels))
        .map(|(f, b)| b.iter().zip(f).map(|(b, f)| b - f).sum::<f64>() / reference.channels as f64)
        .collect())
}

/// Attenuation vector averaged over `frames`.
pub fn mean_attenuation(frames: &[RssFrame], reference: &ReferenceRss) -> Result<Vec<f64>> {
    if frames.is_empty() {
        return Err(Error::InsufficientData("no frames to average".into()));
    }
    let mut dg = vec![0.0; reference.links];
    for f in frames {
        for (acc, v) in dg.iter_mut().zip(attenuation_vector(f, reference)?) {
            *acc += v;
        }
    }
    dg.iter_mut().for_each(|v| *v /= frames.len() as f64);
    Ok(dg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ellipse_weights, NetworkGeometry};

    fn small() -> (NetworkGeometry, WeightMatrix) {
        let g = NetworkGeometry::new(72.0, 8, 6, 2).unwrap();
        let w = ellipse_weights(&g, 6.0).unwrap();
        (g, w)
    }

    #[test]
    fn zero_input_gives_zero_image() {
        let (g, w) = small();
        let img = rti_reconstruct(&w, &vec![0.0; g.link_count()], &TikhonovConfig::default()).unwrap();
        assert!(img.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_inputs() {
        let (g, w) = small();
        let cfg = TikhonovConfig {
            reg_lambda: 0.0,
            reference_frames: 1,
        };
        assert!(rti_reconstruct(&w, &vec![0.0; g.link_count()], &cfg).is_err());
        assert!(rti_reconstruct(&w, &[0.0; 3], &TikhonovConfig::default()).is_err());
    }

    #[test]
    fn attenuation_of_reference_is_zero_and_uniform_drop_is_one() {
        let base = RssFrame::from_dense(0, 2, 3, &[-50.0, -51.0, -52.0, -60.0, -61.0, -62.0]).unwrap();
        let reference = ReferenceRss::from_frames(std::slice::from_ref(&base), 1).unwrap();
        assert_eq!(attenuation_vector(&base, &reference).unwrap(), vec![0.0, 0.0]);
        let dropped = RssFrame::from_dense(1, 2, 3, &[-51.0, -52.0, -53.0, -60.0, -61.0, -62.0]).unwrap();
        assert_eq!(attenuation_vector(&dropped, &reference).unwrap(), vec![1.0, 0.0]);
        let wrong = RssFrame::from_dense(1, 3, 2, &[0.0; 6]).unwrap();
        assert!(attenuation_vector(&wrong, &reference).is_err());
    }

    #[test]
    fn reference_uses_first_frames_only() {
        let a = RssFrame::from_dense(0, 1, 1, &[-50.0]).unwrap();
        let b = RssFrame::from_dense(1, 1, 1, &[-52.0]).unwrap();
        let c = RssFrame::from_dense(2, 1, 1, &[-90.0]).unwrap();
        let r = ReferenceRss::from_frames(&[a, b, c], 2).unwrap();
        assert_eq!(r.values, vec![-51.0]);
    }
}
