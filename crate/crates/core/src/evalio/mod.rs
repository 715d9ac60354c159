//! Metrics, synthetic stereo data and file formats.

pub mod colormap;
pub mod dataset;
pub mod image;
pub mod metrics;
pub mod pfm;
pub mod rds;

use acv_ndops::Tensor;

pub use metrics::{bad_x, d1, epe, EvalReport};
pub use dataset::{DataSpec, NamedSample};
pub use rds::{gen_rds, DisparityField};

/// A rectified stereo pair with dense ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoSample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub left: Tensor<f64>,
    pub right: Tensor<f64>,
    /// `[H, W]` disparity of every left pixel, in pixels.
    pub gt: Tensor<f64>,
    /// Pixels whose ground truth is defined.
    pub mask: Vec<bool>,
    /// Valid pixels that are also visible in the right image.
    pub noc: Option<Vec<bool>>,
}

impl StereoSample {
    pub fn height(&self) -> usize {
        self.gt.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.gt.shape()[1]
    }
}
