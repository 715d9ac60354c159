//! Named collections of stereo samples: generated on the fly or read from a
//! directory.
//!
//! Directory layout, one entry per sample `NAME`:
//! `NAME_left.{ppm,pgm,png}`, `NAME_right.{...}`, `NAME_disp.pfm` and
//! optionally `NAME_noc.pgm` (nonzero = visible in the right image).
//! Disparities that are zero, negative or non-finite are invalid.

use std::path::{Path, PathBuf};

use acv_ndops::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{image, pfm, rds, DisparityField, StereoSample};
use crate::error::{AcvError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSpec {
    /// Random-dot pairs of random two-plane scenes with integer disparities
    /// in `[1, max_disparity]`; by default three quarters of the network's
    /// disparity range.
    TwoPlane {
        count: usize,
        height: usize,
        width: usize,
        #[serde(default)]
        max_disparity: Option<usize>,
        seed: u64,
    },
    /// Random-dot pairs of one constant disparity.
    Constant { count: usize, height: usize, width: usize, disparity: f64, seed: u64 },
    Directory { path: PathBuf },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::TwoPlane { count: 10, height: 64, width: 64, max_disparity: None, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedSample {
    pub name: String,
    pub sample: StereoSample,
}

impl DataSpec {
    /// Materialises the samples; `max_disp` bounds generated disparities.
    pub fn load(&self, max_disp: usize) -> Result<Vec<NamedSample>> {
        let named = |samples: Vec<StereoSample>| {
            samples
                .into_iter()
                .enumerate()
                .map(|(i, sample)| NamedSample { name: format!("{i:04}"), sample })
                .collect()
        };
        match self {
            DataSpec::TwoPlane { count, height, width, max_disparity, seed } => {
                let top = max_disparity.unwrap_or(max_disp * 3 / 4);
                Ok(named(rds::two_plane_set(*count, *height, *width, top, max_disp, *seed)?))
            }
            DataSpec::Constant { count, height, width, disparity, seed } => {
                let field = DisparityField::Constant { disparity: *disparity };
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let samples = (0..*count)
                    .map(|_| rds::gen_rds(*height, *width, &field, max_disp, rng.gen()))
                    .collect::<Result<Vec<_>>>()?;
                Ok(named(samples))
            }
            DataSpec::Directory { path } => read_dir(path),
        }
    }
}

fn image_path(dir: &Path, name: &str, role: &str) -> Option<PathBuf> {
    ["ppm", "pgm", "png"].iter().map(|ext| dir.join(format!("{name}_{role}.{ext}"))).find(|p| p.is_file())
}

/// Reads every complete sample in `dir`, sorted by name.
pub fn read_dir(dir: &Path) -> Result<Vec<NamedSample>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix("_disp.pfm")).map(str::to_string))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(AcvError::config(format!("no *_disp.pfm files in {}", dir.display())));
    }
    names.into_iter().map(|name| read_sample(dir, name)).collect()
}

fn read_sample(dir: &Path, name: String) -> Result<NamedSample> {
    let missing = |role: &str| AcvError::config(format!("sample {name} has no {role} image in {}", dir.display()));
    let left = image::read_image(&image_path(dir, &name, "left").ok_or_else(|| missing("left"))?)?;
    let right = image::read_image(&image_path(dir, &name, "right").ok_or_else(|| missing("right"))?)?;
    let gt: Tensor<f64> = pfm::read(&dir.join(format!("{name}_disp.pfm")))?.cast();
    if gt.rank() != 2 || left.shape() != right.shape() || left.shape()[1..] != gt.shape()[..] {
        return Err(AcvError::config(format!(
            "sample {name}: left {:?}, right {:?}, disparity {:?} disagree",
            left.shape(),
            right.shape(),
            gt.shape()
        )));
    }
    let mask = crate::trainloss::valid_mask(&gt);
    let noc_path = dir.join(format!("{name}_noc.pgm"));
    let noc = if noc_path.is_file() {
        let m = image::read_image(&noc_path)?;
        if m.shape()[1..] != gt.shape()[..] {
            return Err(AcvError::config(format!("sample {name}: noc mask {:?}", m.shape())));
        }
        let plane = gt.numel();
        Some(m.data()[..plane].iter().zip(&mask).map(|(&v, &valid)| valid && v > 0.5).collect())
    } else {
        None
    };
    Ok(NamedSample { name, sample: StereoSample { left, right, gt, mask, noc } })
}

/// Writes samples in the directory layout (8-bit PPM images).
pub fn write_dir(dir: &Path, samples: &[NamedSample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for NamedSample { name, sample } in samples {
        image::write_ppm(&dir.join(format!("{name}_left.ppm")), &sample.left)?;
        image::write_ppm(&dir.join(format!("{name}_right.ppm")), &sample.right)?;
        pfm::write(&dir.join(format!("{name}_disp.pfm")), &sample.gt.cast())?;
        if let Some(noc) = &sample.noc {
            let (h, w) = (sample.height(), sample.width());
            let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
            bytes.extend(noc.iter().map(|&v| if v { 255u8 } else { 0 }));
            std::fs::write(dir.join(format!("{name}_noc.pgm")), bytes)?;
        }
    }
    Ok(())
}
