//! Descriptor-free keypoint detection and matching toolkit.
//!
//! A keypoint here is nothing but a subpixel location and a confidence
//! score; no descriptor exists anywhere in the pipeline. The crate covers:
//!
//! 1. **tensor / rng / formats** – flat float tensors, a deterministic
//!    counter-based RNG, and bit-exact file formats (FPCT tensors, PGM
//!    images, keypoint CSV, `.hom` homographies).
//! 2. **geometry** – homography algebra, inverse-mapping image warps with
//!    validity masks, random homography sampling, corner reprojection error.
//! 3. **heatmap** – quantile thresholding, NMS, peak extraction, Gaussian
//!    target smoothing, label smoothing, activation histograms.
//! 4. **matching** – spatial nearest-neighbor matching, repeatability,
//!    normalized DLT, RANSAC homography estimation, homography accuracy.
//! 5. **pose** – rectified stereo triangulation, P3P minimal solver,
//!    P3P-in-RANSAC pose estimation, rotation/translation error metrics.
//! 6. **diffops** – a minimal reverse-mode tape with conv/BN/upsample
//!    layers, the focal and consistency losses, and Adam.
//! 7. **detector** – the toy FPN heatmap detector, a Harris teacher, and
//!    the two-stage training procedure.
//! 8. **evalharness** – synthetic scenes and pairs plus the repeatability,
//!    homography, and pose evaluation suites.

pub mod cli;
pub mod detector;
pub mod diffops;
pub mod error;
pub mod evalharness;
pub mod formats;
pub mod geometry;
pub mod heatmap;
pub mod matching;
pub mod pose;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use geometry::Homography;
pub use rng::Rng;
pub use tensor::{ImageGray, Keypoint, Tensor};
