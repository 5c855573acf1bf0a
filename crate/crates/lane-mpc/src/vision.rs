//! End-to-end lane detection from a camera frame: resize, undistort, rotate,
//! bird's-eye warp, HSV split, blur and threshold of the saturation channel,
//! morphological opening, sliding-window lane fit, and conversion to a
//! vehicle-frame reference trajectory.

use thiserror::Error;

use crate::camera::{
    birdseye_from_camera, undistort_image, warp_perspective, CameraError, CameraModel, Homography,
};
use crate::config::{CameraConfig, VisionConfig};
use crate::imaging::{
    bgr_to_hsv, gaussian_blur, morph_open, resize, rotate, threshold_binary, ImagingError,
    Kernel2D, Raster,
};
use crate::lanes::{fit_lanes, lane_center_reference, LaneError, LaneFit, ReferenceTrajectory};

#[derive(Debug, Error)]
pub enum VisionError {
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Lane(#[from] LaneError),
}

pub type Result<T> = std::result::Result<T, VisionError>;

/// Every intermediate image of one detection pass, in pipeline order.
pub struct PipelineStages {
    pub resized: Raster,
    pub undistorted: Raster,
    pub rotated: Raster,
    pub warped: Raster,
    pub saturation: Raster,
    pub blurred: Raster,
    pub thresholded: Raster,
    pub opened: Raster,
}

impl PipelineStages {
    /// (file stem, raster) pairs in pipeline order, for debug dumps.
    pub fn named(&self) -> [(&'static str, &Raster); 8] {
        [
            ("stage1_resized", &self.resized),
            ("stage2_undistorted", &self.undistorted),
            ("stage3_rotated", &self.rotated),
            ("stage4_warped", &self.warped),
            ("stage5_saturation", &self.saturation),
            ("stage6_blurred", &self.blurred),
            ("stage7_threshold", &self.thresholded),
            ("stage8_opened", &self.opened),
        ]
    }
}

/// Result of one detection pass.
pub struct Detection {
    pub fit: LaneFit,
    pub trajectory: ReferenceTrajectory,
}

/// Precomputed lane-detection pipeline: the bird's-eye homography is derived
/// once from the camera mount and the ground patch.
pub struct Pipeline {
    mount: CameraModel,
    vision: VisionConfig,
    homography: Homography,
    image_width: usize,
    image_height: usize,
}

impl Pipeline {
    pub fn new(camera_cfg: &CameraConfig, vision: VisionConfig) -> Result<Self> {
        let mount = camera_cfg.mount_camera()?;
        let homography = birdseye_from_camera(&mount, &vision.bev)?;
        Ok(Self {
            mount,
            vision,
            homography,
            image_width: camera_cfg.image_width,
            image_height: camera_cfg.image_height,
        })
    }

    pub fn homography(&self) -> &Homography {
        &self.homography
    }

    /// Runs the image stages of the pipeline on one BGR frame.
    pub fn stages(&self, frame: &Raster) -> Result<PipelineStages> {
        let v = &self.vision;
        let resized = resize(frame, self.image_width, self.image_height)?;
        let undistorted = undistort_image(&self.mount, &resized);
        let rotated = if v.rotate_deg == 0.0 {
            undistorted.clone()
        } else {
            rotate(&undistorted, v.rotate_deg)?
        };
        let warped = warp_perspective(
            &rotated,
            &self.homography,
            v.bev.bev_width,
            v.bev.bev_height,
        )?;
        let (_, saturation, _) = bgr_to_hsv(&warped)?;
        let blurred = gaussian_blur(&saturation, v.blur_size, v.blur_sigma)?;
        let thresholded = threshold_binary(&blurred, v.threshold, v.maxval)?;
        let footprint = Kernel2D::square_footprint(v.morph_size)?;
        let opened = morph_open(&thresholded, &footprint)?;
        Ok(PipelineStages {
            resized,
            undistorted,
            rotated,
            warped,
            saturation,
            blurred,
            thresholded,
            opened,
        })
    }

    /// Full detection: image stages, lane fit at the given speed, and the
    /// metric reference trajectory.
    pub fn detect(&self, frame: &Raster, speed: f64) -> Result<Detection> {
        let stages = self.stages(frame)?;
        self.detect_from_stages(&stages, speed)
    }

    /// Lane fit and trajectory from already-computed stages.
    pub fn detect_from_stages(&self, stages: &PipelineStages, speed: f64) -> Result<Detection> {
        let v = &self.vision;
        let fit = fit_lanes(&stages.opened, speed, &v.lanes)?;
        let trajectory = lane_center_reference(
            &fit,
            (v.bev.m_per_px_x(), v.bev.m_per_px_y()),
            (v.bev.anchor_row(), v.bev.anchor_col()),
            v.n_ref_samples,
        )?;
        Ok(Detection { fit, trajectory })
    }
}
