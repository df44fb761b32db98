//! Pluggable interfaces to every external generative model, with
//! deterministic mock implementations so the full pipeline runs and is
//! testable without any pretrained weights.

pub mod mock;
mod remote;

pub use mock::{MockWorld, harmonic_fill};
pub use remote::RemoteBackends;

use crate::config::{BackendConfig, BackendMode};
use crate::error::{CocoError, Result};
use crate::geometry::CameraPose;
use crate::img::{DepthMap, Image, Mask, VideoBundle};

/// Output of video segmentation: masked foreground/background copies plus
/// the binary masks. `empty_warning` flags frames where no foreground was
/// detected.
#[derive(Debug, Clone)]
pub struct SegmentOutput {
    pub fg: VideoBundle,
    pub bg: VideoBundle,
    pub masks: Vec<Mask>,
    pub empty_warning: bool,
}

/// Conditioning information for the score function: a reference image,
/// optionally the camera pose relative to the seen view (multiview models)
/// and a text prompt (text-conditioned models).
#[derive(Debug, Clone)]
pub struct ScoreCondition {
    pub reference: Image,
    pub relative_camera: Option<CameraPose>,
    pub text: Option<String>,
}

/// The full generative-backend interface. Implementations must be
/// deterministic functions of their inputs (and seed) in mock mode; the
/// pipeline never branches on which implementation is installed.
pub trait GenBackends: Send + Sync {
    /// Synthesizes (or fetches) the reference video. When `image` is given
    /// the first frame equals it exactly (image-to-video contract).
    fn generate_reference_video(
        &self,
        prompt: &str,
        image: Option<&Image>,
        seed: u64,
        n_frames: usize,
        resolution: usize,
    ) -> Result<VideoBundle>;

    fn segment_video(&self, video: &VideoBundle) -> Result<SegmentOutput>;

    fn estimate_depth(&self, image: &Image) -> Result<DepthMap>;

    /// Fills `mask`ed pixels; unmasked pixels are preserved bit-exactly.
    fn inpaint_image(&self, image: &Image, mask: &Mask, prompt: &str) -> Result<Image>;

    /// Refines the masked regions of a pasted-guidance pseudo video at the
    /// given strength; strength 0 is the identity.
    fn inpaint_video(
        &self,
        pseudo: &VideoBundle,
        masks: &[Mask],
        strength: f64,
    ) -> Result<VideoBundle>;

    fn inpaint_depth(&self, depth: &DepthMap, mask: &Mask) -> Result<DepthMap>;

    /// Predicted noise for a forward-noised image at noise level gamma.
    fn score_epsilon(
        &self,
        noisy_image: &Image,
        condition: &ScoreCondition,
        gamma: f64,
    ) -> Result<Image>;
}

/// Constructs the configured backend implementation. The
/// COCO4D_BACKENDS_URL environment variable overrides the remote endpoint.
pub fn make_backends(config: &BackendConfig) -> Result<Box<dyn GenBackends>> {
    match config.mode {
        BackendMode::Mock => Ok(Box::new(MockWorld::new())),
        BackendMode::Remote => {
            let url = std::env::var("COCO4D_BACKENDS_URL")
                .ok()
                .or_else(|| config.url.clone())
                .ok_or_else(|| {
                    CocoError::InvalidConfig(
                        "remote backends need backends.url or COCO4D_BACKENDS_URL".into(),
                    )
                })?;
            Ok(Box::new(RemoteBackends::new(&url)?))
        }
    }
}

/// Number of steps in the variance-preserving forward-noising schedule.
pub const SCHEDULE_STEPS: usize = 1000;
const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 0.02;

/// Cumulative signal fraction alpha-bar at noise level gamma in (0, 1],
/// from the linear-beta variance-preserving schedule.
pub fn alpha_bar(gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) && gamma != 1.0 {
        return Err(CocoError::InvalidArgument(format!(
            "noise level gamma {gamma} outside (0, 1]"
        )));
    }
    let step = ((gamma * (SCHEDULE_STEPS - 1) as f64).round() as usize).min(SCHEDULE_STEPS - 1);
    let mut prod = 1.0;
    for i in 0..=step {
        let beta =
            BETA_START + (BETA_END - BETA_START) * i as f64 / (SCHEDULE_STEPS - 1) as f64;
        prod *= 1.0 - beta;
    }
    Ok(prod)
}

/// Forward-noises an image: sqrt(alpha_bar) * image + sqrt(1 - alpha_bar) * eps.
pub fn add_noise(image: &Image, eps: &Image, gamma: f64) -> Result<Image> {
    let ab = alpha_bar(gamma)?;
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = image.clone();
    for (o, e) in out.data.iter_mut().zip(&eps.data) {
        *o = sa * *o + sn * e;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_bar_monotone_and_bounded() {
        let mut prev = 1.0;
        for k in 1..=20 {
            let ab = alpha_bar(k as f64 / 20.0).unwrap();
            assert!(ab > 0.0 && ab < 1.0);
            assert!(ab < prev);
            prev = ab;
        }
        assert!(alpha_bar(0.0).is_err());
        assert!(alpha_bar(1.5).is_err());
    }

    #[test]
    fn alpha_bar_matches_direct_product() {
        // Independent re-computation at a specific step.
        let gamma: f64 = 0.37;
        let step = (gamma * 999.0).round() as usize;
        let mut prod = 1.0;
        for i in 0..=step {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        assert_eq!(alpha_bar(gamma).unwrap(), prod);
    }
}
