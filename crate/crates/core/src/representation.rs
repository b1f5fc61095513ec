//! A linear multi-view stand-in for a differentiable 3D representation.
//!
//! `MultiView` renders view `c` as `P_c theta`; `RawLatent` renders `theta`
//! itself, which is the parameterized-image mode.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, PsdError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    MultiView,
    RawLatent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    pub theta: DVector<f64>,
    mode: RenderMode,
    cameras: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub x: DVector<f64>,
    pub camera_index: usize,
}

impl Representation {
    pub fn multi_view(theta: DVector<f64>, cameras: Vec<DMatrix<f64>>) -> Result<Self> {
        if cameras.len() < 2 {
            return Err(PsdError::Parameter(format!(
                "multi-view representation needs at least 2 cameras, got {}",
                cameras.len()
            )));
        }
        let d = cameras[0].nrows();
        for (i, p) in cameras.iter().enumerate() {
            if p.shape() != (d, theta.len()) {
                return Err(PsdError::Shape {
                    expected: format!("camera {i} of shape {d}x{}", theta.len()),
                    found: format!("{:?}", p.shape()),
                });
            }
            if p.rank(1e-10) < d {
                return Err(PsdError::Parameter(format!("camera {i} is not full row rank")));
            }
        }
        Ok(Self { theta, mode: RenderMode::MultiView, cameras })
    }

    pub fn raw_latent(theta: DVector<f64>) -> Self {
        Self { theta, mode: RenderMode::RawLatent, cameras: Vec::new() }
    }

    /// Cameras `[w I, (1 - w) I]` over a parameter vector of twice the data
    /// dimension: two cameras select one half each, the rest blend them.
    pub fn blended_halves(theta: DVector<f64>, blend_weights: &[f64]) -> Result<Self> {
        if !theta.len().is_multiple_of(2) {
            return Err(PsdError::Parameter("blended-halves geometry needs an even parameter dimension".into()));
        }
        let d = theta.len() / 2;
        let cameras = blend_weights
            .iter()
            .map(|&w| {
                let mut p = DMatrix::zeros(d, 2 * d);
                for i in 0..d {
                    p[(i, i)] = w;
                    p[(i, d + i)] = 1.0 - w;
                }
                p
            })
            .collect();
        Self::multi_view(theta, cameras)
    }

    pub fn mode(&self) -> RenderMode {
        self.mode
    }

    pub fn cameras(&self) -> &[DMatrix<f64>] {
        &self.cameras
    }

    pub fn num_cameras(&self) -> usize {
        match self.mode {
            RenderMode::MultiView => self.cameras.len(),
            RenderMode::RawLatent => 1,
        }
    }

    pub fn param_dim(&self) -> usize {
        self.theta.len()
    }

    pub fn data_dim(&self) -> usize {
        match self.mode {
            RenderMode::MultiView => self.cameras[0].nrows(),
            RenderMode::RawLatent => self.theta.len(),
        }
    }

    fn check_camera(&self, camera_index: usize) -> Result<()> {
        if camera_index >= self.num_cameras() {
            return Err(PsdError::Range(format!(
                "camera {camera_index} out of range (have {})",
                self.num_cameras()
            )));
        }
        Ok(())
    }

    pub fn render(&self, camera_index: usize) -> Result<RenderOutput> {
        self.render_params(&self.theta, camera_index)
    }

    /// Renders an arbitrary parameter vector through this geometry.
    pub fn render_params(&self, theta: &DVector<f64>, camera_index: usize) -> Result<RenderOutput> {
        self.check_camera(camera_index)?;
        check_len("parameters", self.theta.len(), theta.len())?;
        let x = match self.mode {
            RenderMode::MultiView => &self.cameras[camera_index] * theta,
            RenderMode::RawLatent => theta.clone(),
        };
        Ok(RenderOutput { x, camera_index })
    }

    /// Pulls a data-space cotangent back to parameter space: `P_c^T v`.
    pub fn render_vjp(&self, camera_index: usize, cotangent: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_camera(camera_index)?;
        check_len("cotangent", self.data_dim(), cotangent.len())?;
        Ok(match self.mode {
            RenderMode::MultiView => self.cameras[camera_index].tr_mul(cotangent),
            RenderMode::RawLatent => cotangent.clone(),
        })
    }

    pub fn sample_camera<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        match self.mode {
            RenderMode::MultiView => Ok(rng.random_range(0..self.cameras.len())),
            RenderMode::RawLatent => Err(PsdError::Mode("raw latents have no cameras to sample".into())),
        }
    }
}
