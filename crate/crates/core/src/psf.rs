//! Point-spread-function models and steering-vector sampling.
//!
//! Two in-focus shapes are offered: the Airy pattern and its least-squares
//! Gaussian approximation (`sigma = airy_radius / 2.9`). Defocus is modelled
//! for the Gaussian kind only, as an energy-preserving broadening
//! `sigma(dz) = sigma * sqrt(1 + (dz * defocus_scale / sigma)^2)`, which is
//! symmetric above and below the focal plane.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ratio between the Rayleigh radius and the best-fit Gaussian sigma.
pub const AIRY_TO_GAUSSIAN_SIGMA: f64 = 2.9;

pub const DEFAULT_DEFOCUS_SCALE: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsfKind {
    Gaussian,
    Airy,
}

impl std::str::FromStr for PsfKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(PsfKind::Gaussian),
            "airy" => Ok(PsfKind::Airy),
            other => Err(Error::InvalidParameter(format!("unknown psf kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsfModel {
    pub kind: PsfKind,
    pub wavelength_nm: f64,
    pub numerical_aperture: f64,
    /// Growth of the Gaussian width per unit axial distance. Ignored by the
    /// Airy kind.
    pub defocus_scale: f64,
}

impl PsfModel {
    pub fn new(
        kind: PsfKind,
        wavelength_nm: f64,
        numerical_aperture: f64,
        defocus_scale: f64,
    ) -> Result<Self> {
        if !(wavelength_nm.is_finite() && wavelength_nm > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "wavelength must be positive, got {wavelength_nm}"
            )));
        }
        if !(numerical_aperture.is_finite() && numerical_aperture > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "numerical aperture must be positive, got {numerical_aperture}"
            )));
        }
        if !(defocus_scale.is_finite() && defocus_scale >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "defocus scale must be nonnegative, got {defocus_scale}"
            )));
        }
        Ok(Self {
            kind,
            wavelength_nm,
            numerical_aperture,
            defocus_scale,
        })
    }

    pub fn gaussian(wavelength_nm: f64, numerical_aperture: f64) -> Result<Self> {
        Self::new(
            PsfKind::Gaussian,
            wavelength_nm,
            numerical_aperture,
            DEFAULT_DEFOCUS_SCALE,
        )
    }

    pub fn airy(wavelength_nm: f64, numerical_aperture: f64) -> Result<Self> {
        Self::new(
            PsfKind::Airy,
            wavelength_nm,
            numerical_aperture,
            DEFAULT_DEFOCUS_SCALE,
        )
    }

    /// Rayleigh radius `0.61 * wavelength / NA`.
    pub fn airy_radius_nm(&self) -> f64 {
        0.61 * self.wavelength_nm / self.numerical_aperture
    }

    pub fn gaussian_sigma_nm(&self) -> f64 {
        self.airy_radius_nm() / AIRY_TO_GAUSSIAN_SIGMA
    }

    /// Effective Gaussian width at axial offset `dz`.
    pub fn sigma_at_depth(&self, dz: f64) -> f64 {
        let sigma = self.gaussian_sigma_nm();
        let growth = dz * self.defocus_scale / sigma;
        sigma * (1.0 + growth * growth).sqrt()
    }

    /// Relative intensity at a lateral/axial offset from the emitter. The
    /// in-focus peak is 1.
    pub fn intensity(&self, dx: f64, dy: f64, dz: f64) -> f64 {
        let rho2 = dx * dx + dy * dy;
        match self.kind {
            PsfKind::Gaussian => {
                let sigma = self.gaussian_sigma_nm();
                if dz == 0.0 {
                    (-rho2 / (2.0 * sigma * sigma)).exp()
                } else {
                    let s_eff = self.sigma_at_depth(dz);
                    let ratio = sigma / s_eff;
                    ratio * ratio * (-rho2 / (2.0 * s_eff * s_eff)).exp()
                }
            }
            PsfKind::Airy => {
                let v = 2.0 * PI * self.numerical_aperture * rho2.sqrt() / self.wavelength_nm;
                if v < 1e-8 {
                    1.0
                } else {
                    let a = 2.0 * libm::j1(v) / v;
                    a * a
                }
            }
        }
    }

    /// Integral of [`intensity`](Self::intensity) over the lateral plane, in
    /// nm². Independent of depth.
    pub fn integrated_intensity_nm2(&self) -> f64 {
        match self.kind {
            PsfKind::Gaussian => {
                let sigma = self.gaussian_sigma_nm();
                2.0 * PI * sigma * sigma
            }
            PsfKind::Airy => {
                let k = 2.0 * PI * self.numerical_aperture / self.wavelength_nm;
                4.0 * PI / (k * k)
            }
        }
    }

    /// Lateral radius beyond which the PSF is treated as zero when rendering.
    pub fn support_radius_nm(&self, dz: f64) -> f64 {
        match self.kind {
            PsfKind::Gaussian => 6.0 * self.sigma_at_depth(dz),
            PsfKind::Airy => 25.0 * self.airy_radius_nm(),
        }
    }
}

/// Square window of `side x side` coarse pixels centred on a pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowGeometry {
    pub side: usize,
    pub pixel_size_nm: f64,
}

impl WindowGeometry {
    pub fn new(side: usize, pixel_size_nm: f64) -> Result<Self> {
        if side == 0 || side.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "window side must be odd, got {side}"
            )));
        }
        if !(pixel_size_nm.is_finite() && pixel_size_nm > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "pixel size must be positive, got {pixel_size_nm}"
            )));
        }
        Ok(Self {
            side,
            pixel_size_nm,
        })
    }

    pub fn num_pixels(&self) -> usize {
        self.side * self.side
    }

    /// Offset of pixel `k` (row-major) from the window centre, as (x, y) nm.
    pub fn pixel_offset_nm(&self, k: usize) -> (f64, f64) {
        let half = (self.side / 2) as f64;
        let row = (k / self.side) as f64;
        let col = (k % self.side) as f64;
        (
            (col - half) * self.pixel_size_nm,
            (row - half) * self.pixel_size_nm,
        )
    }

    pub fn half_extent_nm(&self) -> f64 {
        self.side as f64 * self.pixel_size_nm / 2.0
    }
}

/// The PSF of a hypothetical emitter sampled on a window's pixels,
/// normalized to unit length.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVector {
    pub values: Vec<f64>,
    /// Emitter position relative to the window centre, nm.
    pub source_position: (f64, f64, f64),
}

pub fn sample_steering_vector(
    model: &PsfModel,
    test_point: (f64, f64, f64),
    window: &WindowGeometry,
) -> Result<SteeringVector> {
    let (x, y, z) = test_point;
    let half = window.half_extent_nm();
    if !(x.abs() <= half && y.abs() <= half) {
        return Err(Error::InvalidParameter(format!(
            "test point ({x}, {y}) nm lies outside the window footprint (half extent {half} nm)"
        )));
    }
    let mut values: Vec<f64> = (0..window.num_pixels())
        .map(|k| {
            let (px, py) = window.pixel_offset_nm(k);
            model.intensity(px - x, py - y, z)
        })
        .collect();
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(Error::DegenerateSteeringVector { x, y, z });
    }
    values.iter_mut().for_each(|v| *v /= norm);
    Ok(SteeringVector {
        values,
        source_position: test_point,
    })
}
