//! Quantitative evaluation of reconstructions against known geometry.
//!
//! All metrics work on a [`FineImage`]: values on a square grid of spacing
//! `d` nm whose sample `(i, j)` sits at `((j + 0.5) d, (i + 0.5) d)`, the same
//! frame the simulator places emitters in.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reconstruct::Reconstruction;
use crate::simulate::{Emitter, Geometry};

pub const RAYLEIGH_RATIO: f64 = 0.835;
pub const DEFAULT_BAND_FRACTION: f64 = 0.4;
pub const DEFAULT_STABILITY_STEPS: usize = 3;
pub const RATIO_CURVE_CSV_HEADER: &str = "x_nm,separation_nm,v,p1,p2,r";

/// Image on a regular grid with an optional validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FineImage {
    pub values: Array2<f64>,
    pub spacing_nm: f64,
    /// Same shape as `values`; `None` means every sample is valid.
    pub mask: Option<Array2<bool>>,
}

impl FineImage {
    pub fn new(values: Array2<f64>, spacing_nm: f64) -> Result<Self> {
        if !(spacing_nm.is_finite() && spacing_nm > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "grid spacing must be positive, got {spacing_nm}"
            )));
        }
        Ok(Self {
            values,
            spacing_nm,
            mask: None,
        })
    }

    pub fn with_mask(mut self, mask: Array2<bool>) -> Result<Self> {
        if mask.dim() != self.values.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.values.len(),
                found: mask.len(),
            });
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn from_reconstruction(recon: &Reconstruction) -> Self {
        let mask = Array2::from_shape_fn(recon.image.dim(), |(r, c)| recon.is_processed_fine(r, c));
        Self {
            values: recon.image.clone(),
            spacing_nm: recon.fine_spacing_nm(),
            mask: Some(mask),
        }
    }

    /// Bilinear interpolation of a coarse image (pixel `p` nm) onto the grid
    /// with `subpixels` samples per pixel; samples beyond the outermost pixel
    /// centres take the edge value.
    pub fn upsample_bilinear(coarse: &Array2<f64>, pixel_size_nm: f64, subpixels: usize) -> Result<Self> {
        Self::upsample(coarse, pixel_size_nm, subpixels, Interpolation::Bilinear)
    }

    /// Separable resampling of a coarse image onto the fine grid. Fine sample
    /// `j` sits at coarse coordinate `(j + 0.5) / s - 0.5`; edges are
    /// replicated.
    pub fn upsample(
        coarse: &Array2<f64>,
        pixel_size_nm: f64,
        subpixels: usize,
        method: Interpolation,
    ) -> Result<Self> {
        if subpixels == 0 {
            return Err(Error::InvalidParameter("subpixels must be at least 1".into()));
        }
        let (h, w) = coarse.dim();
        if h == 0 || w == 0 {
            return Err(Error::InvalidParameter("empty image".into()));
        }
        let s = subpixels as f64;
        // taps[j] = [(coarse index, weight)] for fine index j along one axis.
        let taps = |n: usize| -> Vec<Vec<(usize, f64)>> {
            (0..n * subpixels)
                .map(|j| {
                    let u = (j as f64 + 0.5) / s - 0.5;
                    match method {
                        Interpolation::Bilinear => {
                            let u = u.clamp(0.0, (n - 1) as f64);
                            let i0 = u.floor() as usize;
                            let i1 = (i0 + 1).min(n - 1);
                            let f = u - i0 as f64;
                            vec![(i0, 1.0 - f), (i1, f)]
                        }
                        Interpolation::Lanczos3 => {
                            let base = u.floor() as i64;
                            let raw: Vec<(usize, f64)> = (base - 2..=base + 3)
                                .map(|k| {
                                    let idx = k.clamp(0, n as i64 - 1) as usize;
                                    (idx, lanczos3(u - k as f64))
                                })
                                .collect();
                            let total: f64 = raw.iter().map(|(_, wt)| wt).sum();
                            raw.into_iter().map(|(i, wt)| (i, wt / total)).collect()
                        }
                    }
                })
                .collect()
        };
        let (ty, tx) = (taps(h), taps(w));
        let rows = Array2::from_shape_fn((h, w * subpixels), |(r, j)| {
            tx[j].iter().map(|&(c, wt)| wt * coarse[[r, c]]).sum::<f64>()
        });
        let values = Array2::from_shape_fn((h * subpixels, w * subpixels), |(i, j)| {
            ty[i].iter().map(|&(r, wt)| wt * rows[[r, j]]).sum::<f64>()
        });
        Self::new(values, pixel_size_nm / s)
    }

    pub fn is_valid(&self, r: usize, c: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[[r, c]])
    }

    pub fn coordinate(&self, index: usize) -> f64 {
        (index as f64 + 0.5) * self.spacing_nm
    }

    /// Nearest grid index to a coordinate, if inside the grid.
    pub fn index_of(&self, coord: f64, len: usize) -> Option<usize> {
        let k = (coord / self.spacing_nm - 0.5).round();
        (k >= 0.0 && (k as usize) < len).then_some(k as usize)
    }

    pub fn valid_values(&self) -> Vec<f64> {
        self.values
            .indexed_iter()
            .filter(|((r, c), _)| self.is_valid(*r, *c))
            .map(|(_, &v)| v)
            .collect()
    }

    /// Values along column `col` (a vertical section), with positions.
    pub fn column_profile(&self, col: usize) -> Profile {
        self.column_band(col, 0)
    }

    /// Values along row `row` (a horizontal section), with positions.
    pub fn row_profile(&self, row: usize) -> Profile {
        self.row_band(row, 0)
    }

    /// Vertical section averaged over the valid columns `col ± half`.
    pub fn column_band(&self, col: usize, half: usize) -> Profile {
        let (h, w) = self.values.dim();
        let cols = col.saturating_sub(half)..=(col + half).min(w - 1);
        let samples = (0..h).map(|i| self.average(cols.clone().map(|j| (i, j))));
        Profile::from_samples((0..h).map(|i| self.coordinate(i)).collect(), samples)
    }

    /// Horizontal section averaged over the valid rows `row ± half`.
    pub fn row_band(&self, row: usize, half: usize) -> Profile {
        let (h, w) = self.values.dim();
        let rows = row.saturating_sub(half)..=(row + half).min(h - 1);
        let samples = (0..w).map(|j| self.average(rows.clone().map(|i| (i, j))));
        Profile::from_samples((0..w).map(|j| self.coordinate(j)).collect(), samples)
    }

    fn average(&self, cells: impl Iterator<Item = (usize, usize)>) -> Option<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for (i, j) in cells.filter(|&(i, j)| self.is_valid(i, j)) {
            sum += self.values[[i, j]];
            n += 1;
        }
        (n > 0).then(|| sum / n as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Bilinear,
    /// Windowed-sinc kernel with three lobes; close to band-limited
    /// reconstruction for images sampled above Nyquist.
    #[default]
    Lanczos3,
}

fn lanczos3(x: f64) -> f64 {
    let x = x.abs();
    if x < 1e-12 {
        1.0
    } else if x >= 3.0 {
        0.0
    } else {
        let px = std::f64::consts::PI * x;
        3.0 * px.sin() * (px / 3.0).sin() / (px * px)
    }
}

/// Low quantile of an image, used as its uniform background level.
pub fn background_level(image: &Array2<f64>, quantile: f64) -> Result<f64> {
    if image.is_empty() {
        return Err(Error::InvalidParameter("empty image".into()));
    }
    if !(0.0..=1.0).contains(&quantile) {
        return Err(Error::InvalidParameter(format!("quantile must lie in [0, 1], got {quantile}")));
    }
    let mut v: Vec<f64> = image.iter().cloned().collect();
    v.sort_by(f64::total_cmp);
    let k = ((v.len() - 1) as f64 * quantile).round() as usize;
    Ok(v[k])
}

pub const DEFAULT_BACKGROUND_QUANTILE: f64 = 0.01;

/// Diffraction-limited reference on the fine grid: the temporal mean image
/// with its background level removed, Lanczos-resampled. Kernel ringing
/// below zero is floored.
pub fn mean_image_baseline(mean: &Array2<f64>, pixel_size_nm: f64, subpixels: usize) -> Result<FineImage> {
    let b = background_level(mean, DEFAULT_BACKGROUND_QUANTILE)?;
    let shifted = mean.mapv(|v| (v - b).max(0.0));
    let mut fine = FineImage::upsample(&shifted, pixel_size_nm, subpixels, Interpolation::Lanczos3)?;
    fine.values.mapv_inplace(|v| v.max(0.0));
    Ok(fine)
}

/// A 1-D section `l` through an image.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub positions: Vec<f64>,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl Profile {
    pub fn new(positions: Vec<f64>, values: Vec<f64>) -> Self {
        let valid = vec![true; values.len()];
        Self {
            positions,
            values,
            valid,
        }
    }

    fn from_samples(positions: Vec<f64>, samples: impl Iterator<Item = Option<f64>>) -> Self {
        let (values, valid) = samples.map(|v| (v.unwrap_or(0.0), v.is_some())).unzip();
        Self {
            positions,
            values,
            valid,
        }
    }

    /// Valid samples within `center ± half_width`; the nearest valid sample
    /// when the band falls between grid points.
    fn band(&self, center: f64, half_width: f64) -> Vec<usize> {
        let inside: Vec<usize> = (0..self.values.len())
            .filter(|&k| self.valid[k] && (self.positions[k] - center).abs() <= half_width)
            .collect();
        if !inside.is_empty() {
            return inside;
        }
        let nearest = (0..self.values.len())
            .filter(|&k| self.valid[k])
            .min_by(|&a, &b| {
                (self.positions[a] - center)
                    .abs()
                    .total_cmp(&(self.positions[b] - center).abs())
            });
        match nearest {
            // Only accept a neighbour that is actually adjacent to the band.
            Some(k) if self.positions.len() < 2
                || (self.positions[k] - center).abs()
                    <= half_width + (self.positions[1] - self.positions[0]).abs() =>
            {
                vec![k]
            }
            _ => Vec::new(),
        }
    }
}

/// Valley and peak readings of one section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioSample {
    pub v: f64,
    pub p1: f64,
    pub p2: f64,
    pub v_position: f64,
    pub p1_position: f64,
    pub p2_position: f64,
    pub r: f64,
}

/// `r = v / min(p1, p2)` with `v` the minimum in the valley band and `p1`,
/// `p2` the maxima in the two peak bands. `None` when a band holds no valid
/// sample or a peak is not positive.
pub fn ratio_from_profile(
    profile: &Profile,
    valley_center: f64,
    peak_centers: (f64, f64),
    half_width: f64,
) -> Option<RatioSample> {
    let valley = profile.band(valley_center, half_width);
    let b1 = profile.band(peak_centers.0, half_width);
    let b2 = profile.band(peak_centers.1, half_width);
    if valley.is_empty() || b1.is_empty() || b2.is_empty() {
        return None;
    }
    let arg = |band: &[usize], better: fn(f64, f64) -> bool| -> usize {
        let mut best = band[0];
        for &k in &band[1..] {
            if better(profile.values[k], profile.values[best]) {
                best = k;
            }
        }
        best
    };
    let kv = arg(&valley, |a, b| a < b);
    let k1 = arg(&b1, |a, b| a > b);
    let k2 = arg(&b2, |a, b| a > b);
    let (v, p1, p2) = (profile.values[kv], profile.values[k1], profile.values[k2]);
    let p = p1.min(p2);
    if !(p > 0.0) {
        return None;
    }
    Some(RatioSample {
        v,
        p1,
        p2,
        v_position: profile.positions[kv],
        p1_position: profile.positions[k1],
        p2_position: profile.positions[k2],
        r: v / p,
    })
}

/// Crossing-lines ground truth: two lines through `center` at `±angle/2`
/// from the horizontal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinesGeometry {
    pub center: (f64, f64),
    pub angle_deg: f64,
    pub length_nm: f64,
}

impl LinesGeometry {
    pub fn half_angle_tan(&self) -> f64 {
        (self.angle_deg.to_radians() / 2.0).tan()
    }

    pub fn separation_at(&self, x: f64) -> f64 {
        2.0 * x.abs() * self.half_angle_tan()
    }

    /// Horizontal reach of each arm from the crossing.
    pub fn arm_extent_x(&self) -> f64 {
        self.length_nm / 2.0 * (self.angle_deg.to_radians() / 2.0).cos()
    }

    /// Estimate from emitter positions. Emitters are split by the quadrant
    /// pair they occupy around the current crossing estimate, each group
    /// gets a total-least-squares line, and the crossing moves to the
    /// intersection. Starts from the centroid.
    pub fn infer(emitters: &[Emitter]) -> Result<Self> {
        if emitters.len() < 4 {
            return Err(Error::InvalidScene("too few emitters to infer lines".into()));
        }
        let n = emitters.len() as f64;
        let mut center = (
            emitters.iter().map(|e| e.x_nm).sum::<f64>() / n,
            emitters.iter().map(|e| e.y_nm).sum::<f64>() / n,
        );
        let mut dirs = [(1.0, 0.0); 2];
        for _ in 0..4 {
            let (cx, cy) = center;
            let rising: Vec<(f64, f64)> = emitters
                .iter()
                .filter(|e| (e.x_nm - cx) * (e.y_nm - cy) >= 0.0)
                .map(|e| (e.x_nm, e.y_nm))
                .collect();
            let falling: Vec<(f64, f64)> = emitters
                .iter()
                .filter(|e| (e.x_nm - cx) * (e.y_nm - cy) < 0.0)
                .map(|e| (e.x_nm, e.y_nm))
                .collect();
            let (p1, d1) = fit_line(&rising)?;
            let (p2, d2) = fit_line(&falling)?;
            dirs = [d1, d2];
            let det = d1.0 * d2.1 - d1.1 * d2.0;
            if det.abs() < 1e-12 {
                return Err(Error::InvalidScene("line emitters are parallel".into()));
            }
            let t = ((p2.0 - p1.0) * d2.1 - (p2.1 - p1.1) * d2.0) / det;
            center = (p1.0 + t * d1.0, p1.1 + t * d1.1);
        }
        let half = |d: (f64, f64)| d.1.abs().atan2(d.0.abs());
        let reach = emitters
            .iter()
            .map(|e| (e.x_nm - center.0).hypot(e.y_nm - center.1))
            .fold(0.0, f64::max);
        Ok(Self {
            center,
            angle_deg: (half(dirs[0]) + half(dirs[1])).to_degrees(),
            length_nm: 2.0 * reach,
        })
    }
}

/// Total-least-squares line through points: (centroid, unit direction).
fn fit_line(points: &[(f64, f64)]) -> Result<((f64, f64), (f64, f64))> {
    if points.len() < 2 {
        return Err(Error::InvalidScene("line cluster has fewer than two emitters".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    // Principal axis of the 2 x 2 scatter matrix.
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    Ok(((mx, my), (theta.cos(), theta.sin())))
}

/// Algebraic (Kasa) circle fit: minimises sum (x^2 + y^2 + D x + E y + F)^2.
fn fit_circle(points: &[(f64, f64)]) -> Result<((f64, f64), f64)> {
    if points.len() < 3 {
        return Err(Error::InvalidScene("circle cluster has fewer than three emitters".into()));
    }
    // Centre the coordinates for conditioning.
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut m = nalgebra::Matrix3::<f64>::zeros();
    let mut rhs = nalgebra::Vector3::<f64>::zeros();
    for &(x, y) in points {
        let (u, v) = (x - mx, y - my);
        let row = nalgebra::Vector3::new(u, v, 1.0);
        m += row * row.transpose();
        rhs -= row * (u * u + v * v);
    }
    let sol = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidScene("circle emitters are collinear".into()))?;
    let (a, b) = (-sol[0] / 2.0, -sol[1] / 2.0);
    let r2 = a * a + b * b - sol[2];
    if !(r2 > 0.0) {
        return Err(Error::InvalidScene("degenerate circle fit".into()));
    }
    Ok(((a + mx, b + my), r2.sqrt()))
}

impl TryFrom<&Geometry> for LinesGeometry {
    type Error = Error;

    fn try_from(g: &Geometry) -> Result<Self> {
        match g {
            Geometry::LinesCrossing {
                center,
                angle_deg,
                length_nm,
            } => Ok(Self {
                center: *center,
                angle_deg: *angle_deg,
                length_nm: *length_nm,
            }),
            other => Err(Error::InvalidScene(format!(
                "expected crossing lines, got {}",
                other.tag()
            ))),
        }
    }
}

/// Two-circles ground truth, circles side by side along x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CirclesGeometry {
    pub centers: [(f64, f64); 2],
    pub diameter_nm: f64,
}

impl CirclesGeometry {
    pub fn gap_nm(&self) -> f64 {
        (self.centers[1].0 - self.centers[0].0).abs() - self.diameter_nm
    }

    /// Split emitters at the centroid's x and fit a circle to each side.
    pub fn infer(emitters: &[Emitter]) -> Result<Self> {
        if emitters.len() < 6 {
            return Err(Error::InvalidScene("too few emitters to infer circles".into()));
        }
        let cx = emitters.iter().map(|e| e.x_nm).sum::<f64>() / emitters.len() as f64;
        let side = |left: bool| -> Vec<(f64, f64)> {
            emitters
                .iter()
                .filter(|e| (e.x_nm < cx) == left)
                .map(|e| (e.x_nm, e.y_nm))
                .collect()
        };
        let (c1, r1) = fit_circle(&side(true))?;
        let (c2, r2) = fit_circle(&side(false))?;
        Ok(Self {
            centers: [c1, c2],
            diameter_nm: r1 + r2,
        })
    }
}

impl TryFrom<&Geometry> for CirclesGeometry {
    type Error = Error;

    fn try_from(g: &Geometry) -> Result<Self> {
        match g {
            Geometry::TwoCircles {
                centers,
                diameter_nm,
                ..
            } => Ok(Self {
                centers: *centers,
                diameter_nm: *diameter_nm,
            }),
            other => Err(Error::InvalidScene(format!(
                "expected two circles, got {}",
                other.tag()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioConfig {
    /// Band half-width as a fraction of the valley-to-peak distance (half
    /// the expected peak separation), so the three bands never overlap.
    pub band_fraction: f64,
    pub threshold: f64,
    /// Consecutive further steps that must also satisfy the threshold.
    pub stability_steps: usize,
    /// Fine-grid samples averaged on each side of a section line; 0 keeps
    /// single-sample-wide profiles.
    #[serde(default)]
    pub profile_half_width: usize,
}

impl Default for RatioConfig {
    fn default() -> Self {
        Self {
            band_fraction: DEFAULT_BAND_FRACTION,
            threshold: RAYLEIGH_RATIO,
            stability_steps: DEFAULT_STABILITY_STEPS,
            profile_half_width: 0,
        }
    }
}

/// Vertical section at signed distance `x` from the crossing.
pub fn section_at(image: &FineImage, geometry: &LinesGeometry, x: f64, half: usize) -> Option<Profile> {
    let (_, w) = image.values.dim();
    image
        .index_of(geometry.center.0 + x, w)
        .map(|col| image.column_band(col, half))
}

pub fn ratio_at(image: &FineImage, geometry: &LinesGeometry, x: f64, cfg: &RatioConfig) -> Option<RatioSample> {
    let profile = section_at(image, geometry, x, cfg.profile_half_width)?;
    let sep = geometry.separation_at(x);
    let cy = geometry.center.1;
    ratio_from_profile(&profile, cy, (cy - sep / 2.0, cy + sep / 2.0), cfg.band_fraction * sep / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioPoint {
    pub x_nm: f64,
    pub separation_nm: f64,
    pub sample: Option<RatioSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioCurve {
    pub points: Vec<RatioPoint>,
}

impl RatioCurve {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{RATIO_CURVE_CSV_HEADER}")?;
        for p in &self.points {
            let (v, p1, p2, r) = p
                .sample
                .map(|s| (s.v, s.p1, s.p2, s.r))
                .unwrap_or((f64::NAN, f64::NAN, f64::NAN, f64::NAN));
            writeln!(out, "{},{},{},{},{},{}", p.x_nm, p.separation_nm, v, p1, p2, r)?;
        }
        Ok(())
    }
}

/// r(x) at every fine-grid column right of the crossing, out to the arm end.
pub fn ratio_curve(image: &FineImage, geometry: &LinesGeometry, cfg: &RatioConfig) -> RatioCurve {
    let (_, w) = image.values.dim();
    let reach = geometry.arm_extent_x();
    let points = (0..w)
        .map(|j| image.coordinate(j) - geometry.center.0)
        .filter(|&x| x > 0.0 && x <= reach)
        .map(|x| RatioPoint {
            x_nm: x,
            separation_nm: geometry.separation_at(x),
            sample: ratio_at(image, geometry, x, cfg),
        })
        .collect();
    RatioCurve { points }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Resolution {
    Resolved { x_nm: f64, separation_nm: f64 },
    Unresolved,
}

impl Resolution {
    pub fn separation_nm(&self) -> Option<f64> {
        match self {
            Resolution::Resolved { separation_nm, .. } => Some(*separation_nm),
            Resolution::Unresolved => None,
        }
    }
}

/// First point of the curve where `r ≤ threshold` holds there and for the
/// following `stability_steps` points.
pub fn resolution_from_curve(curve: &RatioCurve, cfg: &RatioConfig) -> Resolution {
    let ok: Vec<bool> = curve
        .points
        .iter()
        .map(|p| p.sample.is_some_and(|s| s.r <= cfg.threshold))
        .collect();
    for k in 0..ok.len() {
        let end = k + cfg.stability_steps;
        if end < ok.len() && ok[k..=end].iter().all(|&b| b) {
            let p = curve.points[k];
            return Resolution::Resolved {
                x_nm: p.x_nm,
                separation_nm: p.separation_nm,
            };
        }
    }
    Resolution::Unresolved
}

pub fn resolution(image: &FineImage, geometry: &LinesGeometry, cfg: &RatioConfig) -> Resolution {
    resolution_from_curve(&ratio_curve(image, geometry, cfg), cfg)
}

/// Readings of the horizontal section through both circle centres: valley
/// band at the midpoint, peak bands on the facing rims, half-width
/// `band_fraction * gap / 2`.
pub fn circles_ratio(image: &FineImage, geometry: &CirclesGeometry, cfg: &RatioConfig) -> Result<RatioSample> {
    let (h, _) = image.values.dim();
    let [(x1, y1), (x2, y2)] = geometry.centers;
    let (left, right) = if x1 <= x2 { (x1, x2) } else { (x2, x1) };
    let row = image
        .index_of((y1 + y2) / 2.0, h)
        .ok_or_else(|| Error::PeaksNotFound("circle section outside the image".into()))?;
    let radius = geometry.diameter_nm / 2.0;
    let gap = geometry.gap_nm();
    if !(gap > 0.0) {
        return Err(Error::InvalidScene(format!("circles overlap (gap {gap} nm)")));
    }
    let profile = image.row_band(row, cfg.profile_half_width);
    ratio_from_profile(
        &profile,
        (left + right) / 2.0,
        (left + radius, right - radius),
        cfg.band_fraction * gap / 2.0,
    )
    .ok_or_else(|| Error::PeaksNotFound("no positive peak on the circle rims".into()))
}

/// `c = 1 - r` on the circles section.
pub fn contrast(image: &FineImage, geometry: &CirclesGeometry, cfg: &RatioConfig) -> Result<f64> {
    circles_ratio(image, geometry, cfg).map(|s| 1.0 - s.r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// Fractions of samples per bin; sums to 1.
    pub fractions: Vec<f64>,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.fractions.len()
    }

    /// Bin `k` covers `[k/bins, (k+1)/bins)`; the last bin includes 1.
    pub fn bin_range(&self, k: usize) -> (f64, f64) {
        let n = self.bins() as f64;
        (k as f64 / n, (k + 1) as f64 / n)
    }

    /// Mass of all bins lying inside `[lo, hi]`.
    pub fn mass_between(&self, lo: f64, hi: f64) -> f64 {
        (0..self.bins())
            .filter(|&k| {
                let (a, b) = self.bin_range(k);
                a >= lo - 1e-12 && b <= hi + 1e-12
            })
            .map(|k| self.fractions[k])
            .sum()
    }
}

/// Histogram of `value / max` over valid samples, `bins` equal bins on [0, 1].
pub fn intensity_histogram(image: &FineImage, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::InvalidParameter("histogram needs at least one bin".into()));
    }
    let values = image.valid_values();
    let max = values.iter().cloned().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::AllZeroImage);
    }
    let mut counts = vec![0usize; bins];
    for v in &values {
        let u = (v / max).clamp(0.0, 1.0);
        let k = ((u * bins as f64).floor() as usize).min(bins - 1);
        counts[k] += 1;
    }
    let n = values.len() as f64;
    Ok(Histogram {
        fractions: counts.into_iter().map(|c| c as f64 / n).collect(),
    })
}

/// Fraction of valid samples with `lo < value / max <= hi`.
pub fn normalized_mass(image: &FineImage, lo: f64, hi: f64) -> Result<f64> {
    let values = image.valid_values();
    let max = values.iter().cloned().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::AllZeroImage);
    }
    let inside = values
        .iter()
        .filter(|&&v| {
            let u = v / max;
            u > lo && u <= hi
        })
        .count();
    Ok(inside as f64 / values.len() as f64)
}

/// Centre-to-rim comparison for a hollow sphere seen in projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HollowRatio {
    pub center_mean: f64,
    pub rim_mean: f64,
    /// `center_mean / rim_mean`
    pub ratio: f64,
}

/// Mean over the disk `ρ ≤ center_fraction R` versus the annulus
/// `|ρ - R| ≤ rim_fraction R` around `center`.
pub fn hollow_ratio(
    image: &FineImage,
    center: (f64, f64),
    radius_nm: f64,
    center_fraction: f64,
    rim_fraction: f64,
) -> Result<HollowRatio> {
    let (mut cs, mut cn, mut rs, mut rn) = (0.0, 0usize, 0.0, 0usize);
    for ((i, j), &v) in image.values.indexed_iter() {
        if !image.is_valid(i, j) {
            continue;
        }
        let rho = (image.coordinate(j) - center.0).hypot(image.coordinate(i) - center.1);
        if rho <= center_fraction * radius_nm {
            cs += v;
            cn += 1;
        } else if (rho - radius_nm).abs() <= rim_fraction * radius_nm {
            rs += v;
            rn += 1;
        }
    }
    if cn == 0 || rn == 0 {
        return Err(Error::PeaksNotFound("vesicle centre or rim has no valid samples".into()));
    }
    let (center_mean, rim_mean) = (cs / cn as f64, rs / rn as f64);
    if !(rim_mean > 0.0) {
        return Err(Error::AllZeroImage);
    }
    Ok(HollowRatio {
        center_mean,
        rim_mean,
        ratio: center_mean / rim_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_gauss(sigma: f64, sep: f64) -> impl Fn(f64) -> f64 {
        move |y: f64| {
            let g = |d: f64| (-d * d / (2.0 * sigma * sigma)).exp();
            g(y - sep / 2.0) + g(y + sep / 2.0)
        }
    }

    #[test]
    fn ratio_formula_example() {
        let p = Profile::new(vec![0.0, 1.0, 2.0], vec![1.0, 0.5, 0.8]);
        let s = ratio_from_profile(&p, 1.0, (0.0, 2.0), 0.4).unwrap();
        assert!((s.r - 0.625).abs() < 1e-15);
        assert_eq!((s.v, s.p1, s.p2), (0.5, 1.0, 0.8));
    }

    #[test]
    fn merged_lines_give_unit_ratio() {
        let p = Profile::new(vec![0.0, 1.0, 2.0], vec![0.7, 0.7, 0.7]);
        let s = ratio_from_profile(&p, 1.0, (0.0, 2.0), 0.4).unwrap();
        assert_eq!(s.r, 1.0);
    }

    #[test]
    fn zero_peaks_are_undefined() {
        let p = Profile::new(vec![0.0, 1.0, 2.0], vec![0.0, 0.0, 0.0]);
        assert!(ratio_from_profile(&p, 1.0, (0.0, 2.0), 0.4).is_none());
        let mut p = Profile::new(vec![0.0, 1.0, 2.0], vec![1.0, 0.5, 1.0]);
        p.valid[0] = false;
        assert!(ratio_from_profile(&p, 1.0, (-5.0, 2.0), 0.4).is_none());
    }

    #[test]
    fn two_gaussian_closed_form() {
        let (sigma, sep) = (50.0, 200.0);
        let f = two_gauss(sigma, sep);
        let positions: Vec<f64> = (-3000..=3000).map(|k| k as f64 * 0.1).collect();
        let values: Vec<f64> = positions.iter().map(|&y| f(y)).collect();
        let s = ratio_from_profile(&Profile::new(positions, values), 0.0, (-100.0, 100.0), 80.0).unwrap();
        // Closed form: valley 2 exp(-d²/8σ²); peak located by Newton on
        // f'(y) = 0 starting from the line position.
        let valley = 2.0 * (-sep * sep / (8.0 * sigma * sigma)).exp();
        let mut y: f64 = sep / 2.0;
        let a = sep / 2.0;
        for _ in 0..50 {
            let e1 = (-(y - a).powi(2) / (2.0 * sigma * sigma)).exp();
            let e2 = (-(y + a).powi(2) / (2.0 * sigma * sigma)).exp();
            let d1 = -(y - a) * e1 - (y + a) * e2;
            let d2 = ((y - a).powi(2) / (sigma * sigma) - 1.0) * e1 + ((y + a).powi(2) / (sigma * sigma) - 1.0) * e2;
            y -= d1 / d2;
        }
        let expected = valley / f(y);
        assert!((s.r - expected).abs() < 1e-3, "{} vs {}", s.r, expected);
    }

    #[test]
    fn ratio_is_scale_invariant() {
        let f = two_gauss(60.0, 250.0);
        let pos: Vec<f64> = (-400..=400).map(|k| k as f64).collect();
        let vals: Vec<f64> = pos.iter().map(|&y| f(y)).collect();
        let scaled: Vec<f64> = vals.iter().map(|v| v * 37.5).collect();
        let a = ratio_from_profile(&Profile::new(pos.clone(), vals), 0.0, (-125.0, 125.0), 100.0).unwrap();
        let b = ratio_from_profile(&Profile::new(pos, scaled), 0.0, (-125.0, 125.0), 100.0).unwrap();
        assert!((a.r - b.r).abs() <= 1e-12 * a.r);
    }

    fn render_lines(geometry: &LinesGeometry, n: usize, spacing: f64, sigma: f64) -> FineImage {
        let t = geometry.half_angle_tan();
        let img = Array2::from_shape_fn((n, n), |(i, j)| {
            let x = (j as f64 + 0.5) * spacing - geometry.center.0;
            let y = (i as f64 + 0.5) * spacing - geometry.center.1;
            if sigma == 0.0 {
                let d1 = (y - t * x).abs();
                let d2 = (y + t * x).abs();
                f64::from(d1 < spacing / 2.0 || d2 < spacing / 2.0)
            } else {
                two_gauss(sigma, 2.0 * t * x)(y)
            }
        });
        FineImage::new(img, spacing).unwrap()
    }

    /// Crossing on a grid sample when `n` is odd, between samples when even.
    fn lines(n: usize, spacing: f64) -> LinesGeometry {
        let c = n as f64 * spacing / 2.0;
        LinesGeometry {
            center: (c, c),
            angle_deg: 60.0,
            length_nm: 4000.0,
        }
    }

    #[test]
    fn delta_lines_resolve_within_two_steps() {
        let g = lines(401, 8.0);
        let img = render_lines(&g, 401, 8.0, 0.0);
        let res = resolution(&img, &g, &RatioConfig::default());
        let sep = res.separation_nm().unwrap();
        assert!(sep <= 2.0 * 8.0, "{sep}");
    }

    #[test]
    fn sharper_profiles_never_resolve_worse() {
        let g = lines(300, 8.0);
        let cfg = RatioConfig::default();
        let mut last = f64::INFINITY;
        for sigma in [140.0, 110.0, 90.0, 70.0, 50.0, 30.0] {
            let sep = resolution(&render_lines(&g, 300, 8.0, sigma), &g, &cfg)
                .separation_nm()
                .unwrap();
            assert!(sep <= last + 1e-9, "sigma {sigma}: {sep} after {last}");
            last = sep;
        }
    }

    #[test]
    fn gaussian_lines_resolve_at_analytic_separation() {
        // Bisection on the separation where the densely sampled two-Gaussian
        // valley/peak ratio reaches 0.835.
        let sigma = 100.0;
        let ratio = |d: f64| {
            let f = two_gauss(sigma, d);
            let peak = (0..=20_000).map(|k| f(k as f64 * 0.05)).fold(0.0, f64::max);
            f(0.0) / peak
        };
        let (mut lo, mut hi) = (100.0, 500.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if ratio(mid) > RAYLEIGH_RATIO {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let g = lines(300, 8.0);
        let sep = resolution(&render_lines(&g, 300, 8.0, sigma), &g, &RatioConfig::default())
            .separation_nm()
            .unwrap();
        // One separation step on this grid is 2 * 8 * tan(30°) ≈ 9.2 nm.
        assert!(sep >= hi - 1e-9 && sep - hi < 9.3, "{sep} vs {hi}");
    }

    #[test]
    fn unresolved_when_lines_never_split() {
        let g = lines(100, 8.0);
        let flat = FineImage::new(Array2::from_elem((100, 100), 3.0), 8.0).unwrap();
        assert_eq!(resolution(&flat, &g, &RatioConfig::default()), Resolution::Unresolved);
    }

    fn circles() -> CirclesGeometry {
        CirclesGeometry {
            centers: [(325.0, 400.0), (675.0, 400.0)],
            diameter_nm: 200.0,
        }
    }

    #[test]
    fn perfect_and_flat_contrast() {
        let g = circles();
        let flat = FineImage::new(Array2::from_elem((100, 100), 2.0), 8.0).unwrap();
        assert_eq!(contrast(&flat, &g, &RatioConfig::default()).unwrap(), 0.0);
        let rims = Array2::from_shape_fn((100, 100), |(_, j)| {
            let x = (j as f64 + 0.5) * 8.0;
            f64::from((x - 425.0).abs() < 8.0 || (x - 575.0).abs() < 8.0)
        });
        let img = FineImage::new(rims, 8.0).unwrap();
        assert_eq!(contrast(&img, &g, &RatioConfig::default()).unwrap(), 1.0);
    }

    #[test]
    fn contrast_equals_one_minus_ratio() {
        let g = circles();
        let img = FineImage::new(
            Array2::from_shape_fn((100, 100), |(i, j)| ((i * 7 + j * 13) % 17) as f64 + 1.0),
            8.0,
        )
        .unwrap();
        let cfg = RatioConfig::default();
        let s = circles_ratio(&img, &g, &cfg).unwrap();
        assert_eq!(contrast(&img, &g, &cfg).unwrap(), 1.0 - s.r);
    }

    #[test]
    fn zero_image_has_no_contrast() {
        let img = FineImage::new(Array2::zeros((100, 100)), 8.0).unwrap();
        assert!(matches!(
            contrast(&img, &circles(), &RatioConfig::default()),
            Err(Error::PeaksNotFound(_))
        ));
    }

    #[test]
    fn constant_image_fills_the_top_bin() {
        let img = FineImage::new(Array2::from_elem((4, 4), 5.0), 1.0).unwrap();
        let h = intensity_histogram(&img, 10).unwrap();
        assert_eq!(h.fractions[9], 1.0);
        assert_eq!(h.fractions.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn four_value_image_hand_binned() {
        // Normalized values 0.05, 0.25, 0.5, 1.0 with counts 2, 3, 1, 2.
        let vals = [0.2, 0.2, 1.0, 1.0, 1.0, 2.0, 4.0, 4.0];
        let img = FineImage::new(Array2::from_shape_vec((2, 4), vals.to_vec()).unwrap(), 1.0).unwrap();
        let h = intensity_histogram(&img, 10).unwrap();
        let mut expected = vec![0.0; 10];
        expected[0] = 2.0 / 8.0;
        expected[2] = 3.0 / 8.0;
        expected[5] = 1.0 / 8.0;
        expected[9] = 2.0 / 8.0;
        assert_eq!(h.fractions, expected);
        assert!((h.mass_between(0.0, 0.5) - 5.0 / 8.0).abs() < 1e-15);
        assert!((normalized_mass(&img, 0.01, 0.5).unwrap() - 6.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn histogram_ignores_masked_samples_and_rejects_zero() {
        let img = FineImage::new(Array2::from_shape_vec((1, 3), vec![100.0, 1.0, 1.0]).unwrap(), 1.0)
            .unwrap()
            .with_mask(Array2::from_shape_vec((1, 3), vec![false, true, true]).unwrap())
            .unwrap();
        assert_eq!(intensity_histogram(&img, 4).unwrap().fractions, vec![0.0, 0.0, 0.0, 1.0]);
        let zero = FineImage::new(Array2::zeros((2, 2)), 1.0).unwrap();
        assert!(matches!(intensity_histogram(&zero, 4), Err(Error::AllZeroImage)));
    }

    #[test]
    fn bilinear_upsampling_reproduces_planes() {
        let coarse = Array2::from_shape_fn((5, 6), |(r, c)| 2.0 * r as f64 + 3.0 * c as f64 + 1.0);
        let fine = FineImage::upsample_bilinear(&coarse, 80.0, 10).unwrap();
        assert_eq!(fine.values.dim(), (50, 60));
        assert!((fine.spacing_nm - 8.0).abs() < 1e-15);
        for i in 5..45 {
            for j in 5..55 {
                let y = fine.coordinate(i) / 80.0 - 0.5;
                let x = fine.coordinate(j) / 80.0 - 0.5;
                assert!((fine.values[[i, j]] - (2.0 * y + 3.0 * x + 1.0)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn lanczos_interpolates_at_pixel_centres_and_keeps_constants() {
        let coarse = Array2::from_shape_fn((6, 7), |(r, c)| ((r * 5 + c * 3) % 7) as f64);
        let fine = FineImage::upsample(&coarse, 80.0, 5, Interpolation::Lanczos3).unwrap();
        // Odd subpixel count puts a fine sample on every coarse centre.
        for r in 0..6 {
            for c in 0..7 {
                assert!((fine.values[[r * 5 + 2, c * 5 + 2]] - coarse[[r, c]]).abs() < 1e-12);
            }
        }
        let flat = FineImage::upsample(&Array2::from_elem((4, 4), 2.5), 80.0, 10, Interpolation::Lanczos3).unwrap();
        assert!(flat.values.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn lanczos_recovers_a_well_sampled_gaussian() {
        // σ = 1.2 px is sampled above Nyquist; the peak between pixels is
        // recovered far better than by linear interpolation.
        let g = |x: f64| (-(x * x) / (2.0 * 1.2 * 1.2)).exp();
        let coarse = Array2::from_shape_fn((1, 16), |(_, c)| g(c as f64 - 7.5));
        let lz = FineImage::upsample(&coarse, 1.0, 10, Interpolation::Lanczos3).unwrap();
        let bl = FineImage::upsample(&coarse, 1.0, 10, Interpolation::Bilinear).unwrap();
        let peak = |f: &FineImage| f.values.iter().cloned().fold(0.0, f64::max);
        assert!((peak(&lz) - 1.0).abs() < 0.01, "{}", peak(&lz));
        assert!((peak(&bl) - 1.0).abs() > 0.05);
    }

    #[test]
    fn background_level_is_a_low_quantile() {
        let img = Array2::from_shape_fn((10, 10), |(r, c)| (r * 10 + c) as f64);
        assert_eq!(background_level(&img, 0.0).unwrap(), 0.0);
        assert_eq!(background_level(&img, 1.0).unwrap(), 99.0);
        assert_eq!(background_level(&img, 0.5).unwrap(), 50.0);
        assert!(background_level(&img, 1.5).is_err());
        let base = mean_image_baseline(&(img.clone() + 7.0), 80.0, 2).unwrap();
        assert!(base.values.iter().all(|&v| v >= 0.0));
        assert!(base.values[[0, 0]] < 1.0);
    }

    #[test]
    fn single_sharp_hump_is_never_resolved() {
        let g = lines(301, 8.0);
        let img = Array2::from_shape_fn((301, 301), |(i, _)| {
            let y = (i as f64 + 0.5) * 8.0 - g.center.1;
            (-(y * y) / (2.0 * 20.0 * 20.0)).exp()
        });
        let res = resolution(&FineImage::new(img, 8.0).unwrap(), &g, &RatioConfig::default());
        assert_eq!(res, Resolution::Unresolved);
    }

    #[test]
    fn geometry_inference_recovers_scene_parameters() {
        use crate::simulate::{make_scene, CirclesSpec, CountMode, LinesSpec, SceneSpec};
        let scene = make_scene(&SceneSpec::Lines(LinesSpec::standard((2560.0, 2560.0))), CountMode::Deterministic, 3)
            .unwrap();
        let g = LinesGeometry::infer(&scene.emitters).unwrap();
        assert!((g.center.0 - 2560.0).abs() < 2.0 && (g.center.1 - 2560.0).abs() < 2.0, "{:?}", g.center);
        assert!((g.angle_deg - 60.0).abs() < 0.2, "{}", g.angle_deg);
        let scene = make_scene(&SceneSpec::Circles(CirclesSpec::standard((640.0, 640.0))), CountMode::Deterministic, 3)
            .unwrap();
        let g = CirclesGeometry::infer(&scene.emitters).unwrap();
        assert!((g.gap_nm() - 150.0).abs() < 0.5, "{}", g.gap_nm());
        assert!((g.diameter_nm - 200.0).abs() < 0.5);
    }

    #[test]
    fn hollow_ratio_on_annulus() {
        let img = Array2::from_shape_fn((100, 100), |(i, j)| {
            let rho = ((j as f64 + 0.5) * 5.0 - 250.0).hypot((i as f64 + 0.5) * 5.0 - 250.0);
            f64::from((rho - 150.0).abs() < 20.0)
        });
        let h = hollow_ratio(&FineImage::new(img, 5.0).unwrap(), (250.0, 250.0), 150.0, 0.3, 0.1).unwrap();
        assert_eq!(h.center_mean, 0.0);
        assert_eq!(h.rim_mean, 1.0);
    }

    #[test]
    fn banded_sections_average_valid_neighbours() {
        let values = Array2::from_shape_fn((4, 8), |(i, j)| (10 * i + j) as f64);
        let mut mask = Array2::from_elem((4, 8), true);
        mask[[1, 6]] = false;
        mask[[2, 3]] = false;
        mask[[2, 4]] = false;
        mask[[2, 5]] = false;
        mask[[2, 6]] = false;
        let img = FineImage::new(values, 1.0).unwrap().with_mask(mask).unwrap();
        let col = img.column_band(5, 1);
        assert_eq!(col.values[0], 5.0);
        assert_eq!(col.values[1], 14.5);
        assert!(!col.valid[2]);
        let edge = img.row_band(0, 2);
        assert_eq!(edge.values[7], 17.0);
        assert_eq!(img.column_band(5, 0), img.column_profile(5));
    }
}
