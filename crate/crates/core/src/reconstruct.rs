//! The two-phase reconstruction pipeline.
//!
//! Phase 1 decomposes the window centred on every interior coarse pixel.
//! Global threshold statistics (`σ₂` extremes) are then computed once, and
//! phase 2 evaluates the indicator function on an `s x s` grid of test points
//! inside each window's central pixel. Each window owns exactly the fine-grid
//! block of its centre pixel, so no stitching weights are needed and the
//! result does not depend on how work is scheduled.

use std::io::Write;

use nalgebra::DMatrix;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::indicator::{
    indicator_from_squared, resolve_threshold, second_singular_values, weights, IndicatorConfig,
    IndicatorVariant, ThresholdSpec,
};
use crate::psf::{sample_steering_vector, PsfModel, WindowGeometry};
use crate::stack_io::ImageStack;
use crate::subspace::{decompose, extract_window, SubspaceDecomposition};

pub const DEFAULT_SUBPIXELS: usize = 10;

/// Smallest odd window covering the PSF main lobe:
/// `2 * floor(airy_radius / pixel_size) + 1`, at least 3.
pub fn default_window_side(psf: &PsfModel, pixel_size_nm: f64) -> usize {
    let half = (psf.airy_radius_nm() / pixel_size_nm).floor() as usize;
    (2 * half + 1).max(3)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionConfig {
    pub window_side: usize,
    pub subpixels: usize,
    pub indicator: IndicatorConfig,
    pub variant: IndicatorVariant,
    pub psf: PsfModel,
    /// Windows with mean intensity below this value are left out of the
    /// threshold statistics (they are still reconstructed).
    pub threshold_min_mean: Option<f64>,
}

impl ReconstructionConfig {
    /// Defaults derived from the stack calibration: in-focus Gaussian PSF,
    /// main-lobe window, 10 subpixels, `α = 4`.
    pub fn for_stack(stack: &ImageStack, variant: IndicatorVariant) -> Result<Self> {
        let cal = stack.calibration();
        let psf = PsfModel::gaussian(cal.wavelength_nm, cal.numerical_aperture)?;
        Ok(Self {
            window_side: default_window_side(&psf, cal.pixel_size_nm),
            subpixels: DEFAULT_SUBPIXELS,
            indicator: IndicatorConfig::default(),
            variant,
            psf,
            threshold_min_mean: None,
        })
    }

    pub fn with_variant(mut self, variant: IndicatorVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_side < 3 || self.window_side.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "window side must be odd and at least 3, got {}",
                self.window_side
            )));
        }
        if self.subpixels < 1 {
            return Err(Error::InvalidParameter(
                "subpixels per pixel must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Phase-1 output: every interior window with its decomposition.
#[derive(Debug, Clone)]
pub struct WindowAnalysis {
    pub height: usize,
    pub width: usize,
    pub side: usize,
    pub pixel_size_nm: f64,
    /// Window centres in row-major order.
    pub centers: Vec<(usize, usize)>,
    pub decompositions: Vec<SubspaceDecomposition>,
    /// Mean intensity of each window over all frames.
    pub window_means: Vec<f64>,
}

pub fn analyze_windows(stack: &ImageStack, side: usize) -> Result<WindowAnalysis> {
    let (h, w) = (stack.height(), stack.width());
    if h < side || w < side {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            side,
        });
    }
    let half = side / 2;
    let centers: Vec<(usize, usize)> = (half..h - half)
        .flat_map(|r| (half..w - half).map(move |c| (r, c)))
        .collect();
    let results: Vec<(SubspaceDecomposition, f64)> = centers
        .par_iter()
        .map(|&center| {
            let window = extract_window(stack, center, side)?;
            let mean = window.data.mean();
            Ok((decompose(&window), mean))
        })
        .collect::<Result<_>>()?;
    let (decompositions, window_means) = results.into_iter().unzip();
    Ok(WindowAnalysis {
        height: h,
        width: w,
        side,
        pixel_size_nm: stack.calibration().pixel_size_nm,
        centers,
        decompositions,
        window_means,
    })
}

impl WindowAnalysis {
    /// `σ₂` over the windows that pass the optional mean-intensity filter.
    pub fn threshold_statistics(&self, min_mean: Option<f64>) -> Result<Vec<f64>> {
        let selected = self
            .decompositions
            .iter()
            .zip(&self.window_means)
            .filter(|(_, &mean)| min_mean.is_none_or(|v| mean >= v))
            .map(|(d, _)| d);
        let sigma2 = second_singular_values(selected)?;
        if sigma2.is_empty() {
            if let Some(v) = min_mean {
                return Err(Error::NoWindows(v));
            }
        }
        Ok(sigma2)
    }

    pub fn resolve(
        &self,
        variant: IndicatorVariant,
        min_mean: Option<f64>,
    ) -> Result<ThresholdSpec> {
        resolve_threshold(variant, &self.threshold_statistics(min_mean)?)
    }

    pub fn max_rank(&self) -> usize {
        self.decompositions.iter().map(|d| d.rank()).max().unwrap_or(0)
    }
}

/// Fine-grid indicator image with the coarse-pixel mask of evaluated windows.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// `(H * s) x (W * s)`; zero outside the processed region.
    pub image: Array2<f64>,
    /// `H x W`; true where a full window was centred.
    pub processed_mask: Array2<bool>,
    pub subpixels: usize,
    pub pixel_size_nm: f64,
    pub config: ReconstructionConfig,
    pub threshold: ThresholdSpec,
}

impl Reconstruction {
    pub fn fine_spacing_nm(&self) -> f64 {
        self.pixel_size_nm / self.subpixels as f64
    }

    pub fn is_processed_fine(&self, row: usize, col: usize) -> bool {
        self.processed_mask[[row / self.subpixels, col / self.subpixels]]
    }

    /// Fine-grid values inside the processed region, row-major.
    pub fn processed_values(&self) -> Vec<f64> {
        self.image
            .indexed_iter()
            .filter(|((r, c), _)| self.is_processed_fine(*r, *c))
            .map(|(_, &v)| v)
            .collect()
    }

    /// Display transform `log10(1 + 1000 f / f_max)`.
    pub fn log_display(&self) -> Array2<f64> {
        let max = self.image.iter().cloned().fold(0.0, f64::max);
        if max <= 0.0 {
            return Array2::zeros(self.image.dim());
        }
        self.image.mapv(|f| (1.0 + f / max * 1e3).log10())
    }

    /// Linear min-max scaling to 16 bits over the processed region; the
    /// unprocessed border is written as 0.
    pub fn to_u16(&self, image: &Array2<f64>) -> Array2<f64> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for ((r, c), &v) in image.indexed_iter() {
            if self.is_processed_fine(r, c) {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        let span = hi - lo;
        Array2::from_shape_fn(image.dim(), |(r, c)| {
            if !self.is_processed_fine(r, c) || !(span > 0.0) {
                0.0
            } else {
                ((image[[r, c]] - lo) / span * u16::MAX as f64).round()
            }
        })
    }
}

/// Steering vectors for the `s x s` subpixel centres of a window's central
/// pixel, as the columns of an `N_pix x s²` matrix. Column `ky * s + kx`.
pub fn subpixel_steering_matrix(
    psf: &PsfModel,
    window: &WindowGeometry,
    subpixels: usize,
) -> Result<DMatrix<f64>> {
    let s = subpixels;
    let p = window.pixel_size_nm;
    let offset = |k: usize| ((k as f64 + 0.5) / s as f64 - 0.5) * p;
    let mut g = DMatrix::zeros(window.num_pixels(), s * s);
    for ky in 0..s {
        for kx in 0..s {
            let v = sample_steering_vector(psf, (offset(kx), offset(ky), 0.0), window)?;
            g.column_mut(ky * s + kx).copy_from_slice(&v.values);
        }
    }
    Ok(g)
}

pub fn reconstruct(stack: &ImageStack, cfg: &ReconstructionConfig) -> Result<Reconstruction> {
    cfg.validate()?;
    let analysis = analyze_windows(stack, cfg.window_side)?;
    reconstruct_from_analysis(&analysis, cfg)
}

/// Phase 2 on a finished phase 1. `cfg.window_side` must match the analysis.
pub fn reconstruct_from_analysis(
    analysis: &WindowAnalysis,
    cfg: &ReconstructionConfig,
) -> Result<Reconstruction> {
    cfg.validate()?;
    if cfg.window_side != analysis.side {
        return Err(Error::InvalidParameter(format!(
            "window side {} does not match analysis side {}",
            cfg.window_side, analysis.side
        )));
    }
    let threshold = analysis.resolve(cfg.variant, cfg.threshold_min_mean)?;
    let window = WindowGeometry::new(cfg.window_side, analysis.pixel_size_nm)?;
    let steering = subpixel_steering_matrix(&cfg.psf, &window, cfg.subpixels)?;

    let blocks: Vec<Vec<f64>> = analysis
        .decompositions
        .par_iter()
        .map(|dec| {
            let w = weights(dec, &threshold);
            let projections = dec.squared_projections(&steering);
            projections
                .column_iter()
                .map(|col| indicator_from_squared(col.iter().copied(), &w, &cfg.indicator))
                .collect()
        })
        .collect();

    let s = cfg.subpixels;
    let mut image = Array2::zeros((analysis.height * s, analysis.width * s));
    let mut processed_mask = Array2::from_elem((analysis.height, analysis.width), false);
    for (&(r, c), block) in analysis.centers.iter().zip(&blocks) {
        processed_mask[[r, c]] = true;
        for ky in 0..s {
            for kx in 0..s {
                image[[r * s + ky, c * s + kx]] = block[ky * s + kx];
            }
        }
    }
    Ok(Reconstruction {
        image,
        processed_mask,
        subpixels: s,
        pixel_size_nm: analysis.pixel_size_nm,
        config: *cfg,
        threshold,
    })
}

/// Number of eigenimages assigned to the signal subspace at each window
/// centre (`σ_i >= σ₀`). Zero outside the processed region.
#[derive(Debug, Clone, PartialEq)]
pub struct CardinalityMap {
    pub counts: Array2<usize>,
    /// Largest possible count, `M`.
    pub max_rank: usize,
}

impl CardinalityMap {
    /// 8-bit rendering, linear over `[0, M]`.
    pub fn to_u8(&self) -> Array2<u8> {
        let m = self.max_rank.max(1) as f64;
        self.counts
            .mapv(|c| ((c as f64 / m) * 255.0).round().clamp(0.0, 255.0) as u8)
    }
}

pub fn cardinality_map(stack: &ImageStack, cfg: &ReconstructionConfig) -> Result<CardinalityMap> {
    if cfg.variant.threshold.is_soft() {
        return Err(Error::CardinalityUndefined);
    }
    cfg.validate()?;
    let analysis = analyze_windows(stack, cfg.window_side)?;
    cardinality_from_analysis(&analysis, cfg)
}

pub fn cardinality_from_analysis(
    analysis: &WindowAnalysis,
    cfg: &ReconstructionConfig,
) -> Result<CardinalityMap> {
    let sigma0 = match analysis.resolve(cfg.variant, cfg.threshold_min_mean)? {
        ThresholdSpec::Hard { sigma0, .. } => sigma0,
        ThresholdSpec::Soft { .. } => return Err(Error::CardinalityUndefined),
    };
    Ok(cardinality_for_sigma0(analysis, sigma0))
}

pub fn cardinality_for_sigma0(analysis: &WindowAnalysis, sigma0: f64) -> CardinalityMap {
    let mut counts = Array2::zeros((analysis.height, analysis.width));
    for (&(r, c), dec) in analysis.centers.iter().zip(&analysis.decompositions) {
        counts[[r, c]] = dec.singular_values.iter().filter(|&&s| s >= sigma0).count();
    }
    CardinalityMap {
        counts,
        max_rank: analysis.max_rank(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingularValueRow {
    pub row: usize,
    pub col: usize,
    /// 1-based order in the descending spectrum.
    pub order: usize,
    pub sigma: f64,
    pub log10_sigma: f64,
}

/// Per-window singular values for plotting `log10 σ` against order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SingularValueTable {
    pub rows: Vec<SingularValueRow>,
}

pub const SINGULAR_VALUE_CSV_HEADER: &str = "row,col,order,sigma,log10_sigma";

impl SingularValueTable {
    pub fn from_analysis(analysis: &WindowAnalysis) -> Self {
        let rows = analysis
            .centers
            .iter()
            .zip(&analysis.decompositions)
            .flat_map(|(&(row, col), dec)| {
                dec.singular_values
                    .iter()
                    .enumerate()
                    .map(move |(i, &sigma)| SingularValueRow {
                        row,
                        col,
                        order: i + 1,
                        sigma,
                        log10_sigma: sigma.log10(),
                    })
            })
            .collect();
        Self { rows }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{SINGULAR_VALUE_CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{:e},{}",
                r.row, r.col, r.order, r.sigma, r.log10_sigma
            )?;
        }
        Ok(())
    }
}

pub fn export_singular_values(
    stack: &ImageStack,
    cfg: &ReconstructionConfig,
) -> Result<SingularValueTable> {
    cfg.validate()?;
    let analysis = analyze_windows(stack, cfg.window_side)?;
    Ok(SingularValueTable::from_analysis(&analysis))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stack_io::Calibration;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stack(seed: u64, t: usize, h: usize, w: usize) -> ImageStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = Array3::from_shape_fn((t, h, w), |_| rng.random_range(0.0..100.0));
        ImageStack::new(frames, Calibration::new(80.0, 665.0, 1.42).unwrap()).unwrap()
    }

    #[test]
    fn default_window_for_epifluorescence_setup_is_seven() {
        let psf = PsfModel::gaussian(665.0, 1.42).unwrap();
        assert_eq!(default_window_side(&psf, 80.0), 7);
    }

    #[test]
    fn geometry_of_output() {
        let stack = random_stack(1, 12, 16, 13);
        let mut cfg = ReconstructionConfig::for_stack(&stack, IndicatorVariant::MUSICAL_B).unwrap();
        cfg.subpixels = 4;
        let rec = reconstruct(&stack, &cfg).unwrap();
        assert_eq!(rec.image.dim(), (64, 52));
        for ((r, c), &v) in rec.image.indexed_iter() {
            let inside = (3..13).contains(&(r / 4)) && (3..10).contains(&(c / 4));
            assert_eq!(rec.is_processed_fine(r, c), inside);
            if inside {
                assert!(v.is_finite() && v >= 0.0);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn image_smaller_than_window() {
        let stack = random_stack(2, 4, 5, 9);
        let cfg = ReconstructionConfig::for_stack(&stack, IndicatorVariant::MUSICAL_A).unwrap();
        assert!(matches!(reconstruct(&stack, &cfg), Err(Error::ImageTooSmall { .. })));
    }

    #[test]
    fn cardinality_refuses_soft() {
        let stack = random_stack(3, 4, 9, 9);
        let cfg = ReconstructionConfig::for_stack(&stack, IndicatorVariant::EV_S).unwrap();
        let err = cardinality_map(&stack, &cfg).unwrap_err();
        assert_eq!(err.to_string(), "cardinality undefined for soft thresholding");
    }

    #[test]
    fn cardinality_extremes() {
        let stack = random_stack(4, 20, 10, 10);
        let analysis = analyze_windows(&stack, 7).unwrap();
        let top = analysis
            .decompositions
            .iter()
            .map(|d| d.singular_values[0])
            .fold(0.0, f64::max);
        let none = cardinality_for_sigma0(&analysis, top * 2.0);
        assert!(none.counts.iter().all(|&c| c == 0));
        let all = cardinality_for_sigma0(&analysis, 0.0);
        for &(r, c) in &analysis.centers {
            assert_eq!(all.counts[[r, c]], 20);
        }
        assert_eq!(all.max_rank, 20);
    }

    #[test]
    fn singular_value_table_is_complete() {
        let stack = random_stack(5, 6, 9, 10);
        let cfg = ReconstructionConfig::for_stack(&stack, IndicatorVariant::MUSICAL_A).unwrap();
        let table = export_singular_values(&stack, &cfg).unwrap();
        // 3 x 4 windows, M = min(49, 6) = 6
        assert_eq!(table.rows.len(), 12 * 6);
        for chunk in table.rows.chunks(6) {
            assert!(chunk.windows(2).all(|p| p[0].sigma >= p[1].sigma));
        }
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("row,col,order,sigma,log10_sigma\n"));
        assert_eq!(text.lines().count(), 73);
    }

    #[test]
    fn rank_one_windows_have_clamped_second_value() {
        let frame = Array3::from_shape_fn((1, 9, 9), |(_, r, c)| 1.0 + (r * 9 + c) as f64);
        let frames = ndarray::concatenate(
            ndarray::Axis(0),
            &[frame.view(), frame.view(), frame.view(), frame.view()],
        )
        .unwrap();
        let stack = ImageStack::new(frames, Calibration::new(80.0, 665.0, 1.42).unwrap()).unwrap();
        let cfg = ReconstructionConfig::for_stack(&stack, IndicatorVariant::MUSICAL_A).unwrap();
        let table = export_singular_values(&stack, &cfg).unwrap();
        assert!(table.rows.iter().filter(|r| r.order == 2).all(|r| r.sigma == 0.0));
    }

    #[test]
    fn u16_export_spans_the_processed_range() {
        let stack = random_stack(6, 10, 9, 9);
        let mut cfg = ReconstructionConfig::for_stack(&stack, IndicatorVariant::MUSICAL_B).unwrap();
        cfg.subpixels = 2;
        let rec = reconstruct(&stack, &cfg).unwrap();
        let scaled = rec.to_u16(&rec.image);
        let max = scaled.iter().cloned().fold(0.0, f64::max);
        assert_eq!(max, 65535.0);
        assert_eq!(scaled[[0, 0]], 0.0);
        let log = rec.log_display();
        let lmax = log.iter().cloned().fold(0.0, f64::max);
        assert!((lmax - 1001f64.log10()).abs() < 1e-12);
    }
}
