//! Loading, validation and export of image stacks.
//!
//! Stacks are multi-page grayscale TIFF files (8/16-bit unsigned or 32-bit
//! float). Calibration is always supplied by the caller; TIFF tags are not
//! consulted. Intensities are taken as photo-electron counts and are never
//! rescaled or background-corrected on load.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::ColorType;

use crate::error::{Error, Result};

/// Physical calibration of the coarse pixel grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub pixel_size_nm: f64,
    /// Emission wavelength.
    pub wavelength_nm: f64,
    pub numerical_aperture: f64,
    pub exposure_ms: Option<f64>,
}

impl Calibration {
    pub fn new(pixel_size_nm: f64, wavelength_nm: f64, numerical_aperture: f64) -> Result<Self> {
        let cal = Self {
            pixel_size_nm,
            wavelength_nm,
            numerical_aperture,
            exposure_ms: None,
        };
        cal.validate()?;
        Ok(cal)
    }

    pub fn with_exposure_ms(mut self, exposure_ms: f64) -> Self {
        self.exposure_ms = Some(exposure_ms);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.pixel_size_nm) {
            return Err(Error::InvalidCalibration(format!(
                "pixel size must be positive, got {}",
                self.pixel_size_nm
            )));
        }
        if !positive(self.wavelength_nm) {
            return Err(Error::InvalidCalibration(format!(
                "wavelength must be positive, got {}",
                self.wavelength_nm
            )));
        }
        if !positive(self.numerical_aperture) {
            return Err(Error::InvalidCalibration(format!(
                "numerical aperture must be positive, got {}",
                self.numerical_aperture
            )));
        }
        if let Some(exposure) = self.exposure_ms {
            if !positive(exposure) {
                return Err(Error::InvalidCalibration(format!(
                    "exposure must be positive, got {exposure}"
                )));
            }
        }
        Ok(())
    }
}

/// `T` frames of nonnegative intensities on an `H x W` grid, stored as a
/// `T x H x W` array. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack {
    frames: Array3<f64>,
    calibration: Calibration,
}

impl ImageStack {
    pub fn new(frames: Array3<f64>, calibration: Calibration) -> Result<Self> {
        calibration.validate()?;
        let t = frames.len_of(Axis(0));
        if t < 2 {
            return Err(Error::TooFewFrames(t));
        }
        for (frame_index, frame) in frames.outer_iter().enumerate() {
            for &value in frame.iter() {
                if value.is_nan() || value.is_infinite() {
                    return Err(Error::InvalidParameter(format!(
                        "non-finite intensity at frame {frame_index}"
                    )));
                }
                if value < 0.0 {
                    return Err(Error::NegativeIntensity {
                        frame: frame_index,
                        value,
                    });
                }
            }
        }
        Ok(Self {
            frames,
            calibration,
        })
    }

    pub fn frames(&self) -> &Array3<f64> {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> ArrayView2<'_, f64> {
        self.frames.index_axis(Axis(0), t)
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len_of(Axis(0))
    }

    pub fn height(&self) -> usize {
        self.frames.len_of(Axis(1))
    }

    pub fn width(&self) -> usize {
        self.frames.len_of(Axis(2))
    }

    pub fn calibration(&self) -> &Calibration {
        &self.calibration
    }

    /// Every intensity multiplied by `factor` (which must be positive).
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "scale factor must be positive, got {factor}"
            )));
        }
        Ok(Self {
            frames: self.frames.mapv(|v| v * factor),
            calibration: self.calibration,
        })
    }

    pub fn into_frames(self) -> Array3<f64> {
        self.frames
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackSummary {
    pub mean_image: Array2<f64>,
    pub min: f64,
    pub max: f64,
    pub frame_means: Vec<f64>,
}

pub fn stack_summary(stack: &ImageStack) -> StackSummary {
    let frames = stack.frames();
    let t = stack.num_frames() as f64;
    let mut sum = Array2::<f64>::zeros((stack.height(), stack.width()));
    for frame in frames.outer_iter() {
        sum += &frame;
    }
    let mean_image = sum / t;
    let (min, max) = frames
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let frame_means = frames
        .outer_iter()
        .map(|f| f.sum() / f.len() as f64)
        .collect();
    StackSummary {
        mean_image,
        min,
        max,
        frame_means,
    }
}

fn page_to_f64(result: DecodingResult, color: ColorType) -> Result<Vec<f64>> {
    Ok(match result {
        DecodingResult::U8(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::U32(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::F32(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::F64(v) => v,
        _ => {
            return Err(Error::NonGrayscale(format!(
                "unsupported sample type for {color:?}"
            )))
        }
    })
}

/// Reads every page of a grayscale TIFF file in file order.
pub fn read_pages(path: &Path) -> Result<Vec<Array2<f64>>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = BufReader::new(File::open(path)?);
    let mut decoder = Decoder::new(reader)?.with_limits(Limits::unlimited());
    let mut pages = Vec::new();
    let mut expected: Option<(usize, usize)> = None;
    loop {
        let color = decoder.colortype()?;
        if !matches!(color, ColorType::Gray(_)) {
            return Err(Error::NonGrayscale(format!(
                "page {} has color type {color:?}",
                pages.len()
            )));
        }
        let (w, h) = decoder.dimensions()?;
        let dims = (h as usize, w as usize);
        match expected {
            None => expected = Some(dims),
            Some(e) if e != dims => {
                return Err(Error::InconsistentPages {
                    page: pages.len(),
                    expected: e,
                    found: dims,
                })
            }
            _ => {}
        }
        let data = page_to_f64(decoder.read_image()?, color)?;
        let page = Array2::from_shape_vec(dims, data)
            .map_err(|e| Error::InvalidParameter(format!("page layout: {e}")))?;
        pages.push(page);
        if !decoder.more_images() {
            break;
        }
        decoder.next_image()?;
    }
    Ok(pages)
}

/// Loads a multi-page grayscale TIFF as an [`ImageStack`], frames in
/// acquisition (page) order.
pub fn load_stack(path: &Path, calibration: Calibration) -> Result<ImageStack> {
    let pages = read_pages(path)?;
    if pages.len() < 2 {
        return Err(Error::TooFewFrames(pages.len()));
    }
    let views: Vec<_> = pages.iter().map(|p| p.view()).collect();
    let frames = ndarray::stack(Axis(0), &views)
        .map_err(|e| Error::InvalidParameter(format!("stacking pages: {e}")))?;
    ImageStack::new(frames, calibration)
}

/// Reads the first page of a grayscale TIFF as a single image.
pub fn read_image(path: &Path) -> Result<Array2<f64>> {
    let mut pages = read_pages(path)?;
    Ok(pages.swap_remove(0))
}

/// On-disk sample format for written stacks and images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    U8,
    U16,
    F32,
}

impl SampleFormat {
    /// The narrowest format that stores every value of `values` exactly,
    /// falling back to 32-bit float.
    pub fn lossless_for<'a>(values: impl IntoIterator<Item = &'a f64>) -> Self {
        let mut max = 0.0_f64;
        for &v in values {
            if v.fract() != 0.0 || v < 0.0 {
                return SampleFormat::F32;
            }
            max = max.max(v);
        }
        if max <= u8::MAX as f64 {
            SampleFormat::U8
        } else if max <= u16::MAX as f64 {
            SampleFormat::U16
        } else {
            SampleFormat::F32
        }
    }
}

fn write_pages<'a>(
    path: &Path,
    pages: impl Iterator<Item = ArrayView2<'a, f64>>,
    format: SampleFormat,
) -> Result<()> {
    let writer = BufWriter::new(File::create(path)?);
    let mut encoder = TiffEncoder::new(writer)?;
    for page in pages {
        let (h, w) = page.dim();
        let (w, h) = (w as u32, h as u32);
        match format {
            SampleFormat::U8 => {
                let data: Vec<u8> = page.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
                encoder.write_image::<colortype::Gray8>(w, h, &data)?;
            }
            SampleFormat::U16 => {
                let data: Vec<u16> = page
                    .iter()
                    .map(|&v| v.round().clamp(0.0, u16::MAX as f64) as u16)
                    .collect();
                encoder.write_image::<colortype::Gray16>(w, h, &data)?;
            }
            SampleFormat::F32 => {
                let data: Vec<f32> = page.iter().map(|&v| v as f32).collect();
                encoder.write_image::<colortype::Gray32Float>(w, h, &data)?;
            }
        }
    }
    Ok(())
}

/// Writes a stack as a multi-page TIFF. Integer formats round to nearest
/// and saturate.
pub fn write_stack(path: &Path, stack: &ImageStack, format: SampleFormat) -> Result<()> {
    write_pages(path, stack.frames().outer_iter(), format)
}

/// Writes a single image as a one-page TIFF.
pub fn write_image(path: &Path, image: &Array2<f64>, format: SampleFormat) -> Result<()> {
    write_pages(path, std::iter::once(image.view()), format)
}

pub fn write_png8(path: &Path, image: &Array2<u8>) -> Result<()> {
    let (h, w) = image.dim();
    let writer = BufWriter::new(File::create(path)?);
    let mut encoder = png::Encoder::new(writer, w as u32, h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut png_writer = encoder.write_header()?;
    let data: Vec<u8> = image.iter().copied().collect();
    png_writer.write_image_data(&data)?;
    png_writer.finish()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cal() -> Calibration {
        Calibration::new(80.0, 665.0, 1.42).unwrap()
    }

    #[test]
    fn rejects_single_frame() {
        let frames = Array3::<f64>::zeros((1, 4, 4));
        assert!(matches!(ImageStack::new(frames, cal()), Err(Error::TooFewFrames(1))));
    }

    #[test]
    fn rejects_negative_intensity() {
        let mut frames = Array3::<f64>::zeros((2, 3, 3));
        frames[[1, 2, 0]] = -0.5;
        let err = ImageStack::new(frames, cal()).unwrap_err();
        assert!(err.to_string().contains("negative intensity"));
    }

    #[test]
    fn rejects_bad_calibration() {
        assert!(Calibration::new(0.0, 665.0, 1.42).is_err());
        assert!(Calibration::new(80.0, -1.0, 1.42).is_err());
        assert!(Calibration::new(80.0, 665.0, 0.0).is_err());
    }

    #[test]
    fn summary_of_identical_frames_is_the_frame() {
        let frame = Array2::from_shape_fn((3, 5), |(r, c)| (r * 5 + c) as f64);
        let frames = ndarray::stack(Axis(0), &[frame.view(), frame.view()]).unwrap();
        let s = stack_summary(&ImageStack::new(frames, cal()).unwrap());
        assert_eq!(s.mean_image, frame);
        assert_eq!(s.min, 0.0);
        assert_eq!(s.max, 14.0);
    }

    #[test]
    fn summary_of_zero_stack() {
        let s = stack_summary(&ImageStack::new(Array3::zeros((4, 2, 2)), cal()).unwrap());
        assert_eq!(s.min, 0.0);
        assert_eq!(s.max, 0.0);
        assert!(s.mean_image.iter().all(|&v| v == 0.0));
        assert_eq!(s.frame_means, vec![0.0; 4]);
    }

    #[test]
    fn summary_mean_matches_per_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let frames = Array3::from_shape_fn((3, 4, 4), |_| rng.random_range(0.0..1000.0));
        let stack = ImageStack::new(frames.clone(), cal()).unwrap();
        let s = stack_summary(&stack);
        for y in 0..4 {
            for x in 0..4 {
                let mut acc = 0.0;
                for t in 0..3 {
                    acc += frames[[t, y, x]];
                }
                let expected = acc / 3.0;
                assert!((s.mean_image[[y, x]] - expected).abs() <= 1e-9 * expected.abs());
            }
        }
    }

    #[test]
    fn lossless_format_selection() {
        assert_eq!(SampleFormat::lossless_for(&[0.0, 200.0]), SampleFormat::U8);
        assert_eq!(SampleFormat::lossless_for(&[0.0, 300.0]), SampleFormat::U16);
        assert_eq!(SampleFormat::lossless_for(&[70000.0]), SampleFormat::F32);
        assert_eq!(SampleFormat::lossless_for(&[1.5]), SampleFormat::F32);
    }
}
