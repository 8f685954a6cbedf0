use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use ndarray::Array2;
use serde_json::json;

use musical_core::indicator::{IndicatorConfig, IndicatorVariant, DEFAULT_EPSILON_FLOOR};
use musical_core::metrics::{
    circles_ratio, mean_image_baseline, ratio_curve, resolution_from_curve, CirclesGeometry,
    FineImage, LinesGeometry, RatioConfig,
};
use musical_core::psf::PsfModel;
use musical_core::reconstruct::{
    analyze_windows, cardinality_from_analysis, default_window_side, reconstruct_from_analysis,
    ReconstructionConfig, SingularValueTable, DEFAULT_SUBPIXELS,
};
use musical_core::simulate::{read_ground_truth_csv, write_ground_truth_csv, CountMode, SimulationConfig};
use musical_core::stack_io::{
    load_stack, read_image, write_image, write_png8, write_stack, Calibration, ImageStack,
    SampleFormat,
};

use crate::manifest::{digest, manifest_path, RunManifest, Timer};
use crate::{
    CalibrationArgs, CardinalityArgs, Cli, Command, EvaluateArgs, MethodArgs, ReconstructArgs,
    SimulateArgs, SvplotArgs, Target,
};

pub fn run(cli: &Cli, argv: &[String], effective: &[String]) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let manifest = |command: &str, options: serde_json::Value| RunManifest {
        tool: "musical".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        argv: argv.to_vec(),
        effective_argv: effective.to_vec(),
        threads: rayon::current_num_threads(),
        seed: None,
        options,
        resolved: serde_json::Value::Null,
        inputs: Vec::new(),
        outputs: Vec::new(),
        timings: Vec::new(),
    };
    match &cli.command {
        Command::Simulate(a) => simulate(a, manifest("simulate", serde_json::to_value(a)?)),
        Command::Reconstruct(a) => reconstruct(a, manifest("reconstruct", serde_json::to_value(a)?)),
        Command::Svplot(a) => svplot(a, manifest("svplot", serde_json::to_value(a)?)),
        Command::Evaluate(a) => evaluate(a, manifest("evaluate", serde_json::to_value(a)?)),
        Command::Cardinality(a) => cardinality(a, manifest("cardinality", serde_json::to_value(a)?)),
    }
}

fn calibration(c: &CalibrationArgs) -> Result<Calibration> {
    Ok(Calibration::new(c.pixel_size_nm, c.wavelength_nm, c.na)?)
}

fn load(path: &Path, c: &CalibrationArgs) -> Result<ImageStack> {
    load_stack(path, calibration(c)?).with_context(|| format!("loading {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn simulate(a: &SimulateArgs, mut m: RunManifest) -> Result<()> {
    let mut timer = Timer::new();
    let mut cfg = SimulationConfig::standard(a.scene, a.seed);
    cfg.height = a.height.unwrap_or(cfg.height);
    cfg.width = a.width.unwrap_or(cfg.width);
    cfg.pixel_size_nm = a.calibration.pixel_size_nm;
    cfg.wavelength_nm = a.calibration.wavelength_nm;
    cfg.numerical_aperture = a.calibration.na;
    cfg.duty_cycle = a.duty;
    cfg.sbr = a.sbr;
    cfg.frames = a.frames;
    cfg.exposure_ms = a.exposure_ms;
    cfg.tau_on_ms = a.tau_on_ms;
    cfg.photon_rate = a.photon_rate;
    cfg.read_noise_sd = a.read_noise_sd;
    if a.poisson_counts {
        cfg.count_mode = CountMode::Poisson;
    }
    let sim = cfg.run()?;
    timer.lap("simulate");

    let format = SampleFormat::lossless_for(sim.stack.frames().iter());
    write_stack(&a.out, &sim.stack, format).with_context(|| format!("writing {}", a.out.display()))?;
    m.outputs.push(digest(&a.out)?);
    if let Some(gt) = &a.ground_truth {
        let mut w = create(gt)?;
        write_ground_truth_csv(&sim.scene.emitters, &mut w)?;
        w.flush()?;
        m.outputs.push(digest(gt)?);
    }
    timer.lap("write");

    m.seed = Some(a.seed);
    m.resolved = json!({
        "simulation": cfg,
        "emitters": sim.scene.emitters.len(),
        "geometry": sim.scene.geometry,
        "background_rate": sim.background_rate,
        "sample_format": format!("{format:?}"),
    });
    m.timings = timer.timings;
    m.write_all()?;
    eprintln!(
        "simulated {} emitters, {} frames of {}x{} -> {}",
        sim.scene.emitters.len(),
        sim.stack.num_frames(),
        sim.stack.height(),
        sim.stack.width(),
        a.out.display()
    );
    Ok(())
}

fn recon_config(stack: &ImageStack, method: &MethodArgs, psf: PsfModel, alpha: f64, subpixels: usize) -> Result<ReconstructionConfig> {
    let cal = stack.calibration();
    let cfg = ReconstructionConfig {
        window_side: method
            .window_size
            .unwrap_or_else(|| default_window_side(&psf, cal.pixel_size_nm)),
        subpixels,
        indicator: IndicatorConfig::new(alpha, DEFAULT_EPSILON_FLOOR)?,
        variant: IndicatorVariant::new(method.method, method.threshold),
        psf,
        threshold_min_mean: method.threshold_window_filter,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn reconstruct(a: &ReconstructArgs, mut m: RunManifest) -> Result<()> {
    if a.export_cardinality.is_some() && a.method.threshold.is_soft() {
        bail!(musical_core::Error::CardinalityUndefined);
    }
    let mut timer = Timer::new();
    let stack = load(&a.input, &a.calibration)?;
    m.inputs.push(digest(&a.input)?);
    timer.lap("load");

    let psf = PsfModel::new(a.psf, a.calibration.wavelength_nm, a.calibration.na, musical_core::psf::DEFAULT_DEFOCUS_SCALE)?;
    let cfg = recon_config(&stack, &a.method, psf, a.alpha, a.subpixels)?;
    let analysis = analyze_windows(&stack, cfg.window_side)?;
    timer.lap("decompose");
    let recon = reconstruct_from_analysis(&analysis, &cfg)?;
    timer.lap("indicator");

    let values = if a.log_display { recon.log_display() } else { recon.image.clone() };
    if is_png(&a.output) {
        let scaled = recon.to_u16(&values);
        let bytes = scaled.mapv(|v| (v / u16::MAX as f64 * 255.0).round() as u8);
        write_png8(&a.output, &bytes)?;
    } else if a.float {
        write_image(&a.output, &values, SampleFormat::F32)?;
    } else {
        write_image(&a.output, &recon.to_u16(&values), SampleFormat::U16)?;
    }
    m.outputs.push(digest(&a.output)?);
    if let Some(path) = &a.export_sv {
        let mut w = create(path)?;
        SingularValueTable::from_analysis(&analysis).write_csv(&mut w)?;
        w.flush()?;
        m.outputs.push(digest(path)?);
    }
    if let Some(path) = &a.export_cardinality {
        let map = cardinality_from_analysis(&analysis, &cfg)?;
        write_png8(path, &map.to_u8())?;
        m.outputs.push(digest(path)?);
    }
    timer.lap("write");

    m.resolved = json!({
        "config": cfg,
        "pixel_size_nm": stack.calibration().pixel_size_nm,
        "variant": cfg.variant.to_string(),
        "threshold": recon.threshold,
        "windows": analysis.centers.len(),
        "output_shape": recon.image.dim(),
    });
    m.timings = timer.timings;
    m.write_all()?;
    eprintln!(
        "{} reconstruction {}x{} ({} windows) -> {}",
        cfg.variant,
        recon.image.nrows(),
        recon.image.ncols(),
        analysis.centers.len(),
        a.output.display()
    );
    Ok(())
}

fn svplot(a: &SvplotArgs, mut m: RunManifest) -> Result<()> {
    let mut timer = Timer::new();
    let stack = load(&a.input, &a.calibration)?;
    m.inputs.push(digest(&a.input)?);
    let psf = PsfModel::gaussian(a.calibration.wavelength_nm, a.calibration.na)?;
    let side = a
        .window_size
        .unwrap_or_else(|| default_window_side(&psf, a.calibration.pixel_size_nm));
    let analysis = analyze_windows(&stack, side)?;
    timer.lap("decompose");
    let table = SingularValueTable::from_analysis(&analysis);
    let mut w = create(&a.out)?;
    table.write_csv(&mut w)?;
    w.flush()?;
    m.outputs.push(digest(&a.out)?);
    timer.lap("write");
    m.resolved = json!({ "window_side": side, "windows": analysis.centers.len(), "rows": table.rows.len() });
    m.timings = timer.timings;
    m.write_all()?;
    eprintln!("{} singular values from {} windows -> {}", table.rows.len(), analysis.centers.len(), a.out.display());
    Ok(())
}

fn cardinality(a: &CardinalityArgs, mut m: RunManifest) -> Result<()> {
    if a.method.threshold.is_soft() {
        bail!(musical_core::Error::CardinalityUndefined);
    }
    let mut timer = Timer::new();
    let stack = load(&a.input, &a.calibration)?;
    m.inputs.push(digest(&a.input)?);
    let psf = PsfModel::gaussian(a.calibration.wavelength_nm, a.calibration.na)?;
    let cfg = recon_config(&stack, &a.method, psf, musical_core::indicator::DEFAULT_ALPHA, DEFAULT_SUBPIXELS)?;
    let analysis = analyze_windows(&stack, cfg.window_side)?;
    timer.lap("decompose");
    let map = cardinality_from_analysis(&analysis, &cfg)?;
    write_png8(&a.out, &map.to_u8())?;
    m.outputs.push(digest(&a.out)?);
    timer.lap("write");
    m.resolved = json!({
        "variant": cfg.variant.to_string(),
        "threshold": analysis.resolve(cfg.variant, cfg.threshold_min_mean)?,
        "window_side": cfg.window_side,
        "max_rank": map.max_rank,
    });
    m.timings = timer.timings;
    m.write_all()?;
    eprintln!("cardinality map (M = {}) -> {}", map.max_rank, a.out.display());
    Ok(())
}

/// Geometry of a reconstruction file: from the flags, else its manifest,
/// else the defaults.
fn recon_layout(a: &EvaluateArgs, recon: &Path) -> Result<(usize, usize, f64)> {
    let resolved = RunManifest::read(&manifest_path(recon))
        .ok()
        .map(|m| m.resolved)
        .unwrap_or(serde_json::Value::Null);
    let cfg = &resolved["config"];
    let subpixels = a
        .subpixels
        .or_else(|| cfg["subpixels"].as_u64().map(|v| v as usize))
        .unwrap_or(DEFAULT_SUBPIXELS);
    let pixel = a
        .pixel_size_nm
        .or_else(|| resolved["pixel_size_nm"].as_f64())
        .unwrap_or(80.0);
    let psf = PsfModel::gaussian(a.wavelength_nm, a.na)?;
    let side = a
        .window_size
        .or_else(|| cfg["window_side"].as_u64().map(|v| v as usize))
        .unwrap_or_else(|| default_window_side(&psf, pixel));
    Ok((subpixels, side, pixel))
}

fn evaluate(a: &EvaluateArgs, mut m: RunManifest) -> Result<()> {
    let mut timer = Timer::new();
    let image = match (&a.recon, &a.stack) {
        (Some(path), _) => {
            let values = read_image(path).with_context(|| format!("reading {}", path.display()))?;
            m.inputs.push(digest(path)?);
            let (s, side, pixel) = recon_layout(a, path)?;
            let (h, w) = values.dim();
            if h % s != 0 || w % s != 0 {
                bail!("image {h}x{w} is not a multiple of {s} subpixels");
            }
            let margin = side / 2;
            let (ch, cw) = (h / s, w / s);
            let mask = Array2::from_shape_fn((h, w), |(i, j)| {
                let (r, c) = (i / s, j / s);
                r >= margin && c >= margin && r + margin < ch && c + margin < cw
            });
            FineImage::new(values, pixel / s as f64)?.with_mask(mask)?
        }
        (None, Some(path)) => {
            let pixel = a.pixel_size_nm.unwrap_or(80.0);
            let cal = Calibration::new(pixel, a.wavelength_nm, a.na)?;
            let stack = load_stack(path, cal).with_context(|| format!("loading {}", path.display()))?;
            m.inputs.push(digest(path)?);
            let mean = musical_core::stack_io::stack_summary(&stack).mean_image;
            mean_image_baseline(&mean, pixel, a.subpixels.unwrap_or(DEFAULT_SUBPIXELS))?
        }
        (None, None) => bail!("one of --recon or --stack is required"),
    };
    let emitters = read_ground_truth_csv(BufReader::new(
        File::open(&a.ground_truth).with_context(|| format!("opening {}", a.ground_truth.display()))?,
    ))?;
    m.inputs.push(digest(&a.ground_truth)?);
    timer.lap("load");

    let rc = RatioConfig {
        band_fraction: a.band_fraction,
        threshold: a.ratio_threshold,
        stability_steps: a.stability_steps,
        profile_half_width: a.profile_half_width,
    };
    let mut w = create(&a.out)?;
    let result = match a.target {
        Target::Lines => {
            let geom = LinesGeometry::infer(&emitters)?;
            let curve = ratio_curve(&image, &geom, &rc);
            curve.write_csv(&mut w)?;
            let res = resolution_from_curve(&curve, &rc);
            json!({ "target": "lines", "geometry": geom, "resolution": res, "separation_nm": res.separation_nm() })
        }
        Target::Circles => {
            let geom = CirclesGeometry::infer(&emitters)?;
            let s = circles_ratio(&image, &geom, &rc)?;
            writeln!(w, "v,p1,p2,r,contrast")?;
            writeln!(w, "{},{},{},{},{}", s.v, s.p1, s.p2, s.r, 1.0 - s.r)?;
            json!({ "target": "circles", "geometry": geom, "ratio": s, "contrast": 1.0 - s.r })
        }
    };
    w.flush()?;
    drop(w);
    m.outputs.push(digest(&a.out)?);
    timer.lap("measure");
    m.resolved = json!({ "ratio_config": rc, "spacing_nm": image.spacing_nm, "result": result });
    m.timings = timer.timings;
    m.write_all()?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}
