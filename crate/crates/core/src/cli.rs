//! Command-line front end.
//!
//! Every failure prints one line `error[<category>]: <message>` to stderr and
//! exits with the category's code (see [`Error::exit_code`]). Arguments are
//! checked before any file is touched, and outputs are written atomically.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::entropy::DEFAULT_ALPHA;
use crate::error::{Error, Result};
use crate::io::{encode_for_path, read_image, write_atomic};
use crate::mosaic::{BayerPhase, MosaicImage};
use crate::par::{self, ExecMode};
use crate::pipeline::{analyze_image, decode_image, encode_image, WeightSearchPath};
use crate::predictors::graph::load_graph;
use crate::predictors::{CnnPredictor, LinearPredictor, NetworkGraph, Predictor};
use crate::quantizer::{design_codebook, QuantizerCodebook, DEFAULT_REGIONS};

/// Colon-separated directories or files searched for weights by content hash.
pub const WEIGHTS_ENV: &str = "MOSAIC_CODEC_WEIGHTS";

#[derive(Debug, Parser)]
#[command(name = "mosaic-codec", version, about = "Lossless Bayer mosaic codec")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    pub jobs: Option<u16>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compress a PGM or MIPR mosaic.
    Encode {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        image: ImageArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Restore a mosaic; `.mipr` output keeps the phase, anything else is PGM.
    Decode {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Weight file or directory to search for the stream's weights.
        #[arg(long)]
        weights: Vec<PathBuf>,
    },
    /// Report residual entropies, compression ratio and coded size.
    Analyze {
        input: PathBuf,
        /// Also write the report here.
        #[arg(short = 'o', long)]
        report: Option<PathBuf>,
        /// Write the residual map as a mosaic.
        #[arg(long)]
        residual_map: Option<PathBuf>,
        /// Write per-channel residual histograms as CSV.
        #[arg(long)]
        histogram: Option<PathBuf>,
        #[command(flatten)]
        image: ImageArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Design a per-channel context quantizer from a directory of mosaics.
    DesignQuantizer {
        dir: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(short = 'K', long = "regions", default_value_t = DEFAULT_REGIONS as u8,
              value_parser = clap::value_parser!(u8).range(2..))]
        regions: u8,
        #[command(flatten)]
        image: ImageArgs,
    },
    /// Describe a weight file.
    GraphInfo { input: PathBuf },
}

#[derive(Debug, Args)]
pub struct ImageArgs {
    /// CFA phase; PGM input defaults to RGGB, MIPR input to its header.
    #[arg(long)]
    pub phase: Option<BayerPhase>,
    /// Sample bit depth, overriding what the file implies.
    #[arg(long, value_parser = clap::value_parser!(u8).range(8..=16))]
    pub bit_depth: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PredictorKind {
    Linear,
    Cnn,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = PredictorKind::Linear)]
    pub predictor: PredictorKind,
    /// Weight file, required with `--predictor cnn`.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Context quantizer (MIPQ); designed from the input when absent.
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    /// Context classes per channel when designing from the input.
    #[arg(short = 'K', long = "regions", default_value_t = DEFAULT_REGIONS as u8,
          value_parser = clap::value_parser!(u8).range(1..))]
    pub regions: u8,
    /// Smoothing weight of observed counts.
    #[arg(long, default_value_t = DEFAULT_ALPHA as u16, value_parser = clap::value_parser!(u16).range(1..))]
    pub alpha: u16,
}

impl ModelArgs {
    fn validate(&self) -> Result<()> {
        match (self.predictor, &self.weights) {
            (PredictorKind::Cnn, None) => Err(Error::Invalid("--predictor cnn requires --weights".into())),
            (PredictorKind::Linear, Some(_)) => {
                Err(Error::Invalid("--weights is only meaningful with --predictor cnn".into()))
            }
            _ => Ok(()),
        }
    }

    fn predictor(&self) -> Result<Box<dyn Predictor>> {
        match (self.predictor, &self.weights) {
            (PredictorKind::Cnn, Some(path)) => {
                let g = load_graph(&fs::read(path)?)?;
                Ok(Box::new(CnnPredictor::new(Arc::new(g))))
            }
            _ => Ok(Box::new(LinearPredictor)),
        }
    }

    fn codebook(&self, img: &MosaicImage, mode: ExecMode) -> Result<QuantizerCodebook> {
        if let Some(path) = &self.codebook {
            return QuantizerCodebook::from_bytes(&fs::read(path)?);
        }
        let k = usize::from(self.regions);
        if k == 1 {
            return Ok(QuantizerCodebook::single_class());
        }
        match design_codebook(std::slice::from_ref(img), k, mode) {
            Err(Error::Degenerate(_)) => QuantizerCodebook::geometric(img.bit_depth(), k),
            r => r,
        }
    }
}

fn check_output(path: &Path) -> Result<()> {
    if path.as_os_str().is_empty() || path.is_dir() {
        return Err(Error::Invalid(format!("output path {} is not a file path", path.display())));
    }
    Ok(())
}

fn search_path(weights: &[PathBuf]) -> WeightSearchPath {
    let mut entries = weights.to_vec();
    if let Some(v) = std::env::var_os(WEIGHTS_ENV) {
        entries.extend(std::env::split_paths(&v));
    }
    WeightSearchPath { entries }
}

fn graph_info(g: &NetworkGraph) -> String {
    let mut s = format!(
        "bit_depth={}\nnormalization={}\nnodes={}\nparameters={}\nhash={:016x}\n",
        g.bit_depth(),
        g.normalization(),
        g.nodes().len(),
        g.parameter_count(),
        g.content_hash()
    );
    for (k, node) in g.nodes().iter().enumerate() {
        let shape = g.shapes()[k + 2];
        s += &format!(
            "node{k}={} inputs={:?} out={}x{}x{} params={}\n",
            node.op.name(),
            node.inputs,
            shape.c,
            shape.h,
            shape.w,
            node.op.parameter_count()
        );
    }
    s
}

fn training_images(dir: &Path, image: &ImageArgs) -> Result<Vec<MosaicImage>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("pgm") || e.eq_ignore_ascii_case("mipr"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Invalid(format!("no .pgm or .mipr files in {}", dir.display())));
    }
    paths.iter().map(|p| read_image(p, image.phase, image.bit_depth)).collect()
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let mode = if cli.jobs == Some(1) { ExecMode::Sequential } else { ExecMode::Auto };
    match cli.command {
        Command::Encode { input, output, image, model } => {
            model.validate()?;
            check_output(&output)?;
            let img = read_image(&input, image.phase, image.bit_depth)?;
            let predictor = model.predictor()?;
            let codebook = model.codebook(&img, mode)?;
            let bytes = encode_image(&img, predictor.as_ref(), &codebook, model.alpha, mode)?;
            write_atomic(&output, &bytes)?;
            writeln!(
                out,
                "{} -> {}: {} bytes, {:.4} bits/sample, predictor={} regions={} alpha={}",
                input.display(),
                output.display(),
                bytes.len(),
                bytes.len() as f64 * 8.0 / img.pixel_count() as f64,
                predictor.id(),
                codebook.regions(),
                model.alpha
            )?;
        }
        Command::Decode { input, output, weights } => {
            check_output(&output)?;
            let bytes = fs::read(&input)?;
            let img = decode_image(&bytes, &search_path(&weights))?;
            write_atomic(&output, &encode_for_path(&output, &img))?;
            writeln!(
                out,
                "{} -> {}: {}x{} {}-bit {}",
                input.display(),
                output.display(),
                img.width(),
                img.height(),
                img.bit_depth(),
                img.phase()
            )?;
        }
        Command::Analyze { input, report, residual_map, histogram, image, model } => {
            model.validate()?;
            for p in [&report, &residual_map, &histogram].into_iter().flatten() {
                check_output(p)?;
            }
            let img = read_image(&input, image.phase, image.bit_depth)?;
            let predictor = model.predictor()?;
            let codebook = model.codebook(&img, mode)?;
            let rep = analyze_image(&img, predictor.as_ref(), &codebook, model.alpha, mode)?;
            let text = rep.to_text();
            out.write_all(text.as_bytes())?;
            if let Some(p) = report {
                write_atomic(&p, text.as_bytes())?;
            }
            if let Some(p) = residual_map {
                write_atomic(&p, &encode_for_path(&p, &rep.residual_image()?))?;
            }
            if let Some(p) = histogram {
                write_atomic(&p, rep.histogram_csv().as_bytes())?;
            }
        }
        Command::DesignQuantizer { dir, output, regions, image } => {
            check_output(&output)?;
            let images = training_images(&dir, &image)?;
            let codebook = design_codebook(&images, usize::from(regions), mode)?;
            write_atomic(&output, &codebook.to_bytes())?;
            writeln!(out, "{} images -> {}: regions={}", images.len(), output.display(), codebook.regions())?;
        }
        Command::GraphInfo { input } => {
            let g = load_graph(&fs::read(&input)?)?;
            out.write_all(graph_info(&g).as_bytes())?;
        }
    }
    Ok(())
}

/// Parse `argv` (program name first), run, and return the exit code.
/// Normal output goes to `out`, the error line to `err`.
pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let msg = e.kind().as_str().unwrap_or("bad arguments");
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or_default().trim_start_matches("error: ");
            let _ = writeln!(err, "error[usage]: {msg}: {first}");
            return Error::Invalid(String::new()).exit_code();
        }
    };
    let jobs = cli.jobs.map(usize::from);
    let result = par::with_threads(jobs, move || {
        let mut buf = Vec::new();
        let r = execute(cli, &mut buf);
        (r, buf)
    });
    let result = match result {
        Ok((r, buf)) => {
            let _ = out.write_all(&buf);
            r
        }
        Err(e) => Err(Error::Io(e)),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            let _ = writeln!(err, "error[{}]: {line}", e.category());
            e.exit_code()
        }
    }
}

/// [`run_with`] on the process's stdout and stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}
