//! Benchmark harness: bpsp, the ordering x prompt ablation grid, per-symbol
//! distribution traces and external codec comparison.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;

use crate::coder::quantize_cdf;
use crate::container::{compress, decompress, CodecConfig};
use crate::error::{Error, Result};
use crate::image::{flatten, partition, ImageBuffer, OrderingMode};
use crate::pnm;
use crate::provider::ProbabilityProvider;
use crate::token::PromptConfig;

/// Published 8B-model results kept for context in reports. Nothing is
/// asserted against them; reproducing them needs a fine-tuned large model and
/// the full datasets.
pub const REFERENCE_BPSP: [(&str, f64); 2] = [("Kodak", 2.83), ("CLIC.m", 2.08)];

/// Bits per subpixel.
pub fn bpsp(bits: u64, width: u32, height: u32, channels: u8) -> Result<f64> {
    let subpixels = width as u64 * height as u64 * channels as u64;
    if subpixels == 0 {
        return Err(Error::InvalidInput(format!(
            "bpsp of an empty {width}x{height}x{channels} image"
        )));
    }
    Ok(bits as f64 / subpixels as f64)
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridCell {
    pub mode: OrderingMode,
    pub prompt: bool,
}

impl GridCell {
    pub fn label(&self) -> String {
        format!(
            "{}/{}",
            self.mode,
            if self.prompt { "prompt" } else { "no-prompt" }
        )
    }

    pub fn prompt_config(&self) -> PromptConfig {
        if self.prompt {
            PromptConfig::default_for(self.mode)
        } else {
            PromptConfig::disabled()
        }
    }
}

/// The four ordering x prompt cells, independent first.
pub fn ablation_grid() -> Vec<GridCell> {
    let mut cells = Vec::new();
    for mode in [OrderingMode::ChannelIndependent, OrderingMode::ChannelJoint] {
        for prompt in [false, true] {
            cells.push(GridCell { mode, prompt });
        }
    }
    cells
}

/// Parses a grid spec: `all`, or a comma list of `mode/prompt` cells such as
/// `joint/prompt,indep/no-prompt`.
pub fn parse_grid(spec: &str) -> Result<Vec<GridCell>> {
    if spec == "all" {
        return Ok(ablation_grid());
    }
    spec.split(',')
        .map(|cell| {
            let (mode, prompt) = cell.split_once('/').ok_or_else(|| {
                Error::Config(format!("grid cell `{cell}` should look like joint/prompt"))
            })?;
            let prompt = match prompt {
                "prompt" | "on" => true,
                "no-prompt" | "off" => false,
                other => return Err(Error::Config(format!("unknown prompt setting `{other}`"))),
            };
            Ok(GridCell {
                mode: mode.parse()?,
                prompt,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub image: String,
    pub provider: String,
    pub config: String,
    pub bpsp_payload: f64,
    pub bpsp_total: f64,
    pub encode_seconds: f64,
    pub decode_seconds: f64,
    pub lossless: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalRow {
    pub image: String,
    pub codec: String,
    pub bytes: u64,
    pub bpsp: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub external: Vec<ExternalRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigMean {
    pub provider: String,
    pub config: String,
    pub images: usize,
    pub bpsp_payload: f64,
    pub bpsp_total: f64,
    pub encode_seconds: f64,
    pub decode_seconds: f64,
}

impl BenchReport {
    /// True when every row was verified lossless.
    pub fn is_valid(&self) -> bool {
        self.rows.iter().all(|r| r.lossless)
    }

    /// Mean per (provider, config), in first-seen order.
    pub fn means(&self) -> Vec<ConfigMean> {
        let mut out: Vec<ConfigMean> = Vec::new();
        for r in &self.rows {
            let idx = match out
                .iter()
                .position(|m| m.provider == r.provider && m.config == r.config)
            {
                Some(i) => i,
                None => {
                    out.push(ConfigMean {
                        provider: r.provider.clone(),
                        config: r.config.clone(),
                        images: 0,
                        bpsp_payload: 0.0,
                        bpsp_total: 0.0,
                        encode_seconds: 0.0,
                        decode_seconds: 0.0,
                    });
                    out.len() - 1
                }
            };
            let m = &mut out[idx];
            m.images += 1;
            m.bpsp_payload += r.bpsp_payload;
            m.bpsp_total += r.bpsp_total;
            m.encode_seconds += r.encode_seconds;
            m.decode_seconds += r.decode_seconds;
        }
        for m in &mut out {
            let n = m.images as f64;
            m.bpsp_payload /= n;
            m.bpsp_total /= n;
            m.encode_seconds /= n;
            m.decode_seconds /= n;
        }
        out
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record([
            "image",
            "provider",
            "config",
            "bpsp_payload",
            "bpsp_total",
            "encode_seconds",
            "decode_seconds",
            "lossless",
        ])
        .map_err(csv_err)?;
        for r in &self.rows {
            csv.write_record([
                r.image.clone(),
                r.provider.clone(),
                r.config.clone(),
                format!("{:.6}", r.bpsp_payload),
                format!("{:.6}", r.bpsp_total),
                format!("{:.6}", r.encode_seconds),
                format!("{:.6}", r.decode_seconds),
                r.lossless.to_string(),
            ])
            .map_err(csv_err)?;
        }
        for r in &self.external {
            csv.write_record([
                r.image.clone(),
                format!("external:{}", r.codec),
                String::new(),
                format!("{:.6}", r.bpsp),
                format!("{:.6}", r.bpsp),
                String::new(),
                String::new(),
                String::new(),
            ])
            .map_err(csv_err)?;
        }
        csv.flush()?;
        Ok(())
    }

    /// Human-readable summary: one line per config with mean bpsp, then
    /// external codecs and the reference constants.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<24} {:<22} {:>6} {:>12} {:>12} {:>10} {:>10}",
            "provider", "config", "images", "bpsp payload", "bpsp total", "enc s", "dec s"
        );
        for m in self.means() {
            let _ = writeln!(
                s,
                "{:<24} {:<22} {:>6} {:>12.4} {:>12.4} {:>10.4} {:>10.4}",
                m.provider,
                m.config,
                m.images,
                m.bpsp_payload,
                m.bpsp_total,
                m.encode_seconds,
                m.decode_seconds
            );
        }
        if !self.external.is_empty() {
            let _ = writeln!(s, "\nexternal codecs");
            let mut codecs: Vec<&str> = self.external.iter().map(|r| r.codec.as_str()).collect();
            codecs.dedup();
            for codec in codecs {
                let rows: Vec<_> = self.external.iter().filter(|r| r.codec == codec).collect();
                let mean = rows.iter().map(|r| r.bpsp).sum::<f64>() / rows.len() as f64;
                let _ = writeln!(s, "{codec:<24} {:>6} images {mean:>10.4} bpsp", rows.len());
            }
        }
        let _ = writeln!(
            s,
            "\nreference (8B fine-tuned model, full datasets; not reproduced):"
        );
        for (name, v) in REFERENCE_BPSP {
            let _ = writeln!(s, "  {name:<8} {v:.2} bpsp");
        }
        let _ = writeln!(
            s,
            "status: {}",
            if self.is_valid() {
                "valid, every cell verified lossless"
            } else {
                "INVALID"
            }
        );
        s
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Benchmark parameters shared by every grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    pub patch: u32,
    pub precision: u32,
    pub workers: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        let base = CodecConfig::default();
        Self {
            patch: base.patch_w,
            precision: base.precision,
            workers: base.workers,
        }
    }
}

/// Compresses and decompresses every image under every (provider, cell).
/// The first compression of each image is a discarded warm-up. Any cell that
/// does not round-trip aborts with a harness error naming it.
pub fn run_ablation(
    corpus: &[(String, ImageBuffer)],
    providers: &[&dyn ProbabilityProvider],
    grid: &[GridCell],
    options: BenchOptions,
) -> Result<BenchReport> {
    let mut report = BenchReport::default();
    for (name, image) in corpus {
        let mut warmed = false;
        for provider in providers {
            for cell in grid {
                let config = CodecConfig::new(cell.mode)
                    .with_patch(options.patch)
                    .with_prompt(cell.prompt_config())
                    .with_precision(options.precision)
                    .with_workers(options.workers);
                if !warmed {
                    compress(image, *provider, &config)?;
                    warmed = true;
                }
                let t = Instant::now();
                let container = compress(image, *provider, &config)?;
                let encode_seconds = t.elapsed().as_secs_f64();
                let bytes = container.to_bytes();
                let t = Instant::now();
                let decoded = crate::container::CompressedContainer::from_bytes(&bytes)
                    .and_then(|c| decompress(&c, *provider, options.workers));
                let decode_seconds = t.elapsed().as_secs_f64();
                let lossless = matches!(&decoded, Ok(img) if img == image);
                if !lossless {
                    return Err(Error::Harness(format!(
                        "{name}: {} {} did not round-trip ({})",
                        provider.name(),
                        cell.label(),
                        match decoded {
                            Ok(_) => "samples differ".to_string(),
                            Err(e) => e.to_string(),
                        }
                    )));
                }
                let (w, h, c) = (image.width(), image.height(), image.channels());
                let row = BenchRow {
                    image: name.clone(),
                    provider: provider.name(),
                    config: cell.label(),
                    bpsp_payload: bpsp(container.payload_bits(), w, h, c)?,
                    bpsp_total: bpsp(bytes.len() as u64 * 8, w, h, c)?,
                    encode_seconds,
                    decode_seconds,
                    lossless,
                };
                info!(
                    "{} {} {}: {:.4} bpsp",
                    row.image, row.provider, row.config, row.bpsp_payload
                );
                report.rows.push(row);
            }
        }
    }
    Ok(report)
}

/// Per-symbol view of one coded sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    /// Sequence within the patch (channel under channel-independent order).
    pub sequence: usize,
    pub position: usize,
    pub symbol: u8,
    pub argmax: u8,
    /// `-log2 p(symbol)` under the provider's PMF.
    pub bits_model: f64,
    /// `-log2 q(symbol)` under the quantized CDF actually coded with.
    pub bits_coded: f64,
    pub pmf: Box<[f64; 256]>,
}

/// Replays the encoder for one patch and records every prediction.
pub fn dump_distribution_trace(
    image: &ImageBuffer,
    provider: &dyn ProbabilityProvider,
    config: &CodecConfig,
    patch_index: usize,
) -> Result<Vec<TraceRecord>> {
    let patches = partition(image, config.patch_w, config.patch_h)?;
    let patch = patches.get(patch_index).ok_or_else(|| {
        Error::InvalidInput(format!(
            "patch index {patch_index} out of range, image has {} patches",
            patches.len()
        ))
    })?;
    let mut out = Vec::new();
    for (k, seq) in flatten(image, patch, config.mode)?.iter().enumerate() {
        let mut session = provider.begin(&config.prompt, config.mode, seq.channel)?;
        for (position, &symbol) in seq.symbols.iter().enumerate() {
            let pmf = session.next_pmf()?;
            let cdf = quantize_cdf(&pmf, config.precision)?;
            out.push(TraceRecord {
                sequence: k,
                position,
                symbol,
                argmax: pmf.argmax(),
                bits_model: -pmf.get(symbol).log2(),
                bits_coded: cdf.cost_bits(symbol),
                pmf: Box::new(*pmf.probabilities()),
            });
            session.observe(symbol);
        }
    }
    Ok(out)
}

pub fn write_trace_csv<W: Write>(records: &[TraceRecord], w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    let mut header = vec![
        "sequence".to_string(),
        "position".to_string(),
        "symbol".to_string(),
        "argmax".to_string(),
        "bits_model".to_string(),
        "bits_coded".to_string(),
    ];
    header.extend((0..256).map(|z| format!("p{z}")));
    csv.write_record(&header).map_err(csv_err)?;
    for r in records {
        let mut row = vec![
            r.sequence.to_string(),
            r.position.to_string(),
            r.symbol.to_string(),
            r.argmax.to_string(),
            format!("{:.9}", r.bits_model),
            format!("{:.9}", r.bits_coded),
        ];
        row.extend(r.pmf.iter().map(|p| format!("{p:e}")));
        csv.write_record(&row).map_err(csv_err)?;
    }
    csv.flush()?;
    Ok(())
}

/// An external encoder invoked through its command line. `{ppm}`, `{png}`
/// and `{out}` in `args` are replaced by the input and output paths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalCodec {
    pub name: String,
    pub program: String,
    pub args: Vec<String>,
}

impl ExternalCodec {
    pub fn new(name: &str, program: &str, args: &[&str]) -> Self {
        Self {
            name: name.into(),
            program: program.into(),
            args: args.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Stock lossless settings for common codec binaries.
    pub fn defaults() -> Vec<Self> {
        vec![
            Self::new(
                "png",
                "optipng",
                &["-quiet", "-o2", "{png}", "-out", "{out}"],
            ),
            Self::new(
                "webp",
                "cwebp",
                &["-quiet", "-lossless", "-z", "9", "{png}", "-o", "{out}"],
            ),
            Self::new("flif", "flif", &["-e", "{png}", "{out}"]),
            Self::new("jpeg-xl", "cjxl", &["--quiet", "-d", "0", "{png}", "{out}"]),
        ]
    }

    pub fn is_available(&self) -> bool {
        find_program(&self.program).is_some()
    }
}

fn find_program(program: &str) -> Option<PathBuf> {
    let path = Path::new(program);
    if path.components().count() > 1 {
        return path.is_file().then(|| path.to_path_buf());
    }
    std::env::var_os("PATH").and_then(|paths| {
        std::env::split_paths(&paths)
            .map(|dir| dir.join(program))
            .find(|p| p.is_file())
    })
}

/// Runs each available codec on each image and records the output size.
/// Missing binaries are skipped with a warning; failed runs produce no row.
pub fn compare_external(
    corpus: &[(String, ImageBuffer)],
    codecs: &[ExternalCodec],
) -> Result<Vec<ExternalRow>> {
    let available: Vec<&ExternalCodec> = codecs
        .iter()
        .filter(|c| {
            let ok = c.is_available();
            if !ok {
                warn!(
                    "external codec {} skipped: `{}` not found",
                    c.name, c.program
                );
            }
            ok
        })
        .collect();
    let mut rows = Vec::new();
    if available.is_empty() {
        return Ok(rows);
    }
    static RUNS: AtomicUsize = AtomicUsize::new(0);
    let dir = std::env::temp_dir().join(format!(
        "p2codec-ext-{}-{}",
        std::process::id(),
        RUNS.fetch_add(1, Ordering::Relaxed)
    ));
    fs::create_dir_all(&dir)?;
    for (name, image) in corpus {
        let ppm = dir.join("input.pnm");
        let png = dir.join("input.png");
        pnm::write(&ppm, image)?;
        fs::write(&png, encode_png(image)?)?;
        for codec in &available {
            let out = dir.join(format!("output.{}", codec.name));
            let _ = fs::remove_file(&out);
            let args: Vec<String> = codec
                .args
                .iter()
                .map(|a| {
                    a.replace("{ppm}", &ppm.to_string_lossy())
                        .replace("{png}", &png.to_string_lossy())
                        .replace("{out}", &out.to_string_lossy())
                })
                .collect();
            let status = Command::new(&codec.program).args(&args).status();
            match (status, fs::metadata(&out)) {
                (Ok(s), Ok(meta)) if s.success() => {
                    let bytes = meta.len();
                    rows.push(ExternalRow {
                        image: name.clone(),
                        codec: codec.name.clone(),
                        bytes,
                        bpsp: bpsp(bytes * 8, image.width(), image.height(), image.channels())?,
                    });
                }
                (status, _) => warn!("{} failed on {name}: {status:?}", codec.name),
            }
        }
    }
    let _ = fs::remove_dir_all(&dir);
    Ok(rows)
}

/// PNG bytes for feeding external tools.
pub fn encode_png(image: &ImageBuffer) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width(), image.height());
        enc.set_color(if image.channels() == 3 {
            png::ColorType::Rgb
        } else {
            png::ColorType::Grayscale
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::InvalidInput(format!("png encode: {e}")))?;
        writer
            .write_image_data(image.samples())
            .map_err(|e| Error::InvalidInput(format!("png encode: {e}")))?;
    }
    Ok(out)
}

/// Decodes a PNG to 8-bit gray or RGB. Alpha channels are dropped.
pub fn decode_png(path: &Path) -> Result<ImageBuffer> {
    let bad = |e: png::DecodingError| Error::InvalidInput(format!("{}: {e}", path.display()));
    let mut decoder = png::Decoder::new(BufReader::new(fs::File::open(path)?));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::InvalidInput(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf).map_err(bad)?;
    buf.truncate(frame.buffer_size());
    let (src, keep) = match frame.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => {
            return Err(Error::InvalidInput(format!(
                "{}: palette not expanded",
                path.display()
            )))
        }
    };
    let samples = if src == keep {
        buf
    } else {
        buf.chunks_exact(src)
            .flat_map(|px| px[..keep].to_vec())
            .collect()
    };
    ImageBuffer::new(frame.width, frame.height, keep as u8, samples)
}

/// Reads an image by extension: `.ppm`/`.pgm`/`.pnm` or `.png`.
pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => decode_png(path),
        _ => pnm::read(path),
    }
}

/// Every PPM/PGM/PNM/PNG file directly inside `dir`, sorted by name.
pub fn load_corpus(dir: &Path) -> Result<Vec<(String, ImageBuffer)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension()
                        .and_then(|e| e.to_str())
                        .map(str::to_ascii_lowercase)
                        .as_deref(),
                    Some("ppm" | "pgm" | "pnm" | "png")
                )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no images found in {}",
            dir.display()
        )));
    }
    paths
        .par_iter()
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            Ok((name, load_image(p)?))
        })
        .collect()
}
