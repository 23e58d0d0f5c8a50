use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use p2codec::bench::{self, BenchOptions, ExternalCodec};
use p2codec::container::{compress, decompress, CodecConfig, CompressedContainer};
use p2codec::image::{ImageBuffer, OrderingMode};
use p2codec::pnm::{self, RawGeometry};
use p2codec::provider::server::{serve_stdio, serve_tcp, BuiltinBackend};
use p2codec::provider::{self, AdaptiveModel, ProbabilityProvider};
use p2codec::token::PromptConfig;

#[derive(Parser)]
#[command(
    name = "p2codec",
    version,
    about = "Lossless image codec driven by next-subpixel prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compress an image and verify the result decodes to the same samples.
    Compress {
        input: PathBuf,
        output: PathBuf,
        #[command(flatten)]
        codec: CodecArgs,
        /// Read headerless samples with this geometry, e.g. 64x48x3.
        #[arg(long)]
        raw: Option<RawGeometry>,
    },
    /// Decompress a container to PPM/PGM (or raw samples for a .raw output).
    Decompress {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value = "builtin:order1")]
        provider: String,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run the ordering x prompt grid over a directory of images.
    Bench {
        corpus: PathBuf,
        /// Provider spec; repeat for several. Defaults to builtin orders 0-2.
        #[arg(long)]
        provider: Vec<String>,
        /// `all` or a comma list of cells like `joint/prompt,indep/no-prompt`.
        #[arg(long, default_value = "all")]
        grid: String,
        #[arg(long, default_value_t = 16)]
        patch: u32,
        #[arg(long, default_value_t = 16)]
        precision: u32,
        #[arg(long)]
        workers: Option<usize>,
        /// Write per-image rows here.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Also run external codec binaries found on PATH.
        #[arg(long)]
        external: bool,
    },
    /// Dump every prediction made while coding one patch.
    Trace {
        input: PathBuf,
        #[arg(long)]
        patch_index: usize,
        #[arg(long)]
        csv: PathBuf,
        #[command(flatten)]
        codec: CodecArgs,
        #[arg(long)]
        raw: Option<RawGeometry>,
    },
    /// Serve the builtin adaptive model over the remote provider protocol.
    ServeBuiltin(ServeArgs),
}

#[derive(Args, Clone)]
struct CodecArgs {
    #[arg(long, default_value = "builtin:order1")]
    provider: String,
    #[arg(long, value_enum, default_value_t = Mode::Joint)]
    mode: Mode,
    #[arg(long, default_value_t = 16)]
    patch: u32,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    prompt: Switch,
    /// Replace the stock prompt text.
    #[arg(long)]
    prompt_text: Option<String>,
    #[arg(long, default_value_t = 16)]
    precision: u32,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct ServeArgs {
    /// Address to listen on, e.g. 127.0.0.1:7070.
    #[arg(long, conflicts_with = "stdio")]
    listen: Option<String>,
    /// Serve one client on stdin/stdout.
    #[arg(long)]
    stdio: bool,
    #[arg(long, default_value_t = 1)]
    order: u8,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1024)]
    vocab: u32,
    #[arg(long, default_value_t = 300)]
    offset: u32,
    #[arg(long, default_value_t = 2)]
    stride: u32,
    #[arg(long, default_value_t = 4096)]
    window: u32,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Joint,
    Indep,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl CodecArgs {
    fn config(&self) -> CodecConfig {
        let mode = match self.mode {
            Mode::Joint => OrderingMode::ChannelJoint,
            Mode::Indep => OrderingMode::ChannelIndependent,
        };
        let prompt = match (self.prompt, &self.prompt_text) {
            (Switch::Off, _) => PromptConfig::disabled(),
            (Switch::On, Some(text)) => PromptConfig::custom(text.clone()),
            (Switch::On, None) => PromptConfig::default_for(mode),
        };
        let mut config = CodecConfig::new(mode)
            .with_patch(self.patch)
            .with_prompt(prompt)
            .with_precision(self.precision);
        if let Some(w) = self.workers {
            config = config.with_workers(w);
        }
        config
    }
}

fn load_input(path: &Path, raw: Option<RawGeometry>) -> Result<ImageBuffer> {
    let image = match raw {
        Some(g) => pnm::decode_raw(&fs::read(path)?, g)?,
        None => bench::load_image(path)?,
    };
    Ok(image)
}

fn connect(spec: &str) -> Result<Arc<dyn ProbabilityProvider>> {
    provider::from_spec(spec).with_context(|| format!("cannot set up provider `{spec}`"))
}

fn default_workers() -> usize {
    CodecConfig::default().workers
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Compress {
            input,
            output,
            codec,
            raw,
        } => {
            let image = load_input(&input, raw)?;
            let provider = connect(&codec.provider)?;
            let config = codec.config();
            let container = compress(&image, provider.as_ref(), &config)?;
            let bytes = container.to_bytes();
            let check = CompressedContainer::from_bytes(&bytes)
                .and_then(|c| decompress(&c, provider.as_ref(), config.workers))?;
            if check != image {
                bail!("verification failed: decoded samples differ from the input");
            }
            fs::write(&output, &bytes).with_context(|| format!("writing {}", output.display()))?;
            let (w, h, c) = (image.width(), image.height(), image.channels());
            println!(
                "{} -> {}: {} bytes, {:.4} bpsp payload, {:.4} bpsp total (verified)",
                input.display(),
                output.display(),
                bytes.len(),
                bench::bpsp(container.payload_bits(), w, h, c)?,
                bench::bpsp(bytes.len() as u64 * 8, w, h, c)?
            );
        }
        Cmd::Decompress {
            input,
            output,
            provider,
            workers,
        } => {
            let bytes = fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let container = CompressedContainer::from_bytes(&bytes)?;
            let provider = connect(&provider)?;
            let image = decompress(
                &container,
                provider.as_ref(),
                workers.unwrap_or_else(default_workers),
            )?;
            let is_raw = output.extension().is_some_and(|e| e == "raw");
            let data = if is_raw {
                image.samples().to_vec()
            } else {
                pnm::encode(&image)
            };
            fs::write(&output, data).with_context(|| format!("writing {}", output.display()))?;
            println!(
                "{} -> {}: {}x{}x{}",
                input.display(),
                output.display(),
                image.width(),
                image.height(),
                image.channels()
            );
        }
        Cmd::Bench {
            corpus,
            provider,
            grid,
            patch,
            precision,
            workers,
            csv,
            external,
        } => {
            let images = bench::load_corpus(&corpus)?;
            let specs = if provider.is_empty() {
                vec![
                    "builtin:order0".into(),
                    "builtin:order1".into(),
                    "builtin:order2".into(),
                ]
            } else {
                provider
            };
            let providers = specs
                .iter()
                .map(|s| connect(s))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&dyn ProbabilityProvider> =
                providers.iter().map(|p| p.as_ref()).collect();
            let options = BenchOptions {
                patch,
                precision,
                workers: workers.unwrap_or_else(default_workers),
            };
            info!("benchmarking {} images", images.len());
            let mut report =
                bench::run_ablation(&images, &refs, &bench::parse_grid(&grid)?, options)?;
            if external {
                report.external = bench::compare_external(&images, &ExternalCodec::defaults())?;
            }
            if let Some(path) = csv {
                report.write_csv(
                    fs::File::create(&path)
                        .with_context(|| format!("creating {}", path.display()))?,
                )?;
            }
            print!("{}", report.table());
            if !report.is_valid() {
                bail!("report contains unverified cells");
            }
        }
        Cmd::Trace {
            input,
            patch_index,
            csv,
            codec,
            raw,
        } => {
            let image = load_input(&input, raw)?;
            let provider = connect(&codec.provider)?;
            let records = bench::dump_distribution_trace(
                &image,
                provider.as_ref(),
                &codec.config(),
                patch_index,
            )?;
            bench::write_trace_csv(
                &records,
                fs::File::create(&csv).with_context(|| format!("creating {}", csv.display()))?,
            )?;
            let bits: f64 = records.iter().map(|r| r.bits_coded).sum();
            println!(
                "{} symbols, {:.1} ideal coded bits -> {}",
                records.len(),
                bits,
                csv.display()
            );
        }
        Cmd::ServeBuiltin(args) => {
            let backend = BuiltinBackend {
                model: AdaptiveModel::new(args.order, args.alpha)?,
                vocab_size: args.vocab,
                offset: args.offset,
                stride: args.stride,
                context_window: args.window,
                deterministic: true,
            };
            if args.stdio {
                serve_stdio(&backend)?;
            } else {
                let addr = args.listen.unwrap_or_else(|| "127.0.0.1:7070".into());
                let listener =
                    TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
                eprintln!(
                    "serving builtin order-{} model on {}",
                    args.order,
                    listener.local_addr()?
                );
                serve_tcp(listener, Arc::new(backend))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
