//! The `.p2lc` container and the patch-parallel compress/decompress pipeline.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "P2LC" | version u8 | width u32 | height u32 | channels u8
//! patch_w u16 | patch_h u16 | ordering u8 | precision u8
//! provider fingerprint u64 | token map fingerprint u64
//! prompt: len u32 + UTF-8 (empty = disabled)
//! patch count u32 | bit length u32 per coded sequence
//! payloads, each padded to whole bytes, in raster patch order
//! ```
//!
//! Under channel-independent ordering each patch has one sequence per
//! channel, in R, G, B order. Format version 1 places symbol tokens
//! back-to-back with no separator tokens.

use log::debug;
use rayon::prelude::*;

use crate::coder::{check_precision, quantize_cdf, Bitstream, RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::image::{
    flatten_block, partition, partition_dims, unflatten, ImageBuffer, OrderingMode, PatchSpec,
    SymbolSequence,
};
use crate::provider::ProbabilityProvider;
use crate::token::PromptConfig;

pub const MAGIC: &[u8; 4] = b"P2LC";
pub const FORMAT_VERSION: u8 = 1;
pub const DEFAULT_PATCH: u32 = 16;
pub const FILE_EXTENSION: &str = "p2lc";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContainerHeader {
    pub version: u8,
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub patch_w: u16,
    pub patch_h: u16,
    pub ordering: OrderingMode,
    pub precision: u8,
    pub provider_fingerprint: u64,
    pub map_fingerprint: u64,
    pub prompt: PromptConfig,
    pub patch_count: u32,
    /// One entry per coded sequence, patch-major.
    pub bit_lengths: Vec<u32>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptContainer(msg.into())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt(format!("header truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl ContainerHeader {
    pub fn sequences_per_patch(&self) -> usize {
        self.ordering.sequences_per_patch(self.channels)
    }

    pub fn serialize(&self) -> Vec<u8> {
        let prompt = self.prompt.header_text().as_bytes();
        let mut out = Vec::with_capacity(48 + prompt.len() + 4 * self.bit_lengths.len());
        out.extend_from_slice(MAGIC);
        out.push(self.version);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.push(self.channels);
        out.extend_from_slice(&self.patch_w.to_le_bytes());
        out.extend_from_slice(&self.patch_h.to_le_bytes());
        out.push(self.ordering.tag());
        out.push(self.precision);
        out.extend_from_slice(&self.provider_fingerprint.to_le_bytes());
        out.extend_from_slice(&self.map_fingerprint.to_le_bytes());
        out.extend_from_slice(&(prompt.len() as u32).to_le_bytes());
        out.extend_from_slice(prompt);
        out.extend_from_slice(&self.patch_count.to_le_bytes());
        for b in &self.bit_lengths {
            out.extend_from_slice(&b.to_le_bytes());
        }
        out
    }

    /// Parses and validates a header; returns it with its byte length.
    pub fn parse(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut c = Cursor { buf: bytes, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(corrupt("bad magic, not a P2LC container"));
        }
        let version = c.u8()?;
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let width = c.u32()?;
        let height = c.u32()?;
        let channels = c.u8()?;
        if width == 0 || height == 0 {
            return Err(corrupt(format!("empty image {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(corrupt(format!("unsupported channel count {channels}")));
        }
        let patch_w = c.u16()?;
        let patch_h = c.u16()?;
        if patch_w == 0 || patch_h == 0 {
            return Err(corrupt("zero patch size"));
        }
        let ordering =
            OrderingMode::from_tag(c.u8()?).ok_or_else(|| corrupt("unknown ordering mode tag"))?;
        let precision = c.u8()?;
        check_precision(precision as u32).map_err(|e| corrupt(e.to_string()))?;
        let provider_fingerprint = c.u64()?;
        let map_fingerprint = c.u64()?;
        let prompt_len = c.u32()? as usize;
        let prompt =
            std::str::from_utf8(c.take(prompt_len)?).map_err(|_| corrupt("prompt is not UTF-8"))?;
        let prompt = PromptConfig::from_header_text(prompt);
        let patch_count_field = c.u32()?;
        let expected = (width.div_ceil(patch_w as u32) as u64)
            .saturating_mul(height.div_ceil(patch_h as u32) as u64);
        if patch_count_field as u64 != expected {
            return Err(corrupt(format!(
                "header lists {patch_count_field} patches, geometry gives {expected}"
            )));
        }
        let seqs = expected as usize * ordering.sequences_per_patch(channels);
        if seqs > c.buf.len() / 4 {
            return Err(corrupt("bit length table truncated"));
        }
        let bit_lengths = (0..seqs).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let header = Self {
            version,
            width,
            height,
            channels,
            patch_w,
            patch_h,
            ordering,
            precision,
            provider_fingerprint,
            map_fingerprint,
            prompt,
            patch_count: patch_count_field,
            bit_lengths,
        };
        Ok((header, c.pos))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedContainer {
    pub header: ContainerHeader,
    /// One bitstream per entry of `header.bit_lengths`.
    pub payloads: Vec<Bitstream>,
}

impl CompressedContainer {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header.serialize();
        for p in &self.payloads {
            out.extend_from_slice(&p.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, mut pos) = ContainerHeader::parse(bytes)?;
        let mut payloads = Vec::with_capacity(header.bit_lengths.len());
        for &bits in &header.bit_lengths {
            let n = (bits as usize).div_ceil(8);
            let chunk = bytes
                .get(pos..pos + n)
                .ok_or_else(|| corrupt("payload shorter than the header's bit lengths"))?;
            payloads.push(
                Bitstream::from_parts(chunk.to_vec(), bits as u64)
                    .map_err(|e| corrupt(e.to_string()))?,
            );
            pos += n;
        }
        if pos != bytes.len() {
            return Err(corrupt(format!(
                "{} bytes after the last payload",
                bytes.len() - pos
            )));
        }
        Ok(Self { header, payloads })
    }

    /// Coded payload bits, excluding header and padding.
    pub fn payload_bits(&self) -> u64 {
        self.header.bit_lengths.iter().map(|&b| b as u64).sum()
    }

    /// Size of the serialized container in bits.
    pub fn total_bits(&self) -> u64 {
        let payload: usize = self.payloads.iter().map(|p| p.bytes.len()).sum();
        (self.header.serialize().len() + payload) as u64 * 8
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodecConfig {
    pub mode: OrderingMode,
    pub patch_w: u32,
    pub patch_h: u32,
    pub prompt: PromptConfig,
    pub precision: u32,
    /// Upper bound on worker threads; the output does not depend on it.
    pub workers: usize,
}

impl CodecConfig {
    /// 16x16 patches, the stock prompt for `mode`, 16-bit CDFs, one worker
    /// per available core.
    pub fn new(mode: OrderingMode) -> Self {
        Self {
            mode,
            patch_w: DEFAULT_PATCH,
            patch_h: DEFAULT_PATCH,
            prompt: PromptConfig::default_for(mode),
            precision: crate::coder::DEFAULT_PRECISION,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }

    pub fn with_patch(mut self, size: u32) -> Self {
        self.patch_w = size;
        self.patch_h = size;
        self
    }

    pub fn with_prompt(mut self, prompt: PromptConfig) -> Self {
        self.prompt = prompt;
        self
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    pub fn with_precision(mut self, precision: u32) -> Self {
        self.precision = precision;
        self
    }

    fn validate(&self) -> Result<()> {
        check_precision(self.precision)?;
        for (name, v) in [("width", self.patch_w), ("height", self.patch_h)] {
            if v == 0 || v > u16::MAX as u32 {
                return Err(Error::Config(format!("patch {name} {v} outside 1..=65535")));
            }
        }
        if self.workers == 0 {
            return Err(Error::Config("worker budget must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self::new(OrderingMode::ChannelJoint)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecutionPlan {
    pub patches: usize,
    pub workers: usize,
}

/// Patches are independent, so the plan only caps the worker count.
pub fn schedule_patches(patches: usize, worker_budget: usize) -> Result<ExecutionPlan> {
    if worker_budget == 0 {
        return Err(Error::Config("worker budget must be at least 1".into()));
    }
    Ok(ExecutionPlan {
        patches,
        workers: worker_budget.min(patches).max(1),
    })
}

/// Runs `job` over every patch under `plan`; results come back in input order.
fn run_plan<T, F>(plan: ExecutionPlan, patches: &[PatchSpec], job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &PatchSpec) -> Result<T> + Sync,
{
    if plan.workers <= 1 {
        return patches.iter().enumerate().map(|(i, p)| job(i, p)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        patches
            .par_iter()
            .enumerate()
            .map(|(i, p)| job(i, p))
            .collect()
    })
}

fn channel_of(mode: OrderingMode, k: usize) -> Option<u8> {
    match mode {
        OrderingMode::ChannelJoint => None,
        OrderingMode::ChannelIndependent => Some(k as u8),
    }
}

fn encode_sequence(
    provider: &dyn ProbabilityProvider,
    config: &CodecConfig,
    seq: &SymbolSequence,
) -> Result<Bitstream> {
    let mut session = provider.begin(&config.prompt, config.mode, seq.channel)?;
    let mut enc = RangeEncoder::new();
    for &s in &seq.symbols {
        let cdf = quantize_cdf(&session.next_pmf()?, config.precision)?;
        enc.encode(&cdf, s);
        session.observe(s);
    }
    Ok(enc.finish())
}

/// Checks prompt plus longest sequence against the provider's window.
fn check_context(
    provider: &dyn ProbabilityProvider,
    prompt: &PromptConfig,
    mode: OrderingMode,
    channels: u8,
    patches: &[PatchSpec],
) -> Result<()> {
    let longest = patches.iter().map(|p| p.pixel_count()).max().unwrap_or(0);
    let seq_len = mode.sequence_len(longest, channels);
    let window = provider.context_window();
    for k in 0..mode.sequences_per_patch(channels) {
        let needed = provider.prompt_tokens(prompt, mode, channel_of(mode, k))? + seq_len;
        if needed > window {
            return Err(Error::ContextOverflow { needed, window });
        }
    }
    Ok(())
}

pub fn compress(
    image: &ImageBuffer,
    provider: &dyn ProbabilityProvider,
    config: &CodecConfig,
) -> Result<CompressedContainer> {
    config.validate()?;
    if !provider.is_deterministic() {
        return Err(Error::Config(format!(
            "{} is not deterministic; decoding could not reproduce its distributions",
            provider.name()
        )));
    }
    let patches = partition(image, config.patch_w, config.patch_h)?;
    check_context(
        provider,
        &config.prompt,
        config.mode,
        image.channels(),
        &patches,
    )?;
    let plan = schedule_patches(patches.len(), config.workers)?;
    debug!(
        "compressing {}x{}x{} as {} patches on {} workers",
        image.width(),
        image.height(),
        image.channels(),
        patches.len(),
        plan.workers
    );
    let coded = run_plan(plan, &patches, |_, patch| {
        let block = image.read_patch(patch)?;
        flatten_block(&block, image.channels(), config.mode)
            .iter()
            .map(|seq| encode_sequence(provider, config, seq))
            .collect::<Result<Vec<_>>>()
    })?;
    let payloads: Vec<Bitstream> = coded.into_iter().flatten().collect();
    let bit_lengths = payloads
        .iter()
        .map(|p| {
            u32::try_from(p.bit_length)
                .map_err(|_| Error::Config("a patch coded to more than 2^32 bits".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let header = ContainerHeader {
        version: FORMAT_VERSION,
        width: image.width(),
        height: image.height(),
        channels: image.channels(),
        patch_w: config.patch_w as u16,
        patch_h: config.patch_h as u16,
        ordering: config.mode,
        precision: config.precision as u8,
        provider_fingerprint: provider.fingerprint(),
        map_fingerprint: provider.token_map().fingerprint(),
        prompt: config.prompt.clone(),
        patch_count: patches.len() as u32,
        bit_lengths,
    };
    Ok(CompressedContainer { header, payloads })
}

pub fn decompress(
    container: &CompressedContainer,
    provider: &dyn ProbabilityProvider,
    workers: usize,
) -> Result<ImageBuffer> {
    let h = &container.header;
    if h.provider_fingerprint != provider.fingerprint() {
        return Err(Error::WrongProvider(format!(
            "container was coded with model {:016x}, {} is {:016x}",
            h.provider_fingerprint,
            provider.name(),
            provider.fingerprint()
        )));
    }
    if h.map_fingerprint != provider.token_map().fingerprint() {
        return Err(Error::WrongProvider(format!(
            "container token map {:016x} differs from the provider's {:016x}",
            h.map_fingerprint,
            provider.token_map().fingerprint()
        )));
    }
    let patches = partition_dims(h.width, h.height, h.patch_w as u32, h.patch_h as u32)?;
    let per_patch = h.sequences_per_patch();
    if container.payloads.len() != patches.len() * per_patch
        || h.bit_lengths.len() != container.payloads.len()
    {
        return Err(corrupt(format!(
            "{} payloads for {} patches of {per_patch} sequence(s)",
            container.payloads.len(),
            patches.len()
        )));
    }
    for (p, &bits) in container.payloads.iter().zip(&h.bit_lengths) {
        if p.bit_length != bits as u64 || p.bytes.len() as u64 != p.bit_length.div_ceil(8) {
            return Err(corrupt("payload does not match its recorded bit length"));
        }
    }
    let plan = schedule_patches(patches.len(), workers)?;
    let blocks = run_plan(plan, &patches, |i, patch| {
        let seqs = (0..per_patch)
            .map(|k| {
                let bits = &container.payloads[i * per_patch + k];
                let channel = channel_of(h.ordering, k);
                let n = h.ordering.sequence_len(patch.pixel_count(), h.channels);
                let mut session = provider.begin(&h.prompt, h.ordering, channel)?;
                let mut dec = RangeDecoder::new(bits);
                let mut symbols = Vec::with_capacity(n);
                for _ in 0..n {
                    let cdf = quantize_cdf(&session.next_pmf()?, h.precision as u32)?;
                    let s = dec.decode(&cdf)?;
                    session.observe(s);
                    symbols.push(s);
                }
                dec.finish()?;
                Ok(SymbolSequence {
                    symbols,
                    ordering: h.ordering,
                    channel,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        unflatten(&seqs, patch, h.ordering, h.channels)
    })?;
    let mut image = ImageBuffer::blank(h.width, h.height, h.channels)?;
    for (patch, block) in patches.iter().zip(&blocks) {
        image.write_patch(patch, block)?;
    }
    Ok(image)
}
