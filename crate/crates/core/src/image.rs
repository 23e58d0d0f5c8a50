//! Image buffers, patch partitioning and symbol serialization.
//!
//! Patches are enumerated in raster order by their origin, and pixels inside a
//! patch are scanned row-major. Images whose sides are not multiples of the
//! patch size get smaller remainder patches on the right and bottom edges.

use crate::error::{Error, Result};

/// Raw 8-bit subpixel grid, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    channels: u8,
    samples: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, channels: u8, samples: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidInput(format!(
                "unsupported channel count {channels}, expected 1 or 3"
            )));
        }
        let expected = width as usize * height as usize * channels as usize;
        if samples.len() != expected {
            return Err(Error::InvalidInput(format!(
                "{}x{}x{} image needs {expected} samples, got {}",
                width,
                height,
                channels,
                samples.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            samples,
        })
    }

    /// Image with every sample set to zero.
    pub fn blank(width: u32, height: u32, channels: u8) -> Result<Self> {
        let len = width as usize * height as usize * channels as usize;
        Self::new(width, height, channels, vec![0; len])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn samples(&self) -> &[u8] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<u8> {
        self.samples
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Number of subpixels, `width * height * channels`.
    pub fn subpixel_count(&self) -> usize {
        self.samples.len()
    }

    #[inline]
    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * self.channels as usize
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let at = self.offset(x, y);
        &self.samples[at..at + self.channels as usize]
    }

    /// Copies the patch's samples into a contiguous row-major block.
    pub fn read_patch(&self, patch: &PatchSpec) -> Result<Vec<u8>> {
        patch.check_inside(self)?;
        let c = self.channels as usize;
        let mut block = Vec::with_capacity(patch.pixel_count() * c);
        for row in patch.y..patch.y + patch.h {
            let at = self.offset(patch.x, row);
            block.extend_from_slice(&self.samples[at..at + patch.w as usize * c]);
        }
        Ok(block)
    }

    /// Inverse of [`ImageBuffer::read_patch`].
    pub fn write_patch(&mut self, patch: &PatchSpec, block: &[u8]) -> Result<()> {
        patch.check_inside(self)?;
        let c = self.channels as usize;
        let row_len = patch.w as usize * c;
        if block.len() != row_len * patch.h as usize {
            return Err(Error::CorruptStream(format!(
                "patch block has {} samples, expected {}",
                block.len(),
                row_len * patch.h as usize
            )));
        }
        for (i, row) in block.chunks_exact(row_len).enumerate() {
            let at = self.offset(patch.x, patch.y + i as u32);
            self.samples[at..at + row_len].copy_from_slice(row);
        }
        Ok(())
    }
}

/// How subpixels are serialized into symbol sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OrderingMode {
    /// One sequence per patch, each pixel contributing R, G, B consecutively.
    ChannelJoint,
    /// One raster sequence per channel.
    ChannelIndependent,
}

impl OrderingMode {
    pub fn tag(self) -> u8 {
        match self {
            OrderingMode::ChannelJoint => 0,
            OrderingMode::ChannelIndependent => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(OrderingMode::ChannelJoint),
            1 => Some(OrderingMode::ChannelIndependent),
            _ => None,
        }
    }

    /// Number of coded sequences a patch produces under this mode.
    pub fn sequences_per_patch(self, channels: u8) -> usize {
        match self {
            OrderingMode::ChannelJoint => 1,
            OrderingMode::ChannelIndependent => channels as usize,
        }
    }

    /// Length of each sequence for a patch of `pixels` pixels.
    pub fn sequence_len(self, pixels: usize, channels: u8) -> usize {
        match self {
            OrderingMode::ChannelJoint => pixels * channels as usize,
            OrderingMode::ChannelIndependent => pixels,
        }
    }
}

impl std::fmt::Display for OrderingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OrderingMode::ChannelJoint => f.write_str("joint"),
            OrderingMode::ChannelIndependent => f.write_str("indep"),
        }
    }
}

impl std::str::FromStr for OrderingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" | "channel-joint" => Ok(OrderingMode::ChannelJoint),
            "indep" | "independent" | "channel-independent" => Ok(OrderingMode::ChannelIndependent),
            other => Err(Error::Config(format!("unknown ordering mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolSequence {
    pub symbols: Vec<u8>,
    pub ordering: OrderingMode,
    /// Present iff `ordering` is [`OrderingMode::ChannelIndependent`].
    pub channel: Option<u8>,
}

/// A rectangle of the image coded as one independent unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl PatchSpec {
    pub fn pixel_count(&self) -> usize {
        self.w as usize * self.h as usize
    }

    fn check_inside(&self, image: &ImageBuffer) -> Result<()> {
        let fits = self.w > 0
            && self.h > 0
            && self.x as u64 + self.w as u64 <= image.width as u64
            && self.y as u64 + self.h as u64 <= image.height as u64;
        if fits {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "patch {}x{}+{}+{} lies outside the {}x{} image",
                self.w, self.h, self.x, self.y, image.width, image.height
            )))
        }
    }
}

/// Number of patches a `width` x `height` image splits into.
pub fn patch_count(width: u32, height: u32, patch_w: u32, patch_h: u32) -> usize {
    if patch_w == 0 || patch_h == 0 {
        return 0;
    }
    width.div_ceil(patch_w) as usize * height.div_ceil(patch_h) as usize
}

/// Tiles the image into non-overlapping patches in raster order.
pub fn partition(image: &ImageBuffer, patch_w: u32, patch_h: u32) -> Result<Vec<PatchSpec>> {
    partition_dims(image.width, image.height, patch_w, patch_h)
}

pub fn partition_dims(
    width: u32,
    height: u32,
    patch_w: u32,
    patch_h: u32,
) -> Result<Vec<PatchSpec>> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidInput(
            "cannot partition an empty image".into(),
        ));
    }
    if patch_w == 0 || patch_h == 0 {
        return Err(Error::InvalidInput(format!(
            "patch size must be positive, got {patch_w}x{patch_h}"
        )));
    }
    let mut patches = Vec::with_capacity(patch_count(width, height, patch_w, patch_h));
    for y in (0..height).step_by(patch_h as usize) {
        for x in (0..width).step_by(patch_w as usize) {
            patches.push(PatchSpec {
                x,
                y,
                w: patch_w.min(width - x),
                h: patch_h.min(height - y),
            });
        }
    }
    Ok(patches)
}

/// Serializes one patch. Returns a single sequence under `ChannelJoint` and one
/// sequence per channel (R, G, B order) under `ChannelIndependent`.
pub fn flatten(
    image: &ImageBuffer,
    patch: &PatchSpec,
    mode: OrderingMode,
) -> Result<Vec<SymbolSequence>> {
    let block = image.read_patch(patch)?;
    Ok(flatten_block(&block, image.channels, mode))
}

/// Same as [`flatten`] on an already extracted patch block.
pub fn flatten_block(block: &[u8], channels: u8, mode: OrderingMode) -> Vec<SymbolSequence> {
    match mode {
        OrderingMode::ChannelJoint => vec![SymbolSequence {
            symbols: block.to_vec(),
            ordering: mode,
            channel: None,
        }],
        OrderingMode::ChannelIndependent => {
            let c = channels as usize;
            (0..c)
                .map(|k| SymbolSequence {
                    symbols: block.iter().skip(k).step_by(c).copied().collect(),
                    ordering: mode,
                    channel: Some(k as u8),
                })
                .collect()
        }
    }
}

/// Rebuilds the row-major patch block from its symbol sequences.
pub fn unflatten(
    seqs: &[SymbolSequence],
    patch: &PatchSpec,
    mode: OrderingMode,
    channels: u8,
) -> Result<Vec<u8>> {
    let pixels = patch.pixel_count();
    let expected_seqs = mode.sequences_per_patch(channels);
    if seqs.len() != expected_seqs {
        return Err(Error::CorruptStream(format!(
            "expected {expected_seqs} sequence(s) for the patch, got {}",
            seqs.len()
        )));
    }
    let want = mode.sequence_len(pixels, channels);
    for seq in seqs {
        if seq.symbols.len() != want {
            return Err(Error::CorruptStream(format!(
                "sequence has {} symbols, patch needs {want}",
                seq.symbols.len()
            )));
        }
    }
    match mode {
        OrderingMode::ChannelJoint => Ok(seqs[0].symbols.clone()),
        OrderingMode::ChannelIndependent => {
            let c = channels as usize;
            let mut block = vec![0u8; pixels * c];
            for (k, seq) in seqs.iter().enumerate() {
                for (i, &s) in seq.symbols.iter().enumerate() {
                    block[i * c + k] = s;
                }
            }
            Ok(block)
        }
    }
}
