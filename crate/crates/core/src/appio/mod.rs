//! Dataset ingestion, image codecs, checkpoints and run configuration.

pub mod checkpoint;
pub mod config;

pub use config::RunConfig;

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::jpeg::JpegEncoder;
use image::{DynamicImage, GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use imuge_tensor::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{config_err, ImugeError, Result};
use crate::masks::Mask;

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};


/// 8-bit code of a `[-1, 1]` value: `(v + 1) * 127.5` rounded half away
/// from zero, clamped to `0..=255`.
pub fn quantize_u8(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn dequantize_u8(q: u8) -> f64 {
    f64::from(q) / 127.5 - 1.0
}

/// Values after an 8-bit roundtrip.
pub fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| dequantize_u8(quantize_u8(v)))
}

/// `[1, 3, h, w]` tensor in `[-1, 1]`.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn(&[1, 3, h, w], |i| {
        let c = i / (h * w);
        let (y, x) = ((i / w) % h, i % w);
        dequantize_u8(img.get_pixel(x as u32, y as u32)[c])
    })
}

pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 || c != 3 {
        return Err(crate::error::shape_err(format!("expected one RGB image, got {:?}", t.shape())));
    }
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([quantize_u8(d[p]), quantize_u8(d[h * w + p]), quantize_u8(d[2 * h * w + p])])
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaveFormat {
    Png,
    Bmp,
    Jpeg { quality: u8 },
}

impl SaveFormat {
    /// From a file extension, with `quality` used for JPEG.
    pub fn from_path(path: &Path, quality: u8) -> Result<Self> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        Ok(match ext.as_str() {
            "png" => Self::Png,
            "bmp" => Self::Bmp,
            "jpg" | "jpeg" => Self::Jpeg { quality },
            other => return Err(config_err(format!("unsupported output extension '{other}'"))),
        })
    }
}

fn codec_err(path: &Path, e: impl std::fmt::Display) -> ImugeError {
    ImugeError::Codec {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

pub fn encode_image(t: &Tensor, format: SaveFormat) -> Result<Vec<u8>> {
    let img = tensor_to_rgb(t)?;
    let mut buf = Cursor::new(Vec::new());
    let here = Path::new("<memory>");
    match format {
        SaveFormat::Png => img.write_to(&mut buf, ImageFormat::Png).map_err(|e| codec_err(here, e))?,
        SaveFormat::Bmp => img.write_to(&mut buf, ImageFormat::Bmp).map_err(|e| codec_err(here, e))?,
        SaveFormat::Jpeg { quality } => JpegEncoder::new_with_quality(&mut buf, quality)
            .encode_image(&img)
            .map_err(|e| codec_err(here, e))?,
    }
    Ok(buf.into_inner())
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory(bytes).map_err(|e| codec_err(Path::new("<memory>"), e))?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

/// Encode and decode with the real JPEG codec.
pub fn jpeg_roundtrip(t: &Tensor, quality: u8) -> Result<Tensor> {
    decode_image(&encode_image(t, SaveFormat::Jpeg { quality })?)
}

/// Real-codec JPEG applied to each item of an `[n, 3, h, w]` batch.
pub fn jpeg_roundtrip_batch(t: &Tensor, quality: u8) -> Result<Tensor> {
    let (n, _, _, _) = t.dims4()?;
    let items = (0..n)
        .map(|i| jpeg_roundtrip(&t.batch_item(i)?, quality))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack_batch(&items)?)
}

pub fn save_image(path: &Path, t: &Tensor, format: SaveFormat) -> Result<()> {
    let bytes = encode_image(t, format)?;
    std::fs::write(path, bytes).map_err(|e| ImugeError::io(path, e))
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| codec_err(path, e))?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

/// Single-channel PNG, 255 for tampered pixels.
pub fn save_mask(path: &Path, m: &Mask) -> Result<()> {
    let img = GrayImage::from_fn(m.width() as u32, m.height() as u32, |x, y| {
        Luma([(m.get(y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save_with_format(path, ImageFormat::Png).map_err(|e| codec_err(path, e))
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| codec_err(path, e))?.to_luma8();
    Ok(Mask::from_fn(img.height() as usize, img.width() as usize, |y, x| {
        f64::from(img.get_pixel(x as u32, y as u32)[0]) / 255.0
    }))
}

/// Text key under which artifacts carry the run-config hash.
pub const ARTIFACT_TAG: &str = "imuge-config-hash";

fn png_tagged(width: usize, height: usize, color: png::ColorType, data: &[u8], hash: &str) -> Result<Vec<u8>> {
    let here = Path::new("<memory>");
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    enc.add_text_chunk(ARTIFACT_TAG.to_string(), hash.to_string()).map_err(|e| codec_err(here, e))?;
    let mut w = enc.write_header().map_err(|e| codec_err(here, e))?;
    w.write_image_data(data).map_err(|e| codec_err(here, e))?;
    w.finish().map_err(|e| codec_err(here, e))?;
    Ok(out)
}

/// Encode with the config hash embedded: a text chunk in PNG, a comment
/// segment in JPEG. BMP has no metadata slot and is written plain.
pub fn encode_tagged(t: &Tensor, format: SaveFormat, hash: &str) -> Result<Vec<u8>> {
    match format {
        SaveFormat::Png => {
            let img = tensor_to_rgb(t)?;
            png_tagged(img.width() as usize, img.height() as usize, png::ColorType::Rgb, img.as_raw(), hash)
        }
        SaveFormat::Jpeg { .. } => {
            let plain = encode_image(t, format)?;
            let text = format!("{ARTIFACT_TAG}={hash}");
            let len = u16::try_from(text.len() + 2).map_err(|_| config_err("artifact tag too long"))?;
            let mut out = Vec::with_capacity(plain.len() + text.len() + 4);
            out.extend_from_slice(&plain[..2]);
            out.extend_from_slice(&[0xFF, 0xFE]);
            out.extend_from_slice(&len.to_be_bytes());
            out.extend_from_slice(text.as_bytes());
            out.extend_from_slice(&plain[2..]);
            Ok(out)
        }
        SaveFormat::Bmp => encode_image(t, format),
    }
}

/// The embedded config hash of a PNG or JPEG artifact, if any.
pub fn read_artifact_tag(bytes: &[u8]) -> Option<String> {
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        let reader = png::Decoder::new(Cursor::new(bytes)).read_info().ok()?;
        return reader
            .info()
            .uncompressed_latin1_text
            .iter()
            .find(|c| c.keyword == ARTIFACT_TAG)
            .map(|c| c.text.clone());
    }
    if bytes.starts_with(&[0xFF, 0xD8]) {
        let mut i = 2;
        while i + 4 <= bytes.len() && bytes[i] == 0xFF {
            let marker = bytes[i + 1];
            let len = usize::from(u16::from_be_bytes([bytes[i + 2], bytes[i + 3]]));
            if marker == 0xDA {
                break;
            }
            if marker == 0xFE {
                let text = std::str::from_utf8(bytes.get(i + 4..i + 2 + len)?).ok()?;
                if let Some(h) = text.strip_prefix(&format!("{ARTIFACT_TAG}=")) {
                    return Some(h.to_string());
                }
            }
            i += 2 + len;
        }
    }
    None
}

pub fn save_artifact(path: &Path, t: &Tensor, format: SaveFormat, hash: &str) -> Result<()> {
    std::fs::write(path, encode_tagged(t, format, hash)?).map_err(|e| ImugeError::io(path, e))
}

/// Gray PNG of a mask (soft values scaled to 0..=255) with the hash embedded.
pub fn save_mask_artifact(path: &Path, m: &Mask, hash: &str) -> Result<()> {
    let data: Vec<u8> = m.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let bytes = png_tagged(m.width(), m.height(), png::ColorType::Grayscale, &data, hash)?;
    std::fs::write(path, bytes).map_err(|e| ImugeError::io(path, e))
}

/// Bilinear resize of a `[n, c, h, w]` tensor (half-pixel centres).
pub fn resize(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, th, tw) = t.dims4()?;
    if (th, tw) == (h, w) {
        return Ok(t.clone());
    }
    let g = Graph::inference();
    Ok(g.constant(t.clone()).resize_bilinear(h, w)?.value())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub size: usize,
    pub split: Split,
    /// Maximum number of images; 0 means no limit.
    pub limit: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            size: 64,
            split: Split::Train,
            limit: 2000,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(16) {
            return Err(config_err(format!("image size {} must be a positive multiple of 16", self.size)));
        }
        Ok(())
    }
}

pub struct Dataset {
    pub paths: Vec<PathBuf>,
    pub images: Vec<Tensor>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `[k, 3, s, s]` batch of the given indices.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let items: Vec<Tensor> = indices.iter().map(|&i| self.images[i].clone()).collect();
        Ok(Tensor::stack_batch(&items)?)
    }
}

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "bmp", "jpg", "jpeg", "tif", "tiff"];

/// Sorted image paths under `root`, shuffled by `seed`, truncated to `limit`.
pub fn list_images(root: &Path, seed: u64, limit: usize) -> Result<Vec<PathBuf>> {
    if !root.exists() {
        return Err(ImugeError::io(root, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let mut paths: Vec<PathBuf> = WalkDir::new(root)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    paths.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    if limit > 0 {
        paths.truncate(limit);
    }
    Ok(paths)
}

/// Decode, resize to `size×size` and map to `[-1, 1]`. Unreadable files
/// are skipped with a warning.
pub fn load_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut paths = Vec::new();
    let mut images = Vec::new();
    for p in list_images(&cfg.root, cfg.seed, 0)? {
        if cfg.limit > 0 && images.len() == cfg.limit {
            break;
        }
        match image::open(&p) {
            Ok(img) => {
                let t = rgb_to_tensor(&DynamicImage::to_rgb8(&img));
                images.push(resize(&t, cfg.size, cfg.size)?);
                paths.push(p);
            }
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    if images.is_empty() {
        return Err(ImugeError::EmptyDataset(cfg.root.display().to_string()));
    }
    Ok(Dataset { paths, images })
}
