use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Row-major 16-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image16 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u16>,
}

impl Image16 {
    pub fn new(width: usize, height: usize, data: Vec<u16>) -> Self {
        assert_eq!(data.len(), width * height, "image buffer size");
        Self { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.data[y * self.width + x]
    }

    /// Copy as floating point values in the original 0..65535 range.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// Reference to view pixels: a PNG on disk (loaded lazily) or an in-memory buffer.
#[derive(Debug, Clone)]
pub enum ImageRef {
    Path(PathBuf),
    Memory(Arc<Image16>),
}

impl ImageRef {
    pub fn load(&self) -> Result<Arc<Image16>> {
        match self {
            ImageRef::Path(p) => read_png16(p).map(Arc::new),
            ImageRef::Memory(img) => Ok(Arc::clone(img)),
        }
    }
}

pub fn read_png16(path: &Path) -> Result<Image16> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::Format(format!(
            "{}: expected single-channel PNG",
            path.display()
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = match info.bit_depth {
        png::BitDepth::Sixteen => buf[..w * h * 2]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect(),
        png::BitDepth::Eight => buf[..w * h].iter().map(|&v| v as u16 * 257).collect(),
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported bit depth {other:?}",
                path.display()
            )))
        }
    };
    Ok(Image16::new(w, h, data))
}

pub fn write_png16(path: &Path, image: &Image16) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), image.width as u32, image.height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Sixteen);
    let fmt_err = |e: png::EncodingError| Error::Format(format!("{}: {e}", path.display()));
    let mut writer = encoder.write_header().map_err(fmt_err)?;
    let bytes: Vec<u8> = image.data.iter().flat_map(|v| v.to_be_bytes()).collect();
    writer.write_image_data(&bytes).map_err(fmt_err)?;
    writer.finish().map_err(fmt_err)
}
