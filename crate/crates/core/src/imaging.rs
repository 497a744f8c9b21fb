//! 8-bit images and PNG encoding.

use crate::numerics::Tensor;
use crate::{Error, Result};

/// Interleaved 8-bit image with 1 (grey), 3 (RGB) or 4 (RGBA) channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

/// Map a value in `[-1, 1]` to `0..=255`.
pub fn signed_to_u8(x: f32) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round() as u8
}

impl Image8 {
    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let at = (y * self.width + x) * self.channels;
        &self.data[at..at + self.channels]
    }

    /// RGB from a planar `[3, H, W]` tensor in `[-1, 1]`, with alpha from a
    /// `[1, H, W]` mask in `[0, 1]` when given.
    pub fn from_planar(rgb: &Tensor, mask: Option<&Tensor>) -> Result<Image8> {
        if rgb.rank() != 3 || rgb.dim(0) != 3 {
            return Err(Error::shape(format!("rgb must be [3, H, W], got {:?}", rgb.shape())));
        }
        let (h, w) = (rgb.dim(1), rgb.dim(2));
        if let Some(m) = mask {
            if m.shape() != [1, h, w] {
                return Err(Error::shape(format!("mask must be [1, {h}, {w}], got {:?}", m.shape())));
            }
        }
        let hw = h * w;
        let channels = if mask.is_some() { 4 } else { 3 };
        let src = rgb.data();
        let mut data = Vec::with_capacity(hw * channels);
        for p in 0..hw {
            for c in 0..3 {
                data.push(signed_to_u8(src[c * hw + p]));
            }
            if let Some(m) = mask {
                data.push((m.data()[p].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        Ok(Image8 { width: w, height: h, channels, data })
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            4 => png::ColorType::Rgba,
            c => return Err(Error::shape(format!("cannot encode {c}-channel image"))),
        };
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(color);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| Error::format("png", e.to_string()))?;
            writer.write_image_data(&self.data).map_err(|e| Error::format("png", e.to_string()))?;
        }
        Ok(out)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Image8> {
        let mut dec = png::Decoder::new(bytes);
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(|e| Error::format("png", e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::format("png", e.to_string()))?;
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Indexed => return Err(Error::format("png", "indexed colour after expansion")),
        };
        buf.truncate(info.buffer_size());
        Ok(Image8 { width: info.width as usize, height: info.height as usize, channels, data: buf })
    }

    pub fn save_png(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    /// Planar `[3, H, W]` tensor in `[-1, 1]` from the first three channels
    /// (grey is repeated).
    pub fn to_planar_signed(&self) -> Tensor {
        let hw = self.width * self.height;
        Tensor::from_fn([3, self.height, self.width], |i| {
            let (c, p) = (i / hw, i % hw);
            let c = if self.channels < 3 { 0 } else { c };
            self.data[p * self.channels + c] as f32 / 255.0 * 2.0 - 1.0
        })
    }
}
