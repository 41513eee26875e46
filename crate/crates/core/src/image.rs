//! 8-bit raster images and PNG I/O.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved 8-bit image with 1 (gray) or 3 (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Raster {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return;
        }
        let i = (y as usize * self.width + x as usize) * self.channels;
        self.data[i..i + self.channels].copy_from_slice(&color[..self.channels]);
    }

    pub fn get(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Converts a planar `(C, H, W)` or `(1, C, H, W)` tensor with values in `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = match t.shape() {
            [c, h, w] | [1, c, h, w] => (*c, *h, *w),
            s => return Err(Error::config(format!("cannot rasterize shape {s:?}"))),
        };
        if c != 1 && c != 3 {
            return Err(Error::config(format!("cannot rasterize {c} channels")));
        }
        let plane = h * w;
        let mut data = vec![0u8; c * plane];
        for ch in 0..c {
            for p in 0..plane {
                data[p * c + ch] = to_u8(t.data()[ch * plane + p]);
            }
        }
        Ok(Raster {
            width: w,
            height: h,
            channels: c,
            data,
        })
    }

    /// Planar `(C, H, W)` tensor with values `v / 255`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        let c = self.channels;
        Tensor::from_fn(&[c, self.height, self.width], |i| {
            let (ch, p) = (i / plane, i % plane);
            f64::from(self.data[p * c + ch]) / 255.0
        })
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            c => return Err(Error::config(format!("cannot encode {c}-channel png"))),
        };
        let mut bytes = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut bytes, self.width as u32, self.height as u32);
            enc.set_color(color);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc
                .write_header()
                .map_err(|e| Error::format(format!("png header: {e}")))?;
            writer
                .write_image_data(&self.data)
                .map_err(|e| Error::format(format!("png data: {e}")))?;
        }
        Ok(bytes)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let decoder = png::Decoder::new(Cursor::new(bytes));
        let mut reader = decoder.read_info().map_err(|e| Error::format(format!("png: {e}")))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::format("png too large"))?;
        let mut buf = vec![0u8; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::format(format!("png: {e}")))?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::format("only 8-bit png is supported"));
        }
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::Rgb => 3,
            other => return Err(Error::format(format!("unsupported png color type {other:?}"))),
        };
        buf.truncate(info.buffer_size());
        Ok(Raster {
            width: info.width as usize,
            height: info.height as usize,
            channels,
            data: buf,
        })
    }
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Blue (low) to red (high) colormap on `[0, 1]`; red rises and blue falls monotonically.
pub fn heat_color(v: f64) -> [u8; 3] {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    [to_u8(v), to_u8(0.2 * (1.0 - (2.0 * v - 1.0).abs())), to_u8(1.0 - v)]
}

const GLYPHS: [(char, [u8; 5]); 11] = [
    ('0', [0b111, 0b101, 0b101, 0b101, 0b111]),
    ('1', [0b010, 0b110, 0b010, 0b010, 0b111]),
    ('2', [0b111, 0b001, 0b111, 0b100, 0b111]),
    ('3', [0b111, 0b001, 0b111, 0b001, 0b111]),
    ('4', [0b101, 0b101, 0b111, 0b001, 0b001]),
    ('5', [0b111, 0b100, 0b111, 0b001, 0b111]),
    ('6', [0b111, 0b100, 0b111, 0b101, 0b111]),
    ('7', [0b111, 0b001, 0b010, 0b010, 0b010]),
    ('8', [0b111, 0b101, 0b111, 0b101, 0b111]),
    ('9', [0b111, 0b101, 0b111, 0b001, 0b111]),
    ('-', [0b000, 0b000, 0b111, 0b000, 0b000]),
];

/// Draws `text` (digits and '-') with a 3×5 pixel font; glyphs advance 4 pixels.
pub fn draw_text(img: &mut Raster, x: i64, y: i64, text: &str, color: [u8; 3]) {
    for (i, ch) in text.chars().enumerate() {
        let Some((_, rows)) = GLYPHS.iter().find(|(c, _)| *c == ch) else {
            continue;
        };
        for (dy, row) in rows.iter().enumerate() {
            for dx in 0..3 {
                if row & (0b100 >> dx) != 0 {
                    img.put(x + 4 * i as i64 + dx, y + dy as i64, color);
                }
            }
        }
    }
}

/// Bresenham line between integer endpoints, clipped to the image.
pub fn draw_line(img: &mut Raster, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        img.put(x, y, color);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}
