//! 8-bit grayscale images: PNG IO, crops, resizing, letterboxing and tiling.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fill value of letterbox padding.
pub const PAD_GRAY: u8 = 128;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

/// Box in pixel coordinates; `xmax`/`ymax` are exclusive edges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub class: usize,
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl PixelBox {
    pub fn area(&self) -> f64 {
        (self.xmax - self.xmin).max(0.0) * (self.ymax - self.ymin).max(0.0)
    }

    pub fn intersect(&self, r: &Rect) -> Option<PixelBox> {
        let b = PixelBox {
            xmin: self.xmin.max(r.x as f64),
            ymin: self.ymin.max(r.y as f64),
            xmax: self.xmax.min((r.x + r.width) as f64),
            ymax: self.ymax.min((r.y + r.height) as f64),
            ..*self
        };
        (b.xmax > b.xmin && b.ymax > b.ymin).then_some(b)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> PixelBox {
        PixelBox {
            xmin: self.xmin + dx,
            ymin: self.ymin + dy,
            xmax: self.xmax + dx,
            ymax: self.ymax + dy,
            ..*self
        }
    }
}

/// Integer pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.width * self.height
    }
}

impl GrayImage {
    pub fn new(height: usize, width: usize, fill: u8) -> Self {
        Self {
            height,
            width,
            pixels: vec![fill; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn crop(&self, r: &Rect) -> GrayImage {
        let mut out = GrayImage::new(r.height, r.width, 0);
        for y in 0..r.height {
            let src = (r.y + y) * self.width + r.x;
            out.pixels[y * r.width..(y + 1) * r.width]
                .copy_from_slice(&self.pixels[src..src + r.width]);
        }
        out
    }

    pub fn paste(&mut self, src: &GrayImage, x: usize, y: usize) {
        for row in 0..src.height {
            let dst = (y + row) * self.width + x;
            self.pixels[dst..dst + src.width]
                .copy_from_slice(&src.pixels[row * src.width..(row + 1) * src.width]);
        }
    }

    pub fn mirror(&self) -> GrayImage {
        let mut out = self.clone();
        for row in out.pixels.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize(&self, height: usize, width: usize) -> GrayImage {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = GrayImage::new(height, width, 0);
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let top = self.get(y0, x0) as f64 * (1.0 - wx) + self.get(y0, x1) as f64 * wx;
                let bot = self.get(y1, x0) as f64 * (1.0 - wx) + self.get(y1, x1) as f64 * wx;
                out.set(y, x, (top * (1.0 - wy) + bot * wy).round() as u8);
            }
        }
        out
    }

    /// `[1, 1, H, W]` tensor of intensities scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, 1, self.height, self.width],
            self.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        )
        .expect("image tensor")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        let mut enc = png::Encoder::new(w, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer
            .write_image_data(&self.pixels)
            .map_err(|e| Error::Png(e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<GrayImage> {
        let dec = png::Decoder::new(BufReader::new(File::open(path)?));
        let mut reader = dec.read_info().map_err(|e| Error::Png(e.to_string()))?;
        let mut buf = vec![
            0;
            reader
                .output_buffer_size()
                .ok_or_else(|| Error::Png("image too large".into()))?
        ];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Png(e.to_string()))?;
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Png(format!(
                "{}: expected 8-bit grayscale",
                path.display()
            )));
        }
        buf.truncate(info.buffer_size());
        Ok(GrayImage {
            height: info.height as usize,
            width: info.width as usize,
            pixels: buf,
        })
    }
}

/// Isotropic scale plus offset taking source pixel coordinates to
/// letterboxed ones.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Letterbox {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
}

impl Letterbox {
    pub fn forward(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.scale + self.pad_x, y * self.scale + self.pad_y)
    }

    pub fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.pad_x) / self.scale, (y - self.pad_y) / self.scale)
    }

    pub fn map_box(&self, b: &PixelBox) -> PixelBox {
        let (xmin, ymin) = self.forward(b.xmin, b.ymin);
        let (xmax, ymax) = self.forward(b.xmax, b.ymax);
        PixelBox {
            xmin,
            ymin,
            xmax,
            ymax,
            ..*b
        }
    }
}

/// Aspect-preserving resize into `height × width` with centered gray padding.
pub fn letterbox(img: &GrayImage, height: usize, width: usize) -> (GrayImage, Letterbox) {
    let scale = (height as f64 / img.height as f64).min(width as f64 / img.width as f64);
    let nh = ((img.height as f64 * scale).round() as usize).clamp(1, height);
    let nw = ((img.width as f64 * scale).round() as usize).clamp(1, width);
    let pad_y = (height - nh) / 2;
    let pad_x = (width - nw) / 2;
    let mut out = GrayImage::new(height, width, PAD_GRAY);
    out.paste(&img.resize(nh, nw), pad_x, pad_y);
    let t = Letterbox {
        scale,
        pad_x: pad_x as f64,
        pad_y: pad_y as f64,
    };
    (out, t)
}

/// Minimum share of a box's area a crop or tile must keep for the box to
/// survive.
pub const MIN_RETAINED_AREA: f64 = 0.25;

/// Boxes intersecting `r`, clipped to it, dropped when less than
/// [`MIN_RETAINED_AREA`] of their area remains, in `r`'s coordinates.
pub fn clip_boxes(boxes: &[PixelBox], r: &Rect) -> Vec<PixelBox> {
    boxes
        .iter()
        .filter_map(|b| {
            let c = b.intersect(r)?;
            (c.area() >= MIN_RETAINED_AREA * b.area())
                .then(|| c.translate(-(r.x as f64), -(r.y as f64)))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub rect: Rect,
    pub image: GrayImage,
    pub boxes: Vec<PixelBox>,
}

/// Non-overlapping row-major tiles of `tile_h × tile_w`.
pub fn tile_image(
    img: &GrayImage,
    boxes: &[PixelBox],
    tile_h: usize,
    tile_w: usize,
) -> Result<Vec<Tile>> {
    if tile_h == 0
        || tile_w == 0
        || !img.height.is_multiple_of(tile_h)
        || !img.width.is_multiple_of(tile_w)
    {
        let up = |v: usize, t: usize| if t == 0 { v } else { v.div_ceil(t) * t };
        return Err(Error::TileSize {
            height: img.height,
            width: img.width,
            tile_h,
            tile_w,
            pad_h: up(img.height, tile_h),
            pad_w: up(img.width, tile_w),
        });
    }
    let mut tiles = Vec::new();
    for ty in 0..img.height / tile_h {
        for tx in 0..img.width / tile_w {
            let rect = Rect {
                x: tx * tile_w,
                y: ty * tile_h,
                width: tile_w,
                height: tile_h,
            };
            tiles.push(Tile {
                rect,
                image: img.crop(&rect),
                boxes: clip_boxes(boxes, &rect),
            });
        }
    }
    Ok(tiles)
}
