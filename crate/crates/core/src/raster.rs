//! Rasterization of structure graphs, stage color gradients, and the 100 s
//! temperature timeline that ties image time points to growth stages.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{Canvas, Point, StageClass, StructureGraph};

pub type Rgb = [u8; 3];

/// Linear RGB ramp over `t ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColorGradient {
    pub start_rgb: Rgb,
    pub end_rgb: Rgb,
}

impl ColorGradient {
    pub const fn new(start_rgb: Rgb, end_rgb: Rgb) -> Self {
        Self { start_rgb, end_rgb }
    }

    /// Per-channel `start + t·(end − start)`, rounded to the nearest integer.
    /// `t` is clamped to `[0, 1]`, so both endpoints are reproduced exactly.
    pub fn at(&self, t: f64) -> Rgb {
        let t = t.clamp(0.0, 1.0);
        let mut out = [0u8; 3];
        for c in 0..3 {
            let a = f64::from(self.start_rgb[c]);
            let b = f64::from(self.end_rgb[c]);
            out[c] = (a + t * (b - a)).round().clamp(0.0, 255.0) as u8;
        }
        out
    }

    /// Bright yellow to orange; orange to deep orange; red-orange to deep red.
    pub fn default_for(stage: StageClass) -> Self {
        match stage {
            StageClass::Spore => Self::new([255, 255, 0], [255, 165, 0]),
            StageClass::Hyphae => Self::new([255, 165, 0], [255, 120, 0]),
            StageClass::Mycelium => Self::new([255, 69, 0], [139, 0, 0]),
        }
    }
}

/// Gradient per stage. Overlay structures are drawn with their own stage's gradient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette {
    pub spore: ColorGradient,
    pub hyphae: ColorGradient,
    pub mycelium: ColorGradient,
}

impl Palette {
    pub fn uniform(gradient: ColorGradient) -> Self {
        Self {
            spore: gradient,
            hyphae: gradient,
            mycelium: gradient,
        }
    }

    pub fn for_stage(&self, stage: StageClass) -> ColorGradient {
        match stage {
            StageClass::Spore => self.spore,
            StageClass::Hyphae => self.hyphae,
            StageClass::Mycelium => self.mycelium,
        }
    }
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            spore: ColorGradient::default_for(StageClass::Spore),
            hyphae: ColorGradient::default_for(StageClass::Hyphae),
            mycelium: ColorGradient::default_for(StageClass::Mycelium),
        }
    }
}

/// Linear 100 s timeline from 300 K to 400 K, partitioned into stage bands.
///
/// Bands are half-open on the right except the last: `[300, 330)`, `[330, 370)`, `[370, 400]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelineSpec {
    pub duration_s: f64,
    pub temp_min: f64,
    pub temp_max: f64,
    pub hyphae_from: f64,
    pub mycelium_from: f64,
}

impl Default for TimelineSpec {
    fn default() -> Self {
        Self {
            duration_s: 100.0,
            temp_min: 300.0,
            temp_max: 400.0,
            hyphae_from: 330.0,
            mycelium_from: 370.0,
        }
    }
}

impl TimelineSpec {
    pub fn temperature_at(&self, time_s: f64) -> Result<f64> {
        if !(0.0..=self.duration_s).contains(&time_s) {
            return Err(Error::Range(format!(
                "time {time_s} s outside [0, {}] s",
                self.duration_s
            )));
        }
        Ok(self.temp_min + time_s * (self.temp_max - self.temp_min) / self.duration_s)
    }

    pub fn stage_for_temperature(&self, kelvin: f64) -> Result<StageClass> {
        if !(self.temp_min..=self.temp_max).contains(&kelvin) {
            return Err(Error::Range(format!(
                "temperature {kelvin} K outside [{}, {}] K",
                self.temp_min, self.temp_max
            )));
        }
        Ok(if kelvin < self.hyphae_from {
            StageClass::Spore
        } else if kelvin < self.mycelium_from {
            StageClass::Hyphae
        } else {
            StageClass::Mycelium
        })
    }

    /// Temperature band `[lo, hi)` of a stage (closed at the top for the last stage).
    pub fn band(&self, stage: StageClass) -> (f64, f64) {
        match stage {
            StageClass::Spore => (self.temp_min, self.hyphae_from),
            StageClass::Hyphae => (self.hyphae_from, self.mycelium_from),
            StageClass::Mycelium => (self.mycelium_from, self.temp_max),
        }
    }

    /// Inverse of `temperature_at`.
    pub fn time_for_temperature(&self, kelvin: f64) -> f64 {
        (kelvin - self.temp_min) * self.duration_s / (self.temp_max - self.temp_min)
    }
}

pub fn temperature_at(time_s: f64, spec: &TimelineSpec) -> Result<f64> {
    spec.temperature_at(time_s)
}

pub fn stage_for_temperature(kelvin: f64, spec: &TimelineSpec) -> Result<StageClass> {
    spec.stage_for_temperature(kelvin)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub width: u32,
    pub height: u32,
    /// Row-major RGB, `3·width·height` bytes.
    pub pixels: Vec<u8>,
    pub stage: StageClass,
    pub time_s: f64,
    pub temperature_k: f64,
}

impl RasterImage {
    pub fn filled(canvas: Canvas, rgb: Rgb, stage: StageClass) -> Result<Self> {
        if canvas.width == 0 || canvas.height == 0 {
            return Err(Error::Dimension(format!(
                "canvas must be non-empty, got {}x{}",
                canvas.width, canvas.height
            )));
        }
        let n = canvas.width as usize * canvas.height as usize;
        Ok(Self {
            width: canvas.width,
            height: canvas.height,
            pixels: rgb.iter().copied().cycle().take(3 * n).collect(),
            stage,
            time_s: 0.0,
            temperature_k: 0.0,
        })
    }

    pub fn pixel(&self, x: u32, y: u32) -> Rgb {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn put(&mut self, x: u32, y: u32, rgb: Rgb) {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Sets every pixel whose center satisfies `inside`, scanning only the bounding box.
    fn fill_where(&mut self, bbox: (f64, f64, f64, f64), rgb: Rgb, inside: impl Fn(Point) -> bool) {
        let (x0, y0, x1, y1) = bbox;
        let (w, h) = (self.width, self.height);
        let clamp_x = |v: f64| v.floor().clamp(0.0, f64::from(w - 1)) as u32;
        let clamp_y = |v: f64| v.floor().clamp(0.0, f64::from(h - 1)) as u32;
        if x1 < 0.0 || y1 < 0.0 || x0 > f64::from(self.width) || y0 > f64::from(self.height) {
            return;
        }
        for py in clamp_y(y0)..=clamp_y(y1) {
            for px in clamp_x(x0)..=clamp_x(x1) {
                let c = Point::new(f64::from(px) + 0.5, f64::from(py) + 0.5);
                if inside(c) {
                    self.put(px, py, rgb);
                }
            }
        }
    }
}

fn distance_to_segment(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    };
    p.distance(Point::new(a.x + t * dx, a.y + t * dy))
}

/// Draws filled circles then width-respecting strokes, shallow depths first, with
/// hard edges: a pixel is painted when its center lies inside the shape.
/// Circles take the gradient start color; a segment at depth `d` of a depth-`D`
/// tree takes the color at `t = d / D`.
pub fn render(graph: &StructureGraph, palette: &Palette, background: Rgb) -> Result<RasterImage> {
    let mut img = RasterImage::filled(graph.canvas, background, graph.stage)?;
    for c in &graph.circles {
        let color = palette.for_stage(c.stage).at(0.0);
        let (cx, cy, r) = (c.center.x, c.center.y, c.radius);
        img.fill_where((cx - r, cy - r, cx + r, cy + r), color, |p| p.distance(c.center) <= r);
    }
    let mut order: Vec<usize> = (0..graph.segments.len()).collect();
    order.sort_by_key(|&i| graph.segments[i].depth);
    for i in order {
        let s = &graph.segments[i];
        let color = palette.for_stage(s.stage).at(s.gradient_t());
        let half = s.width / 2.0;
        let bbox = (
            s.start.x.min(s.end.x) - half,
            s.start.y.min(s.end.y) - half,
            s.start.x.max(s.end.x) + half,
            s.start.y.max(s.end.y) + half,
        );
        img.fill_where(bbox, color, |p| distance_to_segment(p, s.start, s.end) <= half);
    }
    Ok(img)
}

/// Writes an 8-bit RGB PNG.
pub fn write_image(image: &RasterImage, path: &Path) -> Result<()> {
    let bytes = encode_png(image).map_err(|detail| Error::Image {
        path: path.to_path_buf(),
        detail,
    })?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Encodes an image as PNG bytes. Encoding is deterministic for a given buffer.
pub fn encode_png(image: &RasterImage) -> std::result::Result<Vec<u8>, String> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(BufWriter::new(&mut out), image.width, image.height);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(|e| e.to_string())?;
        writer.write_image_data(&image.pixels).map_err(|e| e.to_string())?;
        writer.finish().map_err(|e| e.to_string())?;
    }
    Ok(out)
}

/// Reads an 8-bit RGB PNG back into a pixel buffer. Stage and timeline fields are left
/// for the caller (they live in the dataset manifest, not in the file).
pub fn read_image(path: &Path, stage: StageClass) -> Result<RasterImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let image_err = |detail: String| Error::Image {
        path: path.to_path_buf(),
        detail,
    };
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| image_err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(image_err(format!(
            "expected 8-bit RGB, found {:?} at {:?}",
            info.color_type, info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Ok(RasterImage {
        width: info.width,
        height: info.height,
        pixels: buf,
        stage,
        time_s: 0.0,
        temperature_k: 0.0,
    })
}
