//! Annotated PNG output.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::geometry::{AxisBox, Grasp5D};
use crate::scene::Image;

pub const TOP: [u8; 3] = [255, 0, 0];
pub const OTHER: [u8; 3] = [255, 230, 0];
pub const REGION: [u8; 3] = [0, 90, 255];
const TEXT: [u8; 3] = [255, 255, 255];
const TEXT_BG: [u8; 3] = [0, 0, 0];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overlay {
    /// Best first; the first is drawn in red.
    pub grasps: Vec<Grasp5D>,
    pub region: Option<AxisBox>,
}

fn plot(img: &mut Image, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height {
        img.put(x as usize, y as usize, c);
    }
}

fn line(img: &mut Image, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: [u8; 3]) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        plot(img, (x0 + t * (x1 - x0)).round() as i64, (y0 + t * (y1 - y0)).round() as i64, c);
    }
}

fn polygon(img: &mut Image, pts: &[(f64, f64)], c: [u8; 3]) {
    for i in 0..pts.len() {
        line(img, pts[i], pts[(i + 1) % pts.len()], c);
    }
}

pub fn draw_grasp(img: &mut Image, g: &Grasp5D, c: [u8; 3]) {
    polygon(img, &g.corners(), c);
}

pub fn draw_box(img: &mut Image, b: &AxisBox, c: [u8; 3]) {
    polygon(img, &[(b.x1(), b.y1()), (b.x2(), b.y1()), (b.x2(), b.y2()), (b.x1(), b.y2())], c);
}

/// 3x5 glyphs, one row per entry, bit 2 is the left column.
fn glyph(ch: char) -> [u8; 5] {
    match ch {
        'a' => [0b000, 0b011, 0b101, 0b101, 0b011],
        'g' => [0b011, 0b101, 0b011, 0b001, 0b110],
        'n' => [0b000, 0b110, 0b101, 0b101, 0b101],
        'o' => [0b000, 0b010, 0b101, 0b101, 0b010],
        'p' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'r' => [0b000, 0b101, 0b110, 0b100, 0b100],
        's' => [0b011, 0b100, 0b010, 0b001, 0b110],
        _ => [0; 5],
    }
}

/// Draw `text` with its top-left corner at `(x, y)`, scaled by `scale`.
pub fn draw_text(img: &mut Image, text: &str, x: usize, y: usize, scale: usize) {
    let w = text.chars().count() * 4 * scale + scale;
    for dy in 0..7 * scale {
        for dx in 0..w {
            plot(img, (x + dx) as i64, (y + dy) as i64, TEXT_BG);
        }
    }
    for (i, ch) in text.chars().enumerate() {
        let rows = glyph(ch);
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) != 0 {
                    for sy in 0..scale {
                        for sx in 0..scale {
                            let px = x + scale + (i * 4 + col) * scale + sx;
                            let py = y + scale + r * scale + sy;
                            plot(img, px as i64, py as i64, TEXT);
                        }
                    }
                }
            }
        }
    }
}

/// Copy of `base` with the overlay drawn; an empty grasp list is labeled.
pub fn render(base: &Image, overlay: &Overlay) -> Image {
    let mut img = base.clone();
    if let Some(r) = &overlay.region {
        draw_box(&mut img, r, REGION);
    }
    for g in overlay.grasps.iter().skip(1).rev() {
        draw_grasp(&mut img, g, OTHER);
    }
    match overlay.grasps.first() {
        Some(g) => draw_grasp(&mut img, g, TOP),
        None => draw_text(&mut img, "no grasp", 2, 2, 2),
    }
    img
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>, png::EncodingError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&img.pixels)?;
    }
    Ok(out)
}

pub fn write_png(img: &Image, path: &Path) -> Result<(), png::EncodingError> {
    let f = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(f, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header()?.write_image_data(&img.pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blank() -> Image {
        Image { width: 64, height: 64, pixels: vec![40; 64 * 64 * 3] }
    }

    fn count(img: &Image, c: [u8; 3]) -> usize {
        img.pixels.chunks(3).filter(|p| *p == c).count()
    }

    #[test]
    fn top_grasp_is_red() {
        let g = Grasp5D::new(32.0, 32.0, 0.5, 20.0, 8.0).unwrap();
        let other = Grasp5D::new(10.0, 50.0, 0.0, 10.0, 6.0).unwrap();
        let one = render(&blank(), &Overlay { grasps: vec![g], region: None });
        assert!(count(&one, TOP) > 40);
        assert_eq!(count(&one, TEXT), 0);
        let two = render(&blank(), &Overlay { grasps: vec![g, other], region: Some(AxisBox::new(32.0, 32.0, 40.0, 40.0)) });
        assert!(count(&two, OTHER) > 20 && count(&two, REGION) > 100);
    }

    #[test]
    fn empty_prediction_is_labeled() {
        let img = render(&blank(), &Overlay::default());
        assert!(count(&img, TEXT) > 20);
        assert_eq!(count(&img, TOP), 0);
    }

    #[test]
    fn png_is_deterministic_and_decodable() {
        let g = Grasp5D::new(20.0, 30.0, 1.0, 15.0, 6.0).unwrap();
        let img = render(&blank(), &Overlay { grasps: vec![g], region: None });
        let a = encode_png(&img).unwrap();
        assert_eq!(a, encode_png(&img).unwrap());
        let dec = png::Decoder::new(std::io::Cursor::new(a));
        let mut reader = dec.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (64, 64));
        assert_eq!(&buf[..info.buffer_size()], &img.pixels[..]);
    }
}
