use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::RgbImage;

use super::AttentionRecord;
use crate::{Error, Frame, Result};

pub const CONTACT_SHEET_SUFFIX: &str = "contact";

/// Pixels per frame pixel in the overlays.
const ZOOM: usize = 2;
const MARGIN: usize = 14;
const GLYPH_SCALE: usize = 2;

/// 3×5 bitmap glyphs, one row per byte (low three bits, MSB left).
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        'e' => [7, 5, 7, 4, 7],
        '+' => [0, 2, 7, 2, 0],
        _ => return None,
    })
}

fn draw_text(img: &mut RgbImage, x0: usize, y0: usize, text: &str) {
    let mut x = x0;
    for c in text.chars() {
        if let Some(rows) = glyph(c) {
            for (dy, row) in rows.iter().enumerate() {
                for dx in 0..3 {
                    if row >> (2 - dx) & 1 == 1 {
                        for sy in 0..GLYPH_SCALE {
                            for sx in 0..GLYPH_SCALE {
                                let (px, py) = (x + dx * GLYPH_SCALE + sx, y0 + dy * GLYPH_SCALE + sy);
                                if (px as u32) < img.width() && (py as u32) < img.height() {
                                    img.put_pixel(px as u32, py as u32, image::Rgb([255, 255, 255]));
                                }
                            }
                        }
                    }
                }
            }
        }
        x += 4 * GLYPH_SCALE;
    }
}

fn jet(v: f64) -> [f64; 3] {
    let f = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [f(3.0), f(2.0), f(1.0)]
}

/// Min-max scaled overlay of one map on its frame, with the scale printed
/// in the bottom margin.
fn overlay(record: &AttentionRecord, frame: &Frame) -> RgbImage {
    let (fh, fw) = (frame.height, frame.width);
    let (w, h) = (fw * ZOOM, fh * ZOOM);
    let mut img = RgbImage::new(w as u32, (h + MARGIN) as u32);
    let lo = record.map_norm.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = record.map_norm.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for y in 0..h {
        for x in 0..w {
            let my = y * record.height / h;
            let mx = x * record.width / w;
            let v = record.map_norm[my * record.width + mx];
            let t = if span > 0.0 { (v - lo) / span } else { 0.0 };
            let heat = jet(t);
            let px = frame.rgb(y / ZOOM, x / ZOOM);
            let mix = |i: usize| (0.5 * f64::from(px[i]) + 0.5 * 255.0 * heat[i]).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Rgb([mix(0), mix(1), mix(2)]));
        }
    }
    draw_text(&mut img, 2, h + 2, &format!("{lo:.3} {hi:.3}"));
    img
}

fn sanitize(label: &str) -> String {
    label.chars().filter(|c| c.is_ascii_alphanumeric() || *c == '_' || *c == '-').collect()
}

/// File stem part for a record's token; repeated labels within one block
/// get their position appended.
fn token_part(record: &AttentionRecord, all: &[AttentionRecord]) -> String {
    let base = sanitize(&record.token_label);
    let base = if base.is_empty() { format!("tok{}", record.token_index) } else { base };
    let repeated = all.iter().any(|r| {
        r.block_id == record.block_id && r.frame == record.frame && r.token_index != record.token_index && r.token_label == record.token_label
    });
    if repeated {
        format!("{base}-{}", record.token_index)
    } else {
        base
    }
}

fn block_part(record: &AttentionRecord) -> String {
    match record.head {
        Some(h) => format!("{}-h{h}", record.block_id),
        None => record.block_id.clone(),
    }
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

/// Writes `<env>_<variant>_<block>_<token>_<frame>.png` per record and a
/// `<env>_<variant>_contact.png` grid (rows: block and token, columns:
/// frames). `frames[f]` is the image of frame index `f`.
pub fn emit_heatmaps(records: &[AttentionRecord], frames: &[&Frame], out_dir: &Path, env: &str, variant: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::with_capacity(records.len() + 1);
    let mut tiles = Vec::with_capacity(records.len());
    for r in records {
        let f = frames.get(r.frame).ok_or_else(|| Error::Contract(format!("no image for frame {}", r.frame)))?;
        let img = overlay(r, f);
        let name = format!("{env}_{variant}_{}_{}_{}.png", block_part(r), token_part(r, records), r.frame);
        let p = out_dir.join(name);
        save(&img, &p)?;
        paths.push(p);
        tiles.push(img);
    }
    if let Some(first) = tiles.first() {
        let mut rows: Vec<(String, Option<usize>, usize)> = Vec::new();
        for r in records {
            let key = (r.block_id.clone(), r.head, r.token_index);
            if !rows.contains(&key) {
                rows.push(key);
            }
        }
        let cols: Vec<usize> = records.iter().map(|r| r.frame).collect::<BTreeSet<_>>().into_iter().collect();
        let (tw, th) = (first.width(), first.height());
        let mut sheet = RgbImage::new(tw * cols.len() as u32, th * rows.len() as u32);
        for (r, img) in records.iter().zip(&tiles) {
            let row = rows.iter().position(|k| *k == (r.block_id.clone(), r.head, r.token_index)).expect("row listed");
            let col = cols.iter().position(|&c| c == r.frame).expect("column listed");
            image::imageops::replace(&mut sheet, img, i64::from(tw) * col as i64, i64::from(th) * row as i64);
        }
        let p = out_dir.join(format!("{env}_{variant}_{CONTACT_SHEET_SUFFIX}.png"));
        save(&sheet, &p)?;
        paths.push(p);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_filesystem_safe() {
        assert_eq!(sanitize("<bos>"), "bos");
        assert_eq!(sanitize("task_0"), "task_0");
        assert_eq!(sanitize("robot's"), "robots");
    }
}
