//! Qualitative panel rendering: one row per output frame, columns are the
//! deterministic mean, each generated member, and the target.

use image::{Rgb, RgbImage};
use scalesr_core::field::{Field, FieldSequence};
use std::path::Path;

const SEP: u32 = 2;

/// Shared precipitation colormap: white through blue to yellow at the top of
/// the normalized range.
fn colormap(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    let (r, g, b) = if v < 0.05 {
        (1.0, 1.0, 1.0)
    } else if v < 0.5 {
        let t = (v - 0.05) / 0.45;
        (1.0 - 0.8 * t, 1.0 - 0.5 * t, 1.0)
    } else {
        let t = (v - 0.5) / 0.5;
        (0.2 + 0.8 * t, 0.5 + 0.5 * t, 1.0 - t)
    };
    Rgb([(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8])
}

fn blit(img: &mut RgbImage, field: &Field, x0: u32, y0: u32) {
    for y in 0..field.height() {
        for x in 0..field.width() {
            img.put_pixel(x0 + x as u32, y0 + y as u32, colormap(field.at(y, x)));
        }
    }
}

/// Grid layout: `T` rows by `1 + K + 1` columns (mean, members, target).
pub fn render_panel(
    det_mean: &FieldSequence,
    members: &[FieldSequence],
    target: &FieldSequence,
    out: &Path,
) -> anyhow::Result<()> {
    let (h, w) = det_mean.frame_shape();
    let rows = det_mean.len() as u32;
    let cols = (1 + members.len() + 1) as u32;
    let (hw, ww) = (h as u32, w as u32);
    let width = cols * ww + (cols + 1) * SEP;
    let height = rows * hw + (rows + 1) * SEP;
    let mut img = RgbImage::from_pixel(width, height, Rgb([40, 40, 40]));
    for row in 0..rows {
        let y0 = SEP + row * (hw + SEP);
        let frame = row as usize;
        blit(&mut img, &det_mean.frames()[frame], SEP, y0);
        for (k, m) in members.iter().enumerate() {
            let x0 = SEP + (1 + k as u32) * (ww + SEP);
            blit(&mut img, &m.frames()[frame], x0, y0);
        }
        let x0 = SEP + (cols - 1) * (ww + SEP);
        blit(&mut img, &target.frames()[frame], x0, y0);
    }
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(out)?;
    Ok(())
}
