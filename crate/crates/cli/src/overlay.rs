use mvtt::image_io::{GrayImage, RgbImage};
use mvtt::phantom::{Mask, Volume};

pub const SCALE: usize = 4;
const PRED_GRAY: u8 = 255;
const TRUTH_GRAY: u8 = 0;
const PRED_RGB: [u8; 3] = [0, 255, 0];
const TRUTH_RGB: [u8; 3] = [255, 0, 0];

/// In-slice contour: mask voxels of axial slice `z` with a 4-neighbour outside the mask.
fn contour(mask: &Mask, z: usize) -> Vec<(usize, usize)> {
    let (nx, ny, _) = mask.extents();
    let mut out = Vec::new();
    for y in 0..ny {
        for x in 0..nx {
            if !mask.get(x, y, z) {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x + 1 == nx
                || y + 1 == ny
                || !mask.get(x - 1, y, z)
                || !mask.get(x + 1, y, z)
                || !mask.get(x, y - 1, z)
                || !mask.get(x, y + 1, z);
            if edge {
                out.push((x, y));
            }
        }
    }
    out
}

/// Axial slice `z` scaled to 8 bits by the volume maximum.
fn slice_image(volume: &Volume, z: usize) -> GrayImage {
    let (nx, ny, _) = volume.extents();
    let max = volume.intensities().iter().fold(0.0f64, |a, &b| a.max(b));
    let plane = &volume.intensities()[z * nx * ny..(z + 1) * nx * ny];
    let pixels = plane
        .iter()
        .map(|&v| if max > 0.0 { (255.0 * v / max + 0.5).floor() as u8 } else { 0 })
        .collect();
    GrayImage::new(nx, ny, pixels)
}

/// Grayscale and colour overlays of one slice. Prediction contours are
/// white / green, ground truth black / red; where both fall on a voxel the
/// prediction wins.
pub fn render(volume: &Volume, z: usize, pred: Option<&Mask>, truth: Option<&Mask>) -> (GrayImage, RgbImage) {
    let base = slice_image(volume, z).upscale(SCALE);
    let w = base.width();
    let mut gray = base.pixels().to_vec();
    let mut rgb = RgbImage::from_gray(&base);
    for (mask, g, c) in [(truth, TRUTH_GRAY, TRUTH_RGB), (pred, PRED_GRAY, PRED_RGB)] {
        let Some(mask) = mask else { continue };
        for (x, y) in contour(mask, z) {
            for dy in 0..SCALE {
                for dx in 0..SCALE {
                    let (px, py) = (x * SCALE + dx, y * SCALE + dy);
                    gray[py * w + px] = g;
                    rgb.put(px, py, c);
                }
            }
        }
    }
    (GrayImage::new(w, base.height(), gray), rgb)
}
