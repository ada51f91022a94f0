//! Pose overlays and heat-map mosaics.

use crate::data::{joint_color, Image};
use crate::metrics::Limb;
use crate::model::HeatMapSet;
use crate::softargmax::spatial_softmax;
use crate::error::Result;
use crate::tensor::Float;
use crate::Pose;

/// Color of limb `i` out of `n`: a half-intensity hue, never equal to a joint color.
pub fn limb_color(i: usize, n: usize) -> [Float; 3] {
    joint_color(i, n).map(|c| 0.5 * c)
}

fn draw_line(img: &mut Image, a: (isize, isize), b: (isize, isize), color: [Float; 3]) {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x >= 0 && y >= 0 && (x as usize) < img.width() && (y as usize) < img.height() {
            img.set_pixel(x as usize, y as usize, color);
        }
        if (x, y) == b {
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

/// Pixel containing normalized point `p` in an image of the given size.
fn pixel_of(p: [Float; 2], width: usize, height: usize) -> (isize, isize) {
    ((p[0] * width as Float).floor() as isize, (p[1] * height as Float).floor() as isize)
}

/// Draws `pose` over a dimmed grayscale copy of `image` enlarged `zoom`
/// times: limbs as lines in limb colors, joints as 3×3 squares in joint
/// colors centered on the pixel containing each joint. Joints flagged
/// invisible are not drawn.
pub fn render_overlay(image: &Image, pose: &Pose, limbs: &[Limb], zoom: usize) -> Image {
    let zoom = zoom.max(1);
    let (w, h) = (image.width() * zoom, image.height() * zoom);
    let mut out = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let [r, g, b] = image.pixel(x / zoom, y / zoom);
            let gray = 0.25 + 0.5 * (0.299 * r + 0.587 * g + 0.114 * b).clamp(0.0, 1.0);
            out.set_pixel(x, y, [gray; 3]);
        }
    }
    let shown = |j: usize| pose.visibility.get(j).copied().unwrap_or(true);
    for (i, limb) in limbs.iter().enumerate() {
        if limb.a < pose.num_joints() && limb.b < pose.num_joints() && shown(limb.a) && shown(limb.b) {
            let a = pixel_of(pose.joints[limb.a], w, h);
            let b = pixel_of(pose.joints[limb.b], w, h);
            draw_line(&mut out, a, b, limb_color(i, limbs.len()));
        }
    }
    let nj = pose.num_joints();
    for (j, &p) in pose.joints.iter().enumerate() {
        if !shown(j) {
            continue;
        }
        let (cx, cy) = pixel_of(p, w, h);
        for y in cy - 1..=cy + 1 {
            for x in cx - 1..=cx + 1 {
                if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                    out.set_pixel(x as usize, y as usize, joint_color(j, nj));
                }
            }
        }
    }
    out
}

/// One row per joint: its detection map followed by its context maps,
/// each softmax-normalized, scaled to its own peak and tinted with the
/// joint color; cells are enlarged `zoom` times and separated by one pixel.
pub fn heatmap_mosaic(maps: &HeatMapSet, zoom: usize) -> Result<Image> {
    let zoom = zoom.max(1);
    let nj = maps.detection.shape()[0];
    let r = maps.resolution();
    let per_joint = maps.context.as_ref().map_or(0, |c| c.shape()[0] / nj);
    let cell = r * zoom;
    let cols = 1 + per_joint;
    let mut out = Image::new(cols * (cell + 1) + 1, nj * (cell + 1) + 1);
    let detection = spatial_softmax(&maps.detection)?;
    let context = maps.context.as_ref().map(spatial_softmax).transpose()?;
    for j in 0..nj {
        let color = joint_color(j, nj);
        for col in 0..cols {
            let probs = if col == 0 {
                detection.index_first(j)
            } else {
                context.as_ref().expect("context maps").index_first(j * per_joint + col - 1)
            };
            let peak = probs.data().iter().cloned().fold(0.0, Float::max).max(Float::MIN_POSITIVE);
            let (ox, oy) = (1 + col * (cell + 1), 1 + j * (cell + 1));
            for y in 0..cell {
                for x in 0..cell {
                    let v = probs.data()[(y / zoom) * r + x / zoom] / peak;
                    out.set_pixel(ox + x, oy + y, color.map(|c| c * v));
                }
            }
        }
    }
    Ok(out)
}
