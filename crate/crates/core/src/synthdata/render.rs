use super::scene::{AttrScene, ShapeKind};
use crate::error::{AttrError, Result};

pub const MIN_SIDE: usize = 16;

/// An RGB image stored row-major HWC with values in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(AttrError::InvalidInput(format!(
                "{height}x{width} image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AttrError::InvalidInput("image has non-finite values".into()));
        }
        Ok(Image { height, width, data })
    }

    pub fn zeros(side: usize) -> Self {
        Image { height: side, width: side, data: vec![0.0; side * side * 3] }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Byte levels under the linear map [-1, 1] -> [0, 255].
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_level(v)).collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(height, width, bytes.iter().map(|&b| from_level(b)).collect())
    }

    pub fn clamp(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(-1.0, 1.0);
        }
    }
}

pub fn to_level(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_level(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// Color in [0, 1] quantized to the nearest 8-bit level.
pub(crate) fn quantize(rgb: [f32; 3], factor: f32) -> [u8; 3] {
    rgb.map(|c| ((c * factor).clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Whether the pixel with center `(px, py)` (fractions of the side) lies
/// inside the shape.
pub(crate) fn covers(shape: ShapeKind, cx: f32, cy: f32, r: f32, px: f32, py: f32) -> bool {
    let dx = px - cx;
    let dy = py - cy;
    match shape {
        ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        ShapeKind::Square => dx.abs() <= 0.82 * r && dy.abs() <= 0.82 * r,
        ShapeKind::Triangle => {
            (-r..=0.5 * r).contains(&dy) && dx.abs() <= (dy + r) / 3f32.sqrt()
        }
    }
}

/// Foreground coverage of a scene as a row-major boolean mask.
pub fn mask(scene: &AttrScene, side: usize) -> Vec<bool> {
    let (cx, cy) = scene.position.center();
    let r = scene.size.radius();
    let s = side as f32;
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let px = (x as f32 + 0.5) / s;
            let py = (y as f32 + 0.5) / s;
            out.push(covers(scene.shape, cx, cy, r, px, py));
        }
    }
    out
}

/// Rasterize a scene without anti-aliasing. Pixels take exactly one of two
/// colors, each quantized to 8-bit levels so PPM storage is lossless.
pub fn render(scene: &AttrScene, side: usize) -> Result<Image> {
    if side < MIN_SIDE {
        return Err(AttrError::InvalidInput(format!(
            "image side {side} is below the minimum {MIN_SIDE}"
        )));
    }
    let k = scene.brightness.factor();
    let fg = quantize(scene.fg_color.rgb(), k).map(from_level);
    let bg = quantize(scene.bg_color.rgb(), k).map(from_level);
    let mut data = Vec::with_capacity(side * side * 3);
    for inside in mask(scene, side) {
        data.extend_from_slice(if inside { &fg } else { &bg });
    }
    Ok(Image { height: side, width: side, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::scene::*;

    fn red_circle(brightness: Brightness) -> AttrScene {
        AttrScene {
            shape: ShapeKind::Circle,
            fg_color: FgColor::Red,
            size: Size::Large,
            position: Position::Center,
            bg_color: BgColor::White,
            brightness,
        }
    }

    #[test]
    fn center_of_large_centered_circle_is_foreground() {
        let img = render(&red_circle(Brightness::Normal), 32).unwrap();
        let expect = FgColor::Red.rgb().map(|c| 2.0 * c - 1.0);
        for (got, want) in img.pixel(16, 16).iter().zip(expect) {
            assert!((got - want).abs() <= 2.0 / 255.0);
        }
    }

    #[test]
    fn identical_scenes_render_identically() {
        for scene in AttrScene::enumerate().into_iter().step_by(37) {
            let a = render(&scene, 32).unwrap();
            let b = render(&scene, 32).unwrap();
            let bits = |i: &Image| i.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b));
        }
    }

    #[test]
    fn dim_is_point_six_of_normal() {
        for scene in AttrScene::enumerate().into_iter().step_by(11) {
            let dim = render(&scene.with_value(AttrId::ImageBrightness, 0), 32).unwrap();
            let normal = render(&scene.with_value(AttrId::ImageBrightness, 1), 32).unwrap();
            for (d, n) in dim.data.iter().zip(&normal.data) {
                let d01 = (d + 1.0) / 2.0;
                let n01 = (n + 1.0) / 2.0;
                assert!((d01 - 0.6 * n01).abs() <= 1.0 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn too_small_side_is_rejected() {
        assert!(render(&red_circle(Brightness::Normal), 15).is_err());
    }

    #[test]
    fn masks_are_distinct_for_every_geometry() {
        let mut seen = std::collections::HashMap::new();
        for scene in AttrScene::enumerate() {
            let key = (scene.shape, scene.size, scene.position);
            let m = mask(&scene, 32);
            assert!(m.iter().any(|&b| b));
            assert!(m.iter().filter(|&&b| b).count() < m.len() / 2);
            seen.insert(key, m);
        }
        let masks: Vec<_> = seen.values().collect();
        assert_eq!(masks.len(), 45);
        for i in 0..masks.len() {
            for j in i + 1..masks.len() {
                assert_ne!(masks[i], masks[j]);
            }
        }
    }

    #[test]
    fn colors_stay_distinct_after_brightness() {
        let mut levels = Vec::new();
        for b in Brightness::ALL {
            for c in FgColor::ALL {
                levels.push(quantize(c.rgb(), b.factor()));
            }
            for c in BgColor::ALL {
                levels.push(quantize(c.rgb(), b.factor()));
            }
        }
        for i in 0..levels.len() {
            for j in i + 1..levels.len() {
                assert_ne!(levels[i], levels[j]);
            }
        }
    }

    #[test]
    fn byte_levels_round_trip() {
        for b in 0..=255u8 {
            assert_eq!(to_level(from_level(b)), b);
        }
    }
}
