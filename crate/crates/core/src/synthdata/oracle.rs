//! Ground-truth attribute reader. Clean renders are inverted exactly; any
//! other image is matched against every template render by cosine distance.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use super::names::AttributeName;
use super::render::{mask, quantize, render, to_level, Image};
use super::scene::{AttrId, AttrScene, BgColor, Brightness, FgColor, Position, ShapeKind, Size};

/// Ratio above which the best and runner-up distances count as tied.
pub const CONFIDENCE_RATIO: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Classification {
    pub value: usize,
    /// Best and runner-up distances are within 5% of each other.
    pub low_confidence: bool,
    /// The image is a clean render and `value` is its true field.
    pub exact: bool,
}

type Geometry = (ShapeKind, Size, Position);

struct Templates {
    side: usize,
    geometries: Vec<(Geometry, Vec<bool>)>,
    scenes: Vec<AttrScene>,
    /// Unit-norm template renders, one row per scene.
    unit: OnceLock<Vec<f32>>,
}

impl Templates {
    fn build(side: usize) -> Self {
        let mut geometries = Vec::new();
        let base = AttrScene::enumerate()[0];
        for &shape in ShapeKind::ALL {
            for &size in Size::ALL {
                for &position in Position::ALL {
                    let s = AttrScene { shape, size, position, ..base };
                    geometries.push(((shape, size, position), mask(&s, side)));
                }
            }
        }
        Templates { side, geometries, scenes: AttrScene::enumerate(), unit: OnceLock::new() }
    }

    fn unit(&self) -> &[f32] {
        self.unit.get_or_init(|| {
            let dim = self.side * self.side * 3;
            let mut out = Vec::with_capacity(self.scenes.len() * dim);
            for s in &self.scenes {
                let img = render(s, self.side).expect("template side is valid");
                let norm = img.data.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                out.extend(img.data.iter().map(|&v| (v as f64 / norm) as f32));
            }
            out
        })
    }
}

fn templates(side: usize) -> Arc<Templates> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Templates>>>> = OnceLock::new();
    let mut cache = CACHE.get_or_init(Default::default).lock().unwrap_or_else(|e| e.into_inner());
    cache.entry(side).or_insert_with(|| Arc::new(Templates::build(side))).clone()
}

/// Recover the scene of a clean render, or `None` if the image is not one.
pub fn decode_exact(image: &Image) -> Option<AttrScene> {
    if image.height != image.width || image.height < super::render::MIN_SIDE {
        return None;
    }
    let bytes = image.to_bytes();
    let pixels: Vec<[u8; 3]> = bytes.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let mut counts: HashMap<[u8; 3], usize> = HashMap::new();
    for p in &pixels {
        *counts.entry(*p).or_default() += 1;
    }
    if counts.len() != 2 {
        return None;
    }
    let (&bg, _) = counts.iter().max_by_key(|(p, &n)| (n, **p))?;
    let (&fg, _) = counts.iter().find(|(p, _)| **p != bg)?;

    let (brightness, bg_color) = Brightness::ALL.iter().find_map(|&b| {
        BgColor::ALL
            .iter()
            .find(|c| quantize(c.rgb(), b.factor()) == bg)
            .map(|&c| (b, c))
    })?;
    let fg_color = *FgColor::ALL.iter().find(|c| quantize(c.rgb(), brightness.factor()) == fg)?;

    let coverage: Vec<bool> = pixels.iter().map(|p| *p == fg).collect();
    let t = templates(image.height);
    let &((shape, size, position), _) = t.geometries.iter().find(|(_, m)| *m == coverage)?;
    let scene = AttrScene { shape, fg_color, size, position, bg_color, brightness };
    let check = render(&scene, image.height).ok()?;
    (check.data.iter().map(|&v| to_level(v)).eq(bytes.iter().copied())).then_some(scene)
}

/// Cosine distance from the image to every template, in template order.
fn template_distances(image: &Image, t: &Templates) -> Vec<f64> {
    let dim = image.data.len();
    let norm = image.data.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return vec![1.0; t.scenes.len()];
    }
    t.unit()
        .chunks_exact(dim)
        .map(|row| {
            let dot: f32 = row.iter().zip(&image.data).map(|(a, b)| a * b).sum();
            1.0 - dot as f64 / norm
        })
        .collect()
}

fn from_distances(t: &Templates, dist: &[f64], attr: AttrId) -> Classification {
    let mut best = vec![f64::INFINITY; attr.cardinality()];
    for (s, &d) in t.scenes.iter().zip(dist) {
        let v = s.value(attr);
        best[v] = best[v].min(d);
    }
    let mut order: Vec<usize> = (0..best.len()).collect();
    order.sort_by(|&a, &b| best[a].total_cmp(&best[b]).then(a.cmp(&b)));
    let (d1, d2) = (best[order[0]], best[order[1]]);
    Classification { value: order[0], low_confidence: d1 >= CONFIDENCE_RATIO * d2, exact: false }
}

/// Read every attribute of an image at once.
pub fn classify_all(image: &Image) -> [Classification; 6] {
    if let Some(scene) = decode_exact(image) {
        return std::array::from_fn(|i| Classification {
            value: scene.values()[i],
            low_confidence: false,
            exact: true,
        });
    }
    if image.height != image.width || image.height < super::render::MIN_SIDE {
        return [Classification { value: 0, low_confidence: true, exact: false }; 6];
    }
    let t = templates(image.height);
    let dist = template_distances(image, &t);
    std::array::from_fn(|i| from_distances(&t, &dist, AttrId::ALL[i]))
}

pub fn oracle_classify(image: &Image, attr: AttributeName) -> Classification {
    classify_all(image)[attr.id.index()]
}
