//! Dataset storage: binary PPM images plus one JSON annotation per line.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::oracle::decode_exact;
use super::pair::{sample_pair, Annotation, PairRecord};
use super::render::Image;
use crate::error::{AttrError, Result};
use crate::seed;

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.to_bytes());
    fs::write(path, out)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    parse_ppm(&bytes).map_err(|e| AttrError::Data(format!("{}: {e}", path.display())))
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(format!("expected P6, found {:?}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(format!("only 8-bit images are supported, maxval {max}"));
    }
    let body = &bytes[pos + 1..];
    if body.len() != w * h * 3 {
        return Err(format!("expected {} pixel bytes, found {}", w * h * 3, body.len()));
    }
    Image::from_bytes(h, w, body).map_err(|e| e.to_string())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    image_x: String,
    image_y: String,
    positive: Vec<Annotation>,
    negative: Vec<Annotation>,
}

/// Pair `i` of a dataset with base seed `seed`.
pub fn dataset_pair(seed: u64, i: usize, min_positives: usize) -> Result<PairRecord> {
    sample_pair(seed::derive(seed, i as u64), min_positives)
}

pub fn generate(seed: u64, count: usize, min_positives: usize) -> Result<Vec<PairRecord>> {
    (0..count).map(|i| dataset_pair(seed, i, min_positives)).collect()
}

/// Write images under `images/` and the annotation file into `dir`.
pub fn write_dataset(dir: &Path, pairs: &[PairRecord], side: usize) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    let mut out = BufWriter::new(fs::File::create(dir.join(ANNOTATIONS_FILE))?);
    for (i, p) in pairs.iter().enumerate() {
        let rec = JsonRecord {
            image_x: format!("images/{i:06}_x.ppm"),
            image_y: format!("images/{i:06}_y.ppm"),
            positive: p.positives.clone(),
            negative: p.negatives.clone(),
        };
        write_ppm(&dir.join(&rec.image_x), &p.image_x(side)?)?;
        write_ppm(&dir.join(&rec.image_y), &p.image_y(side)?)?;
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Load a dataset written by [`write_dataset`]. Scenes are recovered from the
/// images and checked against the annotations.
pub fn read_dataset(dir: &Path) -> Result<Vec<PairRecord>> {
    let file = fs::File::open(dir.join(ANNOTATIONS_FILE))?;
    let mut pairs = Vec::new();
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line)?;
        let bad = |msg: String| AttrError::Data(format!("line {}: {msg}", line_no + 1));
        let scene = |rel: &str| -> Result<_> {
            let img = read_ppm(&dir.join(rel))?;
            decode_exact(&img).ok_or_else(|| bad(format!("{rel} is not a clean render")))
        };
        let (sx, sy) = (scene(&rec.image_x)?, scene(&rec.image_y)?);
        let mut forms = [0usize; 6];
        for a in rec.positive.iter().chain(&rec.negative) {
            forms[a.name.id.index()] = a.name.form();
        }
        let pair = PairRecord::annotate(sx, sy, forms)?;
        if pair.positives != rec.positive || pair.negatives != rec.negative {
            return Err(bad("annotations disagree with the images".into()));
        }
        pairs.push(pair);
    }
    if pairs.is_empty() {
        return Err(AttrError::Data(format!("{} holds no pairs", dir.display())));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::render::render;
    use crate::synthdata::scene::AttrScene;

    #[test]
    fn ppm_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        for scene in AttrScene::enumerate().into_iter().step_by(101) {
            let img = render(&scene, 32).unwrap();
            write_ppm(&path, &img).unwrap();
            assert_eq!(read_ppm(&path).unwrap(), img);
        }
    }

    #[test]
    fn ppm_header_is_p6() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        write_ppm(&path, &Image::zeros(16)).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n16 16\n255\n"));
        assert_eq!(bytes.len(), 13 + 16 * 16 * 3);
    }

    #[test]
    fn malformed_ppm_is_rejected() {
        assert!(parse_ppm(b"P3\n1 1\n255\n000").is_err());
        assert!(parse_ppm(b"P6\n2 2\n255\n\x00").is_err());
        assert!(parse_ppm(b"P6\n2").is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = generate(7, 12, 1).unwrap();
        write_dataset(dir.path(), &pairs, 32).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), pairs);
    }

    #[test]
    fn annotation_lines_use_the_documented_schema() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &generate(1, 2, 3).unwrap(), 32).unwrap();
        let text = fs::read_to_string(dir.path().join(ANNOTATIONS_FILE)).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let keys: Vec<_> = first.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys.len(), 4);
        for k in ["image_x", "image_y", "positive", "negative"] {
            assert!(first.get(k).is_some(), "{k}");
        }
        let ann = &first["positive"][0];
        assert!(ann["name"].is_string() && ann["desc"].is_string());
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(a.path(), &generate(7, 10, 1).unwrap(), 32).unwrap();
        write_dataset(b.path(), &generate(7, 10, 1).unwrap(), 32).unwrap();
        let read = |d: &Path| fs::read(d.join(ANNOTATIONS_FILE)).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
    }
}
