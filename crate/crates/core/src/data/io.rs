//! Dataset directories: binary PPM images plus a JSON-lines annotation file.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bbox::{BBox, GtBox};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

#[derive(Debug, Serialize, Deserialize)]
struct BoxRecord {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    class: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRecord {
    image: String,
    boxes: Vec<BoxRecord>,
}

/// Writes a `(1, 3, H, W)` image in `[0, 1]` as 8-bit P6.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let [n, c, h, w] = image.dims();
    if n != 1 || c != 3 {
        return Err(Error::Data(format!("expected a (1, 3, H, W) image, got {:?}", image.dims())));
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let plane = h * w;
    let data = image.data();
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            bytes.push((data[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Reads an 8-bit P6 image into a `(1, 3, H, W)` tensor in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
    let mut pos = 0;
    if header_token(&bytes, &mut pos).as_deref() != Some("P6") {
        return Err(bad("not a binary PPM (P6)"));
    }
    let mut num = || {
        header_token(&bytes, &mut pos)
            .and_then(|t| t.parse::<usize>().ok())
            .ok_or_else(|| bad("malformed header"))
    };
    let (w, h, max) = (num()?, num()?, num()?);
    if max != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let start = pos + 1;
    let plane = w * h;
    let pixels = bytes.get(start..start + 3 * plane).ok_or_else(|| bad("truncated pixel data"))?;
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for ch in 0..3 {
            data[ch * plane + i] = pixels[3 * i + ch] as f32 / 255.0;
        }
    }
    Tensor::from_vec([1, 3, h, w], data)
}

fn image_name(i: usize) -> String {
    format!("{i:06}.ppm")
}

pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut ann = BufWriter::new(File::create(dir.join(ANNOTATIONS_FILE))?);
    for (i, s) in samples.iter().enumerate() {
        let name = image_name(i);
        write_ppm(&dir.join(&name), &s.image)?;
        let rec = AnnotationRecord {
            image: name,
            boxes: s
                .boxes
                .iter()
                .map(|b| BoxRecord {
                    cx: b.bbox.cx,
                    cy: b.bbox.cy,
                    w: b.bbox.w,
                    h: b.bbox.h,
                    class: b.class_id,
                })
                .collect(),
        };
        serde_json::to_writer(&mut ann, &rec)?;
        ann.write_all(b"\n")?;
    }
    ann.flush()?;
    Ok(())
}

/// Loads every sample listed in the annotation file, in file order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let path = dir.join(ANNOTATIONS_FILE);
    let file = File::open(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), line_no + 1)))?;
        let image = read_ppm(&dir.join(&rec.image))?;
        let boxes = rec
            .boxes
            .into_iter()
            .map(|b| GtBox {
                bbox: BBox::new(b.cx, b.cy, b.w, b.h),
                class_id: b.class,
            })
            .collect();
        out.push(Sample { image, boxes });
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{} lists no images", path.display())));
    }
    Ok(out)
}
