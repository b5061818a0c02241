//! Manifest (one JSON record per line) and the `LVRI` image format: magic,
//! C, H, W as little-endian u32, then C·H·W little-endian f32.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BBox, Dataset, ImageData, SftInstance, Split, StoredImage, TaskKind};
use crate::error::{LvrError, Result};

pub const IMAGE_MAGIC: &[u8; 4] = b"LVRI";
pub const MANIFEST_VERSION: &str = "lvr-manifest-1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    format: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    id: usize,
    image: String,
    shape: [usize; 3],
    task: TaskKind,
    question: Vec<u32>,
    bbox: [usize; 4],
    answer: Vec<u32>,
    split: Split,
}

pub fn encode_image(shape: [usize; 3], pixels: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * pixels.len());
    out.extend_from_slice(IMAGE_MAGIC);
    for d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in pixels {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_image(bytes: &[u8]) -> Result<([usize; 3], Vec<f32>)> {
    if bytes.len() < 16 {
        return Err(LvrError::format(bytes.len() as u64, "image header truncated"));
    }
    if &bytes[..4] != IMAGE_MAGIC {
        return Err(LvrError::format(0, "bad image magic"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let shape = [dim(0), dim(1), dim(2)];
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| LvrError::format(4, "image dimensions overflow"))?;
    let payload = &bytes[16..];
    if payload.len() < 4 * n {
        return Err(LvrError::format(bytes.len() as u64, format!("payload truncated: expected {} bytes", 4 * n)));
    }
    if payload.len() > 4 * n {
        return Err(LvrError::format((16 + 4 * n) as u64, "trailing bytes after image payload"));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((shape, data))
}

/// Writes `manifest_path` and every image under its parent directory.
pub fn write_manifest(manifest_path: &Path, ds: &Dataset) -> Result<()> {
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    for img in &ds.images {
        let path = root.join(&img.path);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, encode_image(img.shape, &img.pixels()))?;
    }
    let mut out = Vec::new();
    serde_json::to_writer(&mut out, &ManifestHeader { format: MANIFEST_VERSION.into() }).map_err(|e| LvrError::format(0, e.to_string()))?;
    out.push(b'\n');
    for inst in &ds.instances {
        let img = &ds.images[inst.image];
        let rec = ManifestRecord {
            id: inst.id,
            image: img.path.clone(),
            shape: img.shape,
            task: inst.task,
            question: inst.question.clone(),
            bbox: [inst.bbox.x0, inst.bbox.y0, inst.bbox.x1, inst.bbox.y1],
            answer: inst.answer.clone(),
            split: inst.split,
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| LvrError::format(out.len() as u64, e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(manifest_path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_manifest(manifest_path: &Path) -> Result<Dataset> {
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let reader = BufReader::new(fs::File::open(manifest_path)?);
    let mut ds = Dataset::default();
    let mut by_path: HashMap<String, usize> = HashMap::new();
    let mut offset = 0u64;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line_len = line.len() as u64 + 1;
        if lineno == 0 {
            let h: ManifestHeader = serde_json::from_str(&line)
                .map_err(|e| LvrError::format(e.column() as u64, format!("manifest header: {e}")))?;
            if h.format != MANIFEST_VERSION {
                return Err(LvrError::format(0, format!("unsupported manifest format {:?}", h.format)));
            }
            offset += line_len;
            continue;
        }
        if line.trim().is_empty() {
            offset += line_len;
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| LvrError::format(offset + e.column().saturating_sub(1) as u64, format!("line {}: {e}", lineno + 1)))?;
        let image = match by_path.get(&rec.image) {
            Some(&i) => i,
            None => {
                let (shape, data) = decode_image(&fs::read(root.join(&rec.image))?).map_err(|e| match e {
                    LvrError::Format { offset, detail } => LvrError::format(offset, format!("{}: {detail}", rec.image)),
                    other => other,
                })?;
                if shape != rec.shape {
                    return Err(LvrError::format(offset, format!("{}: shape {shape:?} disagrees with manifest {:?}", rec.image, rec.shape)));
                }
                ds.images.push(StoredImage { path: rec.image.clone(), shape, data: ImageData::Raw(data) });
                by_path.insert(rec.image.clone(), ds.images.len() - 1);
                ds.images.len() - 1
            }
        };
        let [x0, y0, x1, y1] = rec.bbox;
        let bbox = BBox::new(x0, y0, x1, y1);
        bbox.validate(rec.shape[1], rec.shape[2]).map_err(|e| LvrError::format(offset, e.to_string()))?;
        ds.instances.push(SftInstance {
            id: rec.id,
            image,
            task: rec.task,
            question: rec.question,
            bbox,
            answer: rec.answer,
            split: rec.split,
        });
        offset += line_len;
    }
    if offset == 0 {
        return Err(LvrError::format(0, "empty manifest"));
    }
    Ok(ds)
}
