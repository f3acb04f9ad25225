//! Dataset directories: `manifest.json`, `labels.csv` (`filename,label`) and
//! binary PPM images under `images/`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

use super::{Dataset, DatasetManifest, ImageBatch};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.csv";
const IMAGE_DIR: &str = "images";

/// Encodes a `3 × H × W` image in `[0, 1]` as binary PPM with maxval 255.
pub fn write_ppm(img: &[f32], height: usize, width: usize) -> Vec<u8> {
    let plane = height * width;
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for i in 0..plane {
        for c in 0..3 {
            out.push((img[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Decodes a binary PPM into a `3 × H × W` image in `[0, 1]`.
pub fn read_ppm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::corrupt(path, "truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    if fields[0] != "P6" {
        return Err(Error::Data(format!(
            "{}: only binary PPM (P6) is supported, found {:?}",
            path.display(),
            fields[0]
        )));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::corrupt(path, format!("bad PPM header field {s:?}")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Data(format!(
            "{}: PPM maxval must be 255, got {maxval}",
            path.display()
        )));
    }
    let plane = w * h;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != 3 * plane {
        return Err(Error::corrupt(
            path,
            format!(
                "expected {} raster bytes, found {}",
                3 * plane,
                raster.len()
            ),
        ));
    }
    let mut img = vec![0.0; 3 * plane];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            img[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Ok((h, w, img))
}

#[derive(Serialize, Deserialize)]
struct LabelRow {
    filename: String,
    label: usize,
}

/// Writes a dataset directory, creating it if needed.
pub fn save_dataset(dir: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    let images = dir.join(IMAGE_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::storage(&images, e))?;
    let s = data.batch.image_size();
    let mut labels = csv::Writer::from_writer(Vec::new());
    for i in 0..data.len() {
        let filename = format!("{i:06}.ppm");
        write_atomic(
            &images.join(&filename),
            &write_ppm(data.batch.image(i), s, s),
        )?;
        labels.serialize(LabelRow {
            filename: format!("{IMAGE_DIR}/{filename}"),
            label: data.batch.labels[i],
        })?;
    }
    let labels = labels
        .into_inner()
        .map_err(|e| Error::storage(dir.join(LABELS_FILE), e.into_error()))?;
    write_atomic(&dir.join(LABELS_FILE), &labels)?;
    let mut manifest = serde_json::to_vec_pretty(&data.manifest)?;
    manifest.push(b'\n');
    write_atomic(&dir.join(MANIFEST_FILE), &manifest)
}

/// Reads a dataset directory. Without a manifest, the class count is inferred
/// from the labels and the name from the directory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let labels_path = dir.join(LABELS_FILE);
    let mut reader = csv::Reader::from_path(&labels_path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::Data(format!("missing {}", labels_path.display())),
        _ => Error::Csv(e),
    })?;
    let rows: Vec<LabelRow> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()?;
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "{} lists no images",
            labels_path.display()
        )));
    }
    let mut size = None;
    let mut pixels = Vec::new();
    for row in &rows {
        let path = dir.join(&row.filename);
        let bytes = fs::read(&path).map_err(|e| Error::storage(&path, e))?;
        let (h, w, img) = read_ppm(&bytes, &path)?;
        if h != w || size.map_or(false, |s| s != h) {
            return Err(Error::Data(format!(
                "{}: images must be square and equally sized, got {w}x{h}",
                path.display()
            )));
        }
        size = Some(h);
        pixels.extend(img);
    }
    let s = size.expect("at least one image");
    let labels: Vec<usize> = rows.iter().map(|r| r.label).collect();
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = if manifest_path.exists() {
        let text = fs::read(&manifest_path).map_err(|e| Error::storage(&manifest_path, e))?;
        serde_json::from_slice(&text)?
    } else {
        DatasetManifest {
            name: dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            num_classes: labels.iter().max().map_or(0, |m| m + 1),
            num_samples: labels.len(),
            image_size: s,
            spec: None,
            corruption: None,
            split: None,
        }
    };
    let images = Tensor::new(vec![labels.len(), 3, s, s], pixels)?;
    Dataset::new(manifest, ImageBatch::new(images, labels, usize::MAX)?)
}
