//! Dataset directory layout:
//!
//! ```text
//! DIR/meta.json      spec, split lists, per-image identity and orientation
//! DIR/labels.csv     image,identity,orientation_radians,split
//! DIR/images/*.ppm   binary PPM (P6, maxval 255)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{Dataset, LabeledImage, Split, SyntheticSpec};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub name: String,
    pub file: String,
    pub identity: usize,
    pub orientation: f64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitLists {
    pub train: Vec<String>,
    pub query: Vec<String>,
    pub gallery: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub spec: SyntheticSpec,
    pub splits: SplitLists,
    pub images: Vec<ImageRecord>,
}

/// Writes a `[3,H,W]` image in [0,1] as binary PPM.
pub fn write_ppm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::format(path, format!("expected [3,H,W] image, got {:?}", img.shape())));
    };
    if c != 3 {
        return Err(Error::format(path, format!("expected 3 channels, got {c}")));
    }
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    buf.reserve(3 * h * w);
    let d = img.data();
    for i in 0..h * w {
        for ch in 0..3 {
            buf.push((d[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a binary PPM into a `[3,H,W]` tensor scaled to [0,1].
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut token = || -> Option<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (start < pos).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token();
    let dims: Vec<Option<usize>> = (0..3).map(|_| token().and_then(|t| t.parse().ok())).collect();
    if magic.as_deref() != Some("P6") {
        return Err(Error::format(path, "not a binary PPM (P6)"));
    }
    let (Some(w), Some(h), Some(255)) = (dims[0], dims[1], dims[2]) else {
        return Err(Error::format(path, "bad PPM header (need width, height, maxval 255)"));
    };
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let raster = bytes
        .get(pos..pos + 3 * w * h)
        .ok_or_else(|| Error::format(path, "truncated raster"))?;
    let mut data = vec![0.0f32; 3 * w * h];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * w * h + i] = px[ch] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut records = Vec::new();
    for split in [Split::Train, Split::Query, Split::Gallery] {
        for im in ds.split(split) {
            let file = format!("images/{}.ppm", im.name);
            write_ppm(&dir.join(&file), &im.pixels)?;
            records.push(ImageRecord {
                name: im.name.clone(),
                file,
                identity: im.identity,
                orientation: im.orientation,
                split,
            });
        }
    }
    let names = |s: Split| ds.split(s).iter().map(|im| im.name.clone()).collect();
    let meta = DatasetMeta {
        spec: ds.spec.clone(),
        splits: SplitLists {
            train: names(Split::Train),
            query: names(Split::Query),
            gallery: names(Split::Gallery),
        },
        images: records,
    };
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_vec_pretty(&meta).map_err(|e| Error::json(&meta_path, e))?;
    write_file(&meta_path, &json)?;

    let mut csv = Vec::new();
    writeln!(csv, "image,identity,orientation_radians,split").expect("in-memory write");
    for r in &meta.images {
        writeln!(csv, "{},{},{},{}", r.file, r.identity, r.orientation, r.split.as_str()).expect("in-memory write");
    }
    write_file(&dir.join("labels.csv"), &csv)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let raw = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_slice(&raw).map_err(|e| Error::json(&meta_path, e))?;
    let mut ds = Dataset {
        spec: meta.spec.clone(),
        train: Vec::new(),
        query: Vec::new(),
        gallery: Vec::new(),
    };
    for r in &meta.images {
        let pixels = read_ppm(&dir.join(&r.file))?;
        let im = LabeledImage {
            name: r.name.clone(),
            pixels,
            identity: r.identity,
            orientation: r.orientation,
        };
        match r.split {
            Split::Train => ds.train.push(im),
            Split::Query => ds.query.push(im),
            Split::Gallery => ds.gallery.push(im),
        }
    }
    let listed = |s: Split| -> Vec<&str> { ds.split(s).iter().map(|im| im.name.as_str()).collect() };
    if listed(Split::Train) != meta.splits.train
        || listed(Split::Query) != meta.splits.query
        || listed(Split::Gallery) != meta.splits.gallery
    {
        return Err(Error::format(&meta_path, "split lists disagree with image records"));
    }
    Ok(ds)
}
