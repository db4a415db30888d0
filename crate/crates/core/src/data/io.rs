use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::AnnotatedImage;
use crate::error::{Error, Result};
use crate::groundtruth::{in_bounds, Point};
use crate::tensor::Tensor;

/// JSON label document for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelFile {
    pub image: String,
    pub points: Vec<[f64; 2]>,
}

fn annotation_err(path: &Path, line: Option<usize>, msg: impl Into<String>) -> Error {
    Error::Annotation {
        file: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Reads `.json` labels, or the plain-text `x y` per line variant for any
/// other extension. Points are not bounds-checked here.
pub fn load_annotation(path: &Path) -> Result<Vec<Point>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        let doc: LabelFile = serde_json::from_str(&text)
            .map_err(|e| annotation_err(path, Some(e.line()), e.to_string()))?;
        return Ok(doc.points.iter().map(|&[x, y]| Point::new(x, y)).collect());
    }
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(|c: char| c.is_whitespace() || c == ',').filter(|f| !f.is_empty()).collect();
        let parsed: Option<Vec<f64>> = fields.iter().map(|f| f.parse().ok()).collect();
        match parsed.as_deref() {
            Some(&[x, y]) if x.is_finite() && y.is_finite() => points.push(Point::new(x, y)),
            _ => return Err(annotation_err(path, Some(i + 1), format!("expected `x y`, got `{line}`"))),
        }
    }
    Ok(points)
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Writes the first channel as an 8-bit grayscale PNG.
pub fn save_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (_, h, w) = image.chw()?;
    let buf: Vec<u8> = image.data()[..h * w]
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::GrayImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer sized to image")
        .save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    files.retain(|p| p.is_file());
    files.sort();
    Ok(files)
}

/// Loads `root/images/*.png` with labels matched by file stem, in
/// lexicographic order.
pub fn load_dataset(root: &Path) -> Result<Vec<AnnotatedImage>> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let labels = root.join("labels");
    let mut items = Vec::new();
    for path in sorted_files(&root.join("images"))? {
        if !path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            continue;
        }
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let label = [labels.join(format!("{stem}.json")), labels.join(format!("{stem}.txt"))]
            .into_iter()
            .find(|p| p.is_file())
            .ok_or_else(|| Error::Dataset(format!("no annotation for image {}", path.display())))?;
        let image = load_image(&path)?;
        let (_, h, w) = image.chw()?;
        let points = load_annotation(&label)?;
        if let Some(p) = points.iter().find(|p| !in_bounds(p, h, w)) {
            return Err(annotation_err(&label, None, format!("point ({}, {}) outside {h}x{w} image", p.x, p.y)));
        }
        items.push(AnnotatedImage {
            name: stem,
            image,
            points,
        });
    }
    Ok(items)
}

/// Writes images as grayscale PNG and labels as JSON under `root`.
pub fn write_dataset(root: &Path, items: &[AnnotatedImage]) -> Result<()> {
    let (images, labels) = (root.join("images"), root.join("labels"));
    for dir in [&images, &labels] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for item in items {
        let img_path = images.join(format!("{}.png", item.name));
        save_image(&img_path, &item.image)?;
        let doc = LabelFile {
            image: format!("images/{}.png", item.name),
            points: item.points.iter().map(|p| [p.x, p.y]).collect(),
        };
        let label_path = labels.join(format!("{}.json", item.name));
        fs::write(&label_path, serde_json::to_string(&doc)?).map_err(|e| Error::io(&label_path, e))?;
    }
    Ok(())
}
