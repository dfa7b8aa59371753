//! Image datasets laid out as one subdirectory per class.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use regex::Regex;
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const EXTENSIONS: &[&str] = &["png", "ppm", "pgm", "pnm", "pbm"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMode {
    /// Scale to the configured width, keeping the aspect ratio.
    FixedWidthKeepAspect,
    /// Scale to a `width × width` square.
    Square,
    /// Keep the decoded size.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorMode {
    Rgb,
    Gray,
}

impl ColorMode {
    pub fn channels(self) -> usize {
        match self {
            ColorMode::Rgb => 3,
            ColorMode::Gray => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub resize_width: usize,
    pub resize_mode: ResizeMode,
    pub color: ColorMode,
    /// Regex applied to each image's path relative to the root; the first
    /// capture group (or the whole match) is the sample id.
    pub group_pattern: Option<String>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            root: PathBuf::new(),
            resize_width: 320,
            resize_mode: ResizeMode::FixedWidthKeepAspect,
            color: ColorMode::Rgb,
            group_pattern: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    /// `[C, H, W]`, intensities in `[0, 1]`.
    pub image: Tensor,
    pub label: u32,
    pub group: Option<String>,
    /// Path relative to the dataset root, with `/` separators.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub records: Vec<ImageRecord>,
}

impl Dataset {
    pub fn new(class_names: Vec<String>, records: Vec<ImageRecord>) -> Result<Self> {
        if class_names.len() < 2 {
            return Err(Error::invalid(format!("a dataset needs at least 2 classes, found {}", class_names.len())));
        }
        for (c, name) in class_names.iter().enumerate() {
            let n = records.iter().filter(|r| r.label as usize == c).count();
            if n < 2 {
                return Err(Error::invalid(format!("class '{name}' has {n} images, at least 2 are required")));
            }
        }
        if let Some(r) = records.iter().find(|r| r.label as usize >= class_names.len()) {
            return Err(Error::invalid(format!("{} has label {} outside the class list", r.path, r.label)));
        }
        Ok(Dataset { class_names, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn index_of(&self, path: &str) -> Option<usize> {
        self.records.iter().position(|r| r.path == path)
    }
}

/// Parses the sample id of `path`.
pub fn group_of(pattern: &Regex, path: &str) -> Option<String> {
    let caps = pattern.captures(path)?;
    caps.get(1).or_else(|| caps.get(0)).map(|m| m.as_str().to_string())
}

fn decode_image(path: &Path, spec: &DatasetSpec) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Image { path: path.to_path_buf(), message: "image is empty".into() });
    }
    let (tw, th) = match spec.resize_mode {
        ResizeMode::FixedWidthKeepAspect => {
            let th = ((h as f64 * spec.resize_width as f64 / w as f64).round() as usize).max(1);
            (spec.resize_width, th)
        }
        ResizeMode::Square => (spec.resize_width, spec.resize_width),
        ResizeMode::None => (w, h),
    };
    let img = if (tw, th) != (w, h) { img.resize_exact(tw as u32, th as u32, FilterType::Triangle) } else { img };
    let (c, data) = match spec.color {
        ColorMode::Gray => (1, img.to_luma32f().into_raw()),
        ColorMode::Rgb => (3, img.to_rgb32f().into_raw()),
    };
    // Interleaved HWC to planar CHW.
    let mut planar = vec![0.0f32; data.len()];
    for (i, px) in data.chunks_exact(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            planar[ch * th * tw + i] = v.clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![c, th, tw], planar)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Decodes every image under `spec.root`, labelling it by its class
/// directory. Classes and files are visited in lexicographic order.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let root = &spec.root;
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut class_dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    let pattern = spec
        .group_pattern
        .as_deref()
        .map(Regex::new)
        .transpose()
        .map_err(|e| Error::Config(format!("bad group pattern: {e}")))?;

    let mut class_names = Vec::new();
    let mut paths = Vec::new();
    for dir in &class_dirs {
        let label = class_names.len() as u32;
        let mut files: Vec<PathBuf> = WalkDir::new(dir)
            .sort_by_file_name()
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file() && is_image(e.path()))
            .map(|e| e.into_path())
            .collect();
        files.sort();
        if files.is_empty() {
            continue;
        }
        class_names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        paths.extend(files.into_iter().map(|f| (f, label)));
    }

    let records = paths
        .into_iter()
        .map(|(file, label)| {
            let rel = file
                .strip_prefix(root)
                .unwrap_or(&file)
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            let group = match &pattern {
                Some(re) => Some(
                    group_of(re, &rel).ok_or_else(|| Error::invalid(format!("{rel} does not match the group pattern")))?,
                ),
                None => None,
            };
            Ok(ImageRecord { image: decode_image(&file, spec)?, label, group, path: rel })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(class_names, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, RgbImage};

    fn write_gray(path: &Path, w: u32, h: u32, v: u8) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        GrayImage::from_pixel(w, h, Luma([v])).save(path).unwrap();
    }

    #[test]
    fn loads_classes_in_order_with_labels() {
        let dir = tempfile::tempdir().unwrap();
        for (class, v) in [("b_wood", 10u8), ("a_stone", 200)] {
            for i in 0..3 {
                write_gray(&dir.path().join(class).join(format!("s{i}_img.png")), 8, 4, v);
            }
        }
        let spec = DatasetSpec {
            root: dir.path().into(),
            resize_width: 8,
            color: ColorMode::Gray,
            group_pattern: Some(r"s(\d)_".into()),
            ..Default::default()
        };
        let ds = load_dataset(&spec).unwrap();
        assert_eq!(ds.class_names, vec!["a_stone", "b_wood"]);
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.labels(), vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(ds.records[0].path, "a_stone/s0_img.png");
        assert_eq!(ds.records[4].group.as_deref(), Some("1"));
        assert_eq!(ds.records[0].image.shape(), &[1, 4, 8]);
        assert!((ds.records[0].image.data()[0] - 200.0 / 255.0).abs() < 1e-6);
        assert_eq!(load_dataset(&spec).unwrap(), ds);
    }

    #[test]
    fn keeps_aspect_ratio_or_squares() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["x", "y"] {
            for i in 0..2 {
                let p = dir.path().join(class).join(format!("{i}.png"));
                std::fs::create_dir_all(p.parent().unwrap()).unwrap();
                RgbImage::from_pixel(640, 480, Rgb([0, 128, 255])).save(&p).unwrap();
            }
        }
        let mut spec = DatasetSpec { root: dir.path().into(), ..Default::default() };
        let ds = load_dataset(&spec).unwrap();
        assert_eq!(ds.records[0].image.shape(), &[3, 240, 320]);
        let px = ds.records[0].image.data();
        assert!((px[240 * 320] - 128.0 / 255.0).abs() < 1e-2);
        assert!((px[2 * 240 * 320] - 1.0).abs() < 1e-6);
        spec.resize_mode = ResizeMode::Square;
        spec.resize_width = 64;
        assert_eq!(load_dataset(&spec).unwrap().records[0].image.shape(), &[3, 64, 64]);
    }

    #[test]
    fn corrupt_image_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["a", "b"] {
            write_gray(&dir.path().join(class).join("0.png"), 4, 4, 0);
            write_gray(&dir.path().join(class).join("1.png"), 4, 4, 0);
        }
        std::fs::write(dir.path().join("b").join("2.png"), b"not a png").unwrap();
        let spec = DatasetSpec { root: dir.path().into(), color: ColorMode::Gray, ..Default::default() };
        match load_dataset(&spec) {
            Err(Error::Image { path, .. }) => assert!(path.ends_with("b/2.png")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tiny_classes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_gray(&dir.path().join("a").join("0.png"), 4, 4, 0);
        write_gray(&dir.path().join("a").join("1.png"), 4, 4, 0);
        write_gray(&dir.path().join("b").join("0.png"), 4, 4, 0);
        let spec = DatasetSpec { root: dir.path().into(), color: ColorMode::Gray, ..Default::default() };
        assert!(matches!(load_dataset(&spec), Err(Error::Validation(_))));
    }
}
