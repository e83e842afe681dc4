//! MVTec-style directory layout:
//!
//! ```text
//! <root>/<category>/train/good/*.png
//! <root>/<category>/validation/good/*.png      (optional)
//! <root>/<category>/test/<defect-type>/*.png   ("good" = normal)
//! <root>/<category>/ground_truth/<defect-type>/<stem>_mask.png   (optional)
//! ```
//!
//! A root that itself contains `train/` is treated as a single category.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use crate::error::{Error, Result};
use crate::eval::TestSample;
use crate::image::{Image, MaskPlane};

pub const NORMAL_LABEL: &str = "good";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetLayout {
    pub root: PathBuf,
    /// Category name and its directory.
    pub categories: Vec<(String, PathBuf)>,
}

impl DatasetLayout {
    /// Finds the categories under `root` in lexicographic order.
    pub fn discover(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        if !root.is_dir() {
            return Err(dataset_error(&root, "dataset root is not a directory"));
        }
        if root.join("train").is_dir() {
            let name = root
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into());
            return Ok(Self {
                categories: vec![(name, root.clone())],
                root,
            });
        }
        let categories: Vec<(String, PathBuf)> = sorted_entries(&root)?
            .into_iter()
            .filter(|p| p.join("train").is_dir())
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), p))
            .collect();
        if categories.is_empty() {
            return Err(dataset_error(
                &root,
                "no category directory with a train/ split",
            ));
        }
        Ok(Self { root, categories })
    }

    pub fn category(&self, name: &str) -> Result<&Path> {
        self.categories
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p.as_path())
            .ok_or_else(|| dataset_error(&self.root, &format!("no category named {name:?}")))
    }
}

/// Decoded splits of one category.
#[derive(Clone, Debug)]
pub struct CategoryData {
    pub name: String,
    pub train: Vec<Image>,
    /// `None` when the category has no `validation/good` directory.
    pub validation: Option<Vec<Image>>,
    pub test: Vec<TestSample>,
}

fn dataset_error(path: &Path, reason: &str) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn is_png(p: &Path) -> bool {
    p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// PNG files of a directory, sorted; errors when there are none.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(dataset_error(dir, "missing directory"));
    }
    let files: Vec<PathBuf> = sorted_entries(dir)?
        .into_iter()
        .filter(|p| is_png(p))
        .collect();
    if files.is_empty() {
        return Err(dataset_error(dir, "directory contains no PNG images"));
    }
    Ok(files)
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// `(height, width)` of an image file, read from its header.
pub fn image_size(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok((h as usize, w as usize))
}

/// Size of the first training image of a category.
pub fn native_size(dir: &Path) -> Result<(usize, usize)> {
    image_size(&list_images(&dir.join("train").join(NORMAL_LABEL))?[0])
}

/// Loads an image as 3 channels in `[0, 1]`. Grayscale is replicated;
/// alpha is dropped. Other sizes are resized bilinearly.
pub fn load_image(path: &Path, height: usize, width: usize) -> Result<Image> {
    let img = decode(path)?;
    if img.width() as usize == width && img.height() as usize == height {
        let rgb = img.to_rgb8();
        let n = height * width;
        let mut data = vec![0.0; 3 * n];
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * n + i] = px[c] as f64 / 255.0;
            }
        }
        return Image::from_vec(3, height, width, data);
    }
    let rgb = img.to_rgb32f();
    let resized = image::imageops::resize(&rgb, width as u32, height as u32, FilterType::Triangle);
    let n = height * width;
    let mut data = vec![0.0; 3 * n];
    for (i, px) in resized.pixels().enumerate() {
        for c in 0..3 {
            data[c * n + i] = (px[c] as f64).clamp(0.0, 1.0);
        }
    }
    Image::from_vec(3, height, width, data)
}

/// Loads a ground-truth mask; pixels at or above half intensity are defects (1).
pub fn load_mask(path: &Path, height: usize, width: usize) -> Result<MaskPlane> {
    let img = decode(path)?;
    let luma = img.to_luma32f();
    let luma = if luma.width() as usize == width && luma.height() as usize == height {
        luma
    } else {
        image::imageops::resize(&luma, width as u32, height as u32, FilterType::Triangle)
    };
    MaskPlane::from_vec(
        height,
        width,
        luma.pixels().map(|p| u8::from(p[0] >= 0.5)).collect(),
    )
}

fn load_all(dir: &Path, height: usize, width: usize) -> Result<Vec<Image>> {
    list_images(dir)?
        .iter()
        .map(|p| load_image(p, height, width))
        .collect()
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

/// Loads every split of one category directory.
pub fn load_category(
    name: &str,
    dir: &Path,
    root: &Path,
    height: usize,
    width: usize,
) -> Result<CategoryData> {
    let (train, validation) = load_normals(dir, height, width)?;
    let test = load_test(name, dir, root, height, width)?;
    Ok(CategoryData {
        name: name.to_string(),
        train,
        validation,
        test,
    })
}

/// Loads `train/good` and, if present, `validation/good`.
pub fn load_normals(
    dir: &Path,
    height: usize,
    width: usize,
) -> Result<(Vec<Image>, Option<Vec<Image>>)> {
    let train = load_all(&dir.join("train").join(NORMAL_LABEL), height, width)?;
    let val_dir = dir.join("validation").join(NORMAL_LABEL);
    let validation = if val_dir.exists() {
        Some(load_all(&val_dir, height, width)?)
    } else {
        None
    };
    Ok((train, validation))
}

/// Loads `test/` with labels and, when `ground_truth/` exists, pixel masks.
pub fn load_test(
    name: &str,
    dir: &Path,
    root: &Path,
    height: usize,
    width: usize,
) -> Result<Vec<TestSample>> {
    let test_dir = dir.join("test");
    if !test_dir.is_dir() {
        return Err(dataset_error(&test_dir, "missing directory"));
    }
    let gt_root = dir.join("ground_truth");
    let has_gt = gt_root.is_dir();
    let types: Vec<PathBuf> = sorted_entries(&test_dir)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    let mut samples = Vec::new();
    for tdir in types {
        let defect_type = tdir.file_name().unwrap().to_string_lossy().into_owned();
        let anomalous = defect_type != NORMAL_LABEL;
        let files: Vec<PathBuf> = sorted_entries(&tdir)?
            .into_iter()
            .filter(|p| is_png(p))
            .collect();
        if anomalous && has_gt {
            let gdir = gt_root.join(&defect_type);
            let n_masks = if gdir.is_dir() {
                sorted_entries(&gdir)?
                    .into_iter()
                    .filter(|p| is_png(p))
                    .count()
            } else {
                0
            };
            if n_masks != files.len() {
                return Err(dataset_error(
                    &gdir,
                    &format!(
                        "{} ground-truth masks for {} test images",
                        n_masks,
                        files.len()
                    ),
                ));
            }
        }
        for f in files {
            let image = load_image(&f, height, width)?;
            let gt = if !has_gt {
                None
            } else if anomalous {
                let stem = f.file_stem().unwrap().to_string_lossy();
                let mpath = gt_root.join(&defect_type).join(format!("{stem}_mask.png"));
                if !mpath.is_file() {
                    return Err(dataset_error(&mpath, "missing ground-truth mask"));
                }
                Some(load_mask(&mpath, height, width)?)
            } else {
                Some(MaskPlane::zeros(height, width))
            };
            samples.push(TestSample {
                id: relative(root, &f),
                category: name.to_string(),
                defect_type: defect_type.clone(),
                image,
                anomalous,
                gt,
            });
        }
    }
    if samples.is_empty() {
        return Err(dataset_error(
            &test_dir,
            "test split contains no PNG images",
        ));
    }
    Ok(samples)
}

/// Loads every category of a layout.
pub fn load_dataset(
    layout: &DatasetLayout,
    height: usize,
    width: usize,
) -> Result<Vec<CategoryData>> {
    layout
        .categories
        .iter()
        .map(|(name, dir)| load_category(name, dir, &layout.root, height, width))
        .collect()
}
