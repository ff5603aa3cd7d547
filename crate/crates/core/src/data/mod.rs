//! Dataset ingestion: the `images/` + `masks/` directory layout, binary mask
//! decoding, the labeled/unlabeled split protocol and a synthetic generator.

mod split;
mod synthetic;

pub use split::{make_split, source_checksum, Fraction, SplitManifest};
pub use synthetic::generate_synthetic;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{imageops::FilterType, GrayImage, RgbImage};

use crate::augment::ImageTensor;
use crate::error::{Error, Result};

/// Number of classes: background and polyp.
pub const CLASS_COUNT: usize = 2;

/// Gray level at or above which a mask pixel is foreground.
pub const MASK_THRESHOLD: u8 = 128;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

/// Per-pixel class ids, `0` background and `1` polyp.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskTensor {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl MaskTensor {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} labels for a {height}x{width} mask",
                labels.len()
            )));
        }
        if let Some(v) = labels.iter().find(|&&v| v as usize >= CLASS_COUNT) {
            return Err(Error::Data(format!("mask value {v} outside {{0, 1}}")));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.labels.iter().filter(|&&v| v == 1).count() as f64 / self.labels.len().max(1) as f64
    }

    /// White-on-black rendering (`0` / `255`).
    pub fn encode(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([self.get(y as usize, x as usize) * 255])
        })
    }
}

/// Binarizes a grayscale mask: values `>= 128` become class 1.
pub fn decode_mask(raw: &GrayImage) -> MaskTensor {
    MaskTensor {
        height: raw.height() as usize,
        width: raw.width() as usize,
        labels: raw
            .pixels()
            .map(|p| u8::from(p.0[0] >= MASK_THRESHOLD))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

/// Image/mask pairs of a dataset root, sorted by id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
    pub class_count: usize,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    pub fn get(&self, id: &str) -> Option<&DatasetEntry> {
        self.entries
            .binary_search_by(|e| e.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.entries[i])
    }

    /// Entries for `ids`, in the given order.
    pub fn select(&self, ids: &[String]) -> Result<Vec<&DatasetEntry>> {
        ids.iter()
            .map(|id| {
                self.get(id).ok_or_else(|| {
                    Error::Data(format!("id {id} is not in {}", self.root.display()))
                })
            })
            .collect()
    }
}

fn image_files(dir: &Path) -> Result<BTreeMap<String, Vec<PathBuf>>> {
    let mut by_stem: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    let listing = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in listing {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if !is_image || !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            by_stem.entry(stem.to_owned()).or_default().push(path);
        }
    }
    Ok(by_stem)
}

/// Indexes `<root>/images/*` against `<root>/masks/*`.
///
/// A mask pairs with an image when it has the same file name, or failing
/// that the same stem.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<DatasetIndex> {
    let root = root.as_ref();
    let images = image_files(&root.join("images"))?;
    let masks = image_files(&root.join("masks"))?;
    if images.is_empty() {
        return Err(Error::Data(format!(
            "no images under {}",
            root.join("images").display()
        )));
    }
    let mut entries = Vec::with_capacity(images.len());
    let mut missing = Vec::new();
    for (id, paths) in images {
        if paths.len() > 1 {
            return Err(Error::Data(format!(
                "id {id} has several images: {paths:?}"
            )));
        }
        let image_path = paths.into_iter().next().expect("one path");
        let candidates = masks.get(&id).map(Vec::as_slice).unwrap_or_default();
        let same_name = candidates
            .iter()
            .find(|m| m.file_name() == image_path.file_name());
        match same_name.or_else(|| (candidates.len() == 1).then(|| &candidates[0])) {
            Some(mask_path) => entries.push(DatasetEntry {
                id,
                image_path,
                mask_path: mask_path.clone(),
            }),
            None => missing.push(id),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "no mask for image id(s): {}",
            missing.join(", ")
        )));
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        entries,
        class_count: CLASS_COUNT,
    })
}

/// One decoded image/mask pair.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: ImageTensor,
    pub mask: MaskTensor,
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Decodes an entry, optionally resizing both image and mask to `side`.
pub fn load_sample(entry: &DatasetEntry, side: Option<usize>) -> Result<Sample> {
    let mut rgb: RgbImage = open(&entry.image_path)?.to_rgb8();
    let mut gray: GrayImage = open(&entry.mask_path)?.to_luma8();
    if rgb.dimensions() != gray.dimensions() {
        return Err(Error::Data(format!(
            "{}: image is {:?} but mask is {:?}",
            entry.id,
            rgb.dimensions(),
            gray.dimensions()
        )));
    }
    if let Some(side) = side {
        let s = side as u32;
        if rgb.dimensions() != (s, s) {
            rgb = image::imageops::resize(&rgb, s, s, FilterType::Triangle);
            gray = image::imageops::resize(&gray, s, s, FilterType::Nearest);
        }
    }
    Ok(Sample {
        id: entry.id.clone(),
        image: ImageTensor::from_rgb(&rgb)
            .map_err(|e| Error::Data(format!("{}: {e}", entry.id)))?,
        mask: decode_mask(&gray),
    })
}

pub fn load_samples(entries: &[&DatasetEntry], side: Option<usize>) -> Result<Vec<Sample>> {
    entries.iter().map(|e| load_sample(e, side)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_pair(root: &Path, id: &str, with_mask: bool) {
        std::fs::create_dir_all(root.join("images")).unwrap();
        std::fs::create_dir_all(root.join("masks")).unwrap();
        RgbImage::new(32, 32)
            .save(root.join("images").join(format!("{id}.png")))
            .unwrap();
        if with_mask {
            GrayImage::new(32, 32)
                .save(root.join("masks").join(format!("{id}.png")))
                .unwrap();
        }
    }

    #[test]
    fn decode_threshold() {
        let raw = GrayImage::from_raw(4, 1, vec![0, 127, 128, 255]).unwrap();
        let m = decode_mask(&raw);
        assert_eq!(m.labels(), &[0, 0, 1, 1]);
        for v in 0..=255u8 {
            let m = decode_mask(&GrayImage::from_raw(1, 1, vec![v]).unwrap());
            assert_eq!(m.labels()[0] == 1, v >= 128);
        }
        let full = decode_mask(&GrayImage::from_pixel(3, 3, image::Luma([255])));
        assert!(full.labels().iter().all(|&v| v == 1));
        let empty = decode_mask(&GrayImage::new(3, 3));
        assert!(empty.labels().iter().all(|&v| v == 0));
    }

    #[test]
    fn mask_rejects_other_classes() {
        assert!(MaskTensor::new(1, 2, vec![0, 2]).is_err());
        assert!(MaskTensor::new(1, 2, vec![0]).is_err());
    }

    #[test]
    fn loads_single_pair() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", true);
        let index = load_dataset(dir.path()).unwrap();
        assert_eq!(index.len(), 1);
        assert_eq!(index.class_count, 2);
        let s = load_sample(&index.entries[0], None).unwrap();
        assert_eq!((s.image.height(), s.mask.height()), (32, 32));
    }

    #[test]
    fn missing_mask_names_the_id() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", true);
        write_pair(dir.path(), "orphan", false);
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("orphan"), "{err}");
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::create_dir_all(dir.path().join("masks")).unwrap();
        assert!(load_dataset(dir.path()).is_err());
        assert!(load_dataset(dir.path().join("nope")).is_err());
    }

    #[test]
    fn entries_sorted_and_mask_matched_by_stem() {
        let dir = tempfile::tempdir().unwrap();
        for id in ["c", "a", "b"] {
            write_pair(dir.path(), id, true);
        }
        // Kvasir-style jpg image with a png mask of the same stem.
        RgbImage::new(32, 32)
            .save(dir.path().join("images/d.jpg"))
            .unwrap();
        GrayImage::new(32, 32)
            .save(dir.path().join("masks/d.png"))
            .unwrap();
        let index = load_dataset(dir.path()).unwrap();
        let ids: Vec<_> = index.ids().collect();
        assert_eq!(ids, ["a", "b", "c", "d"]);
        assert!(index.get("d").unwrap().mask_path.ends_with("d.png"));
    }

    #[test]
    fn resize_on_load() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::create_dir_all(dir.path().join("masks")).unwrap();
        RgbImage::new(80, 60)
            .save(dir.path().join("images/x.png"))
            .unwrap();
        GrayImage::from_pixel(80, 60, image::Luma([200]))
            .save(dir.path().join("masks/x.png"))
            .unwrap();
        let index = load_dataset(dir.path()).unwrap();
        let s = load_sample(&index.entries[0], Some(48)).unwrap();
        assert_eq!((s.image.height(), s.image.width()), (48, 48));
        assert!(s.mask.labels().iter().all(|&v| v == 1));
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(h in 1usize..12, w in 1usize..12, seed in 0u64..500) {
            use rand::Rng;
            let mut rng = crate::rng::substream(seed, "mask", &[]);
            let labels: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..2)).collect();
            let m = MaskTensor::new(h, w, labels).unwrap();
            prop_assert_eq!(decode_mask(&m.encode()), m);
        }
    }
}
