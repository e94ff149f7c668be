//! Corpus loading, stratified splitting, batch iteration, and the
//! procedural toy corpus.
//!
//! On disk a corpus is `root/happy/*.ppm` and `root/sad/*.ppm`. Pixels are
//! scaled to `[0, 1]` when converted to tensors; no per-channel
//! standardisation is applied.

mod batch;
mod ppm;
mod toy;

pub use batch::{batch_iter, images_to_tensor, Batch, BatchIter, BatchOptions};
pub use ppm::{decode_ppm, encode_pgm, encode_ppm};
pub use toy::{draw_glyph, synth_toy, GlyphSpec};

use std::fs;
use std::path::Path;

use crate::augment::Image;
use crate::error::{Error, Result};
use crate::model::CLASS_NAMES;
use crate::tensor::{resize_bilinear, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    /// 0 happy, 1 sad.
    pub label: usize,
    pub source_path: String,
    /// Present for toy-corpus items.
    pub glyph: Option<GlyphSpec>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    items: Vec<LabeledImage>,
    class_counts: [usize; 2],
}

impl Dataset {
    pub fn new(items: Vec<LabeledImage>) -> Result<Self> {
        let mut class_counts = [0; 2];
        for item in &items {
            if item.label > 1 {
                return Err(Error::contract(format!(
                    "{}: label {} out of range",
                    item.source_path, item.label
                )));
            }
            class_counts[item.label] += 1;
        }
        Ok(Self { items, class_counts })
    }

    pub fn items(&self) -> &[LabeledImage] {
        &self.items
    }

    pub fn class_counts(&self) -> [usize; 2] {
        self.class_counts
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|it| it.label).collect()
    }

    /// Keeps the first `n` items of each class.
    pub fn take_per_class(&self, n: usize) -> Self {
        let mut seen = [0; 2];
        let items = self
            .items
            .iter()
            .filter(|it| {
                seen[it.label] += 1;
                seen[it.label] <= n
            })
            .cloned()
            .collect();
        Self::new(items).expect("labels already checked")
    }

    /// Every image resized to `size × size`.
    pub fn resized(&self, size: usize) -> Self {
        let items = self
            .items
            .iter()
            .map(|it| LabeledImage {
                image: resize_image(&it.image, size, size),
                ..it.clone()
            })
            .collect();
        Self {
            items,
            class_counts: self.class_counts,
        }
    }
}

/// Bilinear resize with half-pixel centres; same size is the identity.
pub fn resize_image(img: &Image, width: usize, height: usize) -> Image {
    if (img.width(), img.height()) == (width, height) {
        return img.clone();
    }
    let planes = [0, 1, 2].map(|c| resize_bilinear(&img.plane_f64(c), img.height(), img.width(), height, width));
    Image::from_planes(width, height, &planes).expect("matching plane sizes")
}

/// Loads `root/happy/*.ppm` and `root/sad/*.ppm`, sorted by (class, file
/// name), each resized to `size × size`.
pub fn load_dataset(root: &Path, size: usize) -> Result<Dataset> {
    let mut items = Vec::new();
    for (label, class) in CLASS_NAMES.iter().enumerate() {
        let dir = root.join(class);
        if !dir.is_dir() {
            return Err(Error::Config(format!("missing class directory {}", dir.display())));
        }
        let mut files: Vec<_> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext.eq_ignore_ascii_case("ppm")))
            .collect();
        if files.is_empty() {
            return Err(Error::Config(format!(
                "class directory {} has no .ppm images",
                dir.display()
            )));
        }
        files.sort();
        for path in files {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let image = decode_ppm(&bytes).map_err(|e| match e {
                Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
                Error::Unsupported(msg) => Error::Unsupported(format!("{}: {msg}", path.display())),
                other => other,
            })?;
            items.push(LabeledImage {
                image: resize_image(&image, size, size),
                label,
                source_path: format!("{class}/{}", path.file_name().expect("file").to_string_lossy()),
                glyph: None,
            });
        }
    }
    Dataset::new(items)
}

/// Writes `ds` in the corpus layout plus `manifest.csv` (path, label, and
/// glyph geometry when known).
pub fn write_corpus(ds: &Dataset, root: &Path) -> Result<()> {
    for class in CLASS_NAMES {
        let dir = root.join(class);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let manifest = root.join("manifest.csv");
    let mut writer = csv::Writer::from_path(&manifest)?;
    writer.write_record(["path", "label", "curvature", "bbox_x0", "bbox_y0", "bbox_x1", "bbox_y1"])?;
    for item in ds.items() {
        let path = root.join(&item.source_path);
        fs::write(&path, encode_ppm(&item.image)).map_err(|e| Error::io(&path, e))?;
        let mut record = vec![item.source_path.clone(), CLASS_NAMES[item.label].to_string()];
        match item.glyph {
            Some(g) => {
                record.push(g.curvature.to_string());
                record.extend(g.bbox.iter().map(|v| format!("{v:.6}")));
            }
            None => record.extend(std::iter::repeat_n(String::new(), 5)),
        }
        writer.write_record(&record)?;
    }
    writer.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(())
}

/// Per class: seeded shuffle (`Rng::substream(seed, class)`), then the first
/// `ceil(val_frac · count)` items go to validation. Both halves keep the
/// original item order.
pub fn stratified_split(ds: &Dataset, val_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&val_frac) {
        return Err(Error::Config(format!("val_frac {val_frac} must be in [0, 1)")));
    }
    let mut in_val = vec![false; ds.len()];
    for class in 0..2 {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&k| ds.items[k].label == class).collect();
        if val_frac > 0.0 && (members.len() as f64) < 1.0 / val_frac {
            return Err(Error::Config(format!(
                "class {} has {} items, too few for val_frac {val_frac}",
                CLASS_NAMES[class],
                members.len()
            )));
        }
        Rng::substream(seed, class as u64).shuffle(&mut members);
        let n_val = (val_frac * members.len() as f64).ceil() as usize;
        for &k in &members[..n_val] {
            in_val[k] = true;
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (item, v) in ds.items.iter().zip(in_val) {
        if v { &mut val } else { &mut train }.push(item.clone());
    }
    Ok((Dataset::new(train)?, Dataset::new(val)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn tiny_items(happy: usize, sad: usize) -> Dataset {
        let items = (0..happy + sad)
            .map(|k| LabeledImage {
                image: Image::filled(2, 2, [k as u8; 3]).unwrap(),
                label: usize::from(k >= happy),
                source_path: format!("{k}"),
                glyph: None,
            })
            .collect();
        Dataset::new(items).unwrap()
    }

    #[test]
    fn split_counts_match_the_corpus_table() {
        let ds = tiny_items(600, 600);
        let (train, val) = stratified_split(&ds, 0.2, 1).unwrap();
        assert_eq!(train.class_counts(), [480, 480]);
        assert_eq!(val.class_counts(), [120, 120]);
    }

    #[test]
    fn zero_fraction_keeps_everything_for_training() {
        let ds = tiny_items(5, 3);
        let (train, val) = stratified_split(&ds, 0.0, 1).unwrap();
        assert_eq!(train, ds);
        assert!(val.is_empty());
    }

    #[test]
    fn split_membership_follows_the_seed() {
        let ds = tiny_items(50, 50);
        let names = |d: &Dataset| d.items().iter().map(|i| i.source_path.clone()).collect::<HashSet<_>>();
        let (_, a) = stratified_split(&ds, 0.2, 9).unwrap();
        let (_, b) = stratified_split(&ds, 0.2, 9).unwrap();
        let (_, c) = stratified_split(&ds, 0.2, 10).unwrap();
        assert_eq!(names(&a), names(&b));
        assert_ne!(names(&a), names(&c));
    }

    #[test]
    fn small_classes_are_rejected() {
        assert!(matches!(
            stratified_split(&tiny_items(4, 10), 0.2, 0),
            Err(Error::Config(_))
        ));
        assert!(stratified_split(&tiny_items(5, 5), 1.0, 0).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = Image::from_fn(9, 7, |x, y| [x as u8, y as u8, 3]).unwrap();
        assert_eq!(resize_image(&img, 9, 7), img);
        let flat = Image::filled(13, 13, [40, 50, 60]).unwrap();
        let big = resize_image(&flat, 31, 17);
        assert!(big.data().chunks(3).all(|p| p == [40, 50, 60]));
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_toy(3, 20, 5).unwrap();
        write_corpus(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path(), 20).unwrap();
        assert_eq!(loaded.class_counts(), [3, 3]);
        for (a, b) in loaded.items().iter().zip(ds.items()) {
            assert_eq!((a.label, &a.image, &a.source_path), (b.label, &b.image, &b.source_path));
        }
        assert_eq!(load_dataset(dir.path(), 20).unwrap(), loaded);
        let manifest = fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        assert_eq!(manifest.lines().count(), 7);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("happy")).unwrap();
        assert!(matches!(load_dataset(dir.path(), 8), Err(Error::Config(_))));
        fs::create_dir(dir.path().join("sad")).unwrap();
        fs::write(
            dir.path().join("happy/a.ppm"),
            encode_ppm(&Image::filled(2, 2, [1; 3]).unwrap()),
        )
        .unwrap();
        assert!(matches!(load_dataset(dir.path(), 8), Err(Error::Config(_))));
        fs::write(dir.path().join("sad/bad.ppm"), b"P5 1 1 255\n0").unwrap();
        match load_dataset(dir.path(), 8) {
            Err(Error::Format(msg)) => assert!(msg.contains("bad.ppm"), "{msg}"),
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn split_is_disjoint_and_exact(happy in 10usize..60, sad in 10usize..60, frac in 0.1f64..0.5, seed in any::<u64>()) {
            let ds = tiny_items(happy, sad);
            let (train, val) = stratified_split(&ds, frac, seed).unwrap();
            let expect = |n: usize| (frac * n as f64).ceil() as usize;
            prop_assert_eq!(val.class_counts(), [expect(happy), expect(sad)]);
            prop_assert_eq!(train.len() + val.len(), ds.len());
            let t: HashSet<_> = train.items().iter().map(|i| i.source_path.clone()).collect();
            prop_assert!(val.items().iter().all(|i| !t.contains(&i.source_path)));
        }
    }
}
