//! Dataset model: image samples, annotations, manifest files, split plans,
//! and the stochastic operators used during training (point sampling,
//! coordinate jitter, cutout masking, horizontal flips).
//!
//! Manifest and split files are JSON with fixed key names; unknown keys are
//! rejected so format drift fails loudly. Images are 8-bit grayscale PNG.

mod ops;
mod synth;

pub use ops::{
    apply_mask, hflip_image, jitter_point, sample_point, sample_point_pair, MaskConfig,
    PointSampling, JITTER_AMPLITUDE,
};
pub use synth::{generate_synthetic, SyntheticConfig};

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoxCCWH, Point2};

/// A grayscale image with values in `[0,1]`, shape `[height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub pixels: Array2<f64>,
}

impl ImageSample {
    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn mean_intensity(&self) -> f64 {
        self.pixels.sum() / self.pixels.len() as f64
    }
}

/// Where a box annotation came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    GroundTruth,
    Pseudo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectAnnotation {
    pub class_id: usize,
    pub bbox: BoxCCWH,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointAnnotation {
    pub point: Point2,
    pub class_id: usize,
    /// Index into the entry's object list when the generating object is
    /// known (synthetic or fully-labeled data); absent for genuinely weak
    /// annotations.
    pub source_object: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Path of the image file, relative to the manifest location. Doubles as
    /// the image id in split plans and detection files.
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<ObjectAnnotation>,
    pub points: Vec<PointAnnotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.image == id)
    }

    /// Structural validation independent of the image files.
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Manifest {
                entry: 0,
                msg: "manifest declares no classes".into(),
            });
        }
        let mut seen = BTreeSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            if !seen.insert(e.image.clone()) {
                return Err(Error::Manifest {
                    entry: i,
                    msg: format!("duplicate image id {}", e.image),
                });
            }
            if e.width == 0 || e.height == 0 {
                return Err(Error::Manifest {
                    entry: i,
                    msg: "zero image dimension".into(),
                });
            }
            for (j, o) in e.objects.iter().enumerate() {
                if o.class_id >= self.classes.len() {
                    return Err(Error::Manifest {
                        entry: i,
                        msg: format!("object {j} class {} out of range", o.class_id),
                    });
                }
                BoxCCWH::new(o.bbox.cx, o.bbox.cy, o.bbox.w, o.bbox.h).map_err(|err| {
                    Error::Manifest {
                        entry: i,
                        msg: format!("object {j}: {err}"),
                    }
                })?;
            }
            for (j, p) in e.points.iter().enumerate() {
                if p.class_id >= self.classes.len() {
                    return Err(Error::Manifest {
                        entry: i,
                        msg: format!("point {j} class {} out of range", p.class_id),
                    });
                }
                Point2::new(p.point.x, p.point.y).map_err(|err| Error::Manifest {
                    entry: i,
                    msg: format!("point {j}: {err}"),
                })?;
                if let Some(src) = p.source_object {
                    let obj = e.objects.get(src).ok_or_else(|| Error::Manifest {
                        entry: i,
                        msg: format!("point {j} references missing object {src}"),
                    })?;
                    if obj.provenance == Provenance::GroundTruth && !obj.bbox.contains(p.point) {
                        return Err(Error::Manifest {
                            entry: i,
                            msg: format!("point {j} lies outside its source box {src}"),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

// --- JSON file schema ------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    version: u32,
    classes: Vec<String>,
    entries: Vec<EntryFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryFile {
    image: String,
    width: usize,
    height: usize,
    objects: Vec<ObjectFile>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    points: Vec<PointFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectFile {
    class_id: usize,
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "is_ground_truth")]
    provenance: Provenance,
}

fn is_ground_truth(p: &Provenance) -> bool {
    *p == Provenance::GroundTruth
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PointFile {
    x: f64,
    y: f64,
    class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_object: Option<usize>,
}

pub const MANIFEST_VERSION: u32 = 1;

/// Serialize a manifest to pretty JSON at `path`.
pub fn save_manifest(m: &Manifest, path: &Path) -> Result<()> {
    let file = ManifestFile {
        version: MANIFEST_VERSION,
        classes: m.classes.clone(),
        entries: m
            .entries
            .iter()
            .map(|e| EntryFile {
                image: e.image.clone(),
                width: e.width,
                height: e.height,
                objects: e
                    .objects
                    .iter()
                    .map(|o| ObjectFile {
                        class_id: o.class_id,
                        bbox: o.bbox.to_array(),
                        provenance: o.provenance,
                    })
                    .collect(),
                points: e
                    .points
                    .iter()
                    .map(|p| PointFile {
                        x: p.point.x,
                        y: p.point.y,
                        class_id: p.class_id,
                        source_object: p.source_object,
                    })
                    .collect(),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Checkpoint(format!("manifest serialize: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Load and validate a manifest. With `check_images`, every referenced image
/// file must exist and decode to the declared dimensions.
pub fn load_manifest(path: &Path, check_images: bool) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ManifestFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if file.version != MANIFEST_VERSION {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            msg: format!("manifest version {} unsupported", file.version),
        });
    }
    let manifest = Manifest {
        classes: file.classes,
        entries: file
            .entries
            .into_iter()
            .enumerate()
            .map(|(i, e)| {
                let wrap = move |err: Error| Error::Manifest {
                    entry: i,
                    msg: err.to_string(),
                };
                Ok(ManifestEntry {
                    objects: e
                        .objects
                        .into_iter()
                        .map(|o| {
                            Ok(ObjectAnnotation {
                                class_id: o.class_id,
                                bbox: BoxCCWH::from_array(o.bbox).map_err(wrap)?,
                                provenance: o.provenance,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?,
                    points: e
                        .points
                        .into_iter()
                        .map(|p| {
                            Ok(PointAnnotation {
                                point: Point2::new(p.x, p.y).map_err(wrap)?,
                                class_id: p.class_id,
                                source_object: p.source_object,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?,
                    image: e.image,
                    width: e.width,
                    height: e.height,
                })
            })
            .collect::<Result<Vec<_>>>()?,
    };
    manifest.validate()?;
    if check_images {
        let root = manifest_root(path);
        for (i, e) in manifest.entries.iter().enumerate() {
            let img = load_image(&root, e).map_err(|err| Error::Manifest {
                entry: i,
                msg: err.to_string(),
            })?;
            if img.height() != e.height || img.width() != e.width {
                return Err(Error::Manifest {
                    entry: i,
                    msg: format!(
                        "image {} is {}x{}, manifest declares {}x{}",
                        e.image,
                        img.width(),
                        img.height(),
                        e.width,
                        e.height
                    ),
                });
            }
        }
    }
    Ok(manifest)
}

/// Directory that entry image paths are relative to.
pub fn manifest_root(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Decode an entry's PNG into an [`ImageSample`].
pub fn load_image(root: &Path, entry: &ManifestEntry) -> Result<ImageSample> {
    let path = root.join(&entry.image);
    let img = image::open(&path)
        .map_err(|e| Error::Parse {
            path: path.clone(),
            msg: e.to_string(),
        })?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = Array2::from_shape_fn((h, w), |(r, c)| {
        f64::from(img.get_pixel(c as u32, r as u32).0[0]) / 255.0
    });
    Ok(ImageSample {
        id: entry.image.clone(),
        pixels,
    })
}

/// Encode an image (values clamped to `[0,1]`) as 8-bit grayscale PNG.
pub fn save_image(img: &ImageSample, path: &Path) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let v = (img.pixels[[r, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(c as u32, r as u32, image::Luma([v]));
        }
    }
    buf.save(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

// --- Split planning ---------------------------------------------------------

/// Partition of the manifest into fully-labeled / weakly-labeled / test ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPlan {
    pub fraction: f64,
    pub seed: u64,
    pub fully_labeled: Vec<String>,
    pub weak: Vec<String>,
    pub test: Vec<String>,
}

impl SplitPlan {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Checkpoint(format!("split serialize: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// The three lists must partition the manifest's ids exactly.
    pub fn validate_against(&self, m: &Manifest) -> Result<()> {
        let mut all: Vec<&str> = self
            .fully_labeled
            .iter()
            .chain(self.weak.iter())
            .chain(self.test.iter())
            .map(String::as_str)
            .collect();
        all.sort_unstable();
        let before = all.len();
        all.dedup();
        if all.len() != before {
            return Err(Error::InvalidConfig("split lists overlap".into()));
        }
        let mut ids: Vec<&str> = m.entries.iter().map(|e| e.image.as_str()).collect();
        ids.sort_unstable();
        if all != ids {
            return Err(Error::InvalidConfig(
                "split does not cover the manifest exactly".into(),
            ));
        }
        Ok(())
    }
}

/// Seeded 80:20 train/test partition, then `fraction` of train goes fully
/// labeled and the remainder keeps only points.
pub fn make_split(manifest: &Manifest, fraction: f64, seed: u64) -> Result<SplitPlan> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "fraction {fraction} outside (0, 1]"
        )));
    }
    if manifest.entries.is_empty() {
        return Err(Error::Empty("manifest has no entries".into()));
    }
    let mut ids: Vec<String> = manifest.entries.iter().map(|e| e.image.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n = ids.len();
    let n_test = ((n as f64) * 0.2).round() as usize;
    let test: Vec<String> = ids.split_off(n - n_test);
    let n_full = ((ids.len() as f64) * fraction).round() as usize;
    let weak = ids.split_off(n_full);
    Ok(SplitPlan {
        fraction,
        seed,
        fully_labeled: ids,
        weak,
        test,
    })
}
