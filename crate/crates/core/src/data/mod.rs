//! Dataset files: image/mask pairs, the plain-text manifest that lists a
//! dataset's splits, and seeded synthetic segmentation tasks.

pub mod pnm;
pub mod synth;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use pnm::PnmImage;

/// One image/mask pair. The image is [H, W, C] in [0, 1]; the mask is
/// [H, W] with values exactly 0.0 or 1.0.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub split: Split,
}

/// Versioned plain-text listing: a `# manifest v1` header, then one
/// tab-separated entry per line: id, image path, mask path, split. Paths
/// are relative to the manifest's directory. UTF-8, LF line endings.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_HEADER: &str = "# manifest v1";
pub const MANIFEST_NAME: &str = "manifest.tsv";

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == MANIFEST_HEADER => {}
            other => {
                return Err(Error::format(
                    path,
                    format!("bad manifest header {:?}", other.unwrap_or("")),
                ))
            }
        }
        let mut entries = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::format(
                    path,
                    format!("line {}: expected 4 tab-separated fields", lineno + 2),
                ));
            }
            if !seen.insert(fields[0].to_string()) {
                return Err(Error::format(
                    path,
                    format!("duplicate sample id '{}'", fields[0]),
                ));
            }
            entries.push(ManifestEntry {
                id: fields[0].to_string(),
                image: fields[1].to_string(),
                mask: fields[2].to_string(),
                split: fields[3].parse()?,
            });
        }
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(DatasetManifest { root, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", e.id, e.image, e.mask, e.split));
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn split_entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

fn image_to_tensor(img: &PnmImage) -> Tensor {
    let data: Vec<f64> = img.pixels.iter().map(|p| *p as f64 / 255.0).collect();
    Tensor::new(vec![img.height, img.width, img.channels], data).expect("consistent dims")
}

/// Load an image/mask pair. The image becomes [H, W, C] scaled to [0, 1];
/// the mask must be single-channel and is thresholded at 128 to {0, 1}.
pub fn load_pgm_pair(image_path: &Path, mask_path: &Path, id: &str) -> Result<Sample> {
    let img = pnm::read_pnm(image_path)?;
    let mask = pnm::read_pnm(mask_path)?;
    if mask.channels != 1 {
        return Err(Error::format(mask_path, "mask must be a single-channel PGM"));
    }
    if (img.width, img.height) != (mask.width, mask.height) {
        return Err(Error::format(
            image_path,
            format!(
                "image {}×{} does not match mask {}×{}",
                img.width, img.height, mask.width, mask.height
            ),
        ));
    }
    let mask_data: Vec<f64> = mask
        .pixels
        .iter()
        .map(|p| if *p >= 128 { 1.0 } else { 0.0 })
        .collect();
    Ok(Sample {
        id: id.to_string(),
        image: image_to_tensor(&img),
        mask: Tensor::new(vec![mask.height, mask.width], mask_data)?,
    })
}

/// Load one split in manifest order, validating every file. A split with no
/// entries is an explicit error rather than an empty list.
pub fn split_load(manifest: &DatasetManifest, split: Split) -> Result<Vec<Sample>> {
    let entries = manifest.split_entries(split);
    if entries.is_empty() {
        return Err(Error::EmptySplit(split.as_str().to_string()));
    }
    entries
        .into_iter()
        .map(|e| {
            load_pgm_pair(
                &manifest.root.join(&e.image),
                &manifest.root.join(&e.mask),
                &e.id,
            )
        })
        .collect()
}
