//! On-disk dataset layout.
//!
//! ```text
//! images/NNNN.png   RGB composite
//! masks/NNNN.png    ground truth, 0 or 255
//! labels/NNNN.png   class label per pixel
//! manifest.txt      one line per sample
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::colorspace::ImagePlane;
use crate::datagen::{CompositeSample, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::imageio;
use crate::mask::RegionMask;

pub const MANIFEST: &str = "manifest.txt";
const HEADER: &str = "# index image mask labels seed regions warning";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: usize,
    pub image: String,
    pub mask: String,
    pub labels: String,
    pub seed: u64,
    pub regions: usize,
    pub warning: bool,
}

impl ManifestEntry {
    pub fn id(&self) -> String {
        format!("{:04}", self.index)
    }
}

#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub id: String,
    pub image: ImagePlane,
    pub mask: RegionMask,
    pub labels: Vec<u8>,
}

pub fn parse_manifest(path: &Path, text: &str) -> Result<Vec<ManifestEntry>> {
    let bad = |line: usize, detail: String| Error::Manifest {
        path: path.to_path_buf(),
        detail: format!("line {line}: {detail}"),
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(bad(i + 1, format!("expected 7 fields, found {}", f.len())));
        }
        let num = |s: &str, what: &str| s.parse::<u64>().map_err(|_| bad(i + 1, format!("bad {what} {s:?}")));
        out.push(ManifestEntry {
            index: num(f[0], "index")? as usize,
            image: f[1].to_string(),
            mask: f[2].to_string(),
            labels: f[3].to_string(),
            seed: num(f[4], "seed")?,
            regions: num(f[5], "region count")? as usize,
            warning: match f[6] {
                "0" => false,
                "1" => true,
                other => return Err(bad(i + 1, format!("bad warning flag {other:?}"))),
            },
        });
    }
    if out.is_empty() {
        return Err(bad(0, "no samples".into()));
    }
    Ok(out)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = format!("{HEADER}\n");
    for e in entries {
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {}",
            e.index, e.image, e.mask, e.labels, e.seed, e.regions, e.warning as u8
        );
    }
    s
}

/// Write samples and the manifest into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, samples: &[CompositeSample]) -> Result<Vec<ManifestEntry>> {
    for sub in ["images", "masks", "labels"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let entries: Vec<ManifestEntry> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let e = ManifestEntry {
                index: i,
                image: format!("images/{i:04}.png"),
                mask: format!("masks/{i:04}.png"),
                labels: format!("labels/{i:04}.png"),
                seed: s.meta.seed,
                regions: s.meta.shifts.len(),
                warning: s.meta.warning,
            };
            imageio::save_rgb(&dir.join(&e.image), &s.image)?;
            imageio::save_mask(&dir.join(&e.mask), &s.gt_mask)?;
            imageio::save_gray(&dir.join(&e.labels), s.gt_mask.width(), s.gt_mask.height(), &s.labels)?;
            Ok(e)
        })
        .collect::<Result<_>>()?;
    let path = dir.join(MANIFEST);
    fs::write(&path, format_manifest(&entries)).map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            entries: parse_manifest(&path, &text)?,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(&self, i: usize) -> Result<LoadedSample> {
        let e = self
            .entries
            .get(i)
            .ok_or_else(|| Error::invalid("Dataset::load", format!("index {i} out of {}", self.entries.len())))?;
        let image = imageio::load_rgb(&self.root.join(&e.image))?;
        let mask = imageio::load_mask(&self.root.join(&e.mask))?;
        let label_path = self.root.join(&e.labels);
        let (w, h, labels) = imageio::load_gray(&label_path)?;
        let (ih, iw) = (image.height(), image.width());
        if (mask.height(), mask.width()) != (ih, iw) || (h, w) != (ih, iw) {
            return Err(Error::Manifest {
                path: self.root.join(MANIFEST),
                detail: format!("sample {}: image, mask and labels differ in size", e.id()),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Image {
                path: label_path,
                detail: format!("label {l} out of range"),
            });
        }
        if !mask.is_binary() {
            return Err(Error::Image {
                path: self.root.join(&e.mask),
                detail: "mask is not binary".into(),
            });
        }
        Ok(LoadedSample {
            id: e.id(),
            image,
            mask,
            labels,
        })
    }

    pub fn load_all(&self) -> Result<Vec<LoadedSample>> {
        (0..self.len()).into_par_iter().map(|i| self.load(i)).collect()
    }
}
