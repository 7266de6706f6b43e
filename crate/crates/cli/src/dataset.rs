//! Dataset folders, manifests and a disk-backed sample source.
//!
//! Expected layout under the root: `paired/low` and `paired/gt` with
//! matching filenames, `unpaired/low`, and optionally `val/low` + `val/gt`
//! and `test/low`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use semi_llie_core::data::SampleSource;
use semi_llie_core::ImageTensor;

use crate::error::{io_err, CliError, Result};
use crate::imageio::{is_image, load_image};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub paired: Vec<(PathBuf, PathBuf)>,
    pub unpaired: Vec<PathBuf>,
    pub val: Vec<(PathBuf, PathBuf)>,
    /// Unpaired held-out images, scored with no-reference metrics only.
    pub test: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

/// Sorted image files of `dir`; a missing directory yields `None`.
fn list_images(dir: &Path) -> Result<Option<Vec<PathBuf>>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let p = entry.map_err(io_err(dir))?.path();
        if p.is_file() && is_image(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(Some(out))
}

fn file_names(paths: &[PathBuf]) -> BTreeSet<String> {
    paths
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect()
}

/// Pair `low` and `gt` by filename, listing every unmatched file.
fn match_pairs(
    split: &str,
    low: Vec<PathBuf>,
    gt: Vec<PathBuf>,
) -> Result<Vec<(PathBuf, PathBuf)>> {
    let (ln, gn) = (file_names(&low), file_names(&gt));
    let mut bad: Vec<String> = ln
        .difference(&gn)
        .map(|n| format!("{split}/low/{n}"))
        .collect();
    bad.extend(gn.difference(&ln).map(|n| format!("{split}/gt/{n}")));
    if !bad.is_empty() {
        return Err(CliError::Manifest(format!(
            "unmatched {split} files: {}",
            bad.join(", ")
        )));
    }
    Ok(low.into_iter().zip(gt).collect())
}

pub fn scan_dataset(root: &Path) -> Result<DatasetManifest> {
    let need = |sub: &str| -> Result<Vec<PathBuf>> {
        list_images(&root.join(sub))?
            .ok_or_else(|| CliError::Manifest(format!("missing directory {sub}")))
    };
    let mut m = DatasetManifest {
        paired: match_pairs("paired", need("paired/low")?, need("paired/gt")?)?,
        ..Default::default()
    };
    m.unpaired = list_images(&root.join("unpaired/low"))?.unwrap_or_default();
    if m.unpaired.is_empty() {
        m.warnings
            .push("no unpaired images; training runs supervised-only".into());
    }
    let (vl, vg) = (
        list_images(&root.join("val/low"))?,
        list_images(&root.join("val/gt"))?,
    );
    m.val = match (vl, vg) {
        (None, None) => Vec::new(),
        (l, g) => match_pairs("val", l.unwrap_or_default(), g.unwrap_or_default())?,
    };
    m.test = list_images(&root.join("test/low"))?.unwrap_or_default();
    m.check_disjoint()?;
    Ok(m)
}

impl DatasetManifest {
    /// `(paired, unpaired, val, test)` sizes.
    pub fn counts(&self) -> (usize, usize, usize, usize) {
        (
            self.paired.len(),
            self.unpaired.len(),
            self.val.len(),
            self.test.len(),
        )
    }

    fn all_paths(&self) -> impl Iterator<Item = &PathBuf> {
        let pairs = self
            .paired
            .iter()
            .chain(&self.val)
            .flat_map(|(a, b)| [a, b]);
        pairs.chain(&self.unpaired).chain(&self.test)
    }

    /// No file may be listed twice, even through links.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for p in self.all_paths() {
            let key = p.canonicalize().map_err(io_err(p))?;
            if !seen.insert(key) {
                return Err(CliError::Manifest(format!(
                    "{} appears in more than one split",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    /// One line per entry: `split<TAB>low_path[<TAB>gt_path]`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (split, pairs) in [("paired", &self.paired), ("val", &self.val)] {
            for (l, g) in pairs {
                writeln!(s, "{split}\t{}\t{}", l.display(), g.display()).unwrap();
            }
        }
        for (split, list) in [("unpaired", &self.unpaired), ("test", &self.test)] {
            for l in list {
                writeln!(s, "{split}\t{}", l.display()).unwrap();
            }
        }
        s
    }
}

/// Training images read from disk on every access.
#[derive(Clone, Debug)]
pub struct DiskSource {
    manifest: DatasetManifest,
}

impl DiskSource {
    pub fn new(manifest: DatasetManifest) -> Self {
        Self { manifest }
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }
}

fn core_err(e: CliError) -> semi_llie_core::Error {
    match e {
        CliError::Core(c) => c,
        other => semi_llie_core::Error::Precondition(other.to_string()),
    }
}

impl SampleSource<f32> for DiskSource {
    fn paired_len(&self) -> usize {
        self.manifest.paired.len()
    }

    fn unpaired_len(&self) -> usize {
        self.manifest.unpaired.len()
    }

    fn paired(&self, i: usize) -> semi_llie_core::Result<(ImageTensor<f32>, ImageTensor<f32>)> {
        let (l, g) = &self.manifest.paired[i];
        let low = load_image(l).map_err(core_err)?;
        let gt = load_image(g).map_err(core_err)?;
        if low.tensor().shape() != gt.tensor().shape() {
            return Err(semi_llie_core::Error::Precondition(format!(
                "{} and {} differ in size",
                l.display(),
                g.display()
            )));
        }
        Ok((low, gt))
    }

    fn unpaired(&self, i: usize) -> semi_llie_core::Result<ImageTensor<f32>> {
        load_image(&self.manifest.unpaired[i]).map_err(core_err)
    }
}
