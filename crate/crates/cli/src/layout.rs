//! On-disk layout of a generated dataset.
//!
//! ```text
//! out/
//!   manifest.tsv          scene_000<TAB>row<TAB>col, one line per crop
//!   scene_000/
//!     source.mbr          G, R, NIR
//!     target.mbr          SWIR
//!     coarse.mbr          SWIR at 1/factor resolution
//!     water.mbr           water mask as a 0/1 band
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use s2a_core::ablation::EvalScene;
use s2a_core::datapipe::{
    extract_paired_crops, read_manifest, synth_scene, window_origins, write_manifest, CropDataset, CropOptions,
    ManifestEntry,
};
use s2a_core::raster::{read_mbr, write_mbr};
use s2a_core::{Error, MultiBandRaster, Result};

pub const MANIFEST: &str = "manifest.tsv";

pub struct SceneFiles {
    pub dir: PathBuf,
}

impl SceneFiles {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        SceneFiles { dir: dir.into() }
    }

    pub fn source(&self) -> PathBuf {
        self.dir.join("source.mbr")
    }

    pub fn target(&self) -> PathBuf {
        self.dir.join("target.mbr")
    }

    pub fn coarse(&self) -> PathBuf {
        self.dir.join("coarse.mbr")
    }

    pub fn water(&self) -> PathBuf {
        self.dir.join("water.mbr")
    }

    pub fn read_coarse(&self) -> Result<Option<MultiBandRaster>> {
        let path = self.coarse();
        path.exists().then(|| read_mbr(&path)).transpose()
    }

    pub fn load_eval(&self) -> Result<EvalScene> {
        Ok(EvalScene {
            source: read_mbr(self.source())?,
            target: read_mbr(self.target())?,
            coarse: self
                .read_coarse()?
                .ok_or_else(|| Error::UnknownBand(format!("coarse band in {}", self.dir.display())))?,
        })
    }
}

pub struct Datagen {
    pub seed: u64,
    pub scenes: usize,
    pub size: usize,
    pub crop: CropOptions,
}

/// Writes `scenes` synthetic scenes (seeds `seed..seed + scenes`) and the
/// manifest of every crop window.
pub fn generate(spec: &Datagen, out: &Path) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(out).map_err(|e| io(out, e))?;
    let origins = window_origins(spec.size, spec.crop.size, spec.crop.stride)?;
    let mut entries = Vec::new();
    for i in 0..spec.scenes {
        let name = format!("scene_{i:03}");
        let files = SceneFiles::new(out.join(&name));
        fs::create_dir_all(&files.dir).map_err(|e| io(&files.dir, e))?;
        let scene = synth_scene(spec.seed.wrapping_add(i as u64), spec.size, spec.size, spec.crop.factor)?;
        write_mbr(&scene.source, files.source())?;
        write_mbr(&scene.target, files.target())?;
        write_mbr(&scene.coarse(spec.crop.factor)?, files.coarse())?;
        write_mbr(&scene.water.to_raster("WATER"), files.water())?;
        for &row in &origins {
            for &col in &origins {
                entries.push(ManifestEntry {
                    scene: PathBuf::from(&name),
                    row,
                    col,
                });
            }
        }
    }
    write_manifest(out.join(MANIFEST), &entries)?;
    Ok(entries)
}

/// Paired crops for every manifest entry of a generated dataset.
pub fn load_dataset(data_dir: &Path, crop: CropOptions) -> Result<CropDataset> {
    let mut wanted: BTreeMap<PathBuf, BTreeSet<(usize, usize)>> = BTreeMap::new();
    for e in read_manifest(data_dir.join(MANIFEST))? {
        wanted.entry(e.scene).or_default().insert((e.row, e.col));
    }
    let mut all = CropDataset::new(Vec::new());
    for (index, (scene, origins)) in wanted.iter().enumerate() {
        let files = SceneFiles::new(data_dir.join(scene));
        let source = read_mbr(files.source())?;
        let target = read_mbr(files.target())?;
        let coarse = files.read_coarse()?;
        let mut crops = extract_paired_crops(&source, &target, coarse.as_ref(), crop)?;
        crops.crops.retain(|c| origins.contains(&c.origin));
        if crops.len() != origins.len() {
            return Err(Error::Malformed {
                what: "manifest",
                detail: format!(
                    "{} lists windows of {}x{} off the stride-{} grid",
                    scene.display(),
                    crop.size,
                    crop.size,
                    crop.stride
                ),
            });
        }
        for c in &mut crops.crops {
            c.scene = index;
        }
        all.extend(crops);
    }
    if all.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(all)
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
