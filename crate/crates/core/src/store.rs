//! Datasets and studies on disk: raw little-endian `f32` tensor files next
//! to a JSON manifest holding shapes, seeds, protocol and count levels.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TgdError};
use crate::metrics::Roi;
use crate::phantom::{Dataset, PhantomSpec, ScanProtocol, Study, TrainPair};
use crate::tensor::Tensor;

pub const DATASET_MANIFEST: &str = "dataset.json";
pub const STUDY_MANIFEST: &str = "study.json";

pub fn write_raw(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_raw(path: impl AsRef<Path>, shape: &[usize]) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(TgdError::Truncated(format!(
            "{}: expected {} bytes for shape {shape:?}, found {}",
            path.display(),
            n * 4,
            bytes.len()
        )));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(shape.to_vec(), data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub split: String,
    pub phantom: usize,
    pub level: f64,
    pub input: String,
    pub target: String,
    pub truth: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub shape: Vec<usize>,
    pub protocol: ScanProtocol,
    pub count_levels: Vec<f64>,
    pub val_phantoms: usize,
    pub specs: Vec<PhantomSpec>,
    pub pairs: Vec<PairEntry>,
}

/// Writes every pair under `dir` and returns the manifest (also written).
pub fn save_dataset(
    dir: impl AsRef<Path>,
    ds: &Dataset,
    specs: &[PhantomSpec],
    protocol: &ScanProtocol,
    count_levels: &[f64],
    val_phantoms: usize,
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let shape = ds
        .train
        .iter()
        .chain(&ds.val)
        .next()
        .ok_or(TgdError::EmptyDataset)?
        .input
        .shape()
        .to_vec();
    let mut pairs = Vec::new();
    for (split, list) in [("train", &ds.train), ("val", &ds.val)] {
        for (li, p) in list.iter().enumerate() {
            let stem = format!("{split}_{:03}_{li:03}", p.phantom);
            let entry = PairEntry {
                split: split.into(),
                phantom: p.phantom,
                level: p.level,
                input: format!("{stem}_input.f32"),
                target: format!("{stem}_target.f32"),
                truth: format!("{stem}_truth.f32"),
            };
            write_raw(dir.join(&entry.input), &p.input)?;
            write_raw(dir.join(&entry.target), &p.target)?;
            write_raw(dir.join(&entry.truth), &p.truth)?;
            pairs.push(entry);
        }
    }
    let manifest = DatasetManifest {
        shape,
        protocol: protocol.clone(),
        count_levels: count_levels.to_vec(),
        val_phantoms,
        specs: specs.to_vec(),
        pairs,
    };
    fs::write(dir.join(DATASET_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(Dataset, DatasetManifest)> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join(DATASET_MANIFEST))?)?;
    let mut ds = Dataset::default();
    for e in &manifest.pairs {
        let pair = TrainPair {
            phantom: e.phantom,
            level: e.level,
            input: read_raw(dir.join(&e.input), &manifest.shape)?,
            target: read_raw(dir.join(&e.target), &manifest.shape)?,
            truth: read_raw(dir.join(&e.truth), &manifest.shape)?,
        };
        match e.split.as_str() {
            "train" => ds.train.push(pair),
            "val" => ds.val.push(pair),
            other => return Err(TgdError::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
    Ok((ds, manifest))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyManifest {
    pub shape: Vec<usize>,
    pub spec: PhantomSpec,
    pub protocol: ScanProtocol,
    pub realizations: Vec<String>,
    pub activity: String,
    pub truth: String,
    pub acquisition: String,
    pub n2n_halves: [String; 2],
}

pub fn save_study(dir: impl AsRef<Path>, study: &Study) -> Result<StudyManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest = StudyManifest {
        shape: study.truth.shape().to_vec(),
        spec: study.spec.clone(),
        protocol: study.protocol.clone(),
        realizations: (0..study.realizations.len()).map(|r| format!("realization_{r:03}.f32")).collect(),
        activity: "activity.f32".into(),
        truth: "truth.f32".into(),
        acquisition: "acquisition.f32".into(),
        n2n_halves: ["n2n_a.f32".into(), "n2n_b.f32".into()],
    };
    for (name, t) in manifest.realizations.iter().zip(&study.realizations) {
        write_raw(dir.join(name), t)?;
    }
    write_raw(dir.join(&manifest.activity), &study.activity)?;
    write_raw(dir.join(&manifest.truth), &study.truth)?;
    write_raw(dir.join(&manifest.acquisition), &study.acquisition)?;
    write_raw(dir.join(&manifest.n2n_halves[0]), &study.n2n_halves.0)?;
    write_raw(dir.join(&manifest.n2n_halves[1]), &study.n2n_halves.1)?;
    fs::write(dir.join(STUDY_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_study(dir: impl AsRef<Path>) -> Result<Study> {
    let dir = dir.as_ref();
    let m: StudyManifest = serde_json::from_slice(&fs::read(dir.join(STUDY_MANIFEST))?)?;
    let read = |name: &str| read_raw(dir.join(name), &m.shape);
    Ok(Study {
        spec: m.spec.clone(),
        protocol: m.protocol.clone(),
        activity: read(&m.activity)?,
        truth: read(&m.truth)?,
        realizations: m.realizations.iter().map(|r| read(r)).collect::<Result<_>>()?,
        acquisition: read(&m.acquisition)?,
        n2n_halves: (read(&m.n2n_halves[0])?, read(&m.n2n_halves[1])?),
    })
}

/// Named regions for evaluation, stored as `rois.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiSet {
    #[serde(default)]
    pub lesion: Option<Roi>,
    #[serde(default)]
    pub background: Option<Roi>,
    #[serde(default)]
    pub ood: Option<Roi>,
}

impl RoiSet {
    /// Lesion 0, background inside the body ellipse with a 2-pixel margin,
    /// and disk 0 grown by one pixel. Regions that come out empty at the
    /// phantom's size are left out.
    pub fn from_spec(spec: &PhantomSpec) -> Result<Self> {
        let keep = |r: Result<Roi>| match r {
            Err(TgdError::EmptyRoi) => Ok(None),
            other => other.map(Some),
        };
        Ok(Self {
            lesion: if spec.lesions.is_empty() { None } else { keep(spec.lesion_roi(0))? },
            background: if spec.ellipses.is_empty() { None } else { keep(spec.background_roi(0, 2.0))? },
            ood: if spec.disks.is_empty() { None } else { keep(spec.disk_roi(0, 1.0))? },
        })
    }
}
