//! Patient-grouped frame index shared by generation, curation and training.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::frame::{Frame, FrameKind, Pathology, Quality, View};
use crate::pnm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Curation outcome as stored in a curated manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DispositionKind {
    KeptPlane,
    RejectedDoppler,
    RejectedSplitView,
    RejectedMMode,
    RejectedBackground,
    RejectedLowConfidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub patient_id: u32,
    pub frame_id: u32,
    /// Relative to the directory holding the manifest.
    pub file_path: String,
    pub kind: FrameKind,
    pub view: View,
    pub pathology: Pathology,
    pub quality: Quality,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disposition: Option<DispositionKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curated_view: Option<View>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl ManifestRecord {
    pub fn is_kept(&self) -> bool {
        self.disposition == Some(DispositionKind::KeptPlane)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub config_digest: String,
}

impl DatasetManifest {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serialises");
        bytes.push(b'\n');
        bytes
    }

    /// SHA-256 of the serialised manifest, hex encoded.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Writes through a temporary file so a failed write leaves no manifest.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn patients(&self, split: Split) -> BTreeSet<u32> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.patient_id)
            .collect()
    }

    /// True when no patient appears in more than one split.
    pub fn splits_disjoint(&self) -> bool {
        let train = self.patients(Split::Train);
        let val = self.patients(Split::Val);
        let test = self.patients(Split::Test);
        train.is_disjoint(&val) && train.is_disjoint(&test) && val.is_disjoint(&test)
    }
}

/// Reads a frame file and attaches the record's labels.
pub fn load_frame(record: &ManifestRecord, base_dir: &Path) -> Result<Frame> {
    let path: PathBuf = base_dir.join(&record.file_path);
    let raster = pnm::read(&path)?;
    let frame = Frame {
        height: raster.height,
        width: raster.width,
        channels: raster.channels,
        pixels: raster.samples.iter().map(|&s| s as f64).collect(),
        kind: record.kind,
        view: record.view,
        pathology: record.pathology,
        quality: record.quality,
        patient_id: record.patient_id,
        frame_id: record.frame_id,
    };
    frame.validate()?;
    Ok(frame)
}

/// Writes a frame's pixels. Pixels must already sit on the integer grid.
pub fn save_frame(frame: &Frame, path: &Path) -> Result<()> {
    frame.validate()?;
    let samples = frame
        .pixels
        .iter()
        .map(|&p| {
            if p.fract() != 0.0 {
                Err(Error::InvalidArgument(format!("pixel {p} is not an integer level")))
            } else {
                Ok(p as u16)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    pnm::write(
        path,
        &pnm::Raster {
            height: frame.height,
            width: frame.width,
            channels: frame.channels,
            samples,
        },
    )
}
