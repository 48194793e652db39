//! Dataset directory layout:
//!
//! ```text
//! manifest.json          {"geometry": {...}, "samples": [{"id", "labels", "events", "frames"}]}
//! events/<id>.txt        t,x,y,p records
//! frames/<id>.bin        RGB frame tensor
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::atomic_write;
use crate::error::{Error, Result};
use crate::event::{parse_event_stream, FrameTensor, Modality};
use crate::training::config::DataGeometry;
use crate::training::synth::{Dataset, Sample};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub labels: Vec<usize>,
    /// Relative to the dataset directory.
    pub events: String,
    pub frames: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub geometry: DataGeometry,
    pub samples: Vec<ManifestEntry>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<Manifest> {
    let mut samples = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        if !valid_id(&s.id) {
            return Err(Error::invalid(format!("sample id `{}` is not a safe file name", s.id)));
        }
        let events = format!("events/{}.txt", s.id);
        let frames = format!("frames/{}.bin", s.id);
        atomic_write(&dir.join(&events), s.events.to_text().as_bytes())?;
        atomic_write(&dir.join(&frames), &s.rgb.to_bytes())?;
        samples.push(ManifestEntry {
            id: s.id.clone(),
            labels: s.labels.clone(),
            events,
            frames,
        });
    }
    let manifest = Manifest {
        geometry: dataset.geometry.clone(),
        samples,
    };
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');
    atomic_write(&dir.join(MANIFEST), &json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path)?;
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    serde_path_to_error::deserialize(de).map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let g = &manifest.geometry;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for (i, entry) in manifest.samples.iter().enumerate() {
        let ctx = |e: Error| match e {
            Error::Io(_) => e,
            other => Error::config(format!("samples[{i}]"), format!("`{}`: {other}", entry.id)),
        };
        let events = parse_event_stream(&fs::read(dir.join(&entry.events))?, g.sensor_width, g.sensor_height).map_err(ctx)?;
        let rgb = FrameTensor::from_bytes(&fs::read(dir.join(&entry.frames))?).map_err(ctx)?;
        if rgb.modality() != Modality::Rgb {
            return Err(ctx(Error::Format("frames are not RGB".into())));
        }
        samples.push(Sample {
            id: entry.id.clone(),
            labels: entry.labels.clone(),
            events,
            rgb,
        });
    }
    Ok(Dataset {
        geometry: manifest.geometry,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::synth::{generate_synthetic, SyntheticDatasetSpec};

    #[test]
    fn write_then_read_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_synthetic(&SyntheticDatasetSpec::new(2, 2, 4)).unwrap();
        let m = write_dataset(&d, dir.path()).unwrap();
        assert_eq!(m.samples.len(), 4);
        assert_eq!(read_dataset(dir.path()).unwrap(), d);
    }
}
