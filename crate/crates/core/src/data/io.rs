//! Feature files and dataset directories.
//!
//! A feature file is one JSON header line followed by the feature matrix as
//! little-endian `f32` values in row-major order:
//!
//! ```text
//! {"format":"mmfs-features","version":1,"video_id":"v000_000","snippets":T,"dim":D,"annotations":[...]}\n
//! <T * D * 4 bytes>
//! ```
//!
//! A dataset directory holds `manifest.json` and `videos/<video_id>.feat`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassSplit, Dataset, Lexicon, RawFeatures, SegmentAnnotation, VideoRecord};
use crate::error::{Error, Result};

const FEATURE_FORMAT: &str = "mmfs-features";
const FEATURE_VERSION: u32 = 1;
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureHeader {
    format: String,
    version: u32,
    video_id: String,
    snippets: usize,
    dim: usize,
    annotations: Vec<SegmentAnnotation>,
}

pub fn write_feature_file(path: &Path, video: &VideoRecord) -> Result<()> {
    let header = FeatureHeader {
        format: FEATURE_FORMAT.into(),
        version: FEATURE_VERSION,
        video_id: video.video_id.clone(),
        snippets: video.features.rows(),
        dim: video.features.cols(),
        annotations: video.annotations.clone(),
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    buf.reserve(video.features.data().len() * 4);
    for v in video.features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<VideoRecord> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Data(format!("{}: missing header line", path.display())));
    }
    let header: FeatureHeader = serde_json::from_slice(&line[..line.len() - 1])
        .map_err(|e| Error::Data(format!("{}: bad header: {e}", path.display())))?;
    if header.format != FEATURE_FORMAT || header.version != FEATURE_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported feature format {} v{}",
            path.display(),
            header.format,
            header.version
        )));
    }
    let n = header.snippets * header.dim;
    let mut bytes = Vec::with_capacity(n * 4);
    reader.read_to_end(&mut bytes)?;
    if bytes.len() != n * 4 {
        return Err(Error::Data(format!(
            "{}: expected {} payload bytes, found {}",
            path.display(),
            n * 4,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(VideoRecord {
        video_id: header.video_id,
        features: RawFeatures::new(header.snippets, header.dim, data)?,
        annotations: header.annotations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub class_names: Vec<String>,
    pub split: ClassSplit,
    pub videos: Vec<String>,
    #[serde(default)]
    pub lexicon: Option<Lexicon>,
}

pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    let videos_dir = dir.join("videos");
    fs::create_dir_all(&videos_dir)?;
    for v in &dataset.videos {
        write_feature_file(&videos_dir.join(format!("{}.feat", v.video_id)), v)?;
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        class_names: dataset.class_names.clone(),
        split: dataset.split.clone(),
        videos: dataset.videos.iter().map(|v| v.video_id.clone()).collect(),
        lexicon: dataset.lexicon.clone(),
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text =
        fs::read_to_string(&manifest_path).map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Data(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for id in &manifest.videos {
        let v = read_feature_file(&dir.join("videos").join(format!("{id}.feat")))?;
        if &v.video_id != id {
            return Err(Error::Data(format!("feature file for {id} holds video {}", v.video_id)));
        }
        videos.push(v);
    }
    let dataset = Dataset {
        class_names: manifest.class_names,
        videos,
        split: manifest.split,
        lexicon: manifest.lexicon,
    };
    dataset.validate()?;
    Ok(dataset)
}
