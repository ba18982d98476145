//! Versioned container for backbone feature maps.
//!
//! Layout (little-endian): magic `AFF1`, u32 version = 1, u32 record count,
//! u32 patches, u32 channels; then per record a u16 id byte-length, the UTF-8
//! id, and `patches·channels` f32 values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io_util::{read_u16, read_u32, sha256_bytes, Checked};
use crate::model::{BACKBONE_CHANNELS, BACKBONE_PATCHES};
use crate::tensorcore::Tensor;

const MAGIC: &[u8; 4] = b"AFF1";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FeatureShape {
    pub patches: usize,
    pub channels: usize,
}

impl Default for FeatureShape {
    fn default() -> Self {
        Self {
            patches: BACKBONE_PATCHES,
            channels: BACKBONE_CHANNELS,
        }
    }
}

/// One image's backbone output.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub id: String,
    pub patches: Tensor<f32>,
}

impl FeatureMap {
    pub fn new(id: impl Into<String>, patches: Tensor<f32>) -> Result<Self> {
        let id = id.into();
        if !patches.is_finite() {
            return Err(Error::NonFinite(format!("features of {id}")));
        }
        if id.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!("id of {} bytes is too long", id.len())));
        }
        Ok(Self { id, patches })
    }

    pub fn shape(&self) -> FeatureShape {
        FeatureShape {
            patches: self.patches.rows(),
            channels: self.patches.cols(),
        }
    }

    /// SHA-256 over the little-endian payload.
    pub fn checksum(&self) -> String {
        sha256_bytes(&payload_bytes(&self.patches))
    }
}

fn payload_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes a whole container.
pub fn save_features<'a>(
    path: &Path,
    shape: FeatureShape,
    records: impl IntoIterator<Item = &'a FeatureMap>,
) -> Result<usize> {
    let records: Vec<&FeatureMap> = records.into_iter().collect();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    for v in [VERSION, records.len() as u32, shape.patches as u32, shape.channels as u32] {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    for (i, r) in records.iter().enumerate() {
        if r.shape() != shape {
            return Err(Error::Ingestion(format!(
                "record {i} ({}): shape {:?} differs from container shape {:?}",
                r.id,
                r.shape(),
                shape
            )));
        }
        w.write_all(&(r.id.len() as u16).to_le_bytes()).map_err(io)?;
        w.write_all(r.id.as_bytes()).map_err(io)?;
        w.write_all(&payload_bytes(&r.patches)).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(records.len())
}

/// Streaming reader over a feature container.
pub struct FeatureReader {
    reader: Checked<BufReader<File>>,
    path: PathBuf,
    shape: FeatureShape,
    count: usize,
    next: usize,
    failed: bool,
}

impl FeatureReader {
    pub fn shape(&self) -> FeatureShape {
        self.shape
    }

    pub fn count(&self) -> usize {
        self.count
    }

    fn read_record(&mut self) -> Result<FeatureMap> {
        let i = self.next;
        let r = &mut self.reader;
        let len = read_u16(r, &format!("record {i} id length"))? as usize;
        let mut id = vec![0u8; len];
        r.read_exact(&mut id, &format!("record {i} id"))?;
        let id = String::from_utf8(id).map_err(|_| r.error(format!("record {i}: id is not UTF-8")))?;
        let n = self.shape.patches * self.shape.channels;
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw, &format!("record {i} ({id}) payload"))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let patches = Tensor::new(self.shape.patches, self.shape.channels, data)
            .map_err(|e| r.error(format!("record {i}: {e}")))?;
        FeatureMap::new(id, patches).map_err(|e| r.error(format!("record {i}: {e}")))
    }

    fn check_trailing(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        let n = self.reader.inner().read(&mut b).map_err(|e| Error::io(&self.path, e))?;
        if n != 0 {
            return Err(self.reader.error(format!("trailing bytes after record {}", self.count)));
        }
        Ok(())
    }
}

impl Iterator for FeatureReader {
    type Item = Result<FeatureMap>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        if self.next >= self.count {
            if self.next == self.count {
                self.next += 1;
                if let Err(e) = self.check_trailing() {
                    self.failed = true;
                    return Some(Err(e));
                }
            }
            return None;
        }
        let rec = self.read_record();
        self.next += 1;
        if rec.is_err() {
            self.failed = true;
        }
        Some(rec)
    }
}

/// Opens a container and validates its header.
pub fn load_features(path: &Path) -> Result<FeatureReader> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = Checked::new(BufReader::new(file), path);
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(reader.error("bad magic, not a feature container"));
    }
    let version = read_u32(&mut reader, "version")?;
    if version != VERSION {
        return Err(reader.error(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut reader, "record count")? as usize;
    let patches = read_u32(&mut reader, "patch count")? as usize;
    let channels = read_u32(&mut reader, "channel count")? as usize;
    if patches == 0 || channels == 0 {
        return Err(reader.error(format!("degenerate shape {patches}x{channels}")));
    }
    Ok(FeatureReader {
        reader,
        path: path.to_path_buf(),
        shape: FeatureShape { patches, channels },
        count,
        next: 0,
        failed: false,
    })
}

/// Loads every record, requiring the container shape to equal `expected`.
pub fn load_all_features(path: &Path, expected: FeatureShape) -> Result<Vec<FeatureMap>> {
    let reader = load_features(path)?;
    if reader.shape() != expected {
        return Err(Error::Ingestion(format!(
            "{}: container holds {}x{} features, expected {}x{}",
            path.display(),
            reader.shape().patches,
            reader.shape().channels,
            expected.patches,
            expected.channels
        )));
    }
    reader.collect()
}
