use std::io::{self, Read};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Reader that turns short reads into format errors naming the file and field.
pub(crate) struct Checked<R> {
    inner: R,
    path: PathBuf,
}

impl<R: Read> Checked<R> {
    pub fn new(inner: R, path: &Path) -> Self {
        Self {
            inner,
            path: path.to_path_buf(),
        }
    }

    pub fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                self.error(format!("truncated while reading {what}"))
            } else {
                Error::io(&self.path, e)
            }
        })
    }

    pub fn error(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            message: message.into(),
        }
    }

    pub fn inner(&mut self) -> &mut R {
        &mut self.inner
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut Checked<R>, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u16<R: Read>(r: &mut Checked<R>, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

/// Hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    io::copy(&mut file, &mut hasher).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(hasher.finalize()))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
