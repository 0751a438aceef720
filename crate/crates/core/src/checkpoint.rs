//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "PSCLCKPT"
//! version    u32
//! arch       u32 length + UTF-8 JSON ArchitectureSpec
//! seed       u64
//! iteration  u64
//! tensors    u32 count, then per tensor: u32 ndim, ndim × u64 extents, f64 payload
//!            (layer weights/bias in order, head weights, head bias, centers)
//! resume     u8 warm-started flag, u64 count, count × i64 last label (-1 = unseen)
//! checksum   32-byte SHA-256 of everything above
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{ArchitectureSpec, Network};
use crate::pseudo_loss::CenterBank;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PSCLCKPT";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

/// Trainer bookkeeping needed to resume bit-identically.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResumeState {
    pub warm_started: bool,
    /// Last pseudo-label seen for each dataset sample.
    pub last_labels: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub centers: CenterBank,
    pub iteration: u64,
    pub resume: ResumeState,
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let arch = serde_json::to_vec(ckpt.network.spec()).expect("architecture serializes");
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(&arch);
    out.extend_from_slice(&ckpt.network.seed().to_le_bytes());
    out.extend_from_slice(&ckpt.iteration.to_le_bytes());

    let tensors: Vec<&Tensor> = ckpt
        .network
        .parameters()
        .chain(std::iter::once(ckpt.centers.as_tensor()))
        .collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&t.to_le_bytes());
    }

    out.push(u8::from(ckpt.resume.warm_started));
    out.extend_from_slice(&(ckpt.resume.last_labels.len() as u64).to_le_bytes());
    for l in &ckpt.resume.last_labels {
        let v = l.map_or(-1i64, |z| z as i64);
        out.extend_from_slice(&v.to_le_bytes());
    }

    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(format!("truncated at byte {} (wanted {n} more)", self.pos));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> std::result::Result<Tensor, String> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(format!("implausible tensor rank {ndim}"));
        }
        let shape = (0..ndim)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or("tensor extent overflow")?;
        let bytes = self.take(n.checked_mul(8).ok_or("tensor size overflow")?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| e.to_string())
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err("bad magic".into());
    }
    if bytes.len() < MAGIC.len() + CHECKSUM_LEN {
        return Err("truncated: checksum missing".into());
    }
    let (body, stored) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != stored {
        return Err("checksum mismatch (file truncated or corrupted)".into());
    }
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let arch_len = r.u32()? as usize;
    let spec: ArchitectureSpec =
        serde_json::from_slice(r.take(arch_len)?).map_err(|e| format!("architecture: {e}"))?;
    let seed = r.u64()?;
    let iteration = r.u64()?;
    let count = r.u32()? as usize;
    let mut tensors = (0..count).map(|_| r.tensor()).collect::<std::result::Result<Vec<_>, _>>()?;

    let n_layers = spec.layers.len();
    if count != 2 * n_layers + 3 {
        return Err(format!("expected {} tensors, found {count}", 2 * n_layers + 3));
    }
    let centers = tensors.pop().unwrap();
    let head_bias = tensors.pop().unwrap();
    let head_weights = tensors.pop().unwrap();
    let mut params = Vec::with_capacity(n_layers);
    let mut it = tensors.into_iter();
    while let (Some(w), Some(b)) = (it.next(), it.next()) {
        params.push((w, b));
    }
    let network = Network::from_parts(spec, params, head_weights, head_bias, seed).map_err(|e| e.to_string())?;
    let centers = CenterBank::from_tensor(centers).map_err(|e| e.to_string())?;
    if centers.num_classes() != network.num_pseudo_classes() || centers.feature_dim() != network.feature_dim() {
        return Err("center bank does not match the architecture".into());
    }

    let warm_started = match r.take(1)?[0] {
        0 => false,
        1 => true,
        b => return Err(format!("bad warm-start flag {b}")),
    };
    let n = r.u64()? as usize;
    let last_labels = (0..n)
        .map(|_| {
            let v = i64::from_le_bytes(r.take(8)?.try_into().unwrap());
            Ok(usize::try_from(v).ok())
        })
        .collect::<std::result::Result<Vec<_>, String>>()?;
    if r.pos != body.len() {
        return Err(format!("{} trailing bytes", body.len() - r.pos));
    }
    Ok(Checkpoint {
        network,
        centers,
        iteration,
        resume: ResumeState {
            warm_started,
            last_labels,
        },
    })
}

/// Writes to a temporary sibling and renames it into place.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode(ckpt))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = PathBuf::from(path);
    tmp.as_mut_os_string().push(".tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::InputGeometry;

    fn sample() -> Checkpoint {
        let spec = ArchitectureSpec::desk(InputGeometry::new(1, 8, 8), 6, 3);
        let network = Network::init(spec, 42).unwrap();
        let mut centers = Tensor::zeros(&[3, 6]);
        centers.data_mut()[4] = -1.5e-7;
        Checkpoint {
            network,
            centers: CenterBank::from_tensor(centers).unwrap(),
            iteration: 100,
            resume: ResumeState {
                warm_started: true,
                last_labels: vec![Some(2), None, Some(0)],
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ckpt = sample();
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.network.parameter_bytes(), ckpt.network.parameter_bytes());
        assert_eq!(back, ckpt);
        assert_eq!(encode(&back), fs::read(&path).unwrap());
    }

    #[test]
    fn truncation_is_a_checksum_error() {
        let bytes = encode(&sample());
        for cut in [bytes.len() - 1, bytes.len() / 2, 12] {
            let err = decode(&bytes[..cut]).unwrap_err();
            assert!(err.contains("checksum") || err.contains("truncated"), "{err}");
        }
    }

    #[test]
    fn corruption_and_bad_magic() {
        let mut bytes = encode(&sample());
        bytes[40] ^= 0x01;
        assert!(decode(&bytes).unwrap_err().contains("checksum"));
        let mut bytes = encode(&sample());
        bytes[0] = b'X';
        assert_eq!(decode(&bytes).unwrap_err(), "bad magic");
    }

    #[test]
    fn load_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"PSCLCKPT-not-really").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { .. }));
        assert!(err.to_string().contains("bad.ckpt"));
    }
}
