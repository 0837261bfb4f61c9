//! On-disk formats.
//!
//! Trajectory container, little-endian throughout:
//!
//! ```text
//! magic "GGT1" | version u16 | dtype u8 (0 = f32, 1 = i32) | d u8
//! dims d × u32 | channels u32 | frames u32 | payload
//! ```
//!
//! The payload holds the frames in temporal order, cells row-major with
//! channels fastest. Its length must be exactly
//! `frames × ∏dims × channels × 4` bytes.
//!
//! Checkpoints and training state share a second layout: a 4-byte magic, a
//! u32 header length, a JSON header and a flat little-endian payload
//! (f32 for checkpoints, f64 for resumable training state).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::field::{Field, Trajectory};
use crate::lattice_mc::{Neighborhood, SpinLattice};
use crate::model::{ModelConfig, SurrogateParams};
use crate::trainer::{AdamState, EpochRecord, PlateauScheduler, TrainState};

pub const CONTAINER_MAGIC: &[u8; 4] = b"GGT1";
pub const CONTAINER_VERSION: u16 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"GGCK";
const STATE_MAGIC: &[u8; 4] = b"GGRS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    I32,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::I32 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::I32),
            other => Err(Error::Format(format!("unknown dtype code {other}; expected 0 (f32) or 1 (i32)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ContainerHeader {
    pub version: u16,
    pub dtype: Dtype,
    pub dims: Vec<usize>,
    pub channels: usize,
    pub frames: usize,
}

impl ContainerHeader {
    pub fn cells(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn payload_bytes(&self) -> usize {
        self.frames * self.cells() * self.channels * 4
    }

    fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CONTAINER_MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        w.write_all(&[self.dtype.code(), self.dims.len() as u8])?;
        for &d in &self.dims {
            w.write_all(&to_u32(d, "dim")?.to_le_bytes())?;
        }
        w.write_all(&to_u32(self.channels, "channel count")?.to_le_bytes())?;
        w.write_all(&to_u32(self.frames, "frame count")?.to_le_bytes())?;
        Ok(())
    }

    fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic")?;
        if &magic != CONTAINER_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}; expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(CONTAINER_MAGIC)
            )));
        }
        let version = u16::from_le_bytes(read_array(r, "version")?);
        if version != CONTAINER_VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {version}; this build reads version {CONTAINER_VERSION}"
            )));
        }
        let [code, d] = read_array(r, "dtype and rank")?;
        let dtype = Dtype::from_code(code)?;
        if d == 0 {
            return Err(Error::Format("container declares zero spatial dimensions".into()));
        }
        let mut dims = Vec::with_capacity(d as usize);
        for _ in 0..d {
            dims.push(u32::from_le_bytes(read_array(r, "dims")?) as usize);
        }
        let channels = u32::from_le_bytes(read_array(r, "channels")?) as usize;
        let frames = u32::from_le_bytes(read_array(r, "frame count")?) as usize;
        Ok(ContainerHeader {
            version,
            dtype,
            dims,
            channels,
            frames,
        })
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("file ends inside the {what}")),
        _ => Error::Io(e),
    })
}

fn read_array<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b, what)?;
    Ok(b)
}

/// Reads the payload and checks that nothing follows it.
fn read_payload(r: &mut impl Read, expected: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(expected);
    r.read_to_end(&mut buf)?;
    if buf.len() != expected {
        return Err(Error::Format(format!(
            "payload has {} bytes, header implies {expected}",
            buf.len()
        )));
    }
    Ok(buf)
}

fn check_frames(frames: &[Field]) -> Result<(Vec<usize>, usize)> {
    let first = frames.first().ok_or_else(|| Error::Format("cannot write an empty trajectory".into()))?;
    if frames.iter().any(|f| !f.same_shape(first)) {
        return Err(Error::shape("frames differ in shape"));
    }
    Ok((first.dims().to_vec(), first.channels()))
}

/// Writes frames as f32.
pub fn write_fields(w: &mut impl Write, frames: &[Field]) -> Result<()> {
    let (dims, channels) = check_frames(frames)?;
    ContainerHeader {
        version: CONTAINER_VERSION,
        dtype: Dtype::F32,
        dims,
        channels,
        frames: frames.len(),
    }
    .write(w)?;
    for f in frames {
        for &v in f.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_fields(r: &mut impl Read) -> Result<Trajectory> {
    let h = ContainerHeader::read(r)?;
    if h.dtype != Dtype::F32 {
        return Err(Error::Format("expected an f32 field container, found i32 labels".into()));
    }
    let bytes = read_payload(r, h.payload_bytes())?;
    let per = h.cells() * h.channels;
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let frames = values
        .chunks(per.max(1))
        .take(h.frames)
        .map(|c| Field::from_vec(&h.dims, h.channels, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(frames)
}

/// Writes lattice labels as i32, one channel.
pub fn write_lattices(w: &mut impl Write, lattices: &[SpinLattice]) -> Result<()> {
    let first = lattices.first().ok_or_else(|| Error::Format("cannot write an empty trajectory".into()))?;
    if lattices.iter().any(|l| l.dims() != first.dims()) {
        return Err(Error::shape("lattices differ in shape"));
    }
    ContainerHeader {
        version: CONTAINER_VERSION,
        dtype: Dtype::I32,
        dims: first.dims().to_vec(),
        channels: 1,
        frames: lattices.len(),
    }
    .write(w)?;
    for l in lattices {
        for &v in l.labels() {
            let v = i32::try_from(v).map_err(|_| Error::Format(format!("label {v} does not fit in i32")))?;
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_lattices(r: &mut impl Read, neighborhood: Neighborhood) -> Result<Vec<SpinLattice>> {
    let h = ContainerHeader::read(r)?;
    if h.dtype != Dtype::I32 || h.channels != 1 {
        return Err(Error::Format("expected a single-channel i32 label container".into()));
    }
    let bytes = read_payload(r, h.payload_bytes())?;
    let mut labels = Vec::with_capacity(h.cells() * h.frames);
    for b in bytes.chunks_exact(4) {
        let v = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        labels.push(u32::try_from(v).map_err(|_| Error::Format(format!("negative label {v}")))?);
    }
    labels
        .chunks(h.cells().max(1))
        .take(h.frames)
        .map(|c| SpinLattice::from_labels(&h.dims, c.to_vec(), neighborhood))
        .collect()
}

pub fn read_header(r: &mut impl Read) -> Result<ContainerHeader> {
    ContainerHeader::read(r)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save_fields(path: &Path, frames: &[Field]) -> Result<()> {
    let mut w = create(path)?;
    write_fields(&mut w, frames)?;
    w.flush()?;
    Ok(())
}

pub fn load_fields(path: &Path) -> Result<Trajectory> {
    with_path(path, read_fields(&mut open(path)?))
}

pub fn save_lattices(path: &Path, lattices: &[SpinLattice]) -> Result<()> {
    let mut w = create(path)?;
    write_lattices(&mut w, lattices)?;
    w.flush()?;
    Ok(())
}

pub fn load_lattices(path: &Path, neighborhood: Neighborhood) -> Result<Vec<SpinLattice>> {
    with_path(path, read_lattices(&mut open(path)?, neighborhood))
}

pub fn load_header(path: &Path) -> Result<ContainerHeader> {
    with_path(path, read_header(&mut open(path)?))
}

fn write_framed(w: &mut impl Write, magic: &[u8; 4], header: &impl Serialize, payload: &[u8]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    w.write_all(magic)?;
    w.write_all(&to_u32(json.len(), "header length")?.to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(payload)?;
    Ok(())
}

fn read_framed<H: for<'de> Deserialize<'de>>(r: &mut impl Read, magic: &[u8; 4]) -> Result<(H, Vec<u8>)> {
    let found: [u8; 4] = read_array(r, "magic")?;
    if &found != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}; expected {:?}",
            String::from_utf8_lossy(&found),
            String::from_utf8_lossy(magic)
        )));
    }
    let len = u32::from_le_bytes(read_array(r, "header length")?) as usize;
    let mut json = vec![0u8; len];
    read_exact(r, &mut json, "header")?;
    let header = serde_json::from_slice(&json)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    Ok((header, payload))
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    stage_sides: Vec<usize>,
    param_count: usize,
    #[serde(default)]
    metadata: Value,
}

/// Parameters as f32 with the architecture and free-form metadata in the
/// header.
pub fn write_checkpoint(w: &mut impl Write, params: &SurrogateParams, metadata: Value) -> Result<()> {
    let flat = params.flatten();
    let header = CheckpointHeader {
        model: params.config(),
        stage_sides: params.ae.stages().iter().map(|s| s.side()).collect(),
        param_count: flat.len(),
        metadata,
    };
    let payload: Vec<u8> = flat.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    write_framed(w, CHECKPOINT_MAGIC, &header, &payload)
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<(SurrogateParams, Value)> {
    let (h, payload): (CheckpointHeader, _) = read_framed(r, CHECKPOINT_MAGIC)?;
    let mut params = SurrogateParams::new(&h.model, 0)?;
    if params.param_count() != h.param_count {
        return Err(Error::Format(format!(
            "header declares {} parameters, architecture has {}",
            h.param_count,
            params.param_count()
        )));
    }
    if payload.len() != h.param_count * 4 {
        return Err(Error::Format(format!(
            "payload has {} bytes, header implies {}",
            payload.len(),
            h.param_count * 4
        )));
    }
    let flat: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    params.load_flat(&flat)?;
    Ok((params, h.metadata))
}

pub fn save_checkpoint(path: &Path, params: &SurrogateParams, metadata: Value) -> Result<()> {
    let mut w = create(path)?;
    write_checkpoint(&mut w, params, metadata)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(SurrogateParams, Value)> {
    with_path(path, read_checkpoint(&mut open(path)?))
}

#[derive(Debug, Serialize, Deserialize)]
struct StateHeader {
    epochs_done: usize,
    len: usize,
    adam_step: u64,
    scheduler: PlateauScheduler,
    history: Vec<EpochRecord>,
}

/// Full-precision training state: parameters and both Adam moments as f64.
pub fn write_train_state(w: &mut impl Write, state: &TrainState) -> Result<()> {
    let header = StateHeader {
        epochs_done: state.epochs_done,
        len: state.params.len(),
        adam_step: state.adam.step,
        scheduler: state.scheduler.clone(),
        history: state.history.clone(),
    };
    let payload: Vec<u8> = state
        .params
        .iter()
        .chain(&state.adam.m)
        .chain(&state.adam.v)
        .flat_map(|v| v.to_le_bytes())
        .collect();
    write_framed(w, STATE_MAGIC, &header, &payload)
}

pub fn read_train_state(r: &mut impl Read) -> Result<TrainState> {
    let (h, payload): (StateHeader, _) = read_framed(r, STATE_MAGIC)?;
    if payload.len() != 3 * h.len * 8 {
        return Err(Error::Format(format!(
            "payload has {} bytes, header implies {}",
            payload.len(),
            3 * h.len * 8
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    let (params, rest) = values.split_at(h.len);
    let (m, v) = rest.split_at(h.len);
    Ok(TrainState {
        epochs_done: h.epochs_done,
        params: params.to_vec(),
        adam: AdamState {
            m: m.to_vec(),
            v: v.to_vec(),
            step: h.adam_step,
        },
        scheduler: h.scheduler,
        history: h.history,
    })
}

pub fn save_train_state(path: &Path, state: &TrainState) -> Result<()> {
    let mut w = create(path)?;
    write_train_state(&mut w, state)?;
    w.flush()?;
    Ok(())
}

pub fn load_train_state(path: &Path) -> Result<TrainState> {
    with_path(path, read_train_state(&mut open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice_mc::init_lattice;
    use crate::trainer::{PlateauScheduler, TrainState};

    fn f32_field(dims: &[usize], channels: usize, seed: f32) -> Field {
        let n: usize = dims.iter().product::<usize>() * channels;
        let data = (0..n).map(|i| ((i as f32 * 0.37 + seed).sin()) as f64).collect();
        Field::from_vec(dims, channels, data).unwrap()
    }

    #[test]
    fn field_round_trip_bit_exact() {
        let frames = vec![f32_field(&[4, 6], 2, 0.0), f32_field(&[4, 6], 2, 1.0)];
        let mut bytes = Vec::new();
        write_fields(&mut bytes, &frames).unwrap();
        assert_eq!(bytes.len(), 4 + 2 + 2 + 8 + 4 + 4 + 2 * 24 * 2 * 4);
        let back = read_fields(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.frames(), frames.as_slice());
        let mut again = Vec::new();
        write_fields(&mut again, back.frames()).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn header_layout() {
        let mut bytes = Vec::new();
        write_fields(&mut bytes, &[Field::zeros(&[2, 3, 4], 1)]).unwrap();
        assert_eq!(&bytes[..4], b"GGT1");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(bytes[6], 0);
        assert_eq!(bytes[7], 3);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 4);
        let h = read_header(&mut bytes.as_slice()).unwrap();
        assert_eq!(h.payload_bytes(), 24 * 4);
    }

    #[test]
    fn lattice_round_trip() {
        let ls: Vec<SpinLattice> = (0..3)
            .map(|s| init_lattice(&[5, 4], 20, s, Neighborhood::Moore).unwrap())
            .collect();
        let mut bytes = Vec::new();
        write_lattices(&mut bytes, &ls).unwrap();
        assert_eq!(bytes[6], 1);
        assert_eq!(read_lattices(&mut bytes.as_slice(), Neighborhood::Moore).unwrap(), ls);
        assert!(read_fields(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn corruption_is_diagnosed() {
        let mut bytes = Vec::new();
        write_fields(&mut bytes, &[Field::zeros(&[2, 2], 1)]).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let e = read_fields(&mut bad.as_slice()).unwrap_err().to_string();
        assert!(e.contains("bad magic") && e.contains("XGT1"), "{e}");
        let e = read_fields(&mut &bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(e.contains("payload has 13 bytes, header implies 16"), "{e}");
        let mut long = bytes.clone();
        long.push(0);
        assert!(read_fields(&mut long.as_slice()).unwrap_err().to_string().contains("17 bytes"));
        let e = read_fields(&mut &bytes[..10]).unwrap_err().to_string();
        assert!(e.contains("ends inside"), "{e}");
        let mut code = bytes.clone();
        code[6] = 9;
        assert!(read_fields(&mut code.as_slice()).unwrap_err().to_string().contains("dtype code 9"));
        let mut ver = bytes;
        ver[4] = 7;
        assert!(read_fields(&mut ver.as_slice()).unwrap_err().to_string().contains("version 7"));
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ModelConfig::new(2, 2, 6, 2);
        let p = SurrogateParams::new(&cfg, 3).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &p, serde_json::json!({"epochs": 4})).unwrap();
        let (q, meta) = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(meta["epochs"], 4);
        assert_eq!(q.config(), cfg);
        for (a, b) in p.flatten().iter().zip(q.flatten()) {
            assert_eq!(*a as f32, b as f32);
        }
        let mut again = Vec::new();
        write_checkpoint(&mut again, &q, meta).unwrap();
        assert_eq!(again, bytes);
        assert!(read_checkpoint(&mut &bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn train_state_round_trip_exact() {
        let state = TrainState {
            epochs_done: 3,
            params: vec![0.1, -2.5e-17, std::f64::consts::PI],
            adam: AdamState {
                m: vec![1e-300, 2.0, 3.0],
                v: vec![4.0, 5.0, 1.0 / 3.0],
                step: 17,
            },
            scheduler: PlateauScheduler {
                best: 0.1 + 0.2,
                ..PlateauScheduler::new(1e-3, 0.5, 4, 1e-6)
            },
            history: vec![EpochRecord {
                epoch: 0,
                train_loss: 1.0 / 7.0,
                val_loss: None,
                lr: 1e-3,
            }],
        };
        let mut bytes = Vec::new();
        write_train_state(&mut bytes, &state).unwrap();
        assert_eq!(read_train_state(&mut bytes.as_slice()).unwrap(), state);
    }
}
