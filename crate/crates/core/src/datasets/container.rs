//! The `MMSEG1` dataset container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic          8 bytes  "MMSEG1\0\0"
//! n_instances    u32
//! height         u32
//! width          u32
//! channels       u32
//! per instance:
//!   n_modes      u32
//!   conditioning channels*height*width f32
//!   per mode:
//!     weight     f64
//!     mask       height*width u8 (0 or 1)
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{ConditionedInstance, Dataset, Mode};
use crate::maskgrid::BinaryMask;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MMSEG1\0\0";

pub fn write_dataset_to<W: Write>(dataset: &Dataset, out: &mut W) -> Result<()> {
    dataset.validate()?;
    out.write_all(MAGIC)?;
    for v in [dataset.instances.len(), dataset.height, dataset.width, dataset.channels] {
        out.write_all(&u32::try_from(v).map_err(|_| Error::invalid("dataset dimension exceeds u32"))?.to_le_bytes())?;
    }
    for inst in &dataset.instances {
        out.write_all(&(inst.modes.len() as u32).to_le_bytes())?;
        for v in &inst.conditioning {
            out.write_all(&v.to_le_bytes())?;
        }
        for m in &inst.modes {
            out.write_all(&m.weight.to_le_bytes())?;
            out.write_all(m.mask.values())?;
        }
    }
    Ok(())
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_dataset_to(dataset, &mut out)?;
    out.flush()?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}: need {n} bytes, {} left", self.data.len() - self.pos),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

pub fn read_dataset_from<R: Read>(input: &mut R) -> Result<Dataset> {
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    let mut cur = Cursor { data: &data, pos: 0 };
    if cur.take(8, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, message: "bad magic, expected MMSEG1".into() });
    }
    let n = cur.u32("instance count")?;
    let height = cur.u32("height")?;
    let width = cur.u32("width")?;
    let channels = cur.u32("channel count")?;
    if n > 0 && (height == 0 || width == 0) {
        return Err(Error::Format { offset: 12, message: "zero grid size with nonempty dataset".into() });
    }
    let plane = height * width;
    let mut instances = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let n_modes = cur.u32("mode count")?;
        let raw = cur.take(4 * channels * plane, "conditioning")?;
        let conditioning = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let mut modes = Vec::with_capacity(n_modes.min(1 << 16));
        for _ in 0..n_modes {
            let weight = f64::from_le_bytes(cur.take(8, "mode weight")?.try_into().unwrap());
            let offset = cur.pos;
            let bytes = cur.take(plane, "mask")?;
            if let Some(i) = bytes.iter().position(|&b| b > 1) {
                return Err(Error::Format { offset: (offset + i) as u64, message: format!("mask byte {} is not 0/1", bytes[i]) });
            }
            modes.push(Mode { mask: BinaryMask::new(height, width, bytes.to_vec())?, weight });
        }
        instances.push(ConditionedInstance { conditioning, modes });
    }
    if cur.pos != data.len() {
        return Err(Error::Format { offset: cur.pos as u64, message: "trailing bytes after last instance".into() });
    }
    Dataset::new(height, width, channels, instances)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset_from(&mut File::open(path)?)
}
