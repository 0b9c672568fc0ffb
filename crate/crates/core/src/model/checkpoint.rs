//! `WSTR1` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "WSTR1"
//! u32 entry count
//! per entry: u32 name length, name (UTF-8), u32 rank, rank × u64 extents,
//!            product(extents) × f64
//! ```
//!
//! Entry names carry a `student.` or `teacher.` prefix; `meta.net_config`
//! and `meta.ema_alpha` hold the architecture and the teacher smoothing.

use std::io::{Read, Write};
use std::path::Path;

use super::net::{NetConfig, StudentNet, TeacherNet};
use crate::error::{Error, Result};
use crate::grad::Tensor;

pub const MAGIC: &[u8; 5] = b"WSTR1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub student: StudentNet,
    pub teacher: Option<TeacherNet>,
}

impl Checkpoint {
    pub fn entries(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![(
            "meta.net_config".to_string(),
            Tensor::from_vec(self.student.config.to_values()),
        )];
        for (_, p) in self.student.store.iter() {
            out.push((format!("student.{}", p.name), p.value.clone()));
        }
        if let Some(t) = &self.teacher {
            out.push(("meta.ema_alpha".into(), Tensor::from_vec(vec![t.ema_alpha])));
            for (_, p) in t.net().store.iter() {
                out.push((format!("teacher.{}", p.name), p.value.clone()));
            }
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let entries = self.entries();
        w.write_all(MAGIC)?;
        w.write_all(&(entries.len() as u32).to_le_bytes())?;
        for (name, t) in &entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a WSTR1 checkpoint".into()));
        }
        let count = read_u32(r)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("non UTF-8 parameter name".into()))?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        Self::from_entries(entries)
    }

    fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let find = |key: &str| entries.iter().find(|(n, _)| n == key).map(|(_, t)| t);
        let config = find("meta.net_config")
            .ok_or_else(|| Error::Format("missing meta.net_config".into()))?;
        let config = NetConfig::from_values(config.data())?;
        let load = |prefix: &str| -> Result<Option<StudentNet>> {
            let mut net = StudentNet::new(config.clone(), 0)?;
            let mut seen = 0;
            for (_, p) in net.store.iter_mut() {
                let Some(t) = find(&format!("{prefix}.{}", p.name)) else {
                    continue;
                };
                if t.shape() != p.value.shape() {
                    return Err(Error::Format(format!(
                        "{prefix}.{}: shape {:?}, expected {:?}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    )));
                }
                p.value = t.clone();
                seen += 1;
            }
            match seen {
                0 => Ok(None),
                n if n == net.store.len() => Ok(Some(net)),
                n => Err(Error::Format(format!(
                    "{prefix}: {n} of {} parameters present",
                    net.store.len()
                ))),
            }
        };
        let student = load("student")?.ok_or_else(|| Error::Format("no student".into()))?;
        let teacher = match load("teacher")? {
            Some(net) => {
                let alpha = find("meta.ema_alpha")
                    .map(|t| t.data()[0])
                    .ok_or_else(|| Error::Format("missing meta.ema_alpha".into()))?;
                Some(TeacherNet::from_student(&net, alpha))
            }
            None => None,
        };
        Ok(Self { student, teacher })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
