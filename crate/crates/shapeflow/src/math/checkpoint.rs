//! A small binary container for trained parameters and latent code tables.
//!
//! Sections live in a name-sorted map so serialization is deterministic:
//! the same contents always produce byte-identical files. All integers and
//! floats are little-endian; tensors are row-major f64, so round trips are
//! bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::MathError;

const MAGIC: &[u8; 4] = b"SFCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Section {
    F64 {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    },
    U64(u64),
    Str(String),
    Bytes(Vec<u8>),
}

impl Section {
    fn tag(&self) -> u8 {
        match self {
            Section::F64 { .. } => 0,
            Section::U64(_) => 1,
            Section::Str(_) => 2,
            Section::Bytes(_) => 3,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    sections: BTreeMap<String, Section>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.sections.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.keys().map(|s| s.as_str())
    }

    pub fn put_array(&mut self, name: &str, value: &Array2<f64>) {
        self.sections.insert(
            name.to_string(),
            Section::F64 {
                rows: value.nrows(),
                cols: value.ncols(),
                data: value.iter().copied().collect(),
            },
        );
    }

    pub fn put_u64(&mut self, name: &str, value: u64) {
        self.sections.insert(name.to_string(), Section::U64(value));
    }

    pub fn put_str(&mut self, name: &str, value: &str) {
        self.sections
            .insert(name.to_string(), Section::Str(value.to_string()));
    }

    pub fn put_bytes(&mut self, name: &str, value: Vec<u8>) {
        self.sections.insert(name.to_string(), Section::Bytes(value));
    }

    fn section(&self, name: &str) -> Result<&Section, MathError> {
        self.sections
            .get(name)
            .ok_or_else(|| MathError::Checkpoint(format!("missing section '{name}'")))
    }

    pub fn array(&self, name: &str) -> Result<Array2<f64>, MathError> {
        match self.section(name)? {
            Section::F64 { rows, cols, data } => {
                Array2::from_shape_vec((*rows, *cols), data.clone()).map_err(|_| {
                    MathError::Checkpoint(format!("section '{name}' has inconsistent shape"))
                })
            }
            other => Err(MathError::Checkpoint(format!(
                "section '{name}' is not a tensor (tag {})",
                other.tag()
            ))),
        }
    }

    /// Stores a flat f64 slice as a single-row tensor.
    pub fn put_f64s(&mut self, name: &str, value: &[f64]) {
        self.sections.insert(
            name.to_string(),
            Section::F64 {
                rows: 1,
                cols: value.len(),
                data: value.to_vec(),
            },
        );
    }

    /// Reads any f64 tensor section as a flat slice (row-major).
    pub fn f64s(&self, name: &str) -> Result<&[f64], MathError> {
        match self.section(name)? {
            Section::F64 { data, .. } => Ok(data),
            other => Err(MathError::Checkpoint(format!(
                "section '{name}' is not a tensor (tag {})",
                other.tag()
            ))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64, MathError> {
        match self.section(name)? {
            Section::U64(v) => Ok(*v),
            other => Err(MathError::Checkpoint(format!(
                "section '{name}' is not a u64 (tag {})",
                other.tag()
            ))),
        }
    }

    pub fn str(&self, name: &str) -> Result<&str, MathError> {
        match self.section(name)? {
            Section::Str(v) => Ok(v),
            other => Err(MathError::Checkpoint(format!(
                "section '{name}' is not a string (tag {})",
                other.tag()
            ))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8], MathError> {
        match self.section(name)? {
            Section::Bytes(v) => Ok(v),
            other => Err(MathError::Checkpoint(format!(
                "section '{name}' is not raw bytes (tag {})",
                other.tag()
            ))),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.sections.len() as u64).to_le_bytes())?;
        for (name, section) in &self.sections {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[section.tag()])?;
            match section {
                Section::F64 { rows, cols, data } => {
                    w.write_all(&(*rows as u64).to_le_bytes())?;
                    w.write_all(&(*cols as u64).to_le_bytes())?;
                    for v in data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Section::U64(v) => w.write_all(&v.to_le_bytes())?,
                Section::Str(s) => {
                    w.write_all(&(s.len() as u64).to_le_bytes())?;
                    w.write_all(s.as_bytes())?;
                }
                Section::Bytes(b) => {
                    w.write_all(&(b.len() as u64).to_le_bytes())?;
                    w.write_all(b)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, MathError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(MathError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(MathError::Checkpoint(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let count = read_u64(r)? as usize;
        let mut sections = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u64(r)? as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| MathError::Checkpoint("section name is not UTF-8".into()))?;
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            let section = match tag[0] {
                0 => {
                    let rows = read_u64(r)? as usize;
                    let cols = read_u64(r)? as usize;
                    let n = rows.checked_mul(cols).ok_or_else(|| {
                        MathError::Checkpoint(format!("tensor '{name}' overflows"))
                    })?;
                    let mut data = Vec::with_capacity(n);
                    let mut buf = [0u8; 8];
                    for _ in 0..n {
                        r.read_exact(&mut buf)?;
                        data.push(f64::from_le_bytes(buf));
                    }
                    Section::F64 { rows, cols, data }
                }
                1 => Section::U64(read_u64(r)?),
                2 => {
                    let len = read_u64(r)? as usize;
                    let mut buf = vec![0u8; len];
                    r.read_exact(&mut buf)?;
                    Section::Str(String::from_utf8(buf).map_err(|_| {
                        MathError::Checkpoint(format!("section '{name}' is not UTF-8"))
                    })?)
                }
                3 => {
                    let len = read_u64(r)? as usize;
                    let mut buf = vec![0u8; len];
                    r.read_exact(&mut buf)?;
                    Section::Bytes(buf)
                }
                t => {
                    return Err(MathError::Checkpoint(format!(
                        "unknown section tag {t} in '{name}'"
                    )))
                }
            };
            sections.insert(name, section);
        }
        Ok(Checkpoint { sections })
    }

    /// Writes atomically: the payload lands in a sibling temp file first and
    /// is renamed into place, so readers never observe a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<(), MathError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = io::BufWriter::new(fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
            f.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MathError> {
        let mut f = io::BufReader::new(fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, MathError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64, MathError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut ck = Checkpoint::new();
        // Awkward values: negative zero, subnormal, extremes.
        let a = array![[0.1, -0.0, f64::MIN_POSITIVE / 2.0], [f64::MAX, -1e-300, 3.5]];
        ck.put_array("net.layer0.v", &a);
        ck.put_u64("meta.epoch", 1500);
        ck.put_str("meta.kind", "shape-space");
        ck.put_bytes("meta.blob", vec![0, 255, 7, 1]);

        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();

        let b = back.array("net.layer0.v").unwrap();
        assert_eq!(a.dim(), b.dim());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(back.u64("meta.epoch").unwrap(), 1500);
        assert_eq!(back.str("meta.kind").unwrap(), "shape-space");
        assert_eq!(back.bytes("meta.blob").unwrap(), &[0, 255, 7, 1]);
    }

    #[test]
    fn serialization_is_order_independent() {
        let mut a = Checkpoint::new();
        a.put_u64("alpha", 1);
        a.put_u64("beta", 2);
        let mut b = Checkpoint::new();
        b.put_u64("beta", 2);
        b.put_u64("alpha", 1);
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        a.write_to(&mut ba).unwrap();
        b.write_to(&mut bb).unwrap();
        assert_eq!(ba, bb);
    }

    #[test]
    fn missing_and_mistyped_sections_error() {
        let mut ck = Checkpoint::new();
        ck.put_u64("count", 3);
        assert!(ck.array("count").is_err());
        assert!(ck.u64("absent").is_err());
        assert!(ck.str("count").is_err());
    }

    #[test]
    fn rejects_corrupt_header() {
        let mut buf = Vec::new();
        Checkpoint::new().write_to(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());

        let mut buf2 = Vec::new();
        Checkpoint::new().write_to(&mut buf2).unwrap();
        buf2[4] = 99; // version
        assert!(Checkpoint::read_from(&mut buf2.as_slice()).is_err());
    }

    #[test]
    fn save_and_load_via_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut ck = Checkpoint::new();
        ck.put_array("codes", &array![[1.0, 2.0], [3.0, 4.0]]);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.array("codes").unwrap(), array![[1.0, 2.0], [3.0, 4.0]]);
        assert!(!path.with_extension("tmp").exists());
    }
}
