//! Portable named-array container used for volumes, checkpoints, and
//! feature-extractor weights.
//!
//! Layout (all integers little-endian):
//!   magic "CPCE" | version u32 | entry count u32 | entries…
//! each entry:
//!   name length u16 | UTF-8 name | ndim u8 | dims u32 × ndim | f32 payload
//! Payloads are row-major IEEE-754 32-bit.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{CpceError, Result};

pub const MAGIC: &[u8; 4] = b"CPCE";
pub const VERSION: u32 = 1;

const MAX_NDIM: u8 = 8;

pub fn to_bytes(arrays: &[(String, ArrayD<f32>)]) -> Result<Vec<u8>> {
    for (i, (name, _)) in arrays.iter().enumerate() {
        if arrays[..i].iter().any(|(n, _)| n == name) {
            return Err(CpceError::config(format!("duplicate array name `{name}`")));
        }
        if name.len() > u16::MAX as usize {
            return Err(CpceError::config(format!("array name too long: `{name}`")));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, arr) in arrays {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let ndim = arr.ndim();
        if ndim > MAX_NDIM as usize {
            return Err(CpceError::config(format!(
                "array `{name}` has {ndim} dims, max {MAX_NDIM}"
            )));
        }
        out.push(ndim as u8);
        for &d in arr.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let arr = arr.as_standard_layout();
        for &v in arr.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CpceError::Format {
                offset: self.pos as u64,
                msg: format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Vec<(String, ArrayD<f32>)>> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CpceError::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CpceError::Format {
            offset: 4,
            msg: format!("unsupported container version {version}, expected {VERSION}"),
        });
    }
    let count = r.u32("entry count")? as usize;
    let mut out: Vec<(String, ArrayD<f32>)> = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let name_at = r.pos;
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|e| CpceError::Format {
                offset: (name_at + 2) as u64,
                msg: format!("entry {i} name is not UTF-8: {e}"),
            })?
            .to_string();
        if out.iter().any(|(n, _)| *n == name) {
            return Err(CpceError::Format {
                offset: name_at as u64,
                msg: format!("duplicate array name `{name}`"),
            });
        }
        let ndim_at = r.pos;
        let ndim = r.u8("ndim")?;
        if ndim > MAX_NDIM {
            return Err(CpceError::Format {
                offset: ndim_at as u64,
                msg: format!("entry `{name}` claims {ndim} dims, max {MAX_NDIM}"),
            });
        }
        let mut dims = Vec::with_capacity(ndim as usize);
        let mut numel: usize = 1;
        for _ in 0..ndim {
            let at = r.pos;
            let d = r.u32("dimension")? as usize;
            numel = numel.checked_mul(d).ok_or(CpceError::Format {
                offset: at as u64,
                msg: format!("entry `{name}` dimensions overflow"),
            })?;
            dims.push(d);
        }
        let payload_at = r.pos;
        let nbytes = numel.checked_mul(4).ok_or(CpceError::Format {
            offset: payload_at as u64,
            msg: format!("entry `{name}` payload size overflows"),
        })?;
        let raw = r.take(nbytes, "payload")?;
        let vals: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), vals).map_err(|e| CpceError::Format {
            offset: payload_at as u64,
            msg: format!("entry `{name}`: {e}"),
        })?;
        out.push((name, arr));
    }
    if r.pos != buf.len() {
        return Err(CpceError::Format {
            offset: r.pos as u64,
            msg: format!("{} trailing bytes after last entry", buf.len() - r.pos),
        });
    }
    Ok(out)
}

pub fn save_container(path: &Path, arrays: &[(String, ArrayD<f32>)]) -> Result<()> {
    let bytes = to_bytes(arrays)?;
    std::fs::write(path, bytes).map_err(|e| CpceError::io(path.display().to_string(), e))
}

pub fn load_container(path: &Path) -> Result<Vec<(String, ArrayD<f32>)>> {
    let buf = std::fs::read(path).map_err(|e| CpceError::io(path.display().to_string(), e))?;
    from_bytes(&buf)
}

/// Convenience lookup by name.
pub fn get_array<'a>(
    arrays: &'a [(String, ArrayD<f32>)],
    name: &str,
) -> Result<&'a ArrayD<f32>> {
    arrays
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, a)| a)
        .ok_or_else(|| CpceError::config(format!("container has no array named `{name}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_container_round_trips() {
        let b = to_bytes(&[]).unwrap();
        assert_eq!(&b[..4], MAGIC);
        assert!(from_bytes(&b).unwrap().is_empty());
    }

    #[test]
    fn scalar_and_zero_sized_arrays_round_trip() {
        let arrays = vec![
            ("s".to_string(), ArrayD::from_elem(IxDyn(&[]), 3.5f32)),
            ("z".to_string(), ArrayD::<f32>::zeros(IxDyn(&[0, 4]))),
        ];
        let got = from_bytes(&to_bytes(&arrays).unwrap()).unwrap();
        assert_eq!(got, arrays);
    }

    #[test]
    fn bad_magic_version_and_truncation_are_format_errors() {
        let good = to_bytes(&[("a".into(), ArrayD::zeros(IxDyn(&[2, 2])))]).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            from_bytes(&bad),
            Err(CpceError::Format { offset: 0, .. })
        ));
        let mut bad = good.clone();
        bad[4] = 99;
        assert!(matches!(
            from_bytes(&bad),
            Err(CpceError::Format { offset: 4, .. })
        ));
        for cut in [3, 10, good.len() - 1] {
            assert!(matches!(
                from_bytes(&good[..cut]),
                Err(CpceError::Format { .. })
            ));
        }
        // corrupted dimension making payload run past the end
        let mut bad = good.clone();
        let dim_at = 4 + 4 + 4 + 2 + 1 + 1; // magic+ver+count+namelen+name+ndim
        bad[dim_at] = 200;
        let err = from_bytes(&bad).err().unwrap();
        assert!(err.to_string().contains("truncated"), "{err}");
        // trailing garbage
        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(
            from_bytes(&bad),
            Err(CpceError::Format { .. })
        ));
    }

    #[test]
    fn duplicate_names_rejected_both_ways() {
        let arrays = vec![
            ("a".to_string(), ArrayD::<f32>::zeros(IxDyn(&[1]))),
            ("a".to_string(), ArrayD::<f32>::zeros(IxDyn(&[1]))),
        ];
        assert!(to_bytes(&arrays).is_err());
    }

    proptest! {
        #[test]
        fn random_arrays_round_trip_bitwise(
            shapes in proptest::collection::vec(
                proptest::collection::vec(0usize..5, 0..5), 0..5),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let arrays: Vec<(String, ArrayD<f32>)> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let arr = ArrayD::from_shape_fn(IxDyn(s), |_| {
                        f32::from_bits(rng.gen::<u32>() & 0x7f7f_ffff) // finite
                    });
                    (format!("arr{i}"), arr)
                })
                .collect();
            let got = from_bytes(&to_bytes(&arrays).unwrap()).unwrap();
            prop_assert_eq!(got.len(), arrays.len());
            for ((na, a), (nb, b)) in got.iter().zip(arrays.iter()) {
                prop_assert_eq!(na, nb);
                prop_assert_eq!(a.shape(), b.shape());
                for (x, y) in a.iter().zip(b.iter()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }
}
