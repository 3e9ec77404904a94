//! Binary snapshot container and text manifests.
//!
//! Layout, little-endian: `b"NSTG"`, `u32` version (1), `u32` ndim, `ndim x u64`
//! extents, `u8` dtype (0 = f64), then the row-major f64 payload.
//! Grid spacing and time are not part of the container; sequence manifests
//! carry them.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::field::{Boundary, Field, FieldSequence, GridSpec};

pub const MAGIC: &[u8; 4] = b"NSTG";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

pub fn encode_tensor(dims: &[usize], data: &[f64]) -> Result<Vec<u8>> {
    let count = checked_count(dims).ok_or_else(|| Error::Format {
        offset: 12,
        message: "dimension product overflows".into(),
    })?;
    if count != data.len() {
        return Err(Error::Dimension(format!(
            "dims {dims:?} need {count} values, got {}",
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(13 + 8 * dims.len() + 8 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    out.push(DTYPE_F64);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn checked_count(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, d| acc.checked_mul(*d))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut rd = Reader { bytes, pos: 0 };
    if rd.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected NSTG".into(),
        });
    }
    let version = rd.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let ndim = rd.u32("ndim")? as usize;
    let mut dims = Vec::with_capacity(ndim.min(16));
    for _ in 0..ndim {
        let at = rd.pos as u64;
        let d = rd.u64("extent")?;
        let d = usize::try_from(d).map_err(|_| Error::Format {
            offset: at,
            message: format!("extent {d} does not fit in memory"),
        })?;
        dims.push(d);
    }
    let dtype_at = rd.pos as u64;
    let dtype = rd.take(1, "dtype")?[0];
    if dtype != DTYPE_F64 {
        return Err(Error::Format {
            offset: dtype_at,
            message: format!("unsupported dtype {dtype}"),
        });
    }
    let count = checked_count(&dims)
        .filter(|c| c.checked_mul(8).is_some())
        .ok_or_else(|| Error::Format {
            offset: 12,
            message: format!("dimensions {dims:?} overflow"),
        })?;
    let payload = rd.take(count * 8, "payload")?;
    if rd.pos != bytes.len() {
        return Err(Error::Format {
            offset: rd.pos as u64,
            message: format!("{} trailing bytes after payload", bytes.len() - rd.pos),
        });
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, data))
}

pub fn save_tensor(path: &Path, dims: &[usize], data: &[f64]) -> Result<()> {
    let bytes = encode_tensor(dims, data)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    decode_tensor(&fs::read(path)?)
}

pub fn save_field(field: &Field, path: &Path) -> Result<()> {
    save_tensor(path, &[field.height(), field.width()], field.values())
}

/// Loads a field onto a unit periodic grid at time 0. Use [`load_field_on`] to attach metadata.
pub fn load_field(path: &Path) -> Result<Field> {
    let (dims, data) = load_tensor(path)?;
    if dims.len() != 2 {
        return Err(Error::Format {
            offset: 8,
            message: format!("field snapshot must be 2-d, found {} dims", dims.len()),
        });
    }
    let grid = GridSpec::unit_periodic(dims[0], dims[1])?;
    Field::new(grid, data, 0.0)
}

pub fn load_field_on(path: &Path, grid: GridSpec, time: f64) -> Result<Field> {
    let f = load_field(path)?;
    if f.height() != grid.height || f.width() != grid.width {
        return Err(Error::Dimension(format!(
            "snapshot {} is {}x{}, expected {}x{}",
            path.display(),
            f.height(),
            f.width(),
            grid.height,
            grid.width
        )));
    }
    Field::new(grid, f.into_values(), time)
}

fn boundary_name(b: Boundary) -> &'static str {
    match b {
        Boundary::Periodic => "periodic",
        Boundary::DirichletLid => "dirichlet_lid",
    }
}

/// Writes one snapshot per frame plus `<stem>_manifest.txt` into `dir` and
/// returns the manifest path.
///
/// Manifest lines are `<file> <time>`; `#` lines carry grid and timestep metadata.
pub fn save_sequence(seq: &FieldSequence, dir: &Path, stem: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    if let Some(first) = seq.first() {
        let g = first.grid();
        manifest.push_str(&format!(
            "# grid {} {} {:e} {}\n",
            g.height,
            g.width,
            g.dx,
            boundary_name(g.boundary)
        ));
    }
    manifest.push_str(&format!("# dt {:e}\n", seq.dt()));
    for (n, frame) in seq.frames().iter().enumerate() {
        let name = format!("{stem}_{n:05}.nstg");
        save_field(frame, &dir.join(&name))?;
        manifest.push_str(&format!("{name} {:e}\n", frame.time()));
    }
    let path = dir.join(format!("{stem}_manifest.txt"));
    fs::write(&path, manifest)?;
    Ok(path)
}

pub fn load_sequence(manifest: &Path) -> Result<FieldSequence> {
    let text = fs::read_to_string(manifest)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let mut grid = None;
    let mut dt = None;
    let mut frames = Vec::new();
    let bad = |line: &str| Error::Format {
        offset: 0,
        message: format!("bad manifest line `{line}` in {}", manifest.display()),
    };
    for line in text.lines() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            [] => {}
            ["#", "grid", h, w, dx, b] => {
                let boundary = match *b {
                    "periodic" => Boundary::Periodic,
                    "dirichlet_lid" => Boundary::DirichletLid,
                    _ => return Err(bad(line)),
                };
                grid = Some(GridSpec::new(
                    h.parse().map_err(|_| bad(line))?,
                    w.parse().map_err(|_| bad(line))?,
                    dx.parse().map_err(|_| bad(line))?,
                    boundary,
                )?);
            }
            ["#", "dt", v] => dt = Some(v.parse::<f64>().map_err(|_| bad(line))?),
            [name, time] if !name.starts_with('#') => {
                let time: f64 = time.parse().map_err(|_| bad(line))?;
                let path = dir.join(name);
                let frame = match grid {
                    Some(g) => load_field_on(&path, g, time)?,
                    None => load_field(&path)?.with_time(time),
                };
                frames.push(frame);
            }
            _ if line.starts_with('#') => {}
            _ => return Err(bad(line)),
        }
    }
    let dt = dt.ok_or_else(|| bad("missing `# dt` line"))?;
    FieldSequence::new(frames, dt)
}
