//! Bundle serialization: a columnar CSV and the `FKRB1` binary dump.
//!
//! Binary layout, all little-endian:
//!
//! ```text
//! magic      5 bytes  "FKRB1"
//! dim        u32
//! k          u32
//! paths      u64
//! steps      u64
//! seed       u64
//! horizon    f64
//! t_start    f64
//! start      u64      start node index
//! scheme     u8       0 = projection, 1 = penalization (followed by eps f64)
//! x_start    dim * f64
//! X          paths * (steps+1) * dim * f64
//! A          paths * (steps+1) * f64
//! dB         paths * steps * k * f64
//! boundary   paths * (steps+1) * u8
//! ```

use std::io::{self, Read, Write};

use super::{ReflectedPathBundle, ReflectionScheme, TimeGrid};

pub const BUNDLE_MAGIC: &[u8; 5] = b"FKRB1";

/// Columns `path,step,time,x0..x{d-1},A`.
pub fn write_csv<W: Write>(bundle: &ReflectedPathBundle, mut w: W) -> io::Result<()> {
    write!(w, "path,step,time")?;
    for i in 0..bundle.dim {
        write!(w, ",x{i}")?;
    }
    writeln!(w, ",A")?;
    for p in 0..bundle.paths {
        for s in 0..bundle.nodes() {
            write!(w, "{p},{s},{}", bundle.grid.node(s))?;
            for v in bundle.x_at(p, s) {
                write!(w, ",{v}")?;
            }
            writeln!(w, ",{}", bundle.a_at(p, s))?;
        }
    }
    Ok(())
}

pub fn write_binary<W: Write>(bundle: &ReflectedPathBundle, mut w: W) -> io::Result<()> {
    w.write_all(BUNDLE_MAGIC)?;
    w.write_all(&(bundle.dim as u32).to_le_bytes())?;
    w.write_all(&(bundle.k as u32).to_le_bytes())?;
    w.write_all(&(bundle.paths as u64).to_le_bytes())?;
    w.write_all(&(bundle.grid.steps() as u64).to_le_bytes())?;
    w.write_all(&bundle.seed.to_le_bytes())?;
    w.write_all(&bundle.grid.horizon().to_le_bytes())?;
    w.write_all(&bundle.t_start.to_le_bytes())?;
    w.write_all(&(bundle.start_index as u64).to_le_bytes())?;
    match bundle.scheme {
        ReflectionScheme::Projection => w.write_all(&[0])?,
        ReflectionScheme::Penalization { eps } => {
            w.write_all(&[1])?;
            w.write_all(&eps.to_le_bytes())?;
        }
    }
    for arr in [&bundle.x_start, &bundle.x, &bundle.a, &bundle.db] {
        for v in arr.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    let flags: Vec<u8> = bundle.boundary.iter().map(|b| *b as u8).collect();
    w.write_all(&flags)?;
    Ok(())
}

fn bad(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> io::Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b)?;
        Ok(b)
    }
    fn u32(&mut self) -> io::Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> io::Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> io::Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn f64s(&mut self, n: usize) -> io::Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn read_binary<R: Read>(r: R) -> io::Result<ReflectedPathBundle> {
    let mut r = Reader { inner: r };
    if &r.bytes::<5>()? != BUNDLE_MAGIC {
        return Err(bad("not an FKRB1 bundle"));
    }
    let dim = r.u32()? as usize;
    let k = r.u32()? as usize;
    let paths = r.u64()? as usize;
    let steps = r.u64()? as usize;
    let seed = r.u64()?;
    let horizon = r.f64()?;
    let t_start = r.f64()?;
    let start_index = r.u64()? as usize;
    let scheme = match r.bytes::<1>()?[0] {
        0 => ReflectionScheme::Projection,
        1 => ReflectionScheme::Penalization { eps: r.f64()? },
        _ => return Err(bad("unknown scheme tag")),
    };
    let grid = TimeGrid::uniform(horizon, steps).map_err(|e| bad(&e.to_string()))?;
    if start_index > steps {
        return Err(bad("start index beyond the grid"));
    }
    let nodes = steps + 1;
    let x_start = r.f64s(dim)?;
    let x = r.f64s(paths * nodes * dim)?;
    let a = r.f64s(paths * nodes)?;
    let db = r.f64s(paths * steps * k)?;
    let mut flags = vec![0u8; paths * nodes];
    r.inner.read_exact(&mut flags)?;
    Ok(ReflectedPathBundle {
        grid,
        paths,
        dim,
        k,
        t_start,
        start_index,
        snap: (t_start - grid.node(start_index)).max(0.0),
        x_start,
        x,
        a,
        db,
        boundary: flags.into_iter().map(|b| b != 0).collect(),
        seed,
        scheme,
    })
}
