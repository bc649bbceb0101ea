//! Binary little-endian PLY in the layout used by common 3DGS viewers.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{logit, Gaussian3D, GaussianSet};
use crate::error::{Error, Result};

/// Zeroth-order real spherical harmonic, `1 / (2 √π)`.
pub const SH_C0: f64 = 0.28209479177387814;

const PROPERTIES: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0",
    "rot_1", "rot_2", "rot_3",
];

pub fn color_to_sh(c: f64) -> f64 {
    (c - 0.5) / SH_C0
}

pub fn sh_to_color(f: f64) -> f64 {
    f * SH_C0 + 0.5
}

fn record(g: &Gaussian3D) -> [f32; 14] {
    [
        g.mean[0] as f32,
        g.mean[1] as f32,
        g.mean[2] as f32,
        color_to_sh(g.color[0]) as f32,
        color_to_sh(g.color[1]) as f32,
        color_to_sh(g.color[2]) as f32,
        logit(g.opacity) as f32,
        g.scale[0].ln() as f32,
        g.scale[1].ln() as f32,
        g.scale[2].ln() as f32,
        g.rotation[0] as f32,
        g.rotation[1] as f32,
        g.rotation[2] as f32,
        g.rotation[3] as f32,
    ]
}

pub fn write_ply<W: Write>(set: &GaussianSet, mut out: W) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Empty("cannot export an empty Gaussian set"));
    }
    writeln!(out, "ply")?;
    writeln!(out, "format binary_little_endian 1.0")?;
    writeln!(out, "element vertex {}", set.len())?;
    for p in PROPERTIES {
        writeln!(out, "property float {p}")?;
    }
    writeln!(out, "end_header")?;
    for g in &set.gaussians {
        for v in record(g) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn export_ply(set: &GaussianSet, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_ply(set, std::io::BufWriter::new(f))
}

/// Reads a binary little-endian PLY whose vertex properties are all
/// `float`. Property order is taken from the header.
pub fn read_ply<R: Read>(input: R) -> Result<GaussianSet> {
    let malformed = |reason: String| Error::Malformed {
        path: Default::default(),
        reason,
    };
    let mut reader = BufReader::new(input);
    let mut line = String::new();
    let mut count = None;
    let mut names = Vec::new();
    let mut first = true;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(malformed("header ended before end_header".into()));
        }
        let l = line.trim();
        if first {
            if l != "ply" {
                return Err(malformed(format!("expected 'ply', found {l:?}")));
            }
            first = false;
            continue;
        }
        let words: Vec<&str> = l.split_whitespace().collect();
        match words.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", other, _] => return Err(malformed(format!("unsupported format {other}"))),
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|e| malformed(e.to_string()))?)
            }
            ["property", "float", name] => names.push(name.to_string()),
            ["property", ty, name] => {
                return Err(malformed(format!("property {name} has unsupported type {ty}")))
            }
            ["end_header"] => break,
            _ => {}
        }
    }
    let count = count.ok_or_else(|| malformed("no vertex element".into()))?;
    let slot = |name: &str| {
        names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| malformed(format!("missing property {name}")))
    };
    let slots: Vec<usize> = PROPERTIES.iter().map(|p| slot(p)).collect::<Result<_>>()?;
    let stride = names.len() * 4;
    let mut buf = vec![0u8; stride];
    let mut gaussians = Vec::with_capacity(count);
    for _ in 0..count {
        reader.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Truncated {
                expected: count * stride,
                found: gaussians.len() * stride,
            },
            _ => Error::Io(e),
        })?;
        let v = |k: usize| f32::from_le_bytes(buf[4 * slots[k]..4 * slots[k] + 4].try_into().unwrap()) as f64;
        gaussians.push(Gaussian3D {
            mean: [v(0), v(1), v(2)],
            color: [sh_to_color(v(3)), sh_to_color(v(4)), sh_to_color(v(5))],
            opacity: super::sigmoid(v(6)),
            scale: [v(7).exp(), v(8).exp(), v(9).exp()],
            rotation: [v(10), v(11), v(12), v(13)],
        });
    }
    Ok(GaussianSet::new(gaussians))
}

pub fn import_ply(path: impl AsRef<Path>) -> Result<GaussianSet> {
    read_ply(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Gaussian3D {
        Gaussian3D {
            mean: [0.1, -0.4, 0.7],
            scale: [0.02, 0.05, 0.11],
            rotation: [0.5, 0.5, -0.5, 0.5],
            opacity: 0.83,
            color: [0.5, 0.2, 0.9],
        }
    }

    #[test]
    fn single_gaussian_round_trip() {
        let set = GaussianSet::new(vec![sample()]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ply");
        export_ply(&set, &path).unwrap();
        let back = import_ply(&path).unwrap();
        assert_eq!(back.len(), 1);
        let (a, b) = (set.gaussians[0].to_channels(), back.gaussians[0].to_channels());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn header_and_sh_identity() {
        assert_eq!(color_to_sh(0.5), 0.0);
        let set = GaussianSet::new(vec![sample(); 3]);
        let mut bytes = Vec::new();
        write_ply(&set, &mut bytes).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.contains("element vertex 3\n"));
        let header_len = text.find("end_header\n").unwrap() + "end_header\n".len();
        assert_eq!(bytes.len() - header_len, 3 * 14 * 4);
        // f_dc_0 of the first vertex encodes color 0.5
        let f_dc0 = f32::from_le_bytes(bytes[header_len + 12..header_len + 16].try_into().unwrap());
        assert_eq!(f_dc0, 0.0);
    }

    #[test]
    fn empty_set_and_truncation_rejected() {
        assert!(write_ply(&GaussianSet::default(), Vec::new()).is_err());
        let mut bytes = Vec::new();
        write_ply(&GaussianSet::new(vec![sample(); 2]), &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(read_ply(&bytes[..]), Err(Error::Truncated { .. })));
    }
}
