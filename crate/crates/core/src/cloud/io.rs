//! Cloud file formats.
//!
//! ASCII: one `x y z` triple per line, whitespace separated, `#` comments.
//! Binary: magic `RIPC`, version byte 0x01, flag byte (bit 0 = label
//! present), u64 LE point count, count x 3 f32 LE coordinates, then a
//! trailing u16 LE label when flagged. Coordinates are stored in f32, so a
//! read-back cloud is f32-quantized; re-writing it round-trips bit-exactly.
//!
//! The reader sniffs the magic to pick the format; the writer uses the
//! extension (`.xyz`, `.txt`, `.asc` write ASCII, everything else binary).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CloudError, PointCloud};
use crate::Vec3;

const MAGIC: &[u8; 4] = b"RIPC";
const VERSION: u8 = 0x01;
const FLAG_LABEL: u8 = 0x01;

pub fn read_cloud(path: &Path) -> Result<PointCloud, CloudError> {
    let mut file = File::open(path)?;
    let mut head = [0u8; 4];
    let got = file.read(&mut head)?;
    if got == 4 && &head == MAGIC {
        read_binary_body(file)
    } else {
        drop(file);
        read_ascii(path)
    }
}

pub fn write_cloud(pc: &PointCloud, path: &Path) -> Result<(), CloudError> {
    let ascii = matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("xyz") | Some("txt") | Some("asc")
    );
    if ascii {
        write_ascii(pc, path)
    } else {
        write_binary(pc, path)
    }
}

fn read_ascii(path: &Path) -> Result<PointCloud, CloudError> {
    let reader = BufReader::new(File::open(path)?);
    let mut points = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut fields = body.split_whitespace();
        let mut coord = [0.0f64; 3];
        for slot in &mut coord {
            let tok = fields.next().ok_or(CloudError::Parse {
                line: lineno + 1,
                msg: "expected three coordinates".into(),
            })?;
            *slot = tok.parse().map_err(|_| CloudError::Parse {
                line: lineno + 1,
                msg: format!("bad number {tok:?}"),
            })?;
        }
        if fields.next().is_some() {
            return Err(CloudError::Parse {
                line: lineno + 1,
                msg: "trailing fields after z coordinate".into(),
            });
        }
        points.push(Vec3::new(coord[0], coord[1], coord[2]));
    }
    PointCloud::new(points)
}

fn write_ascii(pc: &PointCloud, path: &Path) -> Result<(), CloudError> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in &pc.points {
        writeln!(w, "{:.17} {:.17} {:.17}", p.x, p.y, p.z)?;
    }
    w.flush()?;
    Ok(())
}

fn read_binary_body(mut file: File) -> Result<PointCloud, CloudError> {
    let mut header = [0u8; 10];
    file.read_exact(&mut header)
        .map_err(|_| CloudError::TruncatedFile("header".into()))?;
    let version = header[0];
    if version != VERSION {
        return Err(CloudError::BadVersion(version));
    }
    let flags = header[1];
    let count = u64::from_le_bytes(header[2..10].try_into().unwrap()) as usize;
    let mut body = vec![0u8; count * 12];
    file.read_exact(&mut body)
        .map_err(|_| CloudError::TruncatedFile(format!("point block ({count} points)")))?;
    let mut points = Vec::with_capacity(count);
    for chunk in body.chunks_exact(12) {
        let x = f32::from_le_bytes(chunk[0..4].try_into().unwrap());
        let y = f32::from_le_bytes(chunk[4..8].try_into().unwrap());
        let z = f32::from_le_bytes(chunk[8..12].try_into().unwrap());
        points.push(Vec3::new(x as f64, y as f64, z as f64));
    }
    let label = if flags & FLAG_LABEL != 0 {
        let mut lab = [0u8; 2];
        file.read_exact(&mut lab)
            .map_err(|_| CloudError::TruncatedFile("label".into()))?;
        Some(u16::from_le_bytes(lab))
    } else {
        None
    };
    let mut pc = PointCloud::new(points)?;
    pc.label = label;
    Ok(pc)
}

fn write_binary(pc: &PointCloud, path: &Path) -> Result<(), CloudError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let flags = if pc.label.is_some() { FLAG_LABEL } else { 0 };
    w.write_all(&[VERSION, flags])?;
    w.write_all(&(pc.len() as u64).to_le_bytes())?;
    for p in &pc.points {
        w.write_all(&(p.x as f32).to_le_bytes())?;
        w.write_all(&(p.y as f32).to_le_bytes())?;
        w.write_all(&(p.z as f32).to_le_bytes())?;
    }
    if let Some(label) = pc.label {
        w.write_all(&label.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// One dataset manifest line: JSON object per cloud file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: u16,
    pub seed: u64,
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<(), CloudError> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        let line = serde_json::to_string(e).expect("manifest entry serializes");
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, CloudError> {
    let reader = BufReader::new(File::open(path)?);
    let mut entries = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(&line).map_err(|err| CloudError::Parse {
            line: lineno + 1,
            msg: err.to_string(),
        })?;
        entries.push(e);
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use rand::Rng;

    fn temp_dir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = seeds::rng_from(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Vec3::new(
                        rng.random::<f64>() * 2.0 - 1.0,
                        rng.random::<f64>() * 2.0 - 1.0,
                        rng.random::<f64>() * 2.0 - 1.0,
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn binary_round_trip_is_stable() {
        let dir = temp_dir();
        let path = dir.path().join("a.ripc");
        let pc = random_cloud(100, 1).with_label(3);
        write_cloud(&pc, &path).unwrap();
        let once = read_cloud(&path).unwrap();
        assert_eq!(once.label, Some(3));
        // First read is f32-quantized; a second write/read round-trips
        // bit-exactly.
        write_cloud(&once, &path).unwrap();
        let twice = read_cloud(&path).unwrap();
        assert_eq!(once, twice);
        for (p, q) in pc.points.iter().zip(once.points.iter()) {
            assert!((*p - *q).norm() < 1e-6);
        }
    }

    #[test]
    fn ascii_parse_and_round_trip() {
        let dir = temp_dir();
        let path = dir.path().join("b.xyz");
        std::fs::write(&path, "# header comment\n1.0 2.0 3.0\n4 5 6 # inline\n").unwrap();
        let pc = read_cloud(&path).unwrap();
        assert_eq!(pc.points[0], Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(pc.points[1], Vec3::new(4.0, 5.0, 6.0));

        let out = dir.path().join("c.xyz");
        let orig = random_cloud(50, 2);
        write_cloud(&orig, &out).unwrap();
        let back = read_cloud(&out).unwrap();
        for (p, q) in orig.points.iter().zip(back.points.iter()) {
            assert!((*p - *q).norm() < 1e-9);
        }
    }

    #[test]
    fn ascii_errors_carry_line_numbers() {
        let dir = temp_dir();
        let path = dir.path().join("bad.xyz");
        std::fs::write(&path, "1 2 3\n4 oops 6\n").unwrap();
        match read_cloud(&path) {
            Err(CloudError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let dir = temp_dir();
        let path = dir.path().join("t.ripc");
        let pc = random_cloud(10, 3);
        write_cloud(&pc, &path).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 5]).unwrap();
        assert!(matches!(
            read_cloud(&path),
            Err(CloudError::TruncatedFile(_))
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = temp_dir();
        let path = dir.path().join("manifest.jsonl");
        let entries = vec![
            ManifestEntry {
                path: "a.ripc".into(),
                label: 0,
                seed: 10,
            },
            ManifestEntry {
                path: "b.ripc".into(),
                label: 7,
                seed: 11,
            },
        ];
        write_manifest(&entries, &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), entries);
    }
}
