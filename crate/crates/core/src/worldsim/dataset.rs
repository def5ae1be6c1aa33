//! `SGDS-DATA v1` episode files.
//!
//! Layout: one ASCII header line `SGDS-DATA v1, D=<int>, F=<int>, C=<int>\n`,
//! then per episode a little-endian record `seed: u64, condition: u32,
//! frame_count: u32` followed by `frame_count·D` f32 pixels.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Episode, Result, WorldError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub frame_width: usize,
    pub chunk_frames: usize,
    pub num_conditions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<Episode>,
}

fn parse_header(line: &str) -> Result<DatasetHeader> {
    let bad = || WorldError::Dataset(format!("bad header line {line:?}"));
    let rest = line.strip_prefix("SGDS-DATA v1, ").ok_or_else(bad)?;
    let mut fields = rest.split(", ").map(|kv| kv.split_once('='));
    let mut take = |key: &str| -> Result<usize> {
        match fields.next() {
            Some(Some((k, v))) if k == key => v.parse().map_err(|_| bad()),
            _ => Err(bad()),
        }
    };
    let header = DatasetHeader {
        frame_width: take("D")?,
        chunk_frames: take("F")?,
        num_conditions: take("C")?,
    };
    if fields.next().is_some() {
        return Err(bad());
    }
    Ok(header)
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let h = data.header;
    writeln!(
        w,
        "SGDS-DATA v1, D={}, F={}, C={}",
        h.frame_width, h.chunk_frames, h.num_conditions
    )?;
    for ep in &data.episodes {
        w.write_all(&ep.seed.to_le_bytes())?;
        w.write_all(&(ep.condition as u32).to_le_bytes())?;
        w.write_all(&(ep.frames.len() as u32).to_le_bytes())?;
        for frame in &ep.frames {
            if frame.len() != h.frame_width {
                return Err(WorldError::Dataset(format!(
                    "episode {} has a frame of width {}, header says {}",
                    ep.seed,
                    frame.len(),
                    h.frame_width
                )));
            }
            for &px in frame {
                w.write_all(&(px as f32).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header = parse_header(line.trim_end_matches('\n'))?;
    let mut episodes = Vec::new();
    loop {
        let mut seed = [0u8; 8];
        match r.read_exact(&mut seed) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let mut word = [0u8; 4];
        let truncated = |_| WorldError::Dataset("truncated episode record".into());
        r.read_exact(&mut word).map_err(truncated)?;
        let condition = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word).map_err(truncated)?;
        let count = u32::from_le_bytes(word) as usize;
        let mut payload = vec![0u8; count * header.frame_width * 4];
        r.read_exact(&mut payload).map_err(truncated)?;
        let pixels: Vec<f64> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let frames = pixels
            .chunks_exact(header.frame_width)
            .map(<[f64]>::to_vec)
            .collect();
        episodes.push(Episode {
            condition,
            seed: u64::from_le_bytes(seed),
            frames,
        });
    }
    Ok(Dataset { header, episodes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldsim::{make_episode, Condition, WorldConfig};

    #[test]
    fn header_parsing() {
        let h = parse_header("SGDS-DATA v1, D=32, F=4, C=2").unwrap();
        assert_eq!(
            h,
            DatasetHeader {
                frame_width: 32,
                chunk_frames: 4,
                num_conditions: 2
            }
        );
        assert!(parse_header("SGDS-DATA v2, D=32, F=4, C=2").is_err());
        assert!(parse_header("SGDS-DATA v1, F=4, D=32, C=2").is_err());
        assert!(parse_header("SGDS-DATA v1, D=32, F=4, C=2, X=1").is_err());
    }

    #[test]
    fn round_trip_through_file() {
        let cfg = WorldConfig::default();
        let episodes: Vec<_> = (0..5)
            .map(|s| make_episode(&cfg, s, Condition::Label((s % 2) as usize), 8).unwrap())
            .collect();
        let data = Dataset {
            header: DatasetHeader {
                frame_width: 32,
                chunk_frames: 4,
                num_conditions: 2,
            },
            episodes,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.bin");
        write_dataset(&path, &data).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"SGDS-DATA v1, D=32, F=4, C=2\n"));
        assert_eq!(bytes.len(), 29 + 5 * (16 + 8 * 32 * 4));

        let back = read_dataset(&path).unwrap();
        assert_eq!(back.header, data.header);
        for (a, b) in back.episodes.iter().zip(&data.episodes) {
            assert_eq!(a.seed, b.seed);
            assert_eq!(a.condition, b.condition);
            for (fa, fb) in a.frames.iter().zip(&b.frames) {
                for (x, y) in fa.iter().zip(fb) {
                    assert_eq!(*x, *y as f32 as f64);
                }
            }
        }

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_dataset(&path), Err(WorldError::Dataset(_))));
    }
}
