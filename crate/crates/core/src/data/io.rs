//! Canonical dataset CSV and split manifests.
//!
//! Dataset columns: `q,t,lat_bs,lon_bs,lat_ue,lon_ue,height_m,beam` followed
//! optionally by the block `p0..p{M-1}`. Header mandatory, `\n` line endings.
//! Floats are written in shortest round-trip form so read-then-write is
//! byte-stable.

use std::io::{Read, Write};

use super::{RawDataset, RawSample, SplitKind};
use crate::error::{Error, Result};

pub const CANONICAL_COLUMNS: [&str; 8] = [
    "q", "t", "lat_bs", "lon_bs", "lat_ue", "lon_ue", "height_m", "beam",
];

fn parse_field<T: std::str::FromStr>(field: &str, name: &str, line: u64) -> Result<T> {
    field.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("cannot parse {name} from '{field}'"),
    })
}

/// Read a canonical dataset. Without power columns the codebook size falls
/// back to `default_codebook`.
pub fn read_dataset<R: Read>(reader: R, default_codebook: usize) -> Result<RawDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let names: Vec<&str> = headers.iter().collect();
    if names.len() < CANONICAL_COLUMNS.len() || names[..8] != CANONICAL_COLUMNS {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header starting with {}", CANONICAL_COLUMNS.join(",")),
        });
    }
    let n_powers = names.len() - 8;
    for (i, name) in names[8..].iter().enumerate() {
        if *name != format!("p{i}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("power column {i} must be named p{i}, found '{name}'"),
            });
        }
    }
    let codebook = if n_powers > 0 { n_powers } else { default_codebook };

    let mut samples = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let f = |i: usize| &record[i];
        let powers = if n_powers > 0 {
            Some(
                (0..n_powers)
                    .map(|i| parse_field::<f64>(f(8 + i), names[8 + i], line))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let sample = RawSample::new(
            parse_field(f(0), "q", line)?,
            parse_field(f(1), "t", line)?,
            parse_field(f(2), "lat_bs", line)?,
            parse_field(f(3), "lon_bs", line)?,
            parse_field(f(4), "lat_ue", line)?,
            parse_field(f(5), "lon_ue", line)?,
            parse_field(f(6), "height_m", line)?,
            parse_field(f(7), "beam", line)?,
            powers,
        )
        .map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        samples.push(sample);
    }
    RawDataset::new(samples, codebook)
}

/// Shortest round-trip text; exponent form for very small or large magnitudes.
fn fmt_float(x: f64) -> String {
    let a = x.abs();
    if a != 0.0 && !(1e-5..1e16).contains(&a) {
        format!("{x:e}")
    } else {
        x.to_string()
    }
}

pub fn write_dataset<W: Write>(d: &RawDataset, mut out: W) -> Result<()> {
    let with_powers = d.has_powers();
    let mut header = CANONICAL_COLUMNS.join(",");
    if with_powers {
        for i in 0..d.codebook_size() {
            header.push_str(&format!(",p{i}"));
        }
    }
    let mut buf = String::with_capacity(64 * (d.len() + 1));
    buf.push_str(&header);
    buf.push('\n');
    for s in d.samples() {
        buf.push_str(&format!(
            "{},{},{},{},{},{},{},{}",
            s.seq_index,
            s.sample_index,
            fmt_float(s.bs_pos.latitude_deg),
            fmt_float(s.bs_pos.longitude_deg),
            fmt_float(s.ue_pos.latitude_deg),
            fmt_float(s.ue_pos.longitude_deg),
            fmt_float(s.height_m),
            s.beam
        ));
        if with_powers {
            for p in s.powers.as_ref().expect("checked") {
                buf.push(',');
                buf.push_str(&fmt_float(*p));
            }
        }
        buf.push('\n');
    }
    out.write_all(buf.as_bytes())?;
    Ok(())
}

/// `q,t,split` per sample in dataset order.
pub fn write_manifest<W: Write>(d: &RawDataset, assignment: &[SplitKind], mut out: W) -> Result<()> {
    if assignment.len() != d.len() {
        return Err(Error::InvalidData("manifest does not cover the dataset".into()));
    }
    let mut buf = String::from("q,t,split\n");
    for (s, k) in d.samples().iter().zip(assignment) {
        buf.push_str(&format!("{},{},{}\n", s.seq_index, s.sample_index, k));
    }
    out.write_all(buf.as_bytes())?;
    Ok(())
}

/// Parse a manifest and align it with `d`. Every dataset sample must appear
/// exactly once.
pub fn read_manifest<R: Read>(reader: R, d: &RawDataset) -> Result<Vec<SplitKind>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut entries = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 3 {
            return Err(Error::Parse {
                line,
                message: "expected q,t,split".into(),
            });
        }
        let q: usize = parse_field(&record[0], "q", line)?;
        let t: usize = parse_field(&record[1], "t", line)?;
        let kind: SplitKind = record[2].parse().map_err(|e: Error| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        entries.push(((q, t), kind));
    }
    entries.sort_by_key(|e| e.0);
    let keys: Vec<_> = d.samples().iter().map(|s| s.key()).collect();
    if entries.len() != keys.len() || entries.iter().zip(&keys).any(|(e, k)| e.0 != *k) {
        return Err(Error::InvalidData(
            "manifest keys do not match the dataset samples".into(),
        ));
    }
    Ok(entries.into_iter().map(|e| e.1).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "q,t,lat_bs,lon_bs,lat_ue,lon_ue,height_m,beam,p0,p1,p2\n\
        0,0,33.42,-111.93,33.421,-111.9301,20,1,0.1,0.9,0.05\n\
        0,1,33.42,-111.93,33.4211,-111.9302,20.5,2,0.1,0.2,0.7\n";

    #[test]
    fn read_write_is_byte_stable() {
        let d = read_dataset(TEXT.as_bytes(), 32).unwrap();
        assert_eq!(d.codebook_size(), 3);
        let mut out = Vec::new();
        write_dataset(&d, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), TEXT);
    }

    #[test]
    fn without_powers_uses_default_codebook() {
        let text = "q,t,lat_bs,lon_bs,lat_ue,lon_ue,height_m,beam\n0,0,33.42,-111.93,33.421,-111.93,20,17\n";
        let d = read_dataset(text.as_bytes(), 32).unwrap();
        assert_eq!(d.codebook_size(), 32);
        assert!(!d.has_powers());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "q,t,lat_bs,lon_bs,lat_ue,lon_ue,height_m,beam\n0,0,33.42,-111.93,33.421,-111.93,20,1\n0,x,33.42,-111.93,33.421,-111.93,20,1\n";
        match read_dataset(text.as_bytes(), 4) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            read_dataset("a,b\n".as_bytes(), 4),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let d = read_dataset(TEXT.as_bytes(), 32).unwrap();
        let a = vec![SplitKind::Train, SplitKind::Test];
        let mut out = Vec::new();
        write_manifest(&d, &a, &mut out).unwrap();
        assert_eq!(String::from_utf8(out.clone()).unwrap(), "q,t,split\n0,0,train\n0,1,test\n");
        assert_eq!(read_manifest(out.as_slice(), &d).unwrap(), a);
        assert!(read_manifest("q,t,split\n0,0,train\n".as_bytes(), &d).is_err());
    }
}
