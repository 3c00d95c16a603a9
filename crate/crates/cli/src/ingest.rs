//! External CSV layout to canonical dataset.

use std::collections::BTreeMap;

use beamtrack::data::{write_dataset, RawDataset, RawSample};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::util::{check_output, open, read_json, usage, write_json, CliError};
use crate::IngestArgs;

/// Input column for every canonical field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Mapping {
    pub q: String,
    pub t: String,
    pub lat_bs: String,
    pub lon_bs: String,
    pub lat_ue: String,
    pub lon_ue: String,
    pub height_m: String,
    pub beam: String,
    /// Power columns are `<prefix><index>`, ordered by index.
    pub power_prefix: Option<String>,
    /// Explicit power columns; wins over the prefix.
    pub power_cols: Option<Vec<String>>,
    pub beam_base: usize,
}

impl Default for Mapping {
    fn default() -> Self {
        Mapping {
            q: "q".into(),
            t: "t".into(),
            lat_bs: "lat_bs".into(),
            lon_bs: "lon_bs".into(),
            lat_ue: "lat_ue".into(),
            lon_ue: "lon_ue".into(),
            height_m: "height_m".into(),
            beam: "beam".into(),
            power_prefix: Some("p".into()),
            power_cols: None,
            beam_base: 1,
        }
    }
}

fn resolve(a: &IngestArgs) -> Result<Mapping, CliError> {
    let mut m: Mapping = match &a.mapping {
        Some(p) => read_json(p)?,
        None => Mapping::default(),
    };
    let overrides = [
        (&a.col_q, &mut m.q),
        (&a.col_t, &mut m.t),
        (&a.col_lat_bs, &mut m.lat_bs),
        (&a.col_lon_bs, &mut m.lon_bs),
        (&a.col_lat_ue, &mut m.lat_ue),
        (&a.col_lon_ue, &mut m.lon_ue),
        (&a.col_height, &mut m.height_m),
        (&a.col_beam, &mut m.beam),
    ];
    for (flag, slot) in overrides {
        if let Some(v) = flag {
            *slot = v.clone();
        }
    }
    if let Some(p) = &a.power_prefix {
        m.power_prefix = Some(p.clone());
    }
    if let Some(c) = &a.power_cols {
        m.power_cols = Some(c.clone());
    }
    if let Some(b) = a.beam_base {
        m.beam_base = b;
    }
    Ok(m)
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize, CliError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| usage(format!("input has no column '{name}'")))
}

fn power_columns(headers: &csv::StringRecord, m: &Mapping) -> Result<Vec<usize>, CliError> {
    if let Some(cols) = &m.power_cols {
        return cols.iter().map(|c| column(headers, c)).collect();
    }
    let Some(prefix) = &m.power_prefix else {
        return Ok(Vec::new());
    };
    let mut found: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| {
            h.trim()
                .strip_prefix(prefix.as_str())
                .and_then(|rest| rest.parse::<usize>().ok())
                .map(|k| (k, i))
        })
        .collect();
    found.sort_unstable();
    if found.iter().enumerate().any(|(j, (k, _))| *k != found[0].0 + j) {
        return Err(usage(format!("power columns with prefix '{prefix}' are not contiguous")));
    }
    Ok(found.into_iter().map(|(_, i)| i).collect())
}

/// Row-level problems, counted per kind.
#[derive(Default)]
struct Tally(BTreeMap<&'static str, usize>);

impl Tally {
    fn add(&mut self, kind: &'static str) {
        *self.0.entry(kind).or_default() += 1;
    }

    fn total(&self) -> usize {
        self.0.values().sum()
    }
}

struct RowError {
    kind: &'static str,
    message: String,
}

fn row_err(kind: &'static str, message: String) -> RowError {
    RowError { kind, message }
}

#[allow(clippy::too_many_arguments)]
fn parse_row(
    rec: &csv::StringRecord,
    fields: &[usize; 8],
    names: &[&str; 8],
    powers: &[usize],
    beam_base: usize,
    m: usize,
) -> Result<RawSample, RowError> {
    fn num<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> Result<T, RowError> {
        let raw = rec.get(i).unwrap_or("");
        raw.trim()
            .parse()
            .map_err(|_| row_err("parse", format!("cannot parse {name} from '{raw}'")))
    }
    let q: usize = num(rec, fields[0], names[0])?;
    let t: usize = num(rec, fields[1], names[1])?;
    let coords: Vec<f64> = (2..7).map(|j| num(rec, fields[j], names[j])).collect::<Result<_, _>>()?;
    let raw_beam: usize = num(rec, fields[7], names[7])?;
    let beam = raw_beam
        .checked_sub(beam_base)
        .filter(|b| *b < m)
        .ok_or_else(|| row_err("beam_range", format!("beam {raw_beam} outside [{beam_base}, {})", beam_base + m)))?;
    let pw = if powers.is_empty() {
        None
    } else {
        let p: Vec<f64> = powers
            .iter()
            .map(|&i| num(rec, i, "power"))
            .collect::<Result<_, _>>()?;
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(row_err("power_value", "powers must be finite and nonnegative".into()));
        }
        let best = beamtrack::argmax(&p);
        if best != beam {
            return Err(row_err(
                "argmax_mismatch",
                format!("argmax(powers) = {best} but beam = {beam} (0-based)"),
            ));
        }
        Some(p)
    };
    RawSample::new(q, t, coords[0], coords[1], coords[2], coords[3], coords[4], beam, pw)
        .map_err(|e| row_err("position", e.to_string()))
}

pub fn run(a: IngestArgs) -> Result<(), CliError> {
    let map = resolve(&a)?;
    check_output(&a.out, a.force)?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(open(&a.input)?);
    let headers = rdr
        .headers()
        .map_err(|e| CliError::Data(beamtrack::Error::Parse { line: 1, message: e.to_string() }))?
        .clone();
    let names = [
        map.q.as_str(),
        map.t.as_str(),
        map.lat_bs.as_str(),
        map.lon_bs.as_str(),
        map.lat_ue.as_str(),
        map.lon_ue.as_str(),
        map.height_m.as_str(),
        map.beam.as_str(),
    ];
    let mut fields = [0usize; 8];
    for (slot, name) in fields.iter_mut().zip(names) {
        *slot = column(&headers, name)?;
    }
    let powers = power_columns(&headers, &map)?;
    let m = if powers.is_empty() { a.beams } else { powers.len() };
    if m < 2 {
        return Err(usage("codebook needs at least 2 beams"));
    }

    let mut tally = Tally::default();
    let mut by_key: BTreeMap<(usize, usize), RawSample> = BTreeMap::new();
    let mut rows = 0usize;
    for rec in rdr.records() {
        rows += 1;
        let (rec, line) = match rec {
            Ok(r) => {
                let line = r.position().map_or(0, |p| p.line());
                (r, line)
            }
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                if a.strict {
                    return Err(CliError::Data(beamtrack::Error::Parse { line, message: e.to_string() }));
                }
                log::warn!("line {line}: {e}");
                tally.add("parse");
                continue;
            }
        };
        let result = parse_row(&rec, &fields, &names, &powers, map.beam_base, m).and_then(|s| {
            if by_key.contains_key(&s.key()) {
                Err(row_err("duplicate", format!("duplicate (q, t) = {:?}", s.key())))
            } else {
                Ok(s)
            }
        });
        match result {
            Ok(s) => {
                by_key.insert(s.key(), s);
            }
            Err(e) if a.strict => {
                return Err(CliError::Data(beamtrack::Error::Parse { line, message: e.message }));
            }
            Err(e) => {
                log::warn!("line {line}: {} (row dropped)", e.message);
                tally.add(e.kind);
            }
        }
    }
    let samples: Vec<RawSample> = by_key.into_values().collect();
    // gaps are legal (windowing skips them) but worth flagging
    let gaps = samples
        .windows(2)
        .filter(|w| w[0].seq_index == w[1].seq_index && w[1].sample_index != w[0].sample_index + 1)
        .count();
    if gaps > 0 {
        if a.strict {
            return Err(CliError::Data(beamtrack::Error::InvalidData(format!(
                "{gaps} non-consecutive t steps within sequences"
            ))));
        }
        log::warn!("{gaps} non-consecutive t steps within sequences");
        for _ in 0..gaps {
            tally.add("gap");
        }
    }
    let d = RawDataset::new(samples, m)?;
    let mut buf = Vec::new();
    write_dataset(&d, &mut buf)?;
    std::fs::write(&a.out, buf)?;
    let counts: BTreeMap<&str, usize> = tally.0.clone();
    write_json(
        &a.out.with_extension("config.json"),
        &json!({ "command": "ingest", "input": a.input, "mapping": map, "beams": m, "strict": a.strict }),
    )?;
    println!("rows {rows}");
    println!("written {}", d.len());
    println!("warnings {}", tally.total());
    for (k, v) in counts {
        println!("warnings.{k} {v}");
    }
    Ok(())
}
