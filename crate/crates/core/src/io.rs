//! File formats.
//!
//! Binary container: a 48-byte little-endian header
//! `b"MRAMAT01" | kind u32 | flags u32 | L u64 | rows u64 | count u64 | sigma f64`
//! followed by `rows * L` f64 values and, when flag bit 0 is set, `rows` u64
//! true shifts. Observations store one row per sample. Moments store `m1`
//! followed by the `L` rows of `m2`, with `count` the sample size (0 for
//! population moments).
//!
//! CSV: a `#mra v1 kind=... key=value ...` line, a header row and one record
//! per observation (or per moment row). Floats are written in shortest
//! round-trip form, so both formats are lossless.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::cyclic::Signal;
use crate::error::{MraError, Result};
use crate::model::ObservationSet;
use crate::moments::{MomentPair, MomentSource};
use crate::spectral::{Diagnostics, RecoveryResult};

pub const MAGIC: &[u8; 8] = b"MRAMAT01";
pub const HEADER_BYTES: usize = 48;

const KIND_OBSERVATIONS: u32 = 1;
const KIND_POPULATION: u32 = 2;
const KIND_SAMPLE: u32 = 3;
const FLAG_SHIFTS: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Binary,
    Csv,
}

impl Format {
    /// `.csv` selects CSV; anything else is binary.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Binary,
        }
    }
}

struct Header {
    kind: u32,
    flags: u32,
    len: u64,
    rows: u64,
    count: u64,
    sigma: f64,
}

impl Header {
    fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.kind.to_le_bytes())?;
        w.write_all(&self.flags.to_le_bytes())?;
        w.write_all(&self.len.to_le_bytes())?;
        w.write_all(&self.rows.to_le_bytes())?;
        w.write_all(&self.count.to_le_bytes())?;
        w.write_all(&self.sigma.to_le_bytes())?;
        Ok(())
    }

    fn read(r: &mut impl Read) -> Result<Header> {
        let mut buf = [0u8; HEADER_BYTES];
        r.read_exact(&mut buf)?;
        if &buf[..8] != MAGIC {
            return Err(MraError::Format("bad magic".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap());
        let u64_at = |i: usize| u64::from_le_bytes(buf[i..i + 8].try_into().unwrap());
        Ok(Header {
            kind: u32_at(8),
            flags: u32_at(12),
            len: u64_at(16),
            rows: u64_at(24),
            count: u64_at(32),
            sigma: f64::from_le_bytes(buf[40..48].try_into().unwrap()),
        })
    }
}

fn write_f64s(w: &mut impl Write, values: impl IntoIterator<Item = f64>) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn to_usize(v: u64, what: &str) -> Result<usize> {
    usize::try_from(v).map_err(|_| MraError::Format(format!("{what} = {v} does not fit in memory")))
}

pub fn write_observations_binary(obs: &ObservationSet, w: &mut impl Write) -> Result<()> {
    let shifts = obs.true_shifts();
    Header {
        kind: KIND_OBSERVATIONS,
        flags: if shifts.is_some() { FLAG_SHIFTS } else { 0 },
        len: obs.len() as u64,
        rows: obs.count() as u64,
        count: obs.count() as u64,
        sigma: obs.sigma(),
    }
    .write(w)?;
    write_f64s(w, obs.data().iter().copied())?;
    if let Some(s) = shifts {
        for &v in s {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_observations_binary(r: &mut impl Read) -> Result<ObservationSet> {
    let h = Header::read(r)?;
    if h.kind != KIND_OBSERVATIONS {
        return Err(MraError::Format(format!("expected observations, found kind {}", h.kind)));
    }
    let len = to_usize(h.len, "L")?;
    let rows = to_usize(h.rows, "rows")?;
    let total = len.checked_mul(rows).ok_or_else(|| MraError::Format("size overflow".into()))?;
    let data = read_f64s(r, total)?;
    let shifts = if h.flags & FLAG_SHIFTS != 0 {
        let mut bytes = vec![0u8; rows * 8];
        r.read_exact(&mut bytes)?;
        let s: Result<Vec<usize>> = bytes
            .chunks_exact(8)
            .map(|c| to_usize(u64::from_le_bytes(c.try_into().unwrap()), "shift"))
            .collect();
        Some(s?)
    } else {
        None
    };
    ObservationSet::new(len, data, h.sigma, shifts)
}

pub fn write_moments_binary(m: &MomentPair, w: &mut impl Write) -> Result<()> {
    let (kind, count, sigma) = match m.source() {
        MomentSource::Population => (KIND_POPULATION, 0, 0.0),
        MomentSource::Sample { count, sigma } => (KIND_SAMPLE, count as u64, sigma),
    };
    let len = m.len();
    Header {
        kind,
        flags: 0,
        len: len as u64,
        rows: len as u64 + 1,
        count,
        sigma,
    }
    .write(w)?;
    write_f64s(w, m.m1().iter().copied())?;
    write_f64s(w, (0..len).flat_map(|i| (0..len).map(move |j| m.m2()[(i, j)])))
}

pub fn read_moments_binary(r: &mut impl Read) -> Result<MomentPair> {
    let h = Header::read(r)?;
    let source = match h.kind {
        KIND_POPULATION => MomentSource::Population,
        KIND_SAMPLE => MomentSource::Sample {
            count: to_usize(h.count, "count")?,
            sigma: h.sigma,
        },
        k => return Err(MraError::Format(format!("expected moments, found kind {k}"))),
    };
    let len = to_usize(h.len, "L")?;
    if h.rows != h.len + 1 {
        return Err(MraError::Format(format!("moment file has {} rows for L = {len}", h.rows)));
    }
    let m1 = read_f64s(r, len)?;
    let m2 = DMatrix::from_row_slice(len, len, &read_f64s(r, len * len)?);
    MomentPair::new(m1, m2, source)
}

/// `#mra v1 kind=<kind> k=v ...` parsed into its key-value pairs.
fn parse_tag_line(line: &str, kind: &str) -> Result<BTreeMap<String, String>> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some("#mra") || parts.next() != Some("v1") {
        return Err(MraError::Format(format!("missing '#mra v1' tag line, found {line:?}")));
    }
    let map: BTreeMap<String, String> = parts
        .filter_map(|p| p.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    match map.get("kind") {
        Some(k) if k == kind => Ok(map),
        other => Err(MraError::Format(format!("expected kind={kind}, found {other:?}"))),
    }
}

fn tag<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    map.get(key)
        .ok_or_else(|| MraError::Format(format!("tag line lacks {key}")))?
        .parse()
        .map_err(|_| MraError::Format(format!("bad value for {key}")))
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| MraError::Format(format!("not a number: {s:?}")))
}

fn split_tag(text: &str) -> Result<(&str, &str)> {
    text.split_once('\n').ok_or_else(|| MraError::Format("empty CSV file".into()))
}

pub fn write_observations_csv(obs: &ObservationSet, w: &mut impl Write) -> Result<()> {
    let len = obs.len();
    writeln!(w, "#mra v1 kind=observations L={len} N={} sigma={}", obs.count(), obs.sigma())?;
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (0..len).map(|i| format!("y{i}")).collect();
    let shifts = obs.true_shifts();
    if shifts.is_some() {
        header.push("shift".into());
    }
    out.write_record(&header)?;
    for (j, row) in obs.rows().enumerate() {
        let mut rec: Vec<String> = row.iter().map(f64::to_string).collect();
        if let Some(s) = shifts {
            rec.push(s[j].to_string());
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_observations_csv(r: &mut impl Read) -> Result<ObservationSet> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let (first, body) = split_tag(&text)?;
    let tags = parse_tag_line(first, "observations")?;
    let len: usize = tag(&tags, "L")?;
    let count: usize = tag(&tags, "N")?;
    let sigma: f64 = tag(&tags, "sigma")?;
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let has_shift = rdr.headers()?.len() == len + 1;
    let mut data = Vec::with_capacity(len * count);
    let mut shifts = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != len + has_shift as usize {
            return Err(MraError::Format(format!("row has {} fields, expected {}", rec.len(), len + has_shift as usize)));
        }
        for v in rec.iter().take(len) {
            data.push(parse_f64(v)?);
        }
        if has_shift {
            shifts.push(rec[len].trim().parse().map_err(|_| MraError::Format("bad shift".into()))?);
        }
    }
    if data.len() != len * count {
        return Err(MraError::Format(format!("expected {count} rows, found {}", data.len() / len.max(1))));
    }
    ObservationSet::new(len, data, sigma, has_shift.then_some(shifts))
}

pub fn write_moments_csv(m: &MomentPair, w: &mut impl Write) -> Result<()> {
    let len = m.len();
    match m.source() {
        MomentSource::Population => writeln!(w, "#mra v1 kind=moments source=population L={len}")?,
        MomentSource::Sample { count, sigma } => {
            writeln!(w, "#mra v1 kind=moments source=sample L={len} N={count} sigma={sigma}")?
        }
    }
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["row".to_string()];
    header.extend((0..len).map(|i| format!("c{i}")));
    out.write_record(&header)?;
    let mut rec = vec!["m1".to_string()];
    rec.extend(m.m1().iter().map(f64::to_string));
    out.write_record(&rec)?;
    for i in 0..len {
        let mut rec = vec![format!("m2_{i}")];
        rec.extend((0..len).map(|j| m.m2()[(i, j)].to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_moments_csv(r: &mut impl Read) -> Result<MomentPair> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let (first, body) = split_tag(&text)?;
    let tags = parse_tag_line(first, "moments")?;
    let len: usize = tag(&tags, "L")?;
    let source = match tags.get("source").map(String::as_str) {
        Some("population") => MomentSource::Population,
        Some("sample") => MomentSource::Sample {
            count: tag(&tags, "N")?,
            sigma: tag(&tags, "sigma")?,
        },
        other => return Err(MraError::Format(format!("unknown moment source {other:?}"))),
    };
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let mut rows = Vec::with_capacity(len + 1);
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != len + 1 {
            return Err(MraError::Format(format!("moment row has {} fields", rec.len())));
        }
        rows.push(rec.iter().skip(1).map(parse_f64).collect::<Result<Vec<f64>>>()?);
    }
    if rows.len() != len + 1 {
        return Err(MraError::Format(format!("expected {} moment rows, found {}", len + 1, rows.len())));
    }
    let m1 = rows.remove(0);
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    MomentPair::new(m1, DMatrix::from_row_slice(len, len, &flat), source)
}

/// Long format `field,index,value`: one row per entry of `x_hat` and
/// `rho_hat`, then one row per diagnostic with index 0.
pub fn write_recovery_csv(res: &RecoveryResult, w: &mut impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["field", "index", "value"])?;
    for (i, v) in res.x_hat.iter().enumerate() {
        out.write_record(["x_hat", &i.to_string(), &v.to_string()])?;
    }
    for (i, v) in res.rho_hat.iter().enumerate() {
        out.write_record(["rho_hat", &i.to_string(), &v.to_string()])?;
    }
    let d = &res.diagnostics;
    let diag = [
        ("eigen_gap", d.eigen_gap.to_string()),
        ("ps_min", d.ps_min.to_string()),
        ("ps_floored", d.ps_floored.to_string()),
        ("dc_sum", d.dc_sum.to_string()),
        ("iterations", d.iterations.to_string()),
        ("objective", d.objective.to_string()),
        ("converged", (d.converged as u8).to_string()),
    ];
    for (name, v) in diag {
        out.write_record([name, "0", &v])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_recovery_csv(r: &mut impl Read) -> Result<RecoveryResult> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut x = Vec::new();
    let mut rho = Vec::new();
    let mut d = Diagnostics::default();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 3 {
            return Err(MraError::Format("recovery rows need 3 fields".into()));
        }
        let value = &rec[2];
        let int = || value.trim().parse::<usize>().map_err(|_| MraError::Format(format!("bad integer {value:?}")));
        match &rec[0] {
            "x_hat" => x.push(parse_f64(value)?),
            "rho_hat" => rho.push(parse_f64(value)?),
            "eigen_gap" => d.eigen_gap = parse_f64(value)?,
            "ps_min" => d.ps_min = parse_f64(value)?,
            "ps_floored" => d.ps_floored = int()?,
            "dc_sum" => d.dc_sum = parse_f64(value)?,
            "iterations" => d.iterations = int()?,
            "objective" => d.objective = parse_f64(value)?,
            "converged" => d.converged = int()? != 0,
            other => return Err(MraError::Format(format!("unknown field {other:?}"))),
        }
    }
    Ok(RecoveryResult {
        x_hat: Signal::new(x)?,
        rho_hat: rho,
        diagnostics: d,
    })
}

/// One `(parameter point, method, statistic)` record of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub experiment: String,
    pub method: String,
    pub len: usize,
    pub count: usize,
    pub sigma: f64,
    /// Kind-specific extra parameter (distribution width, trial index); NaN if unused.
    pub param: f64,
    pub statistic: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentReport {
    pub metadata: BTreeMap<String, String>,
    pub rows: Vec<ReportRow>,
}

pub const REPORT_COLUMNS: [&str; 8] = ["experiment", "method", "L", "N", "sigma", "param", "statistic", "value"];

impl ExperimentReport {
    /// Rows matching `method` and `statistic`, in insertion order.
    pub fn select<'a>(&'a self, method: &'a str, statistic: &'a str) -> impl Iterator<Item = &'a ReportRow> + 'a {
        self.rows.iter().filter(move |r| r.method == method && r.statistic == statistic)
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "#mra v1 kind=report")?;
        for (k, v) in &self.metadata {
            writeln!(w, "# {k}={}", v.replace('\n', " "))?;
        }
        let mut out = csv::Writer::from_writer(w);
        out.write_record(REPORT_COLUMNS)?;
        for r in &self.rows {
            out.write_record([
                r.experiment.clone(),
                r.method.clone(),
                r.len.to_string(),
                r.count.to_string(),
                r.sigma.to_string(),
                r.param.to_string(),
                r.statistic.clone(),
                r.value.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(r: &mut impl Read) -> Result<ExperimentReport> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        let (first, mut body) = split_tag(&text)?;
        parse_tag_line(first, "report")?;
        let mut metadata = BTreeMap::new();
        while let Some(rest) = body.strip_prefix("# ") {
            let (line, tail) = rest.split_once('\n').unwrap_or((rest, ""));
            if let Some((k, v)) = line.split_once('=') {
                metadata.insert(k.to_string(), v.to_string());
            }
            body = tail;
        }
        let mut rdr = csv::Reader::from_reader(body.as_bytes());
        if rdr.headers()?.iter().ne(REPORT_COLUMNS) {
            return Err(MraError::Format("unexpected report columns".into()));
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let int = |s: &str| s.parse::<usize>().map_err(|_| MraError::Format(format!("bad integer {s:?}")));
            rows.push(ReportRow {
                experiment: rec[0].to_string(),
                method: rec[1].to_string(),
                len: int(&rec[2])?,
                count: int(&rec[3])?,
                sigma: parse_f64(&rec[4])?,
                param: parse_f64(&rec[5])?,
                statistic: rec[6].to_string(),
                value: parse_f64(&rec[7])?,
            });
        }
        Ok(ExperimentReport { metadata, rows })
    }
}

fn is_binary(path: &Path) -> Result<bool> {
    let mut magic = [0u8; 8];
    let mut f = File::open(path)?;
    let n = f.read(&mut magic)?;
    Ok(n == 8 && &magic == MAGIC)
}

/// Writes binary unless the path ends in `.csv`.
pub fn save_observations(obs: &ObservationSet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match Format::from_path(path) {
        Format::Binary => write_observations_binary(obs, &mut w)?,
        Format::Csv => write_observations_csv(obs, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

/// Detects the format from the leading magic bytes.
pub fn load_observations(path: &Path) -> Result<ObservationSet> {
    let binary = is_binary(path)?;
    let mut r = BufReader::new(File::open(path)?);
    if binary {
        read_observations_binary(&mut r)
    } else {
        read_observations_csv(&mut r)
    }
}

pub fn save_moments(m: &MomentPair, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match Format::from_path(path) {
        Format::Binary => write_moments_binary(m, &mut w)?,
        Format::Csv => write_moments_csv(m, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

pub fn load_moments(path: &Path) -> Result<MomentPair> {
    let binary = is_binary(path)?;
    let mut r = BufReader::new(File::open(path)?);
    if binary {
        read_moments_binary(&mut r)
    } else {
        read_moments_csv(&mut r)
    }
}

pub fn save_recovery(res: &RecoveryResult, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_recovery_csv(res, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_recovery(path: &Path) -> Result<RecoveryResult> {
    read_recovery_csv(&mut BufReader::new(File::open(path)?))
}
