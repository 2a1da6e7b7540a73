//! CSV formats for ensembles, field data, forecasts and score tables.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::biascorrect::FieldSeries;
use crate::campaign::{Campaign, EnsembleDay};
use crate::engine::{ForecastRecord, ModelTag};
use crate::error::{Error, Result};
use crate::metrics::ScoreRow;

pub const ENSEMBLE_HEADER: &str = "ref_date,horizon,depth,ensemble_id,temp_c";
pub const FIELD_HEADER: &str = "date,depth,temp_c";
pub const FORECAST_HEADER: &str = "model,ref_date,horizon,depth,mean,sd,lo90,hi90";
pub const SCORE_HEADER: &str = "model,group_key,group_value,rmse,log_score,coverage,width,n";

/// Decimal with at most six fractional digits and no trailing zeros.
pub fn fmt6(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    match s {
        "-0" => "0".to_string(),
        _ => s.to_string(),
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv { path: path.to_path_buf(), source }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::io(path, source)
}

fn reader(path: &Path, header: &str) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let got = rdr.headers().map_err(csv_err(path))?.iter().collect::<Vec<_>>().join(",");
    if got != header {
        return Err(Error::Data(format!("{}: header is {got:?}, expected {header:?}", path.display())));
    }
    Ok(rdr)
}

fn data_err(path: &Path, line: u64, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}:{line}: {msg}", path.display()))
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

fn parse<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, i: usize, what: &str) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| data_err(path, line_of(rec), format!("bad {what} {:?}", rec.get(i).unwrap_or(""))))
}

fn parse_temp(path: &Path, rec: &csv::StringRecord, i: usize, what: &str) -> Result<f64> {
    let v: f64 = parse(path, rec, i, what)?;
    if !v.is_finite() {
        return Err(data_err(path, line_of(rec), format!("non-finite {what}")));
    }
    Ok(v)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn finish(path: &Path, mut w: BufWriter<File>) -> Result<()> {
    w.flush().map_err(io_err(path))?;
    w.into_inner().map_err(|e| Error::io(path, e.into_error()))?.sync_all().map_err(io_err(path))
}

pub fn write_ensembles<'a>(path: &Path, days: impl IntoIterator<Item = &'a EnsembleDay>) -> Result<()> {
    let mut w = create(path)?;
    let e = io_err(path);
    writeln!(w, "{ENSEMBLE_HEADER}").map_err(&e)?;
    for day in days {
        for h in 1..=day.n_horizons {
            for d in 0..day.n_depths {
                for (k, v) in day.members(h, d).iter().enumerate() {
                    writeln!(w, "{},{h},{d},{},{}", day.ref_date, k + 1, fmt6(*v)).map_err(&e)?;
                }
            }
        }
    }
    finish(path, w)
}

/// Reads a complete ensemble file. Every reference date must cover the same
/// horizon × depth × member grid exactly once.
pub fn read_ensembles(path: &Path) -> Result<BTreeMap<NaiveDate, EnsembleDay>> {
    let mut rdr = reader(path, ENSEMBLE_HEADER)?;
    let mut raw: BTreeMap<NaiveDate, BTreeMap<(u32, u32, u32), f64>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err(path))?;
        let date: NaiveDate = parse(path, &rec, 0, "ref_date")?;
        let h: u32 = parse(path, &rec, 1, "horizon")?;
        let d: u32 = parse(path, &rec, 2, "depth")?;
        let k: u32 = parse(path, &rec, 3, "ensemble_id")?;
        let v = parse_temp(path, &rec, 4, "temp_c")?;
        if h == 0 || k == 0 {
            return Err(data_err(path, line_of(&rec), "horizon and ensemble_id start at 1"));
        }
        if raw.entry(date).or_default().insert((h, d, k), v).is_some() {
            return Err(data_err(path, line_of(&rec), format!("duplicate entry {date} h={h} depth={d} member={k}")));
        }
    }
    let mut out = BTreeMap::new();
    let mut grid = None;
    for (date, cells) in raw {
        let (h, d, k) = cells.keys().fold((0, 0, 0), |a, &(h, d, k)| (a.0.max(h), a.1.max(d + 1), a.2.max(k)));
        if *grid.get_or_insert((h, d, k)) != (h, d, k) || cells.len() != (h * d * k) as usize {
            return Err(Error::Data(format!(
                "{}: ensemble for {date} does not cover the full horizon × depth × member grid",
                path.display()
            )));
        }
        out.insert(date, EnsembleDay::new(date, h, d, k, cells.into_values().collect())?);
    }
    Ok(out)
}

pub fn write_field(path: &Path, field: &FieldSeries) -> Result<()> {
    let mut w = create(path)?;
    let e = io_err(path);
    writeln!(w, "{FIELD_HEADER}").map_err(&e)?;
    for (date, d, t) in field.iter() {
        writeln!(w, "{date},{d},{}", fmt6(t)).map_err(&e)?;
    }
    finish(path, w)
}

pub fn read_field(path: &Path) -> Result<FieldSeries> {
    let mut rdr = reader(path, FIELD_HEADER)?;
    let mut f = FieldSeries::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err(path))?;
        let date: NaiveDate = parse(path, &rec, 0, "date")?;
        let d: u32 = parse(path, &rec, 1, "depth")?;
        let v = parse_temp(path, &rec, 2, "temp_c")?;
        f.insert(date, d, v).map_err(|e| data_err(path, line_of(&rec), e))?;
    }
    Ok(f)
}

pub fn read_campaign(ensembles: &Path, field: &Path) -> Result<Campaign> {
    Ok(Campaign { ensembles: read_ensembles(ensembles)?, field: read_field(field)? })
}

fn forecast_line(r: &ForecastRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        r.model.name(),
        r.ref_date,
        r.horizon,
        r.depth,
        fmt6(r.mean),
        fmt6(r.sd),
        fmt6(r.lo90),
        fmt6(r.hi90)
    )
}

/// Writes `records`, replacing the file, or appending when `append` is set
/// and the file already exists.
pub fn write_forecasts(path: &Path, records: &[ForecastRecord], append: bool) -> Result<()> {
    let exists = path.exists();
    let mut w = if append && exists {
        BufWriter::new(OpenOptions::new().append(true).open(path).map_err(io_err(path))?)
    } else {
        create(path)?
    };
    let e = io_err(path);
    if !(append && exists) {
        writeln!(w, "{FORECAST_HEADER}").map_err(&e)?;
    }
    for r in records {
        writeln!(w, "{}", forecast_line(r)).map_err(&e)?;
    }
    finish(path, w)
}

/// Forecast records as stored; truth is not part of the file.
pub fn read_forecasts(path: &Path) -> Result<Vec<ForecastRecord>> {
    let mut rdr = reader(path, FORECAST_HEADER)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err(path))?;
        let model = ModelTag::parse(rec.get(0).unwrap_or("")).map_err(|e| data_err(path, line_of(&rec), e))?;
        let [mean, sd, lo90, hi90] =
            [(4, "mean"), (5, "sd"), (6, "lo90"), (7, "hi90")].map(|(i, what)| parse_temp(path, &rec, i, what));
        out.push(ForecastRecord {
            model,
            ref_date: parse(path, &rec, 1, "ref_date")?,
            horizon: parse(path, &rec, 2, "horizon")?,
            depth: parse(path, &rec, 3, "depth")?,
            mean: mean?,
            sd: sd?,
            lo90: lo90?,
            hi90: hi90?,
            truth: None,
        });
    }
    Ok(out)
}

/// Drops stored forecasts issued on or after `from`. Returns the number kept.
pub fn truncate_forecasts(path: &Path, from: NaiveDate) -> Result<usize> {
    if !path.exists() {
        return Ok(0);
    }
    let kept: Vec<ForecastRecord> = read_forecasts(path)?.into_iter().filter(|r| r.ref_date < from).collect();
    let tmp = path.with_extension("csv.tmp");
    write_forecasts(&tmp, &kept, false)?;
    std::fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(kept.len())
}

/// Score table row as written; `n_floored` is reported through logging only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub model: String,
    pub group_key: String,
    pub group_value: String,
    pub rmse: f64,
    pub log_score: f64,
    pub coverage: f64,
    pub width: f64,
    pub n: usize,
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut w = create(path)?;
    let e = io_err(path);
    writeln!(w, "{SCORE_HEADER}").map_err(&e)?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.model.name(),
            r.group_key,
            r.group_value,
            fmt6(r.rmse),
            fmt6(r.log_score),
            fmt6(r.coverage),
            fmt6(r.width),
            r.n
        )
        .map_err(&e)?;
    }
    finish(path, w)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreLine>> {
    let mut rdr = reader(path, SCORE_HEADER)?;
    rdr.deserialize().map(|r| r.map_err(csv_err(path))).collect()
}
