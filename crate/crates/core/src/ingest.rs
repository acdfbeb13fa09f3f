//! Loading series and case files, the incident-episode rule, age filtering
//! and conversion of counts to monthly rates.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AgeBand, Observation, ObservationSeries, Sex, StratumKey};

pub const RATE_SCALE: f64 = 100_000.0;
pub const DEFAULT_WINDOW_MONTHS: u32 = 12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawCaseRecord {
    pub person_id: String,
    pub event_date: NaiveDate,
    pub sex: Sex,
    pub birth_date: Option<NaiveDate>,
    pub age: Option<u32>,
}

impl RawCaseRecord {
    /// Age in completed years at the event date.
    pub fn age_at_event(&self) -> Result<u32> {
        if let Some(b) = self.birth_date {
            return completed_years(b, self.event_date).ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "person {}: birth date {b} is after event date {}",
                    self.person_id, self.event_date
                ))
            });
        }
        self.age.ok_or_else(|| {
            Error::InvalidParameter(format!(
                "person {}: neither birth date nor age given",
                self.person_id
            ))
        })
    }

    fn sort_key(&self) -> (&str, NaiveDate, Sex, Option<NaiveDate>, Option<u32>) {
        (
            &self.person_id,
            self.event_date,
            self.sex,
            self.birth_date,
            self.age,
        )
    }
}

fn completed_years(birth: NaiveDate, at: NaiveDate) -> Option<u32> {
    let mut years = at.year() - birth.year();
    if (at.month(), at.day()) < (birth.month(), birth.day()) {
        years -= 1;
    }
    u32::try_from(years).ok()
}

/// Whole calendar months from `from` to `to`; a month only counts once the
/// day of month has been reached.
pub fn whole_months_between(from: NaiveDate, to: NaiveDate) -> i64 {
    let mut m =
        (to.year() as i64 - from.year() as i64) * 12 + to.month() as i64 - from.month() as i64;
    if m > 0 && to.day() < from.day() {
        m -= 1;
    } else if m < 0 && to.day() > from.day() {
        m += 1;
    }
    m
}

fn sorted(records: &[RawCaseRecord]) -> Vec<RawCaseRecord> {
    let mut v = records.to_vec();
    v.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    v
}

/// Records that start an incident episode: the first record of each person,
/// and any record whose most recent earlier record of the same person (of
/// any kind) is at least `window_months` whole months before it. Output is
/// sorted by person and date.
pub fn incident_episodes(records: &[RawCaseRecord], window_months: u32) -> Vec<RawCaseRecord> {
    let mut out = Vec::new();
    let mut prev: Option<&RawCaseRecord> = None;
    let all = sorted(records);
    for r in &all {
        let incident = match prev {
            Some(p) if p.person_id == r.person_id => {
                whole_months_between(p.event_date, r.event_date) >= window_months as i64
            }
            _ => true,
        };
        if incident {
            out.push(r.clone());
        }
        prev = Some(r);
    }
    out
}

/// Number of records that would be incident if the gap were measured from
/// the last incident episode instead of the last record.
pub fn episode_rule_disagreements(records: &[RawCaseRecord], window_months: u32) -> usize {
    let all = sorted(records);
    let mut count = 0;
    let mut last_any: Option<&RawCaseRecord> = None;
    let mut last_incident: Option<&RawCaseRecord> = None;
    for r in &all {
        let gap_ok = |p: Option<&RawCaseRecord>| match p {
            Some(p) if p.person_id == r.person_id => {
                whole_months_between(p.event_date, r.event_date) >= window_months as i64
            }
            _ => true,
        };
        let strict = gap_ok(last_any);
        let loose = gap_ok(last_incident);
        if loose && !strict {
            count += 1;
        }
        if loose {
            last_incident = Some(r);
        }
        last_any = Some(r);
    }
    count
}

/// Age band boundaries: ages `[min, split)` are young, `[split, max]` older.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeBands {
    pub min: u32,
    pub split: u32,
    pub max: u32,
}

impl Default for AgeBands {
    fn default() -> Self {
        Self {
            min: 15,
            split: 30,
            max: 94,
        }
    }
}

impl AgeBands {
    pub fn band(&self, age: u32) -> Option<AgeBand> {
        if age < self.min || age > self.max {
            None
        } else if age < self.split {
            Some(AgeBand::Young)
        } else {
            Some(AgeBand::Older)
        }
    }
}

/// Keeps records whose age at the event lies in `[min_age, max_age]`.
pub fn filter_age(
    records: &[RawCaseRecord],
    min_age: u32,
    max_age: u32,
) -> Result<Vec<RawCaseRecord>> {
    let mut out = Vec::new();
    for r in records {
        let age = r.age_at_event()?;
        if (min_age..=max_age).contains(&age) {
            out.push(r.clone());
        }
    }
    Ok(out)
}

/// Study months, numbered from 1 at `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyWindow {
    pub start: NaiveDate,
    pub months: u32,
}

impl StudyWindow {
    /// Window starting on the first day of `start` (`YYYY-MM`).
    pub fn from_year_month(start: &str, months: u32) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("expected a YYYY-MM month, got `{start}`"));
        let (y, m) = start.trim().split_once('-').ok_or_else(bad)?;
        let y: i32 = y.parse().map_err(|_| bad())?;
        let m: u32 = m.parse().map_err(|_| bad())?;
        let start = NaiveDate::from_ymd_opt(y, m, 1).ok_or_else(bad)?;
        if months == 0 {
            return Err(Error::InvalidParameter(
                "study window needs at least one month".into(),
            ));
        }
        Ok(Self { start, months })
    }

    pub fn month_index(&self, date: NaiveDate) -> Option<u32> {
        let d = (date.year() as i64 - self.start.year() as i64) * 12 + date.month() as i64
            - self.start.month() as i64;
        (0..self.months as i64).contains(&d).then(|| d as u32 + 1)
    }
}

/// Person-months at risk per stratum and study month.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PopulationTable {
    cells: BTreeMap<(StratumKey, u32), f64>,
}

impl PopulationTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, stratum: StratumKey, month: u32, person_months: f64) -> Result<()> {
        if !(person_months > 0.0 && person_months.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "person-months for {stratum} at month {month} must be positive, got {person_months}"
            )));
        }
        if self.cells.insert((stratum, month), person_months).is_some() {
            return Err(Error::DuplicateKey {
                stratum: stratum.to_string(),
                month,
            });
        }
        Ok(())
    }

    pub fn get(&self, stratum: StratumKey, month: u32) -> Option<f64> {
        self.cells.get(&(stratum, month)).copied()
    }

    /// Mean person-months of each stratum.
    pub fn mean_by_stratum(&self) -> BTreeMap<StratumKey, f64> {
        let mut acc: BTreeMap<StratumKey, (f64, usize)> = BTreeMap::new();
        for ((k, _), v) in &self.cells {
            let e = acc.entry(*k).or_default();
            e.0 += v;
            e.1 += 1;
        }
        acc.into_iter()
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect()
    }
}

/// Incident counts per stratum and study month. Every cell of the window
/// is present; events outside the window or the age bands are dropped.
pub fn monthly_counts(
    events: &[RawCaseRecord],
    window: &StudyWindow,
    bands: &AgeBands,
) -> Result<BTreeMap<(StratumKey, u32), u64>> {
    let mut counts = BTreeMap::new();
    for k in StratumKey::all() {
        for m in 1..=window.months {
            counts.insert((k, m), 0);
        }
    }
    for e in events {
        let Some(month) = window.month_index(e.event_date) else {
            continue;
        };
        let Some(age_band) = bands.band(e.age_at_event()?) else {
            continue;
        };
        *counts
            .get_mut(&(
                StratumKey {
                    sex: e.sex,
                    age_band,
                },
                month,
            ))
            .expect("all cells initialized") += 1;
    }
    Ok(counts)
}

/// Rates per 100,000 person-months.
pub fn monthly_rates(
    counts: &BTreeMap<(StratumKey, u32), u64>,
    population: &PopulationTable,
) -> Result<ObservationSeries> {
    let mut records = Vec::with_capacity(counts.len());
    for (&(stratum, month), &n) in counts {
        let pm = population
            .get(stratum, month)
            .ok_or_else(|| Error::MissingPopulation {
                stratum: stratum.to_string(),
                month,
            })?;
        records.push(Observation {
            month,
            stratum,
            rate: RATE_SCALE * n as f64 / pm,
            population: Some(pm),
        });
    }
    ObservationSeries::new(records)
}

fn field_error(line: u64, column: &str, message: impl Into<String>) -> Error {
    Error::Record {
        line,
        column: column.to_string(),
        message: message.into(),
    }
}

struct Columns {
    index: HashMap<String, usize>,
}

impl Columns {
    fn new(headers: &csv::StringRecord, required: &[&str]) -> Result<Self> {
        let index: HashMap<String, usize> = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().to_string(), i))
            .collect();
        for r in required {
            if !index.contains_key(*r) {
                return Err(field_error(1, r, "missing column in header"));
            }
        }
        Ok(Self { index })
    }

    fn get<'a>(&self, rec: &'a csv::StringRecord, name: &str) -> Option<&'a str> {
        self.index
            .get(name)
            .and_then(|&i| rec.get(i))
            .map(str::trim)
            .filter(|s| !s.is_empty())
    }

    fn require<'a>(&self, rec: &'a csv::StringRecord, line: u64, name: &str) -> Result<&'a str> {
        self.get(rec, name)
            .ok_or_else(|| field_error(line, name, "missing value"))
    }
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

fn parse_num<T: std::str::FromStr>(s: &str, line: u64, column: &str) -> Result<T> {
    s.parse()
        .map_err(|_| field_error(line, column, format!("cannot parse `{s}`")))
}

fn parse_sex(s: &str, line: u64) -> Result<Sex> {
    Sex::parse(s).ok_or_else(|| field_error(line, "sex", format!("expected F or M, got `{s}`")))
}

fn parse_date(s: &str, line: u64, column: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| {
        field_error(
            line,
            column,
            format!("expected an ISO-8601 date, got `{s}`"),
        )
    })
}

/// Reads `month,sex,age_band,rate,population` (population may be blank or
/// absent).
pub fn read_series_csv<R: Read>(reader: R) -> Result<ObservationSeries> {
    let mut rdr = csv::Reader::from_reader(reader);
    let cols = Columns::new(rdr.headers()?, &["month", "sex", "age_band", "rate"])?;
    let mut records = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let month: u32 = parse_num(cols.require(&rec, line, "month")?, line, "month")?;
        if month == 0 {
            return Err(field_error(line, "month", "months are numbered from 1"));
        }
        let sex = parse_sex(cols.require(&rec, line, "sex")?, line)?;
        let band = cols.require(&rec, line, "age_band")?;
        let age_band = AgeBand::parse(band).ok_or_else(|| {
            field_error(
                line,
                "age_band",
                format!("expected 15-29 or 30-94, got `{band}`"),
            )
        })?;
        let rate: f64 = parse_num(cols.require(&rec, line, "rate")?, line, "rate")?;
        if !(rate.is_finite() && rate >= 0.0) {
            return Err(field_error(
                line,
                "rate",
                "rate must be finite and non-negative",
            ));
        }
        let population = match cols.get(&rec, "population") {
            Some(s) => {
                let p: f64 = parse_num(s, line, "population")?;
                if !(p > 0.0 && p.is_finite()) {
                    return Err(field_error(
                        line,
                        "population",
                        "population must be positive",
                    ));
                }
                Some(p)
            }
            None => None,
        };
        records.push(Observation {
            month,
            stratum: StratumKey { sex, age_band },
            rate,
            population,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyInput("series file has no records".into()));
    }
    ObservationSeries::new(records)
}

pub fn parse_series_csv(path: &Path) -> Result<ObservationSeries> {
    read_series_csv(std::fs::File::open(path)?)
}

pub fn write_series_csv<W: Write>(series: &ObservationSeries, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["month", "sex", "age_band", "rate", "population"])?;
    for r in series.records() {
        w.write_record([
            r.month.to_string(),
            r.stratum.sex.code().to_string(),
            r.stratum.age_band.code().to_string(),
            r.rate.to_string(),
            r.population.map(|p| p.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `person_id,event_date,sex,birth_date`; an optional `age` column is
/// used where the birth date is blank.
pub fn read_cases_csv<R: Read>(reader: R) -> Result<Vec<RawCaseRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let cols = Columns::new(rdr.headers()?, &["person_id", "event_date", "sex"])?;
    if !cols.index.contains_key("birth_date") && !cols.index.contains_key("age") {
        return Err(field_error(1, "birth_date", "missing column in header"));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let person_id = cols.require(&rec, line, "person_id")?.to_string();
        let event_date = parse_date(cols.require(&rec, line, "event_date")?, line, "event_date")?;
        let sex = parse_sex(cols.require(&rec, line, "sex")?, line)?;
        let birth_date = cols
            .get(&rec, "birth_date")
            .map(|s| parse_date(s, line, "birth_date"))
            .transpose()?;
        let age = cols
            .get(&rec, "age")
            .map(|s| parse_num::<u32>(s, line, "age"))
            .transpose()?;
        if birth_date.is_none() && age.is_none() {
            return Err(field_error(
                line,
                "birth_date",
                "neither birth date nor age given",
            ));
        }
        let r = RawCaseRecord {
            person_id,
            event_date,
            sex,
            birth_date,
            age,
        };
        r.age_at_event()
            .map_err(|e| field_error(line, "birth_date", e.to_string()))?;
        out.push(r);
    }
    Ok(out)
}

pub fn parse_cases_csv(path: &Path) -> Result<Vec<RawCaseRecord>> {
    read_cases_csv(std::fs::File::open(path)?)
}

/// Reads `month,sex,age_band,population`.
pub fn read_population_csv<R: Read>(reader: R) -> Result<PopulationTable> {
    let mut rdr = csv::Reader::from_reader(reader);
    let cols = Columns::new(rdr.headers()?, &["month", "sex", "age_band", "population"])?;
    let mut table = PopulationTable::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let month: u32 = parse_num(cols.require(&rec, line, "month")?, line, "month")?;
        let sex = parse_sex(cols.require(&rec, line, "sex")?, line)?;
        let band = cols.require(&rec, line, "age_band")?;
        let age_band = AgeBand::parse(band)
            .ok_or_else(|| field_error(line, "age_band", format!("unknown age band `{band}`")))?;
        let pm: f64 = parse_num(cols.require(&rec, line, "population")?, line, "population")?;
        table
            .insert(StratumKey { sex, age_band }, month, pm)
            .map_err(|e| match e {
                Error::InvalidParameter(m) => field_error(line, "population", m),
                other => other,
            })?;
    }
    Ok(table)
}

pub fn parse_population_csv(path: &Path) -> Result<PopulationTable> {
    read_population_csv(std::fs::File::open(path)?)
}
