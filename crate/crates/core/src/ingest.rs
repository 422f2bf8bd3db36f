//! Trip-record ingestion: parse, filter, and reduce to the origin-destination
//! matrices the simulator consumes.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{Datelike, NaiveDate, NaiveDateTime, NaiveTime, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{LabeledMatrix, Matrix};

/// Header names of the fields we read. Defaults follow the public yellow-cab
/// schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub vendor: String,
    pub pickup_time: String,
    pub dropoff_time: String,
    pub passengers: String,
    pub distance: String,
    pub rate_code: String,
    pub pickup_zone: String,
    pub dropoff_zone: String,
    pub fare: String,
    pub total: String,
    pub mta_tax: String,
    pub improvement_surcharge: String,
    pub congestion_surcharge: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            vendor: "VendorID".into(),
            pickup_time: "tpep_pickup_datetime".into(),
            dropoff_time: "tpep_dropoff_datetime".into(),
            passengers: "passenger_count".into(),
            distance: "trip_distance".into(),
            rate_code: "RatecodeID".into(),
            pickup_zone: "PULocationID".into(),
            dropoff_zone: "DOLocationID".into(),
            fare: "fare_amount".into(),
            total: "total_amount".into(),
            mta_tax: "mta_tax".into(),
            improvement_surcharge: "improvement_surcharge".into(),
            congestion_surcharge: "congestion_surcharge".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub vendor: String,
    pub pickup: NaiveDateTime,
    pub dropoff: NaiveDateTime,
    pub pickup_zone: u32,
    pub dropoff_zone: u32,
    pub distance: f64,
    /// Missing counts are kept as `None` and rejected by the passenger rule.
    pub passengers: Option<u32>,
    pub rate_code: Option<u32>,
    pub fare: f64,
    pub total: f64,
    /// MTA tax, improvement surcharge, congestion surcharge, when present.
    pub surcharges: Option<[f64; 3]>,
}

impl TripRecord {
    pub fn trip_seconds(&self) -> i64 {
        (self.dropoff - self.pickup).num_seconds()
    }
}

/// Filter rules in the order they are checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterRule {
    Unparseable,
    Window,
    Zones,
    TripTime,
    Distance,
    Amounts,
    RateCode,
    Passengers,
    Date,
    Surcharge,
}

/// Mandated surcharge amounts; any other value rejects the trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurchargeRule {
    pub mta_tax: f64,
    pub improvement_surcharge: f64,
    pub congestion_surcharge: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Local pickup time window, start inclusive, end exclusive.
    pub window_start: NaiveTime,
    pub window_end: NaiveTime,
    /// Both ends of a trip must be in this set. Its order defines the matrix
    /// index of each zone.
    pub zones: Vec<u32>,
    pub min_trip_seconds: i64,
    pub max_trip_seconds: i64,
    pub min_distance: f64,
    pub max_distance: f64,
    pub rate_code: u32,
    pub min_passengers: u32,
    pub max_passengers: u32,
    pub weekdays_only: bool,
    /// Inclusive date bounds on the pickup.
    pub first_date: Option<NaiveDate>,
    pub last_date: Option<NaiveDate>,
    pub surcharges: Option<SurchargeRule>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            window_start: NaiveTime::from_hms_opt(8, 0, 0).expect("valid time"),
            window_end: NaiveTime::from_hms_opt(9, 0, 0).expect("valid time"),
            zones: Vec::new(),
            min_trip_seconds: 60,
            max_trip_seconds: 7200,
            min_distance: 0.1,
            max_distance: 20.0,
            rate_code: 1,
            min_passengers: 1,
            max_passengers: 6,
            weekdays_only: true,
            first_date: None,
            last_date: None,
            surcharges: None,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_start >= self.window_end {
            return Err(Error::Config("pickup window is empty".into()));
        }
        if self.zones.is_empty() {
            return Err(Error::Config("zone list is empty".into()));
        }
        let mut seen = self.zones.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.zones.len() {
            return Err(Error::Config("zone list has duplicates".into()));
        }
        Ok(())
    }

    /// First rule the record breaks, if any.
    pub fn check(&self, r: &TripRecord) -> Option<FilterRule> {
        let t = r.pickup.time();
        if t < self.window_start || t >= self.window_end {
            return Some(FilterRule::Window);
        }
        if !self.zones.contains(&r.pickup_zone) || !self.zones.contains(&r.dropoff_zone) {
            return Some(FilterRule::Zones);
        }
        let secs = r.trip_seconds();
        if secs < self.min_trip_seconds || secs > self.max_trip_seconds {
            return Some(FilterRule::TripTime);
        }
        if !(r.distance >= self.min_distance && r.distance <= self.max_distance) {
            return Some(FilterRule::Distance);
        }
        if !(r.fare > 0.0 && r.total > 0.0) {
            return Some(FilterRule::Amounts);
        }
        if r.rate_code != Some(self.rate_code) {
            return Some(FilterRule::RateCode);
        }
        if !r.passengers.is_some_and(|p| (self.min_passengers..=self.max_passengers).contains(&p)) {
            return Some(FilterRule::Passengers);
        }
        let date = r.pickup.date();
        let weekend = matches!(date.weekday(), Weekday::Sat | Weekday::Sun);
        if (self.weekdays_only && weekend)
            || self.first_date.is_some_and(|d| date < d)
            || self.last_date.is_some_and(|d| date > d)
        {
            return Some(FilterRule::Date);
        }
        if let Some(rule) = &self.surcharges {
            let want = [rule.mta_tax, rule.improvement_surcharge, rule.congestion_surcharge];
            let ok = r
                .surcharges
                .is_some_and(|got| got.iter().zip(want).all(|(g, w)| (g - w).abs() < 1e-9));
            if !ok {
                return Some(FilterRule::Surcharge);
            }
        }
        None
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    /// Rejections keyed by the first failing rule.
    pub rejections: BTreeMap<FilterRule, usize>,
    pub output: usize,
}

impl FilterReport {
    pub fn rejected(&self) -> usize {
        self.rejections.values().sum()
    }

    pub fn reconciles(&self) -> bool {
        self.input == self.output + self.rejected()
    }

    fn reject(&mut self, rule: FilterRule) {
        *self.rejections.entry(rule).or_default() += 1;
    }
}

/// A parsed input row.
#[derive(Debug, Clone, PartialEq)]
pub enum ParsedRow {
    Record(TripRecord),
    Unparseable { line: u64, reason: String },
}

pub fn filter_trips<I>(rows: I, config: &FilterConfig) -> (Vec<TripRecord>, FilterReport)
where
    I: IntoIterator<Item = ParsedRow>,
{
    let mut kept = Vec::new();
    let mut report = FilterReport::default();
    for row in rows {
        report.input += 1;
        match row {
            ParsedRow::Unparseable { .. } => report.reject(FilterRule::Unparseable),
            ParsedRow::Record(r) => match config.check(&r) {
                Some(rule) => report.reject(rule),
                None => kept.push(r),
            },
        }
    }
    report.output = kept.len();
    (kept, report)
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S%.f", "%m/%d/%Y %I:%M:%S %p", "%m/%d/%Y %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

/// Integer field that may be written as `1`, `1.0`, or left empty.
fn parse_count(s: &str) -> std::result::Result<Option<u32>, String> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    if let Ok(v) = s.parse::<u32>() {
        return Ok(Some(v));
    }
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.fract() == 0.0 && v <= f64::from(u32::MAX) => Ok(Some(v as u32)),
        _ => Err(format!("not a count: {s:?}")),
    }
}

fn parse_f64(s: &str, what: &str) -> std::result::Result<f64, String> {
    s.trim().parse::<f64>().map_err(|_| format!("{what}: not a number: {s:?}"))
}

struct Columns {
    vendor: usize,
    pickup_time: usize,
    dropoff_time: usize,
    passengers: usize,
    distance: usize,
    rate_code: usize,
    pickup_zone: usize,
    dropoff_zone: usize,
    fare: usize,
    total: usize,
    surcharges: Option<[usize; 3]>,
}

impl Columns {
    fn locate(headers: &csv::StringRecord, map: &ColumnMap) -> Result<Self> {
        let find = |name: &str| headers.iter().position(|h| h.trim() == name);
        let need = |name: &str| find(name).ok_or_else(|| Error::Schema(format!("missing column {name:?}")));
        let surcharges = match (find(&map.mta_tax), find(&map.improvement_surcharge), find(&map.congestion_surcharge)) {
            (Some(a), Some(b), Some(c)) => Some([a, b, c]),
            _ => None,
        };
        Ok(Self {
            vendor: need(&map.vendor)?,
            pickup_time: need(&map.pickup_time)?,
            dropoff_time: need(&map.dropoff_time)?,
            passengers: need(&map.passengers)?,
            distance: need(&map.distance)?,
            rate_code: need(&map.rate_code)?,
            pickup_zone: need(&map.pickup_zone)?,
            dropoff_zone: need(&map.dropoff_zone)?,
            fare: need(&map.fare)?,
            total: need(&map.total)?,
            surcharges,
        })
    }

    fn parse(&self, row: &csv::StringRecord) -> std::result::Result<TripRecord, String> {
        let get = |i: usize| row.get(i).unwrap_or("");
        let time = |i: usize, what: &str| parse_timestamp(get(i)).ok_or_else(|| format!("{what}: bad timestamp {:?}", get(i)));
        let zone = |i: usize, what: &str| {
            parse_count(get(i))?.ok_or_else(|| format!("{what}: missing zone"))
        };
        let surcharges = match self.surcharges {
            Some(idx) => {
                let mut out = [0.0; 3];
                for (o, i) in out.iter_mut().zip(idx) {
                    *o = parse_f64(get(i), "surcharge")?;
                }
                Some(out)
            }
            None => None,
        };
        Ok(TripRecord {
            vendor: get(self.vendor).trim().to_string(),
            pickup: time(self.pickup_time, "pickup")?,
            dropoff: time(self.dropoff_time, "dropoff")?,
            pickup_zone: zone(self.pickup_zone, "pickup zone")?,
            dropoff_zone: zone(self.dropoff_zone, "dropoff zone")?,
            distance: parse_f64(get(self.distance), "distance")?,
            passengers: parse_count(get(self.passengers))?,
            rate_code: parse_count(get(self.rate_code))?,
            fare: parse_f64(get(self.fare), "fare")?,
            total: parse_f64(get(self.total), "total")?,
            surcharges,
        })
    }
}

/// Streams a delimited file through parsing and filtering.
pub fn ingest_csv<R: Read>(
    reader: R,
    delimiter: u8,
    map: &ColumnMap,
    config: &FilterConfig,
) -> Result<(Vec<TripRecord>, FilterReport)> {
    config.validate()?;
    let mut rdr = csv::ReaderBuilder::new().delimiter(delimiter).flexible(true).from_reader(reader);
    let cols = Columns::locate(rdr.headers()?, map)?;
    if config.surcharges.is_some() && cols.surcharges.is_none() {
        return Err(Error::Schema("surcharge rule configured but surcharge columns are missing".into()));
    }
    let mut warned = 0;
    let mut failure = None;
    let rows = rdr.records().map_while(|row| {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                failure = Some(e);
                return None;
            }
        };
        let line = row.position().map_or(0, |p| p.line());
        Some(match cols.parse(&row) {
            Ok(r) => ParsedRow::Record(r),
            Err(reason) => {
                if warned < 5 {
                    log::warn!("line {line}: {reason}");
                    warned += 1;
                }
                ParsedRow::Unparseable { line, reason }
            }
        })
    });
    let out = filter_trips(rows, config);
    if let Some(e) = failure {
        return Err(e.into());
    }
    Ok(out)
}

/// Writes records with the given column names; surcharge columns are written
/// only when every record carries them.
pub fn write_trips_csv<W: Write>(records: &[TripRecord], map: &ColumnMap, out: W) -> Result<()> {
    let with_surcharges = !records.is_empty() && records.iter().all(|r| r.surcharges.is_some());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        &map.vendor,
        &map.pickup_time,
        &map.dropoff_time,
        &map.passengers,
        &map.distance,
        &map.rate_code,
        &map.pickup_zone,
        &map.dropoff_zone,
        &map.fare,
        &map.total,
    ];
    if with_surcharges {
        header.extend([&map.mta_tax, &map.improvement_surcharge, &map.congestion_surcharge]);
    }
    w.write_record(header)?;
    let opt = |v: Option<u32>| v.map_or(String::new(), |x| x.to_string());
    for r in records {
        let mut row = vec![
            r.vendor.clone(),
            r.pickup.format("%Y-%m-%d %H:%M:%S").to_string(),
            r.dropoff.format("%Y-%m-%d %H:%M:%S").to_string(),
            opt(r.passengers),
            r.distance.to_string(),
            opt(r.rate_code),
            r.pickup_zone.to_string(),
            r.dropoff_zone.to_string(),
            r.fare.to_string(),
            r.total.to_string(),
        ];
        if with_surcharges {
            row.extend(r.surcharges.expect("checked above").iter().map(|v| v.to_string()));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

fn zone_index(zones: &[u32]) -> impl Fn(u32) -> Option<usize> + '_ {
    move |z| zones.iter().position(|&x| x == z)
}

fn labeled(zones: &[u32], values: Matrix) -> LabeledMatrix {
    LabeledMatrix {
        labels: zones.iter().map(|z| z.to_string()).collect(),
        values,
    }
}

/// Gaps between successive events on the same day, one list per day in date
/// order. `times` need not be sorted.
pub fn same_day_gaps(times: &[NaiveDateTime]) -> Vec<Vec<f64>> {
    let mut by_day: BTreeMap<NaiveDate, Vec<NaiveDateTime>> = BTreeMap::new();
    for &t in times {
        by_day.entry(t.date()).or_default().push(t);
    }
    by_day
        .into_values()
        .map(|mut day| {
            day.sort_unstable();
            day.windows(2).map(|w| (w[1] - w[0]).num_milliseconds() as f64 / 1000.0).collect()
        })
        .collect()
}

fn pair_pickups(records: &[TripRecord], zones: &[u32]) -> Vec<Vec<NaiveDateTime>> {
    let n = zones.len();
    let idx = zone_index(zones);
    let mut out = vec![Vec::new(); n * n];
    for r in records {
        if let (Some(i), Some(j)) = (idx(r.pickup_zone), idx(r.dropoff_zone)) {
            out[i * n + j].push(r.pickup);
        }
    }
    out
}

/// Mean same-day interarrival seconds per origin-destination pair. Gaps from
/// all days are pooled; pairs without any same-day gap get `inf`.
pub fn interarrival_matrix(records: &[TripRecord], zones: &[u32]) -> LabeledMatrix {
    let n = zones.len();
    let mut m = Matrix::zeros(n);
    for (k, times) in pair_pickups(records, zones).iter().enumerate() {
        let gaps: Vec<f64> = same_day_gaps(times).into_iter().flatten().collect();
        let v = if gaps.is_empty() {
            f64::INFINITY
        } else {
            gaps.iter().sum::<f64>() / gaps.len() as f64
        };
        m.set(k / n, k % n, v);
    }
    labeled(zones, m)
}

/// Mean trip seconds per origin-destination pair, `inf` where no trip exists.
pub fn triptime_matrix(records: &[TripRecord], zones: &[u32]) -> LabeledMatrix {
    let n = zones.len();
    let idx = zone_index(zones);
    let mut sum = vec![0i64; n * n];
    let mut count = vec![0u64; n * n];
    for r in records {
        if let (Some(i), Some(j)) = (idx(r.pickup_zone), idx(r.dropoff_zone)) {
            sum[i * n + j] += r.trip_seconds();
            count[i * n + j] += 1;
        }
    }
    let mut m = Matrix::zeros(n);
    for k in 0..n * n {
        let v = if count[k] == 0 {
            f64::INFINITY
        } else {
            sum[k] as f64 / count[k] as f64
        };
        m.set(k / n, k % n, v);
    }
    labeled(zones, m)
}

/// Pickup counts per zone, largest first, ties by zone ID.
pub fn demand_ranking(records: &[TripRecord]) -> Vec<(u32, usize)> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for r in records {
        *counts.entry(r.pickup_zone).or_default() += 1;
    }
    let mut out: Vec<_> = counts.into_iter().collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

/// Same-day pickup gaps at one origin zone, per day.
pub fn pickup_gaps(records: &[TripRecord], zone: u32) -> Vec<Vec<f64>> {
    let times: Vec<NaiveDateTime> = records.iter().filter(|r| r.pickup_zone == zone).map(|r| r.pickup).collect();
    same_day_gaps(&times)
}

/// Exponential fit of interarrival gaps with paired quantiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpFit {
    /// Reciprocal of the pooled sample mean.
    pub rate: f64,
    /// (probability, empirical, theoretical) triples.
    pub quantiles: Vec<(f64, f64, f64)>,
    /// Mean gap of each day that has at least one gap.
    pub daily_means: Vec<f64>,
}

pub const MIN_FIT_SAMPLES: usize = 10;

/// Fits an exponential to `gaps` (grouped by day) and pairs `q` empirical
/// quantiles at probabilities `(i - 0.5) / q` with the fitted ones.
pub fn exp_fit_quantiles(gaps: &[Vec<f64>], q: usize) -> Result<ExpFit> {
    let mut all: Vec<f64> = gaps.iter().flatten().copied().collect();
    if all.len() < MIN_FIT_SAMPLES {
        return Err(Error::TooFewSamples {
            needed: MIN_FIT_SAMPLES,
            got: all.len(),
        });
    }
    if q == 0 {
        return Err(Error::Config("quantile count must be positive".into()));
    }
    all.sort_by(f64::total_cmp);
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let rate = 1.0 / mean;
    let empirical = |p: f64| {
        let h = (all.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(all.len() - 1);
        all[lo] + (h - lo as f64) * (all[hi] - all[lo])
    };
    let quantiles = (1..=q)
        .map(|i| {
            let p = (i as f64 - 0.5) / q as f64;
            (p, empirical(p), -(1.0 - p).ln() / rate)
        })
        .collect();
    let daily_means = gaps
        .iter()
        .filter(|d| !d.is_empty())
        .map(|d| d.iter().sum::<f64>() / d.len() as f64)
        .collect();
    Ok(ExpFit {
        rate,
        quantiles,
        daily_means,
    })
}
