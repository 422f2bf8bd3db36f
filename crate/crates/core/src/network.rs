//! City graph, travel times, neighbor sets and the Poisson demand model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Station index, dense in `0..n`.
pub type Station = usize;

/// Square row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != n {
                return Err(Error::Shape(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            data.extend(row);
        }
        Ok(Self { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.n + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.n.max(1))
    }
}

/// Square matrix with station labels, as read from or written to CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub labels: Vec<String>,
    pub values: Matrix,
}

impl LabeledMatrix {
    /// Parses the matrix CSV format: a header row of station IDs, then one row
    /// per station whose first column repeats the ID. Empty cells, `NA`, and
    /// `inf` all read as `f64::INFINITY` (the "no data" sentinel).
    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr.headers()?.clone();
        let labels: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
        let n = labels.len();
        let mut rows = Vec::with_capacity(n);
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            let row_label = record.get(0).unwrap_or_default();
            if row_label != labels.get(line).map(String::as_str).unwrap_or_default() {
                return Err(Error::Shape(format!(
                    "row {line} is labeled {row_label:?}, expected {:?}",
                    labels.get(line)
                )));
            }
            let row = record
                .iter()
                .skip(1)
                .map(parse_cell)
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        if rows.len() != n {
            return Err(Error::Shape(format!(
                "{} data rows for {n} header columns",
                rows.len()
            )));
        }
        Ok(Self {
            labels,
            values: Matrix::from_rows(rows)?,
        })
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("station");
        for label in &self.labels {
            out.push(',');
            out.push_str(label);
        }
        out.push('\n');
        for (label, row) in self.labels.iter().zip(self.values.rows()) {
            out.push_str(label);
            for v in row {
                out.push(',');
                if v.is_infinite() {
                    out.push_str("inf");
                } else {
                    out.push_str(&format!("{v}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

fn parse_cell(cell: &str) -> Result<f64> {
    match cell {
        "" | "NA" | "inf" | "Inf" | "INF" => Ok(f64::INFINITY),
        other => other
            .parse::<f64>()
            .map_err(|_| Error::Parse(format!("bad matrix cell {other:?}"))),
    }
}

/// The city graph: distances, quantized travel times and k-nearest neighbor sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    distance: Matrix,
    speed_mph: f64,
    travel_time: Vec<u32>,
    t_max: u32,
    k: usize,
    neighbors: Vec<Vec<Station>>,
    labels: Vec<String>,
}

/// Seconds to traverse `miles` at `speed_mph`, rounded half-up.
pub fn travel_seconds(miles: f64, speed_mph: f64) -> u32 {
    (miles / speed_mph * 3600.0 + 0.5).floor() as u32
}

impl Network {
    /// Builds the network from a distance matrix in miles.
    pub fn build(distance: Matrix, speed_mph: f64, k: usize) -> Result<Self> {
        let n = distance.n();
        if n < 2 {
            return Err(Error::Config(format!("network needs at least 2 stations, got {n}")));
        }
        if !(speed_mph.is_finite() && speed_mph > 0.0) {
            return Err(Error::Config(format!("speed must be positive, got {speed_mph}")));
        }
        if k < 1 || k > n - 1 {
            return Err(Error::Config(format!("k = {k} outside 1..={}", n - 1)));
        }
        for i in 0..n {
            for j in 0..n {
                let d = distance.get(i, j);
                if !d.is_finite() || d < 0.0 {
                    return Err(Error::Config(format!("distance ({i},{j}) = {d} is invalid")));
                }
                if i == j && d != 0.0 {
                    return Err(Error::Config(format!("distance ({i},{i}) = {d}, expected 0")));
                }
            }
        }

        let mut travel_time = vec![0u32; n * n];
        let mut t_max = 0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let t = travel_seconds(distance.get(i, j), speed_mph);
                    travel_time[i * n + j] = t;
                    t_max = t_max.max(t);
                }
            }
        }

        let neighbors = (0..n)
            .map(|i| {
                let mut others: Vec<Station> = (0..n).filter(|&j| j != i).collect();
                // stable sort keeps lower index first on equal distance
                others.sort_by(|&a, &b| distance.get(i, a).total_cmp(&distance.get(i, b)));
                others.truncate(k);
                others
            })
            .collect();

        Ok(Self {
            distance,
            speed_mph,
            travel_time,
            t_max,
            k,
            neighbors,
            labels: (0..n).map(|i| i.to_string()).collect(),
        })
    }

    pub fn from_labeled(matrix: LabeledMatrix, speed_mph: f64, k: usize) -> Result<Self> {
        let mut net = Self::build(matrix.values, speed_mph, k)?;
        net.labels = matrix.labels;
        Ok(net)
    }

    pub fn n(&self) -> usize {
        self.distance.n()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn speed_mph(&self) -> f64 {
        self.speed_mph
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<Station> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn distance(&self, i: Station, j: Station) -> f64 {
        self.distance.get(i, j)
    }

    pub fn distance_matrix(&self) -> &Matrix {
        &self.distance
    }

    /// Travel time in whole seconds.
    #[inline]
    pub fn travel_time(&self, i: Station, j: Station) -> u32 {
        self.travel_time[i * self.n() + j]
    }

    /// Miles covered along `i -> j` at the network speed, derived from the
    /// quantized travel time.
    #[inline]
    pub fn trip_miles(&self, i: Station, j: Station) -> f64 {
        self.travel_time(i, j) as f64 * self.speed_mph / 3600.0
    }

    pub fn t_max(&self) -> u32 {
        self.t_max
    }

    pub fn neighbors(&self, i: Station) -> &[Station] {
        &self.neighbors[i]
    }

    /// The `k` nearest stations to `i`, ascending by distance.
    pub fn k_nearest(&self, i: Station) -> Result<&[Station]> {
        self.neighbors
            .get(i)
            .map(Vec::as_slice)
            .ok_or(Error::StationOutOfRange { station: i, n: self.n() })
    }

    /// `i` followed by its neighbors: the choice set of a routing action.
    pub fn options(&self, i: Station) -> impl Iterator<Item = Station> + '_ {
        std::iter::once(i).chain(self.neighbors[i].iter().copied())
    }
}

/// Poisson arrival rates per origin-destination pair, passengers per second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandModel {
    lambda: Matrix,
    mean_trip_time: Option<Matrix>,
}

impl DemandModel {
    pub fn from_rates(mut lambda: Matrix) -> Result<Self> {
        let n = lambda.n();
        for i in 0..n {
            for j in 0..n {
                let l = lambda.get(i, j);
                if !l.is_finite() || l < 0.0 {
                    return Err(Error::Config(format!("rate ({i},{j}) = {l} is invalid")));
                }
            }
            lambda.set(i, i, 0.0);
        }
        Ok(Self {
            lambda,
            mean_trip_time: None,
        })
    }

    /// Rates as reciprocals of mean interarrival seconds. Infinite entries mean
    /// "no demand"; the diagonal is always zero.
    pub fn from_interarrival(mean_interarrival: &Matrix) -> Result<Self> {
        let n = mean_interarrival.n();
        let mut lambda = Matrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                let gap = mean_interarrival.get(i, j);
                if i == j || gap == f64::INFINITY {
                    continue;
                }
                if gap.is_nan() || gap <= 0.0 {
                    return Err(Error::Config(format!(
                        "interarrival ({i},{j}) = {gap} must be positive"
                    )));
                }
                lambda.set(i, j, 1.0 / gap);
            }
        }
        Ok(Self {
            lambda,
            mean_trip_time: None,
        })
    }

    pub fn with_trip_times(mut self, trip_times: Matrix) -> Self {
        self.mean_trip_time = Some(trip_times);
        self
    }

    pub fn n(&self) -> usize {
        self.lambda.n()
    }

    #[inline]
    pub fn rate(&self, i: Station, j: Station) -> f64 {
        self.lambda.get(i, j)
    }

    pub fn rates(&self) -> &Matrix {
        &self.lambda
    }

    pub fn mean_trip_time(&self) -> Option<&Matrix> {
        self.mean_trip_time.as_ref()
    }

    pub fn total_rate(&self) -> f64 {
        self.lambda.rows().flatten().sum()
    }

    /// Multiplies every rate by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let n = self.n();
        let mut lambda = Matrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                lambda.set(i, j, self.rate(i, j) * factor);
            }
        }
        let mut out = Self::from_rates(lambda)?;
        out.mean_trip_time = self.mean_trip_time.clone();
        Ok(out)
    }
}
