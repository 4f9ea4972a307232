use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDateTime;

use crate::error::{Error, Result};

const DATE_FORMATS: [&str; 4] = ["%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M", "%Y/%m/%d %H:%M", "%Y-%m-%dT%H:%M:%S"];

/// A multivariate series: one timestamp per row, one named column per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesTable {
    pub timestamps: Vec<String>,
    pub channels: Vec<String>,
    /// row-major `timesteps x channels`
    pub values: Vec<f64>,
}

impl SeriesTable {
    pub fn new(timestamps: Vec<String>, channels: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::data("table has no value columns"));
        }
        if timestamps.is_empty() {
            return Err(Error::data("table has no rows"));
        }
        if values.len() != timestamps.len() * channels.len() {
            return Err(Error::data(format!(
                "{} values do not fill {} rows x {} channels",
                values.len(),
                timestamps.len(),
                channels.len()
            )));
        }
        check_order(&timestamps)?;
        Ok(SeriesTable { timestamps, channels, values })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let c = self.channels.len();
        &self.values[t * c..(t + 1) * c]
    }

    pub fn value(&self, t: usize, channel: usize) -> f64 {
        self.values[t * self.channels.len() + channel]
    }

    /// First `n` rows.
    pub fn head(&self, n: usize) -> SeriesTable {
        let n = n.min(self.len());
        SeriesTable {
            timestamps: self.timestamps[..n].to_vec(),
            channels: self.channels.clone(),
            values: self.values[..n * self.channels.len()].to_vec(),
        }
    }

    pub fn from_reader(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
            return Err(Error::data("empty file"));
        }
        if header.len() < 2 {
            return Err(Error::data("expected a date column followed by at least one value column"));
        }
        let channels: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
        let mut timestamps = Vec::new();
        let mut values = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let record = record?;
            // 1-based line numbers, counting the header
            let line = i + 2;
            if record.len() != header.len() {
                return Err(Error::data(format!(
                    "row {line}: expected {} columns, found {}",
                    header.len(),
                    record.len()
                )));
            }
            timestamps.push(record[0].trim().to_string());
            for (j, cell) in record.iter().enumerate().skip(1) {
                let v: f64 = cell.trim().parse().map_err(|_| {
                    Error::data(format!("row {line}, column {} (`{}`): non-numeric cell `{cell}`", j + 1, &header[j]))
                })?;
                if !v.is_finite() {
                    return Err(Error::data(format!("row {line}, column {}: missing or non-finite value", j + 1)));
                }
                values.push(v);
            }
        }
        if timestamps.is_empty() {
            return Err(Error::data("file has a header but no rows"));
        }
        SeriesTable::new(timestamps, channels, values)
    }

    pub fn to_writer(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["date".to_string()];
        header.extend(self.channels.iter().cloned());
        w.write_record(&header)?;
        for (t, ts) in self.timestamps.iter().enumerate() {
            let mut rec = vec![ts.clone()];
            rec.extend(self.row(t).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_writer(std::fs::File::create(path)?)
    }
}

/// Reads an ETT-style CSV: header row, `date` first, numeric channels after.
pub fn load_csv(path: impl AsRef<Path>) -> Result<SeriesTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    if file.metadata()?.len() == 0 {
        return Err(Error::data(format!("{} is empty", path.display())));
    }
    SeriesTable::from_reader(std::io::BufReader::new(file))
}

fn parse_date(s: &str) -> Option<NaiveDateTime> {
    DATE_FORMATS.iter().find_map(|f| NaiveDateTime::parse_from_str(s, f).ok()).or_else(|| {
        chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d").ok().and_then(|d| d.and_hms_opt(0, 0, 0))
    })
}

/// Timestamps must be strictly increasing. Parsed as dates when every one is
/// a recognized date format, otherwise compared as numbers or, failing that,
/// as strings.
fn check_order(timestamps: &[String]) -> Result<()> {
    let report = |i: usize| {
        Err(Error::data(format!(
            "timestamps not strictly increasing at row {}: `{}` then `{}`",
            i + 2,
            timestamps[i],
            timestamps[i + 1]
        )))
    };
    let dates: Option<Vec<_>> = timestamps.iter().map(|s| parse_date(s)).collect();
    if let Some(d) = dates {
        return match d.windows(2).position(|w| w[1] <= w[0]) {
            Some(i) => report(i),
            None => Ok(()),
        };
    }
    let nums: Option<Vec<f64>> = timestamps.iter().map(|s| s.parse().ok()).collect();
    let bad = match nums {
        Some(n) => n.windows(2).position(|w| w[1] <= w[0]),
        None => timestamps.windows(2).position(|w| w[1] <= w[0]),
    };
    match bad {
        Some(i) => report(i),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "date,HUFL,OT\n2016-07-01 00:00:00,5.827,30.531\n2016-07-01 01:00:00,5.693,27.787\n2016-07-01 02:00:00,-0.5,1e3\n";

    #[test]
    fn hand_written_file_round_trips() {
        let t = SeriesTable::from_reader(SMALL.as_bytes()).unwrap();
        assert_eq!((t.len(), t.num_channels()), (3, 2));
        assert_eq!(t.channels, ["HUFL", "OT"]);
        assert_eq!(t.values, [5.827, 30.531, 5.693, 27.787, -0.5, 1000.0]);
        assert_eq!(t.value(1, 1), 27.787);

        let mut buf = Vec::new();
        t.to_writer(&mut buf).unwrap();
        assert_eq!(SeriesTable::from_reader(&buf[..]).unwrap(), t);
    }

    #[test]
    fn reports_bad_cells_with_position() {
        let bad = "date,a,b\n2020-01-01 00:00:00,1,2\n2020-01-01 01:00:00,3,x\n";
        let msg = SeriesTable::from_reader(bad.as_bytes()).unwrap_err().to_string();
        assert!(msg.contains("row 3") && msg.contains("column 3"), "{msg}");

        let missing = "date,a\n2020-01-01 00:00:00,\n";
        assert!(SeriesTable::from_reader(missing.as_bytes()).is_err());
        let nan = "date,a\n2020-01-01 00:00:00,NaN\n";
        assert!(SeriesTable::from_reader(nan.as_bytes()).is_err());
    }

    #[test]
    fn rejects_unordered_and_empty_input() {
        let unordered = "date,a\n2020-01-02 00:00:00,1\n2020-01-01 00:00:00,2\n";
        assert!(SeriesTable::from_reader(unordered.as_bytes()).is_err());
        let dup = "date,a\n1,1\n1,2\n";
        assert!(SeriesTable::from_reader(dup.as_bytes()).is_err());
        // numeric stamps compare numerically, not lexically
        assert!(SeriesTable::from_reader("date,a\n9,1\n10,2\n".as_bytes()).is_ok());
        assert!(SeriesTable::from_reader("".as_bytes()).is_err());
        assert!(SeriesTable::from_reader("date,a\n".as_bytes()).is_err());

        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "").unwrap();
        assert!(matches!(load_csv(&empty), Err(Error::Data(_))));
        assert!(matches!(load_csv(dir.path().join("missing.csv")), Err(Error::Data(_))));
    }
}
