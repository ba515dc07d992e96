//! Observed competing-risks records, the dataset container and CSV ingestion.
//!
//! Each subject contributes `(time, event, treatment, covariates)` where `time`
//! is the follow-up time `min(T, C)` and `event` records whether follow-up ended
//! in censoring, the event of interest (cause 1) or the competing event (cause 2).

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How follow-up ended for one subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Event {
    Censored,
    Cause1,
    Cause2,
}

impl Event {
    /// Integer code used in CSV files: 0 censored, 1 event of interest, 2 competing event.
    pub fn code(self) -> u8 {
        match self {
            Event::Censored => 0,
            Event::Cause1 => 1,
            Event::Cause2 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Event> {
        match code {
            0 => Some(Event::Censored),
            1 => Some(Event::Cause1),
            2 => Some(Event::Cause2),
            _ => None,
        }
    }

    pub fn is_event(self) -> bool {
        self != Event::Censored
    }
}

/// One subject's observed data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub time: f64,
    pub event: Event,
    /// Binary treatment, 0 or 1.
    pub treatment: u8,
    pub covariates: Vec<f64>,
}

impl Record {
    pub fn new(time: f64, event: Event, treatment: u8, covariates: Vec<f64>) -> Self {
        Record {
            time,
            event,
            treatment,
            covariates,
        }
    }
}

/// An immutable, validated sample of [`Record`]s sharing one covariate layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    records: Vec<Record>,
    covariate_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset, rejecting empty samples, non-positive or non-finite
    /// times, treatments outside {0,1} and ragged covariate vectors.
    ///
    /// A sample where only one arm is present is accepted here; estimators that
    /// need both arms check positivity themselves and [`validate`] reports it.
    pub fn new(records: Vec<Record>, covariate_names: Vec<String>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let k = covariate_names.len();
        for (i, r) in records.iter().enumerate() {
            if !(r.time.is_finite() && r.time > 0.0) {
                return Err(Error::Parse {
                    row: i + 1,
                    message: format!("time must be positive and finite, got {}", r.time),
                });
            }
            if r.treatment > 1 {
                return Err(Error::Parse {
                    row: i + 1,
                    message: format!("treatment must be 0 or 1, got {}", r.treatment),
                });
            }
            if r.covariates.len() != k {
                return Err(Error::Parse {
                    row: i + 1,
                    message: format!("expected {k} covariates, got {}", r.covariates.len()),
                });
            }
            if r.covariates.iter().any(|x| !x.is_finite()) {
                return Err(Error::Parse {
                    row: i + 1,
                    message: "non-finite covariate".into(),
                });
            }
        }
        Ok(Dataset {
            records,
            covariate_names,
        })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Number of covariates per record.
    pub fn dim(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    pub fn n_treated(&self) -> usize {
        self.records.iter().filter(|r| r.treatment == 1).count()
    }

    pub fn count_events(&self, event: Event) -> usize {
        self.records.iter().filter(|r| r.event == event).count()
    }

    pub fn has_both_arms(&self) -> bool {
        let treated = self.n_treated();
        treated > 0 && treated < self.len()
    }

    pub fn max_time(&self) -> f64 {
        self.records.iter().map(|r| r.time).fold(0.0, f64::max)
    }

    /// Copy of the dataset with treatment levels 0 and 1 interchanged.
    pub fn relabel_treatment(&self) -> Dataset {
        let records = self
            .records
            .iter()
            .map(|r| Record {
                treatment: 1 - r.treatment,
                ..r.clone()
            })
            .collect();
        Dataset {
            records,
            covariate_names: self.covariate_names.clone(),
        }
    }

    /// New dataset made of the records at `indices` (repeats allowed).
    pub fn resample(&self, indices: &[usize]) -> Result<Dataset> {
        let records = indices
            .iter()
            .map(|&i| {
                self.records.get(i).cloned().ok_or_else(|| {
                    Error::InvalidArgument(format!("resample index {i} out of range"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(records, self.covariate_names.clone())
    }
}

/// Column mapping used when reading a CSV file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub time: String,
    pub event: String,
    pub treatment: String,
    /// Covariate columns; `None` takes every remaining column in header order.
    pub covariates: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            time: "time".into(),
            event: "event".into(),
            treatment: "treatment".into(),
            covariates: None,
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

/// Parses a header-prefixed, comma-separated file. Row numbers in errors count
/// data rows from 1, excluding the header.
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let find = |name: &str| -> Result<usize> {
        header.iter().position(|h| h == name).ok_or_else(|| Error::Schema {
            column: name.to_owned(),
        })
    };
    let time_col = find(&schema.time)?;
    let event_col = find(&schema.event)?;
    let treat_col = find(&schema.treatment)?;
    let covariate_names: Vec<String> = match &schema.covariates {
        Some(names) => names.clone(),
        None => header
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != time_col && *i != event_col && *i != treat_col)
            .map(|(_, h)| h.clone())
            .collect(),
    };
    let cov_cols = covariate_names
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        let cell = |col: usize| -> Result<f64> {
            let raw = row.get(col).unwrap_or("");
            raw.parse::<f64>().map_err(|_| Error::Parse {
                row: row_no,
                message: format!("non-numeric value `{raw}` in column `{}`", header[col]),
            })
        };
        let time = cell(time_col)?;
        if !(time.is_finite() && time > 0.0) {
            return Err(Error::Parse {
                row: row_no,
                message: format!("time must be positive, got {time}"),
            });
        }
        let event_raw = cell(event_col)?;
        let event = as_small_int(event_raw)
            .and_then(Event::from_code)
            .ok_or_else(|| Error::Parse {
                row: row_no,
                message: format!("event must be 0, 1 or 2, got {event_raw}"),
            })?;
        let treat_raw = cell(treat_col)?;
        let treatment = as_small_int(treat_raw)
            .filter(|&a| a <= 1)
            .ok_or_else(|| Error::Parse {
                row: row_no,
                message: format!("treatment must be 0 or 1, got {treat_raw}"),
            })?;
        let covariates = cov_cols.iter().map(|&c| cell(c)).collect::<Result<Vec<_>>>()?;
        records.push(Record {
            time,
            event,
            treatment,
            covariates,
        });
    }
    Dataset::new(records, covariate_names)
}

fn as_small_int(x: f64) -> Option<u8> {
    (x.fract() == 0.0 && (0.0..=255.0).contains(&x)).then_some(x as u8)
}

/// Writes `time,event,treatment,<covariates>` with shortest round-trip float formatting.
pub fn write_csv<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["time".to_owned(), "event".into(), "treatment".into()];
    header.extend(dataset.covariate_names.iter().cloned());
    wtr.write_record(&header)?;
    for r in &dataset.records {
        let mut row = vec![
            format!("{:?}", r.time),
            r.event.code().to_string(),
            r.treatment.to_string(),
        ];
        row.extend(r.covariates.iter().map(|x| format!("{x:?}")));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Data-quality findings that do not prevent estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Warning {
    /// No subject in this arm at all.
    EmptyArm { treatment: u8 },
    /// No subject in this arm still at risk just before the horizon.
    NoneAtRisk { treatment: u8, horizon: f64 },
    /// Event times shared by more than one event; `extra` counts events beyond the first per time.
    TiedEventTimes { tied_times: usize, extra: usize },
    ConstantCovariate { name: String },
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Warning::EmptyArm { treatment } => write!(f, "no treatment={treatment} subjects"),
            Warning::NoneAtRisk { treatment, horizon } => write!(
                f,
                "no treatment={treatment} subjects at risk before horizon {horizon}"
            ),
            Warning::TiedEventTimes { tied_times, extra } => write!(
                f,
                "{tied_times} event times carry ties ({extra} tied events beyond the first)"
            ),
            Warning::ConstantCovariate { name } => {
                write!(f, "covariate `{name}` is constant across the sample")
            }
        }
    }
}

/// Checks empirical positivity up to `horizon`, ties among event times and constant covariates.
pub fn validate(dataset: &Dataset, horizon: Option<f64>) -> Vec<Warning> {
    let mut warnings = Vec::new();
    for arm in [0u8, 1] {
        let arm_times: Vec<f64> = dataset
            .records
            .iter()
            .filter(|r| r.treatment == arm)
            .map(|r| r.time)
            .collect();
        if arm_times.is_empty() {
            warnings.push(Warning::EmptyArm { treatment: arm });
        } else if let Some(h) = horizon {
            if !arm_times.iter().any(|&t| t >= h) {
                warnings.push(Warning::NoneAtRisk {
                    treatment: arm,
                    horizon: h,
                });
            }
        }
    }

    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for r in dataset.records.iter().filter(|r| r.event.is_event()) {
        *counts.entry(r.time.to_bits()).or_default() += 1;
    }
    let (tied_times, extra) = counts
        .values()
        .filter(|&&c| c > 1)
        .fold((0, 0), |(t, e), &c| (t + 1, e + c - 1));
    if tied_times > 0 {
        warnings.push(Warning::TiedEventTimes { tied_times, extra });
    }

    for (j, name) in dataset.covariate_names.iter().enumerate() {
        let first = dataset.records[0].covariates[j];
        if dataset.records.iter().all(|r| r.covariates[j] == first) {
            warnings.push(Warning::ConstantCovariate { name: name.clone() });
        }
    }
    warnings
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Dataset> {
        read_csv(text.as_bytes(), &CsvSchema::default())
    }

    #[test]
    fn maps_fields_directly() {
        let ds = parse("time,event,treatment,w\n2.5,1,1,0.3\n4.0,2,0,0.7\n7.0,0,1,0.1\n").unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 1);
        assert_eq!(ds.records()[1].event, Event::Cause2);
        assert_eq!(ds.records()[2].event, Event::Censored);
        assert_eq!(ds.records()[0].covariates, vec![0.3]);
        assert_eq!(ds.n_treated(), 2);
    }

    #[test]
    fn bad_event_code_cites_row() {
        let text = "time,event,treatment\n1,0,0\n2,1,1\n3,2,0\n4,1,1\n5,3,0\n";
        match parse(text) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_named() {
        match parse("time,status,treatment\n1,0,0\n") {
            Err(Error::Schema { column }) => assert_eq!(column, "event"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_nonpositive_time_and_bad_treatment() {
        assert!(matches!(
            parse("time,event,treatment\n1,0,0\n0,1,1\n"),
            Err(Error::Parse { row: 2, .. })
        ));
        assert!(matches!(
            parse("time,event,treatment\n1,0,2\n"),
            Err(Error::Parse { row: 1, .. })
        ));
        assert!(matches!(
            parse("time,event,treatment\n1,x,1\n"),
            Err(Error::Parse { row: 1, .. })
        ));
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        assert!(matches!(parse("time,event,treatment\n"), Err(Error::EmptyDataset)));
    }

    #[test]
    fn explicit_covariate_selection() {
        let schema = CsvSchema {
            covariates: Some(vec!["b".into()]),
            ..CsvSchema::default()
        };
        let ds = read_csv("a,time,b,event,treatment\n9,1.5,2,1,0\n".as_bytes(), &schema).unwrap();
        assert_eq!(ds.covariate_names(), &["b".to_owned()]);
        assert_eq!(ds.records()[0].covariates, vec![2.0]);
    }

    #[test]
    fn validate_reports_empty_arm_and_ties() {
        let recs = (0..12)
            .map(|i| {
                let t = if i < 10 { 3.0 } else { 4.0 + i as f64 };
                Record::new(t, Event::Cause1, 1, vec![i as f64])
            })
            .collect();
        let ds = Dataset::new(recs, vec!["w".into()]).unwrap();
        let w = validate(&ds, None);
        assert!(w.contains(&Warning::EmptyArm { treatment: 0 }));
        assert!(w.contains(&Warning::TiedEventTimes {
            tied_times: 1,
            extra: 9
        }));
        assert_eq!(w[0].to_string(), "no treatment=0 subjects");
    }

    #[test]
    fn validate_flags_constant_covariate_and_horizon() {
        let recs = vec![
            Record::new(1.0, Event::Cause1, 0, vec![1.0]),
            Record::new(5.0, Event::Cause2, 1, vec![1.0]),
        ];
        let ds = Dataset::new(recs, vec!["c".into()]).unwrap();
        let w = validate(&ds, Some(3.0));
        assert!(w.contains(&Warning::NoneAtRisk {
            treatment: 0,
            horizon: 3.0
        }));
        assert!(w.contains(&Warning::ConstantCovariate { name: "c".into() }));
    }

    #[test]
    fn relabel_swaps_arms() {
        let recs = vec![
            Record::new(1.0, Event::Cause1, 0, vec![]),
            Record::new(2.0, Event::Cause2, 1, vec![]),
            Record::new(3.0, Event::Cause2, 1, vec![]),
        ];
        let ds = Dataset::new(recs, vec![]).unwrap();
        assert_eq!(ds.relabel_treatment().n_treated(), 1);
    }
}
