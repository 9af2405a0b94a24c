use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};

pub const TIME_INDEX: &str = "Time_index";
pub const LINK_ID: &str = "Link_id";
pub const ETH_DST: &str = "Eth_dst";
pub const SWITCH_ID: &str = "Switch_id";
pub const IN_PORT: &str = "In_port";
pub const OUT_PORT: &str = "Out_port";

/// Forecast target.
pub const TARGET: &str = "Packet_count";

pub const CATEGORICAL_COLUMNS: [&str; 5] = [LINK_ID, ETH_DST, SWITCH_ID, IN_PORT, OUT_PORT];

/// Required numeric columns; the first is the target. Together with the five
/// categorical identifiers these are the 23 features plus the target.
pub const NUMERIC_COLUMNS: [&str; 19] = [
    TARGET,
    "Byte_count",
    "Tx_packets",
    "Rx_packets",
    "Tx_bytes",
    "Rx_bytes",
    "Tx_bitrate",
    "Rx_bitrate",
    "Bandwidth",
    "Packet_loss",
    "Rx_bandwidth_utilization",
    "Tx_bandwidth_utilization",
    "Tx_avg_packet_size",
    "Rx_avg_packet_size",
    "Flow_speed",
    "Bandwidth_efficiency",
    "Latency",
    "Flow_count",
    "Duration_sec",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub time_index: i64,
    pub link_id: String,
    pub eth_dst: String,
    pub switch_id: String,
    pub in_port: String,
    pub out_port: String,
    /// One entry per [`Trace::columns`]; `None` marks a missing cell.
    pub values: Vec<Option<f64>>,
}

/// Per-link traffic records sorted by `(link_id, time_index)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    columns: Vec<String>,
    records: Vec<Record>,
}

impl Trace {
    /// Builds a trace, sorting records by `(link_id, time_index)`.
    pub fn new(columns: Vec<String>, mut records: Vec<Record>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.values.len() != columns.len() {
                return Err(Error::Data(format!(
                    "record {i} has {} values for {} columns",
                    r.values.len(),
                    columns.len()
                )));
            }
        }
        records.sort_by(|a, b| (&a.link_id, a.time_index).cmp(&(&b.link_id, b.time_index)));
        for w in records.windows(2) {
            if w[0].link_id == w[1].link_id && w[0].time_index == w[1].time_index {
                return Err(Error::Data(format!(
                    "duplicate time index {} for link {}",
                    w[0].time_index, w[0].link_id
                )));
            }
        }
        Ok(Self { columns, records })
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub(crate) fn records_mut(&mut self) -> &mut [Record] {
        &mut self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    /// Contiguous record ranges per link, in link order.
    pub fn link_groups(&self) -> Vec<(&str, Range<usize>)> {
        let mut out: Vec<(&str, Range<usize>)> = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            match out.last_mut() {
                Some((id, range)) if *id == r.link_id => range.end = i + 1,
                _ => out.push((&r.link_id, i..i + 1)),
            }
        }
        out
    }

    pub fn link_ids(&self) -> Vec<String> {
        self.link_groups().into_iter().map(|(id, _)| id.to_string()).collect()
    }

    /// Sorted distinct time indices.
    pub fn time_steps(&self) -> Vec<i64> {
        let set: BTreeSet<i64> = self.records.iter().map(|r| r.time_index).collect();
        set.into_iter().collect()
    }

    /// Column values for one link, in time order.
    pub fn series(&self, link_id: &str, column: &str) -> Result<Vec<Option<f64>>> {
        let c = self.column_index(column)?;
        Ok(self
            .records
            .iter()
            .filter(|r| r.link_id == link_id)
            .map(|r| r.values[c])
            .collect())
    }

    pub fn filter(&self, keep: impl Fn(&Record) -> bool) -> Trace {
        Trace {
            columns: self.columns.clone(),
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec![TIME_INDEX.to_string()];
        header.extend(CATEGORICAL_COLUMNS.iter().map(|c| c.to_string()));
        header.extend(self.columns.iter().cloned());
        out.write_record(&header)?;
        let mut row = Vec::with_capacity(header.len());
        for r in &self.records {
            row.clear();
            row.push(r.time_index.to_string());
            row.extend([&r.link_id, &r.eth_dst, &r.switch_id, &r.in_port, &r.out_port].map(|s| s.to_string()));
            row.extend(r.values.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            out.write_record(&row)?;
        }
        out.flush().map_err(|e| Error::io("<trace csv>", e))?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Reads a trace CSV. Every required column must be present; additional
/// columns are kept as extra numeric columns.
pub fn read_trace<R: Read>(reader: R) -> Result<Trace> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let time_col = find(TIME_INDEX)?;
    let cat_cols = CATEGORICAL_COLUMNS.map(|c| find(c));
    let cat_cols: Vec<usize> = cat_cols.into_iter().collect::<Result<_>>()?;
    let mut numeric: Vec<(String, usize)> = NUMERIC_COLUMNS
        .iter()
        .map(|c| find(c).map(|i| (c.to_string(), i)))
        .collect::<Result<_>>()?;
    for (i, h) in header.iter().enumerate() {
        if i != time_col && !cat_cols.contains(&i) && !numeric.iter().any(|(_, j)| *j == i) {
            numeric.push((h.clone(), i));
        }
    }

    let mut records = Vec::new();
    for (row_idx, row) in rdr.records().enumerate() {
        let row = row?;
        let line = row_idx + 2;
        let cell = |i: usize| row.get(i).unwrap_or("");
        let time_index = cell(time_col).parse::<i64>().map_err(|e| Error::Parse {
            row: line,
            column: TIME_INDEX.into(),
            message: e.to_string(),
        })?;
        let mut values = Vec::with_capacity(numeric.len());
        for (name, i) in &numeric {
            values.push(parse_cell(cell(*i)).map_err(|message| Error::Parse {
                row: line,
                column: name.clone(),
                message,
            })?);
        }
        records.push(Record {
            time_index,
            link_id: cell(cat_cols[0]).to_string(),
            eth_dst: cell(cat_cols[1]).to_string(),
            switch_id: cell(cat_cols[2]).to_string(),
            in_port: cell(cat_cols[3]).to_string(),
            out_port: cell(cat_cols[4]).to_string(),
            values,
        });
    }
    Trace::new(numeric.into_iter().map(|(n, _)| n).collect(), records)
}

fn parse_cell(s: &str) -> std::result::Result<Option<f64>, String> {
    if s.is_empty() || s.eq_ignore_ascii_case("nan") || s.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    let v: f64 = s.parse().map_err(|_| format!("cannot parse `{s}` as a number"))?;
    if v.is_finite() {
        Ok(Some(v))
    } else {
        Ok(None)
    }
}

pub fn load_trace(path: &Path) -> Result<Trace> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_trace(std::io::BufReader::new(file))
}
