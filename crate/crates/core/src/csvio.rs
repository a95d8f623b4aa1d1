//! CSV persistence: comma-separated, header row, LF line endings, floats at
//! 17 significant digits so every value parses back to the same bits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{ClientPartition, SignalPatch, SyntheticSample};
use crate::error::{Error, Result};
use crate::model::CnnWeights;
use crate::Sign;

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Accumulates rows of a CSV document in memory.
#[derive(Clone, Debug, Default)]
pub struct Table {
    text: String,
    columns: usize,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        let mut t = Table {
            text: String::new(),
            columns: header.len(),
        };
        t.push_raw(header.iter().map(|s| s.as_ref().to_string()));
        t
    }

    fn push_raw(&mut self, fields: impl Iterator<Item = String>) {
        let mut first = true;
        let mut count = 0;
        for f in fields {
            if !first {
                self.text.push(',');
            }
            self.text.push_str(&f);
            first = false;
            count += 1;
        }
        debug_assert_eq!(count, self.columns, "row width must match header");
        self.text.push('\n');
    }

    pub fn row(&mut self, fields: Vec<String>) {
        self.push_raw(fields.into_iter());
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn into_string(self) -> String {
        self.text
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, &self.text).map_err(|e| Error::io(path, e))
    }
}

/// Header row plus data rows of a parsed CSV document.
pub struct Parsed {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn parse(text: &str, origin: &str) -> Result<Parsed> {
    let mut lines = text.lines().filter(|l| !l.is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::parse(origin, "missing header"))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let row: Vec<String> = line.split(',').map(str::to_string).collect();
        if row.len() != header.len() {
            return Err(Error::parse(
                origin,
                format!("row {} has {} fields, header has {}", n + 1, row.len(), header.len()),
            ));
        }
        rows.push(row);
    }
    Ok(Parsed { header, rows })
}

pub fn read(path: &Path) -> Result<Parsed> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, &path.display().to_string())
}

pub(crate) fn field<T: std::str::FromStr>(value: &str, column: &str, origin: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::parse(origin, format!("bad value {value:?} in column {column}")))
}

fn parse_sign(value: &str, origin: &str) -> Result<Sign> {
    let v: i8 = field(value, "sign", origin)?;
    Sign::from_i8(v).ok_or_else(|| Error::parse(origin, format!("sign must be 1 or -1, got {v}")))
}

/// Dataset with client assignment: `sample_id, y, signal_patch_index,
/// client_id`, then `x1_0..x1_{d-1}` and `x2_0..x2_{d-1}`.
pub fn dataset_table(samples: &[SyntheticSample], partition: &ClientPartition) -> Table {
    let d = samples.first().map_or(0, |s| s.d());
    let mut header: Vec<String> = ["sample_id", "y", "signal_patch_index", "client_id"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for p in 1..=2 {
        header.extend((0..d).map(|c| format!("x{p}_{c}")));
    }
    let owner = partition.client_of();
    let mut t = Table::new(&header);
    for (id, s) in samples.iter().enumerate() {
        let mut row = vec![
            id.to_string(),
            s.y.to_string(),
            s.signal_patch.index().to_string(),
            owner[id].to_string(),
        ];
        for patch in &s.patches {
            row.extend(patch.iter().map(|&v| fmt_f64(v)));
        }
        t.row(row);
    }
    t
}

/// Inverse of [`dataset_table`].
pub fn parse_dataset(parsed: &Parsed, origin: &str) -> Result<(Vec<SyntheticSample>, ClientPartition)> {
    let width = parsed.header.len();
    if width < 4 || !(width - 4).is_multiple_of(2) {
        return Err(Error::parse(origin, "dataset needs 4 id columns plus 2d patch columns"));
    }
    let d = (width - 4) / 2;
    let mut samples = Vec::with_capacity(parsed.rows.len());
    let mut owners = Vec::with_capacity(parsed.rows.len());
    for (n, row) in parsed.rows.iter().enumerate() {
        let id: usize = field(&row[0], "sample_id", origin)?;
        if id != n {
            return Err(Error::parse(origin, format!("sample_id {id} out of order at row {}", n + 1)));
        }
        let y = parse_sign(&row[1], origin)?;
        let idx: u8 = field(&row[2], "signal_patch_index", origin)?;
        let patch = SignalPatch::from_index(idx)
            .ok_or_else(|| Error::parse(origin, format!("signal_patch_index must be 1 or 2, got {idx}")))?;
        owners.push(field::<usize>(&row[3], "client_id", origin)?);
        let values: Vec<f64> = row[4..]
            .iter()
            .map(|v| field(v, "patch", origin))
            .collect::<Result<_>>()?;
        let (x1, x2) = values.split_at(d);
        let (signal, noise) = match patch {
            SignalPatch::First => (x1, x2),
            SignalPatch::Second => (x2, x1),
        };
        let mu: Vec<f64> = signal.iter().map(|v| y.value() * v).collect();
        let sample = SyntheticSample::from_parts(y, patch, &mu, noise.to_vec())?;
        if sample.signal() != signal {
            return Err(Error::parse(origin, format!("row {}: signal patch is not y * mu", n + 1)));
        }
        samples.push(sample);
    }
    let clients = owners.iter().max().map_or(0, |&k| k + 1);
    let mut assignment = vec![Vec::new(); clients];
    for (id, &k) in owners.iter().enumerate() {
        assignment[k].push(id);
    }
    let labels: Vec<Sign> = samples.iter().map(|s| s.y).collect();
    let partition = ClientPartition::from_assignment(assignment, &labels)?;
    Ok((samples, partition))
}

/// Weights as `j, r, w_0..w_{d-1}` rows.
pub fn weights_table(w: &CnnWeights) -> Table {
    let mut header = vec!["j".to_string(), "r".to_string()];
    header.extend((0..w.d()).map(|c| format!("w_{c}")));
    let mut t = Table::new(&header);
    for j in Sign::BOTH {
        for r in 0..w.m() {
            let mut row = vec![j.to_string(), r.to_string()];
            row.extend(w.filter(j, r).iter().map(|&v| fmt_f64(v)));
            t.row(row);
        }
    }
    t
}

pub fn parse_weights(parsed: &Parsed, origin: &str) -> Result<CnnWeights> {
    if parsed.header.len() < 3 {
        return Err(Error::parse(origin, "weights need j, r and at least one value column"));
    }
    let rows = parsed.rows.len();
    if rows == 0 || !rows.is_multiple_of(2) {
        return Err(Error::parse(origin, format!("expected 2m filter rows, got {rows}")));
    }
    let m = rows / 2;
    let mut filters = vec![Vec::new(); rows];
    let mut seen = vec![false; rows];
    for row in &parsed.rows {
        let j = parse_sign(&row[0], origin)?;
        let r: usize = field(&row[1], "r", origin)?;
        if r >= m {
            return Err(Error::parse(origin, format!("filter index {r} out of range for m = {m}")));
        }
        let slot = j.index() * m + r;
        if std::mem::replace(&mut seen[slot], true) {
            return Err(Error::parse(origin, format!("duplicate filter ({j}, {r})")));
        }
        filters[slot] = row[2..]
            .iter()
            .map(|v| field(v, "w", origin))
            .collect::<Result<_>>()?;
    }
    CnnWeights::from_filters(m, filters)
}

pub fn read_weights(path: &Path) -> Result<CnnWeights> {
    parse_weights(&read(path)?, &path.display().to_string())
}

pub fn read_dataset(path: &Path) -> Result<(Vec<SyntheticSample>, ClientPartition)> {
    parse_dataset(&read(path)?, &path.display().to_string())
}

/// `key=value` lines, one per entry, in the given order.
pub fn key_values(entries: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in entries {
        let _ = writeln!(s, "{k}={v}");
    }
    s
}
