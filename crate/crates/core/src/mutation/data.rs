//! Table corruptions over delimited data files.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{MutationRates, Operator};
use crate::error::{Error, Result};

const MISSING: &[&str] = &["", "NA", "N/A", "NaN", "nan", "null", "NULL", "None"];

fn is_missing(cell: &str) -> bool {
    MISSING.contains(&cell.trim())
}

/// A mutated table and a description of what changed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataMutation {
    pub bytes: Vec<u8>,
    pub site: String,
}

struct Table {
    delimiter: u8,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn parse(bytes: &[u8]) -> Result<Table> {
        let delimiter = sniff_delimiter(bytes);
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .flexible(false)
            .from_reader(bytes);
        let header = reader.headers()?.iter().map(String::from).collect();
        let rows = reader
            .records()
            .map(|r| r.map(|rec| rec.iter().map(String::from).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
        Ok(Table {
            delimiter,
            header,
            rows,
        })
    }

    fn write(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new()
            .delimiter(self.delimiter)
            .from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.into_inner()
            .map_err(|e| Error::Config(format!("csv writer: {e}")))
    }

    fn column(&self, c: usize) -> impl Iterator<Item = &str> {
        self.rows.iter().map(move |r| r[c].as_str())
    }

    fn is_numeric(&self, c: usize) -> bool {
        let mut any = false;
        for cell in self.column(c) {
            if is_missing(cell) {
                continue;
            }
            if cell.trim().parse::<f64>().is_err() {
                return false;
            }
            any = true;
        }
        any
    }

    fn is_integer(&self, c: usize) -> bool {
        self.column(c)
            .filter(|v| !is_missing(v))
            .all(|v| v.trim().parse::<i64>().is_ok())
    }
}

fn sniff_delimiter(bytes: &[u8]) -> u8 {
    let first = bytes.split(|b| *b == b'\n').next().unwrap_or(&[]);
    [b',', b'\t', b';', b'|']
        .into_iter()
        .max_by_key(|d| (first.iter().filter(|b| *b == d).count(), *d == b','))
        .unwrap_or(b',')
}

/// Label column: first header matching a configured name (case-insensitive),
/// else the last column. The flag tells whether the match was by name.
pub fn detect_label_column(header: &[String], names: &[String]) -> Option<(usize, bool)> {
    for name in names {
        if let Some(i) = header
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
        {
            return Some((i, true));
        }
    }
    (!header.is_empty()).then(|| (header.len() - 1, false))
}

fn row_count(rate: f64, rows: usize) -> usize {
    ((rate * rows as f64).floor() as usize).max(1)
}

fn sorted_sample(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut v = sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

fn format_float(v: f64) -> String {
    format!("{v:?}")
}

pub fn mutate_table(
    bytes: &[u8],
    op: Operator,
    seed: u64,
    rates: &MutationRates,
) -> Result<DataMutation> {
    let inapplicable = |reason: &str| Error::inapplicable(op, reason);
    let mut t = Table::parse(bytes)?;
    if t.rows.is_empty() {
        return Err(inapplicable("table has no data rows"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_rows = t.rows.len();
    let n_cols = t.header.len();
    let label = detect_label_column(&t.header, &rates.label_names);
    let site = match op {
        Operator::AddOutliers => {
            let named_label = label.filter(|(_, by_name)| *by_name).map(|(i, _)| i);
            let cols: Vec<usize> = (0..n_cols)
                .filter(|c| Some(*c) != named_label && t.is_numeric(*c))
                .collect();
            if cols.is_empty() {
                return Err(inapplicable("no numeric column"));
            }
            let ints: Vec<bool> = cols.iter().map(|c| t.is_integer(*c)).collect();
            let rows = sorted_sample(&mut rng, n_rows, row_count(rates.outlier_row_rate, n_rows));
            let (lo, hi) = rates.outlier_factor;
            for &r in &rows {
                for (&c, &int) in cols.iter().zip(&ints) {
                    let cell = &t.rows[r][c];
                    if is_missing(cell) {
                        continue;
                    }
                    let factor: f64 = rng.gen_range(lo..=hi);
                    t.rows[r][c] = if int {
                        let v: i64 = cell.trim().parse().expect("integer column");
                        ((v as f64) * factor).round().to_string()
                    } else {
                        let v: f64 = cell.trim().parse().expect("numeric column");
                        format_float(v * factor)
                    };
                }
            }
            format!("rows {rows:?}, columns {:?}", names(&t.header, &cols))
        }
        Operator::RepeatData => {
            let k = row_count(rates.repeat_row_rate, n_rows);
            if n_rows <= k {
                return Err(inapplicable("too few rows to copy from"));
            }
            let targets = sorted_sample(&mut rng, n_rows, k);
            let sources: Vec<usize> = (0..n_rows).filter(|r| !targets.contains(r)).collect();
            let original = t.rows.clone();
            let mut pairs = Vec::new();
            for &dst in &targets {
                let src = sources[rng.gen_range(0..sources.len())];
                t.rows[dst] = original[src].clone();
                pairs.push((dst, src));
            }
            format!("rows overwritten (dst, src) {pairs:?}")
        }
        Operator::AddNulls => {
            let k = (rates.null_column_rate * n_cols as f64).floor() as usize;
            if k == 0 {
                return Err(inapplicable(&format!(
                    "{n_cols} columns at rate {} select no column",
                    rates.null_column_rate
                )));
            }
            let cols = sorted_sample(&mut rng, n_cols, k);
            let mut touched = Vec::new();
            for &c in &cols {
                let present: Vec<usize> = (0..n_rows).filter(|r| !is_missing(&t.rows[*r][c])).collect();
                if present.is_empty() {
                    continue;
                }
                let m = row_count(rates.null_cell_rate, n_rows).min(present.len());
                for i in sorted_sample(&mut rng, present.len(), m) {
                    t.rows[present[i]][c] = String::new();
                }
                touched.push(c);
            }
            if touched.is_empty() {
                return Err(inapplicable("selected columns are already empty"));
            }
            format!("columns {:?}", names(&t.header, &touched))
        }
        Operator::ModifyLabels => {
            let (c, _) = label.ok_or_else(|| inapplicable("no label column"))?;
            let values: BTreeSet<String> = t
                .column(c)
                .filter(|v| !is_missing(v))
                .map(String::from)
                .collect();
            if values.len() < 2 {
                return Err(inapplicable("label column has fewer than two values"));
            }
            let values: Vec<String> = values.into_iter().collect();
            let labelled: Vec<usize> = (0..n_rows).filter(|r| !is_missing(&t.rows[*r][c])).collect();
            let k = row_count(rates.label_row_rate, n_rows).min(labelled.len());
            let mut rows = Vec::new();
            for i in sorted_sample(&mut rng, labelled.len(), k) {
                let r = labelled[i];
                let others: Vec<&String> = values.iter().filter(|v| **v != t.rows[r][c]).collect();
                t.rows[r][c] = others[rng.gen_range(0..others.len())].clone();
                rows.push(r);
            }
            format!("label column {:?}, rows {rows:?}", t.header[c])
        }
        Operator::DataShift => {
            let (c, _) = label.ok_or_else(|| inapplicable("no label column"))?;
            let numeric = t.is_numeric(c);
            let key = |row: &Vec<String>| row[c].clone();
            let before = t.rows.clone();
            t.rows.sort_by(|a, b| compare_cells(&key(a), &key(b), numeric));
            if t.rows == before {
                return Err(inapplicable("rows already ordered by label"));
            }
            format!("rows sorted by {:?}", t.header[c])
        }
        other => return Err(Error::inapplicable(other, "not a data operator")),
    };
    Ok(DataMutation {
        bytes: t.write()?,
        site,
    })
}

fn compare_cells(a: &str, b: &str, numeric: bool) -> Ordering {
    if numeric {
        let pa = a.trim().parse::<f64>().ok();
        let pb = b.trim().parse::<f64>().ok();
        match (pa, pb) {
            (Some(x), Some(y)) => x.total_cmp(&y),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        }
    } else {
        a.cmp(b)
    }
}

fn names(header: &[String], cols: &[usize]) -> Vec<String> {
    cols.iter().map(|c| header[*c].clone()).collect()
}
