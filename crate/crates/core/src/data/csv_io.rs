use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use super::{is_reserved, TrialDataset, EQ5D0};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const REQUIRED: [&str; 5] = ["z", "d", "y1", "y2", EQ5D0];

/// Maps logical names (`z`, `d`, `y1`, `y2`, `eq5d0`, extra covariates) to CSV
/// header names, plus the strings treated as missing.
///
/// Logical names without an explicit mapping default to a column of the same
/// name. Columns that are neither mapped nor named like a required field are
/// loaded as extra covariates under their header name.
#[derive(Debug, Clone)]
pub struct Schema {
    mapping: IndexMap<String, String>,
    missing: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            mapping: IndexMap::new(),
            missing: vec![String::new(), "NA".to_string()],
        }
    }
}

impl Schema {
    /// Parse `logical=column` pairs separated by commas, e.g.
    /// `z=arm,d=received,y1=total_cost,eq5d0=eq5d_base`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut schema = Self::default();
        for pair in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (logical, column) = pair
                .split_once('=')
                .ok_or_else(|| Error::Schema(format!("expected logical=column, got '{pair}'")))?;
            schema = schema.map(logical.trim(), column.trim())?;
        }
        Ok(schema)
    }

    pub fn map(mut self, logical: &str, column: &str) -> Result<Self> {
        if self.mapping.contains_key(logical) {
            return Err(Error::Schema(format!(
                "logical name '{logical}' mapped twice"
            )));
        }
        if self.mapping.values().any(|c| c == column) {
            return Err(Error::Schema(format!("column '{column}' mapped twice")));
        }
        self.mapping.insert(logical.to_string(), column.to_string());
        Ok(self)
    }

    /// Replace the set of missing-value sentinels (after trimming).
    pub fn with_missing(mut self, sentinels: &[&str]) -> Self {
        self.missing = sentinels.iter().map(|s| s.to_string()).collect();
        self
    }

    fn column_for<'a>(&'a self, logical: &'a str) -> &'a str {
        self.mapping
            .get(logical)
            .map(String::as_str)
            .unwrap_or(logical)
    }

    fn is_missing(&self, cell: &str) -> bool {
        self.missing.iter().any(|m| m == cell)
    }
}

/// Load a trial CSV from disk.
pub fn load_csv<T: Scalar>(path: impl AsRef<Path>, schema: &Schema) -> Result<TrialDataset<T>> {
    let file = std::fs::File::open(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    read_csv(file, schema)
}

pub fn read_csv<T: Scalar, R: Read>(reader: R, schema: &Schema) -> Result<TrialDataset<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let index: HashMap<&str, usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.as_str(), i))
        .collect();
    if index.len() != headers.len() {
        return Err(Error::Schema("duplicate column names in header".into()));
    }

    let mut required_idx = [0usize; 5];
    for (slot, logical) in required_idx.iter_mut().zip(REQUIRED) {
        let col = schema.column_for(logical);
        *slot = *index.get(col).ok_or_else(|| {
            Error::Schema(format!(
                "column '{col}' (for '{logical}') not found in header"
            ))
        })?;
    }
    // explicit covariate mappings, then every remaining header
    let mut cov_cols: IndexMap<String, usize> = IndexMap::new();
    for (logical, col) in &schema.mapping {
        if REQUIRED.contains(&logical.as_str()) {
            continue;
        }
        if is_reserved(logical) {
            return Err(Error::Schema(format!(
                "'{logical}' cannot be a covariate name"
            )));
        }
        let i = *index
            .get(col.as_str())
            .ok_or_else(|| Error::Schema(format!("column '{col}' (for '{logical}') not found")))?;
        cov_cols.insert(logical.clone(), i);
    }
    for (i, h) in headers.iter().enumerate() {
        let used = required_idx.contains(&i) || cov_cols.values().any(|&j| j == i);
        let taken = schema.mapping.values().any(|c| c == h);
        if !used && !taken && !is_reserved(h) && !cov_cols.contains_key(h.as_str()) {
            cov_cols.insert(h.clone(), i);
        }
    }

    let mut z = Vec::new();
    let mut d = Vec::new();
    let mut y1 = Vec::new();
    let mut y2 = Vec::new();
    let mut eq = Vec::new();
    let mut covs: IndexMap<String, Vec<Option<T>>> =
        cov_cols.keys().map(|k| (k.clone(), Vec::new())).collect();

    for (row_no, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = row_no + 1;
        let cell = |i: usize| rec.get(i).unwrap_or("");
        z.push(parse_binary(cell(required_idx[0]), "z", row, schema)?);
        d.push(parse_binary(cell(required_idx[1]), "d", row, schema)?);
        y1.push(parse_real(cell(required_idx[2]), "y1", row, schema)?);
        y2.push(parse_real(cell(required_idx[3]), "y2", row, schema)?);
        eq.push(parse_real(cell(required_idx[4]), EQ5D0, row, schema)?);
        for (name, &i) in &cov_cols {
            covs[name].push(parse_real(cell(i), name, row, schema)?);
        }
    }
    if z.is_empty() {
        return Err(Error::EmptySample("CSV contains no data rows".into()));
    }
    TrialDataset::new(z, d, y1, y2, eq, covs)
}

fn parse_binary(cell: &str, name: &str, row: usize, schema: &Schema) -> Result<bool> {
    if schema.is_missing(cell) {
        return Err(Error::Validation {
            row,
            message: format!("'{name}' must be fully observed"),
        });
    }
    match cell.parse::<f64>() {
        Ok(v) if v == 0.0 => Ok(false),
        Ok(v) if v == 1.0 => Ok(true),
        _ => Err(Error::Validation {
            row,
            message: format!("'{name}' must be 0 or 1, found '{cell}'"),
        }),
    }
}

fn parse_real<T: Scalar>(cell: &str, name: &str, row: usize, schema: &Schema) -> Result<Option<T>> {
    if schema.is_missing(cell) {
        return Ok(None);
    }
    let v: f64 = cell.parse().map_err(|_| Error::Validation {
        row,
        message: format!("'{name}' is not a number: '{cell}'"),
    })?;
    if !v.is_finite() {
        return Err(Error::Validation {
            row,
            message: format!("'{name}' is not finite: '{cell}'"),
        });
    }
    Ok(Some(T::lit(v)))
}

/// Write a dataset with logical column names; missing cells are empty.
///
/// Values are printed in shortest round-trip form, so reading the file back
/// with the default schema reproduces every value bit for bit.
pub fn write_csv<T: Scalar, W: Write>(ds: &TrialDataset<T>, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = REQUIRED.to_vec();
    header.extend(ds.covariates().keys().map(String::as_str));
    w.write_record(&header)?;
    let fmt = |v: Option<T>| v.map(|x| format!("{x}")).unwrap_or_default();
    let b = |x: bool| if x { "1".to_string() } else { "0".to_string() };
    for i in 0..ds.len() {
        let mut rec = vec![
            b(ds.z()[i]),
            b(ds.d()[i]),
            fmt(ds.y1()[i]),
            fmt(ds.y2()[i]),
            fmt(ds.eq5d0()[i]),
        ];
        rec.extend(ds.covariates().values().map(|c| fmt(c[i])));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const FOUR_ROWS: &str = "arm,recv,cost,qaly,eq5d0,age\n\
        1,1,100,0.9,0.7,50\n\
        1,0,200,0.8,0.6,NA\n\
        0,0,,0.7,0.8,40\n\
        0,1,50,0.95,,61\n";

    fn schema() -> Schema {
        Schema::parse("z=arm,d=recv,y1=cost,y2=qaly").unwrap()
    }

    #[test]
    fn empty_cost_cell_sets_indicator() {
        let ds: TrialDataset = read_csv(FOUR_ROWS.as_bytes(), &schema()).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.r1(), vec![true, true, false, true]);
        assert_eq!(ds.r0(), vec![true, true, true, false]);
        assert_eq!(ds.covariates()["age"][1], None);
    }

    #[test]
    fn non_binary_assignment_names_row() {
        let text = "z,d,y1,y2,eq5d0\n1,1,1,1,1\n2,0,1,1,1\n";
        let err = read_csv::<f64, _>(text.as_bytes(), &Schema::default()).unwrap_err();
        match err {
            Error::Validation { row, message } => {
                assert_eq!(row, 2);
                assert!(message.contains("'z'"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_receipt_rejected() {
        let text = "z,d,y1,y2,eq5d0\n1,,1,1,1\n";
        assert!(matches!(
            read_csv::<f64, _>(text.as_bytes(), &Schema::default()),
            Err(Error::Validation { row: 1, .. })
        ));
    }

    #[test]
    fn missing_column_is_schema_error() {
        let text = "z,d,y1,eq5d0\n1,1,1,1\n";
        assert!(matches!(
            read_csv::<f64, _>(text.as_bytes(), &Schema::default()),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn complete_file_has_all_indicators() {
        let mut text = String::from("z,d,y1,y2,eq5d0\n");
        for i in 0..10 {
            text.push_str(&format!(
                "{},{},{}.5,0.{},0.{}\n",
                i % 2,
                i % 2,
                i,
                i,
                9 - i
            ));
        }
        let ds: TrialDataset = read_csv(text.as_bytes(), &Schema::default()).unwrap();
        assert!(ds.r0().iter().chain(&ds.r1()).chain(&ds.r2()).all(|&r| r));
        assert!(super::super::summarize_patterns(&ds).monotone);
    }

    #[test]
    fn custom_sentinel() {
        let text = "z,d,y1,y2,eq5d0\n1,1,-999,1,1\n";
        let s = Schema::default().with_missing(&["-999"]);
        let ds: TrialDataset = read_csv(text.as_bytes(), &s).unwrap();
        assert_eq!(ds.y1()[0], None);
    }

    #[test]
    fn write_then_read_round_trips() {
        let ds: TrialDataset = read_csv(FOUR_ROWS.as_bytes(), &schema()).unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let back: TrialDataset = read_csv(buf.as_slice(), &Schema::default()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn duplicate_mapping_rejected() {
        assert!(Schema::parse("z=a,d=a").is_err());
        assert!(Schema::parse("z=a,z=b").is_err());
        assert!(Schema::parse("za").is_err());
    }
}
