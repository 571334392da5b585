//! Immutable columnar datasets, CSV ingestion and column-role validation.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GrfError, Result};

/// Non-feature column roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Outcome,
    Treatment,
    Instrument,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Outcome => "outcome",
            Role::Treatment => "treatment",
            Role::Instrument => "instrument",
        })
    }
}

/// The estimator families, used to check which columns a fit requires.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Regression,
    Quantile,
    PartialEffect,
    Instrumental,
}

impl ModelKind {
    pub fn required_roles(self) -> &'static [Role] {
        match self {
            ModelKind::Regression | ModelKind::Quantile => &[Role::Outcome],
            ModelKind::PartialEffect => &[Role::Outcome, Role::Treatment],
            ModelKind::Instrumental => &[Role::Outcome, Role::Treatment, Role::Instrument],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Regression => "regression",
            ModelKind::Quantile => "quantile",
            ModelKind::PartialEffect => "partial_effect",
            ModelKind::Instrumental => "instrumental",
        }
    }
}

/// Binds CSV header names to dataset roles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnRoles {
    pub feature_names: Vec<String>,
    pub outcome_name: Option<String>,
    pub treatment_name: Option<String>,
    pub instrument_name: Option<String>,
}

impl ColumnRoles {
    pub fn new<S: Into<String>>(features: impl IntoIterator<Item = S>) -> Self {
        ColumnRoles {
            feature_names: features.into_iter().map(Into::into).collect(),
            outcome_name: None,
            treatment_name: None,
            instrument_name: None,
        }
    }

    pub fn outcome(mut self, name: impl Into<String>) -> Self {
        self.outcome_name = Some(name.into());
        self
    }

    pub fn treatment(mut self, name: impl Into<String>) -> Self {
        self.treatment_name = Some(name.into());
        self
    }

    pub fn instrument(mut self, name: impl Into<String>) -> Self {
        self.instrument_name = Some(name.into());
        self
    }

    fn role_names(&self) -> impl Iterator<Item = &String> {
        self.outcome_name
            .iter()
            .chain(self.treatment_name.iter())
            .chain(self.instrument_name.iter())
    }

    fn check_distinct(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for name in self.feature_names.iter().chain(self.role_names()) {
            if !seen.insert(name.as_str()) {
                return Err(GrfError::InvalidOptions(format!(
                    "column `{name}` is assigned to more than one role"
                )));
            }
        }
        if self.feature_names.is_empty() {
            return Err(GrfError::InvalidOptions(
                "no feature columns selected".into(),
            ));
        }
        Ok(())
    }
}

/// Samples with role-tagged columns. Features are stored column-major.
///
/// A `Dataset` is never mutated after construction; the `with_*` builders
/// consume the value and return a new one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    n: usize,
    p: usize,
    feature_names: Vec<String>,
    features: Vec<f64>,
    outcome: Option<Vec<f64>>,
    treatment: Option<Vec<f64>>,
    instrument: Option<Vec<f64>>,
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(GrfError::InvalidData(format!(
            "{what} has non-finite value at sample {i}"
        )));
    }
    Ok(())
}

impl Dataset {
    /// Build from feature columns (`columns[j][i]` is feature `j` of sample `i`).
    pub fn from_columns(columns: Vec<Vec<f64>>) -> Result<Self> {
        let p = columns.len();
        if p == 0 {
            return Err(GrfError::InvalidData(
                "dataset needs at least one feature".into(),
            ));
        }
        let n = columns[0].len();
        if n == 0 {
            return Err(GrfError::InvalidData(
                "dataset needs at least one sample".into(),
            ));
        }
        let mut features = Vec::with_capacity(n * p);
        for (j, col) in columns.iter().enumerate() {
            if col.len() != n {
                return Err(GrfError::LengthMismatch {
                    left: n,
                    right: col.len(),
                });
            }
            check_finite(col, &format!("feature {j}"))?;
            features.extend_from_slice(col);
        }
        Ok(Dataset {
            n,
            p,
            feature_names: (1..=p).map(|j| format!("x{j}")).collect(),
            features,
            outcome: None,
            treatment: None,
            instrument: None,
        })
    }

    /// Build from row vectors of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        let mut columns = vec![Vec::with_capacity(rows.len()); p];
        for row in rows {
            if row.len() != p {
                return Err(GrfError::LengthMismatch {
                    left: p,
                    right: row.len(),
                });
            }
            for (col, &v) in columns.iter_mut().zip(row) {
                col.push(v);
            }
        }
        Self::from_columns(columns)
    }

    pub fn with_feature_names<S: Into<String>>(
        mut self,
        names: impl IntoIterator<Item = S>,
    ) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() != self.p {
            return Err(GrfError::LengthMismatch {
                left: self.p,
                right: names.len(),
            });
        }
        self.feature_names = names;
        Ok(self)
    }

    fn checked_column(&self, values: Vec<f64>, role: Role) -> Result<Vec<f64>> {
        if values.len() != self.n {
            return Err(GrfError::LengthMismatch {
                left: self.n,
                right: values.len(),
            });
        }
        check_finite(&values, &role.to_string())?;
        Ok(values)
    }

    pub fn with_outcome(mut self, y: Vec<f64>) -> Result<Self> {
        self.outcome = Some(self.checked_column(y, Role::Outcome)?);
        Ok(self)
    }

    pub fn with_treatment(mut self, w: Vec<f64>) -> Result<Self> {
        self.treatment = Some(self.checked_column(w, Role::Treatment)?);
        Ok(self)
    }

    pub fn with_instrument(mut self, z: Vec<f64>) -> Result<Self> {
        self.instrument = Some(self.checked_column(z, Role::Instrument)?);
        Ok(self)
    }

    /// Replace (or add) the column bound to `role`.
    pub fn with_role(self, role: Role, values: Vec<f64>) -> Result<Self> {
        match role {
            Role::Outcome => self.with_outcome(values),
            Role::Treatment => self.with_treatment(values),
            Role::Instrument => self.with_instrument(values),
        }
    }

    /// Copy of the features with `values` as the only (outcome) column.
    pub fn regression_view(&self, values: Vec<f64>) -> Result<Self> {
        Dataset {
            outcome: None,
            treatment: None,
            instrument: None,
            ..self.clone()
        }
        .with_outcome(values)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    #[inline]
    pub fn feature(&self, i: usize, j: usize) -> f64 {
        self.features[j * self.n + i]
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.features[j * self.n..(j + 1) * self.n]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.p).map(|j| self.feature(i, j)).collect()
    }

    pub fn outcome(&self) -> Option<&[f64]> {
        self.outcome.as_deref()
    }

    pub fn treatment(&self) -> Option<&[f64]> {
        self.treatment.as_deref()
    }

    pub fn instrument(&self) -> Option<&[f64]> {
        self.instrument.as_deref()
    }

    pub fn role(&self, role: Role) -> Option<&[f64]> {
        match role {
            Role::Outcome => self.outcome(),
            Role::Treatment => self.treatment(),
            Role::Instrument => self.instrument(),
        }
    }

    /// The column for `role`, or `MissingRole`.
    pub fn require(&self, role: Role) -> Result<&[f64]> {
        self.role(role).ok_or(GrfError::MissingRole(role))
    }

    /// Re-check the structural invariants, e.g. after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 {
            return Err(GrfError::InvalidData("empty dataset".into()));
        }
        if self.features.len() != self.n * self.p || self.feature_names.len() != self.p {
            return Err(GrfError::InvalidData(
                "feature matrix has inconsistent shape".into(),
            ));
        }
        check_finite(&self.features, "feature matrix")?;
        for role in [Role::Outcome, Role::Treatment, Role::Instrument] {
            if let Some(col) = self.role(role) {
                if col.len() != self.n {
                    return Err(GrfError::LengthMismatch {
                        left: self.n,
                        right: col.len(),
                    });
                }
                check_finite(col, &role.to_string())?;
            }
        }
        Ok(())
    }
}

/// Succeeds iff `data` carries every column `kind` needs.
pub fn validate_for_model(data: &Dataset, kind: ModelKind) -> Result<()> {
    for &role in kind.required_roles() {
        data.require(role)?;
    }
    Ok(())
}

/// Column names from the header line of a CSV file.
pub fn csv_header(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(GrfError::EmptyFile);
    }
    Ok(headers)
}

/// Load a headered, comma-separated numeric file.
pub fn load_csv(path: impl AsRef<Path>, roles: &ColumnRoles) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, roles)
}

pub fn read_csv<R: Read>(reader: R, roles: &ColumnRoles) -> Result<Dataset> {
    roles.check_distinct()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(GrfError::EmptyFile);
    }
    let position = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| GrfError::MissingColumn(name.to_string()))
    };
    let feature_pos = roles
        .feature_names
        .iter()
        .map(|name| position(name))
        .collect::<Result<Vec<_>>>()?;
    let role_pos = [
        roles.outcome_name.as_deref().map(position).transpose()?,
        roles.treatment_name.as_deref().map(position).transpose()?,
        roles.instrument_name.as_deref().map(position).transpose()?,
    ];

    let mut features = vec![Vec::new(); feature_pos.len()];
    let mut role_cols: [Vec<f64>; 3] = Default::default();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let cell = |pos: usize| -> Result<f64> {
            let raw = record.get(pos).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| GrfError::NonNumericCell {
                    row: r + 1,
                    column: headers[pos].to_string(),
                    value: raw.to_string(),
                })
        };
        for (col, &pos) in features.iter_mut().zip(&feature_pos) {
            col.push(cell(pos)?);
        }
        for (col, pos) in role_cols.iter_mut().zip(&role_pos) {
            if let Some(pos) = *pos {
                col.push(cell(pos)?);
            }
        }
    }
    if features[0].is_empty() {
        return Err(GrfError::EmptyFile);
    }

    let [y, w, z] = role_cols;
    let mut data =
        Dataset::from_columns(features)?.with_feature_names(roles.feature_names.clone())?;
    if role_pos[0].is_some() {
        data = data.with_outcome(y)?;
    }
    if role_pos[1].is_some() {
        data = data.with_treatment(w)?;
    }
    if role_pos[2].is_some() {
        data = data.with_instrument(z)?;
    }
    Ok(data)
}

/// Header names used by [`write_csv`] for the non-feature columns.
pub const OUTCOME_HEADER: &str = "y";
pub const TREATMENT_HEADER: &str = "w";
pub const INSTRUMENT_HEADER: &str = "z";

/// Write all columns at 17 significant digits, so reloading is bit-exact.
pub fn write_csv<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = data.feature_names.iter().map(String::as_str).collect();
    let extra: Vec<(&str, &[f64])> = [
        (OUTCOME_HEADER, data.outcome()),
        (TREATMENT_HEADER, data.treatment()),
        (INSTRUMENT_HEADER, data.instrument()),
    ]
    .into_iter()
    .filter_map(|(h, c)| c.map(|c| (h, c)))
    .collect();
    header.extend(extra.iter().map(|(h, _)| *h));
    wtr.write_record(&header)?;
    for i in 0..data.n {
        let row = (0..data.p)
            .map(|j| data.feature(i, j))
            .chain(extra.iter().map(|(_, c)| c[i]))
            .map(|v| format!("{v:.16e}"));
        wtr.write_record(row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// The roles matching a file produced by [`write_csv`].
pub fn written_roles(data: &Dataset) -> ColumnRoles {
    let mut roles = ColumnRoles::new(data.feature_names.iter().cloned());
    if data.outcome.is_some() {
        roles = roles.outcome(OUTCOME_HEADER);
    }
    if data.treatment.is_some() {
        roles = roles.treatment(TREATMENT_HEADER);
    }
    if data.instrument.is_some() {
        roles = roles.instrument(INSTRUMENT_HEADER);
    }
    roles
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, roles: &ColumnRoles) -> Result<Dataset> {
        read_csv(text.as_bytes(), roles)
    }

    #[test]
    fn loads_three_rows() {
        let d = parse(
            "x1,x2,y\n1,2,3\n4,5,6\n7,8,9\n",
            &ColumnRoles::new(["x1", "x2"]).outcome("y"),
        )
        .unwrap();
        assert_eq!((d.n(), d.p()), (3, 2));
        assert_eq!(d.column(1), &[2.0, 5.0, 8.0]);
        assert_eq!(d.outcome().unwrap(), &[3.0, 6.0, 9.0]);
        assert_eq!(d.row(2), vec![7.0, 8.0]);
    }

    #[test]
    fn absent_role_column_is_reported() {
        let err = parse(
            "x1,x2,y\n1,2,3\n",
            &ColumnRoles::new(["x1", "x2"]).outcome("y").treatment("w"),
        )
        .unwrap_err();
        assert!(matches!(err, GrfError::MissingColumn(ref c) if c == "w"));
    }

    #[test]
    fn non_numeric_cell_reports_position() {
        let err = parse(
            "x1,x2,y\n1,2,3\n4,5,abc\n",
            &ColumnRoles::new(["x1", "x2"]).outcome("y"),
        )
        .unwrap_err();
        match err {
            GrfError::NonNumericCell { row, column, value } => {
                assert_eq!(row, 2);
                assert_eq!(column, "y");
                assert_eq!(value, "abc");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_cell_is_an_error_not_dropped() {
        let err = parse("x1,y\n1,\n2,3\n", &ColumnRoles::new(["x1"]).outcome("y")).unwrap_err();
        assert_eq!(err.tag(), "NonNumericCell");
    }

    #[test]
    fn empty_inputs() {
        let roles = ColumnRoles::new(["x1"]).outcome("y");
        assert_eq!(parse("", &roles).unwrap_err().tag(), "EmptyFile");
        assert_eq!(parse("x1,y\n", &roles).unwrap_err().tag(), "EmptyFile");
    }

    #[test]
    fn duplicate_role_names_rejected() {
        let err = parse("x1,y\n1,2\n", &ColumnRoles::new(["x1"]).outcome("x1")).unwrap_err();
        assert_eq!(err.tag(), "InvalidOptions");
    }

    #[test]
    fn model_requirements() {
        let d = Dataset::from_columns(vec![vec![1.0, 2.0]])
            .unwrap()
            .with_outcome(vec![1.0, 2.0])
            .unwrap();
        assert!(validate_for_model(&d, ModelKind::Regression).is_ok());
        assert!(validate_for_model(&d, ModelKind::Quantile).is_ok());
        assert!(matches!(
            validate_for_model(&d, ModelKind::Instrumental),
            Err(GrfError::MissingRole(Role::Treatment))
        ));
        let d = d
            .with_treatment(vec![0.0, 1.0])
            .unwrap()
            .with_instrument(vec![1.0, 0.0])
            .unwrap();
        assert!(validate_for_model(&d, ModelKind::PartialEffect).is_ok());
        assert!(validate_for_model(&d, ModelKind::Instrumental).is_ok());
    }

    #[test]
    fn rejects_non_finite_and_ragged() {
        assert!(Dataset::from_columns(vec![vec![1.0, f64::NAN]]).is_err());
        assert!(Dataset::from_columns(vec![vec![1.0, 2.0], vec![1.0]]).is_err());
        let d = Dataset::from_columns(vec![vec![1.0, 2.0]]).unwrap();
        assert!(d.clone().with_outcome(vec![1.0]).is_err());
        assert!(d.with_outcome(vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn write_then_read_is_bit_exact() {
        let d = Dataset::from_columns(vec![vec![0.1, 1.0 / 3.0, -2.5e-300]])
            .unwrap()
            .with_outcome(vec![std::f64::consts::PI, 1e300, -0.0])
            .unwrap()
            .with_treatment(vec![0.0, 1.0, 1.0])
            .unwrap();
        let mut buf = Vec::new();
        write_csv(&d, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &written_roles(&d)).unwrap();
        assert_eq!(back, d);
    }
}
