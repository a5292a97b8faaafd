//! Individual-level panel, nomination network and the variables derived
//! from them (degree counts, age distance, school-grade means).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::ColumnSource;

/// (school, grade) cell.
pub type CohortKey = (i64, i64);

pub const GRADES: std::ops::RangeInclusive<i64> = 7..=12;

/// Name of the built-in school-by-grade grouping column.
pub const COHORT: &str = "cohort";

/// Numeric code of a cohort cell, unique per (school, grade).
pub fn cohort_code(key: CohortKey) -> f64 {
    (key.0 * 100 + key.1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub id: i64,
    pub school_id: i64,
    pub grade: i64,
    pub age: f64,
    pub covariates: IndexMap<String, f64>,
    /// Log annual earnings.
    pub outcome: Option<f64>,
    /// Years of schooling.
    pub education: Option<f64>,
}

impl Individual {
    pub fn new(id: i64, school_id: i64, grade: i64, age: f64) -> Self {
        Individual {
            id,
            school_id,
            grade,
            age,
            covariates: IndexMap::new(),
            outcome: None,
            education: None,
        }
    }

    pub fn cohort(&self) -> CohortKey {
        (self.school_id, self.grade)
    }

    fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidIndividual { id: self.id, reason };
        if !(self.age.is_finite() && self.age > 0.0) {
            return Err(bad(format!("age must be positive, got {}", self.age)));
        }
        if !GRADES.contains(&self.grade) {
            return Err(bad(format!("grade {} outside 7..=12", self.grade)));
        }
        Ok(())
    }
}

/// A row that could not be loaded, with its 1-based data line number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedRow {
    pub line: usize,
    pub reason: String,
}

/// How a school-grade mean treats the respondent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortMeanMode {
    #[default]
    IncludeSelf,
    ExcludeSelf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTable {
    individuals: Vec<Individual>,
    index: HashMap<i64, usize>,
    cohort_means: BTreeMap<CohortKey, IndexMap<String, f64>>,
    mean_columns: Vec<String>,
    mean_mode: CohortMeanMode,
    derived: IndexMap<String, Vec<f64>>,
    rejected: Vec<RejectedRow>,
}

impl ObservationTable {
    pub fn new(individuals: Vec<Individual>) -> Result<Self> {
        if individuals.is_empty() {
            return Err(Error::EmptyTable);
        }
        let mut index = HashMap::with_capacity(individuals.len());
        for (row, ind) in individuals.iter().enumerate() {
            ind.validate()?;
            if index.insert(ind.id, row).is_some() {
                return Err(Error::DuplicateId(ind.id));
            }
        }
        Ok(ObservationTable {
            individuals,
            index,
            cohort_means: BTreeMap::new(),
            mean_columns: Vec::new(),
            mean_mode: CohortMeanMode::default(),
            derived: IndexMap::new(),
            rejected: Vec::new(),
        })
    }

    pub fn individuals(&self) -> &[Individual] {
        &self.individuals
    }

    pub fn len(&self) -> usize {
        self.individuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.individuals.is_empty()
    }

    pub fn row_of(&self, id: i64) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn rejected_rows(&self) -> &[RejectedRow] {
        &self.rejected
    }

    pub fn derived(&self) -> &IndexMap<String, Vec<f64>> {
        &self.derived
    }

    pub fn cohort_means(&self) -> &BTreeMap<CohortKey, IndexMap<String, f64>> {
        &self.cohort_means
    }

    /// Row indices per cohort, in row order.
    pub fn cohorts(&self) -> BTreeMap<CohortKey, Vec<usize>> {
        let mut cells: BTreeMap<CohortKey, Vec<usize>> = BTreeMap::new();
        for (row, ind) in self.individuals.iter().enumerate() {
            cells.entry(ind.cohort()).or_default().push(row);
        }
        cells
    }

    /// Cohorts with a single member; their age distance is undefined.
    pub fn singleton_cohorts(&self) -> Vec<CohortKey> {
        self.cohorts()
            .into_iter()
            .filter(|(_, rows)| rows.len() < 2)
            .map(|(k, _)| k)
            .collect()
    }

    /// Attach (or replace) a derived column.
    pub fn with_column(mut self, name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if values.len() != self.len() {
            return Err(Error::InvalidSpec(format!(
                "derived column `{name}` has {} rows, table has {}",
                values.len(),
                self.len()
            )));
        }
        self.derived.insert(name, values);
        Ok(self)
    }

    /// Keep the rows for which `keep` holds. Derived columns are subset in
    /// place; school-grade means are recomputed on the new membership.
    pub fn retain<F: Fn(&Individual) -> bool>(&self, keep: F) -> Result<Self> {
        let mask: Vec<bool> = self.individuals.iter().map(&keep).collect();
        let individuals: Vec<Individual> = self
            .individuals
            .iter()
            .zip(&mask)
            .filter_map(|(ind, k)| k.then(|| ind.clone()))
            .collect();
        let mut out = ObservationTable::new(individuals)?;
        out.rejected = self.rejected.clone();
        for (name, values) in &self.derived {
            let is_mean = self.mean_columns.iter().any(|c| *name == mean_column_name(c));
            if is_mean {
                continue;
            }
            let vals = values.iter().zip(&mask).filter_map(|(v, k)| k.then_some(*v)).collect();
            out.derived.insert(name.clone(), vals);
        }
        if !self.mean_columns.is_empty() {
            let cols: Vec<&str> = self.mean_columns.iter().map(String::as_str).collect();
            out = compute_cohort_means_with(&out, &cols, self.mean_mode)?;
        }
        Ok(out)
    }

    fn base_column(&self, name: &str) -> Option<Vec<f64>> {
        let col: Vec<f64> = match name {
            "id" => self.individuals.iter().map(|i| i.id as f64).collect(),
            "school" => self.individuals.iter().map(|i| i.school_id as f64).collect(),
            "grade" => self.individuals.iter().map(|i| i.grade as f64).collect(),
            COHORT => self.individuals.iter().map(|i| cohort_code(i.cohort())).collect(),
            "age" => self.individuals.iter().map(|i| i.age).collect(),
            "outcome" => self
                .individuals
                .iter()
                .map(|i| i.outcome.unwrap_or(f64::NAN))
                .collect(),
            "education" => self
                .individuals
                .iter()
                .map(|i| i.education.unwrap_or(f64::NAN))
                .collect(),
            _ => return None,
        };
        Some(col)
    }
}

impl ColumnSource for ObservationTable {
    fn n_rows(&self) -> usize {
        self.len()
    }

    fn column(&self, name: &str) -> Result<Vec<f64>> {
        if let Some(col) = self.derived.get(name) {
            return Ok(col.clone());
        }
        if let Some(col) = self.base_column(name) {
            return Ok(col);
        }
        if self.individuals.iter().any(|i| i.covariates.contains_key(name)) {
            return Ok(self
                .individuals
                .iter()
                .map(|i| i.covariates.get(name).copied().unwrap_or(f64::NAN))
                .collect());
        }
        Err(Error::UnknownColumn(name.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeList {
    edges: Vec<(i64, i64)>,
}

impl EdgeList {
    /// Validate directed nominations against a table.
    pub fn new(edges: Vec<(i64, i64)>, table: &ObservationTable) -> Result<Self> {
        let mut seen = HashSet::with_capacity(edges.len());
        for &(s, r) in &edges {
            if s == r {
                return Err(Error::SelfLoop(s));
            }
            for id in [s, r] {
                if table.row_of(id).is_none() {
                    return Err(Error::UnknownId(id));
                }
            }
            if !seen.insert((s, r)) {
                return Err(Error::DuplicateEdge(s, r));
            }
        }
        Ok(EdgeList { edges })
    }

    pub fn empty() -> Self {
        EdgeList { edges: Vec::new() }
    }

    pub fn edges(&self) -> &[(i64, i64)] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// Column mapping for `individuals.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schema {
    pub id: String,
    pub school: String,
    pub grade: String,
    pub age: String,
    pub outcome: Option<String>,
    pub education: Option<String>,
    /// Covariate columns to keep; empty means every unmapped column.
    pub covariates: Vec<String>,
    pub delimiter: char,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            id: "id".into(),
            school: "school".into(),
            grade: "grade".into(),
            age: "age".into(),
            outcome: Some("log_earnings".into()),
            education: Some("education".into()),
            covariates: Vec::new(),
            delimiter: ',',
        }
    }
}

/// Column mapping for `edges.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeSchema {
    pub sender: String,
    pub receiver: String,
    pub delimiter: char,
}

impl Default for EdgeSchema {
    fn default() -> Self {
        EdgeSchema {
            sender: "sender".into(),
            receiver: "receiver".into(),
            delimiter: ',',
        }
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn reader(path: &Path, delimiter: char) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new()
        .delimiter(delimiter as u8)
        .trim(csv::Trim::All)
        .from_reader(open(path)?))
}

fn header_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::UnknownColumn(name.to_string()))
}

fn parse_opt(field: Option<&str>) -> std::result::Result<Option<f64>, String> {
    match field.map(str::trim) {
        None | Some("") | Some("NA") | Some("NaN") | Some(".") => Ok(None),
        Some(s) => s
            .parse::<f64>()
            .map(Some)
            .map_err(|_| format!("cannot parse `{s}`")),
    }
}

fn parse_int(s: &str) -> Option<i64> {
    s.parse::<i64>().ok().or_else(|| {
        let x = s.parse::<f64>().ok()?;
        (x.fract() == 0.0 && x.is_finite()).then_some(x as i64)
    })
}

/// Load the individual table. Rows whose mandatory fields do not parse are
/// skipped and listed in [`ObservationTable::rejected_rows`].
pub fn load_individuals(path: &Path, schema: &Schema) -> Result<ObservationTable> {
    let mut rdr = reader(path, schema.delimiter)?;
    let headers = rdr.headers()?.clone();
    let id_ix = header_index(&headers, &schema.id)?;
    let school_ix = header_index(&headers, &schema.school)?;
    let grade_ix = header_index(&headers, &schema.grade)?;
    let age_ix = header_index(&headers, &schema.age)?;
    let outcome_ix = schema.outcome.as_deref().map(|c| header_index(&headers, c)).transpose()?;
    let educ_ix = schema.education.as_deref().map(|c| header_index(&headers, c)).transpose()?;

    let mapped: HashSet<usize> = [Some(id_ix), Some(school_ix), Some(grade_ix), Some(age_ix), outcome_ix, educ_ix]
        .into_iter()
        .flatten()
        .collect();
    let covariates: Vec<(String, usize)> = if schema.covariates.is_empty() {
        headers
            .iter()
            .enumerate()
            .filter(|(i, _)| !mapped.contains(i))
            .map(|(i, h)| (h.to_string(), i))
            .collect()
    } else {
        schema
            .covariates
            .iter()
            .map(|c| Ok((c.clone(), header_index(&headers, c)?)))
            .collect::<Result<_>>()?
    };
    let mut names = HashSet::new();
    for (name, _) in &covariates {
        if !names.insert(name.as_str()) {
            return Err(Error::InvalidSpec(format!("covariate `{name}` listed twice")));
        }
    }

    let mut individuals = Vec::new();
    let mut rejected = Vec::new();
    let mut seen = HashSet::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                rejected.push(RejectedRow { line, reason: e.to_string() });
                continue;
            }
        };
        let parsed = (|| -> std::result::Result<Individual, String> {
            let field = |ix: usize, what: &str| {
                record
                    .get(ix)
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| format!("missing {what}"))
            };
            let id = parse_int(field(id_ix, "id")?).ok_or("unparseable id")?;
            let school_id = parse_int(field(school_ix, "school")?).ok_or("unparseable school")?;
            let grade = parse_int(field(grade_ix, "grade")?).ok_or("unparseable grade")?;
            let age: f64 = field(age_ix, "age")?.parse().map_err(|_| "unparseable age")?;
            let mut ind = Individual::new(id, school_id, grade, age);
            ind.validate().map_err(|e| e.to_string())?;
            ind.outcome = outcome_ix.map(|ix| parse_opt(record.get(ix))).transpose()?.flatten();
            ind.education = educ_ix.map(|ix| parse_opt(record.get(ix))).transpose()?.flatten();
            for (name, ix) in &covariates {
                let v = parse_opt(record.get(*ix))?.unwrap_or(f64::NAN);
                ind.covariates.insert(name.clone(), v);
            }
            Ok(ind)
        })();
        match parsed {
            Ok(ind) => {
                if !seen.insert(ind.id) {
                    return Err(Error::DuplicateId(ind.id));
                }
                individuals.push(ind);
            }
            Err(reason) => rejected.push(RejectedRow { line, reason }),
        }
    }
    for r in &rejected {
        log::warn!("{}: rejected data row {}: {}", path.display(), r.line, r.reason);
    }
    let mut table = ObservationTable::new(individuals)?;
    table.rejected = rejected;
    Ok(table)
}

pub fn load_edges(path: &Path, schema: &EdgeSchema, table: &ObservationTable) -> Result<EdgeList> {
    let mut rdr = reader(path, schema.delimiter)?;
    let headers = rdr.headers()?.clone();
    let s_ix = header_index(&headers, &schema.sender)?;
    let r_ix = header_index(&headers, &schema.receiver)?;
    let mut edges = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let get = |ix: usize| {
            record.get(ix).and_then(parse_int).ok_or_else(|| {
                Error::InvalidSpec(format!("{}: edge row {} has an unparseable id", path.display(), i + 1))
            })
        };
        edges.push((get(s_ix)?, get(r_ix)?));
    }
    EdgeList::new(edges, table)
}

fn fmt_opt(x: Option<f64>) -> String {
    match x {
        Some(v) if v.is_finite() => format!("{v}"),
        _ => String::new(),
    }
}

/// Write the table in the default [`Schema`] layout. Covariate columns are
/// taken from the first individual.
pub fn write_individuals(path: &Path, table: &ObservationTable) -> Result<()> {
    let io = |source| Error::Io { path: path.to_path_buf(), source };
    let mut out = std::io::BufWriter::new(File::create(path).map_err(io)?);
    let schema = Schema::default();
    let covs: Vec<String> = table
        .individuals()
        .first()
        .map(|i| i.covariates.keys().cloned().collect())
        .unwrap_or_default();
    let mut header = vec![
        schema.id,
        schema.school,
        schema.grade,
        schema.age,
        schema.outcome.unwrap_or_default(),
        schema.education.unwrap_or_default(),
    ];
    header.extend(covs.iter().cloned());
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for ind in table.individuals() {
        let mut row = vec![
            ind.id.to_string(),
            ind.school_id.to_string(),
            ind.grade.to_string(),
            format!("{}", ind.age),
            fmt_opt(ind.outcome),
            fmt_opt(ind.education),
        ];
        row.extend(covs.iter().map(|c| fmt_opt(ind.covariates.get(c).copied())));
        writeln!(out, "{}", row.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn write_edges(path: &Path, edges: &EdgeList) -> Result<()> {
    let io = |source| Error::Io { path: path.to_path_buf(), source };
    let mut out = std::io::BufWriter::new(File::create(path).map_err(io)?);
    writeln!(out, "sender,receiver").map_err(io)?;
    for (s, r) in edges.edges() {
        writeln!(out, "{s},{r}").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub mod columns {
    pub const GRADE_INDEGREE: &str = "grade_indegree";
    pub const SCHOOL_INDEGREE: &str = "school_indegree";
    pub const INDEGREE: &str = "indegree";
    pub const OUTDEGREE: &str = "outdegree";
    pub const RECIPROCATED: &str = "reciprocated";
    pub const NETWORK_SIZE: &str = "network_size";
    pub const AGE_DISTANCE: &str = "age_distance";
    pub const AGE_DISTANCE_OLDER: &str = "age_distance_older";
    pub const AGE_DISTANCE_YOUNGER: &str = "age_distance_younger";
}

/// Degree measures from the nomination network.
///
/// Grade in-degree counts nominations from the same school and grade only;
/// school in-degree counts the same school, any grade; `indegree` counts all
/// received nominations.
pub fn compute_degree_measures(table: &ObservationTable, edges: &EdgeList) -> Result<ObservationTable> {
    let n = table.len();
    let mut grade_in = vec![0.0; n];
    let mut school_in = vec![0.0; n];
    let mut all_in = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut sent: Vec<HashSet<usize>> = vec![HashSet::new(); n];
    let mut received: Vec<HashSet<usize>> = vec![HashSet::new(); n];
    let inds = table.individuals();
    for &(s, r) in edges.edges() {
        let si = table.row_of(s).ok_or(Error::UnknownId(s))?;
        let ri = table.row_of(r).ok_or(Error::UnknownId(r))?;
        out[si] += 1.0;
        all_in[ri] += 1.0;
        if inds[si].school_id == inds[ri].school_id {
            school_in[ri] += 1.0;
            if inds[si].grade == inds[ri].grade {
                grade_in[ri] += 1.0;
            }
        }
        sent[si].insert(ri);
        received[ri].insert(si);
    }
    let recip: Vec<f64> = (0..n)
        .map(|i| sent[i].intersection(&received[i]).count() as f64)
        .collect();
    let size: Vec<f64> = (0..n).map(|i| sent[i].union(&received[i]).count() as f64).collect();
    table
        .clone()
        .with_column(columns::GRADE_INDEGREE, grade_in)?
        .with_column(columns::SCHOOL_INDEGREE, school_in)?
        .with_column(columns::INDEGREE, all_in)?
        .with_column(columns::OUTDEGREE, out)?
        .with_column(columns::RECIPROCATED, recip)?
        .with_column(columns::NETWORK_SIZE, size)
}

/// Mean absolute age gap to school-grade peers (self excluded), plus the
/// mean gap to strictly older and to strictly younger peers. Members of
/// singleton cohorts get `NaN`.
pub fn compute_age_distance(table: &ObservationTable) -> Result<ObservationTable> {
    let n = table.len();
    let mut dist = vec![f64::NAN; n];
    let mut older = vec![f64::NAN; n];
    let mut younger = vec![f64::NAN; n];
    let inds = table.individuals();
    for (key, rows) in table.cohorts() {
        if rows.len() < 2 {
            log::warn!("cohort (school {}, grade {}) has a single member; age distance undefined", key.0, key.1);
            continue;
        }
        for &i in &rows {
            let a = inds[i].age;
            let (mut total, mut up, mut n_up, mut down, mut n_down) = (0.0, 0.0, 0usize, 0.0, 0usize);
            for &j in rows.iter().filter(|&&j| j != i) {
                let b = inds[j].age;
                total += (a - b).abs();
                if b > a {
                    up += b - a;
                    n_up += 1;
                } else if b < a {
                    down += a - b;
                    n_down += 1;
                }
            }
            dist[i] = total / (rows.len() - 1) as f64;
            older[i] = if n_up > 0 { up / n_up as f64 } else { 0.0 };
            younger[i] = if n_down > 0 { down / n_down as f64 } else { 0.0 };
        }
    }
    table
        .clone()
        .with_column(columns::AGE_DISTANCE, dist)?
        .with_column(columns::AGE_DISTANCE_OLDER, older)?
        .with_column(columns::AGE_DISTANCE_YOUNGER, younger)
}

pub fn mean_column_name(column: &str) -> String {
    format!("mean_{column}")
}

/// School-grade means of the named columns, attached as `mean_<column>`.
/// Missing cells are skipped.
pub fn compute_cohort_means(table: &ObservationTable, columns: &[&str]) -> Result<ObservationTable> {
    compute_cohort_means_with(table, columns, CohortMeanMode::IncludeSelf)
}

pub fn compute_cohort_means_with(
    table: &ObservationTable,
    columns: &[&str],
    mode: CohortMeanMode,
) -> Result<ObservationTable> {
    let cohorts = table.cohorts();
    let mut out = table.clone();
    for &col in columns {
        let values = table.column(col)?;
        let mut attached = vec![f64::NAN; table.len()];
        for (key, rows) in &cohorts {
            let (sum, count) = rows
                .iter()
                .map(|&r| values[r])
                .filter(|v| v.is_finite())
                .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
            let mean = if count > 0 { sum / count as f64 } else { f64::NAN };
            out.cohort_means.entry(*key).or_default().insert(col.to_string(), mean);
            for &r in rows {
                attached[r] = match mode {
                    CohortMeanMode::IncludeSelf => mean,
                    CohortMeanMode::ExcludeSelf => {
                        let v = values[r];
                        let (s, c) = if v.is_finite() { (sum - v, count - 1) } else { (sum, count) };
                        if c > 0 {
                            s / c as f64
                        } else {
                            f64::NAN
                        }
                    }
                };
            }
        }
        if !out.mean_columns.iter().any(|c| c == col) {
            out.mean_columns.push(col.to_string());
        }
        out.derived.insert(mean_column_name(col), attached);
    }
    out.mean_mode = mode;
    Ok(out)
}
