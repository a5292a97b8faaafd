//! Column access shared by every estimator.
//!
//! Estimation code never looks at [`crate::data::ObservationTable`] rows
//! directly; it asks a [`ColumnSource`] for named numeric columns, with
//! missing values encoded as `NaN`.

use indexmap::IndexMap;

use crate::error::{Error, Result};

pub trait ColumnSource {
    fn n_rows(&self) -> usize;

    /// Materialize a named column; missing cells are `NaN`.
    fn column(&self, name: &str) -> Result<Vec<f64>>;

    fn has_column(&self, name: &str) -> bool {
        self.column(name).is_ok()
    }
}

/// A plain column store. Used for transformed data, dyads and tests.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Frame {
    n_rows: usize,
    columns: IndexMap<String, Vec<f64>>,
}

impl Frame {
    pub fn new(n_rows: usize) -> Self {
        Frame {
            n_rows,
            columns: IndexMap::new(),
        }
    }

    pub fn from_columns<I, S>(columns: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        let mut frame: Option<Frame> = None;
        for (name, values) in columns {
            let f = frame.get_or_insert_with(|| Frame::new(values.len()));
            f.insert(name, values)?;
        }
        frame.ok_or(Error::EmptyTable)
    }

    /// Copy the named columns out of any source.
    pub fn gather<S: ColumnSource + ?Sized>(source: &S, names: &[&str]) -> Result<Self> {
        let mut frame = Frame::new(source.n_rows());
        for name in names {
            if !frame.columns.contains_key(*name) {
                frame.insert(*name, source.column(name)?)?;
            }
        }
        Ok(frame)
    }

    pub fn insert(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if values.len() != self.n_rows {
            return Err(Error::InvalidSpec(format!(
                "column `{name}` has {} rows, frame has {}",
                values.len(),
                self.n_rows
            )));
        }
        self.columns.insert(name, values);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.columns.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.keys().map(String::as_str)
    }

    /// Keep rows where `keep[i]` is true.
    pub fn filter(&self, keep: &[bool]) -> Frame {
        let n_rows = keep.iter().filter(|k| **k).count();
        let columns = self
            .columns
            .iter()
            .map(|(k, v)| {
                let vals = v
                    .iter()
                    .zip(keep)
                    .filter_map(|(x, k)| k.then_some(*x))
                    .collect();
                (k.clone(), vals)
            })
            .collect();
        Frame { n_rows, columns }
    }
}

impl ColumnSource for Frame {
    fn n_rows(&self) -> usize {
        self.n_rows
    }

    fn column(&self, name: &str) -> Result<Vec<f64>> {
        self.columns
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    fn has_column(&self, name: &str) -> bool {
        self.columns.contains_key(name)
    }
}

/// Integer-like grouping key for a float column (school, grade, cluster ids).
pub(crate) fn group_key(x: f64) -> u64 {
    // normalise -0.0 so that it groups with 0.0
    if x == 0.0 {
        0.0f64.to_bits()
    } else {
        x.to_bits()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gather_and_filter() {
        let f = Frame::from_columns([("a", vec![1.0, 2.0, 3.0]), ("b", vec![4.0, 5.0, 6.0])]).unwrap();
        let g = Frame::gather(&f, &["b"]).unwrap();
        assert_eq!(g.get("b").unwrap(), &[4.0, 5.0, 6.0]);
        assert!(g.get("a").is_none());
        let h = f.filter(&[true, false, true]);
        assert_eq!(h.n_rows(), 2);
        assert_eq!(h.get("a").unwrap(), &[1.0, 3.0]);
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut f = Frame::new(2);
        assert!(f.insert("x", vec![1.0]).is_err());
    }
}
