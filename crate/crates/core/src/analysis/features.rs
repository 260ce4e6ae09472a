use std::io::{Read, Write};

use super::{AnalysisError, Result};

/// An n×d matrix of per-sample features, row-major, with sample ids.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Vec<f64>,
    width: usize,
    ids: Vec<String>,
    pub layer: Option<usize>,
    pub model_id: String,
}

impl FeatureMatrix {
    pub fn new(values: Vec<f64>, width: usize, ids: Vec<String>) -> Result<Self> {
        if width == 0 || values.len() != width * ids.len() {
            return Err(AnalysisError::Shape {
                len: values.len(),
                width,
                rows: ids.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AnalysisError::NonFinite);
        }
        Ok(Self {
            values,
            width,
            ids,
            layer: None,
            model_id: String::new(),
        })
    }

    /// Builds from rows, numbering samples from 0.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(AnalysisError::Format("ragged rows".into()));
        }
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        Self::new(rows.concat(), width, ids)
    }

    pub fn with_layer(mut self, layer: usize) -> Self {
        self.layer = Some(layer);
        self
    }

    pub fn with_model_id(mut self, id: impl Into<String>) -> Self {
        self.model_id = id.into();
        self
    }

    pub fn with_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.rows() {
            return Err(AnalysisError::RowMismatch(ids.len(), self.rows()));
        }
        self.ids = ids;
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    /// CSV with header `sample_id,f0,f1,...`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["sample_id".to_string()];
        header.extend((0..self.width).map(|j| format!("f{j}")));
        out.write_record(&header)?;
        for (i, id) in self.ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        let width = header.len().saturating_sub(1);
        let expected = (0..width).map(|j| format!("f{j}"));
        if header.get(0) != Some("sample_id") || !header.iter().skip(1).eq(expected) {
            return Err(AnalysisError::Format("header must be sample_id,f0,f1,...".into()));
        }
        let mut values = Vec::new();
        let mut ids = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            ids.push(rec[0].to_string());
            for field in rec.iter().skip(1) {
                let v = field
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| AnalysisError::Format(format!("row {}: bad number '{field}'", i + 1)))?;
                values.push(v);
            }
        }
        Self::new(values, width, ids)
    }
}
