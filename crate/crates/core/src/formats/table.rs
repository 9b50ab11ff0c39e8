use std::io::Read;
use std::path::Path;

use crate::bcm::{standardize, Dag, GeneratorMetadata, TaskBundle};
use crate::diffengine::Tensor;
use crate::error::{Error, Result};

/// A rectangular numeric table with a header row.
#[derive(Clone, Debug, PartialEq)]
pub struct NumericTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl NumericTable {
    /// Column by header name, or by zero-based index when no header matches.
    pub fn column(&self, key: &str) -> Result<usize> {
        if let Some(c) = self.columns.iter().position(|c| c == key) {
            return Ok(c);
        }
        match key.parse::<usize>() {
            Ok(c) if c < self.columns.len() => Ok(c),
            _ => Err(Error::Config(format!("no column named `{key}`"))),
        }
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for r in &self.rows {
            w.write_record(r.iter().map(f64::to_string))?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

/// Parses a numeric CSV; errors name the 1-based line of the offending row.
pub fn parse_numeric_csv<R: Read>(reader: R) -> Result<NumericTable> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let columns: Vec<String> = r.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if columns.is_empty() || columns.iter().all(String::is_empty) {
        return Err(Error::Format("CSV has no header".into()));
    }
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != columns.len() {
            return Err(Error::Format(format!(
                "line {line}: expected {} fields, found {}",
                columns.len(),
                record.len()
            )));
        }
        let row = record
            .iter()
            .enumerate()
            .map(|(c, cell)| match cell.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Format(format!("line {line}: column `{}` is not a finite number: `{cell}`", columns[c]))),
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(NumericTable { columns, rows })
}

pub fn read_numeric_csv(path: &Path) -> Result<NumericTable> {
    parse_numeric_csv(std::fs::File::open(path)?)
}

/// How an external table maps onto a task.
#[derive(Clone, Debug, PartialEq)]
pub struct TableImport {
    /// Leading rows that are observational; the rest are interventional.
    pub obs_rows: usize,
    /// Intervened column (name or index).
    pub int_node: String,
    /// Outcome column (name or index).
    pub outcome: String,
    /// Optional auxiliary column holding the intervention values; it is not
    /// a node. By default the intervened column's own values are used.
    pub int_values_column: Option<String>,
}

/// Builds a standardized bundle from a table. Outcomes are external: the
/// bundle carries no generator, only the column names.
pub fn import_table(table: &NumericTable, spec: &TableImport) -> Result<TaskBundle> {
    if spec.obs_rows == 0 || spec.obs_rows > table.rows.len() {
        return Err(Error::Config(format!(
            "obs_rows = {} but the table has {} rows",
            spec.obs_rows,
            table.rows.len()
        )));
    }
    let aux = spec.int_values_column.as_deref().map(|c| table.column(c)).transpose()?;
    let nodes: Vec<usize> = (0..table.columns.len()).filter(|&c| Some(c) != aux).collect();
    let node_of = |key: &str| -> Result<usize> {
        let c = table.column(key)?;
        nodes
            .iter()
            .position(|&n| n == c)
            .ok_or_else(|| Error::Config(format!("column `{key}` holds intervention values, not a node")))
    };
    let (j, i) = (node_of(&spec.int_node)?, node_of(&spec.outcome)?);
    if i == j {
        return Err(Error::Config("the intervened and outcome columns must differ".into()));
    }
    let d = nodes.len();
    let pick = |rows: &[Vec<f64>]| -> Result<Tensor> {
        let data = rows.iter().flat_map(|r| nodes.iter().map(|&c| r[c])).collect();
        Tensor::new(vec![rows.len(), d], data)
    };
    let (obs, int) = table.rows.split_at(spec.obs_rows);
    let mut int_full = pick(int)?;
    let int_values: Vec<f64> = int.iter().map(|r| r[aux.unwrap_or(nodes[j])]).collect();
    for (r, &x) in int_values.iter().enumerate() {
        int_full.data_mut()[r * d + j] = x;
    }
    let raw = TaskBundle {
        obs: pick(obs)?,
        int_node: j,
        outcome_node: i,
        int_values,
        int_full,
        context: Tensor::zeros(&[0, d]),
        metadata: Some(GeneratorMetadata {
            family: "external".into(),
            dag: Dag::from_edges(d, &[])?,
            mechanisms: Vec::new(),
            scm: None,
            external: true,
            columns: Some(nodes.iter().map(|&c| table.columns[c].clone()).collect()),
        }),
        seed: 0,
        standardizer: None,
    };
    raw.validate()?;
    Ok(standardize(&raw)?.0)
}

/// Observational then interventional rows on the original scale.
pub fn export_table(bundle: &TaskBundle) -> Result<NumericTable> {
    let d = bundle.num_nodes();
    let (obs, int) = match &bundle.standardizer {
        Some(s) => (s.inverse(&bundle.obs)?, s.inverse(&bundle.int_full)?),
        None => (bundle.obs.clone(), bundle.int_full.clone()),
    };
    let columns = bundle
        .metadata
        .as_ref()
        .and_then(|m| m.columns.clone())
        .unwrap_or_else(|| (0..d).map(|c| format!("x{c}")).collect());
    let rows = obs.data().chunks(d).chain(int.data().chunks(d)).map(<[f64]>::to_vec).collect();
    Ok(NumericTable { columns, rows })
}
