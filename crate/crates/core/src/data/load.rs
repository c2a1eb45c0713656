use std::collections::BTreeSet;
use std::path::Path;

use super::{Dataset, Task};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor};

/// Column roles for [`load_csv`].
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    /// Response column(s). Survival data takes exactly one (the time).
    pub response: Vec<String>,
    pub task: Task,
    /// Event indicator column (survival only).
    pub event: Option<String>,
    /// Columns one-hot encoded, in this order, after the numeric features.
    pub categorical: Vec<String>,
    /// Column holding the site of each row; kept as group labels.
    pub site: Option<String>,
    /// Columns ignored entirely.
    pub drop: Vec<String>,
    /// Reshape of the feature vector into modes 2..N.
    pub feature_shape: Option<Vec<usize>>,
}

impl CsvSchema {
    pub fn new(response: impl Into<String>, task: Task) -> CsvSchema {
        CsvSchema {
            response: vec![response.into()],
            task,
            event: None,
            categorical: Vec::new(),
            site: None,
            drop: Vec::new(),
            feature_shape: None,
        }
    }
}

fn parse_num(raw: &str, line: u64, col: &str) -> Result<f64> {
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| Error::Data(format!("line {line}, column '{col}': cannot parse '{raw}' as a number")))?;
    if !v.is_finite() {
        return Err(Error::Data(format!("line {line}, column '{col}': value is not finite")));
    }
    Ok(v)
}

/// Reads a headed CSV file into a samples-first dataset.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(Error::Data(format!("{}: empty file", path.display())));
    }
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("column '{name}' not found in {}", path.display())))
    };

    if schema.response.is_empty() {
        return Err(Error::Data("schema names no response column".into()));
    }
    let response_idx: Vec<usize> = schema.response.iter().map(|r| find(r)).collect::<Result<_>>()?;
    let event_idx = match (&schema.event, schema.task) {
        (Some(e), Task::Survival) => Some(find(e)?),
        (None, Task::Survival) => return Err(Error::Data("survival data needs an event column".into())),
        (Some(_), _) => return Err(Error::Data("an event column only applies to survival data".into())),
        (None, _) => None,
    };
    if schema.task == Task::Survival && response_idx.len() != 1 {
        return Err(Error::Data("survival data takes exactly one time column".into()));
    }
    let site_idx = schema.site.as_deref().map(find).transpose()?;
    let cat_idx: Vec<usize> = schema.categorical.iter().map(|c| find(c)).collect::<Result<_>>()?;
    for d in &schema.drop {
        find(d)?;
    }
    let reserved: BTreeSet<usize> = response_idx
        .iter()
        .copied()
        .chain(event_idx)
        .chain(site_idx)
        .chain(cat_idx.iter().copied())
        .chain(schema.drop.iter().map(|d| find(d).expect("checked")))
        .collect();
    let numeric_idx: Vec<usize> = (0..headers.len()).filter(|i| !reserved.contains(i)).collect();

    let mut numeric: Vec<Vec<f64>> = Vec::new();
    let mut cats: Vec<Vec<String>> = Vec::new();
    let mut ys: Vec<Vec<f64>> = Vec::new();
    let mut sites: Vec<String> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != headers.len() {
            return Err(Error::Data(format!("line {line}: expected {} fields, found {}", headers.len(), rec.len())));
        }
        numeric.push(numeric_idx.iter().map(|&i| parse_num(&rec[i], line, &headers[i])).collect::<Result<_>>()?);
        cats.push(cat_idx.iter().map(|&i| rec[i].to_string()).collect());
        let mut yrow: Vec<f64> =
            response_idx.iter().map(|&i| parse_num(&rec[i], line, &headers[i])).collect::<Result<_>>()?;
        if let Some(e) = event_idx {
            yrow.push(parse_num(&rec[e], line, &headers[e])?);
        }
        let binary_cols = match schema.task {
            Task::Binary => yrow.len(),
            Task::Survival => 0,
            Task::Regression => 0,
        };
        for (k, v) in yrow.iter().enumerate() {
            let must_be_binary = k < binary_cols || (schema.task == Task::Survival && k == 1);
            if must_be_binary && *v != 0.0 && *v != 1.0 {
                return Err(Error::Data(format!("line {line}: label {v} is not 0 or 1")));
            }
        }
        ys.push(yrow);
        if let Some(s) = site_idx {
            sites.push(rec[s].to_string());
        }
    }
    let n = numeric.len();
    if n == 0 {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }

    let mut names: Vec<String> = numeric_idx.iter().map(|&i| headers[i].clone()).collect();
    let levels: Vec<Vec<String>> = (0..cat_idx.len())
        .map(|c| cats.iter().map(|row| row[c].clone()).collect::<BTreeSet<_>>().into_iter().collect())
        .collect();
    for (c, lv) in levels.iter().enumerate() {
        names.extend(lv.iter().map(|l| format!("{}={l}", headers[cat_idx[c]])));
    }
    let f = names.len();
    if f == 0 {
        return Err(Error::Data("no feature columns".into()));
    }
    let mut data = Vec::with_capacity(n * f);
    for (row, cat_row) in numeric.iter().zip(&cats) {
        data.extend_from_slice(row);
        for (c, lv) in levels.iter().enumerate() {
            data.extend(lv.iter().map(|l| if *l == cat_row[c] { 1.0 } else { 0.0 }));
        }
    }
    let mut shape = vec![n];
    match &schema.feature_shape {
        Some(s) if s.iter().product::<usize>() == f && !s.is_empty() => shape.extend(s),
        Some(s) => return Err(Error::Data(format!("feature shape {s:?} does not hold {f} features"))),
        None => shape.push(f),
    }
    let m = ys[0].len();
    let x = Tensor::new(shape, data)?;
    let y = Matrix::new(n, m, ys.concat())?;
    let mut ds = Dataset::new(x, y, schema.task)?;
    ds.feature_names = names;
    if site_idx.is_some() {
        ds.groups = Some(sites);
    }
    Ok(ds)
}

/// Writes `ds` as a headed CSV that [`load_csv`] reads back with
/// [`csv_schema_for`]. Feature tensors are flattened in memory order.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let schema = csv_schema_for(ds);
    let mut header = ds.feature_names.clone();
    header.extend(schema.response.iter().cloned());
    header.extend(schema.event.iter().cloned());
    header.extend(schema.site.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    let f = ds.feature_names.len();
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.x.data()[i * f..(i + 1) * f].iter().map(|v| format!("{v:?}")).collect();
        rec.extend(ds.y.row(i).iter().map(|v| format!("{v:?}")));
        if let Some(g) = &ds.groups {
            rec.push(g[i].clone());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Schema matching the column names [`write_csv`] uses for `ds`.
pub fn csv_schema_for(ds: &Dataset) -> CsvSchema {
    let mut schema = CsvSchema::new("", ds.task);
    schema.response = match ds.task {
        Task::Survival => vec!["time".into()],
        _ => (0..ds.y.cols()).map(|m| format!("y{m}")).collect(),
    };
    if ds.task == Task::Survival {
        schema.event = Some("event".into());
    }
    if ds.groups.is_some() {
        schema.site = Some("site".into());
    }
    if ds.feature_shape().len() > 1 {
        schema.feature_shape = Some(ds.feature_shape().to_vec());
    }
    schema
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn binary_file_loads() {
        let f = write("age,chol,target\n50,200,1\n40,180,0\n61,240,1\n35,150,0\n");
        let ds = load_csv(f.path(), &CsvSchema::new("target", Task::Binary)).unwrap();
        assert_eq!(ds.x.shape(), &[4, 2]);
        assert_eq!(ds.y.data(), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(ds.feature_names, vec!["age", "chol"]);
    }

    #[test]
    fn survival_keeps_time_and_event() {
        let f = write("a,time,dead\n1,5,1\n2,7,0\n3,2,1\n");
        let mut schema = CsvSchema::new("time", Task::Survival);
        schema.event = Some("dead".into());
        let ds = load_csv(f.path(), &schema).unwrap();
        assert_eq!(ds.y.cols(), 2);
        assert_eq!(ds.y.row(1), &[7.0, 0.0]);
        assert_eq!(ds.target().data(), &[5.0, 7.0, 2.0]);
    }

    #[test]
    fn categorical_site_and_reshape() {
        let f = write("x1,x2,kind,site,y\n1,2,b,A,0.5\n3,4,a,B,1.5\n5,6,b,A,2.5\n");
        let mut schema = CsvSchema::new("y", Task::Regression);
        schema.categorical = vec!["kind".into()];
        schema.site = Some("site".into());
        schema.feature_shape = Some(vec![2, 2]);
        let ds = load_csv(f.path(), &schema).unwrap();
        assert_eq!(ds.x.shape(), &[3, 2, 2]);
        assert_eq!(&ds.x.data()[..4], &[1.0, 2.0, 0.0, 1.0]);
        assert_eq!(ds.feature_names[2..], ["kind=a".to_string(), "kind=b".to_string()]);
        assert_eq!(ds.groups.as_ref().unwrap(), &["A", "B", "A"]);
    }

    #[test]
    fn errors_name_the_problem() {
        let f = write("a,b\n1,2\n");
        let err = load_csv(f.path(), &CsvSchema::new("target", Task::Binary)).unwrap_err();
        assert!(err.to_string().contains("target"));

        let f = write("a,y\n1,2\nzz,3\n");
        let err = load_csv(f.path(), &CsvSchema::new("y", Task::Regression)).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");

        let f = write("a,y\n1,oops\n");
        assert!(load_csv(f.path(), &CsvSchema::new("y", Task::Regression)).is_err());

        let f = write("");
        assert!(load_csv(f.path(), &CsvSchema::new("y", Task::Regression)).is_err());

        let f = write("a,y\n1,2\n");
        assert!(load_csv(f.path(), &CsvSchema::new("y", Task::Binary)).is_err());
    }

    #[test]
    fn written_files_load_back_exactly() {
        let x = Tensor::new(vec![3, 2, 2], (0..12).map(|v| v as f64 / 7.0).collect()).unwrap();
        let y = Matrix::new(3, 2, vec![0.1, 1.0, 0.2, 0.0, 0.3, 1.0]).unwrap();
        let mut ds = Dataset::new(x, y, Task::Regression).unwrap();
        ds.groups = Some(vec!["a".into(), "b".into(), "a".into()]);
        let f = tempfile::NamedTempFile::new().unwrap();
        write_csv(&ds, f.path()).unwrap();
        assert_eq!(load_csv(f.path(), &csv_schema_for(&ds)).unwrap(), ds);
    }
}
