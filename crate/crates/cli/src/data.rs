//! CSV input: a header row and numeric columns, selected by name.

use std::path::Path;

use selection_bounds::ObservationSet;

use crate::error::CliError;

/// Reads the named columns of a CSV file, in the order given.
pub fn load_csv(path: &Path, columns: &[String]) -> Result<ObservationSet, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    read_csv(file, columns)
}

pub fn read_csv<R: std::io::Read>(reader: R, columns: &[String]) -> Result<ObservationSet, CliError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| CliError::Data(format!("header: {e}")))?.clone();
    let idx: Vec<usize> = columns
        .iter()
        .map(|c| {
            header
                .iter()
                .position(|h| h == c)
                .ok_or_else(|| CliError::Data(format!("column `{c}` not found in header")))
        })
        .collect::<Result<_, _>>()?;
    let mut data = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| CliError::Data(format!("row {row}: {e}")))?;
        for (&j, name) in idx.iter().zip(columns) {
            let field = rec.get(j).unwrap_or("");
            let v: f64 = field
                .parse()
                .map_err(|_| CliError::Data(format!("row {row}, column `{name}`: `{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(CliError::Data(format!("row {row}, column `{name}`: non-finite value")));
            }
            data.push(v);
        }
    }
    if data.is_empty() {
        return Err(CliError::Data("no data rows".into()));
    }
    ObservationSet::new(columns.to_vec(), data).map_err(|e| CliError::Data(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cols(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn selects_columns_by_name() {
        let text = "id,y,x\n1,0.5,2\n2,1.5,3\n";
        let obs = read_csv(text.as_bytes(), &cols(&["x", "y"])).unwrap();
        assert_eq!(obs.n(), 2);
        assert_eq!(obs.row(1), &[3.0, 1.5]);
    }

    #[test]
    fn reports_row_and_column() {
        let text = "y\n1\nfoo\n";
        match read_csv(text.as_bytes(), &cols(&["y"])) {
            Err(CliError::Data(m)) => assert!(m.contains("row 2") && m.contains("`y`"), "{m}"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(read_csv("y\n".as_bytes(), &cols(&["y"])), Err(CliError::Data(_))));
        assert!(matches!(read_csv("y\n1\n".as_bytes(), &cols(&["q"])), Err(CliError::Data(_))));
        assert!(matches!(read_csv("y\nNaN\n".as_bytes(), &cols(&["y"])), Err(CliError::Data(_))));
    }
}
