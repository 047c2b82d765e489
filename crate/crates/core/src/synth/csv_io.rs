use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::kernel::Tensor;
use crate::synth::{Domain, DomainDataset};

/// Writes `domain,label,f0,…` rows with 17 significant digits per value.
pub fn save_dataset(ds: &DomainDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let write = |out: &mut BufWriter<File>| -> std::io::Result<()> {
        write!(out, "domain,label")?;
        for j in 0..ds.feature_dim() {
            write!(out, ",f{j}")?;
        }
        out.write_all(b"\n")?;
        let features = ds.features();
        for (i, y) in ds.labels_unchecked().iter().enumerate() {
            write!(out, "{},{y}", ds.domain())?;
            for v in features.row(i) {
                write!(out, ",{v:.16e}")?;
            }
            out.write_all(b"\n")?;
        }
        out.flush()
    };
    write(&mut out).map_err(|e| Error::io(path, e))
}

/// Reads a dataset written by [`save_dataset`].
///
/// When `num_classes` is `None` it is inferred as `max label + 1`.
pub fn load_dataset(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<DomainDataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;

    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.len() < 3 || &header[0] != "domain" || &header[1] != "label" {
        return Err(Error::Parse {
            line: 1,
            message: "header must start with domain,label,f0".into(),
        });
    }
    for (j, name) in header.iter().skip(2).enumerate() {
        if name != format!("f{j}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected column f{j}, found {name:?}"),
            });
        }
    }
    let dim = header.len() - 2;

    let mut domain = None;
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let parse_err = |message: String| Error::Parse { line, message };

        let row_domain = match &record[0] {
            "source" => Domain::Source,
            "target" => Domain::Target,
            other => return Err(parse_err(format!("unknown domain {other:?}"))),
        };
        if *domain.get_or_insert(row_domain) != row_domain {
            return Err(parse_err("mixed domains in one file".into()));
        }
        let label: usize = record[1]
            .parse()
            .map_err(|_| parse_err(format!("bad label {:?}", &record[1])))?;
        if let Some(c) = num_classes {
            if label >= c {
                return Err(Error::Validation(format!(
                    "line {line}: label {label} not below class count {c}"
                )));
            }
        }
        labels.push(label);
        for field in record.iter().skip(2) {
            let v: f64 = field.parse().map_err(|_| parse_err(format!("bad number {field:?}")))?;
            values.push(v);
        }
    }
    let Some(domain) = domain else {
        return Err(Error::EmptyDataset(format!(
            "{} has a header but no rows",
            path.display()
        )));
    };
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let features = Tensor::new(labels.len(), dim, values)?;
    DomainDataset::new(domain, features, labels, classes)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::Parse {
            line,
            message: format!("{kind:?}"),
        },
    }
}
