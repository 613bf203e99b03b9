//! File formats: datasets as CSV, reports as JSON, all written atomically.
//!
//! Dataset CSV layout: a header row; the response in `y` (continuous) or in
//! `time` and `status` (survival, raw positive times, status 1 = event;
//! `y` and `delta` are accepted as the same pair); E factors in columns named
//! `E1`, `E2`, ... (or `z1`, `z2`, ...); every other column is a G factor and
//! keeps its name. Survival times are log-transformed on read and
//! exponentiated on write, so the file always holds raw times.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{GxeError, Result};

/// Writes through `body` into a temporary file next to `path`, then renames
/// it into place, so readers never see a partial file.
pub fn atomic_write<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        body(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| GxeError::Io(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    atomic_write(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = fs::File::open(path)?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

/// One JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    atomic_write(path, |w| {
        for r in records {
            serde_json::to_writer(&mut *w, r)?;
            writeln!(w)?;
        }
        Ok(())
    })
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| GxeError::Parse(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

fn is_e_column(name: &str) -> bool {
    name.len() > 1 && (name.starts_with('E') || name.starts_with('z')) && name[1..].bytes().all(|b| b.is_ascii_digit())
}

/// Reads a dataset CSV (see the module docs for the layout).
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let status = find("status").or_else(|| find("delta"));
    let (y_col, status_col) = match (find("y"), find("time"), status) {
        (Some(y), None, Some(s)) => (y, Some(s)),
        (Some(y), None, None) => (y, None),
        (None, Some(t), Some(s)) => (t, Some(s)),
        (None, Some(_), None) => return Err(GxeError::Parse("`time` column without a `status` column".into())),
        (Some(_), Some(_), _) => return Err(GxeError::Parse("both `y` and `time` columns present".into())),
        _ => return Err(GxeError::Parse("no response column: expected `y`, or `time` and `status`".into())),
    };
    let e_cols: Vec<usize> = (0..headers.len()).filter(|&i| is_e_column(&headers[i])).collect();
    let g_cols: Vec<usize> = (0..headers.len())
        .filter(|&i| i != y_col && Some(i) != status_col && !is_e_column(&headers[i]))
        .collect();
    if e_cols.is_empty() {
        return Err(GxeError::Parse("no E columns (expected headers E1, E2, ...)".into()));
    }
    if g_cols.is_empty() {
        return Err(GxeError::Parse("no G columns".into()));
    }

    let (mut y, mut status, mut zv, mut xv) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let num = |i: usize| -> Result<f64> {
            let s = rec.get(i).unwrap_or("");
            s.parse::<f64>()
                .map_err(|_| GxeError::Parse(format!("line {line}, column `{}`: `{s}` is not a number", headers[i])))
        };
        let v = num(y_col)?;
        match status_col {
            Some(sc) => {
                if !(v > 0.0) {
                    return Err(GxeError::Parse(format!("line {line}: survival time {v} must be > 0")));
                }
                y.push(v.ln());
                status.push(match num(sc)? {
                    1.0 => true,
                    0.0 => false,
                    s => return Err(GxeError::Parse(format!("line {line}: status {s} must be 0 or 1"))),
                });
            }
            None => y.push(v),
        }
        for &i in &e_cols {
            zv.push(num(i)?);
        }
        for &i in &g_cols {
            xv.push(num(i)?);
        }
    }
    let n = y.len();
    if n == 0 {
        return Err(GxeError::Parse(format!("{} has no data rows", path.display())));
    }
    let z = DMatrix::from_row_slice(n, e_cols.len(), &zv);
    let x = DMatrix::from_row_slice(n, g_cols.len(), &xv);
    let delta = status_col.map(|_| status);
    let names = g_cols.iter().map(|&i| headers[i].clone()).collect();
    Dataset::new(y, delta, z, x)?.with_g_names(names)
}

/// G column names, defaulting to `G1, G2, ...`.
pub fn g_names(d: &Dataset) -> Vec<String> {
    match d.g_names() {
        Some(n) => n.to_vec(),
        None => (1..=d.p()).map(|j| format!("G{j}")).collect(),
    }
}

/// Writes a dataset CSV; survival responses are written as raw times.
pub fn write_dataset(path: &Path, d: &Dataset) -> Result<()> {
    let names = g_names(d);
    atomic_write(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = match d.delta() {
            Some(_) => vec!["time".into(), "status".into()],
            None => vec!["y".into()],
        };
        header.extend((1..=d.q()).map(|k| format!("E{k}")));
        header.extend(names.iter().cloned());
        out.write_record(&header)?;
        let mut row = Vec::with_capacity(header.len());
        for i in 0..d.n() {
            row.clear();
            match d.delta() {
                Some(delta) => {
                    row.push(format!("{}", d.y()[i].exp()));
                    row.push(if delta[i] { "1".into() } else { "0".into() });
                }
                None => row.push(format!("{}", d.y()[i])),
            }
            row.extend((0..d.q()).map(|k| format!("{}", d.z()[(i, k)])));
            row.extend((0..d.p()).map(|j| format!("{}", d.x()[(i, j)])));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_roundtrip_linear_and_survival() {
        let dir = tempfile::tempdir().unwrap();
        let z = DMatrix::from_row_slice(3, 1, &[0.5, -1.0, 2.0]);
        let x = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 2.0, 1.0, 0.0, 2.0]);
        let lin = Dataset::new(vec![1.5, -0.25, 3.0], None, z.clone(), x.clone()).unwrap();
        let path = dir.path().join("lin.csv");
        write_dataset(&path, &lin).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.y(), lin.y());
        assert_eq!(back.x(), lin.x());
        assert_eq!(back.g_names().unwrap(), ["G1", "G2"]);

        let surv = Dataset::new(vec![0.1, 1.2, -0.3], Some(vec![true, false, true]), z, x).unwrap();
        let path = dir.path().join("surv.csv");
        write_dataset(&path, &surv).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("time,status,E1,G1,G2"));
        let back = read_dataset(&path).unwrap();
        for (a, b) in back.y().iter().zip(surv.y()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(back.delta(), surv.delta());
    }

    #[test]
    fn delta_and_z_headers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "y,delta,z1,x1,x2\n2.0,1,0.5,0,1\n1.0,0,1.5,1,2\n").unwrap();
        let d = read_dataset(&path).unwrap();
        assert_eq!(d.q(), 1);
        assert_eq!(d.g_names().unwrap(), ["x1", "x2"]);
        assert_eq!(d.delta().unwrap(), [true, false]);
        assert!((d.y()[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            "y,E1,G1\n1,2,x\n",
            "y,G1\n1,2\n",
            "time,E1,G1\n1,2,3\n",
            "time,status,E1,G1\n-1,1,2,3\n",
            "time,status,E1,G1\n1,2,2,3\n",
            "a,E1,G1\n1,2,3\n",
            "y,E1,G1\n",
        ];
        for (i, text) in cases.iter().enumerate() {
            let path = dir.path().join(format!("bad{i}.csv"));
            fs::write(&path, text).unwrap();
            assert!(read_dataset(&path).is_err(), "case {i} should fail");
        }
    }

    #[test]
    fn atomic_json_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("v.json");
        write_json(&path, &vec![1, 2, 3]).unwrap();
        let v: Vec<i32> = read_json(&path).unwrap();
        assert_eq!(v, [1, 2, 3]);
        let lines = dir.path().join("r.jsonl");
        write_jsonl(&lines, &[1.5, 2.5]).unwrap();
        let r: Vec<f64> = read_jsonl(&lines).unwrap();
        assert_eq!(r, [1.5, 2.5]);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 2);
    }
}
