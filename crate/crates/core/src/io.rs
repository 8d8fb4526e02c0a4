//! CSV and JSON interchange for complex matrices.
//!
//! A CSV file holds one matrix row per record under a `re_0,im_0,re_1,...`
//! header. [`write_vec_rows`] uses the same layout to store a list of
//! matrices, one vectorized matrix per record.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{CMatrix, C64};

fn header(cols: usize) -> Vec<String> {
    (0..cols)
        .flat_map(|k| [format!("re_{k}"), format!("im_{k}")])
        .collect()
}

fn write_records<W: Write>(w: W, cols: usize, rows: impl Iterator<Item = Vec<C64>>) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(header(cols))?;
    for row in rows {
        let rec: Vec<String> = row
            .iter()
            .flat_map(|z| [format!("{:e}", z.re), format!("{:e}", z.im)])
            .collect();
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

fn read_records<R: Read>(r: R) -> Result<(usize, Vec<Vec<C64>>)> {
    let mut rd = csv::Reader::from_reader(r);
    let hdr = rd.headers()?.clone();
    if hdr.len() % 2 != 0 {
        return Err(Error::Parse("complex CSV needs an even number of columns".into()));
    }
    for (k, h) in hdr.iter().enumerate() {
        let want = if k % 2 == 0 { format!("re_{}", k / 2) } else { format!("im_{}", k / 2) };
        if h.trim() != want {
            return Err(Error::Parse(format!("unexpected header `{h}`, wanted `{want}`")));
        }
    }
    let cols = hdr.len() / 2;
    let mut rows = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 * cols {
            return Err(Error::Parse(format!("record {line} has {} fields", rec.len())));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("record {line}: `{s}`: {e}")))
        };
        let mut row = Vec::with_capacity(cols);
        for k in 0..cols {
            row.push(C64::new(parse(&rec[2 * k])?, parse(&rec[2 * k + 1])?));
        }
        rows.push(row);
    }
    Ok((cols, rows))
}

pub fn write_cmatrix<W: Write>(w: W, m: &CMatrix) -> Result<()> {
    write_records(w, m.ncols(), (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()))
}

pub fn read_cmatrix<R: Read>(r: R) -> Result<CMatrix> {
    let (cols, rows) = read_records(r)?;
    Ok(CMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

pub fn save_cmatrix(path: &Path, m: &CMatrix) -> Result<()> {
    write_cmatrix(File::create(path)?, m)
}

pub fn load_cmatrix(path: &Path) -> Result<CMatrix> {
    read_cmatrix(File::open(path)?)
}

/// Stores equally-sized matrices as rows of their column-major vectorization.
pub fn save_vec_rows(path: &Path, mats: &[CMatrix]) -> Result<()> {
    let len = mats.first().map_or(0, |m| m.len());
    if mats.iter().any(|m| m.len() != len) {
        return Err(Error::Dimension("matrices in one file must share a size".into()));
    }
    write_records(File::create(path)?, len, mats.iter().map(|m| m.as_slice().to_vec()))
}

pub fn load_vec_rows(path: &Path, rows: usize, cols: usize) -> Result<Vec<CMatrix>> {
    let (n, recs) = read_records(File::open(path)?)?;
    if n != rows * cols && !recs.is_empty() {
        return Err(Error::Dimension(format!("expected {} entries per record, found {n}", rows * cols)));
    }
    Ok(recs
        .into_iter()
        .map(|r| CMatrix::from_column_slice(rows, cols, &r))
        .collect())
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path)?;
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
}

/// JSON form of a complex matrix: dimensions plus column-major `[re, im]` pairs.
#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

/// `#[serde(with = "crate::io::cmatrix_serde")]`
pub mod cmatrix_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &CMatrix, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixRepr {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.as_slice().to_vec(),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<CMatrix, D::Error> {
        let r = MatrixRepr::deserialize(d)?;
        if r.rows * r.cols != r.data.len() {
            return Err(serde::de::Error::custom("matrix size does not match data length"));
        }
        Ok(CMatrix::from_column_slice(r.rows, r.cols, &r.data))
    }
}

pub mod cmatrix_vec_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ms: &[CMatrix], s: S) -> std::result::Result<S::Ok, S::Error> {
        let reprs: Vec<MatrixRepr> = ms
            .iter()
            .map(|m| MatrixRepr {
                rows: m.nrows(),
                cols: m.ncols(),
                data: m.as_slice().to_vec(),
            })
            .collect();
        reprs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<CMatrix>, D::Error> {
        let reprs = Vec::<MatrixRepr>::deserialize(d)?;
        reprs
            .into_iter()
            .map(|r| {
                if r.rows * r.cols != r.data.len() {
                    Err(serde::de::Error::custom("matrix size does not match data length"))
                } else {
                    Ok(CMatrix::from_column_slice(r.rows, r.cols, &r.data))
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = crate::tensor::random_cn(3, 4, &mut rng);
        let mut buf = Vec::new();
        write_cmatrix(&mut buf, &m).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("re_0,im_0,re_1,im_1,re_2,im_2,re_3,im_3\n"));
        assert_eq!(read_cmatrix(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn csv_rejects_bad_header() {
        let bad = "re_0,im_1\n1,2\n";
        assert!(matches!(read_cmatrix(bad.as_bytes()), Err(Error::Parse(_))));
        let odd = "re_0\n1\n";
        assert!(read_cmatrix(odd.as_bytes()).is_err());
        let junk = "re_0,im_0\n1,x\n";
        assert!(read_cmatrix(junk.as_bytes()).is_err());
    }

    #[test]
    fn vec_rows_and_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mats: Vec<CMatrix> = (0..3).map(|_| crate::tensor::random_cn(2, 3, &mut rng)).collect();
        let p = dir.path().join("m.csv");
        save_vec_rows(&p, &mats).unwrap();
        assert_eq!(load_vec_rows(&p, 2, 3).unwrap(), mats);
        assert!(load_vec_rows(&p, 3, 3).is_err());

        #[derive(Serialize, Deserialize, PartialEq, Debug)]
        struct Holder {
            #[serde(with = "cmatrix_serde")]
            m: CMatrix,
            #[serde(with = "cmatrix_vec_serde")]
            ms: Vec<CMatrix>,
        }
        let h = Holder { m: mats[0].clone(), ms: mats.clone() };
        let jp = dir.path().join("h.json");
        save_json(&jp, &h).unwrap();
        let back: Holder = load_json(&jp).unwrap();
        assert_eq!(back, h);
    }
}
