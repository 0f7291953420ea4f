//! In-memory dataset and its CSV representation.
//!
//! Layout: a header row, then one row per sample with columns
//! `sample_id, cluster, label_1..label_n, f_1_1..f_n_{d_l}` where `f_u_d`
//! is dimension `d` of unit `u`'s feature (both 1-based).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::loss::LabelBatch;
use crate::model::FeatureSet;
use crate::numeric::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub cluster: usize,
    pub labels: Vec<u8>,
    pub features: FeatureSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    d_l: usize,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(n: usize, d_l: usize, samples: Vec<Sample>) -> Result<Self> {
        if n == 0 || d_l == 0 {
            return Err(Error::input(
                "dataset needs at least one unit and one feature dimension",
            ));
        }
        for s in &samples {
            if s.labels.len() != n || s.features.n() != n || s.features.d_l() != d_l {
                return Err(Error::input(format!(
                    "sample {} does not match dataset shape ({n} units, {d_l} dims)",
                    s.id
                )));
            }
            if s.labels.iter().any(|&v| v > 1) {
                return Err(Error::input(format!(
                    "sample {} has non-binary labels",
                    s.id
                )));
            }
        }
        Ok(Dataset { n, d_l, samples })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d_l(&self) -> usize {
        self.d_l
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn labels(&self) -> LabelBatch {
        LabelBatch::new(
            self.n,
            self.samples.iter().map(|s| s.labels.clone()).collect(),
        )
        .expect("dataset labels are validated on construction")
    }

    /// First `at` samples and the rest.
    pub fn split(&self, at: usize) -> (Dataset, Dataset) {
        let at = at.min(self.samples.len());
        let head = Dataset {
            n: self.n,
            d_l: self.d_l,
            samples: self.samples[..at].to_vec(),
        };
        let tail = Dataset {
            n: self.n,
            d_l: self.d_l,
            samples: self.samples[at..].to_vec(),
        };
        (head, tail)
    }

    pub fn header(&self) -> Vec<String> {
        header(self.n, self.d_l)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(self.header()).map_err(io)?;
        let mut record = Vec::with_capacity(2 + self.n + self.n * self.d_l);
        for s in &self.samples {
            record.clear();
            record.push(s.id.to_string());
            record.push(s.cluster.to_string());
            record.extend(s.labels.iter().map(u8::to_string));
            record.extend(s.features.matrix().as_slice().iter().map(f64::to_string));
            w.write_record(&record).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .from_reader(input);
        let head: Vec<String> = r
            .headers()
            .map_err(|e| Error::input(format!("unreadable header: {e}")))?
            .iter()
            .map(str::to_owned)
            .collect();
        let (n, d_l) = parse_header(&head)?;

        let mut samples = Vec::new();
        for (row, record) in r.records().enumerate() {
            let line = row + 2;
            let record = record.map_err(|e| Error::input(format!("line {line}: {e}")))?;
            let field = |k: usize| record.get(k).unwrap_or("");
            let id = field(0)
                .parse::<u64>()
                .map_err(|_| Error::input(format!("line {line}: bad sample_id {:?}", field(0))))?;
            let cluster = field(1)
                .parse::<usize>()
                .map_err(|_| Error::input(format!("line {line}: bad cluster {:?}", field(1))))?;
            let mut labels = Vec::with_capacity(n);
            for u in 0..n {
                match field(2 + u) {
                    "0" => labels.push(0),
                    "1" => labels.push(1),
                    other => {
                        return Err(Error::input(format!(
                            "line {line}: label_{} must be 0 or 1, got {other:?}",
                            u + 1
                        )))
                    }
                }
            }
            let mut data = Vec::with_capacity(n * d_l);
            for k in 0..n * d_l {
                let text = field(2 + n + k);
                let v: f64 = text.trim().parse().map_err(|_| {
                    Error::input(format!("line {line}: bad feature value {text:?}"))
                })?;
                if !v.is_finite() {
                    return Err(Error::input(format!(
                        "line {line}: non-finite feature value"
                    )));
                }
                data.push(v);
            }
            let features = FeatureSet::new(Matrix::from_vec(n, d_l, data)?)?;
            samples.push(Sample {
                id,
                cluster,
                labels,
                features,
            });
        }
        Dataset::new(n, d_l, samples)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file)).map_err(|e| e.with_path(path))
    }
}

fn header(n: usize, d_l: usize) -> Vec<String> {
    let mut h = vec!["sample_id".to_string(), "cluster".to_string()];
    h.extend((1..=n).map(|u| format!("label_{u}")));
    for u in 1..=n {
        h.extend((1..=d_l).map(|d| format!("f_{u}_{d}")));
    }
    h
}

fn parse_header(head: &[String]) -> Result<(usize, usize)> {
    if head.len() < 2 || head[0] != "sample_id" || head[1] != "cluster" {
        return Err(Error::input(
            "header must start with sample_id,cluster (is the file empty?)",
        ));
    }
    let n = head[2..]
        .iter()
        .take_while(|h| h.starts_with("label_"))
        .count();
    let features = head.len() - 2 - n;
    if n == 0 || features == 0 || !features.is_multiple_of(n) {
        return Err(Error::input(format!(
            "header has {n} label columns and {features} feature columns"
        )));
    }
    let d_l = features / n;
    let expected = header(n, d_l);
    if let Some(k) = (0..head.len()).find(|&k| head[k] != expected[k]) {
        return Err(Error::input(format!(
            "header column {} is {:?}, expected {:?}",
            k + 1,
            head[k],
            expected[k]
        )));
    }
    Ok((n, d_l))
}
