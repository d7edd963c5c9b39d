//! Binary sample stream, vocabulary file and manifest.
//!
//! Sample stream layout (little-endian): the magic `DMSAMP1`, a `u64`
//! record count, then per record a `u32` byte length followed by
//! `user u32, n u32, n × item u32, n × category u32, n × timestamp i64,
//! target item u32, target category u32, target timestamp i64, label u8`.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Sample, Vocab};
use crate::{Error, Result};

pub const SAMPLES_MAGIC: &[u8; 7] = b"DMSAMP1";

fn encode(s: &Sample, buf: &mut Vec<u8>) {
    buf.clear();
    let u32le = |buf: &mut Vec<u8>, v: usize| buf.extend_from_slice(&(v as u32).to_le_bytes());
    u32le(buf, s.user);
    u32le(buf, s.items.len());
    for &i in &s.items {
        u32le(buf, i);
    }
    for &c in &s.categories {
        u32le(buf, c);
    }
    for &t in &s.timestamps {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    u32le(buf, s.target_item);
    u32le(buf, s.target_category);
    buf.extend_from_slice(&s.target_timestamp.to_le_bytes());
    buf.push(s.label);
}

pub fn write_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(SAMPLES_MAGIC)?;
    w.write_all(&(samples.len() as u64).to_le_bytes())?;
    let mut buf = Vec::new();
    for s in samples {
        if s.items.len() != s.categories.len() || s.items.len() != s.timestamps.len() {
            return Err(Error::Data("sample sequence fields differ in length".into()));
        }
        encode(s, &mut buf);
        w.write_all(&(buf.len() as u32).to_le_bytes())?;
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Data("truncated sample record".into()))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode(bytes: &[u8]) -> Result<Sample> {
    let mut c = Cursor { bytes, at: 0 };
    let user = c.u32()?;
    let n = c.u32()?;
    if n.saturating_mul(16) > bytes.len() {
        return Err(Error::Data(format!("sample claims {n} positions in {} bytes", bytes.len())));
    }
    let items = (0..n).map(|_| c.u32()).collect::<Result<_>>()?;
    let categories = (0..n).map(|_| c.u32()).collect::<Result<_>>()?;
    let timestamps = (0..n).map(|_| c.i64()).collect::<Result<_>>()?;
    let s = Sample {
        user,
        items,
        categories,
        timestamps,
        target_item: c.u32()?,
        target_category: c.u32()?,
        target_timestamp: c.i64()?,
        label: c.take(1)?[0],
    };
    if c.at != bytes.len() {
        return Err(Error::Data("trailing bytes in sample record".into()));
    }
    if s.label > 1 {
        return Err(Error::Data(format!("label {} is not 0 or 1", s.label)));
    }
    Ok(s)
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>> {
    let mut bytes = Vec::new();
    BufReader::new(fs::File::open(path)?).read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, at: 0 };
    let magic = c.take(SAMPLES_MAGIC.len()).map_err(|_| bad_magic(path))?;
    if magic != SAMPLES_MAGIC {
        return Err(bad_magic(path));
    }
    let count = u64::from_le_bytes(c.take(8)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count.min(bytes.len() / 29));
    for _ in 0..count {
        let len = c.u32()?;
        out.push(decode(c.take(len)?)?);
    }
    if c.at != bytes.len() {
        return Err(Error::Data(format!("{}: data after the last record", path.display())));
    }
    Ok(out)
}

fn bad_magic(path: &Path) -> Error {
    Error::Data(format!("{}: not a DMSAMP1 sample file", path.display()))
}

/// Tab-separated `kind index raw [category]` lines.
pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut out = String::new();
    for (i, u) in vocab.users().iter().enumerate().skip(1) {
        writeln!(out, "user\t{i}\t{u}").unwrap();
    }
    for (i, c) in vocab.categories().iter().enumerate().skip(1) {
        writeln!(out, "category\t{i}\t{c}").unwrap();
    }
    for (i, item) in vocab.items().iter().enumerate().skip(1) {
        writeln!(out, "item\t{i}\t{item}\t{}", vocab.category_of(i)).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path)?;
    let pad = || vec!["<pad>".to_string()];
    let (mut users, mut items, mut categories) = (pad(), pad(), pad());
    let mut item_category = vec![0];
    for (n, line) in text.lines().enumerate() {
        let bad = || Error::Data(format!("{}:{}: malformed vocabulary line", path.display(), n + 1));
        let f: Vec<&str> = line.split('\t').collect();
        let index: usize = f.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let raw = f.get(2).ok_or_else(bad)?.to_string();
        let table = match f[0] {
            "user" => &mut users,
            "category" => &mut categories,
            "item" => {
                item_category.push(f.get(3).and_then(|s| s.parse().ok()).ok_or_else(bad)?);
                &mut items
            }
            _ => return Err(bad()),
        };
        if index != table.len() {
            return Err(bad());
        }
        table.push(raw);
    }
    Vocab::from_tables(users, items, categories, item_category)
}

/// Plain-text summary of a prepared dataset, written as `key=value` lines in
/// a fixed order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub source: String,
    pub seed: u64,
    pub records: usize,
    pub malformed_lines: usize,
    pub users: usize,
    pub items: usize,
    pub categories: usize,
    pub split_timestamp: i64,
    pub split_fraction: String,
    pub n_max: usize,
    pub min_interactions: usize,
    pub neg_per_pos: usize,
    pub train_samples: usize,
    pub train_positives: usize,
    pub test_samples: usize,
    pub test_positives: usize,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = String::from("format=DMSAMP1\n");
        for (k, v) in self.entries() {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("source", self.source.clone()),
            ("seed", self.seed.to_string()),
            ("records", self.records.to_string()),
            ("malformed_lines", self.malformed_lines.to_string()),
            ("users", self.users.to_string()),
            ("items", self.items.to_string()),
            ("categories", self.categories.to_string()),
            ("split_timestamp", self.split_timestamp.to_string()),
            ("split_fraction", self.split_fraction.clone()),
            ("n_max", self.n_max.to_string()),
            ("min_interactions", self.min_interactions.to_string()),
            ("neg_per_pos", self.neg_per_pos.to_string()),
            ("train_samples", self.train_samples.to_string()),
            ("train_positives", self.train_positives.to_string()),
            ("test_samples", self.test_samples.to_string()),
            ("test_positives", self.test_positives.to_string()),
        ]
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("malformed manifest line {line:?}")))?;
            let num = |v: &str| v.parse::<usize>().map_err(|_| Error::Data(format!("bad value for {k}: {v:?}")));
            match k {
                "format" if v == "DMSAMP1" => {}
                "format" => return Err(Error::Data(format!("unsupported sample format {v:?}"))),
                "source" => m.source = v.to_string(),
                "seed" => m.seed = v.parse().map_err(|_| Error::Data(format!("bad seed {v:?}")))?,
                "records" => m.records = num(v)?,
                "malformed_lines" => m.malformed_lines = num(v)?,
                "users" => m.users = num(v)?,
                "items" => m.items = num(v)?,
                "categories" => m.categories = num(v)?,
                "split_timestamp" => {
                    m.split_timestamp = v.parse().map_err(|_| Error::Data(format!("bad split {v:?}")))?
                }
                "split_fraction" => m.split_fraction = v.to_string(),
                "n_max" => m.n_max = num(v)?,
                "min_interactions" => m.min_interactions = num(v)?,
                "neg_per_pos" => m.neg_per_pos = num(v)?,
                "train_samples" => m.train_samples = num(v)?,
                "train_positives" => m.train_positives = num(v)?,
                "test_samples" => m.test_samples = num(v)?,
                "test_positives" => m.test_positives = num(v)?,
                _ => return Err(Error::Data(format!("unknown manifest key {k:?}"))),
            }
        }
        Ok(m)
    }
}
