//! CSV input and output for ratings, weights and id maps.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::{Rating, RatingsTable};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatOptions {
    pub delimiter: u8,
    pub expert_column: String,
    pub cluster_column: String,
    pub rating_column: String,
    pub weight_column: String,
}

impl Default for FormatOptions {
    fn default() -> Self {
        Self {
            delimiter: b',',
            expert_column: "expert_id".into(),
            cluster_column: "cluster_id".into(),
            rating_column: "rating".into(),
            weight_column: "weight".into(),
        }
    }
}

/// Dense re-indexing of the tokens found in an input file. Integer tokens
/// are ordered numerically, anything else lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IdMap {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u64>,
}

impl IdMap {
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        tokens.sort_unstable();
        tokens.dedup();
        let numeric: Option<Vec<i128>> = tokens.iter().map(|t| t.parse().ok()).collect();
        if let Some(values) = numeric {
            let mut pairs: Vec<(i128, String)> = values.into_iter().zip(tokens).collect();
            pairs.sort();
            tokens = pairs.into_iter().map(|(_, t)| t).collect();
        }
        Self::build(tokens)
    }

    fn build(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u64)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u64> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u64) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Expert and cluster id maps for one ratings file.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IdMaps {
    pub experts: IdMap,
    pub clusters: IdMap,
}

impl IdMaps {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw: IdMaps = serde_json::from_reader(File::open(path)?)?;
        Ok(Self {
            experts: IdMap::build(raw.experts.tokens),
            clusters: IdMap::build(raw.clusters.tokens),
        })
    }
}

/// Ratings from a file together with the maps back to the original tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedRatings {
    pub table: RatingsTable,
    pub ids: IdMaps,
}

pub fn load_ratings(path: &Path, options: &FormatOptions) -> Result<LoadedRatings> {
    read_ratings(File::open(path)?, options)
}

fn reader<R: Read>(input: R, options: &FormatOptions) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(input)
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
        line: 1,
        msg: format!("missing column '{name}'"),
    })
}

fn line_of(record: &csv::StringRecord) -> usize {
    record.position().map_or(0, |p| p.line() as usize)
}

fn field<'a>(record: &'a csv::StringRecord, idx: usize, name: &str) -> Result<&'a str> {
    match record.get(idx) {
        Some(v) if !v.is_empty() => Ok(v),
        _ => Err(Error::Parse {
            line: line_of(record),
            msg: format!("missing value for '{name}'"),
        }),
    }
}

fn csv_error(e: csv::Error) -> Error {
    match e.position() {
        Some(p) => Error::Parse {
            line: p.line() as usize,
            msg: e.to_string(),
        },
        None => e.into(),
    }
}

pub fn read_ratings<R: Read>(input: R, options: &FormatOptions) -> Result<LoadedRatings> {
    let mut rdr = reader(input, options);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    if headers.is_empty() {
        return Err(Error::invalid("ratings file is empty"));
    }
    let ce = column(&headers, &options.expert_column)?;
    let cc = column(&headers, &options.cluster_column)?;
    let cr = column(&headers, &options.rating_column)?;

    let mut rows: Vec<(String, String, u8)> = Vec::new();
    let mut first_seen: HashMap<(String, String), usize> = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let line = line_of(&record);
        if record.len() != headers.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let expert = field(&record, ce, &options.expert_column)?;
        let cluster = field(&record, cc, &options.cluster_column)?;
        let token = field(&record, cr, &options.rating_column)?;
        let rating: i64 = token.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("rating '{token}' is not an integer"),
        })?;
        if !(rating == 0 || rating == 1) {
            return Err(Error::Validation {
                line,
                msg: format!("rating {rating} is not 0 or 1"),
            });
        }
        if let Some(prev) = first_seen.insert((expert.to_string(), cluster.to_string()), line) {
            return Err(Error::Validation {
                line,
                msg: format!("duplicate rating for expert '{expert}' cluster '{cluster}' (first on line {prev})"),
            });
        }
        rows.push((expert.to_string(), cluster.to_string(), rating as u8));
    }
    if rows.is_empty() {
        return Err(Error::invalid("ratings file has no data rows"));
    }
    let ids = IdMaps {
        experts: IdMap::from_tokens(rows.iter().map(|r| r.0.as_str())),
        clusters: IdMap::from_tokens(rows.iter().map(|r| r.1.as_str())),
    };
    let entries = rows
        .iter()
        .map(|(e, c, y)| Rating::new(ids.experts.id(e).unwrap(), ids.clusters.id(c).unwrap(), *y));
    let table = RatingsTable::from_entries(entries)?;
    Ok(LoadedRatings { table, ids })
}

/// Reads `expert_id,weight` rows, translating expert tokens through `experts`.
/// Tokens not in the map are ignored.
pub fn load_weights(path: &Path, experts: &IdMap, options: &FormatOptions) -> Result<BTreeMap<u64, f64>> {
    read_weights(File::open(path)?, experts, options)
}

pub fn read_weights<R: Read>(input: R, experts: &IdMap, options: &FormatOptions) -> Result<BTreeMap<u64, f64>> {
    let mut rdr = reader(input, options);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let ce = column(&headers, &options.expert_column)?;
    let cw = column(&headers, &options.weight_column)?;
    let mut out = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let line = line_of(&record);
        let token = field(&record, ce, &options.expert_column)?;
        let raw = field(&record, cw, &options.weight_column)?;
        let w: f64 = raw.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("weight '{raw}' is not a number"),
        })?;
        if !(w.is_finite() && w > 0.0) {
            return Err(Error::Validation {
                line,
                msg: format!("weight {w} must be positive and finite"),
            });
        }
        if let Some(id) = experts.id(token) {
            if out.insert(id, w).is_some() {
                return Err(Error::Validation {
                    line,
                    msg: format!("duplicate weight for expert '{token}'"),
                });
            }
        }
    }
    Ok(out)
}

/// `N / |Λᵢ|` per expert, with `N` the number of distinct clusters.
pub fn compute_weights(table: &RatingsTable) -> BTreeMap<u64, f64> {
    let n = table.n_clusters() as f64;
    table
        .experts()
        .iter()
        .map(|e| (e.id, n / e.ratings.len() as f64))
        .collect()
}

/// Writes the table as CSV. With `ids`, original tokens are written back.
pub fn write_ratings<W: Write>(
    table: &RatingsTable,
    ids: Option<&IdMaps>,
    out: W,
    options: &FormatOptions,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(options.delimiter).from_writer(out);
    w.write_record([&options.expert_column, &options.cluster_column, &options.rating_column])?;
    for r in table.entries() {
        let (e, c) = match ids {
            Some(m) => (
                token_or_err(&m.experts, r.expert_id)?.to_string(),
                token_or_err(&m.clusters, r.cluster_id)?.to_string(),
            ),
            None => (r.expert_id.to_string(), r.cluster_id.to_string()),
        };
        w.write_record([e, c, r.rating.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn token_or_err(map: &IdMap, id: u64) -> Result<&str> {
    map.token(id)
        .ok_or_else(|| Error::invalid(format!("id {id} is not in the id map")))
}
