//! Popularity-weighted federation sampling.
//!
//! Draws are with replacement, by inverse CDF over integer cumulative weights.
//! The generator is ChaCha20 (`rand_chacha::ChaCha20Rng`) seeded through
//! `SeedableRng::seed_from_u64`, and each draw consumes exactly one `next_u64`
//! output `u`, mapped to a slot in `[0, total)` as `(u * total) >> 64`. Both
//! the stream and the mapping are fixed-width integer arithmetic, so a given
//! `(table, n, seed, filter)` produces the same list on every platform.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use num_integer::Integer;
use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiles::{validate_against_host, Catalog, HardwareProfile, HostCapabilities};
use crate::Fraction;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("popularity table row {row}: {message}")]
    Parse { row: u64, message: String },
    #[error("popularity table row {row}: unknown profile id '{id}'")]
    UnknownProfileId { row: u64, id: String },
    #[error("popularity table has no entry with a positive weight")]
    EmptyTable,
    #[error("sampler filter excludes every entry with a positive weight")]
    FilterExcludesAll,
    #[error("weights too finely grained to combine exactly")]
    WeightOverflow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopularityEntry {
    pub profile_id: String,
    pub weight: Fraction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopularityTable {
    pub entries: Vec<PopularityEntry>,
    pub source_label: String,
}

impl PopularityTable {
    /// Builds a table, checking ids against `catalog` and requiring at least
    /// one positive weight.
    pub fn new(
        entries: Vec<PopularityEntry>,
        source_label: impl Into<String>,
        catalog: &Catalog,
    ) -> Result<Self, SamplerError> {
        for (i, e) in entries.iter().enumerate() {
            if !catalog.contains(&e.profile_id) {
                return Err(SamplerError::UnknownProfileId {
                    row: i as u64 + 1,
                    id: e.profile_id.clone(),
                });
            }
        }
        if entries.iter().all(|e| e.weight == Fraction::from_integer(0)) {
            return Err(SamplerError::EmptyTable);
        }
        Ok(PopularityTable {
            entries,
            source_label: source_label.into(),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerFilter {
    #[serde(default)]
    pub allowed_generations: Option<BTreeSet<String>>,
    #[serde(default)]
    pub max_vram_mib: Option<u64>,
    #[serde(default)]
    pub max_cuda_cores: Option<u32>,
    #[serde(default)]
    pub require_emulable_on: Option<HostCapabilities>,
}

impl SamplerFilter {
    pub fn admits(&self, profile: &HardwareProfile) -> bool {
        if let Some(gens) = &self.allowed_generations {
            match &profile.gpu {
                Some(gpu) if gens.contains(&gpu.generation) => {}
                _ => return false,
            }
        }
        if let (Some(cap), Some(gpu)) = (self.max_vram_mib, &profile.gpu) {
            if gpu.vram_mib > cap {
                return false;
            }
        }
        if let (Some(cap), Some(gpu)) = (self.max_cuda_cores, &profile.gpu) {
            if gpu.cuda_cores > cap {
                return false;
            }
        }
        if let Some(host) = &self.require_emulable_on {
            if !validate_against_host(profile, host).is_emulable() {
                return false;
            }
        }
        true
    }
}

/// Parses a weight: a decimal in `[0, 1]` or a percentage such as `12.5%`.
pub fn parse_weight(raw: &str) -> Result<Fraction, String> {
    let raw = raw.trim();
    let (digits, percent) = match raw.strip_suffix('%') {
        Some(d) => (d.trim(), true),
        None => (raw, false),
    };
    let (int_part, frac_part) = digits.split_once('.').unwrap_or((digits, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(format!("invalid weight '{raw}'"));
    }
    if !int_part.bytes().chain(frac_part.bytes()).all(|b| b.is_ascii_digit()) {
        return Err(format!("invalid weight '{raw}'"));
    }
    if frac_part.len() > 12 || int_part.len() > 6 {
        return Err(format!("weight '{raw}' has too many digits"));
    }
    let int: u64 = if int_part.is_empty() { 0 } else { int_part.parse().unwrap() };
    let frac: u64 = if frac_part.is_empty() { 0 } else { frac_part.parse().unwrap() };
    let mut denom = 10u64.pow(frac_part.len() as u32);
    let numer = int * denom + frac;
    if percent {
        denom *= 100;
    }
    let w = Fraction::new(numer, denom);
    if w > Fraction::from_integer(1) {
        return Err(format!("weight '{raw}' exceeds 1 (100%)"));
    }
    Ok(w)
}

#[derive(Debug, Deserialize)]
struct Row {
    profile_id: String,
    weight: String,
    source_label: String,
}

/// Reads a popularity CSV (`profile_id,weight,source_label`, `#` comments)
/// and resolves every row against `catalog`.
pub fn load_popularity_table(
    path: impl AsRef<Path>,
    catalog: &Catalog,
) -> Result<PopularityTable, SamplerError> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|source| SamplerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_popularity_csv(&content, catalog)
}

pub fn parse_popularity_csv(content: &str, catalog: &Catalog) -> Result<PopularityTable, SamplerError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(content.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| SamplerError::Parse { row: 1, message: e.to_string() })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["profile_id", "weight", "source_label"] {
        return Err(SamplerError::Parse {
            row: 1,
            message: "expected header 'profile_id,weight,source_label'".into(),
        });
    }

    let mut entries = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| SamplerError::Parse {
            row: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let row = record.position().map_or(0, |p| p.line());
        let parsed: Row = record
            .deserialize(Some(&headers))
            .map_err(|e| SamplerError::Parse { row, message: e.to_string() })?;
        if !catalog.contains(&parsed.profile_id) {
            return Err(SamplerError::UnknownProfileId { row, id: parsed.profile_id });
        }
        let weight = parse_weight(&parsed.weight).map_err(|message| SamplerError::Parse { row, message })?;
        if !labels.contains(&parsed.source_label) {
            labels.push(parsed.source_label);
        }
        entries.push(PopularityEntry {
            profile_id: parsed.profile_id,
            weight,
        });
    }
    PopularityTable::new(entries, labels.join(";"), catalog)
}

/// Integer cumulative weights over the entries admitted by `filter`.
struct Cdf<'a> {
    ids: Vec<&'a str>,
    cumulative: Vec<u64>,
}

impl<'a> Cdf<'a> {
    fn build(
        table: &'a PopularityTable,
        catalog: &Catalog,
        filter: &SamplerFilter,
    ) -> Result<Self, SamplerError> {
        let admitted: Vec<&PopularityEntry> = table
            .entries
            .iter()
            .filter(|e| *e.weight.numer() > 0)
            .filter(|e| catalog.get(&e.profile_id).is_some_and(|p| filter.admits(p)))
            .collect();
        if admitted.is_empty() {
            return Err(SamplerError::FilterExcludesAll);
        }
        let common = admitted
            .iter()
            .try_fold(1u128, |acc, e| {
                let d = u128::from(*e.weight.denom());
                let l = acc / acc.gcd(&d) * d;
                (l <= u128::from(u64::MAX)).then_some(l)
            })
            .ok_or(SamplerError::WeightOverflow)? as u64;
        let mut ids = Vec::with_capacity(admitted.len());
        let mut cumulative = Vec::with_capacity(admitted.len());
        let mut total = 0u64;
        for e in admitted {
            let scaled = e
                .weight
                .numer()
                .checked_mul(common / e.weight.denom())
                .ok_or(SamplerError::WeightOverflow)?;
            total = total.checked_add(scaled).ok_or(SamplerError::WeightOverflow)?;
            ids.push(e.profile_id.as_str());
            cumulative.push(total);
        }
        Ok(Cdf { ids, cumulative })
    }

    fn total(&self) -> u64 {
        *self.cumulative.last().expect("nonempty by construction")
    }

    fn pick(&self, u: u64) -> &'a str {
        let target = ((u128::from(u) * u128::from(self.total())) >> 64) as u64;
        let idx = self.cumulative.partition_point(|&c| c <= target);
        self.ids[idx]
    }
}

/// Draws `n` profile ids with replacement, proportionally to the table's
/// weights renormalized over the entries `filter` admits.
pub fn sample_federation(
    table: &PopularityTable,
    catalog: &Catalog,
    n: usize,
    seed: u64,
    filter: &SamplerFilter,
) -> Result<Vec<String>, SamplerError> {
    let cdf = Cdf::build(table, catalog, filter)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| cdf.pick(rng.next_u64()).to_string()).collect())
}

pub fn describe_sample<S: AsRef<str>>(sample: &[S]) -> BTreeMap<String, usize> {
    let mut hist = BTreeMap::new();
    for id in sample {
        *hist.entry(id.as_ref().to_string()).or_insert(0) += 1;
    }
    hist
}
