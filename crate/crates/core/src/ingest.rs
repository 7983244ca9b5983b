//! Loading, joining and cleaning of the four relational source tables.
//!
//! Amounts are carried as integer cents from the moment they are parsed;
//! timestamps as UTC epoch milliseconds.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantile;

pub const TRANSACTIONS_HEADER: [&str; 5] = ["txn_id", "card_id", "merchant_id", "timestamp", "amount"];
pub const CARDHOLDERS_HEADER: [&str; 3] = ["card_id", "name", "region"];
pub const MERCHANTS_HEADER: [&str; 3] = ["merchant_id", "name", "category_id"];
pub const CATEGORIES_HEADER: [&str; 2] = ["category_id", "label"];

/// Region assigned to cardholders whose region cell is empty.
pub const DEFAULT_REGION: &str = "unknown";
/// Label assigned when a merchant's category cannot be resolved.
pub const DEFAULT_CATEGORY: &str = "uncategorized";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing input file {0}")]
    MissingFile(PathBuf),
    #[error("{file}: line {line}: {reason}")]
    Malformed { file: String, line: u64, reason: String },
    #[error("{file}: duplicate primary key {key:?} on line {line}")]
    DuplicateKey { file: String, key: String, line: u64 },
    #[error("cap quantile {0} outside (0, 1]")]
    CapQuantile(f64),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTransaction {
    pub txn_id: String,
    pub card_id: String,
    pub merchant_id: String,
    pub timestamp_ms: i64,
    pub amount_cents: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cardholder {
    pub card_id: String,
    pub name: String,
    pub region: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Merchant {
    pub merchant_id: String,
    pub name: String,
    pub category_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub category_id: String,
    pub label: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawTables {
    pub transactions: Vec<RawTransaction>,
    pub cardholders: Vec<Cardholder>,
    pub merchants: Vec<Merchant>,
    pub categories: Vec<Category>,
}

/// One joined, validated transaction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanTransaction {
    pub txn_id: String,
    pub card_id: String,
    pub merchant_id: String,
    pub category_label: String,
    pub region: String,
    pub timestamp_ms: i64,
    pub amount_cents: i64,
    pub cap_applied: bool,
    pub timestamp_suspect: bool,
    /// Position of the row in the source transactions table.
    pub seq: u64,
}

impl CleanTransaction {
    pub fn amount(&self) -> f64 {
        self.amount_cents as f64 / 100.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_in: usize,
    pub rows_out: usize,
    pub dropped_missing_id: usize,
    pub capped: usize,
    pub suspect_timestamps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CleanOptions {
    pub cap_enabled: bool,
    pub cap_quantile: f64,
    /// Latest plausible timestamp (epoch ms); rows after it are suspect.
    pub ingestion_cutoff_ms: Option<i64>,
}

impl Default for CleanOptions {
    fn default() -> Self {
        Self { cap_enabled: true, cap_quantile: 0.999, ingestion_cutoff_ms: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TablePaths {
    pub transactions: PathBuf,
    pub cardholders: PathBuf,
    pub merchants: PathBuf,
    pub categories: PathBuf,
}

impl TablePaths {
    /// Conventional file names inside one directory.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            transactions: dir.join("transactions.csv"),
            cardholders: dir.join("cardholders.csv"),
            merchants: dir.join("merchants.csv"),
            categories: dir.join("categories.csv"),
        }
    }
}

pub fn parse_timestamp(s: &str) -> Option<i64> {
    DateTime::parse_from_rfc3339(s.trim()).ok().map(|t| t.with_timezone(&Utc).timestamp_millis())
}

pub fn format_timestamp(ms: i64) -> String {
    DateTime::<Utc>::from_timestamp_millis(ms)
        .expect("timestamp in chrono range")
        .to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Parses a non-negative decimal into cents, rounding half up past the
/// second fractional digit.
pub fn parse_amount_cents(s: &str) -> Option<i64> {
    let s = s.trim();
    let (int_part, frac_part) = match s.split_once('.') {
        Some((i, f)) => (i, f),
        None => (s, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.bytes().all(|b| b.is_ascii_digit()) || !frac_part.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let whole: i64 = if int_part.is_empty() { 0 } else { int_part.parse().ok()? };
    let digits: Vec<i64> = frac_part.bytes().map(|b| (b - b'0') as i64).collect();
    let mut cents = digits.first().copied().unwrap_or(0) * 10 + digits.get(1).copied().unwrap_or(0);
    if digits.get(2).copied().unwrap_or(0) >= 5 {
        cents += 1;
    }
    whole.checked_mul(100)?.checked_add(cents)
}

pub fn format_amount(cents: i64) -> String {
    format!("{}.{:02}", cents / 100, cents % 100)
}

fn open_table(path: &Path, header: &[&str]) -> Result<csv::Reader<File>, IngestError> {
    let file = File::open(path).map_err(|_| IngestError::MissingFile(path.to_path_buf()))?;
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let found: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if found != header {
        return Err(IngestError::Malformed {
            file: path.display().to_string(),
            line: 1,
            reason: format!("expected header {}, found {}", header.join(","), found.join(",")),
        });
    }
    Ok(rdr)
}

/// Reads every record, checking arity, and hands `(line, fields)` to `f`.
fn read_table<T>(
    path: &Path,
    header: &[&str],
    mut f: impl FnMut(u64, &csv::StringRecord) -> Result<T, String>,
) -> Result<Vec<T>, IngestError> {
    let mut rdr = open_table(path, header)?;
    let file = path.display().to_string();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(IngestError::Malformed {
                file,
                line,
                reason: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        out.push(f(line, &rec).map_err(|reason| IngestError::Malformed { file: file.clone(), line, reason })?);
    }
    Ok(out)
}

fn check_unique<'a>(file: &Path, keys: impl Iterator<Item = (&'a str, u64)>) -> Result<(), IngestError> {
    let mut seen = HashMap::new();
    for (k, line) in keys {
        if seen.insert(k, line).is_some() {
            return Err(IngestError::DuplicateKey { file: file.display().to_string(), key: k.to_string(), line });
        }
    }
    Ok(())
}

pub fn load_tables(paths: &TablePaths) -> Result<RawTables, IngestError> {
    let transactions = read_table(&paths.transactions, &TRANSACTIONS_HEADER, |_, r| {
        let timestamp_ms = parse_timestamp(&r[3]).ok_or_else(|| format!("unparseable timestamp {:?}", &r[3]))?;
        let amount_cents = parse_amount_cents(&r[4]).ok_or_else(|| format!("unparseable amount {:?}", &r[4]))?;
        Ok(RawTransaction {
            txn_id: r[0].trim().to_string(),
            card_id: r[1].trim().to_string(),
            merchant_id: r[2].trim().to_string(),
            timestamp_ms,
            amount_cents,
        })
    })?;
    let cardholders = read_table(&paths.cardholders, &CARDHOLDERS_HEADER, |line, r| {
        Ok((line, Cardholder { card_id: r[0].trim().into(), name: r[1].into(), region: r[2].trim().into() }))
    })?;
    check_unique(&paths.cardholders, cardholders.iter().map(|(l, c)| (c.card_id.as_str(), *l)))?;
    let merchants = read_table(&paths.merchants, &MERCHANTS_HEADER, |line, r| {
        Ok((line, Merchant { merchant_id: r[0].trim().into(), name: r[1].into(), category_id: r[2].trim().into() }))
    })?;
    check_unique(&paths.merchants, merchants.iter().map(|(l, m)| (m.merchant_id.as_str(), *l)))?;
    let categories = read_table(&paths.categories, &CATEGORIES_HEADER, |line, r| {
        Ok((line, Category { category_id: r[0].trim().into(), label: r[1].trim().into() }))
    })?;
    check_unique(&paths.categories, categories.iter().map(|(l, c)| (c.category_id.as_str(), *l)))?;

    Ok(RawTables {
        transactions,
        cardholders: cardholders.into_iter().map(|(_, c)| c).collect(),
        merchants: merchants.into_iter().map(|(_, m)| m).collect(),
        categories: categories.into_iter().map(|(_, c)| c).collect(),
    })
}

fn sort_key(a: &CleanTransaction, b: &CleanTransaction) -> std::cmp::Ordering {
    a.card_id
        .cmp(&b.card_id)
        .then(a.timestamp_ms.cmp(&b.timestamp_ms))
        .then(a.txn_id.cmp(&b.txn_id))
        .then(a.amount_cents.cmp(&b.amount_cents))
        .then(a.merchant_id.cmp(&b.merchant_id))
}

/// Joins transactions to their dimension rows. Rows whose card or merchant
/// is unknown (or blank) are dropped and counted; output is ordered by
/// `(card_id, timestamp)`.
pub fn join_unified(raw: &RawTables) -> (Vec<CleanTransaction>, IngestReport) {
    let regions: HashMap<&str, &str> =
        raw.cardholders.iter().map(|c| (c.card_id.as_str(), c.region.as_str())).collect();
    let labels: HashMap<&str, &str> =
        raw.categories.iter().map(|c| (c.category_id.as_str(), c.label.as_str())).collect();
    let merchant_labels: HashMap<&str, &str> = raw
        .merchants
        .iter()
        .map(|m| {
            let label = labels.get(m.category_id.as_str()).copied().filter(|l| !l.is_empty());
            (m.merchant_id.as_str(), label.unwrap_or(DEFAULT_CATEGORY))
        })
        .collect();

    let mut out = Vec::with_capacity(raw.transactions.len());
    let mut dropped = 0;
    for (seq, t) in raw.transactions.iter().enumerate() {
        let region = if t.card_id.is_empty() { None } else { regions.get(t.card_id.as_str()) };
        let label = if t.merchant_id.is_empty() { None } else { merchant_labels.get(t.merchant_id.as_str()) };
        match (region, label) {
            (Some(region), Some(label)) => out.push(CleanTransaction {
                txn_id: t.txn_id.clone(),
                card_id: t.card_id.clone(),
                merchant_id: t.merchant_id.clone(),
                category_label: label.to_string(),
                region: if region.is_empty() { DEFAULT_REGION.to_string() } else { region.to_string() },
                timestamp_ms: t.timestamp_ms,
                amount_cents: t.amount_cents,
                cap_applied: false,
                timestamp_suspect: false,
                seq: seq as u64,
            }),
            _ => dropped += 1,
        }
    }
    out.sort_by(sort_key);
    let report = IngestReport {
        rows_in: raw.transactions.len(),
        rows_out: out.len(),
        dropped_missing_id: dropped,
        ..Default::default()
    };
    (out, report)
}

/// Caps extreme amounts at the nearest-rank `cap_quantile` and flags
/// suspect timestamps. Rows are never removed.
///
/// A timestamp is suspect when it lies after `ingestion_cutoff_ms`, or when
/// it is earlier than a row of the same card that appeared before it in the
/// source table (a negative interval in arrival order).
pub fn clean_values(
    mut txns: Vec<CleanTransaction>,
    opts: &CleanOptions,
) -> Result<(Vec<CleanTransaction>, IngestReport), IngestError> {
    if !(opts.cap_quantile > 0.0 && opts.cap_quantile <= 1.0) {
        return Err(IngestError::CapQuantile(opts.cap_quantile));
    }
    if opts.cap_enabled && !txns.is_empty() {
        let amounts: Vec<i64> = txns.iter().map(|t| t.amount_cents).collect();
        let cap = quantile::quantile(&amounts, opts.cap_quantile).expect("non-empty");
        for t in txns.iter_mut().filter(|t| t.amount_cents > cap) {
            t.amount_cents = cap;
            t.cap_applied = true;
        }
    }

    let mut by_card: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in txns.iter().enumerate() {
        by_card.entry(t.card_id.as_str()).or_default().push(i);
    }
    let mut suspect = vec![false; txns.len()];
    for idx in by_card.values() {
        let mut arrival = idx.clone();
        arrival.sort_by_key(|&i| txns[i].seq);
        let mut latest = i64::MIN;
        for i in arrival {
            let ts = txns[i].timestamp_ms;
            if ts < latest {
                suspect[i] = true;
            }
            latest = latest.max(ts);
        }
    }
    for (i, t) in txns.iter_mut().enumerate() {
        let future = opts.ingestion_cutoff_ms.is_some_and(|c| t.timestamp_ms > c);
        t.timestamp_suspect |= suspect[i] || future;
    }

    let report = IngestReport {
        rows_in: txns.len(),
        rows_out: txns.len(),
        dropped_missing_id: 0,
        capped: txns.iter().filter(|t| t.cap_applied).count(),
        suspect_timestamps: txns.iter().filter(|t| t.timestamp_suspect).count(),
    };
    Ok((txns, report))
}

/// `load → join → clean` with a single combined report.
pub fn ingest(paths: &TablePaths, opts: &CleanOptions) -> Result<(Vec<CleanTransaction>, IngestReport), IngestError> {
    let raw = load_tables(paths)?;
    let (joined, join_report) = join_unified(&raw);
    let (clean, clean_report) = clean_values(joined, opts)?;
    Ok((
        clean,
        IngestReport {
            capped: clean_report.capped,
            suspect_timestamps: clean_report.suspect_timestamps,
            ..join_report
        },
    ))
}

const CLEAN_HEADER: [&str; 10] = [
    "txn_id",
    "card_id",
    "merchant_id",
    "category_label",
    "region",
    "timestamp",
    "amount",
    "cap_applied",
    "timestamp_suspect",
    "seq",
];

pub fn write_clean_csv(path: &Path, txns: &[CleanTransaction]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CLEAN_HEADER)?;
    for t in txns {
        w.write_record([
            t.txn_id.as_str(),
            &t.card_id,
            &t.merchant_id,
            &t.category_label,
            &t.region,
            &format_timestamp(t.timestamp_ms),
            &format_amount(t.amount_cents),
            if t.cap_applied { "1" } else { "0" },
            if t.timestamp_suspect { "1" } else { "0" },
            &t.seq.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_clean_csv(path: &Path) -> Result<Vec<CleanTransaction>, IngestError> {
    read_table(path, &CLEAN_HEADER, |_, r| {
        Ok(CleanTransaction {
            txn_id: r[0].into(),
            card_id: r[1].into(),
            merchant_id: r[2].into(),
            category_label: r[3].into(),
            region: r[4].into(),
            timestamp_ms: parse_timestamp(&r[5]).ok_or("bad timestamp")?,
            amount_cents: parse_amount_cents(&r[6]).ok_or("bad amount")?,
            cap_applied: &r[7] == "1",
            timestamp_suspect: &r[8] == "1",
            seq: r[9].parse().map_err(|_| "bad seq")?,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn txn(id: &str, card: &str, merchant: &str, ts: i64, cents: i64) -> RawTransaction {
        RawTransaction {
            txn_id: id.into(),
            card_id: card.into(),
            merchant_id: merchant.into(),
            timestamp_ms: ts,
            amount_cents: cents,
        }
    }

    fn clean(card: &str, ts: i64, cents: i64, seq: u64) -> CleanTransaction {
        CleanTransaction {
            txn_id: format!("t{seq}"),
            card_id: card.into(),
            merchant_id: "m1".into(),
            category_label: "pub".into(),
            region: "metro".into(),
            timestamp_ms: ts,
            amount_cents: cents,
            cap_applied: false,
            timestamp_suspect: false,
            seq,
        }
    }

    fn fixture() -> RawTables {
        RawTables {
            transactions: vec![
                txn("t1", "c2", "m1", 3_000, 1_000),
                txn("t2", "c1", "m2", 2_000, 2_500),
                txn("t3", "c1", "m1", 1_000, 999),
                txn("t4", "c2", "m2", 1_500, 4_200),
                txn("t5", "c1", "m2", 500, 100),
            ],
            cardholders: vec![
                Cardholder { card_id: "c1".into(), name: "A".into(), region: "metro".into() },
                Cardholder { card_id: "c2".into(), name: "B".into(), region: "".into() },
            ],
            merchants: vec![
                Merchant { merchant_id: "m1".into(), name: "Bar One".into(), category_id: "k1".into() },
                Merchant { merchant_id: "m2".into(), name: "Cart".into(), category_id: "k2".into() },
            ],
            categories: vec![
                Category { category_id: "k1".into(), label: "pub".into() },
                Category { category_id: "k2".into(), label: "food truck".into() },
            ],
        }
    }

    #[test]
    fn join_matches_hand_join() {
        let (rows, report) = join_unified(&fixture());
        // Hand join: sorted by (card, time).
        let got: Vec<(&str, &str, &str)> =
            rows.iter().map(|r| (r.txn_id.as_str(), r.card_id.as_str(), r.category_label.as_str())).collect();
        assert_eq!(
            got,
            vec![
                ("t5", "c1", "food truck"),
                ("t3", "c1", "pub"),
                ("t2", "c1", "food truck"),
                ("t4", "c2", "food truck"),
                ("t1", "c2", "pub"),
            ]
        );
        assert_eq!(rows[3].region, DEFAULT_REGION);
        assert_eq!(report, IngestReport { rows_in: 5, rows_out: 5, ..Default::default() });
    }

    #[test]
    fn unknown_merchant_is_dropped() {
        let mut raw = fixture();
        raw.transactions.truncate(3);
        raw.transactions[1].merchant_id = "nope".into();
        let (rows, report) = join_unified(&raw);
        assert_eq!(rows.len(), 2);
        assert_eq!(report.dropped_missing_id, 1);
        assert_eq!(report.rows_out + report.dropped_missing_id, report.rows_in);
    }

    #[test]
    fn empty_join() {
        let (rows, report) = join_unified(&RawTables::default());
        assert!(rows.is_empty());
        assert_eq!((report.rows_in, report.rows_out), (0, 0));
    }

    #[test]
    fn identical_amounts_never_capped() {
        let txns: Vec<_> = (0..1000).map(|i| clean("c", i, 5_000, i as u64)).collect();
        let (out, report) = clean_values(txns, &CleanOptions::default()).unwrap();
        assert_eq!(report.capped, 0);
        assert!(out.iter().all(|t| t.amount_cents == 5_000));
    }

    #[test]
    fn cap_matches_sort_oracle() {
        let txns: Vec<_> = (1..=1000).map(|i| clean("c", i, i * 100, i as u64)).collect();
        let mut sorted: Vec<i64> = txns.iter().map(|t| t.amount_cents).collect();
        sorted.sort();
        let cap = sorted[(0.999f64 * 1000.0).ceil() as usize - 1];
        let (out, report) = clean_values(txns.clone(), &CleanOptions::default()).unwrap();
        assert_eq!(cap, 99_900);
        assert_eq!(report.capped, sorted.iter().filter(|&&a| a > cap).count());
        for (before, after) in txns.iter().zip(&out) {
            assert_eq!(after.cap_applied, before.amount_cents > cap);
            assert_eq!(after.amount_cents, before.amount_cents.min(cap));
        }
    }

    #[test]
    fn future_timestamp_is_suspect() {
        let txns = vec![clean("c", 1_000, 100, 0), clean("c", 9_000, 100, 1)];
        let opts = CleanOptions { ingestion_cutoff_ms: Some(5_000), ..Default::default() };
        let (out, report) = clean_values(txns, &opts).unwrap();
        assert!(!out[0].timestamp_suspect);
        assert!(out[1].timestamp_suspect);
        assert_eq!(report.suspect_timestamps, 1);
    }

    #[test]
    fn negative_arrival_interval_is_suspect() {
        // Second arrival is dated before the first: negative interval.
        let txns = vec![clean("c", 1_000, 100, 1), clean("c", 2_000, 100, 0)];
        let (out, _) = clean_values(txns, &CleanOptions::default()).unwrap();
        assert!(out[0].timestamp_suspect);
        assert!(!out[1].timestamp_suspect);
    }

    #[test]
    fn cap_quantile_out_of_range() {
        for q in [0.0, 1.5, -0.1, f64::NAN] {
            let opts = CleanOptions { cap_quantile: q, ..Default::default() };
            assert!(matches!(clean_values(vec![], &opts), Err(IngestError::CapQuantile(_))));
        }
    }

    #[test]
    fn amount_parsing() {
        assert_eq!(parse_amount_cents("12.34"), Some(1234));
        assert_eq!(parse_amount_cents("12"), Some(1200));
        assert_eq!(parse_amount_cents("0.5"), Some(50));
        assert_eq!(parse_amount_cents("1.005"), Some(101));
        assert_eq!(parse_amount_cents(".75"), Some(75));
        assert_eq!(parse_amount_cents("abc"), None);
        assert_eq!(parse_amount_cents("-3.00"), None);
        assert_eq!(parse_amount_cents(""), None);
        assert_eq!(format_amount(1234), "12.34");
        assert_eq!(format_amount(5), "0.05");
    }

    fn write(dir: &Path, name: &str, body: &str) {
        let mut f = File::create(dir.join(name)).unwrap();
        f.write_all(body.as_bytes()).unwrap();
    }

    fn write_dims(dir: &Path) {
        write(dir, "cardholders.csv", "card_id,name,region\nc1,Ann,metro\nc2,Bo,rural\nc3,Cy,metro\n");
        write(dir, "merchants.csv", "merchant_id,name,category_id\nm1,Bar,k1\nm2,Cart,k2\n");
        write(dir, "categories.csv", "category_id,label\nk1,pub\nk2,food truck\n");
    }

    #[test]
    fn load_counts_rows() {
        let dir = tempfile::tempdir().unwrap();
        write_dims(dir.path());
        let mut body = String::from("txn_id,card_id,merchant_id,timestamp,amount\n");
        for i in 0..5 {
            body.push_str(&format!("t{i},c1,m1,2024-07-06T00:30:00.000Z,{i}.50\n"));
        }
        write(dir.path(), "transactions.csv", &body);
        let raw = load_tables(&TablePaths::in_dir(dir.path())).unwrap();
        assert_eq!(
            (raw.transactions.len(), raw.cardholders.len(), raw.merchants.len(), raw.categories.len()),
            (5, 3, 2, 2)
        );
        assert_eq!(raw.transactions[1].amount_cents, 150);
    }

    #[test]
    fn malformed_amount_names_line() {
        let dir = tempfile::tempdir().unwrap();
        write_dims(dir.path());
        let mut body = String::from("txn_id,card_id,merchant_id,timestamp,amount\n");
        for i in 0..8 {
            let amount = if i == 5 { "ten" } else { "1.00" };
            body.push_str(&format!("t{i},c1,m1,2024-07-06T00:30:00.000Z,{amount}\n"));
        }
        write(dir.path(), "transactions.csv", &body);
        match load_tables(&TablePaths::in_dir(dir.path())) {
            Err(IngestError::Malformed { line, .. }) => assert_eq!(line, 7),
            other => panic!("expected malformed row, got {other:?}"),
        }
    }

    #[test]
    fn empty_transactions_file() {
        let dir = tempfile::tempdir().unwrap();
        write_dims(dir.path());
        write(dir.path(), "transactions.csv", "txn_id,card_id,merchant_id,timestamp,amount\n");
        let raw = load_tables(&TablePaths::in_dir(dir.path())).unwrap();
        assert!(raw.transactions.is_empty());
    }

    #[test]
    fn duplicate_dimension_key() {
        let dir = tempfile::tempdir().unwrap();
        write_dims(dir.path());
        write(dir.path(), "merchants.csv", "merchant_id,name,category_id\nm1,Bar,k1\nm1,Other,k2\n");
        write(dir.path(), "transactions.csv", "txn_id,card_id,merchant_id,timestamp,amount\n");
        assert!(matches!(
            load_tables(&TablePaths::in_dir(dir.path())),
            Err(IngestError::DuplicateKey { line: 3, .. })
        ));
    }

    #[test]
    fn missing_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_tables(&TablePaths::in_dir(dir.path())), Err(IngestError::MissingFile(_))));
    }

    #[test]
    fn clean_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rows = vec![clean("c1", 1_720_225_800_123, 1234, 0), clean("c2", 0, 5, 1)];
        rows[1].cap_applied = true;
        let path = dir.path().join("clean.csv");
        write_clean_csv(&path, &rows).unwrap();
        assert_eq!(read_clean_csv(&path).unwrap(), rows);
    }
}
