//! Syscall naming, CVE annotations and the published policy comparison table.
//!
//! The table lists, per syscall, whether it appeared in the Nginx and
//! ComposePost policies produced by naive dynamic profiling ("baseline"),
//! by oracle-driven learning ("timeloops") and by static binary analysis
//! ("sysfilter"), plus the stock Podman seccomp filter.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

fn name_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[a-z0-9_]+$").unwrap())
}

fn cve_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^CVE-\d{4}-\d{1,7}$").unwrap())
}

/// Returns true if `s` is a well-formed CVE identifier.
pub fn is_cve(s: &str) -> bool {
    cve_re().is_match(s)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CatalogError {
    #[error("invalid syscall name {0:?}")]
    InvalidSyscall(String),
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("fixture parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("i/o error: {0}")]
    Io(String),
}

/// A syscall name. Ordering is byte-wise on the name.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SyscallId(String);

impl SyscallId {
    pub fn new(name: impl Into<String>) -> Result<Self, CatalogError> {
        let name = name.into();
        if name_re().is_match(&name) {
            Ok(Self(name))
        } else {
            Err(CatalogError::InvalidSyscall(name))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for SyscallId {
    type Error = CatalogError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::new(s)
    }
}

impl From<SyscallId> for String {
    fn from(s: SyscallId) -> String {
        s.0
    }
}

impl FromStr for SyscallId {
    type Err = CatalogError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

impl fmt::Display for SyscallId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::borrow::Borrow<str> for SyscallId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

/// Builds a syscall set from string literals.
///
/// Panics on invalid names; intended for constants and tests.
pub fn syscall_set<'a>(names: impl IntoIterator<Item = &'a str>) -> BTreeSet<SyscallId> {
    names
        .into_iter()
        .map(|n| SyscallId::new(n).expect("valid syscall name"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyscallAnnotation {
    pub syscall: SyscallId,
    pub cve: Option<String>,
}

/// Column of the comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Column {
    NginxBaseline,
    NginxTimeloops,
    NginxSysfilter,
    ComposepostBaseline,
    ComposepostTimeloops,
    ComposepostSysfilter,
    PodmanDefault,
}

impl Column {
    /// Columns in fixture order.
    pub const ALL: [Column; 7] = [
        Column::NginxBaseline,
        Column::NginxTimeloops,
        Column::NginxSysfilter,
        Column::ComposepostBaseline,
        Column::ComposepostTimeloops,
        Column::ComposepostSysfilter,
        Column::PodmanDefault,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Column::NginxBaseline => "nginx-baseline",
            Column::NginxTimeloops => "nginx-timeloops",
            Column::NginxSysfilter => "nginx-sysfilter",
            Column::ComposepostBaseline => "composepost-baseline",
            Column::ComposepostTimeloops => "composepost-timeloops",
            Column::ComposepostSysfilter => "composepost-sysfilter",
            Column::PodmanDefault => "podman-default",
        }
    }

    /// Header spelling used in the CSV file.
    pub fn header(self) -> &'static str {
        match self {
            Column::NginxBaseline => "nginx_baseline",
            Column::NginxTimeloops => "nginx_timeloops",
            Column::NginxSysfilter => "nginx_sysfilter",
            Column::ComposepostBaseline => "composepost_baseline",
            Column::ComposepostTimeloops => "composepost_timeloops",
            Column::ComposepostSysfilter => "composepost_sysfilter",
            Column::PodmanDefault => "podman_default",
        }
    }
}

impl fmt::Display for Column {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Column {
    type Err = CatalogError;

    /// Accepts both the dashed id and the CSV header spelling.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Column::ALL
            .into_iter()
            .find(|c| c.id() == s || c.header() == s)
            .ok_or_else(|| CatalogError::UnknownColumn(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableRow {
    pub syscall: SyscallId,
    pub cve: Option<String>,
    /// Free text from the CVE cell when it is not a CVE id ("numerous drivers").
    pub note: Option<String>,
    pub columns: BTreeMap<Column, bool>,
}

impl TableRow {
    pub fn get(&self, column: Column) -> bool {
        self.columns.get(&column).copied().unwrap_or(false)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PolicyComparisonTable {
    rows: Vec<TableRow>,
}

pub const FIXTURE_HEADER: &str = "syscall,cve,nginx_baseline,nginx_timeloops,nginx_sysfilter,\
composepost_baseline,composepost_timeloops,composepost_sysfilter,podman_default";

impl PolicyComparisonTable {
    pub fn from_rows(rows: Vec<TableRow>) -> Result<Self, CatalogError> {
        let mut seen = BTreeSet::new();
        for (i, row) in rows.iter().enumerate() {
            if !seen.insert(row.syscall.clone()) {
                return Err(CatalogError::Parse {
                    line: i + 2,
                    msg: format!("duplicate syscall {}", row.syscall),
                });
            }
            if let Some(missing) = Column::ALL.iter().find(|c| !row.columns.contains_key(c)) {
                return Err(CatalogError::Parse {
                    line: i + 2,
                    msg: format!("row {} has no value for {missing}", row.syscall),
                });
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[TableRow] {
        &self.rows
    }

    pub fn row(&self, syscall: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.syscall.as_str() == syscall)
    }

    /// Parses fixture CSV text.
    pub fn parse(text: &str) -> Result<Self, CatalogError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(text.as_bytes());
        let mut records = reader.records();
        let header = match records.next() {
            Some(Ok(h)) => h,
            Some(Err(e)) => return Err(parse_err(1, e.to_string())),
            None => return Err(parse_err(1, "empty fixture")),
        };
        let header_cells: Vec<&str> = header.iter().collect();
        if header_cells.len() != 9 || header_cells[0] != "syscall" || header_cells[1] != "cve" {
            return Err(parse_err(1, format!("bad header {:?}", header_cells.join(","))));
        }
        let mut columns = Vec::with_capacity(7);
        for cell in &header_cells[2..] {
            let col = Column::from_str(cell)?;
            if col.header() != *cell {
                return Err(CatalogError::UnknownColumn(cell.to_string()));
            }
            columns.push(col);
        }
        if columns != Column::ALL {
            return Err(parse_err(1, "columns out of order"));
        }

        let mut rows = Vec::new();
        for (i, rec) in records.enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
            if rec.len() != 9 {
                return Err(parse_err(line, format!("expected 9 cells, got {}", rec.len())));
            }
            let syscall = SyscallId::new(rec[0].trim()).map_err(|e| parse_err(line, e.to_string()))?;
            let cve_cell = rec[1].trim();
            let (cve, note) = if cve_cell.is_empty() {
                (None, None)
            } else if is_cve(cve_cell) {
                (Some(cve_cell.to_string()), None)
            } else {
                (None, Some(cve_cell.to_string()))
            };
            let mut flags = BTreeMap::new();
            for (col, cell) in columns.iter().zip(rec.iter().skip(2)) {
                let v = match cell.trim() {
                    "1" => true,
                    "0" => false,
                    other => return Err(parse_err(line, format!("bad flag {other:?} in {col}"))),
                };
                flags.insert(*col, v);
            }
            rows.push(TableRow { syscall, cve, note, columns: flags });
        }
        Self::from_rows(rows)
    }

    /// Serializes back to fixture CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(FIXTURE_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(row.syscall.as_str());
            out.push(',');
            if let Some(c) = row.cve.as_deref().or(row.note.as_deref()) {
                out.push_str(c);
            }
            for col in Column::ALL {
                out.push_str(if row.get(col) { ",1" } else { ",0" });
            }
            out.push('\n');
        }
        out
    }

    /// Syscalls whose flag is set in `column`.
    pub fn column_policy(&self, column: Column) -> BTreeSet<SyscallId> {
        self.rows
            .iter()
            .filter(|r| r.get(column))
            .map(|r| r.syscall.clone())
            .collect()
    }

    /// Like [`column_policy`](Self::column_policy) but resolves a textual column id.
    pub fn column_policy_by_id(&self, column: &str) -> Result<BTreeSet<SyscallId>, CatalogError> {
        Ok(self.column_policy(column.parse()?))
    }

    pub fn cve_for(&self, syscall: &str) -> Option<&str> {
        self.row(syscall).and_then(|r| r.cve.as_deref())
    }

    /// Every syscall named anywhere in the table.
    pub fn universe(&self) -> BTreeSet<SyscallId> {
        self.rows.iter().map(|r| r.syscall.clone()).collect()
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> CatalogError {
    CatalogError::Parse { line, msg: msg.into() }
}

pub fn load_fixture(path: impl AsRef<Path>) -> Result<PolicyComparisonTable, CatalogError> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| CatalogError::Io(e.to_string()))?;
    PolicyComparisonTable::parse(&text)
}

/// The bundled comparison table.
pub fn shipped_fixture() -> PolicyComparisonTable {
    PolicyComparisonTable::parse(crate::POLICY_FIXTURE).expect("bundled fixture is well-formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn syscall_names() {
        assert!(SyscallId::new("mmap").is_ok());
        assert!(SyscallId::new("rt_sigaction").is_ok());
        assert!(SyscallId::new("").is_err());
        assert!(SyscallId::new("Mmap").is_err());
        assert!(SyscallId::new("a-b").is_err());
        let mut v = [SyscallId::new("write").unwrap(), SyscallId::new("accept4").unwrap()];
        v.sort();
        assert_eq!(v[0].as_str(), "accept4");
    }

    #[test]
    fn shmat_row() {
        let t = shipped_fixture();
        let row = t.row("shmat").unwrap();
        assert_eq!(row.cve.as_deref(), Some("CVE-2017-5669"));
        assert!(row.get(Column::NginxSysfilter));
        assert!(row.get(Column::PodmanDefault));
        for c in [
            Column::NginxBaseline,
            Column::NginxTimeloops,
            Column::ComposepostBaseline,
            Column::ComposepostTimeloops,
            Column::ComposepostSysfilter,
        ] {
            assert!(!row.get(c), "{c}");
        }
    }

    #[test]
    fn open_row() {
        let t = shipped_fixture();
        let row = t.row("open").unwrap();
        assert!(row.get(Column::NginxTimeloops));
        assert!(!row.get(Column::NginxBaseline));
        assert!(!row.get(Column::NginxSysfilter));
        assert_eq!(row.cve.as_deref(), Some("CVE-2020-8428"));
    }

    #[test]
    fn ioctl_note_is_not_a_cve() {
        let t = shipped_fixture();
        let row = t.row("ioctl").unwrap();
        assert_eq!(row.cve, None);
        assert_eq!(row.note.as_deref(), Some("numerous drivers"));
        assert_eq!(t.cve_for("ioctl"), None);
    }

    #[test]
    fn empty_fixture_is_an_error() {
        assert!(matches!(PolicyComparisonTable::parse(""), Err(CatalogError::Parse { .. })));
    }

    #[test]
    fn malformed_rows() {
        let dup = format!("{FIXTURE_HEADER}\nread,,1,1,1,1,1,1,1\nread,,1,1,1,1,1,1,1\n");
        assert!(matches!(PolicyComparisonTable::parse(&dup), Err(CatalogError::Parse { .. })));
        let short = format!("{FIXTURE_HEADER}\nread,,1,1\n");
        assert!(PolicyComparisonTable::parse(&short).is_err());
        let bad_flag = format!("{FIXTURE_HEADER}\nread,,1,1,1,1,x,1,1\n");
        assert!(PolicyComparisonTable::parse(&bad_flag).is_err());
        let bad_col = FIXTURE_HEADER.replace("podman_default", "docker_default");
        assert_eq!(
            PolicyComparisonTable::parse(&bad_col),
            Err(CatalogError::UnknownColumn("docker_default".into()))
        );
    }

    #[test]
    fn column_policies() {
        let t = shipped_fixture();
        assert!(!t.column_policy(Column::PodmanDefault).contains("clock_settime"));
        for (base, tl) in [
            (Column::NginxBaseline, Column::NginxTimeloops),
            (Column::ComposepostBaseline, Column::ComposepostTimeloops),
        ] {
            assert!(t.column_policy(base).is_subset(&t.column_policy(tl)));
        }
        let empty = PolicyComparisonTable::default();
        for c in Column::ALL {
            assert!(empty.column_policy(c).is_empty());
        }
        assert_eq!(
            t.column_policy_by_id("no-such-column"),
            Err(CatalogError::UnknownColumn("no-such-column".into()))
        );
    }

    #[test]
    fn cve_lookup() {
        let t = shipped_fixture();
        assert_eq!(t.cve_for("mremap"), Some("CVE-2020-10757"));
        assert_eq!(t.cve_for("write"), None);
        assert_eq!(t.cve_for("not_a_syscall"), None);
        for row in t.rows() {
            if let Some(c) = &row.cve {
                assert!(is_cve(c), "{c}");
            }
        }
    }

    #[test]
    fn shipped_fixture_round_trips_bytes() {
        assert_eq!(shipped_fixture().to_csv(), crate::POLICY_FIXTURE);
    }

    fn arb_row() -> impl Strategy<Value = (String, Option<u32>, Vec<bool>)> {
        ("[a-z][a-z0-9_]{0,10}", proptest::option::of(0u32..9_999_999), proptest::collection::vec(any::<bool>(), 7))
    }

    proptest! {
        #[test]
        fn fixture_round_trip(rows in proptest::collection::btree_map("[a-z][a-z0-9_]{0,10}", arb_row(), 0..20)) {
            let rows: Vec<TableRow> = rows
                .into_iter()
                .map(|(name, (_, cve, flags))| TableRow {
                    syscall: SyscallId::new(name).unwrap(),
                    cve: cve.map(|n| format!("CVE-2019-{n}")),
                    note: None,
                    columns: Column::ALL.into_iter().zip(flags).collect(),
                })
                .collect();
            let t = PolicyComparisonTable::from_rows(rows).unwrap();
            prop_assert_eq!(PolicyComparisonTable::parse(&t.to_csv()).unwrap(), t);
        }
    }
}
