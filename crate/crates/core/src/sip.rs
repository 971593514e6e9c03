//! SIP response-code semantics and the announcement registry.
//!
//! Only the numeric status code drives behavior. Reason phrases are kept so
//! that status lines render back verbatim, nothing more.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SipError {
    #[error("malformed SIP status line: {0:?}")]
    MalformedStatusLine(String),
    #[error("SIP status code {0} outside [100, 699]")]
    CodeOutOfRange(u32),
    #[error("duplicate announcement id {0:?} in registry")]
    DuplicateAnnouncement(String),
    #[error("registry row {row}: {message}")]
    InvalidRegistryRow { row: usize, message: String },
    #[error("registry i/o: {0}")]
    Io(String),
}

/// A SIP response status code with its reason phrase.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SipCode {
    code: u16,
    reason: String,
}

impl SipCode {
    pub fn new(code: u16, reason: impl Into<String>) -> Result<Self, SipError> {
        if !(100..=699).contains(&code) {
            return Err(SipError::CodeOutOfRange(code.into()));
        }
        Ok(SipCode {
            code,
            reason: reason.into(),
        })
    }

    pub fn code(&self) -> u16 {
        self.code
    }

    pub fn reason(&self) -> &str {
        &self.reason
    }

    pub fn class(&self) -> SipCodeClass {
        SipCodeClass::of(self.code)
    }

    /// Whether the response means the call could not be established.
    ///
    /// Anything in the 3xx..6xx range counts; provisional and success
    /// responses do not.
    pub fn indicates_establishment_failure(&self) -> bool {
        indicates_establishment_failure(self)
    }

    /// Renders the status line `SIP/2.0 <code> <reason>`.
    pub fn status_line(&self) -> String {
        format!("SIP/2.0 {} {}", self.code, self.reason)
    }
}

impl fmt::Display for SipCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.reason.is_empty() {
            write!(f, "{}", self.code)
        } else {
            write!(f, "{} {}", self.code, self.reason)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SipCodeClass {
    Provisional,
    Success,
    Redirection,
    ClientFailure,
    ServerFailure,
    GlobalFailure,
}

impl SipCodeClass {
    /// Classifies a code already known to lie in [100, 699].
    pub fn of(code: u16) -> Self {
        match code / 100 {
            1 => SipCodeClass::Provisional,
            2 => SipCodeClass::Success,
            3 => SipCodeClass::Redirection,
            4 => SipCodeClass::ClientFailure,
            5 => SipCodeClass::ServerFailure,
            6 => SipCodeClass::GlobalFailure,
            d => unreachable!("class digit {d} for validated code {code}"),
        }
    }

    pub fn digit(self) -> u16 {
        match self {
            SipCodeClass::Provisional => 1,
            SipCodeClass::Success => 2,
            SipCodeClass::Redirection => 3,
            SipCodeClass::ClientFailure => 4,
            SipCodeClass::ServerFailure => 5,
            SipCodeClass::GlobalFailure => 6,
        }
    }
}

/// Parses `SIP/2.0 <3 digits> <reason>`. The reason is kept verbatim.
pub fn parse_status_line(line: &str) -> Result<SipCode, SipError> {
    let malformed = || SipError::MalformedStatusLine(line.to_string());
    let line = line.strip_suffix("\r\n").unwrap_or(line);
    let rest = line.strip_prefix("SIP/2.0 ").ok_or_else(malformed)?;
    let (digits, reason) = match rest.split_once(' ') {
        Some((d, r)) => (d, r),
        None => (rest, ""),
    };
    if digits.len() != 3 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(malformed());
    }
    let code: u16 = digits.parse().map_err(|_| malformed())?;
    if !(100..=699).contains(&code) {
        return Err(malformed());
    }
    SipCode::new(code, reason)
}

pub fn indicates_establishment_failure(code: &SipCode) -> bool {
    matches!(
        code.class(),
        SipCodeClass::Redirection
            | SipCodeClass::ClientFailure
            | SipCodeClass::ServerFailure
            | SipCodeClass::GlobalFailure
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnouncementRegistryEntry {
    pub announcement_id: String,
    pub sip_code: SipCode,
    pub description: String,
}

#[derive(Debug, Deserialize)]
struct RegistryRow {
    announcement_id: String,
    sip_code: String,
    description: String,
}

/// Known announcements and the SIP code each one stands for.
///
/// Immutable once loaded.
#[derive(Debug, Clone, Default)]
pub struct AnnouncementRegistry {
    entries: HashMap<String, AnnouncementRegistryEntry>,
}

impl AnnouncementRegistry {
    pub fn from_entries(
        entries: impl IntoIterator<Item = AnnouncementRegistryEntry>,
    ) -> Result<Self, SipError> {
        let mut map = HashMap::new();
        for entry in entries {
            if map.contains_key(&entry.announcement_id) {
                return Err(SipError::DuplicateAnnouncement(entry.announcement_id));
            }
            map.insert(entry.announcement_id.clone(), entry);
        }
        Ok(AnnouncementRegistry { entries: map })
    }

    /// Reads the `announcement_id,sip_code,description` CSV (header row required).
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self, SipError> {
        let mut csv = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut entries = Vec::new();
        for (i, row) in csv.deserialize::<RegistryRow>().enumerate() {
            let row_no = i + 2;
            let row = row.map_err(|e| SipError::InvalidRegistryRow {
                row: row_no,
                message: e.to_string(),
            })?;
            let code: u16 = row
                .sip_code
                .parse()
                .map_err(|_| SipError::InvalidRegistryRow {
                    row: row_no,
                    message: format!("sip_code {:?} is not an integer", row.sip_code),
                })?;
            let sip_code = SipCode::new(code, "").map_err(|e| SipError::InvalidRegistryRow {
                row: row_no,
                message: e.to_string(),
            })?;
            entries.push(AnnouncementRegistryEntry {
                announcement_id: row.announcement_id,
                sip_code,
                description: row.description,
            });
        }
        Self::from_entries(entries)
    }

    pub fn load(path: &Path) -> Result<Self, SipError> {
        let file = std::fs::File::open(path)
            .map_err(|e| SipError::Io(format!("{}: {e}", path.display())))?;
        Self::from_csv_reader(file)
    }

    /// Writes the registry back out as CSV, sorted by announcement id.
    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["announcement_id", "sip_code", "description"])
            .expect("in-memory csv write");
        for entry in self.entries_sorted() {
            w.write_record([
                entry.announcement_id.as_str(),
                &entry.sip_code.code().to_string(),
                entry.description.as_str(),
            ])
            .expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf-8 csv")
    }

    /// `None` is the normal outcome for an unknown id.
    pub fn lookup(&self, announcement_id: &str) -> Option<&SipCode> {
        self.entries.get(announcement_id).map(|e| &e.sip_code)
    }

    pub fn get(&self, announcement_id: &str) -> Option<&AnnouncementRegistryEntry> {
        self.entries.get(announcement_id)
    }

    pub fn contains(&self, announcement_id: &str) -> bool {
        self.entries.contains_key(announcement_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries_sorted(&self) -> Vec<&AnnouncementRegistryEntry> {
        let mut v: Vec<_> = self.entries.values().collect();
        v.sort_by(|a, b| a.announcement_id.cmp(&b.announcement_id));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_busy_here() {
        let c = parse_status_line("SIP/2.0 486 Busy Here").unwrap();
        assert_eq!(c.code(), 486);
        assert_eq!(c.reason(), "Busy Here");
        assert_eq!(c.class(), SipCodeClass::ClientFailure);
    }

    #[test]
    fn parses_ok() {
        let c = parse_status_line("SIP/2.0 200 OK").unwrap();
        assert_eq!((c.code(), c.reason()), (200, "OK"));
    }

    #[test]
    fn rejects_bad_lines() {
        for line in [
            "HTTP/1.1 200 OK",
            "SIP/2.0 20 OK",
            "SIP/2.0 2000 OK",
            "SIP/2.0 abc OK",
            "SIP/2.0 099 Low",
            "SIP/2.0 700 Nope",
            "SIP/2.0 999 Nope",
            "SIP/2.0",
            "",
        ] {
            assert!(
                matches!(parse_status_line(line), Err(SipError::MalformedStatusLine(_))),
                "{line:?} should be rejected"
            );
        }
    }

    #[test]
    fn empty_reason_is_allowed() {
        let c = parse_status_line("SIP/2.0 180 ").unwrap();
        assert_eq!(c.code(), 180);
        assert_eq!(c.reason(), "");
        assert_eq!(parse_status_line("SIP/2.0 180").unwrap().reason(), "");
    }

    #[test]
    fn failure_semantics() {
        let code = |c| SipCode::new(c, "").unwrap();
        assert!(indicates_establishment_failure(&code(503)));
        assert!(indicates_establishment_failure(&code(486)));
        assert!(indicates_establishment_failure(&code(302)));
        assert!(indicates_establishment_failure(&code(603)));
        assert!(!indicates_establishment_failure(&code(200)));
        assert!(!indicates_establishment_failure(&code(180)));
    }

    #[test]
    fn registry_lookup_and_duplicates() {
        let csv = "announcement_id,sip_code,description\n\
                   ann-out-of-coverage,480,Subscriber out of network coverage\n";
        let reg = AnnouncementRegistry::from_csv_reader(csv.as_bytes()).unwrap();
        assert_eq!(reg.lookup("ann-out-of-coverage").unwrap().code(), 480);
        assert!(reg.lookup("missing-id").is_none());
        assert!(AnnouncementRegistry::default().lookup("missing-id").is_none());

        let dup = "announcement_id,sip_code,description\na,480,x\na,486,y\n";
        assert_eq!(
            AnnouncementRegistry::from_csv_reader(dup.as_bytes()).unwrap_err(),
            SipError::DuplicateAnnouncement("a".into())
        );
    }

    #[test]
    fn registry_rejects_bad_codes() {
        let bad = "announcement_id,sip_code,description\na,999,x\n";
        assert!(matches!(
            AnnouncementRegistry::from_csv_reader(bad.as_bytes()),
            Err(SipError::InvalidRegistryRow { row: 2, .. })
        ));
        let nan = "announcement_id,sip_code,description\na,busy,x\n";
        assert!(AnnouncementRegistry::from_csv_reader(nan.as_bytes()).is_err());
    }

    #[test]
    fn registry_csv_roundtrip() {
        let csv = "announcement_id,sip_code,description\nb,486,\"busy, really\"\na,480,gone\n";
        let reg = AnnouncementRegistry::from_csv_reader(csv.as_bytes()).unwrap();
        let again = AnnouncementRegistry::from_csv_reader(reg.to_csv_string().as_bytes()).unwrap();
        assert_eq!(reg.entries_sorted(), again.entries_sorted());
    }

    proptest! {
        #[test]
        fn status_line_renders_back(code in 100u16..700, reason in "[A-Za-z][A-Za-z ]{0,20}") {
            let line = format!("SIP/2.0 {code} {reason}");
            let parsed = parse_status_line(&line).unwrap();
            prop_assert_eq!(parsed.status_line(), line);
            prop_assert_eq!(parsed.class().digit(), code / 100);
        }

        #[test]
        fn failure_iff_at_least_300(code in 100u16..700) {
            let c = SipCode::new(code, "").unwrap();
            prop_assert_eq!(indicates_establishment_failure(&c), code >= 300);
        }

        #[test]
        fn registry_order_independent(
            codes in proptest::collection::vec(100u16..700, 1..20),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let entries: Vec<_> = codes
                .iter()
                .enumerate()
                .map(|(i, &c)| AnnouncementRegistryEntry {
                    announcement_id: format!("ann-{i}"),
                    sip_code: SipCode::new(c, "").unwrap(),
                    description: String::new(),
                })
                .collect();
            let mut shuffled = entries.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = AnnouncementRegistry::from_entries(entries.clone()).unwrap();
            let b = AnnouncementRegistry::from_entries(shuffled).unwrap();
            for e in &entries {
                prop_assert_eq!(a.lookup(&e.announcement_id), b.lookup(&e.announcement_id));
            }
        }
    }
}
