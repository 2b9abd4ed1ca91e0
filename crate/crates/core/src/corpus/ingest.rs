//! Raw post sources: StackExchange `Posts.xml` dumps and JSON lines.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, Utc};
use quick_xml::events::Event;
use quick_xml::Reader;
use serde::{Deserialize, Serialize};

use super::text::strip_html;
use crate::{Error, Result};

/// One question as it comes out of a dump, before vocabulary mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPost {
    pub id: u64,
    pub user_id: String,
    pub created_at: DateTime<Utc>,
    pub title: String,
    /// Body with markup and code blocks already stripped.
    pub body: String,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IngestStats {
    pub emitted: usize,
    /// Rows or lines that could not be parsed. Each one is logged.
    pub malformed: usize,
    /// Well-formed rows that are not retained questions (answers, no owner, no tags).
    pub filtered: usize,
}

/// Parses a StackExchange `CreationDate` (`2012-06-21T09:23:37.357`, implicit
/// UTC) or an RFC 3339 timestamp.
pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.with_timezone(&Utc));
    }
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S%.f")
        .ok()
        .map(|n| n.and_utc())
}

/// Splits a dump `Tags` attribute. Older dumps use `<a><b>`, newer ones `|a|b|`.
pub fn parse_tag_field(field: &str) -> Vec<String> {
    let field = field.trim();
    let parts: Vec<&str> = if field.starts_with('|') {
        field.split('|').collect()
    } else {
        field.split(['<', '>']).collect()
    };
    parts
        .into_iter()
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Streaming reader over the `<row .../>` lines of a `Posts.xml` file.
///
/// Dumps put one row per line, so each line is parsed independently and a
/// malformed row only costs that row.
pub struct XmlPosts<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    stats: IngestStats,
    failed: bool,
}

impl XmlPosts<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self::new(open(path)?))
    }
}

impl<R: BufRead> XmlPosts<R> {
    pub fn new(reader: R) -> Self {
        XmlPosts {
            lines: reader.lines(),
            line_no: 0,
            stats: IngestStats::default(),
            failed: false,
        }
    }

    pub fn stats(&self) -> IngestStats {
        self.stats
    }
}

enum RowOutcome {
    Post(RawPost),
    Filtered,
}

fn parse_row(line: &str) -> std::result::Result<RowOutcome, String> {
    let mut reader = Reader::from_str(line);
    let start = loop {
        match reader.read_event() {
            Ok(Event::Empty(e)) | Ok(Event::Start(e)) if e.name().as_ref() == b"row" => break e,
            Ok(Event::Eof) => return Err("no row element".into()),
            Ok(_) => continue,
            Err(e) => return Err(e.to_string()),
        }
    };

    let mut id = None;
    let mut post_type = None;
    let mut owner = None;
    let mut created = None;
    let mut title = String::new();
    let mut body = String::new();
    let mut tags = None;
    for attr in start.attributes() {
        let attr = attr.map_err(|e| e.to_string())?;
        let value = attr.unescape_value().map_err(|e| e.to_string())?;
        match attr.key.as_ref() {
            b"Id" => id = Some(value.into_owned()),
            b"PostTypeId" => post_type = Some(value.into_owned()),
            b"OwnerUserId" => owner = Some(value.into_owned()),
            b"CreationDate" => created = Some(value.into_owned()),
            b"Title" => title = value.into_owned(),
            b"Body" => body = value.into_owned(),
            b"Tags" => tags = Some(value.into_owned()),
            _ => {}
        }
    }

    let id: u64 = id
        .ok_or("missing Id")?
        .trim()
        .parse()
        .map_err(|_| "non-numeric Id")?;
    if post_type.as_deref().map(str::trim) != Some("1") {
        return Ok(RowOutcome::Filtered);
    }
    let owner = match owner.map(|o| o.trim().to_string()) {
        Some(o) if !o.is_empty() => o,
        _ => return Ok(RowOutcome::Filtered),
    };
    let tags = parse_tag_field(tags.as_deref().unwrap_or(""));
    if tags.is_empty() {
        return Ok(RowOutcome::Filtered);
    }
    let created_at = created
        .as_deref()
        .and_then(parse_timestamp)
        .ok_or("missing or unparseable CreationDate")?;

    Ok(RowOutcome::Post(RawPost {
        id,
        user_id: owner,
        created_at,
        title,
        body: strip_html(&body),
        tags,
    }))
}

impl<R: BufRead> Iterator for XmlPosts<R> {
    type Item = Result<RawPost>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => {
                    self.failed = true;
                    return Some(Err(Error::io("<posts xml>", e)));
                }
            };
            self.line_no += 1;
            let trimmed = line.trim();
            if !trimmed.starts_with("<row") {
                continue;
            }
            match parse_row(trimmed) {
                Ok(RowOutcome::Post(p)) => {
                    self.stats.emitted += 1;
                    return Some(Ok(p));
                }
                Ok(RowOutcome::Filtered) => self.stats.filtered += 1,
                Err(msg) => {
                    self.stats.malformed += 1;
                    log::warn!("skipping malformed row on line {}: {msg}", self.line_no);
                }
            }
        }
    }
}

#[derive(Deserialize)]
struct JsonPost {
    id: u64,
    user: serde_json::Value,
    created: String,
    title: String,
    body: String,
    tags: Vec<String>,
}

/// Streaming reader over a JSON-lines file with keys
/// `id, user, created, title, body, tags`.
pub struct JsonlPosts<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    stats: IngestStats,
    failed: bool,
}

impl JsonlPosts<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self::new(open(path)?))
    }
}

impl<R: BufRead> JsonlPosts<R> {
    pub fn new(reader: R) -> Self {
        JsonlPosts {
            lines: reader.lines(),
            line_no: 0,
            stats: IngestStats::default(),
            failed: false,
        }
    }

    pub fn stats(&self) -> IngestStats {
        self.stats
    }

    fn parse_line(line: &str) -> std::result::Result<Option<RawPost>, String> {
        let p: JsonPost = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let user_id = match p.user {
            serde_json::Value::String(s) => s,
            serde_json::Value::Number(n) => n.to_string(),
            other => return Err(format!("user must be a string, got {other}")),
        };
        let created_at =
            parse_timestamp(&p.created).ok_or_else(|| format!("bad timestamp {:?}", p.created))?;
        let tags: Vec<String> = p
            .tags
            .into_iter()
            .map(|t| t.trim().to_string())
            .filter(|t| !t.is_empty())
            .collect();
        if tags.is_empty() || user_id.is_empty() {
            return Ok(None);
        }
        Ok(Some(RawPost {
            id: p.id,
            user_id,
            created_at,
            title: p.title,
            body: strip_html(&p.body),
            tags,
        }))
    }
}

impl<R: BufRead> Iterator for JsonlPosts<R> {
    type Item = Result<RawPost>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => {
                    self.failed = true;
                    return Some(Err(Error::io("<posts jsonl>", e)));
                }
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            match Self::parse_line(&line) {
                Ok(Some(p)) => {
                    self.stats.emitted += 1;
                    return Some(Ok(p));
                }
                Ok(None) => self.stats.filtered += 1,
                Err(msg) => {
                    self.stats.malformed += 1;
                    log::warn!("skipping malformed line {}: {msg}", self.line_no);
                }
            }
        }
    }
}

/// Writes posts in the JSON-lines layout read by [`JsonlPosts`].
pub fn write_jsonl<W: std::io::Write>(mut w: W, posts: &[RawPost]) -> std::io::Result<()> {
    for p in posts {
        let line = serde_json::json!({
            "id": p.id,
            "user": p.user_id,
            "created": p.created_at.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            "title": p.title,
            "body": p.body,
            "tags": p.tags,
        });
        writeln!(w, "{line}")?;
    }
    w.flush()
}
