//! Loader for MIND-format datasets.
//!
//! A dataset directory holds two tab-separated files without headers:
//!
//! * `news.tsv`: id, category, subcategory, title, abstract, url, title
//!   entities, abstract entities;
//! * `behaviors.tsv`: impression id, user id, time, click history, and the
//!   impression itself as space-separated `itemId-label` tokens.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use chrono::{NaiveDateTime, TimeZone, Utc};
use serde_json::json;
use veil_core::profile::{DisplayedItem, Impression, Item};

pub const NEWS_FILE: &str = "news.tsv";
pub const BEHAVIORS_FILE: &str = "behaviors.tsv";
const TIME_FORMAT: &str = "%m/%d/%Y %I:%M:%S %p";

#[derive(Debug, thiserror::Error)]
pub enum MindError {
    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),
    #[error("behaviors reference unknown news ids: {}", .0.join(", "))]
    DanglingItemRef(Vec<String>),
    #[error("{file} line {line}: {reason}")]
    Parse { file: &'static str, line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MindDataset {
    pub news_by_id: BTreeMap<String, Item>,
    /// Impressions in file order.
    pub behaviors: Vec<Impression>,
    /// Rows dropped because their impression column was empty.
    pub skipped_rows: usize,
}

impl MindDataset {
    /// Impressions grouped by user, each list sorted chronologically.
    pub fn by_user(&self) -> BTreeMap<&str, Vec<&Impression>> {
        let mut users: BTreeMap<&str, Vec<&Impression>> = BTreeMap::new();
        for imp in &self.behaviors {
            users.entry(imp.user_id.as_str()).or_default().push(imp);
        }
        for list in users.values_mut() {
            list.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.impression_id.cmp(&b.impression_id)));
        }
        users
    }

    pub fn click_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for imp in &self.behaviors {
            *counts.entry(imp.user_id.as_str()).or_default() += imp.clicked().count();
        }
        counts
    }
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>, MindError> {
    if !path.is_file() {
        return Err(MindError::MissingFile(path.to_path_buf()));
    }
    csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .quoting(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| MindError::Io(std::io::Error::other(e)))
}

fn rows(
    path: &Path,
    file: &'static str,
) -> Result<impl Iterator<Item = Result<(usize, csv::StringRecord), MindError>>, MindError> {
    Ok(reader(path)?.into_records().enumerate().map(move |(i, r)| {
        r.map(|rec| (i + 1, rec)).map_err(|e| MindError::Parse { file, line: i + 1, reason: e.to_string() })
    }))
}

fn parse_news(path: &Path) -> Result<BTreeMap<String, Item>, MindError> {
    let mut news = BTreeMap::new();
    for row in rows(path, NEWS_FILE)? {
        let (line, rec) = row?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        if rec.len() < 4 || field(0).is_empty() || field(3).is_empty() {
            return Err(MindError::Parse {
                file: NEWS_FILE,
                line,
                reason: "expected at least id, category, subcategory and title".into(),
            });
        }
        let category = Some(field(1)).filter(|c| !c.is_empty()).map(str::to_string);
        let mut item = Item::new(field(0), field(3)).with_summary(field(4));
        item.category = category;
        item.raw = json!({
            "subcategory": field(2),
            "url": field(5),
            "titleEntities": field(6),
            "abstractEntities": field(7),
        });
        news.insert(item.id.clone(), item);
    }
    Ok(news)
}

fn parse_label(token: &str) -> Option<(&str, bool)> {
    let (id, label) = token.rsplit_once('-')?;
    match label {
        "1" => Some((id, true)),
        "0" => Some((id, false)),
        _ => None,
    }
}

pub fn load_mind(dir: &Path) -> Result<MindDataset, MindError> {
    let news_path = dir.join(NEWS_FILE);
    let behaviors_path = dir.join(BEHAVIORS_FILE);
    for path in [&news_path, &behaviors_path] {
        if !path.is_file() {
            return Err(MindError::MissingFile(path.clone()));
        }
    }
    let news_by_id = parse_news(&news_path)?;

    let mut behaviors = Vec::new();
    let mut dangling = BTreeSet::new();
    let mut skipped_rows = 0;
    for row in rows(&behaviors_path, BEHAVIORS_FILE)? {
        let (line, rec) = row?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let parse_err = |reason: String| MindError::Parse { file: BEHAVIORS_FILE, line, reason };
        if field(4).is_empty() {
            log::warn!("{BEHAVIORS_FILE} line {line}: empty impression column, skipping");
            skipped_rows += 1;
            continue;
        }
        let time = NaiveDateTime::parse_from_str(field(2), TIME_FORMAT)
            .map_err(|e| parse_err(format!("bad time {:?}: {e}", field(2))))?;
        let mut displayed = Vec::new();
        for token in field(4).split_whitespace() {
            let (id, clicked) =
                parse_label(token).ok_or_else(|| parse_err(format!("bad impression token {token:?}")))?;
            match news_by_id.get(id) {
                Some(item) => displayed.push(DisplayedItem { item: item.clone(), clicked }),
                None => {
                    dangling.insert(id.to_string());
                }
            }
        }
        behaviors.push(Impression {
            impression_id: field(0).to_string(),
            user_id: field(1).to_string(),
            timestamp: Utc.from_utc_datetime(&time),
            displayed,
        });
    }
    if !dangling.is_empty() {
        return Err(MindError::DanglingItemRef(dangling.into_iter().collect()));
    }
    Ok(MindDataset { news_by_id, behaviors, skipped_rows })
}
