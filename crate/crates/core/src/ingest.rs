//! News API ingestion: paginated fetching with backoff, a deduplicating
//! article store, and conversion to annotation-ready sentences.
//!
//! The HTTP layer is a trait so the client runs against test doubles; the
//! vendor schema lives in a [`FieldMapping`].

use std::collections::HashSet;
use std::path::Path;
use std::time::Duration;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use url::Url;

use crate::corpus::{Sentence, Token};
use crate::persistence::{append_jsonl, read_jsonl, sha256_hex, PersistenceError};

/// Environment variable holding the API key.
pub const API_KEY_ENV: &str = "RISKNER_NEWS_API_KEY";
pub const MAX_PAGE_SIZE: usize = 100;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("authentication failed (HTTP {0})")]
    AuthFailed(u16),
    #[error("rate limited after {0} retries")]
    RateLimited(u32),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("unexpected HTTP status {0}")]
    HttpStatus(u16),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("article store is corrupt: {0}")]
    StoreCorrupt(String),
    #[error(transparent)]
    Persistence(PersistenceError),
}

impl From<PersistenceError> for IngestError {
    fn from(e: PersistenceError) -> Self {
        match e {
            PersistenceError::LedgerCorrupt { .. } => IngestError::StoreCorrupt(e.to_string()),
            other => IngestError::Persistence(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Article {
    pub id: String,
    pub source: String,
    pub title: String,
    pub body: String,
    pub published_at: DateTime<Utc>,
    pub url: String,
    pub fetched_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub keywords: Vec<String>,
    pub from: NaiveDate,
    pub to: NaiveDate,
    pub page_size: usize,
    pub max_articles: usize,
}

impl QuerySpec {
    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |m: String| Err(IngestError::InvalidQuery(m));
        if self.keywords.iter().all(|k| k.trim().is_empty()) {
            return bad("keyword list is empty".into());
        }
        if self.from > self.to {
            return bad(format!("date window {} > {}", self.from, self.to));
        }
        if self.page_size == 0 || self.page_size > MAX_PAGE_SIZE {
            return bad(format!("page size must be in 1..={MAX_PAGE_SIZE}"));
        }
        if self.max_articles == 0 {
            return bad("max_articles must be positive".into());
        }
        Ok(())
    }
}

/// Request parameter names and dotted JSON paths of the vendor's schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldMapping {
    pub endpoint: String,
    pub query_param: String,
    pub from_param: String,
    pub to_param: String,
    pub page_param: String,
    pub page_size_param: String,
    pub api_key_header: String,
    pub articles_path: String,
    pub total_path: Option<String>,
    pub title: String,
    pub body: String,
    pub url: String,
    pub source: String,
    pub published_at: String,
}

impl Default for FieldMapping {
    fn default() -> Self {
        Self {
            endpoint: "https://newsapi.example/v2/everything".into(),
            query_param: "q".into(),
            from_param: "from".into(),
            to_param: "to".into(),
            page_param: "page".into(),
            page_size_param: "pageSize".into(),
            api_key_header: "X-Api-Key".into(),
            articles_path: "articles".into(),
            total_path: Some("totalResults".into()),
            title: "title".into(),
            body: "content".into(),
            url: "url".into(),
            source: "source.name".into(),
            published_at: "publishedAt".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpRequest {
    pub url: String,
    pub headers: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// One GET round trip. Network failures map to [`IngestError::Transport`];
/// HTTP error statuses are returned as responses.
pub trait HttpTransport {
    fn get(&mut self, request: &HttpRequest) -> Result<HttpResponse, IngestError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub base: Duration,
    pub factor: u32,
    pub max_retries: u32,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            base: Duration::from_secs(1),
            factor: 2,
            max_retries: 5,
        }
    }
}

impl Backoff {
    /// Delay before retry number `attempt` (0-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base * self.factor.saturating_pow(attempt)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FetchReport {
    pub articles: Vec<Article>,
    pub requests: usize,
    pub retries: u32,
    /// `(url, reason)` for records that were skipped.
    pub dropped: Vec<(String, String)>,
}

fn lookup<'a>(v: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(v, |cur, key| cur.get(key))
}

fn lookup_str(v: &Value, path: &str) -> Option<String> {
    lookup(v, path).and_then(Value::as_str).map(str::to_string)
}

/// Canonical form used for ids: no fragment, no `utm_*` tracking parameters.
pub fn canonical_url(raw: &str) -> Option<String> {
    let mut u = Url::parse(raw.trim()).ok()?;
    u.set_fragment(None);
    let kept: Vec<(String, String)> = u
        .query_pairs()
        .filter(|(k, _)| !k.starts_with("utm_"))
        .map(|(k, v)| (k.into_owned(), v.into_owned()))
        .collect();
    if kept.is_empty() {
        u.set_query(None);
    } else {
        u.query_pairs_mut().clear().extend_pairs(kept);
    }
    Some(u.to_string())
}

pub fn article_id(url: &str) -> String {
    sha256_hex(canonical_url(url).unwrap_or_else(|| url.to_string()).as_bytes())
}

/// Removes tags, decodes common entities and collapses whitespace.
pub fn strip_markup(html: &str) -> String {
    let mut text = String::with_capacity(html.len());
    let mut in_tag = false;
    for ch in html.chars() {
        match ch {
            '<' => {
                in_tag = true;
                text.push(' ');
            }
            '>' if in_tag => in_tag = false,
            _ if !in_tag => text.push(ch),
            _ => {}
        }
    }
    let decoded = text
        .replace("&nbsp;", " ")
        .replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&#39;", "'")
        .replace("&apos;", "'")
        .replace("&amp;", "&");
    decoded.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn build_request(q: &QuerySpec, api_key: &str, m: &FieldMapping, page: usize) -> Result<HttpRequest, IngestError> {
    let keywords: Vec<&str> = q.keywords.iter().map(|k| k.trim()).filter(|k| !k.is_empty()).collect();
    let url = Url::parse_with_params(
        &m.endpoint,
        &[
            (m.query_param.as_str(), keywords.join(" OR ")),
            (m.from_param.as_str(), q.from.to_string()),
            (m.to_param.as_str(), q.to.to_string()),
            (m.page_param.as_str(), page.to_string()),
            (m.page_size_param.as_str(), q.page_size.to_string()),
        ],
    )
    .map_err(|e| IngestError::InvalidQuery(format!("endpoint: {e}")))?;
    Ok(HttpRequest {
        url: url.to_string(),
        headers: vec![(m.api_key_header.clone(), api_key.to_string())],
    })
}

fn send_with_backoff(
    transport: &mut dyn HttpTransport,
    request: &HttpRequest,
    backoff: Backoff,
    sleep: &mut dyn FnMut(Duration),
    report: &mut FetchReport,
) -> Result<String, IngestError> {
    let mut attempt = 0;
    loop {
        report.requests += 1;
        let resp = transport.get(request)?;
        match resp.status {
            200..=299 => return Ok(resp.body),
            401 | 403 => return Err(IngestError::AuthFailed(resp.status)),
            429 if attempt < backoff.max_retries => {
                let d = backoff.delay(attempt);
                attempt += 1;
                report.retries += 1;
                log::warn!("HTTP 429, retry {attempt}/{} after {d:?}", backoff.max_retries);
                sleep(d);
            }
            429 => return Err(IngestError::RateLimited(backoff.max_retries)),
            s => return Err(IngestError::HttpStatus(s)),
        }
    }
}

fn parse_article(item: &Value, m: &FieldMapping, fetched_at: DateTime<Utc>) -> Result<Article, (String, String)> {
    let url = lookup_str(item, &m.url).unwrap_or_default();
    let fail = |reason: &str| (url.clone(), reason.to_string());
    if url.is_empty() {
        return Err(fail("missing url"));
    }
    let body = strip_markup(&lookup_str(item, &m.body).unwrap_or_default());
    if body.is_empty() {
        return Err(fail("empty body after cleaning"));
    }
    let published = lookup_str(item, &m.published_at).ok_or_else(|| fail("missing publication time"))?;
    let published_at = DateTime::parse_from_rfc3339(&published)
        .map_err(|_| fail("unparseable publication time"))?
        .with_timezone(&Utc);
    Ok(Article {
        id: article_id(&url),
        source: lookup_str(item, &m.source).unwrap_or_default(),
        title: strip_markup(&lookup_str(item, &m.title).unwrap_or_default()),
        body,
        published_at,
        url,
        fetched_at,
    })
}

/// Pages through the API until `max_articles` are collected or a short
/// page (or the reported total) shows the window is exhausted.
pub fn fetch_articles(
    q: &QuerySpec,
    api_key: &str,
    mapping: &FieldMapping,
    transport: &mut dyn HttpTransport,
    backoff: Backoff,
    sleep: &mut dyn FnMut(Duration),
) -> Result<FetchReport, IngestError> {
    q.validate()?;
    if api_key.trim().is_empty() {
        return Err(IngestError::InvalidQuery(format!(
            "API key missing (set {API_KEY_ENV})"
        )));
    }
    let mut report = FetchReport::default();
    let mut seen = 0usize;
    let mut page = 1;
    while report.articles.len() < q.max_articles {
        let request = build_request(q, api_key, mapping, page)?;
        let body = send_with_backoff(transport, &request, backoff, sleep, &mut report)?;
        let json: Value = serde_json::from_str(&body).map_err(|e| IngestError::MalformedResponse(e.to_string()))?;
        let items = lookup(&json, &mapping.articles_path)
            .and_then(Value::as_array)
            .ok_or_else(|| IngestError::MalformedResponse(format!("no array at {:?}", mapping.articles_path)))?;
        let total = mapping
            .total_path
            .as_deref()
            .and_then(|p| lookup(&json, p))
            .and_then(Value::as_u64);
        let fetched_at = Utc::now();
        for item in items {
            if report.articles.len() == q.max_articles {
                break;
            }
            match parse_article(item, mapping, fetched_at) {
                Ok(a) => report.articles.push(a),
                Err((url, reason)) => {
                    log::info!("dropping {url:?}: {reason}");
                    report.dropped.push((url, reason));
                }
            }
        }
        seen += items.len();
        let exhausted = items.len() < q.page_size || total.is_some_and(|t| seen as u64 >= t);
        if exhausted {
            break;
        }
        page += 1;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StoreReport {
    pub added: usize,
    pub duplicates: usize,
}

/// Appends articles whose id is not yet in the JSON-lines store.
pub fn dedupe_store(articles: &[Article], path: &Path) -> Result<StoreReport, IngestError> {
    let mut report = StoreReport::default();
    if articles.is_empty() {
        return Ok(report);
    }
    let mut ids: HashSet<String> = read_jsonl::<Article>(path)?.into_iter().map(|a| a.id).collect();
    for a in articles {
        if ids.insert(a.id.clone()) {
            append_jsonl(path, a)?;
            report.added += 1;
        } else {
            report.duplicates += 1;
        }
    }
    Ok(report)
}

pub fn read_store(path: &Path) -> Result<Vec<Article>, IngestError> {
    Ok(read_jsonl(path)?)
}

/// Abbreviations that keep their period and never end a sentence.
pub const ABBREVIATIONS: [&str; 30] = [
    "Mr.", "Mrs.", "Ms.", "Dr.", "Prof.", "Sr.", "Jr.", "St.", "Mt.", "Inc.", "Ltd.", "Co.", "Corp.", "Bros.", "No.",
    "vs.", "etc.", "e.g.", "i.e.", "U.S.", "U.K.", "E.U.", "Jan.", "Feb.", "Aug.", "Sept.", "Oct.", "Nov.", "Dec.",
    "Gov.",
];

/// Whitespace tokens with leading and trailing punctuation split off, each
/// flagged with whether whitespace follows it.
fn word_tokens(text: &str) -> Vec<(String, bool)> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if ABBREVIATIONS.contains(&chunk) {
            out.push((chunk.to_string(), true));
            continue;
        }
        let chars: Vec<char> = chunk.chars().collect();
        let start = chars.iter().position(|c| c.is_alphanumeric());
        let Some(start) = start else {
            for c in &chars {
                out.push((c.to_string(), false));
            }
            if let Some(last) = out.last_mut() {
                last.1 = true;
            }
            continue;
        };
        let end = chars
            .iter()
            .rposition(|c| c.is_alphanumeric())
            .expect("has alphanumeric")
            + 1;
        for c in &chars[..start] {
            out.push((c.to_string(), false));
        }
        let core: String = chars[start..end].iter().collect();
        let with_dot = format!("{core}.");
        if chars.get(end) == Some(&'.') && ABBREVIATIONS.contains(&with_dot.as_str()) {
            out.push((with_dot, end + 1 == chars.len()));
            for c in &chars[end + 1..] {
                out.push((c.to_string(), false));
            }
        } else {
            out.push((core, end == chars.len()));
            for c in &chars[end..] {
                out.push((c.to_string(), false));
            }
        }
        if let Some(last) = out.last_mut() {
            last.1 = true;
        }
    }
    out
}

/// Sentences with every label `O`. A boundary follows `.`, `!` or `?` when
/// whitespace and an uppercase-initial token come next.
pub fn to_pretokenized(article: &Article) -> Vec<Sentence> {
    let toks = word_tokens(&article.body);
    let mut sentences = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for (i, (tok, space_after)) in toks.iter().enumerate() {
        current.push(tok.clone());
        let terminal = matches!(tok.as_str(), "." | "!" | "?");
        let next_upper = toks
            .get(i + 1)
            .and_then(|(t, _)| t.chars().next())
            .is_some_and(char::is_uppercase);
        if terminal && *space_after && next_upper {
            sentences.push(std::mem::take(&mut current));
        }
    }
    sentences.push(current);
    sentences
        .into_iter()
        .filter(|s| s.iter().any(|t| t.chars().any(char::is_alphanumeric)))
        .map(|words| Sentence {
            tokens: words
                .into_iter()
                .map(|surface| Token { surface, gold_label: 0 })
                .collect(),
            source_id: article.id.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    fn article(body: &str) -> Article {
        Article {
            id: "x".into(),
            source: "s".into(),
            title: "t".into(),
            body: body.into(),
            published_at: Utc::now(),
            url: "https://a.example/1".into(),
            fetched_at: Utc::now(),
        }
    }

    fn surfaces(s: &[Sentence]) -> Vec<Vec<&str>> {
        s.iter()
            .map(|s| s.tokens.iter().map(|t| t.surface.as_str()).collect())
            .collect()
    }

    #[test]
    fn pretokenize_examples() {
        let s = to_pretokenized(&article("Prices rose. Steel fell."));
        assert_eq!(
            surfaces(&s),
            vec![vec!["Prices", "rose", "."], vec!["Steel", "fell", "."]]
        );
        assert!(to_pretokenized(&article("...")).is_empty());
        let s = to_pretokenized(&article("Mr. Smith arrived."));
        assert_eq!(surfaces(&s), vec![vec!["Mr.", "Smith", "arrived", "."]]);
        assert!(s.iter().flat_map(|s| &s.tokens).all(|t| t.gold_label == 0));
    }

    #[test]
    fn punctuation_is_detached() {
        let s = to_pretokenized(&article("(Reuters) Cement costs, up 5%, hit U.S. builders! Why? no."));
        assert_eq!(
            surfaces(&s),
            vec![
                vec!["(", "Reuters", ")", "Cement", "costs", ",", "up", "5", "%", ",", "hit", "U.S.", "builders", "!"],
                vec!["Why", "?", "no", "."],
            ]
        );
    }

    #[test]
    fn markup_is_stripped() {
        assert_eq!(
            strip_markup("<p>Steel &amp; <b>iron</b></p>\n  prices"),
            "Steel & iron prices"
        );
        assert_eq!(strip_markup("<div></div>"), "");
    }

    #[test]
    fn canonical_ids() {
        assert_eq!(
            article_id("https://News.example/a?utm_source=x#top"),
            article_id("https://news.example/a")
        );
        assert_ne!(
            article_id("https://news.example/a"),
            article_id("https://news.example/b")
        );
    }

    #[test]
    fn query_validation() {
        let mut q = QuerySpec {
            keywords: vec![],
            from: NaiveDate::from_ymd_opt(2024, 1, 1).unwrap(),
            to: NaiveDate::from_ymd_opt(2024, 2, 1).unwrap(),
            page_size: 50,
            max_articles: 100,
        };
        assert!(matches!(q.validate(), Err(IngestError::InvalidQuery(_))));
        q.keywords = vec!["steel".into()];
        q.validate().unwrap();
        q.page_size = 0;
        assert!(q.validate().is_err());
    }

    struct Scripted(VecDeque<HttpResponse>, usize);

    impl HttpTransport for Scripted {
        fn get(&mut self, _: &HttpRequest) -> Result<HttpResponse, IngestError> {
            self.1 += 1;
            self.0
                .pop_front()
                .ok_or_else(|| IngestError::Transport("script exhausted".into()))
        }
    }

    #[test]
    fn backoff_schedule() {
        let b = Backoff::default();
        let d: Vec<u64> = (0..5).map(|i| b.delay(i).as_secs()).collect();
        assert_eq!(d, vec![1, 2, 4, 8, 16]);
    }

    #[test]
    fn auth_failure_is_not_retried() {
        let q = QuerySpec {
            keywords: vec!["steel".into()],
            from: NaiveDate::from_ymd_opt(2024, 1, 1).unwrap(),
            to: NaiveDate::from_ymd_opt(2024, 1, 2).unwrap(),
            page_size: 10,
            max_articles: 10,
        };
        let mut t = Scripted(
            VecDeque::from([HttpResponse {
                status: 401,
                body: String::new(),
            }]),
            0,
        );
        let r = fetch_articles(
            &q,
            "k",
            &FieldMapping::default(),
            &mut t,
            Backoff::default(),
            &mut |_| {},
        );
        assert!(matches!(r, Err(IngestError::AuthFailed(401))));
        assert_eq!(t.1, 1);
    }
}
