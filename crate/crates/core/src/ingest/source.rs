//! Segment sources: HTTP playlists and local directories of pre-cut files.

use std::path::{Path, PathBuf};
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::{StatusCode, Url};

use super::FailureKind;

/// Where a camera's segments come from, parsed from `CameraSource::url`.
#[derive(Debug, Clone, PartialEq)]
pub enum SourceLocator {
    /// Playlist URL: plain text, one segment URL per line.
    Http(Url),
    /// Directory whose files, in name order, are the segments.
    Directory(PathBuf),
}

impl SourceLocator {
    pub fn parse(url: &str) -> Result<Self, String> {
        let url = url.trim();
        if url.is_empty() {
            return Err("empty url".into());
        }
        if let Some(path) = url.strip_prefix("file://") {
            if path.is_empty() {
                return Err("file url without a path".into());
            }
            return Ok(Self::Directory(PathBuf::from(path)));
        }
        if url.starts_with("http://") || url.starts_with("https://") {
            let parsed = Url::parse(url).map_err(|e| format!("{url}: {e}"))?;
            if parsed.host_str().is_none_or(str::is_empty) {
                return Err(format!("{url}: missing host"));
            }
            return Ok(Self::Http(parsed));
        }
        if url.contains("://") {
            return Err(format!("{url}: unsupported scheme"));
        }
        Ok(Self::Directory(PathBuf::from(url)))
    }
}

/// One entry of a source listing.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRef {
    pub uri: String,
    /// Duration announced by the playlist (`#EXTINF:<secs>,`), if any.
    pub duration_hint: Option<f64>,
}

/// A failed request, already classified.
#[derive(Debug, Clone, PartialEq)]
pub struct Fault {
    pub kind: FailureKind,
    pub detail: String,
    pub retryable: bool,
}

impl Fault {
    fn new(kind: FailureKind, detail: impl Into<String>, retryable: bool) -> Self {
        Self {
            kind,
            detail: detail.into(),
            retryable,
        }
    }
}

/// Maps an HTTP status to the failure locus: 4xx is the client's fault, 5xx
/// the server's. Only 408 and 429 are worth retrying on the client side.
pub fn classify_status(status: StatusCode) -> Option<Fault> {
    if status.is_success() {
        return None;
    }
    let detail = format!("HTTP {status}");
    if status.is_client_error() {
        let retryable = matches!(status.as_u16(), 408 | 429);
        Some(Fault::new(FailureKind::Client, detail, retryable))
    } else {
        Some(Fault::new(FailureKind::Server, detail, true))
    }
}

fn classify_transport(err: &reqwest::Error) -> Fault {
    if err.is_builder() {
        return Fault::new(FailureKind::Client, err.to_string(), false);
    }
    if let Some(status) = err.status() {
        if let Some(f) = classify_status(status) {
            return f;
        }
    }
    // connect, timeout, reset, truncated body
    let mut detail = err.to_string();
    let mut src = std::error::Error::source(err);
    while let Some(s) = src {
        detail.push_str(": ");
        detail.push_str(&s.to_string());
        src = s.source();
    }
    Fault::new(FailureKind::Network, detail, true)
}

/// Fetches listings and segment bodies for one locator.
pub struct SourceClient {
    locator: SourceLocator,
    http: Option<Client>,
}

impl SourceClient {
    pub fn new(locator: SourceLocator, timeout: Duration) -> Result<Self, Fault> {
        let http = match locator {
            SourceLocator::Http(_) => Some(
                Client::builder()
                    .timeout(timeout)
                    .connect_timeout(timeout)
                    .pool_max_idle_per_host(0)
                    .build()
                    .map_err(|e| Fault::new(FailureKind::Client, e.to_string(), false))?,
            ),
            SourceLocator::Directory(_) => None,
        };
        Ok(Self { locator, http })
    }

    pub fn locator(&self) -> &SourceLocator {
        &self.locator
    }

    pub fn list(&self) -> Result<Vec<SegmentRef>, Fault> {
        match &self.locator {
            SourceLocator::Http(url) => {
                let body = self.get(url.as_str())?;
                let text = String::from_utf8(body)
                    .map_err(|_| Fault::new(FailureKind::Server, "playlist is not UTF-8", true))?;
                parse_playlist(url, &text)
            }
            SourceLocator::Directory(dir) => list_dir(dir),
        }
    }

    pub fn fetch(&self, seg: &SegmentRef) -> Result<Vec<u8>, Fault> {
        match &self.locator {
            SourceLocator::Http(_) => self.get(&seg.uri),
            SourceLocator::Directory(_) => std::fs::read(&seg.uri)
                .map_err(|e| Fault::new(FailureKind::Client, format!("{}: {e}", seg.uri), false)),
        }
    }

    fn get(&self, url: &str) -> Result<Vec<u8>, Fault> {
        let client = self.http.as_ref().expect("http client for http locator");
        let resp = client.get(url).send().map_err(|e| classify_transport(&e))?;
        if let Some(f) = classify_status(resp.status()) {
            return Err(f);
        }
        resp.bytes().map(|b| b.to_vec()).map_err(|e| classify_transport(&e))
    }
}

pub fn parse_playlist(base: &Url, text: &str) -> Result<Vec<SegmentRef>, Fault> {
    let mut out = Vec::new();
    let mut hint = None;
    for line in text.lines().map(str::trim) {
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#EXTINF:") {
            hint = rest.split(',').next().and_then(|d| d.trim().parse::<f64>().ok());
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let uri = base
            .join(line)
            .map_err(|e| Fault::new(FailureKind::Server, format!("bad playlist entry {line:?}: {e}"), true))?;
        out.push(SegmentRef {
            uri: uri.to_string(),
            duration_hint: hint.take(),
        });
    }
    Ok(out)
}

fn list_dir(dir: &Path) -> Result<Vec<SegmentRef>, Fault> {
    let rd = std::fs::read_dir(dir)
        .map_err(|e| Fault::new(FailureKind::Client, format!("{}: {e}", dir.display()), false))?;
    let mut files = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Fault::new(FailureKind::Client, e.to_string(), false))?;
        let name = entry.file_name();
        if name.to_string_lossy().starts_with('.') {
            continue;
        }
        if entry.file_type().map(|t| t.is_file()).unwrap_or(false) {
            files.push(entry.path());
        }
    }
    files.sort();
    Ok(files
        .into_iter()
        .map(|p| SegmentRef {
            uri: p.to_string_lossy().into_owned(),
            duration_hint: None,
        })
        .collect())
}
