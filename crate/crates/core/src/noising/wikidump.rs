//! Reader for MediaWiki XML revision dumps (`page`/`revision` structure),
//! plus plain-text snapshot directories.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::OnceLock;

use flate2::read::MultiGzDecoder;
use quick_xml::events::Event;
use quick_xml::Reader;
use regex::Regex;

use super::revision::{PageHistory, Snapshot};
use crate::error::{Error, Result};

/// Lossy wikitext-to-plain-text conversion.
pub fn strip_markup(wikitext: &str) -> String {
    static PATTERNS: OnceLock<Vec<(Regex, &'static str)>> = OnceLock::new();
    static NESTED: OnceLock<Vec<Regex>> = OnceLock::new();
    let nested = NESTED.get_or_init(|| {
        vec![
            Regex::new(r"\{\{[^{}]*\}\}").unwrap(),
            Regex::new(r"(?s)\{\|.*?\|\}").unwrap(),
            Regex::new(r"\[\[(?i:file|image|category):[^\[\]]*\]\]").unwrap(),
        ]
    });
    let patterns = PATTERNS.get_or_init(|| {
        vec![
            (Regex::new(r"(?s)<!--.*?-->").unwrap(), ""),
            (Regex::new(r"(?is)<ref[^>]*/>").unwrap(), ""),
            (Regex::new(r"(?is)<ref[^>]*>.*?</ref>").unwrap(), ""),
            (Regex::new(r"\[\[[^\[\]|]*\|([^\[\]]*)\]\]").unwrap(), "$1"),
            (Regex::new(r"\[\[([^\[\]]*)\]\]").unwrap(), "$1"),
            (Regex::new(r"\[https?://[^\s\]]+ ([^\]]*)\]").unwrap(), "$1"),
            (Regex::new(r"\[https?://[^\]]*\]").unwrap(), ""),
            (Regex::new(r"'{2,}").unwrap(), ""),
            (Regex::new(r"(?m)^=+[^\n]*=+\s*$").unwrap(), ""),
            (Regex::new(r"(?m)^[|!][^\n]*$").unwrap(), ""),
            (Regex::new(r"(?m)^[*#:;]+\s*").unwrap(), ""),
            (Regex::new(r"<[^>]*>").unwrap(), ""),
            (Regex::new(r"&nbsp;").unwrap(), " "),
        ]
    });

    let mut text = wikitext.to_string();
    for re in nested {
        loop {
            let next = re.replace_all(&text, "").into_owned();
            if next == text {
                break;
            }
            text = next;
        }
    }
    for (re, rep) in patterns {
        text = re.replace_all(&text, *rep).into_owned();
    }
    // newlines and tabs become spaces
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn BufRead>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(BufReader::new(MultiGzDecoder::new(f))))
    } else {
        Ok(Box::new(BufReader::new(f)))
    }
}

/// Streams pages from an XML dump, calling `on_page` for each one.
pub fn for_each_page<R: BufRead, F: FnMut(PageHistory)>(input: R, mut on_page: F) -> Result<()> {
    let mut reader = Reader::from_reader(input);
    reader.config_mut().trim_text(true);
    let mut buf = Vec::new();
    let mut path: Vec<Vec<u8>> = Vec::new();
    let mut page: Option<PageHistory> = None;
    let mut rev_ts = String::new();
    let mut rev_text = String::new();
    let mut text_acc = String::new();

    loop {
        let ev = reader
            .read_event_into(&mut buf)
            .map_err(|e| Error::Xml(format!("at byte {}: {e}", reader.buffer_position())))?;
        match ev {
            Event::Start(e) => {
                let name = e.local_name().as_ref().to_vec();
                match name.as_slice() {
                    b"page" => {
                        page = Some(PageHistory {
                            page_id: 0,
                            title: String::new(),
                            snapshots: Vec::new(),
                        })
                    }
                    b"revision" => {
                        rev_ts.clear();
                        rev_text.clear();
                    }
                    _ => {}
                }
                text_acc.clear();
                path.push(name);
            }
            Event::Text(t) => {
                let s = t.unescape().map_err(|e| Error::Xml(e.to_string()))?;
                text_acc.push_str(&s);
            }
            Event::CData(t) => text_acc.push_str(&String::from_utf8_lossy(&t)),
            Event::End(_) => {
                let name = path.pop().unwrap_or_default();
                let parent = path.last().map(Vec::as_slice);
                match (name.as_slice(), parent) {
                    (b"title", Some(b"page")) => {
                        if let Some(p) = page.as_mut() {
                            p.title = text_acc.clone();
                        }
                    }
                    (b"id", Some(b"page")) => {
                        if let Some(p) = page.as_mut() {
                            p.page_id = text_acc.trim().parse().map_err(|_| Error::Xml(format!("bad page id {text_acc:?}")))?;
                        }
                    }
                    (b"timestamp", Some(b"revision")) => rev_ts = text_acc.clone(),
                    (b"text", Some(b"revision")) => rev_text = text_acc.clone(),
                    (b"revision", _) => {
                        if let Some(p) = page.as_mut() {
                            p.snapshots.push(Snapshot {
                                timestamp: rev_ts.clone(),
                                text: strip_markup(&rev_text),
                            });
                        }
                    }
                    (b"page", _) => {
                        if let Some(mut p) = page.take() {
                            // dumps are chronological already; sort defensively by ISO timestamp
                            p.snapshots.sort_by(|a, b| a.timestamp.cmp(&b.timestamp));
                            on_page(p);
                        }
                    }
                    _ => {}
                }
                text_acc.clear();
            }
            Event::Eof => break,
            _ => {}
        }
        buf.clear();
    }
    Ok(())
}

/// Reads every page of a dump (`.xml` or `.xml.gz`) into memory.
pub fn read_dump(path: &Path) -> Result<Vec<PageHistory>> {
    let mut pages = Vec::new();
    for_each_page(open_maybe_gz(path)?, |p| pages.push(p))?;
    Ok(pages)
}

/// Reads a directory with one subdirectory per page; snapshot files within a
/// page are ordered by file name. Page ids follow sorted directory order.
pub fn read_snapshot_dir(dir: &Path) -> Result<Vec<PageHistory>> {
    let mut page_dirs: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    page_dirs.sort();
    let mut pages = Vec::new();
    for (id, pd) in page_dirs.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(pd)
            .map_err(|e| Error::io(pd, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut snapshots = Vec::new();
        for f in files {
            let text = std::fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
            snapshots.push(Snapshot {
                timestamp: f.file_name().unwrap_or_default().to_string_lossy().into_owned(),
                text: text.split_whitespace().collect::<Vec<_>>().join(" "),
            });
        }
        pages.push(PageHistory {
            page_id: id as u64,
            title: pd.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            snapshots,
        });
    }
    Ok(pages)
}
