//! Line scanner for the `key = value` files used by configs and manifests:
//! `[section]` headers, one pair per line, `#` comment lines, blank lines.

use crate::{Error, Result};

pub(crate) enum Line<'a> {
    Section(&'a str),
    Pair { key: &'a str, value: &'a str },
}

/// Split `text` into section headers and key/value pairs, keeping 1-based
/// line numbers for error messages.
pub(crate) fn scan(text: &str) -> Result<Vec<(usize, Line<'_>)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(body) = line.strip_prefix('[') {
            let name = body.strip_suffix(']').ok_or_else(|| {
                Error::config(format!("line {lineno}: unterminated section header"))
            })?;
            out.push((lineno, Line::Section(name.trim())));
        } else if let Some((key, value)) = line.split_once('=') {
            out.push((lineno, Line::Pair { key: key.trim(), value: value.trim() }));
        } else {
            return Err(Error::config(format!(
                "line {lineno}: expected `key = value` or `[section]`, found {line:?}"
            )));
        }
    }
    Ok(out)
}

pub(crate) fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, found {value:?}"))),
    }
}
