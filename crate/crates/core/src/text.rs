//! Parsing of model answers: labeled fields, candidate lists and ranked
//! sign names, plus fuzzy resolution of names against the catalog.

use std::collections::{BTreeMap, HashSet};
use std::sync::OnceLock;

use regex::Regex;

use crate::dataset::{ClassRef, TemplateCatalog};

/// Lowercase, every non-alphanumeric run collapsed to one space, trimmed.
pub fn normalize(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut pending_space = false;
    for ch in s.chars() {
        if ch.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.extend(ch.to_lowercase());
        } else {
            pending_space = true;
        }
    }
    out
}

fn strip_decoration(s: &str) -> &str {
    s.trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '*' | '#' | '-' | '>' | '_' | '`'))
}

/// If `segment` starts with one of `labels` followed by a colon, returns the
/// label index and the text after the colon.
fn match_label<'a>(segment: &'a str, labels: &[&str]) -> Option<(usize, &'a str)> {
    let s = strip_decoration(segment);
    for (i, label) in labels.iter().enumerate() {
        let Some(head) = s.get(..label.len()) else {
            continue;
        };
        if !head.eq_ignore_ascii_case(label) {
            continue;
        }
        let rest = s[label.len()..].trim_start_matches(['*', '_', ' ']);
        if let Some(value) = rest.strip_prefix(':') {
            return Some((i, value.trim_start_matches(['*', '_']).trim()));
        }
    }
    None
}

/// Splits answers of the shape `Label: value` into fields.
///
/// Labels are matched case-insensitively at the start of a line (after
/// markdown bullets or emphasis) or right after a `|` separator. A field's
/// value runs until the next label or a blank line; text before the first
/// label is ignored. When a label repeats, the last occurrence wins.
pub fn parse_labeled(text: &str, labels: &[&str]) -> BTreeMap<String, String> {
    let mut out: BTreeMap<String, String> = BTreeMap::new();
    let mut current: Option<usize> = None;
    let mut buf = String::new();
    let flush = |cur: Option<usize>, buf: &mut String, out: &mut BTreeMap<String, String>| {
        if let Some(i) = cur {
            out.insert(labels[i].to_ascii_lowercase(), buf.trim().to_string());
        }
        buf.clear();
    };
    for line in text.lines() {
        if line.trim().is_empty() {
            flush(current.take(), &mut buf, &mut out);
            continue;
        }
        let segments: Vec<&str> = if line.contains('|') {
            let parts: Vec<&str> = line.split('|').collect();
            if parts.iter().skip(1).any(|p| match_label(p, labels).is_some()) {
                parts
            } else {
                vec![line]
            }
        } else {
            vec![line]
        };
        for seg in segments {
            if let Some((i, value)) = match_label(seg, labels) {
                flush(current.take(), &mut buf, &mut out);
                current = Some(i);
                buf.push_str(value);
            } else if current.is_some() {
                if !buf.is_empty() {
                    buf.push('\n');
                }
                buf.push_str(seg.trim());
            }
        }
    }
    flush(current, &mut buf, &mut out);
    out
}

fn enumerator_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(\d{1,3})[.)](?:\s+|$)").expect("valid regex"))
}

/// Enumerator matches that start a token: at the text start or after
/// whitespace or an opening bracket.
fn enumerators(text: &str) -> impl Iterator<Item = regex::Captures<'_>> {
    enumerator_re().captures_iter(text).filter(move |c| {
        let start = c.get(0).expect("match").start();
        text[..start]
            .chars()
            .next_back()
            .is_none_or(|p| p.is_whitespace() || p == '(' || p == '[')
    })
}

fn strip_item_marker(s: &str) -> &str {
    let s = s.trim().trim_start_matches(['-', '*', '•']).trim();
    match enumerators(s).next() {
        Some(c) if c.get(0).expect("match").start() == 0 => s[c.get(0).expect("match").end()..].trim(),
        _ => s,
    }
}

/// Splits a candidate list (`A; B; C`, one per line, or comma separated).
pub fn split_candidates(value: &str) -> Vec<String> {
    let mut items: Vec<String> = value
        .split(['\n', ';'])
        .map(strip_item_marker)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    if items.len() == 1 && items[0].contains(',') {
        items = items[0]
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
    }
    items
        .into_iter()
        .map(|s| s.trim_end_matches(['.', ',']).to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Numbered items `1. …`, `2) …` in order. Numbers must run 1, 2, 3 …;
/// digits inside names (e.g. "limit 50.") therefore do not split items.
pub fn enumerated_items(text: &str) -> Vec<String> {
    let mut expected = 1u32;
    let mut marks: Vec<(usize, usize)> = Vec::new();
    for caps in enumerators(text) {
        let n: u32 = caps[1].parse().unwrap_or(0);
        if n == expected {
            let whole = caps.get(0).expect("match");
            marks.push((whole.start(), whole.end()));
            expected += 1;
        }
    }
    marks
        .iter()
        .enumerate()
        .map(|(i, &(_, body_start))| {
            let end = marks.get(i + 1).map_or(text.len(), |m| m.0);
            text[body_start..end].trim().to_string()
        })
        .filter(|s| !s.is_empty())
        .collect()
}

/// Name matcher built once per catalog.
#[derive(Debug, Clone)]
pub struct NameResolver<'a> {
    catalog: &'a TemplateCatalog,
    names: Vec<(String, &'a ClassRef)>,
}

impl<'a> NameResolver<'a> {
    pub fn new(catalog: &'a TemplateCatalog) -> Self {
        let names = catalog
            .classes()
            .iter()
            .map(|c| (normalize(&c.display_name), c))
            .collect();
        NameResolver { catalog, names }
    }

    pub fn catalog(&self) -> &'a TemplateCatalog {
        self.catalog
    }

    /// Resolves a free-text sign name by normalized containment.
    ///
    /// Preference order: exact match; a display name contained in the
    /// candidate (earliest occurrence, then longest name); the candidate
    /// contained in a display name (shortest name). Ties fall to the
    /// smaller class id because the catalog is sorted.
    pub fn resolve(&self, candidate: &str) -> Option<&'a ClassRef> {
        let nc = normalize(candidate);
        if nc.is_empty() {
            return None;
        }
        if let Some((_, c)) = self.names.iter().find(|(n, _)| *n == nc) {
            return Some(c);
        }
        let padded = format!(" {nc} ");
        let mut best: Option<(usize, usize, &ClassRef)> = None;
        for (n, c) in &self.names {
            if n.is_empty() {
                continue;
            }
            if let Some(pos) = padded.find(&format!(" {n} ")) {
                let better = match best {
                    None => true,
                    Some((bp, bl, _)) => pos < bp || (pos == bp && n.len() > bl),
                };
                if better {
                    best = Some((pos, n.len(), c));
                }
            }
        }
        if let Some((_, _, c)) = best {
            return Some(c);
        }
        if nc.len() < 3 {
            return None;
        }
        self.names
            .iter()
            .filter(|(n, _)| n.contains(&nc))
            .min_by_key(|(n, _)| n.len())
            .map(|(_, c)| *c)
    }

    /// Classes whose display name occurs in `text` on word boundaries,
    /// dropping names that only occur inside a longer found name.
    pub fn mentioned(&self, text: &str) -> Vec<&'a ClassRef> {
        let padded = format!(" {} ", normalize(text));
        let found: Vec<&(String, &ClassRef)> = self
            .names
            .iter()
            .filter(|(n, _)| !n.is_empty() && padded.contains(&format!(" {n} ")))
            .collect();
        found
            .iter()
            .filter(|(n, _)| {
                !found
                    .iter()
                    .any(|(m, _)| m.len() > n.len() && format!(" {m} ").contains(&format!(" {n} ")))
            })
            .map(|(_, c)| *c)
            .collect()
    }
}

fn answer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^[\s*#>_-]*(?:final\s+)?answer[\s*_]*:").expect("valid regex"))
}

/// Ranked class list from a recognition answer.
///
/// Only the text after the last `Answer:` label is considered when present.
/// Numbered items are resolved in order, unmatched items skipped,
/// duplicates dropped (first occurrence kept) and the list cut at `k_max`.
/// Without numbering, a text naming exactly one catalog class yields that
/// class alone.
pub fn parse_ranked_answer(text: &str, catalog: &TemplateCatalog, k_max: usize) -> Vec<ClassRef> {
    let resolver = NameResolver::new(catalog);
    let focus = match answer_re().find_iter(text).last() {
        Some(m) => &text[m.end()..],
        None => text,
    };
    let items = enumerated_items(focus);
    let mut seen = HashSet::new();
    let mut ranked = Vec::new();
    if items.is_empty() {
        let mentioned = resolver.mentioned(focus);
        if let [only] = mentioned.as_slice() {
            ranked.push((*only).clone());
        }
    } else {
        for item in items {
            // Only the first line of an item names the sign.
            let head = item.lines().next().unwrap_or_default();
            if let Some(c) = resolver.resolve(head) {
                if seen.insert(c.class_id.as_str()) {
                    ranked.push(c.clone());
                }
            }
        }
    }
    ranked.truncate(k_max);
    ranked
}
