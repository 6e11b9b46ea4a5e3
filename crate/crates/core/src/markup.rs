//! Minimal named-tag markup shared by every model-facing text format.
//!
//! Model outputs are split into sections with `<name>...</name>` blocks. Tags
//! do not nest; the first opening tag of a name pairs with the first closing
//! tag that follows it.

/// A located tag block inside a larger text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TagSpan<'a> {
    /// Byte offset of the opening `<`.
    pub start: usize,
    /// Byte offset one past the closing `>`.
    pub end: usize,
    pub inner: &'a str,
}

pub fn find_tag<'a>(text: &'a str, name: &str) -> Option<TagSpan<'a>> {
    find_tag_from(text, name, 0)
}

fn find_tag_from<'a>(text: &'a str, name: &str, from: usize) -> Option<TagSpan<'a>> {
    let open = format!("<{name}>");
    let close = format!("</{name}>");
    let rest = text.get(from..)?;
    let open_at = from + rest.find(&open)?;
    let inner_start = open_at + open.len();
    let close_rel = text[inner_start..].find(&close)?;
    let inner_end = inner_start + close_rel;
    Some(TagSpan {
        start: open_at,
        end: inner_end + close.len(),
        inner: &text[inner_start..inner_end],
    })
}

/// Trimmed inner text of the first `<name>` block.
pub fn tag_text<'a>(text: &'a str, name: &str) -> Option<&'a str> {
    find_tag(text, name).map(|s| s.inner.trim())
}

/// Trimmed inner texts of every `<name>` block, in order.
pub fn all_tags<'a>(text: &'a str, name: &str) -> Vec<&'a str> {
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(span) = find_tag_from(text, name, from) {
        out.push(span.inner.trim());
        from = span.end;
    }
    out
}

/// Wraps `body` in a named tag.
pub fn wrap(name: &str, body: &str) -> String {
    format!("<{name}>{body}</{name}>")
}
