//! Small helpers over roxmltree shared by the document parsers.

use roxmltree::{Document, Node};

use crate::diag::Diagnostic;

pub(crate) fn pos(node: Node<'_, '_>) -> (u32, u32) {
    let p = node.document().text_pos_at(node.range().start);
    (p.row, p.col)
}

pub(crate) fn err(node: Node<'_, '_>, msg: impl Into<String>) -> Diagnostic {
    let (l, c) = pos(node);
    Diagnostic::error(msg).at(l, c)
}

pub(crate) fn parse_doc(text: &str) -> Result<Document<'_>, Diagnostic> {
    Document::parse(text).map_err(|e| {
        let p = e.pos();
        Diagnostic::error(format!("malformed XML: {e}")).at(p.row, p.col)
    })
}

pub(crate) fn elements<'a, 'i>(node: Node<'a, 'i>) -> impl Iterator<Item = Node<'a, 'i>> {
    node.children().filter(|n| n.is_element())
}

pub(crate) fn req_attr<'a>(node: Node<'a, '_>, name: &str) -> Result<&'a str, Diagnostic> {
    node.attribute(name).ok_or_else(|| {
        err(
            node,
            format!(
                "<{}> is missing required attribute `{name}`",
                node.tag_name().name()
            ),
        )
    })
}

/// Reject non-whitespace text content directly inside `node`.
pub(crate) fn check_no_text(node: Node<'_, '_>, out: &mut Vec<Diagnostic>) {
    for c in node.children() {
        if c.is_text() && !c.text().unwrap_or("").trim().is_empty() {
            out.push(err(c, format!("unexpected text inside <{}>", node.tag_name().name())));
        }
    }
}

pub(crate) fn escape_attr(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            c => out.push(c),
        }
    }
    out
}
