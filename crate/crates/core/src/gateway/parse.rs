use std::sync::OnceLock;

use regex::Regex;

fn item_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:\d+[.)]|-)\s+(.*\S)\s*$").expect("valid regex"))
}

/// Extracts list items written as `1.`, `1)` or `-` bullets. Every other
/// line (preambles, blank lines, closing remarks) is ignored.
pub fn parse_caption_list(reply: &str) -> Vec<String> {
    reply
        .lines()
        .filter_map(|line| item_pattern().captures(line))
        .map(|c| strip_quotes(c[1].trim()).to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn strip_quotes(s: &str) -> &str {
    let s = s.trim();
    for (open, close) in [('"', '"'), ('“', '”'), ('*', '*')] {
        if let Some(inner) = s.strip_prefix(open).and_then(|r| r.strip_suffix(close)) {
            return inner.trim();
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_all_bullet_styles() {
        let reply = "Here are captions:\n1. A man runs.\n2) A dog barks.\n- Rain falls.\n\nHope this helps!";
        assert_eq!(
            parse_caption_list(reply),
            vec!["A man runs.", "A dog barks.", "Rain falls."]
        );
    }

    #[test]
    fn ignores_unnumbered_lines() {
        assert!(parse_caption_list("just text\n* starred").is_empty());
        assert_eq!(parse_caption_list("10. \"Quoted caption\""), vec!["Quoted caption"]);
    }
}
