//! Tolerant extraction of JSON objects from model completions.
//!
//! Models wrap their JSON in code fences, prepend chatter, or append prose.
//! These helpers implement the shared salvage steps: fence stripping and
//! locating the first balanced `{...}` span (string- and escape-aware).

/// Strips a leading/trailing markdown code fence (``` or ```json) if the
/// text is fenced; otherwise returns the input unchanged.
pub fn strip_code_fences(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return text;
    };
    // drop the info string (e.g. "json") up to the first newline
    let body = match rest.find('\n') {
        Some(i) => &rest[i + 1..],
        None => return text,
    };
    match body.rfind("```") {
        Some(end) => &body[..end],
        None => body,
    }
}

/// Returns the first balanced `{...}` span in the text, honoring JSON
/// string literals and escapes so braces inside strings don't count.
pub fn first_balanced_object(text: &str) -> Option<&str> {
    let bytes = text.as_bytes();
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..=i]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Finds the JSON string value following `"key"` by scanning, without
/// requiring the surrounding text to parse. Handles standard escapes.
pub fn scan_string_after_key(text: &str, key: &str) -> Option<String> {
    let needle = format!("\"{key}\"");
    let at = text.find(&needle)? + needle.len();
    let rest = text[at..].trim_start();
    let rest = rest.strip_prefix(':')?.trim_start();
    let mut chars = rest.char_indices();
    match chars.next() {
        Some((_, '"')) => {}
        _ => return None,
    }
    let mut out = String::new();
    let mut escaped = false;
    for (_, c) in chars {
        if escaped {
            match c {
                'n' => out.push('\n'),
                't' => out.push('\t'),
                'r' => out.push('\r'),
                other => out.push(other),
            }
            escaped = false;
        } else if c == '\\' {
            escaped = true;
        } else if c == '"' {
            return Some(out);
        } else {
            out.push(c);
        }
    }
    None
}

/// Finds a bare or quoted numeric token following `"key"`. Returns the
/// numeric text (e.g. `"8"`, `"8.5"`, `"-1"`).
pub fn scan_number_after_key(text: &str, key: &str) -> Option<String> {
    let needle = format!("\"{key}\"");
    let at = text.find(&needle)? + needle.len();
    let rest = text[at..].trim_start();
    let rest = rest.strip_prefix(':')?.trim_start();
    let rest = rest.strip_prefix('"').unwrap_or(rest);
    let token: String = rest
        .chars()
        .take_while(|c| c.is_ascii_digit() || *c == '.' || *c == '-' || *c == '+')
        .collect();
    if token.is_empty() || token.chars().all(|c| !c.is_ascii_digit()) {
        None
    } else {
        Some(token)
    }
}
