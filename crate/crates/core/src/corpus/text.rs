//! Text cleaning and tokenization.

/// Strips HTML markup from a post body. Content of `<code>` elements (and
/// therefore of `<pre><code>` blocks) is dropped entirely, other tags are
/// removed, and the common character entities are decoded.
pub fn strip_html(html: &str) -> String {
    let mut out = String::with_capacity(html.len());
    let mut rest = html;
    let mut code_depth = 0usize;

    while let Some(lt) = rest.find('<') {
        if code_depth == 0 {
            out.push_str(&rest[..lt]);
        }
        let after = &rest[lt + 1..];
        let Some(gt) = after.find('>') else {
            // unterminated tag: treat the remainder as text
            if code_depth == 0 {
                out.push_str(&rest[lt..]);
            }
            rest = "";
            break;
        };
        let tag = after[..gt].trim();
        let (closing, name) = match tag.strip_prefix('/') {
            Some(n) => (true, n),
            None => (false, tag),
        };
        let name: String = name
            .chars()
            .take_while(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        if name == "code" && !tag.ends_with('/') {
            if closing {
                code_depth = code_depth.saturating_sub(1);
            } else {
                code_depth += 1;
            }
        }
        // tags separate words
        if code_depth == 0 {
            out.push(' ');
        }
        rest = &after[gt + 1..];
    }
    if code_depth == 0 {
        out.push_str(rest);
    }
    decode_entities(&out)
}

fn decode_entities(s: &str) -> String {
    if !s.contains('&') {
        return s.to_string();
    }
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(amp) = rest.find('&') {
        out.push_str(&rest[..amp]);
        let after = &rest[amp + 1..];
        let semi = after.find(';').filter(|&i| i <= 10);
        let decoded = semi.and_then(|i| {
            let ent = &after[..i];
            let c = match ent {
                "lt" => Some('<'),
                "gt" => Some('>'),
                "amp" => Some('&'),
                "quot" => Some('"'),
                "apos" => Some('\''),
                "nbsp" => Some(' '),
                _ => {
                    if let Some(hex) = ent.strip_prefix("#x").or_else(|| ent.strip_prefix("#X")) {
                        u32::from_str_radix(hex, 16).ok().and_then(char::from_u32)
                    } else if let Some(dec) = ent.strip_prefix('#') {
                        dec.parse::<u32>().ok().and_then(char::from_u32)
                    } else {
                        None
                    }
                }
            };
            c.map(|c| (c, i))
        });
        match decoded {
            Some((c, i)) => {
                out.push(c);
                rest = &after[i + 1..];
            }
            None => {
                out.push('&');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Tokens of a post's title and body, truncated to `max_tokens`.
pub fn post_tokens(title: &str, body: &str, max_tokens: usize) -> Vec<String> {
    let mut tokens = tokenize(title);
    tokens.extend(tokenize(body));
    tokens.truncate(max_tokens);
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strips_tags_and_code() {
        let html = "<p>How do I <b>mount</b> usb?</p><pre><code>mount -t vfat /dev/sda1</code></pre><p>thanks &amp; bye</p>";
        let text = strip_html(html);
        let toks = tokenize(&text);
        assert_eq!(toks, vec!["how", "do", "i", "mount", "usb", "thanks", "bye"]);
    }

    #[test]
    fn inline_code_is_removed() {
        assert_eq!(
            tokenize(&strip_html("use <code>foo()</code> here")),
            vec!["use", "here"]
        );
    }

    #[test]
    fn entities() {
        assert_eq!(decode_entities("a &lt;b&gt; &#65;&#x42; &bogus; &"), "a <b> AB &bogus; &");
    }

    #[test]
    fn tokenizer_is_deterministic_and_lowercases() {
        let a = tokenize("Black-Hole entropy, 2nd law!");
        assert_eq!(a, vec!["black", "hole", "entropy", "2nd", "law"]);
        assert_eq!(a, tokenize("Black-Hole entropy, 2nd law!"));
    }

    #[test]
    fn truncates_tail() {
        let t = post_tokens("a b", "c d e", 3);
        assert_eq!(t, vec!["a", "b", "c"]);
    }
}
