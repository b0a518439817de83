use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectiveKind {
    Lora,
    Hypernet,
}

impl fmt::Display for DirectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Lora => "lora",
            Self::Hypernet => "hypernet",
        })
    }
}

/// An adapter trigger `<kind:name:weight>` found in a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptDirective {
    pub kind: DirectiveKind,
    pub name: String,
    pub weight: f64,
}

fn parse_directive(raw: &str) -> Result<PromptDirective> {
    let bad = || Error::MalformedDirective(raw.to_string());
    let inner = &raw[1..raw.len() - 1];
    let parts: Vec<&str> = inner.split(':').collect();
    let [kind, name, weight] = parts.as_slice() else {
        return Err(bad());
    };
    let kind = match kind.trim() {
        "lora" => DirectiveKind::Lora,
        "hypernet" => DirectiveKind::Hypernet,
        _ => return Err(bad()),
    };
    let name = name.trim();
    let weight: f64 = weight.trim().parse().map_err(|_| bad())?;
    if name.is_empty() || !weight.is_finite() {
        return Err(bad());
    }
    Ok(PromptDirective {
        kind,
        name: name.to_string(),
        weight,
    })
}

/// Splits adapter directives out of a prompt. Angle-bracket words without a
/// colon (placeholder tokens) are left in the text. When directives were
/// removed, comma-separated segments left empty are dropped.
pub fn parse_prompt(raw: &str) -> Result<(String, Vec<PromptDirective>)> {
    let mut text = String::with_capacity(raw.len());
    let mut directives = Vec::new();
    let mut rest = raw;
    while let Some(open) = rest.find('<') {
        let Some(len) = rest[open..].find('>') else { break };
        let candidate = &rest[open..open + len + 1];
        text.push_str(&rest[..open]);
        if candidate[1..].contains('<') {
            text.push('<');
            rest = &rest[open + 1..];
            continue;
        }
        if candidate.contains(':') {
            directives.push(parse_directive(candidate)?);
        } else {
            text.push_str(candidate);
        }
        rest = &rest[open + len + 1..];
    }
    text.push_str(rest);
    if directives.is_empty() {
        return Ok((raw.to_string(), directives));
    }
    let kept: Vec<&str> = text.split(',').filter(|s| !s.trim().is_empty()).collect();
    Ok((kept.join(",").trim().to_string(), directives))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lora_trigger() {
        let (t, d) = parse_prompt("bridge,no humans,outdoors,<lora:aki:1>").unwrap();
        assert_eq!(t, "bridge,no humans,outdoors");
        assert_eq!(
            d,
            vec![PromptDirective {
                kind: DirectiveKind::Lora,
                name: "aki".into(),
                weight: 1.0
            }]
        );
    }

    #[test]
    fn hypernet_trigger_and_placeholders() {
        let (t, d) = parse_prompt("a picture of bridge, <hypernet:coral_shell_bridge:1>").unwrap();
        assert_eq!(t, "a picture of bridge");
        assert_eq!(d[0].kind, DirectiveKind::Hypernet);
        assert_eq!(d[0].name, "coral_shell_bridge");
        let raw = "a photo of a<the core bridge>";
        assert_eq!(parse_prompt(raw).unwrap(), (raw.to_string(), vec![]));
    }

    #[test]
    fn malformed_directives_are_named() {
        for raw in ["<lora:aki>", "x, <lora:aki:strong>", "<style:aki:1>", "<lora::1>"] {
            match parse_prompt(raw) {
                Err(Error::MalformedDirective(s)) => assert!(raw.contains(&s)),
                other => panic!("{raw}: {other:?}"),
            }
        }
    }

    #[test]
    fn clean_text_is_a_fixed_point() {
        let (t, _) = parse_prompt("a, <lora:x:0.5>, b,<hypernet:y:1>").unwrap();
        assert_eq!(t, "a, b");
        assert_eq!(parse_prompt(&t).unwrap(), (t.clone(), vec![]));
    }
}
