use crate::error::{Error, Result};

use super::ImageTextPair;

const FILEWORDS: &str = "[filewords]";
const NAME: &str = "[name]";

/// Caption template with `[filewords]` and `[name]` markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

impl PromptTemplate {
    pub fn new(text: &str) -> Result<Self> {
        let mut found = false;
        let mut rest = text;
        while let Some(open) = rest.find('[') {
            let after = &rest[open..];
            let close = after
                .find(']')
                .ok_or_else(|| Error::invalid(format!("unterminated marker in template `{text}`")))?;
            let marker = &after[..=close];
            if marker != FILEWORDS && marker != NAME {
                return Err(Error::invalid(format!("unknown template marker `{marker}`")));
            }
            found = true;
            rest = &after[close + 1..];
        }
        if !found {
            return Err(Error::invalid(format!("template `{text}` has no markers")));
        }
        Ok(Self { text: text.to_string() })
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn render(&self, pair: &ImageTextPair, name: &str) -> Result<String> {
        self.render_tags(&pair.caption, name)
    }

    pub fn render_tags(&self, tags: &[String], name: &str) -> Result<String> {
        if name.trim().is_empty() {
            return Err(Error::invalid("template name is empty"));
        }
        Ok(self.text.replace(FILEWORDS, &tags.join(", ")).replace(NAME, name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn renders_hypernetwork_caption() {
        let t = PromptTemplate::new("a picture of [filewords], art by [name]").unwrap();
        assert_eq!(
            t.render_tags(&tags(&["bridge", "outdoors"]), "coral_shell_bridge").unwrap(),
            "a picture of bridge, outdoors, art by coral_shell_bridge"
        );
    }

    #[test]
    fn rejects_bad_templates() {
        assert!(PromptTemplate::new("a picture of a bridge").is_err());
        assert!(PromptTemplate::new("a [style] of [name]").is_err());
        assert!(PromptTemplate::new("a [name").is_err());
        let t = PromptTemplate::new("a photo of [name]").unwrap();
        assert!(t.render_tags(&[], " ").is_err());
    }
}
