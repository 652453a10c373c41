use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("unknown template {0:?}")]
    Unknown(String),
    #[error("template {template:?}: placeholder {{{name}}} is not bound")]
    Unbound { template: String, name: String },
    #[error("template {template:?}: unterminated placeholder")]
    Unterminated { template: String },
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

/// A rendered template together with the bindings that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub template: String,
    pub bindings: BTreeMap<String, String>,
    pub text: String,
}

impl Prompt {
    pub fn binding(&self, name: &str) -> &str {
        self.bindings.get(name).map(String::as_str).unwrap_or("")
    }
}

const BUILTIN: &[(&str, &str)] = &[
    ("questioner", include_str!("../../../../templates/questioner.txt")),
    ("filter", include_str!("../../../../templates/filter.txt")),
    ("summarizer", include_str!("../../../../templates/summarizer.txt")),
    ("prompt_refiner", include_str!("../../../../templates/prompt_refiner.txt")),
    ("answer", include_str!("../../../../templates/answer.txt")),
    ("discrepancy", include_str!("../../../../templates/discrepancy.txt")),
];

/// Named prompt templates with `{placeholder}` slots. `{{` and `}}` are literal braces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateStore {
    templates: HashMap<String, String>,
}

impl Default for TemplateStore {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateStore {
    pub fn builtin() -> Self {
        TemplateStore {
            templates: BUILTIN
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    /// Built-in templates overridden by any `<name>.txt` found in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut store = Self::builtin();
        let io_err = |e: std::io::Error| TemplateError::Io {
            path: dir.display().to_string(),
            message: e.to_string(),
        };
        for entry in fs::read_dir(dir).map_err(io_err)? {
            let path = entry.map_err(io_err)?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(name) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let body = fs::read_to_string(&path).map_err(|e| TemplateError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            store.templates.insert(name.to_string(), body);
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: impl Into<String>, body: impl Into<String>) {
        self.templates.insert(name.into(), body.into());
    }

    pub fn render<K, V>(
        &self,
        name: &str,
        bindings: impl IntoIterator<Item = (K, V)>,
    ) -> Result<Prompt, TemplateError>
    where
        K: Into<String>,
        V: Into<String>,
    {
        let body = self
            .templates
            .get(name)
            .ok_or_else(|| TemplateError::Unknown(name.to_string()))?;
        let bindings: BTreeMap<String, String> = bindings
            .into_iter()
            .map(|(k, v)| (k.into(), v.into()))
            .collect();
        let text = substitute(name, body, &bindings)?;
        Ok(Prompt {
            template: name.to_string(),
            bindings,
            text,
        })
    }
}

fn substitute(
    name: &str,
    body: &str,
    bindings: &BTreeMap<String, String>,
) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(body.len());
    let mut rest = body;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(r) = tail.strip_prefix("{{") {
            out.push('{');
            rest = r;
        } else if let Some(r) = tail.strip_prefix("}}").or_else(|| tail.strip_prefix('}')) {
            out.push('}');
            rest = r;
        } else {
            let end = tail.find('}').ok_or_else(|| TemplateError::Unterminated {
                template: name.to_string(),
            })?;
            let key = &tail[1..end];
            let value = bindings.get(key).ok_or_else(|| TemplateError::Unbound {
                template: name.to_string(),
                name: key.to_string(),
            })?;
            out.push_str(value);
            rest = &tail[end + 1..];
        }
    }
    out.push_str(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_bound_placeholders_and_escapes() {
        let mut store = TemplateStore::builtin();
        store.insert("t", "Hello {name}, {{literal}} {name}!");
        let p = store.render("t", [("name", "world")]).unwrap();
        assert_eq!(p.text, "Hello world, {literal} world!");
        assert_eq!(p.binding("name"), "world");
    }

    #[test]
    fn unbound_placeholder_is_an_error() {
        let store = TemplateStore::builtin();
        let err = store.render("filter", [("question", "q")]).unwrap_err();
        assert!(matches!(err, TemplateError::Unbound { .. }));
    }

    #[test]
    fn unknown_template() {
        let store = TemplateStore::builtin();
        assert_eq!(
            store.render("nope", Vec::<(String, String)>::new()),
            Err(TemplateError::Unknown("nope".into()))
        );
    }

    #[test]
    fn directory_overrides_builtin() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("filter.txt"), "Q={question}").unwrap();
        let store = TemplateStore::load_dir(dir.path()).unwrap();
        assert_eq!(store.render("filter", [("question", "x")]).unwrap().text, "Q=x");
        assert!(store.render("summarizer", [("description", "d")]).is_err());
    }
}
