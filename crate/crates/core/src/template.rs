//! Versioned prompt templates.
//!
//! Templates are plain text files named `<name>.v<version>.txt` with
//! `{{placeholder}}` slots. Defaults ship inside the binary; a directory
//! given in the config overrides any file it contains, so prompt edits are
//! reviewable as file diffs. Every rendered prompt records the template's
//! name, version and digest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("template {template} uses placeholder {{{{{name}}}}} with no value")]
    MissingValue { template: String, name: String },
    #[error("template {template} has an unterminated placeholder")]
    Unterminated { template: String },
    #[error("no template named {0}")]
    Unknown(String),
    #[error("cannot read template override {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub name: String,
    pub version: u32,
    pub text: String,
}

/// Identification of the template behind a rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateRef {
    pub name: String,
    pub version: u32,
    pub digest: String,
}

impl Template {
    pub fn new(name: impl Into<String>, version: u32, text: impl Into<String>) -> Self {
        Template {
            name: name.into(),
            version,
            text: text.into(),
        }
    }

    pub fn reference(&self) -> TemplateRef {
        TemplateRef {
            name: self.name.clone(),
            version: self.version,
            digest: sha256_hex(self.text.as_bytes())[..16].to_string(),
        }
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Result<Vec<String>, TemplateError> {
        let mut names = Vec::new();
        let mut rest = self.text.as_str();
        while let Some(start) = rest.find("{{") {
            let after = &rest[start + 2..];
            let end = after.find("}}").ok_or_else(|| TemplateError::Unterminated {
                template: self.name.clone(),
            })?;
            let name = after[..end].trim().to_string();
            if !names.contains(&name) {
                names.push(name);
            }
            rest = &after[end + 2..];
        }
        Ok(names)
    }

    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.text.len());
        let mut rest = self.text.as_str();
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let end = after.find("}}").ok_or_else(|| TemplateError::Unterminated {
                template: self.name.clone(),
            })?;
            let name = after[..end].trim();
            let value = values
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| TemplateError::MissingValue {
                    template: self.name.clone(),
                    name: name.to_string(),
                })?;
            out.push_str(value);
            rest = &after[end + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

macro_rules! builtin {
    ($name:literal, $version:literal) => {
        (
            $name,
            $version,
            include_str!(concat!("../assets/templates/", $name, ".v", $version, ".txt")),
        )
    };
}

const BUILTIN: &[(&str, u32, &str)] = &[
    builtin!("segment_system", 1),
    builtin!("segment_user", 1),
    builtin!("directive_system", 1),
    builtin!("directive_user", 1),
    builtin!("caption_system", 1),
    builtin!("caption_user", 1),
    builtin!("describe_system", 1),
    builtin!("describe_user", 1),
    builtin!("baseline_caption_system", 1),
    builtin!("baseline_caption_user", 1),
    builtin!("retry_feedback", 1),
];

/// The active template for every prompt name.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    templates: BTreeMap<String, Template>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            templates: BUILTIN
                .iter()
                .map(|(name, version, text)| (name.to_string(), Template::new(*name, *version, *text)))
                .collect(),
        }
    }
}

impl TemplateSet {
    /// Built-in templates, replaced by any `<name>.v<version>.txt` found in `dir`.
    /// When a directory holds several versions of one name, the highest wins.
    pub fn with_overrides(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = TemplateSet::default();
        let entries = std::fs::read_dir(dir).map_err(|e| TemplateError::Io {
            path: dir.display().to_string(),
            message: e.to_string(),
        })?;
        let mut found: Vec<Template> = Vec::new();
        for entry in entries.flatten() {
            let file_name = entry.file_name().to_string_lossy().into_owned();
            let Some(stem) = file_name.strip_suffix(".txt") else { continue };
            let Some((name, version)) = stem.rsplit_once(".v") else { continue };
            let Ok(version) = version.parse::<u32>() else { continue };
            if !set.templates.contains_key(name) {
                continue;
            }
            let text = std::fs::read_to_string(entry.path()).map_err(|e| TemplateError::Io {
                path: entry.path().display().to_string(),
                message: e.to_string(),
            })?;
            found.push(Template::new(name, version, text));
        }
        found.sort_by_key(|t| t.version);
        for t in found {
            set.templates.insert(t.name.clone(), t);
        }
        Ok(set)
    }

    pub fn get(&self, name: &str) -> Result<&Template, TemplateError> {
        self.templates
            .get(name)
            .ok_or_else(|| TemplateError::Unknown(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Template> {
        self.templates.values()
    }

    /// Render the `<stage>_system` and `<stage>_user` templates with one set of values.
    pub fn render_prompt(&self, stage: &str, values: &[(&str, &str)]) -> Result<Prompt, TemplateError> {
        let system = self.get(&format!("{stage}_system"))?;
        let user = self.get(&format!("{stage}_user"))?;
        Ok(Prompt {
            system: system.render(values)?,
            user: user.render(values)?,
            templates: vec![system.reference(), user.reference()],
        })
    }
}

/// A rendered system/user message pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub system: String,
    pub user: String,
    pub templates: Vec<TemplateRef>,
}
