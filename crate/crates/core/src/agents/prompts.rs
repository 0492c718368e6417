use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {name}: missing `version:` header followed by `---`")]
    MissingHeader { name: String },
    #[error("template {template}: no value for placeholder {{{{{placeholder}}}}}")]
    MissingValue { template: String, placeholder: String },
    #[error("template {template}: unterminated placeholder")]
    Unterminated { template: String },
    #[error("reading template {path}: {reason}")]
    Io { path: String, reason: String },
}

/// Text with `{{name}}` placeholders and a version tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub version: String,
    pub body: String,
}

impl PromptTemplate {
    /// Parses `version: <tag>` and a `---` line ahead of the body.
    pub fn parse(name: &str, text: &str) -> Result<Self, TemplateError> {
        let missing = || TemplateError::MissingHeader { name: name.to_string() };
        let (head, body) = text.split_once("\n---\n").ok_or_else(missing)?;
        let version = head
            .trim()
            .strip_prefix("version:")
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .ok_or_else(missing)?;
        Ok(Self {
            name: name.to_string(),
            version,
            body: body.to_string(),
        })
    }

    pub fn placeholders(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut rest = self.body.as_str();
        while let Some(start) = rest.find("{{") {
            let Some(end) = rest[start..].find("}}") else { break };
            out.push(rest[start + 2..start + end].trim().to_string());
            rest = &rest[start + end + 2..];
        }
        out
    }

    /// Substitutes every placeholder. Values are inserted verbatim and never
    /// re-expanded.
    pub fn render(&self, values: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.body.len());
        let mut rest = self.body.as_str();
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let end = rest[start..].find("}}").ok_or_else(|| TemplateError::Unterminated {
                template: self.name.clone(),
            })?;
            let key = rest[start + 2..start + end].trim();
            let value = values.get(key).ok_or_else(|| TemplateError::MissingValue {
                template: self.name.clone(),
                placeholder: key.to_string(),
            })?;
            out.push_str(value);
            rest = &rest[start + end + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLibrary {
    pub recording_observer: PromptTemplate,
    pub trajectory_analyzer: PromptTemplate,
    pub report_generator: PromptTemplate,
}

const FILES: [&str; 3] = ["recording_observer", "trajectory_analyzer", "report_generator"];

impl PromptLibrary {
    pub fn builtin() -> Self {
        let t = |name, text| PromptTemplate::parse(name, text).expect("built-in template");
        Self {
            recording_observer: t(FILES[0], include_str!("../../prompts/recording_observer.txt")),
            trajectory_analyzer: t(FILES[1], include_str!("../../prompts/trajectory_analyzer.txt")),
            report_generator: t(FILES[2], include_str!("../../prompts/report_generator.txt")),
        }
    }

    /// Loads `<name>.txt` for each agent from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let load = |name: &str| {
            let path = dir.join(format!("{name}.txt"));
            let text = std::fs::read_to_string(&path).map_err(|e| TemplateError::Io {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
            PromptTemplate::parse(name, &text.replace("\r\n", "\n"))
        };
        Ok(Self {
            recording_observer: load(FILES[0])?,
            trajectory_analyzer: load(FILES[1])?,
            report_generator: load(FILES[2])?,
        })
    }

    pub fn versions(&self) -> Vec<String> {
        [&self.recording_observer, &self.trajectory_analyzer, &self.report_generator]
            .iter()
            .map(|t| t.version.clone())
            .collect()
    }
}
