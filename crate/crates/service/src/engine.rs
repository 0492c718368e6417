//! Pipeline wiring shared by the command line and the HTTP worker:
//! provider and anonymizer selection, normative data and run settings.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::Deserialize;

use oga_core::agents::{
    AgentError, AgentModels, Anonymizer, ExternalCommandAnonymizer, HttpProviderConfig, LlmProvider, MockProvider,
    OpenAiCompatibleProvider, PassThroughAnonymizer, PromptLibrary, PromptSink, MOCK_PROVIDER_ID,
};
use oga_core::normbase::{load_database, NormativeDatabase};
use oga_core::pipeline::{run_case, CaseBundle, CaseRun, Clock, InputConfig, PipelineContext, PipelineError};
use oga_core::wgs::{ReportTemplate, ScoringConfig};

use crate::store::{RunCompletion, RunFailure};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("unknown provider {0:?}")]
    UnknownProvider(String),
    #[error("provider file {path}: {message}")]
    ProviderFile { path: PathBuf, message: String },
    #[error("unknown anonymizer {0:?}; expected auto, none, pass-through or command:<path>")]
    UnknownAnonymizer(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// How frames are anonymized before dispatch.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum AnonymizerChoice {
    /// Pass-through for synthetic cases, nothing otherwise.
    #[default]
    Auto,
    None,
    PassThrough,
    Command(PathBuf),
}

impl FromStr for AnonymizerChoice {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(Self::Auto),
            "none" => Ok(Self::None),
            "pass-through" => Ok(Self::PassThrough),
            _ => match s.strip_prefix("command:") {
                Some(p) if !p.is_empty() => Ok(Self::Command(PathBuf::from(p))),
                _ => Err(EngineError::UnknownAnonymizer(s.to_string())),
            },
        }
    }
}

impl fmt::Display for AnonymizerChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Auto => f.write_str("auto"),
            Self::None => f.write_str("none"),
            Self::PassThrough => f.write_str("pass-through"),
            Self::Command(p) => write!(f, "command:{}", p.display()),
        }
    }
}

#[derive(Deserialize)]
struct ProviderFile {
    #[serde(default)]
    provider: Vec<HttpProviderConfig>,
}

/// Reads `[[provider]]` tables describing HTTP providers.
pub fn load_providers(path: &Path) -> Result<Vec<HttpProviderConfig>, EngineError> {
    let err = |message: String| EngineError::ProviderFile {
        path: path.to_path_buf(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let file: ProviderFile = toml::from_str(&text).map_err(|e| err(e.to_string()))?;
    let mut seen = std::collections::BTreeSet::new();
    for p in &file.provider {
        if p.id == MOCK_PROVIDER_ID || !seen.insert(p.id.clone()) {
            return Err(err(format!("provider id {:?} is reserved or repeated", p.id)));
        }
    }
    Ok(file.provider)
}

/// Per-run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub input: InputConfig,
    pub provider: String,
    pub runs: usize,
    pub seed: u64,
    pub template: ReportTemplate,
    pub parallel_runs: bool,
}

pub struct Engine {
    pub scoring: ScoringConfig,
    pub prompts: PromptLibrary,
    pub normative: Option<NormativeDatabase>,
    pub providers: BTreeMap<String, Arc<dyn LlmProvider>>,
    pub anonymizer: AnonymizerChoice,
    pub clock: Arc<dyn Clock>,
    /// Overrides the model id sent to the provider.
    pub model: Option<String>,
}

impl Engine {
    pub fn new(scoring: ScoringConfig, clock: Arc<dyn Clock>) -> Self {
        Self {
            scoring,
            prompts: PromptLibrary::builtin(),
            normative: None,
            providers: BTreeMap::new(),
            anonymizer: AnonymizerChoice::Auto,
            clock,
            model: None,
        }
    }

    pub fn with_normative_dir(mut self, dir: &Path) -> Result<Self, EngineError> {
        let db = load_database(dir).map_err(|e| PipelineError::Normative {
            trial: "-".into(),
            source: e,
        })?;
        self.normative = Some(db);
        Ok(self)
    }

    pub fn with_http_providers(mut self, configs: Vec<HttpProviderConfig>) -> Self {
        for c in configs {
            self.providers
                .insert(c.id.clone(), Arc::new(OpenAiCompatibleProvider::new(c)));
        }
        self
    }

    pub fn provider_ids(&self) -> Vec<String> {
        std::iter::once(MOCK_PROVIDER_ID.to_string())
            .chain(self.providers.keys().cloned())
            .collect()
    }

    pub fn has_provider(&self, id: &str) -> bool {
        id == MOCK_PROVIDER_ID || self.providers.contains_key(id)
    }

    /// The mock provider follows the case's own fixture when it has one.
    pub fn provider_for(&self, id: &str, bundle: &CaseBundle) -> Result<Arc<dyn LlmProvider>, EngineError> {
        if id == MOCK_PROVIDER_ID {
            return Ok(Arc::new(MockProvider::new(bundle.mock_fixture.clone().unwrap_or_default())));
        }
        self.providers
            .get(id)
            .cloned()
            .ok_or_else(|| EngineError::UnknownProvider(id.to_string()))
    }

    pub fn anonymizer_for(&self, bundle: &CaseBundle) -> Option<Box<dyn Anonymizer>> {
        match &self.anonymizer {
            AnonymizerChoice::Auto if bundle.synthetic => Some(Box::new(PassThroughAnonymizer)),
            AnonymizerChoice::Auto | AnonymizerChoice::None => None,
            AnonymizerChoice::PassThrough => Some(Box::new(PassThroughAnonymizer)),
            AnonymizerChoice::Command(program) => Some(Box::new(ExternalCommandAnonymizer {
                program: program.clone(),
                args: Vec::new(),
            })),
        }
    }

    pub fn run(
        &self,
        bundle: &CaseBundle,
        settings: &RunSettings,
        audit: Option<&dyn PromptSink>,
    ) -> Result<CaseRun, EngineError> {
        let provider = self.provider_for(&settings.provider, bundle)?;
        let anonymizer = self.anonymizer_for(bundle);
        let mut ctx = PipelineContext::new(provider.as_ref(), &self.scoring, &self.prompts, self.clock.as_ref());
        if let Some(model) = &self.model {
            ctx.models = AgentModels::single(model.clone());
        }
        ctx.normative = self.normative.as_ref();
        ctx.anonymizer = anonymizer.as_deref();
        ctx.audit = audit;
        ctx.template = settings.template;
        ctx.seed = settings.seed;
        ctx.parallel_runs = settings.parallel_runs;
        Ok(run_case(bundle, &settings.input, &ctx, settings.runs)?)
    }
}

/// Reports and failure records of a finished case run.
pub fn completion(run: &CaseRun) -> RunCompletion {
    let mut out = RunCompletion::default();
    for trial in &run.trials {
        for o in &trial.runs {
            match &o.result {
                Ok(r) => out.reports.push(r.report.clone()),
                Err(e) => out.failures.push(RunFailure {
                    trial_id: trial.trial_id.clone(),
                    run_index: o.run_index,
                    error: e.to_string(),
                    provider: matches!(e, AgentError::Provider(_)),
                }),
            }
        }
    }
    if out.reports.is_empty() {
        out.error = out.failures.first().map(|f| f.error.clone());
    }
    out
}
