use std::fmt;

use super::{
    rough_tokens, ChatBackend, CompletionRequest, CompletionResponse, Source, TeacherError, Usage,
};
use crate::promptkit::numbered_list;

/// Deterministic re-rankers that read the candidate list from the request
/// hints rather than the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MockMode {
    /// Candidates in input order.
    Identity,
    /// Gold candidate first (when present), the rest in input order.
    Oracle,
    /// Candidates in reverse input order.
    Reverse,
}

impl fmt::Display for MockMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MockMode::Identity => "mock:identity",
            MockMode::Oracle => "mock:oracle",
            MockMode::Reverse => "mock:reverse",
        })
    }
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    mode: MockMode,
}

impl MockBackend {
    pub fn new(mode: MockMode) -> Self {
        Self { mode }
    }

    pub fn mode(&self) -> MockMode {
        self.mode
    }
}

impl ChatBackend for MockBackend {
    fn describe(&self) -> String {
        self.mode.to_string()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, TeacherError> {
        let hints = request.hints.as_ref().ok_or_else(|| {
            TeacherError::InvalidRequest("mock backends need candidate hints on the request".into())
        })?;
        let labels = &hints.candidate_labels;
        let ordered: Vec<&String> = match self.mode {
            MockMode::Identity => labels.iter().collect(),
            MockMode::Reverse => labels.iter().rev().collect(),
            MockMode::Oracle => match hints
                .gold_label
                .as_ref()
                .and_then(|g| labels.iter().position(|l| l == g))
            {
                Some(g) => std::iter::once(&labels[g])
                    .chain(labels.iter().enumerate().filter(|(i, _)| *i != g).map(|(_, l)| l))
                    .collect(),
                None => labels.iter().collect(),
            },
        };
        let text = numbered_list(&ordered);
        Ok(CompletionResponse {
            usage: Usage {
                prompt_tokens: rough_tokens(&request.prompt_text),
                completion_tokens: rough_tokens(&text),
            },
            text,
            source: Source::Mock,
        })
    }
}

type Responder = dyn Fn(&CompletionRequest) -> Result<String, TeacherError> + Send + Sync;

/// Backend driven by a closure; for scripted outputs and failure injection.
pub struct FnBackend {
    name: String,
    respond: Box<Responder>,
}

impl FnBackend {
    pub fn new(
        name: impl Into<String>,
        respond: impl Fn(&CompletionRequest) -> Result<String, TeacherError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            respond: Box::new(respond),
        }
    }
}

impl ChatBackend for FnBackend {
    fn describe(&self) -> String {
        self.name.clone()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, TeacherError> {
        let text = (self.respond)(request)?;
        Ok(CompletionResponse {
            usage: Usage {
                prompt_tokens: rough_tokens(&request.prompt_text),
                completion_tokens: rough_tokens(&text),
            },
            text,
            source: Source::Mock,
        })
    }
}
