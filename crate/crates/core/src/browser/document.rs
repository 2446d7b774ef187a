use serde::{Deserialize, Serialize};

use crate::http::{Method, Uri};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocumentKind {
    IdpLoginForm,
    IdpConsentPage,
    RpPage,
    AttackerPage,
    ExtractorPage,
    ErrorPage,
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    ClickLink,
    SubmitForm,
    LoadImage,
    RunExtractor,
    Xhr,
}

/// Something a page lets the user (or its script) do: follow a link, submit
/// a form, load an `<img>`, run the token-extractor script, or fire an XHR.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    /// Name scripts use to pick this action off a page.
    pub label: String,
    pub kind: ActionKind,
    pub target: Uri,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub form_fields: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub custom_headers: Vec<(String, String)>,
    /// Request method for script-driven actions, when not the kind's default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script_method: Option<Method>,
}

impl Action {
    pub fn new(label: &str, kind: ActionKind, target: Uri) -> Self {
        Action {
            label: label.to_string(),
            kind,
            target,
            form_fields: Vec::new(),
            custom_headers: Vec::new(),
            script_method: None,
        }
    }

    /// Extractor script that sends what it reads from the fragment to
    /// `target` with `method` (`GET` puts the values in the query).
    pub fn extractor(label: &str, target: Uri, method: Method) -> Self {
        Action {
            script_method: Some(method),
            ..Self::new(label, ActionKind::RunExtractor, target)
        }
    }

    pub fn link(label: &str, target: Uri) -> Self {
        Self::new(label, ActionKind::ClickLink, target)
    }

    pub fn image(label: &str, target: Uri) -> Self {
        Self::new(label, ActionKind::LoadImage, target)
    }

    pub fn form(label: &str, target: Uri, fields: Vec<(String, String)>) -> Self {
        Action {
            form_fields: fields,
            ..Self::new(label, ActionKind::SubmitForm, target)
        }
    }

    pub fn with_header(mut self, name: &str, value: &str) -> Self {
        self.custom_headers
            .push((name.to_string(), value.to_string()));
        self
    }

    /// Fills in (or adds) a form field.
    pub fn with_field(mut self, name: &str, value: &str) -> Self {
        match self.form_fields.iter_mut().find(|(k, _)| k == name) {
            Some(slot) => slot.1 = value.to_string(),
            None => self.form_fields.push((name.to_string(), value.to_string())),
        }
        self
    }

    pub fn method(&self) -> Method {
        if let (ActionKind::RunExtractor | ActionKind::Xhr, Some(m)) =
            (self.kind, self.script_method)
        {
            return m;
        }
        match self.kind {
            ActionKind::SubmitForm | ActionKind::RunExtractor => Method::Post,
            ActionKind::Xhr if !self.form_fields.is_empty() => Method::Post,
            _ => Method::Get,
        }
    }
}

/// Page structure carried on a response: what kind of document the body is
/// and which actions it embeds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Page {
    pub kind: DocumentKind,
    pub actions: Vec<Action>,
}

impl Page {
    pub fn new(kind: DocumentKind) -> Self {
        Page {
            kind,
            actions: Vec::new(),
        }
    }

    pub fn with_action(mut self, action: Action) -> Self {
        self.actions.push(action);
        self
    }
}

/// A document the browser has rendered. Only extractor pages keep the
/// fragment of their URL; everywhere else it has been dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub url: Uri,
    pub kind: DocumentKind,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub actions: Vec<Action>,
}

impl Document {
    pub fn new(url: Uri, kind: DocumentKind) -> Self {
        let url = if kind == DocumentKind::ExtractorPage {
            url
        } else {
            url.without_fragment()
        };
        Document {
            url,
            kind,
            actions: Vec::new(),
        }
    }

    pub fn with_action(mut self, action: Action) -> Self {
        self.actions.push(action);
        self
    }

    pub fn action(&self, label: &str) -> Option<&Action> {
        self.actions.iter().find(|a| a.label == label)
    }
}
